// DestFormer: point 4D convolution, per-segment spatial transformer, max
// pooling, temporal encoder and classification head.
#pragma once

#include "maple/autodiff.hpp"
#include "maple/geometry.hpp"
#include "maple/random.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace maple::backbone {

struct BackboneConfig {
  int width = 64;  // D
  int kappa = 2;
  int zeta = 4;
  int spatial_blocks = 4;
  int temporal_blocks = 3;
  int heads = 8;
  double radius = 0.5;
  int neighbors = 8;
  int num_classes = 4;
  int head_hidden_dim = 0;  // 0 selects `width`
  double init_std = 0.02;

  void validate() const;
  int hidden_dim() const { return head_hidden_dim > 0 ? head_hidden_dim : width; }
  geometry::GroupingConfig grouping() const { return {radius, neighbors, kappa, zeta}; }
};

nlohmann::json to_json(const BackboneConfig& cfg);
BackboneConfig backbone_config_from_json(const nlohmann::json& j);

/// All backbone parameters, keyed "p4conv/...", "spatial/...", "temporal/...", "head/...".
using ModelParams = ParamStore;

ModelParams init_backbone_params(const BackboneConfig& cfg, std::uint64_t seed);

/// Adds a pre-norm attention block's parameters under `prefix`.
void add_attention_block_params(ParamStore& store, const std::string& prefix, int width, double init_std, Rng& rng);

// ---- value types -------------------------------------------------------------

/// Per-segment anchor features: row t * anchors + a.
struct ShortTermLocalFeature {
  int segments = 0;
  int anchors = 0;
  Matrix features;    // (segments * anchors) x D
  Matrix anchor_xyz;  // (segments * anchors) x 3
  std::vector<int> segment_time;
};

struct MergedLocalFeature {
  int segments = 0;
  int anchors = 0;
  Matrix features;
};

/// One D-dimensional token per temporal segment.
struct TokenSequence {
  Matrix tokens;  // L x D
  std::vector<int> time_index;
  int length() const { return static_cast<int>(tokens.rows()); }
};

struct GlobalFeature {
  Vector values;
};

struct ClassDistribution {
  Vector probs;
  Vector logits;

  static ClassDistribution from_logits(const Vector& logits);
  /// Lowest index among the maxima.
  int argmax() const;
};

// ---- tape-level graph ----------------------------------------------------------

namespace graph {

/// coords stacks the (T*N) x 3 coordinates of each batch item; item b owns
/// rows [b*T*N, (b+1)*T*N). Output rows: ((b * L) + t) * A + a.
ad::Var p4conv(ad::Tape& tape, const ModelParams& params, const BackboneConfig& cfg, ad::Var coords,
               std::span<const geometry::LocalAreaGrouping> groupings, int rows_per_item);

ad::Var attention_block(ad::Tape& tape, const ParamStore& params, const std::string& prefix, ad::Var x, int heads,
                        int group);
ad::Var transformer(ad::Tape& tape, const ParamStore& params, const std::string& prefix, int blocks, ad::Var x,
                    int heads, int group);

/// Attention never crosses blocks of `anchors` rows.
ad::Var spatial_transformer(ad::Tape& tape, const ModelParams& params, const BackboneConfig& cfg, ad::Var s,
                            int anchors);
ad::Var spatial_pool(ad::Var m, int anchors);
ad::Var temporal_encoder(ad::Tape& tape, const ModelParams& params, const BackboneConfig& cfg, ad::Var g,
                         int tokens_per_item);

struct HeadOutput {
  ad::Var global;  // B x D
  ad::Var logits;  // B x K
};
HeadOutput prediction_head(ad::Tape& tape, const ModelParams& params, const BackboneConfig& cfg, ad::Var z,
                           int tokens_per_item);

/// P4Conv, spatial transformer and pooling: returns g with B * L rows.
ad::Var spatial_extract(ad::Tape& tape, const ModelParams& params, const BackboneConfig& cfg, ad::Var coords,
                        std::span<const geometry::LocalAreaGrouping> groupings, int rows_per_item);

struct ForwardResult {
  ad::Var g;
  ad::Var z;
  HeadOutput head;
  int batch = 0;
  int tokens = 0;  // L per item
};
ForwardResult forward(ad::Tape& tape, const ModelParams& params, const BackboneConfig& cfg, ad::Var coords,
                      std::span<const geometry::LocalAreaGrouping> groupings, int rows_per_item);

/// Groups every video and stacks its coordinates; all videos must share T and N.
struct PreparedBatch {
  Matrix coords;
  std::vector<geometry::LocalAreaGrouping> groupings;
  int rows_per_item = 0;
  int tokens = 0;
};
PreparedBatch prepare_batch(std::span<const geometry::PointCloudVideo* const> videos, const BackboneConfig& cfg);
/// Regroups after the coordinates of a prepared batch changed.
PreparedBatch prepare_batch(const Matrix& coords, int batch, int frames, int num_points, const BackboneConfig& cfg);

}  // namespace graph

// ---- value-level operations -----------------------------------------------

ShortTermLocalFeature p4conv_forward(const geometry::LocalAreaGrouping& grouping,
                                     const geometry::PointCloudVideo& video, const ModelParams& params,
                                     const BackboneConfig& cfg);
MergedLocalFeature spatial_transformer_forward(const ShortTermLocalFeature& s, const ModelParams& params,
                                               const BackboneConfig& cfg);
TokenSequence spatial_pool(const MergedLocalFeature& m);
TokenSequence temporal_encoder_forward(const TokenSequence& g, const ModelParams& params, const BackboneConfig& cfg);
std::pair<GlobalFeature, ClassDistribution> prediction_head(const TokenSequence& z, const ModelParams& params,
                                                            const BackboneConfig& cfg);

struct DestformerOutput {
  TokenSequence g;
  GlobalFeature global;
  ClassDistribution distribution;
};
DestformerOutput destformer_forward(const geometry::PointCloudVideo& video, const ModelParams& params,
                                    const BackboneConfig& cfg);

// ---- analytic cost -------------------------------------------------------------

enum class AttentionMode { Decoupled, Joint };

/// Floating point operations of one forward pass, counting a multiply-add as
/// two operations. An attention block over L tokens of width D costs
/// 8 L D^2 + 4 L^2 D for the attention and 16 L D^2 for the 4D-wide MLP.
struct FlopBreakdown {
  double p4conv = 0;
  double spatial_attention = 0;   // decoupled only
  double temporal_attention = 0;  // decoupled only
  double joint_attention = 0;     // joint only
  double head = 0;

  double attention() const { return spatial_attention + temporal_attention + joint_attention; }
  double total() const { return p4conv + attention() + head; }
};

double attention_block_flops(double tokens, double width);
FlopBreakdown estimate_flops(const BackboneConfig& cfg, AttentionMode mode, int frames, int num_points);

}  // namespace maple::backbone
