// Masked pseudo-labeling autoencoder over the short-term global tokens.
#pragma once

#include "maple/backbone.hpp"

#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <vector>

namespace maple::autoencoder {

using backbone::BackboneConfig;
using backbone::ClassDistribution;
using backbone::ModelParams;
using backbone::TokenSequence;

struct MaskSpec {
  int num_tokens = 0;
  std::vector<int> visible;  // sorted
  std::vector<int> masked;   // sorted
  double ratio = 0.0;
  std::uint64_t seed = 0;
};

/// round(ratio * L) with ties to even.
int masked_count(int num_tokens, double ratio);

/// Uniform sample without replacement; throws when no token would stay visible.
MaskSpec sample_mask(int num_tokens, double ratio, std::uint64_t seed);

struct MapleConfig {
  int decoder_blocks = 8;
  int max_tokens = 64;  // rows of the decoder positional table
  double mask_ratio = 0.75;
  double init_std = 0.02;

  void validate() const;
};

nlohmann::json to_json(const MapleConfig& cfg);
MapleConfig maple_config_from_json(const nlohmann::json& j);

/// "maple/mask_token" (1 x D), "maple/pos_embed" (max_tokens x D), decoder
/// blocks under "maple/decoder", "maple/decoder_norm" and "maple/decoder_out".
using MapleParams = ParamStore;

MapleParams init_maple_params(const BackboneConfig& cfg, const MapleConfig& mcfg, std::uint64_t seed);

/// Reconstructed tokens, index-aligned with the unmasked sequence.
struct ReconstructedSequence {
  Matrix tokens;
};

namespace graph {

/// Gathers the visible rows of g (B * L rows) and runs the temporal encoder on
/// them. Every mask must keep the same number of visible tokens.
ad::Var encode_visible(ad::Tape& tape, const ModelParams& params, const BackboneConfig& cfg, ad::Var g,
                       std::span<const MaskSpec> masks);

/// Scatters the visible latents back to their positions, fills masked
/// positions with the shared mask token and adds the positional rows.
ad::Var assemble_decoder_input(ad::Tape& tape, const MapleParams& mparams, ad::Var z_visible,
                               std::span<const MaskSpec> masks);

/// Decoder blocks, final norm and projection back to width D.
ad::Var decode_full(ad::Tape& tape, const MapleParams& mparams, const BackboneConfig& cfg, const MapleConfig& mcfg,
                    ad::Var z_visible, std::span<const MaskSpec> masks);

struct MapleTerms {
  ad::Var loss;    // mean KL(P || P_hat)
  ad::Var r;       // reconstructed tokens, B * L rows
  Matrix target;   // P, B x K, detached
  ad::Var r_logits;
};

/// Full masked pseudo-label objective over g (B * L rows). P comes from the
/// classification head applied to `target_source` (default: g) and is used as
/// a constant; P_hat comes from the same head applied to the reconstruction.
MapleTerms maple_objective(ad::Tape& tape, const ModelParams& params, const MapleParams& mparams,
                           const BackboneConfig& cfg, const MapleConfig& mcfg, ad::Var g,
                           std::span<const MaskSpec> masks, std::optional<ad::Var> target_source = std::nullopt);

/// Mean squared error between g and r; with detach_target no gradient
/// reaches g.
ad::Var mse_ablation_loss(ad::Var g, ad::Var r, bool detach_target);

}  // namespace graph

TokenSequence encode_visible(const TokenSequence& g, const MaskSpec& mask, const ModelParams& params,
                             const BackboneConfig& cfg);
/// Pre-decoder sequence (L x D), exposed for alignment checks.
Matrix assemble_decoder_input(const TokenSequence& z_visible, const MaskSpec& mask, const MapleParams& mparams);
ReconstructedSequence decode_full(const TokenSequence& z_visible, const MaskSpec& mask, const MapleParams& mparams,
                                  const BackboneConfig& cfg, const MapleConfig& mcfg);

inline constexpr double kProbabilityClamp = 1e-8;

/// KL(p || q) = sum p ln(p / q) with q clamped at eps; both must be normalized.
double kl_divergence(const Vector& p, const Vector& q, double eps = kProbabilityClamp);

/// Mean over items of KL(P_i || P_hat_i).
double maple_loss(std::span<const ClassDistribution> targets, std::span<const ClassDistribution> reconstructed);

double mse_ablation_loss(const Matrix& g, const Matrix& r);

/// Mean L2 norm of the rows of `tokens` (0 for an empty matrix).
double mean_l2_norm(const Matrix& tokens);

/// Run-long diagnostics accumulator, written as CSV
/// (step, mean_g_norm, mean_r_norm, loss).
class L2NormTrace {
 public:
  struct Entry {
    long step;
    double mean_g_norm;
    double mean_r_norm;
    double loss;
  };

  void append(long step, double mean_g_norm, double mean_r_norm, double loss) {
    entries_.push_back({step, mean_g_norm, mean_r_norm, loss});
  }
  const std::vector<Entry>& entries() const { return entries_; }
  bool empty() const { return entries_.empty(); }

  /// Appends to `path`, writing the header only when the file is new.
  void write_csv(const std::filesystem::path& path) const;

 private:
  std::vector<Entry> entries_;
};

}  // namespace maple::autoencoder
