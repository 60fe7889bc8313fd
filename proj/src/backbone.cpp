#include "maple/backbone.hpp"

#include <nlohmann/json.hpp>

#include <stdexcept>

namespace maple::backbone {

using ad::Tape;
using ad::Var;

void BackboneConfig::validate() const {
  if (width < 1 || kappa < 1 || zeta < 1 || heads < 1 || neighbors < 1 || num_classes < 1)
    throw std::invalid_argument("backbone config: counts must be >= 1");
  if (spatial_blocks < 0 || temporal_blocks < 0) throw std::invalid_argument("backbone config: negative depth");
  if (width % heads != 0) throw std::invalid_argument("backbone config: width must be divisible by heads");
  if (!(radius > 0.0)) throw std::invalid_argument("backbone config: radius must be positive");
  if (head_hidden_dim < 0) throw std::invalid_argument("backbone config: negative head hidden dim");
}

nlohmann::json to_json(const BackboneConfig& c) {
  return {{"width", c.width},
          {"kappa", c.kappa},
          {"zeta", c.zeta},
          {"spatial_blocks", c.spatial_blocks},
          {"temporal_blocks", c.temporal_blocks},
          {"heads", c.heads},
          {"radius", c.radius},
          {"neighbors", c.neighbors},
          {"num_classes", c.num_classes},
          {"head_hidden_dim", c.head_hidden_dim},
          {"init_std", c.init_std}};
}

BackboneConfig backbone_config_from_json(const nlohmann::json& j) {
  BackboneConfig c;
  c.width = j.value("width", c.width);
  c.kappa = j.value("kappa", c.kappa);
  c.zeta = j.value("zeta", c.zeta);
  c.spatial_blocks = j.value("spatial_blocks", c.spatial_blocks);
  c.temporal_blocks = j.value("temporal_blocks", c.temporal_blocks);
  c.heads = j.value("heads", c.heads);
  c.radius = j.value("radius", c.radius);
  c.neighbors = j.value("neighbors", c.neighbors);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.head_hidden_dim = j.value("head_hidden_dim", c.head_hidden_dim);
  c.init_std = j.value("init_std", c.init_std);
  c.validate();
  return c;
}

namespace {

Matrix trunc_normal(Rng& rng, Eigen::Index rows, Eigen::Index cols, double stddev) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.truncated_normal(stddev);
  return m;
}

void add_linear(ParamStore& s, const std::string& name, int in, int out, double stddev, Rng& rng) {
  s.add(name + ".weight", trunc_normal(rng, in, out, stddev));
  s.add(name + ".bias", Matrix::Zero(1, out));
}

void add_layer_norm(ParamStore& s, const std::string& name, int width) {
  s.add(name + ".gamma", Matrix::Ones(1, width));
  s.add(name + ".beta", Matrix::Zero(1, width));
}

Var lin(Tape& t, const ParamStore& p, const std::string& name, Var x) {
  return ad::linear(x, t.param(p.at(name + ".weight")), t.param(p.at(name + ".bias")));
}

Var norm(Tape& t, const ParamStore& p, const std::string& name, Var x) {
  return ad::layer_norm(x, t.param(p.at(name + ".gamma")), t.param(p.at(name + ".beta")));
}

}  // namespace

void add_attention_block_params(ParamStore& store, const std::string& prefix, int width, double init_std, Rng& rng) {
  add_layer_norm(store, prefix + "/ln1", width);
  add_linear(store, prefix + "/q", width, width, init_std, rng);
  add_linear(store, prefix + "/k", width, width, init_std, rng);
  add_linear(store, prefix + "/v", width, width, init_std, rng);
  add_linear(store, prefix + "/out", width, width, init_std, rng);
  add_layer_norm(store, prefix + "/ln2", width);
  add_linear(store, prefix + "/fc1", width, 4 * width, init_std, rng);
  add_linear(store, prefix + "/fc2", 4 * width, width, init_std, rng);
}

ModelParams init_backbone_params(const BackboneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(mix_seed(seed, 0xb0b0ULL));
  ModelParams p;
  const int d = cfg.width;
  add_linear(p, "p4conv/embed", 4, d, cfg.init_std, rng);
  add_linear(p, "p4conv/proj", d + 4, d, cfg.init_std, rng);
  for (int b = 0; b < cfg.spatial_blocks; ++b)
    add_attention_block_params(p, "spatial/block" + std::to_string(b), d, cfg.init_std, rng);
  for (int b = 0; b < cfg.temporal_blocks; ++b)
    add_attention_block_params(p, "temporal/block" + std::to_string(b), d, cfg.init_std, rng);
  add_layer_norm(p, "head/ln", d);
  add_linear(p, "head/fc1", d, cfg.hidden_dim(), cfg.init_std, rng);
  p.add("head/fc2.weight", Matrix::Zero(cfg.hidden_dim(), cfg.num_classes));
  p.add("head/fc2.bias", Matrix::Zero(1, cfg.num_classes));
  return p;
}

ClassDistribution ClassDistribution::from_logits(const Vector& logits) {
  ClassDistribution d;
  d.logits = logits;
  d.probs = ad::softmax_rows(logits.transpose()).row(0).transpose();
  return d;
}

int ClassDistribution::argmax() const {
  int best = 0;
  for (int i = 1; i < probs.size(); ++i)
    if (probs(i) > probs(best)) best = i;
  return best;
}

namespace graph {

Var p4conv(Tape& tape, const ModelParams& params, const BackboneConfig& cfg, Var coords,
           std::span<const geometry::LocalAreaGrouping> groupings, int rows_per_item) {
  if (groupings.empty()) throw std::invalid_argument("p4conv: empty batch");
  if (coords.cols() != 3 || coords.rows() != static_cast<Eigen::Index>(groupings.size()) * rows_per_item)
    throw std::invalid_argument("p4conv: coordinate matrix does not match the batch");
  const auto& first = groupings.front();
  const int entries_per_anchor = first.entries_per_anchor();

  std::vector<int> nbr_rows, nbr_anchor_rows, anchor_rows;
  std::vector<double> dt, seg_time;
  for (std::size_t b = 0; b < groupings.size(); ++b) {
    const auto& g = groupings[b];
    if (g.anchors != first.anchors || g.num_segments() != first.num_segments() ||
        g.entries_per_anchor() != entries_per_anchor || g.frames_per_segment != cfg.zeta)
      throw std::invalid_argument("p4conv: grouping shapes differ across the batch or from the config");
    const int base = static_cast<int>(b) * rows_per_item;
    for (int s = 0; s < g.num_segments(); ++s) {
      const auto& seg = g.segments[static_cast<std::size_t>(s)];
      for (int a = 0; a < g.anchors; ++a) {
        const int arow = base + seg.anchor_rows[static_cast<std::size_t>(a)];
        if (arow >= base + rows_per_item) throw std::invalid_argument("p4conv: anchor row out of range");
        anchor_rows.push_back(arow);
        seg_time.push_back(static_cast<double>(s));
        for (int e = 0; e < entries_per_anchor; ++e) {
          const auto idx = static_cast<std::size_t>(a * entries_per_anchor + e);
          nbr_rows.push_back(base + seg.neighbor_rows[idx]);
          nbr_anchor_rows.push_back(arow);
          dt.push_back(static_cast<double>(seg.neighbor_dt[idx]));
        }
      }
    }
  }
  const auto n_entries = static_cast<Eigen::Index>(nbr_rows.size());
  const auto n_anchors = static_cast<Eigen::Index>(anchor_rows.size());

  Var offsets = ad::sub(ad::gather_rows(coords, nbr_rows), ad::gather_rows(coords, nbr_anchor_rows));
  Var dt_col = tape.constant(Eigen::Map<const Matrix>(dt.data(), n_entries, 1));
  const Var off_parts[] = {offsets, dt_col};
  Var embedded = ad::gelu(lin(tape, params, "p4conv/embed", ad::concat_cols(off_parts)));
  Var pooled = ad::group_max(embedded, entries_per_anchor);

  Var anchor_xyz = ad::gather_rows(coords, anchor_rows);
  Var time_col = tape.constant(Eigen::Map<const Matrix>(seg_time.data(), n_anchors, 1));
  const Var parts[] = {pooled, anchor_xyz, time_col};
  return lin(tape, params, "p4conv/proj", ad::concat_cols(parts));
}

Var attention_block(Tape& tape, const ParamStore& params, const std::string& prefix, Var x, int heads, int group) {
  Var h = norm(tape, params, prefix + "/ln1", x);
  Var q = lin(tape, params, prefix + "/q", h);
  Var k = lin(tape, params, prefix + "/k", h);
  Var v = lin(tape, params, prefix + "/v", h);
  Var a = ad::attention(q, k, v, heads, group);
  x = ad::add(x, lin(tape, params, prefix + "/out", a));
  Var h2 = norm(tape, params, prefix + "/ln2", x);
  Var f = lin(tape, params, prefix + "/fc2", ad::gelu(lin(tape, params, prefix + "/fc1", h2)));
  return ad::add(x, f);
}

Var transformer(Tape& tape, const ParamStore& params, const std::string& prefix, int blocks, Var x, int heads,
                int group) {
  for (int b = 0; b < blocks; ++b) x = attention_block(tape, params, prefix + "/block" + std::to_string(b), x, heads, group);
  return x;
}

Var spatial_transformer(Tape& tape, const ModelParams& params, const BackboneConfig& cfg, Var s, int anchors) {
  return transformer(tape, params, "spatial", cfg.spatial_blocks, s, cfg.heads, anchors);
}

Var spatial_pool(Var m, int anchors) { return ad::group_max(m, anchors); }

Var temporal_encoder(Tape& tape, const ModelParams& params, const BackboneConfig& cfg, Var g, int tokens_per_item) {
  return transformer(tape, params, "temporal", cfg.temporal_blocks, g, cfg.heads, tokens_per_item);
}

HeadOutput prediction_head(Tape& tape, const ModelParams& params, const BackboneConfig& cfg, Var z,
                           int tokens_per_item) {
  (void)cfg;
  HeadOutput out;
  out.global = ad::group_max(z, tokens_per_item);
  Var h = ad::gelu(lin(tape, params, "head/fc1", norm(tape, params, "head/ln", out.global)));
  out.logits = lin(tape, params, "head/fc2", h);
  return out;
}

Var spatial_extract(Tape& tape, const ModelParams& params, const BackboneConfig& cfg, Var coords,
                    std::span<const geometry::LocalAreaGrouping> groupings, int rows_per_item) {
  const int anchors = groupings.front().anchors;
  Var s = p4conv(tape, params, cfg, coords, groupings, rows_per_item);
  Var m = spatial_transformer(tape, params, cfg, s, anchors);
  return spatial_pool(m, anchors);
}

ForwardResult forward(Tape& tape, const ModelParams& params, const BackboneConfig& cfg, Var coords,
                      std::span<const geometry::LocalAreaGrouping> groupings, int rows_per_item) {
  ForwardResult r;
  r.batch = static_cast<int>(groupings.size());
  r.tokens = groupings.front().num_segments();
  r.g = spatial_extract(tape, params, cfg, coords, groupings, rows_per_item);
  r.z = temporal_encoder(tape, params, cfg, r.g, r.tokens);
  r.head = prediction_head(tape, params, cfg, r.z, r.tokens);
  return r;
}

PreparedBatch prepare_batch(std::span<const geometry::PointCloudVideo* const> videos, const BackboneConfig& cfg) {
  if (videos.empty()) throw std::invalid_argument("prepare_batch: empty batch");
  const int frames = videos.front()->frames, n = videos.front()->num_points;
  PreparedBatch out;
  out.rows_per_item = frames * n;
  out.coords.resize(static_cast<Eigen::Index>(videos.size()) * out.rows_per_item, 3);
  for (std::size_t b = 0; b < videos.size(); ++b) {
    const auto& v = *videos[b];
    if (v.frames != frames || v.num_points != n)
      throw std::invalid_argument("prepare_batch: videos must share T and N (clip them first)");
    out.groupings.push_back(geometry::group_local_areas(v, cfg.grouping()));
    out.coords.middleRows(static_cast<Eigen::Index>(b) * out.rows_per_item, out.rows_per_item) = v.points.leftCols(3);
  }
  out.tokens = out.groupings.front().num_segments();
  return out;
}

PreparedBatch prepare_batch(const Matrix& coords, int batch, int frames, int num_points, const BackboneConfig& cfg) {
  PreparedBatch out;
  out.rows_per_item = frames * num_points;
  if (coords.rows() != static_cast<Eigen::Index>(batch) * out.rows_per_item || coords.cols() != 3)
    throw std::invalid_argument("prepare_batch: coordinate shape mismatch");
  out.coords = coords;
  geometry::PointCloudVideo v;
  v.frames = frames;
  v.num_points = num_points;
  for (int b = 0; b < batch; ++b) {
    v.points = coords.middleRows(static_cast<Eigen::Index>(b) * out.rows_per_item, out.rows_per_item);
    out.groupings.push_back(geometry::group_local_areas(v, cfg.grouping()));
  }
  out.tokens = out.groupings.front().num_segments();
  return out;
}

}  // namespace graph

// ---- value-level ---------------------------------------------------------------

ShortTermLocalFeature p4conv_forward(const geometry::LocalAreaGrouping& grouping, const geometry::PointCloudVideo& video,
                                     const ModelParams& params, const BackboneConfig& cfg) {
  geometry::validate(video);
  Tape tape(false);
  Var coords = tape.constant(video.points.leftCols(3));
  const geometry::LocalAreaGrouping groupings[] = {grouping};
  Var s = graph::p4conv(tape, params, cfg, coords, groupings, video.frames * video.num_points);
  ShortTermLocalFeature out;
  out.segments = grouping.num_segments();
  out.anchors = grouping.anchors;
  out.features = s.value();
  out.anchor_xyz.resize(static_cast<Eigen::Index>(out.segments) * out.anchors, 3);
  for (int t = 0; t < out.segments; ++t) {
    out.anchor_xyz.middleRows(static_cast<Eigen::Index>(t) * out.anchors, out.anchors) =
        grouping.segments[static_cast<std::size_t>(t)].anchor_xyz;
    out.segment_time.push_back(t);
  }
  return out;
}

MergedLocalFeature spatial_transformer_forward(const ShortTermLocalFeature& s, const ModelParams& params,
                                               const BackboneConfig& cfg) {
  if (!s.features.allFinite()) throw std::invalid_argument("spatial_transformer_forward: non-finite input");
  if (s.features.rows() != static_cast<Eigen::Index>(s.segments) * s.anchors || s.features.cols() != cfg.width)
    throw std::invalid_argument("spatial_transformer_forward: shape mismatch");
  Tape tape(false);
  Var m = graph::spatial_transformer(tape, params, cfg, tape.constant(s.features), s.anchors);
  return {s.segments, s.anchors, m.value()};
}

TokenSequence spatial_pool(const MergedLocalFeature& m) {
  Tape tape(false);
  Var g = graph::spatial_pool(tape.constant(m.features), m.anchors);
  TokenSequence out;
  out.tokens = g.value();
  for (int t = 0; t < m.segments; ++t) out.time_index.push_back(t);
  return out;
}

TokenSequence temporal_encoder_forward(const TokenSequence& g, const ModelParams& params, const BackboneConfig& cfg) {
  if (g.length() < 1) throw std::invalid_argument("temporal_encoder_forward: empty sequence");
  Tape tape(false);
  Var z = graph::temporal_encoder(tape, params, cfg, tape.constant(g.tokens), g.length());
  return {z.value(), g.time_index};
}

std::pair<GlobalFeature, ClassDistribution> prediction_head(const TokenSequence& z, const ModelParams& params,
                                                            const BackboneConfig& cfg) {
  if (z.length() < 1) throw std::invalid_argument("prediction_head: empty sequence");
  Tape tape(false);
  auto h = graph::prediction_head(tape, params, cfg, tape.constant(z.tokens), z.length());
  return {GlobalFeature{h.global.value().row(0).transpose()},
          ClassDistribution::from_logits(h.logits.value().row(0).transpose())};
}

DestformerOutput destformer_forward(const geometry::PointCloudVideo& video, const ModelParams& params,
                                    const BackboneConfig& cfg) {
  cfg.validate();
  const auto grouping = geometry::group_local_areas(video, cfg.grouping());
  const auto s = p4conv_forward(grouping, video, params, cfg);
  const auto m = spatial_transformer_forward(s, params, cfg);
  DestformerOutput out;
  out.g = spatial_pool(m);
  const auto z = temporal_encoder_forward(out.g, params, cfg);
  auto [v, dist] = prediction_head(z, params, cfg);
  out.global = std::move(v);
  out.distribution = std::move(dist);
  return out;
}

// ---- flops -----------------------------------------------------------------------

double attention_block_flops(double tokens, double width) {
  return 8.0 * tokens * width * width + 4.0 * tokens * tokens * width + 16.0 * tokens * width * width;
}

FlopBreakdown estimate_flops(const BackboneConfig& cfg, AttentionMode mode, int frames, int num_points) {
  cfg.validate();
  if (frames < cfg.zeta || num_points < 1) throw std::invalid_argument("estimate_flops: need T >= zeta and N >= 1");
  const double segments = frames / cfg.zeta;
  const double anchors = (num_points + cfg.kappa - 1) / cfg.kappa;
  const double d = cfg.width;
  const double entries = segments * anchors * cfg.zeta * cfg.neighbors;

  FlopBreakdown f;
  f.p4conv = 2.0 * entries * 4.0 * d + 2.0 * segments * anchors * (d + 4.0) * d;
  f.head = 2.0 * (d * cfg.hidden_dim() + static_cast<double>(cfg.hidden_dim()) * cfg.num_classes);
  if (mode == AttentionMode::Decoupled) {
    f.spatial_attention = cfg.spatial_blocks * segments * attention_block_flops(anchors, d);
    f.temporal_attention = cfg.temporal_blocks * attention_block_flops(segments, d);
  } else {
    f.joint_attention = (cfg.spatial_blocks + cfg.temporal_blocks) * attention_block_flops(segments * anchors, d);
  }
  return f;
}

}  // namespace maple::backbone
