#include "maple/autoencoder.hpp"

#include "maple/random.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace maple::autoencoder {

using ad::Tape;
using ad::Var;

int masked_count(int num_tokens, double ratio) {
  return static_cast<int>(std::nearbyint(ratio * static_cast<double>(num_tokens)));
}

MaskSpec sample_mask(int num_tokens, double ratio, std::uint64_t seed) {
  if (num_tokens < 1) throw std::invalid_argument("sample_mask: need at least one token");
  if (!(ratio >= 0.0 && ratio < 1.0)) throw std::invalid_argument("sample_mask: ratio must lie in [0, 1)");
  const int m = masked_count(num_tokens, ratio);
  if (m >= num_tokens) throw std::invalid_argument("sample_mask: ratio leaves no visible token");

  std::vector<int> order(static_cast<std::size_t>(num_tokens));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(order);

  MaskSpec spec;
  spec.num_tokens = num_tokens;
  spec.ratio = ratio;
  spec.seed = seed;
  spec.masked.assign(order.begin(), order.begin() + m);
  spec.visible.assign(order.begin() + m, order.end());
  std::sort(spec.masked.begin(), spec.masked.end());
  std::sort(spec.visible.begin(), spec.visible.end());
  return spec;
}

void MapleConfig::validate() const {
  if (decoder_blocks < 0) throw std::invalid_argument("maple config: negative decoder depth");
  if (max_tokens < 1) throw std::invalid_argument("maple config: max_tokens must be >= 1");
  if (!(mask_ratio >= 0.0 && mask_ratio < 1.0)) throw std::invalid_argument("maple config: mask ratio must lie in [0, 1)");
}

nlohmann::json to_json(const MapleConfig& c) {
  return {{"decoder_blocks", c.decoder_blocks},
          {"max_tokens", c.max_tokens},
          {"mask_ratio", c.mask_ratio},
          {"init_std", c.init_std}};
}

MapleConfig maple_config_from_json(const nlohmann::json& j) {
  MapleConfig c;
  c.decoder_blocks = j.value("decoder_blocks", c.decoder_blocks);
  c.max_tokens = j.value("max_tokens", c.max_tokens);
  c.mask_ratio = j.value("mask_ratio", c.mask_ratio);
  c.init_std = j.value("init_std", c.init_std);
  c.validate();
  return c;
}

MapleParams init_maple_params(const BackboneConfig& cfg, const MapleConfig& mcfg, std::uint64_t seed) {
  cfg.validate();
  mcfg.validate();
  Rng rng(mix_seed(seed, 0xdecULL));
  const int d = cfg.width;
  auto normal = [&](Eigen::Index r, Eigen::Index c) {
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.truncated_normal(mcfg.init_std);
    return m;
  };
  MapleParams p;
  p.add("maple/mask_token", normal(1, d));
  p.add("maple/pos_embed", normal(mcfg.max_tokens, d));
  for (int b = 0; b < mcfg.decoder_blocks; ++b)
    backbone::add_attention_block_params(p, "maple/decoder/block" + std::to_string(b), d, mcfg.init_std, rng);
  p.add("maple/decoder_norm.gamma", Matrix::Ones(1, d));
  p.add("maple/decoder_norm.beta", Matrix::Zero(1, d));
  p.add("maple/decoder_out.weight", normal(d, d));
  p.add("maple/decoder_out.bias", Matrix::Zero(1, d));
  return p;
}

namespace {

void check_masks(std::span<const MaskSpec> masks) {
  if (masks.empty()) throw std::invalid_argument("maple: empty mask batch");
  for (const auto& m : masks) {
    if (m.num_tokens != masks.front().num_tokens || m.visible.size() != masks.front().visible.size())
      throw std::invalid_argument("maple: masks in a batch must share L and the visible count");
    if (m.visible.size() + m.masked.size() != static_cast<std::size_t>(m.num_tokens))
      throw std::invalid_argument("maple: mask does not partition its tokens");
  }
}

}  // namespace

namespace graph {

Var encode_visible(Tape& tape, const ModelParams& params, const BackboneConfig& cfg, Var g,
                   std::span<const MaskSpec> masks) {
  check_masks(masks);
  const int length = masks.front().num_tokens;
  if (g.rows() != static_cast<Eigen::Index>(masks.size()) * length)
    throw std::invalid_argument("encode_visible: token count does not match the masks");
  std::vector<int> rows;
  for (std::size_t b = 0; b < masks.size(); ++b)
    for (int v : masks[b].visible) rows.push_back(static_cast<int>(b) * length + v);
  Var visible = ad::gather_rows(g, std::move(rows));
  return backbone::graph::temporal_encoder(tape, params, cfg, visible, static_cast<int>(masks.front().visible.size()));
}

Var assemble_decoder_input(Tape& tape, const MapleParams& mparams, Var z_visible, std::span<const MaskSpec> masks) {
  check_masks(masks);
  const int length = masks.front().num_tokens;
  const int n_visible = static_cast<int>(masks.front().visible.size());
  if (z_visible.rows() != static_cast<Eigen::Index>(masks.size()) * n_visible)
    throw std::invalid_argument("decode_full: latent count does not match the masks");
  const Parameter& pos = mparams.at("maple/pos_embed");
  if (length > pos.value.rows()) throw std::invalid_argument("decode_full: sequence longer than the positional table");

  std::vector<int> map(masks.size() * static_cast<std::size_t>(length), -1);
  std::vector<int> positions;
  for (std::size_t b = 0; b < masks.size(); ++b) {
    for (std::size_t i = 0; i < masks[b].visible.size(); ++i)
      map[b * static_cast<std::size_t>(length) + static_cast<std::size_t>(masks[b].visible[i])] =
          static_cast<int>(b) * n_visible + static_cast<int>(i);
    for (int j = 0; j < length; ++j) positions.push_back(j);
  }
  Var full = ad::assemble_rows(z_visible, tape.param(mparams.at("maple/mask_token")), std::move(map));
  return ad::add(full, ad::gather_rows(tape.param(pos), std::move(positions)));
}

Var decode_full(Tape& tape, const MapleParams& mparams, const BackboneConfig& cfg, const MapleConfig& mcfg,
                Var z_visible, std::span<const MaskSpec> masks) {
  const int length = masks.front().num_tokens;
  Var x = assemble_decoder_input(tape, mparams, z_visible, masks);
  x = backbone::graph::transformer(tape, mparams, "maple/decoder", mcfg.decoder_blocks, x, cfg.heads, length);
  x = ad::layer_norm(x, tape.param(mparams.at("maple/decoder_norm.gamma")),
                     tape.param(mparams.at("maple/decoder_norm.beta")));
  return ad::linear(x, tape.param(mparams.at("maple/decoder_out.weight")),
                    tape.param(mparams.at("maple/decoder_out.bias")));
}

MapleTerms maple_objective(Tape& tape, const ModelParams& params, const MapleParams& mparams, const BackboneConfig& cfg,
                           const MapleConfig& mcfg, Var g, std::span<const MaskSpec> masks,
                           std::optional<Var> target_source) {
  const int length = masks.empty() ? 0 : masks.front().num_tokens;
  Var source = ad::stop_gradient(target_source.value_or(g));
  Matrix target = ad::softmax_rows(backbone::graph::prediction_head(tape, params, cfg, source, length).logits.value());
  Var z = encode_visible(tape, params, cfg, g, masks);
  Var r = decode_full(tape, mparams, cfg, mcfg, z, masks);
  Var r_logits = backbone::graph::prediction_head(tape, params, cfg, r, length).logits;
  Var loss = ad::kl_to_logits(target, r_logits, kProbabilityClamp);
  return {loss, r, std::move(target), r_logits};
}

Var mse_ablation_loss(Var g, Var r, bool detach_target) {
  return ad::mse(detach_target ? ad::stop_gradient(g) : g, r);
}

}  // namespace graph

TokenSequence encode_visible(const TokenSequence& g, const MaskSpec& mask, const ModelParams& params,
                             const BackboneConfig& cfg) {
  if (mask.num_tokens != g.length()) throw std::invalid_argument("encode_visible: mask length does not match tokens");
  Tape tape(false);
  const MaskSpec masks[] = {mask};
  Var z = graph::encode_visible(tape, params, cfg, tape.constant(g.tokens), masks);
  TokenSequence out;
  out.tokens = z.value();
  for (int v : mask.visible)
    out.time_index.push_back(g.time_index.empty() ? v : g.time_index[static_cast<std::size_t>(v)]);
  return out;
}

Matrix assemble_decoder_input(const TokenSequence& z_visible, const MaskSpec& mask, const MapleParams& mparams) {
  Tape tape(false);
  const MaskSpec masks[] = {mask};
  return graph::assemble_decoder_input(tape, mparams, tape.constant(z_visible.tokens), masks).value();
}

ReconstructedSequence decode_full(const TokenSequence& z_visible, const MaskSpec& mask, const MapleParams& mparams,
                                  const BackboneConfig& cfg, const MapleConfig& mcfg) {
  Tape tape(false);
  const MaskSpec masks[] = {mask};
  return {graph::decode_full(tape, mparams, cfg, mcfg, tape.constant(z_visible.tokens), masks).value()};
}

namespace {

void check_normalized(const Vector& p, const char* what) {
  if (p.size() == 0 || (p.array() < 0.0).any() || std::abs(p.sum() - 1.0) > 1e-6 || !p.allFinite())
    throw std::invalid_argument(std::string(what) + ": distribution is not normalized");
}

}  // namespace

double kl_divergence(const Vector& p, const Vector& q, double eps) {
  check_normalized(p, "kl_divergence");
  check_normalized(q, "kl_divergence");
  if (p.size() != q.size()) throw std::invalid_argument("kl_divergence: size mismatch");
  double kl = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (p(i) > 0.0) kl += p(i) * (std::log(p(i)) - std::log(std::max(q(i), eps)));
  return kl;
}

double maple_loss(std::span<const ClassDistribution> targets, std::span<const ClassDistribution> reconstructed) {
  if (targets.size() != reconstructed.size()) throw std::invalid_argument("maple_loss: batch size mismatch");
  if (targets.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) sum += kl_divergence(targets[i].probs, reconstructed[i].probs);
  return sum / static_cast<double>(targets.size());
}

double mse_ablation_loss(const Matrix& g, const Matrix& r) {
  if (g.rows() != r.rows() || g.cols() != r.cols()) throw std::invalid_argument("mse_ablation_loss: shape mismatch");
  if (g.size() == 0) return 0.0;
  return (g - r).squaredNorm() / static_cast<double>(g.size());
}

double mean_l2_norm(const Matrix& tokens) {
  if (tokens.rows() == 0) return 0.0;
  return tokens.rowwise().norm().mean();
}

void L2NormTrace::write_csv(const std::filesystem::path& path) const {
  const bool fresh = !std::filesystem::exists(path);
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  if (fresh) out << "step,mean_g_norm,mean_r_norm,loss\n";
  out.precision(10);
  for (const auto& e : entries_) out << e.step << ',' << e.mean_g_norm << ',' << e.mean_r_norm << ',' << e.loss << '\n';
}

}  // namespace maple::autoencoder
