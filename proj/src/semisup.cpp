#include "maple/semisup.hpp"

#include "maple/autoencoder.hpp"
#include "maple/random.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace maple::semisup {

void VatConfig::validate() const {
  if (!(epsilon >= 0.0)) throw std::invalid_argument("vat: epsilon must be >= 0");
  if (!(xi > 0.0)) throw std::invalid_argument("vat: xi must be positive");
  if (power_iterations < 1) throw std::invalid_argument("vat: need at least one power iteration");
}

void UnsupLossWeights::validate() const {
  if (vat < 0.0 || entmin < 0.0 || maple < 0.0 || pseudo < 0.0)
    throw std::invalid_argument("unsupervised loss weights must be nonnegative");
}

std::vector<HardPseudoLabel> hard_pseudo_labels(std::span<const std::string> video_ids,
                                                std::span<const ClassDistribution> distributions,
                                                std::optional<double> min_confidence) {
  if (video_ids.size() != distributions.size()) throw std::invalid_argument("hard_pseudo_labels: size mismatch");
  std::vector<HardPseudoLabel> out;
  for (std::size_t i = 0; i < video_ids.size(); ++i) {
    const int label = distributions[i].argmax();
    const double conf = distributions[i].probs(label);
    if (min_confidence && conf < *min_confidence) continue;
    out.push_back({video_ids[i], label, conf});
  }
  return out;
}

void write_pseudo_labels(const std::filesystem::path& path, std::span<const HardPseudoLabel> labels,
                         const std::string& checkpoint_hash) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(10);
  out << "video_id,class,confidence,checkpoint_hash\n";
  for (const auto& l : labels) out << l.video_id << ',' << l.label << ',' << l.confidence << ',' << checkpoint_hash << '\n';
}

std::vector<HardPseudoLabel> read_pseudo_labels(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<HardPseudoLabel> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string id, cls, conf;
    std::getline(ss, id, ',');
    std::getline(ss, cls, ',');
    std::getline(ss, conf, ',');
    out.push_back({id, std::stoi(cls), std::stod(conf)});
  }
  return out;
}

namespace {

// Normalizes each item's block of rows to unit Frobenius norm. Blocks whose
// norm is zero are replaced by the matching block of `fallback`.
void normalize_items(Matrix& d, int batch, const Matrix& fallback) {
  const Eigen::Index rows = d.rows() / batch;
  for (int b = 0; b < batch; ++b) {
    auto block = d.middleRows(b * rows, rows);
    const double n = block.norm();
    if (n > 0.0 && std::isfinite(n))
      block /= n;
    else
      block = fallback.middleRows(b * rows, rows);
  }
}

}  // namespace

Matrix vat_perturbation(const Matrix& coords, int batch, const Matrix& clean_probs, const LogitsFn& logits_fn,
                        const VatConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (batch < 1 || coords.rows() % batch != 0) throw std::invalid_argument("vat_perturbation: bad batch layout");
  if (clean_probs.rows() != batch) throw std::invalid_argument("vat_perturbation: one clean distribution per item");
  if (cfg.epsilon == 0.0) return Matrix::Zero(coords.rows(), coords.cols());

  Rng rng(seed);
  Matrix d(coords.rows(), coords.cols());
  for (Eigen::Index i = 0; i < d.size(); ++i) d.data()[i] = rng.normal();
  normalize_items(d, batch, d);
  Matrix start = d;
  normalize_items(start, batch, start);

  for (int it = 0; it < cfg.power_iterations; ++it) {
    ad::Tape tape;
    ad::Var probe = tape.input(d);
    ad::Var x = ad::add(tape.constant(coords), ad::scale(probe, cfg.xi));
    ad::Var loss = ad::kl_to_logits(clean_probs, logits_fn(tape, x));
    tape.backward(loss);
    Matrix grad = tape.grad(probe);
    normalize_items(grad, batch, start);
    d = std::move(grad);
  }
  return d * cfg.epsilon;
}

ad::Var vat_loss(const Matrix& clean_probs, ad::Var perturbed_logits) {
  return ad::kl_to_logits(clean_probs, perturbed_logits, autoencoder::kProbabilityClamp);
}

double vat_loss(std::span<const ClassDistribution> clean, std::span<const ClassDistribution> perturbed) {
  return autoencoder::maple_loss(clean, perturbed);
}

double entropy(const Vector& p) {
  double h = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) h -= p(i) * std::log(std::max(p(i), autoencoder::kProbabilityClamp));
  return h;
}

double entmin_loss(std::span<const ClassDistribution> distributions) {
  if (distributions.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& d : distributions) {
    if ((d.probs.array() < 0.0).any() || std::abs(d.probs.sum() - 1.0) > 1e-6)
      throw std::invalid_argument("entmin_loss: distribution is not normalized");
    sum += entropy(d.probs);
  }
  return sum / static_cast<double>(distributions.size());
}

double combined_unsup_loss(const UnsupTermValues& terms, const UnsupLossWeights& weights) {
  weights.validate();
  double total = 0.0;
  auto add = [&](double w, const std::optional<double>& v, const char* name) {
    if (w == 0.0) return;
    if (!v) throw std::invalid_argument(std::string("combined_unsup_loss: missing value for ") + name);
    if (!std::isfinite(*v)) throw std::invalid_argument(std::string("combined_unsup_loss: non-finite ") + name);
    total += w * *v;
  };
  add(weights.vat, terms.vat, "vat");
  add(weights.entmin, terms.entmin, "entmin");
  add(weights.maple, terms.maple, "maple");
  add(weights.pseudo, terms.pseudo, "pseudo");
  return total;
}

std::optional<ad::Var> combined_unsup_loss(const UnsupTermFns& terms, const UnsupLossWeights& weights,
                                           UnsupTermValues* evaluated) {
  weights.validate();
  std::optional<ad::Var> total;
  auto add = [&](double w, const std::function<ad::Var()>& fn, std::optional<double>* slot, const char* name) {
    if (w == 0.0) return;
    if (!fn) throw std::invalid_argument(std::string("combined_unsup_loss: no evaluator for ") + name);
    ad::Var v = fn();
    if (slot) *slot = v.scalar();
    ad::Var weighted = ad::scale(v, w);
    total = total ? ad::add(*total, weighted) : weighted;
  };
  add(weights.vat, terms.vat, evaluated ? &evaluated->vat : nullptr, "vat");
  add(weights.entmin, terms.entmin, evaluated ? &evaluated->entmin : nullptr, "entmin");
  add(weights.maple, terms.maple, evaluated ? &evaluated->maple : nullptr, "maple");
  add(weights.pseudo, terms.pseudo, evaluated ? &evaluated->pseudo : nullptr, "pseudo");
  return total;
}

}  // namespace maple::semisup
