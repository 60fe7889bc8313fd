#include "maple/harness.hpp"

#include "maple/checkpoint.hpp"
#include "maple/dataset_io.hpp"
#include "maple/random.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace maple::harness {

namespace fs = std::filesystem;
using ad::Tape;
using ad::Var;
using backbone::graph::PreparedBatch;

// ---- methods --------------------------------------------------------------------

namespace {

const std::vector<std::pair<Method, std::string>>& method_names() {
  static const std::vector<std::pair<Method, std::string>> names = {
      {Method::SupervisedOnly, "supervised-only"}, {Method::PseudoLabel, "pseudo-label"},
      {Method::Vat, "vat"},                        {Method::VatEntmin, "vat+entmin"},
      {Method::Maple, "maple"},                    {Method::VatEntminMaple, "vat+entmin+maple"},
      {Method::MseDetached, "mse-detached"},       {Method::MseAttached, "mse-attached"},
  };
  return names;
}

}  // namespace

std::string to_string(Method m) {
  for (const auto& [k, v] : method_names())
    if (k == m) return v;
  throw std::invalid_argument("unknown method");
}

Method parse_method(const std::string& name) {
  for (const auto& [k, v] : method_names())
    if (v == name) return k;
  throw std::invalid_argument("unknown method '" + name + "'");
}

const std::vector<Method>& all_methods() {
  static const std::vector<Method> methods = [] {
    std::vector<Method> out;
    for (const auto& [k, v] : method_names()) out.push_back(k);
    return out;
  }();
  return methods;
}

UnsupLossWeights effective_weights(Method m, const UnsupLossWeights& w) {
  UnsupLossWeights out;
  switch (m) {
    case Method::SupervisedOnly: break;
    case Method::PseudoLabel: out.pseudo = w.pseudo; break;
    case Method::Vat: out.vat = w.vat; break;
    case Method::VatEntmin: out.vat = w.vat; out.entmin = w.entmin; break;
    case Method::Maple:
    case Method::MseDetached:
    case Method::MseAttached: out.maple = w.maple; break;
    case Method::VatEntminMaple: out.vat = w.vat; out.entmin = w.entmin; out.maple = w.maple; break;
  }
  return out;
}

// ---- config -------------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(lr_base > 0.0 && lr_warmup_start > 0.0 && lr_final > 0.0))
    throw std::invalid_argument("train config: learning rates must be positive");
  if (warmup_epochs < 0 || final_epochs < 0) throw std::invalid_argument("train config: negative phase length");
  if (epochs < 1 || stage2_epochs < 0) throw std::invalid_argument("train config: epoch budgets must be positive");
  if (warmup_epochs + final_epochs > epochs)
    throw std::invalid_argument("train config: warmup_epochs + final_epochs exceeds epochs");
  if (phase_a_epochs < 0 || phase_a_epochs > stage2_epochs)
    throw std::invalid_argument("train config: phase_a_epochs must lie in [0, stage2_epochs]");
  if (batch_labeled < 1) throw std::invalid_argument("train config: batch_labeled must be >= 1");
  if (unlabeled_batch() < batch_labeled) throw std::invalid_argument("train config: b_u must be >= b_l");
  if (!(mask_ratio >= 0.0 && mask_ratio < 1.0)) throw std::invalid_argument("train config: mask ratio must lie in [0, 1)");
  if (optimizer != "sgd" && optimizer != "adam") throw std::invalid_argument("train config: unsupported optimizer '" + optimizer + "'");
  if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("train config: momentum must lie in [0, 1)");
  if (weight_decay < 0.0) throw std::invalid_argument("train config: negative weight decay");
  if (checkpoint_selection != "best-val" && checkpoint_selection != "last")
    throw std::invalid_argument("train config: checkpoint_selection must be best-val or last");
  if (validation_fraction < 0.0 || validation_fraction >= 1.0)
    throw std::invalid_argument("train config: validation_fraction must lie in [0, 1)");
  weights.validate();
  vat.validate();
}

nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json j = {
      {"schema_version", TrainConfig::kSchemaVersion},
      {"lr_base", c.lr_base},
      {"lr_warmup_start", c.lr_warmup_start},
      {"warmup_epochs", c.warmup_epochs},
      {"final_epochs", c.final_epochs},
      {"lr_final", c.lr_final},
      {"epochs", c.epochs},
      {"stage2_epochs", c.stage2_epochs},
      {"phase_a_epochs", c.phase_a_epochs},
      {"batch_labeled", c.batch_labeled},
      {"batch_unlabeled", c.unlabeled_batch()},
      {"mask_ratio", c.mask_ratio},
      {"weights", {{"vat", c.weights.vat}, {"entmin", c.weights.entmin}, {"maple", c.weights.maple}, {"pseudo", c.weights.pseudo}}},
      {"vat", {{"epsilon", c.vat.epsilon}, {"xi", c.vat.xi}, {"power_iterations", c.vat.power_iterations}}},
      {"optimizer", c.optimizer},
      {"momentum", c.momentum},
      {"weight_decay", c.weight_decay},
      {"validation_fraction", c.validation_fraction},
      {"checkpoint_selection", c.checkpoint_selection},
      {"seed", c.seed},
  };
  j["pseudo_threshold"] = c.pseudo_threshold ? nlohmann::json(*c.pseudo_threshold) : nlohmann::json(nullptr);
  j["patience"] = c.patience ? nlohmann::json(*c.patience) : nlohmann::json(nullptr);
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (j.value("schema_version", TrainConfig::kSchemaVersion) != TrainConfig::kSchemaVersion)
    throw std::invalid_argument("train config: unsupported schema version");
  TrainConfig c;
  c.lr_base = j.value("lr_base", c.lr_base);
  c.lr_warmup_start = j.value("lr_warmup_start", c.lr_warmup_start);
  c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
  c.final_epochs = j.value("final_epochs", c.final_epochs);
  c.lr_final = j.value("lr_final", c.lr_final);
  c.epochs = j.value("epochs", c.epochs);
  c.stage2_epochs = j.value("stage2_epochs", c.stage2_epochs);
  c.phase_a_epochs = j.value("phase_a_epochs", c.phase_a_epochs);
  c.batch_labeled = j.value("batch_labeled", c.batch_labeled);
  c.batch_unlabeled = j.value("batch_unlabeled", c.batch_unlabeled);
  c.mask_ratio = j.value("mask_ratio", c.mask_ratio);
  if (j.contains("weights")) {
    const auto& w = j["weights"];
    c.weights.vat = w.value("vat", c.weights.vat);
    c.weights.entmin = w.value("entmin", c.weights.entmin);
    c.weights.maple = w.value("maple", c.weights.maple);
    c.weights.pseudo = w.value("pseudo", c.weights.pseudo);
  }
  if (j.contains("vat")) {
    const auto& v = j["vat"];
    c.vat.epsilon = v.value("epsilon", c.vat.epsilon);
    c.vat.xi = v.value("xi", c.vat.xi);
    c.vat.power_iterations = v.value("power_iterations", c.vat.power_iterations);
  }
  c.optimizer = j.value("optimizer", c.optimizer);
  c.momentum = j.value("momentum", c.momentum);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.validation_fraction = j.value("validation_fraction", c.validation_fraction);
  c.checkpoint_selection = j.value("checkpoint_selection", c.checkpoint_selection);
  c.seed = j.value("seed", c.seed);
  if (j.contains("pseudo_threshold") && !j["pseudo_threshold"].is_null()) c.pseudo_threshold = j["pseudo_threshold"].get<double>();
  if (j.contains("patience") && !j["patience"].is_null()) c.patience = j["patience"].get<int>();
  c.validate();
  return c;
}

double lr_at(int epoch, const TrainConfig& cfg, int total_epochs) {
  if (epoch < 0 || epoch >= total_epochs) throw std::invalid_argument("lr_at: epoch out of range");
  if (epoch >= total_epochs - cfg.final_epochs) return cfg.lr_final;
  if (epoch < cfg.warmup_epochs)
    return cfg.lr_warmup_start +
           (cfg.lr_base - cfg.lr_warmup_start) * static_cast<double>(epoch) / static_cast<double>(cfg.warmup_epochs);
  return cfg.lr_base;
}

Optimizer::Optimizer(std::string kind, double momentum, double weight_decay)
    : kind_(std::move(kind)), momentum_(momentum), weight_decay_(weight_decay) {
  if (kind_ != "sgd" && kind_ != "adam") throw std::invalid_argument("unsupported optimizer '" + kind_ + "'");
}

void Optimizer::step(ParamStore& store, double lr) {
  ++steps_;
  constexpr double beta2 = 0.999, eps = 1e-8;
  for (auto& [name, p] : store) {
    if (p.grad.size() == 0) continue;
    Matrix g = p.grad;
    if (weight_decay_ > 0.0) g += weight_decay_ * p.value;
    Matrix& m = first_.try_emplace(name, Matrix::Zero(p.value.rows(), p.value.cols())).first->second;
    if (kind_ == "sgd") {
      m = momentum_ * m + g;
      p.value -= lr * m;
      continue;
    }
    Matrix& v = second_.try_emplace(name, Matrix::Zero(p.value.rows(), p.value.cols())).first->second;
    m = momentum_ * m + (1.0 - momentum_) * g;
    v = beta2 * v + (1.0 - beta2) * g.cwiseProduct(g);
    const double c1 = 1.0 - std::pow(momentum_, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(steps_));
    p.value.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
}

// ---- data -----------------------------------------------------------------------

LabeledSet make_labeled(std::vector<PointCloudVideo> videos) {
  LabeledSet out;
  for (auto& v : videos) {
    if (!v.class_id) throw std::invalid_argument("make_labeled: video " + v.video_id + " has no class");
    out.labels.push_back(*v.class_id);
    out.videos.push_back(std::move(v));
  }
  return out;
}

UnlabeledSet make_unlabeled(std::vector<PointCloudVideo> videos) {
  UnlabeledSet out;
  for (auto& v : videos) {
    v.class_id.reset();
    out.videos.push_back(std::move(v));
  }
  return out;
}

std::pair<LabeledSet, LabeledSet> carve_validation(const LabeledSet& labeled, double fraction, std::uint64_t seed) {
  const std::size_t n = labeled.size();
  std::size_t want = static_cast<std::size_t>(std::nearbyint(fraction * static_cast<double>(n)));
  if (fraction > 0.0 && n >= 2) want = std::max<std::size_t>(want, 1);
  want = std::min(want, n == 0 ? 0 : n - 1);

  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < n; ++i) by_class[labeled.labels[i]].push_back(i);
  for (auto& [cls, idx] : by_class) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(cls)));
    rng.shuffle(idx);
  }
  std::vector<char> held(n, 0);
  std::size_t taken = 0;
  for (std::size_t round = 0; taken < want; ++round)
    for (auto& [cls, idx] : by_class)
      if (round < idx.size() && taken < want) {
        held[idx[round]] = 1;
        ++taken;
      }

  LabeledSet train, val;
  for (std::size_t i = 0; i < n; ++i) {
    LabeledSet& dst = held[i] ? val : train;
    dst.videos.push_back(labeled.videos[i]);
    dst.labels.push_back(labeled.labels[i]);
  }
  return {std::move(train), std::move(val)};
}

// ---- metrics files --------------------------------------------------------------

namespace {

std::string opt(const std::optional<double>& v) {
  if (!v) return "";
  std::ostringstream os;
  os.precision(12);
  os << *v;
  return os.str();
}

std::ofstream open_csv(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(12);
  return out;
}

}  // namespace

void write_steps_csv(const fs::path& path, const std::vector<StepRecord>& steps) {
  auto out = open_csv(path);
  out << "stage,epoch,step,lr,labeled_loss,vat,entmin,maple,pseudo,w_vat,w_entmin,w_maple,w_pseudo,total\n";
  for (const auto& s : steps)
    out << s.stage << ',' << s.epoch << ',' << s.step << ',' << s.lr << ',' << s.labeled << ',' << opt(s.terms.vat) << ','
        << opt(s.terms.entmin) << ',' << opt(s.terms.maple) << ',' << opt(s.terms.pseudo) << ',' << s.weights.vat << ','
        << s.weights.entmin << ',' << s.weights.maple << ',' << s.weights.pseudo << ',' << s.total << '\n';
}

void write_epochs_csv(const fs::path& path, const std::vector<EpochRecord>& epochs) {
  auto out = open_csv(path);
  out << "stage,phase,epoch,lr,train_loss,val_accuracy,val_loss,mean_g_norm,mean_r_norm\n";
  for (const auto& e : epochs)
    out << e.stage << ',' << e.phase << ',' << e.epoch << ',' << e.lr << ',' << e.train_loss << ',' << e.val_accuracy << ','
        << e.val_loss << ',' << opt(e.mean_g_norm) << ',' << opt(e.mean_r_norm) << '\n';
}

void write_events_csv(const fs::path& path, const std::vector<std::pair<int, std::string>>& events) {
  auto out = open_csv(path);
  out << "epoch,event\n";
  for (const auto& [epoch, name] : events) out << epoch << ',' << name << '\n';
}

// ---- inference ------------------------------------------------------------------

namespace {

PreparedBatch prepare(const std::vector<PointCloudVideo>& videos, std::span<const std::size_t> idx,
                      const BackboneConfig& cfg) {
  std::vector<const PointCloudVideo*> ptr;
  ptr.reserve(idx.size());
  for (std::size_t i : idx) ptr.push_back(&videos[i]);
  return backbone::graph::prepare_batch(ptr, cfg);
}

struct Prediction {
  Matrix logits;  // n x K
  Matrix global;  // n x D
};

Prediction predict_all(const ModelParams& params, const BackboneConfig& cfg, const std::vector<PointCloudVideo>& videos,
                       int batch_size) {
  if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  Prediction out;
  out.logits.resize(static_cast<Eigen::Index>(videos.size()), cfg.num_classes);
  out.global.resize(static_cast<Eigen::Index>(videos.size()), cfg.width);
  for (std::size_t start = 0; start < videos.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(videos.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const PreparedBatch pb = prepare(videos, idx, cfg);
    Tape tape(false);
    auto fr = backbone::graph::forward(tape, params, cfg, tape.constant(pb.coords), pb.groupings, pb.rows_per_item);
    out.logits.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(idx.size())) = fr.head.logits.value();
    out.global.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(idx.size())) = fr.head.global.value();
  }
  return out;
}

}  // namespace

std::vector<backbone::ClassDistribution> predict(const ModelParams& params, const BackboneConfig& cfg,
                                                 const std::vector<PointCloudVideo>& videos, int batch_size) {
  const Prediction p = predict_all(params, cfg, videos, batch_size);
  std::vector<backbone::ClassDistribution> out;
  for (Eigen::Index i = 0; i < p.logits.rows(); ++i)
    out.push_back(backbone::ClassDistribution::from_logits(p.logits.row(i).transpose()));
  return out;
}

EvalResult evaluate(const ModelParams& params, const BackboneConfig& cfg, const LabeledSet& test, int batch_size) {
  if (test.size() == 0) throw std::invalid_argument("evaluate: empty test set");
  const Prediction p = predict_all(params, cfg, test.videos, batch_size);
  const Matrix probs = ad::softmax_rows(p.logits);
  EvalResult r;
  r.per_class_accuracy.assign(static_cast<std::size_t>(cfg.num_classes), 0.0);
  r.per_class_count.assign(static_cast<std::size_t>(cfg.num_classes), 0);
  std::vector<int> hits(static_cast<std::size_t>(cfg.num_classes), 0);
  int correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const int label = test.labels[i];
    if (label < 0 || label >= cfg.num_classes) throw std::invalid_argument("evaluate: label out of range");
    const auto dist = backbone::ClassDistribution::from_logits(p.logits.row(static_cast<Eigen::Index>(i)).transpose());
    const int pred = dist.argmax();
    r.predictions.push_back(pred);
    r.loss -= std::log(std::max(probs(static_cast<Eigen::Index>(i), label), autoencoder::kProbabilityClamp));
    ++r.per_class_count[static_cast<std::size_t>(label)];
    if (pred == label) {
      ++correct;
      ++hits[static_cast<std::size_t>(label)];
    }
  }
  r.loss /= static_cast<double>(test.size());
  r.accuracy = 100.0 * correct / static_cast<double>(test.size());
  for (std::size_t c = 0; c < hits.size(); ++c)
    r.per_class_accuracy[c] = r.per_class_count[c] ? 100.0 * hits[c] / r.per_class_count[c] : 0.0;
  return r;
}

void export_features(const fs::path& path, const ModelParams& params, const BackboneConfig& cfg,
                     const std::vector<PointCloudVideo>& videos) {
  const Prediction p = predict_all(params, cfg, videos, 32);
  auto out = open_csv(path);
  out << "video_id,class";
  for (int d = 0; d < cfg.width; ++d) out << ",f" << d;
  out << '\n';
  for (std::size_t i = 0; i < videos.size(); ++i) {
    out << videos[i].video_id << ',' << (videos[i].class_id ? std::to_string(*videos[i].class_id) : "");
    for (int d = 0; d < cfg.width; ++d) out << ',' << p.global(static_cast<Eigen::Index>(i), d);
    out << '\n';
  }
}

// ---- training -------------------------------------------------------------------

namespace {

/// Infinite reshuffling stream of indices in [0, n).
class Cycler {
 public:
  Cycler(std::size_t n, std::uint64_t seed) : n_(n), seed_(seed) { refill(); }
  std::vector<std::size_t> next(std::size_t count) {
    std::vector<std::size_t> out;
    while (out.size() < count) {
      if (pos_ == order_.size()) refill();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  void refill() {
    order_.resize(n_);
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    Rng rng(mix_seed(seed_, pass_++));
    rng.shuffle(order_);
    pos_ = 0;
  }
  std::size_t n_;
  std::uint64_t seed_;
  std::uint64_t pass_ = 0;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < n; s += batch)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, s + batch)));
  return out;
}

std::vector<int> gather_labels(const LabeledSet& set, std::span<const std::size_t> idx) {
  std::vector<int> out;
  for (std::size_t i : idx) out.push_back(set.labels[i]);
  return out;
}

/// Best-checkpoint bookkeeping shared by both stages.
struct BestTracker {
  bool keep_last = false;
  double accuracy = -1.0;
  double loss = std::numeric_limits<double>::infinity();
  int epoch = -1;
  int since = 0;

  bool offer(double acc, double l, int e) {
    if (keep_last || acc > accuracy || (acc == accuracy && l < loss)) {
      accuracy = acc;
      loss = l;
      epoch = e;
      since = 0;
      return true;
    }
    ++since;
    return false;
  }
};

}  // namespace

TrainResult train_supervised(const LabeledSet& labeled, const LabeledSet& validation, const BackboneConfig& cfg,
                             const TrainConfig& tcfg, const ModelParams* init, const EpochHook& hook) {
  cfg.validate();
  tcfg.validate();
  if (labeled.size() == 0) throw std::invalid_argument("train_supervised: empty labeled set");

  TrainResult res;
  ModelParams params = init ? *init : backbone::init_backbone_params(cfg, tcfg.seed);
  Optimizer opt(tcfg.optimizer, tcfg.momentum, tcfg.weight_decay);
  BestTracker best{tcfg.checkpoint_selection == "last"};
  long step = 0;
  double g_norm_sum = 0.0;

  for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
    const double lr = lr_at(epoch, tcfg, tcfg.epochs);
    double loss_sum = 0.0;
    const auto batches = epoch_batches(labeled.size(), static_cast<std::size_t>(tcfg.batch_labeled),
                                       mix_seed(tcfg.seed, 0x51, static_cast<std::uint64_t>(epoch)));
    for (const auto& idx : batches) {
      const PreparedBatch pb = prepare(labeled.videos, idx, cfg);
      const auto labels = gather_labels(labeled, idx);
      Tape tape;
      auto fr = backbone::graph::forward(tape, params, cfg, tape.constant(pb.coords), pb.groupings, pb.rows_per_item);
      Var loss = ad::cross_entropy(fr.head.logits, labels);
      tape.backward(loss);
      params.zero_grad();
      tape.add_param_grads(params);
      opt.step(params, lr);

      StepRecord rec;
      rec.stage = "stage1";
      rec.epoch = epoch;
      rec.step = step++;
      rec.lr = lr;
      rec.labeled = loss.scalar();
      rec.total = rec.labeled;
      res.metrics.steps.push_back(rec);
      loss_sum += rec.total;
      g_norm_sum += autoencoder::mean_l2_norm(fr.g.value());
    }

    EpochRecord er;
    er.stage = "stage1";
    er.epoch = epoch;
    er.lr = lr;
    er.train_loss = loss_sum / static_cast<double>(batches.size());
    if (validation.size() > 0) {
      const EvalResult ev = evaluate(params, cfg, validation);
      er.val_accuracy = ev.accuracy;
      er.val_loss = ev.loss;
      if (best.offer(ev.accuracy, ev.loss, epoch)) {
        res.params = params;
        res.metrics.per_class_accuracy = ev.per_class_accuracy;
      }
    } else {
      best.accuracy = 0.0;
      best.epoch = epoch;
      res.params = params;
    }
    res.metrics.epochs.push_back(er);
    if (hook) hook(er, params);
    if (tcfg.patience && best.since > *tcfg.patience) break;
  }
  res.metrics.best_accuracy = std::max(best.accuracy, 0.0);
  res.metrics.best_epoch = best.epoch;
  res.metrics.mean_g_norm = step > 0 ? g_norm_sum / static_cast<double>(step) : 0.0;
  res.metrics.checkpoint_id = "stage1@" + std::to_string(best.epoch);
  return res;
}

namespace {

using MethodSchedule = std::function<Method(int epoch)>;

TrainResult run_stage2(const LabeledSet& labeled, const LabeledSet& validation, const UnlabeledSet& unlabeled,
                       const ModelParams& stage1, const MethodSchedule& schedule,
                       const BackboneConfig& cfg, const TrainConfig& tcfg, const SemiSupOptions& options) {
  cfg.validate();
  tcfg.validate();
  options.maple.validate();
  if (labeled.size() == 0) throw std::invalid_argument("train_semisupervised: empty labeled set");
  if (unlabeled.size() == 0) throw std::invalid_argument("train_semisupervised: empty unlabeled set");

  TrainResult res;
  ModelParams params = stage1;
  MapleParams mparams = options.maple_init ? *options.maple_init
                                           : autoencoder::init_maple_params(cfg, options.maple, mix_seed(tcfg.seed, 0xdec0));
  Optimizer opt(tcfg.optimizer, tcfg.momentum, tcfg.weight_decay);
  Optimizer mopt(tcfg.optimizer, tcfg.momentum, tcfg.weight_decay);
  BestTracker best{tcfg.checkpoint_selection == "last"};
  const int total_epochs = tcfg.stage2_epochs;
  const auto b_l = static_cast<std::size_t>(tcfg.batch_labeled);
  const auto b_u = static_cast<std::size_t>(tcfg.unlabeled_batch());
  Cycler labeled_stream(labeled.size(), mix_seed(tcfg.seed, 0x52));

  // Hard pseudo-labels from the stage-1 model, fixed for the whole stage.
  std::vector<std::optional<int>> hard_labels(unlabeled.size());
  bool uses_pseudo = false;
  for (int e = 0; e < total_epochs; ++e) uses_pseudo |= effective_weights(schedule(e), tcfg.weights).pseudo > 0.0;
  if (uses_pseudo) {
    const auto dists = predict(stage1, cfg, unlabeled.videos);
    for (std::size_t i = 0; i < dists.size(); ++i) {
      const int label = dists[i].argmax();
      if (!tcfg.pseudo_threshold || dists[i].probs(label) >= *tcfg.pseudo_threshold) hard_labels[i] = label;
    }
  }

  long step = 0;
  double g_norm_sum = 0.0;
  long g_norm_count = 0;
  std::optional<Method> previous;
  for (int epoch = 0; epoch < total_epochs; ++epoch) {
    const Method method = schedule(epoch);
    if (previous && *previous != method) res.metrics.events.emplace_back(epoch, "phase-transition");
    previous = method;
    const UnsupLossWeights weights = effective_weights(method, tcfg.weights);
    const double lr = lr_at(epoch, tcfg, total_epochs);
    double loss_sum = 0.0, g_epoch = 0.0, r_epoch = 0.0;
    int norm_steps = 0;

    const auto ubatches = epoch_batches(unlabeled.size(), b_u, mix_seed(tcfg.seed, 0x53, static_cast<std::uint64_t>(epoch)));
    for (const auto& uidx : ubatches) {
      const auto lidx = labeled_stream.next(b_l);
      const PreparedBatch pl = prepare(labeled.videos, lidx, cfg);
      const auto labels = gather_labels(labeled, lidx);

      Tape tape;
      auto fl = backbone::graph::forward(tape, params, cfg, tape.constant(pl.coords), pl.groupings, pl.rows_per_item);
      Var ce = ad::cross_entropy(fl.head.logits, labels);
      g_norm_sum += autoencoder::mean_l2_norm(fl.g.value());
      ++g_norm_count;

      std::optional<PreparedBatch> pu;
      std::optional<backbone::graph::ForwardResult> uf;
      auto unlabeled_batch = [&]() -> const PreparedBatch& {
        if (!pu) pu = prepare(unlabeled.videos, uidx, cfg);
        return *pu;
      };
      auto unlabeled_forward = [&]() -> const backbone::graph::ForwardResult& {
        if (!uf) {
          const PreparedBatch& b = unlabeled_batch();
          uf = backbone::graph::forward(tape, params, cfg, tape.constant(b.coords), b.groupings, b.rows_per_item);
          ++res.metrics.unlabeled_forwards;
        }
        return *uf;
      };
      const int batch_u = static_cast<int>(uidx.size());
      const std::uint64_t step_seed = mix_seed(tcfg.seed, 0x54, static_cast<std::uint64_t>(step));

      semisup::UnsupTermFns fns;
      fns.entmin = [&] { return ad::entropy_of_logits(unlabeled_forward().head.logits, autoencoder::kProbabilityClamp); };
      fns.pseudo = [&] {
        const auto& f = unlabeled_forward();
        std::vector<int> rows, targets;
        for (int b = 0; b < batch_u; ++b)
          if (const auto& h = hard_labels[uidx[static_cast<std::size_t>(b)]]) {
            rows.push_back(b);
            targets.push_back(*h);
          }
        if (rows.empty()) return tape.constant(Matrix::Zero(1, 1));
        return ad::cross_entropy(ad::gather_rows(f.head.logits, rows), targets);
      };
      fns.vat = [&] {
        const auto& f = unlabeled_forward();
        const PreparedBatch& b = unlabeled_batch();
        const Matrix clean = ad::softmax_rows(f.head.logits.value());
        const int frames = b.rows_per_item / unlabeled.videos.front().num_points;
        const int points = unlabeled.videos.front().num_points;
        semisup::LogitsFn logits_fn = [&](Tape& t, Var x) {
          const PreparedBatch moved = backbone::graph::prepare_batch(x.value(), batch_u, frames, points, cfg);
          return backbone::graph::forward(t, params, cfg, x, moved.groupings, moved.rows_per_item).head.logits;
        };
        const Matrix delta = semisup::vat_perturbation(b.coords, batch_u, clean, logits_fn, tcfg.vat, step_seed);
        const PreparedBatch moved = backbone::graph::prepare_batch(b.coords + delta, batch_u, frames, points, cfg);
        auto fp = backbone::graph::forward(tape, params, cfg, tape.constant(moved.coords), moved.groupings,
                                           moved.rows_per_item);
        return semisup::vat_loss(clean, fp.head.logits);
      };
      fns.maple = [&] {
        const auto& f = unlabeled_forward();
        std::vector<autoencoder::MaskSpec> masks;
        for (int b = 0; b < batch_u; ++b)
          masks.push_back(autoencoder::sample_mask(f.tokens, tcfg.mask_ratio, mix_seed(step_seed, 0x6d, static_cast<std::uint64_t>(b))));
        Var loss, r;
        if (method == Method::MseDetached || method == Method::MseAttached) {
          Var z = autoencoder::graph::encode_visible(tape, params, cfg, f.g, masks);
          r = autoencoder::graph::decode_full(tape, mparams, cfg, options.maple, z, masks);
          loss = autoencoder::graph::mse_ablation_loss(f.g, r, method == Method::MseDetached);
        } else {
          auto terms = autoencoder::graph::maple_objective(tape, params, mparams, cfg, options.maple, f.g, masks);
          loss = terms.loss;
          r = terms.r;
        }
        const double gn = autoencoder::mean_l2_norm(f.g.value());
        const double rn = autoencoder::mean_l2_norm(r.value());
        res.metrics.l2_trace.append(step, gn, rn, loss.scalar());
        g_epoch += gn;
        r_epoch += rn;
        ++norm_steps;
        return loss;
      };

      StepRecord rec;
      rec.stage = "stage2";
      rec.epoch = epoch;
      rec.step = step;
      rec.lr = lr;
      rec.weights = weights;
      const auto unsup = semisup::combined_unsup_loss(fns, weights, &rec.terms);
      Var total = unsup ? ad::add(ce, *unsup) : ce;
      rec.labeled = ce.scalar();
      rec.total = total.scalar();

      tape.backward(total);
      params.zero_grad();
      mparams.zero_grad();
      tape.add_param_grads(params);
      tape.add_param_grads(mparams);
      opt.step(params, lr);
      if (weights.maple > 0.0) mopt.step(mparams, lr);

      res.metrics.steps.push_back(rec);
      loss_sum += rec.total;
      ++step;
    }

    EpochRecord er;
    er.stage = "stage2";
    er.epoch = epoch;
    er.lr = lr;
    er.train_loss = loss_sum / static_cast<double>(ubatches.size());
    if (norm_steps > 0) {
      er.mean_g_norm = g_epoch / norm_steps;
      er.mean_r_norm = r_epoch / norm_steps;
    }
    if (validation.size() > 0) {
      const EvalResult ev = evaluate(params, cfg, validation);
      er.val_accuracy = ev.accuracy;
      er.val_loss = ev.loss;
      if (best.offer(ev.accuracy, ev.loss, epoch)) {
        res.params = params;
        res.maple = mparams;
        res.metrics.per_class_accuracy = ev.per_class_accuracy;
      }
    } else {
      best.accuracy = 0.0;
      best.epoch = epoch;
      res.params = params;
      res.maple = mparams;
    }
    res.metrics.epochs.push_back(er);
    if (options.hook) options.hook(er, params);
    if (tcfg.patience && best.since > *tcfg.patience) break;
  }
  if (total_epochs == 0) {
    res.params = params;
    res.maple = mparams;
  }
  res.metrics.best_accuracy = std::max(best.accuracy, 0.0);
  res.metrics.best_epoch = best.epoch;
  res.metrics.mean_g_norm = options.reference_g_norm.value_or(g_norm_count ? g_norm_sum / static_cast<double>(g_norm_count) : 0.0);
  res.metrics.checkpoint_id = "stage2@" + std::to_string(best.epoch);
  return res;
}

}  // namespace

TrainResult train_semisupervised(const LabeledSet& labeled, const LabeledSet& validation, const UnlabeledSet& unlabeled,
                                 const ModelParams& stage1, Method method, const BackboneConfig& cfg,
                                 const TrainConfig& tcfg, const SemiSupOptions& options) {
  if (method == Method::VatEntminMaple)
    return train_staged_combo(labeled, validation, unlabeled, stage1, cfg, tcfg, options);
  return run_stage2(labeled, validation, unlabeled, stage1, [method](int) { return method; }, cfg, tcfg, options);
}

TrainResult train_staged_combo(const LabeledSet& labeled, const LabeledSet& validation, const UnlabeledSet& unlabeled,
                               const ModelParams& stage1, const BackboneConfig& cfg, const TrainConfig& tcfg,
                               const SemiSupOptions& options) {
  tcfg.validate();
  const int phase_a = tcfg.phase_a_epochs;
  auto schedule = [phase_a](int epoch) { return epoch < phase_a ? Method::VatEntmin : Method::Maple; };
  TrainResult res = run_stage2(labeled, validation, unlabeled, stage1, schedule, cfg, tcfg, options);
  for (auto& e : res.metrics.epochs) e.phase = e.epoch < phase_a ? "A" : "B";
  res.metrics.events.clear();
  res.metrics.events.emplace_back(phase_a, "phase-transition");
  res.metrics.phase_transition_epoch = phase_a;
  return res;
}

// ---- run manifests ----------------------------------------------------------------

nlohmann::json to_json(const RunManifest& m) {
  return {{"schema_version", RunManifest::kSchemaVersion},
          {"dataset", m.dataset},
          {"test_dataset", m.test_dataset},
          {"split", m.split},
          {"backbone", backbone::to_json(m.backbone)},
          {"maple", autoencoder::to_json(m.maple)},
          {"train", to_json(m.train)},
          {"method", to_string(m.method)},
          {"output_dir", m.output_dir},
          {"report_formats", m.report_formats},
          {"frames", m.frames},
          {"clip_policy", m.clip_policy},
          {"stage1_checkpoint", m.stage1_checkpoint}};
}

RunManifest run_manifest_from_json(const nlohmann::json& j, const fs::path& base_dir) {
  if (j.value("schema_version", RunManifest::kSchemaVersion) != RunManifest::kSchemaVersion)
    throw std::invalid_argument("run manifest: unsupported schema version");
  auto resolve = [&](const std::string& p) -> std::string {
    if (p.empty() || fs::path(p).is_absolute() || base_dir.empty()) return p;
    return (base_dir / p).lexically_normal().string();
  };
  RunManifest m;
  m.dataset = resolve(j.value("dataset", std::string{}));
  m.test_dataset = resolve(j.value("test_dataset", std::string{}));
  m.split = resolve(j.value("split", std::string{}));
  if (j.contains("backbone")) m.backbone = backbone::backbone_config_from_json(j["backbone"]);
  if (j.contains("maple")) m.maple = autoencoder::maple_config_from_json(j["maple"]);
  if (j.contains("train")) m.train = train_config_from_json(j["train"]);
  m.method = parse_method(j.value("method", to_string(m.method)));
  m.output_dir = resolve(j.value("output_dir", m.output_dir));
  m.report_formats = j.value("report_formats", m.report_formats);
  m.frames = j.value("frames", m.frames);
  m.clip_policy = j.value("clip_policy", m.clip_policy);
  m.stage1_checkpoint = resolve(j.value("stage1_checkpoint", std::string{}));
  geometry::parse_clip_policy(m.clip_policy);
  return m;
}

RunManifest read_run_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return run_manifest_from_json(nlohmann::json::parse(in), path.parent_path());
}

void write_run_manifest(const fs::path& path, const RunManifest& m) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << to_json(m).dump(2) << '\n';
}

namespace {

struct ExperimentData {
  LabeledSet train;
  LabeledSet validation;
  UnlabeledSet unlabeled;
  std::vector<std::string> unlabeled_ids;
  LabeledSet test;
  geometry::SemiSplit split;
};

std::vector<PointCloudVideo> load_clipped(const fs::path& manifest_path, const RunManifest& m) {
  auto videos = io::load_videos(io::read_manifest(manifest_path));
  if (m.frames > 0) {
    const auto policy = geometry::parse_clip_policy(m.clip_policy);
    for (auto& v : videos) {
      auto clipped = geometry::temporal_clip(v, m.frames, policy, mix_seed(m.train.seed, string_seed(v.video_id)));
      clipped.video_id = v.video_id;
      clipped.class_id = v.class_id;
      v = std::move(clipped);
    }
  }
  return videos;
}

ExperimentData load_experiment_data(const RunManifest& m) {
  if (m.dataset.empty()) throw std::invalid_argument("run manifest: dataset path is required");
  if (m.split.empty()) throw std::invalid_argument("run manifest: split path is required");
  ExperimentData d;
  auto videos = load_clipped(m.dataset, m);
  d.split = io::read_split(m.split);
  std::map<std::string, std::size_t> by_id;
  for (std::size_t i = 0; i < videos.size(); ++i) by_id[videos[i].video_id] = i;
  auto pick = [&](const std::vector<std::string>& ids) {
    std::vector<PointCloudVideo> out;
    for (const auto& id : ids) {
      auto it = by_id.find(id);
      if (it == by_id.end()) throw std::runtime_error("split references unknown video " + id);
      out.push_back(videos[it->second]);
    }
    return out;
  };
  auto labeled = make_labeled(pick(d.split.labeled_ids));
  std::tie(d.train, d.validation) = carve_validation(labeled, m.train.validation_fraction, mix_seed(m.train.seed, 0x7a1));
  d.unlabeled = make_unlabeled(pick(d.split.unlabeled_ids));
  d.unlabeled_ids = d.split.unlabeled_ids;
  if (!m.test_dataset.empty()) d.test = make_labeled(load_clipped(m.test_dataset, m));
  return d;
}

nlohmann::json checkpoint_config(const RunManifest& m, bool with_maple) {
  nlohmann::json c = {{"backbone", backbone::to_json(m.backbone)}};
  if (with_maple) c["maple"] = autoencoder::to_json(m.maple);
  return c;
}

nlohmann::json stage_summary(const MetricsRecord& r) {
  return {{"best_epoch", r.best_epoch},
          {"best_val_accuracy", r.best_accuracy},
          {"checkpoint_id", r.checkpoint_id},
          {"mean_g_norm", r.mean_g_norm},
          {"unlabeled_forwards", r.unlabeled_forwards}};
}

}  // namespace

nlohmann::json run_experiment(const RunManifest& m) {
  m.backbone.validate();
  m.train.validate();
  const ExperimentData data = load_experiment_data(m);
  const fs::path out_dir(m.output_dir);
  fs::create_directories(out_dir);
  write_run_manifest(out_dir / "run.json", m);

  TrainResult s1;
  nlohmann::json s1_summary;
  const fs::path stage1_path = out_dir / "stage1.ckpt";
  if (m.stage1_checkpoint.empty()) {
    s1 = train_supervised(data.train, data.validation, m.backbone, m.train);
    s1_summary = stage_summary(s1.metrics);
    checkpoint::save_checkpoint(stage1_path, checkpoint_config(m, false), {{"backbone", &s1.params}},
                                {{"stage", "stage1"}, {"checkpoint_id", s1.metrics.checkpoint_id}, {"summary", s1_summary}});
  } else {
    const auto ck = checkpoint::load_checkpoint(m.stage1_checkpoint, checkpoint_config(m, false));
    s1.params = backbone::init_backbone_params(m.backbone, m.train.seed);
    checkpoint::restore(ck.store("backbone"), s1.params);
    s1_summary = ck.metadata.value("summary", nlohmann::json::object());
    s1.metrics.mean_g_norm = s1_summary.value("mean_g_norm", 0.0);
    s1.metrics.checkpoint_id = ck.metadata.value("checkpoint_id", std::string{});
    if (fs::absolute(m.stage1_checkpoint) != fs::absolute(stage1_path)) fs::copy_file(m.stage1_checkpoint, stage1_path, fs::copy_options::overwrite_existing);
    s1_summary["source"] = m.stage1_checkpoint;
  }

  std::vector<StepRecord> steps = s1.metrics.steps;
  std::vector<EpochRecord> epochs = s1.metrics.epochs;
  nlohmann::json summary = {{"method", to_string(m.method)},
                            {"labeled_ratio", data.split.labeled_ratio},
                            {"split_seed", data.split.seed},
                            {"seed", m.train.seed},
                            {"stage1", s1_summary}};

  const TrainResult* final_result = &s1;
  TrainResult s2;
  if (m.method != Method::SupervisedOnly) {
    if (m.method == Method::PseudoLabel) {
      const auto dists = predict(s1.params, m.backbone, data.unlabeled.videos);
      const auto labels = semisup::hard_pseudo_labels(data.unlabeled_ids, dists, m.train.pseudo_threshold);
      semisup::write_pseudo_labels(out_dir / "pseudo_labels.csv", labels, checkpoint::file_hash(stage1_path));
    }
    SemiSupOptions opts;
    opts.maple = m.maple;
    opts.reference_g_norm = s1.metrics.mean_g_norm;
    s2 = train_semisupervised(data.train, data.validation, data.unlabeled, s1.params, m.method, m.backbone, m.train, opts);
    steps.insert(steps.end(), s2.metrics.steps.begin(), s2.metrics.steps.end());
    epochs.insert(epochs.end(), s2.metrics.epochs.begin(), s2.metrics.epochs.end());
    summary["stage2"] = stage_summary(s2.metrics);
    if (s2.metrics.phase_transition_epoch) summary["phase_transition_epoch"] = *s2.metrics.phase_transition_epoch;
    if (!s2.metrics.l2_trace.empty()) {
      const fs::path trace = out_dir / "l2_trace.csv";
      fs::remove(trace);
      s2.metrics.l2_trace.write_csv(trace);
      double r_sum = 0.0;
      for (const auto& e : s2.metrics.l2_trace.entries()) r_sum += e.mean_r_norm;
      summary["l2"] = {{"stage1_mean_g_norm", s1.metrics.mean_g_norm},
                       {"stage2_mean_r_norm", r_sum / static_cast<double>(s2.metrics.l2_trace.entries().size())}};
    }
    write_events_csv(out_dir / "events.csv", s2.metrics.events);
    final_result = &s2;
  }

  std::vector<checkpoint::NamedStore> stores = {{"backbone", &final_result->params}};
  const bool with_maple = final_result->maple.size() > 0;
  if (with_maple) stores.emplace_back("maple", &final_result->maple);
  const fs::path final_path = out_dir / "final.ckpt";
  checkpoint::save_checkpoint(final_path, checkpoint_config(m, with_maple), stores,
                              {{"method", to_string(m.method)}, {"checkpoint_id", final_result->metrics.checkpoint_id}});
  summary["checkpoint"] = "final.ckpt";
  summary["checkpoint_hash"] = checkpoint::file_hash(final_path);
  summary["best_val_accuracy"] = final_result->metrics.best_accuracy;
  summary["per_class_val_accuracy"] = final_result->metrics.per_class_accuracy;

  if (data.test.size() > 0) {
    const EvalResult ev = evaluate(final_result->params, m.backbone, data.test);
    summary["test_accuracy"] = ev.accuracy;
    summary["per_class_accuracy"] = ev.per_class_accuracy;
  }
  write_steps_csv(out_dir / "steps.csv", steps);
  write_epochs_csv(out_dir / "epochs.csv", epochs);
  std::ofstream(out_dir / "summary.json") << summary.dump(2) << '\n';
  return summary;
}

std::vector<SweepRow> sweep_mask_ratio(const RunManifest& m, const std::vector<double>& ratios) {
  for (double r : ratios)
    if (!(r >= 0.0 && r < 1.0)) throw std::invalid_argument("sweep_mask_ratio: ratios must lie in [0, 1)");
  const ExperimentData data = load_experiment_data(m);
  const TrainResult s1 = train_supervised(data.train, data.validation, m.backbone, m.train);
  std::vector<SweepRow> rows;
  for (double ratio : ratios) {
    TrainConfig tcfg = m.train;
    tcfg.mask_ratio = ratio;
    SemiSupOptions opts;
    opts.maple = m.maple;
    opts.maple.mask_ratio = ratio;
    const TrainResult s2 = train_semisupervised(data.train, data.validation, data.unlabeled, s1.params, Method::Maple,
                                                m.backbone, tcfg, opts);
    const double acc = data.test.size() > 0 ? evaluate(s2.params, m.backbone, data.test).accuracy : s2.metrics.best_accuracy;
    rows.push_back({ratio, acc, m.train.seed});
  }
  auto out = open_csv(fs::path(m.output_dir) / "sweep.csv");
  out << "mask_ratio,accuracy,seed\n";
  for (const auto& r : rows) out << r.ratio << ',' << r.accuracy << ',' << r.seed << '\n';
  return rows;
}

// ---- reports ---------------------------------------------------------------------

Report report(const fs::path& run_dir) {
  Report rep;
  std::vector<std::pair<fs::path, nlohmann::json>> runs;
  auto consider = [&](const fs::path& dir) {
    const fs::path s = dir / "summary.json";
    if (!fs::exists(s)) return;
    std::ifstream in(s);
    try {
      runs.emplace_back(dir, nlohmann::json::parse(in));
    } catch (const std::exception& e) {
      rep.warnings.push_back("unreadable summary in " + dir.string() + ": " + e.what());
    }
  };
  if (!fs::is_directory(run_dir)) {
    rep.warnings.push_back("run directory " + run_dir.string() + " does not exist");
  } else {
    consider(run_dir);
    std::vector<fs::path> subdirs;
    for (const auto& entry : fs::directory_iterator(run_dir))
      if (entry.is_directory()) subdirs.push_back(entry.path());
    std::sort(subdirs.begin(), subdirs.end());
    for (const auto& d : subdirs) consider(d);
  }
  if (runs.empty()) rep.warnings.push_back("no completed runs found; report is empty");

  // method -> ratio -> accuracies
  std::map<std::string, std::map<double, std::vector<double>>> cells;
  std::vector<double> all_ratios;
  auto per_class = open_csv(run_dir / "per_class.csv");
  per_class << "run,method,labeled_ratio,seed,class,accuracy\n";
  auto traces = open_csv(run_dir / "l2_traces.csv");
  traces << "run,method,step,mean_g_norm,mean_r_norm,loss\n";
  nlohmann::json run_list = nlohmann::json::array();
  for (const auto& [dir, s] : runs) {
    const std::string method = s.value("method", "unknown");
    const double ratio = s.value("labeled_ratio", 0.0);
    const std::string name = dir.filename().string();
    double acc;
    if (s.contains("test_accuracy")) {
      acc = s["test_accuracy"].get<double>();
    } else {
      acc = s.value("best_val_accuracy", 0.0);
      rep.warnings.push_back("partial report: run " + name + " has no test accuracy; using validation accuracy");
    }
    cells[method][ratio].push_back(acc);
    all_ratios.push_back(ratio);
    const auto pc = s.contains("per_class_accuracy") ? s["per_class_accuracy"] : s.value("per_class_val_accuracy", nlohmann::json::array());
    for (std::size_t c = 0; c < pc.size(); ++c)
      per_class << name << ',' << method << ',' << ratio << ',' << s.value("seed", 0) << ',' << c << ',' << pc[c].get<double>() << '\n';
    const fs::path trace = dir / "l2_trace.csv";
    if (fs::exists(trace)) {
      std::ifstream in(trace);
      std::string line;
      std::getline(in, line);
      while (std::getline(in, line))
        if (!line.empty()) traces << name << ',' << method << ',' << line << '\n';
    } else if (method == "maple" || method == "mse-detached" || method == "mse-attached" || method == "vat+entmin+maple") {
      rep.warnings.push_back("partial report: run " + name + " has no L2 trace");
    }
    run_list.push_back({{"run", name}, {"method", method}, {"labeled_ratio", ratio}, {"accuracy", acc}});
  }
  std::sort(all_ratios.begin(), all_ratios.end());
  all_ratios.erase(std::unique(all_ratios.begin(), all_ratios.end()), all_ratios.end());

  auto matrix = open_csv(run_dir / "accuracy_matrix.csv");
  matrix << "method";
  for (double r : all_ratios) matrix << ',' << r;
  matrix << '\n';
  nlohmann::json matrix_json = nlohmann::json::object();
  for (const auto& [method, row] : cells) {
    matrix << method;
    for (double r : all_ratios) {
      matrix << ',';
      auto it = row.find(r);
      if (it == row.end()) continue;
      const double mean = std::accumulate(it->second.begin(), it->second.end(), 0.0) / static_cast<double>(it->second.size());
      matrix << mean;
      std::ostringstream key;
      key << r;
      matrix_json[method][key.str()] = mean;
    }
    matrix << '\n';
  }
  rep.summary = {{"runs", run_list}, {"accuracy_matrix", matrix_json}, {"warnings", rep.warnings}};
  std::ofstream(run_dir / "report.json") << rep.summary.dump(2) << '\n';
  return rep;
}

}  // namespace maple::harness
