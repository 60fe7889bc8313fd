// Experiment driver: learning-rate schedule, supervised pre-training,
// semi-supervised fine-tuning, the staged VAT+EntMin+MAPLE schedule,
// evaluation, metrics files and reports.
#pragma once

#include "maple/autoencoder.hpp"
#include "maple/backbone.hpp"
#include "maple/geometry.hpp"
#include "maple/semisup.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace maple::harness {

using autoencoder::MapleConfig;
using autoencoder::MapleParams;
using backbone::BackboneConfig;
using backbone::ModelParams;
using geometry::PointCloudVideo;
using semisup::UnsupLossWeights;
using semisup::UnsupTermValues;
using semisup::VatConfig;

enum class Method {
  SupervisedOnly,
  PseudoLabel,
  Vat,
  VatEntmin,
  Maple,
  VatEntminMaple,  // staged: VAT+EntMin, then MAPLE
  MseDetached,     // reconstruction ablations
  MseAttached,
};

std::string to_string(Method m);
Method parse_method(const std::string& name);
const std::vector<Method>& all_methods();

/// Weights actually applied by a method; terms a method does not use are zeroed.
UnsupLossWeights effective_weights(Method m, const UnsupLossWeights& configured);

struct TrainConfig {
  static constexpr int kSchemaVersion = 1;

  double lr_base = 0.01;
  double lr_warmup_start = 1e-6;
  int warmup_epochs = 10;
  int final_epochs = 5;
  double lr_final = 0.001;
  int epochs = 40;         // stage 1
  int stage2_epochs = 40;  // stage 2 (both phases for the staged method)
  int phase_a_epochs = 12;
  int batch_labeled = 14;
  int batch_unlabeled = 0;  // 0 selects batch_labeled
  double mask_ratio = 0.75;
  UnsupLossWeights weights{1.0, 1.0, 0.5, 1.0};
  VatConfig vat;
  std::optional<double> pseudo_threshold;
  std::string optimizer = "sgd";
  double momentum = 0.9;
  double weight_decay = 0.0;
  double validation_fraction = 0.1;
  /// "best-val": highest validation accuracy, lower validation loss on ties.
  /// "last": the final epoch of the budget.
  std::string checkpoint_selection = "best-val";
  std::optional<int> patience;  // early stop on validation accuracy
  std::uint64_t seed = 0;

  int unlabeled_batch() const { return batch_unlabeled > 0 ? batch_unlabeled : batch_labeled; }
  void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Linear warm-up from lr_warmup_start to lr_base over warmup_epochs, lr_base
/// in the middle and lr_final over the last final_epochs of `total_epochs`.
double lr_at(int epoch, const TrainConfig& cfg, int total_epochs);
inline double lr_at(int epoch, const TrainConfig& cfg) { return lr_at(epoch, cfg, cfg.epochs); }

/// "sgd": momentum SGD with L2 weight decay added to the gradient.
/// "adam": Adam (beta1 = momentum, beta2 = 0.999, eps = 1e-8) with the same
/// L2 term. State is keyed by parameter name.
class Optimizer {
 public:
  Optimizer(std::string kind, double momentum, double weight_decay);
  void step(ParamStore& store, double lr);

 private:
  std::string kind_;
  double momentum_;
  double weight_decay_;
  long steps_ = 0;
  std::map<std::string, Matrix> first_;
  std::map<std::string, Matrix> second_;
};

// ---- data ----------------------------------------------------------------------

struct LabeledSet {
  std::vector<PointCloudVideo> videos;
  std::vector<int> labels;
  std::size_t size() const { return videos.size(); }
};

/// Videos with their class field removed.
struct UnlabeledSet {
  std::vector<PointCloudVideo> videos;
  std::size_t size() const { return videos.size(); }
};

LabeledSet make_labeled(std::vector<PointCloudVideo> videos);
UnlabeledSet make_unlabeled(std::vector<PointCloudVideo> videos);

/// Carves round(fraction * |labeled|) videos (at least one when fraction > 0
/// and two or more videos exist), taken round-robin over classes from
/// per-class shuffles. Returns (train, validation).
std::pair<LabeledSet, LabeledSet> carve_validation(const LabeledSet& labeled, double fraction, std::uint64_t seed);

// ---- metrics -------------------------------------------------------------------

struct StepRecord {
  std::string stage;
  int epoch = 0;
  long step = 0;
  double lr = 0.0;
  double labeled = 0.0;  // L_l
  UnsupTermValues terms;  // unweighted L_u components that were evaluated
  UnsupLossWeights weights;
  double total = 0.0;
};

struct EpochRecord {
  std::string stage;
  std::string phase;
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_accuracy = 0.0;
  double val_loss = 0.0;
  std::optional<double> mean_g_norm;
  std::optional<double> mean_r_norm;
};

struct MetricsRecord {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  std::vector<double> per_class_accuracy;
  double best_accuracy = 0.0;  // validation accuracy of the kept checkpoint
  int best_epoch = -1;
  std::string checkpoint_id;
  std::optional<int> phase_transition_epoch;
  std::vector<std::pair<int, std::string>> events;  // (epoch, marker)
  autoencoder::L2NormTrace l2_trace;
  double mean_g_norm = 0.0;  // running mean over the stage's steps
  long unlabeled_forwards = 0;
};

void write_steps_csv(const std::filesystem::path& path, const std::vector<StepRecord>& steps);
void write_epochs_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& epochs);
void write_events_csv(const std::filesystem::path& path, const std::vector<std::pair<int, std::string>>& events);

// ---- training --------------------------------------------------------------------

/// Called after every epoch with the epoch's record and current parameters.
using EpochHook = std::function<void(const EpochRecord&, const ModelParams&)>;

struct TrainResult {
  ModelParams params;  // best checkpoint
  MapleParams maple;   // empty unless the method reconstructs
  MetricsRecord metrics;
};

/// Stage 1: cross-entropy on labeled mini-batches of size b_l. The checkpoint
/// with the best validation accuracy is kept (lower validation loss breaks
/// ties); without a validation set the last epoch is kept.
TrainResult train_supervised(const LabeledSet& labeled, const LabeledSet& validation, const BackboneConfig& cfg,
                             const TrainConfig& tcfg, const ModelParams* init = nullptr, const EpochHook& hook = {});

struct SemiSupOptions {
  MapleConfig maple;
  const MapleParams* maple_init = nullptr;  // fresh decoder when null
  /// Stage-1 running mean of ||g||, copied into the result for diagnostics.
  std::optional<double> reference_g_norm;
  EpochHook hook;
};

/// Stage 2 from a stage-1 checkpoint. One labeled batch (b_l, cycling) and one
/// unlabeled batch (b_u) per iteration; an epoch is one pass over D_u.
TrainResult train_semisupervised(const LabeledSet& labeled, const LabeledSet& validation, const UnlabeledSet& unlabeled,
                                 const ModelParams& stage1, Method method, const BackboneConfig& cfg,
                                 const TrainConfig& tcfg, const SemiSupOptions& options = {});

/// Phase A (phase_a_epochs of VAT+EntMin) then phase B (MAPLE only) inside one
/// stage-2 schedule of stage2_epochs.
TrainResult train_staged_combo(const LabeledSet& labeled, const LabeledSet& validation, const UnlabeledSet& unlabeled,
                               const ModelParams& stage1, const BackboneConfig& cfg, const TrainConfig& tcfg,
                               const SemiSupOptions& options = {});

// ---- inference -----------------------------------------------------------------

struct EvalResult {
  double accuracy = 0.0;  // percent
  double loss = 0.0;      // mean cross-entropy
  std::vector<double> per_class_accuracy;
  std::vector<int> per_class_count;
  std::vector<int> predictions;
};

/// Backbone only; nothing is mutated.
EvalResult evaluate(const ModelParams& params, const BackboneConfig& cfg, const LabeledSet& test, int batch_size = 32);

/// Predicted distributions for every video, batched.
std::vector<backbone::ClassDistribution> predict(const ModelParams& params, const BackboneConfig& cfg,
                                                 const std::vector<PointCloudVideo>& videos, int batch_size = 32);

/// CSV: video_id, class, then the D components of the global feature.
void export_features(const std::filesystem::path& path, const ModelParams& params, const BackboneConfig& cfg,
                     const std::vector<PointCloudVideo>& videos);

// ---- experiments ----------------------------------------------------------------

struct RunManifest {
  static constexpr int kSchemaVersion = 1;
  std::string dataset;       // training DatasetManifest
  std::string test_dataset;  // optional
  std::string split;         // SemiSplit file
  BackboneConfig backbone;
  MapleConfig maple;
  TrainConfig train;
  Method method = Method::Maple;
  std::string output_dir = "runs/run";
  std::vector<std::string> report_formats{"csv", "json"};
  int frames = 0;  // clip length; 0 keeps the dataset's
  std::string clip_policy = "uniform-stride";
  /// When set, stage 1 is loaded from this checkpoint instead of trained.
  std::string stage1_checkpoint;
};

nlohmann::json to_json(const RunManifest& m);
/// Relative paths are resolved against `base_dir`.
RunManifest run_manifest_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
RunManifest read_run_manifest(const std::filesystem::path& path);
void write_run_manifest(const std::filesystem::path& path, const RunManifest& m);

/// Loads data, trains both stages as the method requires, evaluates on the
/// test set when given and writes checkpoints, metrics and summary.json into
/// output_dir. Returns the summary.
nlohmann::json run_experiment(const RunManifest& manifest);

struct SweepRow {
  double ratio = 0.0;
  double accuracy = 0.0;
  std::uint64_t seed = 0;
};

/// MAPLE stage 2 per ratio from a shared stage-1 checkpoint and shared seeds;
/// writes output_dir/sweep.csv.
std::vector<SweepRow> sweep_mask_ratio(const RunManifest& manifest, const std::vector<double>& ratios);

struct Report {
  nlohmann::json summary;
  std::vector<std::string> warnings;
};

/// Scans run_dir (and its direct subdirectories) for summary.json files and
/// writes accuracy_matrix.csv, per_class.csv, l2_traces.csv and report.json.
Report report(const std::filesystem::path& run_dir);

}  // namespace maple::harness
