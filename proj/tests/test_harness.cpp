#include "maple/harness.hpp"
#include "tiny_model.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

using namespace maple;
using namespace maple::harness;
namespace fs = std::filesystem;

namespace {

BackboneConfig four_class_config() {
  auto cfg = maple::testing::tiny_config();
  cfg.num_classes = 4;
  return cfg;
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.epochs = 2;
  t.stage2_epochs = 2;
  t.phase_a_epochs = 1;
  t.warmup_epochs = 0;
  t.final_epochs = 0;
  t.batch_labeled = 2;
  t.seed = 7;
  return t;
}

struct TinyData {
  LabeledSet train, validation;
  UnlabeledSet unlabeled;
};

TinyData tiny_data() {
  TinyData d;
  d.train = make_labeled(maple::testing::tiny_videos(4, 4, 8, 100));
  d.validation = make_labeled(maple::testing::tiny_videos(4, 4, 8, 200));
  d.unlabeled = make_unlabeled(maple::testing::tiny_videos(6, 4, 8, 300));
  return d;
}

double max_param_diff(const ParamStore& a, const ParamStore& b) {
  double worst = 0.0;
  for (const auto& [name, p] : a) worst = std::max(worst, (p.value - b.at(name).value).cwiseAbs().maxCoeff());
  return worst;
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST(Schedule, DefaultValues) {
  const TrainConfig cfg;
  EXPECT_EQ(lr_at(0, cfg), 1e-6);
  EXPECT_EQ(lr_at(20, cfg), 0.01);
  EXPECT_EQ(lr_at(10, cfg), 0.01);
  for (int e = 35; e < 40; ++e) EXPECT_EQ(lr_at(e, cfg), 0.001);
  EXPECT_EQ(lr_at(34, cfg), 0.01);
  EXPECT_NEAR(lr_at(5, cfg), 1e-6 + (0.01 - 1e-6) * 0.5, 1e-18);
  for (int e = 1; e < 10; ++e) EXPECT_GT(lr_at(e, cfg), lr_at(e - 1, cfg));
  EXPECT_THROW(lr_at(-1, cfg), std::invalid_argument);
  EXPECT_THROW(lr_at(40, cfg), std::invalid_argument);
  EXPECT_EQ(lr_at(0, cfg, 5), 0.001);
}

TEST(Config, ValidationAndJson) {
  TrainConfig cfg;
  cfg.checkpoint_selection = "last";
  cfg.pseudo_threshold = 0.9;
  const auto back = train_config_from_json(to_json(cfg));
  EXPECT_EQ(to_json(back), to_json(cfg));
  EXPECT_EQ(back.unlabeled_batch(), cfg.batch_labeled);

  auto bad = cfg;
  bad.warmup_epochs = 40;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.phase_a_epochs = 41;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.batch_unlabeled = 3;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.optimizer = "rmsprop";
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.checkpoint_selection = "median";
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.lr_base = 0.0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);

  for (Method m : all_methods()) EXPECT_EQ(parse_method(to_string(m)), m);
  EXPECT_THROW(parse_method("mixmatch"), std::invalid_argument);
}

TEST(Optimizer, ZeroLearningRateIsNoOp) {
  for (const char* kind : {"sgd", "adam"}) {
    ParamStore store;
    store.add("w", Matrix::Constant(2, 3, 0.5));
    store.at("w").grad = Matrix::Constant(2, 3, 1.5);
    Optimizer opt(kind, 0.9, 0.1);
    for (int i = 0; i < 3; ++i) opt.step(store, 0.0);
    EXPECT_EQ(store.at("w").value, Matrix::Constant(2, 3, 0.5)) << kind;
  }
  ParamStore store;
  store.add("w", Matrix::Constant(1, 1, 1.0));
  store.at("w").grad = Matrix::Constant(1, 1, 2.0);
  Optimizer sgd("sgd", 0.0, 0.0);
  sgd.step(store, 0.25);
  EXPECT_DOUBLE_EQ(store.at("w").value(0, 0), 0.5);
  EXPECT_THROW(Optimizer("lbfgs", 0.9, 0.0), std::invalid_argument);
}

TEST(Data, CarveValidationIsBalancedAndDisjoint) {
  const auto all = make_labeled(maple::testing::tiny_videos(20, 4, 8, 1));
  const auto [train, val] = carve_validation(all, 0.2, 3);
  EXPECT_EQ(val.size(), 4u);
  EXPECT_EQ(train.size(), 16u);
  std::vector<int> per_class(4, 0);
  for (int l : val.labels) ++per_class[static_cast<std::size_t>(l)];
  EXPECT_EQ(per_class, (std::vector<int>{1, 1, 1, 1}));
  std::set<std::string> ids;
  for (const auto& v : train.videos) ids.insert(v.video_id);
  for (const auto& v : val.videos) EXPECT_TRUE(ids.insert(v.video_id).second);
  EXPECT_EQ(carve_validation(all, 0.0, 3).second.size(), 0u);
  const auto unl = make_unlabeled(maple::testing::tiny_videos(2, 4, 8, 1));
  for (const auto& v : unl.videos) EXPECT_FALSE(v.class_id.has_value());
}

TEST(Training, LoggedTotalEqualsLabeledPlusWeightedTerms) {
  const auto cfg = four_class_config();
  auto tcfg = tiny_train();
  tcfg.weights = {0.3, 0.2, 0.7, 0.0};
  const auto d = tiny_data();
  const auto s1 = train_supervised(d.train, d.validation, cfg, tcfg);
  SemiSupOptions opts;
  opts.maple = maple::testing::tiny_maple_config();
  tcfg.mask_ratio = 0.5;
  const auto s2 = train_staged_combo(d.train, d.validation, d.unlabeled, s1.params, cfg, tcfg, opts);

  ASSERT_EQ(s2.metrics.steps.size(), 6u);  // 2 epochs of ceil(6 / 2) batches
  for (const auto& r : s2.metrics.steps) {
    double expected = r.labeled;
    if (r.weights.vat > 0) expected += r.weights.vat * r.terms.vat.value();
    if (r.weights.entmin > 0) expected += r.weights.entmin * r.terms.entmin.value();
    if (r.weights.maple > 0) expected += r.weights.maple * r.terms.maple.value();
    EXPECT_NEAR(r.total, expected, 1e-12);
    const bool phase_a = r.epoch < tcfg.phase_a_epochs;
    EXPECT_EQ(r.terms.vat.has_value(), phase_a);
    EXPECT_EQ(r.terms.entmin.has_value(), phase_a);
    EXPECT_EQ(r.terms.maple.has_value(), !phase_a);
    EXPECT_FALSE(r.terms.pseudo.has_value());
  }
  for (const auto& r : s1.metrics.steps) EXPECT_EQ(r.total, r.labeled);
  ASSERT_EQ(s2.metrics.events.size(), 1u);
  EXPECT_EQ(s2.metrics.events[0], (std::pair<int, std::string>{1, "phase-transition"}));
  EXPECT_EQ(s2.metrics.epochs[0].phase, "A");
  EXPECT_EQ(s2.metrics.epochs[1].phase, "B");
  EXPECT_EQ(s2.metrics.l2_trace.entries().size(), 3u);
}

TEST(Training, DeterministicForFixedSeed) {
  const auto cfg = four_class_config();
  const auto tcfg = tiny_train();
  const auto d = tiny_data();
  const auto a = train_supervised(d.train, d.validation, cfg, tcfg);
  const auto b = train_supervised(d.train, d.validation, cfg, tcfg);
  EXPECT_EQ(max_param_diff(a.params, b.params), 0.0);
  SemiSupOptions opts;
  opts.maple = maple::testing::tiny_maple_config();
  auto t2 = tcfg;
  t2.mask_ratio = 0.5;
  const auto c = train_semisupervised(d.train, d.validation, d.unlabeled, a.params, Method::Maple, cfg, t2, opts);
  const auto e = train_semisupervised(d.train, d.validation, d.unlabeled, a.params, Method::Maple, cfg, t2, opts);
  EXPECT_EQ(max_param_diff(c.params, e.params), 0.0);
  EXPECT_EQ(max_param_diff(c.maple, e.maple), 0.0);
  EXPECT_GT(max_param_diff(c.params, a.params), 0.0);
}

TEST(Training, ZeroWeightEqualsContinuedSupervised) {
  const auto cfg = four_class_config();
  auto tcfg = tiny_train();
  const auto d = tiny_data();
  const auto s1 = train_supervised(d.train, d.validation, cfg, tcfg);
  tcfg.weights.maple = 0.0;
  tcfg.mask_ratio = 0.5;
  SemiSupOptions opts;
  opts.maple = maple::testing::tiny_maple_config();
  const auto m = train_semisupervised(d.train, d.validation, d.unlabeled, s1.params, Method::Maple, cfg, tcfg, opts);
  const auto s = train_semisupervised(d.train, d.validation, d.unlabeled, s1.params, Method::SupervisedOnly, cfg, tcfg, opts);
  EXPECT_EQ(max_param_diff(m.params, s.params), 0.0);
  EXPECT_EQ(m.metrics.unlabeled_forwards, 0);
}

TEST(Training, StagedScheduleReducesToSingleMethods) {
  const auto cfg = four_class_config();
  auto tcfg = tiny_train();
  tcfg.mask_ratio = 0.5;
  const auto d = tiny_data();
  const auto s1 = train_supervised(d.train, d.validation, cfg, tcfg);
  SemiSupOptions opts;
  opts.maple = maple::testing::tiny_maple_config();

  tcfg.phase_a_epochs = 0;
  const auto all_b = train_staged_combo(d.train, d.validation, d.unlabeled, s1.params, cfg, tcfg, opts);
  const auto maple_only = train_semisupervised(d.train, d.validation, d.unlabeled, s1.params, Method::Maple, cfg, tcfg, opts);
  EXPECT_EQ(max_param_diff(all_b.params, maple_only.params), 0.0);
  EXPECT_EQ(all_b.metrics.events.size(), 1u);

  tcfg.phase_a_epochs = tcfg.stage2_epochs;
  const auto all_a = train_staged_combo(d.train, d.validation, d.unlabeled, s1.params, cfg, tcfg, opts);
  const auto vat_entmin = train_semisupervised(d.train, d.validation, d.unlabeled, s1.params, Method::VatEntmin, cfg, tcfg, opts);
  EXPECT_EQ(max_param_diff(all_a.params, vat_entmin.params), 0.0);
  EXPECT_EQ(all_a.metrics.events.size(), 1u);
  EXPECT_EQ(all_a.metrics.phase_transition_epoch, tcfg.stage2_epochs);
}

TEST(Training, MaskRatioLeavesExpectedVisibleTokens) {
  EXPECT_EQ(autoencoder::sample_mask(8, 0.75, 1).visible.size(), 2u);
}

TEST(Evaluate, AccuracyArithmetic) {
  const auto cfg = four_class_config();
  auto params = backbone::init_backbone_params(cfg, 3);
  maple::testing::randomize(params, 0.3, 4);
  const auto test = make_labeled(maple::testing::tiny_videos(8, 4, 8, 50));
  const auto r = evaluate(params, cfg, test, 3);
  const auto dists = predict(params, cfg, test.videos, 5);
  int correct = 0;
  double loss = 0.0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    EXPECT_EQ(r.predictions[i], dists[i].argmax());
    correct += dists[i].argmax() == test.labels[i];
    loss -= std::log(dists[i].probs(test.labels[i]));
  }
  EXPECT_NEAR(r.accuracy, 100.0 * correct / 8.0, 1e-12);
  EXPECT_NEAR(r.loss, loss / 8.0, 1e-10);
  EXPECT_EQ(r.per_class_count, (std::vector<int>{2, 2, 2, 2}));
  double per_class_mean = 0.0;
  for (double a : r.per_class_accuracy) per_class_mean += a / 4.0;
  EXPECT_NEAR(per_class_mean, r.accuracy, 1e-12);  // balanced classes
  EXPECT_THROW(evaluate(params, cfg, LabeledSet{}), std::invalid_argument);
}

TEST(Report, EmptyDirectory) {
  const auto dir = fresh_dir("maple_report_empty");
  const auto rep = report(dir);
  ASSERT_FALSE(rep.warnings.empty());
  EXPECT_NE(rep.warnings.front().find("no completed runs"), std::string::npos);
  EXPECT_EQ(read_lines(dir / "accuracy_matrix.csv"), (std::vector<std::string>{"method"}));
  EXPECT_TRUE(fs::exists(dir / "report.json"));
  fs::remove_all(dir);
}

TEST(Report, SingleRunSingleRatio) {
  const auto dir = fresh_dir("maple_report_one");
  fs::create_directories(dir / "run0");
  std::ofstream(dir / "run0" / "summary.json")
      << nlohmann::json{{"method", "maple"}, {"labeled_ratio", 0.1}, {"seed", 0}, {"test_accuracy", 62.5},
                        {"per_class_accuracy", {50.0, 75.0}}}
             .dump();
  std::ofstream(dir / "run0" / "l2_trace.csv") << "step,mean_g_norm,mean_r_norm,loss\n0,1,2,0.5\n1,1,2,0.4\n";
  const auto rep = report(dir);
  EXPECT_TRUE(rep.warnings.empty());
  EXPECT_EQ(read_lines(dir / "accuracy_matrix.csv"), (std::vector<std::string>{"method,0.1", "maple,62.5"}));
  EXPECT_EQ(read_lines(dir / "per_class.csv").size(), 3u);
  const auto traces = read_lines(dir / "l2_traces.csv");
  ASSERT_EQ(traces.size(), 3u);
  EXPECT_EQ(traces[1], "run0,maple,0,1,2,0.5");
  EXPECT_DOUBLE_EQ(rep.summary["accuracy_matrix"]["maple"]["0.1"].get<double>(), 62.5);
  fs::remove_all(dir);
}

TEST(Report, MissingTraceAndTestAccuracyAreFlagged) {
  const auto dir = fresh_dir("maple_report_partial");
  std::ofstream(dir / "summary.json") << nlohmann::json{{"method", "mse-detached"}, {"labeled_ratio", 0.1}, {"best_val_accuracy", 40.0}}.dump();
  const auto rep = report(dir);
  EXPECT_EQ(rep.warnings.size(), 2u);
  fs::remove_all(dir);
}
