// maple: command line front end for data generation, splitting, training,
// evaluation, mask-ratio sweeps and reports.
#include "maple/checkpoint.hpp"
#include "maple/dataset_io.hpp"
#include "maple/harness.hpp"
#include "maple/random.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using namespace maple;
using nlohmann::json;

namespace {

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return json::parse(in);
}

void emit(const json& j, const std::string& out) {
  if (out.empty()) {
    std::cout << j.dump(2) << '\n';
    return;
  }
  if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
  std::ofstream(out) << j.dump(2) << '\n';
}

// ---- gen-data ----

struct GenDataArgs {
  std::string config;
  std::string out = "data";
  std::optional<std::uint64_t> seed;
  io::GenerateOptions gen;
  int test_per_class = 0;
};

void apply_generate_json(const json& j, io::GenerateOptions& g, int& test_per_class) {
  g.videos_per_class = j.value("videos_per_class", g.videos_per_class);
  g.num_classes = j.value("num_classes", g.num_classes);
  g.frames = j.value("frames", g.frames);
  g.num_points = j.value("num_points", g.num_points);
  g.noise_scale = j.value("noise_scale", g.noise_scale);
  g.seed = j.value("seed", g.seed);
  g.synthetic.speed_jitter = j.value("speed_jitter", g.synthetic.speed_jitter);
  g.synthetic.blob_scale = j.value("blob_scale", g.synthetic.blob_scale);
  g.synthetic.motion_scale = j.value("motion_scale", g.synthetic.motion_scale);
  test_per_class = j.value("test_videos_per_class", test_per_class);
}

int run_gen_data(GenDataArgs& a) {
  if (!a.config.empty()) apply_generate_json(read_json(a.config), a.gen, a.test_per_class);
  if (a.seed) a.gen.seed = *a.seed;
  auto names = geometry::synthetic_class_names();
  if (static_cast<int>(names.size()) > a.gen.num_classes) names.resize(static_cast<std::size_t>(a.gen.num_classes));
  while (static_cast<int>(names.size()) < a.gen.num_classes) names.push_back("class" + std::to_string(names.size()));

  a.gen.prefix = "train";
  const auto train = io::generate_dataset(a.gen);
  io::write_dataset(a.out, "train", train, names);
  json result = {{"train_manifest", (fs::path(a.out) / "train.json").string()}, {"train_videos", train.size()}};
  if (a.test_per_class > 0) {
    io::GenerateOptions t = a.gen;
    t.videos_per_class = a.test_per_class;
    t.seed = mix_seed(a.gen.seed, 0x7e57);
    t.prefix = "test";
    const auto test = io::generate_dataset(t);
    io::write_dataset(a.out, "test", test, names);
    result["test_manifest"] = (fs::path(a.out) / "test.json").string();
    result["test_videos"] = test.size();
  }
  std::cout << result.dump(2) << '\n';
  return 0;
}

// ---- split ----

struct SplitArgs {
  std::string config;
  std::string manifest;
  std::string out = "split.json";
  double ratio = 0.1;
  std::optional<std::uint64_t> seed;
};

int run_split(SplitArgs& a) {
  std::uint64_t seed = 0;
  if (!a.config.empty()) {
    const json j = read_json(a.config);
    const fs::path base = fs::path(a.config).parent_path();
    if (a.manifest.empty() && j.contains("dataset")) a.manifest = (base / j["dataset"].get<std::string>()).string();
    a.ratio = j.value("labeled_ratio", a.ratio);
    seed = j.value("seed", seed);
  }
  if (a.seed) seed = *a.seed;
  if (a.manifest.empty()) throw std::invalid_argument("split: --manifest is required");
  const auto split = geometry::split_dataset(io::read_manifest(a.manifest), a.ratio, seed);
  io::write_split(a.out, split);
  std::cout << json{{"labeled", split.labeled_ids.size()}, {"unlabeled", split.unlabeled_ids.size()},
                    {"labeled_ratio", split.labeled_ratio}, {"seed", split.seed}, {"split", a.out}}
                   .dump(2)
            << '\n';
  return 0;
}

// ---- train / sweep ----

struct RunArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string method;
  std::string output;
  bool quiet = false;
};

harness::RunManifest load_run(const RunArgs& a) {
  harness::RunManifest m = harness::read_run_manifest(a.config);
  if (a.seed) m.train.seed = *a.seed;
  if (!a.method.empty()) m.method = harness::parse_method(a.method);
  if (!a.output.empty()) m.output_dir = a.output;
  return m;
}

int run_train(const RunArgs& a) {
  const auto summary = harness::run_experiment(load_run(a));
  if (!a.quiet) std::cout << summary.dump(2) << '\n';
  return 0;
}

int run_sweep(const RunArgs& a, const std::vector<double>& ratios) {
  const auto m = load_run(a);
  const auto rows = harness::sweep_mask_ratio(m, ratios);
  json out = json::array();
  for (const auto& r : rows) out.push_back({{"mask_ratio", r.ratio}, {"accuracy", r.accuracy}, {"seed", r.seed}});
  if (!a.quiet) std::cout << out.dump(2) << '\n';
  return 0;
}

// ---- evaluate / export ----

struct EvalArgs {
  std::string config;
  std::string checkpoint;
  std::string test;
  std::string out;
  int frames = 0;
  std::string clip_policy = "uniform-stride";
  std::optional<std::uint64_t> seed;
};

struct LoadedModel {
  backbone::BackboneConfig cfg;
  backbone::ModelParams params;
};

LoadedModel load_model(const std::string& path) {
  auto ck = checkpoint::load_checkpoint(path);
  if (!ck.config.contains("backbone")) throw std::runtime_error("checkpoint has no backbone config");
  LoadedModel m;
  m.cfg = backbone::backbone_config_from_json(ck.config["backbone"]);
  m.params = backbone::init_backbone_params(m.cfg, 0);
  checkpoint::restore(ck.store("backbone"), m.params);
  return m;
}

std::vector<geometry::PointCloudVideo> load_eval_videos(EvalArgs& a) {
  std::uint64_t seed = 0;
  if (!a.config.empty()) {
    const auto m = harness::read_run_manifest(a.config);
    if (a.test.empty()) a.test = m.test_dataset;
    if (a.frames == 0) a.frames = m.frames;
    a.clip_policy = m.clip_policy;
    seed = m.train.seed;
  }
  if (a.seed) seed = *a.seed;
  if (a.test.empty()) throw std::invalid_argument("a test manifest is required (--test or test_dataset in --config)");
  auto videos = io::load_videos(io::read_manifest(a.test));
  if (a.frames > 0) {
    const auto policy = geometry::parse_clip_policy(a.clip_policy);
    for (auto& v : videos) {
      auto c = geometry::temporal_clip(v, a.frames, policy, mix_seed(seed, string_seed(v.video_id)));
      c.video_id = v.video_id;
      c.class_id = v.class_id;
      v = std::move(c);
    }
  }
  return videos;
}

int run_evaluate(EvalArgs& a) {
  const auto model = load_model(a.checkpoint);
  const auto test = harness::make_labeled(load_eval_videos(a));
  const auto ev = harness::evaluate(model.params, model.cfg, test);
  emit({{"checkpoint", a.checkpoint},
        {"checkpoint_hash", checkpoint::file_hash(a.checkpoint)},
        {"accuracy", ev.accuracy},
        {"loss", ev.loss},
        {"per_class_accuracy", ev.per_class_accuracy},
        {"per_class_count", ev.per_class_count},
        {"items", test.size()}},
       a.out);
  return 0;
}

int run_export(EvalArgs& a) {
  const auto model = load_model(a.checkpoint);
  const auto videos = load_eval_videos(a);
  if (a.out.empty()) throw std::invalid_argument("export-features: --out is required");
  harness::export_features(a.out, model.params, model.cfg, videos);
  return 0;
}

// ---- report ----

int run_report(std::string run_dir, const std::string& config, const std::string& out) {
  if (run_dir.empty() && !config.empty()) run_dir = harness::read_run_manifest(config).output_dir;
  if (run_dir.empty()) throw std::invalid_argument("report: --run-dir or --config is required");
  const auto rep = harness::report(run_dir);
  for (const auto& w : rep.warnings) std::cerr << "warning: " << w << '\n';
  emit(rep.summary, out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semi-supervised point cloud video action recognition"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic point cloud video dataset");
  gen_cmd->add_option("--config", gen.config, "JSON file with generator options");
  gen_cmd->add_option("--out", gen.out, "Output directory")->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "Generator seed");
  gen_cmd->add_option("--videos-per-class", gen.gen.videos_per_class)->capture_default_str();
  gen_cmd->add_option("--classes", gen.gen.num_classes)->capture_default_str();
  gen_cmd->add_option("--frames", gen.gen.frames)->capture_default_str();
  gen_cmd->add_option("--points", gen.gen.num_points)->capture_default_str();
  gen_cmd->add_option("--noise", gen.gen.noise_scale)->capture_default_str();
  gen_cmd->add_option("--speed-jitter", gen.gen.synthetic.speed_jitter)->capture_default_str();
  gen_cmd->add_option("--motion-scale", gen.gen.synthetic.motion_scale)->capture_default_str();
  gen_cmd->add_option("--test-videos-per-class", gen.test_per_class, "Also write a held-out test set");

  SplitArgs split;
  auto* split_cmd = app.add_subcommand("split", "Class-stratified labeled/unlabeled split");
  split_cmd->add_option("--config", split.config, "Run manifest (dataset path) or split options");
  split_cmd->add_option("--manifest", split.manifest, "Dataset manifest");
  split_cmd->add_option("--ratio", split.ratio, "Labeled ratio")->capture_default_str();
  split_cmd->add_option("--out", split.out)->capture_default_str();
  split_cmd->add_option("--seed", split.seed);

  RunArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train both stages as the run manifest's method requires");
  train_cmd->add_option("--config", train.config, "Run manifest")->required();
  train_cmd->add_option("--seed", train.seed, "Overrides train.seed");
  train_cmd->add_option("--method", train.method, "Overrides the manifest's method");
  train_cmd->add_option("--output", train.output, "Overrides output_dir");
  train_cmd->add_flag("--quiet", train.quiet);

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("evaluate", "Accuracy of a checkpoint on a test manifest");
  eval_cmd->add_option("--checkpoint", eval.checkpoint)->required();
  eval_cmd->add_option("--test", eval.test, "Test dataset manifest");
  eval_cmd->add_option("--config", eval.config, "Run manifest supplying test set and clip settings");
  eval_cmd->add_option("--frames", eval.frames, "Clip length; 0 keeps the stored length");
  eval_cmd->add_option("--seed", eval.seed, "Clip seed");
  eval_cmd->add_option("--out", eval.out, "Write JSON here instead of stdout");

  EvalArgs feat;
  auto* feat_cmd = app.add_subcommand("export-features", "Write the global feature of every video to CSV");
  feat_cmd->add_option("--checkpoint", feat.checkpoint)->required();
  feat_cmd->add_option("--test", feat.test, "Dataset manifest");
  feat_cmd->add_option("--config", feat.config);
  feat_cmd->add_option("--frames", feat.frames);
  feat_cmd->add_option("--seed", feat.seed);
  feat_cmd->add_option("--out", feat.out)->required();

  RunArgs sweep;
  std::vector<double> ratios{0.25, 0.5, 0.75, 0.9};
  auto* sweep_cmd = app.add_subcommand("sweep-mask", "MAPLE stage 2 over several masking ratios");
  sweep_cmd->add_option("--config", sweep.config, "Run manifest")->required();
  sweep_cmd->add_option("--seed", sweep.seed);
  sweep_cmd->add_option("--ratios", ratios)->delimiter(',')->capture_default_str();
  sweep_cmd->add_option("--output", sweep.output);
  sweep_cmd->add_flag("--quiet", sweep.quiet);

  std::string run_dir, report_config, report_out;
  auto* report_cmd = app.add_subcommand("report", "Summarize the runs under a directory");
  report_cmd->add_option("--run-dir", run_dir);
  report_cmd->add_option("--config", report_config, "Run manifest; its output_dir is used");
  report_cmd->add_option("--out", report_out, "Also write the report JSON here");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen_cmd) return run_gen_data(gen);
    if (*split_cmd) return run_split(split);
    if (*train_cmd) return run_train(train);
    if (*eval_cmd) return run_evaluate(eval);
    if (*feat_cmd) return run_export(feat);
    if (*sweep_cmd) return run_sweep(sweep, ratios);
    if (*report_cmd) return run_report(run_dir, report_config, report_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
