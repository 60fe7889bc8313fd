#include "maple/backbone.hpp"
#include "tiny_model.hpp"

#include <nlohmann/json.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

using namespace maple;
using namespace maple::backbone;
using maple::testing::tiny_config;

namespace {

BackboneConfig small_config() {
  BackboneConfig cfg = tiny_config();
  cfg.width = 8;
  cfg.num_classes = 4;
  cfg.init_std = 0.3;
  return cfg;
}

ModelParams random_params(const BackboneConfig& cfg, std::uint64_t seed) {
  ModelParams p = init_backbone_params(cfg, seed);
  maple::testing::randomize(p, 0.3, seed + 1);
  return p;
}

double max_abs(const Matrix& m) { return m.cwiseAbs().maxCoeff(); }

}  // namespace

TEST(Backbone, ShapeContract) {
  BackboneConfig cfg = small_config();
  cfg.kappa = 3;
  const auto params = random_params(cfg, 1);
  const auto v = geometry::generate_synthetic_action(1, 8, 10, 0.01, 2);
  const auto grouping = geometry::group_local_areas(v, cfg.grouping());
  const auto s = p4conv_forward(grouping, v, params, cfg);
  EXPECT_EQ(s.segments, 4);
  EXPECT_EQ(s.anchors, 4);
  EXPECT_EQ(s.features.rows(), 16);
  EXPECT_EQ(s.features.cols(), 8);
  const auto m = spatial_transformer_forward(s, params, cfg);
  EXPECT_EQ(m.features.rows(), s.features.rows());
  const auto g = spatial_pool(m);
  EXPECT_EQ(g.length(), 4);
  const auto z = temporal_encoder_forward(g, params, cfg);
  EXPECT_EQ(z.tokens.rows(), 4);
  const auto [global, dist] = prediction_head(z, params, cfg);
  EXPECT_EQ(global.values.size(), 8);
  EXPECT_EQ(dist.probs.size(), 4);
  EXPECT_NEAR(dist.probs.sum(), 1.0, 1e-12);
}

TEST(Backbone, ConfigValidation) {
  BackboneConfig cfg = small_config();
  cfg.heads = 3;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = small_config();
  cfg.spatial_blocks = -1;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  EXPECT_EQ(backbone_config_from_json(to_json(small_config())).width, 8);
}

TEST(P4Conv, IdenticalPointsGiveIdenticalAnchorFeatures) {
  const auto cfg = small_config();
  const auto params = random_params(cfg, 3);
  geometry::PointCloudVideo v;
  v.frames = 4;
  v.num_points = 6;
  v.points = Matrix::Constant(24, 3, 0.4);
  const auto s = p4conv_forward(geometry::group_local_areas(v, cfg.grouping()), v, params, cfg);
  for (int t = 0; t < s.segments; ++t)
    for (int a = 1; a < s.anchors; ++a)
      EXPECT_LT(max_abs(s.features.row(t * s.anchors + a) - s.features.row(t * s.anchors)), 1e-12);
}

TEST(P4Conv, NeighborOrderDoesNotMatter) {
  const auto cfg = small_config();
  const auto params = random_params(cfg, 4);
  const auto v = geometry::generate_synthetic_action(2, 4, 12, 0.05, 5);
  auto grouping = geometry::group_local_areas(v, cfg.grouping());
  const auto before = p4conv_forward(grouping, v, params, cfg);
  // reverse the entry list of every anchor
  const int per = grouping.entries_per_anchor();
  for (auto& seg : grouping.segments)
    for (int a = 0; a < grouping.anchors; ++a) {
      std::reverse(seg.neighbor_rows.begin() + a * per, seg.neighbor_rows.begin() + (a + 1) * per);
      std::reverse(seg.neighbor_dt.begin() + a * per, seg.neighbor_dt.begin() + (a + 1) * per);
    }
  const auto after = p4conv_forward(grouping, v, params, cfg);
  EXPECT_EQ(before.features, after.features);
}

TEST(P4Conv, ZeroProjectionGivesZeroFeatures) {
  const auto cfg = small_config();
  auto params = random_params(cfg, 6);
  params.at("p4conv/proj.weight").value.setZero();
  params.at("p4conv/proj.bias").value.setZero();
  const auto v = geometry::generate_synthetic_action(1, 4, 8, 0.05, 1);
  EXPECT_EQ(max_abs(p4conv_forward(geometry::group_local_areas(v, cfg.grouping()), v, params, cfg).features), 0.0);
}

TEST(SpatialTransformer, SegmentsAreIndependent) {
  const auto cfg = small_config();
  const auto params = random_params(cfg, 7);
  Rng rng(8);
  ShortTermLocalFeature s{3, 4, Matrix(12, 8), Matrix::Zero(12, 3), {0, 1, 2}};
  for (Eigen::Index i = 0; i < s.features.size(); ++i) s.features.data()[i] = rng.normal();
  const auto base = spatial_transformer_forward(s, params, cfg);
  s.features.middleRows(4, 4).setZero();
  const auto changed = spatial_transformer_forward(s, params, cfg);
  EXPECT_EQ(base.features.topRows(4), changed.features.topRows(4));
  EXPECT_EQ(base.features.bottomRows(4), changed.features.bottomRows(4));
  EXPECT_GT(max_abs(base.features.middleRows(4, 4) - changed.features.middleRows(4, 4)), 1e-6);
}

TEST(SpatialTransformer, AnchorPermutationIsEquivariant) {
  const auto cfg = small_config();
  const auto params = random_params(cfg, 9);
  Rng rng(10);
  ShortTermLocalFeature s{2, 5, Matrix(10, 8), Matrix::Zero(10, 3), {0, 1}};
  for (Eigen::Index i = 0; i < s.features.size(); ++i) s.features.data()[i] = rng.normal();
  const std::vector<int> perm{3, 0, 4, 1, 2};
  ShortTermLocalFeature p = s;
  for (int t = 0; t < 2; ++t)
    for (int a = 0; a < 5; ++a) p.features.row(t * 5 + a) = s.features.row(t * 5 + perm[static_cast<std::size_t>(a)]);
  const auto out = spatial_transformer_forward(s, params, cfg);
  const auto out_p = spatial_transformer_forward(p, params, cfg);
  for (int t = 0; t < 2; ++t)
    for (int a = 0; a < 5; ++a)
      EXPECT_LT(max_abs(out_p.features.row(t * 5 + a) - out.features.row(t * 5 + perm[static_cast<std::size_t>(a)])), 1e-12);
}

TEST(SpatialTransformer, SingleAnchorDependsOnlyOnItself) {
  const auto cfg = small_config();
  const auto params = random_params(cfg, 11);
  Rng rng(12);
  ShortTermLocalFeature s{3, 1, Matrix(3, 8), Matrix::Zero(3, 3), {0, 1, 2}};
  for (Eigen::Index i = 0; i < s.features.size(); ++i) s.features.data()[i] = rng.normal();
  const auto out = spatial_transformer_forward(s, params, cfg);
  ShortTermLocalFeature alone{1, 1, s.features.row(1), Matrix::Zero(1, 3), {0}};
  EXPECT_LT(max_abs(spatial_transformer_forward(alone, params, cfg).features - out.features.row(1)), 1e-14);
}

TEST(SpatialPool, ChannelwiseMax) {
  MergedLocalFeature m{1, 2, Matrix(2, 2)};
  m.features << 1, -2, 0, 5;
  EXPECT_EQ(spatial_pool(m).tokens, (Matrix(1, 2) << 1, 5).finished());
  MergedLocalFeature one{2, 1, Matrix(2, 2)};
  one.features << 1, 2, 3, 4;
  EXPECT_EQ(spatial_pool(one).tokens, one.features);
  MergedLocalFeature dup{1, 4, Matrix(4, 2)};
  dup.features << 1, -2, 0, 5, 1, -2, 0, 5;
  EXPECT_EQ(spatial_pool(dup).tokens, spatial_pool(m).tokens);
}

TEST(TemporalEncoder, IdenticalTokensStayIdentical) {
  const auto cfg = small_config();
  const auto params = random_params(cfg, 13);
  TokenSequence g;
  g.tokens = Matrix::Constant(3, 8, 0.3);
  g.tokens.col(2).setConstant(-1.0);
  const auto z = temporal_encoder_forward(g, params, cfg);
  EXPECT_LT(max_abs(z.tokens.row(0) - z.tokens.row(1)), 1e-12);
  EXPECT_LT(max_abs(z.tokens.row(0) - z.tokens.row(2)), 1e-12);
}

// Step-by-step single block, one head, D = 4, two tokens, computed with
// plain Eigen operations from the parameter values.
TEST(TemporalEncoder, MatchesHandComputedBlock) {
  BackboneConfig cfg = small_config();
  cfg.width = 4;
  cfg.heads = 1;
  cfg.temporal_blocks = 1;
  const auto params = random_params(cfg, 14);
  TokenSequence g;
  g.tokens = (Matrix(2, 4) << 0.1, -0.4, 0.7, 0.2, -0.3, 0.5, 0.05, -0.9).finished();
  const auto z = temporal_encoder_forward(g, params, cfg);

  auto P = [&](const std::string& n) { return params.at("temporal/block0/" + n).value; };
  auto ln = [&](const Matrix& x, const std::string& n) {
    Matrix out(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const double mean = x.row(r).mean();
      const double var = (x.row(r).array() - mean).square().mean();
      for (Eigen::Index c = 0; c < x.cols(); ++c)
        out(r, c) = (x(r, c) - mean) / std::sqrt(var + 1e-5) * P(n + ".gamma")(0, c) + P(n + ".beta")(0, c);
    }
    return out;
  };
  auto lin = [&](const Matrix& x, const std::string& n) -> Matrix {
    return (x * P(n + ".weight")).rowwise() + P(n + ".bias").row(0);
  };
  const Matrix h = ln(g.tokens, "ln1");
  const Matrix q = lin(h, "q"), k = lin(h, "k"), v = lin(h, "v");
  Matrix a(2, 4);
  for (int i = 0; i < 2; ++i) {
    const double s0 = q.row(i).dot(k.row(0)) / 2.0, s1 = q.row(i).dot(k.row(1)) / 2.0;
    const double w0 = 1.0 / (1.0 + std::exp(s1 - s0));
    a.row(i) = w0 * v.row(0) + (1.0 - w0) * v.row(1);
  }
  const Matrix x1 = g.tokens + lin(a, "out");
  Matrix f = lin(ln(x1, "ln2"), "fc1");
  f = f.unaryExpr([](double u) { return 0.5 * u * (1.0 + std::erf(u / std::sqrt(2.0))); });
  const Matrix expected = x1 + lin(f, "fc2");
  EXPECT_LT(max_abs(z.tokens - expected), 1e-12);
}

TEST(PredictionHead, TokenOrderAndZeroClassifier) {
  const auto cfg = small_config();
  auto params = random_params(cfg, 15);
  Rng rng(16);
  TokenSequence z;
  z.tokens.resize(3, 8);
  for (Eigen::Index i = 0; i < z.tokens.size(); ++i) z.tokens.data()[i] = rng.normal();
  TokenSequence swapped = z;
  swapped.tokens.row(0).swap(swapped.tokens.row(2));
  EXPECT_EQ(prediction_head(z, params, cfg).second.logits, prediction_head(swapped, params, cfg).second.logits);
  params.at("head/fc2.weight").value.setZero();
  params.at("head/fc2.bias").value.setZero();
  const auto d = prediction_head(z, params, cfg).second;
  for (int c = 0; c < 4; ++c) EXPECT_NEAR(d.probs(c), 0.25, 1e-15);
}

TEST(Destformer, DeterministicAndBatchIndependent) {
  const auto cfg = small_config();
  const auto params = random_params(cfg, 17);
  const auto v = geometry::generate_synthetic_action(3, 4, 8, 0.05, 18);
  const auto a = destformer_forward(v, params, cfg);
  const auto b = destformer_forward(v, params, cfg);
  EXPECT_EQ(a.distribution.logits, b.distribution.logits);
  EXPECT_EQ(a.g.tokens, b.g.tokens);

  const geometry::PointCloudVideo* batch[] = {&v, &v};
  auto pb = graph::prepare_batch(batch, cfg);
  ad::Tape tape(false);
  auto fr = graph::forward(tape, params, cfg, tape.constant(pb.coords), pb.groupings, pb.rows_per_item);
  const Matrix& logits = fr.head.logits.value();
  EXPECT_LT(max_abs(logits.row(0) - logits.row(1)), 1e-12);
  EXPECT_LT(max_abs(logits.row(0).transpose() - a.distribution.logits), 1e-12);
}

TEST(Destformer, SegmentLocality) {
  const auto cfg = small_config();
  const auto params = random_params(cfg, 19);
  auto v = geometry::generate_synthetic_action(1, 6, 8, 0.05, 20);
  const auto base = destformer_forward(v, params, cfg);
  // frames 2 and 3 form segment 1 when zeta = 2
  v.points.middleRows(2 * 8, 16).array() += 0.05;
  const auto moved = destformer_forward(v, params, cfg);
  EXPECT_EQ(base.g.tokens.row(0), moved.g.tokens.row(0));
  EXPECT_EQ(base.g.tokens.row(2), moved.g.tokens.row(2));
  EXPECT_GT(max_abs(base.g.tokens.row(1) - moved.g.tokens.row(1)), 1e-9);
}

TEST(Destformer, CrossEntropyGradientMatchesFiniteDifferences) {
  const auto cfg = tiny_config();
  auto params = init_backbone_params(cfg, 21);
  maple::testing::randomize(params, 0.2, 22);
  const auto videos = maple::testing::tiny_videos(2, 4, 8, 23);
  std::vector<const geometry::PointCloudVideo*> ptrs{&videos[0], &videos[1]};
  const auto pb = graph::prepare_batch(ptrs, cfg);
  const std::vector<int> labels{0, 1};
  auto loss = [&](bool record) {
    ad::Tape tape(record);
    auto fr = graph::forward(tape, params, cfg, tape.constant(pb.coords), pb.groupings, pb.rows_per_item);
    ad::Var l = ad::cross_entropy(fr.head.logits, labels);
    if (record) {
      tape.backward(l);
      tape.add_param_grads(params);
    }
    return l.scalar();
  };
  const auto res = maple::testing::gradient_check(
      params, [&] { return loss(false); }, [&] { loss(true); }, 1e-4, 0.01, 1, 1e-6, 24);
  EXPECT_LE(res.max_rel_error, 1e-3) << res.worst;
}

TEST(Flops, DocumentedFormula) {
  EXPECT_DOUBLE_EQ(attention_block_flops(10, 4), 8 * 10 * 16 + 4 * 100 * 4 + 16 * 10 * 16);
  BackboneConfig cfg;
  cfg.width = 64;
  cfg.kappa = 2;
  cfg.zeta = 4;
  cfg.spatial_blocks = 2;
  cfg.temporal_blocks = 3;
  const auto d = estimate_flops(cfg, AttentionMode::Decoupled, 16, 64);
  EXPECT_DOUBLE_EQ(d.spatial_attention, 4 * 2 * attention_block_flops(32, 64));
  EXPECT_DOUBLE_EQ(d.temporal_attention, 3 * attention_block_flops(4, 64));
  const auto j = estimate_flops(cfg, AttentionMode::Joint, 16, 64);
  EXPECT_DOUBLE_EQ(j.joint_attention, 5 * attention_block_flops(128, 64));
  EXPECT_DOUBLE_EQ(j.p4conv, d.p4conv);
  EXPECT_DOUBLE_EQ(j.head, d.head);
  EXPECT_LT(d.total(), j.total());

  cfg.spatial_blocks = 4;
  EXPECT_DOUBLE_EQ(estimate_flops(cfg, AttentionMode::Decoupled, 16, 64).spatial_attention, 2 * d.spatial_attention);

  cfg.spatial_blocks = 0;
  cfg.temporal_blocks = 0;
  EXPECT_EQ(estimate_flops(cfg, AttentionMode::Decoupled, 16, 64).attention(), 0.0);
  EXPECT_EQ(estimate_flops(cfg, AttentionMode::Joint, 16, 64).attention(), 0.0);
}

TEST(Flops, DecoupledIsCheaperWheneverBothAxesAreSplit) {
  for (int lt : {2, 3, 4, 8})
    for (int ls : {2, 5, 16, 32})
      for (int d : {8, 64, 256})
        for (int blocks : {1, 4}) {
          BackboneConfig cfg;
          cfg.width = d;
          cfg.heads = 1;
          cfg.kappa = 2;
          cfg.zeta = 2;
          cfg.spatial_blocks = blocks;
          cfg.temporal_blocks = blocks;
          EXPECT_LT(estimate_flops(cfg, AttentionMode::Decoupled, lt * 2, ls * 2).total(),
                    estimate_flops(cfg, AttentionMode::Joint, lt * 2, ls * 2).total());
        }
}
