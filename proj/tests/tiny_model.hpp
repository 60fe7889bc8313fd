// Shared tiny fixtures for gradient and contract tests.
#pragma once

#include "maple/autoencoder.hpp"
#include "maple/backbone.hpp"
#include "maple/geometry.hpp"

#include <cmath>
#include <functional>
#include <vector>

namespace maple::testing {

inline backbone::BackboneConfig tiny_config() {
  backbone::BackboneConfig cfg;
  cfg.width = 8;
  cfg.kappa = 2;
  cfg.zeta = 2;
  cfg.spatial_blocks = 1;
  cfg.temporal_blocks = 1;
  cfg.heads = 2;
  cfg.radius = 0.6;
  cfg.neighbors = 3;
  cfg.num_classes = 2;
  return cfg;
}

inline autoencoder::MapleConfig tiny_maple_config() {
  autoencoder::MapleConfig m;
  m.decoder_blocks = 1;
  m.max_tokens = 4;
  m.mask_ratio = 0.5;
  return m;
}

/// Overwrites every tensor with N(0, stddev) draws so zero-initialized layers
/// also carry gradient signal.
inline void randomize(ParamStore& store, double stddev, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& [name, p] : store) {
    const bool gain = name.find(".gamma") != std::string::npos;
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = (gain ? 1.0 : 0.0) + stddev * rng.normal();
  }
}

inline std::vector<geometry::PointCloudVideo> tiny_videos(int count, int frames, int points, std::uint64_t seed) {
  std::vector<geometry::PointCloudVideo> out;
  for (int i = 0; i < count; ++i)
    out.push_back(geometry::generate_synthetic_action(i % 4, frames, points, 0.05, seed + static_cast<std::uint64_t>(i)));
  return out;
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst;
};

/// Central differences on a sample of at least `fraction` of every tensor
/// (minimum `min_entries`). rel = |a - n| / max(|a|, |n|, floor).
inline GradCheckResult gradient_check(ParamStore& store, const std::function<double()>& loss,
                                      const std::function<void()>& analytic, double step, double fraction,
                                      int min_entries, double floor, std::uint64_t seed) {
  store.zero_grad();
  analytic();
  GradCheckResult res;
  Rng rng(seed);
  for (auto& [name, p] : store) {
    const Eigen::Index n = p.value.size();
    Eigen::Index want = std::max<Eigen::Index>(min_entries, static_cast<Eigen::Index>(std::ceil(fraction * static_cast<double>(n))));
    want = std::min(want, n);
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    rng.shuffle(idx);
    for (Eigen::Index s = 0; s < want; ++s) {
      const Eigen::Index i = idx[static_cast<std::size_t>(s)];
      double& w = p.value.data()[i];
      const double saved = w;
      w = saved + step;
      const double up = loss();
      w = saved - step;
      const double down = loss();
      w = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = p.grad.data()[i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++res.checked;
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst = name + "[" + std::to_string(i) + "] analytic=" + std::to_string(a) + " numeric=" + std::to_string(numeric);
      }
    }
  }
  return res;
}

}  // namespace maple::testing
