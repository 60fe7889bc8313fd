#include "maple/geometry.hpp"

#include "maple/random.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <stdexcept>

namespace maple::geometry {

void validate(const PointCloudVideo& video) {
  if (video.frames < 1 || video.num_points < 1 || video.channels < 0)
    throw std::invalid_argument("video " + video.video_id + ": need T >= 1, N >= 1, C >= 0");
  if (video.points.rows() != static_cast<Eigen::Index>(video.frames) * video.num_points ||
      video.points.cols() != 3 + video.channels)
    throw std::invalid_argument("video " + video.video_id + ": point matrix shape does not match T, N, C");
  if (!video.points.allFinite()) throw std::invalid_argument("video " + video.video_id + ": non-finite coordinate");
}

namespace {

double sq_dist(const Matrix& p, Eigen::Index a, Eigen::Index b) {
  const double dx = p(a, 0) - p(b, 0), dy = p(a, 1) - p(b, 1), dz = p(a, 2) - p(b, 2);
  return dx * dx + dy * dy + dz * dz;
}

}  // namespace

std::vector<int> farthest_point_sampling(const Matrix& points, int k, int seed_index) {
  const auto n = static_cast<int>(points.rows());
  if (n == 0 || points.cols() < 3) throw std::invalid_argument("farthest_point_sampling: empty input");
  if (k < 1 || k > n) throw std::invalid_argument("farthest_point_sampling: need 1 <= k <= N");
  if (seed_index < 0 || seed_index >= n) throw std::invalid_argument("farthest_point_sampling: bad seed index");

  std::vector<int> selected{seed_index};
  selected.reserve(static_cast<std::size_t>(k));
  std::vector<double> min_dist(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  std::vector<bool> taken(static_cast<std::size_t>(n), false);
  taken[static_cast<std::size_t>(seed_index)] = true;
  int last = seed_index;
  while (static_cast<int>(selected.size()) < k) {
    int best = -1;
    double best_dist = -1.0;
    for (int i = 0; i < n; ++i) {
      auto& md = min_dist[static_cast<std::size_t>(i)];
      md = std::min(md, sq_dist(points, i, last));
      if (!taken[static_cast<std::size_t>(i)] && md > best_dist) {
        best_dist = md;
        best = i;
      }
    }
    taken[static_cast<std::size_t>(best)] = true;
    selected.push_back(best);
    last = best;
  }
  return selected;
}

LocalAreaGrouping group_local_areas(const PointCloudVideo& video, const GroupingConfig& cfg) {
  validate(video);
  if (cfg.zeta < 1 || cfg.kappa < 1) throw std::invalid_argument("group_local_areas: kappa and zeta must be >= 1");
  if (video.frames < cfg.zeta) throw std::invalid_argument("group_local_areas: T < zeta");
  if (!(cfg.radius > 0.0)) throw std::invalid_argument("group_local_areas: radius must be positive");
  if (cfg.neighbors < 1) throw std::invalid_argument("group_local_areas: need at least one neighbor");

  const int n_pts = video.num_points;
  const int anchors = (n_pts + cfg.kappa - 1) / cfg.kappa;
  const int segments = video.frames / cfg.zeta;
  const double r2 = cfg.radius * cfg.radius;
  const Matrix& pts = video.points;

  LocalAreaGrouping out;
  out.anchors = anchors;
  out.frames_per_segment = cfg.zeta;
  out.neighbors = cfg.neighbors;
  out.segments.resize(static_cast<std::size_t>(segments));

  for (int s = 0; s < segments; ++s) {
    LocalSegment& seg = out.segments[static_cast<std::size_t>(s)];
    seg.reference_frame = s * cfg.zeta;
    const Matrix ref = video.frame(seg.reference_frame).leftCols(3);
    seg.anchor_indices = farthest_point_sampling(ref, anchors, 0);
    seg.anchor_xyz.resize(anchors, 3);
    const std::size_t entries = static_cast<std::size_t>(anchors) * cfg.zeta * cfg.neighbors;
    seg.neighbor_rows.reserve(entries);
    seg.neighbor_dt.reserve(entries);
    seg.offsets.resize(static_cast<Eigen::Index>(entries), 4);

    Eigen::Index e = 0;
    for (int a = 0; a < anchors; ++a) {
      const int anchor_row = video.row(seg.reference_frame, seg.anchor_indices[static_cast<std::size_t>(a)]);
      seg.anchor_rows.push_back(anchor_row);
      seg.anchor_xyz.row(a) = pts.row(anchor_row).leftCols(3);
      for (int f = 0; f < cfg.zeta; ++f) {
        const int frame = seg.reference_frame + f;
        std::vector<int> found;
        found.reserve(static_cast<std::size_t>(cfg.neighbors));
        for (int i = 0; i < n_pts && static_cast<int>(found.size()) < cfg.neighbors; ++i) {
          const int row = video.row(frame, i);
          if (sq_dist(pts, row, anchor_row) <= r2) found.push_back(row);
        }
        if (found.empty()) found.push_back(anchor_row);
        for (int j = 0; j < cfg.neighbors; ++j) {
          const int row = j < static_cast<int>(found.size()) ? found[static_cast<std::size_t>(j)] : found.front();
          seg.neighbor_rows.push_back(row);
          seg.neighbor_dt.push_back(f);
          seg.offsets.row(e) << pts(row, 0) - pts(anchor_row, 0), pts(row, 1) - pts(anchor_row, 1),
              pts(row, 2) - pts(anchor_row, 2), static_cast<double>(f);
          ++e;
        }
      }
    }
  }
  return out;
}

// ---- synthetic ------------------------------------------------------------

const std::vector<std::string>& synthetic_class_names() {
  static const std::vector<std::string> names{"static", "translate", "rotate", "oscillate",
                                              "expand", "circle",    "tilt",   "shake"};
  return names;
}

namespace {

Eigen::Matrix3d rot_z(double a) {
  Eigen::Matrix3d r;
  r << std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a), 0, 0, 0, 1;
  return r;
}

Eigen::Matrix3d rot_x(double a) {
  Eigen::Matrix3d r;
  r << 1, 0, 0, 0, std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a);
  return r;
}

}  // namespace

PointCloudVideo generate_synthetic_action(int class_id, int frames, int num_points, double noise_scale,
                                          std::uint64_t seed, const SyntheticOptions& options) {
  const auto& names = synthetic_class_names();
  if (class_id < 0 || class_id >= static_cast<int>(names.size()))
    throw std::invalid_argument("generate_synthetic_action: unknown class id " + std::to_string(class_id));
  if (frames < 1 || num_points < 1) throw std::invalid_argument("generate_synthetic_action: need T, N >= 1");
  if (noise_scale < 0.0) throw std::invalid_argument("generate_synthetic_action: negative noise scale");

  Rng rng(mix_seed(seed, static_cast<std::uint64_t>(class_id), 0x5eedULL));
  const double speed = options.motion_scale * (1.0 + rng.uniform(-options.speed_jitter, options.speed_jitter));
  const Eigen::Vector3d axes(options.blob_scale * rng.uniform(0.7, 1.3), options.blob_scale * rng.uniform(0.7, 1.3),
                             options.blob_scale * rng.uniform(0.7, 1.3));
  const Eigen::Matrix3d orient = rot_z(rng.uniform(0.0, 2.0 * std::numbers::pi));
  const Eigen::Vector3d origin(rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3));
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);

  Eigen::Matrix<double, Eigen::Dynamic, 3> body(num_points, 3);
  for (int i = 0; i < num_points; ++i) {
    const Eigen::Vector3d p(rng.normal() * axes.x(), rng.normal() * axes.y(), rng.normal() * axes.z());
    body.row(i) = (orient * p).transpose();
  }

  PointCloudVideo v;
  v.video_id = names[static_cast<std::size_t>(class_id)] + "_" + std::to_string(seed);
  v.class_id = class_id;
  v.frames = frames;
  v.num_points = num_points;
  v.channels = 0;
  v.points.resize(static_cast<Eigen::Index>(frames) * num_points, 3);

  for (int t = 0; t < frames; ++t) {
    const double s = frames > 1 ? static_cast<double>(t) / (frames - 1) : 0.0;
    Eigen::Matrix3d rot = Eigen::Matrix3d::Identity();
    double scl = 1.0;
    Eigen::Vector3d shift = Eigen::Vector3d::Zero();
    switch (class_id) {
      case 0:
        break;
      case 1:
        shift.x() = 0.6 * speed * s;
        break;
      case 2:
        rot = rot_z(0.5 * std::numbers::pi * speed * s);
        break;
      case 3:
        shift.z() = 0.25 * speed * std::sin(2.0 * std::numbers::pi * 2.0 * s);
        break;
      case 4:
        scl = 1.0 + 0.6 * speed * s;
        break;
      case 5: {
        const double a = 2.0 * std::numbers::pi * s;
        shift.x() = 0.25 * speed * (std::cos(a + phase) - std::cos(phase));
        shift.y() = 0.25 * speed * (std::sin(a + phase) - std::sin(phase));
        break;
      }
      case 6:
        rot = rot_x(0.5 * std::numbers::pi * speed * s);
        break;
      case 7:
        shift.y() = 0.15 * speed * std::sin(2.0 * std::numbers::pi * 4.0 * s);
        break;
    }
    for (int i = 0; i < num_points; ++i) {
      Eigen::Vector3d p = rot * (scl * body.row(i).transpose()) + shift + origin;
      if (noise_scale > 0.0) p += Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()) * noise_scale;
      v.points.row(v.row(t, i)) = p.transpose();
    }
  }
  return v;
}

// ---- splits -----------------------------------------------------------------

int labeled_per_class(double ratio, std::size_t train_size, std::size_t num_classes) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw std::invalid_argument("labeled ratio must lie in (0, 1]");
  if (num_classes == 0) throw std::invalid_argument("labeled_per_class: no classes");
  if (ratio == 1.0) return std::numeric_limits<int>::max();
  const double mean_per_class = static_cast<double>(train_size) / static_cast<double>(num_classes);
  return static_cast<int>(std::floor(ratio * mean_per_class + 1e-9));
}

SemiSplit split_dataset(const DatasetManifest& manifest, double labeled_ratio, std::uint64_t seed) {
  std::map<int, std::vector<std::string>> by_class;
  for (const auto& e : manifest.videos) by_class[e.class_id].push_back(e.video_id);
  for (std::size_t c = 0; c < manifest.class_names.size(); ++c)
    if (!by_class.count(static_cast<int>(c)))
      throw std::invalid_argument("split_dataset: class '" + manifest.class_names[c] + "' has no training video");
  if (by_class.empty()) throw std::invalid_argument("split_dataset: empty manifest");

  const int per_class = labeled_per_class(labeled_ratio, manifest.videos.size(), by_class.size());
  if (per_class < 1) throw std::invalid_argument("split_dataset: ratio yields zero labeled videos per class");

  SemiSplit split;
  split.labeled_ratio = labeled_ratio;
  split.seed = seed;
  for (auto& [cls, ids] : by_class) {
    std::sort(ids.begin(), ids.end());
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(cls)));
    rng.shuffle(ids);
    const std::size_t take = std::min(ids.size(), static_cast<std::size_t>(per_class));
    split.labeled_ids.insert(split.labeled_ids.end(), ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(take));
    split.unlabeled_ids.insert(split.unlabeled_ids.end(), ids.begin() + static_cast<std::ptrdiff_t>(take), ids.end());
  }
  std::sort(split.labeled_ids.begin(), split.labeled_ids.end());
  std::sort(split.unlabeled_ids.begin(), split.unlabeled_ids.end());
  return split;
}

// ---- clipping ---------------------------------------------------------------

ClipPolicy parse_clip_policy(const std::string& name) {
  if (name == "uniform-stride") return ClipPolicy::UniformStride;
  if (name == "random-crop") return ClipPolicy::RandomCrop;
  if (name == "loop-pad") return ClipPolicy::LoopPad;
  throw std::invalid_argument("unknown clip policy: " + name);
}

std::vector<int> clip_indices(int frames, int target_frames, ClipPolicy policy, std::uint64_t seed) {
  if (frames < 1 || target_frames < 1) throw std::invalid_argument("temporal_clip: need T >= 1 and target >= 1");
  std::vector<int> idx(static_cast<std::size_t>(target_frames));
  switch (policy) {
    case ClipPolicy::UniformStride:
      for (int i = 0; i < target_frames; ++i)
        idx[static_cast<std::size_t>(i)] =
            static_cast<int>(static_cast<std::int64_t>(i) * frames / target_frames);
      break;
    case ClipPolicy::RandomCrop: {
      int start = 0;
      if (frames > target_frames) {
        Rng rng(seed);
        start = static_cast<int>(rng.below(static_cast<std::uint64_t>(frames - target_frames + 1)));
      }
      for (int i = 0; i < target_frames; ++i) idx[static_cast<std::size_t>(i)] = (start + i) % frames;
      break;
    }
    case ClipPolicy::LoopPad:
      for (int i = 0; i < target_frames; ++i) idx[static_cast<std::size_t>(i)] = i % frames;
      break;
  }
  return idx;
}

PointCloudVideo temporal_clip(const PointCloudVideo& video, int target_frames, ClipPolicy policy, std::uint64_t seed) {
  validate(video);
  const auto idx = clip_indices(video.frames, target_frames, policy, seed);
  PointCloudVideo out = video;
  out.frames = target_frames;
  out.points.resize(static_cast<Eigen::Index>(target_frames) * video.num_points, video.points.cols());
  for (int i = 0; i < target_frames; ++i) out.points.middleRows(static_cast<Eigen::Index>(i) * video.num_points, video.num_points) = video.frame(idx[static_cast<std::size_t>(i)]);
  return out;
}

}  // namespace maple::geometry
