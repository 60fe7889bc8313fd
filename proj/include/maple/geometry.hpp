// Point cloud videos, farthest point sampling, spatio-temporal grouping,
// synthetic action data and labeled/unlabeled splits.
#pragma once

#include "maple/autodiff.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace maple::geometry {

/// T frames of N points, each point holding 3 coordinates plus C features.
/// Row t * N + i of `points` is point i of frame t.
struct PointCloudVideo {
  std::string video_id;
  std::optional<int> class_id;
  int frames = 0;
  int num_points = 0;
  int channels = 0;  // C, extra feature channels
  Matrix points;

  int row(int frame, int point) const { return frame * num_points + point; }
  auto frame(int t) const { return points.middleRows(static_cast<Eigen::Index>(t) * num_points, num_points); }
  /// (T*N) x 3 spatial coordinates.
  Matrix coordinates() const { return points.leftCols(3); }
};

/// Throws std::invalid_argument when shape or finiteness invariants fail.
void validate(const PointCloudVideo& video);

/// Greedy max-min-distance subset. result[0] == seed_index; ties go to the
/// lowest index. `points` is N x (>= 3); only the first three columns count.
std::vector<int> farthest_point_sampling(const Matrix& points, int k, int seed_index = 0);

struct GroupingConfig {
  double radius = 0.5;
  int neighbors = 8;  // per frame
  int kappa = 2;      // spatial subsampling rate
  int zeta = 4;       // temporal subsampling rate (frames per segment)
};

/// Local areas of one temporal segment.
///
/// Entry (a, f, j) lives at index (a * zeta + f) * neighbors + j of the
/// per-entry arrays.
struct LocalSegment {
  int reference_frame = 0;
  std::vector<int> anchor_indices;   // point indices within the reference frame
  std::vector<int> anchor_rows;      // global rows (reference_frame * N + index)
  Matrix anchor_xyz;                 // A x 3
  std::vector<int> neighbor_rows;    // global rows into the video's point matrix
  std::vector<int> neighbor_dt;      // signed frame offset from the reference frame
  Matrix offsets;                    // entries x 4: (dx, dy, dz, dt)
};

struct LocalAreaGrouping {
  int anchors = 0;             // ceil(N / kappa)
  int frames_per_segment = 0;  // zeta
  int neighbors = 0;           // n, per frame
  std::vector<LocalSegment> segments;

  int num_segments() const { return static_cast<int>(segments.size()); }
  int entries_per_anchor() const { return frames_per_segment * neighbors; }
};

/// floor(T / zeta) segments; FPS anchors on each segment's first frame; up to
/// `neighbors` in-radius points gathered from every frame of the segment.
/// Shortfalls repeat the first in-radius point; frames with none repeat the
/// anchor itself.
LocalAreaGrouping group_local_areas(const PointCloudVideo& video, const GroupingConfig& cfg);

// ---- synthetic data ---------------------------------------------------------

const std::vector<std::string>& synthetic_class_names();

struct SyntheticOptions {
  /// Per-video random scale applied to the motion amplitude, in [1-j, 1+j].
  double speed_jitter = 0.4;
  /// Radius of the blob (standard deviation of its points).
  double blob_scale = 0.25;
  /// Multiplies every motion amplitude.
  double motion_scale = 1.0;
};

/// Deterministic given all arguments. Each class is a distinct parametric
/// motion of a rigid point blob; noise_scale adds per-frame isotropic jitter.
PointCloudVideo generate_synthetic_action(int class_id, int frames, int num_points, double noise_scale,
                                          std::uint64_t seed, const SyntheticOptions& options = {});

// ---- manifests and splits -----------------------------------------------

struct ManifestEntry {
  std::string video_id;
  std::string path;  // relative to the manifest root
  int class_id = -1;
  int frames = 0;
  int num_points = 0;
};

struct DatasetManifest {
  static constexpr int kFormatVersion = 1;
  int format_version = kFormatVersion;
  std::string root;
  std::vector<std::string> class_names;
  std::vector<ManifestEntry> videos;
};

struct SemiSplit {
  std::vector<std::string> labeled_ids;
  std::vector<std::string> unlabeled_ids;
  double labeled_ratio = 1.0;
  std::uint64_t seed = 0;
};

/// Number of labeled videos drawn from every class.
///
/// floor(ratio * train_size / num_classes), capped by each class's size; a
/// ratio of 1 labels everything.
int labeled_per_class(double ratio, std::size_t train_size, std::size_t num_classes);

/// Class-balanced sampling without replacement; pure in (manifest, ratio, seed).
SemiSplit split_dataset(const DatasetManifest& manifest, double labeled_ratio, std::uint64_t seed);

enum class ClipPolicy { UniformStride, RandomCrop, LoopPad };

ClipPolicy parse_clip_policy(const std::string& name);

/// Resamples to exactly `target_frames` frames.
PointCloudVideo temporal_clip(const PointCloudVideo& video, int target_frames, ClipPolicy policy,
                              std::uint64_t seed = 0);

/// Frame indices that temporal_clip would select.
std::vector<int> clip_indices(int frames, int target_frames, ClipPolicy policy, std::uint64_t seed = 0);

}  // namespace maple::geometry
