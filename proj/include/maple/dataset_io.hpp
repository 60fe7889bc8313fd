// On-disk formats for point cloud videos, dataset manifests and splits.
//
// Video file (little-endian):
//   char[4]  magic "MPCV"
//   uint32   version (1)
//   uint32   T, N, C
//   float32  T * N * (3 + C) values, frame-major, point-major within a frame
//
// Manifest and split files are JSON documents carrying a format_version.
#pragma once

#include "maple/geometry.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace maple::io {

inline constexpr char kVideoMagic[4] = {'M', 'P', 'C', 'V'};
inline constexpr std::uint32_t kVideoVersion = 1;
inline constexpr int kSplitFormatVersion = 1;

void write_video(const std::filesystem::path& path, const geometry::PointCloudVideo& video);
/// Reads a video file; id and class are not stored in the file and stay empty.
geometry::PointCloudVideo read_video(const std::filesystem::path& path);

void write_manifest(const std::filesystem::path& path, const geometry::DatasetManifest& manifest);
/// Relative `root` values are resolved against the manifest's directory.
geometry::DatasetManifest read_manifest(const std::filesystem::path& path);

void write_split(const std::filesystem::path& path, const geometry::SemiSplit& split);
geometry::SemiSplit read_split(const std::filesystem::path& path);

/// Loads every video listed in the manifest and checks it against its row.
std::vector<geometry::PointCloudVideo> load_videos(const geometry::DatasetManifest& manifest);

struct GenerateOptions {
  int videos_per_class = 50;
  int num_classes = 4;
  int frames = 16;
  int num_points = 64;
  double noise_scale = 0.02;
  std::uint64_t seed = 0;
  std::string prefix = "train";
  geometry::SyntheticOptions synthetic;
};

/// Generates synthetic videos in memory (ids "<prefix>_<class>_<k>").
std::vector<geometry::PointCloudVideo> generate_dataset(const GenerateOptions& options);

/// Writes the videos under `dir/videos/` plus `dir/<prefix>.json` and
/// returns the manifest.
geometry::DatasetManifest write_dataset(const std::filesystem::path& dir, const std::string& prefix,
                                        const std::vector<geometry::PointCloudVideo>& videos,
                                        const std::vector<std::string>& class_names);

}  // namespace maple::io
