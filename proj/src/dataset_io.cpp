#include "maple/dataset_io.hpp"

#include "maple/random.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace maple::io {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace {

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("unexpected end of file");
  return v;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return json::parse(in);
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace

void write_video(const fs::path& path, const geometry::PointCloudVideo& video) {
  geometry::validate(video);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(kVideoMagic, 4);
  put<std::uint32_t>(out, kVideoVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(video.frames));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(video.num_points));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(video.channels));
  for (Eigen::Index r = 0; r < video.points.rows(); ++r)
    for (Eigen::Index c = 0; c < video.points.cols(); ++c) put<float>(out, static_cast<float>(video.points(r, c)));
}

geometry::PointCloudVideo read_video(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kVideoMagic, 4) != 0) throw std::runtime_error(path.string() + ": bad magic");
  if (get<std::uint32_t>(in) != kVideoVersion) throw std::runtime_error(path.string() + ": unsupported version");
  geometry::PointCloudVideo v;
  v.frames = static_cast<int>(get<std::uint32_t>(in));
  v.num_points = static_cast<int>(get<std::uint32_t>(in));
  v.channels = static_cast<int>(get<std::uint32_t>(in));
  if (v.frames < 1 || v.num_points < 1) throw std::runtime_error(path.string() + ": empty video");
  v.points.resize(static_cast<Eigen::Index>(v.frames) * v.num_points, 3 + v.channels);
  for (Eigen::Index r = 0; r < v.points.rows(); ++r)
    for (Eigen::Index c = 0; c < v.points.cols(); ++c) v.points(r, c) = get<float>(in);
  geometry::validate(v);
  return v;
}

void write_manifest(const fs::path& path, const geometry::DatasetManifest& m) {
  json j;
  j["format_version"] = m.format_version;
  j["root"] = m.root;
  j["class_names"] = m.class_names;
  j["videos"] = json::array();
  for (const auto& e : m.videos)
    j["videos"].push_back(
        {{"id", e.video_id}, {"path", e.path}, {"class_id", e.class_id}, {"T", e.frames}, {"N", e.num_points}});
  write_json(path, j);
}

geometry::DatasetManifest read_manifest(const fs::path& path) {
  const json j = read_json(path);
  geometry::DatasetManifest m;
  m.format_version = j.at("format_version").get<int>();
  if (m.format_version != geometry::DatasetManifest::kFormatVersion)
    throw std::runtime_error(path.string() + ": unsupported manifest version");
  fs::path root = j.value("root", std::string("."));
  if (root.is_relative()) root = path.parent_path() / root;
  m.root = root.lexically_normal().string();
  m.class_names = j.at("class_names").get<std::vector<std::string>>();
  for (const auto& r : j.at("videos")) {
    geometry::ManifestEntry e;
    e.video_id = r.at("id").get<std::string>();
    e.path = r.at("path").get<std::string>();
    e.class_id = r.at("class_id").get<int>();
    e.frames = r.at("T").get<int>();
    e.num_points = r.at("N").get<int>();
    if (e.class_id < 0 || e.class_id >= static_cast<int>(m.class_names.size()))
      throw std::runtime_error(path.string() + ": class id out of range for " + e.video_id);
    m.videos.push_back(std::move(e));
  }
  return m;
}

void write_split(const fs::path& path, const geometry::SemiSplit& s) {
  json j;
  j["format_version"] = kSplitFormatVersion;
  j["labeled_ratio"] = s.labeled_ratio;
  j["seed"] = s.seed;
  j["labeled"] = s.labeled_ids;
  j["unlabeled"] = s.unlabeled_ids;
  write_json(path, j);
}

geometry::SemiSplit read_split(const fs::path& path) {
  const json j = read_json(path);
  if (j.at("format_version").get<int>() != kSplitFormatVersion)
    throw std::runtime_error(path.string() + ": unsupported split version");
  geometry::SemiSplit s;
  s.labeled_ratio = j.at("labeled_ratio").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.labeled_ids = j.at("labeled").get<std::vector<std::string>>();
  s.unlabeled_ids = j.at("unlabeled").get<std::vector<std::string>>();
  return s;
}

std::vector<geometry::PointCloudVideo> load_videos(const geometry::DatasetManifest& manifest) {
  std::vector<geometry::PointCloudVideo> out;
  out.reserve(manifest.videos.size());
  for (const auto& e : manifest.videos) {
    auto v = read_video(fs::path(manifest.root) / e.path);
    if (v.frames != e.frames || v.num_points != e.num_points)
      throw std::runtime_error("video " + e.video_id + " does not match its manifest row");
    v.video_id = e.video_id;
    v.class_id = e.class_id;
    out.push_back(std::move(v));
  }
  return out;
}

std::vector<geometry::PointCloudVideo> generate_dataset(const GenerateOptions& o) {
  const int available = static_cast<int>(geometry::synthetic_class_names().size());
  if (o.num_classes < 1 || o.num_classes > available)
    throw std::invalid_argument("generate_dataset: num_classes must be in [1, " + std::to_string(available) + "]");
  std::vector<geometry::PointCloudVideo> out;
  for (int c = 0; c < o.num_classes; ++c) {
    for (int k = 0; k < o.videos_per_class; ++k) {
      const std::uint64_t seed = mix_seed(o.seed, static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(k));
      auto v = geometry::generate_synthetic_action(c, o.frames, o.num_points, o.noise_scale, seed, o.synthetic);
      char buf[64];
      std::snprintf(buf, sizeof buf, "%s_%02d_%04d", o.prefix.c_str(), c, k);
      v.video_id = buf;
      out.push_back(std::move(v));
    }
  }
  return out;
}

geometry::DatasetManifest write_dataset(const fs::path& dir, const std::string& prefix,
                                        const std::vector<geometry::PointCloudVideo>& videos,
                                        const std::vector<std::string>& class_names) {
  geometry::DatasetManifest m;
  m.root = ".";
  m.class_names = class_names;
  for (const auto& v : videos) {
    if (!v.class_id) throw std::invalid_argument("write_dataset: video " + v.video_id + " has no class");
    const std::string rel = "videos/" + v.video_id + ".pcv";
    write_video(dir / rel, v);
    m.videos.push_back({v.video_id, rel, *v.class_id, v.frames, v.num_points});
  }
  write_manifest(dir / (prefix + ".json"), m);
  m.root = dir.string();
  return m;
}

}  // namespace maple::io
