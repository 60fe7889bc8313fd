#include "maple/checkpoint.hpp"
#include "maple/random.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace maple;
using namespace maple::checkpoint;
namespace fs = std::filesystem;

namespace {

ParamStore sample_store(std::uint64_t seed) {
  Rng rng(seed);
  ParamStore s;
  for (const auto& [name, rows, cols] : {std::tuple{"a/weight", 3, 4}, {"a/bias", 1, 4}, {"b.gamma", 1, 2}}) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    s.add(name, m);
  }
  return s;
}

fs::path temp_file(const std::string& name) { return fs::temp_directory_path() / name; }

}  // namespace

TEST(Checkpoint, RoundTripAtFloatPrecision) {
  const auto path = temp_file("maple_roundtrip.ckpt");
  const nlohmann::json config = {{"width", 4}, {"heads", 2}};
  const auto a = sample_store(1), b = sample_store(2);
  save_checkpoint(path, config, {{"backbone", &a}, {"maple", &b}}, {{"stage", "stage1"}});
  const auto ck = load_checkpoint(path, std::optional<nlohmann::json>(config));
  EXPECT_EQ(ck.config, config);
  EXPECT_EQ(ck.config_hash, config_hash(config));
  EXPECT_EQ(ck.metadata["stage"], "stage1");
  ASSERT_TRUE(ck.has_store("maple"));
  EXPECT_FALSE(ck.has_store("decoder"));
  for (const auto& [name, p] : a) {
    const Matrix& back = ck.store("backbone").at(name).value;
    ASSERT_EQ(back.rows(), p.value.rows());
    ASSERT_EQ(back.cols(), p.value.cols());
    EXPECT_EQ(back, p.value.cast<float>().cast<double>()) << name;
  }
  EXPECT_THROW(ck.store("decoder"), std::runtime_error);

  ParamStore target = sample_store(9);
  restore(ck.store("backbone"), target);
  EXPECT_LT((target.at("a/weight").value - a.at("a/weight").value).cwiseAbs().maxCoeff(), 1e-6);
  ParamStore wrong;
  wrong.add("a/weight", Matrix::Zero(2, 2));
  EXPECT_THROW(restore(ck.store("backbone"), wrong), std::runtime_error);
  fs::remove(path);
}

TEST(Checkpoint, HashIsCanonicalAndChecked) {
  const nlohmann::json x = nlohmann::json::parse(R"({"b": 1, "a": [1, 2]})");
  const nlohmann::json y = nlohmann::json::parse(R"({"a": [1, 2], "b": 1})");
  EXPECT_EQ(config_hash(x), config_hash(y));
  EXPECT_EQ(config_hash(x).size(), 16u);
  EXPECT_NE(config_hash(x), config_hash(nlohmann::json{{"a", {1, 2}}, {"b", 2}}));
  // FNV-1a 64 of "null"
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : std::string("null")) h = (h ^ static_cast<unsigned char>(c)) * 0x100000001b3ULL;
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  EXPECT_EQ(config_hash(nlohmann::json()), buf);

  const auto path = temp_file("maple_hash.ckpt");
  const auto a = sample_store(3);
  save_checkpoint(path, x, {{"backbone", &a}});
  EXPECT_NO_THROW(load_checkpoint(path, std::optional<nlohmann::json>(y)));
  EXPECT_THROW(load_checkpoint(path, std::optional<nlohmann::json>(nlohmann::json{{"b", 2}})), std::runtime_error);
  fs::remove(path);
}

TEST(Checkpoint, CorruptFilesAreRejected) {
  const auto path = temp_file("maple_corrupt.ckpt");
  const auto a = sample_store(4);
  save_checkpoint(path, {{"k", 1}}, {{"backbone", &a}});
  const auto size = fs::file_size(path);

  fs::resize_file(path, size - 3);
  EXPECT_THROW(load_checkpoint(path), std::runtime_error);
  fs::resize_file(path, 10);
  EXPECT_THROW(load_checkpoint(path), std::runtime_error);

  std::ofstream(path, std::ios::binary) << "NOPE0000";
  EXPECT_THROW(load_checkpoint(path), std::runtime_error);
  fs::remove(path);
  EXPECT_THROW(load_checkpoint(path), std::runtime_error);
}

TEST(Checkpoint, EditedHeaderFailsHashCheck) {
  const auto path = temp_file("maple_edit.ckpt");
  const auto a = sample_store(5);
  save_checkpoint(path, {{"width", 64}}, {{"backbone", &a}});
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  const auto pos = bytes.find("\"width\":64");
  ASSERT_NE(pos, std::string::npos);
  bytes[pos + 9] = '5';
  std::ofstream(path, std::ios::binary) << bytes;
  EXPECT_THROW(load_checkpoint(path), std::runtime_error);
  fs::remove(path);
}

TEST(Checkpoint, FileHashTracksBytes) {
  const auto path = temp_file("maple_bytes.bin");
  std::ofstream(path, std::ios::binary) << "abc";
  const auto h = file_hash(path);
  EXPECT_EQ(h, "e71fa2190541574b");  // FNV-1a 64 of "abc"
  std::ofstream(path, std::ios::binary) << "abd";
  EXPECT_NE(file_hash(path), h);
  fs::remove(path);
}
