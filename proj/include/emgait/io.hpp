#pragma once

// On-disk formats: PNG frames, binary point clouds, and the JSON-lines
// dataset manifest.
//
// Cloud file: uint32 little-endian point count, then count×3 float32
// little-endian (x, y, z) triplets.
//
// Manifest file: first line is the header
//   {"format":"emgait-manifest","version":1}
// followed by one JSON object per sequence:
//   {"seq_id", "identity", "view", "distance_m", "condition", "split",
//    "frames": [{"image": "<rel.png>", "cloud": "<rel.bin>"}, ...]}
// with "split" one of "train" / "test" and paths relative to the manifest's
// directory.

#include <png.h>

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "emgait/data.hpp"
#include "emgait/error.hpp"

namespace emgait {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr int kManifestVersion = 1;

inline void write_png(const fs::path& path, const RgbFrame& frame) {
  std::vector<std::uint8_t> buf(frame.pixels.size());
  for (std::size_t i = 0; i < buf.size(); ++i)
    buf[i] = static_cast<std::uint8_t>(std::lround(std::clamp(frame.pixels[i], 0.0f, 1.0f) * 255.0f));
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(frame.width);
  img.height = static_cast<png_uint_32>(frame.height);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, buf.data(), 0, nullptr))
    throw Error(ErrorCode::io, "cannot write PNG " + path.string() + ": " + img.message);
}

inline RgbFrame read_png(const fs::path& path) {
  if (!fs::exists(path)) throw Error(ErrorCode::missing_file, "missing image file: " + path.string());
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str()))
    throw Error(ErrorCode::io, "cannot read PNG " + path.string() + ": " + img.message);
  img.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr))
    throw Error(ErrorCode::io, "cannot decode PNG " + path.string() + ": " + img.message);
  RgbFrame f(static_cast<int>(img.height), static_cast<int>(img.width));
  for (std::size_t i = 0; i < buf.size(); ++i) f.pixels[i] = static_cast<float>(buf[i]) / 255.0f;
  return f;
}

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                        static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b.data(), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  std::array<unsigned char, 4> b{};
  is.read(reinterpret_cast<char*>(b.data()), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f32(std::ostream& os, float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  put_u32(os, u);
}

inline float get_f32(std::istream& is) {
  std::uint32_t u = get_u32(is);
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}

}  // namespace detail

inline void write_cloud(const fs::path& path, const PointCloudFrame& cloud) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorCode::io, "cannot open for writing: " + path.string());
  detail::put_u32(os, static_cast<std::uint32_t>(cloud.coords.rows()));
  for (Eigen::Index i = 0; i < cloud.coords.rows(); ++i)
    for (int c = 0; c < 3; ++c) detail::put_f32(os, cloud.coords(i, c));
  if (!os) throw Error(ErrorCode::io, "write failed: " + path.string());
}

inline PointCloudFrame read_cloud(const fs::path& path) {
  if (!fs::exists(path)) throw Error(ErrorCode::missing_file, "missing cloud file: " + path.string());
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::io, "cannot open: " + path.string());
  const std::uint32_t n = detail::get_u32(is);
  if (!is) throw Error(ErrorCode::schema, "truncated cloud header: " + path.string());
  const auto expected = static_cast<std::uintmax_t>(4) + static_cast<std::uintmax_t>(n) * 12;
  if (fs::file_size(path) != expected) throw Error(ErrorCode::schema, "cloud size does not match count header: " + path.string());
  PointCloudFrame cloud;
  cloud.coords.resize(n, 3);
  for (std::uint32_t i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) cloud.coords(i, c) = detail::get_f32(is);
  return cloud;
}

struct FrameRef {
  std::string image;
  std::string cloud;
};

struct ManifestEntry {
  std::string seq_id;
  std::string identity;
  int view = 0;
  int distance_m = 10;
  std::string condition = "clean";
  std::string split = "train";
  std::vector<FrameRef> frames;
};

struct Manifest {
  fs::path root;
  std::vector<ManifestEntry> entries;

  std::set<std::string> identities(const std::string& split) const {
    std::set<std::string> out;
    for (const auto& e : entries)
      if (e.split == split) out.insert(e.identity);
    return out;
  }

  std::vector<const ManifestEntry*> select(const std::string& split) const {
    std::vector<const ManifestEntry*> out;
    for (const auto& e : entries)
      if (e.split == split) out.push_back(&e);
    return out;
  }
};

inline json to_json(const ManifestEntry& e) {
  json frames = json::array();
  for (const auto& f : e.frames) frames.push_back({{"image", f.image}, {"cloud", f.cloud}});
  return json{{"seq_id", e.seq_id}, {"identity", e.identity},   {"view", e.view},  {"distance_m", e.distance_m},
              {"condition", e.condition}, {"split", e.split}, {"frames", frames}};
}

// Throws split_overlap when an identity appears in both splits.
inline void validate_splits(const Manifest& m) {
  const auto train = m.identities("train");
  for (const auto& id : m.identities("test"))
    if (train.count(id)) throw Error(ErrorCode::split_overlap, "split overlap: identity '" + id + "' is in train and test");
}

inline std::string manifest_text(const Manifest& m) {
  std::string out = json{{"format", "emgait-manifest"}, {"version", kManifestVersion}}.dump() + "\n";
  for (const auto& e : m.entries) out += to_json(e).dump() + "\n";
  return out;
}

inline void save_manifest(const Manifest& m, const fs::path& path) {
  validate_splits(m);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorCode::io, "cannot open for writing: " + path.string());
  os << manifest_text(m);
  if (!os) throw Error(ErrorCode::io, "write failed: " + path.string());
}

namespace detail {

inline ManifestEntry parse_entry(const json& j, std::size_t line) {
  auto fail = [line](const std::string& msg) {
    return Error(ErrorCode::schema, "manifest line " + std::to_string(line) + ": " + msg);
  };
  if (!j.is_object()) throw fail("record is not an object");
  static const std::set<std::string> keys{"seq_id", "identity", "view", "distance_m", "condition", "split", "frames"};
  for (const auto& [k, v] : j.items())
    if (!keys.count(k)) throw fail("unknown key '" + k + "'");
  for (const auto& k : keys)
    if (!j.contains(k)) throw fail("missing key '" + k + "'");
  ManifestEntry e;
  if (!j["seq_id"].is_string() || !j["identity"].is_string() || !j["condition"].is_string() || !j["split"].is_string())
    throw fail("seq_id, identity, condition and split must be strings");
  if (!j["view"].is_number_integer() || !j["distance_m"].is_number_integer())
    throw fail("view and distance_m must be integers");
  e.seq_id = j["seq_id"];
  e.identity = j["identity"];
  e.view = j["view"];
  e.distance_m = j["distance_m"];
  e.condition = j["condition"];
  e.split = j["split"];
  if (e.split != "train" && e.split != "test") throw fail("split must be 'train' or 'test'");
  if (!j["frames"].is_array() || j["frames"].empty()) throw fail("frames must be a nonempty array");
  for (const auto& f : j["frames"]) {
    if (!f.is_object() || !f.contains("image") || !f.contains("cloud") || !f["image"].is_string() ||
        !f["cloud"].is_string() || f.size() != 2)
      throw fail("frame must be {\"image\": str, \"cloud\": str}");
    e.frames.push_back(FrameRef{f["image"], f["cloud"]});
  }
  return e;
}

}  // namespace detail

inline Manifest parse_manifest(std::istream& is, const fs::path& root) {
  Manifest m;
  m.root = root;
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  std::set<std::string> ids;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& ex) {
      throw Error(ErrorCode::schema, "manifest line " + std::to_string(lineno) + ": " + ex.what());
    }
    if (!header) {
      if (!j.is_object() || j.value("format", "") != "emgait-manifest")
        throw Error(ErrorCode::schema, "manifest header missing or wrong format tag");
      if (j.value("version", -1) != kManifestVersion)
        throw Error(ErrorCode::schema, "unsupported manifest version");
      header = true;
      continue;
    }
    ManifestEntry e = detail::parse_entry(j, lineno);
    if (!ids.insert(e.seq_id).second) throw Error(ErrorCode::schema, "duplicate seq_id '" + e.seq_id + "'");
    m.entries.push_back(std::move(e));
  }
  if (!header) throw Error(ErrorCode::schema, "manifest header missing");
  validate_splits(m);
  return m;
}

inline Manifest load_manifest(const fs::path& path) {
  if (!fs::exists(path)) throw Error(ErrorCode::missing_file, "manifest not found: " + path.string());
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::io, "cannot open manifest: " + path.string());
  return parse_manifest(is, path.parent_path());
}

inline GaitSequence load_sequence(const Manifest& m, const ManifestEntry& e) {
  GaitSequence s;
  s.seq_id = e.seq_id;
  s.identity = e.identity;
  s.view = e.view;
  s.distance_m = e.distance_m;
  s.condition = e.condition;
  for (const auto& f : e.frames) s.frames.push_back(FramePair{read_png(m.root / f.image), read_cloud(m.root / f.cloud)});
  return s;
}

// FNV-1a, used for config and manifest fingerprints.
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

}  // namespace emgait
