#include "in2core/gradient_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>

#include "in2core/error.hpp"
#include "in2core/text.hpp"

namespace in2core {

namespace {

constexpr char kMagic[4] = {'I', 'N', '2', 'G'};

void append_u16(std::string& out, uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void append_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void append_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void append_f32(std::string& out, float v) {
  append_u32(out, std::bit_cast<uint32_t>(v));
}

class Cursor {
 public:
  explicit Cursor(const std::string& data) : data_(data) {}

  bool has(size_t n) const { return pos_ + n <= data_.size(); }
  size_t remaining() const { return data_.size() - pos_; }

  uint16_t u16() {
    uint16_t v = static_cast<uint8_t>(data_[pos_]);
    v |= static_cast<uint16_t>(static_cast<uint8_t>(data_[pos_ + 1])) << 8;
    pos_ += 2;
    return v;
  }

  uint32_t u32() {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<uint32_t>(static_cast<uint8_t>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  uint64_t u64() {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<uint64_t>(static_cast<uint8_t>(data_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }

  float f32() { return std::bit_cast<float>(u32()); }

  std::string bytes(size_t n) {
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  const std::string& data_;
  size_t pos_ = 0;
};

std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".meta.json");
}

}  // namespace

const char* to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
    case Split::train_mean: return "train_mean";
  }
  return "train";
}

Split split_from_string(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "validation" || name == "val") return Split::validation;
  if (name == "test") return Split::test;
  if (name == "train_mean" || name == "train-mean") return Split::train_mean;
  fail(ErrorCode::invalid_argument, "unknown split: " + name);
}

bool operator==(const ExampleGradient& a, const ExampleGradient& b) {
  if (a.example_id != b.example_id) return false;
  if (a.loss_value != b.loss_value) return false;
  if (a.token_count != b.token_count) return false;
  if (a.per_layer.size() != b.per_layer.size()) return false;
  for (size_t l = 0; l < a.per_layer.size(); ++l) {
    if (a.per_layer[l].size() != b.per_layer[l].size()) return false;
    if (a.per_layer[l] != b.per_layer[l]) return false;
  }
  return true;
}

bool operator==(const GradientManifest& a, const GradientManifest& b) {
  return a.split == b.split && a.layers == b.layers && a.model_tag == b.model_tag &&
         a.created_at == b.created_at && a.examples.size() == b.examples.size() &&
         std::equal(a.examples.begin(), a.examples.end(), b.examples.begin(),
                    [](const ExampleGradient& x, const ExampleGradient& y) { return x == y; });
}

int64_t GradientManifest::total_dim() const {
  int64_t acc = 0;
  for (const auto& l : layers) acc += l.dim;
  return acc;
}

int64_t GradientManifest::total_dim(int k) const {
  int64_t acc = 0;
  for (int l = 0; l < k && l < layer_count(); ++l) acc += layers[l].dim;
  return acc;
}

void validate_manifest(const GradientManifest& m) {
  if (m.layers.empty())
    fail(ErrorCode::invariant_violation, "manifest declares no layers");
  for (size_t l = 0; l < m.layers.size(); ++l) {
    if (m.layers[l].layer_index != static_cast<int32_t>(l))
      fail(ErrorCode::invariant_violation,
           "layer indices must be contiguous from 0; slot " + std::to_string(l) +
               " holds index " + std::to_string(m.layers[l].layer_index));
    if (m.layers[l].dim <= 0)
      fail(ErrorCode::invariant_violation,
           "layer " + std::to_string(l) + " (" + m.layers[l].name + ") has dim <= 0");
  }
  std::set<std::string> seen;
  for (const auto& ex : m.examples) {
    if (!seen.insert(ex.example_id).second)
      fail(ErrorCode::invariant_violation, "duplicate example_id: " + ex.example_id);
    if (ex.per_layer.size() != m.layers.size())
      fail(ErrorCode::dimension_mismatch,
           "example " + ex.example_id + " carries " + std::to_string(ex.per_layer.size()) +
               " layer blocks, manifest declares " + std::to_string(m.layers.size()));
    for (size_t l = 0; l < ex.per_layer.size(); ++l) {
      if (ex.per_layer[l].size() != m.layers[l].dim)
        fail(ErrorCode::dimension_mismatch,
             "example " + ex.example_id + " layer " + std::to_string(l) + " has length " +
                 std::to_string(ex.per_layer[l].size()) + ", declared dim " +
                 std::to_string(m.layers[l].dim));
      for (int64_t i = 0; i < ex.per_layer[l].size(); ++i) {
        if (!std::isfinite(ex.per_layer[l][i]))
          fail(ErrorCode::invariant_violation,
               "non-finite gradient value in example " + ex.example_id + ", layer " +
                   std::to_string(l) + ", coordinate " + std::to_string(i));
      }
    }
    if (!std::isfinite(ex.loss_value))
      fail(ErrorCode::invariant_violation,
           "non-finite loss_value in example " + ex.example_id);
  }
}

uint64_t manifest_overhead_bytes(const GradientManifest& m) {
  uint64_t bytes = 4 + 2 + 2;  // magic, version, layer count
  for (const auto& l : m.layers) bytes += 2 + l.name.size() + 4;
  bytes += 8;  // example count
  for (const auto& ex : m.examples) bytes += 2 + ex.example_id.size();
  return bytes;
}

uint64_t write_manifest(const GradientManifest& m, const std::filesystem::path& path) {
  validate_manifest(m);
  for (const auto& l : m.layers) {
    if (l.name.size() > 0xffff)
      fail(ErrorCode::invalid_argument, "layer name too long: " + l.name.substr(0, 32));
    if (l.dim > 0xffffffffll)
      fail(ErrorCode::invalid_argument, "layer dim exceeds u32: " + l.name);
  }
  for (const auto& ex : m.examples)
    if (ex.example_id.size() > 0xffff)
      fail(ErrorCode::invalid_argument, "example_id too long: " + ex.example_id.substr(0, 32));

  std::string out;
  out.reserve(manifest_overhead_bytes(m) +
              static_cast<uint64_t>(m.size()) * (8 + 4 * m.total_dim()));
  out.append(kMagic, 4);
  append_u16(out, kManifestFormatVersion);
  append_u16(out, static_cast<uint16_t>(m.layers.size()));
  for (const auto& l : m.layers) {
    append_u16(out, static_cast<uint16_t>(l.name.size()));
    out.append(l.name);
    append_u32(out, static_cast<uint32_t>(l.dim));
  }
  append_u64(out, static_cast<uint64_t>(m.examples.size()));
  for (const auto& ex : m.examples) {
    append_u16(out, static_cast<uint16_t>(ex.example_id.size()));
    out.append(ex.example_id);
    append_f32(out, ex.loss_value);
    append_u32(out, ex.token_count);
    for (const auto& block : ex.per_layer)
      for (int64_t i = 0; i < block.size(); ++i) append_f32(out, block[i]);
  }

  write_text_file(path, out);

  nlohmann::json meta;
  meta["split"] = to_string(m.split);
  meta["model_tag"] = m.model_tag;
  meta["created_at"] = m.created_at;
  write_text_file(sidecar_path(path), meta.dump(2) + "\n");

  return static_cast<uint64_t>(out.size());
}

GradientManifest read_manifest(const std::filesystem::path& path) {
  const std::string data = read_text_file(path);
  Cursor cur(data);

  if (!cur.has(8)) fail(ErrorCode::corrupt_header, "file too short for header: " + path.string());
  const std::string magic = cur.bytes(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0)
    fail(ErrorCode::corrupt_header, "bad magic in " + path.string());
  const uint16_t version = cur.u16();
  if (version != kManifestFormatVersion)
    fail(ErrorCode::corrupt_header,
         "unsupported format version " + std::to_string(version) + " in " + path.string());
  const uint16_t layer_count = cur.u16();

  GradientManifest m;
  m.layers.reserve(layer_count);
  for (uint16_t l = 0; l < layer_count; ++l) {
    if (!cur.has(2)) fail(ErrorCode::corrupt_header, "layer table ends early: " + path.string());
    const uint16_t name_len = cur.u16();
    if (!cur.has(name_len + 4u))
      fail(ErrorCode::corrupt_header, "layer table ends early: " + path.string());
    LayerSpec spec;
    spec.layer_index = static_cast<int32_t>(l);
    spec.name = cur.bytes(name_len);
    spec.dim = static_cast<int64_t>(cur.u32());
    m.layers.push_back(std::move(spec));
  }

  if (!cur.has(8)) fail(ErrorCode::corrupt_header, "missing example count: " + path.string());
  const uint64_t example_count = cur.u64();

  int64_t total_dim = 0;
  for (const auto& l : m.layers) total_dim += l.dim;

  m.examples.reserve(example_count);
  for (uint64_t e = 0; e < example_count; ++e) {
    if (!cur.has(2))
      fail(ErrorCode::truncated_payload,
           "file ends inside example record " + std::to_string(e) + ": " + path.string());
    const uint16_t id_len = cur.u16();
    if (!cur.has(id_len + 8u + 4u * static_cast<size_t>(total_dim)))
      fail(ErrorCode::truncated_payload,
           "file ends inside example record " + std::to_string(e) + ": " + path.string());
    ExampleGradient ex;
    ex.example_id = cur.bytes(id_len);
    ex.loss_value = cur.f32();
    ex.token_count = cur.u32();
    ex.per_layer.reserve(m.layers.size());
    for (const auto& l : m.layers) {
      VecF block(l.dim);
      for (int64_t i = 0; i < l.dim; ++i) block[i] = cur.f32();
      ex.per_layer.push_back(std::move(block));
    }
    m.examples.push_back(std::move(ex));
  }

  if (cur.remaining() != 0)
    fail(ErrorCode::dimension_mismatch,
         std::to_string(cur.remaining()) + " trailing bytes after " +
             std::to_string(example_count) + " declared examples; declared dims disagree " +
             "with the payload present: " + path.string());

  const auto meta_path = sidecar_path(path);
  if (std::filesystem::exists(meta_path)) {
    nlohmann::json meta;
    try {
      meta = nlohmann::json::parse(read_text_file(meta_path));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::corrupt_header, "bad sidecar " + meta_path.string() + ": " + e.what());
    }
    if (meta.contains("split")) m.split = split_from_string(meta["split"].get<std::string>());
    if (meta.contains("model_tag")) m.model_tag = meta["model_tag"].get<std::string>();
    if (meta.contains("created_at")) m.created_at = meta["created_at"].get<std::string>();
  }

  validate_manifest(m);
  return m;
}

GradientManifest restrict_layers(const GradientManifest& m, int k) {
  if (k < 1 || k > m.layer_count())
    fail(ErrorCode::invalid_argument,
         "restrict_layers: k = " + std::to_string(k) + " outside [1, " +
             std::to_string(m.layer_count()) + "]");
  GradientManifest out;
  out.split = m.split;
  out.model_tag = m.model_tag;
  out.created_at = m.created_at;
  out.layers.assign(m.layers.begin(), m.layers.begin() + k);
  out.examples.reserve(m.examples.size());
  for (const auto& ex : m.examples) {
    ExampleGradient e;
    e.example_id = ex.example_id;
    e.loss_value = ex.loss_value;
    e.token_count = ex.token_count;
    e.per_layer.assign(ex.per_layer.begin(), ex.per_layer.begin() + k);
    out.examples.push_back(std::move(e));
  }
  return out;
}

std::vector<int64_t> ascending_id_order(const GradientManifest& m) {
  std::vector<int64_t> order(m.examples.size());
  std::iota(order.begin(), order.end(), int64_t{0});
  std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    return m.examples[a].example_id < m.examples[b].example_id;
  });
  return order;
}

ExampleGradient mean_gradient(const GradientManifest& m) {
  if (m.examples.empty())
    fail(ErrorCode::invalid_argument, "mean_gradient of empty manifest");
  validate_manifest(m);

  const auto order = ascending_id_order(m);
  std::vector<VecD> acc;
  acc.reserve(m.layers.size());
  for (const auto& l : m.layers) acc.push_back(VecD::Zero(l.dim));
  double loss_acc = 0.0;

  for (int64_t idx : order) {
    const auto& ex = m.examples[idx];
    for (size_t l = 0; l < acc.size(); ++l) acc[l] += ex.per_layer[l].cast<double>();
    loss_acc += static_cast<double>(ex.loss_value);
  }

  const double n = static_cast<double>(m.examples.size());
  ExampleGradient out;
  out.example_id = "mean";
  out.token_count = 1;
  out.loss_value = static_cast<float>(loss_acc / n);
  out.per_layer.reserve(acc.size());
  for (auto& block : acc) out.per_layer.push_back((block / n).cast<float>());
  return out;
}

VecD concat_gradient(const ExampleGradient& g, int k) {
  const int layers = (k < 0) ? static_cast<int>(g.per_layer.size())
                             : std::min<int>(k, static_cast<int>(g.per_layer.size()));
  int64_t dim = 0;
  for (int l = 0; l < layers; ++l) dim += g.per_layer[l].size();
  VecD out(dim);
  int64_t at = 0;
  for (int l = 0; l < layers; ++l) {
    out.segment(at, g.per_layer[l].size()) = g.per_layer[l].cast<double>();
    at += g.per_layer[l].size();
  }
  return out;
}

}  // namespace in2core
