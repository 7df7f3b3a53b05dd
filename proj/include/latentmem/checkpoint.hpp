#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "latentmem/tensor.hpp"

namespace latentmem {

// "LMC1" container: magic, version u32 LE, manifest-length u32 LE, UTF-8 JSON
// manifest [{name, shape, dtype:"f32", offset, byte_len}], then concatenated
// little-endian IEEE-754 float payloads. Offsets are relative to the payload
// start. Round trips are bit-exact.

struct TensorEntry {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

namespace detail {
inline void put_u32_le(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v));
  out.push_back(static_cast<uint8_t>(v >> 8));
  out.push_back(static_cast<uint8_t>(v >> 16));
  out.push_back(static_cast<uint8_t>(v >> 24));
}
inline uint32_t get_u32_le(const uint8_t* p) {
  return uint32_t(p[0]) | (uint32_t(p[1]) << 8) | (uint32_t(p[2]) << 16) | (uint32_t(p[3]) << 24);
}
}  // namespace detail

inline std::vector<uint8_t> serialize_container(const std::vector<TensorEntry>& entries) {
  nlohmann::json manifest = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& e : entries) {
    const uint64_t byte_len = e.data.size() * sizeof(float);
    manifest.push_back({{"name", e.name},
                        {"shape", e.shape},
                        {"dtype", "f32"},
                        {"offset", offset},
                        {"byte_len", byte_len}});
    offset += byte_len;
  }
  const std::string mjson = manifest.dump();
  std::vector<uint8_t> out;
  out.reserve(12 + mjson.size() + offset);
  out.push_back('L');
  out.push_back('M');
  out.push_back('C');
  out.push_back('1');
  detail::put_u32_le(out, 1u);
  detail::put_u32_le(out, static_cast<uint32_t>(mjson.size()));
  out.insert(out.end(), mjson.begin(), mjson.end());
  for (const auto& e : entries) {
    const size_t pos = out.size();
    out.resize(pos + e.data.size() * sizeof(float));
    std::memcpy(out.data() + pos, e.data.data(), e.data.size() * sizeof(float));
  }
  return out;
}

inline std::vector<TensorEntry> parse_container(const std::vector<uint8_t>& bytes) {
  if (bytes.size() < 12 || bytes[0] != 'L' || bytes[1] != 'M' || bytes[2] != 'C' || bytes[3] != '1')
    throw std::runtime_error("checkpoint: bad magic, not an LMC1 container");
  const uint32_t version = detail::get_u32_le(bytes.data() + 4);
  if (version != 1) throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  const uint32_t mlen = detail::get_u32_le(bytes.data() + 8);
  if (bytes.size() < 12 + static_cast<size_t>(mlen)) throw std::runtime_error("checkpoint: truncated manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + mlen);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("checkpoint: manifest parse error: ") + e.what());
  }
  const size_t payload_start = 12 + mlen;
  std::vector<TensorEntry> out;
  for (const auto& m : manifest) {
    TensorEntry e;
    e.name = m.at("name").get<std::string>();
    e.shape = m.at("shape").get<Shape>();
    if (m.at("dtype").get<std::string>() != "f32")
      throw std::runtime_error("checkpoint: unsupported dtype for " + e.name);
    const uint64_t offset = m.at("offset").get<uint64_t>();
    const uint64_t byte_len = m.at("byte_len").get<uint64_t>();
    if (byte_len % sizeof(float) != 0 || payload_start + offset + byte_len > bytes.size())
      throw std::runtime_error("checkpoint: payload range out of bounds for " + e.name);
    if (static_cast<int64_t>(byte_len / sizeof(float)) != shape_numel(e.shape))
      throw std::runtime_error("checkpoint: shape/payload mismatch for " + e.name);
    e.data.resize(byte_len / sizeof(float));
    std::memcpy(e.data.data(), bytes.data() + payload_start + offset, byte_len);
    out.push_back(std::move(e));
  }
  return out;
}

inline void save_container(const std::string& path, const std::vector<TensorEntry>& entries) {
  const auto bytes = serialize_container(entries);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open for write: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("checkpoint: write failed: " + path);
}

inline std::vector<TensorEntry> load_container(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open: " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_container(bytes);
}

template <class Real>
TensorEntry to_entry(const std::string& name, const Tensor<Real>& t) {
  TensorEntry e;
  e.name = name;
  e.shape = t.shape;
  e.data.reserve(t.data->size());
  for (Real v : *t.data) e.data.push_back(static_cast<float>(v));
  return e;
}

template <class Real>
void from_entry(const TensorEntry& e, Tensor<Real>& t) {
  if (e.shape != t.shape)
    throw std::runtime_error("checkpoint: shape mismatch for " + e.name + ": file " + shape_str(e.shape) +
                             " vs model " + shape_str(t.shape));
  for (size_t i = 0; i < e.data.size(); ++i) (*t.data)[i] = static_cast<Real>(e.data[i]);
}

}  // namespace latentmem
