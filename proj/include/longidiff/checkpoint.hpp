#pragma once

#include <torch/torch.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "longidiff/common.hpp"

namespace longidiff {

// Single-file archive: a text preamble, a JSON header (config + tensor index),
// then all tensors concatenated as little-endian float64. See the README for
// the exact byte layout. Round-trips are bit-exact.
struct Checkpoint {
  nlohmann::ordered_json config;
  std::vector<std::pair<std::string, torch::Tensor>> tensors;

  const torch::Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
};

namespace detail {

inline void write_f64_le(std::ostream& os, const double* data, size_t count) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * 8));
  } else {
    for (size_t i = 0; i < count; ++i) {
      uint64_t bits;
      std::memcpy(&bits, &data[i], 8);
      char buf[8];
      for (int b = 0; b < 8; ++b) buf[b] = static_cast<char>((bits >> (8 * b)) & 0xff);
      os.write(buf, 8);
    }
  }
}

inline void read_f64_le(std::istream& is, double* data, size_t count) {
  if constexpr (std::endian::native == std::endian::little) {
    is.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(count * 8));
  } else {
    for (size_t i = 0; i < count; ++i) {
      char buf[8];
      is.read(buf, 8);
      uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) bits |= static_cast<uint64_t>(static_cast<unsigned char>(buf[b])) << (8 * b);
      std::memcpy(&data[i], &bits, 8);
    }
  }
}

}  // namespace detail

inline constexpr const char* kCheckpointMagic = "longidiff-checkpoint v1";

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  nlohmann::ordered_json header;
  header["format"] = kCheckpointMagic;
  header["version"] = 1;
  header["config"] = ckpt.config;
  auto& index = header["tensors"] = nlohmann::ordered_json::array();
  int64_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    nlohmann::ordered_json e;
    e["name"] = name;
    e["shape"] = std::vector<int64_t>(t.sizes().begin(), t.sizes().end());
    e["offset"] = offset;
    e["numel"] = t.numel();
    index.push_back(e);
    offset += t.numel();
  }
  const std::string htext = header.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open checkpoint for writing: " + path);
  os << kCheckpointMagic << "\n";
  os << "header-bytes: " << htext.size() << "\n";
  os << htext;
  for (const auto& [name, t] : ckpt.tensors) {
    auto flat = t.detach().to(torch::kFloat64).contiguous();
    detail::write_f64_le(os, flat.data_ptr<double>(), static_cast<size_t>(flat.numel()));
  }
  if (!os) throw DataError("checkpoint write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path);
  std::string magic;
  std::getline(is, magic);
  if (magic != kCheckpointMagic) throw DataError("not a checkpoint file: " + path);
  std::string sizeline;
  std::getline(is, sizeline);
  const std::string prefix = "header-bytes: ";
  if (sizeline.rfind(prefix, 0) != 0) throw DataError("malformed checkpoint header: " + path);
  const size_t hbytes = std::stoull(sizeline.substr(prefix.size()));
  std::string htext(hbytes, '\0');
  is.read(htext.data(), static_cast<std::streamsize>(hbytes));
  if (!is) throw DataError("truncated checkpoint header: " + path);
  const auto header = nlohmann::ordered_json::parse(htext);

  Checkpoint ckpt;
  ckpt.config = header.at("config");
  for (const auto& e : header.at("tensors")) {
    const auto shape = e.at("shape").get<std::vector<int64_t>>();
    const int64_t numel = e.at("numel").get<int64_t>();
    auto t = torch::empty(shape, torch::kFloat64);
    if (t.numel() != numel) throw DataError("checkpoint index mismatch: " + path);
    detail::read_f64_le(is, t.data_ptr<double>(), static_cast<size_t>(numel));
    if (!is) throw DataError("truncated checkpoint tensors: " + path);
    ckpt.tensors.emplace_back(e.at("name").get<std::string>(), std::move(t));
  }
  return ckpt;
}

// Append a module's parameters and buffers under "<section>." prefixes.
inline void add_module_section(Checkpoint& ckpt, const std::string& section,
                               const torch::nn::Module& m) {
  for (const auto& p : m.named_parameters())
    ckpt.tensors.emplace_back(section + "." + p.key(), p.value().detach().clone());
  for (const auto& b : m.named_buffers())
    ckpt.tensors.emplace_back(section + "." + b.key(), b.value().detach().clone());
}

// Copy a section back into a module, casting to the module's dtype.
inline void load_module_section(const Checkpoint& ckpt, const std::string& section,
                                torch::nn::Module& m) {
  torch::NoGradGuard ng;
  for (auto p : m.named_parameters()) {
    const auto* t = ckpt.find(section + "." + p.key());
    if (t == nullptr) throw DataError("checkpoint missing tensor: " + section + "." + p.key());
    p.value().copy_(t->to(p.value().dtype()));
  }
  for (auto b : m.named_buffers()) {
    const auto* t = ckpt.find(section + "." + b.key());
    if (t == nullptr) throw DataError("checkpoint missing tensor: " + section + "." + b.key());
    b.value().copy_(t->to(b.value().dtype()));
  }
}

inline bool has_section(const Checkpoint& ckpt, const std::string& section) {
  const std::string prefix = section + ".";
  for (const auto& [n, t] : ckpt.tensors)
    if (n.rfind(prefix, 0) == 0) return true;
  return false;
}

}  // namespace longidiff
