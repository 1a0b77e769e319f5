#pragma once

// Binary checkpoint:
//   "GPLC" | u32 version | u64 header bytes | JSON header | tensor payload | u32 CRC-32
// Integers and tensor elements are little-endian. The CRC covers every byte
// before it. The header carries the model spec, normalization constants, a
// training summary and the name, shape and byte offset of every tensor.

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gaussproto/config.hpp"
#include "gaussproto/errors.hpp"
#include "gaussproto/image.hpp"
#include "gaussproto/pipeline.hpp"

namespace gaussproto {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'G', 'P', 'L', 'C'};

namespace detail {

template <class U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <class U>
U get_le(const std::string& in, std::size_t at) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= U(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

template <class T>
void put_values(std::string& out, const Tensor<T>& t) {
  using Bits = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  for (T v : t.data()) put_le(out, std::bit_cast<Bits>(v));
}

template <class T>
void get_values(const std::string& in, std::size_t at, Tensor<T>& t) {
  using Bits = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = std::bit_cast<T>(get_le<Bits>(in, at + i * sizeof(T)));
}

inline std::uint32_t crc32_of(const std::string& bytes, std::size_t n) {
  uLong c = crc32(0L, Z_NULL, 0);
  const auto* p = reinterpret_cast<const Bytef*>(bytes.data());
  // zlib takes uInt lengths; feed in chunks
  for (std::size_t off = 0; off < n; off += (1u << 30)) {
    c = crc32(c, p + off, static_cast<uInt>(std::min<std::size_t>(n - off, 1u << 30)));
  }
  return static_cast<std::uint32_t>(c);
}

template <class T>
struct NamedTensor {
  std::string name;
  Tensor<T>* tensor;
};

template <class T>
std::vector<NamedTensor<T>> checkpoint_tensors(Model<T>& m) {
  std::vector<NamedTensor<T>> out;
  for (auto* p : m.parameters()) out.push_back({p->name, &p->value});
  for (auto& [name, s] : m.norm_stats()) {
    out.push_back({name + ".running_mean", &s->running_mean});
    out.push_back({name + ".running_var", &s->running_var});
  }
  std::set<std::string> names;
  for (const auto& t : out) {
    if (!names.insert(t.name).second) throw InvalidArgument("duplicate tensor name " + t.name);
  }
  return out;
}

inline json summary_json(const TrainSummary& s) {
  json stages = json::array();
  for (const auto& st : s.stages) {
    stages.push_back({{"epochs", st.epochs}, {"final_smoothed", st.final_smoothed},
                      {"final_smoothed_total", st.final_smoothed_total}});
  }
  return {{"stages", stages}};
}

}  // namespace detail

template <class T>
struct Checkpoint {
  Model<T> model;
  json train_summary = json::object();
};

template <class T>
std::string serialize_checkpoint(Model<T>& m, const json& train_summary = json::object()) {
  json tensors = json::array();
  std::string payload;
  for (const auto& t : detail::checkpoint_tensors(m)) {
    tensors.push_back({{"name", t.name}, {"shape", t.tensor->shape()}, {"offset", payload.size()}});
    detail::put_values(payload, *t.tensor);
  }
  const json header{{"dtype", sizeof(T) == 8 ? "f64" : "f32"},
                    {"spec", spec_to_json(m.spec)},
                    {"normalization", {{"mean", m.norm.mean}, {"std", m.norm.stddev}}},
                    {"train", train_summary},
                    {"tensors", tensors}};
  const std::string h = header.dump();
  std::string out(kCheckpointMagic, 4);
  detail::put_le(out, kCheckpointVersion);
  detail::put_le(out, static_cast<std::uint64_t>(h.size()));
  out += h;
  out += payload;
  detail::put_le(out, detail::crc32_of(out, out.size()));
  return out;
}

template <class T>
void save_checkpoint(Model<T>& m, const fs::path& path, const json& train_summary = json::object()) {
  write_text_file(path, serialize_checkpoint(m, train_summary));
}

template <class T>
Checkpoint<T> parse_checkpoint(const std::string& bytes, const std::string& what = "checkpoint") {
  if (bytes.size() < 20 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw CorruptFile(what + " is not a checkpoint (bad magic or too short)");
  }
  const auto version = detail::get_le<std::uint32_t>(bytes, 4);
  if (version != kCheckpointVersion) {
    throw VersionMismatch(what + " has format version " + std::to_string(version) + ", this build reads " +
                          std::to_string(kCheckpointVersion));
  }
  const std::size_t n = bytes.size() - 4;
  if (detail::get_le<std::uint32_t>(bytes, n) != detail::crc32_of(bytes, n)) {
    throw CorruptFile(what + " failed its checksum (truncated or modified)");
  }
  const auto hlen = detail::get_le<std::uint64_t>(bytes, 8);
  if (16 + hlen > n) throw CorruptFile(what + " header length exceeds the file");
  json header;
  try {
    header = json::parse(bytes.substr(16, hlen));
  } catch (const json::exception& e) {
    throw CorruptFile(what + " header: " + e.what());
  }
  const std::string dtype = header.value("dtype", "");
  if (dtype != (sizeof(T) == 8 ? "f64" : "f32")) throw CorruptFile(what + " stores " + dtype + " tensors");

  Checkpoint<T> ck;
  ck.model = Model<T>(spec_from_json(header.at("spec")), 0);
  const auto mean = header.at("normalization").at("mean").get<std::array<double, 3>>();
  const auto sd = header.at("normalization").at("std").get<std::array<double, 3>>();
  ck.model.norm.mean = mean;
  ck.model.norm.stddev = sd;
  ck.train_summary = header.value("train", json::object());

  std::map<std::string, json> entries;
  for (const auto& e : header.at("tensors")) entries[e.at("name").get<std::string>()] = e;
  const std::size_t base = 16 + hlen;
  for (const auto& t : detail::checkpoint_tensors(ck.model)) {
    auto it = entries.find(t.name);
    if (it == entries.end()) throw CorruptFile(what + " lacks tensor " + t.name);
    const auto shape = it->second.at("shape").template get<Shape>();
    if (shape != t.tensor->shape()) throw CorruptFile(what + ": tensor " + t.name + " has the wrong shape");
    const auto off = it->second.at("offset").template get<std::size_t>();
    if (base + off + t.tensor->size() * sizeof(T) > n) throw CorruptFile(what + ": tensor " + t.name + " overruns");
    detail::get_values(bytes, base + off, *t.tensor);
    entries.erase(it);
  }
  if (!entries.empty()) throw CorruptFile(what + " has unexpected tensor " + entries.begin()->first);
  return ck;
}

template <class T>
Checkpoint<T> load_checkpoint(const fs::path& path) {
  return parse_checkpoint<T>(read_text_file(path), path.string());
}

}  // namespace gaussproto
