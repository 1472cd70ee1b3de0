#pragma once

#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "debs/trainer.hpp"

namespace debs {

// Checkpoint container, little-endian:
//   magic "DEBSCKPT", u32 version, u64 config hash, u64 iteration,
//   u8 transitioned flag, u32 entry count, entries as
//   (name, dtype u8, ndim u32, dims u64..., payload), trailing CRC32 over
//   everything after the magic. Contains both networks, optimizer moments,
//   per-tensor step counters and the sampler rng state, so load(save(x))
//   reproduces training bit for bit.
constexpr std::uint32_t checkpoint_format_version = 1;

enum class ckpt_dtype : std::uint8_t { f32 = 0, f64 = 1, u64 = 2 };

struct ckpt_entry {
  ckpt_dtype dtype = ckpt_dtype::f32;
  shape_t shape;
  std::vector<std::uint8_t> payload;
};

struct checkpoint_file {
  std::uint32_t version = checkpoint_format_version;
  std::uint64_t config_hash = 0;
  std::uint64_t iteration = 0;
  bool transitioned = false;
  std::map<std::string, ckpt_entry> entries;
};

namespace detail {

template <class T>
constexpr ckpt_dtype dtype_of() {
  if constexpr (std::is_same_v<T, float>) return ckpt_dtype::f32;
  else if constexpr (std::is_same_v<T, double>) return ckpt_dtype::f64;
  else return ckpt_dtype::u64;
}

template <class T>
void entry_to_tensor(const ckpt_entry& e, const std::string& name, tensor<T>& out) {
  if (e.dtype != dtype_of<T>())
    throw data_error("checkpoint: dtype mismatch for " + name);
  if (e.shape != out.shape)
    throw config_error("checkpoint: shape mismatch for " + name +
                       " (file " + shape_str(e.shape) + ", model " + shape_str(out.shape) + ")");
  std::memcpy(out.ptr(), e.payload.data(), e.payload.size());
}

inline std::vector<std::uint64_t> entry_to_u64(const ckpt_entry& e, const std::string& name) {
  if (e.dtype != ckpt_dtype::u64) throw data_error("checkpoint: dtype mismatch for " + name);
  std::vector<std::uint64_t> v(shape_numel(e.shape));
  std::memcpy(v.data(), e.payload.data(), e.payload.size());
  return v;
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_checkpoint(const checkpoint_file& c) {
  byte_writer w;
  w.bytes("DEBSCKPT", 8);
  w.u32(c.version);
  w.u64(c.config_hash);
  w.u64(c.iteration);
  w.u8(c.transitioned ? 1 : 0);
  w.u32(static_cast<std::uint32_t>(c.entries.size()));
  for (const auto& [name, e] : c.entries) {
    w.str(name);
    w.u8(static_cast<std::uint8_t>(e.dtype));
    w.u32(static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) w.u64(d);
    w.bytes(e.payload.data(), e.payload.size());
  }
  w.u32(crc32(w.data().data() + 8, w.size() - 8));
  return w.data();
}

inline std::size_t dtype_size(ckpt_dtype d) {
  return d == ckpt_dtype::f32 ? 4 : 8;
}

inline checkpoint_file parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), "DEBSCKPT", 8) != 0)
    throw data_error("not a checkpoint file (bad magic)");
  if (bytes.size() < 8 + 4) throw data_error("checkpoint truncated");
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
  if (stored != crc32(bytes.data() + 8, bytes.size() - 12))
    throw data_error("checkpoint checksum mismatch");
  byte_reader r(bytes.data() + 8, bytes.size() - 12);
  checkpoint_file c;
  c.version = r.u32();
  if (c.version != checkpoint_format_version)
    throw config_error("checkpoint format version " + std::to_string(c.version) +
                       " is not supported");
  c.config_hash = r.u64();
  c.iteration = r.u64();
  c.transitioned = r.u8() != 0;
  const std::uint32_t n = r.u32();
  for (std::uint32_t k = 0; k < n; ++k) {
    const std::string name = r.str();
    ckpt_entry e;
    e.dtype = static_cast<ckpt_dtype>(r.u8());
    const std::uint32_t ndim = r.u32();
    e.shape.resize(ndim);
    for (auto& d : e.shape) d = r.u64();
    e.payload.resize(shape_numel(e.shape) * dtype_size(e.dtype));
    r.bytes(e.payload.data(), e.payload.size());
    c.entries[name] = std::move(e);
  }
  return c;
}

// Atomic-ish write: temp file in place, then rename.
inline void write_checkpoint_bytes(const std::vector<std::uint8_t>& bytes,
                                   const std::string& path) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw io_error("cannot open for writing: " + tmp);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw io_error("write failed: " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw io_error("cannot move checkpoint into place: " + path);
}

template <class T>
std::vector<std::uint8_t> serialize_trainer(trainer<T>& tr, std::uint64_t config_hash) {
  checkpoint_file c;
  c.config_hash = config_hash;
  c.iteration = tr.iteration();
  c.transitioned = tr.transitioned();

  auto add_tensor = [&](const std::string& name, const tensor<T>& t) {
    ckpt_entry e;
    e.dtype = detail::dtype_of<T>();
    e.shape = t.shape;
    e.payload.resize(t.numel() * sizeof(T));
    std::memcpy(e.payload.data(), t.ptr(), e.payload.size());
    c.entries[name] = std::move(e);
  };
  auto add_u64 = [&](const std::string& name, const std::vector<std::uint64_t>& v) {
    ckpt_entry e;
    e.dtype = ckpt_dtype::u64;
    e.shape = {v.size()};
    e.payload.resize(v.size() * sizeof(std::uint64_t));
    std::memcpy(e.payload.data(), v.data(), e.payload.size());
    c.entries[name] = std::move(e);
  };

  tr.student().for_each_param(
      [&](const std::string& n, tensor<T>& t) { add_tensor("student/" + n, t); });
  tr.student().for_each_buffer(
      [&](const std::string& n, tensor<T>& t) { add_tensor("student/" + n, t); });
  tr.teacher().for_each_param(
      [&](const std::string& n, tensor<T>& t) { add_tensor("teacher/" + n, t); });
  tr.teacher().for_each_buffer(
      [&](const std::string& n, tensor<T>& t) { add_tensor("teacher/" + n, t); });
  const auto& params = tr.named_params();
  for (std::size_t p = 0; p < params.size(); ++p) {
    add_tensor("opt/m/" + params[p].first, tr.opt().m[p]);
    add_tensor("opt/v/" + params[p].first, tr.opt().v[p]);
  }
  add_u64("opt/steps", tr.opt().steps);
  add_u64("rng/sample", {tr.batch_rng_state().begin(), tr.batch_rng_state().end()});
  return serialize_checkpoint(c);
}

template <class T>
void save_trainer_checkpoint(trainer<T>& tr, std::uint64_t config_hash,
                             const std::string& path) {
  write_checkpoint_bytes(serialize_trainer(tr, config_hash), path);
}

// Restores a trainer built with the same configs. Refuses a config-hash
// mismatch unless forced; shape mismatches always fail.
template <class T>
void load_trainer_checkpoint(trainer<T>& tr, std::uint64_t expected_hash,
                             const std::string& path, bool force = false) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open checkpoint: " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  checkpoint_file c = parse_checkpoint(bytes);
  if (!force && c.config_hash != expected_hash)
    throw config_error("checkpoint was produced by a different configuration "
                       "(hash mismatch); pass force to override");

  auto fetch = [&](const std::string& name) -> const ckpt_entry& {
    auto it = c.entries.find(name);
    if (it == c.entries.end()) throw data_error("checkpoint: missing tensor " + name);
    return it->second;
  };
  auto load_tensor = [&](const std::string& name, tensor<T>& t) {
    detail::entry_to_tensor(fetch(name), name, t);
  };

  tr.student().for_each_param(
      [&](const std::string& n, tensor<T>& t) { load_tensor("student/" + n, t); });
  tr.student().for_each_buffer(
      [&](const std::string& n, tensor<T>& t) { load_tensor("student/" + n, t); });
  tr.teacher().for_each_param(
      [&](const std::string& n, tensor<T>& t) { load_tensor("teacher/" + n, t); });
  tr.teacher().for_each_buffer(
      [&](const std::string& n, tensor<T>& t) { load_tensor("teacher/" + n, t); });
  const auto& params = tr.named_params();
  for (std::size_t p = 0; p < params.size(); ++p) {
    detail::entry_to_tensor(fetch("opt/m/" + params[p].first), params[p].first, tr.opt().m[p]);
    detail::entry_to_tensor(fetch("opt/v/" + params[p].first), params[p].first, tr.opt().v[p]);
  }
  tr.opt().steps = detail::entry_to_u64(fetch("opt/steps"), "opt/steps");
  if (tr.opt().steps.size() != params.size())
    throw data_error("checkpoint: optimizer step table size mismatch");
  const auto rngv = detail::entry_to_u64(fetch("rng/sample"), "rng/sample");
  if (rngv.size() != 4) throw data_error("checkpoint: malformed rng state");
  std::array<std::uint64_t, 4> st{rngv[0], rngv[1], rngv[2], rngv[3]};
  tr.restore_counters(c.iteration, c.transitioned, st);
}

}  // namespace debs
