#pragma once

#include <cctype>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "debs/common.hpp"
#include "debs/data.hpp"

namespace debs {

// Binary record file, little-endian:
//   magic "DEBS", version u16, sampling_rate u32, segment_len u32,
//   subject count u32; per subject: subject_id u32, segment count u32,
//   length-prefixed factor block, then segments as
//   (segment_index u32, event_label u8, segment_len x f32);
//   trailing CRC32 over everything after the magic.
constexpr std::uint16_t record_format_version = 1;

namespace detail {

inline void write_factors(byte_writer& w, const subject_factors& f) {
  byte_writer b;
  b.f32(f.base_rate_hz);
  b.f32(f.p_amp);
  b.f32(f.qrs_amp);
  b.f32(f.t_amp);
  b.f32(f.p_width);
  b.f32(f.qrs_width);
  b.f32(f.t_width);
  b.f32(f.wander_amp);
  b.f32(f.wander_freq_hz);
  b.f32(f.noise_amp);
  b.f32(f.rr_cv_normal);
  b.u32(static_cast<std::uint32_t>(f.events.size()));
  for (const auto& e : f.events) {
    b.u32(e.start);
    b.u32(e.end);
    b.f32(e.rr_cv);
    b.f32(e.shape_factor);
  }
  w.u32(static_cast<std::uint32_t>(b.size()));
  w.bytes(b.data().data(), b.size());
}

inline subject_factors read_factors(byte_reader& r) {
  const std::uint32_t len = r.u32();
  if (r.remaining() < len) throw record_error(record_fault::truncated, "factor block truncated");
  subject_factors f;
  f.base_rate_hz = r.f32();
  f.p_amp = r.f32();
  f.qrs_amp = r.f32();
  f.t_amp = r.f32();
  f.p_width = r.f32();
  f.qrs_width = r.f32();
  f.t_width = r.f32();
  f.wander_amp = r.f32();
  f.wander_freq_hz = r.f32();
  f.noise_amp = r.f32();
  f.rr_cv_normal = r.f32();
  const std::uint32_t ne = r.u32();
  f.events.resize(ne);
  for (auto& e : f.events) {
    e.start = r.u32();
    e.end = r.u32();
    e.rr_cv = r.f32();
    e.shape_factor = r.f32();
  }
  return f;
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_records(const dataset& ds) {
  ds.validate();
  byte_writer w;
  w.bytes("DEBS", 4);
  w.u16(record_format_version);
  w.u32(ds.sampling_rate);
  w.u32(ds.segment_len);
  w.u32(static_cast<std::uint32_t>(ds.subjects.size()));
  for (const auto& s : ds.subjects) {
    w.u32(s.subject_id);
    w.u32(static_cast<std::uint32_t>(s.segments.size()));
    detail::write_factors(w, s.factors);
    for (const auto& seg : s.segments) {
      w.u32(seg.segment_index);
      w.u8(seg.event_label);
      w.bytes(seg.samples.data(), seg.samples.size() * sizeof(float));
    }
  }
  const std::uint32_t crc = crc32(w.data().data() + 4, w.size() - 4);
  w.u32(crc);
  return w.data();
}

inline dataset parse_records(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "DEBS", 4) != 0)
    throw record_error(record_fault::bad_magic, "not a record file (bad magic)");
  if (bytes.size() < 8 + 4)
    throw record_error(record_fault::truncated, "record file too short");
  const std::uint32_t stored_crc = [&] {
    std::uint32_t c;
    std::memcpy(&c, bytes.data() + bytes.size() - 4, 4);
    return c;
  }();
  const std::uint32_t actual_crc = crc32(bytes.data() + 4, bytes.size() - 8);
  if (stored_crc != actual_crc)
    throw record_error(record_fault::bad_checksum, "record file checksum mismatch");

  byte_reader r(bytes.data() + 4, bytes.size() - 8);
  const std::uint16_t version = r.u16();
  if (version != record_format_version)
    throw record_error(record_fault::bad_version,
                       "unsupported record format version " + std::to_string(version));
  dataset ds;
  ds.sampling_rate = r.u32();
  ds.segment_len = r.u32();
  const std::uint32_t n_subjects = r.u32();
  ds.subjects.resize(n_subjects);
  for (auto& s : ds.subjects) {
    s.subject_id = r.u32();
    const std::uint32_t n_segs = r.u32();
    s.factors = detail::read_factors(r);
    s.segments.resize(n_segs);
    for (auto& seg : s.segments) {
      seg.subject_id = s.subject_id;
      seg.segment_index = r.u32();
      seg.event_label = r.u8();
      seg.samples.resize(ds.segment_len);
      r.bytes(seg.samples.data(), ds.segment_len * sizeof(float));
    }
  }
  ds.validate();
  return ds;
}

inline void write_records(const dataset& ds, const std::string& path) {
  const auto bytes = serialize_records(ds);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw io_error("cannot open for writing: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw io_error("write failed: " + path);
}

inline dataset load_records(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open: " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return parse_records(bytes);
}

// Plain-text import: subject_id, segment_index, label, s0..s{segment_len-1}.
// A header row is skipped when the first field is not numeric. Factor blocks
// are not representable in CSV and default-initialize.
inline dataset load_records_csv(const std::string& path, std::uint32_t sampling_rate = 125) {
  std::ifstream f(path);
  if (!f) throw io_error("cannot open: " + path);
  dataset ds;
  ds.sampling_rate = sampling_rate;
  ds.segment_len = 0;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() < 4) throw data_error("csv: too few columns at line " + std::to_string(lineno));
    if (lineno == 1 && (fields[0].empty() || !std::isdigit(static_cast<unsigned char>(fields[0][0]))))
      continue;  // header
    segment seg;
    try {
      seg.subject_id = static_cast<std::uint32_t>(std::stoul(fields[0]));
      seg.segment_index = static_cast<std::uint32_t>(std::stoul(fields[1]));
      seg.event_label = static_cast<std::uint8_t>(std::stoul(fields[2]));
      seg.samples.reserve(fields.size() - 3);
      for (std::size_t i = 3; i < fields.size(); ++i) seg.samples.push_back(std::stof(fields[i]));
    } catch (const std::exception&) {
      throw data_error("csv: malformed value at line " + std::to_string(lineno));
    }
    if (ds.segment_len == 0)
      ds.segment_len = static_cast<std::uint32_t>(seg.samples.size());
    else if (seg.samples.size() != ds.segment_len)
      throw data_error("csv: inconsistent sample count at line " + std::to_string(lineno));
    subject_record* rec = nullptr;
    for (auto& s : ds.subjects)
      if (s.subject_id == seg.subject_id) rec = &s;
    if (!rec) {
      ds.subjects.push_back(subject_record{seg.subject_id, {}, {}});
      rec = &ds.subjects.back();
    }
    rec->segments.push_back(std::move(seg));
  }
  if (ds.segment_len == 0) throw data_error("csv: no segments found");
  for (auto& s : ds.subjects)
    std::sort(s.segments.begin(), s.segments.end(),
              [](const segment& a, const segment& b) { return a.segment_index < b.segment_index; });
  ds.validate();
  return ds;
}

}  // namespace debs
