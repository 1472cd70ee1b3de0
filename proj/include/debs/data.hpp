#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "debs/common.hpp"
#include "debs/rng.hpp"
#include "debs/tensor.hpp"

namespace debs {

constexpr std::uint8_t label_normal = 0;
constexpr std::uint8_t label_event = 1;

struct segment {
  std::uint32_t subject_id = 0;
  std::uint32_t segment_index = 0;
  std::uint8_t event_label = label_normal;
  std::vector<float> samples;

  bool operator==(const segment&) const = default;
};

// One dynamic episode: [start_segment, end_segment) with its own inter-beat
// irregularity and beat-shape alteration.
struct event_interval {
  std::uint32_t start = 0;
  std::uint32_t end = 0;
  float rr_cv = 0.f;
  float shape_factor = 1.f;

  bool operator==(const event_interval&) const = default;
};

// Static morphology (constant for the subject's lifetime) plus the event
// schedule that generated the dynamic labels.
struct subject_factors {
  float base_rate_hz = 1.2f;  // beats per second
  float p_amp = 0.12f, qrs_amp = 1.0f, t_amp = 0.3f;
  float p_width = 0.05f, qrs_width = 0.015f, t_width = 0.1f;  // seconds
  float wander_amp = 0.05f, wander_freq_hz = 0.25f;
  float noise_amp = 0.02f;
  float rr_cv_normal = 0.03f;
  std::vector<event_interval> events;

  bool operator==(const subject_factors&) const = default;

  bool in_event(std::uint32_t seg_index) const {
    for (const auto& e : events)
      if (seg_index >= e.start && seg_index < e.end) return true;
    return false;
  }
  const event_interval* event_at(std::uint32_t seg_index) const {
    for (const auto& e : events)
      if (seg_index >= e.start && seg_index < e.end) return &e;
    return nullptr;
  }
};

struct subject_record {
  std::uint32_t subject_id = 0;
  subject_factors factors;
  std::vector<segment> segments;

  bool operator==(const subject_record&) const = default;
};

struct dataset {
  std::uint32_t sampling_rate = 125;  // Hz
  std::uint32_t segment_len = 1000;
  std::vector<subject_record> subjects;

  bool operator==(const dataset&) const = default;

  double segment_seconds() const {
    return static_cast<double>(segment_len) / static_cast<double>(sampling_rate);
  }
  std::size_t total_segments() const {
    std::size_t n = 0;
    for (const auto& s : subjects) n += s.segments.size();
    return n;
  }
  void validate() const {
    if (sampling_rate == 0 || segment_len == 0)
      throw data_error("dataset: sampling rate and segment length must be positive");
    for (const auto& s : subjects)
      for (std::size_t i = 0; i < s.segments.size(); ++i) {
        if (s.segments[i].segment_index != i)
          throw data_error("dataset: segment indices must be contiguous from 0");
        if (s.segments[i].samples.size() != segment_len)
          throw data_error("dataset: segment sample count mismatch");
      }
  }
};

struct generator_spec {
  std::uint32_t n_subjects = 24;
  std::uint32_t segments_per_subject = 60;
  std::uint32_t sampling_rate = 125;   // 1000 samples = 8 s per segment
  std::uint32_t segment_len = 1000;
  float hr_min = 55.f, hr_max = 95.f;  // bpm
  float rr_cv_normal_min = 0.02f, rr_cv_normal_max = 0.05f;
  float rr_cv_event_min = 0.20f, rr_cv_event_max = 0.35f;
  float event_shape_min = 0.10f, event_shape_max = 0.30f;  // P-wave suppression
  std::uint32_t normal_run_min = 10, normal_run_max = 16;  // segments
  std::uint32_t event_run_min = 6, event_run_max = 10;
  bool with_events = true;
};

struct generated_subject {
  subject_record record;
  // Ground truth: coefficient of variation of the realized inter-beat
  // intervals inside each segment. Not serialized; tests and diagnostics only.
  std::vector<float> segment_rr_cv;
};

namespace detail {

inline std::uint32_t uniform_in(rng& r, std::uint32_t lo, std::uint32_t hi) {
  return lo + static_cast<std::uint32_t>(r.below(hi - lo + 1));
}

inline void add_gaussian(std::vector<float>& sig, double rate, double center_s, double width_s,
                         double amp) {
  if (amp == 0.0) return;
  const double lo = center_s - 4.0 * width_s, hi = center_s + 4.0 * width_s;
  const auto i0 = static_cast<std::int64_t>(std::floor(lo * rate));
  const auto i1 = static_cast<std::int64_t>(std::ceil(hi * rate));
  const std::int64_t n = static_cast<std::int64_t>(sig.size());
  for (std::int64_t i = std::max<std::int64_t>(0, i0); i <= std::min(n - 1, i1); ++i) {
    const double t = static_cast<double>(i) / rate;
    const double d = (t - center_s) / width_s;
    sig[static_cast<std::size_t>(i)] += static_cast<float>(amp * std::exp(-0.5 * d * d));
  }
}

}  // namespace detail

// Quasi-periodic ECG-like waveform: a subject-specific beat template repeated
// at the subject's base rate, plus baseline wander and noise. Inside event
// intervals the inter-beat interval becomes irregular and the P component is
// suppressed, so events are detectable from the signal while the subject's
// morphology stays put.
inline generated_subject generate_subject(std::uint64_t seed, std::uint32_t subject_id,
                                          const generator_spec& spec) {
  rng r = derive_rng(seed, subject_id);
  subject_factors f;
  const float hr = static_cast<float>(r.uniform(spec.hr_min, spec.hr_max));
  f.base_rate_hz = hr / 60.f;
  f.p_amp = static_cast<float>(r.uniform(0.08, 0.18));
  f.qrs_amp = static_cast<float>(r.uniform(0.9, 1.3));
  f.t_amp = static_cast<float>(r.uniform(0.2, 0.4));
  f.p_width = static_cast<float>(0.05 * r.uniform(0.8, 1.2));
  f.qrs_width = static_cast<float>(0.015 * r.uniform(0.8, 1.2));
  f.t_width = static_cast<float>(0.1 * r.uniform(0.8, 1.2));
  f.wander_amp = static_cast<float>(r.uniform(0.02, 0.10));
  f.wander_freq_hz = static_cast<float>(r.uniform(0.15, 0.35));
  f.noise_amp = static_cast<float>(r.uniform(0.01, 0.03));
  f.rr_cv_normal = static_cast<float>(r.uniform(spec.rr_cv_normal_min, spec.rr_cv_normal_max));

  if (spec.with_events && spec.segments_per_subject > 2) {
    std::uint32_t pos = detail::uniform_in(r, spec.normal_run_min, spec.normal_run_max);
    while (pos < spec.segments_per_subject) {
      const std::uint32_t len = detail::uniform_in(r, spec.event_run_min, spec.event_run_max);
      event_interval e;
      e.start = pos;
      e.end = std::min(pos + len, spec.segments_per_subject);
      e.rr_cv = static_cast<float>(r.uniform(spec.rr_cv_event_min, spec.rr_cv_event_max));
      e.shape_factor = static_cast<float>(r.uniform(spec.event_shape_min, spec.event_shape_max));
      f.events.push_back(e);
      pos = e.end + detail::uniform_in(r, spec.normal_run_min, spec.normal_run_max);
    }
  }

  const double rate = spec.sampling_rate;
  const double seg_sec = static_cast<double>(spec.segment_len) / rate;
  const double total_sec = seg_sec * spec.segments_per_subject;
  const double rr_mean = 1.0 / f.base_rate_hz;

  struct beat {
    double t;
    float p_scale;
  };
  std::vector<beat> beats;
  double t = r.uniform(0.0, rr_mean);
  while (t < total_sec + rr_mean) {
    const auto seg = static_cast<std::uint32_t>(
        std::min(t / seg_sec, static_cast<double>(spec.segments_per_subject - 1)));
    const event_interval* ev = f.event_at(seg);
    beats.push_back({t, ev ? ev->shape_factor : 1.f});
    const double cv = ev ? ev->rr_cv : f.rr_cv_normal;
    t += rr_mean * std::max(0.3, 1.0 + cv * r.normal());
  }

  const std::size_t total_samples =
      static_cast<std::size_t>(spec.segment_len) * spec.segments_per_subject;
  std::vector<float> sig(total_samples, 0.f);
  for (const beat& b : beats) {
    detail::add_gaussian(sig, rate, b.t - 0.16, f.p_width, f.p_amp * b.p_scale);
    detail::add_gaussian(sig, rate, b.t, f.qrs_width, f.qrs_amp);
    detail::add_gaussian(sig, rate, b.t + 0.22, f.t_width, f.t_amp);
  }
  const double phase = r.uniform(0.0, 6.283185307179586);
  for (std::size_t i = 0; i < total_samples; ++i) {
    const double ts = static_cast<double>(i) / rate;
    sig[i] += static_cast<float>(
        f.wander_amp * std::sin(6.283185307179586 * f.wander_freq_hz * ts + phase) +
        f.noise_amp * r.normal());
  }

  generated_subject out;
  out.record.subject_id = subject_id;
  out.record.factors = f;
  out.record.segments.resize(spec.segments_per_subject);
  out.segment_rr_cv.assign(spec.segments_per_subject, 0.f);
  for (std::uint32_t s = 0; s < spec.segments_per_subject; ++s) {
    segment& seg = out.record.segments[s];
    seg.subject_id = subject_id;
    seg.segment_index = s;
    seg.event_label = f.in_event(s) ? label_event : label_normal;
    const std::size_t off = static_cast<std::size_t>(s) * spec.segment_len;
    seg.samples.assign(sig.begin() + off, sig.begin() + off + spec.segment_len);

    const double lo = s * seg_sec, hi = (s + 1) * seg_sec;
    std::vector<double> in_seg;
    for (const beat& b : beats)
      if (b.t >= lo && b.t < hi) in_seg.push_back(b.t);
    if (in_seg.size() >= 3) {
      std::vector<double> rr(in_seg.size() - 1);
      for (std::size_t k = 0; k + 1 < in_seg.size(); ++k) rr[k] = in_seg[k + 1] - in_seg[k];
      double mean = 0;
      for (double v : rr) mean += v;
      mean /= static_cast<double>(rr.size());
      double var = 0;
      for (double v : rr) var += (v - mean) * (v - mean);
      var /= static_cast<double>(rr.size());
      out.segment_rr_cv[s] = static_cast<float>(std::sqrt(var) / mean);
    }
  }
  return out;
}

inline std::vector<generated_subject> generate_subjects(const generator_spec& spec,
                                                        std::uint64_t seed) {
  std::vector<generated_subject> out;
  out.reserve(spec.n_subjects);
  for (std::uint32_t sid = 0; sid < spec.n_subjects; ++sid)
    out.push_back(generate_subject(seed, sid, spec));
  return out;
}

inline dataset generate_dataset(const generator_spec& spec, std::uint64_t seed) {
  dataset d;
  d.sampling_rate = spec.sampling_rate;
  d.segment_len = spec.segment_len;
  for (auto& g : generate_subjects(spec, seed)) d.subjects.push_back(std::move(g.record));
  return d;
}

// ---------------------------------------------------------------------------
// Samplers. Pairs are unconstrained same-subject draws; triplets honor the
// spacing window: i >= 1, j >= 1, i + j <= window_segments.
// ---------------------------------------------------------------------------

struct pair_draw {
  std::uint32_t subject = 0;
  std::uint32_t idx1 = 0, idx2 = 0;
};

struct triplet_draw {
  std::uint32_t subject = 0;
  std::uint32_t t = 0;
  std::uint32_t i = 0, j = 0;
};

struct pair_batch {
  tensor<float> x1, x2;  // [B, segment_len], z-scored
  std::vector<std::uint32_t> subjects_a, subjects_b;
};

struct triplet_batch {
  tensor<float> x_before, x_mid, x_after;  // [B, segment_len], z-scored
  std::vector<std::uint32_t> i_sep, j_sep;
  std::vector<std::uint32_t> subjects;
};

// Per-segment z-score; applied to every signal entering the encoder.
inline void zscore(const std::vector<float>& in, float* out) {
  double mean = 0;
  for (float v : in) mean += v;
  mean /= static_cast<double>(in.size());
  double var = 0;
  for (float v : in) var += (v - mean) * (v - mean);
  var /= static_cast<double>(in.size());
  const double inv = 1.0 / std::max(std::sqrt(var), 1e-6);
  for (std::size_t i = 0; i < in.size(); ++i)
    out[i] = static_cast<float>((in[i] - mean) * inv);
}

class sampler {
 public:
  explicit sampler(const dataset& ds) : ds_(&ds) { ds.validate(); }

  bool can_sample_pairs() const {
    for (const auto& s : ds_->subjects)
      if (s.segments.size() >= 2) return true;
    return false;
  }
  bool can_sample_triplets(std::uint32_t window) const {
    if (window < 2) return false;
    for (const auto& s : ds_->subjects)
      if (s.segments.size() >= 3) return true;
    return false;
  }

  // window == 0 draws unconstrained same-subject pairs; window > 0 limits
  // |idx1 - idx2| to the window.
  pair_draw sample_pair(rng& r, std::uint32_t window = 0) const {
    for (int attempt = 0; attempt < 10000; ++attempt) {
      const auto si = static_cast<std::uint32_t>(r.below(ds_->subjects.size()));
      const auto& subj = ds_->subjects[si];
      const std::size_t n = subj.segments.size();
      if (n < 2) continue;  // skip, resample
      const auto a = static_cast<std::uint32_t>(r.below(n));
      std::uint32_t b;
      if (window == 0) {
        b = static_cast<std::uint32_t>(r.below(n - 1));
        if (b >= a) ++b;
      } else {
        const std::uint32_t lo = a > window ? a - window : 0;
        const std::uint32_t hi = std::min<std::uint32_t>(static_cast<std::uint32_t>(n) - 1,
                                                         a + window);
        if (hi == lo) continue;
        b = lo + static_cast<std::uint32_t>(r.below(hi - lo));  // [lo, hi) minus a
        if (b >= a) ++b;
      }
      return {subj.subject_id, a, b};
    }
    throw config_error("sample_pair: no subject with at least 2 segments");
  }

  triplet_draw sample_triplet(std::uint32_t window, rng& r) const {
    require(window >= 2, "sample_triplet: window must allow i=1, j=1");
    for (int attempt = 0; attempt < 10000; ++attempt) {
      const auto si = static_cast<std::uint32_t>(r.below(ds_->subjects.size()));
      const auto& subj = ds_->subjects[si];
      const std::size_t n = subj.segments.size();
      if (n < 3) continue;
      const auto t = 1 + static_cast<std::uint32_t>(r.below(n - 2));  // [1, n-2]
      std::vector<std::pair<std::uint32_t, std::uint32_t>> feasible;
      const std::uint32_t imax = std::min<std::uint32_t>(window - 1, t);
      for (std::uint32_t i = 1; i <= imax; ++i) {
        const std::uint32_t jmax =
            std::min<std::uint32_t>(window - i, static_cast<std::uint32_t>(n) - 1 - t);
        for (std::uint32_t j = 1; j <= jmax; ++j) feasible.emplace_back(i, j);
      }
      if (feasible.empty()) continue;
      const auto& [i, j] = feasible[r.below(feasible.size())];
      return {subj.subject_id, t, i, j};
    }
    throw config_error("sample_triplet: no subject admits a window-constrained triplet");
  }

  pair_batch make_pair_batch(std::size_t batch, rng& r) const {
    pair_batch b;
    b.x1 = tensor<float>({batch, ds_->segment_len});
    b.x2 = tensor<float>({batch, ds_->segment_len});
    b.subjects_a.resize(batch);
    b.subjects_b.resize(batch);
    for (std::size_t k = 0; k < batch; ++k) {
      const pair_draw d = sample_pair(r);
      const auto& subj = subject_by_id(d.subject);
      zscore(subj.segments[d.idx1].samples, b.x1.ptr() + k * ds_->segment_len);
      zscore(subj.segments[d.idx2].samples, b.x2.ptr() + k * ds_->segment_len);
      b.subjects_a[k] = d.subject;
      b.subjects_b[k] = d.subject;
    }
    return b;
  }

  triplet_batch make_triplet_batch(std::size_t batch, std::uint32_t window, rng& r) const {
    triplet_batch b;
    b.x_before = tensor<float>({batch, ds_->segment_len});
    b.x_mid = tensor<float>({batch, ds_->segment_len});
    b.x_after = tensor<float>({batch, ds_->segment_len});
    b.i_sep.resize(batch);
    b.j_sep.resize(batch);
    b.subjects.resize(batch);
    for (std::size_t k = 0; k < batch; ++k) {
      const triplet_draw d = sample_triplet(window, r);
      const auto& subj = subject_by_id(d.subject);
      zscore(subj.segments[d.t - d.i].samples, b.x_before.ptr() + k * ds_->segment_len);
      zscore(subj.segments[d.t].samples, b.x_mid.ptr() + k * ds_->segment_len);
      zscore(subj.segments[d.t + d.j].samples, b.x_after.ptr() + k * ds_->segment_len);
      b.i_sep[k] = d.i;
      b.j_sep[k] = d.j;
      b.subjects[k] = d.subject;
    }
    return b;
  }

  const subject_record& subject_by_id(std::uint32_t id) const {
    for (const auto& s : ds_->subjects)
      if (s.subject_id == id) return s;
    throw data_error("sampler: unknown subject id");
  }

 private:
  const dataset* ds_;
};

}  // namespace debs
