#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

#include "debs/data.hpp"
#include "debs/records.hpp"

using namespace debs;

namespace {

generator_spec small_spec() {
  generator_spec s;
  s.n_subjects = 6;
  s.segments_per_subject = 40;
  return s;
}

// Test-side oracle: crude R-peak detector + inter-beat-interval variability
// threshold, applied to the raw signal only. Independent of the generator's
// bookkeeping.
std::vector<double> detect_beats(const std::vector<float>& x, double rate) {
  float mx = x[0], mean = 0;
  for (float v : x) {
    mx = std::max(mx, v);
    mean += v;
  }
  mean /= static_cast<float>(x.size());
  const float thresh = mean + 0.55f * (mx - mean);
  const auto refractory = static_cast<std::size_t>(0.3 * rate);
  std::vector<double> beats;
  std::size_t last = 0;
  for (std::size_t i = 1; i + 1 < x.size(); ++i) {
    if (x[i] >= thresh && x[i] >= x[i - 1] && x[i] >= x[i + 1] &&
        (beats.empty() || i - last >= refractory)) {
      beats.push_back(static_cast<double>(i) / rate);
      last = i;
    }
  }
  return beats;
}

bool classify_event_by_rr(const std::vector<float>& samples, double rate) {
  const auto beats = detect_beats(samples, rate);
  if (beats.size() < 3) return false;
  std::vector<double> rr(beats.size() - 1);
  for (std::size_t k = 0; k + 1 < beats.size(); ++k) rr[k] = beats[k + 1] - beats[k];
  double m = 0;
  for (double v : rr) m += v;
  m /= static_cast<double>(rr.size());
  double var = 0;
  for (double v : rr) var += (v - m) * (v - m);
  var /= static_cast<double>(rr.size());
  return std::sqrt(var) / m > 0.12;
}

}  // namespace

TEST(Generator, DeterministicPerSeed) {
  auto a = generate_subject(42, 3, small_spec());
  auto b = generate_subject(42, 3, small_spec());
  EXPECT_EQ(a.record, b.record);
  EXPECT_EQ(a.segment_rr_cv, b.segment_rr_cv);
  auto c = generate_subject(43, 3, small_spec());
  EXPECT_NE(a.record, c.record);
}

TEST(Generator, NoEventsMeansAllNormal) {
  auto spec = small_spec();
  spec.with_events = false;
  auto g = generate_subject(7, 0, spec);
  EXPECT_TRUE(g.record.factors.events.empty());
  for (const auto& seg : g.record.segments) EXPECT_EQ(seg.event_label, label_normal);
}

TEST(Generator, EventSegmentsHaveHigherRrVariance) {
  const auto subjects = generate_subjects(small_spec(), 11);
  for (const auto& g : subjects) {
    float max_normal = 0.f, min_event = 1e9f;
    bool saw_event = false;
    for (const auto& seg : g.record.segments) {
      const float cv = g.segment_rr_cv[seg.segment_index];
      if (cv == 0.f) continue;
      if (seg.event_label == label_event) {
        saw_event = true;
        min_event = std::min(min_event, cv);
      } else {
        max_normal = std::max(max_normal, cv);
      }
    }
    ASSERT_TRUE(saw_event);
    EXPECT_GT(min_event, max_normal) << "subject " << g.record.subject_id;
  }
}

TEST(Generator, RrThresholdDetectorRecoversLabels) {
  const auto spec = small_spec();
  const auto subjects = generate_subjects(spec, 19);
  std::size_t correct = 0, total = 0;
  for (const auto& g : subjects)
    for (const auto& seg : g.record.segments) {
      const bool pred = classify_event_by_rr(seg.samples, spec.sampling_rate);
      correct += (pred == (seg.event_label == label_event)) ? 1 : 0;
      ++total;
    }
  const double acc = static_cast<double>(correct) / static_cast<double>(total);
  EXPECT_GT(acc, 0.95) << "detector accuracy " << acc;
}

TEST(Sampler, PairsAreSameSubjectAndDistinct) {
  const auto ds = generate_dataset(small_spec(), 23);
  sampler s(ds);
  rng r(5);
  for (int k = 0; k < 10000; ++k) {
    const auto d = s.sample_pair(r);
    EXPECT_NE(d.idx1, d.idx2);
    const auto& subj = s.subject_by_id(d.subject);
    EXPECT_EQ(subj.segments[d.idx1].subject_id, subj.segments[d.idx2].subject_id);
  }
}

TEST(Sampler, PairSubjectDistributionUniform) {
  auto spec = small_spec();
  spec.n_subjects = 8;
  const auto ds = generate_dataset(spec, 29);
  sampler s(ds);
  rng r(6);
  const int draws = 10000;
  std::vector<int> counts(spec.n_subjects, 0);
  for (int k = 0; k < draws; ++k) ++counts[s.sample_pair(r).subject];
  const double expected = static_cast<double>(draws) / spec.n_subjects;
  double chi2 = 0;
  for (int c : counts) chi2 += (c - expected) * (c - expected) / expected;
  const double df = spec.n_subjects - 1;
  EXPECT_LT(chi2, df + 3.0 * std::sqrt(2.0 * df));
}

TEST(Sampler, SingleSegmentSubjectsAreSkipped) {
  dataset ds;
  ds.segment_len = 4;
  subject_record one{0, {}, {segment{0, 0, 0, {1, 2, 3, 4}}}};
  subject_record two{1,
                     {},
                     {segment{1, 0, 0, {1, 2, 3, 4}}, segment{1, 1, 0, {4, 3, 2, 1}}}};
  ds.subjects = {one, two};
  sampler s(ds);
  rng r(7);
  for (int k = 0; k < 200; ++k) EXPECT_EQ(s.sample_pair(r).subject, 1u);
}

TEST(Sampler, TripletWindowTwoForcesUnitSeparations) {
  const auto ds = generate_dataset(small_spec(), 31);
  sampler s(ds);
  rng r(8);
  for (int k = 0; k < 500; ++k) {
    const auto d = s.sample_triplet(2, r);
    EXPECT_EQ(d.i, 1u);
    EXPECT_EQ(d.j, 1u);
  }
}

TEST(Sampler, TripletBoundsHold) {
  const auto ds = generate_dataset(small_spec(), 37);
  sampler s(ds);
  rng r(9);
  const std::uint32_t window = 15;
  for (int k = 0; k < 10000; ++k) {
    const auto d = s.sample_triplet(window, r);
    EXPECT_GE(d.i, 1u);
    EXPECT_GE(d.j, 1u);
    EXPECT_LE(d.i + d.j, window);
    EXPECT_GE(d.t, d.i);  // t - i >= 0
    const auto& subj = s.subject_by_id(d.subject);
    EXPECT_LT(d.t + d.j, subj.segments.size());
  }
}

TEST(Sampler, DefaultWindowMatchesTwoMinutes) {
  dataset ds = generate_dataset(small_spec(), 41);
  // 15 segments x 8 s = 120 s
  EXPECT_DOUBLE_EQ(ds.segment_seconds(), 8.0);
  EXPECT_DOUBLE_EQ(15 * ds.segment_seconds(), 120.0);
}

TEST(Sampler, NoTripletPositionsIsConfigError) {
  dataset ds;
  ds.segment_len = 4;
  ds.subjects = {subject_record{
      0, {}, {segment{0, 0, 0, {1, 2, 3, 4}}, segment{0, 1, 0, {1, 2, 3, 4}}}}};
  sampler s(ds);
  rng r(10);
  EXPECT_FALSE(s.can_sample_triplets(15));
  EXPECT_THROW(s.sample_triplet(15, r), config_error);
}

TEST(Records, RoundTripIsIdentity) {
  const auto ds = generate_dataset(small_spec(), 47);
  const std::string path = std::filesystem::temp_directory_path() / "debs_roundtrip.bin";
  write_records(ds, path);
  const auto back = load_records(path);
  EXPECT_EQ(ds, back);
  std::remove(path.c_str());
}

TEST(Records, CorruptedByteIsChecksumError) {
  auto spec = small_spec();
  spec.n_subjects = 2;
  spec.segments_per_subject = 4;
  auto bytes = serialize_records(generate_dataset(spec, 53));
  bytes[bytes.size() / 2] ^= 0x40;
  try {
    parse_records(bytes);
    FAIL() << "expected checksum error";
  } catch (const record_error& e) {
    EXPECT_EQ(e.fault, record_fault::bad_checksum);
  }
}

TEST(Records, TruncationDetected) {
  auto spec = small_spec();
  spec.n_subjects = 2;
  spec.segments_per_subject = 4;
  auto bytes = serialize_records(generate_dataset(spec, 59));
  bytes.resize(bytes.size() / 2);
  try {
    parse_records(bytes);
    FAIL() << "expected truncation or checksum error";
  } catch (const record_error& e) {
    EXPECT_TRUE(e.fault == record_fault::truncated || e.fault == record_fault::bad_checksum);
  }
}

TEST(Records, BadMagicAndVersionAreDistinct) {
  auto bytes = serialize_records(dataset{});
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  try {
    parse_records(bad_magic);
    FAIL();
  } catch (const record_error& e) {
    EXPECT_EQ(e.fault, record_fault::bad_magic);
  }
  auto bad_version = bytes;
  bad_version[4] = 99;  // version field
  // re-seal checksum so the version check is what fires
  const std::uint32_t crc = crc32(bad_version.data() + 4, bad_version.size() - 8);
  std::memcpy(bad_version.data() + bad_version.size() - 4, &crc, 4);
  try {
    parse_records(bad_version);
    FAIL();
  } catch (const record_error& e) {
    EXPECT_EQ(e.fault, record_fault::bad_version);
  }
}

TEST(Records, EmptyDatasetIsValid) {
  dataset empty;
  const auto bytes = serialize_records(empty);
  const auto back = parse_records(bytes);
  EXPECT_EQ(back.subjects.size(), 0u);
  EXPECT_EQ(back, empty);
}

TEST(Records, CsvImport) {
  const std::string path = std::filesystem::temp_directory_path() / "debs_import.csv";
  {
    std::ofstream f(path);
    f << "subject_id,segment_index,label,s0,s1,s2,s3\n";
    f << "7,0,0,0.5,1.5,-0.25,0\n";
    f << "7,1,1,1,2,3,4\n";
    f << "9,0,0,0,0,0,1\n";
  }
  const auto ds = load_records_csv(path, 2);
  ASSERT_EQ(ds.subjects.size(), 2u);
  EXPECT_EQ(ds.segment_len, 4u);
  EXPECT_EQ(ds.subjects[0].subject_id, 7u);
  ASSERT_EQ(ds.subjects[0].segments.size(), 2u);
  EXPECT_EQ(ds.subjects[0].segments[1].event_label, label_event);
  EXPECT_FLOAT_EQ(ds.subjects[0].segments[0].samples[1], 1.5f);
  std::remove(path.c_str());
}
