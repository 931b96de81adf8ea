#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "ordgaze/synth.hpp"

namespace ordgaze {
namespace {

namespace fs = std::filesystem;

SynthConfig small_config() {
  SynthConfig c;
  c.train_subjects = 4;
  c.val_subjects = 2;
  c.test_subjects = 2;
  c.samples_per_subject = 20;
  c.patch_size = 16;
  c.sequence_points = 3;
  c.sequence_frames = 5;
  return c;
}

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("ordgaze_synth_" + name);
  fs::remove_all(p);
  return p;
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

double ks_uniform(std::vector<double> v, double lo, double hi) {
  std::sort(v.begin(), v.end());
  const double n = static_cast<double>(v.size());
  double d = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double f = (v[i] - lo) / (hi - lo);
    d = std::max({d, std::abs((i + 1) / n - f), std::abs(f - i / n)});
  }
  return d;
}

TEST(Synth, SameSeedGivesByteIdenticalFiles) {
  auto cfg = small_config();
  auto a = generate(cfg);
  generate_sequences(a, {});
  auto b = generate(cfg);
  generate_sequences(b, {});
  const auto da = temp_dir("det_a"), db = temp_dir("det_b");
  write_dataset(da, a);
  write_dataset(db, b);
  for (const char* f : {"header", "index.tsv", "data.bin", "sequences.tsv"})
    EXPECT_EQ(slurp(da / f), slurp(db / f)) << f;
  cfg.seed = 2;
  auto c = generate(cfg);
  EXPECT_NE(a.records[0].pixels, c.records[0].pixels);
}

TEST(Synth, GtIsUniformOverScreen) {
  SynthConfig cfg;
  cfg.patch_size = 8;
  cfg.train_subjects = 40;
  cfg.val_subjects = 0;
  cfg.test_subjects = 0;
  cfg.samples_per_subject = 250;
  auto ds = generate(cfg);
  ASSERT_EQ(ds.records.size(), 10000u);
  std::vector<double> xs, ys;
  for (const auto& r : ds.records) {
    EXPECT_GE(r.gt_x, 0.f);
    EXPECT_LE(r.gt_x, 10.f);
    EXPECT_GE(r.gt_y, 0.f);
    EXPECT_LE(r.gt_y, 14.f);
    xs.push_back(r.gt_x);
    ys.push_back(r.gt_y);
  }
  EXPECT_LT(ks_uniform(xs, 0, 10), 0.05);
  EXPECT_LT(ks_uniform(ys, 0, 14), 0.05);
}

TEST(Synth, SplitsAreSubjectDisjoint) {
  auto ds = generate(small_config());
  std::array<std::set<int>, 3> subjects;
  for (const auto& r : ds.records) subjects[static_cast<int>(r.split)].insert(r.subject);
  for (int a = 0; a < 3; ++a)
    for (int b = a + 1; b < 3; ++b) {
      std::vector<int> both;
      std::set_intersection(subjects[a].begin(), subjects[a].end(), subjects[b].begin(),
                            subjects[b].end(), std::back_inserter(both));
      EXPECT_TRUE(both.empty());
    }
  EXPECT_EQ(subjects[0].size(), 4u);
  EXPECT_EQ(subjects[1].size(), 2u);
  EXPECT_EQ(subjects[2].size(), 2u);
}

TEST(Synth, NoiselessSequencesHaveIdenticalFrames) {
  auto ds = generate(small_config());
  generate_sequences(ds, {.noise_std = 0.0, .max_shift_px = 0.0, .noise_seed = 3});
  ASSERT_EQ(ds.sequences.size(), 2u * 3u);
  for (const auto& s : ds.sequences) {
    ASSERT_EQ(s.frames.size(), 5u);
    for (auto f : s.frames) {
      EXPECT_EQ(ds.records[f].pixels, ds.records[s.frames[0]].pixels);
      EXPECT_EQ(ds.records[f].sequence, s.id);
      EXPECT_FLOAT_EQ(ds.records[f].gt_x, static_cast<float>(s.gt_x));
    }
  }
}

TEST(Synth, SequenceSeedsChangeNoiseNotPoints) {
  auto a = generate(small_config());
  auto b = a;
  generate_sequences(a, {.noise_std = 8.0, .max_shift_px = 1.0, .noise_seed = 1});
  generate_sequences(b, {.noise_std = 8.0, .max_shift_px = 1.0, .noise_seed = 2});
  ASSERT_EQ(a.sequences.size(), b.sequences.size());
  for (std::size_t i = 0; i < a.sequences.size(); ++i) {
    EXPECT_EQ(a.sequences[i].gt_x, b.sequences[i].gt_x);
    EXPECT_EQ(a.sequences[i].gt_y, b.sequences[i].gt_y);
    EXPECT_NE(a.records[a.sequences[i].frames[0]].pixels,
              b.records[b.sequences[i].frames[0]].pixels);
  }
  // Regenerating replaces, not appends.
  generate_sequences(a, {});
  EXPECT_EQ(a.indices(Split::Sequence).size(), 2u * 3u * 5u);
}

TEST(Synth, RoundTripIsLossless) {
  auto ds = generate(small_config());
  generate_sequences(ds, {});
  const auto dir = temp_dir("roundtrip");
  write_dataset(dir, ds);
  auto back = read_dataset(dir);
  ASSERT_EQ(back.records.size(), ds.records.size());
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    EXPECT_EQ(back.records[i].pixels, ds.records[i].pixels);
    EXPECT_EQ(back.records[i].gt_x, ds.records[i].gt_x);
    EXPECT_EQ(back.records[i].gt_y, ds.records[i].gt_y);
    EXPECT_EQ(back.records[i].subject, ds.records[i].subject);
    EXPECT_EQ(back.records[i].sequence, ds.records[i].sequence);
    EXPECT_EQ(back.records[i].split, ds.records[i].split);
  }
  ASSERT_EQ(back.sequences.size(), ds.sequences.size());
  for (std::size_t i = 0; i < ds.sequences.size(); ++i) {
    EXPECT_EQ(back.sequences[i].frames, ds.sequences[i].frames);
    EXPECT_EQ(back.sequences[i].gt_x, ds.sequences[i].gt_x);
  }
  EXPECT_EQ(synth_detail::config_fields(back.config), synth_detail::config_fields(ds.config));
}

TEST(Synth, CorruptIndexNamesRecord) {
  auto ds = generate(small_config());
  const auto dir = temp_dir("corrupt");
  write_dataset(dir, ds);
  {
    std::ofstream idx(dir / "index.tsv");
    idx << "record_id\tsplit\toffset\tsubject_id\tsequence_id\n0\ttrain\t0\t0\t-1\n1\tbogus\n";
  }
  try {
    read_dataset(dir);
    FAIL() << "expected DatasetError";
  } catch (const DatasetError& e) {
    EXPECT_NE(std::string(e.what()).find("record 1"), std::string::npos) << e.what();
  }
}

TEST(Synth, BatchCountAndLabels) {
  auto ds = generate(small_config());
  const auto [xc, yc] = codecs_for(ds.config, 72, 98);
  BatchSchedule sched(ds.indices(Split::Train), 32);
  EXPECT_EQ(sched.batch_count(), (80u + 31u) / 32u);
  std::mt19937_64 rng(5);
  sched.shuffle(rng);
  std::size_t seen = 0;
  for (std::size_t k = 0; k < sched.batch_count(); ++k) {
    auto b = make_batch<double>(ds, sched.batch(k), xc, yc);
    seen += b.size();
    EXPECT_EQ(b.face.shape(), (Shape{b.size(), 3, 16, 16}));
    for (std::size_t i = 0; i < b.size(); ++i) {
      const auto& r = ds.records[b.records[i]];
      auto ex = encode<double>(r.gt_x, xc), ey = encode<double>(r.gt_y, yc);
      ex.insert(ex.end(), ey.begin(), ey.end());
      EXPECT_TRUE(std::equal(ex.begin(), ex.end(), b.labels.begin() + i * 170));
      EXPECT_EQ(b.left[i * 768 + 5], r.pixels[768 + 5] / 255.0);
    }
  }
  EXPECT_EQ(seen, 80u);
}

// Centroid of weights over a P x P plane (channel-averaged gray).
std::array<double, 2> centroid(const std::uint8_t* patch, std::size_t P, std::size_t C,
                               auto weight) {
  double sx = 0, sy = 0, sw = 0;
  for (std::size_t y = 0; y < P; ++y)
    for (std::size_t x = 0; x < P; ++x) {
      double g = 0;
      for (std::size_t c = 0; c < C; ++c) g += patch[c * P * P + y * P + x];
      const double w = weight(g / (C * 255.0));
      sx += w * (x + 0.5);
      sy += w * (y + 0.5);
      sw += w;
    }
  return {sx / sw, sy / sw};
}

double corner_gray(const std::uint8_t* patch, std::size_t P, std::size_t C) {
  double g = 0;
  for (std::size_t c = 0; c < C; ++c) g += patch[c * P * P];
  return g / (C * 255.0);
}

// Centroid features measured from the images alone.
Eigen::VectorXd probe_features(const Record& r, std::size_t P, std::size_t C) {
  const std::size_t pv = C * P * P;
  Eigen::VectorXd f(7);
  const auto* face = r.pixels.data();
  const double bg = corner_gray(face, P, C);
  auto fc = centroid(face, P, C, [&](double g) { return std::abs(g - bg) > 0.1 ? 1.0 : 0.0; });
  f << fc[0], fc[1], 0, 0, 0, 0, 1;
  for (int eye = 0; eye < 2; ++eye) {
    const auto* p = r.pixels.data() + (1 + eye) * pv;
    const double skin = corner_gray(p, P, C);
    auto socket = centroid(p, P, C, [&](double g) { return std::abs(g - skin) > 0.1 ? 1.0 : 0.0; });
    auto pupil = centroid(p, P, C, [](double g) { return std::max(0.0, 0.3 - g); });
    f[2 + 2 * eye] = pupil[0] - socket[0];
    f[3 + 2 * eye] = pupil[1] - socket[1];
  }
  return f;
}

TEST(Synth, LinearProbeOnCentroidsIsAccurate) {
  SynthConfig cfg;
  cfg.patch_size = 32;
  cfg.noise_std = 0.0;
  cfg.samples_per_subject = 100;
  auto ds = generate(cfg);
  const auto train = ds.indices(Split::Train), test = ds.indices(Split::Test);
  Eigen::MatrixXd A(train.size(), 7);
  Eigen::MatrixXd Y(train.size(), 2);
  for (std::size_t i = 0; i < train.size(); ++i) {
    A.row(i) = probe_features(ds.records[train[i]], 32, 3);
    Y.row(i) << ds.records[train[i]].gt_x, ds.records[train[i]].gt_y;
  }
  Eigen::MatrixXd W = A.colPivHouseholderQr().solve(Y);
  double err = 0;
  for (auto id : test) {
    Eigen::RowVectorXd pred = probe_features(ds.records[id], 32, 3).transpose() * W;
    err += std::hypot(pred[0] - ds.records[id].gt_x, pred[1] - ds.records[id].gt_y);
  }
  err /= static_cast<double>(test.size());
  EXPECT_LT(err, 0.2);
}

}  // namespace
}  // namespace ordgaze
