#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ordgaze/ordinal.hpp"
#include "ordgaze/tensor.hpp"

namespace ordgaze {

enum class Split : std::uint8_t { Train = 0, Val = 1, Test = 2, Sequence = 3 };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
    case Split::Sequence: return "seq";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  if (s == "seq") return Split::Sequence;
  throw std::invalid_argument("unknown split '" + s + "'");
}

/// Parameters of the synthetic gaze-like generator. Pixel noise is in [0,255]
/// units; lengths are in cm unless marked _px.
struct SynthConfig {
  std::size_t train_subjects = 20;
  std::size_t val_subjects = 4;
  std::size_t test_subjects = 4;
  std::size_t samples_per_subject = 250;
  double screen_width_cm = 10.0;
  double screen_height_cm = 14.0;
  std::size_t patch_size = 64;
  std::size_t channels = 3;
  double noise_std = 2.0;          // pixel noise on ordinary samples
  double label_noise_cm = 0.0;     // train split only: recorded gt = rendered gaze + N(0, sigma)
  double socket_radius = 0.40;     // fraction of patch size
  double pupil_radius = 0.09;
  double pupil_gain = 0.14;        // pupil travel per unit normalized gaze
  double head_coupling = 0.4;      // gaze offset per unit head displacement
  double face_travel = 0.15;       // face blob travel per unit head displacement
  double intensity_contrast = 1.0; // scales all blob/background contrast
  // Fixation sequences, rendered for the test subjects.
  std::size_t sequence_points = 8;
  std::size_t sequence_frames = 32;
  double sequence_noise_std = 8.0;
  double sequence_max_shift_px = 1.0;
  std::uint64_t seed = 1;

  std::size_t n_subjects() const { return train_subjects + val_subjects + test_subjects; }

  void validate() const {
    if (!(screen_width_cm > 0 && screen_height_cm > 0))
      throw std::invalid_argument("synth: screen range must be positive");
    if (noise_std < 0 || sequence_noise_std < 0 || label_noise_cm < 0)
      throw std::invalid_argument("synth: noise must be >= 0");
    if (patch_size < 4 || channels == 0) throw std::invalid_argument("synth: bad patch shape");
    if (train_subjects == 0 || samples_per_subject == 0)
      throw std::invalid_argument("synth: need at least one training sample");
  }
};

struct Record {
  std::vector<std::uint8_t> pixels;  // face, left, right; each C x P x P
  float gt_x = 0.f;
  float gt_y = 0.f;
  std::int32_t subject = 0;
  std::int32_t sequence = -1;
  Split split = Split::Train;
};

struct SequenceInfo {
  std::int32_t id = 0;
  double gt_x = 0.0;
  double gt_y = 0.0;
  std::vector<std::size_t> frames;  // record ids
};

/// Rendered blob geometry of one sample in pixel coordinates (not persisted).
struct RenderInfo {
  std::array<double, 2> face{};
  std::array<double, 2> left_socket{}, left_pupil{};
  std::array<double, 2> right_socket{}, right_pupil{};
};

struct Dataset {
  SynthConfig config;
  std::vector<Record> records;
  std::vector<SequenceInfo> sequences;
  std::vector<RenderInfo> render;  // parallel to records when freshly generated

  std::size_t patch_size() const { return config.patch_size; }
  std::size_t channels() const { return config.channels; }
  std::size_t patch_values() const { return config.channels * config.patch_size * config.patch_size; }

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < records.size(); ++i)
      if (records[i].split == s) out.push_back(i);
    return out;
  }
};

namespace synth_detail {

struct Disk {
  double cx, cy, r;
  double gray;
};

struct Subject {
  double background;
  double skin;
  std::array<double, 3> tint;
  double socket_dx, socket_dy;
  double pupil_scale;
};

inline Subject make_subject(const SynthConfig& cfg, std::size_t subject) {
  std::mt19937_64 rng(cfg.seed * 0x9E3779B97F4A7C15ull + 7919 * subject + 1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Subject s;
  s.background = 0.10 + 0.20 * u(rng);
  s.skin = 0.45 + 0.25 * u(rng);
  for (auto& t : s.tint) t = 0.8 + 0.4 * u(rng);
  const double P = static_cast<double>(cfg.patch_size);
  s.socket_dx = (u(rng) - 0.5) * 0.10 * P;
  s.socket_dy = (u(rng) - 0.5) * 0.10 * P;
  s.pupil_scale = 0.85 + 0.3 * u(rng);
  return s;
}

// Supersampled painter's-algorithm rendering of layered disks into u8.
inline void render_patch(const SynthConfig& cfg, const Subject& subj, double base,
                         const std::vector<Disk>& disks, std::mt19937_64& rng,
                         double noise_std, std::uint8_t* out) {
  constexpr int kSS = 4;
  const std::size_t P = cfg.patch_size;
  std::vector<double> gray(P * P);
  for (std::size_t y = 0; y < P; ++y)
    for (std::size_t x = 0; x < P; ++x) {
      double acc = 0.0;
      for (int sy = 0; sy < kSS; ++sy)
        for (int sx = 0; sx < kSS; ++sx) {
          const double px = static_cast<double>(x) + (sx + 0.5) / kSS;
          const double py = static_cast<double>(y) + (sy + 0.5) / kSS;
          double v = base;
          for (const auto& d : disks) {
            const double dx = px - d.cx, dy = py - d.cy;
            if (dx * dx + dy * dy <= d.r * d.r) v = d.gray;
          }
          acc += v;
        }
      gray[y * P + x] = acc / (kSS * kSS);
    }
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t c = 0; c < cfg.channels; ++c) {
    const double tint = cfg.channels == 3 ? subj.tint[c] : 1.0;
    for (std::size_t i = 0; i < P * P; ++i) {
      const double g = 0.5 + (gray[i] * tint - 0.5) * cfg.intensity_contrast;
      double v = g * 255.0;
      if (noise_std > 0) v += noise_std * noise(rng);
      out[c * P * P + i] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    }
  }
}

struct Pose {
  double gaze_x_cm, gaze_y_cm;  // rendered (true) gaze
  double head_x, head_y;        // in [-1, 1]
};

// Renders face/left/right for one pose. `shift` translates all blobs of each
// patch (fixation jitter); `noise_std` is in [0,255] units.
inline RenderInfo render_sample(const SynthConfig& cfg, const Subject& subj, const Pose& pose,
                                const std::array<std::array<double, 2>, 3>& shift,
                                double noise_std, std::mt19937_64& rng, std::uint8_t* out) {
  const double P = static_cast<double>(cfg.patch_size);
  const double c = P / 2.0;
  const std::size_t per_patch = cfg.channels * cfg.patch_size * cfg.patch_size;
  const double u_x = 2.0 * pose.gaze_x_cm / cfg.screen_width_cm - 1.0;
  const double u_y = 2.0 * pose.gaze_y_cm / cfg.screen_height_cm - 1.0;
  RenderInfo info;

  // Face: head displacement moves the face blob.
  const double fx = c + cfg.face_travel * P * pose.head_x + shift[0][0];
  const double fy = c + cfg.face_travel * P * pose.head_y + shift[0][1];
  info.face = {fx, fy};
  std::vector<Disk> face{{fx, fy, 0.30 * P, subj.skin},
                         {fx - 0.11 * P, fy - 0.05 * P, 0.05 * P, 0.05},
                         {fx + 0.11 * P, fy - 0.05 * P, 0.05 * P, 0.05}};
  render_patch(cfg, subj, subj.background, face, rng, noise_std, out);

  // Eyes: pupil offset inside the socket encodes gaze minus the head term.
  const double ex = u_x - cfg.head_coupling * pose.head_x;
  const double ey = u_y - cfg.head_coupling * pose.head_y;
  for (int eye = 0; eye < 2; ++eye) {
    const auto& sh = shift[1 + eye];
    const double sx = c + subj.socket_dx + sh[0];
    const double sy = c + subj.socket_dy + sh[1];
    const double px = sx + cfg.pupil_gain * P * ex;
    const double py = sy + cfg.pupil_gain * P * ey;
    std::vector<Disk> disks{{sx, sy, cfg.socket_radius * P, 0.95},
                            {px, py, cfg.pupil_radius * P * subj.pupil_scale, 0.05}};
    render_patch(cfg, subj, subj.skin, disks, rng, noise_std, out + (1 + eye) * per_patch);
    if (eye == 0) {
      info.left_socket = {sx, sy};
      info.left_pupil = {px, py};
    } else {
      info.right_socket = {sx, sy};
      info.right_pupil = {px, py};
    }
  }
  return info;
}

inline Pose sample_pose(const SynthConfig& cfg, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> ux(0.0, cfg.screen_width_cm);
  std::uniform_real_distribution<double> uy(0.0, cfg.screen_height_cm);
  std::uniform_real_distribution<double> uh(-1.0, 1.0);
  Pose p;
  p.gaze_x_cm = ux(rng);
  p.gaze_y_cm = uy(rng);
  p.head_x = uh(rng);
  p.head_y = uh(rng);
  return p;
}

// Fixed fixation targets: a 3x3 grid without its centre, extended by the
// centre and edge midpoints if more points are requested.
inline std::vector<std::array<double, 2>> fixation_points(const SynthConfig& cfg) {
  std::vector<std::array<double, 2>> grid;
  const std::array<double, 3> fr{0.2, 0.5, 0.8};
  for (double fy : fr)
    for (double fx : fr)
      if (!(fx == 0.5 && fy == 0.5)) grid.push_back({fx, fy});
  grid.push_back({0.5, 0.5});
  for (double f : {0.35, 0.65})
    for (double g : {0.35, 0.65}) grid.push_back({f, g});
  std::vector<std::array<double, 2>> out;
  for (std::size_t i = 0; i < cfg.sequence_points; ++i) {
    const auto& g = grid[i % grid.size()];
    out.push_back({g[0] * cfg.screen_width_cm, g[1] * cfg.screen_height_cm});
  }
  return out;
}

}  // namespace synth_detail

/// Renders the subject-disjoint train/val/test splits.
inline Dataset generate(const SynthConfig& cfg) {
  cfg.validate();
  Dataset ds;
  ds.config = cfg;
  const std::size_t per_sample = 3 * cfg.channels * cfg.patch_size * cfg.patch_size;
  std::normal_distribution<double> label_noise(0.0, 1.0);
  const std::array<std::array<double, 2>, 3> no_shift{};
  for (std::size_t s = 0; s < cfg.n_subjects(); ++s) {
    const Split split = s < cfg.train_subjects                      ? Split::Train
                        : s < cfg.train_subjects + cfg.val_subjects ? Split::Val
                                                                    : Split::Test;
    const auto subj = synth_detail::make_subject(cfg, s);
    std::mt19937_64 rng(cfg.seed * 1000003ull + 31 * s + 17);
    for (std::size_t i = 0; i < cfg.samples_per_subject; ++i) {
      const auto pose = synth_detail::sample_pose(cfg, rng);
      Record r;
      r.pixels.resize(per_sample);
      r.subject = static_cast<std::int32_t>(s);
      r.split = split;
      const auto info = synth_detail::render_sample(cfg, subj, pose, no_shift, cfg.noise_std, rng,
                                                    r.pixels.data());
      double gx = pose.gaze_x_cm, gy = pose.gaze_y_cm;
      if (cfg.label_noise_cm > 0 && split == Split::Train) {
        gx = std::clamp(gx + cfg.label_noise_cm * label_noise(rng), 0.0, cfg.screen_width_cm);
        gy = std::clamp(gy + cfg.label_noise_cm * label_noise(rng), 0.0, cfg.screen_height_cm);
      }
      r.gt_x = static_cast<float>(gx);
      r.gt_y = static_cast<float>(gy);
      ds.records.push_back(std::move(r));
      ds.render.push_back(info);
    }
  }
  return ds;
}

struct SequenceOptions {
  double noise_std = 8.0;
  double max_shift_px = 1.0;
  std::uint64_t noise_seed = 1;
};

/// Appends fixation sequences for the test subjects: one gt point per
/// sequence, frames = base rendering + Gaussian pixel noise + a uniform
/// translation of at most max_shift_px per patch.
inline void generate_sequences(Dataset& ds, const SequenceOptions& opt) {
  const auto& cfg = ds.config;
  if (opt.noise_std < 0 || opt.max_shift_px < 0)
    throw std::invalid_argument("sequences: noise and shift must be >= 0");
  std::erase_if(ds.records, [](const Record& r) { return r.split == Split::Sequence; });
  ds.render.resize(std::min(ds.render.size(), ds.records.size()));
  ds.sequences.clear();
  const std::size_t per_sample = 3 * cfg.channels * cfg.patch_size * cfg.patch_size;
  const auto points = synth_detail::fixation_points(cfg);
  const std::size_t first_test = cfg.train_subjects + cfg.val_subjects;
  std::int32_t next_id = 0;
  for (std::size_t s = first_test; s < cfg.n_subjects(); ++s) {
    const auto subj = synth_detail::make_subject(cfg, s);
    std::mt19937_64 rng(opt.noise_seed * 2654435761ull + 104729 * s + 3);
    std::uniform_real_distribution<double> uh(-1.0, 1.0);
    std::uniform_real_distribution<double> ushift(-opt.max_shift_px, opt.max_shift_px);
    for (const auto& pt : points) {
      SequenceInfo seq;
      seq.id = next_id++;
      seq.gt_x = pt[0];
      seq.gt_y = pt[1];
      const synth_detail::Pose pose{pt[0], pt[1], uh(rng) * 0.5, uh(rng) * 0.5};
      for (std::size_t f = 0; f < cfg.sequence_frames; ++f) {
        std::array<std::array<double, 2>, 3> shift{};
        if (opt.max_shift_px > 0)
          for (auto& sh : shift) sh = {ushift(rng), ushift(rng)};
        Record r;
        r.pixels.resize(per_sample);
        r.subject = static_cast<std::int32_t>(s);
        r.sequence = seq.id;
        r.split = Split::Sequence;
        r.gt_x = static_cast<float>(pt[0]);
        r.gt_y = static_cast<float>(pt[1]);
        const auto info =
            synth_detail::render_sample(cfg, subj, pose, shift, opt.noise_std, rng, r.pixels.data());
        seq.frames.push_back(ds.records.size());
        if (ds.render.size() == ds.records.size()) ds.render.push_back(info);
        ds.records.push_back(std::move(r));
      }
      ds.sequences.push_back(std::move(seq));
    }
  }
}

// ------------------------------------------------------------------ storage

inline constexpr int kDatasetVersion = 1;

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace synth_detail {

inline std::map<std::string, std::string> config_fields(const SynthConfig& c) {
  auto d = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  return {{"train_subjects", std::to_string(c.train_subjects)},
          {"val_subjects", std::to_string(c.val_subjects)},
          {"test_subjects", std::to_string(c.test_subjects)},
          {"samples_per_subject", std::to_string(c.samples_per_subject)},
          {"screen_width_cm", d(c.screen_width_cm)},
          {"screen_height_cm", d(c.screen_height_cm)},
          {"patch_size", std::to_string(c.patch_size)},
          {"channels", std::to_string(c.channels)},
          {"noise_std", d(c.noise_std)},
          {"label_noise_cm", d(c.label_noise_cm)},
          {"socket_radius", d(c.socket_radius)},
          {"pupil_radius", d(c.pupil_radius)},
          {"pupil_gain", d(c.pupil_gain)},
          {"head_coupling", d(c.head_coupling)},
          {"face_travel", d(c.face_travel)},
          {"intensity_contrast", d(c.intensity_contrast)},
          {"sequence_points", std::to_string(c.sequence_points)},
          {"sequence_frames", std::to_string(c.sequence_frames)},
          {"sequence_noise_std", d(c.sequence_noise_std)},
          {"sequence_max_shift_px", d(c.sequence_max_shift_px)},
          {"seed", std::to_string(c.seed)}};
}

inline SynthConfig config_from_fields(const std::map<std::string, std::string>& f) {
  auto get = [&](const char* k) {
    auto it = f.find(k);
    if (it == f.end()) throw DatasetError(std::string("dataset header: missing key ") + k);
    return it->second;
  };
  SynthConfig c;
  c.train_subjects = std::stoul(get("train_subjects"));
  c.val_subjects = std::stoul(get("val_subjects"));
  c.test_subjects = std::stoul(get("test_subjects"));
  c.samples_per_subject = std::stoul(get("samples_per_subject"));
  c.screen_width_cm = std::stod(get("screen_width_cm"));
  c.screen_height_cm = std::stod(get("screen_height_cm"));
  c.patch_size = std::stoul(get("patch_size"));
  c.channels = std::stoul(get("channels"));
  c.noise_std = std::stod(get("noise_std"));
  c.label_noise_cm = std::stod(get("label_noise_cm"));
  c.socket_radius = std::stod(get("socket_radius"));
  c.pupil_radius = std::stod(get("pupil_radius"));
  c.pupil_gain = std::stod(get("pupil_gain"));
  c.head_coupling = std::stod(get("head_coupling"));
  c.face_travel = std::stod(get("face_travel"));
  c.intensity_contrast = std::stod(get("intensity_contrast"));
  c.sequence_points = std::stoul(get("sequence_points"));
  c.sequence_frames = std::stoul(get("sequence_frames"));
  c.sequence_noise_std = std::stod(get("sequence_noise_std"));
  c.sequence_max_shift_px = std::stod(get("sequence_max_shift_px"));
  c.seed = std::stoull(get("seed"));
  return c;
}

inline void put_f32(std::ostream& os, float v) {
  const auto bits = std::bit_cast<std::uint32_t>(v);
  const char b[4] = {static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
                     static_cast<char>((bits >> 16) & 0xff), static_cast<char>((bits >> 24) & 0xff)};
  os.write(b, 4);
}

inline float get_f32(const unsigned char* p) {
  const std::uint32_t bits = std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) |
                             (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
  return std::bit_cast<float>(bits);
}

}  // namespace synth_detail

/// Directory layout: header, index.tsv, data.bin, sequences.tsv.
/// data.bin holds fixed-width records: 3 u8 patches then gt_x, gt_y as f32 LE.
inline void write_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const std::size_t record_bytes = 3 * ds.patch_values() + 8;
  {
    std::ofstream h(dir / "header");
    if (!h) throw DatasetError("cannot write " + (dir / "header").string());
    h << "format ordgaze-dataset\nversion " << kDatasetVersion << "\n"
      << "dtype u8\nrecord_bytes " << record_bytes << "\nrecords " << ds.records.size() << "\n"
      << "patch_shape " << ds.channels() << "x" << ds.patch_size() << "x" << ds.patch_size()
      << "\n";
    for (const auto& [k, v] : synth_detail::config_fields(ds.config)) h << k << ' ' << v << '\n';
  }
  std::ofstream data(dir / "data.bin", std::ios::binary);
  std::ofstream index(dir / "index.tsv");
  if (!data || !index) throw DatasetError("cannot write dataset files in " + dir.string());
  index << "record_id\tsplit\toffset\tsubject_id\tsequence_id\n";
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const auto& r = ds.records[i];
    index << i << '\t' << split_name(r.split) << '\t' << i * record_bytes << '\t' << r.subject
          << '\t' << r.sequence << '\n';
    data.write(reinterpret_cast<const char*>(r.pixels.data()),
               static_cast<std::streamsize>(r.pixels.size()));
    synth_detail::put_f32(data, r.gt_x);
    synth_detail::put_f32(data, r.gt_y);
  }
  std::ofstream seq(dir / "sequences.tsv");
  seq << "sequence_id\tgt_x_cm\tgt_y_cm\tframe_record_ids\n";
  seq.precision(17);
  for (const auto& s : ds.sequences) {
    seq << s.id << '\t' << s.gt_x << '\t' << s.gt_y << '\t';
    for (std::size_t k = 0; k < s.frames.size(); ++k) seq << (k ? "," : "") << s.frames[k];
    seq << '\n';
  }
  if (!data || !index || !seq) throw DatasetError("write failure in " + dir.string());
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  std::map<std::string, std::string> fields;
  {
    std::ifstream h(dir / "header");
    if (!h) throw DatasetError("cannot open " + (dir / "header").string());
    std::string key, value;
    while (h >> key >> value) fields[key] = value;
  }
  if (fields["format"] != "ordgaze-dataset")
    throw DatasetError("not an ordgaze dataset: " + dir.string());
  if (fields["version"] != std::to_string(kDatasetVersion))
    throw DatasetError("unsupported dataset version " + fields["version"]);
  ds.config = synth_detail::config_from_fields(fields);
  const std::size_t record_bytes = 3 * ds.patch_values() + 8;
  if (std::stoul(fields["record_bytes"]) != record_bytes)
    throw DatasetError("dataset header: record_bytes inconsistent with patch shape");
  const std::size_t n = std::stoul(fields["records"]);

  std::ifstream data(dir / "data.bin", std::ios::binary);
  if (!data) throw DatasetError("cannot open " + (dir / "data.bin").string());
  std::vector<unsigned char> blob((std::istreambuf_iterator<char>(data)),
                                  std::istreambuf_iterator<char>());

  std::ifstream index(dir / "index.tsv");
  if (!index) throw DatasetError("cannot open " + (dir / "index.tsv").string());
  std::string line;
  std::getline(index, line);
  ds.records.resize(n);
  std::size_t seen = 0;
  while (std::getline(index, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::size_t id = 0, offset = 0;
    std::string split;
    long subject = 0, sequence = 0;
    if (!(ls >> id >> split >> offset >> subject >> sequence) || id >= n)
      throw DatasetError("corrupt index record " + std::to_string(seen) + ": '" + line + "'");
    if (offset != id * record_bytes || offset + record_bytes > blob.size())
      throw DatasetError("corrupt index record " + std::to_string(id) + ": offset " +
                         std::to_string(offset) + " outside data.bin");
    Record& r = ds.records[id];
    try {
      r.split = parse_split(split);
    } catch (const std::invalid_argument&) {
      throw DatasetError("corrupt index record " + std::to_string(id) + ": split '" + split + "'");
    }
    r.subject = static_cast<std::int32_t>(subject);
    r.sequence = static_cast<std::int32_t>(sequence);
    r.pixels.assign(blob.begin() + offset, blob.begin() + offset + 3 * ds.patch_values());
    r.gt_x = synth_detail::get_f32(blob.data() + offset + 3 * ds.patch_values());
    r.gt_y = synth_detail::get_f32(blob.data() + offset + 3 * ds.patch_values() + 4);
    ++seen;
  }
  if (seen != n)
    throw DatasetError("index lists " + std::to_string(seen) + " records, header says " +
                       std::to_string(n));

  std::ifstream seq(dir / "sequences.tsv");
  if (seq) {
    std::getline(seq, line);
    while (std::getline(seq, line)) {
      if (line.empty()) continue;
      std::istringstream ls(line);
      SequenceInfo s;
      std::string frames;
      if (!(ls >> s.id >> s.gt_x >> s.gt_y >> frames))
        throw DatasetError("corrupt sequence line: '" + line + "'");
      std::istringstream fs(frames);
      std::string tok;
      while (std::getline(fs, tok, ',')) {
        const std::size_t f = std::stoul(tok);
        if (f >= n) throw DatasetError("sequence " + std::to_string(s.id) + " references missing record");
        s.frames.push_back(f);
      }
      ds.sequences.push_back(std::move(s));
    }
  }
  return ds;
}

// ------------------------------------------------------------------ batching

template <class T>
struct Batch {
  Tensor<T> face, left, right;           // [N, C, P, P], values in [0, 1]
  std::vector<std::array<double, 2>> gt;  // cm
  std::vector<T> labels;                  // N x (bins_x + bins_y) hard ordinal labels
  std::vector<std::size_t> records;
  std::size_t size() const { return gt.size(); }
};

/// Hard ordinal label rows (x bins then y bins) for a gt point.
template <class T>
void append_labels(std::vector<T>& out, double gx, double gy, const OrdinalConfig& xc,
                   const OrdinalConfig& yc) {
  const auto bx = encode<T>(gx, xc);
  const auto by = encode<T>(gy, yc);
  out.insert(out.end(), bx.begin(), bx.end());
  out.insert(out.end(), by.begin(), by.end());
}

template <class T>
Batch<T> make_batch(const Dataset& ds, std::span<const std::size_t> ids, const OrdinalConfig& xc,
                    const OrdinalConfig& yc) {
  const std::size_t n = ids.size(), pv = ds.patch_values();
  const Shape shape{n, ds.channels(), ds.patch_size(), ds.patch_size()};
  std::array<std::vector<T>, 3> patches;
  for (auto& p : patches) p.resize(n * pv);
  Batch<T> b;
  b.labels.reserve(n * (xc.bins + yc.bins));
  for (std::size_t i = 0; i < n; ++i) {
    const Record& r = ds.records.at(ids[i]);
    for (std::size_t k = 0; k < 3; ++k)
      for (std::size_t j = 0; j < pv; ++j)
        patches[k][i * pv + j] = static_cast<T>(r.pixels[k * pv + j]) / T(255);
    b.gt.push_back({r.gt_x, r.gt_y});
    append_labels(b.labels, r.gt_x, r.gt_y, xc, yc);
    b.records.push_back(ids[i]);
  }
  b.face = Tensor<T>::from(shape, std::move(patches[0]));
  b.left = Tensor<T>::from(shape, std::move(patches[1]));
  b.right = Tensor<T>::from(shape, std::move(patches[2]));
  return b;
}

/// Seeded shuffling batch iterator over a list of record ids.
class BatchSchedule {
 public:
  BatchSchedule(std::vector<std::size_t> ids, std::size_t batch_size)
      : ids_(std::move(ids)), batch_size_(batch_size) {
    if (batch_size_ == 0) throw std::invalid_argument("batch size must be positive");
  }

  void shuffle(std::mt19937_64& rng) { std::shuffle(ids_.begin(), ids_.end(), rng); }

  std::size_t batch_count() const { return (ids_.size() + batch_size_ - 1) / batch_size_; }

  std::span<const std::size_t> batch(std::size_t k) const {
    const std::size_t begin = k * batch_size_;
    return std::span<const std::size_t>(ids_).subspan(begin, std::min(batch_size_, ids_.size() - begin));
  }

  const std::vector<std::size_t>& ids() const { return ids_; }

 private:
  std::vector<std::size_t> ids_;
  std::size_t batch_size_;
};

/// Ordinal codecs whose bin sizes split the dataset's screen range into B+1 intervals.
inline std::array<OrdinalConfig, 2> codecs_for(const SynthConfig& cfg, std::size_t bins_x,
                                               std::size_t bins_y) {
  return {OrdinalConfig::for_range(bins_x, 0.0, cfg.screen_width_cm),
          OrdinalConfig::for_range(bins_y, 0.0, cfg.screen_height_cm)};
}

}  // namespace ordgaze
