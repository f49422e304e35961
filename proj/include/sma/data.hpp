#pragma once

#include <array>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "sma/serialize.hpp"

namespace sma {

// synthetic organ+tumor sample: image (3,H,W) in [0,1], mask (H,W) with
// class ids 0=background, 1=organ, 2=tumor stored as exact small floats
struct SamplePair {
  Tensor32 image;
  Tensor32 mask;
  std::string sample_id;
  std::uint64_t seed = 0;
};

namespace detail {

// organ boundary: ellipse radius modulated by low-order harmonics
struct Blob {
  double cx, cy, a, b, rot;
  std::array<double, 3> amp{}, phase{};  // harmonics k = 2,3,4

  bool contains(double x, double y) const {
    double dx = x - cx, dy = y - cy;
    double u = std::cos(rot) * dx + std::sin(rot) * dy;
    double v = -std::sin(rot) * dx + std::cos(rot) * dy;
    double r = std::sqrt((u / a) * (u / a) + (v / b) * (v / b));
    double theta = std::atan2(v / b, u / a);
    double bound = 1.0;
    for (int k = 0; k < 3; ++k) bound += amp[k] * std::cos((k + 2) * theta + phase[k]);
    return r <= bound;
  }
};

}  // namespace detail

// fully determined by the seed; resamples internally until the class-fraction
// invariants hold (organ 10-40% of pixels, tumor 0.5-5%, tumor inside organ)
inline SamplePair generate_sample(std::uint64_t seed, std::size_t H, std::size_t W) {
  if (H < 32 || W < 32 || H % 16 != 0 || W % 16 != 0)
    throw value_error("generate_sample: H and W must be >= 32 and divisible by 16, got " +
                      std::to_string(H) + "x" + std::to_string(W));
  Rng rng(seed);
  const std::size_t n = H * W;
  std::vector<float> mask(n);

  for (int attempt = 0;; ++attempt) {
    if (attempt >= 1000)
      throw value_error("generate_sample: failed to satisfy class fractions after 1000 draws");

    detail::Blob organ;
    organ.cx = rng.uniform(0.35, 0.65) * W;
    organ.cy = rng.uniform(0.35, 0.65) * H;
    organ.a = rng.uniform(0.22, 0.38) * W;
    organ.b = rng.uniform(0.22, 0.38) * H;
    organ.rot = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    for (int k = 0; k < 3; ++k) {
      organ.amp[k] = rng.uniform(-0.07, 0.07);
      organ.phase[k] = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    }

    std::size_t n_tumor_blobs = 1 + rng.index(3);
    std::vector<detail::Blob> tumors(n_tumor_blobs);
    for (auto& t : tumors) {
      // centred well inside the organ ellipse so the clipped blob is nonempty
      double ang = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
      double rad = rng.uniform(0.0, 0.55);
      double u = rad * std::cos(ang), v = rad * std::sin(ang);
      t.cx = organ.cx + std::cos(organ.rot) * u * organ.a - std::sin(organ.rot) * v * organ.b;
      t.cy = organ.cy + std::sin(organ.rot) * u * organ.a + std::cos(organ.rot) * v * organ.b;
      t.a = rng.uniform(0.04, 0.10) * W;
      t.b = rng.uniform(0.04, 0.10) * H;
      t.rot = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    }

    std::size_t organ_px = 0, tumor_px = 0;
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        float cls = 0.0f;
        if (organ.contains(double(x) + 0.5, double(y) + 0.5)) {
          cls = 1.0f;
          ++organ_px;
          for (const auto& t : tumors)
            if (t.contains(double(x) + 0.5, double(y) + 0.5)) {
              cls = 2.0f;  // tumor only inside the organ, by construction
              ++tumor_px;
              break;
            }
        }
        mask[y * W + x] = cls;
      }

    double organ_frac = double(organ_px) / double(n);  // tumor pixels included
    double tumor_frac = double(tumor_px) / double(n);
    if (organ_frac >= 0.105 && organ_frac <= 0.395 && tumor_frac >= 0.006 &&
        tumor_frac <= 0.045)
      break;
  }

  // class-dependent base intensity + smooth illumination plane + noise
  const double base[3] = {0.2, 0.6, 0.45};
  double gx = rng.uniform(-0.1, 0.1), gy = rng.uniform(-0.1, 0.1);
  std::vector<float> img(3 * n);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        std::size_t i = y * W + x;
        double v = base[int(mask[i])];
        v += gx * (double(x) / W - 0.5) + gy * (double(y) / H - 0.5);
        v += rng.normal() * 0.05;
        img[c * n + i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }

  SamplePair s;
  s.image = Tensor32::from({3, H, W}, std::move(img));
  s.mask = Tensor32::from({H, W}, std::move(mask));
  s.seed = seed;
  return s;
}

// ---------------------------------------------------------------------------
// augmentations: image and mask transformed identically, exact pixel moves
// ---------------------------------------------------------------------------
namespace detail {
inline std::vector<float> hflip_plane(const std::vector<float>& p, std::size_t off,
                                      std::size_t H, std::size_t W) {
  std::vector<float> out(H * W);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) out[y * W + x] = p[off + y * W + (W - 1 - x)];
  return out;
}

// one 90-degree counter-clockwise turn: out(H=W_old rows) from in
inline std::vector<float> rot90_plane(const std::vector<float>& p, std::size_t off,
                                      std::size_t H, std::size_t W) {
  std::vector<float> out(H * W);
  for (std::size_t y = 0; y < H; ++y)      // y indexes old columns, reversed
    for (std::size_t x = 0; x < W; ++x)    // x indexes old rows
      out[(W - 1 - x) * H + y] = p[off + y * W + x];
  return out;
}
}  // namespace detail

inline SamplePair hflip(const SamplePair& s) {
  std::size_t H = s.mask.dim(0), W = s.mask.dim(1);
  SamplePair out = s;
  std::vector<float> img(3 * H * W);
  for (std::size_t c = 0; c < 3; ++c) {
    auto plane = detail::hflip_plane(s.image.data(), c * H * W, H, W);
    std::copy(plane.begin(), plane.end(), img.begin() + c * H * W);
  }
  out.image = Tensor32::from({3, H, W}, std::move(img));
  out.mask = Tensor32::from({H, W}, detail::hflip_plane(s.mask.data(), 0, H, W));
  return out;
}

inline SamplePair rotate90(const SamplePair& s, int k) {
  if (k < 0 || k > 3) throw value_error("rotate90: k must be in {0,1,2,3}");
  SamplePair out = s;
  for (int turn = 0; turn < k; ++turn) {
    std::size_t H = out.mask.dim(0), W = out.mask.dim(1);
    std::vector<float> img(3 * H * W);
    for (std::size_t c = 0; c < 3; ++c) {
      auto plane = detail::rot90_plane(out.image.data(), c * H * W, H, W);
      std::copy(plane.begin(), plane.end(), img.begin() + c * H * W);
    }
    out.image = Tensor32::from({3, W, H}, std::move(img));
    out.mask = Tensor32::from({W, H}, detail::rot90_plane(out.mask.data(), 0, H, W));
  }
  return out;
}

// ---------------------------------------------------------------------------
// dataset: manifest + per-sample SMT1 files
// ---------------------------------------------------------------------------
struct DatasetManifest {
  std::size_t count = 0, height = 0, width = 0, classes = 3;
  std::uint64_t seed = 0;
  std::array<double, 3> split_ratios = {0.80, 0.15, 0.05};  // train/val/test
  std::vector<std::string> ids;
  std::vector<std::string> splits;  // per-sample: "train" | "val" | "test"
};

inline void to_json(nlohmann::json& j, const DatasetManifest& m) {
  j = nlohmann::json{{"count", m.count},         {"height", m.height},
                     {"width", m.width},         {"classes", m.classes},
                     {"seed", m.seed},           {"split_ratios", m.split_ratios},
                     {"ids", m.ids},             {"splits", m.splits}};
}

inline void from_json(const nlohmann::json& j, DatasetManifest& m) {
  j.at("count").get_to(m.count);
  j.at("height").get_to(m.height);
  j.at("width").get_to(m.width);
  j.at("classes").get_to(m.classes);
  j.at("seed").get_to(m.seed);
  j.at("split_ratios").get_to(m.split_ratios);
  j.at("ids").get_to(m.ids);
  j.at("splits").get_to(m.splits);
}

// largest-remainder apportionment of samples to splits; ties prefer the later
// split so small datasets still get a test sample
inline std::array<std::size_t, 3> split_counts(std::size_t count,
                                               const std::array<double, 3>& ratios) {
  std::array<std::size_t, 3> n{};
  std::array<double, 3> rem{};
  std::size_t assigned = 0;
  for (int i = 0; i < 3; ++i) {
    double exact = count * ratios[i];
    n[i] = static_cast<std::size_t>(exact);
    rem[i] = exact - double(n[i]);
    assigned += n[i];
  }
  while (assigned < count) {
    int best = 0;
    for (int i = 1; i < 3; ++i)
      if (rem[i] >= rem[best]) best = i;
    ++n[best];
    rem[best] = -1.0;
    ++assigned;
  }
  return n;
}

// decorrelated per-sample seed stream (splitmix64 of global seed + index)
inline std::uint64_t sample_seed(std::uint64_t global, std::size_t index) {
  std::uint64_t z = global + 0x9E3779B97F4A7C15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline std::pair<DatasetManifest, std::vector<SamplePair>> make_dataset(std::uint64_t seed,
                                                                        std::size_t count,
                                                                        std::size_t H,
                                                                        std::size_t W) {
  if (count == 0) throw value_error("make_dataset: count must be positive");
  DatasetManifest m;
  m.count = count;
  m.height = H;
  m.width = W;
  m.seed = seed;
  auto n = split_counts(count, m.split_ratios);
  std::vector<SamplePair> samples;
  for (std::size_t i = 0; i < count; ++i) {
    auto s = generate_sample(sample_seed(seed, i), H, W);
    char id[32];
    std::snprintf(id, sizeof id, "sample_%04zu", i);
    s.sample_id = id;
    m.ids.push_back(s.sample_id);
    m.splits.push_back(i < n[0] ? "train" : i < n[0] + n[1] ? "val" : "test");
    samples.push_back(std::move(s));
  }
  return {std::move(m), std::move(samples)};
}

inline void write_dataset(const DatasetManifest& m, const std::vector<SamplePair>& samples,
                          const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (m.ids.size() != samples.size() || m.splits.size() != samples.size())
    throw value_error("write_dataset: manifest does not match sample list");
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  for (const auto& s : samples) {
    smt_write(s.image, dir / "images" / (s.sample_id + ".smt"));
    smt_write(s.mask, dir / "masks" / (s.sample_id + ".smt"));
  }
  nlohmann::json j = m;
  std::ofstream f(dir / "manifest.json", std::ios::trunc);
  if (!f) throw format_error("write_dataset: cannot open " + (dir / "manifest.json").string());
  f << j.dump(2) << "\n";
}

inline std::pair<DatasetManifest, std::vector<SamplePair>> read_dataset(
    const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw format_error("read_dataset: missing manifest at " + dir.string());
  DatasetManifest m = nlohmann::json::parse(f).get<DatasetManifest>();
  if (m.ids.size() != m.count || m.splits.size() != m.count)
    throw format_error("read_dataset: manifest lists " + std::to_string(m.ids.size()) +
                       " ids for count " + std::to_string(m.count));
  std::vector<SamplePair> samples;
  for (std::size_t i = 0; i < m.count; ++i) {
    SamplePair s;
    s.sample_id = m.ids[i];
    s.image = smt_read<float>(dir / "images" / (s.sample_id + ".smt"));
    s.mask = smt_read<float>(dir / "masks" / (s.sample_id + ".smt"));
    if (s.image.shape() != Shape{3, m.height, m.width} ||
        s.mask.shape() != Shape{m.height, m.width})
      throw format_error("read_dataset: sample " + s.sample_id + " has unexpected shape");
    samples.push_back(std::move(s));
  }
  return {std::move(m), std::move(samples)};
}

// one-hot target planes (C,H,W) from an integer-valued mask
template <class S>
Tensor<S> one_hot_mask(const Tensor32& mask, std::size_t classes) {
  std::size_t H = mask.dim(0), W = mask.dim(1);
  std::vector<S> out(classes * H * W, S(0));
  for (std::size_t i = 0; i < H * W; ++i) {
    auto c = static_cast<std::size_t>(mask.data()[i]);
    if (c >= classes)
      throw value_error("one_hot_mask: class id " + std::to_string(c) + " out of range");
    out[c * H * W + i] = S(1);
  }
  return Tensor<S>::from({classes, H, W}, std::move(out));
}

}  // namespace sma
