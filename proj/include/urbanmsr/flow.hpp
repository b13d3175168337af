#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "urbanmsr/errors.hpp"
#include "urbanmsr/rng.hpp"
#include "urbanmsr/tensor.hpp"

// Flow-grid data model: on-disk format, block-sum coarsening, the structural
// constraint check, min-max scaling, synthetic generation and splitting.

namespace umsr {

enum class Granularity : std::uint8_t { Coarse = 0, Fine = 1 };

template <class S>
struct FlowGrid {
  int frames = 0;  // T
  int height = 0;  // H of this grid
  int width = 0;   // W of this grid
  Granularity granularity = Granularity::Coarse;
  int upscale = 1;  // S linking this grid to its paired resolution
  int slots_per_day = 1;
  std::vector<S> data;  // frames*height*width, row-major frame by frame

  static FlowGrid make(int t, int h, int w, Granularity g, int s, int spd) {
    FlowGrid grid;
    grid.frames = t;
    grid.height = h;
    grid.width = w;
    grid.granularity = g;
    grid.upscale = s;
    grid.slots_per_day = spd;
    grid.data.assign(static_cast<std::size_t>(t) * h * w, S(0));
    return grid;
  }

  std::size_t cell_index(int t, int i, int j) const {
    return (static_cast<std::size_t>(t) * height + i) * width + j;
  }
  S at(int t, int i, int j) const { return data[cell_index(t, i, j)]; }
  S& at(int t, int i, int j) { return data[cell_index(t, i, j)]; }

  int day_of(int t) const { return t / slots_per_day; }
  int slot_of(int t) const { return t % slots_per_day; }

  // One frame as a [1,H,W] tensor (plain values, no grad).
  Tensor<S> frame_tensor(int t) const {
    std::vector<S> v(data.begin() + static_cast<std::ptrdiff_t>(cell_index(t, 0, 0)),
                     data.begin() + static_cast<std::ptrdiff_t>(cell_index(t, 0, 0)) +
                         static_cast<std::ptrdiff_t>(height) * width);
    return Tensor<S>::from({1, height, width}, std::move(v));
  }

  // Frame as a [H,W] tensor, for constraint math.
  Tensor<S> frame_tensor_hw(int t) const {
    std::vector<S> v(data.begin() + static_cast<std::ptrdiff_t>(cell_index(t, 0, 0)),
                     data.begin() + static_cast<std::ptrdiff_t>(cell_index(t, 0, 0)) +
                         static_cast<std::ptrdiff_t>(height) * width);
    return Tensor<S>::from({height, width}, std::move(v));
  }
};

// ---- coarsening and the structural constraint -------------------------------

// Coarse cell (i,j) = sum of the S x S fine cells mapping onto it.
template <class S>
FlowGrid<S> coarsen(const FlowGrid<S>& fine, int factor) {
  if (factor < 1) throw DimensionError("coarsen: factor must be >= 1");
  if (fine.height % factor != 0 || fine.width % factor != 0)
    throw DimensionError("coarsen: dims " + std::to_string(fine.height) + "x" +
                         std::to_string(fine.width) + " not divisible by " +
                         std::to_string(factor));
  FlowGrid<S> out = FlowGrid<S>::make(fine.frames, fine.height / factor, fine.width / factor,
                                      Granularity::Coarse, factor, fine.slots_per_day);
  for (int t = 0; t < fine.frames; ++t)
    for (int i = 0; i < fine.height; ++i)
      for (int j = 0; j < fine.width; ++j)
        out.at(t, i / factor, j / factor) += fine.at(t, i, j);
  return out;
}

// Max over frames and cells of |coarse - block sum of fine|.
template <class S>
double validate_constraint(const FlowGrid<S>& coarse, const FlowGrid<S>& fine, int factor) {
  if (coarse.frames != fine.frames)
    throw DimensionError("validate_constraint: frame counts differ");
  if (fine.height != factor * coarse.height || fine.width != factor * coarse.width)
    throw DimensionError("validate_constraint: fine " + std::to_string(fine.height) + "x" +
                         std::to_string(fine.width) + " does not pair with coarse " +
                         std::to_string(coarse.height) + "x" + std::to_string(coarse.width) +
                         " at factor " + std::to_string(factor));
  double worst = 0.0;
  // Accumulate in the grid's own precision and in block-sum order, so a
  // coarse grid produced by coarsen() compares exactly.
  for (int t = 0; t < coarse.frames; ++t)
    for (int i = 0; i < coarse.height; ++i)
      for (int j = 0; j < coarse.width; ++j) {
        S block = S(0);
        for (int a = 0; a < factor; ++a)
          for (int b = 0; b < factor; ++b) block += fine.at(t, factor * i + a, factor * j + b);
        worst = std::max(worst, std::abs(static_cast<double>(coarse.at(t, i, j)) -
                                         static_cast<double>(block)));
      }
  return worst;
}

// Same check for a single predicted frame against its coarse input.
template <class S>
double frame_constraint_residual(const Tensor<S>& coarse_hw, const Tensor<S>& fine_chw,
                                 int factor) {
  const int h = coarse_hw.dim(0), w = coarse_hw.dim(1);
  double worst = 0.0;
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      S block = S(0);
      for (int a = 0; a < factor; ++a)
        for (int b = 0; b < factor; ++b) block += fine_chw.at(0, factor * i + a, factor * j + b);
      worst = std::max(worst, std::abs(static_cast<double>(coarse_hw.at(i, j)) -
                                       static_cast<double>(block)));
    }
  return worst;
}

// ---- scaling -----------------------------------------------------------------

struct ScalerParams {
  double min = 0.0;
  double max = 1.0;

  double apply(double v) const { return (v - min) / (max - min); }
  double invert(double v) const { return v * (max - min) + min; }
};

struct FrameRange {
  int begin = 0;
  int end = 0;  // exclusive
  int count() const { return end - begin; }
};

// Min-max over a frame range; a constant grid widens max to min + 1.
template <class S>
ScalerParams fit_scaler(const FlowGrid<S>& g, FrameRange r) {
  if (r.count() <= 0) throw UsageError("fit_scaler: empty frame range");
  double lo = static_cast<double>(g.at(r.begin, 0, 0));
  double hi = lo;
  for (int t = r.begin; t < r.end; ++t)
    for (int i = 0; i < g.height; ++i)
      for (int j = 0; j < g.width; ++j) {
        double v = static_cast<double>(g.at(t, i, j));
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
  if (hi <= lo) hi = lo + 1.0;
  return {lo, hi};
}

// ---- splits ------------------------------------------------------------------

struct DatasetSplit {
  FrameRange train, val, test;
};

inline DatasetSplit make_split(int frames, double train_frac, double val_frac) {
  if (frames < 3) throw UsageError("make_split: need at least 3 frames");
  if (train_frac <= 0 || val_frac < 0 || train_frac + val_frac >= 1.0)
    throw ConfigError("make_split: fractions must satisfy 0 < train, 0 <= val, train+val < 1");
  int ntr = static_cast<int>(frames * train_frac);
  int nva = static_cast<int>(frames * val_frac);
  ntr = std::max(1, ntr);
  nva = std::max(1, nva);
  if (ntr + nva >= frames) throw ConfigError("make_split: no frames left for test");
  DatasetSplit s;
  s.train = {0, ntr};
  s.val = {ntr, ntr + nva};
  s.test = {ntr + nva, frames};
  return s;
}

// ---- synthetic data ------------------------------------------------------------

struct SynthConfig {
  int coarse_h = 8;
  int coarse_w = 8;
  int upscale = 2;
  int frames = 1440;
  int slots_per_day = 48;
  int blobs = 3;
  double blob_speed = 1.0;  // orbit revolutions per day
  double noise = 0.05;
  std::uint64_t seed = 42;

  void validate() const {
    if (coarse_h < 1 || coarse_w < 1 || upscale < 1 || frames < 1 || slots_per_day < 1 ||
        blobs < 1)
      throw ConfigError("synth: dimensions, frames, slots_per_day and blobs must be positive");
    if (blob_speed < 0 || noise < 0)
      throw ConfigError("synth: blob_speed and noise must be non-negative");
  }
};

// Moving Gaussian blobs on daily-periodic orbits plus clipped noise. The
// coarse grid is the exact block sum of the fine grid, so the pair satisfies
// the structural constraint by construction.
template <class S>
std::pair<FlowGrid<S>, FlowGrid<S>> synth_generate(const SynthConfig& cfg) {
  cfg.validate();
  const int fh = cfg.coarse_h * cfg.upscale;
  const int fw = cfg.coarse_w * cfg.upscale;
  FlowGrid<S> fine = FlowGrid<S>::make(cfg.frames, fh, fw, Granularity::Fine, cfg.upscale,
                                       cfg.slots_per_day);

  struct Blob {
    double amp, sigma, orbit_r, orbit_c, phase_r, phase_c, center_r, center_c;
  };
  Rng param_rng = Rng::stream(cfg.seed, "synth/blobs");
  std::vector<Blob> blobs(static_cast<std::size_t>(cfg.blobs));
  const double scale_unit = std::min(fh, fw);
  for (auto& b : blobs) {
    b.amp = param_rng.uniform(15.0, 60.0);
    b.sigma = param_rng.uniform(0.08, 0.18) * scale_unit;
    b.orbit_r = param_rng.uniform(0.10, 0.30) * fh;
    b.orbit_c = param_rng.uniform(0.10, 0.30) * fw;
    b.phase_r = param_rng.uniform(0.0, 6.283185307179586477);
    b.phase_c = param_rng.uniform(0.0, 6.283185307179586477);
    b.center_r = param_rng.uniform(0.35, 0.65) * fh;
    b.center_c = param_rng.uniform(0.35, 0.65) * fw;
  }

  Rng noise_rng = Rng::stream(cfg.seed, "synth/noise");
  const double two_pi = 6.283185307179586477;
  for (int t = 0; t < cfg.frames; ++t) {
    // Trajectories depend on the slot only, giving exact daily periodicity.
    double day_angle =
        two_pi * cfg.blob_speed * static_cast<double>(t % cfg.slots_per_day) / cfg.slots_per_day;
    for (int i = 0; i < fh; ++i)
      for (int j = 0; j < fw; ++j) {
        double v = 0.0;
        for (const auto& b : blobs) {
          double cr = b.center_r + b.orbit_r * std::sin(day_angle + b.phase_r);
          double cc = b.center_c + b.orbit_c * std::cos(day_angle + b.phase_c);
          double dr = i - cr, dc = j - cc;
          v += b.amp * std::exp(-(dr * dr + dc * dc) / (2.0 * b.sigma * b.sigma));
        }
        if (cfg.noise > 0) v += cfg.noise * noise_rng.normal();
        fine.at(t, i, j) = static_cast<S>(std::max(0.0, v));
      }
  }
  FlowGrid<S> coarse = coarsen(fine, cfg.upscale);
  return {std::move(fine), std::move(coarse)};
}

// ---- binary grid format --------------------------------------------------------
//
// Little-endian layout: magic "UFLW", version u16 = 1, precision u8 (4|8),
// granularity u8 (0 coarse | 1 fine), S u16, T u32, H u32, W u32,
// slots_per_day u32, then T*H*W values row-major frame by frame.

namespace detail {

template <class T>
void write_le(std::ostream& os, T v) {
  // Host is little-endian on every supported target.
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_le(std::istream& is, const char* field) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw FormatError(std::string("grid file truncated in ") + field);
  return v;
}

}  // namespace detail

template <class S>
void save_grid(const FlowGrid<S>& g, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os.write("UFLW", 4);
  detail::write_le<std::uint16_t>(os, 1);
  detail::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(sizeof(S)));
  detail::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(g.granularity));
  detail::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(g.upscale));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(g.frames));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(g.height));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(g.width));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(g.slots_per_day));
  os.write(reinterpret_cast<const char*>(g.data.data()),
           static_cast<std::streamsize>(g.data.size() * sizeof(S)));
  if (!os) throw IoError("write failed: " + path);
}

template <class S>
FlowGrid<S> load_grid(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "UFLW", 4) != 0)
    throw FormatError("bad magic in " + path);
  auto version = detail::read_le<std::uint16_t>(is, "version");
  if (version != 1)
    throw FormatError("unsupported version " + std::to_string(version) + " in " + path);
  auto precision = detail::read_le<std::uint8_t>(is, "precision");
  if (precision != 4 && precision != 8)
    throw FormatError("bad precision " + std::to_string(precision) + " in " + path);
  auto gran = detail::read_le<std::uint8_t>(is, "granularity");
  if (gran > 1) throw FormatError("bad granularity " + std::to_string(gran) + " in " + path);
  auto factor = detail::read_le<std::uint16_t>(is, "upscale");
  if (factor < 1) throw FormatError("bad upscale factor 0 in " + path);
  auto t = detail::read_le<std::uint32_t>(is, "frames");
  auto h = detail::read_le<std::uint32_t>(is, "height");
  auto w = detail::read_le<std::uint32_t>(is, "width");
  auto spd = detail::read_le<std::uint32_t>(is, "slots_per_day");
  if (t == 0 || h == 0 || w == 0) throw FormatError("empty dimensions in " + path);
  if (spd == 0) throw FormatError("bad slots_per_day 0 in " + path);

  FlowGrid<S> g = FlowGrid<S>::make(static_cast<int>(t), static_cast<int>(h),
                                    static_cast<int>(w), static_cast<Granularity>(gran),
                                    static_cast<int>(factor), static_cast<int>(spd));
  const std::size_t n = g.data.size();
  auto read_payload = [&](auto tag) {
    using File = decltype(tag);
    std::vector<File> raw(n);
    is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n * sizeof(File)));
    if (static_cast<std::size_t>(is.gcount()) != n * sizeof(File))
      throw FormatError("payload truncated in " + path + ": header declares " +
                        std::to_string(n) + " values");
    for (std::size_t i = 0; i < n; ++i) g.data[i] = static_cast<S>(raw[i]);
  };
  if (precision == 4)
    read_payload(float{});
  else
    read_payload(double{});
  for (std::size_t i = 0; i < n; ++i)
    if (g.data[i] < S(0))
      throw FormatError("negative flow value at element " + std::to_string(i) + " in " + path);
  return g;
}

// CSV import: columns t,i,j,value (optional header). Grid dimensions are
// inferred from the maximum indices; unmentioned cells are zero.
template <class S>
FlowGrid<S> import_csv(const std::string& path, Granularity gran, int factor,
                       int slots_per_day) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path);
  struct Row {
    int t, i, j;
    double v;
  };
  std::vector<Row> rows;
  std::string line;
  int max_t = -1, max_i = -1, max_j = -1;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (lineno == 1 && line.find_first_not_of("tijvalue, \r") == std::string::npos) continue;
    std::istringstream ls(line);
    Row r{};
    char c1, c2, c3;
    if (!(ls >> r.t >> c1 >> r.i >> c2 >> r.j >> c3 >> r.v) || c1 != ',' || c2 != ',' ||
        c3 != ',')
      throw FormatError("bad CSV row at line " + std::to_string(lineno) + " in " + path);
    if (r.t < 0 || r.i < 0 || r.j < 0)
      throw FormatError("negative index at line " + std::to_string(lineno) + " in " + path);
    if (r.v < 0)
      throw FormatError("negative flow value at line " + std::to_string(lineno) + " in " + path);
    max_t = std::max(max_t, r.t);
    max_i = std::max(max_i, r.i);
    max_j = std::max(max_j, r.j);
    rows.push_back(r);
  }
  if (rows.empty()) throw FormatError("no data rows in " + path);
  FlowGrid<S> g = FlowGrid<S>::make(max_t + 1, max_i + 1, max_j + 1, gran, factor,
                                    slots_per_day);
  for (const auto& r : rows) g.at(r.t, r.i, r.j) = static_cast<S>(r.v);
  return g;
}

template <class S>
void export_csv(const FlowGrid<S>& g, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << "t,i,j,value\n";
  char buf[64];
  for (int t = 0; t < g.frames; ++t)
    for (int i = 0; i < g.height; ++i)
      for (int j = 0; j < g.width; ++j) {
        std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(g.at(t, i, j)));
        os << t << ',' << i << ',' << j << ',' << buf << '\n';
      }
  if (!os) throw IoError("write failed: " + path);
}

}  // namespace umsr
