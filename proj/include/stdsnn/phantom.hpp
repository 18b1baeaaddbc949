#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "stdsnn/rng.hpp"
#include "stdsnn/serialize.hpp"
#include "stdsnn/tensor.hpp"

namespace stdsnn {

inline constexpr std::int64_t num_phantom_classes = 6;  // background + 5 structures

struct Scan {
  Tensor<float> volume;        // [slices, 1, h, w], nonnegative uptake
  Tensor<std::int32_t> labels;  // [slices, h, w], values 0..5
};

struct PatientSeries {
  std::string patient_id;
  std::vector<Scan> scans;  // time-point order
};

using Dataset = std::vector<PatientSeries>;

/// One training/evaluation unit: two scans of (usually) the same patient at
/// time points tp1 < tp2 (1-based).  The ablation samplers relax both rules:
/// "same" pairs a scan with itself, "unpaired" crosses patients.
struct ScanPair {
  std::string patient_id1, patient_id2;
  std::size_t patient1 = 0, patient2 = 0;  // dataset indices
  std::int64_t tp1 = 0, tp2 = 0;           // 1-based time points
};

struct PhantomDims {
  std::int64_t slices = 16;
  std::int64_t h = 160;
  std::int64_t w = 160;
};

namespace detail {

struct StructureDef {
  std::int32_t cls;
  double cy, cx, ry, rx;  // fractions of (h, w)
  double cz, rz;          // fractions of slices
  double intensity;
};

// anatomically inspired canonical placement: brain top, heart upper middle,
// kidneys paired mid, bladder bottom
inline constexpr std::array<StructureDef, 5> phantom_structures = {{
    {1, 0.18, 0.50, 0.100, 0.120, 0.25, 0.30, 100.0},  // brain
    {2, 0.38, 0.45, 0.080, 0.090, 0.45, 0.25, 80.0},   // heart
    {3, 0.58, 0.32, 0.070, 0.055, 0.55, 0.25, 70.0},   // left kidney
    {4, 0.58, 0.68, 0.070, 0.055, 0.55, 0.25, 70.0},   // right kidney
    {5, 0.82, 0.50, 0.075, 0.085, 0.75, 0.22, 90.0},   // bladder
}};

struct Ellipsoid {
  double cy, cx, cz, ry, rx, rz;  // pixels / slices
};

struct StructureJitter {
  double dy, dx, scale, inten;
};

inline Ellipsoid place(const StructureDef& d, const PhantomDims& dm, const StructureJitter& j) {
  return {d.cy * dm.h + j.dy, d.cx * dm.w + j.dx, d.cz * dm.slices,
          d.ry * dm.h * j.scale, d.rx * dm.w * j.scale, d.rz * dm.slices};
}

template <typename Fill>
void rasterize(const Ellipsoid& e, const PhantomDims& dm, Fill&& fill) {
  const auto lo = [](double v, std::int64_t n) {
    const auto i = static_cast<std::int64_t>(std::floor(v));
    return i < 0 ? 0 : (i >= n ? n - 1 : i);
  };
  const auto hi = [](double v, std::int64_t n) {
    const auto i = static_cast<std::int64_t>(std::ceil(v));
    return i < 0 ? 0 : (i >= n ? n - 1 : i);
  };
  for (std::int64_t z = lo(e.cz - e.rz, dm.slices); z <= hi(e.cz + e.rz, dm.slices); ++z)
    for (std::int64_t y = lo(e.cy - e.ry, dm.h); y <= hi(e.cy + e.ry, dm.h); ++y)
      for (std::int64_t x = lo(e.cx - e.rx, dm.w); x <= hi(e.cx + e.rx, dm.w); ++x) {
        const double fy = (y - e.cy) / e.ry, fx = (x - e.cx) / e.rx, fz = (z - e.cz) / e.rz;
        if (fy * fy + fx * fx + fz * fz <= 1.0) fill(z, y, x);
      }
}

inline double mask_dsc(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
  std::int64_t inter = 0, total = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += (a[i] && b[i]) ? 1 : 0;
    total += (a[i] ? 1 : 0) + (b[i] ? 1 : 0);
  }
  return total == 0 ? 0.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(total);
}

inline double class_dsc(const Tensor<std::int32_t>& a, const Tensor<std::int32_t>& b,
                        std::int32_t cls) {
  std::int64_t inter = 0, total = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    const bool ia = a[i] == cls, ib = b[i] == cls;
    inter += (ia && ib) ? 1 : 0;
    total += (ia ? 1 : 0) + (ib ? 1 : 0);
  }
  return total == 0 ? 0.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(total);
}

}  // namespace detail

/// Deterministic synthetic series: five persistent structures with small
/// per-time-point jitter (resampled until consecutive scans overlap at
/// DSC >= 0.80 per class) plus 0-3 transient lesions per time point, labeled
/// background and resampled until cross-time lesion DSC <= 0.2.
inline PatientSeries generate_patient(std::uint64_t seed, std::int64_t n_scans,
                                      const PhantomDims& dm,
                                      const std::string& patient_id = "patient") {
  detail::check(n_scans >= 1, "generate_patient: n_scans must be >= 1");
  detail::check(dm.slices >= 4, "generate_patient: slices must be >= 4");
  if (dm.h % 16 != 0 || dm.w % 16 != 0 || dm.h < 32 || dm.w < 32)
    throw std::invalid_argument("generate_patient: dims (" + std::to_string(dm.h) + "," +
                                std::to_string(dm.w) + ") must be multiples of 16 and >= 32");

  Rng rng(derive_seed(seed, 0x7068616eULL));  // generator stream
  const std::int64_t voxels = dm.slices * dm.h * dm.w;

  PatientSeries series;
  series.patient_id = patient_id;
  Tensor<std::int32_t> prev_labels({1});
  std::vector<std::vector<std::uint8_t>> lesion_masks;

  for (std::int64_t t = 0; t < n_scans; ++t) {
    // structure jitter, rejected until the consistency bound holds; the
    // translation amplitude scales with resolution (capped at 2 px) so the
    // smallest structures stay trackable at coarse grids
    const double ay = std::min(2.0, dm.h / 64.0), ax = std::min(2.0, dm.w / 64.0);
    Tensor<std::int32_t> labels({dm.slices, dm.h, dm.w});
    std::array<detail::StructureJitter, 5> jit{};
    for (int attempt = 0;; ++attempt) {
      if (attempt > 500)
        throw std::runtime_error("phantom generator: consistency bound unsatisfiable at dims " +
                                 std::to_string(dm.h) + "x" + std::to_string(dm.w));
      for (auto& j : jit)
        j = {rng.uniform(-ay, ay), rng.uniform(-ax, ax), rng.uniform(0.96, 1.04),
             rng.uniform(0.9, 1.1)};
      labels.fill(0);
      for (std::size_t s = 0; s < detail::phantom_structures.size(); ++s) {
        const auto e = detail::place(detail::phantom_structures[s], dm, jit[s]);
        detail::rasterize(e, dm, [&](std::int64_t z, std::int64_t y, std::int64_t x) {
          labels.at3(z, y, x) = detail::phantom_structures[s].cls;
        });
      }
      if (t == 0) break;
      bool ok = true;
      for (const auto& sd : detail::phantom_structures)
        if (detail::class_dsc(prev_labels, labels, sd.cls) < 0.80) ok = false;
      if (ok) break;
    }

    // transient lesions, rejected until they do not persist
    std::vector<std::uint8_t> lesion_mask(static_cast<std::size_t>(voxels), 0);
    std::vector<detail::Ellipsoid> lesions;
    for (int attempt = 0;; ++attempt) {
      if (attempt > 200)
        throw std::runtime_error("phantom generator: transience bound unsatisfiable");
      lesions.clear();
      std::fill(lesion_mask.begin(), lesion_mask.end(), 0);
      const auto count = rng.uniform_int(4);  // 0..3
      for (std::int64_t l = 0; l < count; ++l) {
        const double margin = std::min(4.0, dm.h / 16.0);
        for (int place_try = 0;; ++place_try) {
          if (place_try > 200)
            throw std::runtime_error("phantom generator: no room for lesions");
          const double r = std::max(1.0, rng.uniform(0.025, 0.045) * dm.h);
          const double cy = rng.uniform(0.30, 0.72) * dm.h;
          const double cx = rng.uniform(0.25, 0.75) * dm.w;
          const double cz = rng.uniform(0.25, 0.75) * dm.slices;
          bool clear = true;
          for (const auto& sd : detail::phantom_structures) {
            const double dy = cy - sd.cy * dm.h, dx = cx - sd.cx * dm.w;
            const double min_d = r + std::max(sd.ry * dm.h, sd.rx * dm.w) + margin;
            if (dy * dy + dx * dx < min_d * min_d) clear = false;
          }
          if (clear) {
            lesions.push_back({cy, cx, cz, r, r, std::max(1.0, 0.12 * dm.slices)});
            break;
          }
        }
      }
      for (const auto& e : lesions)
        detail::rasterize(e, dm, [&](std::int64_t z, std::int64_t y, std::int64_t x) {
          lesion_mask[static_cast<std::size_t>((z * dm.h + y) * dm.w + x)] = 1;
        });
      bool transient = true;
      for (const auto& prev : lesion_masks)
        if (detail::mask_dsc(prev, lesion_mask) > 0.2) transient = false;
      if (transient) break;
    }

    // render: warm body on cold background, structures and lesions on top
    Tensor<float> vol({dm.slices, 1, dm.h, dm.w});
    for (std::int64_t i = 0; i < voxels; ++i) vol[i] = 5.0f;
    const detail::Ellipsoid body{0.5 * dm.h, 0.5 * dm.w, 0.5 * dm.slices,
                                 0.42 * dm.h, 0.40 * dm.w, 0.60 * dm.slices};
    detail::rasterize(body, dm, [&](std::int64_t z, std::int64_t y, std::int64_t x) {
      vol.at4(z, 0, y, x) = 12.0f;
    });
    for (std::size_t s = 0; s < detail::phantom_structures.size(); ++s) {
      const auto& sd = detail::phantom_structures[s];
      const auto e = detail::place(sd, dm, jit[s]);
      const float val = static_cast<float>(sd.intensity * jit[s].inten);
      detail::rasterize(e, dm, [&](std::int64_t z, std::int64_t y, std::int64_t x) {
        vol.at4(z, 0, y, x) = std::max(vol.at4(z, 0, y, x), val);
      });
    }
    for (const auto& e : lesions)
      detail::rasterize(e, dm, [&](std::int64_t z, std::int64_t y, std::int64_t x) {
        vol.at4(z, 0, y, x) = std::max(vol.at4(z, 0, y, x), 150.0f);
      });

    // 3x3 binomial blur per slice mimics low scanner resolution
    Tensor<float> blurred({dm.slices, 1, dm.h, dm.w});
    for (std::int64_t z = 0; z < dm.slices; ++z)
      for (std::int64_t y = 0; y < dm.h; ++y)
        for (std::int64_t x = 0; x < dm.w; ++x) {
          double acc = 0;
          for (int iy = -1; iy <= 1; ++iy)
            for (int ix = -1; ix <= 1; ++ix) {
              const std::int64_t yy = std::clamp<std::int64_t>(y + iy, 0, dm.h - 1);
              const std::int64_t xx = std::clamp<std::int64_t>(x + ix, 0, dm.w - 1);
              const int wgt = (2 - std::abs(iy)) * (2 - std::abs(ix));  // [1,2,1] x [1,2,1]
              acc += wgt * static_cast<double>(vol.at4(z, 0, yy, xx));
            }
          blurred.at4(z, 0, y, x) = static_cast<float>(acc / 16.0);
        }

    float mx = 0;
    for (std::int64_t i = 0; i < voxels; ++i) mx = std::max(mx, blurred[i]);
    const double sigma = 0.05 * mx;
    for (std::int64_t i = 0; i < voxels; ++i) {
      const double v = blurred[i] + sigma * rng.normal();
      blurred[i] = static_cast<float>(v < 0 ? 0 : v);
    }

    prev_labels = labels;
    lesion_masks.push_back(std::move(lesion_mask));
    series.scans.push_back({std::move(blurred), std::move(labels)});
  }
  return series;
}

/// All unordered time-point pairs (i, j), i < j, lexicographic; n(n-1)/2 total.
inline std::vector<ScanPair> enumerate_pairs(const PatientSeries& series,
                                             std::size_t patient_index = 0) {
  std::vector<ScanPair> out;
  const std::int64_t n = static_cast<std::int64_t>(series.scans.size());
  for (std::int64_t i = 1; i <= n; ++i)
    for (std::int64_t j = i + 1; j <= n; ++j)
      out.push_back({series.patient_id, series.patient_id, patient_index, patient_index, i, j});
  return out;
}

struct FoldSpec {
  int k = 5;
  std::map<std::string, int> fold_of;  // patient_id -> fold index [0, k)

  std::vector<std::string> test_patients(int fold) const {
    std::vector<std::string> out;
    for (const auto& [id, f] : fold_of)
      if (f == fold) out.push_back(id);
    return out;
  }
};

/// Patient-wise split: seeded shuffle then round-robin, so fold sizes differ
/// by at most one.
inline FoldSpec make_folds(const std::vector<std::string>& patient_ids, int k,
                           std::uint64_t seed) {
  detail::check(k >= 2, "make_folds: k must be >= 2");
  if (static_cast<int>(patient_ids.size()) < k)
    throw std::invalid_argument("make_folds: " + std::to_string(patient_ids.size()) +
                                " patients cannot fill " + std::to_string(k) + " folds");
  std::vector<std::string> ids = patient_ids;
  Rng rng(derive_seed(seed, 0x666f6c64ULL));  // fold stream
  rng.shuffle(ids.begin(), ids.end());
  FoldSpec spec;
  spec.k = k;
  for (std::size_t i = 0; i < ids.size(); ++i)
    spec.fold_of[ids[i]] = static_cast<int>(i % static_cast<std::size_t>(k));
  return spec;
}

enum class StreamVariant { same, unpaired, sequential };

inline const char* variant_name(StreamVariant v) {
  switch (v) {
    case StreamVariant::same: return "same";
    case StreamVariant::unpaired: return "unpaired";
    case StreamVariant::sequential: return "sequential";
  }
  return "?";
}

/// The input-stream ablation samplers.  "sequential" is the intended use:
/// all within-patient time-point pairs.  "same" feeds each scan to both
/// streams.  "unpaired" pairs each scan with a uniformly drawn scan of a
/// different patient.
inline std::vector<ScanPair> sample_stream_inputs(StreamVariant variant, const Dataset& dataset,
                                                  Rng& rng) {
  detail::check(!dataset.empty(), "sample_stream_inputs: dataset is empty");
  std::vector<ScanPair> out;
  switch (variant) {
    case StreamVariant::sequential:
      for (std::size_t p = 0; p < dataset.size(); ++p) {
        auto pairs = enumerate_pairs(dataset[p], p);
        out.insert(out.end(), pairs.begin(), pairs.end());
      }
      break;
    case StreamVariant::same:
      for (std::size_t p = 0; p < dataset.size(); ++p)
        for (std::size_t s = 0; s < dataset[p].scans.size(); ++s) {
          const auto tp = static_cast<std::int64_t>(s + 1);
          out.push_back({dataset[p].patient_id, dataset[p].patient_id, p, p, tp, tp});
        }
      break;
    case StreamVariant::unpaired: {
      if (dataset.size() < 2)
        throw std::invalid_argument("sample_stream_inputs: unpaired needs >= 2 patients");
      for (std::size_t p = 0; p < dataset.size(); ++p)
        for (std::size_t s = 0; s < dataset[p].scans.size(); ++s) {
          std::vector<std::pair<std::size_t, std::size_t>> others;
          for (std::size_t q = 0; q < dataset.size(); ++q) {
            if (q == p) continue;
            for (std::size_t t = 0; t < dataset[q].scans.size(); ++t) others.emplace_back(q, t);
          }
          const auto pick = others[rng.uniform_int(others.size())];
          out.push_back({dataset[p].patient_id, dataset[pick.first].patient_id, p, pick.first,
                         static_cast<std::int64_t>(s + 1),
                         static_cast<std::int64_t>(pick.second + 1)});
        }
      break;
    }
  }
  return out;
}

// ---- binary formats ----
// volume: magic "STPH", version u32, dims u64 x4 [slices,1,h,w], f32 data
// labels: magic "STPL", dims u64 x3 [slices,h,w], u8 data

inline constexpr std::uint32_t volume_version = 1;

inline void write_volume(std::ostream& out, const Tensor<float>& vol) {
  detail::check(vol.rank() == 4, "write_volume: volume must be 4-d");
  io::put_bytes(out, "STPH", 4);
  io::put_u32(out, volume_version);
  for (std::size_t i = 0; i < 4; ++i) io::put_u64(out, static_cast<std::uint64_t>(vol.dim(i)));
  io::put_f32_array(out, vol.data(), vol.numel());
}

inline Tensor<float> read_volume(std::istream& in) {
  io::check_magic(in, "STPH", "volume");
  const std::uint32_t ver = io::get_u32(in, "volume version");
  if (ver != volume_version)
    throw io_error(io_error::kind::bad_magic, "unsupported volume version " + std::to_string(ver));
  const Shape dims = io::get_dims(in, 4, "volume dims");
  Tensor<float> vol(dims);
  io::get_f32_array(in, vol.data(), vol.numel(), "volume data");
  return vol;
}

inline void write_labels(std::ostream& out, const Tensor<std::int32_t>& labels) {
  detail::check(labels.rank() == 3, "write_labels: labels must be 3-d");
  io::put_bytes(out, "STPL", 4);
  for (std::size_t i = 0; i < 3; ++i) io::put_u64(out, static_cast<std::uint64_t>(labels.dim(i)));
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(labels.numel()));
  for (std::int64_t i = 0; i < labels.numel(); ++i) {
    detail::check(labels[i] >= 0 && labels[i] < 256, "write_labels: label out of byte range");
    bytes[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(labels[i]);
  }
  io::put_bytes(out, bytes.data(), bytes.size());
}

inline Tensor<std::int32_t> read_labels(std::istream& in) {
  io::check_magic(in, "STPL", "labels");
  const Shape dims = io::get_dims(in, 3, "label dims");
  Tensor<std::int32_t> labels(dims);
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(labels.numel()));
  io::get_bytes(in, bytes.data(), bytes.size(), "label data");
  for (std::int64_t i = 0; i < labels.numel(); ++i)
    labels[i] = static_cast<std::int32_t>(bytes[static_cast<std::size_t>(i)]);
  return labels;
}

/// Writes one patient's files into dir and appends manifest lines
/// "patient_id,scan_index,volume_path,label_path" (paths relative to dir).
inline void write_series(const std::filesystem::path& dir, const PatientSeries& series,
                         std::ostream& manifest) {
  detail::check(series.patient_id.find(',') == std::string::npos,
                "write_series: patient id must not contain commas");
  std::filesystem::create_directories(dir);
  for (std::size_t s = 0; s < series.scans.size(); ++s) {
    const std::string vol_name = series.patient_id + "_t" + std::to_string(s + 1) + ".stph";
    const std::string lab_name = series.patient_id + "_t" + std::to_string(s + 1) + ".stpl";
    {
      std::ofstream out(dir / vol_name, std::ios::binary);
      if (!out) throw io_error(io_error::kind::open_failed, "cannot write " + vol_name);
      write_volume(out, series.scans[s].volume);
    }
    {
      std::ofstream out(dir / lab_name, std::ios::binary);
      if (!out) throw io_error(io_error::kind::open_failed, "cannot write " + lab_name);
      write_labels(out, series.scans[s].labels);
    }
    manifest << series.patient_id << "," << (s + 1) << "," << vol_name << "," << lab_name << "\n";
  }
}

inline void write_dataset(const std::filesystem::path& dir, const Dataset& dataset) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.txt");
  if (!manifest) throw io_error(io_error::kind::open_failed, "cannot write manifest");
  for (const auto& series : dataset) write_series(dir, series, manifest);
}

/// Reads a manifest (see write_series) and loads every scan; patients keep
/// their manifest order, scans their time order.
inline Dataset load_dataset(const std::filesystem::path& manifest_path) {
  std::ifstream manifest(manifest_path);
  if (!manifest)
    throw io_error(io_error::kind::open_failed, "cannot open " + manifest_path.string());
  const auto dir = manifest_path.parent_path();

  Dataset dataset;
  std::map<std::string, std::size_t> index_of;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(manifest, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::array<std::string, 4> field;
    std::size_t start = 0;
    for (int f = 0; f < 4; ++f) {
      const auto comma = line.find(',', start);
      if (f < 3 && comma == std::string::npos)
        throw io_error(io_error::kind::truncated,
                       "manifest line " + std::to_string(line_no) + " is malformed");
      field[f] = line.substr(start, comma == std::string::npos ? std::string::npos
                                                               : comma - start);
      start = comma + 1;
    }
    auto [it, inserted] = index_of.try_emplace(field[0], dataset.size());
    if (inserted) dataset.push_back({field[0], {}});
    auto& series = dataset[it->second];
    const std::size_t scan_index = std::stoull(field[1]);
    if (scan_index != series.scans.size() + 1)
      throw io_error(io_error::kind::truncated, "manifest lists scans of " + field[0] +
                                                    " out of time order at line " +
                                                    std::to_string(line_no));
    Scan scan;
    {
      std::ifstream in(dir / field[2], std::ios::binary);
      if (!in) throw io_error(io_error::kind::open_failed, "cannot open " + field[2]);
      scan.volume = read_volume(in);
    }
    {
      std::ifstream in(dir / field[3], std::ios::binary);
      if (!in) throw io_error(io_error::kind::open_failed, "cannot open " + field[3]);
      scan.labels = read_labels(in);
    }
    if (scan.volume.dim(0) != scan.labels.dim(0) || scan.volume.dim(2) != scan.labels.dim(1) ||
        scan.volume.dim(3) != scan.labels.dim(2))
      throw io_error(io_error::kind::dim_overflow,
                     "volume/label dims disagree for " + field[0] + " scan " + field[1]);
    series.scans.push_back(std::move(scan));
  }
  if (dataset.empty())
    throw io_error(io_error::kind::truncated, "manifest " + manifest_path.string() + " is empty");
  return dataset;
}

/// Cohort helper: scan_counts[i] scans for patient i, ids p01, p02, ...
inline Dataset generate_cohort(std::uint64_t seed, const std::vector<int>& scan_counts,
                               const PhantomDims& dm) {
  Dataset out;
  for (std::size_t i = 0; i < scan_counts.size(); ++i) {
    std::ostringstream id;
    id << "p" << (i + 1 < 10 ? "0" : "") << (i + 1);
    out.push_back(
        generate_patient(derive_seed(seed, 0x636f686fULL, i), scan_counts[i], dm, id.str()));
  }
  return out;
}

/// One 2D sample slice: image normalized to [0,1] per slice, labels as stored.
inline std::pair<Tensor<float>, Tensor<std::int32_t>> slice_sample(const Scan& scan,
                                                                   std::int64_t slice) {
  const std::int64_t h = scan.volume.dim(2), w = scan.volume.dim(3);
  Tensor<float> img({1, 1, h, w});
  float mx = 0;
  for (std::int64_t q = 0; q < h * w; ++q)
    mx = std::max(mx, scan.volume.at4(slice, 0, q / w, q % w));
  const float inv = mx > 0 ? 1.0f / mx : 0.0f;
  for (std::int64_t q = 0; q < h * w; ++q)
    img.at4(0, 0, q / w, q % w) = scan.volume.at4(slice, 0, q / w, q % w) * inv;
  Tensor<std::int32_t> lab({1, h, w});
  for (std::int64_t q = 0; q < h * w; ++q)
    lab.at3(0, q / w, q % w) = scan.labels.at3(slice, q / w, q % w);
  return {std::move(img), std::move(lab)};
}

}  // namespace stdsnn
