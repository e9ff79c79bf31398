// Copyright 2026 The gradflow Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "gradflow/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "gradflow/detail/binio.hpp"
#include "json.hpp"

namespace gradflow {

namespace {
constexpr char kDatasetMagic[8] = {'G', 'F', 'L', 'O', 'W', 'D', 'S', '1'};
constexpr std::uint32_t kDatasetVersion = 1;
constexpr std::size_t kCalibrationDraws = 8192;

double sq(double v) { return v * v; }

// Quadratic form of the ellipse at pixel u; support is q <= 1.
double ellipse_q(const BlobSpec& spec, double row, double col) {
  const double dy = row - spec.center[0];
  const double dx = col - spec.center[1];
  const double c = std::cos(spec.rotation), s = std::sin(spec.rotation);
  const double v1 = c * dy + s * dx;
  const double v2 = -s * dy + c * dx;
  return sq(v1 / spec.semi_axes[0]) + sq(v2 / spec.semi_axes[1]);
}

}  // namespace

std::size_t Dataset::positives() const {
  std::size_t n = 0;
  for (std::uint8_t l : labels) n += l != 0;
  return n;
}

std::string rule_name(LabelRuleKind k) {
  switch (k) {
    case LabelRuleKind::kBrightnessThreshold:
      return "brightness-threshold";
    case LabelRuleKind::kExtentThreshold:
      return "extent-threshold";
    case LabelRuleKind::kAspectThreshold:
      return "aspect-threshold";
    case LabelRuleKind::kMixedLogistic:
      return "mixed-logistic";
  }
  return "unknown";
}

LabelRuleKind rule_from_name(const std::string& name) {
  if (name == "brightness-threshold") {
    return LabelRuleKind::kBrightnessThreshold;
  }
  if (name == "extent-threshold") return LabelRuleKind::kExtentThreshold;
  if (name == "aspect-threshold") return LabelRuleKind::kAspectThreshold;
  if (name == "mixed-logistic") return LabelRuleKind::kMixedLogistic;
  throw ConfigError("unknown label rule '" + name + "'");
}

// Integral of peak * exp(-falloff*q) over the ellipse support: the area
// element of {q <= s} is pi*a*b*ds, so mass = peak*pi*a*b*(1 - e^-f)/f.
double blob_mass(const BlobSpec& spec) {
  const double f = spec.falloff;
  const double area = std::numbers::pi * spec.semi_axes[0] * spec.semi_axes[1];
  const double profile = f > 0.0 ? (1.0 - std::exp(-f)) / f : 1.0;
  return spec.peak * area * profile;
}

// tr(C) of the continuum profile: (a^2 + b^2) * E[s] / 2 with
// E[s] = (1 - (1+f) e^-f) / (f (1 - e^-f)) for density e^{-f s} on s in [0,1].
double blob_extent(const BlobSpec& spec) {
  const double f = spec.falloff;
  double es;
  if (f > 0.0) {
    const double em = std::exp(-f);
    es = (1.0 - (1.0 + f) * em) / (f * (1.0 - em));
  } else {
    es = 0.5;
  }
  return 0.5 * (sq(spec.semi_axes[0]) + sq(spec.semi_axes[1])) * es;
}

double blob_log_aspect(const BlobSpec& spec) {
  return std::log(spec.semi_axes[0] / spec.semi_axes[1]);
}

Tensor render_blob(const BlobSpec& spec, std::size_t resolution,
                   Rng* noise_rng) {
  Tensor img({resolution, resolution});
  for (std::size_t i = 0; i < resolution; ++i) {
    for (std::size_t j = 0; j < resolution; ++j) {
      const double q = ellipse_q(spec, static_cast<double>(i),
                                 static_cast<double>(j));
      if (q > 1.0) continue;
      double v = spec.peak * std::exp(-spec.falloff * q);
      if (noise_rng != nullptr && spec.noise > 0.0) {
        v += spec.noise * noise_rng->normal();
      }
      img.at2(i, j) = std::clamp(v, 0.0, 1.0);
    }
  }
  return img;
}

Tensor mask(const Tensor& image, const BlobSpec& blob) {
  if (image.rank() != 2) throw ShapeError("mask: (H,W) image expected");
  Tensor out = image;
  for (std::size_t i = 0; i < image.shape()[0]; ++i) {
    for (std::size_t j = 0; j < image.shape()[1]; ++j) {
      if (ellipse_q(blob, static_cast<double>(i), static_cast<double>(j)) >
          1.0) {
        out.at2(i, j) = 0.0;
      }
    }
  }
  return out;
}

namespace {

BlobSpec draw_spec(const BlobRanges& r, std::size_t resolution, Rng& rng) {
  BlobSpec spec;
  const double a = rng.uniform(r.semi_axis_major[0], r.semi_axis_major[1]);
  const double b_hi = std::min(r.semi_axis_minor[1], a);
  const double b = rng.uniform(r.semi_axis_minor[0], b_hi);
  spec.semi_axes = {a, std::min(b, a)};
  const double reach = a + r.margin;
  const double lo = reach, hi = static_cast<double>(resolution - 1) - reach;
  spec.center = {rng.uniform(lo, hi), rng.uniform(lo, hi)};
  spec.rotation = rng.uniform(0.0, std::numbers::pi);
  spec.peak = rng.uniform(r.peak[0], r.peak[1]);
  spec.falloff = r.falloff;
  spec.noise = r.noise;
  return spec;
}

double rule_variable(const LabelRule& rule, const BlobSpec& spec) {
  switch (rule.kind) {
    case LabelRuleKind::kBrightnessThreshold:
      return blob_mass(spec);
    case LabelRuleKind::kExtentThreshold:
      return blob_extent(spec);
    case LabelRuleKind::kAspectThreshold:
      return blob_log_aspect(spec);
    case LabelRuleKind::kMixedLogistic:
      return 0.0;  // handled separately
  }
  return 0.0;
}

struct MixedStats {
  std::array<double, 2> mean_sd_mass;
  std::array<double, 2> mean_sd_extent;
  std::array<double, 2> mean_sd_aspect;
  double intercept = 0.0;
};

double mixed_score(const LabelRule& rule, const MixedStats& st,
                   const BlobSpec& spec) {
  const double z0 =
      (blob_mass(spec) - st.mean_sd_mass[0]) / st.mean_sd_mass[1];
  const double z1 =
      (blob_extent(spec) - st.mean_sd_extent[0]) / st.mean_sd_extent[1];
  const double z2 =
      (blob_log_aspect(spec) - st.mean_sd_aspect[0]) / st.mean_sd_aspect[1];
  return rule.mixed_weights[0] * z0 + rule.mixed_weights[1] * z1 +
         rule.mixed_weights[2] * z2 + st.intercept;
}

double logistic(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                  : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace

Dataset generate(std::size_t n, std::size_t resolution,
                 const BlobRanges& ranges, const LabelRule& rule,
                 std::uint64_t seed) {
  if (n == 0) throw ConfigError("generate: dataset size must be positive");
  if (resolution < 4) throw ConfigError("generate: resolution too small");
  const double reach = ranges.semi_axis_major[1] + ranges.margin;
  if (2.0 * reach >= static_cast<double>(resolution - 1)) {
    throw ConfigError(
        "generate: blob cannot fit inside the image with the given margin");
  }
  if (!(rule.positive_rate > 0.0 && rule.positive_rate < 1.0)) {
    throw ConfigError("generate: positive rate must be in (0,1)");
  }

  const Rng base(seed);

  // Calibrate the labeling threshold (or logistic intercept) on a fixed
  // sample of the parameter distribution, so the realized positive rate
  // tracks the target for any ranges.
  Rng calib = base.fork(0x63616c69);
  std::vector<BlobSpec> calib_specs;
  calib_specs.reserve(kCalibrationDraws);
  for (std::size_t i = 0; i < kCalibrationDraws; ++i) {
    calib_specs.push_back(draw_spec(ranges, resolution, calib));
  }

  double threshold = 0.0;
  MixedStats stats{};
  if (rule.kind != LabelRuleKind::kMixedLogistic) {
    std::vector<double> vals;
    vals.reserve(kCalibrationDraws);
    for (const BlobSpec& s : calib_specs) {
      vals.push_back(rule_variable(rule, s));
    }
    std::sort(vals.begin(), vals.end());
    const double q = 1.0 - rule.positive_rate;
    const std::size_t idx = std::min(
        vals.size() - 1, static_cast<std::size_t>(q * (vals.size() - 1)));
    threshold = vals[idx];
  } else {
    auto stats_of = [&](auto&& f) -> std::array<double, 2> {
      double sum = 0.0, sum_sq = 0.0;
      for (const BlobSpec& s : calib_specs) {
        const double v = f(s);
        sum += v;
        sum_sq += v * v;
      }
      const double mean = sum / calib_specs.size();
      const double var =
          std::max(1e-12, sum_sq / calib_specs.size() - mean * mean);
      return {mean, std::sqrt(var)};
    };
    stats.mean_sd_mass = stats_of(blob_mass);
    stats.mean_sd_extent = stats_of(blob_extent);
    stats.mean_sd_aspect = stats_of(blob_log_aspect);
    // Bisection on the intercept so the mean probability hits the target.
    double lo = -30.0, hi = 30.0;
    for (int it = 0; it < 100; ++it) {
      stats.intercept = 0.5 * (lo + hi);
      double mean_p = 0.0;
      for (const BlobSpec& s : calib_specs) {
        mean_p += logistic(mixed_score(rule, stats, s));
      }
      mean_p /= calib_specs.size();
      (mean_p > rule.positive_rate ? hi : lo) = stats.intercept;
    }
  }

  Dataset ds;
  ds.resolution = resolution;
  ds.seed = seed;
  ds.rule = rule;
  ds.images.reserve(n);
  ds.labels.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = base.fork(i + 1);
    const BlobSpec spec = draw_spec(ranges, resolution, rng);
    bool label;
    if (rule.kind == LabelRuleKind::kMixedLogistic) {
      label = rng.uniform() < logistic(mixed_score(rule, stats, spec));
    } else {
      label = rule_variable(rule, spec) > threshold;
    }
    ds.images.push_back(render_blob(spec, resolution, &rng));
    ds.labels.push_back(label ? 1 : 0);
  }
  return ds;
}

std::pair<Dataset, Dataset> stratified_split(const Dataset& ds,
                                             double test_fraction,
                                             std::uint64_t seed) {
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) {
    throw ConfigError("split: test fraction must be in [0,1)");
  }
  Rng rng(splitmix64(seed ^ 0x73706c69));
  Dataset train, test;
  train.resolution = test.resolution = ds.resolution;
  train.seed = test.seed = ds.seed;
  train.rule = test.rule = ds.rule;
  for (int cls = 0; cls < 2; ++cls) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      if (ds.labels[i] == cls) idx.push_back(i);
    }
    for (std::size_t i = idx.size(); i > 1; --i) {
      std::swap(idx[i - 1], idx[rng.index(i)]);
    }
    const std::size_t n_test = static_cast<std::size_t>(
        std::lround(test_fraction * static_cast<double>(idx.size())));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      Dataset& dst = i < n_test ? test : train;
      dst.images.push_back(ds.images[idx[i]]);
      dst.labels.push_back(ds.labels[idx[i]]);
    }
  }
  return {std::move(train), std::move(test)};
}

void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open dataset for writing: " + path);
  os.write(kDatasetMagic, sizeof(kDatasetMagic));
  detail::put_u32(os, kDatasetVersion);
  detail::put_u8(os, 1);
  detail::put_u64(os, ds.size());
  detail::put_u32(os, static_cast<std::uint32_t>(ds.resolution));
  detail::put_u32(os, static_cast<std::uint32_t>(ds.resolution));
  detail::put_u64(os, ds.seed);
  detail::put_u8(os, static_cast<std::uint8_t>(ds.rule.kind));
  detail::put_f64(os, ds.rule.positive_rate);
  for (double w : ds.rule.mixed_weights) detail::put_f64(os, w);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (double v : ds.images[i].values()) detail::put_f64(os, v);
    detail::put_u8(os, ds.labels[i]);
  }
  if (!os) throw DataError("dataset write failed: " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open dataset: " + path);
  char magic[8];
  if (!is.read(magic, 8) || !std::equal(magic, magic + 8, kDatasetMagic)) {
    throw DataError("not a dataset file: " + path);
  }
  if (detail::get_u32(is) != kDatasetVersion) {
    throw DataError("unsupported dataset version");
  }
  if (detail::get_u8(is) != 1) {
    throw DataError("unsupported dataset endianness tag");
  }
  Dataset ds;
  const std::uint64_t n = detail::get_u64(is);
  const std::uint32_t h = detail::get_u32(is);
  const std::uint32_t w = detail::get_u32(is);
  if (h != w) throw DataError("dataset images must be square");
  ds.resolution = h;
  ds.seed = detail::get_u64(is);
  const std::uint8_t kind = detail::get_u8(is);
  if (kind > 3) throw DataError("unknown label rule in dataset");
  ds.rule.kind = static_cast<LabelRuleKind>(kind);
  ds.rule.positive_rate = detail::get_f64(is);
  for (double& mw : ds.rule.mixed_weights) mw = detail::get_f64(is);
  ds.images.reserve(n);
  ds.labels.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    std::vector<double> pixels(static_cast<std::size_t>(h) * w);
    for (double& v : pixels) v = detail::get_f64(is);
    ds.images.push_back(Tensor::from_external({h, w}, std::move(pixels)));
    const std::uint8_t label = detail::get_u8(is);
    if (label > 1) throw DataError("dataset labels must be 0 or 1");
    ds.labels.push_back(label);
  }
  return ds;
}

void write_dataset_manifest(const Dataset& ds, const std::string& json_path,
                            const std::string& data_file) {
  nlohmann::json j;
  j["format_version"] = 1;
  j["data_file"] = data_file;
  j["samples"] = ds.size();
  j["resolution"] = ds.resolution;
  j["seed"] = ds.seed;
  j["rule"] = rule_name(ds.rule.kind);
  j["positive_rate_target"] = ds.rule.positive_rate;
  j["positives"] = ds.positives();
  j["positive_rate_realized"] =
      static_cast<double>(ds.positives()) / static_cast<double>(ds.size());
  std::ofstream os(json_path);
  if (!os) throw DataError("cannot write manifest: " + json_path);
  os << j.dump(2) << '\n';
}

Tensor read_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open PGM: " + path);
  std::string magic;
  is >> magic;
  if (magic != "P5") throw DataError("only binary (P5) PGM is supported");
  auto next_int = [&is, &path]() -> long {
    // skip whitespace and '#' comments
    while (true) {
      const int c = is.peek();
      if (c == '#') {
        std::string line;
        std::getline(is, line);
      } else if (std::isspace(c)) {
        is.get();
      } else {
        break;
      }
    }
    long v = 0;
    if (!(is >> v)) throw DataError("malformed PGM header: " + path);
    return v;
  };
  const long w = next_int();
  const long h = next_int();
  const long maxval = next_int();
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535) {
    throw DataError("unsupported PGM dimensions in " + path);
  }
  is.get();  // single whitespace after maxval
  const bool wide = maxval > 255;
  Tensor img({static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
  for (std::size_t i = 0; i < img.size(); ++i) {
    int v;
    if (wide) {
      const int hi = is.get(), lo = is.get();  // big-endian per PGM spec
      if (lo == std::char_traits<char>::eof()) {
        throw DataError("truncated PGM: " + path);
      }
      v = hi * 256 + lo;
    } else {
      v = is.get();
      if (v == std::char_traits<char>::eof()) {
        throw DataError("truncated PGM: " + path);
      }
    }
    img[i] = static_cast<double>(v) / static_cast<double>(maxval);
  }
  return img;
}

Dataset import_raster_list(const std::string& csv_path) {
  std::ifstream is(csv_path);
  if (!is) throw DataError("cannot open import list: " + csv_path);
  Dataset ds;
  ds.resolution = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string img_path, mask_path, label_str;
    std::getline(ls, img_path, ',');
    std::getline(ls, mask_path, ',');
    std::getline(ls, label_str, ',');
    if (img_path.empty() || label_str.empty()) {
      throw DataError("import line " + std::to_string(line_no) +
                      ": expected image,mask,label");
    }
    Tensor img = read_pgm(img_path);
    if (img.shape()[0] != img.shape()[1]) {
      throw DataError("imported images must be square: " + img_path);
    }
    if (!mask_path.empty()) {
      const Tensor m = read_pgm(mask_path);
      if (!m.same_shape(img)) {
        throw DataError("mask shape mismatch for " + img_path);
      }
      for (std::size_t i = 0; i < img.size(); ++i) {
        if (m[i] == 0.0) img[i] = 0.0;
      }
    }
    if (ds.resolution == 0) {
      ds.resolution = img.shape()[0];
    } else if (img.shape()[0] != ds.resolution) {
      throw DataError("imported images must share one resolution");
    }
    const int label = std::stoi(label_str);
    if (label != 0 && label != 1) {
      throw DataError("import labels must be 0 or 1");
    }
    ds.images.push_back(std::move(img));
    ds.labels.push_back(static_cast<std::uint8_t>(label));
  }
  if (ds.size() == 0) throw DataError("import list is empty");
  return ds;
}

}  // namespace gradflow
