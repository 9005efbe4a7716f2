#pragma once

// Datasets: IDX ingestion (plain or gzip), seeded synthetic blobs,
// corruption suite and seeded batching.

#include <zlib.h>

#include <array>
#include <cstring>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "spikelat/tensor.hpp"

namespace spikelat {

struct Dataset {
  Tensor images;            // [N,C,H,W], values in [0,1]
  std::vector<int> labels;  // [N], in [0, num_classes)
  std::size_t num_classes = 0;
  std::string split;

  std::size_t size() const { return labels.size(); }
  Shape sample_shape() const { return Shape(images.shape().begin() + 1, images.shape().end()); }
};

namespace detail {

inline std::vector<unsigned char> read_file_bytes(const std::string& path) {
  const bool gz = path.size() > 3 && path.compare(path.size() - 3, 3, ".gz") == 0;
  std::vector<unsigned char> out;
  if (gz) {
    gzFile f = gzopen(path.c_str(), "rb");
    if (!f) throw FormatError("cannot open '" + path + "'", 0);
    unsigned char buf[1 << 16];
    int n;
    while ((n = gzread(f, buf, sizeof buf)) > 0) out.insert(out.end(), buf, buf + n);
    const bool bad = n < 0;
    gzclose(f);
    if (bad) throw FormatError("corrupt gzip stream in '" + path + "'", out.size());
    return out;
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'", 0);
  out.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  return out;
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t off,
                               const std::string& path) {
  if (off + 4 > b.size())
    throw FormatError("'" + path + "' truncated in header: expected at least " +
                          std::to_string(off + 4) + " bytes, got " + std::to_string(b.size()),
                      b.size());
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

inline void put_be32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>(v >> s));
}

inline void write_file_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
  const bool gz = path.size() > 3 && path.compare(path.size() - 3, 3, ".gz") == 0;
  if (gz) {
    gzFile f = gzopen(path.c_str(), "wb");
    if (!f || gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size())) !=
                  static_cast<int>(bytes.size()))
      throw Error("cannot write '" + path + "'");
    gzclose(f);
    return;
  }
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("cannot write '" + path + "'");
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

// Reads an IDX image file (u8, N x H x W) and its label file. Pixels are
// scaled by 1/255. Paths ending in ".gz" are decompressed transparently.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  const auto ib = detail::read_file_bytes(images_path);
  const auto lb = detail::read_file_bytes(labels_path);
  const std::uint32_t im = detail::read_be32(ib, 0, images_path);
  if (im != kIdxImagesMagic)
    throw FormatError("'" + images_path + "': bad IDX image magic " + std::to_string(im), 0);
  const std::uint32_t lm = detail::read_be32(lb, 0, labels_path);
  if (lm != kIdxLabelsMagic)
    throw FormatError("'" + labels_path + "': bad IDX label magic " + std::to_string(lm), 0);
  const std::size_t n = detail::read_be32(ib, 4, images_path);
  const std::size_t h = detail::read_be32(ib, 8, images_path);
  const std::size_t w = detail::read_be32(ib, 12, images_path);
  const std::size_t nl = detail::read_be32(lb, 4, labels_path);
  if (n != nl)
    throw FormatError("image count " + std::to_string(n) + " != label count " + std::to_string(nl), 4);
  if (n == 0 || h == 0 || w == 0) throw FormatError("'" + images_path + "': empty IDX dimensions", 4);
  const std::size_t expect_img = 16 + n * h * w, expect_lab = 8 + n;
  if (ib.size() < expect_img)
    throw FormatError("'" + images_path + "' truncated: expected " + std::to_string(expect_img) +
                          " bytes, got " + std::to_string(ib.size()),
                      ib.size());
  if (lb.size() < expect_lab)
    throw FormatError("'" + labels_path + "' truncated: expected " + std::to_string(expect_lab) +
                          " bytes, got " + std::to_string(lb.size()),
                      lb.size());
  Dataset ds;
  ds.images = Tensor({n, 1, h, w});
  for (std::size_t i = 0; i < n * h * w; ++i) ds.images[i] = static_cast<double>(ib[16 + i]) / 255.0;
  ds.labels.resize(n);
  int mx = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels[i] = lb[8 + i];
    mx = std::max(mx, ds.labels[i]);
  }
  ds.num_classes = std::max<std::size_t>(2, static_cast<std::size_t>(mx) + 1);
  return ds;
}

// Writes single-channel datasets in IDX layout (pixels rounded to u8).
inline void write_idx(const Dataset& ds, const std::string& images_path, const std::string& labels_path) {
  if (ds.images.rank() != 4 || ds.images.dim(1) != 1)
    throw DimensionError("write_idx supports [N,1,H,W] images only");
  const std::size_t n = ds.images.dim(0), h = ds.images.dim(2), w = ds.images.dim(3);
  std::vector<unsigned char> ib, lb;
  detail::put_be32(ib, kIdxImagesMagic);
  detail::put_be32(ib, static_cast<std::uint32_t>(n));
  detail::put_be32(ib, static_cast<std::uint32_t>(h));
  detail::put_be32(ib, static_cast<std::uint32_t>(w));
  for (double v : ds.images.data())
    ib.push_back(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  detail::put_be32(lb, kIdxLabelsMagic);
  detail::put_be32(lb, static_cast<std::uint32_t>(n));
  for (int l : ds.labels) lb.push_back(static_cast<unsigned char>(l));
  detail::write_file_bytes(images_path, ib);
  detail::write_file_bytes(labels_path, lb);
}

struct BlobsConfig {
  std::size_t n_per_class = 100;
  std::size_t classes = 3;
  std::size_t height = 8;
  std::size_t width = 8;
  std::uint64_t seed = 1;
  double spread = 0.1;
};

// Gaussian clusters rendered as 1 x H x W images, clamped to [0,1]. Samples
// are class-interleaved (0,1,..,C-1,0,1,..).
inline Dataset synth_blobs(const BlobsConfig& cfg) {
  if (cfg.classes < 2) throw ContractError("synth_blobs needs at least 2 classes");
  const std::size_t d = cfg.height * cfg.width;
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> mean_dist(0.15, 0.85);
  std::vector<std::vector<double>> means(cfg.classes, std::vector<double>(d));
  for (auto& m : means)
    for (double& v : m) v = mean_dist(rng);
  std::normal_distribution<double> noise(0.0, 1.0);
  const std::size_t n = cfg.n_per_class * cfg.classes;
  Dataset ds;
  ds.images = Tensor({n, 1, cfg.height, cfg.width});
  ds.labels.resize(n);
  ds.num_classes = cfg.classes;
  ds.split = "blobs";
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % cfg.classes;
    ds.labels[i] = static_cast<int>(c);
    for (std::size_t j = 0; j < d; ++j)
      ds.images[i * d + j] = std::clamp(means[c][j] + cfg.spread * noise(rng), 0.0, 1.0);
  }
  return ds;
}

inline Dataset subset(const Dataset& ds, std::span<const std::size_t> indices) {
  const std::size_t per = ds.images.size() / std::max<std::size_t>(ds.size(), 1);
  Shape s = ds.images.shape();
  s[0] = indices.size();
  Dataset out;
  out.images = Tensor(s);
  out.labels.resize(indices.size());
  out.num_classes = ds.num_classes;
  out.split = ds.split;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= ds.size()) throw ContractError("subset index out of range");
    std::copy_n(ds.images.raw() + indices[i] * per, per, out.images.raw() + i * per);
    out.labels[i] = ds.labels[indices[i]];
  }
  return out;
}

// First `n` samples and the rest.
inline std::pair<Dataset, Dataset> split_at(const Dataset& ds, std::size_t n) {
  if (n == 0 || n >= ds.size()) throw ContractError("split point must leave both parts non-empty");
  std::vector<std::size_t> a(n), b(ds.size() - n);
  std::iota(a.begin(), a.end(), 0);
  std::iota(b.begin(), b.end(), n);
  return {subset(ds, a), subset(ds, b)};
}

// Replaces a `fraction` of labels with a different, uniformly drawn class.
inline Dataset with_label_noise(Dataset ds, double fraction, std::uint64_t seed) {
  if (fraction <= 0.0) return ds;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> shift(1, static_cast<int>(ds.num_classes) - 1);
  for (int& l : ds.labels)
    if (u(rng) < fraction) l = (l + shift(rng)) % static_cast<int>(ds.num_classes);
  return ds;
}

struct Batch {
  Tensor images;
  std::vector<int> labels;
  std::vector<std::size_t> indices;
};

// Index partition of [0,n); the last partial batch is kept.
inline std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size,
                                                     std::uint64_t seed, bool shuffle) {
  if (batch_size < 1) throw ContractError("batch_size must be >= 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  if (shuffle) {
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch_size)
    out.emplace_back(order.begin() + i, order.begin() + std::min(n, i + batch_size));
  return out;
}

inline Batch gather(const Dataset& ds, std::vector<std::size_t> indices) {
  Dataset sub = subset(ds, indices);
  return {std::move(sub.images), std::move(sub.labels), std::move(indices)};
}

enum class Corruption { GaussianNoise, ShotNoise, Brightness, Contrast, Pixelate };

inline constexpr std::array<Corruption, 5> kCorruptionSuite{
    Corruption::GaussianNoise, Corruption::ShotNoise, Corruption::Brightness, Corruption::Contrast,
    Corruption::Pixelate};

inline const char* to_string(Corruption c) {
  switch (c) {
    case Corruption::GaussianNoise: return "gaussian-noise";
    case Corruption::ShotNoise: return "shot-noise";
    case Corruption::Brightness: return "brightness";
    case Corruption::Contrast: return "contrast";
    case Corruption::Pixelate: return "pixelate";
  }
  return "?";
}

inline Corruption parse_corruption(const std::string& s) {
  for (Corruption c : kCorruptionSuite)
    if (s == to_string(c)) return c;
  throw ContractError("unknown corruption type '" + s + "'");
}

// Severity 1..5 parameters for each corruption.
struct CorruptionParams {
  std::array<double, 5> gaussian_sigma{0.08, 0.12, 0.18, 0.26, 0.38};
  std::array<double, 5> shot_photons{60, 25, 12, 5, 3};
  std::array<double, 5> brightness_shift{0.1, 0.2, 0.3, 0.4, 0.5};
  std::array<double, 5> contrast_factor{0.4, 0.3, 0.2, 0.1, 0.05};
  std::array<double, 5> pixelate_block{2, 3, 4, 5, 6};
};

// Severity 0 is the identity. Output is clamped to [0,1]; labels unchanged.
inline Dataset corrupt(const Dataset& ds, Corruption type, int severity, std::uint64_t seed,
                       const CorruptionParams& params = {}) {
  if (severity < 0 || severity > 5) throw ContractError("severity must be in 0..5");
  Dataset out = ds;
  if (severity == 0) return out;
  const std::size_t s = static_cast<std::size_t>(severity - 1);
  std::mt19937_64 rng(seed);
  Tensor& x = out.images;
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), per = c * h * w;
  switch (type) {
    case Corruption::GaussianNoise: {
      std::normal_distribution<double> g(0.0, params.gaussian_sigma[s]);
      for (double& v : x.data()) v += g(rng);
      break;
    }
    case Corruption::ShotNoise: {
      const double lam = params.shot_photons[s];
      for (double& v : x.data()) {
        std::poisson_distribution<int> p(std::max(v, 0.0) * lam);
        v = static_cast<double>(p(rng)) / lam;
      }
      break;
    }
    case Corruption::Brightness:
      for (double& v : x.data()) v += params.brightness_shift[s];
      break;
    case Corruption::Contrast:
      for (std::size_t i = 0; i < n; ++i) {
        double m = 0.0;
        for (std::size_t j = 0; j < per; ++j) m += x[i * per + j];
        m /= static_cast<double>(per);
        for (std::size_t j = 0; j < per; ++j)
          x[i * per + j] = (x[i * per + j] - m) * params.contrast_factor[s] + m;
      }
      break;
    case Corruption::Pixelate: {
      const auto b = static_cast<std::size_t>(params.pixelate_block[s]);
      for (std::size_t p = 0; p < n * c; ++p)
        for (std::size_t by = 0; by < h; by += b)
          for (std::size_t bx = 0; bx < w; bx += b) {
            const std::size_t ey = std::min(h, by + b), ex = std::min(w, bx + b);
            double m = 0.0;
            for (std::size_t y = by; y < ey; ++y)
              for (std::size_t xx = bx; xx < ex; ++xx) m += x[(p * h + y) * w + xx];
            m /= static_cast<double>((ey - by) * (ex - bx));
            for (std::size_t y = by; y < ey; ++y)
              for (std::size_t xx = bx; xx < ex; ++xx) x[(p * h + y) * w + xx] = m;
          }
      break;
    }
  }
  for (double& v : x.data()) v = std::clamp(v, 0.0, 1.0);
  return out;
}

}  // namespace spikelat
