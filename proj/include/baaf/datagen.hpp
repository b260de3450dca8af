#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "baaf/tensor.hpp"

namespace baaf {

struct Provenance {
  enum class Kind { synthetic, file } kind = Kind::synthetic;
  std::uint64_t seed = 0;
  std::string path;
};

struct SegSample {
  Tensor<float> image;  // 1 x H x W, values in [0, 1]
  Tensor<float> mask;   // 1 x H x W, values in {0, 1}
  std::string id;
  Provenance provenance;
};

struct SynthConfig {
  std::size_t count = 30;
  std::size_t size = 128;
  std::size_t min_lesions = 1, max_lesions = 2;
  double min_radius = 0.08, max_radius = 0.28;  // fraction of image size
  double lesion_mean = 0.25;
  double background_mean = 0.65;
  double speckle = 0.3;  // coefficient of variation of the multiplicative gamma noise
  double blur_sigma = 1.0;
  std::uint64_t seed = 7;

  void validate() const {
    if (count < 1) throw std::invalid_argument("synthetic count must be >= 1");
    if (size < 4) throw std::invalid_argument("synthetic size must be >= 4");
    if (!(min_radius > 0 && max_radius < 0.5 && min_radius <= max_radius))
      throw std::invalid_argument("lesion radius fractions must satisfy 0 < min <= max < 0.5");
    if (min_lesions < 1 || min_lesions > max_lesions) throw std::invalid_argument("lesion count range is invalid");
    if (speckle < 0 || blur_sigma < 0) throw std::invalid_argument("speckle and blur must be non-negative");
  }
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::uint64_t sample_seed(std::uint64_t seed, std::size_t index) {
  std::uint64_t x = seed * 0x9e3779b97f4a7c15ULL + index + 1;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

struct Ellipse {
  double cy, cx, a, b, theta;
  bool contains(double y, double x) const {
    const double dy = y - cy, dx = x - cx;
    const double c = std::cos(theta), s = std::sin(theta);
    const double u = dx * c + dy * s, v = -dx * s + dy * c;
    return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
  }
};

inline std::vector<float> gaussian_kernel(double sigma) {
  const int r = static_cast<int>(std::ceil(3 * sigma));
  std::vector<float> k(2 * r + 1);
  double s = 0;
  for (int i = -r; i <= r; ++i) s += k[i + r] = static_cast<float>(std::exp(-0.5 * i * i / (sigma * sigma)));
  for (auto& v : k) v = static_cast<float>(v / s);
  return k;
}

// Separable blur with clamped edges.
inline void blur(std::vector<float>& img, std::size_t h, std::size_t w, double sigma) {
  if (sigma <= 0) return;
  const auto k = gaussian_kernel(sigma);
  const int r = static_cast<int>(k.size() / 2);
  std::vector<float> tmp(img.size());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0;
      for (int d = -r; d <= r; ++d) {
        const long xx = std::clamp<long>(static_cast<long>(x) + d, 0, static_cast<long>(w) - 1);
        acc += k[d + r] * img[y * w + xx];
      }
      tmp[y * w + x] = static_cast<float>(acc);
    }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0;
      for (int d = -r; d <= r; ++d) {
        const long yy = std::clamp<long>(static_cast<long>(y) + d, 0, static_cast<long>(h) - 1);
        acc += k[d + r] * tmp[yy * w + x];
      }
      img[y * w + x] = static_cast<float>(acc);
    }
}

}  // namespace detail

inline std::string sample_id(std::size_t i) {
  std::ostringstream os;
  os << 's';
  os.width(4);
  os.fill('0');
  os << i;
  return os.str();
}

/// One synthetic sample: bright speckled background with 1-2 darker
/// ellipses. The mask is the exact ellipse interiors before blurring.
inline SegSample generate_sample(const SynthConfig& cfg, std::size_t index) {
  const std::uint64_t seed = detail::sample_seed(cfg.seed, index);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t n = cfg.size;
  const double sz = static_cast<double>(n);
  std::uniform_int_distribution<std::size_t> lesion_count(cfg.min_lesions, cfg.max_lesions);
  const std::size_t lesions = lesion_count(rng);
  std::vector<detail::Ellipse> ellipses;
  for (std::size_t l = 0; l < lesions; ++l) {
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      detail::Ellipse e;
      e.a = (cfg.min_radius + (cfg.max_radius - cfg.min_radius) * unit(rng)) * sz;
      e.b = (cfg.min_radius + (cfg.max_radius - cfg.min_radius) * unit(rng)) * sz;
      e.theta = unit(rng) * std::numbers::pi;
      e.cy = unit(rng) * sz;
      e.cx = unit(rng) * sz;
      const double c = std::cos(e.theta), s = std::sin(e.theta);
      const double hx = std::sqrt(e.a * e.a * c * c + e.b * e.b * s * s);
      const double hy = std::sqrt(e.a * e.a * s * s + e.b * e.b * c * c);
      if (e.cx - hx < 0 || e.cx + hx > sz - 1 || e.cy - hy < 0 || e.cy + hy > sz - 1) continue;
      ellipses.push_back(e);
      placed = true;
    }
    if (!placed) throw DataError("could not place lesion inside a " + std::to_string(n) + "px image");
  }

  std::vector<float> img(n * n), mask(n * n, 0.f);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      bool inside = false;
      for (const auto& e : ellipses) inside = inside || e.contains(static_cast<double>(y), static_cast<double>(x));
      mask[y * n + x] = inside ? 1.f : 0.f;
      img[y * n + x] = static_cast<float>(inside ? cfg.lesion_mean : cfg.background_mean);
    }
  if (cfg.speckle > 0) {
    const double k = 1.0 / (cfg.speckle * cfg.speckle);
    std::gamma_distribution<double> gamma(k, 1.0 / k);
    for (auto& v : img) v = static_cast<float>(v * gamma(rng));
  }
  detail::blur(img, n, n, cfg.blur_sigma);
  for (auto& v : img) v = std::clamp(v, 0.f, 1.f);

  SegSample s;
  s.image = Tensor<float>(Shape{1, n, n}, std::move(img));
  s.mask = Tensor<float>(Shape{1, n, n}, std::move(mask));
  s.id = sample_id(index);
  s.provenance = {Provenance::Kind::synthetic, seed, {}};
  return s;
}

inline std::vector<SegSample> generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  std::vector<SegSample> out;
  out.reserve(cfg.count);
  for (std::size_t i = 0; i < cfg.count; ++i) out.push_back(generate_sample(cfg, i));
  return out;
}

// ---------------------------------------------------------------- PGM

/// Binary 8-bit PGM: "P5\n<W> <H>\n255\n" followed by W*H bytes, row-major.
/// A value v in [0,1] is stored as round(255 v).
inline void save_pgm(const Tensor<float>& t, const std::filesystem::path& path) {
  if (t.rank() != 3 || t.dim(0) != 1) throw ShapeError("save_pgm expects 1 x H x W, got " + shape_str(t.shape()));
  const std::size_t h = t.dim(1), w = t.dim(2);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  os << "P5\n" << w << ' ' << h << "\n255\n";
  std::string bytes(h * w, '\0');
  for (std::size_t i = 0; i < h * w; ++i) {
    const float v = std::clamp(t[i], 0.f, 1.f);
    bytes[i] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.f)));
  }
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw DataError("short write to " + path.string());
}

inline Tensor<float> load_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  auto token = [&]() {
    std::string tok;
    int c;
    while ((c = is.get()) != EOF) {
      if (c == '#') {
        while ((c = is.get()) != EOF && c != '\n') {
        }
        continue;
      }
      if (std::isspace(c)) {
        if (!tok.empty()) break;
        continue;
      }
      tok.push_back(static_cast<char>(c));
      if (tok.size() > 16) break;
    }
    return tok;
  };
  if (token() != "P5") throw DataError("malformed PGM header in " + path.string() + " (expected P5)");
  auto number = [&](const char* what) {
    const std::string tok = token();
    if (tok.empty() || !std::all_of(tok.begin(), tok.end(), [](char ch) { return std::isdigit(static_cast<unsigned char>(ch)); }))
      throw DataError(std::string("malformed PGM header in ") + path.string() + " (bad " + what + ")");
    return std::stoul(tok);
  };
  const std::size_t w = number("width"), h = number("height"), maxval = number("maxval");
  if (w == 0 || h == 0 || maxval != 255)
    throw DataError("malformed PGM header in " + path.string() + " (only 8-bit maxval 255 supported)");
  std::string bytes(w * h, '\0');
  is.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(is.gcount()) != bytes.size())
    throw DataError("truncated PGM payload in " + path.string());
  Tensor<float> t(Shape{1, h, w});
  for (std::size_t i = 0; i < w * h; ++i) t[i] = static_cast<unsigned char>(bytes[i]) / 255.f;
  return t;
}

// ---------------------------------------------------------------- resize

enum class ResizeKind { bilinear, nearest };

/// Half-pixel-centre convention: source coordinate (i + 0.5) * in/out - 0.5,
/// clamped to the image. Nearest picks floor((i + 0.5) * in/out).
inline Tensor<float> resize(const Tensor<float>& t, std::size_t out_h, std::size_t out_w, ResizeKind kind) {
  if (t.rank() != 3) throw ShapeError("resize expects C x H x W, got " + shape_str(t.shape()));
  if (out_h == 0 || out_w == 0) throw std::invalid_argument("resize target must be >= 1");
  const std::size_t c = t.dim(0), h = t.dim(1), w = t.dim(2);
  if (h == out_h && w == out_w) return t;
  Tensor<float> out(Shape{c, out_h, out_w});
  const double sy = static_cast<double>(h) / out_h, sx = static_cast<double>(w) / out_w;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < out_h; ++y)
      for (std::size_t x = 0; x < out_w; ++x) {
        float v;
        if (kind == ResizeKind::nearest) {
          const std::size_t yy = std::min(h - 1, static_cast<std::size_t>((y + 0.5) * sy));
          const std::size_t xx = std::min(w - 1, static_cast<std::size_t>((x + 0.5) * sx));
          v = t[(ch * h + yy) * w + xx];
        } else {
          const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
          const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
          const std::size_t y0 = static_cast<std::size_t>(fy), x0 = static_cast<std::size_t>(fx);
          const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
          const double ay = fy - y0, ax = fx - x0;
          const auto at = [&](std::size_t yy, std::size_t xx) { return static_cast<double>(t[(ch * h + yy) * w + xx]); };
          v = static_cast<float>((1 - ay) * ((1 - ax) * at(y0, x0) + ax * at(y0, x1)) +
                                 ay * ((1 - ax) * at(y1, x0) + ax * at(y1, x1)));
        }
        out[(ch * out_h + y) * out_w + x] = v;
      }
  return out;
}

// ---------------------------------------------------------------- dataset directory

/// <dir>/images/<id>.pgm, <dir>/masks/<id>.pgm, <dir>/manifest.csv ("id,split").
inline void save_dataset(const std::vector<SegSample>& samples, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "masks");
  std::ofstream manifest(dir / "manifest.csv");
  if (!manifest) throw DataError("cannot write " + (dir / "manifest.csv").string());
  manifest << "id,split\n";
  for (const auto& s : samples) {
    save_pgm(s.image, dir / "images" / (s.id + ".pgm"));
    save_pgm(s.mask, dir / "masks" / (s.id + ".pgm"));
    manifest << s.id << ",\n";
  }
}

inline Tensor<float> binarize(Tensor<float> t, float threshold = 0.5f) {
  for (auto& v : t.storage()) v = v >= threshold ? 1.f : 0.f;
  return t;
}

/// Loads every manifest entry. Masks are binarized at 0.5 after loading.
inline std::vector<SegSample> load_dataset(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.csv");
  if (!manifest) throw DataError("missing manifest.csv in " + dir.string());
  std::string line;
  std::getline(manifest, line);
  std::vector<SegSample> out;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    const std::string id = line.substr(0, line.find(','));
    SegSample s;
    s.id = id;
    s.image = load_pgm(dir / "images" / (id + ".pgm"));
    s.mask = binarize(load_pgm(dir / "masks" / (id + ".pgm")));
    if (s.image.shape() != s.mask.shape())
      throw DataError("image/mask shape mismatch for " + id + ": " + shape_str(s.image.shape()) + " vs " +
                      shape_str(s.mask.shape()));
    s.provenance = {Provenance::Kind::file, 0, (dir / "images" / (id + ".pgm")).string()};
    out.push_back(std::move(s));
  }
  if (out.empty()) throw DataError("dataset " + dir.string() + " is empty");
  return out;
}

}  // namespace baaf
