#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "baaf/datagen.hpp"

using namespace baaf;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("baaf_datagen_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

Tensor<float> random_mask(std::size_t h, std::size_t w, std::mt19937_64& rng) {
  Tensor<float> m({1, h, w});
  for (auto& v : m.storage()) v = static_cast<float>(rng() & 1);
  return m;
}

}  // namespace

TEST(Synthetic, NoiseOffIsPiecewiseConstant) {
  SynthConfig c;
  c.count = 5;
  c.size = 64;
  c.speckle = 0;
  c.blur_sigma = 0;
  for (const auto& s : generate_synthetic(c))
    for (std::size_t i = 0; i < s.image.size(); ++i)
      EXPECT_EQ(s.image[i], static_cast<float>(s.mask[i] > 0.5f ? c.lesion_mean : c.background_mean));
}

TEST(Synthetic, MaskBinaryAndForegroundBounded) {
  SynthConfig c;
  c.count = 40;
  c.size = 64;
  for (const auto& s : generate_synthetic(c)) {
    EXPECT_EQ(s.image.shape(), s.mask.shape());
    double fg = 0;
    for (float v : s.mask.storage()) {
      ASSERT_TRUE(v == 0.f || v == 1.f);
      fg += v;
    }
    fg /= static_cast<double>(s.mask.size());
    EXPECT_GT(fg, 0.0) << s.id;
    EXPECT_LT(fg, 0.5) << s.id;
    for (float v : s.image.storage()) {
      EXPECT_GE(v, 0.f);
      EXPECT_LE(v, 1.f);
    }
    EXPECT_EQ(s.provenance.kind, Provenance::Kind::synthetic);
  }
}

TEST(Synthetic, DeterministicPerConfigAndIndex) {
  SynthConfig c;
  c.count = 6;
  c.size = 32;
  const auto a = generate_synthetic(c), b = generate_synthetic(c);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].image, b[i].image);
    EXPECT_EQ(a[i].mask, b[i].mask);
    EXPECT_EQ(a[i].id, b[i].id);
  }
  auto longer = c;
  longer.count = 10;
  EXPECT_EQ(generate_synthetic(longer)[3].image, a[3].image);
  auto other = c;
  other.seed = c.seed + 1;
  EXPECT_FALSE(generate_synthetic(other)[0].image == a[0].image);
}

TEST(Synthetic, TwoModesAtLowSpeckle) {
  // With speckle CV 0.2 and no blur, the mean per class stays within 3 standard errors of its setpoint.
  SynthConfig c;
  c.count = 10;
  c.size = 64;
  c.speckle = 0.2;
  c.blur_sigma = 0;
  double fg = 0, bg = 0;
  std::size_t nf = 0, nb = 0;
  for (const auto& s : generate_synthetic(c))
    for (std::size_t i = 0; i < s.image.size(); ++i) (s.mask[i] > 0.5f ? (fg += s.image[i], ++nf) : (bg += s.image[i], ++nb));
  fg /= static_cast<double>(nf);
  bg /= static_cast<double>(nb);
  EXPECT_NEAR(fg, c.lesion_mean, 3 * 0.2 * c.lesion_mean / std::sqrt(static_cast<double>(nf)) + 1e-3);
  EXPECT_NEAR(bg, c.background_mean, 0.01);  // clipping at 1 pulls the bright class slightly down
  EXPECT_NEAR(bg - fg, c.background_mean - c.lesion_mean, 0.02);
}

TEST(Synthetic, ConfigValidation) {
  SynthConfig c;
  c.max_radius = 0.5;
  EXPECT_THROW(generate_synthetic(c), std::invalid_argument);
  c = SynthConfig{};
  c.count = 0;
  EXPECT_THROW(generate_synthetic(c), std::invalid_argument);
  c = SynthConfig{};
  c.min_radius = 0;
  EXPECT_THROW(generate_synthetic(c), std::invalid_argument);
  c = SynthConfig{};
  c.size = 8;
  c.min_radius = c.max_radius = 0.49;
  EXPECT_THROW(generate_synthetic(c), DataError);
}

TEST(Pgm, MaskAndImageRoundTrip) {
  const auto d = temp_dir("pgm");
  std::mt19937_64 rng(1);
  const auto m = random_mask(7, 5, rng);
  save_pgm(m, d / "m.pgm");
  EXPECT_EQ(load_pgm(d / "m.pgm"), m);
  Tensor<float> img({1, 9, 11});
  std::uniform_real_distribution<float> u(0, 1);
  for (auto& v : img.storage()) v = u(rng);
  save_pgm(img, d / "i.pgm");
  const auto back = load_pgm(d / "i.pgm");
  EXPECT_EQ(back.shape(), img.shape());
  EXPECT_LE(max_abs_diff(back, img), 1.0 / 510 + 1e-7);
  save_pgm(back, d / "j.pgm");
  EXPECT_EQ(load_pgm(d / "j.pgm"), back);
  std::ifstream is(d / "i.pgm", std::ios::binary);
  std::string head(12, '\0');
  is.read(head.data(), 12);
  EXPECT_EQ(head, "P5\n11 9\n255\n");
}

TEST(Pgm, MalformedInputs) {
  const auto d = temp_dir("bad");
  std::ofstream(d / "text.pgm") << "hello world\n";
  EXPECT_THROW(load_pgm(d / "text.pgm"), DataError);
  std::ofstream(d / "p2.pgm") << "P2\n2 2\n255\n0 0 0 0\n";
  EXPECT_THROW(load_pgm(d / "p2.pgm"), DataError);
  std::ofstream(d / "trunc.pgm", std::ios::binary) << "P5\n4 4\n255\nabc";
  EXPECT_THROW(load_pgm(d / "trunc.pgm"), DataError);
  std::ofstream(d / "deep.pgm", std::ios::binary) << "P5\n1 1\n65535\nab";
  EXPECT_THROW(load_pgm(d / "deep.pgm"), DataError);
  {
    std::ofstream os(d / "comment.pgm", std::ios::binary);
    const std::string body = std::string("P5\n# c\n2 1\n255\n\xff") + '\0';
    os.write(body.data(), static_cast<std::streamsize>(body.size()));
  }
  const auto t = load_pgm(d / "comment.pgm");
  EXPECT_EQ(t.storage(), (std::vector<float>{1.f, 0.f}));
  EXPECT_THROW(load_pgm(d / "missing.pgm"), DataError);
}

TEST(Resize, IdentityAndConstant) {
  std::mt19937_64 rng(2);
  const auto m = random_mask(6, 9, rng);
  EXPECT_EQ(resize(m, 6, 9, ResizeKind::bilinear), m);
  Tensor<float> c({1, 5, 7}, 0.37f);
  for (auto [h, w] : {std::pair{1, 1}, {13, 3}, {5, 20}, {64, 64}})
    for (auto k : {ResizeKind::bilinear, ResizeKind::nearest}) {
      const auto r = resize(c, static_cast<std::size_t>(h), static_cast<std::size_t>(w), k);
      for (float v : r.storage()) EXPECT_NEAR(v, 0.37f, 1e-6f);
    }
  EXPECT_THROW(resize(c, 0, 3, ResizeKind::nearest), std::invalid_argument);
}

TEST(Resize, NearestUpThenDownRecoversMask) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 50; ++t) {
    const auto m = random_mask(16, 16, rng);
    const auto up = resize(m, 32, 32, ResizeKind::nearest);
    for (float v : up.storage()) ASSERT_TRUE(v == 0.f || v == 1.f);
    for (std::size_t y = 0; y < 32; ++y)
      for (std::size_t x = 0; x < 32; ++x) ASSERT_EQ(up[y * 32 + x], m[(y / 2) * 16 + x / 2]);
    EXPECT_EQ(resize(up, 16, 16, ResizeKind::nearest), m);
  }
}

TEST(Resize, BilinearHalfPixelValues) {
  // Upsizing [0, 1] to width 4: centres map to -0.25, 0.25, 0.75, 1.25 and clamp at the edges.
  Tensor<float> t({1, 1, 2}, {0.f, 1.f});
  const auto r = resize(t, 1, 4, ResizeKind::bilinear);
  EXPECT_EQ(r.storage(), (std::vector<float>{0.f, 0.25f, 0.75f, 1.f}));
  Tensor<float> s({1, 1, 4}, {0.f, 1.f, 2.f, 3.f});
  EXPECT_EQ(resize(s, 1, 2, ResizeKind::bilinear).storage(), (std::vector<float>{0.5f, 2.5f}));
}

TEST(Dataset, SaveLoadRoundTrip) {
  const auto d = temp_dir("ds");
  SynthConfig c;
  c.count = 4;
  c.size = 32;
  const auto a = generate_synthetic(c);
  save_dataset(a, d);
  const auto b = load_dataset(d);
  ASSERT_EQ(b.size(), a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(b[i].id, a[i].id);
    EXPECT_EQ(b[i].mask, a[i].mask);
    EXPECT_LE(max_abs_diff(b[i].image, a[i].image), 1.0 / 510 + 1e-7);
    EXPECT_EQ(b[i].provenance.kind, Provenance::Kind::file);
  }
  EXPECT_THROW(load_dataset(d / "nope"), DataError);
  Tensor<float> small({1, 16, 16});
  save_pgm(small, d / "masks" / (a[0].id + ".pgm"));
  EXPECT_THROW(load_dataset(d), DataError);
}
