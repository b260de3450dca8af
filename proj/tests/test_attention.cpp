#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "baaf/attention.hpp"
#include "baaf/grad_check.hpp"
#include "baaf/selftest.hpp"

using namespace baaf;
using D = double;
using Vars = std::vector<Var<D>>;

namespace {

Tensor<D> randn(Shape s, std::uint64_t seed, double sd = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0, sd);
  Tensor<D> t(std::move(s));
  for (auto& v : t.storage()) v = nd(rng);
  return t;
}

BAAFBlockParams<D> zero_params(std::size_t c) {
  auto p = init_baaf<D>(c, 8, 1);
  for (Tensor<D>* t : {&p.spatial.weight, &p.spatial.bias, &p.channel.wf1, &p.channel.wf2, &p.acm.wfc1, &p.acm.wfc2})
    t->fill(0);
  return p;
}

double sig(double x) { return 1 / (1 + std::exp(-x)); }

// Plain-loop recomputation of the whole block for one sample.
struct Oracle {
  std::vector<double> alpha, beta, phi, gamma, out;
};

Oracle oracle(const Tensor<D>& f, const BAAFBlockParams<D>& p, std::size_t n) {
  const std::size_t c = f.dim(1), h = f.dim(2), w = f.dim(3), hw = h * w;
  auto F = [&](std::size_t ch, std::size_t i) { return f[(n * c + ch) * hw + i]; };
  Oracle o;
  o.alpha.resize(hw);
  for (std::size_t i = 0; i < hw; ++i) {
    double z = p.spatial.bias[0];
    for (std::size_t ch = 0; ch < c; ++ch) z += p.spatial.weight[ch] * F(ch, i);
    o.alpha[i] = sig(std::max(z, 0.0));
  }
  std::vector<double> gap(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < hw; ++i) gap[ch] += F(ch, i);
    gap[ch] /= static_cast<double>(hw);
  }
  const std::size_t hid = p.channel.wf1.dim(0);
  std::vector<double> hidden(hid);
  for (std::size_t j = 0; j < hid; ++j) {
    for (std::size_t ch = 0; ch < c; ++ch) hidden[j] += p.channel.wf1[j * c + ch] * gap[ch];
    hidden[j] = std::max(0.0, hidden[j]);
  }
  o.beta.resize(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double z = 0;
    for (std::size_t j = 0; j < hid; ++j) z += p.channel.wf2[ch * hid + j] * hidden[j];
    o.beta[ch] = sig(z);
  }
  std::vector<double> s(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double gs = 0, gc = 0;
    for (std::size_t i = 0; i < hw; ++i) {
      gs += F(ch, i) * o.alpha[i];
      gc += F(ch, i) * o.beta[ch];
    }
    s[ch] = (gs + gc) / static_cast<double>(hw);
  }
  const std::size_t d = p.acm.wfc1.dim(0);
  std::vector<double> zz(d), Z(2 * c);
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t ch = 0; ch < c; ++ch) zz[j] += p.acm.wfc1[j * c + ch] * s[ch];
    zz[j] = std::max(0.0, zz[j]);
  }
  for (std::size_t k = 0; k < 2 * c; ++k)
    for (std::size_t j = 0; j < d; ++j) Z[k] += p.acm.wfc2[k * d + j] * zz[j];
  o.phi.resize(c);
  o.gamma.resize(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double K = Z[ch], V = Z[c + ch];
    o.phi[ch] = std::exp(K) / (std::exp(K) + std::exp(V));
    o.gamma[ch] = std::exp(V) / (std::exp(K) + std::exp(V));
  }
  o.out.resize(2 * c * hw);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < hw; ++i) {
      o.out[ch * hw + i] = o.phi[ch] * o.beta[ch] * F(ch, i);
      o.out[(c + ch) * hw + i] = o.gamma[ch] * o.alpha[i] * F(ch, i);
    }
  return o;
}

}  // namespace

TEST(AttentionDims, SqueezedDimension) {
  EXPECT_EQ(acm_squeezed_dim(256, 8), 32u);
  EXPECT_EQ(acm_squeezed_dim(512, 8), 64u);
  EXPECT_EQ(acm_squeezed_dim(8, 8), 32u);
  EXPECT_EQ(acm_squeezed_dim(1000, 8), 125u);
  EXPECT_EQ(channel_hidden_dim(4, 8), 1u);
  EXPECT_EQ(channel_hidden_dim(64, 8), 8u);
  const auto p = init_baaf<D>(512, 8, 3);
  EXPECT_EQ(p.acm.wfc1.shape(), (Shape{64, 512}));
  EXPECT_EQ(p.acm.wfc2.shape(), (Shape{1024, 64}));
  EXPECT_EQ(p.spatial.weight.shape(), (Shape{1, 512, 1, 1}));
}

TEST(AttentionInit, DeterministicAndFanInBounded) {
  const auto a = init_baaf<D>(16, 8, 42), b = init_baaf<D>(16, 8, 42), c = init_baaf<D>(16, 8, 43);
  EXPECT_EQ(a.acm.wfc2, b.acm.wfc2);
  EXPECT_NE(a.acm.wfc2, c.acm.wfc2);
  const double bound = std::sqrt(6.0 / 16);
  for (D v : a.channel.wf1.storage()) EXPECT_LE(std::abs(v), bound);
  EXPECT_EQ(a.spatial.bias[0], 0.0);
}

TEST(SpatialAttention, ZeroWeightsGiveHalf) {
  Tape<D> t(false);
  const auto p = zero_params(4);
  auto f = randn({1, 4, 3, 3}, 1);
  auto out = spatial_attention(t.constant(f), bind_block(t, p, false).spatial);
  for (D a : out.alpha.value().storage()) EXPECT_EQ(a, 0.5);
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_DOUBLE_EQ(out.calibrated.value()[i], 0.5 * f[i]);
}

TEST(SpatialAttention, GateIsChannelShared) {
  Tape<D> t(false);
  const auto p = init_baaf<D>(6, 8, 2);
  auto f = randn({2, 6, 4, 5}, 3);
  auto fs = spatial_attention(t.constant(f), bind_block(t, p, false).spatial).calibrated.value();
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 20; ++i) {
      const double r0 = fs[(n * 6) * 20 + i] / f[(n * 6) * 20 + i];
      for (std::size_t c = 1; c < 6; ++c) EXPECT_NEAR(fs[(n * 6 + c) * 20 + i] / f[(n * 6 + c) * 20 + i], r0, 1e-12);
    }
}

TEST(ChannelAttention, ZeroWeightsGiveHalf) {
  Tape<D> t(false);
  const auto p = zero_params(5);
  auto f = randn({2, 5, 3, 2}, 4);
  auto out = channel_attention(t.constant(f), bind_block(t, p, false).channel);
  EXPECT_EQ(out.beta.shape(), (Shape{2, 5}));
  for (D b : out.beta.value().storage()) EXPECT_EQ(b, 0.5);
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_DOUBLE_EQ(out.calibrated.value()[i], 0.5 * f[i]);
}

TEST(ChannelAttention, PermutationEquivariance) {
  const std::size_t c = 8;
  auto p = init_baaf<D>(c, 4, 5);
  auto f = randn({1, c, 3, 3}, 6);
  std::vector<std::size_t> perm(c);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(7);
  std::shuffle(perm.begin(), perm.end(), rng);
  auto q = p;
  const std::size_t hid = p.channel.wf1.dim(0);
  Tensor<D> fp(f.shape());
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t k = 0; k < 9; ++k) fp[i * 9 + k] = f[perm[i] * 9 + k];
    for (std::size_t j = 0; j < hid; ++j) {
      q.channel.wf1[j * c + i] = p.channel.wf1[j * c + perm[i]];
      q.channel.wf2[i * hid + j] = p.channel.wf2[perm[i] * hid + j];
    }
  }
  Tape<D> t(false);
  auto b = channel_attention(t.constant(f), bind_block(t, p, false).channel).beta.value();
  auto bp = channel_attention(t.constant(fp), bind_block(t, q, false).channel).beta.value();
  for (std::size_t i = 0; i < c; ++i) EXPECT_NEAR(bp[i], b[perm[i]], 1e-14);
}

TEST(Acm, EqualLogitsGiveHalfAndClosedForm) {
  Tape<D> t(false);
  auto p = zero_params(4);
  auto fs = randn({1, 4, 2, 2}, 8), fc = randn({1, 4, 2, 2}, 9);
  auto out = acm_fuse(t.constant(fs), t.constant(fc), *bind_block(t, p, true).acm);
  for (D v : out.phi.value().storage()) EXPECT_EQ(v, 0.5);
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t i = 0; i < 4; ++i) {
      EXPECT_DOUBLE_EQ(out.fused.value()[c * 4 + i], 0.5 * fc[c * 4 + i]);
      EXPECT_DOUBLE_EQ(out.fused.value()[(4 + c) * 4 + i], 0.5 * fs[c * 4 + i]);
    }
  auto sm = pair_softmax(t.constant(Tensor<D>({1, 2}, {std::log(3.0), 0.0}))).value();
  EXPECT_NEAR(sm[0], 0.75, 1e-15);
  EXPECT_NEAR(sm[1], 0.25, 1e-15);
  EXPECT_THROW(acm_fuse(t.constant(fs), t.constant(randn({1, 4, 2, 3}, 1)), *bind_block(t, p, true).acm), ShapeError);
}

TEST(Acm, SoftmaxStableForHugeLogits) {
  Tape<D> t(false);
  auto sm = pair_softmax(t.constant(Tensor<D>({1, 4}, {1000.0, -1000.0, 0.0, 1000.0}))).value();
  EXPECT_TRUE(sm.all_finite());
  EXPECT_NEAR(sm[0] + sm[2], 1.0, 1e-15);
  EXPECT_NEAR(sm[1] + sm[3], 1.0, 1e-15);
}

TEST(BaafForward, ShapeContract) {
  Tape<D> t(false);
  auto p = init_baaf<D>(8, 8, 1);
  EXPECT_EQ(baaf_forward(t.constant(randn({1, 8, 16, 16}, 1)), bind_block(t, p, true)).shape(), (Shape{1, 16, 16, 16}));
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<std::size_t> d(1, 7);
  for (int i = 0; i < 30; ++i) {
    const std::size_t c = d(rng), h = d(rng), w = d(rng), n = d(rng);
    auto q = init_baaf<D>(c, 8, rng());
    EXPECT_EQ(baaf_forward(t.constant(randn({n, c, h, w}, i)), bind_block(t, q, true)).shape(), (Shape{n, 2 * c, h, w}));
  }
}

TEST(BaafForward, AllZeroWeightsGiveQuarterInBothHalves) {
  // alpha = beta = phi = gamma = 0.5, so each half is 0.5 * 0.5 * F.
  Tape<D> t(false);
  auto f = randn({2, 3, 4, 4}, 10);
  auto y = baaf_forward(t.constant(f), bind_block(t, zero_params(3), true)).value();
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 16; ++i) {
        const double x = f[(n * 3 + c) * 16 + i];
        EXPECT_NEAR(y[(n * 6 + c) * 16 + i], 0.25 * x, 1e-7);
        EXPECT_NEAR(y[(n * 6 + 3 + c) * 16 + i], 0.25 * x, 1e-7);
      }
}

TEST(BaafForward, MatchesPlainLoopRecomputation) {
  for (std::size_t c : {3u, 8u, 33u}) {
    auto p = init_baaf<D>(c, 8, c);
    auto f = randn({2, c, 3, 4}, c + 1);
    Tape<D> t(false);
    auto g = baaf_forward_gates(t.constant(f), bind_block(t, p, true));
    for (std::size_t n = 0; n < 2; ++n) {
      const auto o = oracle(f, p, n);
      const std::size_t hw = 12;
      for (std::size_t i = 0; i < hw; ++i) EXPECT_NEAR(g.alpha.value()[n * hw + i], o.alpha[i], 1e-12);
      for (std::size_t ch = 0; ch < c; ++ch) {
        EXPECT_NEAR(g.beta.value()[n * c + ch], o.beta[ch], 1e-12);
        EXPECT_NEAR(g.phi.value()[n * c + ch], o.phi[ch], 1e-12);
        EXPECT_NEAR(g.gamma.value()[n * c + ch], o.gamma[ch], 1e-12);
      }
      for (std::size_t i = 0; i < 2 * c * hw; ++i) EXPECT_NEAR(g.output.value()[n * 2 * c * hw + i], o.out[i], 1e-12);
    }
  }
}

TEST(BaafForward, GradientThroughBlock) {
  const auto p = init_baaf<D>(3, 8, 11);
  auto rep = grad_check<D>(
      [](Tape<D>&, const Vars& v) {
        return baaf_forward(v[0], BAAFBlockVars<D>{{v[1], v[2]}, {v[3], v[4]}, ACMVars<D>{v[5], v[6]}});
      },
      {randn({1, 3, 4, 4}, 12), p.spatial.weight, p.spatial.bias, p.channel.wf1, p.channel.wf2, p.acm.wfc1, p.acm.wfc2});
  EXPECT_TRUE(rep.passed) << rep.max_rel_error << " " << rep.failing_tensor;
}

TEST(Pham, ZeroInitIsIdentityAndRecomposes) {
  Tape<D> t(false);
  auto f = randn({2, 4, 3, 3}, 13);
  auto y = pham_fuse_add(t.constant(f), bind_block(t, zero_params(4), false)).value();
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_DOUBLE_EQ(y[i], f[i]);
  auto p = init_baaf<D>(4, 8, 14);
  auto vars = bind_block(t, p, false);
  auto fv = t.constant(f);
  auto z = pham_fuse_add(fv, vars).value();
  EXPECT_EQ(z.shape(), f.shape());
  auto s = spatial_attention(fv, vars.spatial).calibrated.value();
  auto c = channel_attention(fv, vars.channel).calibrated.value();
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_EQ(z[i], s[i] + c[i]);
}

TEST(Invariants, GateRangesOverRandomDraws) {
  const auto r = baaf_invariant_suite(100, 77);
  for (const auto& i : r) EXPECT_TRUE(i.passed) << i.name << " worst " << i.worst;
}

TEST(Invariants, AlphaLowerBoundIsAttained) {
  // Strongly negative pre-activation: relu clips to 0 and alpha hits 0.5 exactly.
  Tape<D> t(false);
  auto p = init_baaf<D>(2, 8, 1);
  p.spatial.weight.fill(-5);
  auto out = spatial_attention(t.constant(Tensor<D>({1, 2, 2, 2}, 1.0)), bind_block(t, p, false).spatial);
  for (D a : out.alpha.value().storage()) EXPECT_EQ(a, 0.5);
}
