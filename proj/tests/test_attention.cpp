#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "test_support.hpp"
#include "tsrm/attention.hpp"

using namespace tsrm;
using tsrm::testing::gradient_error;
using tsrm::testing::project;
using tsrm::testing::random_tensor;

namespace {

// Sort-based exact entmax-1.5 (no bisection): support size from the sorted
// prefix, threshold in closed form.
std::vector<double> entmax_sorted(const std::vector<double>& z) {
  const std::size_t n = z.size();
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = z[i] / 2;
  std::vector<double> s = x;
  std::sort(s.begin(), s.end(), std::greater<>());
  double tau = 0, sum = 0, sq = 0;
  for (std::size_t k = 1; k <= n; ++k) {
    sum += s[k - 1];
    sq += s[k - 1] * s[k - 1];
    const double m = sum / k, ss = sq / k;
    const double delta = (1 - k * (ss - m * m)) / k;
    if (delta < 0) break;
    const double t = m - std::sqrt(delta);
    if (t > s[k - 1]) break;
    tau = t;
  }
  std::vector<double> p(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double d = x[i] - tau;
    p[i] = d > 0 ? d * d : 0;
  }
  return p;
}

std::vector<double> entmax_row(const std::vector<double>& z) {
  auto t = Tensor<double>::from({Index(z.size())}, z);
  auto p = entmax15(t);
  return {p.data(), p.data() + p.size()};
}

struct Dense {
  std::vector<double> out;  // [B,h,D,dh]
  std::vector<double> map;  // [B,D,D] head averaged
};

// Loop-based softmax attention over [B,h,D,dh].
Dense dense_attention(const Tensor<double>& q, const Tensor<double>& k,
                      const Tensor<double>& v) {
  const Index B = q.dim(0), h = q.dim(1), D = q.dim(2), dh = q.dim(3);
  Dense r{std::vector<double>(q.size(), 0.0), std::vector<double>(B * D * D, 0.0)};
  auto at = [&](const Tensor<double>& t, Index b, Index hh, Index i, Index c) {
    return t.data()[((b * h + hh) * D + i) * dh + c];
  };
  for (Index b = 0; b < B; ++b)
    for (Index hh = 0; hh < h; ++hh)
      for (Index i = 0; i < D; ++i) {
        std::vector<double> s(D);
        for (Index j = 0; j < D; ++j) {
          double dot = 0;
          for (Index c = 0; c < dh; ++c) dot += at(q, b, hh, i, c) * at(k, b, hh, j, c);
          s[j] = dot / std::sqrt(double(dh));
        }
        const double mx = *std::max_element(s.begin(), s.end());
        double tot = 0;
        for (auto& e : s) tot += (e = std::exp(e - mx));
        for (Index j = 0; j < D; ++j) {
          const double w = s[j] / tot;
          r.map[(b * D + i) * D + j] += w / double(h);
          for (Index c = 0; c < dh; ++c)
            r.out[((b * h + hh) * D + i) * dh + c] += w * at(v, b, hh, j, c);
        }
      }
  return r;
}

// [B,h,D,dh] context laid out as the head-merged [B,D,h*dh] output.
double merged_at(const std::vector<double>& ctx, Index B, Index h, Index D,
                 Index dh, Index b, Index i, Index col) {
  (void)B;
  const Index hh = col / dh, c = col % dh;
  return ctx[((b * h + hh) * D + i) * dh + c];
}

void check_row_stochastic(const Tensor<double>& map, double tol = 1e-5) {
  const Index D = map.dim(-1), rows = map.size() / D;
  for (Index r = 0; r < rows; ++r) {
    double s = 0;
    for (Index j = 0; j < D; ++j) {
      CHECK(map.data()[r * D + j] >= 0.0);
      s += map.data()[r * D + j];
    }
    CHECK(s == doctest::Approx(1.0).epsilon(tol));
  }
}

FeatureAttentionParams<double> random_params(Index F, Index fe, Rng& rng) {
  auto w = [&] { return random_tensor({F, fe, fe}, rng, -0.5, 0.5); };
  auto b = [&] { return random_tensor({F * fe}, rng, -0.2, 0.2); };
  return {w(), b(), w(), b(), w(), b(), w(), b()};
}

}  // namespace

TEST_CASE("entmax15: hand examples") {
  auto p = entmax_row({0, 0});
  CHECK(p[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(p[1] == doctest::Approx(0.5).epsilon(1e-12));

  p = entmax_row({10, 0});
  CHECK(p[0] == 1.0);
  CHECK(p[1] == 0.0);

  // Two-element closed form: tau = (1 - sqrt 7) / 4.
  const double tau = (1 - std::sqrt(7.0)) / 4;
  p = entmax_row({1, 0});
  CHECK(p[0] == doctest::Approx((0.5 - tau) * (0.5 - tau)).epsilon(1e-9));
  CHECK(p[1] == doctest::Approx(tau * tau).epsilon(1e-9));
  CHECK(p[0] == doctest::Approx(0.8307).epsilon(1e-4));
  CHECK(p[1] == doctest::Approx(0.1693).epsilon(1e-3));
}

TEST_CASE("entmax15: agrees with the sort-based oracle") {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + trial % 12;
    std::vector<double> z(n);
    for (auto& v : z) v = rng.uniform(-4, 4);
    const auto got = entmax_row(z);
    const auto want = entmax_sorted(z);
    double s = 0;
    for (int i = 0; i < n; ++i) {
      CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-9).scale(1));
      CHECK(got[i] >= 0.0);
      s += got[i];
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("entmax15: exact under uniform shifts, argmax matches softmax") {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 2 + trial % 9;
    std::vector<double> z(n), zs(n);
    for (int i = 0; i < n; ++i) z[i] = double(rng.integer(-64, 64)) / 8.0;
    const double c = double(rng.integer(-40, 40)) / 4.0;
    for (int i = 0; i < n; ++i) zs[i] = z[i] + c;
    const auto a = entmax_row(z), b = entmax_row(zs);
    for (int i = 0; i < n; ++i) CHECK(a[i] == b[i]);

    auto sm = softmax(Tensor<double>::from({Index(n)}, z));
    const auto am = std::max_element(a.begin(), a.end()) - a.begin();
    const auto sa = std::max_element(sm.data(), sm.data() + n) - sm.data();
    CHECK(am == sa);
  }
}

TEST_CASE("vanilla attention: dense oracle") {
  Rng rng(5);
  for (Index D : {1, 3, 7}) {
    const Index B = 2, h = 2, dh = 4;
    auto q = random_tensor({B, h, D, dh}, rng), k = random_tensor({B, h, D, dh}, rng),
         v = random_tensor({B, h, D, dh}, rng);
    auto got = vanilla_attention(q, k, v);
    auto want = dense_attention(q, k, v);
    REQUIRE(got.values.shape() == Shape{B, D, h * dh});
    REQUIRE(got.map.shape() == Shape{B, D, D});
    for (Index b = 0; b < B; ++b)
      for (Index i = 0; i < D; ++i)
        for (Index col = 0; col < h * dh; ++col)
          CHECK(got.values.data()[(b * D + i) * h * dh + col] ==
                doctest::Approx(merged_at(want.out, B, h, D, dh, b, i, col)).epsilon(1e-6).scale(1));
    for (Index i = 0; i < B * D * D; ++i)
      CHECK(got.map.data()[i] == doctest::Approx(want.map[i]).epsilon(1e-6).scale(1));
    check_row_stochastic(got.map);
    CHECK_FALSE(got.map.requires_grad());
  }
}

TEST_CASE("vanilla and entmax attention: identical keys give uniform rows") {
  Rng rng(6);
  const Index D = 5, dh = 3;
  auto q = random_tensor({1, 1, D, dh}, rng);
  auto row = random_tensor({dh}, rng);
  Buffer<double> kb(D * dh);
  for (Index i = 0; i < D; ++i)
    for (Index c = 0; c < dh; ++c) kb(i * dh + c) = row.data()[c];
  auto k = Tensor<double>::from({1, 1, D, dh}, kb);
  auto v = random_tensor({1, 1, D, dh}, rng);
  for (int kind = 0; kind < 2; ++kind) {
    auto out = kind == 0 ? vanilla_attention(q, k, v) : entmax_attention(q, k, v);
    for (Index i = 0; i < D * D; ++i)
      CHECK(out.map.data()[i] == doctest::Approx(1.0 / D).epsilon(1e-9));
    for (Index c = 0; c < dh; ++c) {
      double mean = 0;
      for (Index j = 0; j < D; ++j) mean += v.data()[j * dh + c] / D;
      for (Index i = 0; i < D; ++i)
        CHECK(out.values.data()[i * dh + c] == doctest::Approx(mean).epsilon(1e-9));
    }
  }
}

TEST_CASE("vanilla attention: D = 1") {
  Rng rng(7);
  auto q = random_tensor({2, 2, 1, 3}, rng), k = random_tensor({2, 2, 1, 3}, rng),
       v = random_tensor({2, 2, 1, 3}, rng);
  auto out = vanilla_attention(q, k, v);
  for (Index i = 0; i < out.map.size(); ++i) CHECK(out.map.data()[i] == doctest::Approx(1.0));
  auto want = reshape(permute(v, {0, 2, 1, 3}), {2, 1, 6});
  for (Index i = 0; i < want.size(); ++i)
    CHECK(out.values.data()[i] == doctest::Approx(want.data()[i]));
}

TEST_CASE("entmax attention: dominating key gives a one-hot row") {
  const Index D = 4, dh = 4;
  // q . k_0 / sqrt(dh) exceeds every other score by 2 sqrt(dh) * 4.
  Buffer<double> qb = Buffer<double>::Zero(D * dh), kb = Buffer<double>::Zero(D * dh);
  for (Index i = 0; i < D; ++i) qb(i * dh) = 1.0;
  kb(0) = 2 * std::sqrt(double(dh)) * 4 * std::sqrt(double(dh));
  auto q = Tensor<double>::from({1, 1, D, dh}, qb);
  auto k = Tensor<double>::from({1, 1, D, dh}, kb);
  Rng rng(8);
  auto v = random_tensor({1, 1, D, dh}, rng);
  auto out = entmax_attention(q, k, v);
  for (Index i = 0; i < D; ++i) {
    CHECK(out.map.data()[i * D] == 1.0);
    for (Index j = 1; j < D; ++j) CHECK(out.map.data()[i * D + j] == 0.0);
  }
}

TEST_CASE("entmax attention: equals entmax15 of the materialized scores") {
  Rng rng(9);
  const Index B = 2, h = 2, D = 6, dh = 4;
  auto q = random_tensor({B, h, D, dh}, rng, -2, 2), k = random_tensor({B, h, D, dh}, rng, -2, 2),
       v = random_tensor({B, h, D, dh}, rng);
  Rng unused;
  auto res = scaled_attention(q, k, v, {AttentionKind::Entmax15}, unused);
  auto scores = scale(matmul(q, k, true), 1.0 / std::sqrt(double(dh)));
  for (Index row = 0; row < B * h * D; ++row) {
    std::vector<double> s(scores.data() + row * D, scores.data() + (row + 1) * D);
    const auto p = entmax_row(s);
    for (Index j = 0; j < D; ++j) CHECK(res.weights.data()[row * D + j] == p[j]);
  }
}

TEST_CASE("probsparse: top count") {
  CHECK(probsparse_top_count(96, 5.0) == 23);
  CHECK(probsparse_top_count(4, 5.0) == 4);
  CHECK(probsparse_top_count(1, 5.0) == 1);
  CHECK(probsparse_top_count(69, 5.0) == Index(std::ceil(5 * std::log(69.0))));
}

TEST_CASE("probsparse: u = D degenerates to vanilla") {
  Rng rng(10);
  for (Index D = 1; D <= 32; D += (D < 8 ? 1 : 5)) {
    auto q = random_tensor({1, 2, D, 4}, rng), k = random_tensor({1, 2, D, 4}, rng),
         v = random_tensor({1, 2, D, 4}, rng);
    Rng r(1);
    auto ps = probsparse_attention(q, k, v, 1e6, r);
    auto va = vanilla_attention(q, k, v);
    for (Index i = 0; i < ps.values.size(); ++i)
      CHECK(ps.values.data()[i] == doctest::Approx(va.values.data()[i]).epsilon(1e-6).scale(1));
    for (Index i = 0; i < ps.map.size(); ++i)
      CHECK(ps.map.data()[i] == doctest::Approx(va.map.data()[i]).epsilon(1e-6).scale(1));
  }
  // D=4, c=5 clamps to u=D.
  auto q = random_tensor({1, 1, 4, 4}, rng), k = random_tensor({1, 1, 4, 4}, rng),
       v = random_tensor({1, 1, 4, 4}, rng);
  Rng r(2);
  auto ps = probsparse_attention(q, k, v, 5.0, r);
  auto want = dense_attention(q, k, v);
  for (Index i = 0; i < ps.values.size(); ++i)
    CHECK(ps.values.data()[i] == doctest::Approx(want.out[i]).epsilon(1e-6).scale(1));
}

TEST_CASE("probsparse: unselected queries attend uniformly") {
  Rng rng(11);
  const Index D = 40, dh = 4;
  auto q = random_tensor({1, 1, D, dh}, rng, -3, 3), k = random_tensor({1, 1, D, dh}, rng, -3, 3),
       v = random_tensor({1, 1, D, dh}, rng);
  Rng r(5);
  auto res = scaled_attention(q, k, v, {AttentionKind::ProbSparse, 2.0}, r);
  const Index u = probsparse_top_count(D, 2.0);
  REQUIRE(u < D);
  Index uniform_rows = 0;
  for (Index i = 0; i < D; ++i) {
    bool uniform = true;
    for (Index j = 0; j < D; ++j)
      uniform = uniform && res.weights.data()[i * D + j] == 1.0 / double(D);
    if (!uniform) continue;
    ++uniform_rows;
    for (Index c = 0; c < dh; ++c) {
      double mean = 0;
      for (Index j = 0; j < D; ++j) mean += v.data()[j * dh + c] / double(D);
      CHECK(res.context.data()[i * dh + c] == doctest::Approx(mean).epsilon(1e-9));
    }
  }
  CHECK(uniform_rows == D - u);
  check_row_stochastic(res.weights);

  // Same seed, same selection.
  Rng r2(5);
  auto again = scaled_attention(q, k, v, {AttentionKind::ProbSparse, 2.0}, r2);
  for (Index i = 0; i < res.weights.size(); ++i)
    CHECK(again.weights.data()[i] == res.weights.data()[i]);
}

TEST_CASE("attention: gradients for every kind") {
  Rng rng(12);
  for (auto kind : {AttentionKind::Vanilla, AttentionKind::Entmax15, AttentionKind::ProbSparse}) {
    auto q = random_tensor({2, 2, 9, 3}, rng), k = random_tensor({2, 2, 9, 3}, rng),
         v = random_tensor({2, 2, 9, 3}, rng);
    auto f = [&] {
      Rng r(3);
      auto res = scaled_attention(q, k, v, {kind, 1.0}, r);
      return add(project(res.context, 1), project(res.weights, 2));
    };
    CHECK(gradient_error({q, k, v}, f) < 1e-4);
  }
}

TEST_CASE("reduce_map: examples") {
  auto uni = Tensor<double>::constant({4, 4}, 0.25);
  auto r = reduce_map(uni, ReduceAxis::Queries);
  for (Index j = 0; j < 4; ++j) CHECK(r.data()[j] == 1.0);

  Buffer<double> oh = Buffer<double>::Zero(16);
  for (Index i = 0; i < 4; ++i) oh(i * 4) = 1.0;
  r = reduce_map(Tensor<double>::from({4, 4}, oh), ReduceAxis::Queries);
  CHECK(r.data()[0] == 4.0);
  for (Index j = 1; j < 4; ++j) CHECK(r.data()[j] == 0.0);

  Rng rng(13);
  const Index D = 7;
  Buffer<double> m(D * D);
  for (Index i = 0; i < D; ++i) {
    double s = 0;
    for (Index j = 0; j < D; ++j) s += (m(i * D + j) = rng.uniform());
    for (Index j = 0; j < D; ++j) m(i * D + j) /= s;
  }
  r = reduce_map(Tensor<double>::from({D, D}, m), ReduceAxis::Queries);
  double total = 0;
  for (Index j = 0; j < D; ++j) {
    double col = 0;
    for (Index i = 0; i < D; ++i) col += m(i * D + j);
    CHECK(r.data()[j] == doctest::Approx(col).epsilon(1e-15));
    total += r.data()[j];
  }
  CHECK(total == doctest::Approx(double(D)).epsilon(1e-12));
  auto keys = reduce_map(Tensor<double>::from({D, D}, m), ReduceAxis::Keys);
  for (Index i = 0; i < D; ++i) CHECK(keys.data()[i] == doctest::Approx(1.0));
}

TEST_CASE("feature-separated MHA: F=1 is one standard MHA") {
  Rng rng(14);
  const Index B = 2, D = 5, fe = 4, h = 2, dh = 2;
  auto r = random_tensor({B, D, fe}, rng);
  auto p = random_params(1, fe, rng);
  Rng ur;
  auto got = feature_separated_mha(r, p, 1, h, {}, ReduceAxis::Queries, ur);

  auto proj = [&](const Tensor<double>& w, const Tensor<double>& b) {
    // Dense x W + b, then [B,D,h,dh] -> [B,h,D,dh].
    Buffer<double> o(B * D * fe);
    for (Index t = 0; t < B * D; ++t)
      for (Index c = 0; c < fe; ++c) {
        double s = b.data()[c];
        for (Index a = 0; a < fe; ++a) s += r.data()[t * fe + a] * w.data()[a * fe + c];
        o(t * fe + c) = s;
      }
    return permute(Tensor<double>::from({B, D, h, dh}, o), {0, 2, 1, 3});
  };
  auto dense = dense_attention(proj(p.wq, p.bq), proj(p.wk, p.bk), proj(p.wv, p.bv));
  for (Index b = 0; b < B; ++b)
    for (Index i = 0; i < D; ++i)
      for (Index c = 0; c < fe; ++c) {
        double s = p.bo.data()[c];
        for (Index a = 0; a < fe; ++a)
          s += merged_at(dense.out, B, h, D, dh, b, i, a) * p.wo.data()[a * fe + c];
        CHECK(got.values.data()[(b * D + i) * fe + c] == doctest::Approx(s).epsilon(1e-9).scale(1));
      }
  REQUIRE(got.vectors.shape() == Shape{B, 1, D});
  for (Index b = 0; b < B; ++b)
    for (Index j = 0; j < D; ++j) {
      double col = 0;
      for (Index i = 0; i < D; ++i) col += dense.map[(b * D + i) * D + j];
      CHECK(got.vectors.data()[b * D + j] == doctest::Approx(col).epsilon(1e-9));
    }
}

TEST_CASE("feature-separated MHA: permuting features permutes outputs") {
  Rng rng(15);
  const Index B = 2, D = 6, F = 3, fe = 4, h = 2;
  auto r = random_tensor({B, D, F * fe}, rng);
  auto p = random_params(F, fe, rng);
  const std::vector<Index> perm{2, 0, 1};  // new feature g holds old perm[g]

  auto permute_cols = [&](const Tensor<double>& t) {
    const Index rows = t.size() / (F * fe);
    Buffer<double> o(t.size());
    for (Index row = 0; row < rows; ++row)
      for (Index g = 0; g < F; ++g)
        for (Index c = 0; c < fe; ++c)
          o(row * F * fe + g * fe + c) = t.data()[row * F * fe + perm[g] * fe + c];
    return Tensor<double>::from(t.shape(), o);
  };
  auto permute_groups = [&](const Tensor<double>& w) {
    Buffer<double> o(w.size());
    const Index block = fe * fe;
    for (Index g = 0; g < F; ++g)
      for (Index i = 0; i < block; ++i) o(g * block + i) = w.data()[perm[g] * block + i];
    return Tensor<double>::from(w.shape(), o);
  };
  FeatureAttentionParams<double> pp{permute_groups(p.wq), permute_cols(p.bq),
                                    permute_groups(p.wk), permute_cols(p.bk),
                                    permute_groups(p.wv), permute_cols(p.bv),
                                    permute_groups(p.wo), permute_cols(p.bo)};
  Rng u1, u2;
  for (auto kind : {AttentionKind::Vanilla, AttentionKind::Entmax15}) {
    auto a = feature_separated_mha(r, p, F, h, {kind}, ReduceAxis::Queries, u1);
    auto b = feature_separated_mha(permute_cols(r), pp, F, h, {kind}, ReduceAxis::Queries, u2);
    auto ap = permute_cols(a.values);
    for (Index i = 0; i < ap.size(); ++i)
      CHECK(b.values.data()[i] == doctest::Approx(ap.data()[i]).epsilon(1e-12).scale(1));
    for (Index bb = 0; bb < B; ++bb)
      for (Index g = 0; g < F; ++g)
        for (Index j = 0; j < D; ++j)
          CHECK(b.vectors.data()[(bb * F + g) * D + j] ==
                doctest::Approx(a.vectors.data()[(bb * F + perm[g]) * D + j]).epsilon(1e-12));
  }
}

TEST_CASE("feature-separated MHA: isolation between features") {
  Rng rng(16);
  const Index B = 2, D = 5, fe = 4, h = 2;
  auto r1 = random_tensor({B, D, fe}, rng);
  auto p1 = random_params(1, fe, rng);
  Rng u;
  auto single = feature_separated_mha(r1, p1, 1, h, {}, ReduceAxis::Queries, u);

  // Append a zero feature with zero parameters.
  auto zero_r = Tensor<double>::zeros({B, D, fe});
  auto r2 = concat<double>({r1, zero_r}, 2);
  auto widen_w = [&](const Tensor<double>& w) {
    return concat<double>({w, Tensor<double>::zeros({1, fe, fe})}, 0);
  };
  auto widen_b = [&](const Tensor<double>& b) {
    return concat<double>({b, Tensor<double>::zeros({fe})}, 0);
  };
  FeatureAttentionParams<double> p2{widen_w(p1.wq), widen_b(p1.bq), widen_w(p1.wk), widen_b(p1.bk),
                                    widen_w(p1.wv), widen_b(p1.bv), widen_w(p1.wo), widen_b(p1.bo)};
  auto pair = feature_separated_mha(r2, p2, 2, h, {}, ReduceAxis::Queries, u);
  for (Index t = 0; t < B * D; ++t)
    for (Index c = 0; c < fe; ++c)
      CHECK(pair.values.data()[t * 2 * fe + c] ==
            doctest::Approx(single.values.data()[t * fe + c]).epsilon(1e-12).scale(1));

  // Arbitrary changes to feature 2 never reach feature 1.
  for (int trial = 0; trial < 5; ++trial) {
    auto noise = random_tensor({B, D, fe}, rng, -3, 3);
    auto rn = concat<double>({r1, noise}, 2);
    auto pn = random_params(1, fe, rng);
    auto mix_w = [&](const Tensor<double>& a, const Tensor<double>& b) {
      return concat<double>({a, b}, 0);
    };
    FeatureAttentionParams<double> pm{mix_w(p1.wq, pn.wq), mix_w(p1.bq, pn.bq),
                                      mix_w(p1.wk, pn.wk), mix_w(p1.bk, pn.bk),
                                      mix_w(p1.wv, pn.wv), mix_w(p1.bv, pn.bv),
                                      mix_w(p1.wo, pn.wo), mix_w(p1.bo, pn.bo)};
    for (auto kind : {AttentionKind::Vanilla, AttentionKind::Entmax15, AttentionKind::ProbSparse}) {
      Rng ra(7), rb(7);
      auto base = feature_separated_mha(r2, p2, 2, h, {kind, 1.0}, ReduceAxis::Queries, ra);
      auto mixed = feature_separated_mha(rn, pm, 2, h, {kind, 1.0}, ReduceAxis::Queries, rb);
      for (Index t = 0; t < B * D; ++t)
        for (Index c = 0; c < fe; ++c)
          CHECK(mixed.values.data()[t * 2 * fe + c] ==
                doctest::Approx(base.values.data()[t * 2 * fe + c]).epsilon(1e-12).scale(1));
    }
  }
}

TEST_CASE("feature-separated MHA: maps are stochastic, vectors sum to D") {
  Rng rng(17);
  const Index B = 2, D = 12, F = 2, fe = 4, h = 2;
  auto r = random_tensor({B, D, F * fe}, rng, -2, 2);
  auto p = random_params(F, fe, rng);
  for (auto kind : {AttentionKind::Vanilla, AttentionKind::Entmax15, AttentionKind::ProbSparse}) {
    Rng u(1);
    auto out = feature_separated_mha(r, p, F, h, {kind, 1.0}, ReduceAxis::Queries, u);
    REQUIRE(out.full_map.shape() == Shape{B, F, D, D});
    check_row_stochastic(out.full_map);
    for (Index v = 0; v < B * F; ++v) {
      double s = 0;
      for (Index j = 0; j < D; ++j) {
        CHECK(out.vectors.data()[v * D + j] >= 0.0);
        s += out.vectors.data()[v * D + j];
      }
      CHECK(s == doctest::Approx(double(D)).epsilon(1e-4));
    }
  }
}

TEST_CASE("feature-separated MHA: divisibility errors and gradients") {
  Rng rng(18);
  auto r = random_tensor({1, 4, 6}, rng);
  auto p = random_params(2, 3, rng);
  Rng u;
  CHECK_THROWS_AS(feature_separated_mha(r, p, 4, 1, {}, ReduceAxis::Queries, u), Error);
  CHECK_THROWS_AS(feature_separated_mha(r, p, 2, 2, {}, ReduceAxis::Queries, u), Error);

  auto f = [&] {
    Rng rr;
    auto out = feature_separated_mha(r, p, 2, 1, {}, ReduceAxis::Queries, rr);
    return add(project(out.values, 3), project(out.vectors, 4));
  };
  CHECK(gradient_error({r, p.wq, p.bq, p.wk, p.wv, p.bv, p.wo, p.bo}, f) < 1e-4);
}
