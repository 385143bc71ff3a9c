#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "tsrm/explain.hpp"
#include "tsrm/rng.hpp"

using namespace tsrm;

namespace fs = std::filesystem;

namespace {

ResolvedBranch branch(Index k, Index d, Index s, Index T, Index pool = 2) {
  ResolvedBranch b;
  b.kernel = k;
  b.dilation = d;
  b.stride = s;
  b.conv_len = (T - b.effective_kernel()) / s + 1;
  b.pool_kernel = pool;
  b.pool_stride = pool;
  b.pool_len = b.conv_len / pool;
  return b;
}

Index layout_length(const std::vector<ResolvedBranch>& bs) {
  Index D = 0;
  for (const auto& b : bs) D += b.conv_len + b.pool_len;
  return D;
}

bool covers(const ResolvedBranch& b, Index p, Index t) {
  const Index off = t - p * b.stride;
  return off >= 0 && off < b.effective_kernel() && off % b.dilation == 0;
}

// Per time step: scan every representation position and test membership.
std::vector<double> coverage_oracle(const std::vector<double>& map,
                                    const std::vector<ResolvedBranch>& bs, Index T,
                                    BackmapMode mode) {
  std::vector<double> out(T, 0.0);
  Index offset = 0;
  for (const auto& b : bs) {
    for (Index t = 0; t < T; ++t) {
      double acc = 0;
      int n = 0;
      for (Index p = 0; p < b.conv_len; ++p)
        if (covers(b, p, t)) {
          acc += map[offset + p];
          ++n;
        }
      if (mode == BackmapMode::Sum) out[t] += acc / double(b.kernel);
      else if (n) out[t] += acc / n;
    }
    offset += b.conv_len + b.pool_len;
  }
  return out;
}

std::vector<double> random_map(Rng& rng, Index D) {
  std::vector<double> m(D);
  for (auto& v : m) v = rng.uniform(0.0, 1.0);
  return m;
}

double conv_mass(const std::vector<double>& map, const std::vector<ResolvedBranch>& bs) {
  double s = 0;
  Index offset = 0;
  for (const auto& b : bs) {
    for (Index p = 0; p < b.conv_len; ++p) s += map[offset + p];
    offset += b.conv_len + b.pool_len;
  }
  return s;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ModelConfig explain_config() {
  ModelConfig c;
  c.window = 24;
  c.features = 2;
  c.f_embed = 4;
  c.heads = 2;
  c.layers = 2;
  c.branches = {{3, 0.0, 1, 0}, {4, 0.0, 2, 0}};
  c.classifier = {4, 3, 2, 2, 3, 1, 4, 5, 6};
  return c;
}

}  // namespace

TEST_CASE("backmap: worked examples") {
  const Index T = 5;
  std::vector<ResolvedBranch> bs{branch(3, 1, 1, T, 3)};
  REQUIRE(bs[0].conv_len == 3);
  REQUIRE(bs[0].pool_len == 1);
  const BackmapOptions mean{BackmapMode::Mean, false};

  auto flat = backmap({3, 3, 3, 99}, bs, T, mean);
  for (double v : flat) CHECK(v == doctest::Approx(3.0));

  auto first = backmap({1, 0, 0, 99}, bs, T, mean);
  CHECK(first[0] == doctest::Approx(1.0));
  CHECK(first[1] == doctest::Approx(0.5));
  CHECK(first[2] == doctest::Approx(1.0 / 3));
  CHECK(first[3] == 0.0);
  CHECK(first[4] == 0.0);

  // Sum mode spreads the weight over the receptive field.
  auto spread = backmap({1, 0, 0, 99}, bs, T);
  CHECK(spread[0] == doctest::Approx(1.0 / 3));
  CHECK(spread[1] == doctest::Approx(1.0 / 3));
  CHECK(spread[2] == doctest::Approx(1.0 / 3));
  CHECK(spread[3] == 0.0);
}

TEST_CASE("backmap: uniform attention is flat where fully covered") {
  const Index T = 40;
  std::vector<ResolvedBranch> bs{branch(5, 2, 1, T)};
  const auto k_eff = bs[0].effective_kernel();
  std::vector<double> ones(std::size_t(layout_length(bs)), 1.0);
  for (auto mode : {BackmapMode::Sum, BackmapMode::Mean}) {
    auto w = backmap(ones, bs, T, {mode, false});
    for (Index t = k_eff; t < T - k_eff; ++t) CHECK(w[t] == doctest::Approx(1.0));
  }
}

TEST_CASE("backmap: agrees with the coverage oracle") {
  Rng rng(21);
  for (int trial = 0; trial < 60; ++trial) {
    const Index T = rng.integer(12, 50);
    std::vector<ResolvedBranch> bs;
    const int nb = int(rng.integer(1, 3));
    for (int i = 0; i < nb; ++i) {
      const Index k = rng.integer(2, 5), d = rng.integer(1, 3), s = rng.integer(1, 3);
      if ((k - 1) * d + 1 > T) continue;
      bs.push_back(branch(k, d, s, T));
    }
    if (bs.empty()) continue;
    const auto map = random_map(rng, layout_length(bs));
    for (auto mode : {BackmapMode::Sum, BackmapMode::Mean}) {
      const auto got = backmap(map, bs, T, {mode, false});
      const auto want = coverage_oracle(map, bs, T, mode);
      REQUIRE(got.size() == std::size_t(T));
      for (Index t = 0; t < T; ++t) {
        CHECK(got[t] == doctest::Approx(want[t]).epsilon(1e-12));
        CHECK(got[t] >= 0.0);
      }
    }
    // Sum mode conserves the conv-segment mass.
    const auto w = backmap(map, bs, T);
    CHECK(std::accumulate(w.begin(), w.end(), 0.0) ==
          doctest::Approx(conv_mass(map, bs)).epsilon(1e-4));
  }
}

TEST_CASE("backmap: linear and blind to pooled segments") {
  Rng rng(22);
  const Index T = 30;
  std::vector<ResolvedBranch> bs{branch(3, 1, 1, T), branch(4, 2, 2, T)};
  const Index D = layout_length(bs);
  for (auto mode : {BackmapMode::Sum, BackmapMode::Mean}) {
    const BackmapOptions o{mode, false};
    const auto a = random_map(rng, D), b = random_map(rng, D);
    std::vector<double> ab(D);
    for (Index i = 0; i < D; ++i) ab[i] = a[i] + b[i];
    const auto wa = backmap(a, bs, T, o), wb = backmap(b, bs, T, o), wab = backmap(ab, bs, T, o);
    for (Index t = 0; t < T; ++t) CHECK(wab[t] == doctest::Approx(wa[t] + wb[t]).epsilon(1e-12));

    auto perturbed = a;
    Index offset = 0;
    for (const auto& br : bs) {
      for (Index q = 0; q < br.pool_len; ++q) perturbed[offset + br.conv_len + q] += 5.0;
      offset += br.conv_len + br.pool_len;
    }
    CHECK(backmap(perturbed, bs, T, o) == wa);
  }

  // Opting in to pooled segments keeps the total mass in sum mode.
  const auto a = random_map(rng, D);
  const auto w = backmap(a, bs, T, {BackmapMode::Sum, true});
  CHECK(std::accumulate(w.begin(), w.end(), 0.0) ==
        doctest::Approx(std::accumulate(a.begin(), a.end(), 0.0)).epsilon(1e-9));
}

TEST_CASE("backmap: layout mismatch and mode parsing") {
  std::vector<ResolvedBranch> bs{branch(3, 1, 1, 10)};
  CHECK_THROWS_AS(backmap(std::vector<double>(3), bs, 10), Error);
  CHECK(parse_backmap_mode("mean") == BackmapMode::Mean);
  CHECK(parse_backmap_mode("sum") == BackmapMode::Sum);
  CHECK_THROWS_AS(parse_backmap_mode("max"), Error);
}

TEST_CASE("explain: per-feature weights follow the model's attention vectors") {
  TsrmModel<float> model(explain_config(), 4);
  auto sample = synth_series(SynthKind::Sine, 24, 2, 8).values;
  sample(3, 1) = kMissingToken;
  const auto fa = explain_sample(model, sample);
  REQUIRE(fa.size() == 2);

  Buffer<float> x = Eigen::Map<const Buffer<float>>(sample.data(), 48);
  const auto trace = model.forward(Tensor<float>::from({1, 24, 2}, x), Mode::Eval);
  const Index D = model.representation_length();
  for (Index f = 0; f < 2; ++f) {
    REQUIRE(fa[f].per_layer.size() == 2);
    CHECK(fa[f].input[3] == (f == 1 ? double(kMissingToken) : double(sample(3, 0))));
    for (Index t = 0; t < 24; ++t) {
      CHECK(fa[f].output[t] == doctest::Approx(trace.output.value()(t * 2 + f)));
      CHECK(fa[f].sum[t] == doctest::Approx(fa[f].per_layer[0][t] + fa[f].per_layer[1][t]));
      CHECK(fa[f].sum[t] >= 0.0);
    }
    for (std::size_t n = 0; n < 2; ++n) {
      const auto& v = trace.vectors[n].value();
      std::vector<double> vec(v.data() + f * D, v.data() + (f + 1) * D);
      const auto& w = fa[f].per_layer[n];
      CHECK(std::accumulate(w.begin(), w.end(), 0.0) ==
            doctest::Approx(conv_mass(vec, model.branches())).epsilon(1e-4));
    }
  }

  CHECK_THROWS_AS(explain_sample(model, Grid(23, 2)), Error);
}

TEST_CASE("explain: CSV export") {
  TsrmModel<float> model(explain_config(), 4);
  const auto sample = synth_series(SynthKind::Sine, 24, 2, 8).values;
  const auto dir = fs::temp_directory_path() / "tsrm_test_explain";
  fs::remove_all(dir);
  const auto files = export_attention(model, sample, (dir / "a").string(), true);
  REQUIRE(files.size() == 4);  // csv + svg per feature
  export_attention(model, sample, (dir / "b").string(), false);

  for (int f = 0; f < 2; ++f) {
    const auto name = "attention_feature_" + std::to_string(f) + ".csv";
    const auto text = slurp((dir / "a" / name).string());
    CHECK(text == slurp((dir / "b" / name).string()));
    CHECK(fs::exists(dir / "a" / ("attention_feature_" + std::to_string(f) + ".svg")));

    std::istringstream in(text);
    std::string line;
    std::getline(in, line);
    CHECK(line == "t,input_value,output_value,weight_sum,weight_layer_1,weight_layer_2");
    int rows = 0;
    while (std::getline(in, line)) {
      std::vector<double> cells;
      std::stringstream ls(line);
      std::string cell;
      while (std::getline(ls, cell, ',')) cells.push_back(std::stod(cell));
      REQUIRE(cells.size() == 6);
      CHECK(cells[0] == rows);
      CHECK(cells[3] == doctest::Approx(cells[4] + cells[5]).epsilon(1e-6));
      ++rows;
    }
    CHECK(rows == 24);
  }

  // A regular file in the way of the output directory.
  std::ofstream(dir / "blocker") << "x";
  ErrorKind kind{};
  try {
    export_attention(model, sample, (dir / "blocker" / "sub").string(), false);
  } catch (const Error& e) {
    kind = e.kind();
  }
  CHECK(kind == ErrorKind::Io);
  fs::remove_all(dir);
}
