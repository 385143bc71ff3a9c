#include "tsrm/pretraining.hpp"

#include <numeric>

namespace tsrm {

std::pair<Index, Index> mask_run_bounds(Index T) {
  require(T >= 20, ErrorKind::Config,
          "masking needs a window of at least 20 steps, got " +
              std::to_string(T));
  // Integer forms of ceil(0.05 T) and floor(0.10 T).
  return {(T + 19) / 20, T / 10};
}

std::vector<unsigned char> generate_time_mask(const std::vector<double>& weight,
                                              Rng& rng) {
  const Index T = Index(weight.size());
  const auto [lmin, lmax] = mask_run_bounds(T);
  std::vector<unsigned char> mask(T, 0);
  const double total = std::accumulate(weight.begin(), weight.end(), 0.0);
  if (total <= 0) return mask;
  const double target = rng.uniform(0.30, 0.50);

  std::vector<Index> lengths;
  Index used = 0;
  for (;;) {
    const Index l = rng.integer(lmin, lmax);
    const Index n = Index(lengths.size()) + 1;
    // Runs need a free step between neighbours; the last may end at T.
    if (used + l + (n - 1) > T) break;
    lengths.push_back(l);
    used += l;

    // Spread the free space evenly; each run shifts randomly in its slot.
    std::fill(mask.begin(), mask.end(), 0);
    const Index free = T - used;
    Index start = 0;
    double masked = 0;
    for (Index i = 0; i < n; ++i) {
      const Index gap = free / n + (i < free % n ? 1 : 0);
      const Index shift = gap > 1 ? rng.integer(0, gap - 1) : 0;
      for (Index t = start + shift; t < start + shift + lengths[i]; ++t) {
        mask[t] = 1;
        masked += weight[t];
      }
      start += lengths[i] + gap;
    }
    if (masked / total >= target) break;
  }
  return mask;
}

MaskGrid generate_mask(const MaskGrid& observed, Rng& rng, bool per_feature) {
  const Index T = observed.rows(), F = observed.cols();
  MaskGrid eval = MaskGrid::Constant(T, F, false);
  if (!per_feature) {
    std::vector<double> w(T);
    for (Index t = 0; t < T; ++t) w[t] = double(observed.row(t).count());
    const auto m = generate_time_mask(w, rng);
    for (Index t = 0; t < T; ++t)
      if (m[t]) eval.row(t) = observed.row(t);
    return eval;
  }
  for (Index f = 0; f < F; ++f) {
    std::vector<double> w(T);
    for (Index t = 0; t < T; ++t) w[t] = observed(t, f) ? 1.0 : 0.0;
    const auto m = generate_time_mask(w, rng);
    for (Index t = 0; t < T; ++t) eval(t, f) = m[t] && observed(t, f);
  }
  return eval;
}

Grid make_model_input(const Grid& values, const MaskGrid& observed,
                      const MaskGrid& eval) {
  return (observed && !eval).select(values, Grid::Constant(values.rows(), values.cols(), kMissingToken));
}

PretrainSample make_pretrain_sample(const WindowSample& window, Rng& rng,
                                    bool per_feature) {
  PretrainSample s;
  s.values = window.values;
  s.observed = window.observed;
  s.eval = generate_mask(window.observed, rng, per_feature);
  s.input = make_model_input(s.values, s.observed, s.eval);
  s.validity = 1;
  return s;
}

PretrainSample make_invalid_candidate(const PretrainSample& sample, Rng& rng) {
  PretrainSample s = sample;
  const Index T = s.values.rows(), F = s.values.cols();
  if (F == 1) {
    for (Index t = 0; t < T; ++t) s.values(t, 0) = float(rng.uniform());
  } else {
    const Index off = rng.integer(1, F - 1);
    for (Index j = 0; j < F; ++j) {
      s.values.col((j + off) % F) = sample.values.col(j);
      s.observed.col((j + off) % F) = sample.observed.col(j);
      s.eval.col((j + off) % F) = sample.eval.col(j);
    }
  }
  s.input = make_model_input(s.values, s.observed, s.eval);
  s.validity = 0;
  return s;
}

PretrainSample draw_pretrain_sample(const WindowSample& window, Rng& rng,
                                    double invalid_rate, bool per_feature) {
  auto s = make_pretrain_sample(window, rng, per_feature);
  if (rng.bernoulli(invalid_rate)) return make_invalid_candidate(s, rng);
  return s;
}

}  // namespace tsrm
