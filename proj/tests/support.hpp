#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "sb/dataset.hpp"
#include "sb/optimizer.hpp"

namespace sbtest {

using sb::Mat;

inline std::vector<double> uniform_vector(std::mt19937_64& rng, std::size_t n, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

inline Mat uniform_matrix(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return m;
}

inline std::size_t pick(std::mt19937_64& rng, std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); }

/// Small dataset of short examples; materialized on demand.
inline sb::data::DatasetSpec small_spec(std::size_t n = 60, double seconds = 0.5) {
  sb::data::DatasetSpec s;
  s.n_examples = n;
  s.audio_duration_s = seconds;
  return s;
}

inline std::vector<sb::model::TrimodalExample> small_examples(std::size_t count, double seconds = 0.5) {
  const auto spec = small_spec(std::max<std::size_t>(count * 2, 10), seconds);
  auto splits = sb::data::generate(spec);
  splits.train.resize(count);
  return sb::data::materialize(spec, splits.train);
}

/// |a - f| / max(|a|, |f|, floor), with floor = 1e-3 of the largest sampled |f|.
struct FdStats {
  double worst = 0.0;
  std::size_t checked = 0;
};

inline void accumulate_fd(FdStats& stats, const std::vector<double>& analytic, const std::vector<double>& numeric) {
  double scale = 0.0;
  for (double f : numeric) scale = std::max(scale, std::abs(f));
  const double floor = std::max(1e-3 * scale, 1e-300);
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double err = std::abs(analytic[i] - numeric[i]) / std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
    stats.worst = std::max(stats.worst, err);
    ++stats.checked;
  }
}

inline double central_difference(const std::function<double(double)>& f, double h = 1e-4) {
  return (f(h) - f(-h)) / (2.0 * h);
}

/// Index of the largest |x + delta| sample; the normalization is not smooth there.
inline std::size_t peak_index(const sb::audio::Waveform& x, const sb::audio::Perturbation& d) {
  const auto mixed = sb::audio::apply_perturbation(x, d);
  std::size_t best = 0;
  for (std::size_t i = 1; i < mixed.size(); ++i) {
    if (std::abs(mixed.samples[i]) > std::abs(mixed.samples[best])) best = i;
  }
  return best;
}

/// Analytic vs central-difference gradient of `sel` on one example, at `coords` random
/// positions inside the audio.
inline void fd_check_loss(FdStats& stats, const sb::losses::LossSelector& sel, const sb::model::TrimodalExample& ex,
                          const sb::model::ModelParams& params, const sb::audio::Perturbation& delta,
                          std::mt19937_64& rng, std::size_t coords = 50, std::uint64_t step = 3) {
  using namespace sb;
  const model::ModelActivations clean = model::forward(ex, nullptr, params);
  const auto builder = losses::make_builder(sel, &clean, ex.answer_tokens, step);
  const auto g = model::grad_wrt_perturbation(ex, delta, params, builder);
  const std::size_t peak = peak_index(ex.audio, delta) % delta.size();
  std::vector<double> a, f;
  while (a.size() < coords) {
    const std::size_t i = pick(rng, std::min(ex.audio.size(), delta.size()));
    if (i == peak) continue;
    a.push_back(g.grad_wrt_delta[i]);
    f.push_back(central_difference([&](double h) {
      audio::Perturbation d = delta;
      d.values[i] += h;
      return losses::evaluate(sel, &clean, model::forward(ex, &d, params), ex.answer_tokens, step);
    }));
  }
  accumulate_fd(stats, a, f);
}

}  // namespace sbtest
