#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <complex>
#include <cstring>
#include <fstream>
#include <filesystem>
#include <numbers>

#include "support.hpp"

using namespace sb;
using namespace sb::audio;

namespace {

// Direct O(N^2) DFT, symmetric Hann window, HTK triangles built from scratch.
Mat naive_log_mel(const std::vector<double>& pcm) {
  const std::size_t N = 400, hop = 160, nfft = 512, bins = 257;
  const std::size_t frames = 1 + (pcm.size() - N) / hop;
  auto mel = [](double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); };
  const double top = mel(8000.0);
  std::vector<double> edges(130);
  for (std::size_t i = 0; i < edges.size(); ++i) edges[i] = top * static_cast<double>(i) / 129.0;
  Mat out(static_cast<Eigen::Index>(frames), 128);
  for (std::size_t f = 0; f < frames; ++f) {
    std::vector<double> power(bins);
    for (std::size_t k = 0; k < bins; ++k) {
      std::complex<double> acc = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const double w = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * n / (N - 1.0)));
        acc += pcm[f * hop + n] * w * std::polar(1.0, -2.0 * std::numbers::pi * k * n / nfft);
      }
      power[k] = std::norm(acc);
    }
    for (std::size_t m = 0; m < 128; ++m) {
      double e = 0.0;
      for (std::size_t k = 0; k < bins; ++k) {
        const double x = mel(k * 16000.0 / nfft);
        if (x > edges[m] && x <= edges[m + 1]) e += power[k] * (x - edges[m]) / (edges[m + 1] - edges[m]);
        if (x > edges[m + 1] && x < edges[m + 2]) e += power[k] * (edges[m + 2] - x) / (edges[m + 2] - edges[m + 1]);
      }
      out(static_cast<Eigen::Index>(f), static_cast<Eigen::Index>(m)) = std::log(std::max(e, 1e-10));
    }
  }
  return out;
}

std::vector<double> sine(double hz, std::size_t n, double amp = 0.5) {
  std::vector<double> x(n);
  for (std::size_t t = 0; t < n; ++t) x[t] = amp * std::sin(2.0 * std::numbers::pi * hz * t / 16000.0);
  return x;
}

}  // namespace

TEST_CASE("frame count matches an explicit window enumeration") {
  for (std::size_t T : {400, 401, 560, 16000, 160000}) {
    std::size_t windows = 0;
    for (std::size_t start = 0; start + 400 <= T; start += 160) ++windows;
    CHECK(frame_count(T) == windows);
  }
  CHECK(frame_count(400) == 1);
  CHECK(frame_count(560) == 2);
  CHECK(frame_count(16000) == 98);
  CHECK_THROWS_AS(frame_count(399), AudioError);
  CHECK_THROWS_AS(mel_filterbank(std::vector<double>(399, 0.0)), AudioError);
}

TEST_CASE("log-mel agrees with a direct DFT oracle") {
  std::mt19937_64 rng(11);
  auto pcm = sbtest::uniform_vector(rng, 1200, -3000.0, 3000.0);
  const auto s = sine(523.0, 1200, 9000.0);
  for (std::size_t i = 0; i < pcm.size(); ++i) pcm[i] += s[i];
  const Mat fast = mel_filterbank(pcm).frames;
  const Mat slow = naive_log_mel(pcm);
  REQUIRE(fast.rows() == slow.rows());
  CHECK((fast - slow).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("1 kHz tone peaks in the filter centred nearest 1 kHz") {
  const auto pcm = sine(1000.0, 16000, 16000.0);
  const Mat f = mel_filterbank(pcm).frames;
  const auto centers = mel_center_frequencies();
  std::size_t nearest = 0;
  for (std::size_t m = 0; m < centers.size(); ++m) {
    if (std::abs(centers[m] - 1000.0) < std::abs(centers[nearest] - 1000.0)) nearest = m;
  }
  for (Eigen::Index r = 0; r < f.rows(); ++r) {
    Eigen::Index arg;
    f.row(r).maxCoeff(&arg);
    CHECK(std::abs(static_cast<long>(arg) - static_cast<long>(nearest)) <= 1);
  }
  CHECK(hz_to_mel(1000.0) == doctest::Approx(999.9855).epsilon(1e-6));
  CHECK(mel_to_hz(hz_to_mel(1234.5)) == doctest::Approx(1234.5).epsilon(1e-12));
}

TEST_CASE("silence sits on the energy floor") {
  const Mat f = mel_filterbank(std::vector<double>(800, 0.0)).frames;
  CHECK(f.maxCoeff() == std::log(kEnergyFloor));
  CHECK(f.minCoeff() == std::log(kEnergyFloor));
}

TEST_CASE("cyclic extension repeats and preserves the l-inf norm") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t td = 1 + sbtest::pick(rng, 50);
    const std::size_t T = 1 + sbtest::pick(rng, 200);
    const auto d = sbtest::uniform_vector(rng, td, -2.0, 2.0);
    const auto ext = extend_cyclic(d, T);
    REQUIRE(ext.size() == T);
    for (std::size_t t = 0; t < T; ++t) REQUIRE(ext[t] == d[t % td]);
    double lhs = 0.0, rhs = 0.0;
    for (double v : ext) lhs = std::max(lhs, std::abs(v));
    for (std::size_t i = 0; i < std::min(T, td); ++i) rhs = std::max(rhs, std::abs(d[i]));
    CHECK(lhs == rhs);
  }
  CHECK_THROWS(extend_cyclic(std::vector<double>{}, 5));
}

TEST_CASE("perturbation longer than the audio uses only its prefix") {
  Waveform x(std::vector<double>(5, 1.0));
  Perturbation d({1, 2, 3, 4, 5, 6, 7, 8}, 10.0);
  const auto y = apply_perturbation(x, d);
  CHECK(y.samples == std::vector<double>{2, 3, 4, 5, 6});
  CHECK_THROWS_AS(apply_perturbation(Waveform{}, d), AudioError);
}

TEST_CASE("cyclic add adjoint folds gradients modulo the period") {
  std::mt19937_64 rng(5);
  const std::size_t T = 37, td = 10;
  Waveform x(sbtest::uniform_vector(rng, T, -1, 1));
  const Mat y = sbtest::uniform_matrix(rng, 1, T, -1, 1);
  ad::Tape t;
  ad::Var d = t.leaf(sbtest::uniform_matrix(rng, 1, td, -1, 1));
  ad::Var out = taped::add_cyclic(t, x, d);
  ad::Var loss = ad::sum(t, ad::mul(t, out, t.constant(y)));
  t.backward(loss);
  std::vector<double> folded(td, 0.0);
  for (std::size_t i = 0; i < T; ++i) folded[i % td] += y(0, static_cast<Eigen::Index>(i));
  const Mat g = t.grad(d);
  for (std::size_t k = 0; k < td; ++k) CHECK(g(0, static_cast<Eigen::Index>(k)) == doctest::Approx(folded[k]).epsilon(1e-14));
}

TEST_CASE("projection clamps, is idempotent and never grows a value") {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 1000; ++trial) {
    const double eps = std::uniform_real_distribution<double>(0.0, 1.5)(rng);
    Perturbation d(sbtest::uniform_vector(rng, 1 + sbtest::pick(rng, 64), -3.0, 3.0), eps);
    const auto p = project_linf(d);
    const auto pp = project_linf(p);
    REQUIRE(pp.values == p.values);
    for (std::size_t i = 0; i < d.size(); ++i) {
      REQUIRE(std::abs(p.values[i]) <= std::abs(d.values[i]));
      REQUIRE(std::abs(p.values[i]) <= eps);
      if (std::abs(d.values[i]) <= eps) REQUIRE(p.values[i] == d.values[i]);
    }
  }
  CHECK(project_linf(Perturbation({1.0, -1.0}, 0.5)).values == std::vector<double>{0.5, -0.5});
}

TEST_CASE("normalization maps the peak just below one") {
  Waveform x({0.1, -0.4, 0.2});
  const auto y = normalize_amplitude(x);
  CHECK(y.samples[1] == doctest::Approx(-0.4 / (0.4 + 1e-8)).epsilon(1e-15));
  const auto z = normalize_amplitude(Waveform(std::vector<double>(4, 0.0)));
  for (double v : z.samples) CHECK(v == 0.0);
}

TEST_CASE("front-end gradient matches central differences") {
  std::mt19937_64 rng(21);
  const std::size_t T = 2000, td = 1500;
  Waveform x(sine(800.0, T, 0.4));
  for (double& v : x.samples) v += 0.02 * std::uniform_real_distribution<double>(-1, 1)(rng);
  Perturbation delta(sbtest::uniform_vector(rng, td, -0.1, 0.1), 0.5);
  const Mat weights = sbtest::uniform_matrix(rng, static_cast<Eigen::Index>(frame_count(T)), kMelBins, -1, 1);
  auto functional = [&](const Perturbation& d) { return preprocess(x, &d).frames.cwiseProduct(weights).sum(); };

  ad::Tape t;
  ad::Var dv = t.leaf(Eigen::Map<const Mat>(delta.values.data(), 1, static_cast<Eigen::Index>(td)));
  ad::Var out = ad::sum(t, ad::mul(t, taped::preprocess(t, x, dv), t.constant(weights)));
  CHECK(t.scalar(out) == doctest::Approx(functional(delta)).epsilon(1e-12));
  t.backward(out);
  const Mat g = t.grad(dv);

  const std::size_t peak = sbtest::peak_index(x, delta);
  std::vector<double> a, f;
  while (a.size() < 60) {
    const std::size_t i = sbtest::pick(rng, td);
    if (i == peak || i + td == peak) continue;
    a.push_back(g(0, static_cast<Eigen::Index>(i)));
    f.push_back(sbtest::central_difference([&](double h) {
      Perturbation d = delta;
      d.values[i] += h;
      return functional(d);
    }));
  }
  sbtest::FdStats stats;
  sbtest::accumulate_fd(stats, a, f);
  CHECK(stats.worst < 1e-4);
}

TEST_CASE("perturbation files round-trip bitwise") {
  std::mt19937_64 rng(4);
  Perturbation d(sbtest::uniform_vector(rng, 1000, -0.5, 0.5), 0.5);
  d.values[3] = -0.0;
  d.values[7] = 0.5;
  const auto path = std::filesystem::temp_directory_path() / "sb_test_roundtrip.sbp";
  write_perturbation(path, d);
  const auto r = read_perturbation(path, 0.5);
  REQUIRE(r.size() == d.size());
  CHECK(std::memcmp(r.values.data(), d.values.data(), d.size() * sizeof(double)) == 0);
  CHECK(r.budget == 0.5);
  {
    std::ofstream bad(path, std::ios::binary);
    bad << "NOTAPERT";
  }
  CHECK_THROWS_AS(read_perturbation(path, 0.5), AudioError);
  std::filesystem::remove(path);
}

TEST_CASE("wav round-trip is exact to 16-bit precision") {
  const auto x = sine(440.0, 800, 0.7);
  const auto path = std::filesystem::temp_directory_path() / "sb_test_roundtrip.wav";
  write_wav(path, Waveform(x));
  const auto y = read_wav(path);
  REQUIRE(y.size() == x.size());
  CHECK(y.sample_rate == 16000);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(y.samples[i] - x[i]) <= 1.0 / 32768.0);
  std::filesystem::remove(path);
}
