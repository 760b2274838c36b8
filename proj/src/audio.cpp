#include "sb/audio.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <fftw3.h>

namespace sb::audio {

namespace {

using cplx = std::complex<double>;

const std::vector<double>& hann_window() {
  static const std::vector<double> window = [] {
    std::vector<double> w(kFrameLength);
    for (std::size_t n = 0; n < kFrameLength; ++n) {
      w[n] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(n) /
                                  static_cast<double>(kFrameLength - 1));
    }
    return w;
  }();
  return window;
}

constexpr std::size_t kSpectrumBins = kFftSize / 2 + 1;

// Triangular filters on the HTK mel axis, 0 Hz to Nyquist, stored as the
// contiguous run of FFT bins each one covers.
struct MelFilter {
  std::size_t first_bin = 0;
  std::vector<double> weights;
};

const std::vector<MelFilter>& mel_filters() {
  static const std::vector<MelFilter> filters = [] {
    std::vector<MelFilter> out(kMelBins);
    const double mel_low = hz_to_mel(0.0);
    const double mel_high = hz_to_mel(kSampleRate / 2.0);
    const double delta = (mel_high - mel_low) / static_cast<double>(kMelBins + 1);
    for (std::size_t m = 0; m < kMelBins; ++m) {
      const double left = mel_low + static_cast<double>(m) * delta;
      const double center = left + delta;
      const double right = center + delta;
      for (std::size_t k = 0; k < kSpectrumBins; ++k) {
        const double mel = hz_to_mel(static_cast<double>(k) * kSampleRate / static_cast<double>(kFftSize));
        if (mel > left && mel < right) {
          if (out[m].weights.empty()) out[m].first_bin = k;
          out[m].weights.push_back(mel <= center ? (mel - left) / delta : (right - mel) / delta);
        }
      }
    }
    return out;
  }();
  return filters;
}

// Filter energies of one frame's power spectrum.
void apply_filters(const std::vector<double>& power, double* energy) {
  const auto& filters = mel_filters();
  for (std::size_t m = 0; m < kMelBins; ++m) {
    double e = 0.0;
    const auto& f = filters[m];
    for (std::size_t i = 0; i < f.weights.size(); ++i) e += f.weights[i] * power[f.first_bin + i];
    energy[m] = e;
  }
}

// Plans are created once; executing a plan on fresh buffers is thread-safe.
struct FramePlans {
  fftw_plan forward;
  fftw_plan inverse;
  FramePlans() {
    std::vector<double> re(kFftSize);
    std::vector<cplx> spec(kSpectrumBins);
    auto* c = reinterpret_cast<fftw_complex*>(spec.data());
    const unsigned flags = FFTW_ESTIMATE | FFTW_UNALIGNED;
    forward = fftw_plan_dft_r2c_1d(static_cast<int>(kFftSize), re.data(), c, flags);
    inverse = fftw_plan_dft_c2r_1d(static_cast<int>(kFftSize), c, re.data(), flags);
  }
};

const FramePlans& plans() {
  static const FramePlans p;
  return p;
}

// Windowed, zero-padded half spectrum (bins 0..kFftSize/2) of the frame at `start`.
std::vector<cplx> frame_spectrum(std::span<const double> pcm, std::size_t start) {
  const auto& window = hann_window();
  std::vector<double> buf(kFftSize, 0.0);
  for (std::size_t n = 0; n < kFrameLength; ++n) buf[n] = pcm[start + n] * window[n];
  std::vector<cplx> out(kSpectrumBins);
  fftw_execute_dft_r2c(plans().forward, buf.data(), reinterpret_cast<fftw_complex*>(out.data()));
  return out;
}

std::vector<double> power_of(const std::vector<cplx>& spectrum) {
  std::vector<double> p(kSpectrumBins);
  for (std::size_t k = 0; k < kSpectrumBins; ++k) {
    p[k] = spectrum[k].real() * spectrum[k].real() + spectrum[k].imag() * spectrum[k].imag();
  }
  return p;
}

void require_frame(std::size_t n) {
  if (n < kFrameLength) throw AudioError("audio too short for one frame");
}

}  // namespace

double Perturbation::linf() const {
  double m = 0.0;
  for (double v : values) m = std::max(m, std::abs(v));
  return m;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::vector<double> mel_center_frequencies() {
  const double mel_high = hz_to_mel(kSampleRate / 2.0);
  const double delta = mel_high / static_cast<double>(kMelBins + 1);
  std::vector<double> centers(kMelBins);
  for (std::size_t m = 0; m < kMelBins; ++m) centers[m] = mel_to_hz(static_cast<double>(m + 1) * delta);
  return centers;
}

std::size_t frame_count(std::size_t num_samples) {
  require_frame(num_samples);
  return 1 + (num_samples - kFrameLength) / kFrameShift;
}

std::vector<double> extend_cyclic(std::span<const double> delta, std::size_t target_length) {
  if (delta.empty()) throw std::invalid_argument("extend_cyclic: empty perturbation");
  std::vector<double> out(target_length);
  for (std::size_t t = 0; t < target_length; ++t) out[t] = delta[t % delta.size()];
  return out;
}

Waveform apply_perturbation(const Waveform& x, const Perturbation& delta) {
  if (x.samples.empty()) throw AudioError("empty waveform");
  const auto ext = extend_cyclic(delta.values, x.size());
  Waveform out = x;
  for (std::size_t t = 0; t < out.samples.size(); ++t) out.samples[t] += ext[t];
  return out;
}

Waveform normalize_amplitude(const Waveform& x) {
  double peak = 0.0;
  for (double v : x.samples) peak = std::max(peak, std::abs(v));
  const double denom = peak + kNormalizeEps;
  Waveform out = x;
  for (double& v : out.samples) v /= denom;
  return out;
}

std::vector<double> scale_to_pcm_range(const Waveform& x) {
  std::vector<double> out(x.samples);
  for (double& v : out) v *= kPcmScale;
  return out;
}

FilterbankFeatures mel_filterbank(std::span<const double> pcm) {
  const std::size_t frames = frame_count(pcm.size());
  FilterbankFeatures out;
  out.frames.resize(static_cast<Eigen::Index>(frames), kMelBins);
  for (std::size_t f = 0; f < frames; ++f) {
    double* row = out.frames.row(static_cast<Eigen::Index>(f)).data();
    apply_filters(power_of(frame_spectrum(pcm, f * kFrameShift)), row);
    for (std::size_t m = 0; m < kMelBins; ++m) row[m] = std::log(std::max(row[m], kEnergyFloor));
  }
  return out;
}

Perturbation project_linf(const Perturbation& delta) {
  Perturbation out = delta;
  for (double& v : out.values) v = std::clamp(v, -delta.budget, delta.budget);
  return out;
}

FilterbankFeatures preprocess(const Waveform& x, const Perturbation* delta) {
  const Waveform mixed = delta != nullptr ? apply_perturbation(x, *delta) : x;
  return mel_filterbank(scale_to_pcm_range(normalize_amplitude(mixed)));
}

namespace taped {

ad::Var add_cyclic(ad::Tape& t, const Waveform& x, ad::Var delta) {
  const Mat& d = t.value(delta);
  if (d.rows() != 1 || d.cols() == 0) throw std::invalid_argument("add_cyclic: delta must be a non-empty row");
  if (x.samples.empty()) throw AudioError("empty waveform");
  const std::size_t period = static_cast<std::size_t>(d.cols());
  Mat out(1, static_cast<Eigen::Index>(x.size()));
  for (std::size_t i = 0; i < x.size(); ++i) {
    out(0, static_cast<Eigen::Index>(i)) = x.samples[i] + d(0, static_cast<Eigen::Index>(i % period));
  }
  return t.record(std::move(out), {delta}, [delta, period](ad::Tape& tp, const Mat& g) {
    Mat& gd = tp.grad_buffer(delta);
    for (Eigen::Index i = 0; i < g.cols(); ++i) gd(0, static_cast<Eigen::Index>(static_cast<std::size_t>(i) % period)) += g(0, i);
  });
}

ad::Var normalize_amplitude(ad::Tape& t, ad::Var x) {
  const Mat& xv = t.value(x);
  Eigen::Index argmax = 0;
  double peak = 0.0;
  for (Eigen::Index i = 0; i < xv.size(); ++i) {
    const double a = std::abs(xv.data()[i]);
    if (a > peak) {
      peak = a;
      argmax = i;
    }
  }
  const double denom = peak + kNormalizeEps;
  return t.record(xv / denom, {x}, [x, argmax, denom](ad::Tape& tp, const Mat& g) {
    const Mat& xv2 = tp.value(x);
    Mat& gx = tp.grad_buffer(x);
    gx += g / denom;
    const double xk = xv2.data()[argmax];
    if (xk != 0.0) {
      const double sign = xk > 0.0 ? 1.0 : -1.0;
      gx.data()[argmax] -= sign * g.cwiseProduct(xv2).sum() / (denom * denom);
    }
  });
}

ad::Var mel_filterbank(ad::Tape& t, ad::Var pcm) {
  const Mat& w = t.value(pcm);
  if (w.rows() != 1) throw std::invalid_argument("mel_filterbank: expected a row vector");
  const std::size_t samples = static_cast<std::size_t>(w.cols());
  const std::size_t frames = frame_count(samples);
  const std::span<const double> view(w.data(), samples);

  std::vector<std::vector<cplx>> spectra(frames);
  Mat energy(static_cast<Eigen::Index>(frames), kMelBins);
  for (std::size_t f = 0; f < frames; ++f) {
    spectra[f] = frame_spectrum(view, f * kFrameShift);
    apply_filters(power_of(spectra[f]), energy.row(static_cast<Eigen::Index>(f)).data());
  }
  Mat out = energy.unaryExpr([](double e) { return std::log(std::max(e, kEnergyFloor)); });

  return t.record(std::move(out), {pcm}, [pcm, spectra = std::move(spectra), energy](ad::Tape& tp, const Mat& g) {
    const auto& filters = mel_filters();
    const auto& window = hann_window();
    Mat& gw = tp.grad_buffer(pcm);
    std::vector<cplx> half(kSpectrumBins);
    std::vector<double> buf(kFftSize);
    for (std::size_t f = 0; f < spectra.size(); ++f) {
      const auto fi = static_cast<Eigen::Index>(f);
      std::vector<double> g_power(kSpectrumBins, 0.0);
      for (std::size_t m = 0; m < kMelBins; ++m) {
        const auto mi = static_cast<Eigen::Index>(m);
        const double e = energy(fi, mi);
        if (!(e > kEnergyFloor)) continue;
        const double ge = g(fi, mi) / e;
        const auto& flt = filters[m];
        for (std::size_t i = 0; i < flt.weights.size(); ++i) g_power[flt.first_bin + i] += flt.weights[i] * ge;
      }
      // d|X_k|^2/dx_n summed over k is Re(sum_k 2 g_k X_k e^{+i 2 pi k n / N}). The
      // complex-to-real transform doubles bins 1..N/2-1, so those are halved here.
      for (std::size_t k = 0; k < kSpectrumBins; ++k) {
        const double s = (k == 0 || k + 1 == kSpectrumBins) ? 2.0 : 1.0;
        half[k] = s * g_power[k] * spectra[f][k];
      }
      half.front().imag(0.0);
      half.back().imag(0.0);
      fftw_execute_dft_c2r(plans().inverse, reinterpret_cast<fftw_complex*>(half.data()), buf.data());
      const std::size_t start = f * kFrameShift;
      for (std::size_t n = 0; n < kFrameLength; ++n) {
        gw(0, static_cast<Eigen::Index>(start + n)) += window[n] * buf[n];
      }
    }
  });
}

ad::Var preprocess(ad::Tape& t, const Waveform& x, ad::Var delta) {
  ad::Var mixed = add_cyclic(t, x, delta);
  ad::Var normed = normalize_amplitude(t, mixed);
  ad::Var pcm = ad::scale(t, normed, kPcmScale);
  return mel_filterbank(t, pcm);
}

}  // namespace taped

}  // namespace sb::audio
