#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

#include "sb/autodiff.hpp"

namespace sb::audio {

inline constexpr int kSampleRate = 16000;
inline constexpr std::size_t kPerturbationSamples = 10 * kSampleRate;
inline constexpr std::size_t kFrameLength = 400;  // 25 ms
inline constexpr std::size_t kFrameShift = 160;   // 10 ms
inline constexpr std::size_t kFftSize = 512;
inline constexpr std::size_t kMelBins = 128;
inline constexpr double kEnergyFloor = 1e-10;
inline constexpr double kNormalizeEps = 1e-8;
inline constexpr double kPcmScale = 32768.0;

class AudioError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Waveform {
  std::vector<double> samples;
  int sample_rate = kSampleRate;

  Waveform() = default;
  explicit Waveform(std::vector<double> s, int rate = kSampleRate) : samples(std::move(s)), sample_rate(rate) {}
  std::size_t size() const { return samples.size(); }
};

/// Shared additive perturbation with an l-infinity budget. Production runs always
/// use kPerturbationSamples; shorter lengths exist for small-scale tests.
struct Perturbation {
  std::vector<double> values;
  double budget = 0.0;

  Perturbation() = default;
  Perturbation(std::vector<double> v, double eps) : values(std::move(v)), budget(eps) {}
  static Perturbation zeros(double eps, std::size_t length = kPerturbationSamples) {
    return Perturbation(std::vector<double>(length, 0.0), eps);
  }
  std::size_t size() const { return values.size(); }
  double linf() const;
};

/// Log-mel energies, one row per frame.
struct FilterbankFeatures {
  Mat frames;  // (N_f, kMelBins)
  std::size_t num_frames() const { return static_cast<std::size_t>(frames.rows()); }
};

std::size_t frame_count(std::size_t num_samples);

std::vector<double> extend_cyclic(std::span<const double> delta, std::size_t target_length);
Waveform apply_perturbation(const Waveform& x, const Perturbation& delta);
Waveform normalize_amplitude(const Waveform& x);
std::vector<double> scale_to_pcm_range(const Waveform& x);
FilterbankFeatures mel_filterbank(std::span<const double> pcm);
Perturbation project_linf(const Perturbation& delta);

/// Full front end: optional perturbation, normalization, PCM scaling, log-mel.
FilterbankFeatures preprocess(const Waveform& x, const Perturbation* delta);

/// HTK mel scale.
double hz_to_mel(double hz);
double mel_to_hz(double mel);
/// Center frequency (Hz) of each triangular filter.
std::vector<double> mel_center_frequencies();

// Differentiable counterparts recorded on a tape. Inputs and outputs are 1 x T rows.
namespace taped {

/// x + cyclic_extend(delta)[:T]; the adjoint folds position t onto t mod T_delta.
ad::Var add_cyclic(ad::Tape& t, const Waveform& x, ad::Var delta);
ad::Var normalize_amplitude(ad::Tape& t, ad::Var x);
ad::Var mel_filterbank(ad::Tape& t, ad::Var pcm);
/// preprocess() on a tape, with delta as the differentiable input.
ad::Var preprocess(ad::Tape& t, const Waveform& x, ad::Var delta);

}  // namespace taped

// WAV (16-bit PCM mono) and raw perturbation persistence.
Waveform read_wav(const std::filesystem::path& path);
void write_wav(const std::filesystem::path& path, const Waveform& w);

/// "SBPERT01" magic, u64 length, then little-endian float64 values.
void write_perturbation(const std::filesystem::path& path, const Perturbation& delta);
Perturbation read_perturbation(const std::filesystem::path& path, double budget);

}  // namespace sb::audio
