#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "sb/audio.hpp"

namespace sb::metrics {

/// Serialized reports replace the +infinity SI-SNR sentinel with this value.
inline constexpr double kSiSnrReportCapDb = 300.0;

struct EvalRecord {
  std::string example_id;
  std::vector<int> clean_prediction;
  std::vector<int> adv_prediction;
  std::vector<int> gold;
  double clean_confidence = 0.0;
  double adv_confidence = 0.0;

  bool clean_correct() const { return clean_prediction == gold; }
  bool adv_correct() const { return adv_prediction == gold; }
  bool attack_success() const { return clean_correct() && !adv_correct(); }
};

/// Flipped fraction of clean-correct records; nullopt when none were clean-correct.
std::optional<double> attack_success_rate(const std::vector<EvalRecord>& records);

/// Scale-invariant SNR in dB. Returns +infinity when the residual vanishes.
/// Throws std::invalid_argument("degenerate reference") for a constant reference.
double si_snr(const audio::Waveform& reference, const audio::Waveform& estimate);
double cap_for_report(double si_snr_db);

/// LPIPS-style distance over log-mel spectrograms using a fixed random
/// three-stage convolutional feature stack. Inputs are truncated to the
/// shorter frame count.
double spectral_perceptual_distance(const audio::Waveform& reference, const audio::Waveform& estimate);

/// Levenshtein distance over tokens divided by the reference length.
/// Throws std::invalid_argument("empty reference transcript").
double word_error_rate(const std::vector<int>& reference, const std::vector<int>& hypothesis);
double word_error_rate(const std::vector<std::string>& reference, const std::vector<std::string>& hypothesis);
std::size_t edit_distance(const std::vector<int>& a, const std::vector<int>& b);

/// exp(mean log-probability). Throws std::invalid_argument("invalid log-probability") on positive input.
double sequence_confidence(std::span<const double> log_probs);

struct WaveformPair {
  audio::Waveform reference;
  audio::Waveform estimate;
};

struct MetricsSummary {
  std::size_t count = 0;
  std::optional<double> asr;
  double clean_accuracy = 0.0;
  double adv_accuracy = 0.0;
  std::optional<double> mean_si_snr_db;
  std::optional<double> mean_perceptual_distance;
  double mean_confidence_delta = 0.0;  // clean minus adversarial
};

MetricsSummary summarize(const std::vector<EvalRecord>& records, const std::vector<WaveformPair>& waveforms);

nlohmann::ordered_json to_json(const MetricsSummary& s);

}  // namespace sb::metrics
