#include "sb/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>

namespace sb::metrics {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kChannelNormEps = 1e-10;
constexpr std::uint64_t kFeatureSeed = 0x5eed5eedULL;
constexpr std::size_t kStageChannels[] = {1, 8, 16, 32};

// Feature map stored as (height * width) rows of channel vectors.
struct FeatureMap {
  Eigen::Index height = 0, width = 0;
  Mat data;  // (height * width, channels)
};

// 2x2 patches with stride 2; weights are (4 * in_channels, out_channels).
FeatureMap patch_stage(const FeatureMap& in, const Mat& weights) {
  FeatureMap out;
  out.height = in.height / 2;
  out.width = in.width / 2;
  const Eigen::Index cin = in.data.cols();
  Mat patches(out.height * out.width, 4 * cin);
  for (Eigen::Index r = 0; r < out.height; ++r) {
    for (Eigen::Index c = 0; c < out.width; ++c) {
      const Eigen::Index row = r * out.width + c;
      Eigen::Index k = 0;
      for (Eigen::Index dr = 0; dr < 2; ++dr) {
        for (Eigen::Index dc = 0; dc < 2; ++dc) {
          patches.block(row, k * cin, 1, cin) = in.data.row((2 * r + dr) * in.width + 2 * c + dc);
          ++k;
        }
      }
    }
  }
  out.data = (patches * weights).cwiseMax(0.0);
  return out;
}

const std::vector<Mat>& stage_weights() {
  static const std::vector<Mat> weights = [] {
    std::mt19937_64 rng(kFeatureSeed);
    std::vector<Mat> w;
    for (std::size_t s = 0; s + 1 < std::size(kStageChannels); ++s) {
      const auto fan_in = static_cast<Eigen::Index>(4 * kStageChannels[s]);
      std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(fan_in)));
      Mat m(fan_in, static_cast<Eigen::Index>(kStageChannels[s + 1]));
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
      w.push_back(std::move(m));
    }
    return w;
  }();
  return weights;
}

Mat unit_channels(const Mat& m) {
  Mat out = m;
  for (Eigen::Index i = 0; i < out.rows(); ++i) out.row(i) /= out.row(i).norm() + kChannelNormEps;
  return out;
}

Mat log_mel_raw(const audio::Waveform& w) {
  std::vector<double> pcm(w.samples.size());
  for (std::size_t i = 0; i < pcm.size(); ++i) pcm[i] = w.samples[i] * audio::kPcmScale;
  return audio::mel_filterbank(pcm).frames;
}

template <typename T>
std::size_t levenshtein(const std::vector<T>& a, const std::vector<T>& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  std::iota(prev.begin(), prev.end(), 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

template <typename T>
double wer(const std::vector<T>& reference, const std::vector<T>& hypothesis) {
  if (reference.empty()) throw std::invalid_argument("empty reference transcript");
  return static_cast<double>(levenshtein(reference, hypothesis)) / static_cast<double>(reference.size());
}

}  // namespace

std::optional<double> attack_success_rate(const std::vector<EvalRecord>& records) {
  std::size_t correct = 0, flipped = 0;
  for (const auto& r : records) {
    if (!r.clean_correct()) continue;
    ++correct;
    if (!r.adv_correct()) ++flipped;
  }
  if (correct == 0) return std::nullopt;
  return static_cast<double>(flipped) / static_cast<double>(correct);
}

double si_snr(const audio::Waveform& reference, const audio::Waveform& estimate) {
  if (reference.size() != estimate.size()) throw std::invalid_argument("si_snr: length mismatch");
  const Eigen::Index n = static_cast<Eigen::Index>(reference.size());
  Vec r = Eigen::Map<const Vec>(reference.samples.data(), n);
  Vec e = Eigen::Map<const Vec>(estimate.samples.data(), n);
  r.array() -= r.mean();
  e.array() -= e.mean();
  const double rr = r.squaredNorm();
  if (rr == 0.0) throw std::invalid_argument("degenerate reference");
  const Vec target = (e.dot(r) / rr) * r;
  const Vec noise = e - target;
  const double ts = target.squaredNorm();
  const double ns = noise.squaredNorm();
  // Residuals at rounding level (more than 280 dB down) count as exact.
  if (ns <= ts * 1e-28) return kInf;
  return 10.0 * std::log10(ts / ns);
}

double cap_for_report(double si_snr_db) { return std::min(si_snr_db, kSiSnrReportCapDb); }

double spectral_perceptual_distance(const audio::Waveform& reference, const audio::Waveform& estimate) {
  Mat a = log_mel_raw(reference);
  Mat b = log_mel_raw(estimate);
  const Eigen::Index frames = std::min(a.rows(), b.rows());
  FeatureMap fa{frames, a.cols(), Eigen::Map<const Mat>(a.data(), frames * a.cols(), 1)};
  FeatureMap fb{frames, b.cols(), Eigen::Map<const Mat>(b.data(), frames * b.cols(), 1)};
  double total = 0.0;
  for (const Mat& w : stage_weights()) {
    fa = patch_stage(fa, w);
    fb = patch_stage(fb, w);
    if (fa.data.rows() == 0) break;
    const Mat diff = unit_channels(fa.data) - unit_channels(fb.data);
    total += diff.rowwise().squaredNorm().mean();
  }
  return total;
}

double word_error_rate(const std::vector<int>& reference, const std::vector<int>& hypothesis) {
  return wer(reference, hypothesis);
}

double word_error_rate(const std::vector<std::string>& reference, const std::vector<std::string>& hypothesis) {
  return wer(reference, hypothesis);
}

std::size_t edit_distance(const std::vector<int>& a, const std::vector<int>& b) { return levenshtein(a, b); }

double sequence_confidence(std::span<const double> log_probs) {
  if (log_probs.empty()) throw std::invalid_argument("empty log-probability sequence");
  double sum = 0.0;
  for (double lp : log_probs) {
    if (!(lp <= 0.0)) throw std::invalid_argument("invalid log-probability");
    sum += lp;
  }
  return std::exp(sum / static_cast<double>(log_probs.size()));
}

MetricsSummary summarize(const std::vector<EvalRecord>& records, const std::vector<WaveformPair>& waveforms) {
  MetricsSummary s;
  s.count = records.size();
  s.asr = attack_success_rate(records);
  if (!records.empty()) {
    double clean = 0.0, adv = 0.0, delta = 0.0;
    for (const auto& r : records) {
      clean += r.clean_correct() ? 1.0 : 0.0;
      adv += r.adv_correct() ? 1.0 : 0.0;
      delta += r.clean_confidence - r.adv_confidence;
    }
    const double n = static_cast<double>(records.size());
    s.clean_accuracy = clean / n;
    s.adv_accuracy = adv / n;
    s.mean_confidence_delta = delta / n;
  }
  double snr_sum = 0.0, dist_sum = 0.0;
  std::size_t snr_n = 0, dist_n = 0;
  for (const auto& w : waveforms) {
    try {
      snr_sum += si_snr(w.reference, w.estimate);
      ++snr_n;
    } catch (const std::invalid_argument&) {
    }
    dist_sum += spectral_perceptual_distance(w.reference, w.estimate);
    ++dist_n;
  }
  if (snr_n > 0) s.mean_si_snr_db = snr_sum / static_cast<double>(snr_n);
  if (dist_n > 0) s.mean_perceptual_distance = dist_sum / static_cast<double>(dist_n);
  return s;
}

nlohmann::ordered_json to_json(const MetricsSummary& s) {
  auto opt = [](const std::optional<double>& v) -> nlohmann::ordered_json {
    return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
  };
  nlohmann::ordered_json j;
  j["count"] = s.count;
  j["asr"] = opt(s.asr);
  j["clean_accuracy"] = s.clean_accuracy;
  j["adv_accuracy"] = s.adv_accuracy;
  j["mean_si_snr_db"] = s.mean_si_snr_db ? nlohmann::ordered_json(cap_for_report(*s.mean_si_snr_db)) : nullptr;
  j["mean_perceptual_distance"] = opt(s.mean_perceptual_distance);
  j["mean_confidence_delta"] = s.mean_confidence_delta;
  return j;
}

}  // namespace sb::metrics
