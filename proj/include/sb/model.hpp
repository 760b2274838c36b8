#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "sb/audio.hpp"
#include "sb/autodiff.hpp"
#include "sb/errors.hpp"

namespace sb::model {

inline constexpr std::size_t kLayers = 6;
inline constexpr std::size_t kHeads = 2;
inline constexpr std::size_t kModelDim = 32;
inline constexpr std::size_t kHeadDim = kModelDim / kHeads;
inline constexpr std::size_t kFfnDim = 64;
inline constexpr std::size_t kVocab = 64;
inline constexpr std::size_t kPoolFactor = 8;
inline constexpr std::size_t kEncoderHidden = 64;
inline constexpr std::size_t kEncoderDim = 32;
inline constexpr std::size_t kVideoDim = 16;
inline constexpr std::size_t kMaxPositions = 256;

// Fixed affine map applied to log-mel energies before pooling.
inline constexpr double kFeatureOffset = 20.0;
inline constexpr double kFeatureScale = 0.2;

struct TrimodalExample {
  std::string id;
  audio::Waveform audio;
  Mat video_features;  // (N_vf, kVideoDim)
  std::vector<int> question_tokens;
  std::vector<int> answer_tokens;
};

template <typename T>
struct LayerTensors {
  T ln1_gain, ln1_bias;
  std::array<T, kHeads> wq, wk, wv, wo;
  T ln2_gain, ln2_bias;
  T ff_w1, ff_b1, ff_w2, ff_b2;
};

template <typename T>
struct ParamTensors {
  T enc_w1, enc_b1, enc_w2, enc_b2;  // audio encoder over pooled frames
  T audio_proj_w, audio_proj_b;      // audio -> language-model width
  T video_proj_w, video_proj_b;
  T token_embedding;     // (V, d)
  T position_embedding;  // (kMaxPositions, d)
  std::vector<LayerTensors<T>> layers;
  T final_gain, final_bias;
  T output_head;  // (d, V)

  /// Visits every tensor in a fixed order with a stable name.
  template <typename F>
  void visit(F&& f);
  template <typename F>
  void visit(F&& f) const;
};

/// Frozen weights of the trimodal toy model.
struct ModelParams : ParamTensors<Mat> {
  static ModelParams initialize(std::uint64_t seed);
  std::size_t parameter_count() const;
  bool all_finite() const;
};

struct Range {
  std::size_t begin = 0;
  std::size_t count = 0;
  std::size_t end() const { return begin + count; }
  bool contains(std::size_t i) const { return i >= begin && i < end(); }
};

/// Token positions in the order [video, audio, question, answer].
struct TokenLayout {
  Range video, audio, question, answer;
  std::size_t total() const { return answer.end(); }
  bool operator==(const TokenLayout&) const = default;
};

bool operator==(const Range& a, const Range& b);

/// Handles to one forward pass recorded on a tape.
struct TapedActivations {
  ad::Var audio_embeddings;                               // (N_e, d)
  std::vector<std::array<ad::Var, kHeads>> attention_logits;  // [layer][head], (N, N), masked
  std::vector<ad::Var> hidden_states;                     // [layer], (N, d)
  ad::Var output_logits;                                  // (m, V)
  TokenLayout layout;
};

/// Plain-value snapshot of one forward pass.
struct ModelActivations {
  Mat audio_embeddings;
  std::vector<std::array<Mat, kHeads>> attention_logits;
  std::vector<Mat> hidden_states;
  Mat output_logits;
  TokenLayout layout;

  static ModelActivations snapshot(const ad::Tape& tape, const TapedActivations& acts);
  /// Loads the values back onto a tape as constants.
  TapedActivations load(ad::Tape& tape) const;
};

/// Standardized, mean-pooled filterbank frames: (ceil(N_f / kPoolFactor), kMelBins).
Mat pool_features(const audio::FilterbankFeatures& features);
ad::Var pool_features(ad::Tape& t, ad::Var features);

Mat encode_audio(const audio::FilterbankFeatures& features, const ModelParams& params);

/// Binds params onto a tape; gradients are tracked only when requires_grad.
ParamTensors<ad::Var> bind(ad::Tape& t, const ModelParams& params, bool requires_grad);

/// Builds the transformer over already-pooled audio.
TapedActivations forward_pooled(ad::Tape& t, const TrimodalExample& ex, ad::Var pooled_audio,
                                const ParamTensors<ad::Var>& p);

/// Full pipeline with the perturbation as the differentiable input.
TapedActivations forward_taped(ad::Tape& t, const TrimodalExample& ex, ad::Var delta,
                               const ParamTensors<ad::Var>& p);

ModelActivations forward(const TrimodalExample& ex, const audio::Perturbation* delta, const ModelParams& params);

/// Builds a scalar loss from the adversarial pass recorded on the tape.
using LossBuilder = std::function<ad::Var(ad::Tape&, const TapedActivations& adv)>;

struct GradientResult {
  double loss_value = 0.0;
  std::vector<double> grad_wrt_delta;
};

/// Loss and its gradient with respect to the raw perturbation; NaN entries are zeroed.
/// Throws DivergenceError when the loss is not finite.
GradientResult grad_wrt_perturbation(const TrimodalExample& ex, const audio::Perturbation& delta,
                                     const ModelParams& params, const LossBuilder& loss,
                                     const std::string& context = "");

struct Prediction {
  std::vector<int> tokens;
  std::vector<double> log_probs;
  double confidence = 0.0;
};

Prediction decode_greedy(const Mat& output_logits);
Prediction predict_answer(const TrimodalExample& ex, const audio::Perturbation* delta, const ModelParams& params);

/// Validates token ids; throws ValidationError("vocabulary overflow") on bad ids.
void validate_example(const TrimodalExample& ex);

// ---- training ---------------------------------------------------------------

/// Inputs for training with the (delta-free) audio front end already applied.
struct PreparedExample {
  Mat pooled_audio;
  TrimodalExample meta;  // audio left empty
};

PreparedExample prepare(const TrimodalExample& ex);

struct TrainingConfig {
  std::size_t max_epochs = 40;
  std::size_t batch_size = 16;
  double learning_rate = 0.05;
  double momentum = 0.9;
  double required_accuracy = 0.90;
  double stop_accuracy = 0.99;
};

struct TrainingResult {
  ModelParams params;
  std::vector<double> train_loss;
  std::vector<double> val_accuracy;
  double initial_val_accuracy = 0.0;
  double final_val_accuracy = 0.0;
};

class ModelUnderfit : public std::runtime_error {
 public:
  ModelUnderfit(double accuracy, TrainingResult partial)
      : std::runtime_error("model underfit (val accuracy " + std::to_string(accuracy) + ")"),
        accuracy_(accuracy),
        partial_(std::move(partial)) {}
  double accuracy() const { return accuracy_; }
  const TrainingResult& partial() const { return partial_; }

 private:
  double accuracy_;
  TrainingResult partial_;
};

double answer_accuracy(const std::vector<PreparedExample>& data, const ModelParams& params);

/// SGD with momentum on answer cross-entropy; deterministic for a fixed seed.
/// Throws ModelUnderfit when the final accuracy misses config.required_accuracy.
TrainingResult train_toy_model(const std::vector<PreparedExample>& train, const std::vector<PreparedExample>& val,
                               const TrainingConfig& config, std::uint64_t seed);

// ---- persistence --------------------------------------------------------------

/// Binary tensor file plus "<path>.json" sidecar with architecture constants and seed.
void save_params(const std::filesystem::path& path, const ModelParams& params, std::uint64_t seed);
ModelParams load_params(const std::filesystem::path& path);

}  // namespace sb::model

#include "sb/model_params.inl"
