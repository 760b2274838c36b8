#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "sb/losses.hpp"

namespace sb::attack {

inline constexpr std::size_t kUnboundedEpochs = std::numeric_limits<std::size_t>::max();

enum class Schedule { plateau, cosine_warmup };
enum class InitKind { random, natural_audio };

struct AttackConfig {
  losses::LossSelector loss;
  double epsilon = 0.5;
  double learning_rate = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t max_epochs = 150;  // kUnboundedEpochs runs until patience is exhausted
  std::size_t patience = 10;
  double grad_clip_norm = 1.0;  // <= 0 disables clipping
  std::optional<double> grad_scale_gamma;  // unset: per-loss default
  Schedule schedule = Schedule::plateau;
  std::size_t warmup_steps = 0;  // cosine_warmup only
  std::size_t plateau_patience = 5;
  double plateau_factor = 0.1;
  InitKind init = InitKind::random;
  std::filesystem::path init_audio;
  std::uint64_t seed = 42;
  std::size_t perturbation_length = audio::kPerturbationSamples;

  double gamma() const;
  /// Throws ValidationError on out-of-range settings.
  void validate() const;
};

double default_gamma(losses::LossKind kind);

nlohmann::ordered_json to_json(const AttackConfig& c);
/// Missing keys keep their defaults. The rand_att seed defaults to `seed`.
AttackConfig config_from_json(const nlohmann::json& j);

struct OptimizerState {
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  std::uint64_t step_count = 0;
  double current_lr = 0.0;

  static OptimizerState fresh(std::size_t length, double lr);
};

/// Random: i.i.d. Uniform(-eps, eps). Natural: first T samples of a WAV, cyclically
/// padded, clamped to the budget. Throws ValidationError("initializer audio unavailable").
audio::Perturbation init_perturbation(const AttackConfig& config);

/// Post-gradient part of one step: NaN -> 0, global-norm clip, gamma scaling,
/// bias-corrected Adam at state.current_lr, then projection onto the budget.
void adam_project_update(audio::Perturbation& delta, std::vector<double> grad, const AttackConfig& config,
                         OptimizerState& state);

/// One full step on a single example. `clean` must be supplied when the loss needs it.
/// Returns the example loss evaluated at the incoming delta.
double gradient_step(audio::Perturbation& delta, const model::TrimodalExample& example,
                     const model::ModelParams& params, const AttackConfig& config, OptimizerState& state,
                     const model::ModelActivations* clean);

double schedule_cosine_warmup(std::size_t t, std::size_t total, std::size_t warmup, double base_lr);

/// Multiplies the rate by `factor` once the epoch loss has failed to improve
/// (strictly) for `patience` consecutive epochs, then starts counting again.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, std::size_t patience = 5, double factor = 0.1)
      : lr_(lr), patience_(patience), factor_(factor) {}
  double step(double epoch_loss);
  double lr() const { return lr_; }

 private:
  double lr_;
  std::size_t patience_;
  double factor_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t bad_epochs_ = 0;
};

/// Best-loss tracking and early stopping shared by real and synthetic runs.
struct EpochLoopResult {
  std::vector<double> per_epoch_loss;
  double best_loss = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;  // 1-based
  std::size_t epochs_run = 0;
  bool converged = false;  // stopped by patience rather than the epoch cap
};

/// epoch_fn(epoch) returns the mean loss of a 1-based epoch; on_improve fires after
/// each strict improvement.
EpochLoopResult run_epochs(std::size_t max_epochs, std::size_t patience,
                           const std::function<double(std::size_t)>& epoch_fn,
                           const std::function<void(std::size_t, double)>& on_improve = {});

struct AttackReport {
  std::vector<double> per_epoch_loss;
  std::vector<double> per_epoch_lr;
  double best_loss = 0.0;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  bool converged = false;
  audio::Perturbation best_perturbation;
  AttackConfig config;
};

nlohmann::ordered_json to_json(const AttackReport& r);

struct AttackHooks {
  /// Best delta is written here after each improvement.
  std::optional<std::filesystem::path> checkpoint;
  /// Delta in effect when a step diverged, written before the error propagates.
  std::optional<std::filesystem::path> last_good;
  std::function<void(std::size_t epoch, double loss, double lr)> on_epoch;
};

/// Optimizes one shared perturbation over `dataset` (batch size 1). Deterministic for a fixed config.
AttackReport run_attack(const std::vector<model::TrimodalExample>& dataset, const model::ModelParams& params,
                        const AttackConfig& config, const AttackHooks& hooks = {});

}  // namespace sb::attack
