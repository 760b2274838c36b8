#include "sb/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

namespace sb::attack {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t x = seed ^ (stream * 0x9e3779b97f4a7c15ULL);
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kShuffleStream = 2;

double unit_uniform(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

std::string schedule_name(Schedule s) { return s == Schedule::plateau ? "plateau" : "cosine_warmup"; }

}  // namespace

double default_gamma(losses::LossKind kind) {
  using losses::LossKind;
  switch (kind) {
    case LossKind::vision_att:
    case LossKind::audio_att:
    case LossKind::rand_att: return 1e-5;
    case LossKind::encoder_cos:
    case LossKind::hidden_cos: return 1e4;
    default: return 1.0;
  }
}

double AttackConfig::gamma() const { return grad_scale_gamma.value_or(default_gamma(loss.kind)); }

void AttackConfig::validate() const {
  // A zero budget is accepted as the degenerate "no perturbation" case.
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw ValidationError("epsilon must be >= 0");
  if (!(learning_rate >= 0.0)) throw ValidationError("learning_rate must be >= 0");
  if (patience < 1) throw ValidationError("patience must be >= 1");
  if (max_epochs < 1) throw ValidationError("max_epochs must be >= 1");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw ValidationError("adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ValidationError("adam_eps must be > 0");
  if (!(gamma() > 0.0)) throw ValidationError("grad_scale_gamma must be > 0");
  if (perturbation_length < 1) throw ValidationError("perturbation_length must be >= 1");
  if (schedule == Schedule::cosine_warmup) {
    if (max_epochs == kUnboundedEpochs) throw ValidationError("cosine_warmup needs a finite max_epochs");
    if (warmup_steps < 1) throw ValidationError("cosine_warmup needs warmup_steps >= 1");
  }
  if (schedule == Schedule::plateau && (plateau_patience < 1 || !(plateau_factor > 0.0))) {
    throw ValidationError("bad plateau schedule settings");
  }
  if (init == InitKind::natural_audio && init_audio.empty()) throw ValidationError("natural_audio init needs a path");
}

ordered_json to_json(const AttackConfig& c) {
  ordered_json j;
  j["loss"] = {{"kind", losses::to_string(c.loss.kind)},
               {"layers", c.loss.layer_subset.layers},
               {"rand_seed", c.loss.rand_seed}};
  j["epsilon"] = c.epsilon;
  j["learning_rate"] = c.learning_rate;
  j["adam_beta1"] = c.adam_beta1;
  j["adam_beta2"] = c.adam_beta2;
  j["adam_eps"] = c.adam_eps;
  if (c.max_epochs == kUnboundedEpochs) {
    j["max_epochs"] = "unbounded";
  } else {
    j["max_epochs"] = c.max_epochs;
  }
  j["patience"] = c.patience;
  j["grad_clip_norm"] = c.grad_clip_norm;
  j["grad_scale_gamma"] = c.gamma();
  ordered_json sched = {{"kind", schedule_name(c.schedule)}};
  if (c.schedule == Schedule::plateau) {
    sched["patience"] = c.plateau_patience;
    sched["factor"] = c.plateau_factor;
  } else {
    sched["warmup_steps"] = c.warmup_steps;
  }
  j["schedule"] = sched;
  if (c.init == InitKind::random) {
    j["init"] = {{"kind", "random"}};
  } else {
    j["init"] = {{"kind", "natural_audio"}, {"path", c.init_audio.string()}};
  }
  j["seed"] = c.seed;
  j["perturbation_length"] = c.perturbation_length;
  return j;
}

AttackConfig config_from_json(const json& j) {
  AttackConfig c;
  try {
    c.seed = j.value("seed", c.seed);
    c.loss.rand_seed = c.seed;
    if (j.contains("loss")) {
      const json& l = j.at("loss");
      if (l.is_string()) {
        c.loss.kind = losses::parse_loss_kind(l.get<std::string>());
      } else {
        c.loss.kind = losses::parse_loss_kind(l.value("kind", std::string("combined")));
        if (l.contains("layers")) c.loss.layer_subset = losses::LayerSubset::of(l.at("layers").get<std::vector<std::size_t>>());
        c.loss.rand_seed = l.value("rand_seed", c.loss.rand_seed);
      }
    }
    c.epsilon = j.value("epsilon", c.epsilon);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    if (j.contains("max_epochs")) {
      const json& m = j.at("max_epochs");
      if (m.is_string()) {
        if (m.get<std::string>() != "unbounded") throw ValidationError("max_epochs must be an integer or \"unbounded\"");
        c.max_epochs = kUnboundedEpochs;
      } else {
        c.max_epochs = m.get<std::size_t>();
      }
    }
    c.patience = j.value("patience", c.patience);
    c.grad_clip_norm = j.value("grad_clip_norm", c.grad_clip_norm);
    if (j.contains("grad_scale_gamma") && !j.at("grad_scale_gamma").is_null()) {
      c.grad_scale_gamma = j.at("grad_scale_gamma").get<double>();
    }
    if (j.contains("schedule")) {
      const json& s = j.at("schedule");
      const std::string kind = s.is_string() ? s.get<std::string>() : s.value("kind", std::string("plateau"));
      if (kind == "plateau") {
        c.schedule = Schedule::plateau;
      } else if (kind == "cosine_warmup") {
        c.schedule = Schedule::cosine_warmup;
      } else {
        throw ValidationError("unknown schedule '" + kind + "'");
      }
      if (s.is_object()) {
        c.plateau_patience = s.value("patience", c.plateau_patience);
        c.plateau_factor = s.value("factor", c.plateau_factor);
        c.warmup_steps = s.value("warmup_steps", c.warmup_steps);
      }
    }
    if (j.contains("init")) {
      const json& i = j.at("init");
      const std::string kind = i.is_string() ? i.get<std::string>() : i.value("kind", std::string("random"));
      if (kind == "random") {
        c.init = InitKind::random;
      } else if (kind == "natural_audio") {
        c.init = InitKind::natural_audio;
        if (i.is_object()) c.init_audio = i.value("path", std::string());
      } else {
        throw ValidationError("unknown init '" + kind + "'");
      }
    }
    c.perturbation_length = j.value("perturbation_length", c.perturbation_length);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("attack config: ") + e.what());
  }
  c.validate();
  return c;
}

OptimizerState OptimizerState::fresh(std::size_t length, double lr) {
  OptimizerState s;
  s.first_moment.assign(length, 0.0);
  s.second_moment.assign(length, 0.0);
  s.current_lr = lr;
  return s;
}

audio::Perturbation init_perturbation(const AttackConfig& config) {
  const std::size_t n = config.perturbation_length;
  const double eps = config.epsilon;
  std::vector<double> values(n);
  if (config.init == InitKind::random) {
    std::mt19937_64 rng(derive_seed(config.seed, kInitStream));
    for (double& v : values) v = (2.0 * unit_uniform(rng) - 1.0) * eps;
  } else {
    audio::Waveform w;
    try {
      w = audio::read_wav(config.init_audio);
    } catch (const std::exception&) {
      throw ValidationError("initializer audio unavailable");
    }
    if (w.samples.empty()) throw ValidationError("initializer audio unavailable");
    for (std::size_t i = 0; i < n; ++i) values[i] = std::clamp(w.samples[i % w.samples.size()], -eps, eps);
  }
  return audio::Perturbation(std::move(values), eps);
}

void adam_project_update(audio::Perturbation& delta, std::vector<double> grad, const AttackConfig& config,
                         OptimizerState& state) {
  const std::size_t n = delta.size();
  if (grad.size() != n || state.first_moment.size() != n || state.second_moment.size() != n) {
    throw std::invalid_argument("optimizer state does not match perturbation length");
  }
  double sq = 0.0;
  for (double& g : grad) {
    if (std::isnan(g)) g = 0.0;
    sq += g * g;
  }
  const double norm = std::sqrt(sq);
  double factor = config.gamma();
  if (config.grad_clip_norm > 0.0 && norm > config.grad_clip_norm) factor *= config.grad_clip_norm / norm;

  state.step_count += 1;
  const double b1 = config.adam_beta1, b2 = config.adam_beta2;
  const double t = static_cast<double>(state.step_count);
  const double c1 = 1.0 - std::pow(b1, t);
  const double c2 = 1.0 - std::pow(b2, t);
  const double eps = delta.budget;
  for (std::size_t i = 0; i < n; ++i) {
    const double g = grad[i] * factor;
    double& m = state.first_moment[i];
    double& v = state.second_moment[i];
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g * g;
    const double m_hat = m / c1;
    const double v_hat = v / c2;
    const double updated = delta.values[i] - state.current_lr * m_hat / (std::sqrt(v_hat) + config.adam_eps);
    delta.values[i] = std::clamp(updated, -eps, eps);
  }
}

double gradient_step(audio::Perturbation& delta, const model::TrimodalExample& example,
                     const model::ModelParams& params, const AttackConfig& config, OptimizerState& state,
                     const model::ModelActivations* clean) {
  const auto builder = losses::make_builder(config.loss, clean, example.answer_tokens, state.step_count);
  model::GradientResult r = model::grad_wrt_perturbation(example, delta, params, builder, "sample " + example.id);
  adam_project_update(delta, std::move(r.grad_wrt_delta), config, state);
  return r.loss_value;
}

double schedule_cosine_warmup(std::size_t t, std::size_t total, std::size_t warmup, double base_lr) {
  if (t < warmup) return base_lr * static_cast<double>(t) / static_cast<double>(warmup);
  const double progress = static_cast<double>(t - warmup) / static_cast<double>(total - warmup);
  return base_lr / 2.0 * (1.0 + std::cos(std::numbers::pi * progress));
}

double PlateauScheduler::step(double epoch_loss) {
  if (epoch_loss < best_) {
    best_ = epoch_loss;
    bad_epochs_ = 0;
  } else if (++bad_epochs_ >= patience_) {
    lr_ *= factor_;
    bad_epochs_ = 0;
  }
  return lr_;
}

EpochLoopResult run_epochs(std::size_t max_epochs, std::size_t patience,
                           const std::function<double(std::size_t)>& epoch_fn,
                           const std::function<void(std::size_t, double)>& on_improve) {
  EpochLoopResult r;
  std::size_t no_improve = 0;
  for (std::size_t epoch = 1; epoch <= max_epochs; ++epoch) {
    const double loss = epoch_fn(epoch);
    r.per_epoch_loss.push_back(loss);
    r.epochs_run = epoch;
    if (loss < r.best_loss) {
      r.best_loss = loss;
      r.best_epoch = epoch;
      no_improve = 0;
      if (on_improve) on_improve(epoch, loss);
    } else {
      ++no_improve;
    }
    if (no_improve >= patience) {
      r.converged = true;
      break;
    }
  }
  return r;
}

ordered_json to_json(const AttackReport& r) {
  ordered_json j;
  j["config"] = to_json(r.config);
  j["per_epoch_loss"] = r.per_epoch_loss;
  j["per_epoch_lr"] = r.per_epoch_lr;
  j["best_loss"] = r.best_loss;
  j["best_epoch"] = r.best_epoch;
  j["epochs_run"] = r.epochs_run;
  j["converged"] = r.converged;
  j["best_perturbation_linf"] = r.best_perturbation.linf();
  return j;
}

AttackReport run_attack(const std::vector<model::TrimodalExample>& dataset, const model::ModelParams& params,
                        const AttackConfig& config, const AttackHooks& hooks) {
  config.validate();
  if (dataset.empty()) throw ValidationError("attack dataset is empty");

  const bool needs_clean = losses::requirements(config.loss.kind).any_clean();
  std::vector<model::ModelActivations> clean;
  if (needs_clean) {
    clean.reserve(dataset.size());
    for (const auto& ex : dataset) clean.push_back(model::forward(ex, nullptr, params));
  }

  audio::Perturbation delta = init_perturbation(config);
  OptimizerState state = OptimizerState::fresh(delta.size(), config.learning_rate);
  PlateauScheduler plateau(config.learning_rate, config.plateau_patience, config.plateau_factor);
  const std::size_t total_steps =
      config.max_epochs == kUnboundedEpochs ? 0 : config.max_epochs * dataset.size();

  std::mt19937_64 shuffle_rng(derive_seed(config.seed, kShuffleStream));
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);

  AttackReport report;
  report.config = config;
  report.best_perturbation = delta;

  auto epoch_fn = [&](std::size_t epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double sum = 0.0;
    report.per_epoch_lr.push_back(state.current_lr);
    for (std::size_t idx : order) {
      if (config.schedule == Schedule::cosine_warmup) {
        state.current_lr = schedule_cosine_warmup(static_cast<std::size_t>(state.step_count), total_steps,
                                                  config.warmup_steps, config.learning_rate);
      }
      const audio::Perturbation before = hooks.last_good ? delta : audio::Perturbation{};
      try {
        sum += gradient_step(delta, dataset[idx], params, config, state, needs_clean ? &clean[idx] : nullptr);
      } catch (const DivergenceError& e) {
        if (hooks.last_good) audio::write_perturbation(*hooks.last_good, before);
        throw DivergenceError("epoch " + std::to_string(epoch) + ", " + e.context(), e.value());
      }
    }
    const double mean = sum / static_cast<double>(dataset.size());
    if (config.schedule == Schedule::plateau) state.current_lr = plateau.step(mean);
    if (hooks.on_epoch) hooks.on_epoch(epoch, mean, report.per_epoch_lr.back());
    return mean;
  };
  auto on_improve = [&](std::size_t, double) {
    report.best_perturbation = delta;
    if (hooks.checkpoint) audio::write_perturbation(*hooks.checkpoint, delta);
  };

  EpochLoopResult loop = run_epochs(config.max_epochs, config.patience, epoch_fn, on_improve);
  report.per_epoch_loss = std::move(loop.per_epoch_loss);
  report.best_loss = loop.best_loss;
  report.best_epoch = loop.best_epoch;
  report.epochs_run = loop.epochs_run;
  report.converged = loop.converged;
  return report;
}

}  // namespace sb::attack
