#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "sb/dataset.hpp"
#include "sb/metrics.hpp"
#include "sb/optimizer.hpp"

namespace sb::harness {

/// Exit codes shared by every subcommand.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitDivergence = 3;

/// Everything a subcommand needs, read from one JSON config file. Relative
/// paths are resolved against the directory holding the config file.
struct Experiment {
  std::filesystem::path data_dir = "data";
  data::DatasetSpec dataset;
  model::TrainingConfig training;
  std::uint64_t train_seed = 42;
  std::filesystem::path model_path = "model/params.sbm";
  attack::AttackConfig attack;
  std::string attack_split = "train";
  std::size_t attack_examples = 64;  // 0 = whole split
  std::string eval_split = "val";
  std::size_t eval_examples = 0;     // 0 = whole split
  bool waveform_metrics = true;
  double min_clean_accuracy = 0.8;   // ASR is withheld below this
  std::filesystem::path perturbation_path;  // evaluate
  std::filesystem::path target_model_path;  // evaluate; defaults to model_path
  nlohmann::json sweep;                     // {"axis": ..., "values": [...]}
  std::filesystem::path output_dir = "out";
};

Experiment load_experiment(const std::filesystem::path& config_path);
Experiment experiment_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);

/// Applies --seed: dataset, training, attack and rand_att streams all derive from it.
void apply_seed(Experiment& e, std::uint64_t seed);

std::vector<data::ExampleDescriptor> select_split(const data::Splits& s, const std::string& name, std::size_t limit);

struct Evaluation {
  std::vector<metrics::EvalRecord> records;
  std::vector<double> si_snr_db;            // per record, empty without waveform metrics
  std::vector<double> perceptual_distance;  // per record, empty without waveform metrics
  std::vector<double> encoder_cosine;       // per record, clean vs perturbed audio embeddings
  metrics::MetricsSummary summary;
  double mean_encoder_cosine = 0.0;
  bool asr_withheld = false;
};

/// Applies one fixed perturbation to every example. Uses worker threads unless
/// SB_DETERMINISTIC=1; results do not depend on the thread count.
Evaluation evaluate_perturbation(const std::vector<model::TrimodalExample>& examples, const model::ModelParams& params,
                                 const audio::Perturbation& delta, bool waveform_metrics,
                                 double min_clean_accuracy = 0.0);

/// Uniform(-eps, eps) perturbation drawn from a stream distinct from the attack init.
audio::Perturbation random_baseline(const attack::AttackConfig& config);

nlohmann::ordered_json evaluation_json(const Evaluation& e);
void write_records_csv(const std::filesystem::path& path, const Evaluation& e);

struct AttackOutcome {
  attack::AttackReport report;
  Evaluation adversarial;
  Evaluation random;
};

/// Attack on the configured split, then evaluation of the best delta and of the
/// random baseline. Writes report.json, records.csv, perturbation.sbp and meta.json.
AttackOutcome run_attack_experiment(const Experiment& e, const model::ModelParams& params,
                                    const data::LoadedDataset& dataset, const std::filesystem::path& out_dir);

int cmd_gen_data(const Experiment& e);
int cmd_train(const Experiment& e);
int cmd_attack(const Experiment& e);
int cmd_evaluate(const Experiment& e);
int cmd_sweep(const Experiment& e);

/// Entry point behind the `sbattack` executable.
int cli_main(int argc, char** argv);

}  // namespace sb::harness
