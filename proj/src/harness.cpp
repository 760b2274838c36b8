#include "sb/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>

namespace sb::harness {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr std::uint64_t kBaselineStream = 0xba5e11e5ULL;

fs::path resolve(const fs::path& base, const fs::path& p) {
  if (p.empty() || p.is_absolute()) return p;
  return base / p;
}

void write_json_file(const fs::path& path, const ordered_json& j) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read config " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

std::string iso_timestamp() {
  const std::time_t now = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  return buf;
}

bool deterministic_mode() {
  const char* v = std::getenv("SB_DETERMINISTIC");
  return v != nullptr && std::string(v) == "1";
}

template <typename F>
void parallel_for(std::size_t n, F&& fn) {
  std::size_t workers = deterministic_mode() ? 1 : std::max(1u, std::thread::hardware_concurrency());
  workers = std::min(workers, n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

double mean_row_cosine(const Mat& a, const Mat& b) {
  double sum = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    sum += a.row(i).dot(b.row(i)) / (a.row(i).norm() * b.row(i).norm());
  }
  return sum / static_cast<double>(a.rows());
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void write_meta(const fs::path& dir, const std::string& command, double seconds, const ordered_json& extra = {}) {
  ordered_json meta;
  meta["command"] = command;
  meta["timestamp"] = iso_timestamp();
  meta["wall_seconds"] = seconds;
  meta["deterministic"] = deterministic_mode();
  for (auto it = extra.begin(); it != extra.end(); ++it) meta[it.key()] = it.value();
  write_json_file(dir / "meta.json", meta);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<model::PreparedExample> prepare_all(const data::DatasetSpec& spec,
                                                const std::vector<data::ExampleDescriptor>& ds) {
  std::vector<model::PreparedExample> out(ds.size());
  parallel_for(ds.size(), [&](std::size_t i) { out[i] = model::prepare(data::materialize(spec, ds[i])); });
  return out;
}

// Per-template accuracy with the audio as given, zeroed, or taken from another example.
ordered_json modality_ablation(const data::DatasetSpec& spec, const std::vector<data::ExampleDescriptor>& val,
                               const model::ModelParams& params) {
  const std::size_t n = val.size();
  std::vector<int> clean(n), zeroed(n), shuffled(n);
  parallel_for(n, [&](std::size_t i) {
    model::TrimodalExample ex = data::materialize(spec, val[i]);
    auto correct = [&](const model::TrimodalExample& e) {
      return model::predict_answer(e, nullptr, params).tokens == e.answer_tokens ? 1 : 0;
    };
    clean[i] = correct(ex);
    model::TrimodalExample z = ex;
    std::fill(z.audio.samples.begin(), z.audio.samples.end(), 0.0);
    zeroed[i] = correct(z);
    model::TrimodalExample s = ex;
    // Audio from the example half the split away (a different draw of classes).
    s.audio = data::synthesize_audio(spec, val[(i + n / 2) % n]);
    shuffled[i] = correct(s);
  });
  ordered_json out;
  for (data::Template t : {data::Template::ask_audio, data::Template::ask_video, data::Template::ask_both}) {
    double c = 0, z = 0, s = 0, count = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (val[i].question != t) continue;
      c += clean[i];
      z += zeroed[i];
      s += shuffled[i];
      count += 1;
    }
    if (count == 0) continue;
    out[data::to_string(t)] = {{"count", count},
                               {"clean", c / count},
                               {"audio_zeroed", z / count},
                               {"audio_shuffled", s / count}};
  }
  return out;
}

model::TrainingConfig training_from_json(const json& j, model::TrainingConfig c) {
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.momentum = j.value("momentum", c.momentum);
  c.required_accuracy = j.value("required_accuracy", c.required_accuracy);
  c.stop_accuracy = j.value("stop_accuracy", c.stop_accuracy);
  return c;
}

ordered_json training_json(const model::TrainingConfig& c) {
  return {{"max_epochs", c.max_epochs},       {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate}, {"momentum", c.momentum},
          {"required_accuracy", c.required_accuracy}, {"stop_accuracy", c.stop_accuracy}};
}

ordered_json training_log(const model::TrainingResult& r, const model::TrainingConfig& c, std::uint64_t seed) {
  ordered_json log;
  log["seed"] = seed;
  log["config"] = training_json(c);
  log["initial_val_accuracy"] = r.initial_val_accuracy;
  log["final_val_accuracy"] = r.final_val_accuracy;
  log["train_loss"] = r.train_loss;
  log["val_accuracy"] = r.val_accuracy;
  return log;
}

std::string csv_value(const std::optional<double>& v) { return v ? fmt(*v) : ""; }

}  // namespace

// ---- configuration ----------------------------------------------------------------

Experiment experiment_from_json(const json& j, const fs::path& base_dir) {
  Experiment e;
  try {
    if (j.contains("data_dir")) e.data_dir = j.at("data_dir").get<std::string>();
    if (j.contains("dataset")) e.dataset = data::spec_from_json(j.at("dataset"));
    if (j.contains("training")) {
      e.training = training_from_json(j.at("training"), e.training);
      e.train_seed = j.at("training").value("seed", e.train_seed);
    }
    if (j.contains("model")) e.model_path = j.at("model").get<std::string>();
    if (j.contains("attack")) e.attack = attack::config_from_json(j.at("attack"));
    e.attack_split = j.value("attack_split", e.attack_split);
    e.attack_examples = j.value("attack_examples", e.attack_examples);
    e.eval_split = j.value("eval_split", e.eval_split);
    e.eval_examples = j.value("eval_examples", e.eval_examples);
    e.waveform_metrics = j.value("waveform_metrics", e.waveform_metrics);
    e.min_clean_accuracy = j.value("min_clean_accuracy", e.min_clean_accuracy);
    if (j.contains("perturbation")) e.perturbation_path = j.at("perturbation").get<std::string>();
    if (j.contains("target_model")) e.target_model_path = j.at("target_model").get<std::string>();
    if (j.contains("sweep")) e.sweep = j.at("sweep");
    if (j.contains("output_dir")) e.output_dir = j.at("output_dir").get<std::string>();
  } catch (const json::exception& ex) {
    throw ValidationError(std::string("config: ") + ex.what());
  }
  e.data_dir = resolve(base_dir, e.data_dir);
  e.model_path = resolve(base_dir, e.model_path);
  e.perturbation_path = resolve(base_dir, e.perturbation_path);
  e.target_model_path = resolve(base_dir, e.target_model_path);
  e.output_dir = resolve(base_dir, e.output_dir);
  if (e.attack.init == attack::InitKind::natural_audio) e.attack.init_audio = resolve(base_dir, e.attack.init_audio);
  return e;
}

Experiment load_experiment(const fs::path& config_path) {
  return experiment_from_json(read_json_file(config_path), config_path.parent_path());
}

void apply_seed(Experiment& e, std::uint64_t seed) {
  e.dataset.seed = seed;
  e.train_seed = seed;
  e.attack.seed = seed;
  e.attack.loss.rand_seed = seed;
}

std::vector<data::ExampleDescriptor> select_split(const data::Splits& s, const std::string& name, std::size_t limit) {
  const std::vector<data::ExampleDescriptor>* split = nullptr;
  if (name == "train") split = &s.train;
  if (name == "val") split = &s.val;
  if (name == "test") split = &s.test;
  if (split == nullptr) throw ValidationError("unknown split '" + name + "'");
  if (split->empty()) throw ValidationError("split '" + name + "' is empty");
  const std::size_t n = limit == 0 ? split->size() : std::min(limit, split->size());
  return {split->begin(), split->begin() + static_cast<std::ptrdiff_t>(n)};
}

// ---- evaluation -------------------------------------------------------------------

Evaluation evaluate_perturbation(const std::vector<model::TrimodalExample>& examples, const model::ModelParams& params,
                                 const audio::Perturbation& delta, bool waveform_metrics, double min_clean_accuracy) {
  const std::size_t n = examples.size();
  Evaluation ev;
  ev.records.resize(n);
  ev.encoder_cosine.resize(n);
  if (waveform_metrics) {
    ev.si_snr_db.resize(n);
    ev.perceptual_distance.resize(n);
  }
  parallel_for(n, [&](std::size_t i) {
    const auto& ex = examples[i];
    const model::ModelActivations clean = model::forward(ex, nullptr, params);
    const model::ModelActivations adv = model::forward(ex, &delta, params);
    const model::Prediction cp = model::decode_greedy(clean.output_logits);
    const model::Prediction ap = model::decode_greedy(adv.output_logits);
    ev.records[i] = {ex.id, cp.tokens, ap.tokens, ex.answer_tokens, cp.confidence, ap.confidence};
    ev.encoder_cosine[i] = mean_row_cosine(clean.audio_embeddings, adv.audio_embeddings);
    if (waveform_metrics) {
      const audio::Waveform perturbed = audio::apply_perturbation(ex.audio, delta);
      ev.si_snr_db[i] = metrics::si_snr(ex.audio, perturbed);
      ev.perceptual_distance[i] = metrics::spectral_perceptual_distance(ex.audio, perturbed);
    }
  });
  ev.summary = metrics::summarize(ev.records, {});
  if (waveform_metrics && n > 0) {
    double snr = 0.0, dist = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      snr += ev.si_snr_db[i];
      dist += ev.perceptual_distance[i];
    }
    ev.summary.mean_si_snr_db = snr / static_cast<double>(n);
    ev.summary.mean_perceptual_distance = dist / static_cast<double>(n);
  }
  for (double c : ev.encoder_cosine) ev.mean_encoder_cosine += c / static_cast<double>(std::max<std::size_t>(n, 1));
  if (ev.summary.clean_accuracy < min_clean_accuracy) {
    ev.asr_withheld = true;
    ev.summary.asr.reset();
  }
  return ev;
}

audio::Perturbation random_baseline(const attack::AttackConfig& config) {
  attack::AttackConfig c = config;
  c.init = attack::InitKind::random;
  c.seed = config.seed ^ kBaselineStream;
  return attack::init_perturbation(c);
}

ordered_json evaluation_json(const Evaluation& e) {
  ordered_json j = metrics::to_json(e.summary);
  j["mean_encoder_cosine"] = e.mean_encoder_cosine;
  j["asr_withheld"] = e.asr_withheld;
  return j;
}

void write_records_csv(const fs::path& path, const Evaluation& e) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << "example_id,clean_correct,adv_correct,attack_success,si_snr_db,perceptual_distance,clean_conf,adv_conf\n";
  for (std::size_t i = 0; i < e.records.size(); ++i) {
    const auto& r = e.records[i];
    out << r.example_id << ',' << r.clean_correct() << ',' << r.adv_correct() << ',' << r.attack_success() << ',';
    if (!e.si_snr_db.empty()) out << fmt(metrics::cap_for_report(e.si_snr_db[i]));
    out << ',';
    if (!e.perceptual_distance.empty()) out << fmt(e.perceptual_distance[i]);
    out << ',' << fmt(r.clean_confidence) << ',' << fmt(r.adv_confidence) << '\n';
  }
}

// ---- attack ---------------------------------------------------------------------

AttackOutcome run_attack_experiment(const Experiment& e, const model::ModelParams& params,
                                    const data::LoadedDataset& dataset, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  const auto attack_set = data::materialize(dataset.spec, select_split(dataset.splits, e.attack_split, e.attack_examples));
  const auto eval_set = data::materialize(dataset.spec, select_split(dataset.splits, e.eval_split, e.eval_examples));

  const fs::path pert_path = out_dir / "perturbation.sbp";
  attack::AttackHooks hooks;
  hooks.checkpoint = pert_path;
  hooks.last_good = out_dir / "last_good.sbp";

  AttackOutcome outcome;
  outcome.report = attack::run_attack(attack_set, params, e.attack, hooks);
  audio::write_perturbation(pert_path, outcome.report.best_perturbation);
  // Evaluate exactly what was persisted.
  const audio::Perturbation persisted = audio::read_perturbation(pert_path, e.attack.epsilon);
  outcome.adversarial = evaluate_perturbation(eval_set, params, persisted, e.waveform_metrics, e.min_clean_accuracy);
  outcome.random =
      evaluate_perturbation(eval_set, params, random_baseline(e.attack), e.waveform_metrics, e.min_clean_accuracy);

  ordered_json report;
  report["attack"] = attack::to_json(outcome.report);
  report["attack_split"] = e.attack_split;
  report["attack_examples"] = attack_set.size();
  report["eval_split"] = e.eval_split;
  report["eval_examples"] = eval_set.size();
  report["evaluation"] = evaluation_json(outcome.adversarial);
  report["random_baseline"] = evaluation_json(outcome.random);
  write_json_file(out_dir / "report.json", report);
  write_records_csv(out_dir / "records.csv", outcome.adversarial);
  return outcome;
}

// ---- subcommands ----------------------------------------------------------------

int cmd_gen_data(const Experiment& e) {
  const auto t0 = std::chrono::steady_clock::now();
  const data::Splits splits = data::generate(e.dataset);
  data::write_dataset(e.output_dir, e.dataset, splits);
  write_meta(e.output_dir, "gen-data", seconds_since(t0),
             {{"train", splits.train.size()}, {"val", splits.val.size()}, {"test", splits.test.size()}});
  std::cout << "wrote " << splits.train.size() << "/" << splits.val.size() << "/" << splits.test.size()
            << " examples to " << e.output_dir.string() << "\n";
  return kExitOk;
}

int cmd_train(const Experiment& e) {
  const auto t0 = std::chrono::steady_clock::now();
  const data::LoadedDataset ds = data::read_dataset(e.data_dir);
  const auto train = prepare_all(ds.spec, ds.splits.train);
  const auto val = prepare_all(ds.spec, ds.splits.val);
  fs::create_directories(e.output_dir);
  model::TrainingResult result;
  int code = kExitOk;
  try {
    result = model::train_toy_model(train, val, e.training, e.train_seed);
  } catch (const model::ModelUnderfit& u) {
    result = u.partial();
    code = kExitFailure;
    std::cerr << "error: " << u.what() << "\n";
  }
  ordered_json log = training_log(result, e.training, e.train_seed);
  log["underfit"] = code != kExitOk;
  log["ablation"] = modality_ablation(ds.spec, ds.splits.val, result.params);
  write_json_file(e.output_dir / "training_log.json", log);
  if (code == kExitOk) model::save_params(e.output_dir / "params.sbm", result.params, e.train_seed);
  write_meta(e.output_dir, "train", seconds_since(t0));
  std::cout << "val accuracy " << result.initial_val_accuracy << " -> " << result.final_val_accuracy << " in "
            << result.val_accuracy.size() << " epochs\n";
  return code;
}

int cmd_attack(const Experiment& e) {
  const auto t0 = std::chrono::steady_clock::now();
  const data::LoadedDataset ds = data::read_dataset(e.data_dir);
  const model::ModelParams params = model::load_params(e.model_path);
  const AttackOutcome o = run_attack_experiment(e, params, ds, e.output_dir);
  write_meta(e.output_dir, "attack", seconds_since(t0),
             {{"model", e.model_path.string()}, {"data_dir", e.data_dir.string()}});
  const auto& s = o.adversarial.summary;
  std::cout << "epochs " << o.report.epochs_run << " (best " << o.report.best_epoch << ", loss "
            << o.report.best_loss << ")  ASR " << (s.asr ? fmt(*s.asr) : "undefined") << "  random ASR "
            << (o.random.summary.asr ? fmt(*o.random.summary.asr) : "undefined") << "\n";
  return kExitOk;
}

int cmd_evaluate(const Experiment& e) {
  const auto t0 = std::chrono::steady_clock::now();
  if (e.perturbation_path.empty()) throw ValidationError("evaluate needs a perturbation file");
  const fs::path target = e.target_model_path.empty() ? e.model_path : e.target_model_path;
  const data::LoadedDataset ds = data::read_dataset(e.data_dir);
  const model::ModelParams params = model::load_params(target);
  const audio::Perturbation delta = audio::read_perturbation(e.perturbation_path, e.attack.epsilon);
  if (delta.size() != e.attack.perturbation_length) {
    throw ValidationError("perturbation length " + std::to_string(delta.size()) + " does not match the pipeline (" +
                          std::to_string(e.attack.perturbation_length) + ")");
  }
  if (delta.linf() > e.attack.epsilon) throw ValidationError("perturbation exceeds the configured budget");
  const auto eval_set = data::materialize(ds.spec, select_split(ds.splits, e.eval_split, e.eval_examples));
  const Evaluation adv = evaluate_perturbation(eval_set, params, delta, e.waveform_metrics, e.min_clean_accuracy);
  const Evaluation rnd =
      evaluate_perturbation(eval_set, params, random_baseline(e.attack), e.waveform_metrics, e.min_clean_accuracy);
  fs::create_directories(e.output_dir);
  ordered_json report;
  report["epsilon"] = e.attack.epsilon;
  report["eval_split"] = e.eval_split;
  report["eval_examples"] = eval_set.size();
  report["evaluation"] = evaluation_json(adv);
  report["random_baseline"] = evaluation_json(rnd);
  write_json_file(e.output_dir / "report.json", report);
  write_records_csv(e.output_dir / "records.csv", adv);
  write_meta(e.output_dir, "evaluate", seconds_since(t0),
             {{"perturbation", e.perturbation_path.string()}, {"target_model", target.string()}});
  std::cout << "ASR " << (adv.summary.asr ? fmt(*adv.summary.asr) : "undefined") << "  random ASR "
            << (rnd.summary.asr ? fmt(*rnd.summary.asr) : "undefined") << "  encoder cosine "
            << adv.mean_encoder_cosine << "\n";
  return kExitOk;
}

int cmd_sweep(const Experiment& e) {
  const auto t0 = std::chrono::steady_clock::now();
  if (!e.sweep.is_object() || !e.sweep.contains("axis") || !e.sweep.contains("values")) {
    throw ValidationError("sweep needs {\"axis\": ..., \"values\": [...]}");
  }
  const std::string axis = e.sweep.at("axis").get<std::string>();
  const json& values = e.sweep.at("values");
  if (!values.is_array() || values.empty()) throw ValidationError("sweep values must be a non-empty array");

  const data::LoadedDataset ds = data::read_dataset(e.data_dir);
  const model::ModelParams params = model::load_params(e.model_path);
  fs::create_directories(e.output_dir);
  std::ofstream csv(e.output_dir / "sweep.csv");
  csv << "axis,value,asr,random_asr,epochs_to_converge,converged,best_epoch,best_loss,mean_si_snr_db,"
         "mean_perceptual_distance,mean_encoder_cosine,error\n";

  if (axis != "budget" && axis != "layers" && axis != "loss" && axis != "data_epochs") {
    throw ValidationError("unknown sweep axis '" + axis + "'");
  }
  std::size_t index = 0;
  for (const json& v : values) {
    Experiment point = e;
    std::string label = v.dump();
    try {
      try {
        if (axis == "budget") {
          point.attack.epsilon = v.get<double>();
          label = fmt(point.attack.epsilon);
        } else if (axis == "layers") {
          point.attack.loss.layer_subset = v.is_string() && v.get<std::string>() == "all"
                                               ? losses::LayerSubset::all()
                                               : losses::LayerSubset::of(v.get<std::vector<std::size_t>>());
          label = point.attack.loss.layer_subset.label();
        } else if (axis == "loss") {
          point.attack.loss.kind = losses::parse_loss_kind(v.get<std::string>());
          point.attack.grad_scale_gamma.reset();
          label = v.get<std::string>();
        } else {
          point.attack_examples = v.at(0).get<std::size_t>();
          point.attack.max_epochs = v.at(1).get<std::size_t>();
          label = std::to_string(point.attack_examples) + "x" + std::to_string(point.attack.max_epochs);
        }
      } catch (const json::exception& ex) {
        throw ValidationError(std::string("sweep value: ") + ex.what());
      }
      point.attack.validate();
      std::string safe = label;
      for (char& c : safe) {
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '.' && c != '-') c = '_';
      }
      const fs::path dir = e.output_dir / "points" / (std::to_string(index) + "_" + safe);
      const AttackOutcome o = run_attack_experiment(point, params, ds, dir);
      const auto& s = o.adversarial.summary;
      csv << axis << ",\"" << label << "\"," << csv_value(s.asr) << ',' << csv_value(o.random.summary.asr) << ','
          << o.report.epochs_run << ',' << o.report.converged << ',' << o.report.best_epoch << ','
          << fmt(o.report.best_loss) << ','
          << (s.mean_si_snr_db ? fmt(metrics::cap_for_report(*s.mean_si_snr_db)) : "") << ','
          << csv_value(s.mean_perceptual_distance) << ',' << fmt(o.adversarial.mean_encoder_cosine) << ",\n";
    } catch (const std::exception& ex) {
      std::string msg = ex.what();
      std::replace(msg.begin(), msg.end(), '"', '\'');
      std::replace(label.begin(), label.end(), '"', '\'');
      csv << axis << ",\"" << label << "\",,,,,,,,,,\"" << msg << "\"\n";
      std::cerr << "sweep point " << label << " failed: " << msg << "\n";
    }
    ++index;
    csv.flush();
  }
  write_meta(e.output_dir, "sweep", seconds_since(t0), {{"axis", axis}});
  return kExitOk;
}

}  // namespace sb::harness
