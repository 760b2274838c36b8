// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.
// Measured numbers are also written to acceptance_results.json in the working directory.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "oracles.hpp"
#include "sb/harness.hpp"
#include "support.hpp"

using namespace sb;
namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

constexpr std::uint64_t kModelSeeds[] = {42, 30, 7};
constexpr std::size_t kAttackExamples = 64;
constexpr double kAttackLr = 1e-3;
constexpr std::size_t kBandEpochs = 150;

struct Verdict {
  int failures = 0;
  ordered_json results;
  void report(int id, const std::string& name, bool pass, const std::string& detail, ordered_json data = {}) {
    std::printf("[%s] %2d %s: %s\n", pass ? "PASS" : "FAIL", id, name.c_str(), detail.c_str());
    std::fflush(stdout);
    if (!pass) ++failures;
    data["pass"] = pass;
    data["detail"] = detail;
    results[std::to_string(id)] = data;
  }
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double elapsed(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void note(const std::string& s) { std::cerr << "  .. " << s << std::endl; }

double asr_or(const harness::Evaluation& e, double fallback = -1.0) { return e.summary.asr.value_or(fallback); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct SeedRun {
  std::uint64_t seed = 0;
  model::ModelParams params;
  double clean_val_accuracy = 0.0;
  harness::AttackOutcome combined, encoder;
  std::vector<std::pair<std::string, harness::AttackOutcome>> bands;
  double train_seconds = 0.0, combined_seconds = 0.0;
};

harness::AttackOutcome run_one(const harness::Experiment& base, const SeedRun& run, const data::LoadedDataset& ds,
                              losses::LossKind kind, const losses::LayerSubset& layers, std::size_t epochs,
                              const fs::path& out) {
  harness::Experiment e = base;
  e.attack.loss.kind = kind;
  e.attack.loss.layer_subset = layers;
  e.attack.max_epochs = epochs;
  harness::apply_seed(e, run.seed);
  e.dataset = ds.spec;
  return harness::run_attack_experiment(e, run.params, ds, out);
}

}  // namespace

int main() {
  Verdict v;
  const auto start = std::chrono::steady_clock::now();
  const fs::path work = fs::current_path() / "acceptance_work";
  fs::remove_all(work);
  fs::create_directories(work);

  // ---- shared setup: one 2,000-example dataset, three independently seeded models ----
  data::DatasetSpec spec;
  const data::Splits splits = data::generate(spec);
  data::write_dataset(work / "data", spec, splits);
  const data::LoadedDataset ds = data::read_dataset(work / "data");
  std::vector<model::PreparedExample> ptrain, pval;
  for (const auto& d : splits.train) ptrain.push_back(model::prepare(data::materialize(spec, d)));
  for (const auto& d : splits.val) pval.push_back(model::prepare(data::materialize(spec, d)));
  const auto val = data::materialize(spec, splits.val);
  note(fmt("dataset ready (%zu/%zu/%zu) after %.0fs", splits.train.size(), splits.val.size(), splits.test.size(),
           elapsed(start)));

  std::vector<SeedRun> runs;
  for (std::uint64_t seed : kModelSeeds) {
    SeedRun r;
    r.seed = seed;
    const auto t0 = std::chrono::steady_clock::now();
    auto trained = model::train_toy_model(ptrain, pval, model::TrainingConfig{}, seed);
    r.train_seconds = elapsed(t0);
    r.params = std::move(trained.params);
    r.clean_val_accuracy = trained.final_val_accuracy;
    model::save_params(work / ("model_" + std::to_string(seed) + ".sbm"), r.params, seed);
    note(fmt("model %llu: val accuracy %.3f (%.0fs)", static_cast<unsigned long long>(seed), r.clean_val_accuracy,
             r.train_seconds));
    runs.push_back(std::move(r));
  }

  // ---- 1. gradient correctness ----
  {
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 rng(101);
    attack::AttackConfig c;
    const auto delta = attack::init_perturbation(c);
    ordered_json per_loss;
    double worst = 0.0;
    for (losses::LossKind k : losses::kAllKinds) {
      sbtest::FdStats stats;
      for (std::size_t i = 0; i < 3; ++i) {
        sbtest::fd_check_loss(stats, {k, losses::LayerSubset::all(), 42}, val[i * 7], runs[0].params, delta, rng, 50);
      }
      per_loss[losses::to_string(k)] = stats.worst;
      worst = std::max(worst, stats.worst);
    }
    const double secs = elapsed(t0);
    v.report(1, "gradient correctness", worst < 1e-4 && secs < 300,
             fmt("7 losses x 3 examples x 50 coords, worst relative error %.2e (< 1e-4), %.0fs", worst, secs),
             {{"worst_relative_error", per_loss}, {"seconds", secs}});
  }

  // ---- 2. budget invariant fuzz ----
  {
    std::mt19937_64 rng(202);
    std::size_t calls = 0, violations = 0;
    const auto exs = data::materialize(spec, std::vector<data::ExampleDescriptor>(splits.train.begin(), splits.train.begin() + 40));
    std::vector<model::ModelActivations> clean;
    for (const auto& ex : exs) clean.push_back(model::forward(ex, nullptr, runs[0].params));
    for (double eps : {0.3, 0.5, 0.7, 1.0}) {
      for (int episode = 0; episode < 100; ++episode) {
        attack::AttackConfig c;
        c.epsilon = eps;
        c.seed = rng();
        c.loss.kind = losses::kAllKinds[sbtest::pick(rng, std::size(losses::kAllKinds))];
        c.loss.rand_seed = rng();
        c.learning_rate = std::pow(10.0, std::uniform_real_distribution<double>(-4.0, 0.5)(rng));
        auto delta = attack::init_perturbation(c);
        auto state = attack::OptimizerState::fresh(delta.size(), c.learning_rate);
        for (int step = 0; step < 25; ++step) {
          const std::size_t i = sbtest::pick(rng, exs.size());
          attack::gradient_step(delta, exs[i], runs[0].params, c, state, &clean[i]);
          ++calls;
          if (delta.linf() > eps) ++violations;
        }
      }
    }
    v.report(2, "budget invariant", calls == 10000 && violations == 0,
             fmt("%zu gradient_step calls over eps {0.3,0.5,0.7,1.0}, %zu violations", calls, violations),
             {{"calls", calls}, {"violations", violations}});
  }

  // ---- 3. metric oracles ----
  {
    std::size_t wer_pairs = 0, wer_bad = 0;
    const auto seqs = sbtest::all_sequences(4, 3);
    for (const auto& r : seqs) {
      if (r.empty()) continue;
      for (const auto& h : seqs) {
        ++wer_pairs;
        if (metrics::word_error_rate(r, h) != static_cast<double>(sbtest::brute_edit(r, 0, h, 0)) / r.size()) ++wer_bad;
      }
    }
    std::mt19937_64 rng(303);
    double snr_worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t n = 100 + sbtest::pick(rng, 2000);
      const auto x = sbtest::uniform_vector(rng, n, -1, 1);
      auto y = sbtest::uniform_vector(rng, n, -1, 1);
      for (std::size_t i = 0; i < n; ++i) y[i] += x[i];
      double c = std::uniform_real_distribution<double>(-100.0, 100.0)(rng);
      if (std::abs(c) < 1e-2) c = 1.0;
      auto cy = y;
      for (double& s : cy) s *= c;
      snr_worst = std::max(snr_worst, std::abs(metrics::si_snr(audio::Waveform(x), audio::Waveform(y)) -
                                               metrics::si_snr(audio::Waveform(x), audio::Waveform(cy))));
    }
    double kl_worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      const Mat a = sbtest::causal(sbtest::uniform_matrix(rng, 4, 4, -4, 4));
      const Mat u = sbtest::uniform_matrix(rng, 4, 4, 0, 1);
      ad::Tape t;
      kl_worst = std::max(kl_worst, std::abs(t.scalar(losses::randomized_kl(t, t.constant(a), u)) - sbtest::kl_oracle(a, u)));
    }
    v.report(3, "metric oracles", wer_bad == 0 && snr_worst < 1e-9 && kl_worst < 1e-12,
             fmt("WER %zu/%zu exhaustive pairs match; SI-SNR scale gap %.1e (< 1e-9); KL 4x4 gap %.1e (< 1e-12)",
                 wer_pairs - wer_bad, wer_pairs, snr_worst, kl_worst),
             {{"wer_pairs", wer_pairs}, {"wer_mismatches", wer_bad}, {"si_snr_max_gap", snr_worst},
              {"kl_max_gap", kl_worst}});
  }

  // ---- attack suite shared by 4-7 ----
  harness::Experiment base;
  base.attack.epsilon = 0.5;
  base.attack.learning_rate = kAttackLr;
  base.attack.patience = 10;
  // fixed-epoch comparisons: linear warmup over one epoch, then cosine decay
  base.attack.schedule = attack::Schedule::cosine_warmup;
  base.attack.warmup_steps = kAttackExamples;
  base.attack_split = "train";
  base.attack_examples = kAttackExamples;
  base.eval_split = "val";
  base.eval_examples = 0;
  for (auto& r : runs) {
    const std::string tag = std::to_string(r.seed);
    auto t0 = std::chrono::steady_clock::now();
    r.combined = run_one(base, r, ds, losses::LossKind::combined, losses::LayerSubset::all(), 150, work / ("combined_" + tag));
    r.combined_seconds = elapsed(t0);
    note(fmt("seed %s combined: ASR %.3f random %.3f, %zu epochs, %.0fs", tag.c_str(), asr_or(r.combined.adversarial),
             asr_or(r.combined.random), r.combined.report.epochs_run, r.combined_seconds));
    t0 = std::chrono::steady_clock::now();
    r.encoder = run_one(base, r, ds, losses::LossKind::encoder_cos, losses::LayerSubset::all(), 150, work / ("encoder_" + tag));
    note(fmt("seed %s encoder_cos: ASR %.3f, %.0fs", tag.c_str(), asr_or(r.encoder.adversarial), elapsed(t0)));
    for (const auto& band : {losses::LayerSubset::all(), losses::LayerSubset::band(1, 2), losses::LayerSubset::band(3, 4),
                             losses::LayerSubset::band(5, 6)}) {
      t0 = std::chrono::steady_clock::now();
      auto o = run_one(base, r, ds, losses::LossKind::audio_att, band, kBandEpochs, work / ("band_" + band.label() + "_" + tag));
      note(fmt("seed %s audio_att %s: ASR %.3f, %.0fs", tag.c_str(), band.label().c_str(), asr_or(o.adversarial), elapsed(t0)));
      r.bands.emplace_back(band.label(), std::move(o));
    }
  }

  // ---- 4. desk-scale efficacy ----
  {
    ordered_json seeds = ordered_json::array();
    for (const auto& r : runs) {
      seeds.push_back({{"seed", r.seed},
                       {"clean_val_accuracy", r.clean_val_accuracy},
                       {"asr", asr_or(r.combined.adversarial)},
                       {"random_asr", asr_or(r.combined.random)},
                       {"epochs_run", r.combined.report.epochs_run},
                       {"converged", r.combined.report.converged},
                       {"seconds", r.combined_seconds},
                       {"mean_si_snr_db", metrics::cap_for_report(r.combined.adversarial.summary.mean_si_snr_db.value_or(0))}});
    }
    const auto& r = runs[0];
    const double asr = asr_or(r.combined.adversarial), rnd = asr_or(r.combined.random);
    const bool pass = r.clean_val_accuracy >= 0.9 && r.combined.adversarial.summary.asr && r.combined.random.summary.asr &&
                      asr >= 0.30 && asr - rnd >= 0.15 && r.combined.report.epochs_run <= 150 &&
                      r.combined_seconds < 1800;
    v.report(4, "desk-scale attack efficacy", pass,
             fmt("seed 42: clean val acc %.3f, combined ASR %.3f vs random %.3f (margin %.3f), %zu epochs, %.0fs",
                 r.clean_val_accuracy, asr, rnd, asr - rnd, r.combined.report.epochs_run, r.combined_seconds),
             {{"seeds", seeds}});
  }

  // ---- 5. loss ordering ----
  {
    double comb = 0, enc = 0, rnd = 0;
    bool each_above_random = true;
    std::string per;
    ordered_json seeds = ordered_json::array();
    for (const auto& r : runs) {
      const double c = asr_or(r.combined.adversarial), e = asr_or(r.encoder.adversarial), b = asr_or(r.combined.random);
      comb += c / 3, enc += e / 3, rnd += b / 3;
      each_above_random = each_above_random && c >= b && e >= b;
      per += fmt(" %llu:%.2f/%.2f/%.2f", static_cast<unsigned long long>(r.seed), c, e, b);
      seeds.push_back({{"seed", r.seed}, {"combined", c}, {"encoder_cos", e}, {"random", b}});
    }
    v.report(5, "loss ordering", comb >= enc - 0.05 && each_above_random,
             fmt("mean ASR combined %.3f, encoder_cos %.3f, random %.3f (per seed comb/enc/rand:%s)", comb, enc, rnd,
                 per.c_str()),
             {{"seeds", seeds}, {"mean_combined", comb}, {"mean_encoder_cos", enc}, {"mean_random", rnd}});
  }

  // ---- 6. layer bands ----
  {
    std::map<std::string, double> mean;
    ordered_json seeds = ordered_json::array();
    for (const auto& r : runs) {
      ordered_json s = {{"seed", r.seed}};
      for (const auto& [label, o] : r.bands) {
        mean[label] += asr_or(o.adversarial) / 3;
        s[label] = asr_or(o.adversarial);
      }
      seeds.push_back(s);
    }
    double best_band = 0.0;
    for (const auto& [label, m] : mean) {
      if (label != "all") best_band = std::max(best_band, m);
    }
    v.report(6, "layer-band dominance", mean["all"] >= best_band - 0.05,
             fmt("mean audio_att ASR all %.3f vs bands 1-2 %.3f, 3-4 %.3f, 5-6 %.3f", mean["all"], mean["1-2"],
                 mean["3-4"], mean["5-6"]),
             {{"seeds", seeds}});
  }

  // ---- 7. transfer asymmetry ----
  {
    int holds = 0;
    std::string per;
    ordered_json pairs = ordered_json::array();
    for (std::size_t i = 0; i < runs.size(); ++i) {
      const auto& src = runs[i];
      const auto& dst = runs[(i + 1) % runs.size()];
      const audio::Perturbation delta =
          audio::read_perturbation(work / ("combined_" + std::to_string(src.seed)) / "perturbation.sbp", 0.5);
      const auto cross = harness::evaluate_perturbation(val, dst.params, delta, false);
      const double s = asr_or(src.combined.adversarial), c = asr_or(cross);
      if (s >= c) ++holds;
      per += fmt(" %llu->%llu: %.2f vs %.2f;", static_cast<unsigned long long>(src.seed),
                 static_cast<unsigned long long>(dst.seed), s, c);
      pairs.push_back({{"source", src.seed}, {"target", dst.seed}, {"source_asr", s}, {"transfer_asr", c},
                       {"target_encoder_cosine", cross.mean_encoder_cosine}});
    }
    v.report(7, "transfer asymmetry", holds >= 2, fmt("source >= cross-seed ASR in %d/3 pairs:%s", holds, per.c_str()),
             {{"pairs", pairs}});
  }

  // ---- 8. determinism of the attack command ----
  {
    std::ofstream cfg(work / "determinism.json");
    cfg << ordered_json{{"data_dir", "data"},
                        {"model", "model_42.sbm"},
                        {"attack", {{"loss", "combined"}, {"learning_rate", kAttackLr}, {"max_epochs", 3}}},
                        {"attack_examples", 8},
                        {"eval_examples", 40}}
               .dump(2);
    cfg.close();
    auto run_cli = [&](const std::string& out) {
      std::vector<std::string> args = {"sbattack", "attack", "--config", (work / "determinism.json").string(), "--out",
                                       (work / out).string()};
      std::vector<char*> argv;
      for (auto& a : args) argv.push_back(a.data());
      // keep stdout to one line per criterion
      std::ostringstream sink;
      std::streambuf* saved = std::cout.rdbuf(sink.rdbuf());
      const int rc = harness::cli_main(static_cast<int>(argv.size()), argv.data());
      std::cout.rdbuf(saved);
      return rc;
    };
    const int a = run_cli("det_a"), b = run_cli("det_b");
    const bool same_report = slurp(work / "det_a" / "report.json") == slurp(work / "det_b" / "report.json");
    const bool same_delta = slurp(work / "det_a" / "perturbation.sbp") == slurp(work / "det_b" / "perturbation.sbp");
    const bool same_csv = slurp(work / "det_a" / "records.csv") == slurp(work / "det_b" / "records.csv");
    v.report(8, "determinism", a == 0 && b == 0 && same_report && same_delta && same_csv,
             fmt("two attack runs: report.json %s, perturbation.sbp %s, records.csv %s",
                 same_report ? "identical" : "DIFFER", same_delta ? "identical" : "DIFFER", same_csv ? "identical" : "DIFFER"));
  }

  // ---- 9. early stopping ----
  {
    std::mt19937_64 rng(909);
    std::size_t traces = 0, exact = 0;
    for (int trial = 0; trial < 1000; ++trial) {
      // Noisy descent to a random epoch, then never better again.
      const std::size_t best_at = 1 + sbtest::pick(rng, 80);
      std::vector<double> trace;
      for (std::size_t e = 1; e <= best_at; ++e) trace.push_back(100.0 - static_cast<double>(e) + 0.5 * (e % 2));
      trace.back() = 0.0;
      for (std::size_t e = 0; e < 40; ++e) trace.push_back(std::uniform_real_distribution<double>(0.0, 5.0)(rng));
      const auto r = attack::run_epochs(trace.size(), 10, [&](std::size_t e) { return trace[e - 1]; });
      ++traces;
      if (r.converged && r.best_epoch == best_at && r.epochs_run == r.best_epoch + 10) ++exact;
    }
    v.report(9, "early stopping", exact == traces,
             fmt("%zu/%zu synthetic traces stop at best_epoch + 10", exact, traces));
  }

  // ---- 10. schedules ----
  {
    const double lr = 1e-4;
    const std::size_t total = 9600, warm = 640;
    const double g0 = std::abs(attack::schedule_cosine_warmup(0, total, warm, lr));
    const double gw = std::abs(attack::schedule_cosine_warmup(warm, total, warm, lr) - lr);
    const double gT = std::abs(attack::schedule_cosine_warmup(total, total, warm, lr));
    attack::PlateauScheduler p(lr);
    p.step(1.0);
    for (int i = 0; i < 5; ++i) p.step(1.0);
    const double ratio = p.lr() / lr;
    v.report(10, "schedules", g0 <= 1e-12 && gw <= 1e-12 && gT <= 1e-12 && p.lr() == lr * 0.1,
             fmt("cosine gaps t=0 %.1e, t_warm %.1e, T %.1e (<= 1e-12); plateau factor %.17g", g0, gw, gT, ratio));
  }

  v.results["total_seconds"] = elapsed(start);
  std::ofstream("acceptance_results.json") << v.results.dump(2) << '\n';
  std::printf("%d of 10 criteria failed (%.0fs)\n", v.failures, elapsed(start));
  return v.failures == 0 ? 0 : 1;
}
