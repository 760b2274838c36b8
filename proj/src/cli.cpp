#include <iostream>

#include "CLI11.hpp"
#include "sb/harness.hpp"

namespace sb::harness {

namespace {

struct CommonArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string perturbation;
  std::string params;
};

CLI::App* add_command(CLI::App& app, const char* name, const char* help, CommonArgs& args) {
  CLI::App* sub = app.add_subcommand(name, help);
  sub->add_option("--config", args.config, "experiment JSON")->required()->check(CLI::ExistingFile);
  sub->add_option("--seed", args.seed, "overrides every seed in the config");
  sub->add_option("--out", args.out, "output directory (default: output_dir from the config)");
  return sub;
}

}  // namespace

int cli_main(int argc, char** argv) {
  CLI::App app{"audio-only adversarial attacks on a toy trimodal model"};
  app.require_subcommand(1);
  CommonArgs args;
  CLI::App* gen = add_command(app, "gen-data", "generate the synthetic dataset", args);
  CLI::App* train = add_command(app, "train", "train the toy model", args);
  CLI::App* attack = add_command(app, "attack", "optimize a universal perturbation and evaluate it", args);
  CLI::App* evaluate = add_command(app, "evaluate", "evaluate a stored perturbation", args);
  evaluate->add_option("--perturbation", args.perturbation, "perturbation file (.sbp)");
  evaluate->add_option("--params", args.params, "target model parameters (.sbm)");
  CLI::App* sweep = add_command(app, "sweep", "run an attack per sweep value", args);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    Experiment e = load_experiment(args.config);
    if (args.seed) apply_seed(e, *args.seed);
    if (!args.out.empty()) e.output_dir = args.out;
    if (!args.perturbation.empty()) e.perturbation_path = args.perturbation;
    if (!args.params.empty()) e.target_model_path = args.params;
    e.attack.validate();
    e.dataset.validate();
    if (gen->parsed()) return cmd_gen_data(e);
    if (train->parsed()) return cmd_train(e);
    if (attack->parsed()) return cmd_attack(e);
    if (evaluate->parsed()) return cmd_evaluate(e);
    if (sweep->parsed()) return cmd_sweep(e);
  } catch (const DivergenceError& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return kExitDivergence;
  } catch (const ValidationError& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return kExitValidation;
  } catch (const audio::AudioError& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return kExitValidation;
  } catch (const std::invalid_argument& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}

}  // namespace sb::harness
