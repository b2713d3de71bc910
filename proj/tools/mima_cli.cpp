#include <cstdlib>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "mima/experiment.hpp"
#include "mima/gradcheck.hpp"

namespace {

enum Exit { kOk = 0, kConfigError = 1, kPartialGrid = 2, kInternal = 3 };

int cmd_run(const std::string& config_path) {
  const mima::ExperimentConfig cfg = mima::load_config(config_path);
  const char* root = std::getenv("MIMA_OUTPUT_ROOT");
  const mima::ExperimentOutcome outcome = mima::run_experiment(cfg, root ? root : "", &std::cerr);
  mima::write_summary_tables(std::cout, outcome.summary);
  return outcome.all_ok() ? kOk : kPartialGrid;
}

int cmd_check(const std::string& module) {
  bool ok = true;
  for (const mima::CheckReport& r : mima::run_gradient_checks(module)) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.instances << " instances, max error "
              << r.max_error << " (tolerance " << r.tolerance << "), " << r.seconds << " s";
    if (!r.detail.empty()) std::cout << ", " << r.detail;
    std::cout << '\n';
    ok = ok && r.passed;
  }
  return ok ? kOk : kInternal;
}

int cmd_summarize(const std::string& csv_path, bool as_csv) {
  const auto summary = mima::summarize(mima::load_results(csv_path));
  if (as_csv) mima::write_summary_csv(std::cout, summary);
  else mima::write_summary_tables(std::cout, summary);
  return kOk;
}

int cmd_gen_config(const std::string& preset, const std::string& out_path) {
  const std::string text = mima::serialize_config(mima::preset_config(preset));
  if (out_path.empty()) {
    std::cout << text;
    return kOk;
  }
  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw mima::Error(mima::Errc::IoError, "cannot write " + out_path);
  out << text;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-concept model immunization experiments on a toy diffusion model"};
  app.require_subcommand(1);

  std::string config_path;
  auto* run = app.add_subcommand("run", "Run an experiment grid from a JSON config");
  run->add_option("config", config_path, "Config file")->required();

  std::string module = "all";
  auto* check = app.add_subcommand("check-gradients", "Check analytic gradients against finite differences");
  check->add_option("--module", module, "Module to check")
      ->check(CLI::IsMember({"all", "merge", "diffusion", "immunize"}));

  std::string csv_path;
  bool as_csv = false;
  auto* summarize = app.add_subcommand("summarize", "MSGR/MRSGR tables from a results.csv");
  summarize->add_option("results", csv_path, "results.csv")->required();
  summarize->add_flag("--csv", as_csv, "Print the summary as CSV");

  std::string preset;
  std::string out_path;
  auto* gen = app.add_subcommand("gen-config", "Print a preset config");
  gen->add_option("--preset", preset, "Preset name")
      ->required()
      ->check(CLI::IsMember({"2concept", "3concept", "minimal"}));
  gen->add_option("-o,--output", out_path, "Write to a file instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*run) return cmd_run(config_path);
    if (*check) return cmd_check(module);
    if (*summarize) return cmd_summarize(csv_path, as_csv);
    if (*gen) return cmd_gen_config(preset, out_path);
  } catch (const mima::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.code() == mima::Errc::ConfigError ? kConfigError : kInternal;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return kInternal;
  }
  return kInternal;
}
