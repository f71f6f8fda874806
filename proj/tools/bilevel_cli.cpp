// bilevel: data generation, solver runs, verification suites and reports.
//
// Exit codes: 0 success, 1 usage or input error, 2 numerical failure
// (including failed verification checks).

#include "bilevel/experiment.hpp"
#include "bilevel/verify_suites.hpp"

#include "CLI11.hpp"

#include <iostream>
#include <map>

namespace {

constexpr int kUsage = 1;
constexpr int kNumerical = 2;

struct ConfigFlags {
  std::string file;
  std::map<std::string, std::string> values;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", file, "key = value config file; flags override its entries");
    for (const auto& key : bilevel::config_keys()) cmd->add_option("--" + key.name, values[key.name], key.help);
  }

  bilevel::RunConfig resolve(CLI::App* cmd) const {
    bilevel::ConfigEntries entries;
    if (!file.empty()) entries = bilevel::read_config_file(file);
    bilevel::ConfigEntries flags;
    for (const auto& [key, value] : values) {
      if (cmd->count("--" + key) > 0) flags.set(key, value);
    }
    entries.merge(flags);
    return bilevel::build_config(entries);
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Single-loop bilevel parameter learning for TV denoising and deconvolution"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "write ground truth b and measurement z (PGM and CSV)");
  ConfigFlags gen_flags;
  gen_flags.attach(gen);

  auto* run = app.add_subcommand("run", "run a solver; writes config.snapshot, trace.csv, u_final.{pgm,csv}");
  ConfigFlags run_flags;
  run_flags.attach(run);

  auto* verify = app.add_subcommand("verify", "run verification suites");
  std::string suite = "all";
  std::string verify_out;
  verify->add_option("suite", suite, "all, derivatives, hypergradient, prox, norms, monotonicity or toy");
  verify->add_option("--output", verify_out, "directory for verify_<suite>.{txt,csv}");

  auto* report = app.add_subcommand("report", "relative errors of runs against a reference run");
  std::vector<std::string> runs;
  std::string reference;
  std::string report_out = "report";
  report->add_option("runs", runs, "run directories or trace.csv files")->required();
  report->add_option("--reference", reference, "reference run directory")->required();
  report->add_option("--output", report_out, "directory for report_<method>.csv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kUsage;
  }

  try {
    if (*gen) {
      bilevel::cmd_gen_data(gen_flags.resolve(gen), std::cout);
    } else if (*run) {
      bilevel::cmd_run(run_flags.resolve(run), std::cout);
    } else if (*verify) {
      if (!bilevel::cmd_verify(suite, verify_out, std::cout)) return kNumerical;
    } else if (*report) {
      bilevel::cmd_report(runs, reference, report_out, std::cout);
    }
  } catch (const bilevel::NumericalFailure& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return 0;
}
