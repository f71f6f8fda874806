#pragma once

#include "bilevel/solvers.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace bilevel {

enum class ProblemKind { denoise, deconv };

const char* to_string(ProblemKind k);
ProblemKind parse_problem(const std::string& s);

/// Everything a command needs. Unset step lengths and tolerances are filled
/// from per-problem defaults by build_config.
struct RunConfig {
  ProblemKind problem = ProblemKind::denoise;
  Index n = 32;
  std::uint64_t seed = 1;        // ground-truth phantom
  std::uint64_t noise_seed = 2;  // measurement noise
  double noise = 0.1;
  double gamma = 0.01;
  double C = 0.1;
  double beta = 0.01;
  Method method = Method::fifb;
  StepLengths<double> steps;
  ImplicitConfig<double> implicit;
  KrylovConfig<double> krylov;
  double init_tol = 1e-10;  // |grad F| tolerance of the initial inner solve
  long n_steps = 1;
  long trace_every = 1;
  Vector<double> alpha0;
  std::string ground_truth;  // optional image replacing the phantom
  std::string reference;     // optional reference run directory
  std::string data_dir;      // empty: same as output
  std::string output = "out";
  bool record_wall_time = true;

  const std::string& data_directory() const { return data_dir.empty() ? output : data_dir; }
};

struct ConfigKey {
  std::string name;
  std::string help;
};

/// Every recognised key, in snapshot order.
const std::vector<ConfigKey>& config_keys();

/// Raw key/value pairs with the line each came from (0 for command-line values).
struct ConfigEntries {
  std::map<std::string, std::string> values;
  std::map<std::string, int> lines;
  std::string source;

  void set(const std::string& key, const std::string& value, int line = 0);
  /// Entries in `over` replace those here.
  void merge(const ConfigEntries& over);
};

/// `key = value` lines; '#' starts a comment; blank lines are ignored.
/// Unknown or repeated keys and lines without '=' are errors naming the line.
ConfigEntries parse_config_text(const std::string& text, const std::string& source = "<config>");
ConfigEntries read_config_file(const std::string& path);

RunConfig default_config(ProblemKind problem, Index n, Method method);

/// Defaults for (problem, n, method), then every given entry. Validates.
RunConfig build_config(const ConfigEntries& entries);

/// Throws std::invalid_argument on inconsistent settings.
void validate(const RunConfig& cfg);

/// Complete `key = value` text; build_config(parse_config_text(s)) == cfg.
std::string format_config(const RunConfig& cfg);
void write_config(const std::string& path, const RunConfig& cfg);

/// Shortest text that reads back to the same double.
std::string exact_number(double x);
double parse_number(const std::string& text, const std::string& context);
std::vector<double> parse_number_list(const std::string& text, const std::string& context);

}  // namespace bilevel
