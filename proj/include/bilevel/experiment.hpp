#pragma once

#include "bilevel/config.hpp"
#include "bilevel/objectives.hpp"

#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

namespace bilevel {

/// Generating deconvolution kernel (center, orthogonal, outer).
inline const Vector<double>& generating_kernel() {
  static const Vector<double> k = (Vector<double>(3) << 0.15, 0.1, 0.75).finished();
  return k;
}

struct Dataset {
  GridImage<double> b;  // ground truth
  GridImage<double> z;  // measurement
};

/// Deterministic in (seed, noise_seed, noise, n) or the ground_truth file.
Dataset make_dataset(const RunConfig& cfg);

/// Writes b and z as PGM and CSV into the data directory.
Dataset cmd_gen_data(const RunConfig& cfg, std::ostream& log);

/// Reads b.csv and z.csv from the data directory.
Dataset load_dataset(const RunConfig& cfg);

std::unique_ptr<BilevelProblem<double>> make_problem(const RunConfig& cfg, const Dataset& data);

/// A finished run as stored on disk: final alpha from the last trace row and
/// the final image.
struct RunArtifacts {
  IterateTrace<double> trace;
  Vector<double> u;
  std::string method;  // from the snapshot, or the directory name
  std::string dir;
};

/// `path` is a run directory or a trace.csv inside one.
RunArtifacts load_run(const std::string& path);

/// Rejects references with fewer than 1.4x the given steps.
Reference<double> reference_from(const RunArtifacts& ref, long compared_steps);

struct RunOutcome {
  RunResult<double> result;
  double reconstruction_error = 0.0;  // |u - b| / |b|
  double input_error = 0.0;           // |z - b| / |b|
  std::vector<std::string> warnings;
};

/// Initializes, runs and evaluates without touching the file system.
RunOutcome execute_run(const RunConfig& cfg, const Dataset& data,
                       const std::optional<Reference<double>>& reference = std::nullopt);

/// Loads data, runs, and writes config.snapshot, trace.csv and u_final.{pgm,csv}
/// into the output directory. Throws NumericalFailure after writing the
/// partial trace when a component failed.
RunOutcome cmd_run(const RunConfig& cfg, std::ostream& log);

/// Writes report_<method>.csv (resource,k,e_alpha_rel,e_u_rel) per input run.
/// Only the final u is stored, so e_u_rel is filled on the last row.
std::vector<std::string> cmd_report(const std::vector<std::string>& runs, const std::string& reference,
                                    const std::string& output, std::ostream& log);

}  // namespace bilevel
