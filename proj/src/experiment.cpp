#include "bilevel/experiment.hpp"

#include "bilevel/image_io.hpp"
#include "bilevel/trace_io.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <stdexcept>

namespace bilevel {
namespace fs = std::filesystem;

namespace {

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw std::runtime_error(dir + ": cannot create output directory");
}

std::string in_dir(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

GridImage<double> require_side(GridImage<double> img, Index n, const std::string& what) {
  if (img.side != n) {
    throw std::invalid_argument(what + " is " + std::to_string(img.side) + "x" + std::to_string(img.side) +
                                " but n = " + std::to_string(n));
  }
  return img;
}

}  // namespace

Dataset make_dataset(const RunConfig& cfg) {
  validate(cfg);
  GridImage<double> b = cfg.ground_truth.empty()
                            ? generate_phantom(cfg.n, cfg.seed)
                            : require_side(read_image(cfg.ground_truth), cfg.n, cfg.ground_truth);
  GridImage<double> clean = b;
  if (cfg.problem == ProblemKind::deconv) {
    clean.data = convolve(build_kernel(generating_kernel()), b.data, cfg.n);
  }
  return {std::move(b), add_gaussian_noise(clean, cfg.noise, cfg.noise_seed)};
}

Dataset cmd_gen_data(const RunConfig& cfg, std::ostream& log) {
  auto data = make_dataset(cfg);
  const auto& dir = cfg.data_directory();
  ensure_dir(dir);
  for (const char* ext : {"pgm", "csv"}) {
    write_image(in_dir(dir, std::string("b.") + ext), data.b);
    write_image(in_dir(dir, std::string("z.") + ext), data.z);
  }
  log << "wrote " << in_dir(dir, "b.{pgm,csv}") << " and " << in_dir(dir, "z.{pgm,csv}") << "\n";
  log << "measurement relative error " << format_real(relative_error(data.z.data, data.b.data)) << "\n";
  return data;
}

Dataset load_dataset(const RunConfig& cfg) {
  const auto& dir = cfg.data_directory();
  const auto b_path = in_dir(dir, "b.csv");
  const auto z_path = in_dir(dir, "z.csv");
  for (const auto& p : {b_path, z_path}) {
    if (!fs::exists(p)) throw std::invalid_argument(p + ": missing data (run gen-data first)");
  }
  return {require_side(read_image(b_path), cfg.n, b_path), require_side(read_image(z_path), cfg.n, z_path)};
}

std::unique_ptr<BilevelProblem<double>> make_problem(const RunConfig& cfg, const Dataset& data) {
  const HuberSpec<double> huber(cfg.gamma);
  if (cfg.problem == ProblemKind::denoise) {
    return std::make_unique<DenoisingProblem<double>>(data.z.data, data.b.data, huber);
  }
  return std::make_unique<DeconvolutionProblem<double>>(data.z.data, data.b.data, huber, cfg.C,
                                                        RegularizerSpec<double>(RegularizerKind::l1_nonneg, cfg.beta));
}

RunArtifacts load_run(const std::string& path) {
  fs::path dir = path;
  fs::path trace = dir / "trace.csv";
  if (fs::is_regular_file(dir)) {
    trace = dir;
    dir = dir.parent_path();
  }
  RunArtifacts out;
  out.dir = dir.string();
  out.trace = read_trace_csv(trace.string());
  const auto u_path = dir / "u_final.csv";
  if (fs::exists(u_path)) out.u = read_csv_image(u_path.string()).data;
  out.method = dir.filename().string();
  const auto snap = dir / "config.snapshot";
  if (fs::exists(snap)) {
    const auto entries = read_config_file(snap.string());
    const auto it = entries.values.find("method");
    if (it != entries.values.end()) out.method = it->second;
  }
  return out;
}

Reference<double> reference_from(const RunArtifacts& ref, long compared_steps) {
  const long have = ref.trace.last_step();
  if (static_cast<double>(have) < 1.4 * static_cast<double>(compared_steps)) {
    throw std::invalid_argument(ref.dir + ": reference has " + std::to_string(have) +
                                " steps; at least 1.4x the compared " + std::to_string(compared_steps) +
                                " are required");
  }
  if (ref.u.size() == 0) throw std::invalid_argument(ref.dir + ": reference has no u_final.csv");
  return {ref.trace.records.back().alpha, ref.u};
}

RunOutcome execute_run(const RunConfig& cfg, const Dataset& data, const std::optional<Reference<double>>& reference) {
  validate(cfg);
  const auto problem = make_problem(cfg, data);
  RunOutcome out;
  if (reference && (reference->alpha.size() != problem->outer_dim() || reference->u.size() != problem->inner_dim())) {
    throw std::invalid_argument("reference dimensions do not match the problem");
  }

  ImplicitConfig<double> init_cfg = cfg.implicit;
  init_cfg.grad_tol = cfg.init_tol;
  init_cfg.inner_max_iter = std::max<long>(init_cfg.inner_max_iter, 2000000);
  const auto init = initialize_state(*problem, cfg.alpha0, init_cfg, cfg.krylov);
  const double g0 = problem->inner_grad_u(init.u, init.alpha).norm();
  if (g0 > cfg.init_tol) {
    out.warnings.push_back("initial inner solve stopped at |grad F| = " + format_real(g0));
  }
  if (cfg.method != Method::implicit) {
    for (auto& w : check_step_lengths(*problem, init.u, init.alpha, cfg.steps, cfg.method)) {
      out.warnings.push_back(std::move(w));
    }
  }

  RunOptions<double> opt;
  opt.method = cfg.method;
  opt.steps = cfg.steps;
  opt.implicit = cfg.implicit;
  opt.krylov = cfg.krylov;
  opt.n_steps = cfg.n_steps;
  opt.trace_every = cfg.trace_every;
  opt.reference = reference;
  out.result = run(*problem, init, opt);
  if (!cfg.record_wall_time) {
    for (auto& r : out.result.trace.records) r.wall_s = 0.0;
  }
  out.reconstruction_error = relative_error(out.result.state.u, data.b.data);
  out.input_error = relative_error(data.z.data, data.b.data);
  return out;
}

RunOutcome cmd_run(const RunConfig& cfg, std::ostream& log) {
  validate(cfg);
  const auto data = load_dataset(cfg);
  std::optional<Reference<double>> reference;
  if (!cfg.reference.empty()) reference = reference_from(load_run(cfg.reference), cfg.n_steps);
  ensure_dir(cfg.output);
  write_config(in_dir(cfg.output, "config.snapshot"), cfg);

  auto out = execute_run(cfg, data, reference);
  for (const auto& w : out.warnings) log << "warning: " << w << "\n";
  const std::size_t shown = std::min<std::size_t>(out.result.log.size(), 10);
  for (std::size_t i = 0; i < shown; ++i) log << "note: " << out.result.log[i] << "\n";
  if (out.result.log.size() > shown) log << "note: " << out.result.log.size() - shown << " more\n";

  write_trace_csv(in_dir(cfg.output, "trace.csv"), out.result.trace);
  const GridImage<double> u(cfg.n, out.result.state.u);
  write_image(in_dir(cfg.output, "u_final.pgm"), u);
  write_image(in_dir(cfg.output, "u_final.csv"), u);
  if (!out.result.ok) throw NumericalFailure(out.result.error + " (partial trace written)");

  log << "method " << to_string(cfg.method) << ", " << out.result.state.k << " steps, resource "
      << format_real(out.result.state.resource) << "\n";
  log << "alpha";
  for (Index i = 0; i < out.result.state.alpha.size(); ++i) log << ' ' << format_real(out.result.state.alpha[i]);
  log << "\n";
  log << "reconstruction relative error " << format_real(out.reconstruction_error) << " (input "
      << format_real(out.input_error) << ")\n";
  return out;
}

std::vector<std::string> cmd_report(const std::vector<std::string>& runs, const std::string& reference,
                                    const std::string& output, std::ostream& log) {
  if (runs.empty()) throw std::invalid_argument("report: no traces given");
  const auto ref_run = load_run(reference);
  ensure_dir(output);
  std::map<std::string, int> used;
  std::vector<std::string> written;
  for (const auto& path : runs) {
    const auto run = load_run(path);
    const auto ref = reference_from(ref_run, run.trace.last_step());
    if (run.trace.records.front().alpha.size() != ref.alpha.size()) {
      throw std::invalid_argument(path + ": alpha dimension differs from the reference");
    }
    std::string name = run.method;
    if (++used[name] > 1) name += "_" + std::to_string(used[name]);
    const auto file = in_dir(output, "report_" + name + ".csv");
    std::ofstream out(file);
    if (!out) throw std::runtime_error(file + ": cannot open for writing");
    out << "resource,k,e_alpha_rel,e_u_rel\n";
    const double a_norm = ref.alpha.norm();
    const double u_norm = ref.u.norm();
    for (std::size_t i = 0; i < run.trace.records.size(); ++i) {
      const auto& r = run.trace.records[i];
      out << exact_number(r.resource) << ',' << r.k << ',' << exact_number((ref.alpha - r.alpha).norm() / a_norm)
          << ',';
      if (i + 1 == run.trace.records.size() && run.u.size() == ref.u.size()) {
        out << exact_number((ref.u - run.u).norm() / u_norm);
      }
      out << '\n';
    }
    if (!out) throw std::runtime_error(file + ": write failed");
    log << "wrote " << file << "\n";
    written.push_back(file);
  }
  return written;
}

}  // namespace bilevel
