#include "bilevel/verify_suites.hpp"

#include "bilevel/verify.hpp"

#include <filesystem>
#include <fstream>
#include <functional>
#include <ostream>
#include <stdexcept>

namespace bilevel {
namespace {

using Vec = Vector<double>;
using Mat = Matrix<double>;

Vec noisy(const GridImage<double>& b, double sigma, std::uint64_t seed) { return add_gaussian_noise(b, sigma, seed).data; }

std::vector<CheckRow> derivatives_suite() {
  std::vector<CheckRow> rows;
  auto add = [&](const std::string& prefix, const DerivativeReport<double>& r) {
    rows.push_back(make_check("derivatives", prefix + ".grad_u", r.grad_u, Relation::le, 1e-5));
    rows.push_back(make_check("derivatives", prefix + ".hessian", r.hessian, Relation::le, 1e-5));
    rows.push_back(make_check("derivatives", prefix + ".mixed", r.mixed, Relation::le, 1e-5));
    rows.push_back(make_check("derivatives", prefix + ".outer_grad", r.outer_grad, Relation::le, 1e-5));
  };
  const auto b = generate_phantom(8, 31);
  Rng rng(32);
  const Vec u = b.data + 0.2 * rng.normal_vector<double>(64);

  DenoisingProblem<double> dn(noisy(b, 0.1, 33), b.data, HuberSpec<double>(0.05));
  add("denoise", check_problem_derivatives(dn, u, Vec::Constant(1, 0.05), 10, 34));

  const Vec blurred = convolve(build_kernel(0.15, 0.1, 0.75), b.data, 8);
  DeconvolutionProblem<double> dc(noisy(GridImage<double>(8, blurred), 5e-3, 35), b.data, HuberSpec<double>(0.05),
                                  0.1, RegularizerSpec<double>(RegularizerKind::l1_nonneg, 0.01));
  add("deconv", check_problem_derivatives(dc, u, (Vec(4) << 0.05, 0.2, 0.15, 0.6).finished(), 10, 36));
  return rows;
}

std::vector<CheckRow> hypergradient_suite() {
  const auto b = generate_phantom(8, 41);
  DenoisingProblem<double> p(noisy(b, 0.1, 42), b.data, HuberSpec<double>(0.01));
  const auto tight = tight_inner_config(1e-12);
  const KrylovConfig<double> kc(1e-13, 5000);
  Rng rng(43);
  std::vector<CheckRow> rows;
  for (int t = 0; t < 5; ++t) {
    const Vec a = Vec::Constant(1, rng.uniform(0.005, 0.1));
    const auto inner = implicit_solve_inner(p, a, Vec::Zero(64), tight);
    const auto adj = solve_adjoint_exact(p, inner.u, a, kc);
    const Vec h = hypergradient(adj.p, inner.u, p);
    const Vec fd = hypergradient_oracle(p, a, 1e-5, 1e-12);
    const double rel = (fd - h).norm() / h.norm();
    rows.push_back(make_check("hypergradient", "denoise.alpha=" + format_real(a[0]), rel, Relation::le, 1e-4));
  }
  return rows;
}

std::vector<CheckRow> prox_suite() {
  std::vector<CheckRow> rows;
  auto add = [&](const std::string& name, const ContractivityReport<double>& r) {
    rows.push_back(make_check("prox", name, r.max_ratio, Relation::le, r.bound * (1 + 1e-9)));
    rows.push_back(make_check("prox", name + ".samples", r.samples, Relation::ge, 1000));
  };
  const Vec one(Vec::Constant(1, 1.0));
  const RegularizerSpec<double> l1(RegularizerKind::l1_nonneg, 1.0);
  // -q = beta at a_hat = 0.5; box of radius 1 cut to [0, inf).
  add("soft_threshold", check_prox_contractivity(l1, 0.5 * one, -1.0 * one, 0.1, 5.0, 0.0 * one, 1.5 * one, 1000, 51));
  // q = 2: the admissible set starts at a_hat - (a_hat - sigma (q + beta)) / (1 - sigma C_R) = 0.1.
  add("soft_threshold_general",
      check_prox_contractivity(l1, 0.5 * one, 2.0 * one, 0.1, 5.0, 0.1 * one, 1.5 * one, 1000, 52));
  add("projection", check_prox_contractivity(RegularizerSpec<double>(RegularizerKind::nonneg, 0.0),
                                             Vec::Constant(3, 0.5), Vec::Zero(3), 0.3, 1e-3, Vec::Zero(3),
                                             Vec::Constant(3, 1.5), 1000, 53));
  // R = beta/2 |a|^2 has L = beta.
  add("quadratic", check_prox_contractivity(RegularizerSpec<double>(RegularizerKind::squared_l2, 2.0),
                                           Vec::Constant(2, 0.2), Vec::Constant(2, -0.4), 0.25, 2.0,
                                           Vec::Constant(2, -0.8), Vec::Constant(2, 1.2), 1000, 54));
  return rows;
}

std::vector<CheckRow> norms_suite() {
  const auto r = check_norm_properties<double>(1000, 61);
  return {
      make_check("norms", "samples", r.samples, Relation::ge, 1000),
      make_check("norms", "inner_product.symmetry", r.symmetry, Relation::le, 1e-10),
      make_check("norms", "inner_product.linearity", r.linearity, Relation::le, 1e-10),
      make_check("norms", "inner_product.positivity", r.positivity, Relation::gt, 0.0),
      make_check("norms", "submultiplicative_slack", r.submultiplicative, Relation::ge, -1e-10),
      make_check("norms", "spectral_below_frobenius_slack", r.spectral_vs_frobenius, Relation::ge, -1e-10),
  };
}

std::vector<CheckRow> monotonicity_suite() {
  std::vector<CheckRow> rows;
  Rng rng(71);
  const double gammas[] = {0.1, 0.5, 1.0, 0.01, 2.0};
  const double ls[] = {1.0, 2.0, 1.0, 10.0, 50.0};
  const Index dims[] = {3, 5, 8, 12, 16};
  for (int i = 0; i < 5; ++i) {
    const Mat h = random_spd<double>(dims[i], gammas[i], ls[i], rng);
    const double slack = check_three_point_monotonicity<double>(h, gammas[i], ls[i], 1000, 72 + i);
    rows.push_back(make_check("monotonicity", "quadratic_" + std::to_string(i) + ".slack", slack, Relation::ge, -1e-10));
  }
  return rows;
}

std::vector<CheckRow> toy_suite() {
  const auto toy = make_toy_problem<double>(81, 6, 4);
  StepLengths<double> st;
  st.tau = 0.9 / toy.lipschitz;
  st.theta = 0.9 / toy.lipschitz;
  st.sigma = 0.02 / toy.w.squaredNorm();
  const KrylovConfig<double> kc(1e-14, 100);
  SolverState<double> x_hat;
  x_hat.u = toy.u_hat;
  x_hat.p = toy.p_hat;
  x_hat.alpha = toy.alpha_hat;

  std::vector<CheckRow> rows;
  for (const auto method : {Method::fefb, Method::fifb}) {
    const std::string m = to_string(method);
    auto init = initialize_state(*toy.problem, Vec::Zero(1), tight_inner_config(1e-13), kc);
    if (method == Method::fifb) init.p.array() += 0.1;
    RunOptions<double> opt;
    opt.method = method;
    opt.steps = st;
    opt.krylov = kc;
    opt.n_steps = 5000;
    opt.trace_every = 100;
    std::vector<SolverState<double>> states;
    opt.observer = [&](const SolverState<double>& s) { states.push_back(s); };
    const auto res = run(*toy.problem, init, opt);
    const auto mon = fejer_and_rate_monitor(states, x_hat, zm_weights(method, st));
    rows.push_back(make_check("toy", m + ".alpha_error", std::abs(res.state.alpha[0] - toy.alpha_hat[0]), Relation::le,
                              1e-8));
    rows.push_back(make_check("toy", m + ".zm_increase", mon.max_increase, Relation::le, 1e-12));
    rows.push_back(make_check("toy", m + ".rate", mon.rate, Relation::lt, 1.0));
  }

  double moved = 0.0;
  const auto fe = fefb_step(*toy.problem, x_hat, st, kc);
  const auto fi = fifb_step(*toy.problem, x_hat, st);
  for (const auto* y : {&fe, &fi}) {
    moved = std::max({moved, (y->u - x_hat.u).cwiseAbs().maxCoeff(), (y->p - x_hat.p).cwiseAbs().maxCoeff(),
                      (y->alpha - x_hat.alpha).cwiseAbs().maxCoeff()});
  }
  rows.push_back(make_check("toy", "fixed_point.max_move", moved, Relation::le, 1e-10));
  return rows;
}

const std::vector<std::pair<std::string, std::function<std::vector<CheckRow>()>>>& suites() {
  static const std::vector<std::pair<std::string, std::function<std::vector<CheckRow>()>>> s = {
      {"derivatives", derivatives_suite}, {"hypergradient", hypergradient_suite}, {"prox", prox_suite},
      {"norms", norms_suite},             {"monotonicity", monotonicity_suite},   {"toy", toy_suite},
  };
  return s;
}

}  // namespace

const char* to_string(Relation r) {
  switch (r) {
    case Relation::le: return "<=";
    case Relation::lt: return "<";
    case Relation::ge: return ">=";
    case Relation::gt: return ">";
  }
  return "?";
}

CheckRow make_check(std::string suite, std::string name, double metric, Relation rel, double bound) {
  CheckRow row{std::move(suite), std::move(name), metric, rel, bound, false};
  switch (rel) {
    case Relation::le: row.pass = metric <= bound; break;
    case Relation::lt: row.pass = metric < bound; break;
    case Relation::ge: row.pass = metric >= bound; break;
    case Relation::gt: row.pass = metric > bound; break;
  }
  return row;
}

const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& s : suites()) n.push_back(s.first);
    return n;
  }();
  return names;
}

std::vector<CheckRow> run_verify(const std::string& suite) {
  std::vector<CheckRow> rows;
  bool found = false;
  for (const auto& [name, fn] : suites()) {
    if (suite != "all" && suite != name) continue;
    found = true;
    try {
      const auto r = fn();
      rows.insert(rows.end(), r.begin(), r.end());
    } catch (const std::exception& e) {
      // A crashing suite counts as one failed check.
      rows.push_back(make_check(name, std::string("error: ") + e.what(), 1.0, Relation::le, 0.0));
    }
  }
  if (!found) {
    std::string all = "all";
    for (const auto& n : suite_names()) all += ", " + n;
    throw std::invalid_argument("unknown verify suite '" + suite + "' (expected " + all + ")");
  }
  return rows;
}

void write_verify_text(std::ostream& out, const std::vector<CheckRow>& rows) {
  int failed = 0;
  for (const auto& r : rows) {
    out << (r.pass ? "PASS " : "FAIL ") << r.suite << '.' << r.name << "  " << format_real(r.metric) << ' '
        << to_string(r.relation) << ' ' << format_real(r.bound) << '\n';
    failed += r.pass ? 0 : 1;
  }
  out << rows.size() - failed << '/' << rows.size() << " checks passed\n";
}

void write_verify_csv(std::ostream& out, const std::vector<CheckRow>& rows) {
  out << "check,metric,relation,bound,pass\n";
  auto csv_field = [](const std::string& s) {
    if (s.find_first_of(",\"") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
    return q + "\"";
  };
  for (const auto& r : rows) {
    out << csv_field(r.suite + "." + r.name) << ',' << format_real(r.metric) << ',' << to_string(r.relation) << ','
        << format_real(r.bound) << ',' << (r.pass ? "true" : "false") << '\n';
  }
}

bool cmd_verify(const std::string& suite, const std::string& output, std::ostream& log) {
  const auto rows = run_verify(suite);
  write_verify_text(log, rows);
  if (!output.empty()) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(output, ec);
    const auto base = fs::path(output) / ("verify_" + suite);
    std::ofstream txt(base.string() + ".txt");
    std::ofstream csv(base.string() + ".csv");
    if (!txt || !csv) throw std::runtime_error(output + ": cannot write verification report");
    write_verify_text(txt, rows);
    write_verify_csv(csv, rows);
  }
  for (const auto& r : rows) {
    if (!r.pass) return false;
  }
  return true;
}

}  // namespace bilevel
