#include "bilevel/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

namespace bilevel {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string where(const ConfigEntries& e, const std::string& key) {
  const auto it = e.lines.find(key);
  if (it == e.lines.end() || it->second == 0) return "--" + key;
  return e.source + ":" + std::to_string(it->second) + ": " + key;
}

template <typename Int>
Int parse_integer(const std::string& text, const std::string& context) {
  Int v{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size() || text.empty()) {
    throw std::invalid_argument(context + ": expected an integer, got '" + text + "'");
  }
  return v;
}

bool parse_bool(const std::string& text, const std::string& context) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw std::invalid_argument(context + ": expected true or false, got '" + text + "'");
}

KrylovMethod parse_krylov(const std::string& s, const std::string& context) {
  if (s == "cg") return KrylovMethod::cg;
  if (s == "bicgstab") return KrylovMethod::bicgstab;
  throw std::invalid_argument(context + ": unknown Krylov method '" + s + "' (expected cg or bicgstab)");
}

OuterStepMode parse_outer_mode(const std::string& s, const std::string& context) {
  if (s == "fixed") return OuterStepMode::fixed;
  if (s == "backtracking") return OuterStepMode::backtracking;
  throw std::invalid_argument(context + ": unknown outer_mode '" + s + "' (expected fixed or backtracking)");
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

struct KeyImpl {
  ConfigKey doc;
  Setter set;
  std::function<std::string(const RunConfig&)> get;
};

std::string join(const Vector<double>& v) {
  std::string s;
  for (Index i = 0; i < v.size(); ++i) s += (i ? "," : "") + exact_number(v[i]);
  return s;
}

#define BILEVEL_REAL(key, field, help)                                                                          \
  KeyImpl {                                                                                                     \
    {key, help}, [](RunConfig& c, const std::string& v, const std::string& ctx) { c.field = parse_number(v, ctx); }, \
        [](const RunConfig& c) { return exact_number(c.field); }                                               \
  }
#define BILEVEL_INT(key, field, type, help)                                                                      \
  KeyImpl {                                                                                                      \
    {key, help}, [](RunConfig& c, const std::string& v, const std::string& ctx) { c.field = parse_integer<type>(v, ctx); }, \
        [](const RunConfig& c) { return std::to_string(c.field); }                                              \
  }
#define BILEVEL_TEXT(key, field, help)                                                                   \
  KeyImpl {                                                                                              \
    {key, help}, [](RunConfig& c, const std::string& v, const std::string&) { c.field = v; },            \
        [](const RunConfig& c) { return c.field; }                                                       \
  }

const std::vector<KeyImpl>& key_table() {
  static const std::vector<KeyImpl> table = {
      {{"problem", "denoise or deconv"},
       [](RunConfig& c, const std::string& v, const std::string& ctx) {
         try {
           c.problem = parse_problem(v);
         } catch (const std::invalid_argument& e) {
           throw std::invalid_argument(ctx + ": " + e.what());
         }
       },
       [](const RunConfig& c) { return std::string(to_string(c.problem)); }},
      BILEVEL_INT("n", n, Index, "image side length"),
      BILEVEL_INT("seed", seed, std::uint64_t, "ground-truth phantom seed"),
      BILEVEL_INT("noise_seed", noise_seed, std::uint64_t, "measurement noise seed"),
      BILEVEL_REAL("noise", noise, "measurement noise standard deviation"),
      BILEVEL_REAL("gamma", gamma, "Huber smoothing radius"),
      BILEVEL_REAL("C", C, "deconvolution TV scale"),
      BILEVEL_REAL("beta", beta, "deconvolution outer l1 weight"),
      {{"method", "fefb, fifb or implicit"},
       [](RunConfig& c, const std::string& v, const std::string& ctx) {
         try {
           c.method = parse_method(v);
         } catch (const std::invalid_argument& e) {
           throw std::invalid_argument(ctx + ": " + e.what());
         }
       },
       [](const RunConfig& c) { return std::string(to_string(c.method)); }},
      BILEVEL_REAL("tau", steps.tau, "inner step length"),
      BILEVEL_REAL("sigma", steps.sigma, "outer step length (implicit: fixed or first trial)"),
      BILEVEL_REAL("theta", steps.theta, "adjoint step length (fifb)"),
      BILEVEL_REAL("rho", implicit.rho, "implicit inner relative-decrease tolerance"),
      BILEVEL_REAL("grad_tol", implicit.grad_tol, "implicit inner |grad F| tolerance; 0 uses rho"),
      BILEVEL_INT("inner_max_iter", implicit.inner_max_iter, long, "implicit inner iteration cap"),
      BILEVEL_REAL("armijo_grow", implicit.armijo_grow, "Armijo step growth between inner steps"),
      BILEVEL_REAL("armijo_shrink", implicit.armijo_shrink, "Armijo backtracking factor"),
      BILEVEL_REAL("armijo_c", implicit.armijo_c, "Armijo sufficient-decrease constant"),
      {{"outer_mode", "implicit outer step: fixed or backtracking"},
       [](RunConfig& c, const std::string& v, const std::string& ctx) {
         c.implicit.outer_mode = parse_outer_mode(v, ctx);
       },
       [](const RunConfig& c) {
         return std::string(c.implicit.outer_mode == OuterStepMode::fixed ? "fixed" : "backtracking");
       }},
      BILEVEL_REAL("sigma_shrink", implicit.sigma_shrink, "implicit outer backtracking factor"),
      BILEVEL_INT("max_probes", implicit.max_probes, int, "implicit outer backtracking trials"),
      {{"warm_start", "implicit inner solves start from the previous u"},
       [](RunConfig& c, const std::string& v, const std::string& ctx) { c.implicit.warm_start = parse_bool(v, ctx); },
       [](const RunConfig& c) { return std::string(c.implicit.warm_start ? "true" : "false"); }},
      BILEVEL_REAL("krylov_tol", krylov.tol, "relative residual tolerance of adjoint solves"),
      BILEVEL_INT("krylov_max_iter", krylov.max_iter, int, "adjoint solve iteration cap"),
      {{"krylov_method", "cg or bicgstab"},
       [](RunConfig& c, const std::string& v, const std::string& ctx) { c.krylov.method = parse_krylov(v, ctx); },
       [](const RunConfig& c) { return std::string(c.krylov.method == KrylovMethod::cg ? "cg" : "bicgstab"); }},
      BILEVEL_REAL("init_tol", init_tol, "|grad F| tolerance of the initial inner solve"),
      BILEVEL_INT("n_steps", n_steps, long, "outer steps"),
      BILEVEL_INT("trace_every", trace_every, long, "trace row interval"),
      {{"alpha0", "comma-separated initial parameters"},
       [](RunConfig& c, const std::string& v, const std::string& ctx) {
         const auto xs = parse_number_list(v, ctx);
         c.alpha0 = Eigen::Map<const Vector<double>>(xs.data(), static_cast<Index>(xs.size()));
       },
       [](const RunConfig& c) { return join(c.alpha0); }},
      BILEVEL_TEXT("ground_truth", ground_truth, "image file replacing the phantom"),
      BILEVEL_TEXT("reference", reference, "reference run directory for relative errors"),
      BILEVEL_TEXT("data_dir", data_dir, "directory holding b.csv and z.csv (default: output)"),
      BILEVEL_TEXT("output", output, "output directory"),
      {{"record_wall_time", "write wall-clock seconds into traces"},
       [](RunConfig& c, const std::string& v, const std::string& ctx) { c.record_wall_time = parse_bool(v, ctx); },
       [](const RunConfig& c) { return std::string(c.record_wall_time ? "true" : "false"); }},
  };
  return table;
}

#undef BILEVEL_REAL
#undef BILEVEL_INT
#undef BILEVEL_TEXT

const KeyImpl* find_key(const std::string& name) {
  for (const auto& k : key_table()) {
    if (k.doc.name == name) return &k;
  }
  return nullptr;
}

}  // namespace

const char* to_string(ProblemKind k) { return k == ProblemKind::denoise ? "denoise" : "deconv"; }

ProblemKind parse_problem(const std::string& s) {
  if (s == "denoise") return ProblemKind::denoise;
  if (s == "deconv") return ProblemKind::deconv;
  throw std::invalid_argument("unknown problem '" + s + "' (expected denoise or deconv)");
}

std::string exact_number(double x) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, ptr);
}

double parse_number(const std::string& text, const std::string& context) {
  double v = 0.0;
  const auto t = trim(text);
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc() || ptr != t.data() + t.size()) {
    throw std::invalid_argument(context + ": malformed number '" + text + "'");
  }
  return v;
}

std::vector<double> parse_number_list(const std::string& text, const std::string& context) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(parse_number(cell, context));
  if (out.empty()) throw std::invalid_argument(context + ": empty list");
  return out;
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    for (const auto& e : key_table()) k.push_back(e.doc);
    return k;
  }();
  return keys;
}

void ConfigEntries::set(const std::string& key, const std::string& value, int line) {
  values[key] = value;
  lines[key] = line;
}

void ConfigEntries::merge(const ConfigEntries& over) {
  for (const auto& [k, v] : over.values) set(k, v, over.lines.at(k));
}

ConfigEntries parse_config_text(const std::string& text, const std::string& source) {
  ConfigEntries out;
  out.source = source;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string at = source + ":" + std::to_string(line_no);
    if (eq == std::string::npos) throw std::invalid_argument(at + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!find_key(key)) throw std::invalid_argument(at + ": unknown key '" + key + "'");
    if (out.values.count(key)) throw std::invalid_argument(at + ": repeated key '" + key + "'");
    out.set(key, value, line_no);
  }
  return out;
}

ConfigEntries read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument(path + ": cannot open config file");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path);
}

RunConfig default_config(ProblemKind problem, Index n, Method method) {
  RunConfig c;
  c.problem = problem;
  c.n = n;
  c.method = method;
  // The reduced objective and its gradient grow with the pixel count, so outer
  // steps are scaled by (32 / n)^2 from values tuned at n = 32.
  const double area = (32.0 / static_cast<double>(n)) * (32.0 / static_cast<double>(n));
  if (problem == ProblemKind::denoise) {
    c.noise = 0.1;
    c.alpha0 = Vector<double>::Zero(1);
    c.steps = {0.01, 2e-5 * area, 0.01};
    c.implicit.rho = 5e-10;
    c.implicit.inner_max_iter = 500000;
    c.implicit.outer_mode = OuterStepMode::backtracking;
    c.krylov = KrylovConfig<double>(1e-10, 10000);
    switch (method) {
      case Method::fifb: c.n_steps = 10000; break;
      case Method::fefb: c.n_steps = 10000; break;
      case Method::implicit:
        c.n_steps = 40;
        c.steps.sigma = 8e-4 * area;
        break;
    }
  } else {
    c.noise = 5e-3;
    c.C = n >= 128 ? 0.01 : 0.1;
    c.beta = 0.01;
    c.alpha0 = (Vector<double>(4) << 0.01, 1.0 / 3, 1.0 / 3, 1.0 / 3).finished();
    c.steps = {0.1, 1e-4 * area, 0.1};
    c.implicit.rho = 1e-9;
    c.implicit.inner_max_iter = 200000;
    c.implicit.outer_mode = OuterStepMode::fixed;
    c.krylov = KrylovConfig<double>(1e-5, 2000);
    switch (method) {
      case Method::fifb: c.n_steps = 20000; break;
      case Method::fefb: c.n_steps = 2000; break;
      case Method::implicit:
        c.n_steps = 200;
        c.steps.sigma = 5e-4 * area;
        break;
    }
  }
  c.implicit.sigma = c.steps.sigma;
  c.trace_every = std::max<long>(1, c.n_steps / 1000);
  return c;
}

RunConfig build_config(const ConfigEntries& entries) {
  auto get = [&](const std::string& key) -> const std::string* {
    const auto it = entries.values.find(key);
    return it == entries.values.end() ? nullptr : &it->second;
  };
  RunConfig base;
  for (const char* key : {"problem", "n", "method"}) {
    if (const auto* v = get(key)) find_key(key)->set(base, *v, where(entries, key));
  }
  RunConfig c = default_config(base.problem, base.n, base.method);
  for (const auto& [key, value] : entries.values) {
    const auto* impl = find_key(key);
    if (!impl) throw std::invalid_argument(where(entries, key) + ": unknown key");
    impl->set(c, value, where(entries, key));
  }
  c.implicit.sigma = c.steps.sigma;
  validate(c);
  return c;
}

void validate(const RunConfig& c) {
  auto fail = [](const std::string& what) { throw std::invalid_argument("config: " + what); };
  if (c.n < 3) fail("n must be >= 3");
  if (!(c.noise >= 0.0) || !std::isfinite(c.noise)) fail("noise must be >= 0");
  if (!(c.gamma > 0.0)) fail("gamma must be positive");
  if (!(c.C > 0.0)) fail("C must be positive");
  if (!(c.beta >= 0.0)) fail("beta must be >= 0");
  if (c.n_steps < 1) fail("n_steps must be >= 1");
  if (c.trace_every < 1) fail("trace_every must be >= 1");
  if (!(c.init_tol > 0.0)) fail("init_tol must be positive");
  if (!(c.steps.sigma > 0.0)) fail("sigma must be positive");
  if (c.method != Method::implicit && !(c.steps.tau > 0.0)) fail("tau must be positive");
  if (c.method == Method::fifb && !(c.steps.theta > 0.0)) fail("theta must be positive for fifb");
  if (!(c.implicit.grad_tol >= 0.0)) fail("grad_tol must be >= 0");
  try {
    c.implicit.validate();
    c.krylov.validate();
  } catch (const std::invalid_argument& e) {
    fail(e.what());
  }
  const Index dim = c.problem == ProblemKind::denoise ? 1 : 4;
  if (c.alpha0.size() != dim) {
    fail("alpha0 needs " + std::to_string(dim) + " values for " + to_string(c.problem));
  }
  if (!c.alpha0.allFinite()) fail("alpha0 must be finite");
  if (c.problem == ProblemKind::deconv && (c.alpha0.array() < 0.0).any()) fail("alpha0 must be >= 0 for deconv");
  if (c.output.empty()) fail("output must not be empty");
}

std::string format_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& k : key_table()) out += k.doc.name + " = " + k.get(cfg) + "\n";
  return out;
}

void write_config(const std::string& path, const RunConfig& cfg) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  out << format_config(cfg);
  if (!out) throw std::runtime_error(path + ": write failed");
}

}  // namespace bilevel
