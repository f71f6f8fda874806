#include "doctest.h"

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

const fs::path& work() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "bilevel_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

struct Outcome {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome cli(const std::string& args) {
  const auto out = work() / "stdout.txt";
  const auto err = work() / "stderr.txt";
  const std::string cmd = "cd '" + work().string() + "' && '" + std::string(BILEVEL_CLI_PATH) + "' " + args + " >'" +
                          out.string() + "' 2>'" + err.string() + "'";
  const int status = std::system(cmd.c_str());
  Outcome o;
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  o.out = slurp(out);
  o.err = slurp(err);
  return o;
}

// trace.csv without the wall-clock column.
std::vector<std::string> trace_without_wall(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> rows;
  for (std::string line; std::getline(in, line);) {
    const auto a = line.find(',', line.find(',') + 1);
    const auto b = line.find(',', a + 1);
    rows.push_back(line.substr(0, a) + line.substr(b));
  }
  return rows;
}

}  // namespace

TEST_CASE("usage errors exit with 1") {
  CHECK(cli("").code == 1);
  CHECK(cli("frobnicate").code == 1);
  CHECK(cli("run --n").code == 1);
  const auto bad_suite = cli("verify nosuch");
  CHECK(bad_suite.code == 1);
  CHECK(bad_suite.err.find("nosuch") != std::string::npos);
  const auto bad_method = cli("run --method sgd --data_dir d0 --output r0");
  CHECK(bad_method.code == 1);
  CHECK(bad_method.err.find("method") != std::string::npos);
  const auto missing = cli("run --data_dir empty_dir --output r0");
  CHECK(missing.code == 1);
  CHECK(missing.err.find("run gen-data first") != std::string::npos);
  CHECK(cli("report").code == 1);
  CHECK(cli("--help").code == 0);
}

TEST_CASE("config file errors name the line") {
  std::ofstream(work() / "bad.cfg") << "problem = denoise\n\nwidth = 3\n";
  const auto r = cli("run --config bad.cfg");
  CHECK(r.code == 1);
  CHECK(r.err.find("bad.cfg:3: unknown key 'width'") != std::string::npos);
}

TEST_CASE("gen-data is deterministic") {
  REQUIRE(cli("gen-data --n 16 --data_dir g1").code == 0);
  REQUIRE(cli("gen-data --n 16 --data_dir g2").code == 0);
  for (const char* f : {"b.pgm", "b.csv", "z.pgm", "z.csv"}) {
    CHECK(fs::exists(work() / "g1" / f));
    CHECK(slurp(work() / "g1" / f) == slurp(work() / "g2" / f));
  }
  REQUIRE(cli("gen-data --n 16 --noise_seed 9 --data_dir g3").code == 0);
  CHECK(slurp(work() / "g1" / "b.csv") == slurp(work() / "g3" / "b.csv"));
  CHECK(slurp(work() / "g1" / "z.csv") != slurp(work() / "g3" / "z.csv"));
}

TEST_CASE("a run replays from its snapshot") {
  REQUIRE(cli("gen-data --n 16 --data_dir d").code == 0);
  const auto first = cli("run --n 16 --data_dir d --n_steps 300 --trace_every 7 --output r1");
  REQUIRE(first.code == 0);
  CHECK(first.out.find("method fifb, 300 steps") != std::string::npos);
  for (const char* f : {"config.snapshot", "trace.csv", "u_final.pgm", "u_final.csv"}) CHECK(fs::exists(work() / "r1" / f));

  const auto replay = cli("run --config r1/config.snapshot --output r2");
  REQUIRE(replay.code == 0);
  CHECK(trace_without_wall(work() / "r1" / "trace.csv") == trace_without_wall(work() / "r2" / "trace.csv"));
  CHECK(slurp(work() / "r1" / "u_final.csv") == slurp(work() / "r2" / "u_final.csv"));

  REQUIRE(cli("run --config r1/config.snapshot --record_wall_time false --output r3").code == 0);
  REQUIRE(cli("run --config r3/config.snapshot --output r4").code == 0);
  CHECK(slurp(work() / "r3" / "trace.csv") == slurp(work() / "r4" / "trace.csv"));
}

TEST_CASE("each method runs and reports") {
  REQUIRE(cli("gen-data --n 16 --data_dir m").code == 0);
  REQUIRE(cli("run --n 16 --data_dir m --method implicit --n_steps 28 --output ref").code == 0);
  REQUIRE(cli("run --n 16 --data_dir m --method implicit --n_steps 20 --output imp").code == 0);
  REQUIRE(cli("run --n 16 --data_dir m --method fefb --n_steps 20 --output fefb").code == 0);
  REQUIRE(cli("run --n 16 --data_dir m --method fifb --n_steps 20 --reference ref --output fifb").code == 0);
  const auto rep = cli("report imp fefb fifb/trace.csv --reference ref --output rep");
  REQUIRE(rep.code == 0);
  for (const char* f : {"report_implicit.csv", "report_fefb.csv", "report_fifb.csv"}) {
    const auto text = slurp(work() / "rep" / f);
    CHECK(text.rfind("resource,k,e_alpha_rel,e_u_rel\n", 0) == 0);
  }
  // The reference must be 1.4x longer than every compared run.
  CHECK(cli("report ref --reference imp --output rep2").code == 1);
}

TEST_CASE("malformed traces are rejected with the line") {
  REQUIRE(cli("gen-data --n 16 --data_dir t").code == 0);
  REQUIRE(cli("run --n 16 --data_dir t --n_steps 40 --output tref").code == 0);
  fs::create_directories(work() / "broken");
  std::ofstream(work() / "broken" / "trace.csv")
      << "k,resource,wall_s,alpha_0,grad_norm,J,R,e_alpha_rel,e_u_rel\n0,1,0,0,1,1,0,,\n1,3,0,x,1,1,0,,\n";
  const auto r = cli("report broken --reference tref");
  CHECK(r.code == 1);
  CHECK(r.err.find("trace.csv:3:") != std::string::npos);
}

TEST_CASE("divergence exits with 2 and keeps a partial trace") {
  REQUIRE(cli("gen-data --n 16 --data_dir dv").code == 0);
  const auto r = cli("run --n 16 --data_dir dv --tau 5 --n_steps 2000 --trace_every 1 --output diverged");
  CHECK(r.code == 2);
  CHECK(r.err.find("numerical failure") != std::string::npos);
  CHECK(fs::exists(work() / "diverged" / "trace.csv"));
}

TEST_CASE("verification suites through the CLI") {
  const auto r = cli("verify prox --output vp");
  CHECK(r.code == 0);
  CHECK(fs::exists(work() / "vp" / "verify_prox.csv"));
  CHECK(fs::exists(work() / "vp" / "verify_prox.txt"));
  CHECK(r.out.find("FAIL") == std::string::npos);
  CHECK(cli("verify toy").code == 0);
}
