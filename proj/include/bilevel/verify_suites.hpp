#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace bilevel {

enum class Relation { le, lt, ge, gt };

struct CheckRow {
  std::string suite;
  std::string name;
  double metric = 0.0;
  Relation relation = Relation::le;
  double bound = 0.0;
  bool pass = false;
};

CheckRow make_check(std::string suite, std::string name, double metric, Relation rel, double bound);
const char* to_string(Relation r);

/// derivatives, hypergradient, prox, norms, monotonicity, toy.
const std::vector<std::string>& suite_names();

/// One suite by name, or every suite for "all". Unknown names throw
/// std::invalid_argument. Seeds are fixed.
std::vector<CheckRow> run_verify(const std::string& suite);

/// "PASS suite.name metric <= bound" lines and a summary.
void write_verify_text(std::ostream& out, const std::vector<CheckRow>& rows);
/// check,metric,bound,pass
void write_verify_csv(std::ostream& out, const std::vector<CheckRow>& rows);

/// Runs the suite, prints the text report and writes verify_<suite>.{txt,csv}
/// into `output` when it is non-empty. Returns true when every check passed.
bool cmd_verify(const std::string& suite, const std::string& output, std::ostream& log);

}  // namespace bilevel
