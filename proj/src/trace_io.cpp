#include "bilevel/trace_io.hpp"

#include "bilevel/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace bilevel {
namespace {

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

std::string optional_cell(const std::optional<double>& v) { return v ? exact_number(*v) : std::string(); }

}  // namespace

std::vector<std::string> trace_header(Index n_alpha) {
  std::vector<std::string> h = {"k", "resource", "wall_s"};
  for (Index i = 0; i < n_alpha; ++i) h.push_back("alpha_" + std::to_string(i));
  for (const char* s : {"grad_norm", "J", "R", "e_alpha_rel", "e_u_rel"}) h.emplace_back(s);
  return h;
}

void write_trace_csv(const std::string& path, const IterateTrace<double>& trace) {
  if (trace.records.empty()) throw std::invalid_argument("write_trace_csv: empty trace");
  const Index n_alpha = trace.records.front().alpha.size();
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  const auto header = trace_header(n_alpha);
  for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
  out << '\n';
  for (const auto& r : trace.records) {
    if (r.alpha.size() != n_alpha) throw std::invalid_argument("write_trace_csv: alpha size changes within trace");
    out << r.k << ',' << exact_number(r.resource) << ',' << exact_number(r.wall_s);
    for (Index i = 0; i < n_alpha; ++i) out << ',' << exact_number(r.alpha[i]);
    out << ',' << exact_number(r.grad_norm) << ',' << exact_number(r.J) << ',' << exact_number(r.R) << ','
        << optional_cell(r.e_alpha_rel) << ',' << optional_cell(r.e_u_rel) << '\n';
  }
  if (!out) throw std::runtime_error(path + ": write failed");
}

IterateTrace<double> read_trace_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path + ": cannot open for reading");
  std::string line;
  int line_no = 1;
  if (!std::getline(in, line)) throw std::runtime_error(path + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split(line);
  const auto n_alpha = static_cast<Index>(header.size()) - 8;
  if (n_alpha < 1 || header != trace_header(n_alpha)) {
    throw std::runtime_error(path + ":1: not a trace header");
  }
  IterateTrace<double> trace;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string at = path + ":" + std::to_string(line_no);
    const auto cells = split(line);
    if (cells.size() != header.size()) {
      throw std::runtime_error(at + ": expected " + std::to_string(header.size()) + " cells, got " +
                               std::to_string(cells.size()));
    }
    TraceRecord<double> r;
    std::size_t c = 0;
    const double k = parse_number(cells[c++], at);
    if (k != static_cast<double>(static_cast<long>(k))) throw std::runtime_error(at + ": non-integer step");
    r.k = static_cast<long>(k);
    r.resource = parse_number(cells[c++], at);
    r.wall_s = parse_number(cells[c++], at);
    r.alpha.resize(n_alpha);
    for (Index i = 0; i < n_alpha; ++i) r.alpha[i] = parse_number(cells[c++], at);
    r.grad_norm = parse_number(cells[c++], at);
    r.J = parse_number(cells[c++], at);
    r.R = parse_number(cells[c++], at);
    if (!cells[c].empty()) r.e_alpha_rel = parse_number(cells[c], at);
    ++c;
    if (!cells[c].empty()) r.e_u_rel = parse_number(cells[c], at);
    if (!trace.records.empty() && r.k <= trace.records.back().k) {
      throw std::runtime_error(at + ": step index not increasing");
    }
    trace.records.push_back(std::move(r));
  }
  if (trace.records.empty()) throw std::runtime_error(path + ": no records");
  return trace;
}

}  // namespace bilevel
