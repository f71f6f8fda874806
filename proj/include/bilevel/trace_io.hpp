#pragma once

#include "bilevel/solvers.hpp"

#include <string>
#include <vector>

namespace bilevel {

/// `k,resource,wall_s,alpha_0..alpha_{n-1},grad_norm,J,R,e_alpha_rel,e_u_rel`.
/// Relative-error cells are empty when the record has none.
std::vector<std::string> trace_header(Index n_alpha);

void write_trace_csv(const std::string& path, const IterateTrace<double>& trace);

/// Parse errors name the file and line.
IterateTrace<double> read_trace_csv(const std::string& path);

}  // namespace bilevel
