#ifndef EEGDUAL_GRADCHECK_HPP
#define EEGDUAL_GRADCHECK_HPP

#include <functional>
#include <string>
#include <vector>

#include "eegdual/tape.hpp"

namespace eegdual {

// Builds a scalar graph from tracked leaves enrolled in order.
using GraphBuilder = std::function<Var(Tape&, const std::vector<Var>&)>;

// Max over all leaves and elements of
//   |analytic - central_difference| / max(1e-8, |analytic| + |central_difference|).
// Every element of every input is probed with a central difference of half
// width eps; the graph is rebuilt for each probe.
double grad_check(const GraphBuilder& build, std::vector<Tensor> inputs, double eps = 1e-5);

struct GradCheckEntry {
  std::string name;
  double max_rel_err;
  bool pass;
};

// A named scalar graph plus the tracked inputs it is probed with.
struct NamedGraphCase {
  std::string name;
  GraphBuilder build;
  std::vector<Tensor> inputs;
};

// The registered finite-difference battery: one entry per differentiable op
// plus end-to-end checks of each model branch at tiny shapes. Deterministic.
std::vector<GradCheckEntry> run_gradcheck_battery(double tolerance = 1e-4);

}  // namespace eegdual

#endif
