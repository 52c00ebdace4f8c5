#pragma once

#include <string>
#include <vector>

namespace bgclab {

struct PropertyResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

// Fast self-contained correctness suites: reaction conservation and
// Jacobians, basis algebra, mixture-update oracles, EM behaviour,
// reduced-order vs Monte-Carlo equivalence on linear dynamics, long-run
// structural invariants, and balanced-initialization quality. Each entry is
// independent; all together they run in a few minutes.
std::vector<PropertyResult> run_property_suites();

}  // namespace bgclab
