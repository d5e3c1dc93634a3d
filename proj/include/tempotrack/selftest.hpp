#pragma once

// Release-gate checks runnable from the CLI: gradient fidelity against
// central differences, attention normalization, logits-reuse equivalence,
// FIFO memory behaviour, and metric oracles. All numeric checks run in
// fp64. The reference computations here are deliberately independent
// hand-rolled loops, not the library ops they verify.

#include <string>
#include <vector>

namespace tempotrack {

struct CheckResult {
  std::string name;
  double max_error = 0;
  double tolerance = 0;
  bool pass = false;
};

std::vector<CheckResult> run_selftests();

}  // namespace tempotrack
