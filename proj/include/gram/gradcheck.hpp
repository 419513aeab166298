#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace gram {

struct GradCheckResult {
  std::string objective;
  std::size_t probes = 0;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

// Central finite-difference checks of every trainable objective on a random
// width-16 model: query SFT, product SFT, co-training, co-alignment and the
// pairwise code-weight hinge.
std::vector<GradCheckResult> run_gradient_suite(std::uint64_t seed, std::size_t probes = 20);

}  // namespace gram
