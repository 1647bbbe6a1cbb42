#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace cluda {

struct CheckResult {
  std::string name;
  bool pass = false;
  double worst = 0.0;  // max relative error (gradient suite) or |delta| (oracle suite)
  std::string detail;
};

// Analytic gradients vs central finite differences (f64, eps 1e-5, relative
// tolerance 1e-5) for every catalog kernel, the training objectives, each
// network head, and the end-to-end image gradient (tolerance 1e-4).
std::vector<CheckResult> gradient_suite(int instances, std::uint64_t seed);

// Exact cross-checks against the brute-force oracles: contrastive losses vs
// double loops, the confidence weight as an integer count, entropy cropping
// vs exhaustive search, mIoU vs set counting, EMA contraction, ClassMix
// composition, and the delta=1 reduction of the multi-resolution loss.
std::vector<CheckResult> oracle_suite(std::uint64_t seed);

bool all_pass(const std::vector<CheckResult>& results);

}  // namespace cluda
