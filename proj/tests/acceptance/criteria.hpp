#pragma once

#include <string>

namespace lesion::acceptance {

struct Outcome {
  bool pass = false;
  std::string detail;
};

Outcome metric_oracle_equivalence();
Outcome normalization_invariant();
Outcome mask_qc_oracle();
Outcome split_fold_arithmetic();
Outcome architecture_shapes();
Outcome overfit_smoke();

}  // namespace lesion::acceptance
