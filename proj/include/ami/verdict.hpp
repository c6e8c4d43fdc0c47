#pragma once

namespace ami {

/// Outcome of an authentication test. `score` is the p-value for the
/// hypothesis test and the classifier output for the learned test.
struct AuthVerdict {
  double score = 0.0;
  double threshold = 0.0;
  bool accept = false;
};

}  // namespace ami
