#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "posattn/model.hpp"
#include "posattn/tasks.hpp"
#include "json.hpp"

namespace posattn {

// Closed-form upper bound on the probability that an OOD-sampled sequence
// lands entirely inside the training range. Two branches: a general bound for
// n >= 3 and, for n = 2, the exact overlap probability, whose conditional
// integrals are elementary.
struct OverlapBound {
  int n = 0;
  double c = 0.0;
  double p_in_upper = 0.0;
  std::string formula_branch;  // "n>=3" or "n==2"
};

// Evaluates the closed-form bound. Requires n >= 2 and c > 1.
OverlapBound p_in_bound(int n, double c);

// Additive Chernoff tail for the in-domain count over n_samples draws:
// P(N_in >= N (p + eps)) <= exp(-2 N eps^2). The tail itself does not depend
// on p; it is validated as a probability because the statement is about one.
double chernoff_tail(long long n_samples, double p, double eps);

struct OverlapEstimate {
  double estimate = 0.0;
  double sigma = 0.0;  // binomial standard error sqrt(p(1-p)/trials)
  long long trials = 0;
};

// Empirical in-domain fraction of sample_test_ood draws of length n at scale
// c, for a 3-sigma cross-check against p_in_bound.
OverlapEstimate monte_carlo_p_in(int n, double c, long long trials, std::uint64_t seed,
                                 double range_bound = 2.0);

// Attention matrices for base_input scaled by each factor, flattened to a
// JSON array with one record {scale, layer, head, rows} per attention matrix.
nlohmann::json attn_dump(const ModelConfig& cfg, const ModelParams& params, const Vec& base_input,
                         const std::vector<double>& scales);

}  // namespace posattn
