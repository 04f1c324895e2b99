#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "posattn/tensor.hpp"

namespace posattn {

enum class TaskKind {
  cumulative_sum,
  cumulative_min,
  cumulative_median,
  sorting,
  cumulative_max_subarray,
};

const char* task_name(TaskKind t);
TaskKind task_from_name(const std::string& name);

// One sequence with its exact target and the sampling metadata that produced it.
struct Sample {
  Vec input;
  Vec target;
  double gamma_l = 0.0;
  double gamma_u = 0.0;
  double scale = 1.0;  // OOD scale factor c; 1 for training data
};

struct TaskBatch {
  TaskKind task = TaskKind::cumulative_sum;
  std::vector<Sample> samples;
};

// Exact task outputs. Even-length prefixes of the cumulative median use the
// mean of the two middle order statistics; max-subarray is over nonempty
// contiguous subarrays of each prefix.
Vec task_oracle(TaskKind task, const Vec& x);

struct SampleOptions {
  int n = 8;                     // maximum sequence length
  int count = 1;
  double range_bound = 2.0;      // training range is [-range_bound, range_bound]
  bool variable_length = false;  // lengths uniform in 1..n instead of fixed n
  std::uint64_t seed = 0;
};

// Two-stage training sampler: per sample, bounds gamma_l, gamma_u drawn
// uniformly from [-range_bound, range_bound] (swapped into order), then
// entries i.i.d. uniform from [gamma_l, gamma_u].
TaskBatch sample_train(TaskKind task, const SampleOptions& opt);

// OOD sampler: bounds drawn from [-c*range_bound, c*range_bound] and rejected
// until gamma_l < -range_bound or gamma_u > range_bound. Requires c > 1.
TaskBatch sample_test_ood(TaskKind task, double c, const SampleOptions& opt);

// Fraction of samples whose entries all lie in [-bound, bound].
double in_domain_fraction(const TaskBatch& batch, double bound = 2.0);

// One JSON object per line: {task, length, gamma_l, gamma_u, scale, input, target}.
void dump_jsonl(const TaskBatch& batch, std::ostream& out);

}  // namespace posattn
