#pragma once

#include "posattn/tensor.hpp"

namespace posattn {

// Adam moment buffers, one pair per parameter tensor, in parameter order.
struct AdamState {
  std::vector<Mat> m, v;
  long step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

AdamState make_adam_state(const std::vector<const Mat*>& params);

// Standard Adam with bias correction. params, grads and state must be aligned.
void adam_step(const std::vector<Mat*>& params, const std::vector<const Mat*>& grads,
               AdamState& state, double lr);

// Cosine decay from lr0 (t = 0) to lr_min (t = total - 1).
double cosine_lr(long t, long total, double lr0, double lr_min);

}  // namespace posattn
