#include "posattn/optimizer.hpp"

#include <cmath>

namespace posattn {

AdamState make_adam_state(const std::vector<const Mat*>& params) {
  AdamState s;
  s.m.reserve(params.size());
  s.v.reserve(params.size());
  for (const Mat* p : params) {
    s.m.push_back(Mat::Zero(p->rows(), p->cols()));
    s.v.push_back(Mat::Zero(p->rows(), p->cols()));
  }
  return s;
}

void adam_step(const std::vector<Mat*>& params, const std::vector<const Mat*>& grads,
               AdamState& state, double lr) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw std::runtime_error("adam_step: params/grads/state size mismatch");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    Mat& p = *params[i];
    const Mat& g = *grads[i];
    if (p.rows() != g.rows() || p.cols() != g.cols() || p.rows() != state.m[i].rows() ||
        p.cols() != state.m[i].cols())
      throw std::runtime_error("adam_step: shape misalignment at parameter " + std::to_string(i));
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g.cwiseProduct(g);
    p.array() -= lr * (state.m[i].array() / bc1) /
                 ((state.v[i].array() / bc2).sqrt() + state.eps);
  }
}

double cosine_lr(long t, long total, double lr0, double lr_min) {
  if (total <= 1) return lr0;
  const double frac = static_cast<double>(t) / static_cast<double>(total - 1);
  const double pi = 3.14159265358979323846;
  return lr_min + (lr0 - lr_min) * 0.5 * (1.0 + std::cos(pi * frac));
}

}  // namespace posattn
