#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "posattn/model.hpp"
#include "posattn/pcoc.hpp"
#include "posattn/tensor.hpp"

namespace posattn {

// Temperature-scaled softmax realization of a hardmax routing pattern:
// W_K = I, W_Q = T(2A - 1) with T = ln(n/eps)/2 gives |softmax(W_Q) - A| <= eps
// entrywise whenever every row of A has exactly one 1. Rows with ties (or no
// 1 at all) have no such realization, so the pattern is rejected.
struct HardmaxParams {
  Mat W_Q;
  Mat W_K;
  double temperature = 0.0;
};
HardmaxParams hardmax_params(const Mat& pattern, double eps);

// Exact two-layer ReLU realizations of pairwise min and max:
//   min(a,b) = (relu(a+b) - relu(-a-b) - relu(a-b) - relu(b-a)) / 2
// and symmetrically for max with the last two signs flipped.
struct ReluMlp {
  Mat W_1;  // 2 x 4
  Mat W_2;  // 4 x 1
};
ReluMlp relu_min_mlp();
ReluMlp relu_max_mlp();
double relu_mlp_eval(const ReluMlp& m, double a, double b);

// A routing protocol compiled into positional-attention weights, one layer
// per round, one head per memory slot. Machine rows carry their memory in
// the first s columns plus a unique identifier (i+1)/(N+1) in the last; row
// N is a sink node whose slots are wiped every layer and which collects the
// deliveries no machine receives. The checkpoint holds the attention weights
// (W_K = I, W_V = I, selection W_O); the per-row local functions run as an
// exact table keyed on the identifier, standing in for the MLP, so the
// stored MLP tensors stay zero.
struct CompiledNetwork {
  ModelConfig cfg;        // positional; n = machines, heads = mem_size
  ModelParams params;
  PCOCInstance instance;  // drives the local-function table
  double eps = 0.0;
  double temperature = 0.0;
};

// Model shape implied by an instance: rows = N+1, s heads, d_x = d_v = s+1,
// d_o = s, one layer per round.
ModelConfig compiled_config(const PCOCInstance& inst);

// Binary (N+1)x(N+1) attention pattern of one head: row i has a 1 at column j
// when machine i receives slot `head` from machine j; the sink row collects
// every source unused at this slot (itself included); machine rows receiving
// nothing stay all-zero (their slot reads are masked off before the local
// function, matching the simulator's read-as-0 rule).
Mat routing_pattern(const PCOCInstance& inst, int round, int head);

// One layer realizing one round: s routing heads (W_K = I, W_Q from the
// pattern), W_V = I, and W_O selecting head h's slot-h column into output
// column h. MLP tensors are zero placeholders.
LayerParams compile_round(const PCOCInstance& inst, int round, double eps);

CompiledNetwork compile(const PCOCInstance& inst, double eps);

// Input staging mirroring run(): slot columns get the machine's scalar at the
// instance's input positions, the last column the node identifiers.
Mat compiled_input(const PCOCInstance& inst, const Vec& input);

// Forward pass; returns the (N+1)x(s+1) state after every layer.
std::vector<Mat> compiled_states(const CompiledNetwork& net, const Vec& input);

// Final machine memories (machines x s), directly comparable to run().
Mat compiled_forward(const CompiledNetwork& net, const Vec& input);

struct VerifyReport {
  int trials = 0;
  double tol = 0.0;
  std::vector<double> round_max_dev;  // one entry per round, max over trials
  double final_max_dev = 0.0;
  bool pass = false;
};

// Pinned default budget: 1e3 * eps * s * R (linear error growth headroom).
double default_verify_tol(double eps, int mem_size, int rounds);

// Runs the network and the simulator side by side on uniform random inputs
// from [-range, range] and reports the worst deviation per round and at the
// end. tol < 0 selects the default budget.
VerifyReport verify(const CompiledNetwork& net, int trials, double tol = -1.0,
                    std::uint64_t seed = 0, double range = 2.0);

// Checkpoint + sidecar JSON (source instance, eps, temperature).
void save_compiled(const CompiledNetwork& net, const std::string& checkpoint_path,
                   const std::string& sidecar_path);
CompiledNetwork load_compiled(const std::string& checkpoint_path,
                              const std::string& sidecar_path);

}  // namespace posattn
