#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "posattn/tensor.hpp"

namespace posattn {

enum class AttentionKind { positional, self_attn, self_rope };

const char* attention_name(AttentionKind k);
AttentionKind attention_from_name(const std::string& name);

// Architecture hyperparameters. Every input sequence gets one extra scratchpad
// row (value 0, its own one-hot position), so a model over sequences of length
// up to n works on n+1 rows.
struct ModelConfig {
  int n = 8;           // maximum number of value entries
  int num_layers = 0;  // 0 means the default ceil(log2 n) + 1
  int heads = 2;
  int d_x = 64;
  int d_v = 32;
  int d_o = 64;
  int mlp_hidden = 64;
  AttentionKind attention = AttentionKind::positional;

  int rows() const { return n + 1; }  // full-length sequence incl. scratchpad
  int d_p() const { return n + 1; }   // one-hot positional encoding width
  int layers() const;
  // query/key inner width: the positional construction needs d_m >= n+1, the
  // self-attention baseline uses the embedding width
  int d_m() const { return attention == AttentionKind::positional ? d_p() : d_x; }
  // positional models see the value only; the standard baseline gets the
  // one-hot position concatenated at the encoder
  int encoder_in() const { return attention == AttentionKind::self_attn ? 1 + d_p() : 1; }

  void validate() const;  // throws on inconsistent dimensions
};

struct HeadParams {
  Mat W_Q, W_K;  // d_p x d_m (positional) or d_x x d_m (self)
  Mat W_V;       // d_x x d_v
};

struct LayerParams {
  std::vector<HeadParams> heads;
  Mat W_O;       // (H*d_v) x d_o
  Mat W_1, b_1;  // (d_o+d_x) x hidden, 1 x hidden
  Mat W_2, b_2;  // hidden x d_x, 1 x d_x
};

// The positional matrix P is fixed to the identity and is not a parameter;
// it never appears here and is never touched by the optimizer.
struct ModelParams {
  Mat encoder;  // encoder_in x d_x
  Mat decoder;  // d_x x 1
  std::vector<LayerParams> layers;

  std::vector<Mat*> tensors();
  std::vector<const Mat*> tensors() const;
  std::vector<std::string> names() const;  // aligned with tensors()
  long parameter_count() const;
};

// Deterministic init: weights uniform in +-sqrt(1/fan_in), biases zero.
ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed);

// Tape handles for one training/eval step.
struct HeadVars {
  Var W_Q, W_K, W_V;
};
struct LayerVars {
  std::vector<HeadVars> heads;
  Var W_O, W_1, b_1, W_2, b_2;
};
struct ParamVars {
  Var encoder, decoder;
  std::vector<LayerVars> layers;
};
ParamVars leaf_params(Tape& t, const ModelParams& p, bool requires_grad);
std::vector<Var> flatten(const ParamVars& pv);  // order matches ModelParams::tensors()

// Attention matrices (and ReLU pre-activations) captured during a forward
// pass, for dumps and diagnostics.
struct ForwardTrace {
  std::vector<std::vector<Var>> attn;  // [layer][head]
  std::vector<Var> mlp_pre;            // [layer]
};

// Forward over a batch of same-length sequences stacked vertically: values is
// B x m with 1 <= m <= n. Returns per-row predictions ((B*(m+1)) x 1); the
// scratchpad rows are interleaved and excluded by the loss mask.
Var forward_batch(Tape& t, const ModelConfig& cfg, const ParamVars& pv, const Mat& values,
                  ForwardTrace* trace = nullptr);

// Target and mask layouts matching forward_batch's output rows.
Mat batch_targets(const Mat& targets);  // B x m -> (B*(m+1)) x 1 with scratchpad zeros
Mat batch_mask(int batch, int m);       // ones at value rows, zero at scratchpad rows

// Single-sequence convenience: encodes, runs all layers, decodes, drops the
// scratchpad row. Throws on empty input or length > n.
Vec model_forward(const ModelConfig& cfg, const ModelParams& p, const Vec& values);

// Attention matrices of a forward pass on one sequence, as plain values.
std::vector<std::vector<Mat>> attention_matrices(const ModelConfig& cfg, const ModelParams& p,
                                                 const Vec& values);

// End-to-end gradient check of the training loss against central finite
// differences, coordinate by coordinate over every parameter tensor.
// Coordinates whose +-step evaluations land on different ReLU activation
// patterns are skipped (the difference quotient is invalid across a kink)
// and counted in skipped_kinks.
struct GradCheckReport {
  double max_rel_err = 0.0;
  long checked = 0;
  long skipped_kinks = 0;
};
GradCheckReport fd_check_model(const ModelConfig& cfg, const ModelParams& params,
                               const Mat& values, const Mat& targets, double step);

// Versioned JSON checkpoint: {"schema": ..., "config": ..., "params": {name: {shape, data}}}.
void save_checkpoint(const std::string& path, const ModelConfig& cfg, const ModelParams& p);
std::pair<ModelConfig, ModelParams> load_checkpoint(const std::string& path);

}  // namespace posattn
