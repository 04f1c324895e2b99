#include "posattn/model.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <stdexcept>

#include "json.hpp"

namespace posattn {

const char* attention_name(AttentionKind k) {
  switch (k) {
    case AttentionKind::positional: return "positional";
    case AttentionKind::self_attn: return "self";
    case AttentionKind::self_rope: return "self_rope";
  }
  throw std::runtime_error("attention_name: bad kind");
}

AttentionKind attention_from_name(const std::string& name) {
  for (AttentionKind k :
       {AttentionKind::positional, AttentionKind::self_attn, AttentionKind::self_rope})
    if (name == attention_name(k)) return k;
  if (name == "self_attn" || name == "standard") return AttentionKind::self_attn;
  throw std::runtime_error("unknown attention kind: " + name);
}

int ModelConfig::layers() const {
  if (num_layers > 0) return num_layers;
  int l = 0;
  while ((1 << l) < n) ++l;  // ceil(log2 n)
  return l + 1;
}

void ModelConfig::validate() const {
  if (n < 1) throw std::runtime_error("config: n must be >= 1");
  if (heads < 1) throw std::runtime_error("config: heads must be >= 1");
  if (d_x < 1 || d_v < 1 || d_o < 1 || mlp_hidden < 1)
    throw std::runtime_error("config: widths must be positive");
  if (attention == AttentionKind::self_rope && d_x % 2 != 0)
    throw std::runtime_error("config: rotary attention needs an even d_x");
}

namespace {

Mat uniform_init(int rows, int cols, std::mt19937_64& rng) {
  const double bound = std::sqrt(1.0 / rows);  // fan_in is the input dimension
  std::uniform_real_distribution<double> u(-bound, bound);
  Mat m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = u(rng);
  return m;
}

}  // namespace

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  ModelParams p;
  p.encoder = uniform_init(cfg.encoder_in(), cfg.d_x, rng);
  const int qk_rows = cfg.attention == AttentionKind::positional ? cfg.d_p() : cfg.d_x;
  p.layers.resize(cfg.layers());
  for (auto& layer : p.layers) {
    layer.heads.resize(cfg.heads);
    for (auto& h : layer.heads) {
      h.W_Q = uniform_init(qk_rows, cfg.d_m(), rng);
      h.W_K = uniform_init(qk_rows, cfg.d_m(), rng);
      h.W_V = uniform_init(cfg.d_x, cfg.d_v, rng);
    }
    layer.W_O = uniform_init(cfg.heads * cfg.d_v, cfg.d_o, rng);
    layer.W_1 = uniform_init(cfg.d_o + cfg.d_x, cfg.mlp_hidden, rng);
    layer.b_1 = Mat::Zero(1, cfg.mlp_hidden);
    layer.W_2 = uniform_init(cfg.mlp_hidden, cfg.d_x, rng);
    layer.b_2 = Mat::Zero(1, cfg.d_x);
  }
  p.decoder = uniform_init(cfg.d_x, 1, rng);
  return p;
}

std::vector<Mat*> ModelParams::tensors() {
  std::vector<Mat*> out;
  out.push_back(&encoder);
  for (auto& l : layers) {
    for (auto& h : l.heads) {
      out.push_back(&h.W_Q);
      out.push_back(&h.W_K);
      out.push_back(&h.W_V);
    }
    out.push_back(&l.W_O);
    out.push_back(&l.W_1);
    out.push_back(&l.b_1);
    out.push_back(&l.W_2);
    out.push_back(&l.b_2);
  }
  out.push_back(&decoder);
  return out;
}

std::vector<const Mat*> ModelParams::tensors() const {
  auto mut = const_cast<ModelParams*>(this)->tensors();
  return std::vector<const Mat*>(mut.begin(), mut.end());
}

std::vector<std::string> ModelParams::names() const {
  std::vector<std::string> out;
  out.push_back("encoder");
  for (size_t l = 0; l < layers.size(); ++l) {
    const std::string lp = "layer." + std::to_string(l);
    for (size_t h = 0; h < layers[l].heads.size(); ++h) {
      const std::string hp = lp + ".head." + std::to_string(h);
      out.push_back(hp + ".W_Q");
      out.push_back(hp + ".W_K");
      out.push_back(hp + ".W_V");
    }
    out.push_back(lp + ".W_O");
    out.push_back(lp + ".mlp.W_1");
    out.push_back(lp + ".mlp.b_1");
    out.push_back(lp + ".mlp.W_2");
    out.push_back(lp + ".mlp.b_2");
  }
  out.push_back("decoder");
  return out;
}

long ModelParams::parameter_count() const {
  long total = 0;
  for (const Mat* m : tensors()) total += m->size();
  return total;
}

ParamVars leaf_params(Tape& t, const ModelParams& p, bool requires_grad) {
  ParamVars pv;
  pv.encoder = t.leaf(p.encoder, requires_grad);
  pv.layers.resize(p.layers.size());
  for (size_t l = 0; l < p.layers.size(); ++l) {
    for (const auto& h : p.layers[l].heads)
      pv.layers[l].heads.push_back({t.leaf(h.W_Q, requires_grad), t.leaf(h.W_K, requires_grad),
                                    t.leaf(h.W_V, requires_grad)});
    pv.layers[l].W_O = t.leaf(p.layers[l].W_O, requires_grad);
    pv.layers[l].W_1 = t.leaf(p.layers[l].W_1, requires_grad);
    pv.layers[l].b_1 = t.leaf(p.layers[l].b_1, requires_grad);
    pv.layers[l].W_2 = t.leaf(p.layers[l].W_2, requires_grad);
    pv.layers[l].b_2 = t.leaf(p.layers[l].b_2, requires_grad);
  }
  pv.decoder = t.leaf(p.decoder, requires_grad);
  return pv;
}

std::vector<Var> flatten(const ParamVars& pv) {
  std::vector<Var> out;
  out.push_back(pv.encoder);
  for (const auto& l : pv.layers) {
    for (const auto& h : l.heads) {
      out.push_back(h.W_Q);
      out.push_back(h.W_K);
      out.push_back(h.W_V);
    }
    out.push_back(l.W_O);
    out.push_back(l.W_1);
    out.push_back(l.b_1);
    out.push_back(l.W_2);
    out.push_back(l.b_2);
  }
  out.push_back(pv.decoder);
  return out;
}

namespace {

// Row indices into the identity positional matrix for a length-m sequence:
// positions 0..m-1 plus the scratchpad at index n (the (n+1)-th one-hot).
std::vector<int> position_indices(int m, int n) {
  std::vector<int> idx(m + 1);
  for (int i = 0; i < m; ++i) idx[i] = i;
  idx[m] = n;
  return idx;
}

// Encoder input rows for a batch: each sample contributes its m values plus a
// zero scratchpad row. Standard attention also gets the one-hot position.
Mat assemble_input(const ModelConfig& cfg, const Mat& values) {
  const int B = static_cast<int>(values.rows());
  const int m = static_cast<int>(values.cols());
  const int k = m + 1;
  Mat in = Mat::Zero(B * k, cfg.encoder_in());
  const auto idx = position_indices(m, cfg.n);
  for (int b = 0; b < B; ++b) {
    for (int j = 0; j < m; ++j) in(b * k + j, 0) = values(b, j);
    if (cfg.attention == AttentionKind::self_attn)
      for (int j = 0; j < k; ++j) in(b * k + j, 1 + idx[j]) = 1.0;
  }
  return in;
}

}  // namespace

Var forward_batch(Tape& t, const ModelConfig& cfg, const ParamVars& pv, const Mat& values,
                  ForwardTrace* trace) {
  cfg.validate();
  const int B = static_cast<int>(values.rows());
  const int m = static_cast<int>(values.cols());
  if (B < 1 || m < 1) throw std::runtime_error("forward: empty input");
  if (m > cfg.n)
    throw std::runtime_error("forward: sequence length " + std::to_string(m) +
                             " exceeds configured n = " + std::to_string(cfg.n));
  const int k = m + 1;
  const auto idx = position_indices(m, cfg.n);

  Var X = matmul(t, t.leaf(assemble_input(cfg, values)), pv.encoder);
  if (trace) {
    trace->attn.assign(pv.layers.size(), {});
    trace->mlp_pre.clear();
  }

  for (size_t l = 0; l < pv.layers.size(); ++l) {
    const LayerVars& lv = pv.layers[l];
    Var heads_out;  // (B*k) x (H*d_v)
    for (size_t h = 0; h < lv.heads.size(); ++h) {
      Var V = matmul(t, X, lv.heads[h].W_V);
      Var head;
      if (cfg.attention == AttentionKind::positional) {
        // P is the identity, so P*W is a row selection of W; constant in X.
        Var Q = gather_rows(t, lv.heads[h].W_Q, idx);
        Var K = gather_rows(t, lv.heads[h].W_K, idx);
        Var A = softmax_rows(t, matmul(t, Q, transpose(t, K)));
        if (trace) trace->attn[l].push_back(A);
        head = attend_shared(t, A, V, k);
      } else {
        Var Q = matmul(t, X, lv.heads[h].W_Q);
        Var K = matmul(t, X, lv.heads[h].W_K);
        if (cfg.attention == AttentionKind::self_rope) {
          Q = rope_rows(t, Q, idx);
          K = rope_rows(t, K, idx);
        }
        Var A = softmax_rows(t, block_outer(t, Q, K, k));
        if (trace) trace->attn[l].push_back(A);
        head = attend_blocks(t, A, V, k);
      }
      heads_out = (h == 0) ? head : concat_cols(t, heads_out, head);
    }
    Var O = matmul(t, heads_out, lv.W_O);
    Var cat = concat_cols(t, O, X);
    Var pre = add_rowvec(t, matmul(t, cat, lv.W_1), lv.b_1);
    if (trace) trace->mlp_pre.push_back(pre);
    X = add_rowvec(t, matmul(t, relu(t, pre), lv.W_2), lv.b_2);
  }
  return matmul(t, X, pv.decoder);
}

Mat batch_targets(const Mat& targets) {
  const int B = static_cast<int>(targets.rows());
  const int m = static_cast<int>(targets.cols());
  Mat out = Mat::Zero(B * (m + 1), 1);
  for (int b = 0; b < B; ++b)
    for (int j = 0; j < m; ++j) out(b * (m + 1) + j, 0) = targets(b, j);
  return out;
}

Mat batch_mask(int batch, int m) {
  Mat mask = Mat::Ones(batch * (m + 1), 1);
  for (int b = 0; b < batch; ++b) mask(b * (m + 1) + m, 0) = 0.0;
  return mask;
}

Vec model_forward(const ModelConfig& cfg, const ModelParams& p, const Vec& values) {
  if (values.size() == 0) throw std::runtime_error("forward: empty input");
  Tape t;
  ParamVars pv = leaf_params(t, p, false);
  Mat row = values.transpose();
  Var pred = forward_batch(t, cfg, pv, row);
  return t.val(pred).col(0).head(values.size());
}

std::vector<std::vector<Mat>> attention_matrices(const ModelConfig& cfg, const ModelParams& p,
                                                 const Vec& values) {
  Tape t;
  ParamVars pv = leaf_params(t, p, false);
  ForwardTrace trace;
  Mat row = values.transpose();
  forward_batch(t, cfg, pv, row, &trace);
  std::vector<std::vector<Mat>> out(trace.attn.size());
  for (size_t l = 0; l < trace.attn.size(); ++l)
    for (Var a : trace.attn[l]) out[l].push_back(t.val(a));
  return out;
}

// ---- gradient check ---------------------------------------------------------

namespace {

using ReluPattern = std::vector<Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>>;

// Boolean ReLU firing pattern of every MLP pre-activation in a trace.
ReluPattern relu_pattern(const Tape& t, const ForwardTrace& trace) {
  ReluPattern out;
  out.reserve(trace.mlp_pre.size());
  for (Var v : trace.mlp_pre) out.push_back(t.val(v).array() > 0.0);
  return out;
}

}  // namespace

GradCheckReport fd_check_model(const ModelConfig& cfg, const ModelParams& params,
                               const Mat& values, const Mat& targets, double step) {
  const Mat tgt = batch_targets(targets);
  const Mat mask = batch_mask(static_cast<int>(values.rows()), static_cast<int>(values.cols()));

  ModelParams work = params;
  std::vector<Mat*> tensors = work.tensors();

  using Pattern = ReluPattern;
  auto eval = [&](Pattern* pattern) {
    Tape t;
    ParamVars pv = leaf_params(t, work, false);
    ForwardTrace trace;
    Var pred = forward_batch(t, cfg, pv, values, &trace);
    double v = t.val(mse_masked(t, pred, tgt, mask))(0, 0);
    if (pattern) *pattern = relu_pattern(t, trace);
    return v;
  };
  auto same_pattern = [](const Pattern& a, const Pattern& b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i)
      if (a[i].rows() != b[i].rows() || a[i].cols() != b[i].cols() || (a[i] != b[i]).any())
        return false;
    return true;
  };

  // Analytic pass: gradients of every parameter tensor, plus the base
  // activation pattern for the kink guard.
  std::vector<Mat> grads;
  Pattern base_pat;
  {
    Tape t;
    ParamVars pv = leaf_params(t, work, true);
    ForwardTrace trace;
    Var pred = forward_batch(t, cfg, pv, values, &trace);
    Var loss = mse_masked(t, pred, tgt, mask);
    t.backward(loss);
    base_pat = relu_pattern(t, trace);
    for (Var v : flatten(pv)) grads.push_back(t.grad(v));
  }

  GradCheckReport rep;
  for (size_t i = 0; i < tensors.size(); ++i) {
    Mat& m = *tensors[i];
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        const double keep = m(r, c);
        Pattern up_pat, dn_pat;
        m(r, c) = keep + step;
        const double up = eval(&up_pat);
        m(r, c) = keep - step;
        const double dn = eval(&dn_pat);
        m(r, c) = keep;
        if (!same_pattern(up_pat, base_pat) || !same_pattern(dn_pat, base_pat)) {
          rep.skipped_kinks++;
          continue;
        }
        const double fd = (up - dn) / (2.0 * step);
        const double a = grads[i](r, c);
        const double rel = std::abs(a - fd) / std::max(1.0, std::abs(a));
        rep.checked++;
        if (rel > rep.max_rel_err) rep.max_rel_err = rel;
      }
    }
  }
  return rep;
}

// ---- checkpoint io ----------------------------------------------------------

namespace {

constexpr const char* kSchema = "palab-checkpoint-v1";

nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"n", c.n},           {"num_layers", c.layers()}, {"heads", c.heads},
          {"d_x", c.d_x},       {"d_v", c.d_v},             {"d_o", c.d_o},
          {"mlp_hidden", c.mlp_hidden}, {"attention", attention_name(c.attention)}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n = j.at("n").get<int>();
  c.num_layers = j.at("num_layers").get<int>();
  c.heads = j.at("heads").get<int>();
  c.d_x = j.at("d_x").get<int>();
  c.d_v = j.at("d_v").get<int>();
  c.d_o = j.at("d_o").get<int>();
  c.mlp_hidden = j.at("mlp_hidden").get<int>();
  c.attention = attention_from_name(j.at("attention").get<std::string>());
  return c;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelConfig& cfg, const ModelParams& p) {
  nlohmann::json j;
  j["schema"] = kSchema;
  j["config"] = config_to_json(cfg);
  nlohmann::json params = nlohmann::json::object();
  const auto names = p.names();
  const auto tensors = p.tensors();
  for (size_t i = 0; i < names.size(); ++i) {
    const Mat& m = *tensors[i];
    params[names[i]] = {
        {"shape", {m.rows(), m.cols()}},
        {"data", std::vector<double>(m.data(), m.data() + m.size())},  // row-major
    };
  }
  j["params"] = std::move(params);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + tmp);
    out << j.dump();
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("cannot move checkpoint into place: " + path);
}

std::pair<ModelConfig, ModelParams> load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  nlohmann::json j;
  in >> j;
  if (j.at("schema").get<std::string>() != kSchema)
    throw std::runtime_error("checkpoint schema mismatch in " + path + ": " +
                             j.at("schema").get<std::string>());
  ModelConfig cfg = config_from_json(j.at("config"));
  ModelParams p = init_params(cfg, 0);  // correct shapes, values overwritten below
  const auto names = p.names();
  auto tensors = p.tensors();
  for (size_t i = 0; i < names.size(); ++i) {
    const auto& entry = j.at("params").at(names[i]);
    const auto shape = entry.at("shape").get<std::vector<long>>();
    const auto data = entry.at("data").get<std::vector<double>>();
    Mat& m = *tensors[i];
    if (shape.size() != 2 || shape[0] != m.rows() || shape[1] != m.cols())
      throw std::runtime_error("checkpoint tensor " + names[i] + " has unexpected shape");
    std::copy(data.begin(), data.end(), m.data());
  }
  return {cfg, p};
}

}  // namespace posattn
