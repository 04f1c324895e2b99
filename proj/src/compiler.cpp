#include "posattn/compiler.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace posattn {

namespace {

Mat row_softmax(const Mat& logits) {
  Mat a(logits.rows(), logits.cols());
  for (int i = 0; i < logits.rows(); ++i) {
    const Vec row = logits.row(i).transpose();
    const Vec e = (row.array() - row.maxCoeff()).exp();
    a.row(i) = (e / e.sum()).transpose();
  }
  return a;
}

void check_supported(const PCOCInstance& inst) {
  for (int r = 0; r < inst.rounds; ++r)
    for (int i = 0; i < inst.machines; ++i)
      switch (inst.local_fns[r][i]) {
        case LocalFn::identity:
        case LocalFn::zero:
        case LocalFn::copy1:
        case LocalFn::min2:
        case LocalFn::max2:
        case LocalFn::sum2:
          break;
        default:
          throw std::runtime_error("compile: machine " + std::to_string(i) + ", round " +
                                   std::to_string(r) + ": unsupported local function");
      }
}

// received[i][z]: machine i gets slot z delivered this round
std::vector<std::vector<bool>> received_slots(const PCOCInstance& inst, int round) {
  std::vector<std::vector<bool>> rec(inst.machines, std::vector<bool>(inst.mem_size, false));
  for (int i = 0; i < inst.machines; ++i)
    for (const RoutingEntry& e : inst.oracle[round][i])
      for (int z : e.positions) rec[i][z] = true;
  return rec;
}

void write_atomic(const std::string& path, const std::string& body) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out << body;
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("cannot move into place: " + path);
}

constexpr const char* kSidecarSchema = "palab-compiled-v1";

}  // namespace

HardmaxParams hardmax_params(const Mat& pattern, double eps) {
  const int n = static_cast<int>(pattern.rows());
  if (n < 1 || pattern.cols() != n)
    throw std::invalid_argument("hardmax_params: pattern must be square and nonempty");
  if (!(eps > 0.0 && eps < 1.0))
    throw std::invalid_argument("hardmax_params: eps must be in (0, 1)");
  for (int i = 0; i < n; ++i) {
    int ones = 0;
    for (int j = 0; j < n; ++j) {
      const double v = pattern(i, j);
      if (v != 0.0 && v != 1.0)
        throw std::invalid_argument("hardmax_params: pattern row " + std::to_string(i) +
                                    " is not binary");
      ones += v == 1.0;
    }
    if (ones != 1)
      throw std::invalid_argument("hardmax_params: pattern row " + std::to_string(i) +
                                  " needs exactly one 1 (unique hardmax), found " +
                                  std::to_string(ones));
  }
  HardmaxParams hp;
  hp.temperature = 0.5 * std::log(n / eps);
  hp.W_Q = hp.temperature * (2.0 * pattern.array() - 1.0).matrix();
  hp.W_K = Mat::Identity(n, n);
  return hp;
}

ReluMlp relu_min_mlp() {
  ReluMlp m;
  m.W_1.resize(2, 4);
  m.W_1 << 1, -1, 1, -1,   // unit inputs: a+b, -a-b, a-b, b-a
           1, -1, -1, 1;
  m.W_2.resize(4, 1);
  m.W_2 << 0.5, -0.5, -0.5, -0.5;
  return m;
}

ReluMlp relu_max_mlp() {
  ReluMlp m = relu_min_mlp();
  m.W_2 << 0.5, -0.5, 0.5, 0.5;
  return m;
}

double relu_mlp_eval(const ReluMlp& m, double a, double b) {
  Eigen::RowVector2d x(a, b);
  return ((x * m.W_1).cwiseMax(0.0) * m.W_2).value();
}

ModelConfig compiled_config(const PCOCInstance& inst) {
  ModelConfig cfg;
  cfg.n = inst.machines;
  cfg.num_layers = inst.rounds;  // stays 0 for the degenerate zero-round case
  cfg.heads = inst.mem_size;
  cfg.d_x = inst.mem_size + 1;
  cfg.d_v = inst.mem_size + 1;
  cfg.d_o = inst.mem_size;
  cfg.mlp_hidden = 4;  // placeholder width; the exact table stands in for the MLP
  cfg.attention = AttentionKind::positional;
  return cfg;
}

Mat routing_pattern(const PCOCInstance& inst, int round, int head) {
  if (round < 0 || round >= inst.rounds) throw std::invalid_argument("routing_pattern: bad round");
  if (head < 0 || head >= inst.mem_size) throw std::invalid_argument("routing_pattern: bad head");
  const int n = inst.machines + 1;  // + sink
  Mat pattern = Mat::Zero(n, n);
  std::vector<bool> used(inst.machines, false);
  for (int dest = 0; dest < inst.machines; ++dest)
    for (const RoutingEntry& e : inst.oracle[round][dest])
      for (int z : e.positions)
        if (z == head) {
          pattern(dest, e.source) = 1.0;
          used[e.source] = true;
        }
  for (int j = 0; j < inst.machines; ++j)
    if (!used[j]) pattern(n - 1, j) = 1.0;  // sink collects unused sources
  pattern(n - 1, n - 1) = 1.0;              // the sink itself is never used
  return pattern;
}

LayerParams compile_round(const PCOCInstance& inst, int round, double eps) {
  ValidationReport rep = validate(inst);
  if (!rep.ok) throw std::invalid_argument("compile_round: invalid instance: " + rep.message);
  if (!(eps > 0.0 && eps < 1.0))
    throw std::invalid_argument("compile_round: eps must be in (0, 1)");
  const int s = inst.mem_size;
  const int n = inst.machines + 1;
  const double temperature = 0.5 * std::log(n / eps);

  LayerParams layer;
  layer.heads.resize(s);
  for (int h = 0; h < s; ++h) {
    const Mat pattern = routing_pattern(inst, round, h);
    layer.heads[h].W_Q = temperature * (2.0 * pattern.array() - 1.0).matrix();
    layer.heads[h].W_K = Mat::Identity(n, n);
    layer.heads[h].W_V = Mat::Identity(s + 1, s + 1);
  }
  layer.W_O = Mat::Zero(s * (s + 1), s);
  for (int h = 0; h < s; ++h) layer.W_O(h * (s + 1) + h, h) = 1.0;  // head h -> slot column h
  layer.W_1 = Mat::Zero(s + (s + 1), 4);
  layer.b_1 = Mat::Zero(1, 4);
  layer.W_2 = Mat::Zero(4, s + 1);
  layer.b_2 = Mat::Zero(1, s + 1);
  return layer;
}

CompiledNetwork compile(const PCOCInstance& inst, double eps) {
  ValidationReport rep = validate(inst);
  if (!rep.ok) throw std::invalid_argument("compile: invalid instance: " + rep.message);
  if (!(eps > 0.0 && eps < 1.0)) throw std::invalid_argument("compile: eps must be in (0, 1)");
  check_supported(inst);

  CompiledNetwork net;
  net.cfg = compiled_config(inst);
  net.instance = inst;
  net.eps = eps;
  net.temperature = 0.5 * std::log((inst.machines + 1) / eps);
  net.params.encoder = Mat::Zero(net.cfg.encoder_in(), net.cfg.d_x);
  net.params.decoder = Mat::Zero(net.cfg.d_x, 1);
  net.params.layers.reserve(inst.rounds);
  for (int r = 0; r < inst.rounds; ++r) net.params.layers.push_back(compile_round(inst, r, eps));
  return net;
}

Mat compiled_input(const PCOCInstance& inst, const Vec& input) {
  if (input.size() != inst.machines)
    throw std::invalid_argument("compiled_input: expected one scalar per machine");
  const int s = inst.mem_size;
  Mat x = Mat::Zero(inst.machines + 1, s + 1);
  for (int i = 0; i < inst.machines; ++i)
    for (int z : inst.input_positions) x(i, z) = input(i);
  for (int i = 0; i <= inst.machines; ++i) x(i, s) = (i + 1.0) / (inst.machines + 1.0);
  return x;
}

std::vector<Mat> compiled_states(const CompiledNetwork& net, const Vec& input) {
  const PCOCInstance& inst = net.instance;
  const int s = inst.mem_size;
  const int n = inst.machines + 1;
  Mat x = compiled_input(inst, input);

  std::vector<Mat> states;
  states.reserve(inst.rounds);
  for (int r = 0; r < inst.rounds; ++r) {
    const LayerParams& layer = net.params.layers.at(r);
    Mat concat(n, s * (s + 1));
    for (int h = 0; h < s; ++h) {
      const HeadParams& head = layer.heads[h];
      const Mat attn = row_softmax(head.W_Q * head.W_K.transpose());
      concat.middleCols(h * (s + 1), s + 1) = attn * (x * head.W_V);
    }
    const Mat attn_out = concat * layer.W_O;  // n x s, column z = received slot z

    // Exact per-row table in place of the MLP: mask slots the oracle did not
    // deliver (the simulator reads them as 0), apply the machine's local
    // function, and carry the identifier over from the residual.
    const auto rec = received_slots(inst, r);
    Mat next = Mat::Zero(n, s + 1);
    for (int i = 0; i < n; ++i) {
      Vec mem = Vec::Zero(s);
      if (i < inst.machines) {
        for (int z = 0; z < s; ++z)
          if (rec[i][z]) mem(z) = attn_out(i, z);
        mem = local_fn_apply(inst.local_fns[r][i], mem);
      }
      next.row(i).head(s) = mem.transpose();
      next(i, s) = x(i, s);
    }
    x = std::move(next);
    states.push_back(x);
  }
  return states;
}

Mat compiled_forward(const CompiledNetwork& net, const Vec& input) {
  const std::vector<Mat> states = compiled_states(net, input);
  const Mat& last = states.empty() ? compiled_input(net.instance, input) : states.back();
  return last.topLeftCorner(net.instance.machines, net.instance.mem_size);
}

double default_verify_tol(double eps, int mem_size, int rounds) {
  return 1e3 * eps * mem_size * rounds;
}

VerifyReport verify(const CompiledNetwork& net, int trials, double tol, std::uint64_t seed,
                    double range) {
  const PCOCInstance& inst = net.instance;
  VerifyReport report;
  report.trials = trials;
  report.tol = tol >= 0.0 ? tol : default_verify_tol(net.eps, inst.mem_size, inst.rounds);
  report.round_max_dev.assign(inst.rounds, 0.0);

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-range, range);
  for (int t = 0; t < trials; ++t) {
    Vec x(inst.machines);
    for (int i = 0; i < inst.machines; ++i) x(i) = dist(rng);
    std::vector<Mat> sim_states;
    const Mat sim_final = run(inst, x, nullptr, &sim_states);
    const std::vector<Mat> net_states = compiled_states(net, x);
    for (int r = 0; r < inst.rounds; ++r) {
      const Mat block = net_states[r].topLeftCorner(inst.machines, inst.mem_size);
      const double dev = (block - sim_states[r]).cwiseAbs().maxCoeff();
      report.round_max_dev[r] = std::max(report.round_max_dev[r], dev);
    }
    const Mat& last_state = net_states.empty() ? compiled_input(inst, x) : net_states.back();
    const Mat final_block = last_state.topLeftCorner(inst.machines, inst.mem_size);
    report.final_max_dev =
        std::max(report.final_max_dev, (final_block - sim_final).cwiseAbs().maxCoeff());
  }
  report.pass = report.final_max_dev <= report.tol;
  for (double d : report.round_max_dev) report.pass = report.pass && d <= report.tol;
  return report;
}

void save_compiled(const CompiledNetwork& net, const std::string& checkpoint_path,
                   const std::string& sidecar_path) {
  if (net.instance.rounds < 1)
    throw std::invalid_argument("save_compiled: zero-round network has no layers to serialize");
  save_checkpoint(checkpoint_path, net.cfg, net.params);
  nlohmann::json j;
  j["schema"] = kSidecarSchema;
  j["eps"] = net.eps;
  j["temperature"] = net.temperature;
  j["instance"] = instance_to_json(net.instance);
  write_atomic(sidecar_path, j.dump(2) + "\n");
}

CompiledNetwork load_compiled(const std::string& checkpoint_path, const std::string& sidecar_path) {
  std::ifstream in(sidecar_path);
  if (!in) throw std::runtime_error("cannot open sidecar: " + sidecar_path);
  nlohmann::json j;
  in >> j;
  if (j.at("schema").get<std::string>() != kSidecarSchema)
    throw std::runtime_error("sidecar schema mismatch in " + sidecar_path);

  CompiledNetwork net;
  net.instance = instance_from_json(j.at("instance"));
  net.eps = j.at("eps").get<double>();
  net.temperature = j.at("temperature").get<double>();
  auto [cfg, params] = load_checkpoint(checkpoint_path);
  const ModelConfig want = compiled_config(net.instance);
  if (cfg.n != want.n || cfg.heads != want.heads || cfg.d_x != want.d_x || cfg.d_v != want.d_v ||
      cfg.d_o != want.d_o || cfg.attention != want.attention ||
      static_cast<int>(params.layers.size()) != net.instance.rounds)
    throw std::runtime_error("checkpoint shape does not match the sidecar instance");
  net.cfg = cfg;
  net.params = std::move(params);
  return net;
}

}  // namespace posattn
