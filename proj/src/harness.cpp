#include "posattn/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <stdexcept>

#include "json.hpp"
#include "posattn/optimizer.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace posattn {

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
#endif
}

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kManifestSchema = "palab-manifest-v1";

// Round-trip exact double formatting shared by every CSV writer.
std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string metrics_row(int epoch, double train, double val) {
  return std::to_string(epoch) + "," + fmt(train) + "," + fmt(val) + "\n";
}

void write_atomic(const std::string& path, const std::string& body) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out << body;
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("cannot move into place: " + path);
}

// Group sample indices by sequence length so batches stay rectangular.
std::map<int, std::vector<int>> length_buckets(const std::vector<Sample>& samples) {
  std::map<int, std::vector<int>> buckets;
  for (size_t i = 0; i < samples.size(); ++i)
    buckets[static_cast<int>(samples[i].input.size())].push_back(static_cast<int>(i));
  return buckets;
}

void fill_batch(const std::vector<Sample>& samples, const std::vector<int>& idx, int start,
                int count, Mat& values, Mat& targets) {
  const int m = static_cast<int>(samples[idx[start]].input.size());
  values.resize(count, m);
  targets.resize(count, m);
  for (int r = 0; r < count; ++r) {
    const Sample& s = samples[idx[start + r]];
    values.row(r) = s.input.transpose();
    targets.row(r) = s.target.transpose();
  }
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + salt * 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

json config_json(const TrainConfig& tc) {
  return {
      {"seed", tc.seed},
      {"task", task_name(tc.task)},
      {"model",
       {{"n", tc.model.n},
        {"num_layers", tc.model.layers()},
        {"heads", tc.model.heads},
        {"d_x", tc.model.d_x},
        {"d_v", tc.model.d_v},
        {"d_o", tc.model.d_o},
        {"mlp_hidden", tc.model.mlp_hidden},
        {"attention", attention_name(tc.model.attention)}}},
      {"sampler",
       {{"train_samples", tc.train_samples},
        {"val_samples", tc.val_samples},
        {"range_bound", tc.range_bound},
        {"variable_length", tc.variable_length}}},
      {"optimizer",
       {{"algo", "adam"},
        {"lr", tc.lr0},
        {"lr_min", tc.lr_min},
        {"schedule", "cosine"},
        {"epochs", tc.epochs},
        {"batch_size", tc.batch_size}}},
  };
}

TrainConfig config_from_json(const json& j) {
  TrainConfig tc;
  tc.seed = j.at("seed").get<std::uint64_t>();
  tc.task = task_from_name(j.at("task").get<std::string>());
  const json& m = j.at("model");
  tc.model.n = m.at("n").get<int>();
  tc.model.num_layers = m.at("num_layers").get<int>();
  tc.model.heads = m.at("heads").get<int>();
  tc.model.d_x = m.at("d_x").get<int>();
  tc.model.d_v = m.at("d_v").get<int>();
  tc.model.d_o = m.at("d_o").get<int>();
  tc.model.mlp_hidden = m.at("mlp_hidden").get<int>();
  tc.model.attention = attention_from_name(m.at("attention").get<std::string>());
  const json& s = j.at("sampler");
  tc.train_samples = s.at("train_samples").get<int>();
  tc.val_samples = s.at("val_samples").get<int>();
  tc.range_bound = s.at("range_bound").get<double>();
  tc.variable_length = s.at("variable_length").get<bool>();
  const json& o = j.at("optimizer");
  tc.lr0 = o.at("lr").get<double>();
  tc.lr_min = o.at("lr_min").get<double>();
  tc.epochs = o.at("epochs").get<int>();
  tc.batch_size = o.at("batch_size").get<int>();
  return tc;
}

}  // namespace

double mean_mse(const ModelConfig& cfg, const ModelParams& p, const std::vector<Sample>& samples,
                int batch_size) {
  if (samples.empty()) throw std::invalid_argument("mean_mse: empty sample set");
  auto buckets = length_buckets(samples);
  double sq_sum = 0.0;
  long count = 0;
  Mat values, targets;
  for (const auto& [m, idx] : buckets) {
    for (int start = 0; start < static_cast<int>(idx.size()); start += batch_size) {
      const int bsz = std::min<int>(batch_size, static_cast<int>(idx.size()) - start);
      fill_batch(samples, idx, start, bsz, values, targets);
      Tape t;
      ParamVars pv = leaf_params(t, p, false);
      const Mat& pred = t.val(forward_batch(t, cfg, pv, values));
      for (int b = 0; b < bsz; ++b)
        for (int i = 0; i < m; ++i) {
          const double d = pred(b * (m + 1) + i, 0) - targets(b, i);
          sq_sum += d * d;
        }
      count += static_cast<long>(bsz) * m;
    }
  }
  return sq_sum / static_cast<double>(count);
}

RunManifest train(const TrainConfig& tc, const std::string& out_dir) {
  tc.model.validate();
  if (tc.epochs < 0 || tc.batch_size < 1 || tc.train_samples < 1 || tc.val_samples < 1)
    throw std::invalid_argument("train: invalid budget");
  fs::create_directories(out_dir);
  const auto t_start = std::chrono::steady_clock::now();

  SampleOptions so;
  so.n = tc.model.n;
  so.count = tc.train_samples;
  so.range_bound = tc.range_bound;
  so.variable_length = tc.variable_length;
  so.seed = tc.seed;
  TaskBatch train_set = sample_train(tc.task, so);
  SampleOptions vo = so;
  vo.count = tc.val_samples;
  vo.seed = mix_seed(tc.seed, 0x76616c);  // independent held-out stream
  TaskBatch val_set = sample_train(tc.task, vo);

  ModelParams params = init_params(tc.model, tc.seed);
  ModelParams best = params;
  std::vector<Mat*> ptrs = params.tensors();
  AdamState adam = make_adam_state(std::vector<const Mat*>(ptrs.begin(), ptrs.end()));

  RunManifest man;
  man.config = tc;
  man.status = "ok";
  man.checkpoint = "checkpoint.json";

  std::ofstream csv(out_dir + "/metrics.csv", std::ios::binary);
  if (!csv) throw std::runtime_error("cannot write metrics.csv under " + out_dir);
  csv << "epoch,train_mse,val_mse\n";
  auto record = [&](int epoch, double tr, double va) {
    man.train_mse.push_back(tr);
    man.val_mse.push_back(va);
    csv << metrics_row(epoch, tr, va);
    csv.flush();
  };

  const double tr0 = mean_mse(tc.model, params, train_set.samples, tc.batch_size);
  const double va0 = mean_mse(tc.model, params, val_set.samples, tc.batch_size);
  record(0, tr0, va0);
  man.best_epoch = 0;
  man.best_val_mse = va0;
  save_checkpoint(out_dir + "/checkpoint.json", tc.model, best);
  int saved_best = 0;

  auto buckets = length_buckets(train_set.samples);
  std::mt19937_64 shuffle_rng(mix_seed(tc.seed, 0x73687566));

  bool failed = false;
  Mat values, targets;
  for (int epoch = 1; epoch <= tc.epochs && !failed; ++epoch) {
    const double lr = cosine_lr(epoch - 1, tc.epochs, tc.lr0, tc.lr_min);
    for (auto& [m, idx] : buckets) std::shuffle(idx.begin(), idx.end(), shuffle_rng);
    double sq_sum = 0.0;
    long count = 0;
    try {
      for (auto& [m, idx] : buckets) {
        for (int start = 0; start < static_cast<int>(idx.size()) && !failed; start += tc.batch_size) {
          const int bsz = std::min<int>(tc.batch_size, static_cast<int>(idx.size()) - start);
          fill_batch(train_set.samples, idx, start, bsz, values, targets);
          Tape t;
          t.check_finite = false;  // divergence is caught on the loss scalar below
          ParamVars pv = leaf_params(t, params, true);
          Var pred = forward_batch(t, tc.model, pv, values);
          Var loss = mse_masked(t, pred, batch_targets(targets), batch_mask(bsz, m));
          const double L = t.val(loss)(0, 0);
          if (!std::isfinite(L)) {
            failed = true;
            break;
          }
          t.backward(loss);
          std::vector<const Mat*> grads;
          grads.reserve(ptrs.size());
          for (Var v : flatten(pv)) grads.push_back(&t.grad(v));
          adam_step(ptrs, grads, adam, lr);
          sq_sum += L * static_cast<double>(bsz) * m;
          count += static_cast<long>(bsz) * m;
        }
      }
    } catch (const numeric_error&) {
      failed = true;
    }
    if (failed) break;
    const double tr = sq_sum / static_cast<double>(count);
    double va = std::numeric_limits<double>::quiet_NaN();
    try {
      va = mean_mse(tc.model, params, val_set.samples, tc.batch_size);
    } catch (const numeric_error&) {
    }
    if (!std::isfinite(va)) {
      failed = true;
      break;
    }
    record(epoch, tr, va);
    if (va < man.best_val_mse) {
      man.best_val_mse = va;
      man.best_epoch = epoch;
      best = params;
    }
    // periodic safety write so long runs survive interruption
    if (epoch % 100 == 0 && man.best_epoch > saved_best) {
      save_checkpoint(out_dir + "/checkpoint.json", tc.model, best);
      saved_best = man.best_epoch;
    }
  }

  if (failed) man.status = "failed";
  if (man.best_epoch > saved_best || saved_best == 0)
    save_checkpoint(out_dir + "/checkpoint.json", tc.model, best);
  man.wall_clock_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  save_manifest(out_dir + "/manifest.json", man);
  return man;
}

std::vector<OodRow> ood_eval(const ModelConfig& cfg, const ModelParams& p, TaskKind task,
                             const std::vector<int>& scales, int samples_per_scale,
                             double range_bound, std::uint64_t seed) {
  if (samples_per_scale < 1) throw std::invalid_argument("ood_eval: need at least one sample");
  std::vector<OodRow> rows;
  rows.reserve(scales.size());
  for (int c : scales) {
    if (c < 1) throw std::invalid_argument("ood_eval: scale must be >= 1");
    SampleOptions opt;
    opt.n = cfg.n;
    opt.count = samples_per_scale;
    opt.range_bound = range_bound;
    opt.seed = mix_seed(seed, static_cast<std::uint64_t>(c));
    TaskBatch batch = c == 1 ? sample_train(task, opt)
                             : sample_test_ood(task, static_cast<double>(c), opt);
    rows.push_back({c, mean_mse(cfg, p, batch.samples), samples_per_scale, opt.seed});
  }
  return rows;
}

std::vector<OodRow> ood_sweep(const std::string& run_dir, const std::vector<int>& scales,
                              int samples_per_scale, std::uint64_t seed) {
  RunManifest man = load_manifest(run_dir + "/manifest.json");
  auto [cfg, params] = load_checkpoint(run_dir + "/" + man.checkpoint);
  std::vector<OodRow> rows =
      ood_eval(cfg, params, man.config.task, scales, samples_per_scale, man.config.range_bound, seed);
  write_ood_csv(run_dir + "/ood.csv", rows);
  man.ood = rows;
  save_manifest(run_dir + "/manifest.json", man);
  return rows;
}

void save_manifest(const std::string& path, const RunManifest& m) {
  json j = config_json(m.config);
  j["schema"] = kManifestSchema;
  j["version"] = m.version;
  j["status"] = m.status;
  j["metrics"] = {{"train_mse", m.train_mse}, {"val_mse", m.val_mse}};
  j["best"] = {{"epoch", m.best_epoch}, {"val_mse", m.best_val_mse}};
  json ood = json::array();
  for (const OodRow& r : m.ood)
    ood.push_back({{"scale", r.scale}, {"mse", r.mse}, {"n_samples", r.n_samples}, {"seed", r.seed}});
  j["ood"] = std::move(ood);
  j["checkpoint"] = m.checkpoint;
  j["wall_clock_sec"] = m.wall_clock_sec;
  write_atomic(path, j.dump(2) + "\n");
}

RunManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest: " + path);
  json j;
  in >> j;
  if (j.value("schema", "") != kManifestSchema)
    throw std::runtime_error("manifest " + path + " has unknown schema");
  RunManifest m;
  m.config = config_from_json(j);
  m.version = j.at("version").get<std::string>();
  m.status = j.at("status").get<std::string>();
  m.train_mse = j.at("metrics").at("train_mse").get<std::vector<double>>();
  m.val_mse = j.at("metrics").at("val_mse").get<std::vector<double>>();
  m.best_epoch = j.at("best").at("epoch").get<int>();
  m.best_val_mse = j.at("best").at("val_mse").get<double>();
  for (const json& r : j.at("ood"))
    m.ood.push_back({r.at("scale").get<int>(), r.at("mse").get<double>(),
                     r.at("n_samples").get<int>(), r.at("seed").get<std::uint64_t>()});
  m.checkpoint = j.at("checkpoint").get<std::string>();
  m.wall_clock_sec = j.at("wall_clock_sec").get<double>();
  return m;
}

void write_metrics_csv(const std::string& path, const std::vector<double>& train_mse,
                       const std::vector<double>& val_mse) {
  if (train_mse.size() != val_mse.size())
    throw std::invalid_argument("write_metrics_csv: column length mismatch");
  std::string body = "epoch,train_mse,val_mse\n";
  for (size_t e = 0; e < train_mse.size(); ++e)
    body += metrics_row(static_cast<int>(e), train_mse[e], val_mse[e]);
  write_atomic(path, body);
}

void write_ood_csv(const std::string& path, const std::vector<OodRow>& rows) {
  std::string body = "scale,mse,n_samples,seed\n";
  for (const OodRow& r : rows)
    body += std::to_string(r.scale) + "," + fmt(r.mse) + "," + std::to_string(r.n_samples) + "," +
            std::to_string(r.seed) + "\n";
  write_atomic(path, body);
}

}  // namespace posattn
