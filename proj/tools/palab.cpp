// palab: train positional-attention models, sweep OOD scales, and inspect
// the compiled constructions from the command line.
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "posattn/compiler.hpp"
#include "posattn/harness.hpp"
#include "posattn/model.hpp"
#include "posattn/ood.hpp"
#include "posattn/pcoc.hpp"
#include "posattn/tasks.hpp"

namespace {

using namespace posattn;

// "1-8" or "1,2,5" -> list of scales
std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  const auto dash = text.find('-');
  if (dash != std::string::npos && text.find(',') == std::string::npos) {
    const int lo = std::stoi(text.substr(0, dash));
    const int hi = std::stoi(text.substr(dash + 1));
    for (int v = lo; v <= hi; ++v) out.push_back(v);
    return out;
  }
  size_t pos = 0;
  while (pos < text.size()) {
    const auto comma = text.find(',', pos);
    const std::string tok = text.substr(pos, comma == std::string::npos ? comma : comma - pos);
    if (!tok.empty()) out.push_back(std::stoi(tok));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  if (out.empty()) throw CLI::ValidationError("empty integer list: " + text);
  return out;
}

struct TrainOpts {
  std::string task = "cumulative_min";
  std::string attn = "positional";
  int n = 8;
  int layers = 0;  // 0 = ceil(log2 n) + 1
  int heads = 2;
  int d_x = 64;
  int d_v = 32;
  int d_o = 64;
  int hidden = 64;
  int epochs = 2000;
  int batch = 256;
  int samples = 30000;
  int val_samples = 1000;
  double lr = 1e-4;
  double lr_min = 1e-6;
  bool variable_length = false;
};

void add_model_flags(CLI::App* cmd, TrainOpts& o) {
  cmd->add_option("--task", o.task, "task name")->capture_default_str();
  cmd->add_option("--attn", o.attn, "positional | self_attn | self_rope")->capture_default_str();
  cmd->add_option("--n", o.n, "maximum sequence length")->capture_default_str();
  cmd->add_option("--layers", o.layers, "layer count, 0 = ceil(log2 n)+1")->capture_default_str();
  cmd->add_option("--heads", o.heads)->capture_default_str();
  cmd->add_option("--d-x", o.d_x, "embedding width")->capture_default_str();
  cmd->add_option("--d-v", o.d_v, "value width per head")->capture_default_str();
  cmd->add_option("--d-o", o.d_o, "attention output width")->capture_default_str();
  cmd->add_option("--hidden", o.hidden, "MLP hidden width")->capture_default_str();
}

void add_train_flags(CLI::App* cmd, TrainOpts& o) {
  add_model_flags(cmd, o);
  cmd->add_option("--epochs", o.epochs)->capture_default_str();
  cmd->add_option("--batch", o.batch)->capture_default_str();
  cmd->add_option("--samples", o.samples, "training set size")->capture_default_str();
  cmd->add_option("--val-samples", o.val_samples)->capture_default_str();
  cmd->add_option("--lr", o.lr, "initial learning rate")->capture_default_str();
  cmd->add_option("--lr-min", o.lr_min, "final learning rate")->capture_default_str();
  cmd->add_flag("--variable-length", o.variable_length, "lengths uniform in 1..n");
}

TrainConfig to_train_config(const TrainOpts& o, std::uint64_t seed) {
  TrainConfig tc;
  tc.task = task_from_name(o.task);
  tc.model.attention = attention_from_name(o.attn);
  tc.model.n = o.n;
  tc.model.num_layers = o.layers;
  tc.model.heads = o.heads;
  tc.model.d_x = o.d_x;
  tc.model.d_v = o.d_v;
  tc.model.d_o = o.d_o;
  tc.model.mlp_hidden = o.hidden;
  tc.epochs = o.epochs;
  tc.batch_size = o.batch;
  tc.train_samples = o.samples;
  tc.val_samples = o.val_samples;
  tc.lr0 = o.lr;
  tc.lr_min = o.lr_min;
  tc.variable_length = o.variable_length;
  tc.seed = seed;
  return tc;
}

int run_train(const TrainOpts& o, std::uint64_t seed, const std::string& out) {
  RunManifest man = train(to_train_config(o, seed), out);
  std::cout << "status=" << man.status << " best_epoch=" << man.best_epoch
            << " best_val_mse=" << man.best_val_mse << " wall_sec=" << man.wall_clock_sec
            << " out=" << out << "\n";
  return man.status == "ok" ? 0 : 2;
}

// "0.5,-1.25,3" -> vector of values
Vec parse_vec(const std::string& text) {
  std::vector<double> vals;
  size_t pos = 0;
  while (pos <= text.size()) {
    const auto comma = text.find(',', pos);
    const std::string tok =
        text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    if (!tok.empty()) vals.push_back(std::stod(tok));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  if (vals.empty()) throw CLI::ValidationError("empty value list: " + text);
  Vec v(static_cast<int>(vals.size()));
  for (int i = 0; i < v.size(); ++i) v(i) = vals[static_cast<size_t>(i)];
  return v;
}

// named machine programs shared by `pcoc` and `compile-verify`
PCOCInstance builtin_instance(const std::string& alg, int machines) {
  if (alg == "cum_min") return build_tree_reduce(machines, ReduceOp::min, true);
  if (alg == "cum_sum") return build_tree_reduce(machines, ReduceOp::sum, true);
  if (alg == "tree_min") return build_tree_reduce(machines, ReduceOp::min, false);
  if (alg == "tree_sum") return build_tree_reduce(machines, ReduceOp::sum, false);
  if (alg == "odd_even_sort") return build_odd_even_sort(machines);
  throw CLI::ValidationError(
      "unknown --alg '" + alg +
      "' (expected cum_min, cum_sum, tree_min, tree_sum or odd_even_sort)");
}

PCOCInstance load_instance_arg(const std::string& file, const std::string& alg, int machines) {
  if (!file.empty()) {
    std::ifstream in(file);
    if (!in) throw CLI::ValidationError("cannot open instance file " + file);
    nlohmann::json j;
    in >> j;
    return instance_from_json(j);
  }
  return builtin_instance(alg, machines);
}

// shared by size-sweep and length-sweep: one trained cell plus a c=3 probe
void sweep_cell(const TrainOpts& base, std::uint64_t seed, const std::string& dir, int& exit_code,
                double& val_mse, double& ood_mse) {
  TrainConfig tc = to_train_config(base, seed);
  RunManifest man = train(tc, dir);
  if (man.status != "ok") exit_code = 2;
  auto [cfg, params] = load_checkpoint(dir + "/checkpoint.json");
  std::vector<OodRow> rows = ood_eval(cfg, params, tc.task, {3}, 1000, tc.range_bound, seed);
  write_ood_csv(dir + "/ood.csv", rows);
  val_mse = man.best_val_mse;
  ood_mse = rows[0].mse;
}

}  // namespace

int main(int argc, char** argv) {
  posattn::tune_allocator();
  CLI::App app{"positional attention lab"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "key=value config file mirroring the flags");

  std::uint64_t seed = 1;
  std::string out = "run_out";
  app.add_option("--seed", seed, "rng seed")->capture_default_str();
  app.add_option("--out", out, "output directory")->capture_default_str();

  int exit_code = 0;
  TrainOpts topts;

  CLI::App* cmd_train = app.add_subcommand("train", "train one model, write manifest + checkpoint");
  add_train_flags(cmd_train, topts);
  cmd_train->callback([&] { exit_code = run_train(topts, seed, out); });

  std::string run_dir;
  std::string scales = "1-10";
  int sweep_samples = 1000;
  CLI::App* cmd_ood = app.add_subcommand("ood-sweep", "per-scale OOD MSE of a trained run");
  cmd_ood->add_option("--run", run_dir, "run directory with manifest.json")->required();
  cmd_ood->add_option("--scales", scales, "e.g. 1-10 or 1,3,5")->capture_default_str();
  cmd_ood->add_option("--samples", sweep_samples, "samples per scale")->capture_default_str();
  cmd_ood->callback([&] {
    for (const OodRow& r : ood_sweep(run_dir, parse_int_list(scales), sweep_samples, seed))
      std::cout << "scale=" << r.scale << " mse=" << r.mse << " n=" << r.n_samples << "\n";
  });

  std::string sizes = "5000,10000,20000,30000,40000,50000";
  int sweep_seeds = 3;
  TrainOpts sweep_opts;
  sweep_opts.epochs = 500;
  CLI::App* cmd_size = app.add_subcommand("size-sweep", "OOD loss vs training-set size at c=3");
  add_train_flags(cmd_size, sweep_opts);
  cmd_size->add_option("--sizes", sizes, "training set sizes")->capture_default_str();
  cmd_size->add_option("--sweep-seeds", sweep_seeds, "seeds 1..k per cell")->capture_default_str();
  cmd_size->callback([&] {
    std::string csv = "size,seed,val_mse,ood_mse_c3\n";
    for (int size : parse_int_list(sizes))
      for (std::uint64_t s = 1; s <= static_cast<std::uint64_t>(sweep_seeds); ++s) {
        TrainOpts cell = sweep_opts;
        cell.samples = size;
        double val = 0, ood = 0;
        const std::string dir = out + "/size_" + std::to_string(size) + "_seed_" + std::to_string(s);
        sweep_cell(cell, s, dir, exit_code, val, ood);
        csv += std::to_string(size) + "," + std::to_string(s) + "," + std::to_string(val) + "," +
               std::to_string(ood) + "\n";
      }
    std::ofstream(out + "/size_sweep.csv") << csv;
    std::cout << csv;
  });

  std::string lengths = "2,4,8,16,32";
  CLI::App* cmd_len = app.add_subcommand("length-sweep", "OOD loss vs sequence length at c=3");
  add_train_flags(cmd_len, sweep_opts);
  cmd_len->add_option("--lengths", lengths, "values of n")->capture_default_str();
  cmd_len->add_option("--sweep-seeds", sweep_seeds, "seeds 1..k per cell")->capture_default_str();
  cmd_len->callback([&] {
    std::string csv = "n,seed,val_mse,ood_mse_c3\n";
    for (int n : parse_int_list(lengths))
      for (std::uint64_t s = 1; s <= static_cast<std::uint64_t>(sweep_seeds); ++s) {
        TrainOpts cell = sweep_opts;
        cell.n = n;
        cell.layers = 0;  // layer count follows the length rule
        double val = 0, ood = 0;
        const std::string dir = out + "/n_" + std::to_string(n) + "_seed_" + std::to_string(s);
        sweep_cell(cell, s, dir, exit_code, val, ood);
        csv += std::to_string(n) + "," + std::to_string(s) + "," + std::to_string(val) + "," +
               std::to_string(ood) + "\n";
      }
    std::ofstream(out + "/length_sweep.csv") << csv;
    std::cout << csv;
  });

  std::string gen_task = "cumulative_min";
  int gen_n = 8, gen_count = 100, gen_scale = 1;
  bool gen_varlen = false;
  CLI::App* cmd_gen = app.add_subcommand("gen-data", "dump sampled task data as JSONL");
  cmd_gen->add_option("--task", gen_task)->capture_default_str();
  cmd_gen->add_option("--n", gen_n)->capture_default_str();
  cmd_gen->add_option("--count", gen_count)->capture_default_str();
  cmd_gen->add_option("--scale", gen_scale, "1 = training distribution, >1 = OOD")->capture_default_str();
  cmd_gen->add_flag("--variable-length", gen_varlen);
  cmd_gen->callback([&] {
    SampleOptions opt;
    opt.n = gen_n;
    opt.count = gen_count;
    opt.variable_length = gen_varlen;
    opt.seed = seed;
    TaskKind task = task_from_name(gen_task);
    TaskBatch batch = gen_scale == 1 ? sample_train(task, opt)
                                     : sample_test_ood(task, gen_scale, opt);
    std::filesystem::create_directories(out);
    std::ofstream f(out + "/samples.jsonl");
    dump_jsonl(batch, f);
    std::cout << "wrote " << batch.samples.size() << " samples to " << out << "/samples.jsonl\n";
  });

  std::string pcoc_file, pcoc_alg = "cum_min", pcoc_input, pcoc_trace;
  int pcoc_machines = 8;
  CLI::App* cmd_pcoc = app.add_subcommand("pcoc", "simulate or check a machine program");
  cmd_pcoc->require_subcommand(1);
  cmd_pcoc->add_option("--instance", pcoc_file, "instance JSON file (overrides --alg)");
  cmd_pcoc->add_option("--alg", pcoc_alg, "builtin program")->capture_default_str();
  cmd_pcoc->add_option("--machines", pcoc_machines)->capture_default_str();
  CLI::App* cmd_pcoc_run = cmd_pcoc->add_subcommand("run", "execute on an input vector");
  cmd_pcoc_run->add_option("--input", pcoc_input, "comma-separated values, one per machine")
      ->required();
  cmd_pcoc_run->add_option("--trace", pcoc_trace, "write the per-round delivery trace JSON here");
  cmd_pcoc_run->callback([&] {
    const PCOCInstance inst = load_instance_arg(pcoc_file, pcoc_alg, pcoc_machines);
    nlohmann::json trace;
    const Mat mem = run(inst, parse_vec(pcoc_input), pcoc_trace.empty() ? nullptr : &trace);
    for (int i = 0; i < mem.rows(); ++i) {
      std::cout << "machine " << i << ":";
      for (int z = 0; z < mem.cols(); ++z) std::cout << " " << mem(i, z);
      std::cout << "\n";
    }
    if (!pcoc_trace.empty()) {
      std::ofstream f(pcoc_trace);
      f << trace.dump(2) << "\n";
      std::cout << "trace written to " << pcoc_trace << "\n";
    }
  });
  CLI::App* cmd_pcoc_val = cmd_pcoc->add_subcommand("validate", "check the routing program");
  cmd_pcoc_val->callback([&] {
    const PCOCInstance inst = load_instance_arg(pcoc_file, pcoc_alg, pcoc_machines);
    const ValidationReport rep = validate(inst);
    std::cout << "machines=" << inst.machines << " rounds=" << inst.rounds
              << " mem_size=" << inst.mem_size << "\n";
    if (rep.ok) {
      std::cout << "valid\n";
    } else {
      std::cout << "invalid: " << rep.message << "\n";
      exit_code = 2;
    }
  });

  std::string cv_alg = "cum_min";
  std::string cv_save;
  int cv_n = 8, cv_trials = 1000;
  double cv_eps = 1e-8, cv_tol = -1.0;
  CLI::App* cmd_cv = app.add_subcommand(
      "compile-verify", "compile a machine program to network weights and check it");
  cmd_cv->add_option("--alg", cv_alg, "cum_min | cum_sum | tree_min | tree_sum | odd_even_sort")
      ->capture_default_str();
  cmd_cv->add_option("--n", cv_n, "machine count")->capture_default_str();
  cmd_cv->add_option("--eps", cv_eps, "attention sharpness target")->capture_default_str();
  cmd_cv->add_option("--trials", cv_trials)->capture_default_str();
  cmd_cv->add_option("--tol", cv_tol, "deviation budget, <0 = default")->capture_default_str();
  cmd_cv->add_option("--save", cv_save, "directory for compiled checkpoint + sidecar");
  cmd_cv->callback([&] {
    const CompiledNetwork net = compile(builtin_instance(cv_alg, cv_n), cv_eps);
    const VerifyReport rep = verify(net, cv_trials, cv_tol, seed);
    std::cout << "alg=" << cv_alg << " n=" << cv_n << " eps=" << cv_eps
              << " trials=" << rep.trials << " tol=" << rep.tol << "\n";
    for (size_t r = 0; r < rep.round_max_dev.size(); ++r)
      std::cout << "round " << r << " max_dev=" << rep.round_max_dev[r] << "\n";
    std::cout << "final max_dev=" << rep.final_max_dev << "\n"
              << (rep.pass ? "pass" : "FAIL") << "\n";
    if (!rep.pass) exit_code = 2;
    if (!cv_save.empty()) {
      std::filesystem::create_directories(cv_save);
      save_compiled(net, cv_save + "/checkpoint.json", cv_save + "/compiled.json");
      std::cout << "saved to " << cv_save << "\n";
    }
  });

  std::string op_lengths = "2,4,8,16,32", op_scales = "2-10";
  long long op_trials = 0;
  CLI::App* cmd_prob = app.add_subcommand("ood-prob", "overlap-probability bound table (CSV)");
  cmd_prob->add_option("--n", op_lengths, "sequence lengths")->capture_default_str();
  cmd_prob->add_option("--c", op_scales, "scale factors")->capture_default_str();
  cmd_prob->add_option("--mc-trials", op_trials, "add a Monte Carlo column with this many draws")
      ->capture_default_str();
  cmd_prob->callback([&] {
    std::cout << "n,c,p_in_upper" << (op_trials > 0 ? ",mc_estimate,mc_sigma" : "") << "\n";
    for (int n : parse_int_list(op_lengths))
      for (int c : parse_int_list(op_scales)) {
        const OverlapBound b = p_in_bound(n, c);
        std::cout << n << "," << c << "," << b.p_in_upper;
        if (op_trials > 0) {
          const OverlapEstimate e = monte_carlo_p_in(n, c, op_trials, seed);
          std::cout << "," << e.estimate << "," << e.sigma;
        }
        std::cout << "\n";
      }
  });

  std::string ad_checkpoint, ad_input, ad_scales = "1-8", ad_file;
  CLI::App* cmd_attn = app.add_subcommand("attn-dump",
                                          "attention matrices across input scalings (JSON)");
  cmd_attn->add_option("--checkpoint", ad_checkpoint, "model checkpoint file")->required();
  cmd_attn->add_option("--input", ad_input, "comma-separated base input")->required();
  cmd_attn->add_option("--scales", ad_scales, "e.g. 1-8 or 1,2")->capture_default_str();
  cmd_attn->add_option("--file", ad_file, "write here instead of stdout");
  cmd_attn->callback([&] {
    const auto [cfg, params] = load_checkpoint(ad_checkpoint);
    std::vector<double> scales;
    for (int c : parse_int_list(ad_scales)) scales.push_back(c);
    const nlohmann::json dump = attn_dump(cfg, params, parse_vec(ad_input), scales);
    if (ad_file.empty()) {
      std::cout << dump.dump(2) << "\n";
    } else {
      std::ofstream f(ad_file);
      f << dump.dump(2) << "\n";
      std::cout << "wrote " << dump.size() << " matrices to " << ad_file << "\n";
    }
  });

  try {
    CLI11_PARSE(app, argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return exit_code;
}
