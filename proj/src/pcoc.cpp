#include "posattn/pcoc.hpp"

#include <algorithm>
#include <stdexcept>

namespace posattn {

namespace {

std::string triple(int round, int machine, int pos) {
  return "round " + std::to_string(round) + ", machine " + std::to_string(machine) +
         ", position " + std::to_string(pos);
}

}  // namespace

Vec local_fn_apply(LocalFn f, const Vec& mem) {
  const int s = static_cast<int>(mem.size());
  switch (f) {
    case LocalFn::identity:
      return mem;
    case LocalFn::zero:
      return Vec::Zero(s);
    case LocalFn::copy1:
      return Vec::Constant(s, mem(0));
    case LocalFn::min2:
      return Vec::Constant(s, std::min(mem(0), mem(1)));
    case LocalFn::max2:
      return Vec::Constant(s, std::max(mem(0), mem(1)));
    case LocalFn::sum2:
      return Vec::Constant(s, mem(0) + mem(1));
  }
  throw std::runtime_error("local_fn_apply: bad function");
}

const char* local_fn_name(LocalFn f) {
  switch (f) {
    case LocalFn::identity: return "identity";
    case LocalFn::zero: return "zero";
    case LocalFn::copy1: return "copy1";
    case LocalFn::min2: return "min2";
    case LocalFn::max2: return "max2";
    case LocalFn::sum2: return "sum2";
  }
  throw std::runtime_error("local_fn_name: bad function");
}

LocalFn local_fn_from_name(const std::string& name) {
  for (LocalFn f : {LocalFn::identity, LocalFn::zero, LocalFn::copy1, LocalFn::min2, LocalFn::max2,
                    LocalFn::sum2})
    if (name == local_fn_name(f)) return f;
  throw std::runtime_error("unknown local function: " + name);
}

std::vector<int> local_fn_reads(LocalFn f) {
  switch (f) {
    case LocalFn::identity: return {};  // reads whatever was received, slot-wise
    case LocalFn::zero: return {};
    case LocalFn::copy1: return {0};
    case LocalFn::min2:
    case LocalFn::max2:
    case LocalFn::sum2: return {0, 1};
  }
  throw std::runtime_error("local_fn_reads: bad function");
}

ValidationReport validate(const PCOCInstance& inst) {
  auto fail = [](std::string msg) { return ValidationReport{false, std::move(msg)}; };
  if (inst.machines < 1) return fail("instance has no machines");
  if (inst.mem_size < 1) return fail("memory size must be at least 1");
  if (inst.rounds < 0) return fail("negative round count");
  if (static_cast<int>(inst.oracle.size()) != inst.rounds ||
      static_cast<int>(inst.local_fns.size()) != inst.rounds)
    return fail("oracle/local_fns must have one entry per round");
  if (inst.input_positions.empty()) return fail("input_positions is empty");
  for (int p : inst.input_positions)
    if (p < 0 || p >= inst.mem_size) return fail("input position " + std::to_string(p) + " outside memory");

  for (int r = 0; r < inst.rounds; ++r) {
    if (static_cast<int>(inst.oracle[r].size()) != inst.machines ||
        static_cast<int>(inst.local_fns[r].size()) != inst.machines)
      return fail("round " + std::to_string(r) + " is not sized to the machine count");
    for (int dest = 0; dest < inst.machines; ++dest) {
      std::vector<bool> taken(inst.mem_size, false);
      int received = 0;
      for (const RoutingEntry& e : inst.oracle[r][dest]) {
        if (e.source < 0 || e.source >= inst.machines)
          return fail("round " + std::to_string(r) + ": machine " + std::to_string(dest) +
                      " receives from nonexistent machine " + std::to_string(e.source));
        if (e.positions.empty())
          return fail("round " + std::to_string(r) + ": machine " + std::to_string(dest) +
                      " has a delivery with no positions");
        for (int z : e.positions) {
          if (z < 0 || z >= inst.mem_size)
            return fail(triple(r, dest, z) + ": position outside memory");
          if (taken[z])
            return fail("collision at " + triple(r, dest, z) +
                        ": two sources deliver to the same slot");
          taken[z] = true;
          received++;
        }
      }
      if (received > inst.mem_size)
        return fail("budget exceeded at round " + std::to_string(r) + ", machine " +
                    std::to_string(dest) + ": " + std::to_string(received) + " positions > " +
                    std::to_string(inst.mem_size));
    }
  }
  return {};
}

Mat run(const PCOCInstance& inst, const Vec& input, nlohmann::json* trace,
        std::vector<Mat>* round_states) {
  ValidationReport rep = validate(inst);
  if (!rep.ok) throw std::invalid_argument("run: invalid instance: " + rep.message);
  if (round_states) round_states->clear();
  if (input.size() != inst.machines)
    throw std::invalid_argument("run: expected one input per machine, got " +
                                std::to_string(input.size()));

  Mat mem = Mat::Zero(inst.machines, inst.mem_size);
  for (int i = 0; i < inst.machines; ++i)
    for (int p : inst.input_positions) mem(i, p) = input(i);

  if (trace) {
    *trace = nlohmann::json::object();
    (*trace)["machines"] = inst.machines;
    (*trace)["mem_size"] = inst.mem_size;
    (*trace)["rounds"] = nlohmann::json::array();
  }

  for (int r = 0; r < inst.rounds; ++r) {
    Mat next = Mat::Zero(inst.machines, inst.mem_size);
    nlohmann::json deliveries = nlohmann::json::array();
    for (int dest = 0; dest < inst.machines; ++dest)
      for (const RoutingEntry& e : inst.oracle[r][dest])
        for (int z : e.positions) {
          next(dest, z) = mem(e.source, z);
          if (trace)
            deliveries.push_back({{"source", e.source},
                                  {"dest", dest},
                                  {"position", z},
                                  {"value", mem(e.source, z)}});
        }
    for (int i = 0; i < inst.machines; ++i)
      next.row(i) = local_fn_apply(inst.local_fns[r][i], next.row(i).transpose()).transpose();
    mem = std::move(next);
    if (round_states) round_states->push_back(mem);
    if (trace) {
      nlohmann::json round = {{"round", r}, {"deliveries", std::move(deliveries)}};
      nlohmann::json mems = nlohmann::json::array();
      for (int i = 0; i < inst.machines; ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (int z = 0; z < inst.mem_size; ++z) row.push_back(mem(i, z));
        mems.push_back(std::move(row));
      }
      round["memories"] = std::move(mems);
      (*trace)["rounds"].push_back(std::move(round));
    }
  }
  return mem;
}

namespace {

int ceil_log2(int n) {
  int r = 0;
  while ((1 << r) < n) ++r;
  return r;
}

PCOCInstance blank_instance(int machines, int rounds) {
  PCOCInstance inst;
  inst.machines = machines;
  inst.rounds = rounds;
  inst.mem_size = 2;
  // pairwise local functions need both operands available, so the input is
  // staged at both slots and every reduction rebroadcasts its result
  inst.input_positions = {0, 1};
  inst.oracle.assign(rounds, std::vector<std::vector<RoutingEntry>>(machines));
  inst.local_fns.assign(rounds, std::vector<LocalFn>(machines, LocalFn::zero));
  return inst;
}

}  // namespace

PCOCInstance build_tree_reduce(int machines, ReduceOp op, bool cumulative) {
  if (machines < 1) throw std::invalid_argument("build_tree_reduce: need at least one machine");
  const int rounds = ceil_log2(machines);
  PCOCInstance inst = blank_instance(machines, rounds);
  const LocalFn combine = op == ReduceOp::min ? LocalFn::min2 : LocalFn::sum2;

  for (int r = 0; r < rounds; ++r) {
    const int d = 1 << r;
    if (cumulative) {
      // doubling scan: machine i folds in machine i-d every round
      for (int i = 0; i < machines; ++i) {
        inst.oracle[r][i].push_back({i, {0}});
        if (i >= d) {
          inst.oracle[r][i].push_back({i - d, {1}});
          inst.local_fns[r][i] = combine;
        } else {
          inst.local_fns[r][i] = LocalFn::copy1;
        }
      }
    } else {
      // binary tree over blocks of width 2d: the block's last machine folds
      // in the left half's representative; everyone else drops out
      for (int lo = 0; lo < machines; lo += 2 * d) {
        const int mid = lo + d - 1;
        const int hi = std::min(lo + 2 * d - 1, machines - 1);
        inst.oracle[r][hi].push_back({hi, {0}});
        if (mid < hi && mid < machines) {
          inst.oracle[r][hi].push_back({mid, {1}});
          inst.local_fns[r][hi] = combine;
        } else {
          inst.local_fns[r][hi] = LocalFn::copy1;
        }
      }
    }
  }
  return inst;
}

PCOCInstance build_odd_even_sort(int machines) {
  if (machines < 2) throw std::invalid_argument("build_odd_even_sort: need at least two machines");
  // N phases is the classical guarantee (Habermann's parallel neighbor-sort)
  // and is tight: a reversed input is not sorted after N-1 phases for N >= 3.
  const int rounds = machines;
  PCOCInstance inst = blank_instance(machines, rounds);

  for (int r = 0; r < rounds; ++r) {
    std::vector<bool> paired(machines, false);
    const int first = r % 2 == 0 ? 0 : 1;  // odd-indexed pairs (1-based) go first
    for (int a = first; a + 1 < machines; a += 2) {
      inst.oracle[r][a] = {{a, {0}}, {a + 1, {1}}};
      inst.local_fns[r][a] = LocalFn::min2;
      inst.oracle[r][a + 1] = {{a + 1, {0}}, {a, {1}}};
      inst.local_fns[r][a + 1] = LocalFn::max2;
      paired[a] = paired[a + 1] = true;
    }
    for (int i = 0; i < machines; ++i)
      if (!paired[i]) {
        inst.oracle[r][i] = {{i, {0, 1}}};
        inst.local_fns[r][i] = LocalFn::identity;
      }
  }
  return inst;
}

nlohmann::json instance_to_json(const PCOCInstance& inst) {
  nlohmann::json j;
  j["machines"] = inst.machines;
  j["rounds"] = inst.rounds;
  j["mem_size"] = inst.mem_size;
  j["input_positions"] = inst.input_positions;
  nlohmann::json oracle = nlohmann::json::array();
  nlohmann::json fns = nlohmann::json::array();
  for (int r = 0; r < inst.rounds; ++r) {
    nlohmann::json round = nlohmann::json::array();
    for (int i = 0; i < inst.machines; ++i) {
      nlohmann::json entries = nlohmann::json::array();
      for (const RoutingEntry& e : inst.oracle[r][i])
        entries.push_back({{"source", e.source}, {"positions", e.positions}});
      round.push_back(std::move(entries));
    }
    oracle.push_back(std::move(round));
    nlohmann::json row = nlohmann::json::array();
    for (LocalFn f : inst.local_fns[r]) row.push_back(local_fn_name(f));
    fns.push_back(std::move(row));
  }
  j["oracle"] = std::move(oracle);
  j["local_fns"] = std::move(fns);
  return j;
}

PCOCInstance instance_from_json(const nlohmann::json& j) {
  PCOCInstance inst;
  inst.machines = j.at("machines").get<int>();
  inst.rounds = j.at("rounds").get<int>();
  inst.mem_size = j.at("mem_size").get<int>();
  inst.input_positions = j.at("input_positions").get<std::vector<int>>();
  inst.oracle.assign(inst.rounds, std::vector<std::vector<RoutingEntry>>(inst.machines));
  inst.local_fns.assign(inst.rounds, std::vector<LocalFn>(inst.machines, LocalFn::zero));
  for (int r = 0; r < inst.rounds; ++r) {
    const nlohmann::json& round = j.at("oracle").at(r);
    for (int i = 0; i < inst.machines; ++i) {
      for (const nlohmann::json& e : round.at(i))
        inst.oracle[r][i].push_back(
            {e.at("source").get<int>(), e.at("positions").get<std::vector<int>>()});
      inst.local_fns[r][i] = local_fn_from_name(j.at("local_fns").at(r).at(i).get<std::string>());
    }
  }
  return inst;
}

}  // namespace posattn
