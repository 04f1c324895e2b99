#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "posattn/tensor.hpp"

namespace posattn {

// Local per-machine update applied to the freshly received memory each round.
// The set is deliberately small: every member has an exact ReLU realization,
// which is what makes compilation to network weights verifiable.
// Reductions (copy1/min2/max2/sum2) broadcast their result to every slot so a
// machine's current value stays available at all positions for later routing.
enum class LocalFn {
  identity,  // received memory kept as-is
  zero,      // all slots cleared
  copy1,     // slot 0 broadcast to all slots
  min2,      // min(slot 0, slot 1) broadcast
  max2,      // max(slot 0, slot 1) broadcast
  sum2,      // slot 0 + slot 1 broadcast
};

const char* local_fn_name(LocalFn f);
LocalFn local_fn_from_name(const std::string& name);

// Memory slots a function reads; compilation and simulation both require the
// read set to be covered by the slots actually received that round.
std::vector<int> local_fn_reads(LocalFn f);

// Applies a local function to one machine's received memory (reductions
// broadcast their scalar result to every slot). Shared by the simulator and
// the compiled-network forward pass so the two stay exactly equivalent.
Vec local_fn_apply(LocalFn f, const Vec& mem);

// One delivery rule: `source` sends the listed memory positions, each landing
// at the same position on the destination side.
struct RoutingEntry {
  int source = 0;
  std::vector<int> positions;
};

// Synchronous machines with fixed-size memories; a data-independent oracle
// routes memory slots between machines each round, then every machine applies
// its local function. Machines, rounds and positions are all 0-based.
struct PCOCInstance {
  int machines = 0;
  int rounds = 0;
  int mem_size = 0;
  // oracle[round][dest] -> deliveries into `dest`; the oracle never sees data
  std::vector<std::vector<std::vector<RoutingEntry>>> oracle;
  // local_fns[round][machine]
  std::vector<std::vector<LocalFn>> local_fns;
  // where run() places each machine's input scalar (duplicated if several)
  std::vector<int> input_positions = {0};
};

struct ValidationReport {
  bool ok = true;
  std::string message;  // names the first violating (round, machine, position)
};

// Checks the received-data budget (≤ mem_size positions per machine per
// round) and the no-collision rule (at most one delivery per destination
// slot), plus index ranges. Returns a report instead of throwing.
ValidationReport validate(const PCOCInstance& inst);

// Runs the protocol: each round, memories are rebuilt from the deliveries
// (unreceived slots read as 0), then local functions are applied. Returns the
// final machines x mem_size state. Throws std::invalid_argument on instances
// that fail validate(). If `trace` is given, it records every delivery and
// the post-round memories as JSON; if `round_states` is given, it receives a
// copy of the memory matrix after every round.
Mat run(const PCOCInstance& inst, const Vec& input, nlohmann::json* trace = nullptr,
        std::vector<Mat>* round_states = nullptr);

enum class ReduceOp { min, sum };

// ceil(log2 N)-round reduction. Cumulative: machine i ends holding the
// reduction over inputs 0..i (doubling scan). Non-cumulative: a binary tree
// over blocks; only the last machine's result is meaningful, the rest drop
// out as their values merge upward.
PCOCInstance build_tree_reduce(int machines, ReduceOp op, bool cumulative);

// N alternating rounds of compare-exchange on adjacent pairs, odd-indexed
// pairs first; the lower machine keeps the min, the higher the max. N phases
// are required in the worst case (reversed input), so none are shaved off.
PCOCInstance build_odd_even_sort(int machines);

// Instance (de)serialization, used by the compiled-network sidecar files.
nlohmann::json instance_to_json(const PCOCInstance& inst);
PCOCInstance instance_from_json(const nlohmann::json& j);

}  // namespace posattn
