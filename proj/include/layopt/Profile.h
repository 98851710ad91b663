//===- Profile.h - Execution profiles over the CFG --------------*- C++ -*-===//
//
// Part of the layopt project, under the Apache License v2.0.
// SPDX-License-Identifier: Apache-2.0
//
//===----------------------------------------------------------------------===//
//
// Turns raw traces into per-function flow graphs (edge and block counts), a
// call graph, and quality measures. Branch stacks give exact taken-edge
// counts plus inferred fall-through paths between consecutive records; plain
// samples give block counts from which edges are inferred proportionally.
//
//===----------------------------------------------------------------------===//

#ifndef LAYOPT_PROFILE_H
#define LAYOPT_PROFILE_H

#include "layopt/Model.h"
#include "layopt/Trace.h"

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace layopt {

struct EdgeProfile {
  uint64_t Count = 0;
  uint64_t Mispreds = 0;
  EdgeKind Kind = EdgeKind::Taken;
};

struct FunctionProfile {
  uint64_t EntryCount = 0;
  std::map<std::pair<std::string, std::string>, EdgeProfile> Edges;
  std::map<std::string, uint64_t> BlockCounts;

  uint64_t edgeCount(const std::string &Src, const std::string &Dst) const {
    auto It = Edges.find({Src, Dst});
    return It == Edges.end() ? 0 : It->second.Count;
  }
  uint64_t blockCount(const std::string &Label) const {
    auto It = BlockCounts.find(Label);
    return It == BlockCounts.end() ? 0 : It->second;
  }
  // Includes EntryCount when Label is the entry block of the function.
  uint64_t inflow(const std::string &Label, const std::string &Entry) const;
  uint64_t outflow(const std::string &Label) const;
};

struct FlowGraph {
  std::map<std::string, FunctionProfile> Functions;
  // Set when the edges came from proportional inference rather than records.
  bool Inferred = false;

  const FunctionProfile *fn(const std::string &Name) const {
    auto It = Functions.find(Name);
    return It == Functions.end() ? nullptr : &It->second;
  }
  FunctionProfile *fn(const std::string &Name) {
    auto It = Functions.find(Name);
    return It == Functions.end() ? nullptr : &It->second;
  }
};

struct CallGraph {
  // (caller, callee) -> call count
  std::map<std::pair<std::string, std::string>, uint64_t> Edges;
};

// An indirect call site: Index is the ordinal of the icall instruction among
// the icalls of its block, which survives nop stripping.
struct CallSiteId {
  std::string Func;
  std::string Block;
  size_t Index = 0;
  auto operator<=>(const CallSiteId &) const = default;
};

struct IndirectCallProfile {
  std::map<CallSiteId, std::map<std::string, uint64_t>> Sites;
};

struct AttributionStats {
  uint64_t DroppedEntries = 0;
  uint64_t ReturnEntries = 0;
  uint64_t InconsistentPairs = 0;
  uint64_t TakenAttributed = 0;
  uint64_t FallthroughsInferred = 0;
};

struct AttributionResult {
  FlowGraph Flow;
  CallGraph Calls;
  IndirectCallProfile IndirectSites;
  AttributionStats Stats;
};

// Build a flow graph from branch stacks. Each entry whose source resolves to
// a branch increments that taken edge; entries from call instructions into a
// function entry feed the call graph; returns are ignored. For consecutive
// entries within a stack, the straight-line fall-through path from the
// landing block to the next branch is incremented when it exists; pairs that
// contradict the CFG are dropped and counted.
AttributionResult attributeLbr(const Program &Prog,
                               const std::vector<LbrStack> &Stacks);

// A straight-line run of blocks executed between two consecutive records of
// one branch stack: the landing block of the earlier record through the
// block holding the next branch source, inclusive.
struct ExecutedSegment {
  std::string Func;
  std::vector<std::string> Blocks;
};

struct SegmentStream {
  std::vector<ExecutedSegment> Segments;
  // Record pairs that yielded no segment: unresolvable ends, cross-function
  // transitions, or paths contradicting the CFG.
  uint64_t Skipped = 0;
};

// Expand branch stacks into the straight-line segments attributeLbr infers
// between consecutive records. Every segment of k blocks corresponds to the
// k - 1 fall-through edges that attribution would increment.
SegmentStream expandSegments(const Program &Prog,
                             const std::vector<LbrStack> &Stacks);

struct SampleCounts {
  std::map<std::string, std::map<std::string, uint64_t>> BlockCounts;
  uint64_t Dropped = 0;
};

SampleCounts attributeSamples(const Program &Prog,
                              const std::vector<IpSample> &Samples);

// Estimate edge counts from block counts alone: every block's count is split
// across its out-edges in proportion to the current successor estimates,
// swept to a fixpoint (at most 100 iterations). With no information the
// fall-through successor receives everything. Mass is conserved exactly.
FlowGraph inferEdgesFromCounts(const Program &Prog, const SampleCounts &Counts);

struct ReconcileStats {
  uint64_t FallthroughBumps = 0;
  uint64_t FallInBumps = 0;
  uint64_t FallOutTrims = 0;
  uint64_t EntryBumps = 0;
  // Blocks left with inflow != outflow, as "func:label".
  std::vector<std::string> Violations;
};

// Enforce per-block flow conservation where a fall-through can absorb the
// difference: surplus inflow goes to the fall-through out-edge; missing
// inflow is drawn from the fall-through in-edge, made up from the function
// entry count at the entry block, or trimmed off the fall-through out-edge
// when no draw can supply it. Taken edges are never adjusted. Also
// refreshes BlockCounts from the reconciled inflow.
ReconcileStats reconcileFlow(const Program &Prog, FlowGraph &Flow);

// Derive block counts from edge inflow without reconciliation.
void populateBlockCounts(const Program &Prog, FlowGraph &Flow);

// The incomplete call graph available without branch records: every direct
// call in block b of f to g contributes b's count to edge (f, g).
CallGraph buildCallGraphNoLbr(const Program &Prog, const FlowGraph &Flow);

// 1 - sum of |inflow - outflow| over blocks with successors, normalized by
// twice the total edge count, clamped to [0, 1]. 1.0 means every flow
// equation holds.
std::map<std::string, double> profileAccuracy(const Program &Prog,
                                              const FlowGraph &Flow);

// Profile file grammar, one record per line:
//   N <func> <entry-count>
//   E <func> <src> <dst> <count> <mispreds> <T|F>
//   C <caller> <callee> <count>
std::string serializeProfile(const FlowGraph &Flow, const CallGraph &Calls);
void parseProfile(const std::string &Text, FlowGraph &Flow, CallGraph &Calls);

} // namespace layopt

#endif // LAYOPT_PROFILE_H
