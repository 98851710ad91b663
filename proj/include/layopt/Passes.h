//===- Passes.h - Optimization passes and the pipeline ---------*- C++ -*-===//
//
// Part of the layopt project, under the Apache License v2.0.
// SPDX-License-Identifier: Apache-2.0
//
//===----------------------------------------------------------------------===//
//
// The optimization passes. Per-function passes (block reordering, splitting,
// branch fixup, unreachable elimination) leave non-simple functions alone;
// whole-model passes (folding, function reordering, address assignment) touch
// every function but transform only what they can prove safe.
//
//===----------------------------------------------------------------------===//

#ifndef LAYOPT_PASSES_H
#define LAYOPT_PASSES_H

#include "layopt/Model.h"
#include "layopt/Profile.h"

#include <map>
#include <set>
#include <string>
#include <vector>

namespace layopt {

/// Remaps every folded function to its surviving representative.
using FoldMap = std::map<std::string, std::string>;

/// Folds functions with equivalent bodies into a single representative, the
/// one with the lowest original address, and redirects calls to the victims.
/// Two functions are equivalent when their block structure and instruction
/// (kind, size) sequences match, local branch targets refer to the same block
/// positions, and call targets are themselves equivalent. The equivalence is
/// computed by partition refinement, so mutually recursive twins fold too.
/// Non-simple functions neither fold nor serve as representatives.
///
/// Victims' intra-function profiles are dropped with them; call-graph arcs
/// are re-keyed onto the representatives. The pass is idempotent.
FoldMap foldIdentical(Program &Prog, FlowGraph &Flow, CallGraph &Calls,
                      IndirectCallProfile &Sites);

struct IcpOptions {
  double Threshold = 0.90; // hottest target share required to promote
  uint32_t GuardSize = 8;
  uint32_t CallSize = 5;
};

struct IcpResult {
  unsigned Promoted = 0;
  unsigned SkippedEmpty = 0;
  std::vector<std::string> Log;
};

/// Promotes indirect-call sites whose hottest target holds at least the
/// threshold share of the site's samples. The icall is replaced by a guard
/// plus a direct call, and the original icall moves to a new fall-back block
/// together with the rest of its block. Grows the function by GuardSize +
/// CallSize bytes per promoted site. Throws std::runtime_error when a site
/// does not exist in the model; empty histograms are skipped with a note.
IcpResult promoteIndirectCalls(Program &Prog, FlowGraph &Flow,
                               CallGraph &Calls, IndirectCallProfile &Sites,
                               const IcpOptions &Opts = {});

enum class ReorderAlgorithm { None, PettisHansen, CachePlus };

/// Layout order of a function's blocks, as labels, entry first.
using BlockOrder = std::vector<std::string>;

/// Computes a block order maximizing fall-through weight. `PettisHansen`
/// merges chains bottom-up along the heaviest edges; `CachePlus` forms the
/// same chains but concatenates them to maximize the proximity score, never
/// scoring below the Pettis-Hansen order. Non-simple functions keep their
/// original order.
BlockOrder reorderBlocks(const Function &F, const FlowGraph &Flow,
                         ReorderAlgorithm Alg);

/// Total weight of edges made fall-throughs by the given order.
uint64_t fallthroughWeight(const Function &F, const FlowGraph &Flow,
                           const BlockOrder &Order);

/// Layout affinity score of an order: fall-through weight at 1.0 per unit,
/// plus 0.1 per unit for taken transfers spanning at most 1024 bytes forward
/// or 640 bytes backward.
double proximityScore(const Function &F, const FlowGraph &Flow,
                      const BlockOrder &Order);

enum class SplitMode { None, ColdOnly, Aggressive };

struct SplitOptions {
  SplitMode Mode = SplitMode::ColdOnly;
  double Theta = 0.01; // aggressive: cold when count < Theta * max count
};

/// Chooses the blocks to move to the cold section. The entry block never
/// moves, and nothing moves unless the function has a positive-count block.
std::set<std::string> splitFunction(const Function &F, const FlowGraph &Flow,
                                    const SplitOptions &Opts);

struct FixupResult {
  unsigned Inverted = 0;
  unsigned Deleted = 0;
  unsigned Appended = 0;
  size_t HotBlocks = 0; // layout prefix length, cold blocks follow
};

/// Rewrites F's blocks into the given order, hot section first, and makes
/// every terminator agree with the new layout: conditional branches whose
/// taken target became the layout successor are inverted, unconditional
/// jumps to the layout successor are deleted, and blocks whose fall-through
/// successor no longer follows them get an unconditional branch to it. For
/// blocks that already end in a conditional branch the new unconditional
/// branch lives in a synthetic single-jump block placed right after, and
/// Flow is rerouted through it. The successor set of every original block is
/// preserved up to that resolution.
FixupResult fixupBranches(Function &F, const BlockOrder &Order,
                          const std::set<std::string> &Cold, FlowGraph &Flow);

/// Removes blocks unreachable from the entry via successors and jump-table
/// references. Asserts that no removed block carries a positive count.
unsigned eliminateUnreachable(Function &F, FlowGraph &Flow);

struct HfsortOptions {
  uint64_t ClusterCap = 2 * 1024 * 1024;
  double DensityBound = 0.5;
};

/// Orders functions by greedy call-graph clustering: arcs in decreasing
/// weight order merge the callee's cluster after the caller's when the
/// merged size stays under the cap and the merged density stays within the
/// bound of the hotter side. Clusters are emitted in decreasing density;
/// functions without call-graph weight and non-simple functions follow in
/// original order.
std::vector<std::string> reorderFunctions(const Program &Prog,
                                          const CallGraph &Calls,
                                          const HfsortOptions &Opts = {});

struct LayoutConfig {
  uint64_t HotBase = 0x400000;
  uint64_t ColdBase = 0x800000;
  uint64_t FuncAlign = 1;
};

struct BlockPlacement {
  std::string Func;
  std::string Label;
  uint64_t Address = 0;
  uint64_t Size = 0;
  bool Cold = false;
};

/// Final addresses for every block, in address order: the hot section of
/// every function first, then the cold parts.
struct LayoutPlan {
  uint64_t HotBase = 0;
  uint64_t HotEnd = 0;
  uint64_t ColdBase = 0;
  uint64_t ColdEnd = 0;
  unsigned RelaxIterations = 0;
  std::vector<BlockPlacement> Order;

  const BlockPlacement *find(const std::string &Func,
                             const std::string &Label) const;
  uint64_t addressOf(const std::string &Func, const std::string &Label) const;
};

/// Assigns final addresses in the given function order, taking each
/// function's layout from its current block order with the first HotBlocks
/// blocks hot and the rest cold. Branch sizes are resolved by monotone
/// relaxation from the short forms (conditional 2 bytes, unconditional 2)
/// to the long forms (6 and 5) whenever a displacement leaves signed 8-bit
/// range. Updates block addresses and branch instruction sizes in place.
/// Throws std::runtime_error when the hot and cold ranges would overlap.
LayoutPlan assignAddresses(Program &Prog,
                           const std::vector<std::string> &FnOrder,
                           const std::map<std::string, size_t> &HotBlocks,
                           const LayoutConfig &Config = {});

/// A plan reproducing the model's current addresses, everything hot.
LayoutPlan identityPlan(const Program &Prog);

struct PipelineConfig {
  bool StripNops = true;
  bool Fold = true;
  bool PromoteCalls = true;
  bool Reorder = true;
  bool Split = true;
  bool RemoveUnreachable = true;
  bool Fixup = true;
  bool ReorderFns = true;
  ReorderAlgorithm Algorithm = ReorderAlgorithm::CachePlus;
  SplitOptions Splitting;
  IcpOptions Icp;
  HfsortOptions Hfsort;
  LayoutConfig Layout;
};

struct PipelineResult {
  Program Model;
  FlowGraph Flow;
  CallGraph Calls;
  IndirectCallProfile Sites;
  LayoutPlan Plan;
  std::vector<std::string> Log;
};

/// Runs the optimization pipeline in its fixed order: strip-nops, fold,
/// indirect-call promotion, fold again, block reordering with splitting,
/// unreachable elimination, branch fixup, function reordering, and address
/// assignment. Disabled passes are skipped and logged as such.
PipelineResult runPipeline(Program Prog, FlowGraph Flow, CallGraph Calls,
                           IndirectCallProfile Sites,
                           const PipelineConfig &Config = {});

} // namespace layopt

#endif // LAYOPT_PASSES_H
