//===- Evaluation.h - Layout quality metrics --------------------*- C++ -*-===//
//
// Part of the layopt project, under the Apache License v2.0.
// SPDX-License-Identifier: Apache-2.0
//
//===----------------------------------------------------------------------===//
//
// Measures a layout against a profile: dynamic branch statistics, a
// trace-driven instruction-cache and TLB proxy simulation, byte-fetch heat
// maps, the hot-address span, and a report of cold blocks stranded between
// hot ones.
//
//===----------------------------------------------------------------------===//

#ifndef LAYOPT_EVALUATION_H
#define LAYOPT_EVALUATION_H

#include "layopt/Model.h"
#include "layopt/Passes.h"
#include "layopt/Profile.h"
#include "layopt/Trace.h"

#include <cstdint>
#include <string>
#include <vector>

namespace layopt {

/// Dynamic execution statistics of a profiled layout. The directional rows
/// cover conditional branches only; unconditional and indirect branches are
/// always counted as taken, so the identities
///   taken conditional + non-taken conditional = executed forward + backward
///   taken branches = taken conditional + executed unconditional
///   total branches = executed conditional + executed unconditional
/// hold for every (model, plan, flow) triple.
struct DynoStats {
  uint64_t ExecutedForwardBranches = 0;
  uint64_t TakenForwardBranches = 0;
  uint64_t ExecutedBackwardBranches = 0;
  uint64_t TakenBackwardBranches = 0;
  uint64_t ExecutedUncondBranches = 0;
  uint64_t ExecutedInstructions = 0;
  uint64_t TotalBranches = 0;
  uint64_t TakenBranches = 0;
  uint64_t NonTakenCondBranches = 0;
  uint64_t TakenCondBranches = 0;

  friend bool operator==(const DynoStats &, const DynoStats &) = default;
};

/// Counts every profiled branch execution under the given final layout. An
/// edge execution is taken unless its destination starts exactly where the
/// source block ends in the same section; a conditional branch is forward
/// when its target's final address is above the branch's final address.
/// Executed instructions are block counts times block lengths. Throws
/// std::runtime_error when flow references a function or block that the
/// model or plan does not cover.
DynoStats dynoStats(const Program &Prog, const LayoutPlan &Plan,
                    const FlowGraph &Flow);

/// One "name: value" line per counter, in table order.
std::string serializeDynoStats(const DynoStats &Stats);

struct CacheConfig {
  uint64_t CacheSize = 32 * 1024;
  uint64_t LineSize = 64;
  unsigned Associativity = 8;
  uint64_t PageSize = 4096;
  unsigned TlbEntries = 128;
};

struct CacheStats {
  uint64_t IcacheMisses = 0;
  uint64_t ItlbMisses = 0;
  uint64_t FetchedBytes = 0;
  uint64_t LineFetches = 0;
  uint64_t Skipped = 0;
};

/// The byte ranges a trace fetches, in execution order, in final addresses.
struct FetchStream {
  std::vector<std::pair<uint64_t, uint64_t>> Ranges; // (address, size)
  uint64_t Skipped = 0;
};

/// Map every straight-line segment of the stacks onto the plan: each block
/// of a segment contributes its placed range. Segments whose blocks the
/// plan does not cover are skipped and counted.
FetchStream expandFetchStream(const Program &Prog, const LayoutPlan &Plan,
                              const std::vector<LbrStack> &Stacks);

/// Replay a fetch stream through a set-associative LRU instruction cache
/// and a fully associative LRU TLB: every line of every range is fetched in
/// order and its page looked up. Throws std::invalid_argument unless cache
/// size, line size, and page size are powers of two forming at least one
/// set.
CacheStats simulateIcache(const FetchStream &Stream,
                          const CacheConfig &Config = {});
CacheStats simulateIcache(const Program &Prog, const LayoutPlan &Plan,
                          const std::vector<LbrStack> &Stacks,
                          const CacheConfig &Config = {});

/// A 64x64 grid over the address space, row-major: cell (y, x) covers bytes
/// [(64y + x) * BytesPerCell, ...). Cells holds ln(1 + mean fetches per
/// byte); CellBytes holds the raw fetched-byte totals.
struct HeatMap {
  uint64_t BytesPerCell = 1;
  std::vector<uint64_t> CellBytes; // 4096 entries
  std::vector<double> Cells;       // 4096 entries
};

/// Accumulate fetched byte ranges over [Base, Base + TotalSize), with
/// BytesPerCell = ceil(TotalSize / 4096). Bytes outside the window are
/// ignored. TotalSize must be at least 1.
HeatMap heatMap(uint64_t TotalSize, uint64_t Base, const FetchStream &Stream);
/// Grid over the plan's address window, from the hot base to the last
/// placed byte.
HeatMap heatMap(const LayoutPlan &Plan, const FetchStream &Stream);
/// Grid over the model's text span; every sample counts as one fetched byte
/// at its address.
HeatMap heatMap(const Program &Prog, const std::vector<IpSample> &Samples);

/// 64 lines of 64 comma-separated cell values with four decimal places.
std::string serializeHeatMapCsv(const HeatMap &Map);

/// Size in bytes of the smallest contiguous final-address interval whose
/// blocks hold at least Coverage of the profile's total block count mass.
/// Coverage must lie in (0, 1]; zero total mass yields zero.
uint64_t hotSpan(const LayoutPlan &Plan, const FlowGraph &Flow,
                 double Coverage);

/// A zero-count block placed between two hot blocks of the same function
/// and section.
struct BadLayoutFinding {
  std::string Func;
  std::string Label;
  std::string PrevLabel;
  std::string NextLabel;
  uint64_t PrevCount = 0;
  uint64_t NextCount = 0;
};

/// Scan every function's final layout for zero-count blocks whose both
/// neighbors (same section) execute at least HotThreshold times.
std::vector<BadLayoutFinding> reportBadLayout(const Program &Prog,
                                              const FlowGraph &Flow,
                                              const LayoutPlan &Plan,
                                              uint64_t HotThreshold);

} // namespace layopt

#endif // LAYOPT_EVALUATION_H
