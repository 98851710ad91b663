//===- Trace.h - Branch record and sample traces ----------------*- C++ -*-===//
//
// Part of the layopt project, under the Apache License v2.0.
// SPDX-License-Identifier: Apache-2.0
//
//===----------------------------------------------------------------------===//
//
// Hardware-style execution evidence: stacks of the last taken branches
// (from, to, mispredict flag) and plain instruction-pointer samples. A trace
// file carries one record per line; see parseTrace for the grammar.
//
//===----------------------------------------------------------------------===//

#ifndef LAYOPT_TRACE_H
#define LAYOPT_TRACE_H

#include "layopt/Model.h"

#include <cstdint>
#include <map>
#include <string>
#include <tuple>
#include <vector>

namespace layopt {

struct FlowGraph;

constexpr size_t MaxLbrDepth = 32;

struct LbrEntry {
  uint64_t From = 0;
  uint64_t To = 0;
  bool Mispredicted = false;
};

// Newest entry first, like a hardware branch record dump.
struct LbrStack {
  std::vector<LbrEntry> Entries;
};

struct IpSample {
  uint64_t Ip = 0;
};

struct TraceData {
  std::vector<LbrStack> Stacks;
  std::vector<IpSample> Samples;
  size_t MalformedLines = 0;
};

// Line grammar:
//   S 0x<ip>
//   L <from>/<to>/<P|M> <from>/<to>/<P|M> ...   (newest first, at most 32)
// Unparseable lines and oversized stacks are skipped and counted.
TraceData parseTrace(const std::string &Text);

std::string renderTrace(const TraceData &Trace);

struct TraceGenOptions {
  uint64_t Seed = 1;
  size_t NumStacks = 1000;
  size_t Depth = MaxLbrDepth;
  double MispredictProb = 0.02;
  // Emit one instruction-pointer sample every N block visits (0 = none).
  size_t SampleEvery = 0;
};

// (function, source label, destination label)
using EdgeId = std::tuple<std::string, std::string, std::string>;

struct TraceGenResult {
  std::vector<LbrStack> Stacks;
  std::vector<IpSample> Samples;
  // Ground truth for closed-loop tests: exact traversal counts of the walks
  // that produced the stacks.
  std::map<EdgeId, uint64_t> TakenCounts;
  std::map<EdgeId, uint64_t> EdgeCounts;
  std::map<std::string, uint64_t> EntryCounts;
  // Walks that ended with no recordable branch at all.
  size_t EmptyStacks = 0;
  // Restarts forced by a block with no successors and no return.
  size_t TrapRestarts = 0;
};

// Random-walk the CFG with out-edge probabilities proportional to the edge
// weights in Weights, recording a branch entry exactly when a walk leaves a
// block by a non-fall-through edge. A walk that reaches a return restarts at
// a function entry chosen by entry weight. Deterministic for a given seed.
TraceGenResult generateTrace(const Program &Prog, const FlowGraph &Weights,
                             const TraceGenOptions &Opts);

} // namespace layopt

#endif // LAYOPT_TRACE_H
