//===- Driver.h - Subcommand entry points for the layopt tool ---*- C++ -*-===//
//
// Part of the layopt project, under the Apache License v2.0.
// SPDX-License-Identifier: Apache-2.0
//
//===----------------------------------------------------------------------===//
//
// The logic behind every layopt subcommand, separated from argument parsing
// so tests can drive it directly. Every entry point returns the process exit
// status: zero exactly when all requested artifacts were written. Failures
// print a single line of the form "error: <stage>: <detail>" to the error
// stream.
//
//===----------------------------------------------------------------------===//

#ifndef LAYOPT_DRIVER_H
#define LAYOPT_DRIVER_H

#include "layopt/Evaluation.h"
#include "layopt/Passes.h"
#include "layopt/Profile.h"
#include "layopt/Trace.h"
#include "layopt/Workload.h"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace layopt {

enum class ProfileMode { Lbr, Samples };

// Pass selection as spelled on the command line; makePipelineConfig
// validates the spellings.
struct PassFlags {
  std::string ReorderBlocks = "cache+";    // none | ph | cache+
  std::string ReorderFunctions = "hfsort"; // none | hfsort
  std::string SplitFunctions = "cold";     // none | cold | aggressive
  bool Icf = true;
  bool Icp = true;
  bool StripNops = true;
  bool Uce = true;
  bool Fixup = true;
  double IcpThreshold = 0.90;
  uint64_t HotBase = 0x400000;
  uint64_t ColdBase = 0x800000;

  friend bool operator==(const PassFlags &, const PassFlags &) = default;
};

// Translates flag spellings into a pipeline configuration. Throws
// std::invalid_argument on an unknown spelling or a threshold outside (0, 1].
PipelineConfig makePipelineConfig(const PassFlags &Flags);

// The profile both attribution modes reduce to.
struct ProfileBundle {
  FlowGraph Flow;
  CallGraph Calls;
  IndirectCallProfile Sites;
  ReconcileStats Reconcile;
  // One human-readable line about what was attributed.
  std::string Summary;
};

// Attribute a trace against the model and reconcile the result. Lbr mode
// consumes the branch stacks; Samples mode consumes only the instruction
// pointer samples and infers edges from block counts. When the records give
// no call arcs, direct calls weighted by block counts fill the call graph.
ProfileBundle buildProfile(const Program &Prog, const TraceData &Trace,
                           ProfileMode Mode);

// Plan file format, one placement per line:
//   PLAN v1
//   H 0x<hot-base> 0x<hot-end>
//   C 0x<cold-base> 0x<cold-end>
//   P <func> <label> 0x<address> <size> hot|cold
std::string serializeLayoutPlan(const LayoutPlan &Plan);

struct OptimizeOptions {
  std::string ModelPath;
  std::string TracePath;
  ProfileMode Mode = ProfileMode::Lbr;
  PassFlags Passes;
  bool PrintDynoStats = false;
  std::string OutModelPath; // default: <model>.opt
  std::string OutPlanPath;  // default: <out-model>.plan
  std::string OutLogPath;   // default: <out-model>.log
  std::string EmitProfilePath;
  std::string HeatmapOutPath;
};

// Parse, attribute, run the pipeline, and write the optimized model, the
// layout plan, and the pass log.
int cmdOptimize(const OptimizeOptions &Opts, std::ostream &Out,
                std::ostream &Err);

struct CompareOptions {
  std::string ModelPath;
  std::string TracePath;
  ProfileMode ModeA = ProfileMode::Lbr;
  ProfileMode ModeB = ProfileMode::Samples;
  PassFlags PassesA;
  PassFlags PassesB;
};

// Run the pipeline under both configurations on the same inputs and print
// the metrics side by side with relative deltas, followed by the
// functions-only / blocks-only / combined scenario breakdown for each side.
int cmdCompare(const CompareOptions &Opts, std::ostream &Out,
               std::ostream &Err);

struct GenOptions {
  CorpusShape Shape = CorpusShape::Mixed;
  size_t Functions = 20;
  double HotFraction = 0.1;
  uint64_t Seed = 1;
  size_t Stacks = 2000;
  size_t SampleEvery = 4; // 0 disables instruction-pointer samples
  std::string OutModelPath;
  std::string OutTracePath;
};

// Generate a corpus and its trace. The same options produce byte-identical
// files. An all-cold corpus yields an empty trace.
int cmdGen(const GenOptions &Opts, std::ostream &Out, std::ostream &Err);

struct HeatmapOptions {
  std::string ModelPath;
  std::string TracePath;
  ProfileMode Mode = ProfileMode::Lbr;
  std::string OutCsvPath;
};

// Render the fetch heat map of the trace over the model's current layout.
int cmdHeatmap(const HeatmapOptions &Opts, std::ostream &Out,
               std::ostream &Err);

struct StatsOptions {
  std::string ModelPath;
  std::string TracePath;
  ProfileMode Mode = ProfileMode::Lbr;
  std::string EmitProfilePath;
};

// Print the branch statistics of the current layout under the attributed
// profile, plus attribution and flow-conservation summaries.
int cmdStats(const StatsOptions &Opts, std::ostream &Out, std::ostream &Err);

// Rewrites single-dash long options ("-reorder-blocks=ph") to their
// double-dash form so the parser accepts both spellings, and splits
// "-o=path" into "-o path". Bare short options and negative numbers pass
// through untouched.
std::vector<std::string> normalizeArgs(int Argc, const char *const *Argv);

} // namespace layopt

#endif // LAYOPT_DRIVER_H
