//===- Driver.cpp - Subcommand entry points for the layopt tool -----------===//
//
// Part of the layopt project, under the Apache License v2.0.
// SPDX-License-Identifier: Apache-2.0
//
//===----------------------------------------------------------------------===//

#include "layopt/Driver.h"

#include "layopt/Model.h"

#include <array>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace layopt {

namespace {

std::string readFile(const std::string &Path) {
  std::ifstream In(Path, std::ios::binary);
  if (!In)
    throw std::runtime_error("cannot open '" + Path + "'");
  std::ostringstream Text;
  Text << In.rdbuf();
  if (In.bad())
    throw std::runtime_error("cannot read '" + Path + "'");
  return Text.str();
}

void writeFile(const std::string &Path, const std::string &Text) {
  std::ofstream Out(Path, std::ios::binary | std::ios::trunc);
  if (!Out)
    throw std::runtime_error("cannot create '" + Path + "'");
  Out << Text;
  Out.flush();
  if (!Out)
    throw std::runtime_error("cannot write '" + Path + "'");
}

int fail(std::ostream &Err, const char *Stage, const std::string &Detail) {
  Err << "error: " << Stage << ": " << Detail << "\n";
  return 1;
}

struct DynoRow {
  const char *Name;
  uint64_t DynoStats::*Field;
};

constexpr DynoRow DynoRows[] = {
    {"executed forward branches", &DynoStats::ExecutedForwardBranches},
    {"taken forward branches", &DynoStats::TakenForwardBranches},
    {"executed backward branches", &DynoStats::ExecutedBackwardBranches},
    {"taken backward branches", &DynoStats::TakenBackwardBranches},
    {"executed unconditional branches", &DynoStats::ExecutedUncondBranches},
    {"executed instructions", &DynoStats::ExecutedInstructions},
    {"total branches", &DynoStats::TotalBranches},
    {"taken branches", &DynoStats::TakenBranches},
    {"non-taken conditional branches", &DynoStats::NonTakenCondBranches},
    {"taken conditional branches", &DynoStats::TakenCondBranches},
};

std::string pctDelta(uint64_t Before, uint64_t After) {
  if (Before == 0)
    return After == 0 ? "+0.0%" : "n/a";
  double Pct = (static_cast<double>(After) - static_cast<double>(Before)) /
               static_cast<double>(Before) * 100.0;
  char Buf[32];
  std::snprintf(Buf, sizeof(Buf), "%+.1f%%", Pct);
  return Buf;
}

void printDynoComparison(std::ostream &Out, const DynoStats &Before,
                         const DynoStats &After) {
  for (const DynoRow &Row : DynoRows) {
    uint64_t B = Before.*(Row.Field);
    uint64_t A = After.*(Row.Field);
    Out << Row.Name << ": " << B << " -> " << A << " (" << pctDelta(B, A)
        << ")\n";
  }
}

struct ParsedInputs {
  Program Prog;
  TraceData Trace;
};

// Shared front half of every subcommand that consumes a model and a trace.
// Returns nonzero after printing the diagnostic.
int loadInputs(const std::string &ModelPath, const std::string &TracePath,
               ParsedInputs &Inputs, std::ostream &Err) {
  if (ModelPath.empty() || TracePath.empty())
    return fail(Err, "args", "model and trace paths are required");
  std::string ModelText, TraceText;
  try {
    ModelText = readFile(ModelPath);
    TraceText = readFile(TracePath);
  } catch (const std::exception &E) {
    return fail(Err, "read", E.what());
  }
  try {
    Inputs.Prog = parseModel(ModelText);
  } catch (const ParseError &E) {
    return fail(Err, "model", E.what());
  }
  Inputs.Trace = parseTrace(TraceText);
  return 0;
}

} // namespace

PipelineConfig makePipelineConfig(const PassFlags &Flags) {
  PipelineConfig Config;
  if (Flags.ReorderBlocks == "none") {
    Config.Reorder = false;
    Config.Algorithm = ReorderAlgorithm::None;
  } else if (Flags.ReorderBlocks == "ph") {
    Config.Algorithm = ReorderAlgorithm::PettisHansen;
  } else if (Flags.ReorderBlocks == "cache+") {
    Config.Algorithm = ReorderAlgorithm::CachePlus;
  } else {
    throw std::invalid_argument("unknown -reorder-blocks value '" +
                                Flags.ReorderBlocks + "'");
  }
  if (Flags.ReorderFunctions == "none") {
    Config.ReorderFns = false;
  } else if (Flags.ReorderFunctions != "hfsort") {
    throw std::invalid_argument("unknown -reorder-functions value '" +
                                Flags.ReorderFunctions + "'");
  }
  if (Flags.SplitFunctions == "none") {
    Config.Split = false;
  } else if (Flags.SplitFunctions == "cold") {
    Config.Splitting.Mode = SplitMode::ColdOnly;
  } else if (Flags.SplitFunctions == "aggressive") {
    Config.Splitting.Mode = SplitMode::Aggressive;
  } else {
    throw std::invalid_argument("unknown -split-functions value '" +
                                Flags.SplitFunctions + "'");
  }
  if (Flags.IcpThreshold <= 0.0 || Flags.IcpThreshold > 1.0)
    throw std::invalid_argument("-icp-threshold must lie in (0, 1]");
  Config.Fold = Flags.Icf;
  Config.PromoteCalls = Flags.Icp;
  Config.StripNops = Flags.StripNops;
  Config.RemoveUnreachable = Flags.Uce;
  Config.Fixup = Flags.Fixup;
  Config.Icp.Threshold = Flags.IcpThreshold;
  Config.Layout.HotBase = Flags.HotBase;
  Config.Layout.ColdBase = Flags.ColdBase;
  return Config;
}

ProfileBundle buildProfile(const Program &Prog, const TraceData &Trace,
                           ProfileMode Mode) {
  ProfileBundle Bundle;
  std::ostringstream Summary;
  if (Mode == ProfileMode::Lbr) {
    AttributionResult R = attributeLbr(Prog, Trace.Stacks);
    Bundle.Flow = std::move(R.Flow);
    Bundle.Calls = std::move(R.Calls);
    Bundle.Sites = std::move(R.IndirectSites);
    Summary << "profile: " << Trace.Stacks.size() << " stacks, "
            << R.Stats.TakenAttributed << " taken branches, "
            << R.Stats.FallthroughsInferred << " fall-throughs inferred, "
            << R.Stats.DroppedEntries + R.Stats.InconsistentPairs
            << " dropped";
  } else {
    SampleCounts Counts = attributeSamples(Prog, Trace.Samples);
    Bundle.Flow = inferEdgesFromCounts(Prog, Counts);
    Summary << "profile: " << Trace.Samples.size() << " samples, "
            << Counts.Dropped
            << " dropped, edges inferred from block counts";
  }
  Bundle.Reconcile = reconcileFlow(Prog, Bundle.Flow);
  if (Bundle.Calls.Edges.empty())
    Bundle.Calls = buildCallGraphNoLbr(Prog, Bundle.Flow);
  Bundle.Summary = Summary.str();
  return Bundle;
}

std::string serializeLayoutPlan(const LayoutPlan &Plan) {
  std::ostringstream Out;
  Out << "PLAN v1\n";
  Out << std::hex;
  Out << "H 0x" << Plan.HotBase << " 0x" << Plan.HotEnd << "\n";
  Out << "C 0x" << Plan.ColdBase << " 0x" << Plan.ColdEnd << "\n";
  for (const BlockPlacement &P : Plan.Order)
    Out << "P " << P.Func << " " << P.Label << " 0x" << P.Address << " "
        << std::dec << P.Size << std::hex << " " << (P.Cold ? "cold" : "hot")
        << "\n";
  return Out.str();
}

int cmdOptimize(const OptimizeOptions &Opts, std::ostream &Out,
                std::ostream &Err) {
  PipelineConfig Config;
  try {
    Config = makePipelineConfig(Opts.Passes);
  } catch (const std::invalid_argument &E) {
    return fail(Err, "args", E.what());
  }
  ParsedInputs Inputs;
  if (int Rc = loadInputs(Opts.ModelPath, Opts.TracePath, Inputs, Err))
    return Rc;

  ProfileBundle Prof;
  try {
    Prof = buildProfile(Inputs.Prog, Inputs.Trace, Opts.Mode);
  } catch (const std::exception &E) {
    return fail(Err, "profile", E.what());
  }

  PipelineResult Result;
  DynoStats Before, After;
  try {
    if (Opts.PrintDynoStats)
      Before = dynoStats(Inputs.Prog, identityPlan(Inputs.Prog), Prof.Flow);
    Result = runPipeline(Inputs.Prog, Prof.Flow, Prof.Calls, Prof.Sites,
                         Config);
    if (Opts.PrintDynoStats)
      After = dynoStats(Result.Model, Result.Plan, Result.Flow);
  } catch (const std::exception &E) {
    return fail(Err, "pipeline", E.what());
  }

  std::string OutModel =
      Opts.OutModelPath.empty() ? Opts.ModelPath + ".opt" : Opts.OutModelPath;
  std::string OutPlan =
      Opts.OutPlanPath.empty() ? OutModel + ".plan" : Opts.OutPlanPath;
  std::string OutLog =
      Opts.OutLogPath.empty() ? OutModel + ".log" : Opts.OutLogPath;
  try {
    writeFile(OutModel, serializeModel(Result.Model));
    writeFile(OutPlan, serializeLayoutPlan(Result.Plan));
    std::ostringstream Log;
    Log << Prof.Summary << "\n";
    for (const std::string &Line : Result.Log)
      Log << Line << "\n";
    writeFile(OutLog, Log.str());
    if (!Opts.EmitProfilePath.empty())
      writeFile(Opts.EmitProfilePath,
                serializeProfile(Prof.Flow, Prof.Calls));
    if (!Opts.HeatmapOutPath.empty()) {
      HeatMap Map =
          Opts.Mode == ProfileMode::Samples
              ? heatMap(Inputs.Prog, Inputs.Trace.Samples)
              : heatMap(Result.Plan, expandFetchStream(Inputs.Prog,
                                                       Result.Plan,
                                                       Inputs.Trace.Stacks));
      writeFile(Opts.HeatmapOutPath, serializeHeatMapCsv(Map));
    }
  } catch (const std::exception &E) {
    return fail(Err, "write", E.what());
  }

  Out << Prof.Summary << "\n";
  for (const std::string &Line : Result.Log)
    Out << Line << "\n";
  if (Opts.PrintDynoStats)
    printDynoComparison(Out, Before, After);
  return 0;
}

namespace {

// Everything cmdCompare reports about one configuration.
struct CompareSide {
  ProfileBundle Prof;
  PipelineResult Result;
  DynoStats Dyno;
  CacheStats Cache;
  uint64_t Span = 0;
};

// The three scenario rows: function reordering alone, block reordering with
// splitting alone, and both together.
struct ScenarioMetrics {
  uint64_t Taken = 0;
  uint64_t Icache = 0;
  uint64_t Span = 0;
};

ScenarioMetrics runScenario(const Program &Prog, const ProfileBundle &Prof,
                            const std::vector<LbrStack> &Stacks,
                            const PassFlags &Flags) {
  PipelineResult R = runPipeline(Prog, Prof.Flow, Prof.Calls, Prof.Sites,
                                 makePipelineConfig(Flags));
  ScenarioMetrics M;
  M.Taken = dynoStats(R.Model, R.Plan, R.Flow).TakenBranches;
  M.Icache = simulateIcache(expandFetchStream(Prog, R.Plan, Stacks)).IcacheMisses;
  M.Span = hotSpan(R.Plan, R.Flow, 0.99);
  return M;
}

CompareSide runCompareSide(const Program &Prog, const TraceData &Trace,
                           ProfileMode Mode, const PassFlags &Flags) {
  CompareSide Side;
  Side.Prof = buildProfile(Prog, Trace, Mode);
  Side.Result = runPipeline(Prog, Side.Prof.Flow, Side.Prof.Calls,
                            Side.Prof.Sites, makePipelineConfig(Flags));
  Side.Dyno = dynoStats(Side.Result.Model, Side.Result.Plan,
                        Side.Result.Flow);
  Side.Cache = simulateIcache(
      expandFetchStream(Prog, Side.Result.Plan, Trace.Stacks));
  Side.Span = hotSpan(Side.Result.Plan, Side.Result.Flow, 0.99);
  return Side;
}

const char *modeName(ProfileMode Mode) {
  return Mode == ProfileMode::Lbr ? "lbr" : "samples";
}

} // namespace

int cmdCompare(const CompareOptions &Opts, std::ostream &Out,
               std::ostream &Err) {
  try {
    makePipelineConfig(Opts.PassesA);
    makePipelineConfig(Opts.PassesB);
  } catch (const std::invalid_argument &E) {
    return fail(Err, "args", E.what());
  }
  ParsedInputs Inputs;
  if (int Rc = loadInputs(Opts.ModelPath, Opts.TracePath, Inputs, Err))
    return Rc;

  CompareSide A, B;
  ScenarioMetrics ScenA[3], ScenB[3];
  try {
    A = runCompareSide(Inputs.Prog, Inputs.Trace, Opts.ModeA, Opts.PassesA);
    B = runCompareSide(Inputs.Prog, Inputs.Trace, Opts.ModeB, Opts.PassesB);
    auto scenarios = [](const PassFlags &Base) {
      PassFlags Funcs = Base, Blocks = Base, Both = Base;
      Funcs.ReorderBlocks = "none";
      Funcs.SplitFunctions = "none";
      Funcs.ReorderFunctions = "hfsort";
      Blocks.ReorderBlocks = Base.ReorderBlocks == "none" ? "cache+"
                                                          : Base.ReorderBlocks;
      Blocks.SplitFunctions =
          Base.SplitFunctions == "none" ? "cold" : Base.SplitFunctions;
      Blocks.ReorderFunctions = "none";
      Both.ReorderBlocks = Blocks.ReorderBlocks;
      Both.SplitFunctions = Blocks.SplitFunctions;
      Both.ReorderFunctions = "hfsort";
      return std::array<PassFlags, 3>{Funcs, Blocks, Both};
    };
    std::array<PassFlags, 3> FlagsA = scenarios(Opts.PassesA);
    std::array<PassFlags, 3> FlagsB = scenarios(Opts.PassesB);
    for (int I = 0; I < 3; ++I) {
      ScenA[I] = runScenario(Inputs.Prog, A.Prof, Inputs.Trace.Stacks,
                             FlagsA[I]);
      ScenB[I] = runScenario(Inputs.Prog, B.Prof, Inputs.Trace.Stacks,
                             FlagsB[I]);
    }
  } catch (const std::exception &E) {
    return fail(Err, "pipeline", E.what());
  }

  Out << "comparison: A=" << modeName(Opts.ModeA)
      << " B=" << modeName(Opts.ModeB) << "\n";
  for (const DynoRow &Row : DynoRows) {
    uint64_t VA = A.Dyno.*(Row.Field);
    uint64_t VB = B.Dyno.*(Row.Field);
    Out << Row.Name << ": A=" << VA << " B=" << VB << " ("
        << pctDelta(VA, VB) << ")\n";
  }
  Out << "icache misses: A=" << A.Cache.IcacheMisses
      << " B=" << B.Cache.IcacheMisses << " ("
      << pctDelta(A.Cache.IcacheMisses, B.Cache.IcacheMisses) << ")\n";
  Out << "itlb misses: A=" << A.Cache.ItlbMisses
      << " B=" << B.Cache.ItlbMisses << " ("
      << pctDelta(A.Cache.ItlbMisses, B.Cache.ItlbMisses) << ")\n";
  Out << "hot span: A=" << A.Span << " B=" << B.Span << " ("
      << pctDelta(A.Span, B.Span) << ")\n";
  const char *ScenNames[3] = {"functions", "bbs", "both"};
  for (int I = 0; I < 3; ++I)
    Out << "scenario " << ScenNames[I] << ": taken A=" << ScenA[I].Taken
        << " B=" << ScenB[I].Taken << ", icache A=" << ScenA[I].Icache
        << " B=" << ScenB[I].Icache << ", span A=" << ScenA[I].Span
        << " B=" << ScenB[I].Span << "\n";
  return 0;
}

int cmdGen(const GenOptions &Opts, std::ostream &Out, std::ostream &Err) {
  if (Opts.OutModelPath.empty() || Opts.OutTracePath.empty())
    return fail(Err, "args", "output model and trace paths are required");
  Workload Load;
  try {
    WorkloadOptions WO;
    WO.Shape = Opts.Shape;
    WO.Functions = Opts.Functions;
    WO.HotFraction = Opts.HotFraction;
    WO.Seed = Opts.Seed;
    Load = generateWorkload(WO);
  } catch (const std::invalid_argument &E) {
    return fail(Err, "args", E.what());
  }

  bool AnyWeight = false;
  for (const auto &[Name, Prof] : Load.Weights.Functions)
    if (Prof.EntryCount > 0)
      AnyWeight = true;
  TraceData Trace;
  if (AnyWeight) {
    TraceGenOptions TG;
    TG.Seed = Opts.Seed;
    TG.NumStacks = Opts.Stacks;
    TG.Depth = MaxLbrDepth;
    TG.SampleEvery = Opts.SampleEvery;
    TraceGenResult R = generateTrace(Load.Model, Load.Weights, TG);
    Trace.Stacks = std::move(R.Stacks);
    Trace.Samples = std::move(R.Samples);
  }

  try {
    writeFile(Opts.OutModelPath, serializeModel(Load.Model));
    writeFile(Opts.OutTracePath, renderTrace(Trace));
  } catch (const std::exception &E) {
    return fail(Err, "write", E.what());
  }
  Out << "generated " << corpusShapeName(Opts.Shape) << " corpus: "
      << Load.Model.Functions.size() << " functions, " << Trace.Stacks.size()
      << " stacks, " << Trace.Samples.size() << " samples\n";
  return 0;
}

int cmdHeatmap(const HeatmapOptions &Opts, std::ostream &Out,
               std::ostream &Err) {
  if (Opts.OutCsvPath.empty())
    return fail(Err, "args", "an output path for the heat map is required");
  ParsedInputs Inputs;
  if (int Rc = loadInputs(Opts.ModelPath, Opts.TracePath, Inputs, Err))
    return Rc;
  HeatMap Map;
  try {
    if (Opts.Mode == ProfileMode::Samples) {
      Map = heatMap(Inputs.Prog, Inputs.Trace.Samples);
    } else {
      LayoutPlan Plan = identityPlan(Inputs.Prog);
      Map = heatMap(Plan,
                    expandFetchStream(Inputs.Prog, Plan, Inputs.Trace.Stacks));
    }
  } catch (const std::exception &E) {
    return fail(Err, "stats", E.what());
  }
  try {
    writeFile(Opts.OutCsvPath, serializeHeatMapCsv(Map));
  } catch (const std::exception &E) {
    return fail(Err, "write", E.what());
  }
  Out << "heat map: " << Map.BytesPerCell << " bytes per cell\n";
  return 0;
}

int cmdStats(const StatsOptions &Opts, std::ostream &Out, std::ostream &Err) {
  ParsedInputs Inputs;
  if (int Rc = loadInputs(Opts.ModelPath, Opts.TracePath, Inputs, Err))
    return Rc;
  ProfileBundle Prof;
  DynoStats Stats;
  try {
    Prof = buildProfile(Inputs.Prog, Inputs.Trace, Opts.Mode);
    Stats = dynoStats(Inputs.Prog, identityPlan(Inputs.Prog), Prof.Flow);
  } catch (const std::exception &E) {
    return fail(Err, "stats", E.what());
  }
  if (!Opts.EmitProfilePath.empty()) {
    try {
      writeFile(Opts.EmitProfilePath,
                serializeProfile(Prof.Flow, Prof.Calls));
    } catch (const std::exception &E) {
      return fail(Err, "write", E.what());
    }
  }
  Out << Prof.Summary << "\n";
  Out << serializeDynoStats(Stats);
  std::map<std::string, double> Accuracy =
      profileAccuracy(Inputs.Prog, Prof.Flow);
  if (Accuracy.empty()) {
    Out << "flow conservation: no profile\n";
  } else {
    double Min = 1.0, Sum = 0.0;
    for (const auto &[Name, Value] : Accuracy) {
      Min = Value < Min ? Value : Min;
      Sum += Value;
    }
    char Buf[96];
    std::snprintf(Buf, sizeof(Buf),
                  "flow conservation: min %.4f mean %.4f over %zu functions\n",
                  Min, Sum / static_cast<double>(Accuracy.size()),
                  Accuracy.size());
    Out << Buf;
  }
  return 0;
}

std::vector<std::string> normalizeArgs(int Argc, const char *const *Argv) {
  std::vector<std::string> Args;
  Args.reserve(static_cast<size_t>(Argc));
  for (int I = 0; I < Argc; ++I) {
    std::string Arg = Argv[I];
    if (Arg.size() > 2 && Arg[0] == '-' && Arg[1] != '-' &&
        std::isalpha(static_cast<unsigned char>(Arg[1]))) {
      size_t NameEnd = Arg.find('=');
      size_t NameLen = (NameEnd == std::string::npos ? Arg.size() : NameEnd) - 1;
      if (NameLen >= 2) {
        Arg.insert(Arg.begin(), '-');
      } else if (NameEnd == 2) {
        Args.push_back(Arg.substr(0, 2));
        Args.push_back(Arg.substr(3));
        continue;
      }
    }
    Args.push_back(std::move(Arg));
  }
  return Args;
}

} // namespace layopt
