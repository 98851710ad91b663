//===- layopt.cpp - Command-line driver ------------------------------------===//
//
// Part of the layopt project, under the Apache License v2.0.
// SPDX-License-Identifier: Apache-2.0
//
//===----------------------------------------------------------------------===//

#include "layopt/Driver.h"

#include "CLI11.hpp"

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace {

using namespace layopt;

// Aggregates the raw spellings that need validation after parsing.
struct PassFlagBindings {
  int Icf = 1;
  int Icp = 1;
  int StripNops = 1;
  int Uce = 1;
  int Fixup = 1;
  std::string HotBase;
  std::string ColdBase;
};

void addPassOptions(CLI::App *Cmd, PassFlags &Flags, PassFlagBindings &Aux) {
  Cmd->add_option("--reorder-blocks", Flags.ReorderBlocks,
                  "block reordering: none | ph | cache+")
      ->capture_default_str();
  Cmd->add_option("--reorder-functions", Flags.ReorderFunctions,
                  "function reordering: none | hfsort")
      ->capture_default_str();
  Cmd->add_option("--split-functions", Flags.SplitFunctions,
                  "function splitting: none | cold | aggressive")
      ->capture_default_str();
  Cmd->add_option("--icf", Aux.Icf, "fold identical functions: 0 | 1")
      ->capture_default_str();
  Cmd->add_option("--icp", Aux.Icp, "promote indirect calls: 0 | 1")
      ->capture_default_str();
  Cmd->add_option("--strip-nops", Aux.StripNops, "strip nops: 0 | 1")
      ->capture_default_str();
  Cmd->add_option("--uce", Aux.Uce, "remove unreachable blocks: 0 | 1")
      ->capture_default_str();
  Cmd->add_option("--fixup", Aux.Fixup, "fix up branches: 0 | 1")
      ->capture_default_str();
  Cmd->add_option("--icp-threshold", Flags.IcpThreshold,
                  "hottest-target share required to promote")
      ->capture_default_str();
  Cmd->add_option("--hot-base", Aux.HotBase, "hot section base, hex");
  Cmd->add_option("--cold-base", Aux.ColdBase, "cold section base, hex");
}

bool parseHex(const std::string &Text, uint64_t &Value) {
  if (Text.empty())
    return true;
  try {
    size_t Pos = 0;
    Value = std::stoull(Text, &Pos, 16);
    return Pos == Text.size();
  } catch (...) {
    return false;
  }
}

// Folds the raw spellings into the flag struct; prints the diagnostic and
// returns false on a malformed value.
bool applyPassBindings(const PassFlagBindings &Aux, PassFlags &Flags) {
  Flags.Icf = Aux.Icf != 0;
  Flags.Icp = Aux.Icp != 0;
  Flags.StripNops = Aux.StripNops != 0;
  Flags.Uce = Aux.Uce != 0;
  Flags.Fixup = Aux.Fixup != 0;
  if (!parseHex(Aux.HotBase, Flags.HotBase)) {
    std::cerr << "error: args: malformed -hot-base value '" << Aux.HotBase
              << "'\n";
    return false;
  }
  if (!parseHex(Aux.ColdBase, Flags.ColdBase)) {
    std::cerr << "error: args: malformed -cold-base value '" << Aux.ColdBase
              << "'\n";
    return false;
  }
  return true;
}

std::optional<ProfileMode> parseMode(const std::string &Name) {
  if (Name == "lbr")
    return ProfileMode::Lbr;
  if (Name == "samples")
    return ProfileMode::Samples;
  return std::nullopt;
}

} // namespace

int main(int Argc, char **Argv) {
  CLI::App App{"post-link code layout optimizer"};
  App.require_subcommand(1);
  App.set_version_flag("--version", "layopt 1.0");

  OptimizeOptions OptimizeOpts;
  PassFlagBindings OptimizeAux;
  std::string OptimizeMode = "lbr";
  CLI::App *Optimize = App.add_subcommand(
      "optimize", "attribute a trace and optimize the model's layout");
  Optimize->add_option("model", OptimizeOpts.ModelPath, "model file")
      ->required();
  Optimize->add_option("trace", OptimizeOpts.TracePath, "trace file")
      ->required();
  Optimize->add_option("--mode", OptimizeMode, "profile mode: lbr | samples")
      ->capture_default_str();
  Optimize->add_option("-o,--out-model", OptimizeOpts.OutModelPath,
                       "optimized model path (default <model>.opt)");
  Optimize->add_option("--plan-out", OptimizeOpts.OutPlanPath,
                       "layout plan path (default <out-model>.plan)");
  Optimize->add_option("--log-out", OptimizeOpts.OutLogPath,
                       "pass log path (default <out-model>.log)");
  Optimize->add_flag("--dyno-stats", OptimizeOpts.PrintDynoStats,
                     "print branch statistics before and after");
  Optimize->add_option("--emit-profile", OptimizeOpts.EmitProfilePath,
                       "write the attributed profile");
  Optimize->add_option("--heatmap-out", OptimizeOpts.HeatmapOutPath,
                       "write the optimized layout's heat map CSV");
  addPassOptions(Optimize, OptimizeOpts.Passes, OptimizeAux);

  CompareOptions CompareOpts;
  PassFlagBindings CompareAux;
  std::string CompareModeA = "lbr", CompareModeB = "samples";
  PassFlags CompareFlags;
  CLI::App *Compare = App.add_subcommand(
      "compare", "optimize under two configurations and diff the metrics");
  Compare->add_option("model", CompareOpts.ModelPath, "model file")
      ->required();
  Compare->add_option("trace", CompareOpts.TracePath, "trace file")
      ->required();
  Compare->add_option("--mode-a", CompareModeA, "profile mode of side A")
      ->capture_default_str();
  Compare->add_option("--mode-b", CompareModeB, "profile mode of side B")
      ->capture_default_str();
  addPassOptions(Compare, CompareFlags, CompareAux);

  GenOptions GenOpts;
  std::string GenShape = "mixed";
  CLI::App *Gen =
      App.add_subcommand("gen", "generate a synthetic corpus and trace");
  Gen->add_option("--shape", GenShape,
                  "chain | diamond | correlated | locality | mixed")
      ->capture_default_str();
  Gen->add_option("--functions", GenOpts.Functions, "number of functions")
      ->capture_default_str();
  Gen->add_option("--hot-fraction", GenOpts.HotFraction,
                  "fraction of functions that carry weight")
      ->capture_default_str();
  Gen->add_option("--seed", GenOpts.Seed, "generator seed")
      ->capture_default_str();
  Gen->add_option("--stacks", GenOpts.Stacks, "branch stacks to record")
      ->capture_default_str();
  Gen->add_option("--sample-every", GenOpts.SampleEvery,
                  "block visits per instruction-pointer sample, 0 disables")
      ->capture_default_str();
  Gen->add_option("--out-model", GenOpts.OutModelPath, "model output path")
      ->required();
  Gen->add_option("--out-trace", GenOpts.OutTracePath, "trace output path")
      ->required();

  HeatmapOptions HeatOpts;
  std::string HeatMode = "lbr";
  CLI::App *Heat = App.add_subcommand(
      "heatmap", "render the trace's fetch heat map over the current layout");
  Heat->add_option("model", HeatOpts.ModelPath, "model file")->required();
  Heat->add_option("trace", HeatOpts.TracePath, "trace file")->required();
  Heat->add_option("--mode", HeatMode, "profile mode: lbr | samples")
      ->capture_default_str();
  Heat->add_option("--out", HeatOpts.OutCsvPath, "CSV output path")
      ->required();

  StatsOptions StatsOpts;
  std::string StatsMode = "lbr";
  CLI::App *Stats = App.add_subcommand(
      "stats", "print branch statistics for the current layout");
  Stats->add_option("model", StatsOpts.ModelPath, "model file")->required();
  Stats->add_option("trace", StatsOpts.TracePath, "trace file")->required();
  Stats->add_option("--mode", StatsMode, "profile mode: lbr | samples")
      ->capture_default_str();
  Stats->add_option("--emit-profile", StatsOpts.EmitProfilePath,
                    "write the attributed profile");

  std::vector<std::string> Args = normalizeArgs(Argc, Argv);
  std::vector<const char *> ArgPtrs;
  ArgPtrs.reserve(Args.size());
  for (const std::string &Arg : Args)
    ArgPtrs.push_back(Arg.c_str());
  try {
    App.parse(static_cast<int>(ArgPtrs.size()), ArgPtrs.data());
  } catch (const CLI::ParseError &E) {
    if (E.get_exit_code() == 0)
      return App.exit(E);
    std::cerr << "error: args: " << E.what() << "\n";
    return 1;
  }

  if (*Optimize) {
    std::optional<ProfileMode> Mode = parseMode(OptimizeMode);
    if (!Mode) {
      std::cerr << "error: args: unknown --mode value '" << OptimizeMode
                << "'\n";
      return 1;
    }
    OptimizeOpts.Mode = *Mode;
    if (!applyPassBindings(OptimizeAux, OptimizeOpts.Passes))
      return 1;
    return cmdOptimize(OptimizeOpts, std::cout, std::cerr);
  }
  if (*Compare) {
    std::optional<ProfileMode> ModeA = parseMode(CompareModeA);
    std::optional<ProfileMode> ModeB = parseMode(CompareModeB);
    if (!ModeA || !ModeB) {
      std::cerr << "error: args: unknown --mode value '"
                << (ModeA ? CompareModeB : CompareModeA) << "'\n";
      return 1;
    }
    CompareOpts.ModeA = *ModeA;
    CompareOpts.ModeB = *ModeB;
    if (!applyPassBindings(CompareAux, CompareFlags))
      return 1;
    CompareOpts.PassesA = CompareFlags;
    CompareOpts.PassesB = CompareFlags;
    return cmdCompare(CompareOpts, std::cout, std::cerr);
  }
  if (*Gen) {
    std::optional<CorpusShape> Shape = parseCorpusShape(GenShape);
    if (!Shape) {
      std::cerr << "error: args: unknown --shape value '" << GenShape
                << "'\n";
      return 1;
    }
    GenOpts.Shape = *Shape;
    return cmdGen(GenOpts, std::cout, std::cerr);
  }
  if (*Heat) {
    std::optional<ProfileMode> Mode = parseMode(HeatMode);
    if (!Mode) {
      std::cerr << "error: args: unknown --mode value '" << HeatMode << "'\n";
      return 1;
    }
    HeatOpts.Mode = *Mode;
    return cmdHeatmap(HeatOpts, std::cout, std::cerr);
  }
  std::optional<ProfileMode> Mode = parseMode(StatsMode);
  if (!Mode) {
    std::cerr << "error: args: unknown --mode value '" << StatsMode << "'\n";
    return 1;
  }
  StatsOpts.Mode = *Mode;
  return cmdStats(StatsOpts, std::cout, std::cerr);
}
