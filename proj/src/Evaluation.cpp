//===- Evaluation.cpp - Layout quality metrics -----------------------------===//
//
// Part of the layopt project, under the Apache License v2.0.
// SPDX-License-Identifier: Apache-2.0
//
//===----------------------------------------------------------------------===//

#include "layopt/Evaluation.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace layopt {

namespace {

bool isPowerOfTwo(uint64_t X) { return X != 0 && (X & (X - 1)) == 0; }

// An LRU array of fixed capacity: most recent at the back.
class LruSet {
public:
  explicit LruSet(size_t Capacity) : Capacity(Capacity) {}

  // Returns true on a miss.
  bool access(uint64_t Key) {
    auto It = std::find(Entries.begin(), Entries.end(), Key);
    if (It != Entries.end()) {
      Entries.erase(It);
      Entries.push_back(Key);
      return false;
    }
    if (Entries.size() == Capacity)
      Entries.erase(Entries.begin());
    Entries.push_back(Key);
    return true;
  }

private:
  size_t Capacity;
  std::vector<uint64_t> Entries;
};

} // namespace

//===----------------------------------------------------------------------===//
// Dynamic branch statistics
//===----------------------------------------------------------------------===//

DynoStats dynoStats(const Program &Prog, const LayoutPlan &Plan,
                    const FlowGraph &Flow) {
  DynoStats S;
  for (const auto &[Name, FP] : Flow.Functions) {
    const Function *F = Prog.function(Name);
    if (!F)
      throw std::runtime_error("dyno-stats: function '" + Name +
                               "' not in the model");
    for (const BasicBlock &B : F->Blocks)
      S.ExecutedInstructions += FP.blockCount(B.Label) * B.Insts.size();

    for (const auto &[Key, E] : FP.Edges) {
      const auto &[Src, Dst] = Key;
      int BI = F->blockIndex(Src);
      const BlockPlacement *PS = Plan.find(Name, Src);
      const BlockPlacement *PD = Plan.find(Name, Dst);
      if (BI < 0 || !PS || !PD)
        throw std::runtime_error("dyno-stats: edge " + Name + ":" + Src +
                                 "->" + Dst + " not covered by the plan");
      const BasicBlock &B = F->Blocks[BI];
      const Instruction *T = B.terminator();
      if (!T || T->Kind == InstKind::Return)
        continue; // pure fall-through: no branch executes

      bool LayoutFall =
          PS->Cold == PD->Cold && PD->Address == PS->Address + PS->Size;
      if (T->Kind == InstKind::CondBranch) {
        uint64_t BranchAddr = PS->Address + B.terminatorOffset();
        bool Forward = Plan.addressOf(Name, T->Target) > BranchAddr;
        (Forward ? S.ExecutedForwardBranches : S.ExecutedBackwardBranches) +=
            E.Count;
        if (LayoutFall) {
          S.NonTakenCondBranches += E.Count;
        } else {
          (Forward ? S.TakenForwardBranches : S.TakenBackwardBranches) +=
              E.Count;
          S.TakenCondBranches += E.Count;
        }
      } else {
        S.ExecutedUncondBranches += E.Count;
      }
    }
  }
  S.TotalBranches = S.ExecutedForwardBranches + S.ExecutedBackwardBranches +
                    S.ExecutedUncondBranches;
  S.TakenBranches = S.TakenCondBranches + S.ExecutedUncondBranches;
  return S;
}

std::string serializeDynoStats(const DynoStats &Stats) {
  std::ostringstream Out;
  Out << "executed forward branches: " << Stats.ExecutedForwardBranches
      << "\ntaken forward branches: " << Stats.TakenForwardBranches
      << "\nexecuted backward branches: " << Stats.ExecutedBackwardBranches
      << "\ntaken backward branches: " << Stats.TakenBackwardBranches
      << "\nexecuted unconditional branches: " << Stats.ExecutedUncondBranches
      << "\nexecuted instructions: " << Stats.ExecutedInstructions
      << "\ntotal branches: " << Stats.TotalBranches
      << "\ntaken branches: " << Stats.TakenBranches
      << "\nnon-taken conditional branches: " << Stats.NonTakenCondBranches
      << "\ntaken conditional branches: " << Stats.TakenCondBranches << "\n";
  return Out.str();
}

//===----------------------------------------------------------------------===//
// Cache and TLB proxy simulation
//===----------------------------------------------------------------------===//

FetchStream expandFetchStream(const Program &Prog, const LayoutPlan &Plan,
                              const std::vector<LbrStack> &Stacks) {
  SegmentStream Segs = expandSegments(Prog, Stacks);
  FetchStream Stream;
  Stream.Skipped = Segs.Skipped;
  for (const ExecutedSegment &Seg : Segs.Segments) {
    size_t Before = Stream.Ranges.size();
    bool Complete = true;
    for (const std::string &L : Seg.Blocks) {
      const BlockPlacement *P = Plan.find(Seg.Func, L);
      if (!P) {
        Complete = false;
        break;
      }
      if (P->Size > 0)
        Stream.Ranges.push_back({P->Address, P->Size});
    }
    if (!Complete) {
      Stream.Ranges.resize(Before);
      ++Stream.Skipped;
    }
  }
  return Stream;
}

CacheStats simulateIcache(const FetchStream &Stream,
                          const CacheConfig &Config) {
  if (!isPowerOfTwo(Config.CacheSize) || !isPowerOfTwo(Config.LineSize) ||
      !isPowerOfTwo(Config.PageSize) || Config.Associativity == 0 ||
      Config.TlbEntries == 0 ||
      Config.CacheSize < Config.LineSize * Config.Associativity)
    throw std::invalid_argument("icache: malformed cache configuration");

  uint64_t Sets = Config.CacheSize / Config.LineSize / Config.Associativity;
  std::vector<LruSet> Cache(Sets, LruSet(Config.Associativity));
  LruSet Tlb(Config.TlbEntries);

  CacheStats Stats;
  Stats.Skipped = Stream.Skipped;
  for (const auto &[Addr, Size] : Stream.Ranges) {
    if (Size == 0)
      continue;
    Stats.FetchedBytes += Size;
    uint64_t First = Addr / Config.LineSize;
    uint64_t Last = (Addr + Size - 1) / Config.LineSize;
    for (uint64_t Line = First; Line <= Last; ++Line) {
      ++Stats.LineFetches;
      if (Cache[Line % Sets].access(Line))
        ++Stats.IcacheMisses;
      if (Tlb.access(Line * Config.LineSize / Config.PageSize))
        ++Stats.ItlbMisses;
    }
  }
  return Stats;
}

CacheStats simulateIcache(const Program &Prog, const LayoutPlan &Plan,
                          const std::vector<LbrStack> &Stacks,
                          const CacheConfig &Config) {
  return simulateIcache(expandFetchStream(Prog, Plan, Stacks), Config);
}

//===----------------------------------------------------------------------===//
// Heat maps
//===----------------------------------------------------------------------===//

HeatMap heatMap(uint64_t TotalSize, uint64_t Base, const FetchStream &Stream) {
  if (TotalSize == 0)
    throw std::invalid_argument("heat-map: empty address window");
  HeatMap Map;
  Map.BytesPerCell = (TotalSize + 4095) / 4096;
  Map.CellBytes.assign(4096, 0);
  Map.Cells.assign(4096, 0.0);
  uint64_t End = Base + TotalSize;
  for (const auto &[Addr, Size] : Stream.Ranges) {
    uint64_t Lo = std::max(Addr, Base);
    uint64_t Hi = std::min(Addr + Size, End);
    while (Lo < Hi) {
      uint64_t Cell = (Lo - Base) / Map.BytesPerCell;
      uint64_t CellEnd = Base + (Cell + 1) * Map.BytesPerCell;
      uint64_t Step = std::min(Hi, CellEnd) - Lo;
      Map.CellBytes[Cell] += Step;
      Lo += Step;
    }
  }
  for (size_t I = 0; I < 4096; ++I)
    Map.Cells[I] = std::log(1.0 + static_cast<double>(Map.CellBytes[I]) /
                                      static_cast<double>(Map.BytesPerCell));
  return Map;
}

HeatMap heatMap(const LayoutPlan &Plan, const FetchStream &Stream) {
  uint64_t End = Plan.ColdEnd > Plan.ColdBase ? Plan.ColdEnd : Plan.HotEnd;
  uint64_t Total = End > Plan.HotBase ? End - Plan.HotBase : 1;
  return heatMap(Total, Plan.HotBase, Stream);
}

HeatMap heatMap(const Program &Prog, const std::vector<IpSample> &Samples) {
  FetchStream Stream;
  Stream.Ranges.reserve(Samples.size());
  for (const IpSample &S : Samples)
    Stream.Ranges.push_back({S.Ip, 1});
  return heatMap(std::max<uint64_t>(1, Prog.totalTextSize()), Prog.TextBase,
                 Stream);
}

std::string serializeHeatMapCsv(const HeatMap &Map) {
  std::string Out;
  Out.reserve(4096 * 8);
  char Buf[32];
  for (size_t Y = 0; Y < 64; ++Y) {
    for (size_t X = 0; X < 64; ++X) {
      std::snprintf(Buf, sizeof(Buf), "%.4f", Map.Cells[Y * 64 + X]);
      if (X > 0)
        Out += ',';
      Out += Buf;
    }
    Out += '\n';
  }
  return Out;
}

//===----------------------------------------------------------------------===//
// Hot span
//===----------------------------------------------------------------------===//

uint64_t hotSpan(const LayoutPlan &Plan, const FlowGraph &Flow,
                 double Coverage) {
  if (!(Coverage > 0.0 && Coverage <= 1.0))
    throw std::invalid_argument("hot-span: coverage must lie in (0, 1]");
  struct Placed {
    uint64_t Address;
    uint64_t Size;
    uint64_t Mass;
  };
  std::vector<Placed> Blocks;
  uint64_t Total = 0;
  for (const BlockPlacement &P : Plan.Order) {
    const FunctionProfile *FP = Flow.fn(P.Func);
    uint64_t Mass = FP ? FP->blockCount(P.Label) : 0;
    Blocks.push_back({P.Address, P.Size, Mass});
    Total += Mass;
  }
  if (Total == 0)
    return 0;
  std::sort(Blocks.begin(), Blocks.end(),
            [](const Placed &A, const Placed &B) {
              return A.Address < B.Address;
            });
  double Need = Coverage * static_cast<double>(Total);
  uint64_t Best = 0;
  bool Found = false;
  uint64_t Sum = 0;
  size_t L = 0;
  for (size_t R = 0; R < Blocks.size(); ++R) {
    Sum += Blocks[R].Mass;
    while (L < R && Sum - Blocks[L].Mass >= Need)
      Sum -= Blocks[L++].Mass;
    if (static_cast<double>(Sum) >= Need) {
      uint64_t Span = Blocks[R].Address + Blocks[R].Size - Blocks[L].Address;
      if (!Found || Span < Best)
        Best = Span;
      Found = true;
    }
  }
  return Best;
}

//===----------------------------------------------------------------------===//
// Bad-layout report
//===----------------------------------------------------------------------===//

std::vector<BadLayoutFinding> reportBadLayout(const Program &Prog,
                                              const FlowGraph &Flow,
                                              const LayoutPlan &Plan,
                                              uint64_t HotThreshold) {
  std::vector<BadLayoutFinding> Findings;
  for (const Function &F : Prog.Functions) {
    const FunctionProfile *FP = Flow.fn(F.Name);
    if (!FP)
      continue;
    std::vector<const BlockPlacement *> Hot, Cold;
    for (const BlockPlacement &P : Plan.Order)
      if (P.Func == F.Name)
        (P.Cold ? Cold : Hot).push_back(&P);
    for (const std::vector<const BlockPlacement *> &Section : {Hot, Cold}) {
      for (size_t I = 1; I + 1 < Section.size(); ++I) {
        uint64_t Prev = FP->blockCount(Section[I - 1]->Label);
        uint64_t Mid = FP->blockCount(Section[I]->Label);
        uint64_t Next = FP->blockCount(Section[I + 1]->Label);
        if (Mid == 0 && Prev >= HotThreshold && Next >= HotThreshold)
          Findings.push_back({F.Name, Section[I]->Label,
                              Section[I - 1]->Label, Section[I + 1]->Label,
                              Prev, Next});
      }
    }
  }
  return Findings;
}

} // namespace layopt
