//===- Profile.cpp - Trace attribution and flow reconciliation ------------===//
//
// Part of the layopt project, under the Apache License v2.0.
// SPDX-License-Identifier: Apache-2.0
//
//===----------------------------------------------------------------------===//

#include "layopt/Profile.h"

#include <algorithm>
#include <cassert>
#include <charconv>
#include <cmath>
#include <set>
#include <sstream>

namespace layopt {

uint64_t FunctionProfile::inflow(const std::string &Label,
                                 const std::string &Entry) const {
  uint64_t S = Label == Entry ? EntryCount : 0;
  for (const auto &[Key, E] : Edges)
    if (Key.second == Label)
      S += E.Count;
  return S;
}

uint64_t FunctionProfile::outflow(const std::string &Label) const {
  uint64_t S = 0;
  for (const auto &[Key, E] : Edges)
    if (Key.first == Label)
      S += E.Count;
  return S;
}

namespace {

// One end of a branch record, mapped onto the model.
struct ResolvedPoint {
  const Function *F = nullptr;
  int Block = -1;
  // Instruction start offset within the block; valid only when Exact.
  uint64_t InstOffset = 0;
  const Instruction *Inst = nullptr;
  bool Exact = false;      // address is exactly an instruction start
  bool BlockStart = false; // address is exactly a block start
};

ResolvedPoint resolvePoint(const Program &Prog, uint64_t Addr) {
  ResolvedPoint R;
  auto Loc = Prog.resolve(Addr);
  if (!Loc)
    return R;
  R.F = Prog.function(Loc->Func);
  R.Block = R.F->blockIndex(Loc->Label);
  const BasicBlock &B = R.F->Blocks[R.Block];
  R.InstOffset = Loc->Offset;
  R.Exact = B.Address + Loc->Offset == Addr;
  R.BlockStart = B.Address == Addr;
  if (R.Exact) {
    uint64_t Off = 0;
    for (const Instruction &I : B.Insts) {
      if (Off == Loc->Offset) {
        R.Inst = &I;
        break;
      }
      Off += I.Size;
    }
  }
  return R;
}

size_t icallOrdinal(const BasicBlock &B, uint64_t InstOffset) {
  size_t N = 0;
  uint64_t Off = 0;
  for (const Instruction &I : B.Insts) {
    if (Off >= InstOffset)
      break;
    if (I.Kind == InstKind::IndirectCall)
      ++N;
    Off += I.Size;
  }
  return N;
}

// Straight-line fall-through path from block From to the block containing
// Addr, as index pairs. Returns false when the path would cross a block that
// cannot fall through.
bool fallthroughPath(const Function &F, int From, uint64_t Addr,
                     std::vector<int> &Path) {
  int Cur = From;
  while (true) {
    const BasicBlock &B = F.Blocks[Cur];
    if (Addr >= B.Address && Addr < B.Address + B.size())
      return true;
    if (!F.hasFallthrough(Cur))
      return false;
    Path.push_back(Cur);
    ++Cur;
    if (Cur >= static_cast<int>(F.Blocks.size()))
      return false;
  }
}

} // namespace

AttributionResult attributeLbr(const Program &Prog,
                               const std::vector<LbrStack> &Stacks) {
  AttributionResult Res;
  for (const LbrStack &Stack : Stacks) {
    // Entries arrive newest first; attribution walks them in execution order.
    std::vector<LbrEntry> Chrono(Stack.Entries.rbegin(), Stack.Entries.rend());
    std::vector<ResolvedPoint> Froms, Tos;
    Froms.reserve(Chrono.size());
    Tos.reserve(Chrono.size());
    for (const LbrEntry &E : Chrono) {
      Froms.push_back(resolvePoint(Prog, E.From));
      Tos.push_back(resolvePoint(Prog, E.To));
    }

    for (size_t I = 0; I < Chrono.size(); ++I) {
      const LbrEntry &E = Chrono[I];
      const ResolvedPoint &From = Froms[I];
      const ResolvedPoint &To = Tos[I];
      if (!From.Exact || !From.Inst || !To.F || !To.BlockStart) {
        ++Res.Stats.DroppedEntries;
        continue;
      }
      const Instruction &FI = *From.Inst;
      if (FI.Kind == InstKind::Return) {
        ++Res.Stats.ReturnEntries;
        continue;
      }
      if (FI.isBranch()) {
        if (To.F != From.F) {
          ++Res.Stats.DroppedEntries;
          continue;
        }
        const BasicBlock &SrcB = From.F->Blocks[From.Block];
        const std::string &DstL = To.F->Blocks[To.Block].Label;
        bool Found = false;
        for (const Successor &S : From.F->successors(From.Block)) {
          if (S.Label != DstL)
            continue;
          EdgeProfile &EP =
              Res.Flow.Functions[From.F->Name].Edges[{SrcB.Label, DstL}];
          EP.Count += 1;
          EP.Mispreds += E.Mispredicted ? 1 : 0;
          EP.Kind = S.Kind;
          Found = true;
          break;
        }
        if (Found)
          ++Res.Stats.TakenAttributed;
        else
          ++Res.Stats.DroppedEntries;
        continue;
      }
      if (FI.isCall()) {
        if (To.Block != 0 || To.F->Address != E.To) {
          ++Res.Stats.DroppedEntries;
          continue;
        }
        Res.Calls.Edges[{From.F->Name, To.F->Name}] += 1;
        Res.Flow.Functions[To.F->Name].EntryCount += 1;
        if (FI.Kind == InstKind::IndirectCall) {
          const BasicBlock &B = From.F->Blocks[From.Block];
          CallSiteId Site{From.F->Name, B.Label,
                          icallOrdinal(B, From.InstOffset)};
          Res.IndirectSites.Sites[Site][To.F->Name] += 1;
        }
        continue;
      }
      ++Res.Stats.DroppedEntries;
    }

    // Fall-through inference between consecutive records: the landing block
    // of one record runs straight-line to the source of the next.
    for (size_t I = 0; I + 1 < Chrono.size(); ++I) {
      const ResolvedPoint &Land = Tos[I];
      const ResolvedPoint &Next = Froms[I + 1];
      if (!Land.F || !Land.BlockStart || !Next.F || !Next.Exact)
        continue;
      if (Land.F != Next.F)
        continue;
      if (Chrono[I].To > Chrono[I + 1].From) {
        ++Res.Stats.InconsistentPairs;
        continue;
      }
      std::vector<int> Path;
      if (!fallthroughPath(*Land.F, Land.Block, Chrono[I + 1].From, Path)) {
        ++Res.Stats.InconsistentPairs;
        continue;
      }
      FunctionProfile &FP = Res.Flow.Functions[Land.F->Name];
      for (int BI : Path) {
        EdgeProfile &EP = FP.Edges[{Land.F->Blocks[BI].Label,
                                    Land.F->Blocks[BI + 1].Label}];
        EP.Count += 1;
        EP.Kind = EdgeKind::FallThrough;
        ++Res.Stats.FallthroughsInferred;
      }
    }
  }
  populateBlockCounts(Prog, Res.Flow);
  return Res;
}

SegmentStream expandSegments(const Program &Prog,
                             const std::vector<LbrStack> &Stacks) {
  SegmentStream Res;
  for (const LbrStack &Stack : Stacks) {
    std::vector<LbrEntry> Chrono(Stack.Entries.rbegin(), Stack.Entries.rend());
    for (size_t I = 0; I + 1 < Chrono.size(); ++I) {
      ResolvedPoint Land = resolvePoint(Prog, Chrono[I].To);
      ResolvedPoint Next = resolvePoint(Prog, Chrono[I + 1].From);
      if (!Land.F || !Land.BlockStart || !Next.F || !Next.Exact ||
          Land.F != Next.F || Chrono[I].To > Chrono[I + 1].From) {
        ++Res.Skipped;
        continue;
      }
      std::vector<int> Path;
      if (!fallthroughPath(*Land.F, Land.Block, Chrono[I + 1].From, Path)) {
        ++Res.Skipped;
        continue;
      }
      ExecutedSegment Seg;
      Seg.Func = Land.F->Name;
      for (int BI : Path)
        Seg.Blocks.push_back(Land.F->Blocks[BI].Label);
      int Final = Path.empty() ? Land.Block : Path.back() + 1;
      Seg.Blocks.push_back(Land.F->Blocks[Final].Label);
      Res.Segments.push_back(std::move(Seg));
    }
  }
  return Res;
}

SampleCounts attributeSamples(const Program &Prog,
                              const std::vector<IpSample> &Samples) {
  SampleCounts Res;
  for (const IpSample &S : Samples) {
    auto Loc = Prog.resolve(S.Ip);
    if (!Loc) {
      ++Res.Dropped;
      continue;
    }
    Res.BlockCounts[Loc->Func][Loc->Label] += 1;
  }
  return Res;
}

void populateBlockCounts(const Program &Prog, FlowGraph &Flow) {
  for (const Function &F : Prog.Functions) {
    auto It = Flow.Functions.find(F.Name);
    if (It == Flow.Functions.end())
      continue;
    FunctionProfile &FP = It->second;
    FP.BlockCounts.clear();
    for (const BasicBlock &B : F.Blocks)
      FP.BlockCounts[B.Label] = FP.inflow(B.Label, F.Blocks.front().Label);
  }
}

FlowGraph inferEdgesFromCounts(const Program &Prog,
                               const SampleCounts &Counts) {
  FlowGraph Flow;
  Flow.Inferred = true;
  for (const Function &F : Prog.Functions) {
    auto CIt = Counts.BlockCounts.find(F.Name);
    if (CIt == Counts.BlockCounts.end())
      continue;
    const auto &Sampled = CIt->second;
    size_t N = F.Blocks.size();
    auto sampleOf = [&](size_t I) -> double {
      auto It = Sampled.find(F.Blocks[I].Label);
      return It == Sampled.end() ? 0.0 : static_cast<double>(It->second);
    };

    // Successor indices and the position of the fall-through edge, if any.
    std::vector<std::vector<int>> Succ(N);
    std::vector<int> FallPos(N, -1);
    for (size_t I = 0; I < N; ++I) {
      for (const Successor &S : F.successors(I)) {
        if (S.Kind == EdgeKind::FallThrough)
          FallPos[I] = static_cast<int>(Succ[I].size());
        Succ[I].push_back(F.blockIndex(S.Label));
      }
    }

    std::vector<double> Est(N);
    for (size_t I = 0; I < N; ++I)
      Est[I] = sampleOf(I);
    std::vector<std::vector<double>> EdgeEst(N);

    for (int Iter = 0; Iter < 100; ++Iter) {
      double MaxDelta = 0;
      for (size_t I = 0; I < N; ++I) {
        if (Succ[I].empty())
          continue;
        std::vector<double> Share(Succ[I].size(), 0.0);
        double Total = 0;
        for (size_t K = 0; K < Succ[I].size(); ++K)
          Total += Share[K] = Est[Succ[I][K]];
        std::vector<double> NewEdges(Succ[I].size(), 0.0);
        if (Total == 0) {
          // No information: trust the fall-through, else split evenly.
          if (FallPos[I] >= 0)
            NewEdges[FallPos[I]] = Est[I];
          else
            for (double &V : NewEdges)
              V = Est[I] / static_cast<double>(Succ[I].size());
        } else {
          for (size_t K = 0; K < Succ[I].size(); ++K)
            NewEdges[K] = Est[I] * Share[K] / Total;
        }
        if (EdgeEst[I].empty())
          EdgeEst[I].assign(Succ[I].size(), 0.0);
        for (size_t K = 0; K < Succ[I].size(); ++K) {
          MaxDelta = std::max(MaxDelta, std::fabs(NewEdges[K] - EdgeEst[I][K]));
          EdgeEst[I][K] = NewEdges[K];
        }
      }
      // Unsampled blocks inherit their estimated inflow.
      for (size_t I = 0; I < N; ++I) {
        double In = 0;
        for (size_t J = 0; J < N; ++J) {
          if (EdgeEst[J].empty())
            continue;
          for (size_t K = 0; K < Succ[J].size(); ++K)
            if (Succ[J][K] == static_cast<int>(I))
              In += EdgeEst[J][K];
        }
        Est[I] = std::max(sampleOf(I), In);
      }
      if (MaxDelta < 0.5)
        break;
    }

    // Integerize with exact mass conservation per block: floor the shares,
    // then hand out the remainder by largest fraction, fall-through first.
    FunctionProfile &FP = Flow.Functions[F.Name];
    for (size_t I = 0; I < N; ++I)
      FP.BlockCounts[F.Blocks[I].Label] =
          static_cast<uint64_t>(std::llround(Est[I]));
    for (size_t I = 0; I < N; ++I) {
      if (Succ[I].empty())
        continue;
      uint64_t C = FP.BlockCounts[F.Blocks[I].Label];
      double Total = 0;
      for (double V : EdgeEst[I])
        Total += V;
      std::vector<uint64_t> Alloc(Succ[I].size(), 0);
      if (Total > 0 && C > 0) {
        std::vector<double> Exact(Succ[I].size());
        uint64_t Given = 0;
        for (size_t K = 0; K < Succ[I].size(); ++K) {
          Exact[K] = static_cast<double>(C) * EdgeEst[I][K] / Total;
          Alloc[K] = static_cast<uint64_t>(Exact[K]);
          Given += Alloc[K];
        }
        std::vector<size_t> Order(Succ[I].size());
        for (size_t K = 0; K < Order.size(); ++K)
          Order[K] = K;
        std::stable_sort(Order.begin(), Order.end(), [&](size_t A, size_t B) {
          double FA = Exact[A] - std::floor(Exact[A]);
          double FB = Exact[B] - std::floor(Exact[B]);
          if (FA != FB)
            return FA > FB;
          // Ties favor the fall-through successor.
          return (static_cast<int>(A) == FallPos[I]) >
                 (static_cast<int>(B) == FallPos[I]);
        });
        for (size_t K = 0; Given < C; ++K)
          Alloc[Order[K % Order.size()]] += 1, ++Given;
      } else if (C > 0) {
        if (FallPos[I] >= 0)
          Alloc[FallPos[I]] = C;
        else
          Alloc[0] = C;
      }
      const std::vector<Successor> Succs = F.successors(I);
      for (size_t K = 0; K < Succ[I].size(); ++K) {
        if (Alloc[K] == 0)
          continue;
        EdgeProfile &EP =
            FP.Edges[{F.Blocks[I].Label, F.Blocks[Succ[I][K]].Label}];
        EP.Count = Alloc[K];
        EP.Kind = Succs[K].Kind;
      }
    }
    uint64_t EntryIn = 0;
    for (const auto &[Key, E] : FP.Edges)
      if (Key.second == F.Blocks.front().Label)
        EntryIn += E.Count;
    uint64_t EC = FP.BlockCounts[F.Blocks.front().Label];
    FP.EntryCount = EC > EntryIn ? EC - EntryIn : 0;
  }
  return Flow;
}

ReconcileStats reconcileFlow(const Program &Prog, FlowGraph &Flow) {
  ReconcileStats Stats;
  for (const Function &F : Prog.Functions) {
    auto It = Flow.Functions.find(F.Name);
    if (It == Flow.Functions.end())
      continue;
    FunctionProfile &FP = It->second;
    size_t N = F.Blocks.size();

    // Reverse post-order so upstream surplus propagates forward in one sweep.
    std::vector<int> Order;
    std::vector<char> Seen(N, 0);
    std::vector<std::pair<int, size_t>> DfsStack;
    std::vector<std::vector<int>> Succ(N);
    for (size_t I = 0; I < N; ++I)
      for (const Successor &S : F.successors(I))
        Succ[I].push_back(F.blockIndex(S.Label));
    Seen[0] = 1;
    DfsStack.push_back({0, 0});
    while (!DfsStack.empty()) {
      auto &[B, K] = DfsStack.back();
      if (K < Succ[B].size()) {
        int Nx = Succ[B][K++];
        if (!Seen[Nx]) {
          Seen[Nx] = 1;
          DfsStack.push_back({Nx, 0});
        }
        continue;
      }
      Order.push_back(B);
      DfsStack.pop_back();
    }
    std::reverse(Order.begin(), Order.end());
    for (size_t I = 0; I < N; ++I)
      if (!Seen[I])
        Order.push_back(static_cast<int>(I));

    const std::string &Entry = F.Blocks.front().Label;
    // A deficit repair never reverses an earlier repair on the same edge, so
    // genuinely inconsistent mass settles on blocks without a fall-through
    // successor instead of bouncing between neighbours. The first sweeps
    // prefer drawing missing inflow from the fall-through in-edge; whatever
    // deficit survives them is drained forward by trimming fall-through
    // out-edges, which always terminates at a block that ends in a jump.
    std::set<std::pair<std::string, std::string>> Drawn, Trimmed;
    auto sweepOnce = [&](bool DrawsAllowed) {
      bool Changed = false;
      for (int BI : Order) {
        const BasicBlock &B = F.Blocks[BI];
        if (Succ[BI].empty())
          continue;
        uint64_t In = FP.inflow(B.Label, Entry);
        uint64_t Out = FP.outflow(B.Label);
        if (In > Out) {
          if (!F.hasFallthrough(BI))
            continue;
          EdgeProfile &EP = FP.Edges[{B.Label, F.Blocks[BI + 1].Label}];
          EP.Count += In - Out;
          EP.Kind = EdgeKind::FallThrough;
          ++Stats.FallthroughBumps;
          Changed = true;
        } else if (In < Out) {
          if (BI == 0) {
            FP.EntryCount += Out - In;
            ++Stats.EntryBumps;
            Changed = true;
            continue;
          }
          if (DrawsAllowed && F.hasFallthrough(BI - 1) &&
              !Trimmed.count({F.Blocks[BI - 1].Label, B.Label})) {
            EdgeProfile &EP = FP.Edges[{F.Blocks[BI - 1].Label, B.Label}];
            EP.Count += Out - In;
            EP.Kind = EdgeKind::FallThrough;
            Drawn.insert({F.Blocks[BI - 1].Label, B.Label});
            ++Stats.FallInBumps;
            Changed = true;
            continue;
          }
          if (!F.hasFallthrough(BI))
            continue;
          if (DrawsAllowed && Drawn.count({B.Label, F.Blocks[BI + 1].Label}))
            continue;
          auto EIt = FP.Edges.find({B.Label, F.Blocks[BI + 1].Label});
          if (EIt != FP.Edges.end() &&
              EIt->second.Kind == EdgeKind::FallThrough &&
              EIt->second.Count > 0) {
            EIt->second.Count -= std::min(EIt->second.Count, Out - In);
            Trimmed.insert({B.Label, F.Blocks[BI + 1].Label});
            ++Stats.FallOutTrims;
            Changed = true;
          }
        }
      }
      return Changed;
    };
    for (size_t Sweep = 0; Sweep < N + 2; ++Sweep)
      if (!sweepOnce(true))
        break;
    for (size_t Sweep = 0; Sweep < N + 2; ++Sweep)
      if (!sweepOnce(false))
        break;
    for (size_t I = 0; I < N; ++I) {
      if (Succ[I].empty())
        continue;
      const std::string &L = F.Blocks[I].Label;
      if (FP.inflow(L, Entry) != FP.outflow(L))
        Stats.Violations.push_back(F.Name + ":" + L);
    }
  }
  populateBlockCounts(Prog, Flow);
  return Stats;
}

CallGraph buildCallGraphNoLbr(const Program &Prog, const FlowGraph &Flow) {
  CallGraph CG;
  for (const Function &F : Prog.Functions) {
    const FunctionProfile *FP = Flow.fn(F.Name);
    if (!FP)
      continue;
    for (const BasicBlock &B : F.Blocks) {
      uint64_t C = FP->blockCount(B.Label);
      if (C == 0)
        continue;
      for (const Instruction &I : B.Insts)
        if (I.Kind == InstKind::DirectCall)
          CG.Edges[{F.Name, I.Target}] += C;
    }
  }
  return CG;
}

std::map<std::string, double> profileAccuracy(const Program &Prog,
                                              const FlowGraph &Flow) {
  std::map<std::string, double> Acc;
  for (const Function &F : Prog.Functions) {
    const FunctionProfile *FP = Flow.fn(F.Name);
    if (!FP) {
      Acc[F.Name] = 1.0;
      continue;
    }
    uint64_t Imbalance = 0, TotalEdges = 0;
    const std::string &Entry = F.Blocks.front().Label;
    for (size_t I = 0; I < F.Blocks.size(); ++I) {
      if (F.successors(I).empty())
        continue;
      uint64_t In = FP->inflow(F.Blocks[I].Label, Entry);
      uint64_t Out = FP->outflow(F.Blocks[I].Label);
      Imbalance += In > Out ? In - Out : Out - In;
    }
    for (const auto &[Key, E] : FP->Edges)
      TotalEdges += E.Count;
    double A = 1.0 - static_cast<double>(Imbalance) /
                         std::max<double>(1.0, 2.0 * TotalEdges);
    Acc[F.Name] = std::clamp(A, 0.0, 1.0);
  }
  return Acc;
}

std::string serializeProfile(const FlowGraph &Flow, const CallGraph &Calls) {
  std::ostringstream Out;
  for (const auto &[Fn, FP] : Flow.Functions) {
    if (FP.EntryCount || !FP.Edges.empty())
      Out << "N " << Fn << " " << FP.EntryCount << "\n";
    for (const auto &[Key, E] : FP.Edges)
      Out << "E " << Fn << " " << Key.first << " " << Key.second << " "
          << E.Count << " " << E.Mispreds << " "
          << (E.Kind == EdgeKind::Taken ? "T" : "F") << "\n";
  }
  for (const auto &[Key, C] : Calls.Edges)
    Out << "C " << Key.first << " " << Key.second << " " << C << "\n";
  return Out.str();
}

void parseProfile(const std::string &Text, FlowGraph &Flow, CallGraph &Calls) {
  std::istringstream In(Text);
  std::string Line;
  unsigned LineNo = 0;
  auto toCount = [&](const std::string &Tok) -> uint64_t {
    uint64_t V = 0;
    auto [P, Ec] = std::from_chars(Tok.data(), Tok.data() + Tok.size(), V);
    if (Ec != std::errc() || P != Tok.data() + Tok.size())
      throw ParseError(LineNo, "bad count '" + Tok + "'");
    return V;
  };
  while (std::getline(In, Line)) {
    ++LineNo;
    std::istringstream SS(Line);
    std::vector<std::string> T;
    std::string Tok;
    while (SS >> Tok) {
      if (Tok[0] == '#')
        break;
      T.push_back(Tok);
    }
    if (T.empty())
      continue;
    if (T[0] == "N" && T.size() == 3) {
      Flow.Functions[T[1]].EntryCount = toCount(T[2]);
    } else if (T[0] == "E" && T.size() == 7 && (T[6] == "T" || T[6] == "F")) {
      EdgeProfile &E = Flow.Functions[T[1]].Edges[{T[2], T[3]}];
      E.Count = toCount(T[4]);
      E.Mispreds = toCount(T[5]);
      E.Kind = T[6] == "T" ? EdgeKind::Taken : EdgeKind::FallThrough;
    } else if (T[0] == "C" && T.size() == 4) {
      Calls.Edges[{T[1], T[2]}] = toCount(T[3]);
    } else {
      throw ParseError(LineNo, "unrecognized profile record");
    }
  }
}

} // namespace layopt
