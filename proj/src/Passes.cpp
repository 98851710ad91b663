//===- Passes.cpp - Optimization passes and the pipeline -------------------===//
//
// Part of the layopt project, under the Apache License v2.0.
// SPDX-License-Identifier: Apache-2.0
//
//===----------------------------------------------------------------------===//

#include "layopt/Passes.h"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace layopt {

namespace {

Function *lookupFn(Program &Prog, const std::string &Name) {
  for (Function &F : Prog.Functions)
    if (F.Name == Name)
      return &F;
  return nullptr;
}

std::string uniqueLabel(const Function &F, const std::string &Base) {
  if (F.blockIndex(Base) < 0)
    return Base;
  for (unsigned N = 1;; ++N) {
    std::string L = Base + std::to_string(N);
    if (F.blockIndex(L) < 0)
      return L;
  }
}

//===----------------------------------------------------------------------===//
// Identical code folding
//===----------------------------------------------------------------------===//

// Structural signature of a function with call operands wildcarded: block
// shape, instruction kinds and sizes, and local targets as block positions.
std::string shapeKey(const Function &F) {
  std::string Key;
  auto num = [&Key](uint64_t V) {
    Key += std::to_string(V);
    Key += ',';
  };
  num(F.Blocks.size());
  for (const BasicBlock &B : F.Blocks) {
    Key += '|';
    num(B.Insts.size());
    for (const Instruction &I : B.Insts) {
      num(static_cast<uint64_t>(I.Kind));
      num(I.Size);
      switch (I.Kind) {
      case InstKind::CondBranch:
      case InstKind::UncondBranch:
        num(static_cast<uint64_t>(F.blockIndex(I.Target)));
        break;
      case InstKind::IndirectBranch:
        for (const std::string &L : I.JumpTable)
          num(static_cast<uint64_t>(F.blockIndex(L)));
        break;
      default:
        break;
      }
    }
  }
  return Key;
}

} // namespace

FoldMap foldIdentical(Program &Prog, FlowGraph &Flow, CallGraph &Calls,
                      IndirectCallProfile &Sites) {
  // Optimistic initial partition: same-shape simple functions share a class.
  std::map<std::string, int> ClassOf;
  int NextId = 0;
  {
    std::map<std::string, std::vector<const Function *>> Buckets;
    for (const Function &F : Prog.Functions)
      if (F.IsSimple)
        Buckets[shapeKey(F)].push_back(&F);
    for (const auto &[Key, Fns] : Buckets) {
      for (const Function *F : Fns)
        ClassOf[F->Name] = NextId;
      ++NextId;
    }
  }
  for (const Function &F : Prog.Functions)
    if (!F.IsSimple)
      ClassOf[F.Name] = NextId++;

  // Refine: split classes whose members call into different classes.
  for (bool Changed = true; Changed;) {
    Changed = false;
    std::map<int, std::map<std::vector<int>, std::vector<std::string>>> Split;
    for (const Function &F : Prog.Functions) {
      std::vector<int> Operands;
      for (const BasicBlock &B : F.Blocks)
        for (const Instruction &I : B.Insts)
          if (I.Kind == InstKind::DirectCall)
            Operands.push_back(ClassOf.at(I.Target));
      Split[ClassOf.at(F.Name)][std::move(Operands)].push_back(F.Name);
    }
    for (auto &[Id, Groups] : Split) {
      if (Groups.size() <= 1)
        continue;
      bool First = true;
      for (auto &[Operands, Names] : Groups) {
        if (First) {
          First = false;
          continue;
        }
        for (const std::string &N : Names)
          ClassOf[N] = NextId;
        ++NextId;
        Changed = true;
      }
    }
  }

  // Representatives are the lowest-addressed member of each class.
  std::map<int, const Function *> Rep;
  std::map<int, unsigned> ClassSize;
  for (const Function &F : Prog.Functions) {
    int Id = ClassOf.at(F.Name);
    ++ClassSize[Id];
    auto It = Rep.find(Id);
    if (It == Rep.end() || F.Address < It->second->Address)
      Rep[Id] = &F;
  }
  FoldMap Map;
  for (const Function &F : Prog.Functions) {
    int Id = ClassOf.at(F.Name);
    if (ClassSize[Id] > 1 && Rep[Id]->Name != F.Name)
      Map[F.Name] = Rep[Id]->Name;
  }
  if (Map.empty())
    return Map;
  auto remap = [&Map](const std::string &N) {
    auto It = Map.find(N);
    return It == Map.end() ? N : It->second;
  };

  // Victim block labels correspond positionally to representative labels.
  std::map<std::string, std::map<std::string, std::string>> LabelMap;
  for (const auto &[Victim, RepName] : Map) {
    const Function *VF = Prog.function(Victim);
    const Function *RF = Prog.function(RepName);
    for (size_t I = 0; I < VF->Blocks.size(); ++I)
      LabelMap[Victim][VF->Blocks[I].Label] = RF->Blocks[I].Label;
  }

  std::erase_if(Prog.Functions,
                [&Map](const Function &F) { return Map.count(F.Name) != 0; });
  for (Function &F : Prog.Functions)
    for (BasicBlock &B : F.Blocks)
      for (Instruction &I : B.Insts)
        if (I.Kind == InstKind::DirectCall)
          I.Target = remap(I.Target);

  for (const auto &[Victim, RepName] : Map)
    Flow.Functions.erase(Victim);
  CallGraph NewCalls;
  for (const auto &[Key, W] : Calls.Edges)
    NewCalls.Edges[{remap(Key.first), remap(Key.second)}] += W;
  Calls = std::move(NewCalls);
  IndirectCallProfile NewSites;
  for (const auto &[Site, Hist] : Sites.Sites) {
    CallSiteId Id = Site;
    auto LM = LabelMap.find(Site.Func);
    if (LM != LabelMap.end()) {
      Id.Func = remap(Site.Func);
      Id.Block = LM->second.at(Site.Block);
    }
    for (const auto &[Target, N] : Hist)
      NewSites.Sites[Id][remap(Target)] += N;
  }
  Sites = std::move(NewSites);
  return Map;
}

//===----------------------------------------------------------------------===//
// Indirect call promotion
//===----------------------------------------------------------------------===//

IcpResult promoteIndirectCalls(Program &Prog, FlowGraph &Flow,
                               CallGraph &Calls, IndirectCallProfile &Sites,
                               const IcpOptions &Opts) {
  (void)Calls;
  IcpResult Res;
  std::vector<CallSiteId> Order;
  for (const auto &[Site, Hist] : Sites.Sites)
    Order.push_back(Site);
  // Splitting moves the block tail, so process sites back to front: earlier
  // ordinals in the same block keep their meaning.
  std::stable_sort(Order.begin(), Order.end(),
                   [](const CallSiteId &A, const CallSiteId &B) {
                     if (A.Func != B.Func)
                       return A.Func < B.Func;
                     if (A.Block != B.Block)
                       return A.Block < B.Block;
                     return A.Index > B.Index;
                   });

  for (const CallSiteId &Site : Order) {
    const std::map<std::string, uint64_t> Hist = Sites.Sites.at(Site);
    Function *F = lookupFn(Prog, Site.Func);
    if (!F)
      throw std::runtime_error("icp: no function '" + Site.Func + "'");
    int BI = F->blockIndex(Site.Block);
    if (BI < 0)
      throw std::runtime_error("icp: no block '" + Site.Func + ":" +
                               Site.Block + "'");
    BasicBlock &B = F->Blocks[BI];
    size_t Pos = B.Insts.size();
    size_t Ord = 0;
    for (size_t I = 0; I < B.Insts.size(); ++I) {
      if (B.Insts[I].Kind != InstKind::IndirectCall)
        continue;
      if (Ord == Site.Index) {
        Pos = I;
        break;
      }
      ++Ord;
    }
    if (Pos == B.Insts.size())
      throw std::runtime_error("icp: no indirect call " + Site.Func + ":" +
                               Site.Block + ":" + std::to_string(Site.Index));

    uint64_t Total = 0;
    for (const auto &[Target, N] : Hist)
      Total += N;
    if (Total == 0) {
      ++Res.SkippedEmpty;
      Res.Log.push_back("icp: empty histogram at " + Site.Func + ":" +
                        Site.Block + ":" + std::to_string(Site.Index));
      continue;
    }
    if (!F->IsSimple) {
      Res.Log.push_back("icp: skipping non-simple " + Site.Func);
      continue;
    }
    std::string Hottest;
    uint64_t HotCount = 0;
    for (const auto &[Target, N] : Hist)
      if (N > HotCount) {
        Hottest = Target;
        HotCount = N;
      }
    if (static_cast<double>(HotCount) <
        Opts.Threshold * static_cast<double>(Total))
      continue;

    // Split: guard and direct call stay, the icall and the rest of the block
    // move to a new fall-back block.
    std::string FtLabel = uniqueLabel(*F, Site.Block + ".icp");
    BasicBlock Fallback;
    Fallback.Label = FtLabel;
    Fallback.Insts.assign(B.Insts.begin() + Pos, B.Insts.end());
    B.Insts.erase(B.Insts.begin() + Pos, B.Insts.end());
    B.Insts.push_back({Opts.GuardSize, InstKind::Plain, "", {}, false});
    B.Insts.push_back(
        {Opts.CallSize, InstKind::DirectCall, Hottest, {}, false});
    F->Blocks.insert(F->Blocks.begin() + BI + 1, std::move(Fallback));

    if (FunctionProfile *FP = Flow.fn(Site.Func)) {
      std::vector<std::pair<std::pair<std::string, std::string>, EdgeProfile>>
          Moved;
      for (auto It = FP->Edges.begin(); It != FP->Edges.end();) {
        if (It->first.first == Site.Block) {
          Moved.push_back({{FtLabel, It->first.second}, It->second});
          It = FP->Edges.erase(It);
        } else {
          ++It;
        }
      }
      for (auto &[Key, E] : Moved)
        FP->Edges[Key] = E;
      uint64_t C = FP->blockCount(Site.Block);
      FP->Edges[{Site.Block, FtLabel}] = {C, 0, EdgeKind::FallThrough};
      FP->BlockCounts[FtLabel] = C;
    }

    // Residual histogram follows the icall to the fall-back block; deeper
    // icalls in the moved tail are re-keyed as well.
    std::map<std::string, uint64_t> Residual = Hist;
    Residual.erase(Hottest);
    Sites.Sites.erase(Site);
    std::vector<std::pair<CallSiteId, std::map<std::string, uint64_t>>> Rekey;
    for (auto It = Sites.Sites.begin(); It != Sites.Sites.end();) {
      if (It->first.Func == Site.Func && It->first.Block == Site.Block &&
          It->first.Index > Site.Index) {
        Rekey.push_back({{Site.Func, FtLabel, It->first.Index - Site.Index},
                         std::move(It->second)});
        It = Sites.Sites.erase(It);
      } else {
        ++It;
      }
    }
    for (auto &[Id, H] : Rekey)
      Sites.Sites[Id] = std::move(H);
    if (!Residual.empty())
      Sites.Sites[{Site.Func, FtLabel, 0}] = Residual;

    ++Res.Promoted;
    Res.Log.push_back("icp: promoted " + Site.Func + ":" + Site.Block + ":" +
                      std::to_string(Site.Index) + " -> " + Hottest + " (" +
                      std::to_string(HotCount) + "/" + std::to_string(Total) +
                      ")");
  }
  return Res;
}

//===----------------------------------------------------------------------===//
// Block reordering
//===----------------------------------------------------------------------===//

namespace {

struct ChainSet {
  std::vector<int> ChainId; // per block
  std::vector<int> Next;    // successor within chain, -1 at tail
  std::vector<int> Head, Tail;

  explicit ChainSet(size_t N)
      : ChainId(N), Next(N, -1), Head(N), Tail(N) {
    for (size_t I = 0; I < N; ++I)
      ChainId[I] = Head[I] = Tail[I] = static_cast<int>(I);
  }
};

// Bottom-up chain formation along the heaviest edges. The entry block always
// stays a chain head so the final order can begin with it.
ChainSet formChains(const Function &F, const FunctionProfile *FP) {
  size_t N = F.Blocks.size();
  ChainSet CS(N);
  struct WeightedEdge {
    uint64_t W;
    int U, V;
  };
  std::vector<WeightedEdge> Edges;
  for (size_t I = 0; I < N; ++I)
    for (const Successor &S : F.successors(I)) {
      int V = F.blockIndex(S.Label);
      uint64_t W = FP ? FP->edgeCount(F.Blocks[I].Label, S.Label) : 0;
      if (W > 0 && V != static_cast<int>(I) && V != 0)
        Edges.push_back({W, static_cast<int>(I), V});
    }
  std::stable_sort(Edges.begin(), Edges.end(),
                   [](const WeightedEdge &A, const WeightedEdge &B) {
                     if (A.W != B.W)
                       return A.W > B.W;
                     if (A.U != B.U)
                       return A.U < B.U;
                     return A.V < B.V;
                   });
  for (const WeightedEdge &E : Edges) {
    int Cu = CS.ChainId[E.U], Cv = CS.ChainId[E.V];
    if (Cu == Cv || CS.Tail[Cu] != E.U || CS.Head[Cv] != E.V)
      continue;
    CS.Next[E.U] = E.V;
    for (int B = CS.Head[Cv]; B != -1; B = CS.Next[B])
      CS.ChainId[B] = Cu;
    CS.Tail[Cu] = CS.Tail[Cv];
  }
  return CS;
}

std::vector<std::vector<int>> chainList(const ChainSet &CS, size_t N) {
  std::vector<std::vector<int>> Chains;
  for (size_t I = 0; I < N; ++I) {
    int C = CS.ChainId[I];
    if (CS.Head[C] != static_cast<int>(I))
      continue;
    std::vector<int> Members;
    for (int B = static_cast<int>(I); B != -1; B = CS.Next[B])
      Members.push_back(B);
    Chains.push_back(std::move(Members));
  }
  // Entry chain first, preserving discovery order otherwise.
  for (size_t I = 0; I < Chains.size(); ++I)
    if (Chains[I].front() == 0) {
      std::rotate(Chains.begin(), Chains.begin() + I, Chains.begin() + I + 1);
      break;
    }
  return Chains;
}

uint64_t edgeWeight(const Function &F, const FunctionProfile *FP, int U,
                    int V) {
  if (!FP)
    return 0;
  return FP->edgeCount(F.Blocks[U].Label, F.Blocks[V].Label);
}

BlockOrder toOrder(const Function &F, const std::vector<int> &Seq) {
  BlockOrder Order;
  Order.reserve(Seq.size());
  for (int B : Seq)
    Order.push_back(F.Blocks[B].Label);
  return Order;
}

std::vector<int> phSequence(const Function &F, const FunctionProfile *FP) {
  size_t N = F.Blocks.size();
  ChainSet CS = formChains(F, FP);
  std::vector<std::vector<int>> Chains = chainList(CS, N);

  // Adjacency of each chain to the entry chain decides its rank.
  std::vector<uint64_t> EntryAdj(Chains.size(), 0);
  std::vector<int> ChainPos(N, 0);
  for (size_t C = 0; C < Chains.size(); ++C)
    for (int B : Chains[C])
      ChainPos[B] = static_cast<int>(C);
  for (size_t I = 0; I < N; ++I)
    for (const Successor &S : F.successors(I)) {
      int V = F.blockIndex(S.Label);
      uint64_t W = edgeWeight(F, FP, static_cast<int>(I), V);
      if (W == 0)
        continue;
      bool UInEntry = ChainPos[I] == 0, VInEntry = ChainPos[V] == 0;
      if (UInEntry != VInEntry)
        EntryAdj[UInEntry ? ChainPos[V] : ChainPos[I]] += W;
    }
  std::vector<size_t> Rank(Chains.size());
  for (size_t I = 0; I < Rank.size(); ++I)
    Rank[I] = I;
  std::stable_sort(Rank.begin() + 1, Rank.end(), [&](size_t A, size_t B) {
    if (EntryAdj[A] != EntryAdj[B])
      return EntryAdj[A] > EntryAdj[B];
    return Chains[A].front() < Chains[B].front();
  });
  std::vector<int> Seq;
  Seq.reserve(N);
  for (size_t R : Rank)
    for (int B : Chains[R])
      Seq.push_back(B);
  return Seq;
}

double scoreSequence(const Function &F, const FunctionProfile *FP,
                     const std::vector<int> &Seq) {
  size_t N = F.Blocks.size();
  std::vector<uint64_t> Start(N, 0), End(N, 0);
  std::vector<int> At(N, -1);
  uint64_t Addr = 0;
  for (size_t P = 0; P < Seq.size(); ++P) {
    int B = Seq[P];
    At[B] = static_cast<int>(P);
    Start[B] = Addr;
    Addr += F.Blocks[B].size();
    End[B] = Addr;
  }
  double Score = 0;
  for (size_t P = 0; P < Seq.size(); ++P) {
    int U = Seq[P];
    for (const Successor &S : F.successors(U)) {
      int V = F.blockIndex(S.Label);
      if (At[V] < 0)
        continue;
      uint64_t W = edgeWeight(F, FP, U, V);
      if (W == 0)
        continue;
      if (P + 1 < Seq.size() && Seq[P + 1] == V) {
        Score += static_cast<double>(W);
        continue;
      }
      if (At[V] > At[U]) {
        if (Start[V] - End[U] <= 1024)
          Score += 0.1 * static_cast<double>(W);
      } else if (End[U] - Start[V] <= 640) {
        Score += 0.1 * static_cast<double>(W);
      }
    }
  }
  return Score;
}

std::vector<int> cachePlusSequence(const Function &F,
                                   const FunctionProfile *FP) {
  size_t N = F.Blocks.size();
  ChainSet CS = formChains(F, FP);
  std::vector<std::vector<int>> Chains = chainList(CS, N);

  std::vector<int> Seq = Chains[0];
  std::vector<bool> Used(Chains.size(), false);
  Used[0] = true;
  for (size_t Step = 1; Step < Chains.size(); ++Step) {
    double BestScore = -1;
    size_t BestChain = 0;
    for (size_t C = 0; C < Chains.size(); ++C) {
      if (Used[C])
        continue;
      std::vector<int> Cand = Seq;
      Cand.insert(Cand.end(), Chains[C].begin(), Chains[C].end());
      double S = scoreSequence(F, FP, Cand);
      if (S > BestScore ||
          (S == BestScore && Chains[C].front() < Chains[BestChain].front())) {
        BestScore = S;
        BestChain = C;
      }
    }
    Used[BestChain] = true;
    Seq.insert(Seq.end(), Chains[BestChain].begin(), Chains[BestChain].end());
  }

  std::vector<int> Ph = phSequence(F, FP);
  return scoreSequence(F, FP, Seq) >= scoreSequence(F, FP, Ph) ? Seq : Ph;
}

} // namespace

BlockOrder reorderBlocks(const Function &F, const FlowGraph &Flow,
                         ReorderAlgorithm Alg) {
  BlockOrder Original;
  for (const BasicBlock &B : F.Blocks)
    Original.push_back(B.Label);
  if (!F.IsSimple || Alg == ReorderAlgorithm::None || F.Blocks.empty())
    return Original;
  const FunctionProfile *FP = Flow.fn(F.Name);
  std::vector<int> Seq = Alg == ReorderAlgorithm::PettisHansen
                             ? phSequence(F, FP)
                             : cachePlusSequence(F, FP);
  return toOrder(F, Seq);
}

uint64_t fallthroughWeight(const Function &F, const FlowGraph &Flow,
                           const BlockOrder &Order) {
  const FunctionProfile *FP = Flow.fn(F.Name);
  if (!FP)
    return 0;
  uint64_t W = 0;
  for (size_t I = 0; I + 1 < Order.size(); ++I) {
    int U = F.blockIndex(Order[I]);
    for (const Successor &S : F.successors(U))
      if (S.Label == Order[I + 1])
        W += FP->edgeCount(Order[I], Order[I + 1]);
  }
  return W;
}

double proximityScore(const Function &F, const FlowGraph &Flow,
                      const BlockOrder &Order) {
  std::vector<int> Seq;
  Seq.reserve(Order.size());
  for (const std::string &L : Order)
    Seq.push_back(F.blockIndex(L));
  return scoreSequence(F, Flow.fn(F.Name), Seq);
}

//===----------------------------------------------------------------------===//
// Hot/cold splitting
//===----------------------------------------------------------------------===//

std::set<std::string> splitFunction(const Function &F, const FlowGraph &Flow,
                                    const SplitOptions &Opts) {
  std::set<std::string> Cold;
  if (Opts.Mode == SplitMode::None || !F.IsSimple)
    return Cold;
  const FunctionProfile *FP = Flow.fn(F.Name);
  if (!FP)
    return Cold;
  uint64_t MaxCount = 0;
  for (const BasicBlock &B : F.Blocks)
    MaxCount = std::max(MaxCount, FP->blockCount(B.Label));
  if (MaxCount == 0)
    return Cold;
  for (size_t I = 1; I < F.Blocks.size(); ++I) {
    uint64_t C = FP->blockCount(F.Blocks[I].Label);
    bool IsCold = C == 0;
    if (Opts.Mode == SplitMode::Aggressive)
      IsCold = IsCold || static_cast<double>(C) <
                             Opts.Theta * static_cast<double>(MaxCount);
    if (IsCold)
      Cold.insert(F.Blocks[I].Label);
  }
  return Cold;
}

//===----------------------------------------------------------------------===//
// Branch fixup
//===----------------------------------------------------------------------===//

FixupResult fixupBranches(Function &F, const BlockOrder &Order,
                          const std::set<std::string> &Cold, FlowGraph &Flow) {
  FixupResult Res;
  if (F.Blocks.empty())
    return Res;

  struct TermInfo {
    int Orig = -1;
    std::string Taken; // branch target, empty when no cond/uncond terminator
    std::string Fall;  // original fall-through successor label, or empty
    bool IsCond = false;
    bool IsJmp = false;
  };
  std::map<std::string, TermInfo> Info;
  for (size_t I = 0; I < F.Blocks.size(); ++I) {
    TermInfo TI;
    TI.Orig = static_cast<int>(I);
    if (const Instruction *T = F.Blocks[I].terminator()) {
      TI.IsCond = T->Kind == InstKind::CondBranch;
      TI.IsJmp = T->Kind == InstKind::UncondBranch;
      if (TI.IsCond || TI.IsJmp)
        TI.Taken = T->Target;
    }
    if (F.hasFallthrough(I))
      TI.Fall = F.Blocks[I + 1].Label;
    Info[F.Blocks[I].Label] = TI;
  }

  std::vector<std::string> NewOrder;
  for (const std::string &L : Order)
    if (!Cold.count(L))
      NewOrder.push_back(L);
  size_t HotN = NewOrder.size();
  for (const std::string &L : Order)
    if (Cold.count(L))
      NewOrder.push_back(L);

  FunctionProfile *FP = Flow.fn(F.Name);
  std::vector<BasicBlock> NewBlocks;
  size_t HotOut = 0;
  for (size_t P = 0; P < NewOrder.size(); ++P) {
    bool InHot = P < HotN;
    std::string LayoutNext;
    if (P + 1 < NewOrder.size() && InHot == (P + 1 < HotN))
      LayoutNext = NewOrder[P + 1];

    const TermInfo &TI = Info.at(NewOrder[P]);
    BasicBlock B = F.Blocks[TI.Orig];
    std::string Trampoline; // target needing a synthetic jump block

    if (TI.IsCond) {
      Instruction &T = B.Insts.back();
      if (TI.Fall == TI.Taken) {
        if (TI.Taken != LayoutNext)
          Trampoline = TI.Taken;
      } else if (TI.Fall == LayoutNext) {
        // Already laid out right.
      } else if (TI.Taken == LayoutNext) {
        T.Target = TI.Fall;
        T.Inverted = !T.Inverted;
        ++Res.Inverted;
      } else {
        Trampoline = TI.Fall;
      }
    } else if (TI.IsJmp) {
      if (TI.Taken == LayoutNext) {
        B.Insts.pop_back();
        ++Res.Deleted;
      }
    } else if (!TI.Fall.empty() && TI.Fall != LayoutNext) {
      B.Insts.push_back({2, InstKind::UncondBranch, TI.Fall, {}, false});
      ++Res.Appended;
    }

    const std::string Label = B.Label;
    NewBlocks.push_back(std::move(B));
    if (InHot)
      ++HotOut;
    if (!Trampoline.empty()) {
      BasicBlock Ft;
      Ft.Label = uniqueLabel(F, Label + ".ft");
      Ft.Insts.push_back({2, InstKind::UncondBranch, Trampoline, {}, false});
      NewBlocks.push_back(Ft);
      if (InHot)
        ++HotOut;
      ++Res.Appended;
      if (FP) {
        auto It = FP->Edges.find({Label, Trampoline});
        uint64_t W = It != FP->Edges.end() ? It->second.Count : 0;
        if (It != FP->Edges.end())
          FP->Edges.erase(It);
        FP->Edges[{Label, Ft.Label}] = {W, 0, EdgeKind::FallThrough};
        FP->Edges[{Ft.Label, Trampoline}] = {W, 0, EdgeKind::Taken};
        FP->BlockCounts[Ft.Label] = W;
      }
      // Keep the label registered so uniqueLabel never reuses it.
      F.Blocks.push_back(BasicBlock{Ft.Label, 0, {}});
    }
  }
  F.Blocks = std::move(NewBlocks);
  Res.HotBlocks = HotOut;

  // Edge kinds follow the new layout.
  if (FP) {
    std::map<std::pair<std::string, std::string>, EdgeKind> Kinds;
    for (size_t I = 0; I < F.Blocks.size(); ++I)
      for (const Successor &S : F.successors(I))
        Kinds[{F.Blocks[I].Label, S.Label}] = S.Kind;
    for (auto &[Key, E] : FP->Edges) {
      auto It = Kinds.find(Key);
      if (It != Kinds.end())
        E.Kind = It->second;
    }
  }
  return Res;
}

//===----------------------------------------------------------------------===//
// Unreachable block elimination
//===----------------------------------------------------------------------===//

unsigned eliminateUnreachable(Function &F, FlowGraph &Flow) {
  if (!F.IsSimple || F.Blocks.empty())
    return 0;
  std::vector<char> Seen(F.Blocks.size(), 0);
  std::vector<int> Work{0};
  Seen[0] = 1;
  while (!Work.empty()) {
    int B = Work.back();
    Work.pop_back();
    for (const Successor &S : F.successors(B)) {
      int V = F.blockIndex(S.Label);
      if (V >= 0 && !Seen[V]) {
        Seen[V] = 1;
        Work.push_back(V);
      }
    }
  }
  FunctionProfile *FP = Flow.fn(F.Name);
  std::set<std::string> Removed;
  for (size_t I = 0; I < F.Blocks.size(); ++I) {
    if (Seen[I])
      continue;
    const std::string &L = F.Blocks[I].Label;
    if (FP && FP->blockCount(L) > 0)
      throw std::logic_error("uce: unreachable block " + F.Name + ":" + L +
                             " has a positive count");
    Removed.insert(L);
  }
  if (Removed.empty())
    return 0;
  std::erase_if(F.Blocks, [&Removed](const BasicBlock &B) {
    return Removed.count(B.Label) != 0;
  });
  if (FP) {
    for (const std::string &L : Removed)
      FP->BlockCounts.erase(L);
    std::erase_if(FP->Edges, [&Removed](const auto &E) {
      return Removed.count(E.first.first) || Removed.count(E.first.second);
    });
  }
  return static_cast<unsigned>(Removed.size());
}

//===----------------------------------------------------------------------===//
// Function reordering
//===----------------------------------------------------------------------===//

std::vector<std::string> reorderFunctions(const Program &Prog,
                                          const CallGraph &Calls,
                                          const HfsortOptions &Opts) {
  size_t N = Prog.Functions.size();
  std::map<std::string, size_t> Index;
  for (size_t I = 0; I < N; ++I)
    Index[Prog.Functions[I].Name] = I;

  std::vector<uint64_t> Weight(N, 0);
  std::vector<char> HasArc(N, 0);
  struct Arc {
    uint64_t W;
    size_t Caller, Callee;
  };
  std::vector<Arc> Arcs;
  for (const auto &[Key, W] : Calls.Edges) {
    auto CI = Index.find(Key.first);
    auto TI = Index.find(Key.second);
    if (W == 0 || CI == Index.end() || TI == Index.end())
      continue;
    if (!Prog.Functions[CI->second].IsSimple ||
        !Prog.Functions[TI->second].IsSimple)
      continue;
    Weight[TI->second] += W;
    HasArc[CI->second] = HasArc[TI->second] = 1;
    if (CI->second != TI->second)
      Arcs.push_back({W, CI->second, TI->second});
  }
  std::stable_sort(Arcs.begin(), Arcs.end(), [](const Arc &A, const Arc &B) {
    if (A.W != B.W)
      return A.W > B.W;
    if (A.Caller != B.Caller)
      return A.Caller < B.Caller;
    return A.Callee < B.Callee;
  });

  struct Cluster {
    std::vector<size_t> Members;
    uint64_t W = 0, Size = 0;
    double density() const {
      return static_cast<double>(W) /
             static_cast<double>(std::max<uint64_t>(1, Size));
    }
  };
  std::vector<Cluster> Clusters(N);
  std::vector<size_t> ClusterOf(N);
  for (size_t I = 0; I < N; ++I) {
    Clusters[I].Members = {I};
    Clusters[I].W = Weight[I];
    Clusters[I].Size = Prog.Functions[I].size();
    ClusterOf[I] = I;
  }
  for (const Arc &A : Arcs) {
    size_t Ca = ClusterOf[A.Caller], Cb = ClusterOf[A.Callee];
    if (Ca == Cb)
      continue;
    Cluster &X = Clusters[Ca];
    Cluster &Y = Clusters[Cb];
    if (X.Size + Y.Size > Opts.ClusterCap)
      continue;
    double Merged = static_cast<double>(X.W + Y.W) /
                    static_cast<double>(std::max<uint64_t>(1, X.Size + Y.Size));
    if (Merged < Opts.DensityBound * std::max(X.density(), Y.density()))
      continue;
    for (size_t M : Y.Members) {
      ClusterOf[M] = Ca;
      X.Members.push_back(M);
    }
    X.W += Y.W;
    X.Size += Y.Size;
    Y.Members.clear();
  }

  std::vector<size_t> Live;
  for (size_t I = 0; I < N; ++I)
    if (!Clusters[I].Members.empty() && HasArc[Clusters[I].Members.front()])
      Live.push_back(I);
  std::stable_sort(Live.begin(), Live.end(), [&](size_t A, size_t B) {
    double Da = Clusters[A].density(), Db = Clusters[B].density();
    if (Da != Db)
      return Da > Db;
    return Clusters[A].Members.front() < Clusters[B].Members.front();
  });

  std::vector<std::string> Order;
  std::vector<char> Emitted(N, 0);
  for (size_t C : Live)
    for (size_t M : Clusters[C].Members) {
      if (!HasArc[M])
        continue;
      Order.push_back(Prog.Functions[M].Name);
      Emitted[M] = 1;
    }
  for (size_t I = 0; I < N; ++I)
    if (!Emitted[I])
      Order.push_back(Prog.Functions[I].Name);
  return Order;
}

//===----------------------------------------------------------------------===//
// Address assignment
//===----------------------------------------------------------------------===//

const BlockPlacement *LayoutPlan::find(const std::string &Func,
                                       const std::string &Label) const {
  for (const BlockPlacement &P : Order)
    if (P.Func == Func && P.Label == Label)
      return &P;
  return nullptr;
}

uint64_t LayoutPlan::addressOf(const std::string &Func,
                               const std::string &Label) const {
  const BlockPlacement *P = find(Func, Label);
  if (!P)
    throw std::runtime_error("layout: no placement for " + Func + ":" + Label);
  return P->Address;
}

LayoutPlan assignAddresses(Program &Prog,
                           const std::vector<std::string> &FnOrder,
                           const std::map<std::string, size_t> &HotBlocks,
                           const LayoutConfig &Config) {
  std::vector<Function *> Fns;
  {
    std::set<std::string> Seen;
    for (const std::string &Name : FnOrder) {
      Function *F = lookupFn(Prog, Name);
      if (!F)
        throw std::runtime_error("layout: unknown function '" + Name + "'");
      if (!Seen.insert(Name).second)
        throw std::runtime_error("layout: duplicate function '" + Name + "'");
      Fns.push_back(F);
    }
    if (Fns.size() != Prog.Functions.size())
      throw std::runtime_error("layout: order does not cover every function");
  }
  auto hotCount = [&](const Function &F) {
    auto It = HotBlocks.find(F.Name);
    size_t N = It == HotBlocks.end() ? F.Blocks.size() : It->second;
    return std::min(N, F.Blocks.size());
  };

  // Branch sizes start at their short forms and only ever grow.
  size_t Branches = 0;
  for (Function *F : Fns)
    for (BasicBlock &B : F->Blocks)
      for (Instruction &I : B.Insts) {
        if (I.Kind == InstKind::CondBranch)
          I.Size = 2;
        else if (I.Kind == InstKind::UncondBranch)
          I.Size = 2;
        else
          continue;
        ++Branches;
      }

  LayoutPlan Plan;
  Plan.HotBase = Config.HotBase;
  Plan.ColdBase = Config.ColdBase;
  uint64_t Align = std::max<uint64_t>(1, Config.FuncAlign);
  auto alignUp = [Align](uint64_t A) { return (A + Align - 1) / Align * Align; };

  for (unsigned Iter = 0;; ++Iter) {
    uint64_t Hot = Config.HotBase, Cold = Config.ColdBase;
    for (Function *F : Fns) {
      size_t HC = hotCount(*F);
      if (HC > 0)
        Hot = alignUp(Hot);
      for (size_t I = 0; I < HC; ++I) {
        F->Blocks[I].Address = Hot;
        Hot += F->Blocks[I].size();
      }
      if (HC < F->Blocks.size())
        Cold = alignUp(Cold);
      for (size_t I = HC; I < F->Blocks.size(); ++I) {
        F->Blocks[I].Address = Cold;
        Cold += F->Blocks[I].size();
      }
    }
    Plan.HotEnd = Hot;
    Plan.ColdEnd = Cold;

    bool Changed = false;
    for (Function *F : Fns)
      for (BasicBlock &B : F->Blocks) {
        Instruction *T = B.terminator();
        if (!T || (T->Kind != InstKind::CondBranch &&
                   T->Kind != InstKind::UncondBranch))
          continue;
        bool Short = T->Size == 2;
        if (!Short)
          continue;
        int TargetIdx = F->blockIndex(T->Target);
        uint64_t BranchAddr = B.Address + B.terminatorOffset();
        int64_t Disp = static_cast<int64_t>(F->Blocks[TargetIdx].Address) -
                       static_cast<int64_t>(BranchAddr + T->Size);
        if (Disp < -128 || Disp > 127) {
          T->Size = T->Kind == InstKind::CondBranch ? 6 : 5;
          Changed = true;
        }
      }
    if (!Changed) {
      Plan.RelaxIterations = Iter;
      break;
    }
    if (Iter > Branches)
      throw std::logic_error("layout: relaxation failed to reach a fixpoint");
  }

  bool HaveCold = Plan.ColdEnd > Plan.ColdBase;
  if (HaveCold && Plan.HotEnd > Config.ColdBase && Plan.HotBase < Plan.ColdEnd)
    throw std::runtime_error("layout: hot and cold ranges overlap");

  for (Function *F : Fns)
    if (!F->Blocks.empty())
      F->Address = F->Blocks.front().Address;

  for (Function *F : Fns) {
    size_t HC = hotCount(*F);
    for (size_t I = 0; I < HC; ++I)
      Plan.Order.push_back({F->Name, F->Blocks[I].Label,
                            F->Blocks[I].Address, F->Blocks[I].size(), false});
  }
  for (Function *F : Fns)
    for (size_t I = hotCount(*F); I < F->Blocks.size(); ++I)
      Plan.Order.push_back({F->Name, F->Blocks[I].Label, F->Blocks[I].Address,
                            F->Blocks[I].size(), true});
  return Plan;
}

LayoutPlan identityPlan(const Program &Prog) {
  LayoutPlan Plan;
  Plan.HotBase = Prog.TextBase;
  Plan.HotEnd = Prog.TextBase + Prog.totalTextSize();
  Plan.ColdBase = Plan.ColdEnd = Plan.HotEnd;
  for (const Function &F : Prog.Functions)
    for (const BasicBlock &B : F.Blocks)
      Plan.Order.push_back({F.Name, B.Label, B.Address, B.size(), false});
  return Plan;
}

//===----------------------------------------------------------------------===//
// Pipeline
//===----------------------------------------------------------------------===//

PipelineResult runPipeline(Program Prog, FlowGraph Flow, CallGraph Calls,
                           IndirectCallProfile Sites,
                           const PipelineConfig &Config) {
  PipelineResult Res;
  auto log = [&Res](std::string S) { Res.Log.push_back(std::move(S)); };

  if (Config.StripNops)
    log("strip-nops: removed " + std::to_string(stripNops(Prog)));
  else
    log("strip-nops: disabled");

  if (Config.Fold) {
    FoldMap M = foldIdentical(Prog, Flow, Calls, Sites);
    log("icf: folded " + std::to_string(M.size()));
  } else {
    log("icf: disabled");
  }

  if (Config.PromoteCalls) {
    IcpResult R = promoteIndirectCalls(Prog, Flow, Calls, Sites, Config.Icp);
    log("icp: promoted " + std::to_string(R.Promoted) + ", skipped " +
        std::to_string(R.SkippedEmpty) + " empty");
    for (std::string &L : R.Log)
      log(std::move(L));
  } else {
    log("icp: disabled");
  }

  if (Config.Fold) {
    FoldMap M = foldIdentical(Prog, Flow, Calls, Sites);
    log("icf: second run folded " + std::to_string(M.size()));
  } else {
    log("icf: second run disabled");
  }

  std::map<std::string, BlockOrder> Orders;
  std::map<std::string, std::set<std::string>> ColdSets;
  for (const Function &F : Prog.Functions) {
    Orders[F.Name] = Config.Reorder
                         ? reorderBlocks(F, Flow, Config.Algorithm)
                         : reorderBlocks(F, Flow, ReorderAlgorithm::None);
    if (Config.Split)
      ColdSets[F.Name] = splitFunction(F, Flow, Config.Splitting);
  }
  log(std::string("reorder-bbs: ") +
      (Config.Reorder ? (Config.Algorithm == ReorderAlgorithm::PettisHansen
                             ? "ph"
                             : "cache+")
                      : "disabled"));
  size_t ColdTotal = 0;
  for (const auto &[Name, S] : ColdSets)
    ColdTotal += S.size();
  log("split-functions: " +
      (Config.Split ? std::to_string(ColdTotal) + " cold blocks"
                    : std::string("disabled")));

  if (Config.RemoveUnreachable) {
    unsigned Removed = 0;
    for (Function &F : Prog.Functions) {
      unsigned N = eliminateUnreachable(F, Flow);
      if (N > 0) {
        std::set<std::string> Alive;
        for (const BasicBlock &B : F.Blocks)
          Alive.insert(B.Label);
        BlockOrder &O = Orders[F.Name];
        std::erase_if(O, [&Alive](const std::string &L) {
          return Alive.count(L) == 0;
        });
        std::erase_if(ColdSets[F.Name], [&Alive](const std::string &L) {
          return Alive.count(L) == 0;
        });
        Removed += N;
      }
    }
    log("uce: removed " + std::to_string(Removed));
  } else {
    log("uce: disabled");
  }

  std::map<std::string, size_t> HotCounts;
  if (Config.Fixup) {
    unsigned Inv = 0, Del = 0, App = 0;
    for (Function &F : Prog.Functions) {
      if (!F.IsSimple) {
        HotCounts[F.Name] = F.Blocks.size();
        continue;
      }
      FixupResult R =
          fixupBranches(F, Orders[F.Name], ColdSets[F.Name], Flow);
      HotCounts[F.Name] = R.HotBlocks;
      Inv += R.Inverted;
      Del += R.Deleted;
      App += R.Appended;
    }
    log("fixup-branches: inverted " + std::to_string(Inv) + ", deleted " +
        std::to_string(Del) + ", appended " + std::to_string(App));
  } else {
    for (const Function &F : Prog.Functions)
      HotCounts[F.Name] = F.Blocks.size();
    log("fixup-branches: disabled");
  }

  std::vector<std::string> FnOrder;
  if (Config.ReorderFns) {
    FnOrder = reorderFunctions(Prog, Calls, Config.Hfsort);
    log("reorder-functions: hfsort over " +
        std::to_string(Calls.Edges.size()) + " arcs");
  } else {
    for (const Function &F : Prog.Functions)
      FnOrder.push_back(F.Name);
    log("reorder-functions: disabled");
  }

  Res.Plan = assignAddresses(Prog, FnOrder, HotCounts, Config.Layout);
  log("assign-addresses: hot " + std::to_string(Res.Plan.HotEnd - Res.Plan.HotBase) +
      " bytes, cold " + std::to_string(Res.Plan.ColdEnd - Res.Plan.ColdBase) +
      " bytes, relax iterations " + std::to_string(Res.Plan.RelaxIterations));

  Res.Model = std::move(Prog);
  Res.Flow = std::move(Flow);
  Res.Calls = std::move(Calls);
  Res.Sites = std::move(Sites);
  return Res;
}

} // namespace layopt
