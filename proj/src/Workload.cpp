//===- Workload.cpp - Synthetic corpus generation -------------------------===//
//
// Part of the layopt project, under the Apache License v2.0.
// SPDX-License-Identifier: Apache-2.0
//
//===----------------------------------------------------------------------===//

#include "layopt/Workload.h"

#include <random>
#include <stdexcept>
#include <utility>

namespace layopt {

namespace {

Instruction plain(uint32_t Size) {
  Instruction I;
  I.Size = Size;
  I.Kind = InstKind::Plain;
  return I;
}

Instruction nop() {
  Instruction I;
  I.Size = 1;
  I.Kind = InstKind::Nop;
  return I;
}

Instruction jcc(const std::string &Target) {
  Instruction I;
  I.Size = 2;
  I.Kind = InstKind::CondBranch;
  I.Target = Target;
  return I;
}

Instruction jmp(const std::string &Target) {
  Instruction I;
  I.Size = 2;
  I.Kind = InstKind::UncondBranch;
  I.Target = Target;
  return I;
}

Instruction ijmp() {
  Instruction I;
  I.Size = 3;
  I.Kind = InstKind::IndirectBranch;
  return I;
}

Instruction ret() {
  Instruction I;
  I.Size = 1;
  I.Kind = InstKind::Return;
  return I;
}

Instruction call(const std::string &Target) {
  Instruction I;
  I.Size = 5;
  I.Kind = InstKind::DirectCall;
  I.Target = Target;
  return I;
}

Instruction icall() {
  Instruction I;
  I.Size = 5;
  I.Kind = InstKind::IndirectCall;
  return I;
}

BasicBlock block(const std::string &Label, std::vector<Instruction> Insts) {
  BasicBlock B;
  B.Label = Label;
  B.Insts = std::move(Insts);
  return B;
}

void setEdge(FunctionProfile &P, const std::string &Src, const std::string &Dst,
             uint64_t Count, EdgeKind Kind) {
  EdgeProfile &E = P.Edges[{Src, Dst}];
  E.Count = Count;
  E.Kind = Kind;
}

// Fall-through chain with forward skips. Every skip splits the inflow at a
// random ratio, so the weights are conserved by construction.
Function buildChain(const std::string &Name, std::mt19937_64 &Rng, bool Hot,
                    FunctionProfile *Prof) {
  Function F;
  F.Name = Name;
  size_t K = 4 + Rng() % 6;
  std::vector<bool> Skips(K, false);
  for (size_t I = 0; I + 2 < K; ++I)
    Skips[I] = Rng() % 100 < 40;
  for (size_t I = 0; I < K; ++I) {
    std::string Label = "b" + std::to_string(I);
    std::vector<Instruction> Insts;
    Insts.push_back(plain(2 + static_cast<uint32_t>(Rng() % 7)));
    if (Hot && I == 0)
      Insts.push_back(nop());
    if (I + 1 == K)
      Insts.push_back(ret());
    else if (Skips[I])
      Insts.push_back(jcc("b" + std::to_string(I + 2)));
    F.Blocks.push_back(block(Label, std::move(Insts)));
  }
  if (!Prof)
    return F;
  uint64_t Entry = 200 + Rng() % 800;
  std::vector<uint64_t> In(K, 0);
  In[0] = Entry;
  for (size_t I = 0; I + 1 < K; ++I) {
    std::string Src = "b" + std::to_string(I);
    std::string Next = "b" + std::to_string(I + 1);
    if (Skips[I]) {
      uint64_t Taken = In[I] * (10 + Rng() % 81) / 100;
      setEdge(*Prof, Src, "b" + std::to_string(I + 2), Taken, EdgeKind::Taken);
      setEdge(*Prof, Src, Next, In[I] - Taken, EdgeKind::FallThrough);
      In[I + 2] += Taken;
      In[I + 1] += In[I] - Taken;
    } else {
      setEdge(*Prof, Src, Next, In[I], EdgeKind::FallThrough);
      In[I + 1] += In[I];
    }
  }
  Prof->EntryCount = Entry;
  return F;
}

// A run of two-way splits whose hot side is always the taken target; the
// cold side falls through and jumps back into the spine. Reordering the hot
// side into the fall-through position removes most taken branches.
Function buildDiamond(const std::string &Name, std::mt19937_64 &Rng, bool Hot,
                      FunctionProfile *Prof) {
  Function F;
  F.Name = Name;
  size_t D = 3 + Rng() % 4;
  auto nextHead = [&](size_t K) {
    return K + 1 < D ? "h" + std::to_string(K + 1) : std::string("end");
  };
  std::vector<uint64_t> Shares(D, 0);
  for (size_t K = 0; K < D; ++K) {
    Shares[K] = 85 + Rng() % 11;
    std::string HL = "h" + std::to_string(K);
    std::string SL = "s" + std::to_string(K);
    std::string TL = "t" + std::to_string(K);
    std::vector<Instruction> Head;
    Head.push_back(plain(2 + static_cast<uint32_t>(Rng() % 6)));
    if (Hot && K == 0)
      Head.push_back(nop());
    Head.push_back(jcc(TL));
    F.Blocks.push_back(block(HL, std::move(Head)));
    F.Blocks.push_back(block(
        SL, {plain(2 + static_cast<uint32_t>(Rng() % 6)), jmp(nextHead(K))}));
    F.Blocks.push_back(block(TL, {plain(2 + static_cast<uint32_t>(Rng() % 6))}));
  }
  F.Blocks.push_back(
      block("end", {plain(1 + static_cast<uint32_t>(Rng() % 4)), ret()}));
  if (!Prof)
    return F;
  uint64_t Entry = 500 + Rng() % 1500;
  for (size_t K = 0; K < D; ++K) {
    uint64_t Taken = Entry * Shares[K] / 100;
    uint64_t Fall = Entry - Taken;
    std::string HL = "h" + std::to_string(K);
    std::string SL = "s" + std::to_string(K);
    std::string TL = "t" + std::to_string(K);
    setEdge(*Prof, HL, TL, Taken, EdgeKind::Taken);
    setEdge(*Prof, HL, SL, Fall, EdgeKind::FallThrough);
    setEdge(*Prof, SL, nextHead(K), Fall, EdgeKind::Taken);
    setEdge(*Prof, TL, nextHead(K), Taken, EdgeKind::FallThrough);
  }
  Prof->EntryCount = Entry;
  return F;
}

// Two predecessors share a successor pair with opposite true preferences.
// The taken-entry predecessor p2 carries more flow, yet the aggregate counts
// favor s1, the successor preferred by the lighter p1. Inference that splits
// proportionally to block counts therefore pairs p2 with s1, while the true
// flow pairs p2 with s2.
Function buildCorrelated(const std::string &Name, std::mt19937_64 &Rng,
                         bool Hot, FunctionProfile *Prof) {
  Function F;
  F.Name = Name;
  auto body = [&](uint32_t Extra) {
    return plain(2 + static_cast<uint32_t>(Rng() % 8) + Extra);
  };
  std::vector<Instruction> EntryInsts;
  EntryInsts.push_back(body(0));
  if (Hot)
    EntryInsts.push_back(nop());
  EntryInsts.push_back(jcc("p2"));
  F.Blocks.push_back(block("e", std::move(EntryInsts)));
  F.Blocks.push_back(block("p1", {body(0), jcc("s2")}));
  F.Blocks.push_back(block("s1", {body(0), jmp("x")}));
  F.Blocks.push_back(block("p2", {body(0), jcc("s1")}));
  F.Blocks.push_back(block("s2", {body(0)}));
  F.Blocks.push_back(
      block("x", {plain(1 + static_cast<uint32_t>(Rng() % 4)), ret()}));
  if (!Prof)
    return F;
  uint64_t Unit = 20 + Rng() % 30;
  uint64_t E1 = (40 + Rng() % 7) * Unit;
  uint64_t E2 = 100 * Unit - E1;
  uint64_t A = E1 * (85 + Rng() % 11) / 100;
  uint64_t B = E1 - A;
  uint64_t D = E2 * (55 + Rng() % 8) / 100;
  uint64_t C = E2 - D;
  setEdge(*Prof, "e", "p1", E1, EdgeKind::FallThrough);
  setEdge(*Prof, "e", "p2", E2, EdgeKind::Taken);
  setEdge(*Prof, "p1", "s1", A, EdgeKind::FallThrough);
  setEdge(*Prof, "p1", "s2", B, EdgeKind::Taken);
  setEdge(*Prof, "p2", "s2", D, EdgeKind::FallThrough);
  setEdge(*Prof, "p2", "s1", C, EdgeKind::Taken);
  setEdge(*Prof, "s1", "x", A + C, EdgeKind::Taken);
  setEdge(*Prof, "s2", "x", B + D, EdgeKind::FallThrough);
  Prof->EntryCount = E1 + E2;
  return F;
}

// A looping hot spine interleaved with never-executed blocks. The hot blocks
// hop over their cold neighbors with taken branches, so before optimization
// the executed bytes are spread over twice their packed footprint.
Function buildLocality(const std::string &Name, std::mt19937_64 &Rng, bool Hot,
                       FunctionProfile *Prof, const std::string &CallTarget) {
  Function F;
  F.Name = Name;
  size_t Pairs = 26 + Rng() % 6;
  auto wide = [&]() { return plain(60 + static_cast<uint32_t>(Rng() % 16)); };
  for (size_t K = 0; K < Pairs; ++K) {
    std::string HL = "h" + std::to_string(K);
    std::vector<Instruction> Insts;
    if (K == 0) {
      Insts.push_back(plain(28 + static_cast<uint32_t>(Rng() % 8)));
      if (!CallTarget.empty())
        Insts.push_back(call(CallTarget));
      if (Hot)
        Insts.push_back(nop());
      Insts.push_back(plain(28 + static_cast<uint32_t>(Rng() % 8)));
    } else {
      Insts.push_back(wide());
    }
    Insts.push_back(
        jcc(K + 1 < Pairs ? "h" + std::to_string(K + 1) : std::string("h0")));
    F.Blocks.push_back(block(HL, std::move(Insts)));
    if (K + 1 < Pairs)
      F.Blocks.push_back(block("c" + std::to_string(K), {wide()}));
  }
  F.Blocks.push_back(
      block("end", {plain(2 + static_cast<uint32_t>(Rng() % 4)), ret()}));
  if (!Prof)
    return F;
  uint64_t Entry = 300 + Rng() % 300;
  uint64_t Loops = 14 + Rng() % 6;
  uint64_t Spine = Entry * Loops;
  for (size_t K = 0; K + 1 < Pairs; ++K)
    setEdge(*Prof, "h" + std::to_string(K), "h" + std::to_string(K + 1), Spine,
            EdgeKind::Taken);
  std::string Last = "h" + std::to_string(Pairs - 1);
  setEdge(*Prof, Last, "h0", Entry * (Loops - 1), EdgeKind::Taken);
  setEdge(*Prof, Last, "end", Entry, EdgeKind::FallThrough);
  Prof->EntryCount = Entry;
  return F;
}

// A function the passes must leave alone: an indirect call followed by a
// bare indirect branch, which makes the CFG unknowable.
Function buildIrregular(const std::string &Name, std::mt19937_64 &Rng) {
  Function F;
  F.Name = Name;
  F.Blocks.push_back(block(
      "e", {plain(2 + static_cast<uint32_t>(Rng() % 6)), icall(),
            plain(2 + static_cast<uint32_t>(Rng() % 6))}));
  F.Blocks.push_back(
      block("m", {plain(2 + static_cast<uint32_t>(Rng() % 6)), ijmp()}));
  return F;
}

} // namespace

const char *corpusShapeName(CorpusShape Shape) {
  switch (Shape) {
  case CorpusShape::Chain:
    return "chain";
  case CorpusShape::Diamond:
    return "diamond";
  case CorpusShape::Correlated:
    return "correlated";
  case CorpusShape::Locality:
    return "locality";
  case CorpusShape::Mixed:
    return "mixed";
  }
  return "mixed";
}

std::optional<CorpusShape> parseCorpusShape(const std::string &Name) {
  if (Name == "chain")
    return CorpusShape::Chain;
  if (Name == "diamond")
    return CorpusShape::Diamond;
  if (Name == "correlated")
    return CorpusShape::Correlated;
  if (Name == "locality")
    return CorpusShape::Locality;
  if (Name == "mixed")
    return CorpusShape::Mixed;
  return std::nullopt;
}

Workload generateWorkload(const WorkloadOptions &Opts) {
  if (Opts.Functions == 0)
    throw std::invalid_argument("workload: function count must be positive");
  if (Opts.HotFraction < 0.0 || Opts.HotFraction > 1.0)
    throw std::invalid_argument("workload: hot fraction must lie in [0, 1]");

  size_t N = Opts.Functions;
  size_t NumHot = static_cast<size_t>(Opts.HotFraction * static_cast<double>(N) + 0.5);
  if (Opts.HotFraction > 0.0 && NumHot == 0)
    NumHot = 1;
  size_t Stride = NumHot ? N / NumHot : N;
  if (Stride == 0)
    Stride = 1;
  auto isHot = [&](size_t I) {
    return NumHot > 0 && I % Stride == 0 && I / Stride < NumHot;
  };

  // The ring of hot functions, for call arcs between them.
  std::vector<size_t> HotIndices;
  for (size_t I = 0; I < N; ++I)
    if (isHot(I))
      HotIndices.push_back(I);
  auto callTarget = [&](size_t I) -> std::string {
    if (HotIndices.size() < 2 || !isHot(I))
      return "";
    for (size_t J = 0; J < HotIndices.size(); ++J)
      if (HotIndices[J] == I)
        return "f" + std::to_string(HotIndices[(J + 1) % HotIndices.size()]);
    return "";
  };

  std::mt19937_64 Master(Opts.Seed);
  std::vector<uint64_t> SubSeeds(N);
  for (uint64_t &S : SubSeeds)
    S = Master();

  // Mixed corpora roll a shape per function; index pairs rolled as twins
  // share one body so the fold pass has work.
  std::vector<int> Rolls(N, -1);
  if (Opts.Shape == CorpusShape::Mixed) {
    std::mt19937_64 RollRng(Opts.Seed ^ 0x5851F42D4C957F2DULL);
    for (size_t I = 0; I < N; ++I) {
      if (Rolls[I] >= 0)
        continue;
      int R = static_cast<int>(RollRng() % 10);
      Rolls[I] = R;
      if (R == 9 && I + 1 < N && Rolls[I + 1] < 0) {
        Rolls[I + 1] = 10; // twin of the previous function
        SubSeeds[I + 1] = SubSeeds[I];
      }
    }
  }

  Workload W;
  W.Model.TextBase = 0x10000;
  uint64_t Cursor = W.Model.TextBase;
  for (size_t I = 0; I < N; ++I) {
    std::string Name = "f" + std::to_string(I);
    std::mt19937_64 Rng(SubSeeds[I]);
    bool Hot = isHot(I);
    FunctionProfile Prof;
    bool HasProf = Hot;
    Function F;
    CorpusShape Shape = Opts.Shape;
    if (Opts.Shape == CorpusShape::Mixed) {
      int R = Rolls[I];
      if (R == 8) {
        F = buildIrregular(Name, Rng);
        HasProf = false;
      } else if (R == 9 || R == 10) {
        // Twins share a body; only the first carries weight.
        F = buildChain(Name, Rng, false, nullptr);
        HasProf = false;
      } else {
        Shape = R < 3   ? CorpusShape::Chain
                : R < 6 ? CorpusShape::Diamond
                        : CorpusShape::Correlated;
      }
    }
    if (F.Blocks.empty()) {
      switch (Shape) {
      case CorpusShape::Chain:
        F = buildChain(Name, Rng, Hot, HasProf ? &Prof : nullptr);
        break;
      case CorpusShape::Diamond:
        F = buildDiamond(Name, Rng, Hot, HasProf ? &Prof : nullptr);
        break;
      case CorpusShape::Correlated:
        F = buildCorrelated(Name, Rng, Hot, HasProf ? &Prof : nullptr);
        break;
      case CorpusShape::Locality:
        F = buildLocality(Name, Rng, Hot, HasProf ? &Prof : nullptr,
                          callTarget(I));
        break;
      case CorpusShape::Mixed:
        break;
      }
    }
    F.Address = Cursor;
    Cursor += F.size();
    if (HasProf)
      W.Weights.Functions[Name] = std::move(Prof);
    W.Model.Functions.push_back(std::move(F));
  }
  finalizeProgram(W.Model);
  populateBlockCounts(W.Model, W.Weights);
  return W;
}

} // namespace layopt
