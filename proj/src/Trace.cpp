//===- Trace.cpp - Trace parsing and synthetic generation ------------------===//
//
// Part of the layopt project, under the Apache License v2.0.
// SPDX-License-Identifier: Apache-2.0
//
//===----------------------------------------------------------------------===//

#include "layopt/Trace.h"
#include "layopt/Profile.h"

#include <charconv>
#include <random>
#include <sstream>

namespace layopt {

namespace {

bool parseHexValue(std::string_view Tok, uint64_t &V) {
  if (Tok.size() > 2 && Tok[0] == '0' && Tok[1] == 'x')
    Tok.remove_prefix(2);
  if (Tok.empty())
    return false;
  auto [P, Ec] = std::from_chars(Tok.data(), Tok.data() + Tok.size(), V, 16);
  return Ec == std::errc() && P == Tok.data() + Tok.size();
}

bool parseLbrToken(const std::string &Tok, LbrEntry &E) {
  size_t S1 = Tok.find('/');
  size_t S2 = Tok.rfind('/');
  if (S1 == std::string::npos || S2 == S1 || S2 + 2 != Tok.size())
    return false;
  char Flag = Tok[S2 + 1];
  if (Flag != 'P' && Flag != 'M')
    return false;
  E.Mispredicted = Flag == 'M';
  return parseHexValue(std::string_view(Tok).substr(0, S1), E.From) &&
         parseHexValue(std::string_view(Tok).substr(S1 + 1, S2 - S1 - 1),
                       E.To);
}

} // namespace

TraceData parseTrace(const std::string &Text) {
  TraceData Data;
  std::istringstream In(Text);
  std::string Line;
  while (std::getline(In, Line)) {
    std::istringstream SS(Line);
    std::vector<std::string> Toks;
    std::string T;
    while (SS >> T) {
      if (T[0] == '#')
        break;
      Toks.push_back(T);
    }
    if (Toks.empty())
      continue;
    if (Toks[0] == "S" && Toks.size() == 2) {
      uint64_t Ip;
      if (parseHexValue(Toks[1], Ip)) {
        Data.Samples.push_back({Ip});
        continue;
      }
    } else if (Toks[0] == "L" && Toks.size() > 1 &&
               Toks.size() - 1 <= MaxLbrDepth) {
      LbrStack Stack;
      bool Ok = true;
      for (size_t I = 1; I < Toks.size() && Ok; ++I) {
        LbrEntry E;
        Ok = parseLbrToken(Toks[I], E);
        Stack.Entries.push_back(E);
      }
      if (Ok) {
        Data.Stacks.push_back(std::move(Stack));
        continue;
      }
    }
    ++Data.MalformedLines;
  }
  return Data;
}

std::string renderTrace(const TraceData &Trace) {
  std::ostringstream Out;
  char Buf[64];
  for (const IpSample &S : Trace.Samples) {
    snprintf(Buf, sizeof(Buf), "S 0x%llx\n",
             static_cast<unsigned long long>(S.Ip));
    Out << Buf;
  }
  for (const LbrStack &Stack : Trace.Stacks) {
    Out << "L";
    for (const LbrEntry &E : Stack.Entries) {
      snprintf(Buf, sizeof(Buf), " 0x%llx/0x%llx/%c",
               static_cast<unsigned long long>(E.From),
               static_cast<unsigned long long>(E.To),
               E.Mispredicted ? 'M' : 'P');
      Out << Buf;
    }
    Out << "\n";
  }
  return Out.str();
}

namespace {

// Uniform double in [0, 1) from the standard 64-bit Mersenne engine, avoiding
// std distributions whose sequences vary across standard libraries.
double uniform(std::mt19937_64 &Rng) {
  return static_cast<double>(Rng() >> 11) * 0x1.0p-53;
}

// CDF walk over non-negative weights summing to Total > 0. Rounding noise
// must never select a zero-weight item.
size_t pickWeighted(std::mt19937_64 &Rng, const std::vector<double> &W,
                    double Total) {
  double R = uniform(Rng) * Total;
  size_t Last = 0;
  bool Any = false;
  for (size_t I = 0; I < W.size(); ++I) {
    if (W[I] <= 0)
      continue;
    if (R < W[I])
      return I;
    R -= W[I];
    Last = I;
    Any = true;
  }
  return Any ? Last : 0;
}

struct WalkState {
  const Function *F = nullptr;
  size_t Block = 0;
};

} // namespace

TraceGenResult generateTrace(const Program &Prog, const FlowGraph &Weights,
                             const TraceGenOptions &Opts) {
  TraceGenResult Res;
  if (Prog.Functions.empty() || Opts.NumStacks == 0 || Opts.Depth == 0)
    return Res;
  size_t Depth = std::min(Opts.Depth, MaxLbrDepth);
  std::mt19937_64 Rng(Opts.Seed);

  // Entry weights for walk starts; uniform when the profile names none.
  std::vector<double> EntryW(Prog.Functions.size(), 0.0);
  double EntryTotal = 0;
  for (size_t I = 0; I < Prog.Functions.size(); ++I) {
    if (const FunctionProfile *FP = Weights.fn(Prog.Functions[I].Name))
      EntryW[I] = static_cast<double>(FP->EntryCount);
    EntryTotal += EntryW[I];
  }
  if (EntryTotal == 0) {
    std::fill(EntryW.begin(), EntryW.end(), 1.0);
    EntryTotal = static_cast<double>(EntryW.size());
  }

  auto pickEntry = [&]() -> WalkState {
    size_t I = pickWeighted(Rng, EntryW, EntryTotal);
    Res.EntryCounts[Prog.Functions[I].Name]++;
    return {&Prog.Functions[I], 0};
  };

  size_t SampleClock = 0;
  auto visitBlock = [&](const WalkState &W) {
    if (!Opts.SampleEvery)
      return;
    if (++SampleClock % Opts.SampleEvery)
      return;
    // Sample a uniformly chosen instruction start within the block.
    const BasicBlock &B = W.F->Blocks[W.Block];
    if (B.Insts.empty()) {
      Res.Samples.push_back({B.Address});
      return;
    }
    size_t Pick = static_cast<size_t>(uniform(Rng) * B.Insts.size());
    if (Pick >= B.Insts.size())
      Pick = B.Insts.size() - 1;
    uint64_t Off = 0;
    for (size_t I = 0; I < Pick; ++I)
      Off += B.Insts[I].Size;
    Res.Samples.push_back({B.Address + Off});
  };

  const size_t Budget = 32 + 24 * Depth;
  for (size_t SI = 0; SI < Opts.NumStacks; ++SI) {
    std::vector<LbrEntry> Entries; // oldest first while building
    WalkState W = pickEntry();
    visitBlock(W);
    for (size_t Step = 0; Step < Budget && Entries.size() < Depth; ++Step) {
      const Function &F = *W.F;
      const BasicBlock &B = F.Blocks[W.Block];
      std::vector<Successor> Succs = F.successors(W.Block);
      if (Succs.empty()) {
        if (!B.terminator() || B.terminator()->Kind != InstKind::Return)
          ++Res.TrapRestarts;
        W = pickEntry();
        visitBlock(W);
        continue;
      }
      const FunctionProfile *FP = Weights.fn(F.Name);
      std::vector<double> EW(Succs.size(), 0.0);
      double Total = 0;
      for (size_t I = 0; I < Succs.size(); ++I) {
        if (FP)
          EW[I] = static_cast<double>(FP->edgeCount(B.Label, Succs[I].Label));
        Total += EW[I];
      }
      if (Total == 0) {
        std::fill(EW.begin(), EW.end(), 1.0);
        Total = static_cast<double>(EW.size());
      }
      const Successor &S = Succs[pickWeighted(Rng, EW, Total)];
      Res.EdgeCounts[{F.Name, B.Label, S.Label}]++;
      if (S.Kind == EdgeKind::Taken) {
        Res.TakenCounts[{F.Name, B.Label, S.Label}]++;
        LbrEntry E;
        E.From = B.Address + B.terminatorOffset();
        E.To = F.Blocks[F.blockIndex(S.Label)].Address;
        E.Mispredicted = uniform(Rng) < Opts.MispredictProb;
        Entries.push_back(E);
      }
      W.Block = static_cast<size_t>(F.blockIndex(S.Label));
      visitBlock(W);
    }
    if (Entries.empty()) {
      ++Res.EmptyStacks;
      continue;
    }
    LbrStack Stack;
    Stack.Entries.assign(Entries.rbegin(), Entries.rend());
    Res.Stacks.push_back(std::move(Stack));
  }
  return Res;
}

} // namespace layopt
