//===- Model.cpp - Program model parsing and serialization ----------------===//
//
// Part of the layopt project, under the Apache License v2.0.
// SPDX-License-Identifier: Apache-2.0
//
//===----------------------------------------------------------------------===//

#include "layopt/Model.h"

#include <algorithm>
#include <cassert>
#include <charconv>
#include <map>
#include <set>
#include <sstream>

namespace layopt {

const char *instKindName(InstKind Kind) {
  switch (Kind) {
  case InstKind::Plain:
    return "plain";
  case InstKind::CondBranch:
    return "jcc";
  case InstKind::UncondBranch:
    return "jmp";
  case InstKind::IndirectBranch:
    return "ijmp";
  case InstKind::DirectCall:
    return "call";
  case InstKind::IndirectCall:
    return "icall";
  case InstKind::Return:
    return "ret";
  case InstKind::Nop:
    return "nop";
  }
  return "plain";
}

uint64_t BasicBlock::size() const {
  uint64_t S = 0;
  for (const Instruction &I : Insts)
    S += I.Size;
  return S;
}

const Instruction *BasicBlock::terminator() const {
  if (!Insts.empty() && Insts.back().isTerminator())
    return &Insts.back();
  return nullptr;
}

Instruction *BasicBlock::terminator() {
  if (!Insts.empty() && Insts.back().isTerminator())
    return &Insts.back();
  return nullptr;
}

uint64_t BasicBlock::terminatorOffset() const {
  uint64_t S = size();
  if (const Instruction *T = terminator())
    S -= T->Size;
  return S;
}

uint64_t Function::size() const {
  uint64_t S = 0;
  for (const BasicBlock &B : Blocks)
    S += B.size();
  return S;
}

int Function::blockIndex(const std::string &Label) const {
  for (size_t I = 0; I < Blocks.size(); ++I)
    if (Blocks[I].Label == Label)
      return static_cast<int>(I);
  return -1;
}

const BasicBlock *Function::block(const std::string &Label) const {
  int I = blockIndex(Label);
  return I < 0 ? nullptr : &Blocks[I];
}

bool Function::hasFallthrough(size_t I) const {
  const Instruction *T = Blocks[I].terminator();
  return (!T || T->Kind == InstKind::CondBranch) && I + 1 < Blocks.size();
}

std::vector<Successor> Function::successors(size_t I) const {
  std::vector<Successor> Succs;
  const BasicBlock &B = Blocks[I];
  const Instruction *T = B.terminator();
  const std::string *Next =
      I + 1 < Blocks.size() ? &Blocks[I + 1].Label : nullptr;
  if (!T) {
    if (Next)
      Succs.push_back({*Next, EdgeKind::FallThrough});
    return Succs;
  }
  switch (T->Kind) {
  case InstKind::CondBranch:
    if (Next && T->Target == *Next) {
      Succs.push_back({*Next, EdgeKind::FallThrough});
      break;
    }
    Succs.push_back({T->Target, EdgeKind::Taken});
    if (Next)
      Succs.push_back({*Next, EdgeKind::FallThrough});
    break;
  case InstKind::UncondBranch:
    Succs.push_back({T->Target, EdgeKind::Taken});
    break;
  case InstKind::IndirectBranch:
    for (const std::string &L : T->JumpTable) {
      bool Seen = false;
      for (const Successor &S : Succs)
        Seen |= S.Label == L;
      if (!Seen)
        Succs.push_back({L, EdgeKind::Taken});
    }
    break;
  case InstKind::Return:
    break;
  default:
    break;
  }
  return Succs;
}

uint64_t Program::totalTextSize() const {
  if (Functions.empty())
    return 0;
  const Function &Last = Functions.back();
  return Last.Address + Last.size() - TextBase;
}

const Function *Program::function(const std::string &Name) const {
  for (const Function &F : Functions)
    if (F.Name == Name)
      return &F;
  return nullptr;
}

Function *Program::function(const std::string &Name) {
  for (Function &F : Functions)
    if (F.Name == Name)
      return &F;
  return nullptr;
}

std::optional<ResolvedAddr> Program::resolve(uint64_t Addr) const {
  // Functions are sorted by address; find the last one starting at or below
  // Addr.
  auto It = std::upper_bound(
      Functions.begin(), Functions.end(), Addr,
      [](uint64_t A, const Function &F) { return A < F.Address; });
  if (It == Functions.begin())
    return std::nullopt;
  const Function &F = *std::prev(It);
  if (Addr >= F.Address + F.size())
    return std::nullopt;
  for (const BasicBlock &B : F.Blocks) {
    if (Addr < B.Address || Addr >= B.Address + B.size())
      continue;
    uint64_t Off = 0;
    for (const Instruction &I : B.Insts) {
      if (Addr < B.Address + Off + I.Size)
        return ResolvedAddr{F.Name, B.Label, Off};
      Off += I.Size;
    }
  }
  return std::nullopt;
}

bool operator==(const BasicBlock &A, const BasicBlock &B) {
  return A.Label == B.Label && A.Insts == B.Insts;
}

bool operator==(const Function &A, const Function &B) {
  return A.Name == B.Name && A.Address == B.Address &&
         A.IsSimple == B.IsSimple && A.Blocks == B.Blocks;
}

bool operator==(const Program &A, const Program &B) {
  return A.TextBase == B.TextBase && A.Functions == B.Functions;
}

namespace {

std::vector<std::string> tokenize(const std::string &Line) {
  std::vector<std::string> Toks;
  std::istringstream SS(Line);
  std::string T;
  while (SS >> T) {
    if (T[0] == '#')
      break;
    Toks.push_back(T);
  }
  return Toks;
}

uint64_t parseHex(const std::string &Tok, unsigned Line) {
  if (Tok.size() < 3 || Tok[0] != '0' || Tok[1] != 'x')
    throw ParseError(Line, "expected hex address, got '" + Tok + "'");
  uint64_t V = 0;
  auto [P, Ec] = std::from_chars(Tok.data() + 2, Tok.data() + Tok.size(), V, 16);
  if (Ec != std::errc() || P != Tok.data() + Tok.size())
    throw ParseError(Line, "bad hex address '" + Tok + "'");
  return V;
}

uint32_t parseSize(const std::string &Tok, unsigned Line) {
  uint32_t V = 0;
  auto [P, Ec] = std::from_chars(Tok.data(), Tok.data() + Tok.size(), V);
  if (Ec != std::errc() || P != Tok.data() + Tok.size() || V == 0)
    throw ParseError(Line, "instruction size must be a positive integer");
  return V;
}

Instruction parseInst(const std::vector<std::string> &Toks, unsigned Line) {
  Instruction I;
  I.Size = parseSize(Toks[1], Line);
  const std::string &Op = Toks[2];
  auto wantTarget = [&](InstKind K) {
    if (Toks.size() != 4)
      throw ParseError(Line, "'" + Op + "' takes exactly one operand");
    I.Kind = K;
    I.Target = Toks[3];
  };
  auto wantNone = [&](InstKind K) {
    if (Toks.size() != 3)
      throw ParseError(Line, "'" + Op + "' takes no operand");
    I.Kind = K;
  };
  if (Op == "plain")
    wantNone(InstKind::Plain);
  else if (Op == "nop")
    wantNone(InstKind::Nop);
  else if (Op == "ret")
    wantNone(InstKind::Return);
  else if (Op == "icall")
    wantNone(InstKind::IndirectCall);
  else if (Op == "jcc")
    wantTarget(InstKind::CondBranch);
  else if (Op == "jmp")
    wantTarget(InstKind::UncondBranch);
  else if (Op == "call")
    wantTarget(InstKind::DirectCall);
  else if (Op == "ijmp") {
    I.Kind = InstKind::IndirectBranch;
    if (Toks.size() == 3)
      return I;
    if (Toks.size() != 5 || Toks[3] != "table")
      throw ParseError(Line, "'ijmp' takes an optional 'table <labels>'");
    std::string Item;
    std::istringstream LS(Toks[4]);
    while (std::getline(LS, Item, ',')) {
      if (Item.empty())
        throw ParseError(Line, "empty label in jump table");
      I.JumpTable.push_back(Item);
    }
    if (I.JumpTable.empty())
      throw ParseError(Line, "empty jump table");
  } else {
    throw ParseError(Line, "unknown instruction '" + Op + "'");
  }
  return I;
}

void validateFunction(const Function &F, unsigned Line) {
  if (F.Blocks.empty())
    throw ParseError(Line, "function '" + F.Name + "' has no blocks");
  std::set<std::string> Labels;
  for (const BasicBlock &B : F.Blocks)
    if (!Labels.insert(B.Label).second)
      throw ParseError(Line, "duplicate label '" + B.Label + "' in function '" +
                                 F.Name + "'");
  for (size_t BI = 0; BI < F.Blocks.size(); ++BI) {
    const BasicBlock &B = F.Blocks[BI];
    for (size_t II = 0; II + 1 < B.Insts.size(); ++II)
      if (B.Insts[II].isTerminator())
        throw ParseError(Line, "terminator before end of block '" + B.Label +
                                   "' in function '" + F.Name + "'");
    const Instruction *T = B.terminator();
    bool NeedsNext = !T || T->Kind == InstKind::CondBranch;
    if (NeedsNext && BI + 1 == F.Blocks.size())
      throw ParseError(Line, "block '" + B.Label + "' in function '" + F.Name +
                                 "' falls through the end of the function");
    for (const Instruction &I : B.Insts) {
      bool LocalTarget = I.Kind == InstKind::CondBranch ||
                         I.Kind == InstKind::UncondBranch;
      if (LocalTarget && F.blockIndex(I.Target) < 0)
        throw ParseError(Line, "unresolved target '" + I.Target +
                                   "' in function '" + F.Name + "'");
      for (const std::string &L : I.JumpTable)
        if (F.blockIndex(L) < 0)
          throw ParseError(Line, "unresolved jump table label '" + L +
                                     "' in function '" + F.Name + "'");
    }
  }
}

} // namespace

void finalizeProgram(Program &Prog) {
  std::set<std::string> Names;
  for (Function &F : Prog.Functions) {
    if (!Names.insert(F.Name).second)
      throw ParseError(0, "duplicate function '" + F.Name + "'");
    validateFunction(F, 0);
    uint64_t Addr = F.Address;
    bool Simple = F.IsSimple;
    for (BasicBlock &B : F.Blocks) {
      B.Address = Addr;
      Addr += B.size();
      for (const Instruction &I : B.Insts)
        if (I.Kind == InstKind::IndirectBranch && I.JumpTable.empty())
          Simple = false;
    }
    F.IsSimple = Simple;
  }
  for (const Function &F : Prog.Functions)
    for (const BasicBlock &B : F.Blocks)
      for (const Instruction &I : B.Insts)
        if (I.Kind == InstKind::DirectCall && !Prog.function(I.Target))
          throw ParseError(0, "unresolved call target '" + I.Target +
                                  "' in function '" + F.Name + "'");
  for (size_t I = 0; I + 1 < Prog.Functions.size(); ++I) {
    const Function &A = Prog.Functions[I];
    const Function &B = Prog.Functions[I + 1];
    if (B.Address < A.Address)
      throw ParseError(0, "functions not in ascending address order ('" +
                              B.Name + "')");
    if (A.Address + A.size() > B.Address)
      throw ParseError(0, "function ranges overlap ('" + A.Name + "' and '" +
                              B.Name + "')");
  }
  Prog.TextBase = Prog.Functions.empty() ? 0 : Prog.Functions.front().Address;
}

Program parseModel(const std::string &Text) {
  Program Prog;
  std::istringstream In(Text);
  std::string Line;
  unsigned LineNo = 0;
  bool SawHeader = false;
  Function *Cur = nullptr;
  BasicBlock *CurBlock = nullptr;
  std::map<std::string, unsigned> FuncLine;

  while (std::getline(In, Line)) {
    ++LineNo;
    std::vector<std::string> Toks = tokenize(Line);
    if (Toks.empty())
      continue;
    if (!SawHeader) {
      if (Toks.size() != 2 || Toks[0] != "MODEL" || Toks[1] != "v1")
        throw ParseError(LineNo, "expected 'MODEL v1' header");
      SawHeader = true;
      continue;
    }
    if (Toks[0] == "F") {
      if (Toks.size() != 3)
        throw ParseError(LineNo, "expected 'F <name> 0x<addr>'");
      Function F;
      F.Name = Toks[1];
      F.Address = parseHex(Toks[2], LineNo);
      if (FuncLine.count(F.Name))
        throw ParseError(LineNo, "duplicate function '" + F.Name + "'");
      FuncLine[F.Name] = LineNo;
      Prog.Functions.push_back(std::move(F));
      Cur = &Prog.Functions.back();
      CurBlock = nullptr;
    } else if (Toks[0] == "B") {
      if (Toks.size() != 2)
        throw ParseError(LineNo, "expected 'B <label>'");
      if (!Cur)
        throw ParseError(LineNo, "block outside of a function");
      BasicBlock B;
      B.Label = Toks[1];
      Cur->Blocks.push_back(std::move(B));
      CurBlock = &Cur->Blocks.back();
    } else if (Toks[0] == "I") {
      if (Toks.size() < 3)
        throw ParseError(LineNo, "expected 'I <size> <op> ...'");
      if (!CurBlock)
        throw ParseError(LineNo, "instruction outside of a block");
      CurBlock->Insts.push_back(parseInst(Toks, LineNo));
    } else {
      throw ParseError(LineNo, "unknown directive '" + Toks[0] + "'");
    }
  }
  if (!SawHeader)
    throw ParseError(LineNo, "expected 'MODEL v1' header");

  for (Function &F : Prog.Functions)
    validateFunction(F, FuncLine[F.Name]);
  try {
    finalizeProgram(Prog);
  } catch (const ParseError &E) {
    throw ParseError(LineNo, E.Msg);
  }
  return Prog;
}

std::string serializeModel(const Program &Prog) {
  std::ostringstream Out;
  Out << "MODEL v1\n";
  char Hex[32];
  for (const Function &F : Prog.Functions) {
    snprintf(Hex, sizeof(Hex), "0x%llx",
             static_cast<unsigned long long>(F.Address));
    Out << "F " << F.Name << " " << Hex << "\n";
    for (const BasicBlock &B : F.Blocks) {
      Out << "B " << B.Label << "\n";
      for (const Instruction &I : B.Insts) {
        Out << "I " << I.Size << " " << instKindName(I.Kind);
        if (I.Kind == InstKind::CondBranch ||
            I.Kind == InstKind::UncondBranch ||
            I.Kind == InstKind::DirectCall)
          Out << " " << I.Target;
        if (I.Kind == InstKind::IndirectBranch && !I.JumpTable.empty()) {
          Out << " table ";
          for (size_t K = 0; K < I.JumpTable.size(); ++K)
            Out << (K ? "," : "") << I.JumpTable[K];
        }
        Out << "\n";
      }
    }
  }
  return Out.str();
}

size_t stripNops(Program &Prog) {
  size_t Removed = 0;
  for (Function &F : Prog.Functions) {
    for (BasicBlock &B : F.Blocks) {
      size_t Before = B.Insts.size();
      std::erase_if(B.Insts,
                    [](const Instruction &I) { return I.Kind == InstKind::Nop; });
      Removed += Before - B.Insts.size();
    }
  }
  return Removed;
}

} // namespace layopt
