//===- Model.h - Program model for post-link layout -------------*- C++ -*-===//
//
// Part of the layopt project, under the Apache License v2.0.
// SPDX-License-Identifier: Apache-2.0
//
//===----------------------------------------------------------------------===//
//
// An explicit model of a linked text section: functions made of basic blocks,
// blocks made of sized instructions. Addresses of blocks and instructions are
// derived from function start addresses and instruction sizes, so a transform
// that inserts or removes bytes leaves addresses stale until the final
// address assignment recomputes them.
//
//===----------------------------------------------------------------------===//

#ifndef LAYOPT_MODEL_H
#define LAYOPT_MODEL_H

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace layopt {

enum class InstKind : uint8_t {
  Plain,
  CondBranch,
  UncondBranch,
  IndirectBranch,
  DirectCall,
  IndirectCall,
  Return,
  Nop,
};

const char *instKindName(InstKind Kind);

struct Instruction {
  uint32_t Size = 1;
  InstKind Kind = InstKind::Plain;
  // Block label for branches, function name for direct calls.
  std::string Target;
  // Destination labels of an indirect branch, when known.
  std::vector<std::string> JumpTable;
  // Set when branch fixup flipped the polarity of a conditional branch.
  // Bookkeeping only; not part of structural identity.
  bool Inverted = false;

  bool isBranch() const {
    return Kind == InstKind::CondBranch || Kind == InstKind::UncondBranch ||
           Kind == InstKind::IndirectBranch;
  }
  bool isCall() const {
    return Kind == InstKind::DirectCall || Kind == InstKind::IndirectCall;
  }
  bool isTerminator() const { return isBranch() || Kind == InstKind::Return; }

  friend bool operator==(const Instruction &A, const Instruction &B) {
    return A.Size == B.Size && A.Kind == B.Kind && A.Target == B.Target &&
           A.JumpTable == B.JumpTable;
  }
};

struct BasicBlock {
  std::string Label;
  // Derived at parse time; stale after transforms until reassignment.
  uint64_t Address = 0;
  std::vector<Instruction> Insts;

  uint64_t size() const;
  // The last instruction when it is a branch or return, null otherwise.
  const Instruction *terminator() const;
  Instruction *terminator();
  // Offset of the terminator from the block start (== size() when absent).
  uint64_t terminatorOffset() const;
};

enum class EdgeKind : uint8_t { Taken, FallThrough };

struct Successor {
  std::string Label;
  EdgeKind Kind;
};

struct Function {
  std::string Name;
  uint64_t Address = 0;
  // First block is the entry. Blocks are laid contiguously in this order.
  std::vector<BasicBlock> Blocks;
  // Eligible for transformation. Forced off when the CFG is not fully known
  // (an indirect branch without a jump table annotation).
  bool IsSimple = true;

  uint64_t size() const;
  int blockIndex(const std::string &Label) const;
  const BasicBlock *block(const std::string &Label) const;

  // CFG successors of block I: the explicit branch targets plus the implied
  // fall-through into the next block when the terminator allows one. A
  // conditional branch targeting its own fall-through block degenerates to a
  // single fall-through edge.
  std::vector<Successor> successors(size_t I) const;
  bool hasFallthrough(size_t I) const;
};

struct ResolvedAddr {
  std::string Func;
  std::string Label;
  // Offset of the start of the instruction containing the queried address,
  // relative to the block start.
  uint64_t Offset = 0;
};

struct Program {
  uint64_t TextBase = 0;
  // Sorted by address; ranges are disjoint.
  std::vector<Function> Functions;

  // Span from TextBase to the end of the last function, including any gaps.
  uint64_t totalTextSize() const;
  const Function *function(const std::string &Name) const;
  Function *function(const std::string &Name);

  // Map an address to the function, block, and instruction start containing
  // it. Addresses in gaps between functions resolve to nothing.
  std::optional<ResolvedAddr> resolve(uint64_t Addr) const;
};

bool operator==(const BasicBlock &A, const BasicBlock &B);
bool operator==(const Function &A, const Function &B);
bool operator==(const Program &A, const Program &B);

class ParseError : public std::runtime_error {
public:
  ParseError(unsigned Line, const std::string &Msg)
      : std::runtime_error("line " + std::to_string(Line) + ": " + Msg),
        Line(Line), Msg(Msg) {}
  unsigned Line;
  std::string Msg;
};

// Parse the model file format. Throws ParseError on malformed input,
// duplicate labels, unresolved targets, or overlapping function ranges.
Program parseModel(const std::string &Text);

// Inverse of parseModel up to comments and whitespace.
std::string serializeModel(const Program &Prog);

// Recompute derived block addresses and the simple-function flag; throws
// ParseError (line 0) when a structural invariant is broken. Used by
// transforms to revalidate their output.
void finalizeProgram(Program &Prog);

// Remove every nop instruction. Idempotent. Block addresses go stale.
// Returns the number of instructions removed.
size_t stripNops(Program &Prog);

} // namespace layopt

#endif // LAYOPT_MODEL_H
