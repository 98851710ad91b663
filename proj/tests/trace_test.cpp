//===- trace_test.cpp - Trace parsing and generation tests -----------------===//
//
// Part of the layopt project, under the Apache License v2.0.
// SPDX-License-Identifier: Apache-2.0
//
//===----------------------------------------------------------------------===//

#include "doctest.h"
#include "layopt/Profile.h"
#include "layopt/Trace.h"

using namespace layopt;

namespace {

FlowGraph weightsFor(const std::string &Fn,
                     std::initializer_list<std::tuple<const char *, const char *,
                                                      uint64_t>> Edges) {
  FlowGraph W;
  for (auto &[S, D, C] : Edges)
    W.Functions[Fn].Edges[{S, D}].Count = C;
  return W;
}

} // namespace

TEST_CASE("parse handles samples, stacks, and junk") {
  TraceData T = parseTrace("S 0x400120\n"
                           "L 0x10/0x20/P 0x8/0x10/M 0x2/0x8/P\n"
                           "garbage line\n"
                           "S notahex\n"
                           "L 0x1/0x2/X\n");
  CHECK(T.Samples.size() == 1);
  CHECK(T.Samples[0].Ip == 0x400120);
  REQUIRE(T.Stacks.size() == 1);
  REQUIRE(T.Stacks[0].Entries.size() == 3);
  CHECK(T.Stacks[0].Entries[0].From == 0x10); // newest first
  CHECK(T.Stacks[0].Entries[1].Mispredicted);
  CHECK(T.MalformedLines == 3);
}

TEST_CASE("a stack deeper than the hardware limit is skipped") {
  std::string Line = "L";
  for (int I = 0; I < 33; ++I)
    Line += " 0x10/0x20/P";
  TraceData T = parseTrace(Line + "\n");
  CHECK(T.Stacks.empty());
  CHECK(T.MalformedLines == 1);

  std::string Ok = "L";
  for (int I = 0; I < 32; ++I)
    Ok += " 0x10/0x20/P";
  TraceData U = parseTrace(Ok + "\n");
  CHECK(U.Stacks.size() == 1);
  CHECK(U.MalformedLines == 0);
}

TEST_CASE("render and parse round-trip") {
  TraceData T;
  T.Samples.push_back({0x12ab});
  T.Stacks.push_back({{{0x10, 0x20, false}, {0x8, 0x10, true}}});
  std::string Text = renderTrace(T);
  CHECK(Text == "S 0x12ab\nL 0x10/0x20/P 0x8/0x10/M\n");
  TraceData U = parseTrace(Text);
  CHECK(U.Samples.size() == 1);
  REQUIRE(U.Stacks.size() == 1);
  CHECK(U.Stacks[0].Entries[1].Mispredicted);
  CHECK(renderTrace(U) == Text);
}

TEST_CASE("generated entries record branch source and block start") {
  Program P = parseModel("MODEL v1\n"
                         "F f 0x100\n"
                         "B A\nI 2 jmp B\n"
                         "B B\nI 2 jmp C\n"
                         "B C\nI 1 ret\n");
  TraceGenOptions O;
  O.NumStacks = 1;
  O.Depth = 2;
  O.MispredictProb = 0;
  TraceGenResult R = generateTrace(P, FlowGraph{}, O);
  REQUIRE(R.Stacks.size() == 1);
  REQUIRE(R.Stacks[0].Entries.size() == 2);
  // Newest first: B's jump is the most recent record.
  CHECK(R.Stacks[0].Entries[0].From == 0x102);
  CHECK(R.Stacks[0].Entries[0].To == 0x104);
  CHECK(R.Stacks[0].Entries[1].From == 0x100);
  CHECK(R.Stacks[0].Entries[1].To == 0x102);
  CHECK_FALSE(R.Stacks[0].Entries[0].Mispredicted);
  CHECK(R.TakenCounts.at({"f", "A", "B"}) == 1);
  CHECK(R.EntryCounts.at("f") == 1);
}

TEST_CASE("walk frequencies follow the edge weights") {
  Program P = parseModel("MODEL v1\n"
                         "F f 0x1000\n"
                         "B A\nI 2 jcc B\n"
                         "B C\nI 2 jmp D\n"
                         "B B\nI 2 jmp D\n"
                         "B D\nI 1 ret\n");
  FlowGraph W = weightsFor("f", {{"A", "B", 90}, {"A", "C", 10}});
  TraceGenOptions O;
  O.Seed = 7;
  O.NumStacks = 100000;
  O.Depth = 1;
  TraceGenResult R = generateTrace(P, W, O);
  double Freq = static_cast<double>(R.TakenCounts.at({"f", "A", "B"})) /
                static_cast<double>(O.NumStacks);
  CHECK(Freq > 0.89);
  CHECK(Freq < 0.91);
  // The fall-through arm is traversed but never recorded as taken.
  CHECK(R.EdgeCounts.at({"f", "A", "C"}) > 0);
  CHECK(R.TakenCounts.count({"f", "A", "C"}) == 0);
}

TEST_CASE("a return-only function yields no entries, one diagnostic per stack") {
  Program P = parseModel("MODEL v1\nF f 0x0\nB A\nI 1 ret\n");
  TraceGenOptions O;
  O.NumStacks = 5;
  TraceGenResult R = generateTrace(P, FlowGraph{}, O);
  CHECK(R.Stacks.empty());
  CHECK(R.EmptyStacks == 5);
  CHECK(R.TrapRestarts == 0);
}

TEST_CASE("a successor-less non-return block is a trap") {
  Program P = parseModel("MODEL v1\nF f 0x0\nB A\nI 2 ijmp\n");
  TraceGenOptions O;
  O.NumStacks = 2;
  TraceGenResult R = generateTrace(P, FlowGraph{}, O);
  CHECK(R.Stacks.empty());
  CHECK(R.EmptyStacks == 2);
  CHECK(R.TrapRestarts > 0);
}

TEST_CASE("generation is deterministic per seed and differs across seeds") {
  Program P = parseModel("MODEL v1\n"
                         "F f 0x1000\n"
                         "B A\nI 2 jcc B\n"
                         "B C\nI 2 jmp D\n"
                         "B B\nI 2 jmp D\n"
                         "B D\nI 1 ret\n");
  FlowGraph W = weightsFor("f", {{"A", "B", 50}, {"A", "C", 50}});
  TraceGenOptions O;
  O.NumStacks = 200;
  O.Depth = 4;

  O.Seed = 11;
  TraceGenResult R1 = generateTrace(P, W, O);
  TraceGenResult R2 = generateTrace(P, W, O);
  TraceData D1{R1.Stacks, R1.Samples, 0};
  TraceData D2{R2.Stacks, R2.Samples, 0};
  CHECK(renderTrace(D1) == renderTrace(D2));

  O.Seed = 12;
  TraceGenResult R3 = generateTrace(P, W, O);
  TraceData D3{R3.Stacks, R3.Samples, 0};
  CHECK(renderTrace(D1) != renderTrace(D3));
}

TEST_CASE("sampling emits resolvable instruction addresses") {
  Program P = parseModel("MODEL v1\n"
                         "F f 0x100\n"
                         "B A\nI 3 plain\nI 2 jmp B\n"
                         "B B\nI 2 jmp C\n"
                         "B C\nI 1 ret\n");
  TraceGenOptions O;
  O.NumStacks = 50;
  O.Depth = 4;
  O.SampleEvery = 2;
  TraceGenResult R = generateTrace(P, FlowGraph{}, O);
  REQUIRE(!R.Samples.empty());
  for (const IpSample &S : R.Samples) {
    auto Loc = P.resolve(S.Ip);
    REQUIRE(Loc.has_value());
    // Samples land on instruction starts.
    const Function *F = P.function(Loc->Func);
    CHECK(F->block(Loc->Label)->Address + Loc->Offset == S.Ip);
  }
}
