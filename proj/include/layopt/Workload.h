//===- Workload.h - Synthetic corpus generation -----------------*- C++ -*-===//
//
// Part of the layopt project, under the Apache License v2.0.
// SPDX-License-Identifier: Apache-2.0
//
//===----------------------------------------------------------------------===//
//
// Seeded generators for benchmark corpora: a program model together with the
// ground-truth edge weights that drive trace generation. Each shape stresses
// a different part of the pipeline; all of them are deterministic functions
// of their options.
//
//===----------------------------------------------------------------------===//

#ifndef LAYOPT_WORKLOAD_H
#define LAYOPT_WORKLOAD_H

#include "layopt/Model.h"
#include "layopt/Profile.h"

#include <cstdint>
#include <optional>
#include <string>

namespace layopt {

enum class CorpusShape {
  // Fall-through chains with occasional forward skips.
  Chain,
  // Two-way splits where the hot side is the taken target, so the original
  // layout pays a taken branch on nearly every split.
  Diamond,
  // Junctions whose two predecessors feed the same successor pair with
  // opposite preferences. Block counts alone cannot separate the two flows,
  // so proportional inference pairs the heavy predecessor with the globally
  // hotter successor even when the true pairing is the opposite.
  Correlated,
  // Many medium-sized functions, a small hot subset scattered through the
  // text, and hot blocks interleaved with never-executed ones inside each
  // hot function. Stresses function reordering, splitting, and the cache
  // simulation.
  Locality,
  // A rotation of the other shapes plus call-graph edges, twin functions
  // that fold, and an occasional non-simple function.
  Mixed,
};

const char *corpusShapeName(CorpusShape Shape);
std::optional<CorpusShape> parseCorpusShape(const std::string &Name);

struct WorkloadOptions {
  CorpusShape Shape = CorpusShape::Mixed;
  size_t Functions = 20;
  // Fraction of functions that carry weight; the rest stay cold.
  double HotFraction = 0.1;
  uint64_t Seed = 1;
};

struct Workload {
  Program Model;
  // Ground-truth weights, conserved per block, for generateTrace.
  FlowGraph Weights;
};

// Builds the model and its weights. The result depends only on the options;
// equal options give byte-identical serializations. Throws
// std::invalid_argument when Functions is zero or HotFraction is outside
// [0, 1].
Workload generateWorkload(const WorkloadOptions &Opts);

} // namespace layopt

#endif // LAYOPT_WORKLOAD_H
