#pragma once

#include <cstdint>
#include <vector>

#include "itc/assignment.hpp"
#include "itc/grid.hpp"
#include "itc/ot.hpp"
#include "itc/rng.hpp"

namespace itc::decode {

enum class Sampling {
  kCategorical,  // temperature-1 draw from p_j
  kGreedy,       // argmax of p_j, ties toward the lowest index
};

struct DecodeConfig {
  ot::OtConfig ot;
  assign::BinarizeConfig bin;
  std::vector<uint8_t> ot_region;  // length L; 1 = transport output, 0 = direct sample
  Sampling sampling = Sampling::kCategorical;
  uint64_t rng_seed = 0;
};

// Region mask covering all interior cells; the one-cell border falls back to
// the transformer output directly (new content enters at the edges, so copy
// correspondence is unreliable there).
std::vector<uint8_t> interior_region(const GridGeometry& g);

// One categorical token under the given mode. p must sum to 1 within 1e-6.
int sample_token(const double* p, int k, Sampling mode, SplitMixRng& rng);
int sample_token(const std::vector<double>& p, Sampling mode, SplitMixRng& rng);

// Bookkeeping from one decode call.
struct DecodeTrace {
  bool ot_solved = false;
  assign::AssignmentPair assignment;  // meaningful only when ot_solved
  std::vector<int> copy_source;       // length L; previous-frame index or -1
};

// Full decoding step: affinity -> entropic transport -> binarization ->
// copy-or-sample, with the region mask selecting transport output per
// position. Every position draws from its own RNG substream keyed by the
// position index, so masked-off positions reproduce a pure direct-sampling
// run with the same seed.
FrameTokens decode_next_frame(const PredictionGrid& pred, const FrameTokens& prev,
                              const DecodeConfig& cfg, DecodeTrace* trace = nullptr);

}  // namespace itc::decode
