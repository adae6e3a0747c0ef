#include "itc/decode.hpp"

#include <algorithm>
#include <cmath>

#include "itc/errors.hpp"

namespace itc::decode {

std::vector<uint8_t> interior_region(const GridGeometry& g) {
  std::vector<uint8_t> mask(g.size(), 0);
  for (int y = 1; y + 1 < g.height; ++y) {
    for (int x = 1; x + 1 < g.width; ++x) mask[g.index_of({x, y})] = 1;
  }
  return mask;
}

int sample_token(const double* p, int k, Sampling mode, SplitMixRng& rng) {
  if (k <= 0) throw ConfigError("sample_token: empty distribution");
  double total = 0.0;
  for (int i = 0; i < k; ++i) {
    if (!(p[i] >= 0.0)) throw ConfigError("sample_token: negative probability");
    total += p[i];
  }
  if (std::abs(total - 1.0) > 1e-6) {
    throw ConfigError("sample_token: distribution does not sum to 1");
  }

  if (mode == Sampling::kGreedy) {
    return static_cast<int>(std::max_element(p, p + k) - p);
  }
  const double x = rng.next_double() * total;
  double acc = 0.0;
  for (int i = 0; i < k; ++i) {
    acc += p[i];
    if (x < acc) return i;
  }
  return k - 1;  // x landed on accumulated rounding slack
}

int sample_token(const std::vector<double>& p, Sampling mode, SplitMixRng& rng) {
  return sample_token(p.data(), static_cast<int>(p.size()), mode, rng);
}

FrameTokens decode_next_frame(const PredictionGrid& pred, const FrameTokens& prev,
                              const DecodeConfig& cfg, DecodeTrace* trace) {
  if (pred.geometry != prev.geometry) {
    throw ConfigError("decode_next_frame: prediction and previous frame geometry mismatch");
  }
  const int L = pred.size();
  if (static_cast<int>(cfg.ot_region.size()) != L) {
    throw ConfigError("decode_next_frame: ot_region length does not match geometry");
  }
  pred.validate();
  prev.validate(pred.codebook_size);

  const bool any_ot = std::any_of(cfg.ot_region.begin(), cfg.ot_region.end(),
                                  [](uint8_t m) { return m != 0; });
  assign::AssignmentPair assignment;
  if (any_ot) {
    const ot::AffinityPair aff = ot::build_affinity(pred, prev, cfg.ot);
    const ot::TransportPair plan = ot::solve_decode_ot(aff, cfg.ot);
    assignment = assign::binarize(plan, cfg.bin);
  }

  FrameTokens out;
  out.geometry = pred.geometry;
  out.tokens.assign(L, 0);
  if (trace) {
    trace->ot_solved = any_ot;
    trace->assignment = assignment;
    trace->copy_source.assign(L, -1);
  }

  const SplitMixRng root(cfg.rng_seed);
  for (int j = 0; j < L; ++j) {
    SplitMixRng sub = root.substream(static_cast<uint64_t>(j));
    if (cfg.ot_region[j]) {
      const int src = assignment.source_of(j);
      if (src < L) {
        out.tokens[j] = prev.tokens[src];
        if (trace) trace->copy_source[j] = src;
        continue;
      }
    }
    out.tokens[j] = sample_token(pred.row(j), pred.codebook_size, cfg.sampling, sub);
  }
  return out;
}

}  // namespace itc::decode
