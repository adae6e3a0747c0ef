#pragma once

#include <limits>

#include "itc/grid.hpp"

namespace itc::ot {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kPosInf = std::numeric_limits<double>::infinity();

// Transport-decoding hyperparameters. Defaults follow the reference setup:
// c_d = 0.6, c_w = 0.3, squared-displacement cap 4, epsilon = 1e-5 with 10
// Sinkhorn iterations.
struct OtConfig {
  double c_d = 0.6;       // distance cost coefficient
  double c_w = 0.3;       // wildcard penalty
  double cap = 4.0;       // squared-distance displacement cap
  double epsilon = 1e-5;  // Sinkhorn regularization
  int iterations = 10;    // Sinkhorn iteration count

  void validate() const {
    if (epsilon <= 0.0) throw ConfigError("OtConfig: epsilon must be > 0");
    if (iterations < 1) throw ConfigError("OtConfig: iterations must be >= 1");
    if (cap < 0.0) throw ConfigError("OtConfig: cap must be >= 0");
    if (c_d < 0.0) throw ConfigError("OtConfig: c_d must be >= 0");
  }
};

// Affinities of explaining each destination j by previous token i (prev, LxL)
// or by the wildcard at j (gen, length L; off-diagonal entries of the full
// gen matrix are -inf and never stored).
struct AffinityPair {
  Matrix prev;               // L x L, entry (i, j); -inf where the cap forbids the move
  std::vector<double> gen;   // length L, diagonal of the wildcard block

  int side() const { return static_cast<int>(gen.size()); }
};

// Continuous partial transport plans produced by the solver.
struct TransportPair {
  Matrix prev;              // L x L in [0, 1]
  std::vector<double> gen;  // length L, diagonal of the wildcard plan block

  int side() const { return static_cast<int>(gen.size()); }
};

// Squared Euclidean distance between token cells, capped: d if d <= cap,
// +inf otherwise.
double distance_cost(GridCoord a, GridCoord b, double cap);

// Builds the affinity pair from transformer predictions and the previous
// frame:
//   prev[i][j] = p_j[u_i] - c_d * D(coord_i, coord_j)
//   gen[j]     = max_k p_j[k] - c_w
AffinityPair build_affinity(const PredictionGrid& pred, const FrameTokens& prev,
                            const OtConfig& cfg);

// Entropic OT by iterative scaling with uniform marginals r = 1/n, c = 1/m.
// Cost entries may be +inf (forbidden cells; their plan entries are exactly
// zero). Computed in the log domain so tiny epsilon does not overflow. After
// the final column update, column sums equal 1/m to machine precision; row
// sums converge toward 1/n as the iteration count grows.
//
// Throws NumericalError when a row or column has no finite cost entry.
Matrix sinkhorn(const Matrix& cost, double epsilon, int iterations);

// Naive scaling form (kernel exp(-C/epsilon), u/v updates on the nominal
// scale). Only usable when the kernel stays representable; kept as a second
// code path to cross-check the log-domain solver at large epsilon.
Matrix sinkhorn_naive(const Matrix& cost, double epsilon, int iterations);

// Full decode-time transport: stacks [[A_prev, 0], [A_gen, 0]] into a
// (2L)x(2L) matrix whose right half is zero-affinity dummy sinks, runs
// sinkhorn on cost = -A, and slices the left columns back into a
// TransportPair. Off-diagonal entries of the gen block are exactly zero.
TransportPair solve_decode_ot(const AffinityPair& aff, const OtConfig& cfg);

}  // namespace itc::ot
