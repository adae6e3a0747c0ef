#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "itc/errors.hpp"
#include "itc/ot.hpp"
#include "itc/rng.hpp"

using namespace itc;
using namespace itc::ot;

namespace {

Matrix random_cost(SplitMixRng& rng, int n, int m, double lo, double hi) {
  Matrix c(n, m);
  for (double& e : c.data) e = rng.uniform(lo, hi);
  return c;
}

double max_row_dev(const Matrix& plan) {
  const double target = 1.0 / plan.rows;
  double dev = 0.0;
  for (int i = 0; i < plan.rows; ++i) {
    const double s = std::accumulate(plan.row(i), plan.row(i) + plan.cols, 0.0);
    dev = std::max(dev, std::abs(s - target));
  }
  return dev;
}

double max_col_dev(const Matrix& plan) {
  const double target = 1.0 / plan.cols;
  double dev = 0.0;
  for (int j = 0; j < plan.cols; ++j) {
    double s = 0.0;
    for (int i = 0; i < plan.rows; ++i) s += plan.at(i, j);
    dev = std::max(dev, std::abs(s - target));
  }
  return dev;
}

// Minimum-cost perfect assignment by permutation enumeration; n <= 8.
std::vector<int> brute_force_assignment(const Matrix& cost) {
  const int n = cost.rows;
  std::vector<int> perm(n), best(n);
  std::iota(perm.begin(), perm.end(), 0);
  double best_val = kPosInf;
  do {
    double v = 0.0;
    for (int i = 0; i < n; ++i) v += cost.at(i, perm[i]);
    if (v < best_val) {
      best_val = v;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

PredictionGrid one_hot_grid(const FrameTokens& frame, int codebook_size) {
  PredictionGrid pred;
  pred.geometry = frame.geometry;
  pred.codebook_size = codebook_size;
  pred.probs.assign(static_cast<size_t>(frame.size()) * codebook_size, 0.0);
  for (int j = 0; j < frame.size(); ++j) pred.row(j)[frame.tokens[j]] = 1.0;
  return pred;
}

}  // namespace

TEST_CASE("distance cost is squared euclidean under the cap") {
  CHECK(distance_cost({0, 0}, {0, 0}, 4.0) == 0.0);
  CHECK(distance_cost({0, 0}, {1, 1}, 4.0) == 2.0);
  CHECK(std::isinf(distance_cost({0, 0}, {3, 0}, 4.0)));
  // Boundary: d == cap stays finite.
  CHECK(distance_cost({0, 0}, {2, 0}, 4.0) == 4.0);
  CHECK(distance_cost({1, 2}, {2, 0}, 4.0) == kPosInf);  // d = 5
}

TEST_CASE("affinities follow the copy and wildcard formulas") {
  // 2x2 frame, K=4. Destination = same cell with a one-hot match.
  FrameTokens prev{{0, 1, 2, 3}, {2, 2}};
  PredictionGrid pred = one_hot_grid(prev, 4);
  OtConfig cfg;
  AffinityPair aff = build_affinity(pred, prev, cfg);
  REQUIRE(aff.side() == 4);
  for (int i = 0; i < 4; ++i) CHECK(aff.prev.at(i, i) == doctest::Approx(1.0));

  SUBCASE("one-hot match one cell to the right scores 1 - c_d") {
    // Destination 1 predicts token 0 (held at cell 0, distance 1).
    PredictionGrid shifted = pred;
    std::fill(shifted.row(1), shifted.row(1) + 4, 0.0);
    shifted.row(1)[0] = 1.0;
    AffinityPair a2 = build_affinity(shifted, prev, cfg);
    CHECK(a2.prev.at(0, 1) == doctest::Approx(0.4));
  }

  SUBCASE("uniform prediction gives gen = 1/K - c_w") {
    PredictionGrid uniform = pred;
    std::fill(uniform.probs.begin(), uniform.probs.end(), 0.25);
    AffinityPair a3 = build_affinity(uniform, prev, cfg);
    for (int j = 0; j < 4; ++j) CHECK(a3.gen[j] == doctest::Approx(-0.05));
  }

  SUBCASE("cells beyond the cap carry the -inf sentinel") {
    FrameTokens wide{std::vector<int>(6, 0), {1, 6}};
    PredictionGrid p6 = one_hot_grid(wide, 1);
    AffinityPair a4 = build_affinity(p6, wide, cfg);
    CHECK(std::isinf(a4.prev.at(0, 5)));
    CHECK(a4.prev.at(0, 5) < 0);
    CHECK(a4.prev.at(0, 2) == doctest::Approx(1.0 - 0.6 * 4.0));
  }

  SUBCASE("geometry mismatch is rejected") {
    FrameTokens other{{0, 1}, {1, 2}};
    CHECK_THROWS_AS(build_affinity(pred, other, cfg), ConfigError);
  }
}

TEST_CASE("finite affinities respect their analytic bounds") {
  SplitMixRng rng(2024);
  OtConfig cfg;
  const int K = 7;
  for (int trial = 0; trial < 50; ++trial) {
    GridGeometry g{4, 4};
    FrameTokens prev;
    prev.geometry = g;
    for (int i = 0; i < g.size(); ++i) prev.tokens.push_back(static_cast<int>(rng.next_below(K)));
    PredictionGrid pred;
    pred.geometry = g;
    pred.codebook_size = K;
    for (int j = 0; j < g.size(); ++j) {
      double row[K], s = 0.0;
      for (double& x : row) s += (x = -std::log(1.0 - rng.next_double()));
      for (double x : row) pred.probs.push_back(x / s);
    }
    AffinityPair aff = build_affinity(pred, prev, cfg);
    for (double a : aff.prev.data) {
      if (std::isinf(a)) continue;
      CHECK(a >= -cfg.c_d * cfg.cap - 1e-12);
      CHECK(a <= 1.0 + 1e-12);
    }
    for (double gv : aff.gen) {
      CHECK(gv >= 1.0 / K - cfg.c_w - 1e-12);
      CHECK(gv <= 1.0 - cfg.c_w + 1e-12);
    }
  }
}

TEST_CASE("sinkhorn reproduces closed-form plans") {
  Matrix c1(1, 1, 0.0);
  Matrix p1 = sinkhorn(c1, 1e-3, 5);
  CHECK(p1.at(0, 0) == doctest::Approx(1.0).epsilon(1e-12));

  Matrix c2(2, 2, 0.0);
  Matrix p2 = sinkhorn(c2, 0.5, 8);
  for (double e : p2.data) CHECK(e == doctest::Approx(0.25).epsilon(1e-12));

  Matrix c3(2, 2, 0.0);
  c3.at(0, 1) = 10.0;
  c3.at(1, 0) = 10.0;
  Matrix p3 = sinkhorn(c3, 1e-3, 100);
  CHECK(p3.at(0, 0) == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(p3.at(1, 1) == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(p3.at(0, 1) < 1e-9);
  CHECK(p3.at(1, 0) < 1e-9);
}

TEST_CASE("sinkhorn rejects infeasible inputs") {
  Matrix c(2, 2, 0.0);
  c.at(0, 0) = kPosInf;
  c.at(0, 1) = kPosInf;
  CHECK_THROWS_AS(sinkhorn(c, 1e-2, 10), NumericalError);

  Matrix c2(2, 2, 0.0);
  c2.at(0, 1) = kPosInf;
  c2.at(1, 1) = kPosInf;
  CHECK_THROWS_AS(sinkhorn(c2, 1e-2, 10), NumericalError);

  CHECK_THROWS_AS(sinkhorn(Matrix(2, 2, 0.0), -1.0, 10), ConfigError);
  CHECK_THROWS_AS(sinkhorn(Matrix(2, 2, 0.0), 1e-2, 0), ConfigError);
}

TEST_CASE("forbidden cells carry exactly zero mass") {
  SplitMixRng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix c = random_cost(rng, 5, 6, 0.0, 1.0);
    // Block a scattered subset, keeping the diagonal feasible.
    for (int i = 0; i < 5; ++i) {
      for (int j = 0; j < 6; ++j) {
        if (i != j && rng.next_double() < 0.3) c.at(i, j) = kPosInf;
      }
    }
    for (int j = 0; j < 6; ++j) c.at(static_cast<int>(rng.next_below(5)), j) = 0.5;
    Matrix p = sinkhorn(c, 1e-2, 50);
    for (size_t k = 0; k < c.data.size(); ++k) {
      if (std::isinf(c.data[k])) CHECK(p.data[k] == 0.0);
    }
  }
}

TEST_CASE("column marginals are exact and row deviation shrinks with iterations") {
  SplitMixRng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    Matrix c = random_cost(rng, 6, 6, 0.0, 1.0);
    double prev_dev = kPosInf;
    for (int iters : {1, 2, 4, 8, 16, 32}) {
      Matrix p = sinkhorn(c, 0.1, iters);
      CHECK(max_col_dev(p) < 1e-12);
      const double dev = max_row_dev(p);
      CHECK(dev <= prev_dev + 1e-15);
      prev_dev = dev;
    }
    CHECK(max_row_dev(sinkhorn(c, 0.1, 2000)) < 1e-9);
  }
}

TEST_CASE("log-domain and naive scaling agree at moderate epsilon") {
  SplitMixRng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix c = random_cost(rng, 4, 7, 0.0, 2.0);
    Matrix a = sinkhorn(c, 1.0, 30);
    Matrix b = sinkhorn_naive(c, 1.0, 30);
    for (size_t k = 0; k < c.data.size(); ++k) {
      CHECK(a.data[k] == doctest::Approx(b.data[k]).epsilon(1e-12));
    }
  }
}

TEST_CASE("small-epsilon plans recover the optimal assignment") {
  SplitMixRng rng(17);
  for (int n : {3, 4}) {
    for (int trial = 0; trial < 20; ++trial) {
      Matrix c = random_cost(rng, n, n, 0.0, 1.0);
      const std::vector<int> opt = brute_force_assignment(c);
      Matrix p = sinkhorn(c, 1e-4, 5000);
      for (int i = 0; i < n; ++i) {
        const double* row = p.row(i);
        const int arg = static_cast<int>(std::max_element(row, row + n) - row);
        CHECK(arg == opt[i]);
      }
    }
  }
}

TEST_CASE("shifting a cost column shifts only its potential") {
  // The entropic optimum is unchanged by a constant added to one column (the
  // column potential absorbs it), so converged plans must match.
  SplitMixRng rng(19);
  Matrix c = random_cost(rng, 4, 5, 0.0, 1.0);
  Matrix shifted = c;
  for (int i = 0; i < 4; ++i) shifted.at(i, 2) += 0.37;
  Matrix a = sinkhorn(c, 0.5, 300);
  Matrix b = sinkhorn(shifted, 0.5, 300);
  for (size_t k = 0; k < c.data.size(); ++k) {
    CHECK(a.data[k] == doctest::Approx(b.data[k]).epsilon(1e-9));
  }
}

TEST_CASE("decode transport splits mass between copy and wildcard") {
  OtConfig cfg;
  cfg.epsilon = 0.1;  // soft enough that both candidates keep visible mass
  cfg.iterations = 50;

  AffinityPair aff;
  aff.prev = Matrix(1, 1, 1.0);
  aff.gen = {0.5};
  TransportPair tp = solve_decode_ot(aff, cfg);
  CHECK(tp.prev.at(0, 0) > tp.gen[0]);
  CHECK(tp.prev.at(0, 0) > 0.0);
  CHECK(tp.gen[0] > 0.0);
}

TEST_CASE("fully capped copies push all mass to the wildcard") {
  OtConfig cfg;
  AffinityPair aff;
  aff.prev = Matrix(3, 3, kNegInf);
  aff.gen = {0.7, 0.7, 0.7};
  TransportPair tp = solve_decode_ot(aff, cfg);
  for (double e : tp.prev.data) CHECK(e == 0.0);
  for (double g : tp.gen) CHECK(g == doctest::Approx(1.0 / 6.0).epsilon(1e-9));
}

TEST_CASE("destination columns receive equal mass") {
  SplitMixRng rng(23);
  for (int trial = 0; trial < 5; ++trial) {
    const int L = 5;
    AffinityPair aff;
    aff.prev = Matrix(L, L);
    for (double& e : aff.prev.data) e = rng.uniform(-1.0, 1.0);
    for (int j = 0; j < L; ++j) aff.gen.push_back(rng.uniform(-1.0, 1.0));
    OtConfig cfg;
    cfg.epsilon = 0.05;
    cfg.iterations = 40;
    TransportPair tp = solve_decode_ot(aff, cfg);

    const double expect = 1.0 / (2 * L);
    for (int j = 0; j < L; ++j) {
      double total = tp.gen[j];
      for (int i = 0; i < L; ++i) total += tp.prev.at(i, j);
      CHECK(total == doctest::Approx(expect).epsilon(1e-9));
    }
    for (double e : tp.prev.data) {
      CHECK(e >= 0.0);
      CHECK(e <= 1.0);
    }
  }
}

TEST_CASE("decode transport is invariant to per-destination affinity shifts") {
  SplitMixRng rng(29);
  const int L = 4;
  AffinityPair aff;
  aff.prev = Matrix(L, L);
  for (double& e : aff.prev.data) e = rng.uniform(-0.5, 1.0);
  for (int j = 0; j < L; ++j) aff.gen.push_back(rng.uniform(-0.5, 1.0));

  AffinityPair shifted = aff;
  for (int i = 0; i < L; ++i) shifted.prev.at(i, 1) += 0.41;
  shifted.gen[1] += 0.41;

  OtConfig cfg;
  cfg.epsilon = 0.5;
  cfg.iterations = 2000;
  TransportPair a = solve_decode_ot(aff, cfg);
  TransportPair b = solve_decode_ot(shifted, cfg);
  for (size_t k = 0; k < a.prev.data.size(); ++k) {
    CHECK(a.prev.data[k] == doctest::Approx(b.prev.data[k]).epsilon(1e-9));
  }
  for (int j = 0; j < L; ++j) CHECK(a.gen[j] == doctest::Approx(b.gen[j]).epsilon(1e-9));
}
