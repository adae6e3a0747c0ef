#include "itc/ot.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace itc::ot {

double distance_cost(GridCoord a, GridCoord b, double cap) {
  const double dx = static_cast<double>(a.x - b.x);
  const double dy = static_cast<double>(a.y - b.y);
  const double d = dx * dx + dy * dy;
  return d <= cap ? d : kPosInf;
}

AffinityPair build_affinity(const PredictionGrid& pred, const FrameTokens& prev,
                            const OtConfig& cfg) {
  if (pred.geometry != prev.geometry) {
    throw ConfigError("build_affinity: prediction and previous frame geometry mismatch");
  }
  pred.validate();
  prev.validate(pred.codebook_size);
  cfg.validate();

  const int L = pred.size();
  AffinityPair aff;
  aff.prev = Matrix(L, L, kNegInf);
  aff.gen.resize(L);

  for (int j = 0; j < L; ++j) {
    const double* pj = pred.row(j);
    const GridCoord cj = pred.geometry.coord_of(j);
    for (int i = 0; i < L; ++i) {
      const double d = distance_cost(prev.geometry.coord_of(i), cj, cfg.cap);
      if (std::isinf(d)) continue;
      aff.prev.at(i, j) = pj[prev.tokens[i]] - cfg.c_d * d;
    }
    double pmax = 0.0;
    for (int k = 0; k < pred.codebook_size; ++k) pmax = std::max(pmax, pj[k]);
    aff.gen[j] = pmax - cfg.c_w;
  }
  return aff;
}

namespace {

// log-sum-exp over a strided slice, skipping -inf terms.
double lse(const double* v, int n, int stride) {
  double mx = kNegInf;
  for (int i = 0; i < n; ++i) {
    const double x = v[static_cast<size_t>(i) * stride];
    if (x > mx) mx = x;
  }
  if (std::isinf(mx)) return kNegInf;
  double s = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = v[static_cast<size_t>(i) * stride];
    if (!std::isinf(x)) s += std::exp(x - mx);
  }
  return mx + std::log(s);
}

void check_feasible(const Matrix& cost) {
  const int n = cost.rows, m = cost.cols;
  for (int i = 0; i < n; ++i) {
    bool any = false;
    for (int j = 0; j < m; ++j) any = any || std::isfinite(cost.at(i, j));
    if (!any) throw NumericalError("sinkhorn: row " + std::to_string(i) + " has no finite cost");
  }
  for (int j = 0; j < m; ++j) {
    bool any = false;
    for (int i = 0; i < n; ++i) any = any || std::isfinite(cost.at(i, j));
    if (!any) throw NumericalError("sinkhorn: column " + std::to_string(j) + " has no finite cost");
  }
}

}  // namespace

Matrix sinkhorn(const Matrix& cost, double epsilon, int iterations) {
  if (epsilon <= 0.0) throw ConfigError("sinkhorn: epsilon must be > 0");
  if (iterations < 1) throw ConfigError("sinkhorn: iterations must be >= 1");
  check_feasible(cost);

  const int n = cost.rows, m = cost.cols;
  // Log-kernel lK = -C / epsilon; +inf cost maps to -inf and is skipped by
  // the log-sum-exp, which keeps those plan entries exactly zero.
  Matrix lk(n, m);
  for (size_t idx = 0; idx < cost.data.size(); ++idx) {
    const double c = cost.data[idx];
    lk.data[idx] = std::isinf(c) ? kNegInf : -c / epsilon;
  }

  const double lr = -std::log(static_cast<double>(n));
  const double lc = -std::log(static_cast<double>(m));
  std::vector<double> lu(n, 0.0), lv(m, 0.0);
  std::vector<double> tmp(std::max(n, m));

  for (int it = 0; it < iterations; ++it) {
    for (int i = 0; i < n; ++i) {
      const double* row = lk.row(i);
      for (int j = 0; j < m; ++j) tmp[j] = row[j] + lv[j];
      lu[i] = lr - lse(tmp.data(), m, 1);
    }
    for (int j = 0; j < m; ++j) {
      for (int i = 0; i < n; ++i) tmp[i] = lk.at(i, j) + lu[i];
      lv[j] = lc - lse(tmp.data(), n, 1);
    }
  }

  Matrix plan(n, m);
  for (int i = 0; i < n; ++i) {
    const double* row = lk.row(i);
    double* out = plan.row(i);
    for (int j = 0; j < m; ++j) {
      const double e = lu[i] + row[j] + lv[j];
      out[j] = std::isinf(e) ? 0.0 : std::exp(e);
    }
  }
  return plan;
}

Matrix sinkhorn_naive(const Matrix& cost, double epsilon, int iterations) {
  if (epsilon <= 0.0) throw ConfigError("sinkhorn_naive: epsilon must be > 0");
  if (iterations < 1) throw ConfigError("sinkhorn_naive: iterations must be >= 1");
  check_feasible(cost);

  const int n = cost.rows, m = cost.cols;
  Matrix kernel(n, m);
  for (size_t idx = 0; idx < cost.data.size(); ++idx) {
    kernel.data[idx] = std::exp(-cost.data[idx] / epsilon);  // exp(-inf) == 0
  }

  const double r = 1.0 / n, c = 1.0 / m;
  std::vector<double> u(n, 1.0), v(m, 1.0);
  for (int it = 0; it < iterations; ++it) {
    for (int i = 0; i < n; ++i) {
      double s = 0.0;
      const double* row = kernel.row(i);
      for (int j = 0; j < m; ++j) s += row[j] * v[j];
      u[i] = r / s;
    }
    for (int j = 0; j < m; ++j) {
      double s = 0.0;
      for (int i = 0; i < n; ++i) s += kernel.at(i, j) * u[i];
      v[j] = c / s;
    }
  }

  Matrix plan(n, m);
  for (int i = 0; i < n; ++i) {
    const double* row = kernel.row(i);
    double* out = plan.row(i);
    for (int j = 0; j < m; ++j) out[j] = u[i] * row[j] * v[j];
  }
  return plan;
}

TransportPair solve_decode_ot(const AffinityPair& aff, const OtConfig& cfg) {
  cfg.validate();
  const int L = aff.side();
  if (L <= 0 || aff.prev.rows != L || aff.prev.cols != L) {
    throw ConfigError("solve_decode_ot: malformed affinity pair");
  }

  // Stacked cost: left L columns are -A for the real destinations, right L
  // columns are zero-cost dummy sinks absorbing the unused sources.
  const int n = 2 * L;
  Matrix cost(n, n, 0.0);
  for (int i = 0; i < L; ++i) {
    for (int j = 0; j < L; ++j) {
      const double a = aff.prev.at(i, j);
      cost.at(i, j) = std::isinf(a) ? kPosInf : -a;
    }
  }
  for (int k = 0; k < L; ++k) {
    for (int j = 0; j < L; ++j) cost.at(L + k, j) = kPosInf;
    cost.at(L + k, k) = -aff.gen[k];
  }

  const Matrix plan = sinkhorn(cost, cfg.epsilon, cfg.iterations);

  TransportPair out;
  out.prev = Matrix(L, L);
  out.gen.resize(L);
  for (int i = 0; i < L; ++i) {
    for (int j = 0; j < L; ++j) out.prev.at(i, j) = plan.at(i, j);
  }
  for (int k = 0; k < L; ++k) out.gen[k] = plan.at(L + k, k);
  return out;
}

}  // namespace itc::ot
