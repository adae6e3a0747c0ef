#include "itc/assignment.hpp"

#include <algorithm>
#include <string>

#include "itc/errors.hpp"

namespace itc::assign {

int AssignmentPair::source_of(int j) const {
  const int n = side();
  for (int i = 0; i < n; ++i) {
    if (prev.at(i, j) == 1.0) return i;
  }
  return n + j;  // wildcard
}

void AssignmentPair::validate() const {
  const int n = side();
  if (prev.rows != n || prev.cols != n) {
    throw ConfigError("AssignmentPair: prev must be L x L");
  }
  std::vector<int> col_count(n, 0);
  for (int i = 0; i < n; ++i) {
    int row_count = 0;
    for (int j = 0; j < n; ++j) {
      const double e = prev.at(i, j);
      if (e != 0.0 && e != 1.0) throw ConfigError("AssignmentPair: entries must be 0 or 1");
      if (e == 1.0) {
        ++row_count;
        ++col_count[j];
      }
    }
    if (row_count > 1) throw ConfigError("AssignmentPair: source row assigned twice");
  }
  for (int j = 0; j < n; ++j) {
    if (gen[j] != 0 && gen[j] != 1) throw ConfigError("AssignmentPair: gen entries must be 0 or 1");
    if (col_count[j] + gen[j] != 1) {
      throw ConfigError("AssignmentPair: destination " + std::to_string(j) +
                        " lacks a unique source");
    }
  }
}

namespace {

// Row argmax over a 2L x L working matrix, lowest index on ties.
int row_argmax(const Matrix& w, int i) {
  int best = 0;
  double best_val = w.at(i, 0);
  for (int j = 1; j < w.cols; ++j) {
    if (w.at(i, j) > best_val) {
      best_val = w.at(i, j);
      best = j;
    }
  }
  return best;
}

}  // namespace

AssignmentPair binarize(const ot::TransportPair& plan, const BinarizeConfig& cfg,
                        BinarizeTrace* trace) {
  const int n = plan.side();
  if (plan.prev.rows != n || plan.prev.cols != n) {
    throw ConfigError("binarize: plan.prev must be L x L");
  }

  double plan_max = 0.0;
  for (double e : plan.prev.data) {
    if (!(e >= 0.0) || e == ot::kPosInf) throw ConfigError("binarize: plan entries must be finite and >= 0");
    plan_max = std::max(plan_max, e);
  }
  for (double e : plan.gen) {
    if (!(e >= 0.0) || e == ot::kPosInf) throw ConfigError("binarize: plan entries must be finite and >= 0");
    plan_max = std::max(plan_max, e);
  }
  cfg.validate(plan_max, n);

  // Stack the copy block and the wildcard diagonal into one 2L x L working
  // matrix so both source kinds compete under the same rule. A wildcard row
  // has a single edge (its own column); -inf marks the non-edges so no amount
  // of suppression ever makes them a row argmax.
  Matrix work;
  work.rows = 2 * n;
  work.cols = n;
  work.data.assign(static_cast<size_t>(work.rows) * n, ot::kNegInf);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) work.at(i, j) = plan.prev.at(i, j);
  }
  for (int j = 0; j < n; ++j) work.at(n + j, j) = plan.gen[j];

  const int max_rounds = cfg.max_rounds > 0 ? cfg.max_rounds : 2 * n * n;

  std::vector<int> winner(n, -1);  // stacked source row per destination
  std::vector<int> prev_winner;
  for (int round = 0; round < max_rounds; ++round) {
    // Each source row proposes its best destination.
    std::vector<int> pick(2 * n);
    for (int i = 0; i < 2 * n; ++i) pick[i] = row_argmax(work, i);

    // Each destination keeps the strongest proposal; everyone else who
    // proposed it is suppressed there and will look elsewhere next round.
    std::vector<int> round_winner(n, -1);
    for (int i = 0; i < 2 * n; ++i) {
      const int j = pick[i];
      const int cur = round_winner[j];
      if (cur < 0 || work.at(i, j) > work.at(cur, j)) round_winner[j] = i;
    }
    for (int i = 0; i < 2 * n; ++i) {
      const int j = pick[i];
      if (round_winner[j] != i) work.at(i, j) -= cfg.v;
    }
    winner = round_winner;

    if (trace) {
      auto& rec = trace->winners.emplace_back();
      for (int j = 0; j < n; ++j) {
        if (winner[j] >= 0) rec.emplace_back(winner[j], j);
      }
    }

    const bool covered = std::none_of(winner.begin(), winner.end(),
                                      [](int w) { return w < 0; });
    if (covered && winner == prev_winner) break;
    prev_winner = winner;
    if (round + 1 == max_rounds) {
      throw NumericalError("binarize: no stable assignment within max_rounds");
    }
  }

  AssignmentPair out;
  out.prev.rows = n;
  out.prev.cols = n;
  out.prev.data.assign(static_cast<size_t>(n) * n, 0.0);
  out.gen.assign(n, 0);
  for (int j = 0; j < n; ++j) {
    if (winner[j] < n) {
      out.prev.at(winner[j], j) = 1.0;
    } else {
      out.gen[j] = 1;
    }
  }
  out.validate();
  return out;
}

}  // namespace itc::assign
