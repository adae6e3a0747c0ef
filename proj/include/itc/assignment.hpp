#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "itc/errors.hpp"
#include "itc/ot.hpp"

namespace itc::assign {

// Strict one-to-one correspondence: for every destination j exactly one of
// {some prev[i][j] == 1, gen[j] == 1} holds, and every source row carries at
// most one 1.
struct AssignmentPair {
  Matrix prev;           // L x L, entries 0/1
  std::vector<uint8_t> gen;  // length L, diagonal of the wildcard assignment

  int side() const { return static_cast<int>(gen.size()); }

  // Source row (0..L-1 = previous token, L..2L-1 = wildcard) chosen for
  // destination j. Assumes a valid pair.
  int source_of(int j) const;

  void validate() const;
};

struct BinarizeConfig {
  double v = 1e6;      // suppression value; must exceed every plan entry
  int max_rounds = 0;  // safety bound; 0 = auto (2 * L^2)

  void validate(double plan_max, int side) const {
    if (v <= plan_max) throw ConfigError("BinarizeConfig: v must exceed the largest plan entry");
    if (max_rounds != 0 && max_rounds < side) {
      throw ConfigError("BinarizeConfig: max_rounds must be >= L");
    }
  }
};

// Optional round-by-round debug trace.
struct BinarizeTrace {
  // winners[r] lists (source row, destination) pairs accepted in round r,
  // with source rows indexed over the stacked 2L rows.
  std::vector<std::vector<std::pair<int, int>>> winners;
};

// Iterative greedy binarization of the stacked [prev; diag(gen)] plan:
// every source row picks its argmax destination, each contested destination
// keeps the largest entry, losing picks are suppressed by -v, and the loop
// ends once every destination has exactly one accepted source and the winner
// set repeats between consecutive rounds. Ties break toward the lowest index
// in both directions.
//
// Throws NumericalError if max_rounds passes without settling.
AssignmentPair binarize(const ot::TransportPair& plan, const BinarizeConfig& cfg,
                        BinarizeTrace* trace = nullptr);

}  // namespace itc::assign
