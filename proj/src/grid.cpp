#include "itc/grid.hpp"

#include <cmath>

namespace itc {

void PredictionGrid::validate(double tol) const {
  if (static_cast<int>(probs.size()) != geometry.size() * codebook_size) {
    throw ConfigError("PredictionGrid: probs size does not match geometry and codebook");
  }
  if (codebook_size <= 0) throw ConfigError("PredictionGrid: empty codebook");
  for (int j = 0; j < geometry.size(); ++j) {
    const double* pj = row(j);
    double s = 0.0;
    for (int k = 0; k < codebook_size; ++k) {
      if (pj[k] < 0.0 || !std::isfinite(pj[k])) {
        throw ConfigError("PredictionGrid: negative or non-finite probability");
      }
      s += pj[k];
    }
    if (std::abs(s - 1.0) > tol) {
      throw ConfigError("PredictionGrid: row " + std::to_string(j) + " sums to " +
                        std::to_string(s));
    }
  }
}

}  // namespace itc
