#pragma once

#include <cstdint>
#include <vector>

#include "itc/errors.hpp"

namespace itc {

// Token-cell coordinate inside a frame grid.
struct GridCoord {
  int x = 0;  // column
  int y = 0;  // row

  bool operator==(const GridCoord&) const = default;
};

struct GridGeometry {
  int height = 0;
  int width = 0;

  int size() const { return height * width; }
  bool operator==(const GridGeometry&) const = default;

  bool contains(GridCoord c) const {
    return c.x >= 0 && c.x < width && c.y >= 0 && c.y < height;
  }
  GridCoord coord_of(int index) const { return GridCoord{index % width, index / width}; }
  int index_of(GridCoord c) const { return c.y * width + c.x; }
};

// One frame as a row-major grid of token identifiers.
struct FrameTokens {
  std::vector<int> tokens;
  GridGeometry geometry;

  int size() const { return geometry.size(); }

  void validate(int codebook_size) const {
    if (static_cast<int>(tokens.size()) != geometry.size()) {
      throw ConfigError("FrameTokens: token count does not match geometry");
    }
    for (int t : tokens) {
      if (t < 0 || t >= codebook_size) {
        throw ConfigError("FrameTokens: token id out of range");
      }
    }
  }
};

// Per-position categorical distributions over the codebook, row j = p_j.
struct PredictionGrid {
  std::vector<double> probs;  // L x K, row-major
  int codebook_size = 0;
  GridGeometry geometry;

  int size() const { return geometry.size(); }

  const double* row(int j) const { return probs.data() + static_cast<size_t>(j) * codebook_size; }
  double* row(int j) { return probs.data() + static_cast<size_t>(j) * codebook_size; }

  // Rows must sum to 1 within tol and be nonnegative.
  void validate(double tol = 1e-6) const;
};

// Dense row-major matrix of doubles; the workhorse container for plans,
// affinities and activations.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(int r, int c, double fill = 0.0)
      : rows(r), cols(c), data(static_cast<size_t>(r) * c, fill) {}

  double& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  double at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
  double* row(int r) { return data.data() + static_cast<size_t>(r) * cols; }
  const double* row(int r) const { return data.data() + static_cast<size_t>(r) * cols; }
};

}  // namespace itc
