#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "itc/grid.hpp"

namespace itc::tok {

struct PatchShape {
  int h = 1;
  int w = 1;
  int c = 1;

  int size() const { return h * w * c; }
  bool operator==(const PatchShape&) const = default;
};

// Append-only nearest-neighbor codebook. Codes are stored as 32-bit reals so
// the in-memory table, the persisted file and the content hash always agree
// bit for bit.
struct Codebook {
  PatchShape shape;
  double tau = 0.75;       // squared-distance growth threshold
  int k_max = 4096;
  std::vector<float> codes;      // K * shape.size(), row-major patches
  int64_t overflow_count = 0;    // growth attempts rejected at k_max

  int size() const { return shape.size() ? static_cast<int>(codes.size()) / shape.size() : 0; }
  const float* code(int k) const { return codes.data() + static_cast<size_t>(k) * shape.size(); }
};

// Index of the nearest code by squared Euclidean distance; ties toward the
// lowest index. p has cb.shape.size() entries.
int encode_patch(const float* p, const Codebook& cb);

// Appends p iff min squared distance to every code exceeds tau and the book
// is below k_max. Returns whether it grew; at k_max the rejection is counted
// in overflow_count instead.
bool grow_codebook(Codebook& cb, const float* p);

// Frame <-> token conversion over a row-major patch grid. image holds
// height*width*c reals with height % h == 0 and width % w == 0.
FrameTokens encode_frame(const std::vector<float>& image, int height, int width,
                         const Codebook& cb);
std::vector<float> decode_frame(const FrameTokens& tokens, const Codebook& cb);

// Scans every patch of the image in row-major order, growing the codebook
// where the threshold admits a new code.
void grow_from_frame(Codebook& cb, const std::vector<float>& image, int height, int width);

// Versioned binary persistence; see README for the byte layout.
void save_codebook(const Codebook& cb, const std::string& path);
Codebook load_codebook(const std::string& path);

// FNV-1a over the content that determines tokenization (shape, tau, codes).
uint64_t codebook_hash(const Codebook& cb);

}  // namespace itc::tok
