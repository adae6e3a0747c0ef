#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "itc/errors.hpp"
#include "itc/rng.hpp"
#include "itc/tokenizer.hpp"

using namespace itc;
using namespace itc::tok;

namespace {

Codebook small_book(int k, int dim, uint64_t seed) {
  Codebook cb;
  cb.shape = PatchShape{1, 1, dim};
  cb.tau = 0.0;  // accept everything distinct
  SplitMixRng rng(seed);
  for (int i = 0; i < k; ++i) {
    std::vector<float> p(dim);
    for (float& x : p) x = static_cast<float>(rng.next_double());
    grow_codebook(cb, p.data());
  }
  return cb;
}

std::string temp_path(const char* name) {
  return std::string("/tmp/itc_test_") + name;
}

}  // namespace

TEST_CASE("nearest code wins and ties break low") {
  Codebook cb;
  cb.shape = PatchShape{1, 1, 2};
  cb.tau = 0.75;
  const float codes[4][2] = {{0, 0}, {1, 0}, {0, 1}, {1, 1}};
  for (const float* c : codes) CHECK(grow_codebook(cb, c));
  REQUIRE(cb.size() == 4);

  const float exact[2] = {1, 0};
  CHECK(encode_patch(exact, cb) == 1);

  // Equidistant from codes 1 and 2: the lower index wins.
  const float mid[2] = {0.5f, 0.5f};
  CHECK(encode_patch(mid, cb) == 0);  // also equidistant from 0 and 3
  const float edge[2] = {1.0f, 1.0f};
  CHECK(encode_patch(edge, cb) == 3);

  Codebook empty;
  empty.shape = cb.shape;
  CHECK_THROWS_AS(encode_patch(exact, empty), ConfigError);
}

TEST_CASE("lookup matches a brute-force scan on random patches") {
  Codebook cb = small_book(10, 6, 91);
  SplitMixRng rng(92);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<float> p(6);
    for (float& x : p) x = static_cast<float>(rng.uniform(-0.2, 1.2));
    int best = 0;
    double best_d = 1e300;
    for (int k = 0; k < cb.size(); ++k) {
      double d = 0.0;
      for (int i = 0; i < 6; ++i) {
        const double diff = static_cast<double>(p[i]) - cb.code(k)[i];
        d += diff * diff;
      }
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    CHECK(encode_patch(p.data(), cb) == best);
  }
}

TEST_CASE("growth is gated by the distance threshold") {
  Codebook cb;
  cb.shape = PatchShape{1, 1, 1};
  cb.tau = 0.75;

  const float a = 0.0f;
  CHECK(grow_codebook(cb, &a));  // empty book always grows
  CHECK(cb.size() == 1);

  CHECK_FALSE(grow_codebook(cb, &a));  // distance 0
  const float close = 0.86f;           // squared distance 0.7396 <= tau
  CHECK_FALSE(grow_codebook(cb, &close));
  CHECK(cb.size() == 1);

  const float far = std::sqrt(0.76f);  // squared distance 0.76 > tau
  CHECK(grow_codebook(cb, &far));
  CHECK(cb.size() == 2);
}

TEST_CASE("the book stops at k_max and counts the overflow") {
  Codebook cb;
  cb.shape = PatchShape{1, 1, 1};
  cb.tau = 0.0;
  cb.k_max = 3;
  for (int i = 0; i < 5; ++i) {
    const float v = static_cast<float>(i);
    grow_codebook(cb, &v);
  }
  CHECK(cb.size() == 3);
  CHECK(cb.overflow_count == 2);
}

TEST_CASE("frames round-trip through the codebook") {
  // 2x2x3 patches over a 4x6 image -> 2x3 token grid.
  Codebook cb;
  cb.shape = PatchShape{2, 2, 3};
  cb.tau = 0.75;
  SplitMixRng rng(93);

  std::vector<float> image(4 * 6 * 3);
  for (float& x : image) x = static_cast<float>(rng.next_double());
  grow_from_frame(cb, image, 4, 6);
  CHECK(cb.size() >= 1);

  FrameTokens t = encode_frame(image, 4, 6, cb);
  CHECK(t.geometry.height == 2);
  CHECK(t.geometry.width == 3);

  // Round trip is exact once every patch has entered the codebook.
  std::vector<float> grown_exact = decode_frame(t, cb);
  FrameTokens t2 = encode_frame(grown_exact, 4, 6, cb);
  CHECK(t2.tokens == t.tokens);  // quantization idempotence

  // An image assembled purely from codes reproduces itself bit for bit.
  std::vector<float> reassembled = decode_frame(t2, cb);
  CHECK(reassembled == grown_exact);

  CHECK_THROWS_AS(encode_frame(image, 3, 6, cb), ConfigError);
  std::vector<float> short_buf(10);
  CHECK_THROWS_AS(encode_frame(short_buf, 4, 6, cb), ConfigError);
}

TEST_CASE("a novel patch becomes representable after growth") {
  Codebook cb;
  cb.shape = PatchShape{1, 1, 4};
  cb.tau = 0.75;
  const float base[4] = {0, 0, 0, 0};
  grow_codebook(cb, base);

  std::vector<float> image{0, 0, 0, 0, 1, 1, 1, 1};  // 1x2 grid of 1x1x4 patches
  FrameTokens before = encode_frame(image, 1, 2, cb);
  CHECK(before.tokens == std::vector<int>{0, 0});

  grow_from_frame(cb, image, 1, 2);
  CHECK(cb.size() == 2);
  FrameTokens after = encode_frame(image, 1, 2, cb);
  CHECK(after.tokens == std::vector<int>{0, 1});
  CHECK(decode_frame(after, cb) == image);
}

TEST_CASE("persistence reproduces the book and its hash") {
  Codebook cb = small_book(7, 5, 94);
  cb.tau = 0.75;
  const std::string path = temp_path("codebook.bin");
  save_codebook(cb, path);
  Codebook loaded = load_codebook(path);

  CHECK(loaded.shape == cb.shape);
  CHECK(loaded.tau == cb.tau);
  CHECK(loaded.k_max == cb.k_max);
  CHECK(loaded.codes == cb.codes);
  CHECK(codebook_hash(loaded) == codebook_hash(cb));

  // Hash reacts to content changes.
  loaded.codes[3] += 0.25f;
  CHECK(codebook_hash(loaded) != codebook_hash(cb));

  CHECK_THROWS_AS(load_codebook(temp_path("missing.bin")), IoError);
  std::remove(path.c_str());
}

TEST_CASE("codes never mutate as the book grows") {
  Codebook cb;
  cb.shape = PatchShape{1, 1, 2};
  cb.tau = 0.1;
  SplitMixRng rng(95);
  std::vector<float> snapshot;
  for (int i = 0; i < 50; ++i) {
    float p[2] = {static_cast<float>(rng.uniform(0, 4)), static_cast<float>(rng.uniform(0, 4))};
    const int before = cb.size();
    grow_codebook(cb, p);
    CHECK(cb.size() >= before);
    CHECK(std::equal(snapshot.begin(), snapshot.end(), cb.codes.begin()));
    snapshot = cb.codes;
  }
  // Separation: all pairwise distances exceed tau.
  for (int a = 0; a < cb.size(); ++a) {
    for (int b = a + 1; b < cb.size(); ++b) {
      double d = 0.0;
      for (int i = 0; i < 2; ++i) {
        const double diff = static_cast<double>(cb.code(a)[i]) - cb.code(b)[i];
        d += diff * diff;
      }
      CHECK(d > cb.tau);
    }
  }
}
