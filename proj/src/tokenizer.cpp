#include "itc/tokenizer.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <memory>

#include "itc/errors.hpp"

namespace itc::tok {

namespace {

double sq_distance(const float* a, const float* b, int n) {
  double s = 0.0;
  for (int i = 0; i < n; ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return s;
}

void check_image(const std::vector<float>& image, int height, int width, const Codebook& cb) {
  if (cb.shape.h <= 0 || cb.shape.w <= 0 || cb.shape.c <= 0) {
    throw ConfigError("tokenizer: invalid patch shape");
  }
  if (height % cb.shape.h != 0 || width % cb.shape.w != 0) {
    throw ConfigError("tokenizer: image size not divisible by patch shape");
  }
  if (image.size() != static_cast<size_t>(height) * width * cb.shape.c) {
    throw ConfigError("tokenizer: image buffer size mismatch");
  }
}

void extract_patch(const std::vector<float>& image, int width, int c, int py, int px,
                   const PatchShape& shape, float* out) {
  for (int y = 0; y < shape.h; ++y) {
    const float* src =
        image.data() + (static_cast<size_t>(py * shape.h + y) * width + px * shape.w) * c;
    std::memcpy(out + static_cast<size_t>(y) * shape.w * c, src,
                sizeof(float) * shape.w * c);
  }
}

}  // namespace

int encode_patch(const float* p, const Codebook& cb) {
  const int k = cb.size();
  if (k == 0) throw ConfigError("encode_patch: empty codebook");
  int best = 0;
  double best_d = sq_distance(p, cb.code(0), cb.shape.size());
  for (int i = 1; i < k; ++i) {
    const double d = sq_distance(p, cb.code(i), cb.shape.size());
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

bool grow_codebook(Codebook& cb, const float* p) {
  const int n = cb.shape.size();
  if (cb.size() > 0) {
    double min_d = sq_distance(p, cb.code(0), n);
    for (int i = 1; i < cb.size(); ++i) {
      min_d = std::min(min_d, sq_distance(p, cb.code(i), n));
    }
    if (min_d <= cb.tau) return false;
  }
  if (cb.size() >= cb.k_max) {
    ++cb.overflow_count;
    return false;
  }
  cb.codes.insert(cb.codes.end(), p, p + n);
  return true;
}

FrameTokens encode_frame(const std::vector<float>& image, int height, int width,
                         const Codebook& cb) {
  check_image(image, height, width, cb);
  const int gh = height / cb.shape.h, gw = width / cb.shape.w;
  FrameTokens out;
  out.geometry = GridGeometry{gh, gw};
  std::vector<float> patch(cb.shape.size());
  for (int py = 0; py < gh; ++py) {
    for (int px = 0; px < gw; ++px) {
      extract_patch(image, width, cb.shape.c, py, px, cb.shape, patch.data());
      out.tokens.push_back(encode_patch(patch.data(), cb));
    }
  }
  return out;
}

std::vector<float> decode_frame(const FrameTokens& tokens, const Codebook& cb) {
  tokens.validate(cb.size());
  const int gh = tokens.geometry.height, gw = tokens.geometry.width;
  const int width = gw * cb.shape.w, c = cb.shape.c;
  std::vector<float> image(static_cast<size_t>(gh) * cb.shape.h * width * c);
  for (int py = 0; py < gh; ++py) {
    for (int px = 0; px < gw; ++px) {
      const float* code = cb.code(tokens.tokens[tokens.geometry.index_of({px, py})]);
      for (int y = 0; y < cb.shape.h; ++y) {
        float* dst =
            image.data() + (static_cast<size_t>(py * cb.shape.h + y) * width + px * cb.shape.w) * c;
        std::memcpy(dst, code + static_cast<size_t>(y) * cb.shape.w * c,
                    sizeof(float) * cb.shape.w * c);
      }
    }
  }
  return image;
}

void grow_from_frame(Codebook& cb, const std::vector<float>& image, int height, int width) {
  check_image(image, height, width, cb);
  const int gh = height / cb.shape.h, gw = width / cb.shape.w;
  std::vector<float> patch(cb.shape.size());
  for (int py = 0; py < gh; ++py) {
    for (int px = 0; px < gw; ++px) {
      extract_patch(image, width, cb.shape.c, py, px, cb.shape, patch.data());
      grow_codebook(cb, patch.data());
    }
  }
}

namespace {

constexpr char kMagic[4] = {'I', 'T', 'C', 'B'};
constexpr uint32_t kVersion = 1;

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

template <typename T>
void write_pod(std::FILE* f, const T& v) {
  if (std::fwrite(&v, sizeof(T), 1, f) != 1) throw IoError("codebook write failed");
}

template <typename T>
void read_pod(std::FILE* f, T& v) {
  if (std::fread(&v, sizeof(T), 1, f) != 1) throw IoError("codebook read failed");
}

}  // namespace

void save_codebook(const Codebook& cb, const std::string& path) {
  std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.c_str(), "wb"));
  if (!f) throw IoError("cannot open codebook file for writing: " + path);
  if (std::fwrite(kMagic, 1, 4, f.get()) != 4) throw IoError("codebook write failed");
  write_pod(f.get(), kVersion);
  write_pod(f.get(), static_cast<uint32_t>(cb.size()));
  write_pod(f.get(), static_cast<uint32_t>(cb.shape.h));
  write_pod(f.get(), static_cast<uint32_t>(cb.shape.w));
  write_pod(f.get(), static_cast<uint32_t>(cb.shape.c));
  write_pod(f.get(), cb.tau);
  write_pod(f.get(), static_cast<uint32_t>(cb.k_max));
  if (!cb.codes.empty() &&
      std::fwrite(cb.codes.data(), sizeof(float), cb.codes.size(), f.get()) != cb.codes.size()) {
    throw IoError("codebook write failed");
  }
}

Codebook load_codebook(const std::string& path) {
  std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.c_str(), "rb"));
  if (!f) throw IoError("cannot open codebook file: " + path);
  char magic[4];
  if (std::fread(magic, 1, 4, f.get()) != 4 || std::memcmp(magic, kMagic, 4) != 0) {
    throw IoError("not a codebook file: " + path);
  }
  uint32_t version = 0, k = 0, h = 0, w = 0, c = 0, k_max = 0;
  read_pod(f.get(), version);
  if (version != kVersion) throw IoError("unsupported codebook version");
  read_pod(f.get(), k);
  read_pod(f.get(), h);
  read_pod(f.get(), w);
  read_pod(f.get(), c);
  Codebook cb;
  read_pod(f.get(), cb.tau);
  read_pod(f.get(), k_max);
  cb.shape = PatchShape{static_cast<int>(h), static_cast<int>(w), static_cast<int>(c)};
  cb.k_max = static_cast<int>(k_max);
  cb.codes.resize(static_cast<size_t>(k) * cb.shape.size());
  if (!cb.codes.empty() &&
      std::fread(cb.codes.data(), sizeof(float), cb.codes.size(), f.get()) != cb.codes.size()) {
    throw IoError("codebook truncated: " + path);
  }
  return cb;
}

uint64_t codebook_hash(const Codebook& cb) {
  uint64_t h = 0xcbf29ce484222325ull;
  auto mix_bytes = [&h](const void* p, size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ull;
    }
  };
  const int32_t dims[3] = {cb.shape.h, cb.shape.w, cb.shape.c};
  mix_bytes(dims, sizeof(dims));
  mix_bytes(&cb.tau, sizeof(cb.tau));
  mix_bytes(cb.codes.data(), cb.codes.size() * sizeof(float));
  return h;
}

}  // namespace itc::tok
