#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "itc/grid.hpp"
#include "itc/rng.hpp"

namespace itc::wm {

// Transformer world-model hyperparameters. Struct defaults mirror the
// reference large-scale setup; the desk-scale harness overrides them.
struct WmConfig {
  int num_blocks = 3;
  int num_heads = 8;
  int embed_dim = 128;
  int mlp_dim = 512;
  double dropout_rate = 0.1;
  int seq_len = 20;           // T_WM, frames per training window
  int grid_height = 9;        // token grid of one frame
  int grid_width = 9;
  int codebook_size = 4096;   // K
  int num_actions = 5;
  double learning_rate = 1e-3;
  double grad_clip_norm = 0.5;
  double rope_base = 10000.0;

  int tokens_per_frame() const { return grid_height * grid_width; }
  int block_size() const { return tokens_per_frame() + 1; }  // + action token
  int max_positions() const { return seq_len * block_size(); }
  int head_dim() const { return embed_dim / num_heads; }

  void validate() const;
};

// Integer spatio-temporal coordinates driving the rotary encoding.
struct Coord3 {
  int x = 0;
  int y = 0;
  int t = 0;

  bool operator==(const Coord3&) const = default;
};

// Coordinates for the interleaved sequence (s^1_t ... s^L_t, a_t), t in
// [0, T): state token at grid (x, y) carries (x+t, y+t, 2t); the action
// token carries (t, t, 2t+1). Every token gets a unique triple.
std::vector<Coord3> sequence_coords(int T, GridGeometry g);

// Per-pair rotation angles for one head vector of the given dimension.
// Pairs are ordered by decreasing frequency theta_p = base^(-2p/dim); the
// high-frequency pairs alternate between the x and y coordinates (3:1
// spatial:temporal split, spatial count rounded down to an even number),
// the rest rotate with t.
std::vector<double> rope_angles(int dim, Coord3 c, double base);

// Rotates consecutive pairs (v[2p], v[2p+1]) by angles[p] in place.
void rotate_pairs(double* vec, int dim, const double* angles);

// In-place 3D rotary rotation of one head vector: rotate_pairs with
// rope_angles(dim, c, base).
void rope3d_rotate(double* vec, int dim, Coord3 c, double base);

// N x N mask over N = T*(L+1) tokens: entry (i, j) = 1 iff token i may
// attend to token j, i.e. block(j) <= block(i). Dense within each block.
Matrix block_causal_mask(int T, int L);

// Named view into the flat parameter vector.
struct TensorSpec {
  std::string name;
  int rows = 0;
  int cols = 0;
  size_t offset = 0;

  size_t size() const { return static_cast<size_t>(rows) * cols; }
};

struct Model {
  WmConfig cfg;
  std::vector<TensorSpec> specs;
  std::vector<double> params;

  const TensorSpec& spec(const std::string& name) const;
  double* tensor(const std::string& name);
  const double* tensor(const std::string& name) const;
};

// Fresh model: weights N(0, 0.02), biases zero, layer-norm gains one, and
// zero-initialized final head layers so untrained heads emit uniform
// distributions.
Model init_model(const WmConfig& cfg, uint64_t seed);

// One training window: frames s_0..s_T ((T+1)*L tokens), actions/rewards/
// dones a_0..a_{T-1}. Frame t and action t form input block t; targets are
// s_{t+1}, r_t, d_t.
struct TrainWindow {
  std::vector<int> frames;
  std::vector<int> actions;
  std::vector<uint8_t> rewards;
  std::vector<uint8_t> dones;
};

struct ForwardOutput {
  Matrix obs_logits;     // (T*L) x K, row t*L+i predicts state token i of frame t+1
  Matrix reward_logits;  // T x 2
  Matrix done_logits;    // T x 2
};

// Full forward pass over T <= seq_len blocks. frames holds T*L input tokens
// (s_0..s_{T-1}); actions holds T entries. Deterministic; dropout only
// applies inside train_step.
ForwardOutput forward(const Model& model, const std::vector<int>& frames,
                      const std::vector<int>& actions);

// Incremental inference: feeds one (frame, action) block and returns the
// next-frame predictions conditioned on everything cached so far.
struct KvCache {
  int frames = 0;
  std::vector<Matrix> k, v;  // per block: max_positions x embed_dim
};

KvCache make_cache(const Model& model);

struct StepOutput {
  Matrix obs_logits;  // L x K, predictions for frame (cache.frames) + 1
  std::array<double, 2> reward_logits{};
  std::array<double, 2> done_logits{};
};

StepOutput forward_step(const Model& model, KvCache& cache,
                        const std::vector<int>& frame, int action);

struct AdamState {
  std::vector<double> m, v;
  int64_t step = 0;
};

struct TrainMetrics {
  double loss = 0.0;
  double obs_loss = 0.0;
  double reward_loss = 0.0;
  double done_loss = 0.0;
  double grad_norm = 0.0;  // pre-clip global norm
  double token_error_rate = 0.0;
};

// Sum of the three cross-entropy losses averaged over batch x timesteps,
// backprop, global-norm clipping, then one Adam update (beta 0.9/0.999,
// eps 1e-8). dropout_seed keys the per-step dropout masks.
TrainMetrics train_step(Model& model, const std::vector<TrainWindow>& batch,
                        AdamState& opt, uint64_t dropout_seed);

// Loss and gradient without updating parameters; the finite-difference
// oracle in the tests drives this directly.
double loss_and_grad(const Model& model, const std::vector<TrainWindow>& batch,
                     std::vector<double>& grad, TrainMetrics* metrics = nullptr,
                     uint64_t dropout_seed = 0, double dropout_rate = 0.0);

// Versioned binary checkpoint: config echo + named float32 blobs.
void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace itc::wm
