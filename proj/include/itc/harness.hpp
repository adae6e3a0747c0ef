#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "itc/dataset.hpp"
#include "itc/decode.hpp"
#include "itc/gridworld.hpp"
#include "itc/tokenizer.hpp"
#include "itc/wm.hpp"

namespace itc::harness {

inline constexpr const char* kVariantBaseline = "baseline-sample";
inline constexpr const char* kVariantItc = "itc";

// Full run settings. desk_config() holds the defaults every tool starts
// from; JSON configs override individual fields and unknown keys are
// rejected.
struct RunConfig {
  gw::GridworldConfig env;
  wm::WmConfig wm;
  ot::OtConfig ot;
  assign::BinarizeConfig bin;
  double tokenizer_tau = 0.75;
  int codebook_capacity = 8;
  int episodes = 400;
  // Transport decoding targets models that are still uncertain; past roughly
  // a hundred steps the argmax baseline pins down the static cells and the
  // per-token comparison stops measuring anything but creature motion.
  int train_steps = 60;
  int batch_size = 3;
  int holdout_modulus = 10;  // episode index % modulus == 0 -> held out
  decode::Sampling sampling = decode::Sampling::kGreedy;
  uint64_t seed = 0;
  std::string out_dir = "out";

  GridGeometry geometry() const { return GridGeometry{env.height, env.width}; }

  // Also cross-checks that the world model's token grid matches the
  // environment and that the codebook fits the observation head.
  void validate() const;
};

RunConfig desk_config();
RunConfig load_run_config(const std::string& path);
void save_run_config(const RunConfig& cfg, const std::string& path);

// Episode index -> train/eval split, fixed before training ever sees data.
bool is_held_out(int episode, int holdout_modulus);

// Transitions regrouped into per-episode frame sequences; validates that
// consecutive transitions chain (s_next of t equals s_prev of t+1).
struct EpisodeTokens {
  int episode = 0;
  std::vector<std::vector<int>> frames;  // length T+1
  std::vector<int> actions;              // length T
  std::vector<uint8_t> rewards, dones;
  bool has_creature = false;
};

std::vector<EpisodeTokens> group_episodes(const data::Dataset& ds);

// Decoder settings for one variant: "itc" runs transport over the interior
// region, "baseline-sample" keeps the region empty so every position samples
// the transformer output directly. Both share the sampling mode and seed, so
// any outcome difference is attributable to the transport step.
decode::DecodeConfig make_decode_config(const RunConfig& cfg, GridGeometry g,
                                        const std::string& variant, uint64_t rng_seed);

// Creature symbols among the decoded tokens; ids outside the codebook count
// as no creature.
int count_creatures(const tok::Codebook& book, const std::vector<int>& tokens);

// ---------------------------------------------------------------------------
// Evaluation

struct EvalOutcome {
  int episode = 0;
  int t = 0;
  uint8_t exact = 0;
  int token_errors = 0;
  uint8_t has_creature = 0;
  int pred_creatures = 0;
  int true_creatures = 0;
};

struct EvalReport {
  std::string variant;
  int64_t transitions = 0;
  int64_t with_creature_transitions = 0;
  double overall_accuracy = 0.0;
  double with_creature_accuracy = 0.0;     // empty split reports 0
  double without_creature_accuracy = 0.0;  // empty split reports 0
  double per_token_error_rate = 0.0;
  int64_t duplication = 0;     // predicted frames with too many creatures
  int64_t disappearance = 0;   // predicted frames with too few
  int rollout_length = 0;      // 0 for single-step evaluation
};

struct EvalResult {
  EvalReport report;
  std::vector<EvalOutcome> outcomes;
};

// Next-frame distribution for transition t of an episode. Called in strict
// (episode, t) order, so stateful predictors may carry context.
using EvalPredictor = std::function<PredictionGrid(const EpisodeTokens& ep, int t)>;

// One-hot distributions concentrated on the given tokens.
PredictionGrid one_hot_grid(GridGeometry g, int codebook_size, const std::vector<int>& tokens);

// Held-out single-step accuracy over whatever produces the predictions: one
// grid per transition, decoded once per requested variant, so all variants
// score the exact same predictions.
std::vector<EvalResult> eval_accuracy_with(const EvalPredictor& predict,
                                           const tok::Codebook& book, const data::Dataset& ds,
                                           const std::vector<std::string>& variants,
                                           const RunConfig& cfg, uint64_t seed);

// Model-backed evaluation. Streams each held-out episode through the KV
// cache in windows of seq_len frames (the cache restarts at each window
// boundary, matching the training-time conditioning).
std::vector<EvalResult> eval_accuracy(const wm::Model& model, const tok::Codebook& book,
                                      const data::Dataset& ds,
                                      const std::vector<std::string>& variants,
                                      const RunConfig& cfg, uint64_t seed);

// Recomputes a report from stored outcomes; must reproduce the streaming
// report of eval_accuracy exactly.
EvalReport recount(const std::vector<EvalOutcome>& outcomes, const std::string& variant,
                   int tokens_per_frame);

EvalReport load_eval_report(const std::string& path);
void save_eval_report(const EvalReport& report, const std::string& path);

// ---------------------------------------------------------------------------
// Rollouts

// Next-frame distribution given the current frame and action. Stateful
// predictors (the KV-cache one) see frames in feed order.
using Predictor = std::function<PredictionGrid(const std::vector<int>& frame, int action)>;

struct RolloutResult {
  std::string variant;
  std::vector<std::vector<int>> frames;  // context frames + imagined frames
  int64_t duplication = 0;
  int64_t disappearance = 0;
};

// Autoregressive imagination: feeds the context frames, then alternates
// decode -> feed for `horizon` steps. actions pairs with every fed frame, so
// it must hold context + horizon - 1 entries (none for horizon 0, which
// returns the context unchanged). seq_cap > 0 bounds context + horizon (the
// model's window); pass 0 for stateless predictors with no such limit.
// true_creatures is the episode's conserved creature count.
RolloutResult rollout_with(const Predictor& predict, const tok::Codebook& book,
                           GridGeometry g, const std::vector<std::vector<int>>& context,
                           const std::vector<int>& actions, int horizon,
                           const std::string& variant, const RunConfig& cfg,
                           uint64_t seed, int true_creatures, int seq_cap);

// KV-cache predictor over a trained checkpoint; seq_cap = model seq_len.
RolloutResult rollout(const wm::Model& model, const tok::Codebook& book,
                      const std::vector<std::vector<int>>& context,
                      const std::vector<int>& actions, int horizon,
                      const std::string& variant, const RunConfig& cfg,
                      uint64_t seed, int true_creatures);

// Oracle predictor: one-hot distribution of the current frame cyclically
// shifted by (dx, dy) cells. Ignores actions and model state.
Predictor shift_oracle(GridGeometry g, int codebook_size, int dx, int dy);

// ---------------------------------------------------------------------------
// Training pipeline

struct TrainArtifacts {
  std::string dataset_path, codebook_path, checkpoint_path, metrics_path, config_path;
  uint64_t codebook_hash = 0;
  int trainable_episodes = 0;  // episodes long enough for one window
  double final_loss = 0.0;
  double final_token_error_rate = 0.0;
};

// collect -> grow codebook -> tokenize -> train -> checkpoint + metrics.
// Deterministic per cfg.seed; each stage failure rethrows with a stage tag.
// Training samples batch_size windows of exactly seq_len transitions per
// step from episodes long enough to supply one; held-out episodes are never
// sampled.
TrainArtifacts train_pipeline(const RunConfig& cfg);

// ---------------------------------------------------------------------------
// Rendering

// UTF-8 character grid for decoded tokens; out-of-range ids render as '?'.
std::string render_tokens(const tok::Codebook& book, const std::vector<int>& tokens,
                          GridGeometry g);

// Grayscale PGM (P5), each cell scaled to scale x scale pixels.
void write_pgm(const tok::Codebook& book, const std::vector<int>& tokens,
               GridGeometry g, const std::string& path, int scale = 16);

}  // namespace itc::harness
