#include "itc/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>

#include "json.hpp"

namespace itc::harness {

using nlohmann::json;

namespace {

// Rethrows any failure inside fn() with a stage tag, preserving the error
// type so the CLI exit-code mapping survives.
template <typename F>
auto run_stage(const char* stage, F&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string(stage) + ": " + e.what());
  } catch (const NumericalError& e) {
    throw NumericalError(std::string(stage) + ": " + e.what());
  } catch (const IoError& e) {
    throw IoError(std::string(stage) + ": " + e.what());
  } catch (const std::exception& e) {
    throw IoError(std::string(stage) + ": " + e.what());
  }
}

void softmax_into(const double* logits, int k, double* out) {
  double mx = logits[0];
  for (int i = 1; i < k; ++i) mx = std::max(mx, logits[i]);
  double sum = 0.0;
  for (int i = 0; i < k; ++i) {
    out[i] = std::exp(logits[i] - mx);
    sum += out[i];
  }
  for (int i = 0; i < k; ++i) out[i] /= sum;
}

// Symbol of a codebook entry by its strongest channel; -1 for ids outside
// the book or non-symbol patch shapes.
int cell_of_token(const tok::Codebook& book, int token) {
  if (token < 0 || token >= book.size()) return -1;
  if (book.shape.size() != gw::kAlphabetSize) return -1;
  const float* code = book.code(token);
  int best = 0;
  for (int c = 1; c < gw::kAlphabetSize; ++c) {
    if (code[c] > code[best]) best = c;
  }
  return best;
}

PredictionGrid grid_from_logits(const Matrix& logits, GridGeometry g) {
  PredictionGrid grid;
  grid.codebook_size = logits.cols;
  grid.geometry = g;
  grid.probs.assign(static_cast<size_t>(logits.rows) * logits.cols, 0.0);
  for (int j = 0; j < logits.rows; ++j) {
    softmax_into(logits.row(j), logits.cols, grid.row(j));
  }
  return grid;
}

uint64_t transition_seed(uint64_t seed, int episode, int t) {
  return SplitMixRng(seed, 0x65766121ull)
      .substream(static_cast<uint64_t>(episode))
      .substream(static_cast<uint64_t>(t))
      .next_u64();
}

json env_to_json(const gw::GridworldConfig& c) {
  return json{{"height", c.height},
              {"width", c.width},
              {"max_creatures", c.max_creatures},
              {"creature_prob", c.creature_prob},
              {"max_steps", c.max_steps}};
}

json wm_to_json(const wm::WmConfig& c) {
  return json{{"num_blocks", c.num_blocks},
              {"num_heads", c.num_heads},
              {"embed_dim", c.embed_dim},
              {"mlp_dim", c.mlp_dim},
              {"dropout_rate", c.dropout_rate},
              {"seq_len", c.seq_len},
              {"grid_height", c.grid_height},
              {"grid_width", c.grid_width},
              {"codebook_size", c.codebook_size},
              {"num_actions", c.num_actions},
              {"learning_rate", c.learning_rate},
              {"grad_clip_norm", c.grad_clip_norm},
              {"rope_base", c.rope_base}};
}

json ot_to_json(const ot::OtConfig& c) {
  return json{{"c_d", c.c_d},
              {"c_w", c.c_w},
              {"cap", c.cap},
              {"epsilon", c.epsilon},
              {"iterations", c.iterations}};
}

json bin_to_json(const assign::BinarizeConfig& c) {
  return json{{"v", c.v}, {"max_rounds", c.max_rounds}};
}

// Applies every key of `j` onto the target object via the setter map;
// unknown keys are configuration errors so typos never silently fall back
// to a default.
void apply_keys(const json& j, const char* scope,
                const std::map<std::string, std::function<void(const json&)>>& setters) {
  if (!j.is_object()) {
    throw ConfigError(std::string("config: ") + scope + " must be a JSON object");
  }
  for (const auto& item : j.items()) {
    auto it = setters.find(item.key());
    if (it == setters.end()) {
      throw ConfigError(std::string("config: unknown key '") + item.key() + "' in " + scope);
    }
    it->second(item.value());
  }
}

void env_from_json(const json& j, gw::GridworldConfig& c) {
  apply_keys(j, "env",
             {{"height", [&](const json& v) { c.height = v.get<int>(); }},
              {"width", [&](const json& v) { c.width = v.get<int>(); }},
              {"max_creatures", [&](const json& v) { c.max_creatures = v.get<int>(); }},
              {"creature_prob", [&](const json& v) { c.creature_prob = v.get<double>(); }},
              {"max_steps", [&](const json& v) { c.max_steps = v.get<int>(); }}});
}

void wm_from_json(const json& j, wm::WmConfig& c) {
  apply_keys(j, "wm",
             {{"num_blocks", [&](const json& v) { c.num_blocks = v.get<int>(); }},
              {"num_heads", [&](const json& v) { c.num_heads = v.get<int>(); }},
              {"embed_dim", [&](const json& v) { c.embed_dim = v.get<int>(); }},
              {"mlp_dim", [&](const json& v) { c.mlp_dim = v.get<int>(); }},
              {"dropout_rate", [&](const json& v) { c.dropout_rate = v.get<double>(); }},
              {"seq_len", [&](const json& v) { c.seq_len = v.get<int>(); }},
              {"grid_height", [&](const json& v) { c.grid_height = v.get<int>(); }},
              {"grid_width", [&](const json& v) { c.grid_width = v.get<int>(); }},
              {"codebook_size", [&](const json& v) { c.codebook_size = v.get<int>(); }},
              {"num_actions", [&](const json& v) { c.num_actions = v.get<int>(); }},
              {"learning_rate", [&](const json& v) { c.learning_rate = v.get<double>(); }},
              {"grad_clip_norm", [&](const json& v) { c.grad_clip_norm = v.get<double>(); }},
              {"rope_base", [&](const json& v) { c.rope_base = v.get<double>(); }}});
}

void ot_from_json(const json& j, ot::OtConfig& c) {
  apply_keys(j, "ot",
             {{"c_d", [&](const json& v) { c.c_d = v.get<double>(); }},
              {"c_w", [&](const json& v) { c.c_w = v.get<double>(); }},
              {"cap", [&](const json& v) { c.cap = v.get<double>(); }},
              {"epsilon", [&](const json& v) { c.epsilon = v.get<double>(); }},
              {"iterations", [&](const json& v) { c.iterations = v.get<int>(); }}});
}

void bin_from_json(const json& j, assign::BinarizeConfig& c) {
  apply_keys(j, "bin",
             {{"v", [&](const json& v) { c.v = v.get<double>(); }},
              {"max_rounds", [&](const json& v) { c.max_rounds = v.get<int>(); }}});
}

decode::Sampling sampling_from_string(const std::string& s) {
  if (s == "greedy") return decode::Sampling::kGreedy;
  if (s == "categorical") return decode::Sampling::kCategorical;
  throw ConfigError("config: sampling must be 'greedy' or 'categorical', got '" + s + "'");
}

std::string sampling_to_string(decode::Sampling s) {
  return s == decode::Sampling::kGreedy ? "greedy" : "categorical";
}

}  // namespace

void RunConfig::validate() const {
  env.validate();
  wm.validate();
  ot.validate();
  if (wm.grid_height != env.height || wm.grid_width != env.width) {
    throw ConfigError("RunConfig: world-model grid must match the environment grid");
  }
  if (wm.num_actions != gw::kNumActions) {
    throw ConfigError("RunConfig: world model must cover all environment actions");
  }
  if (codebook_capacity < gw::kAlphabetSize) {
    throw ConfigError("RunConfig: codebook capacity below the symbol alphabet");
  }
  if (codebook_capacity > wm.codebook_size) {
    throw ConfigError("RunConfig: codebook capacity exceeds the observation head size");
  }
  if (tokenizer_tau <= 0.0) throw ConfigError("RunConfig: tokenizer tau must be > 0");
  if (episodes < 1) throw ConfigError("RunConfig: episodes must be >= 1");
  if (train_steps < 0) throw ConfigError("RunConfig: train_steps must be >= 0");
  if (batch_size < 1) throw ConfigError("RunConfig: batch_size must be >= 1");
  if (holdout_modulus < 2) throw ConfigError("RunConfig: holdout_modulus must be >= 2");
  if (out_dir.empty()) throw ConfigError("RunConfig: out_dir must be set");
}

RunConfig desk_config() {
  RunConfig cfg;
  cfg.wm.num_blocks = 2;
  cfg.wm.num_heads = 4;
  cfg.wm.embed_dim = 64;
  cfg.wm.mlp_dim = 256;
  cfg.wm.dropout_rate = 0.0;
  cfg.wm.seq_len = 12;
  cfg.wm.grid_height = cfg.env.height;
  cfg.wm.grid_width = cfg.env.width;
  cfg.wm.codebook_size = cfg.codebook_capacity;
  cfg.wm.num_actions = gw::kNumActions;
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config: cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config: malformed JSON in " + path + ": " + e.what());
  }
  RunConfig cfg = desk_config();
  try {
    apply_keys(
        j, "config",
        {{"env", [&](const json& v) { env_from_json(v, cfg.env); }},
         {"wm", [&](const json& v) { wm_from_json(v, cfg.wm); }},
         {"ot", [&](const json& v) { ot_from_json(v, cfg.ot); }},
         {"bin", [&](const json& v) { bin_from_json(v, cfg.bin); }},
         {"tokenizer_tau", [&](const json& v) { cfg.tokenizer_tau = v.get<double>(); }},
         {"codebook_capacity", [&](const json& v) { cfg.codebook_capacity = v.get<int>(); }},
         {"episodes", [&](const json& v) { cfg.episodes = v.get<int>(); }},
         {"train_steps", [&](const json& v) { cfg.train_steps = v.get<int>(); }},
         {"batch_size", [&](const json& v) { cfg.batch_size = v.get<int>(); }},
         {"holdout_modulus", [&](const json& v) { cfg.holdout_modulus = v.get<int>(); }},
         {"sampling",
          [&](const json& v) { cfg.sampling = sampling_from_string(v.get<std::string>()); }},
         {"seed", [&](const json& v) { cfg.seed = v.get<uint64_t>(); }},
         {"out_dir", [&](const json& v) { cfg.out_dir = v.get<std::string>(); }}});
  } catch (const json::exception& e) {
    throw ConfigError("config: bad value type in " + path + ": " + e.what());
  }
  cfg.validate();
  return cfg;
}

void save_run_config(const RunConfig& cfg, const std::string& path) {
  json j{{"env", env_to_json(cfg.env)},
         {"wm", wm_to_json(cfg.wm)},
         {"ot", ot_to_json(cfg.ot)},
         {"bin", bin_to_json(cfg.bin)},
         {"tokenizer_tau", cfg.tokenizer_tau},
         {"codebook_capacity", cfg.codebook_capacity},
         {"episodes", cfg.episodes},
         {"train_steps", cfg.train_steps},
         {"batch_size", cfg.batch_size},
         {"holdout_modulus", cfg.holdout_modulus},
         {"sampling", sampling_to_string(cfg.sampling)},
         {"seed", cfg.seed},
         {"out_dir", cfg.out_dir}};
  std::ofstream out(path);
  if (!out) throw IoError("config: cannot write " + path);
  out << j.dump(2) << '\n';
}

bool is_held_out(int episode, int holdout_modulus) {
  return episode % holdout_modulus == 0;
}

std::vector<EpisodeTokens> group_episodes(const data::Dataset& ds) {
  std::vector<EpisodeTokens> out;
  for (const auto& tr : ds.transitions) {
    if (out.empty() || out.back().episode != tr.episode) {
      if (tr.t != 0) {
        throw ConfigError("group_episodes: episode does not start at t = 0");
      }
      EpisodeTokens ep;
      ep.episode = tr.episode;
      ep.has_creature = tr.has_creature != 0;
      ep.frames.push_back(tr.s_prev);
      out.push_back(std::move(ep));
    }
    EpisodeTokens& ep = out.back();
    if (tr.t != static_cast<int>(ep.actions.size())) {
      throw ConfigError("group_episodes: transitions out of order within an episode");
    }
    if (tr.s_prev != ep.frames.back()) {
      throw ConfigError("group_episodes: transition does not chain from the previous frame");
    }
    ep.frames.push_back(tr.s_next);
    ep.actions.push_back(tr.action);
    ep.rewards.push_back(tr.reward);
    ep.dones.push_back(tr.done);
  }
  return out;
}

decode::DecodeConfig make_decode_config(const RunConfig& cfg, GridGeometry g,
                                        const std::string& variant, uint64_t rng_seed) {
  decode::DecodeConfig dcfg;
  dcfg.ot = cfg.ot;
  dcfg.bin = cfg.bin;
  dcfg.sampling = cfg.sampling;
  dcfg.rng_seed = rng_seed;
  if (variant == kVariantItc) {
    dcfg.ot_region = decode::interior_region(g);
  } else if (variant == kVariantBaseline) {
    dcfg.ot_region.assign(static_cast<size_t>(g.size()), 0);
  } else {
    throw ConfigError("unknown decoder variant '" + variant + "' (expected '" +
                      kVariantBaseline + "' or '" + kVariantItc + "')");
  }
  return dcfg;
}

int count_creatures(const tok::Codebook& book, const std::vector<int>& tokens) {
  int n = 0;
  for (int t : tokens) {
    if (cell_of_token(book, t) == static_cast<int>(gw::Cell::kCreature)) ++n;
  }
  return n;
}

PredictionGrid one_hot_grid(GridGeometry g, int codebook_size, const std::vector<int>& tokens) {
  if (static_cast<int>(tokens.size()) != g.size()) {
    throw ConfigError("one_hot_grid: token count does not match the grid");
  }
  PredictionGrid grid;
  grid.codebook_size = codebook_size;
  grid.geometry = g;
  grid.probs.assign(static_cast<size_t>(g.size()) * codebook_size, 0.0);
  for (int j = 0; j < g.size(); ++j) {
    if (tokens[j] < 0 || tokens[j] >= codebook_size) {
      throw ConfigError("one_hot_grid: token id out of range");
    }
    grid.row(j)[tokens[j]] = 1.0;
  }
  return grid;
}

std::vector<EvalResult> eval_accuracy_with(const EvalPredictor& predict,
                                           const tok::Codebook& book, const data::Dataset& ds,
                                           const std::vector<std::string>& variants,
                                           const RunConfig& cfg, uint64_t seed) {
  if (variants.empty()) throw ConfigError("eval_accuracy: no decoder variant requested");
  if (tok::codebook_hash(book) != ds.header.codebook_hash) {
    throw ConfigError("eval_accuracy: dataset was tokenized with a different codebook");
  }
  const GridGeometry g{ds.header.grid_height, ds.header.grid_width};
  const int L = g.size();

  struct Acc {
    int64_t n = 0, exact = 0, wc_n = 0, wc_exact = 0, errors = 0, dup = 0, dis = 0;
  };
  std::vector<Acc> acc(variants.size());
  std::vector<EvalResult> results(variants.size());
  std::vector<decode::DecodeConfig> dcfg;
  dcfg.reserve(variants.size());
  for (const auto& v : variants) dcfg.push_back(make_decode_config(cfg, g, v, 0));

  for (const auto& ep : group_episodes(ds)) {
    if (!is_held_out(ep.episode, cfg.holdout_modulus)) continue;
    const int T = static_cast<int>(ep.actions.size());
    for (int t = 0; t < T; ++t) {
      const PredictionGrid grid = predict(ep, t);
      const FrameTokens prev{ep.frames[t], g};
      const std::vector<int>& truth = ep.frames[t + 1];
      const int true_c = count_creatures(book, truth);
      const uint64_t tseed = transition_seed(seed, ep.episode, t);
      for (size_t vi = 0; vi < variants.size(); ++vi) {
        dcfg[vi].rng_seed = tseed;
        const std::vector<int> pred = decode::decode_next_frame(grid, prev, dcfg[vi]).tokens;
        int errors = 0;
        for (int j = 0; j < L; ++j) errors += pred[j] != truth[j] ? 1 : 0;
        const int pred_c = count_creatures(book, pred);
        EvalOutcome oc;
        oc.episode = ep.episode;
        oc.t = t;
        oc.exact = errors == 0 ? 1 : 0;
        oc.token_errors = errors;
        oc.has_creature = ep.has_creature ? 1 : 0;
        oc.pred_creatures = pred_c;
        oc.true_creatures = true_c;
        results[vi].outcomes.push_back(oc);
        Acc& a = acc[vi];
        a.n += 1;
        a.exact += oc.exact;
        a.errors += errors;
        if (ep.has_creature) {
          a.wc_n += 1;
          a.wc_exact += oc.exact;
        }
        if (pred_c > true_c) a.dup += 1;
        if (pred_c < true_c) a.dis += 1;
      }
    }
  }

  for (size_t vi = 0; vi < variants.size(); ++vi) {
    const Acc& a = acc[vi];
    EvalReport& r = results[vi].report;
    r.variant = variants[vi];
    r.transitions = a.n;
    r.with_creature_transitions = a.wc_n;
    r.overall_accuracy = a.n ? static_cast<double>(a.exact) / static_cast<double>(a.n) : 0.0;
    r.with_creature_accuracy =
        a.wc_n ? static_cast<double>(a.wc_exact) / static_cast<double>(a.wc_n) : 0.0;
    const int64_t nc_n = a.n - a.wc_n;
    r.without_creature_accuracy =
        nc_n ? static_cast<double>(a.exact - a.wc_exact) / static_cast<double>(nc_n) : 0.0;
    r.per_token_error_rate =
        a.n ? static_cast<double>(a.errors) / (static_cast<double>(a.n) * L) : 0.0;
    r.duplication = a.dup;
    r.disappearance = a.dis;
    r.rollout_length = 0;
  }
  return results;
}

std::vector<EvalResult> eval_accuracy(const wm::Model& model, const tok::Codebook& book,
                                      const data::Dataset& ds,
                                      const std::vector<std::string>& variants,
                                      const RunConfig& cfg, uint64_t seed) {
  if (model.cfg.grid_height != ds.header.grid_height ||
      model.cfg.grid_width != ds.header.grid_width) {
    throw ConfigError("eval_accuracy: model grid does not match the dataset grid");
  }
  if (book.size() > model.cfg.codebook_size) {
    throw ConfigError("eval_accuracy: codebook is larger than the observation head");
  }
  const GridGeometry g{model.cfg.grid_height, model.cfg.grid_width};
  auto cache = std::make_shared<wm::KvCache>(wm::make_cache(model));
  const wm::Model* m = &model;
  // Fresh cache at every seq_len boundary; episodes start at t = 0, so this
  // also resets between episodes.
  EvalPredictor predict = [m, cache, g](const EpisodeTokens& ep, int t) {
    if (t % m->cfg.seq_len == 0) *cache = wm::make_cache(*m);
    wm::StepOutput out = wm::forward_step(*m, *cache, ep.frames[t], ep.actions[t]);
    return grid_from_logits(out.obs_logits, g);
  };
  return eval_accuracy_with(predict, book, ds, variants, cfg, seed);
}

EvalReport recount(const std::vector<EvalOutcome>& outcomes, const std::string& variant,
                   int tokens_per_frame) {
  int64_t n = 0, exact = 0, wc_n = 0, wc_exact = 0, errors = 0, dup = 0, dis = 0;
  for (const auto& oc : outcomes) {
    n += 1;
    exact += oc.exact;
    errors += oc.token_errors;
    if (oc.has_creature) {
      wc_n += 1;
      wc_exact += oc.exact;
    }
    if (oc.pred_creatures > oc.true_creatures) dup += 1;
    if (oc.pred_creatures < oc.true_creatures) dis += 1;
  }
  EvalReport r;
  r.variant = variant;
  r.transitions = n;
  r.with_creature_transitions = wc_n;
  r.overall_accuracy = n ? static_cast<double>(exact) / static_cast<double>(n) : 0.0;
  r.with_creature_accuracy = wc_n ? static_cast<double>(wc_exact) / static_cast<double>(wc_n) : 0.0;
  const int64_t nc_n = n - wc_n;
  r.without_creature_accuracy =
      nc_n ? static_cast<double>(exact - wc_exact) / static_cast<double>(nc_n) : 0.0;
  r.per_token_error_rate =
      n ? static_cast<double>(errors) / (static_cast<double>(n) * tokens_per_frame) : 0.0;
  r.duplication = dup;
  r.disappearance = dis;
  r.rollout_length = 0;
  return r;
}

void save_eval_report(const EvalReport& report, const std::string& path) {
  json j{{"variant", report.variant},
         {"transitions", report.transitions},
         {"with_creature_transitions", report.with_creature_transitions},
         {"overall_accuracy", report.overall_accuracy},
         {"with_creature_accuracy", report.with_creature_accuracy},
         {"without_creature_accuracy", report.without_creature_accuracy},
         {"per_token_error_rate", report.per_token_error_rate},
         {"duplication", report.duplication},
         {"disappearance", report.disappearance},
         {"rollout_length", report.rollout_length}};
  std::ofstream out(path);
  if (!out) throw IoError("report: cannot write " + path);
  out << j.dump(2) << '\n';
}

EvalReport load_eval_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("report: cannot open " + path);
  json j;
  try {
    in >> j;
    EvalReport r;
    r.variant = j.at("variant").get<std::string>();
    r.transitions = j.at("transitions").get<int64_t>();
    r.with_creature_transitions = j.at("with_creature_transitions").get<int64_t>();
    r.overall_accuracy = j.at("overall_accuracy").get<double>();
    r.with_creature_accuracy = j.at("with_creature_accuracy").get<double>();
    r.without_creature_accuracy = j.at("without_creature_accuracy").get<double>();
    r.per_token_error_rate = j.at("per_token_error_rate").get<double>();
    r.duplication = j.at("duplication").get<int64_t>();
    r.disappearance = j.at("disappearance").get<int64_t>();
    r.rollout_length = j.at("rollout_length").get<int>();
    return r;
  } catch (const json::exception& e) {
    throw IoError("report: malformed " + path + ": " + e.what());
  }
}

RolloutResult rollout_with(const Predictor& predict, const tok::Codebook& book,
                           GridGeometry g, const std::vector<std::vector<int>>& context,
                           const std::vector<int>& actions, int horizon,
                           const std::string& variant, const RunConfig& cfg,
                           uint64_t seed, int true_creatures, int seq_cap) {
  if (context.empty()) throw ConfigError("rollout: at least one context frame required");
  if (horizon < 0) throw ConfigError("rollout: horizon must be >= 0");
  const int ctx = static_cast<int>(context.size());
  if (seq_cap > 0 && ctx + horizon > seq_cap) {
    throw ConfigError("rollout: context + horizon exceeds the model window");
  }
  for (const auto& f : context) {
    if (static_cast<int>(f.size()) != g.size()) {
      throw ConfigError("rollout: context frame size does not match the grid");
    }
  }
  RolloutResult res;
  res.variant = variant;
  res.frames = context;
  if (horizon == 0) {
    make_decode_config(cfg, g, variant, 0);  // still reject unknown variants
    return res;
  }
  if (static_cast<int>(actions.size()) != ctx + horizon - 1) {
    throw ConfigError("rollout: need context + horizon - 1 actions");
  }

  decode::DecodeConfig dcfg = make_decode_config(cfg, g, variant, 0);
  PredictionGrid grid;
  for (int i = 0; i < ctx; ++i) grid = predict(context[i], actions[i]);
  SplitMixRng seeds(seed, 0x726f6c6cull);
  for (int h = 0; h < horizon; ++h) {
    dcfg.rng_seed = seeds.substream(static_cast<uint64_t>(h)).next_u64();
    const FrameTokens prev{res.frames.back(), g};
    std::vector<int> next = decode::decode_next_frame(grid, prev, dcfg).tokens;
    const int c = count_creatures(book, next);
    if (c > true_creatures) res.duplication += 1;
    if (c < true_creatures) res.disappearance += 1;
    res.frames.push_back(std::move(next));
    if (h + 1 < horizon) grid = predict(res.frames.back(), actions[ctx + h]);
  }
  return res;
}

RolloutResult rollout(const wm::Model& model, const tok::Codebook& book,
                      const std::vector<std::vector<int>>& context,
                      const std::vector<int>& actions, int horizon,
                      const std::string& variant, const RunConfig& cfg,
                      uint64_t seed, int true_creatures) {
  const GridGeometry g{model.cfg.grid_height, model.cfg.grid_width};
  auto cache = std::make_shared<wm::KvCache>(wm::make_cache(model));
  const wm::Model* m = &model;
  Predictor predict = [m, cache, g](const std::vector<int>& frame, int action) {
    wm::StepOutput out = wm::forward_step(*m, *cache, frame, action);
    return grid_from_logits(out.obs_logits, g);
  };
  return rollout_with(predict, book, g, context, actions, horizon, variant, cfg, seed,
                      true_creatures, model.cfg.seq_len);
}

Predictor shift_oracle(GridGeometry g, int codebook_size, int dx, int dy) {
  return [g, codebook_size, dx, dy](const std::vector<int>& frame, int) {
    if (static_cast<int>(frame.size()) != g.size()) {
      throw ConfigError("shift_oracle: frame size does not match the grid");
    }
    std::vector<int> shifted(frame.size());
    for (int j = 0; j < g.size(); ++j) {
      const GridCoord c = g.coord_of(j);
      const int sx = ((c.x - dx) % g.width + g.width) % g.width;
      const int sy = ((c.y - dy) % g.height + g.height) % g.height;
      shifted[j] = frame[g.index_of(GridCoord{sx, sy})];
    }
    return one_hot_grid(g, codebook_size, shifted);
  };
}

TrainArtifacts train_pipeline(const RunConfig& cfg) {
  namespace fs = std::filesystem;
  run_stage("config", [&] {
    cfg.validate();
    fs::create_directories(cfg.out_dir);
    return 0;
  });
  const GridGeometry g = cfg.geometry();

  const std::vector<gw::Episode> episodes =
      run_stage("collect", [&] { return gw::collect(cfg.env, cfg.episodes, cfg.seed); });

  tok::Codebook book;
  book.shape = tok::PatchShape{1, 1, gw::kAlphabetSize};
  book.tau = cfg.tokenizer_tau;
  book.k_max = cfg.codebook_capacity;
  const data::Dataset ds = run_stage("tokenize", [&] {
    data::Dataset d = data::tokenize_episodes(episodes, book, /*grow=*/true, g, cfg.seed);
    if (book.size() > cfg.wm.codebook_size) {
      throw ConfigError("codebook grew past the observation head size");
    }
    return d;
  });

  TrainArtifacts art;
  art.dataset_path = (fs::path(cfg.out_dir) / "dataset.jsonl").string();
  art.codebook_path = (fs::path(cfg.out_dir) / "codebook.bin").string();
  art.checkpoint_path = (fs::path(cfg.out_dir) / "checkpoint.bin").string();
  art.metrics_path = (fs::path(cfg.out_dir) / "metrics.jsonl").string();
  art.config_path = (fs::path(cfg.out_dir) / "config.json").string();
  art.codebook_hash = tok::codebook_hash(book);
  run_stage("tokenize", [&] {
    data::save_dataset(ds, art.dataset_path);
    tok::save_codebook(book, art.codebook_path);
    save_run_config(cfg, art.config_path);
    return 0;
  });

  run_stage("train", [&] {
    const std::vector<EpisodeTokens> grouped = group_episodes(ds);
    std::vector<const EpisodeTokens*> trainable;
    for (const auto& ep : grouped) {
      if (is_held_out(ep.episode, cfg.holdout_modulus)) continue;
      if (static_cast<int>(ep.actions.size()) >= cfg.wm.seq_len) trainable.push_back(&ep);
    }
    if (trainable.empty()) {
      throw ConfigError("no training episode spans a full world-model window");
    }
    art.trainable_episodes = static_cast<int>(trainable.size());

    wm::Model model =
        wm::init_model(cfg.wm, SplitMixRng(cfg.seed, 0x6d6f64656cull).next_u64());
    wm::AdamState opt;
    SplitMixRng sampler(cfg.seed, 0x77696e64ull);
    SplitMixRng drop_root(cfg.seed, 0x64726f70ull);
    std::ofstream metrics(art.metrics_path);
    if (!metrics) throw IoError("cannot write " + art.metrics_path);

    const int T = cfg.wm.seq_len;
    const int L = cfg.wm.tokens_per_frame();
    for (int step = 0; step < cfg.train_steps; ++step) {
      std::vector<wm::TrainWindow> batch;
      batch.reserve(cfg.batch_size);
      for (int b = 0; b < cfg.batch_size; ++b) {
        const EpisodeTokens& ep =
            *trainable[sampler.next_below(trainable.size())];
        const int max_offset = static_cast<int>(ep.actions.size()) - T;
        const int o = static_cast<int>(sampler.next_below(max_offset + 1));
        wm::TrainWindow w;
        w.frames.reserve(static_cast<size_t>(T + 1) * L);
        for (int t = o; t <= o + T; ++t) {
          w.frames.insert(w.frames.end(), ep.frames[t].begin(), ep.frames[t].end());
        }
        w.actions.assign(ep.actions.begin() + o, ep.actions.begin() + o + T);
        w.rewards.assign(ep.rewards.begin() + o, ep.rewards.begin() + o + T);
        w.dones.assign(ep.dones.begin() + o, ep.dones.begin() + o + T);
        batch.push_back(std::move(w));
      }
      const uint64_t drop_seed = drop_root.substream(static_cast<uint64_t>(step)).next_u64();
      const wm::TrainMetrics m = wm::train_step(model, batch, opt, drop_seed);
      metrics << json{{"step", step},
                      {"loss", m.loss},
                      {"obs_loss", m.obs_loss},
                      {"reward_loss", m.reward_loss},
                      {"done_loss", m.done_loss},
                      {"grad_norm", m.grad_norm},
                      {"token_error_rate", m.token_error_rate}}
                     .dump()
              << '\n';
      art.final_loss = m.loss;
      art.final_token_error_rate = m.token_error_rate;
    }
    metrics.flush();
    if (!metrics) throw IoError("failed writing " + art.metrics_path);
    wm::save_checkpoint(model, art.checkpoint_path);
    return 0;
  });
  return art;
}

std::string render_tokens(const tok::Codebook& book, const std::vector<int>& tokens,
                          GridGeometry g) {
  static constexpr char kGlyphs[gw::kAlphabetSize] = {'.', '#', 'G', '@', 'c'};
  std::string out;
  out.reserve(static_cast<size_t>(g.size()) + g.height);
  for (int y = 0; y < g.height; ++y) {
    for (int x = 0; x < g.width; ++x) {
      const int cell = cell_of_token(book, tokens[g.index_of(GridCoord{x, y})]);
      out.push_back(cell < 0 ? '?' : kGlyphs[cell]);
    }
    out.push_back('\n');
  }
  return out;
}

void write_pgm(const tok::Codebook& book, const std::vector<int>& tokens,
               GridGeometry g, const std::string& path, int scale) {
  if (scale < 1) throw ConfigError("write_pgm: scale must be >= 1");
  static constexpr unsigned char kGray[gw::kAlphabetSize] = {255, 32, 208, 96, 160};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("pgm: cannot write " + path);
  const int w = g.width * scale, h = g.height * scale;
  out << "P5\n" << w << ' ' << h << "\n255\n";
  std::string row(static_cast<size_t>(w), '\0');
  for (int y = 0; y < g.height; ++y) {
    for (int x = 0; x < g.width; ++x) {
      const int cell = cell_of_token(book, tokens[g.index_of(GridCoord{x, y})]);
      const unsigned char v = cell < 0 ? 0 : kGray[cell];
      for (int i = 0; i < scale; ++i) row[static_cast<size_t>(x) * scale + i] = static_cast<char>(v);
    }
    for (int i = 0; i < scale; ++i) out.write(row.data(), w);
  }
  if (!out) throw IoError("pgm: failed writing " + path);
}

}  // namespace itc::harness
