#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "itc/harness.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace itc;

namespace {

struct GlobalArgs {
  std::string config_path;
  std::string out_dir;
  uint64_t seed = 0;
  bool seed_set = false;
  bool out_set = false;
  bool deterministic = false;

  harness::RunConfig resolve() const {
    harness::RunConfig cfg = config_path.empty() ? harness::desk_config()
                                                 : harness::load_run_config(config_path);
    if (seed_set) cfg.seed = seed;
    if (out_set) cfg.out_dir = out_dir;
    if (deterministic) cfg.sampling = decode::Sampling::kGreedy;
    cfg.validate();
    return cfg;
  }
};

void add_globals(CLI::App* cmd, GlobalArgs& g) {
  cmd->add_option("--config", g.config_path, "JSON config file; fields override the defaults")
      ->check(CLI::ExistingFile);
  cmd->add_option("--seed", g.seed, "base RNG seed")->each([&](const std::string&) {
    g.seed_set = true;
  });
  cmd->add_option("--out", g.out_dir, "output directory")->each([&](const std::string&) {
    g.out_set = true;
  });
  cmd->add_flag("--deterministic", g.deterministic,
                "force greedy sampling so repeated runs agree exactly");
}

json report_to_json(const harness::EvalReport& r) {
  return json{{"variant", r.variant},
              {"transitions", r.transitions},
              {"with_creature_transitions", r.with_creature_transitions},
              {"overall_accuracy", r.overall_accuracy},
              {"with_creature_accuracy", r.with_creature_accuracy},
              {"without_creature_accuracy", r.without_creature_accuracy},
              {"per_token_error_rate", r.per_token_error_rate},
              {"duplication", r.duplication},
              {"disappearance", r.disappearance},
              {"rollout_length", r.rollout_length}};
}

struct LoadedRun {
  wm::Model model;
  tok::Codebook book;
  data::Dataset ds;
};

LoadedRun load_run(const std::string& checkpoint, const std::string& codebook,
                   const std::string& dataset) {
  LoadedRun run{wm::load_checkpoint(checkpoint), tok::load_codebook(codebook),
                data::load_dataset(dataset)};
  return run;
}

const harness::EpisodeTokens& pick_episode(const std::vector<harness::EpisodeTokens>& eps,
                                           int requested, int min_transitions) {
  if (requested >= 0) {
    for (const auto& ep : eps) {
      if (ep.episode == requested) {
        if (static_cast<int>(ep.actions.size()) < min_transitions) {
          throw ConfigError("episode " + std::to_string(requested) + " has only " +
                            std::to_string(ep.actions.size()) + " transitions, need " +
                            std::to_string(min_transitions));
        }
        return ep;
      }
    }
    throw ConfigError("episode " + std::to_string(requested) + " not in the dataset");
  }
  for (const auto& ep : eps) {
    if (static_cast<int>(ep.actions.size()) >= min_transitions) return ep;
  }
  throw ConfigError("no episode has " + std::to_string(min_transitions) + " transitions");
}

int run_gen_data(const GlobalArgs& g) {
  const harness::RunConfig cfg = g.resolve();
  fs::create_directories(cfg.out_dir);
  const auto episodes = gw::collect(cfg.env, cfg.episodes, cfg.seed);
  tok::Codebook book;
  book.shape = tok::PatchShape{1, 1, gw::kAlphabetSize};
  book.tau = cfg.tokenizer_tau;
  book.k_max = cfg.codebook_capacity;
  const data::Dataset ds =
      data::tokenize_episodes(episodes, book, /*grow=*/true, cfg.geometry(), cfg.seed);
  const std::string dataset_path = (fs::path(cfg.out_dir) / "dataset.jsonl").string();
  const std::string codebook_path = (fs::path(cfg.out_dir) / "codebook.bin").string();
  data::save_dataset(ds, dataset_path);
  tok::save_codebook(book, codebook_path);
  harness::save_run_config(cfg, (fs::path(cfg.out_dir) / "config.json").string());
  std::cout << json{{"dataset", dataset_path},
                    {"codebook", codebook_path},
                    {"episodes", cfg.episodes},
                    {"transitions", ds.transitions.size()},
                    {"codebook_size", book.size()},
                    {"codebook_hash", ds.header.codebook_hash}}
                   .dump()
            << '\n';
  return 0;
}

int run_train(const GlobalArgs& g) {
  const harness::RunConfig cfg = g.resolve();
  const harness::TrainArtifacts art = harness::train_pipeline(cfg);
  std::cout << json{{"dataset", art.dataset_path},
                    {"codebook", art.codebook_path},
                    {"checkpoint", art.checkpoint_path},
                    {"metrics", art.metrics_path},
                    {"config", art.config_path},
                    {"codebook_hash", art.codebook_hash},
                    {"trainable_episodes", art.trainable_episodes},
                    {"final_loss", art.final_loss},
                    {"final_token_error_rate", art.final_token_error_rate}}
                   .dump()
            << '\n';
  return 0;
}

int run_eval(const GlobalArgs& g, const std::string& checkpoint, const std::string& codebook,
             const std::string& dataset, std::vector<std::string> variants) {
  const harness::RunConfig cfg = g.resolve();
  if (variants.empty()) variants = {harness::kVariantBaseline, harness::kVariantItc};
  const LoadedRun run = load_run(checkpoint, codebook, dataset);
  const auto results = harness::eval_accuracy(run.model, run.book, run.ds, variants, cfg, cfg.seed);
  fs::create_directories(cfg.out_dir);
  json out = json::array();
  for (const auto& res : results) {
    const std::string path =
        (fs::path(cfg.out_dir) / ("eval_" + res.report.variant + ".json")).string();
    harness::save_eval_report(res.report, path);
    out.push_back(report_to_json(res.report));
  }
  std::cout << out.dump() << '\n';
  return 0;
}

int run_rollout(const GlobalArgs& g, const std::string& checkpoint, const std::string& codebook,
                const std::string& dataset, int episode, int context, int horizon,
                const std::string& variant, bool pgm) {
  const harness::RunConfig cfg = g.resolve();
  const LoadedRun run = load_run(checkpoint, codebook, dataset);
  if (context < 1) throw ConfigError("rollout: context must be >= 1");
  const auto eps = harness::group_episodes(run.ds);
  const auto& ep = pick_episode(eps, episode, context + horizon - 1);
  const std::vector<std::vector<int>> ctx(ep.frames.begin(), ep.frames.begin() + context);
  const std::vector<int> acts(ep.actions.begin(),
                              ep.actions.begin() + context + horizon - 1);
  const int creatures = harness::count_creatures(run.book, ep.frames[0]);
  const auto res = harness::rollout(run.model, run.book, ctx, acts, horizon, variant, cfg,
                                    cfg.seed, creatures);
  const GridGeometry grid = cfg.geometry();
  for (size_t i = 0; i < res.frames.size(); ++i) {
    std::cout << (i < static_cast<size_t>(context) ? "context" : "imagined") << " frame " << i
              << "\n"
              << harness::render_tokens(run.book, res.frames[i], grid) << '\n';
  }
  fs::create_directories(cfg.out_dir);
  if (pgm) {
    for (size_t i = 0; i < res.frames.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof(name), "rollout_%03zu.pgm", i);
      harness::write_pgm(run.book, res.frames[i], grid,
                         (fs::path(cfg.out_dir) / name).string());
    }
  }
  const json summary{{"variant", res.variant},
                     {"episode", ep.episode},
                     {"context", context},
                     {"rollout_length", horizon},
                     {"true_creatures", creatures},
                     {"duplication", res.duplication},
                     {"disappearance", res.disappearance}};
  std::ofstream out((fs::path(cfg.out_dir) / "rollout.json").string());
  if (!out) throw IoError("cannot write rollout.json");
  out << summary.dump(2) << '\n';
  std::cout << summary.dump() << '\n';
  return 0;
}

int run_decode(const GlobalArgs& g, const std::string& checkpoint, const std::string& codebook,
               const std::string& dataset, int episode, int t) {
  const harness::RunConfig cfg = g.resolve();
  const LoadedRun run = load_run(checkpoint, codebook, dataset);
  const auto eps = harness::group_episodes(run.ds);
  const auto& ep = pick_episode(eps, episode, t + 1);
  const GridGeometry grid{run.model.cfg.grid_height, run.model.cfg.grid_width};

  // Rebuild the same conditioning the evaluator uses: fresh cache at the
  // enclosing seq_len window, then stream up to t.
  wm::KvCache cache = wm::make_cache(run.model);
  wm::StepOutput step;
  for (int i = t - t % run.model.cfg.seq_len; i <= t; ++i) {
    step = wm::forward_step(run.model, cache, ep.frames[i], ep.actions[i]);
  }
  PredictionGrid pred;
  pred.codebook_size = step.obs_logits.cols;
  pred.geometry = grid;
  pred.probs.assign(step.obs_logits.data.begin(), step.obs_logits.data.end());
  for (int j = 0; j < grid.size(); ++j) {
    double mx = pred.row(j)[0];
    for (int k = 1; k < pred.codebook_size; ++k) mx = std::max(mx, pred.row(j)[k]);
    double sum = 0.0;
    for (int k = 0; k < pred.codebook_size; ++k) {
      pred.row(j)[k] = std::exp(pred.row(j)[k] - mx);
      sum += pred.row(j)[k];
    }
    for (int k = 0; k < pred.codebook_size; ++k) pred.row(j)[k] /= sum;
  }

  std::cout << "previous frame (episode " << ep.episode << ", t=" << t << ")\n"
            << harness::render_tokens(run.book, ep.frames[t], grid) << '\n'
            << "true next frame\n"
            << harness::render_tokens(run.book, ep.frames[t + 1], grid) << '\n';
  json summary = json::array();
  for (const char* variant : {harness::kVariantBaseline, harness::kVariantItc}) {
    decode::DecodeConfig dcfg = harness::make_decode_config(cfg, grid, variant, cfg.seed);
    decode::DecodeTrace trace;
    const FrameTokens prev{ep.frames[t], grid};
    const auto decoded = decode::decode_next_frame(pred, prev, dcfg, &trace);
    int errors = 0, copied = 0;
    for (int j = 0; j < grid.size(); ++j) {
      errors += decoded.tokens[j] != ep.frames[t + 1][j] ? 1 : 0;
      copied += trace.copy_source[j] >= 0 ? 1 : 0;
    }
    std::cout << variant << " decode (" << errors << " token errors, " << copied
              << " copied positions)\n"
              << harness::render_tokens(run.book, decoded.tokens, grid) << '\n';
    summary.push_back(json{{"variant", variant},
                           {"token_errors", errors},
                           {"copied_positions", copied},
                           {"exact", errors == 0}});
  }
  std::cout << summary.dump() << '\n';
  return 0;
}

int run_sinkhorn_bench(const GlobalArgs& g, int side, int iterations, double epsilon,
                       int trials) {
  const harness::RunConfig cfg = g.resolve();
  if (side < 1 || trials < 1) throw ConfigError("sinkhorn-bench: side and trials must be >= 1");
  SplitMixRng rng(cfg.seed, 0x62656e63ull);
  double max_row_dev = 0.0, max_col_dev = 0.0;
  const auto t0 = std::chrono::steady_clock::now();
  for (int trial = 0; trial < trials; ++trial) {
    Matrix cost(side, side);
    for (double& v : cost.data) v = rng.next_double();
    const Matrix plan = ot::sinkhorn(cost, epsilon, iterations);
    for (int i = 0; i < side; ++i) {
      double s = 0.0;
      for (int j = 0; j < side; ++j) s += plan.at(i, j);
      max_row_dev = std::max(max_row_dev, std::abs(s - 1.0 / side));
    }
    for (int j = 0; j < side; ++j) {
      double s = 0.0;
      for (int i = 0; i < side; ++i) s += plan.at(i, j);
      max_col_dev = std::max(max_col_dev, std::abs(s - 1.0 / side));
    }
  }
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << json{{"side", side},
                    {"iterations", iterations},
                    {"epsilon", epsilon},
                    {"trials", trials},
                    {"max_row_marginal_deviation", max_row_dev},
                    {"max_col_marginal_deviation", max_col_dev},
                    {"seconds", seconds}}
                   .dump()
            << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Token-grid world model with transport-based frame decoding"};
  app.require_subcommand(1);
  GlobalArgs g;

  auto* gen = app.add_subcommand("gen-data", "collect episodes and tokenize them");
  add_globals(gen, g);

  auto* train = app.add_subcommand("train-wm", "run the full data + training pipeline");
  add_globals(train, g);

  std::string checkpoint, codebook, dataset;
  std::vector<std::string> variants;
  auto* eval = app.add_subcommand("eval-accuracy", "held-out next-frame accuracy per variant");
  add_globals(eval, g);
  eval->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  eval->add_option("--codebook", codebook)->required()->check(CLI::ExistingFile);
  eval->add_option("--dataset", dataset)->required()->check(CLI::ExistingFile);
  eval->add_option("--variant", variants, "decoder variants (default: both)");

  int episode = -1, context = 2, horizon = 10, tstep = 0;
  bool pgm = false;
  std::string variant = harness::kVariantItc;
  auto* roll = app.add_subcommand("rollout", "autoregressive imagination from a dataset episode");
  add_globals(roll, g);
  roll->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  roll->add_option("--codebook", codebook)->required()->check(CLI::ExistingFile);
  roll->add_option("--dataset", dataset)->required()->check(CLI::ExistingFile);
  roll->add_option("--episode", episode, "episode id (default: first long enough)");
  roll->add_option("--context", context, "observed frames before imagination");
  roll->add_option("--horizon", horizon, "imagined frames");
  roll->add_option("--variant", variant, "decoder variant");
  roll->add_flag("--pgm", pgm, "also write one PGM image per frame");

  auto* dec = app.add_subcommand("decode", "compare decoders on one dataset transition");
  add_globals(dec, g);
  dec->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  dec->add_option("--codebook", codebook)->required()->check(CLI::ExistingFile);
  dec->add_option("--dataset", dataset)->required()->check(CLI::ExistingFile);
  dec->add_option("--episode", episode, "episode id (default: first long enough)");
  dec->add_option("--t", tstep, "transition index within the episode");

  int side = 20, iterations = 200, trials = 100;
  double epsilon = 1e-2;
  auto* bench = app.add_subcommand("sinkhorn-bench", "time the transport solver");
  add_globals(bench, g);
  bench->add_option("--side", side, "cost matrix side");
  bench->add_option("--iterations", iterations, "solver iterations");
  bench->add_option("--epsilon", epsilon, "entropic regularization");
  bench->add_option("--trials", trials, "number of random matrices");

  try {
    app.parse(argc, argv);
    if (gen->parsed()) return run_gen_data(g);
    if (train->parsed()) return run_train(g);
    if (eval->parsed()) return run_eval(g, checkpoint, codebook, dataset, variants);
    if (roll->parsed())
      return run_rollout(g, checkpoint, codebook, dataset, episode, context, horizon, variant,
                         pgm);
    if (dec->parsed()) return run_decode(g, checkpoint, codebook, dataset, episode, tstep);
    if (bench->parsed()) return run_sinkhorn_bench(g, side, iterations, epsilon, trials);
    return 2;
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
