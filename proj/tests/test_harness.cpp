#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "itc/errors.hpp"
#include "itc/harness.hpp"
#include "json.hpp"

using namespace itc;
namespace fs = std::filesystem;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(static_cast<bool>(in));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string temp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("itc_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

// One shared tiny training run; most cases only need its artifacts.
struct Tiny {
  harness::RunConfig cfg;
  harness::TrainArtifacts art;
  data::Dataset ds;
  tok::Codebook book;
  wm::Model model;
};

const Tiny& tiny() {
  static const Tiny t = [] {
    Tiny x;
    x.cfg = harness::desk_config();
    x.cfg.episodes = 12;
    x.cfg.train_steps = 6;
    x.cfg.batch_size = 2;
    x.cfg.seed = 5;
    x.cfg.out_dir = temp_dir("tiny");
    x.art = harness::train_pipeline(x.cfg);
    x.ds = data::load_dataset(x.art.dataset_path);
    x.book = tok::load_codebook(x.art.codebook_path);
    x.model = wm::load_checkpoint(x.art.checkpoint_path);
    return x;
  }();
  return t;
}

std::vector<int> cyclic_shift(const std::vector<int>& frame, GridGeometry g, int dx, int dy) {
  std::vector<int> out(frame.size());
  for (int j = 0; j < g.size(); ++j) {
    const GridCoord c = g.coord_of(j);
    const int sx = ((c.x - dx) % g.width + g.width) % g.width;
    const int sy = ((c.y - dy) % g.height + g.height) % g.height;
    out[j] = frame[g.index_of(GridCoord{sx, sy})];
  }
  return out;
}

bool reports_equal(const harness::EvalReport& a, const harness::EvalReport& b) {
  return a.variant == b.variant && a.transitions == b.transitions &&
         a.with_creature_transitions == b.with_creature_transitions &&
         a.overall_accuracy == b.overall_accuracy &&
         a.with_creature_accuracy == b.with_creature_accuracy &&
         a.without_creature_accuracy == b.without_creature_accuracy &&
         a.per_token_error_rate == b.per_token_error_rate &&
         a.duplication == b.duplication && a.disappearance == b.disappearance &&
         a.rollout_length == b.rollout_length;
}

bool outcomes_equal(const std::vector<harness::EvalOutcome>& a,
                    const std::vector<harness::EvalOutcome>& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i].episode != b[i].episode || a[i].t != b[i].t || a[i].exact != b[i].exact ||
        a[i].token_errors != b[i].token_errors || a[i].has_creature != b[i].has_creature ||
        a[i].pred_creatures != b[i].pred_creatures ||
        a[i].true_creatures != b[i].true_creatures) {
      return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("desk config validates and cross-field violations throw") {
  harness::RunConfig cfg = harness::desk_config();
  CHECK_NOTHROW(cfg.validate());
  CHECK(cfg.wm.grid_height == cfg.env.height);
  CHECK(cfg.wm.seq_len == 12);

  harness::RunConfig bad = cfg;
  bad.wm.grid_height = 7;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  bad = cfg;
  bad.codebook_capacity = gw::kAlphabetSize - 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  bad = cfg;
  bad.codebook_capacity = cfg.wm.codebook_size + 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  bad = cfg;
  bad.holdout_modulus = 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  bad = cfg;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("config files override desk defaults and reject unknown keys") {
  const std::string dir = temp_dir("config");
  const std::string path = dir + "/cfg.json";
  {
    std::ofstream out(path);
    out << R"({"episodes": 12, "train_steps": 7, "seed": 9,
               "wm": {"embed_dim": 32, "num_heads": 2},
               "ot": {"epsilon": 0.001},
               "sampling": "categorical",
               "out_dir": ")" << dir << R"("})";
  }
  const harness::RunConfig cfg = harness::load_run_config(path);
  CHECK(cfg.episodes == 12);
  CHECK(cfg.train_steps == 7);
  CHECK(cfg.seed == 9);
  CHECK(cfg.wm.embed_dim == 32);
  CHECK(cfg.wm.num_heads == 2);
  CHECK(cfg.ot.epsilon == 0.001);
  CHECK(cfg.sampling == decode::Sampling::kCategorical);
  // untouched fields keep their defaults
  CHECK(cfg.batch_size == harness::desk_config().batch_size);
  CHECK(cfg.ot.c_d == 0.6);
  CHECK(cfg.ot.c_w == 0.3);
  CHECK(cfg.wm.num_blocks == 2);

  {
    std::ofstream out(path);
    out << R"({"episodez": 12})";
  }
  CHECK_THROWS_AS(harness::load_run_config(path), ConfigError);
  {
    std::ofstream out(path);
    out << R"({"wm": {"bogus": 1}})";
  }
  CHECK_THROWS_AS(harness::load_run_config(path), ConfigError);
  {
    std::ofstream out(path);
    out << R"({"sampling": "argmax"})";
  }
  CHECK_THROWS_AS(harness::load_run_config(path), ConfigError);
  {
    std::ofstream out(path);
    out << "{not json";
  }
  CHECK_THROWS_AS(harness::load_run_config(path), ConfigError);
  CHECK_THROWS_AS(harness::load_run_config(dir + "/absent.json"), IoError);

  // save -> load -> save reproduces the file byte for byte
  harness::RunConfig cfg2 = harness::desk_config();
  cfg2.episodes = 33;
  cfg2.sampling = decode::Sampling::kCategorical;
  const std::string p1 = dir + "/echo1.json", p2 = dir + "/echo2.json";
  harness::save_run_config(cfg2, p1);
  harness::save_run_config(harness::load_run_config(p1), p2);
  CHECK(read_file(p1) == read_file(p2));
}

TEST_CASE("held-out split is fixed by episode index") {
  CHECK(harness::is_held_out(0, 10));
  CHECK(harness::is_held_out(10, 10));
  CHECK(harness::is_held_out(20, 10));
  for (int e = 1; e < 10; ++e) CHECK_FALSE(harness::is_held_out(e, 10));
  CHECK(harness::is_held_out(4, 4));
}

TEST_CASE("group_episodes rebuilds chained frame sequences") {
  const Tiny& tn = tiny();
  const auto eps = harness::group_episodes(tn.ds);
  REQUIRE(!eps.empty());
  size_t transitions = 0;
  for (const auto& ep : eps) {
    REQUIRE(ep.frames.size() == ep.actions.size() + 1);
    CHECK(ep.rewards.size() == ep.actions.size());
    CHECK(ep.dones.size() == ep.actions.size());
    transitions += ep.actions.size();
  }
  CHECK(transitions == tn.ds.transitions.size());
  for (const auto& tr : tn.ds.transitions) {
    const auto& ep = *std::find_if(eps.begin(), eps.end(),
                                   [&](const auto& e) { return e.episode == tr.episode; });
    CHECK(ep.frames[tr.t] == tr.s_prev);
    CHECK(ep.frames[tr.t + 1] == tr.s_next);
    CHECK(ep.has_creature == (tr.has_creature != 0));
  }

  data::Dataset broken = tn.ds;
  broken.transitions[0].t = 3;
  CHECK_THROWS_AS(harness::group_episodes(broken), ConfigError);
  broken = tn.ds;
  REQUIRE(broken.transitions.size() > 1);
  broken.transitions[1].s_prev[0] += 1;
  CHECK_THROWS_AS(harness::group_episodes(broken), ConfigError);
}

TEST_CASE("variant names select the transport region") {
  const harness::RunConfig cfg = harness::desk_config();
  const GridGeometry g = cfg.geometry();
  const auto itc_cfg = harness::make_decode_config(cfg, g, harness::kVariantItc, 11);
  CHECK(itc_cfg.ot_region == decode::interior_region(g));
  CHECK(itc_cfg.rng_seed == 11);
  const auto base_cfg = harness::make_decode_config(cfg, g, harness::kVariantBaseline, 11);
  CHECK(base_cfg.ot_region == std::vector<uint8_t>(g.size(), 0));
  CHECK(base_cfg.rng_seed == 11);
  CHECK(base_cfg.sampling == itc_cfg.sampling);
  CHECK_THROWS_AS(harness::make_decode_config(cfg, g, "fancy", 0), ConfigError);
}

TEST_CASE("ground-truth oracle predictions score perfectly under both variants") {
  const Tiny& tn = tiny();
  const GridGeometry g = tn.cfg.geometry();
  const int k = tn.model.cfg.codebook_size;
  harness::EvalPredictor oracle = [&](const harness::EpisodeTokens& ep, int t) {
    return harness::one_hot_grid(g, k, ep.frames[t + 1]);
  };
  const auto res = harness::eval_accuracy_with(
      oracle, tn.book, tn.ds, {harness::kVariantBaseline, harness::kVariantItc}, tn.cfg, 3);
  REQUIRE(res.size() == 2);
  for (const auto& r : res) {
    CHECK(r.report.transitions > 0);
    CHECK(r.report.overall_accuracy == 1.0);
    CHECK(r.report.with_creature_accuracy ==
          (r.report.with_creature_transitions ? 1.0 : 0.0));
    CHECK(r.report.per_token_error_rate == 0.0);
    CHECK(r.report.duplication == 0);
    CHECK(r.report.disappearance == 0);
    for (const auto& oc : r.outcomes) {
      CHECK(oc.exact == 1);
      CHECK(oc.pred_creatures == oc.true_creatures);
    }
  }
  CHECK(res[0].report.transitions == res[1].report.transitions);
}

TEST_CASE("evaluation only scores held-out episodes") {
  const Tiny& tn = tiny();
  const auto res = harness::eval_accuracy(tn.model, tn.book, tn.ds,
                                          {harness::kVariantBaseline}, tn.cfg, 3);
  int64_t expect = 0;
  for (const auto& tr : tn.ds.transitions) {
    if (harness::is_held_out(tr.episode, tn.cfg.holdout_modulus)) expect += 1;
  }
  REQUIRE(expect > 0);
  CHECK(res[0].report.transitions == expect);
  for (const auto& oc : res[0].outcomes) {
    CHECK(harness::is_held_out(oc.episode, tn.cfg.holdout_modulus));
  }
}

TEST_CASE("paired evaluation is deterministic and variant-independent") {
  const Tiny& tn = tiny();
  const std::vector<std::string> both{harness::kVariantBaseline, harness::kVariantItc};
  const auto a = harness::eval_accuracy(tn.model, tn.book, tn.ds, both, tn.cfg, 3);
  const auto b = harness::eval_accuracy(tn.model, tn.book, tn.ds, both, tn.cfg, 3);
  REQUIRE(a.size() == 2);
  for (size_t i = 0; i < 2; ++i) {
    CHECK(reports_equal(a[i].report, b[i].report));
    CHECK(outcomes_equal(a[i].outcomes, b[i].outcomes));
  }
  // single-variant runs reproduce their half of the paired run
  const auto base_only = harness::eval_accuracy(tn.model, tn.book, tn.ds,
                                                {harness::kVariantBaseline}, tn.cfg, 3);
  const auto itc_only =
      harness::eval_accuracy(tn.model, tn.book, tn.ds, {harness::kVariantItc}, tn.cfg, 3);
  CHECK(reports_equal(base_only[0].report, a[0].report));
  CHECK(outcomes_equal(base_only[0].outcomes, a[0].outcomes));
  CHECK(reports_equal(itc_only[0].report, a[1].report));
  CHECK(outcomes_equal(itc_only[0].outcomes, a[1].outcomes));
  CHECK(a[0].report.transitions == a[1].report.transitions);
}

TEST_CASE("independent recount reproduces the streaming report exactly") {
  const Tiny& tn = tiny();
  const auto res = harness::eval_accuracy(
      tn.model, tn.book, tn.ds, {harness::kVariantBaseline, harness::kVariantItc}, tn.cfg, 3);
  const int L = tn.cfg.geometry().size();
  for (const auto& r : res) {
    const harness::EvalReport rc = harness::recount(r.outcomes, r.report.variant, L);
    CHECK(reports_equal(rc, r.report));
    CHECK(r.report.overall_accuracy >= 0.0);
    CHECK(r.report.overall_accuracy <= 1.0);
    CHECK(r.report.per_token_error_rate >= 0.0);
    CHECK(r.report.per_token_error_rate <= 1.0);
  }
}

TEST_CASE("codebook or grid mismatch is rejected") {
  const Tiny& tn = tiny();
  tok::Codebook other = tn.book;
  const float patch[gw::kAlphabetSize] = {2.0f, 0.0f, 0.0f, 0.0f, 0.0f};
  REQUIRE(tok::grow_codebook(other, patch));
  CHECK_THROWS_AS(harness::eval_accuracy(tn.model, other, tn.ds,
                                         {harness::kVariantItc}, tn.cfg, 3),
                  ConfigError);

  wm::WmConfig small = tn.cfg.wm;
  small.grid_height = 5;
  small.grid_width = 5;
  const wm::Model other_model = wm::init_model(small, 1);
  CHECK_THROWS_AS(harness::eval_accuracy(other_model, tn.book, tn.ds,
                                         {harness::kVariantItc}, tn.cfg, 3),
                  ConfigError);
}

TEST_CASE("pipeline artifacts are deterministic with monotone metrics") {
  const Tiny& tn = tiny();
  CHECK(fs::exists(tn.art.dataset_path));
  CHECK(fs::exists(tn.art.codebook_path));
  CHECK(fs::exists(tn.art.checkpoint_path));
  CHECK(fs::exists(tn.art.metrics_path));
  CHECK(fs::exists(tn.art.config_path));
  CHECK(tn.art.trainable_episodes > 0);
  CHECK(tn.art.codebook_hash == tok::codebook_hash(tn.book));
  CHECK(tn.art.codebook_hash == tn.ds.header.codebook_hash);
  CHECK(tn.model.cfg.embed_dim == tn.cfg.wm.embed_dim);
  CHECK(tn.book.size() == gw::kAlphabetSize);

  std::ifstream metrics(tn.art.metrics_path);
  std::string line;
  int step = 0;
  while (std::getline(metrics, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("step").get<int>() == step);
    CHECK(std::isfinite(j.at("loss").get<double>()));
    CHECK(std::isfinite(j.at("grad_norm").get<double>()));
    CHECK(j.at("token_error_rate").get<double>() >= 0.0);
    step += 1;
  }
  CHECK(step == tn.cfg.train_steps);

  harness::RunConfig rerun = tn.cfg;
  rerun.out_dir = temp_dir("tiny_rerun");
  const auto art2 = harness::train_pipeline(rerun);
  CHECK(read_file(art2.checkpoint_path) == read_file(tn.art.checkpoint_path));
  CHECK(read_file(art2.dataset_path) == read_file(tn.art.dataset_path));
  CHECK(read_file(art2.codebook_path) == read_file(tn.art.codebook_path));
  CHECK(read_file(art2.metrics_path) == read_file(tn.art.metrics_path));

  harness::RunConfig reseeded = tn.cfg;
  reseeded.out_dir = temp_dir("tiny_reseed");
  reseeded.seed = tn.cfg.seed + 1;
  const auto art3 = harness::train_pipeline(reseeded);
  CHECK(read_file(art3.checkpoint_path) != read_file(tn.art.checkpoint_path));
}

TEST_CASE("rollout validates horizon, actions, and window bounds") {
  const Tiny& tn = tiny();
  const GridGeometry g = tn.cfg.geometry();
  const auto eps = harness::group_episodes(tn.ds);
  const std::vector<std::vector<int>> context{eps[0].frames[0]};

  const auto r0 = harness::rollout(tn.model, tn.book, context, {}, 0,
                                   harness::kVariantItc, tn.cfg, 1, 1);
  CHECK(r0.frames == context);
  CHECK(r0.duplication == 0);
  CHECK(r0.disappearance == 0);

  CHECK_THROWS_AS(harness::rollout(tn.model, tn.book, context, {}, 0, "fancy", tn.cfg, 1, 1),
                  ConfigError);
  CHECK_THROWS_AS(harness::rollout(tn.model, tn.book, {}, {}, 0, harness::kVariantItc,
                                   tn.cfg, 1, 1),
                  ConfigError);
  // horizon 3 with one context frame needs exactly 3 actions
  CHECK_THROWS_AS(harness::rollout(tn.model, tn.book, context, {0, 1}, 3,
                                   harness::kVariantItc, tn.cfg, 1, 1),
                  ConfigError);
  // context + horizon above the model window
  const std::vector<int> acts(tn.model.cfg.seq_len, gw::kNoop);
  CHECK_THROWS_AS(harness::rollout(tn.model, tn.book, context, acts,
                                   tn.model.cfg.seq_len, harness::kVariantItc, tn.cfg, 1, 1),
                  ConfigError);
  const harness::Predictor oracle = harness::shift_oracle(g, tn.book.size(), 1, 0);
  CHECK_THROWS_AS(harness::rollout_with(oracle, tn.book, g, context, {0}, 2, "fancy",
                                        tn.cfg, 1, 1, 0),
                  ConfigError);
}

TEST_CASE("shift-oracle rollouts preserve every entity at long horizons") {
  const Tiny& tn = tiny();
  const GridGeometry g = tn.cfg.geometry();
  const auto eps = harness::group_episodes(tn.ds);
  const harness::EpisodeTokens* with_creature = nullptr;
  for (const auto& ep : eps) {
    if (ep.has_creature && harness::count_creatures(tn.book, ep.frames[0]) > 0) {
      with_creature = &ep;
      break;
    }
  }
  REQUIRE(with_creature != nullptr);
  const std::vector<int>& start = with_creature->frames[0];
  const int creatures = harness::count_creatures(tn.book, start);
  const int horizon = 30;
  const std::vector<int> acts(horizon, gw::kNoop);

  for (const char* variant : {harness::kVariantItc, harness::kVariantBaseline}) {
    const auto pred = harness::shift_oracle(g, tn.book.size(), 1, 0);
    const auto r = harness::rollout_with(pred, tn.book, g, {start}, acts, horizon, variant,
                                         tn.cfg, 9, creatures, /*seq_cap=*/0);
    CHECK(r.duplication == 0);
    CHECK(r.disappearance == 0);
    REQUIRE(r.frames.size() == static_cast<size_t>(horizon + 1));
    for (int h = 0; h <= horizon; ++h) {
      CHECK(r.frames[h] == cyclic_shift(start, g, h, 0));
      CHECK(harness::count_creatures(tn.book, r.frames[h]) == creatures);
    }
  }
}

TEST_CASE("model rollouts fill the window deterministically") {
  const Tiny& tn = tiny();
  const auto eps = harness::group_episodes(tn.ds);
  const harness::EpisodeTokens* ep = nullptr;
  for (const auto& e : eps) {
    if (static_cast<int>(e.actions.size()) >= tn.model.cfg.seq_len) {
      ep = &e;
      break;
    }
  }
  REQUIRE(ep != nullptr);
  const int horizon = tn.model.cfg.seq_len - 2;
  const std::vector<std::vector<int>> context{ep->frames[0], ep->frames[1]};
  const std::vector<int> acts(ep->actions.begin(), ep->actions.begin() + 1 + horizon);
  const int creatures = harness::count_creatures(tn.book, ep->frames[0]);
  const auto a = harness::rollout(tn.model, tn.book, context, acts, horizon,
                                  harness::kVariantItc, tn.cfg, 4, creatures);
  const auto b = harness::rollout(tn.model, tn.book, context, acts, horizon,
                                  harness::kVariantItc, tn.cfg, 4, creatures);
  CHECK(a.frames == b.frames);
  CHECK(a.frames.size() == context.size() + horizon);
  CHECK(a.duplication + a.disappearance <= horizon);
  for (const auto& f : a.frames) {
    CHECK(static_cast<int>(f.size()) == tn.cfg.geometry().size());
  }
}

TEST_CASE("rendering matches the environment glyphs") {
  const Tiny& tn = tiny();
  const GridGeometry g = tn.cfg.geometry();
  const auto eps = harness::group_episodes(tn.ds);
  const std::vector<int>& frame = eps[0].frames[0];
  const auto cells = data::cells_from_tokens(tn.book, frame);
  CHECK(harness::render_tokens(tn.book, frame, g) == gw::render_text(cells, g));

  std::vector<int> junk = frame;
  junk[0] = tn.book.size() + 3;
  CHECK(harness::render_tokens(tn.book, junk, g).front() == '?');

  const std::string dir = temp_dir("pgm");
  const std::string pgm = dir + "/frame.pgm";
  harness::write_pgm(tn.book, frame, g, pgm, 3);
  const std::string bytes = read_file(pgm);
  std::ostringstream head;
  head << "P5\n" << g.width * 3 << ' ' << g.height * 3 << "\n255\n";
  REQUIRE(bytes.substr(0, head.str().size()) == head.str());
  CHECK(bytes.size() == head.str().size() + static_cast<size_t>(g.size()) * 9);
  // top-left cell is border wall -> dark pixels
  CHECK(static_cast<unsigned char>(bytes[head.str().size()]) == 32);
}

TEST_CASE("eval reports round-trip through json") {
  const Tiny& tn = tiny();
  const auto res = harness::eval_accuracy(tn.model, tn.book, tn.ds,
                                          {harness::kVariantItc}, tn.cfg, 3);
  const std::string dir = temp_dir("report");
  const std::string path = dir + "/report.json";
  harness::save_eval_report(res[0].report, path);
  const harness::EvalReport back = harness::load_eval_report(path);
  CHECK(reports_equal(back, res[0].report));
  {
    std::ofstream out(path);
    out << "{\"variant\": 3}";
  }
  CHECK_THROWS_AS(harness::load_eval_report(path), IoError);
  CHECK_THROWS_AS(harness::load_eval_report(dir + "/none.json"), IoError);
}

TEST_CASE("a small training run fits the time budget") {
  harness::RunConfig cfg = harness::desk_config();
  cfg.episodes = 23;  // roughly five hundred transitions
  cfg.train_steps = 200;
  cfg.batch_size = 2;
  cfg.seed = 17;
  cfg.out_dir = temp_dir("budget");
  const auto t0 = std::chrono::steady_clock::now();
  const auto art = harness::train_pipeline(cfg);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  CHECK(seconds < 60.0);
  const auto ds = data::load_dataset(art.dataset_path);
  CHECK(ds.transitions.size() > 300);
  CHECK(ds.transitions.size() < 1200);
  CHECK(std::isfinite(art.final_loss));
  CHECK(art.final_token_error_rate < 0.2);
  MESSAGE("tiny pipeline: ", ds.transitions.size(), " transitions, ", cfg.train_steps,
          " steps in ", seconds, " s");
}
