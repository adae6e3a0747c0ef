#include "itc/gridworld.hpp"

#include <algorithm>

#include "itc/errors.hpp"

namespace itc::gw {

namespace {

GridCoord moved(GridCoord c, int action) {
  switch (action) {
    case kUp: return {c.x, c.y - 1};
    case kDown: return {c.x, c.y + 1};
    case kLeft: return {c.x - 1, c.y};
    case kRight: return {c.x + 1, c.y};
    case kNoop: return c;
    default: throw ConfigError("step: unknown action");
  }
}

bool occupied_by_creature(const GridState& state, GridCoord c) {
  for (const GridCoord& cr : state.creatures) {
    if (cr == c) return true;
  }
  return false;
}

}  // namespace

void GridworldConfig::validate() const {
  if (height < 3 || width < 3) {
    throw ConfigError("gridworld: grid must be at least 3x3 to hold a border");
  }
  if (max_creatures < 0) throw ConfigError("gridworld: max_creatures must be >= 0");
  if (creature_prob < 0.0 || creature_prob > 1.0) {
    throw ConfigError("gridworld: creature_prob must be in [0, 1]");
  }
  if (max_steps < 1) throw ConfigError("gridworld: max_steps must be positive");
  const int interior = (height - 2) * (width - 2);
  if (interior < 2 + max_creatures) {
    throw ConfigError("gridworld: interior too small for player, goal, and creatures");
  }
}

void GridState::validate() const {
  if (terrain.size() != static_cast<size_t>(geometry.size())) {
    throw ConfigError("grid state: terrain size mismatch");
  }
  auto on_floor = [&](GridCoord c) {
    return geometry.contains(c) && terrain[geometry.index_of(c)] == Cell::kFloor;
  };
  if (!geometry.contains(player)) throw ConfigError("grid state: player out of bounds");
  if (terrain[geometry.index_of(player)] == Cell::kWall) {
    throw ConfigError("grid state: player inside a wall");
  }
  for (const GridCoord& c : creatures) {
    if (!on_floor(c)) throw ConfigError("grid state: creature off floor");
    if (c == player) throw ConfigError("grid state: creature on player");
  }
  for (size_t i = 0; i < creatures.size(); ++i) {
    for (size_t j = i + 1; j < creatures.size(); ++j) {
      if (creatures[i] == creatures[j]) throw ConfigError("grid state: creatures overlap");
    }
  }
}

GridState make_episode(const GridworldConfig& cfg, SplitMixRng rng) {
  cfg.validate();
  GridState state;
  state.geometry = GridGeometry{cfg.height, cfg.width};
  state.max_steps = cfg.max_steps;
  state.rng = rng;
  state.terrain.assign(state.geometry.size(), Cell::kFloor);
  for (int y = 0; y < cfg.height; ++y) {
    for (int x = 0; x < cfg.width; ++x) {
      if (y == 0 || y == cfg.height - 1 || x == 0 || x == cfg.width - 1) {
        state.terrain[state.geometry.index_of({x, y})] = Cell::kWall;
      }
    }
  }

  std::vector<GridCoord> interior;
  for (int y = 1; y < cfg.height - 1; ++y) {
    for (int x = 1; x < cfg.width - 1; ++x) interior.push_back({x, y});
  }
  // Partial Fisher-Yates: the first cells become goal, player, creatures.
  int needed = 2 + cfg.max_creatures;
  for (int i = 0; i < needed; ++i) {
    const int j = i + static_cast<int>(state.rng.next_below(interior.size() - i));
    std::swap(interior[i], interior[j]);
  }
  state.goal = interior[0];
  state.terrain[state.geometry.index_of(state.goal)] = Cell::kGoal;
  state.player = interior[1];
  for (int i = 0; i < cfg.max_creatures; ++i) {
    if (state.rng.next_double() < cfg.creature_prob) {
      state.creatures.push_back(interior[2 + i]);
    }
  }
  state.validate();
  return state;
}

std::vector<Cell> render(const GridState& state) {
  std::vector<Cell> cells = state.terrain;
  for (const GridCoord& c : state.creatures) {
    cells[state.geometry.index_of(c)] = Cell::kCreature;
  }
  cells[state.geometry.index_of(state.player)] = Cell::kPlayer;
  return cells;
}

std::vector<float> one_hot_image(const std::vector<Cell>& cells) {
  std::vector<float> image(cells.size() * kAlphabetSize, 0.0f);
  for (size_t i = 0; i < cells.size(); ++i) {
    image[i * kAlphabetSize + static_cast<size_t>(cells[i])] = 1.0f;
  }
  return image;
}

std::string render_text(const std::vector<Cell>& cells, GridGeometry g) {
  if (cells.size() != static_cast<size_t>(g.size())) {
    throw ConfigError("render_text: cell count mismatch");
  }
  static const char symbols[kAlphabetSize] = {'.', '#', 'G', '@', 'c'};
  std::string out;
  out.reserve(static_cast<size_t>(g.size()) + g.height);
  for (int y = 0; y < g.height; ++y) {
    for (int x = 0; x < g.width; ++x) {
      out.push_back(symbols[static_cast<int>(cells[g.index_of({x, y})])]);
    }
    out.push_back('\n');
  }
  return out;
}

StepResult step(GridState& state, int action) {
  if (action < 0 || action >= kNumActions) throw ConfigError("step: unknown action");
  if (state.finished) throw ConfigError("step: episode already finished");

  // Player: one cell onto floor or goal; walls and creatures block.
  GridCoord target = moved(state.player, action);
  if (state.geometry.contains(target)) {
    const Cell t = state.terrain[state.geometry.index_of(target)];
    if (t != Cell::kWall && !occupied_by_creature(state, target)) {
      state.player = target;
    }
  }

  StepResult result;
  if (state.player == state.goal) {
    result.reward = 1;
    result.done = true;
    state.finished = true;
  }

  // Creatures: uniform over staying put and free adjacent floor cells.
  for (GridCoord& c : state.creatures) {
    std::vector<GridCoord> options = {c};
    const GridCoord neighbors[4] = {
        {c.x, c.y - 1}, {c.x, c.y + 1}, {c.x - 1, c.y}, {c.x + 1, c.y}};
    for (const GridCoord& n : neighbors) {
      if (!state.geometry.contains(n)) continue;
      if (state.terrain[state.geometry.index_of(n)] != Cell::kFloor) continue;
      if (n == state.player || occupied_by_creature(state, n)) continue;
      options.push_back(n);
    }
    c = options[state.rng.next_below(options.size())];
  }

  state.steps += 1;
  if (state.steps >= state.max_steps) state.finished = true;
  return result;
}

std::vector<Episode> collect(const GridworldConfig& cfg, int episodes, uint64_t seed) {
  cfg.validate();
  if (episodes < 0) throw ConfigError("collect: negative episode count");
  std::vector<Episode> out;
  out.reserve(static_cast<size_t>(episodes));
  SplitMixRng root(seed, 0x67770001u);
  for (int ep = 0; ep < episodes; ++ep) {
    SplitMixRng ep_rng = root.substream(static_cast<uint64_t>(ep));
    SplitMixRng policy_rng = ep_rng.substream(1);
    GridState state = make_episode(cfg, ep_rng.substream(0));

    Episode episode;
    episode.has_creature = !state.creatures.empty();
    episode.frames.push_back(render(state));
    while (!state.finished) {
      const int action = static_cast<int>(policy_rng.next_below(kNumActions));
      StepResult r = step(state, action);
      episode.actions.push_back(action);
      episode.rewards.push_back(static_cast<uint8_t>(r.reward));
      episode.dones.push_back(r.done ? 1 : 0);
      episode.frames.push_back(render(state));
    }
    out.push_back(std::move(episode));
  }
  return out;
}

}  // namespace itc::gw
