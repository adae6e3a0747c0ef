#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "itc/grid.hpp"
#include "itc/rng.hpp"

namespace itc::gw {

// Cell symbols double as one-hot channel indices.
enum class Cell : uint8_t { kFloor = 0, kWall = 1, kGoal = 2, kPlayer = 3, kCreature = 4 };
constexpr int kAlphabetSize = 5;

enum Action : int { kUp = 0, kDown = 1, kLeft = 2, kRight = 3, kNoop = 4 };
constexpr int kNumActions = 5;

struct GridworldConfig {
  int height = 6;
  int width = 6;
  int max_creatures = 2;
  double creature_prob = 0.5;  // per creature slot, drawn once per episode
  int max_steps = 100;

  void validate() const;
};

// Walls form a one-cell border; goal, player, and creatures occupy distinct
// interior floor cells.
struct GridState {
  GridGeometry geometry{0, 0};
  std::vector<Cell> terrain;  // floor/wall/goal only
  GridCoord player{0, 0};
  GridCoord goal{0, 0};
  std::vector<GridCoord> creatures;
  int steps = 0;
  int max_steps = 100;
  bool finished = false;  // goal reached or step cap hit
  SplitMixRng rng{0, 0};

  void validate() const;
};

GridState make_episode(const GridworldConfig& cfg, SplitMixRng rng);

// Symbol grid with entities drawn over the terrain (player wins ties).
std::vector<Cell> render(const GridState& state);

// One-hot channel image (height x width x kAlphabetSize, row-major).
std::vector<float> one_hot_image(const std::vector<Cell>& cells);

// UTF-8 character grid, one line per row: . # G @ c
std::string render_text(const std::vector<Cell>& cells, GridGeometry g);

struct StepResult {
  int reward = 0;   // 1 on reaching the goal
  bool done = false;  // goal reached (step-cap truncation is not a done)
};

// Player moves one cell onto floor/goal (blocked otherwise); each creature
// then picks uniformly among staying and its free adjacent floor cells.
StepResult step(GridState& state, int action);

struct Episode {
  std::vector<std::vector<Cell>> frames;  // length T+1
  std::vector<int> actions;               // length T
  std::vector<uint8_t> rewards, dones;    // length T
  bool has_creature = false;
};

// Uniform-random scripted policy; deterministic per seed.
std::vector<Episode> collect(const GridworldConfig& cfg, int episodes, uint64_t seed);

}  // namespace itc::gw
