#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "itc/grid.hpp"
#include "itc/gridworld.hpp"
#include "itc/tokenizer.hpp"

namespace itc::data {

struct DatasetHeader {
  int grid_height = 0;
  int grid_width = 0;
  int alphabet_size = 0;
  int num_actions = 0;
  uint64_t codebook_hash = 0;
  uint64_t seed = 0;

  bool operator==(const DatasetHeader&) const = default;
};

struct Transition {
  int episode = 0;
  int t = 0;
  std::vector<int> s_prev, s_next;
  int action = 0;
  uint8_t reward = 0;
  uint8_t done = 0;
  uint8_t has_creature = 0;

  bool operator==(const Transition&) const = default;
};

struct Dataset {
  DatasetHeader header;
  std::vector<Transition> transitions;
};

// Grows the codebook over every frame (when `grow` is set), then encodes
// all transitions. The header records the post-growth codebook hash.
Dataset tokenize_episodes(const std::vector<gw::Episode>& episodes,
                          tok::Codebook& book, bool grow, GridGeometry geometry,
                          uint64_t seed);

// JSON-lines: header object on the first line, one transition per line after.
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

// Token frame back to symbols via nearest codebook entries.
std::vector<gw::Cell> cells_from_tokens(const tok::Codebook& book,
                                        const std::vector<int>& tokens);

}  // namespace itc::data
