#include "itc/dataset.hpp"

#include <fstream>

#include "json.hpp"

#include "itc/errors.hpp"

namespace itc::data {

using nlohmann::json;

Dataset tokenize_episodes(const std::vector<gw::Episode>& episodes,
                          tok::Codebook& book, bool grow, GridGeometry geometry,
                          uint64_t seed) {
  if (book.shape.h != 1 || book.shape.w != 1 || book.shape.c != gw::kAlphabetSize) {
    throw ConfigError("tokenize_episodes: codebook must use 1x1 symbol patches");
  }
  if (grow) {
    for (const gw::Episode& ep : episodes) {
      for (const std::vector<gw::Cell>& frame : ep.frames) {
        tok::grow_from_frame(book, gw::one_hot_image(frame), geometry.height,
                             geometry.width);
      }
    }
  }

  Dataset ds;
  ds.header.grid_height = geometry.height;
  ds.header.grid_width = geometry.width;
  ds.header.alphabet_size = gw::kAlphabetSize;
  ds.header.num_actions = gw::kNumActions;
  ds.header.codebook_hash = tok::codebook_hash(book);
  ds.header.seed = seed;

  for (size_t ep = 0; ep < episodes.size(); ++ep) {
    const gw::Episode& e = episodes[ep];
    std::vector<std::vector<int>> frames(e.frames.size());
    for (size_t f = 0; f < e.frames.size(); ++f) {
      frames[f] = tok::encode_frame(gw::one_hot_image(e.frames[f]), geometry.height,
                                    geometry.width, book)
                      .tokens;
    }
    for (size_t t = 0; t + 1 < frames.size(); ++t) {
      Transition tr;
      tr.episode = static_cast<int>(ep);
      tr.t = static_cast<int>(t);
      tr.s_prev = frames[t];
      tr.s_next = frames[t + 1];
      tr.action = e.actions[t];
      tr.reward = e.rewards[t];
      tr.done = e.dones[t];
      tr.has_creature = e.has_creature ? 1 : 0;
      ds.transitions.push_back(std::move(tr));
    }
  }
  return ds;
}

void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for write: " + path);
  json header = {
      {"grid_height", ds.header.grid_height},
      {"grid_width", ds.header.grid_width},
      {"alphabet_size", ds.header.alphabet_size},
      {"num_actions", ds.header.num_actions},
      {"codebook_hash", ds.header.codebook_hash},
      {"seed", ds.header.seed},
  };
  out << header.dump() << '\n';
  for (const Transition& tr : ds.transitions) {
    json line = {
        {"episode", tr.episode},
        {"t", tr.t},
        {"s_prev", tr.s_prev},
        {"action", tr.action},
        {"s_next", tr.s_next},
        {"reward", static_cast<int>(tr.reward)},
        {"done", static_cast<int>(tr.done)},
        {"has_creature", static_cast<int>(tr.has_creature)},
    };
    out << line.dump() << '\n';
  }
  if (!out) throw IoError("write failed: " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  std::string line;
  if (!std::getline(in, line)) throw IoError("empty dataset file: " + path);

  Dataset ds;
  try {
    json header = json::parse(line);
    ds.header.grid_height = header.at("grid_height").get<int>();
    ds.header.grid_width = header.at("grid_width").get<int>();
    ds.header.alphabet_size = header.at("alphabet_size").get<int>();
    ds.header.num_actions = header.at("num_actions").get<int>();
    ds.header.codebook_hash = header.at("codebook_hash").get<uint64_t>();
    ds.header.seed = header.at("seed").get<uint64_t>();

    const size_t frame_size =
        static_cast<size_t>(ds.header.grid_height) * ds.header.grid_width;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      json j = json::parse(line);
      Transition tr;
      tr.episode = j.at("episode").get<int>();
      tr.t = j.at("t").get<int>();
      tr.s_prev = j.at("s_prev").get<std::vector<int>>();
      tr.s_next = j.at("s_next").get<std::vector<int>>();
      tr.action = j.at("action").get<int>();
      tr.reward = static_cast<uint8_t>(j.at("reward").get<int>());
      tr.done = static_cast<uint8_t>(j.at("done").get<int>());
      tr.has_creature = static_cast<uint8_t>(j.at("has_creature").get<int>());
      if (tr.s_prev.size() != frame_size || tr.s_next.size() != frame_size) {
        throw IoError("dataset frame size mismatch: " + path);
      }
      ds.transitions.push_back(std::move(tr));
    }
  } catch (const json::exception& e) {
    throw IoError("malformed dataset " + path + ": " + e.what());
  }
  return ds;
}

std::vector<gw::Cell> cells_from_tokens(const tok::Codebook& book,
                                        const std::vector<int>& tokens) {
  if (book.shape.h != 1 || book.shape.w != 1 || book.shape.c != gw::kAlphabetSize) {
    throw ConfigError("cells_from_tokens: codebook must use 1x1 symbol patches");
  }
  std::vector<gw::Cell> cells(tokens.size());
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= book.size()) {
      throw ConfigError("cells_from_tokens: token out of range");
    }
    const float* code = book.code(tokens[i]);
    int best = 0;
    for (int c = 1; c < gw::kAlphabetSize; ++c) {
      if (code[c] > code[best]) best = c;
    }
    cells[i] = static_cast<gw::Cell>(best);
  }
  return cells;
}

}  // namespace itc::data
