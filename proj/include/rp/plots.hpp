#pragma once

#include <string>
#include <vector>

#include "rp/eval.hpp"
#include "rp/gridworld.hpp"

namespace rp {

struct PlotSpec {
  std::vector<std::pair<int, int>> axes;  // empty: (0,1), plus (0,2),(1,2) when d==3
  double point_radius = 2.5;
  int canvas = 420;  // per-panel pixel size
  Color positive{220, 30, 30};   // reward > 0
  Color negative{128, 128, 128}; // reward < 0
  Color zero{40, 80, 220};       // reward == 0

  void validate(int state_dim) const;
  std::vector<std::pair<int, int>> panels(int state_dim) const;
};

// Deterministic SVG scatter of the learned states colored by reward sign;
// `title` is embedded in a header comment and the legend block.
void scatter_plot(const EmbeddingTable& table, const PlotSpec& spec, const std::string& path,
                  const std::string& title = "");

// Composite raster (binary PPM): one row per query, the query frame followed
// by its k learned-space nearest neighbor frames.
void nn_gallery(const EmbeddingTable& table, const Dataset& dataset,
                const std::vector<std::int64_t>& queries, int k, const std::string& path,
                const std::string& title = "");

}  // namespace rp
