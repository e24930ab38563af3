#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rp/gridworld.hpp"
#include "rp/models.hpp"

namespace rp {

// Row-aligned table of learned states, ground truth, rewards and episodes.
struct EmbeddingTable {
  std::vector<std::vector<double>> learned;  // n x d
  std::vector<std::vector<double>> gt;       // n x 2
  std::vector<int> reward;
  std::vector<int> episode;
  double arena_size = 1.0;

  std::int64_t rows() const { return static_cast<std::int64_t>(learned.size()); }
  int state_dim() const { return learned.empty() ? 0 : static_cast<int>(learned.front().size()); }
  void validate() const;
};

struct EvalConfig {
  int k = 5;                // neighbors for knn_mse / nieqa_local
  int nieqa_landmarks = 20;
  int knn_graph_k = 8;      // geodesic graph degree

  void validate() const;
};

enum class Space { Learned, Gt };

// Encode every frame of the dataset with the encoder.
EmbeddingTable embed_dataset(const Encoder& encoder, const Dataset& dataset);

// k nearest rows to `query` (excluded) by Euclidean distance in the chosen
// space; ties broken by lower row index.
std::vector<std::int64_t> knn(const EmbeddingTable& table, std::int64_t query, int k, Space space);

// Eq.-style criterion: mean ground-truth squared distance to the k
// learned-space neighbors, averaged over all rows.
double knn_mse(const EmbeddingTable& table, int k);
std::vector<double> knn_mse_per_row(const EmbeddingTable& table, int k);

// Local geometry score in [0,1]: residual of the optimal similarity
// alignment of each learned k-neighborhood onto its ground-truth
// counterpart. 0 is perfect.
double nieqa_local(const EmbeddingTable& table, int k);

// Global topology score in [0,1]: rank agreement between landmark geodesic
// distances measured with ground-truth edge lengths and with learned-space
// edge lengths over the same ground-truth k-NN graph. 0 is perfect.
double nieqa_global(const EmbeddingTable& table, const EvalConfig& config);

// Cross-episode vs within-episode mean learned distance between frames at
// matching ground-truth positions (within arena/20). ~1 when episodes share
// one space; large when each episode is its own cluster.
double dispersion_ratio(const EmbeddingTable& table);

struct EvalReport {
  std::string model;
  std::string method;
  std::string dataset_variant;
  std::uint64_t seed = 0;
  double knn_mse = 0.0;
  double nieqa_local = 0.0;
  double nieqa_global = 0.0;
  double dispersion_ratio = 0.0;
  int k = 5;
  int epoch = 0;
};

EvalReport evaluate_table(const EmbeddingTable& table, const EvalConfig& config);

std::string csv_quote(const std::string& s);
void write_eval_reports(const std::vector<EvalReport>& rows, const std::string& path);
std::vector<EvalReport> read_eval_reports(const std::string& path);

}  // namespace rp
