#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "rp/graph.hpp"
#include "rp/gridworld.hpp"
#include "rp/models.hpp"
#include "rp/rng.hpp"

namespace rp {

struct PriorWeights {
  float temporal = 1.0f;
  float proportionality = 1.0f;
  float repeatability = 1.0f;
  float causality = 1.0f;
  float reference = 1.0f;

  void validate() const;
};

struct PriorCounts {
  int temporal = 10;
  int proportional = 10;
  int repeatable = 10;
  int causal = 10;
  int reference = 10;
};

// Flat-row index sets; consecutive indices always lie in the same episode.
struct PriorBatch {
  std::vector<std::pair<std::int64_t, std::int64_t>> temporal;        // (t, t+1)
  std::vector<std::array<std::int64_t, 4>> proportional;              // (t1, t1+1, t2, t2+1)
  std::vector<std::array<std::int64_t, 4>> repeatable;
  std::vector<std::pair<std::int64_t, std::int64_t>> causal;          // (t1, t2)
  std::vector<std::pair<std::int64_t, std::int64_t>> reference;       // (ti, tj)
};

struct no_compatible_pairs : std::runtime_error {
  explicit no_compatible_pairs(const std::string& prior)
      : std::runtime_error("no compatible pairs for prior: " + prior) {}
};

// Precomputed candidate sets for each prior's sampling condition.
// Same-action and causal pairs are ordered pairs (t1 != t2) and may span
// episodes; candidates are never materialized pairwise, so sampling stays
// O(log) in the group count.
class CandidateIndex {
 public:
  explicit CandidateIndex(const Dataset& dataset);

  std::int64_t temporal_count() const { return static_cast<std::int64_t>(temporal_.size()); }
  std::int64_t same_action_pair_count() const { return same_action_pairs_; }
  std::int64_t causal_pair_count() const { return causal_pairs_; }
  std::int64_t reference_pair_count() const;

  PriorBatch sample(const PriorCounts& counts, Rng& rng) const;

 private:
  std::pair<std::int64_t, std::int64_t> sample_same_action_pair(Rng& rng) const;

  std::vector<std::int64_t> temporal_;                  // non-final flat rows
  std::vector<std::vector<std::int64_t>> action_group_; // non-final rows per action
  std::vector<std::int64_t> group_weight_cum_;          // cumulative n*(n-1)
  std::int64_t same_action_pairs_ = 0;
  // causal cells: per (action, next-reward) member lists plus the weighted
  // list of compatible cell pairs
  struct CausalCellPair {
    size_t first;
    size_t second;
    std::int64_t weight_cum;
  };
  std::vector<std::vector<std::int64_t>> reward_cells_;
  std::vector<CausalCellPair> causal_cells_;
  std::int64_t causal_pairs_ = 0;
  std::vector<std::int64_t> reference_;                 // flagged flat rows
};

PriorBatch sample_prior_batch(const CandidateIndex& index, const PriorCounts& counts, Rng& rng);

// Throws std::logic_error if any pair in the batch violates its prior's
// predicate, checked against the dataset records.
void check_batch(const PriorBatch& batch, const Dataset& dataset);

// Reference (f64) loss kernels; one row per pair/quadruple.
using MatD = std::vector<std::vector<double>>;
double temporal_loss(const MatD& states_t, const MatD& states_t1);
double proportionality_loss(const MatD& delta1, const MatD& delta2);
double repeatability_loss(const MatD& s1, const MatD& s2, const MatD& delta1, const MatD& delta2);
double causality_loss(const MatD& s1, const MatD& s2);
double reference_loss(const MatD& si, const MatD& sj);

// Graph assembly: encodes every unique image referenced by the batch once
// (shared encoder parameters) and wires the five losses from the encoded
// states. Losses for empty families are absent (node id -1).
struct PriorLossNodes {
  int images = -1;  // input node to bind with batch_images(dataset, rows)
  int total = -1;
  int temporal = -1;
  int proportional = -1;
  int repeatable = -1;
  int causal = -1;
  int reference = -1;
  std::vector<std::int64_t> rows;  // unique rows, first-appearance order
};

PriorLossNodes total_prior_loss(Graph& g, const Encoder& encoder, const Dataset& dataset,
                                const PriorBatch& batch, const PriorWeights& weights);

}  // namespace rp
