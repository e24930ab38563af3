#include "rp/priors.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

namespace rp {

void PriorWeights::validate() const {
  for (float w : {temporal, proportionality, repeatability, causality, reference})
    if (!(w >= 0.0f) || !std::isfinite(w))
      throw std::invalid_argument("PriorWeights: weights must be finite and >= 0");
}

CandidateIndex::CandidateIndex(const Dataset& dataset) {
  const int n_actions = static_cast<int>(dataset.config.action_table.size());
  action_group_.resize(static_cast<size_t>(n_actions));
  // next-reward cells keyed by (action, reward); rewards come from small
  // alphabets so a map is fine here
  std::unordered_map<std::int64_t, size_t> cell_of;
  std::vector<std::pair<int, int>> cell_key;

  std::int64_t flat = 0;
  for (const auto& ep : dataset.episodes) {
    for (size_t t = 0; t < ep.size(); ++t, ++flat) {
      if (t + 1 == ep.size()) continue;  // final frame: no action, no delta
      temporal_.push_back(flat);
      int a = ep[t].action_id;
      if (a < 0 || a >= n_actions)
        throw std::invalid_argument("CandidateIndex: non-final frame with invalid action_id");
      action_group_[static_cast<size_t>(a)].push_back(flat);
      int rn = ep[t + 1].reward;
      std::int64_t key = static_cast<std::int64_t>(a) * 1000003 + (rn + 500);
      auto it = cell_of.find(key);
      if (it == cell_of.end()) {
        cell_of.emplace(key, reward_cells_.size());
        cell_key.emplace_back(a, rn);
        reward_cells_.emplace_back();
        it = cell_of.find(key);
      }
      reward_cells_[it->second].push_back(flat);
    }
  }
  flat = 0;
  for (const auto& ep : dataset.episodes)
    for (size_t t = 0; t < ep.size(); ++t, ++flat)
      if (ep[t].at_reference) reference_.push_back(flat);

  std::int64_t cum = 0;
  for (const auto& g : action_group_) {
    std::int64_t n = static_cast<std::int64_t>(g.size());
    cum += n * (n - 1);
    group_weight_cum_.push_back(cum);
  }
  same_action_pairs_ = cum;

  cum = 0;
  for (size_t i = 0; i < reward_cells_.size(); ++i) {
    for (size_t j = 0; j < reward_cells_.size(); ++j) {
      if (i == j) continue;
      if (cell_key[i].first != cell_key[j].first) continue;   // same action
      if (cell_key[i].second == cell_key[j].second) continue; // different next reward
      std::int64_t w = static_cast<std::int64_t>(reward_cells_[i].size()) *
                       static_cast<std::int64_t>(reward_cells_[j].size());
      if (w == 0) continue;
      cum += w;
      causal_cells_.push_back({i, j, cum});
    }
  }
  causal_pairs_ = cum;
}

std::int64_t CandidateIndex::reference_pair_count() const {
  std::int64_t n = static_cast<std::int64_t>(reference_.size());
  return n * (n - 1);
}

std::pair<std::int64_t, std::int64_t> CandidateIndex::sample_same_action_pair(Rng& rng) const {
  std::int64_t r = static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(same_action_pairs_)));
  size_t gi = static_cast<size_t>(
      std::upper_bound(group_weight_cum_.begin(), group_weight_cum_.end(), r) - group_weight_cum_.begin());
  const auto& g = action_group_[gi];
  std::int64_t n = static_cast<std::int64_t>(g.size());
  std::int64_t i = static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(n)));
  std::int64_t j = static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(n - 1)));
  if (j >= i) ++j;
  return {g[static_cast<size_t>(i)], g[static_cast<size_t>(j)]};
}

PriorBatch CandidateIndex::sample(const PriorCounts& counts, Rng& rng) const {
  PriorBatch b;
  if (counts.temporal > 0 && temporal_.empty()) throw no_compatible_pairs("temporal");
  if ((counts.proportional > 0 || counts.repeatable > 0) && same_action_pairs_ == 0)
    throw no_compatible_pairs(counts.proportional > 0 ? "proportionality" : "repeatability");
  if (counts.causal > 0 && causal_pairs_ == 0) throw no_compatible_pairs("causality");
  if (counts.reference > 0 && reference_pair_count() == 0) throw no_compatible_pairs("reference");

  for (int i = 0; i < counts.temporal; ++i) {
    std::int64_t t = temporal_[rng.uniform_int(temporal_.size())];
    b.temporal.emplace_back(t, t + 1);
  }
  for (int i = 0; i < counts.proportional; ++i) {
    auto [t1, t2] = sample_same_action_pair(rng);
    b.proportional.push_back({t1, t1 + 1, t2, t2 + 1});
  }
  for (int i = 0; i < counts.repeatable; ++i) {
    auto [t1, t2] = sample_same_action_pair(rng);
    b.repeatable.push_back({t1, t1 + 1, t2, t2 + 1});
  }
  for (int i = 0; i < counts.causal; ++i) {
    std::int64_t r = static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(causal_pairs_)));
    auto it = std::upper_bound(causal_cells_.begin(), causal_cells_.end(), r,
                               [](std::int64_t v, const CausalCellPair& c) { return v < c.weight_cum; });
    const auto& first = reward_cells_[it->first];
    const auto& second = reward_cells_[it->second];
    std::int64_t t1 = first[rng.uniform_int(first.size())];
    std::int64_t t2 = second[rng.uniform_int(second.size())];
    b.causal.emplace_back(t1, t2);
  }
  std::int64_t nref = static_cast<std::int64_t>(reference_.size());
  for (int i = 0; i < counts.reference; ++i) {
    std::int64_t i1 = static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(nref)));
    std::int64_t i2 = static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(nref - 1)));
    if (i2 >= i1) ++i2;
    b.reference.emplace_back(reference_[static_cast<size_t>(i1)], reference_[static_cast<size_t>(i2)]);
  }
  return b;
}

PriorBatch sample_prior_batch(const CandidateIndex& index, const PriorCounts& counts, Rng& rng) {
  return index.sample(counts, rng);
}

namespace {

struct FrameView {
  const Transition* tr;
  const Transition* next;  // nullptr on final frames
};

std::vector<FrameView> flatten(const Dataset& d) {
  std::vector<FrameView> v;
  for (const auto& ep : d.episodes)
    for (size_t t = 0; t < ep.size(); ++t)
      v.push_back({&ep[t], t + 1 < ep.size() ? &ep[t + 1] : nullptr});
  return v;
}

[[noreturn]] void bad_pair(const char* prior, std::int64_t a, std::int64_t b) {
  throw std::logic_error(std::string("prior batch violates ") + prior + " predicate at rows (" +
                         std::to_string(a) + "," + std::to_string(b) + ")");
}

}  // namespace

void check_batch(const PriorBatch& batch, const Dataset& dataset) {
  auto frames = flatten(dataset);
  auto consecutive = [&](std::int64_t t, std::int64_t t1) {
    return t1 == t + 1 && t >= 0 && t1 < static_cast<std::int64_t>(frames.size()) &&
           frames[static_cast<size_t>(t)].next == frames[static_cast<size_t>(t1)].tr;
  };
  for (auto [t, t1] : batch.temporal)
    if (!consecutive(t, t1)) bad_pair("temporal", t, t1);
  for (const auto& q : batch.proportional) {
    if (!consecutive(q[0], q[1]) || !consecutive(q[2], q[3])) bad_pair("proportionality", q[0], q[2]);
    if (frames[static_cast<size_t>(q[0])].tr->action_id != frames[static_cast<size_t>(q[2])].tr->action_id)
      bad_pair("proportionality", q[0], q[2]);
  }
  for (const auto& q : batch.repeatable) {
    if (!consecutive(q[0], q[1]) || !consecutive(q[2], q[3])) bad_pair("repeatability", q[0], q[2]);
    if (frames[static_cast<size_t>(q[0])].tr->action_id != frames[static_cast<size_t>(q[2])].tr->action_id)
      bad_pair("repeatability", q[0], q[2]);
  }
  for (auto [t1, t2] : batch.causal) {
    const auto& f1 = frames[static_cast<size_t>(t1)];
    const auto& f2 = frames[static_cast<size_t>(t2)];
    if (!f1.next || !f2.next || f1.tr->action_id != f2.tr->action_id ||
        f1.next->reward == f2.next->reward || t1 == t2)
      bad_pair("causality", t1, t2);
  }
  for (auto [ti, tj] : batch.reference) {
    if (!frames[static_cast<size_t>(ti)].tr->at_reference ||
        !frames[static_cast<size_t>(tj)].tr->at_reference || ti == tj)
      bad_pair("reference", ti, tj);
  }
}

namespace {

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

double norm(const std::vector<double>& a) {
  double s = 0.0;
  for (double v : a) s += v * v;
  return std::sqrt(s);
}

void check_rows(const MatD& a, const MatD& b, const char* op) {
  if (a.size() != b.size() || a.empty())
    throw std::invalid_argument(std::string(op) + ": row counts must match and be non-empty");
  for (size_t i = 0; i < a.size(); ++i)
    if (a[i].size() != b[i].size())
      throw std::invalid_argument(std::string(op) + ": row dims must match");
}

}  // namespace

double temporal_loss(const MatD& states_t, const MatD& states_t1) {
  check_rows(states_t, states_t1, "temporal_loss");
  double s = 0.0;
  for (size_t i = 0; i < states_t.size(); ++i) s += sq_dist(states_t1[i], states_t[i]);
  return s / static_cast<double>(states_t.size());
}

double proportionality_loss(const MatD& delta1, const MatD& delta2) {
  check_rows(delta1, delta2, "proportionality_loss");
  double s = 0.0;
  for (size_t i = 0; i < delta1.size(); ++i) {
    double d = norm(delta2[i]) - norm(delta1[i]);
    s += d * d;
  }
  return s / static_cast<double>(delta1.size());
}

double repeatability_loss(const MatD& s1, const MatD& s2, const MatD& delta1, const MatD& delta2) {
  check_rows(s1, s2, "repeatability_loss");
  check_rows(delta1, delta2, "repeatability_loss");
  if (s1.size() != delta1.size())
    throw std::invalid_argument("repeatability_loss: state and delta row counts must match");
  double s = 0.0;
  for (size_t i = 0; i < s1.size(); ++i)
    s += std::exp(-sq_dist(s2[i], s1[i])) * sq_dist(delta2[i], delta1[i]);
  return s / static_cast<double>(s1.size());
}

double causality_loss(const MatD& s1, const MatD& s2) {
  check_rows(s1, s2, "causality_loss");
  double s = 0.0;
  for (size_t i = 0; i < s1.size(); ++i) s += std::exp(-sq_dist(s2[i], s1[i]));
  return s / static_cast<double>(s1.size());
}

double reference_loss(const MatD& si, const MatD& sj) {
  check_rows(si, sj, "reference_loss");
  double s = 0.0;
  for (size_t i = 0; i < si.size(); ++i) s += sq_dist(sj[i], si[i]);
  return s / static_cast<double>(si.size());
}

PriorLossNodes total_prior_loss(Graph& g, const Encoder& encoder, const Dataset& dataset,
                                const PriorBatch& batch, const PriorWeights& weights) {
  weights.validate();
  if (batch.temporal.empty() && batch.proportional.empty() && batch.repeatable.empty() &&
      batch.causal.empty() && batch.reference.empty())
    throw std::invalid_argument("total_prior_loss: empty batch");

  PriorLossNodes out;
  std::unordered_map<std::int64_t, std::int32_t> local;
  auto intern = [&](std::int64_t row) {
    auto it = local.find(row);
    if (it != local.end()) return it->second;
    std::int32_t id = static_cast<std::int32_t>(out.rows.size());
    local.emplace(row, id);
    out.rows.push_back(row);
    return id;
  };
  auto intern_pairs = [&](const std::vector<std::pair<std::int64_t, std::int64_t>>& ps,
                          std::vector<std::int32_t>& a, std::vector<std::int32_t>& b) {
    for (auto [x, y] : ps) {
      a.push_back(intern(x));
      b.push_back(intern(y));
    }
  };
  std::vector<std::int32_t> tmp_a, tmp_b;
  intern_pairs(batch.temporal, tmp_a, tmp_b);
  std::vector<std::int32_t> p1a, p1b, p2a, p2b;
  for (const auto& q : batch.proportional) {
    p1a.push_back(intern(q[0]));
    p1b.push_back(intern(q[1]));
    p2a.push_back(intern(q[2]));
    p2b.push_back(intern(q[3]));
  }
  std::vector<std::int32_t> r1a, r1b, r2a, r2b;
  for (const auto& q : batch.repeatable) {
    r1a.push_back(intern(q[0]));
    r1b.push_back(intern(q[1]));
    r2a.push_back(intern(q[2]));
    r2b.push_back(intern(q[3]));
  }
  std::vector<std::int32_t> c_a, c_b;
  intern_pairs(batch.causal, c_a, c_b);
  std::vector<std::int32_t> f_a, f_b;
  intern_pairs(batch.reference, f_a, f_b);

  const int dim = dataset.config.image_dim;
  out.images = g.input({static_cast<std::int64_t>(out.rows.size()), 3, dim, dim});
  int states = encoder.build(g, out.images);

  auto sqdist_rows = [&](const std::vector<std::int32_t>& a, const std::vector<std::int32_t>& b) {
    int ga = g.gather_rows(states, a);
    int gb = g.gather_rows(states, b);
    return g.row_sum(g.square(g.sub(gb, ga)));
  };
  auto delta_rows = [&](const std::vector<std::int32_t>& a, const std::vector<std::int32_t>& b) {
    int ga = g.gather_rows(states, a);
    int gb = g.gather_rows(states, b);
    return g.sub(gb, ga);
  };

  int total = -1;
  auto accumulate = [&](int loss, float w) {
    int term = g.scalar_affine(loss, w, 0.0f);
    total = total < 0 ? term : g.add(total, term);
  };

  if (!batch.temporal.empty()) {
    out.temporal = g.mean(sqdist_rows(tmp_a, tmp_b));
    accumulate(out.temporal, weights.temporal);
  }
  if (!batch.proportional.empty()) {
    int d1 = g.row_l2norm(delta_rows(p1a, p1b));
    int d2 = g.row_l2norm(delta_rows(p2a, p2b));
    out.proportional = g.mean(g.square(g.sub(d2, d1)));
    accumulate(out.proportional, weights.proportionality);
  }
  if (!batch.repeatable.empty()) {
    int d1 = delta_rows(r1a, r1b);
    int d2 = delta_rows(r2a, r2b);
    int dd = g.row_sum(g.square(g.sub(d2, d1)));
    int prox = g.expneg(sqdist_rows(r1a, r2a));
    out.repeatable = g.mean(g.mul(prox, dd));
    accumulate(out.repeatable, weights.repeatability);
  }
  if (!batch.causal.empty()) {
    out.causal = g.mean(g.expneg(sqdist_rows(c_a, c_b)));
    accumulate(out.causal, weights.causality);
  }
  if (!batch.reference.empty()) {
    out.reference = g.mean(sqdist_rows(f_a, f_b));
    accumulate(out.reference, weights.reference);
  }
  out.total = total;
  return out;
}

}  // namespace rp
