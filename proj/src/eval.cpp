#include "rp/eval.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <queue>
#include <sstream>
#include <stdexcept>

#include "rp/serialize.hpp"

namespace rp {

void EmbeddingTable::validate() const {
  size_t n = learned.size();
  if (gt.size() != n || reward.size() != n || episode.size() != n)
    throw std::invalid_argument("EmbeddingTable: column lengths differ");
  for (const auto& r : learned)
    if (r.size() != learned.front().size())
      throw std::invalid_argument("EmbeddingTable: ragged learned rows");
  for (const auto& r : gt)
    if (r.size() != 2) throw std::invalid_argument("EmbeddingTable: gt rows must be 2D");
}

void EvalConfig::validate() const {
  if (k < 1) throw std::invalid_argument("EvalConfig: k must be >= 1");
  if (nieqa_landmarks < 2) throw std::invalid_argument("EvalConfig: nieqa_landmarks must be >= 2");
  if (knn_graph_k < 1) throw std::invalid_argument("EvalConfig: knn_graph_k must be >= 1");
}

EmbeddingTable embed_dataset(const Encoder& encoder, const Dataset& dataset) {
  EmbeddingTable t;
  t.arena_size = dataset.config.arena_size;
  std::int64_t n = dataset.total_frames();
  constexpr std::int64_t chunk = 256;
  for (std::int64_t start = 0; start < n; start += chunk) {
    std::int64_t count = std::min(chunk, n - start);
    std::vector<std::int64_t> rows(static_cast<size_t>(count));
    std::iota(rows.begin(), rows.end(), start);
    Tensor imgs = batch_images(dataset, rows);
    Tensor states = encode(encoder, imgs);
    int d = static_cast<int>(states.shape[1]);
    for (std::int64_t i = 0; i < count; ++i) {
      std::vector<double> s(static_cast<size_t>(d));
      for (int j = 0; j < d; ++j) s[static_cast<size_t>(j)] = states.data[static_cast<size_t>(i * d + j)];
      t.learned.push_back(std::move(s));
      const Transition& tr = dataset.frame(start + i);
      t.gt.push_back({tr.gt_state.x, tr.gt_state.y});
      t.reward.push_back(tr.reward);
      t.episode.push_back(tr.episode_id);
    }
  }
  return t;
}

namespace {

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

const std::vector<std::vector<double>>& coords(const EmbeddingTable& t, Space s) {
  return s == Space::Learned ? t.learned : t.gt;
}

}  // namespace

std::vector<std::int64_t> knn(const EmbeddingTable& table, std::int64_t query, int k, Space space) {
  std::int64_t n = table.rows();
  if (k < 1 || k >= n)
    throw std::invalid_argument("knn: k must be in [1, rows-1]");
  if (query < 0 || query >= n) throw std::invalid_argument("knn: query row out of range");
  const auto& pts = coords(table, space);
  std::vector<std::pair<double, std::int64_t>> d;
  d.reserve(static_cast<size_t>(n - 1));
  for (std::int64_t i = 0; i < n; ++i) {
    if (i == query) continue;
    d.emplace_back(sq_dist(pts[static_cast<size_t>(i)], pts[static_cast<size_t>(query)]), i);
  }
  std::partial_sort(d.begin(), d.begin() + k, d.end());
  std::vector<std::int64_t> out(static_cast<size_t>(k));
  for (int i = 0; i < k; ++i) out[static_cast<size_t>(i)] = d[static_cast<size_t>(i)].second;
  return out;
}

std::vector<double> knn_mse_per_row(const EmbeddingTable& table, int k) {
  table.validate();
  std::int64_t n = table.rows();
  std::vector<double> out(static_cast<size_t>(n));
  for (std::int64_t q = 0; q < n; ++q) {
    auto nb = knn(table, q, k, Space::Learned);
    double acc = 0.0;
    for (auto i : nb) acc += sq_dist(table.gt[static_cast<size_t>(q)], table.gt[static_cast<size_t>(i)]);
    out[static_cast<size_t>(q)] = acc / static_cast<double>(k);
  }
  return out;
}

double knn_mse(const EmbeddingTable& table, int k) {
  auto per_row = knn_mse_per_row(table, k);
  double acc = 0.0;
  for (double v : per_row) acc += v;
  return acc / static_cast<double>(per_row.size());
}

double nieqa_local(const EmbeddingTable& table, int k) {
  table.validate();
  std::int64_t n = table.rows();
  int d = table.state_dim();
  double total = 0.0;
  for (std::int64_t q = 0; q < n; ++q) {
    auto nb = knn(table, q, k, Space::Learned);
    nb.insert(nb.begin(), q);
    const int m = static_cast<int>(nb.size());
    Eigen::MatrixXd X(m, d), Y(m, 2);
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < d; ++j) X(i, j) = table.learned[static_cast<size_t>(nb[static_cast<size_t>(i)])][static_cast<size_t>(j)];
      for (int j = 0; j < 2; ++j) Y(i, j) = table.gt[static_cast<size_t>(nb[static_cast<size_t>(i)])][static_cast<size_t>(j)];
    }
    X.rowwise() -= X.colwise().mean();
    Y.rowwise() -= Y.colwise().mean();
    double norm_x = X.squaredNorm();
    double norm_y = Y.squaredNorm();
    if (norm_x < 1e-18 || norm_y < 1e-18) continue;  // degenerate neighborhood scores 0
    Eigen::MatrixXd C = Y.transpose() * X;  // 2 x d
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(C, Eigen::ComputeThinU | Eigen::ComputeThinV);
    double trace = svd.singularValues().sum();
    double residual = norm_y - trace * trace / norm_x;
    total += std::clamp(residual / norm_y, 0.0, 1.0);
  }
  return total / static_cast<double>(n);
}

namespace {

// ground-truth k-NN graph as an undirected adjacency list
std::vector<std::vector<std::int64_t>> gt_knn_graph(const EmbeddingTable& t, int k) {
  std::int64_t n = t.rows();
  std::vector<std::vector<std::int64_t>> adj(static_cast<size_t>(n));
  for (std::int64_t q = 0; q < n; ++q)
    for (auto i : knn(t, q, k, Space::Gt)) {
      adj[static_cast<size_t>(q)].push_back(i);
      adj[static_cast<size_t>(i)].push_back(q);
    }
  for (auto& a : adj) {
    std::sort(a.begin(), a.end());
    a.erase(std::unique(a.begin(), a.end()), a.end());
  }
  return adj;
}

bool connected(const std::vector<std::vector<std::int64_t>>& adj) {
  if (adj.empty()) return true;
  std::vector<bool> seen(adj.size(), false);
  std::vector<std::int64_t> stack{0};
  seen[0] = true;
  size_t count = 1;
  while (!stack.empty()) {
    auto u = stack.back();
    stack.pop_back();
    for (auto v : adj[static_cast<size_t>(u)])
      if (!seen[static_cast<size_t>(v)]) {
        seen[static_cast<size_t>(v)] = true;
        ++count;
        stack.push_back(v);
      }
  }
  return count == adj.size();
}

std::vector<double> dijkstra(const std::vector<std::vector<std::int64_t>>& adj,
                             const std::vector<std::vector<double>>& pts, std::int64_t src) {
  std::vector<double> dist(adj.size(), std::numeric_limits<double>::infinity());
  using Item = std::pair<double, std::int64_t>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
  dist[static_cast<size_t>(src)] = 0.0;
  pq.emplace(0.0, src);
  while (!pq.empty()) {
    auto [du, u] = pq.top();
    pq.pop();
    if (du > dist[static_cast<size_t>(u)]) continue;
    for (auto v : adj[static_cast<size_t>(u)]) {
      double w = std::sqrt(sq_dist(pts[static_cast<size_t>(u)], pts[static_cast<size_t>(v)]));
      double nd = du + w;
      if (nd < dist[static_cast<size_t>(v)]) {
        dist[static_cast<size_t>(v)] = nd;
        pq.emplace(nd, v);
      }
    }
  }
  return dist;
}

// farthest-point sampling in ground-truth space, deterministic from row 0
std::vector<std::int64_t> farthest_point_landmarks(const EmbeddingTable& t, int count) {
  std::int64_t n = t.rows();
  std::vector<std::int64_t> lm{0};
  std::vector<double> best(static_cast<size_t>(n), std::numeric_limits<double>::infinity());
  while (static_cast<int>(lm.size()) < count && static_cast<std::int64_t>(lm.size()) < n) {
    std::int64_t last = lm.back();
    std::int64_t arg = -1;
    double far = -1.0;
    for (std::int64_t i = 0; i < n; ++i) {
      double d = sq_dist(t.gt[static_cast<size_t>(i)], t.gt[static_cast<size_t>(last)]);
      if (d < best[static_cast<size_t>(i)]) best[static_cast<size_t>(i)] = d;
      if (best[static_cast<size_t>(i)] > far) {
        far = best[static_cast<size_t>(i)];
        arg = i;
      }
    }
    if (arg < 0 || far <= 0.0) break;  // all remaining points coincide with landmarks
    lm.push_back(arg);
  }
  return lm;
}

std::vector<double> average_ranks(const std::vector<double>& v) {
  size_t n = v.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
  std::vector<double> rank(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (size_t q = i; q <= j; ++q) rank[order[q]] = avg;
    i = j + 1;
  }
  return rank;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  auto ra = average_ranks(a);
  auto rb = average_ranks(b);
  size_t n = ra.size();
  double ma = 0.0, mb = 0.0;
  for (size_t i = 0; i < n; ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double num = 0.0, va = 0.0, vb = 0.0;
  for (size_t i = 0; i < n; ++i) {
    num += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (va < 1e-18 || vb < 1e-18) return 1.0;  // constant ranks: no disagreement measurable
  return num / std::sqrt(va * vb);
}

}  // namespace

double nieqa_global(const EmbeddingTable& table, const EvalConfig& config) {
  table.validate();
  config.validate();
  if (table.rows() < 2) throw std::invalid_argument("nieqa_global: need at least 2 rows");
  auto adj = gt_knn_graph(table, std::min<int>(config.knn_graph_k, static_cast<int>(table.rows() - 1)));
  if (!connected(adj))
    throw std::invalid_argument("nieqa_global: ground-truth k-NN graph is disconnected; increase knn_graph_k");
  auto lm = farthest_point_landmarks(table, config.nieqa_landmarks);
  std::vector<double> geo_gt, geo_learned;
  for (size_t i = 0; i < lm.size(); ++i) {
    auto dg = dijkstra(adj, table.gt, lm[i]);
    auto dl = dijkstra(adj, table.learned, lm[i]);
    for (size_t j = i + 1; j < lm.size(); ++j) {
      geo_gt.push_back(dg[static_cast<size_t>(lm[j])]);
      geo_learned.push_back(dl[static_cast<size_t>(lm[j])]);
    }
  }
  if (geo_gt.size() < 2) throw std::invalid_argument("nieqa_global: not enough distinct landmarks");
  double rho = spearman(geo_gt, geo_learned);
  return std::clamp((1.0 - rho) / 2.0, 0.0, 1.0);
}

double dispersion_ratio(const EmbeddingTable& table) {
  table.validate();
  std::int64_t n = table.rows();
  bool multi_episode = false;
  for (std::int64_t i = 1; i < n; ++i)
    if (table.episode[static_cast<size_t>(i)] != table.episode[0]) multi_episode = true;
  if (!multi_episode) throw std::invalid_argument("dispersion_ratio: need at least 2 episodes");
  const double th2 = (table.arena_size / 20.0) * (table.arena_size / 20.0);
  double cross = 0.0, within = 0.0;
  std::int64_t n_cross = 0, n_within = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = i + 1; j < n; ++j) {
      if (sq_dist(table.gt[static_cast<size_t>(i)], table.gt[static_cast<size_t>(j)]) > th2) continue;
      double d = std::sqrt(sq_dist(table.learned[static_cast<size_t>(i)], table.learned[static_cast<size_t>(j)]));
      if (table.episode[static_cast<size_t>(i)] == table.episode[static_cast<size_t>(j)]) {
        within += d;
        ++n_within;
      } else {
        cross += d;
        ++n_cross;
      }
    }
  }
  if (n_cross == 0 || n_within == 0)
    throw std::invalid_argument("dispersion_ratio: no qualifying gt-proximal pairs in one of the groups");
  return (cross / static_cast<double>(n_cross)) / (within / static_cast<double>(n_within));
}

EvalReport evaluate_table(const EmbeddingTable& table, const EvalConfig& config) {
  EvalReport r;
  r.k = config.k;
  r.knn_mse = knn_mse(table, config.k);
  r.nieqa_local = nieqa_local(table, config.k);
  r.nieqa_global = nieqa_global(table, config);
  try {
    r.dispersion_ratio = dispersion_ratio(table);
  } catch (const std::invalid_argument&) {
    // single-episode tables have no cross-episode pairs
    r.dispersion_ratio = std::numeric_limits<double>::quiet_NaN();
  }
  return r;
}

std::string csv_quote(const std::string& s) {
  bool need = s.find_first_of(",\"\r\n") != std::string::npos;
  if (!need) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

namespace {

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

void write_eval_reports(const std::vector<EvalReport>& rows, const std::string& path) {
  auto os = open_out(path);
  os << "model,method,dataset_variant,seed,knn_mse,nieqa_local,nieqa_global,dispersion_ratio,k,epoch\r\n";
  for (const auto& r : rows) {
    os << csv_quote(r.model) << ',' << csv_quote(r.method) << ',' << csv_quote(r.dataset_variant) << ','
       << r.seed << ',' << fmt_double(r.knn_mse) << ',' << fmt_double(r.nieqa_local) << ','
       << fmt_double(r.nieqa_global) << ',' << fmt_double(r.dispersion_ratio) << ',' << r.k << ','
       << r.epoch << "\r\n";
  }
  if (!os) throw io_error("write failed: " + path);
}

std::vector<EvalReport> read_eval_reports(const std::string& path) {
  auto is = open_in(path);
  std::string line;
  if (!std::getline(is, line)) throw io_error("empty report: " + path);
  std::vector<EvalReport> out;
  while (std::getline(is, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
    if (line.empty()) continue;
    auto f = split_csv_line(line);
    if (f.size() != 10) throw io_error("bad report row in " + path);
    EvalReport r;
    r.model = f[0];
    r.method = f[1];
    r.dataset_variant = f[2];
    r.seed = std::stoull(f[3]);
    r.knn_mse = std::stod(f[4]);
    r.nieqa_local = std::stod(f[5]);
    r.nieqa_global = std::stod(f[6]);
    r.dispersion_ratio = std::stod(f[7]);
    r.k = std::stoi(f[8]);
    r.epoch = std::stoi(f[9]);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace rp
