#include "headlab/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

#include "headlab/datagen.hpp"
#include "headlab/tensor.hpp"

namespace headlab {

using nlohmann::json;

void TrajectoryMatrix::validate() const {
  for (const auto& r : rows) {
    if (r.size() != dim())
      throw std::invalid_argument("trajectory matrix: ragged rows");
    for (double x : r)
      if (!std::isfinite(x))
        throw std::invalid_argument("trajectory matrix: non-finite cell");
  }
}

json ClusteringResult::to_json() const {
  json j;
  j["algorithm"] = algorithm;
  j["k"] = k;
  j["labels"] = labels;
  j["seed"] = seed;
  j["metrics"] = {{"silhouette", metrics.silhouette},
                  {"silhouette_defined", metrics.silhouette_defined},
                  {"calinski_harabasz", metrics.calinski_harabasz},
                  {"davies_bouldin", metrics.davies_bouldin}};
  return j;
}

double euclidean_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw std::invalid_argument("euclidean_distance: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

namespace {

double euclidean_sq(std::span<const double> a, std::span<const double> b) {
  double d = euclidean_distance(a, b);
  return d * d;
}

constexpr double kInf = std::numeric_limits<double>::infinity();

}  // namespace

double dtw_distance(std::span<const double> a, std::span<const double> b,
                    std::optional<int> window) {
  const std::size_t n = a.size(), m = b.size();
  if (n == 0 || m == 0) throw std::invalid_argument("dtw: empty series");
  std::vector<double> prev(m + 1, kInf), cur(m + 1, kInf);
  prev[0] = 0.0;
  for (std::size_t i = 1; i <= n; ++i) {
    std::fill(cur.begin(), cur.end(), kInf);
    std::size_t jlo = 1, jhi = m;
    if (window) {
      long c = static_cast<long>(i) * static_cast<long>(m) / static_cast<long>(n);
      jlo = static_cast<std::size_t>(std::max(1L, c - *window));
      jhi = static_cast<std::size_t>(std::min(static_cast<long>(m), c + *window));
    }
    for (std::size_t j = jlo; j <= jhi; ++j) {
      double d = a[i - 1] - b[j - 1];
      d *= d;
      double best = std::min({prev[j], prev[j - 1], cur[j - 1]});
      cur[j] = d + best;
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

namespace {

// DTW with path extraction (for DBA averaging).
double dtw_path(std::span<const double> a, std::span<const double> b,
                std::vector<std::pair<std::size_t, std::size_t>>& path) {
  const std::size_t n = a.size(), m = b.size();
  std::vector<double> dp((n + 1) * (m + 1), kInf);
  auto at = [&](std::size_t i, std::size_t j) -> double& { return dp[i * (m + 1) + j]; };
  at(0, 0) = 0.0;
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j) {
      double d = a[i - 1] - b[j - 1];
      d *= d;
      at(i, j) = d + std::min({at(i - 1, j), at(i - 1, j - 1), at(i, j - 1)});
    }
  path.clear();
  std::size_t i = n, j = m;
  while (i > 0 && j > 0) {
    path.emplace_back(i - 1, j - 1);
    double diag = at(i - 1, j - 1), up = at(i - 1, j), left = at(i, j - 1);
    if (diag <= up && diag <= left) {
      --i;
      --j;
    } else if (up <= left) {
      --i;
    } else {
      --j;
    }
  }
  std::reverse(path.begin(), path.end());
  return at(n, m);
}

double ncc_max(std::span<const double> a, std::span<const double> b, long* best_shift) {
  const double na = norm2(a.data(), a.size());
  const double nb = norm2(b.data(), b.size());
  if (na == 0.0 || nb == 0.0)
    throw std::invalid_argument("sbd: zero-norm series is degenerate");
  const long n = static_cast<long>(a.size()), m = static_cast<long>(b.size());
  double best = -kInf;
  long arg = 0;
  for (long s = -(m - 1); s <= n - 1; ++s) {
    double cc = 0.0;
    for (long j = 0; j < m; ++j) {
      long i = j + s;
      if (i >= 0 && i < n) cc += a[static_cast<std::size_t>(i)] * b[static_cast<std::size_t>(j)];
    }
    double v = cc / (na * nb);
    if (v > best) {
      best = v;
      arg = s;
    }
  }
  if (best_shift) *best_shift = arg;
  return best;
}

}  // namespace

double sbd_distance(std::span<const double> a, std::span<const double> b) {
  return 1.0 - ncc_max(a, b, nullptr);
}

namespace {

using DistFn = double (*)(std::span<const double>, std::span<const double>);

struct KmeansDriver {
  const TrajectoryMatrix& m;
  int k;
  DistFn dist;  // also the objective contribution
  // Centroid update for one cluster given member indices.
  std::function<std::vector<double>(const std::vector<int>&, const std::vector<double>&)>
      update;
  bool strict_monotone = false;  // assert the objective never increases

  ClusteringResult run(std::uint64_t seed, int restarts, const char* name) const {
    if (k < 1 || static_cast<std::size_t>(k) > m.n())
      throw std::invalid_argument(std::string(name) + ": k (" + std::to_string(k) +
                                  ") must be in [1, rows=" + std::to_string(m.n()) + "]");
    m.validate();
    ClusteringResult best;
    double best_obj = kInf;
    for (int r = 0; r < restarts; ++r) {
      auto [labels, centroids, obj] = run_once(mix_seed(seed, static_cast<std::uint64_t>(r)));
      if (obj < best_obj) {
        best_obj = obj;
        best.labels = std::move(labels);
        best.centroids = std::move(centroids);
      }
    }
    best.algorithm = name;
    best.k = k;
    best.seed = seed;
    best.metrics = cluster_metrics(m, best.labels);
    return best;
  }

  std::tuple<std::vector<int>, std::vector<std::vector<double>>, double> run_once(
      std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    const std::size_t n = m.n();
    // k-means++ seeding
    std::vector<std::vector<double>> centroids;
    centroids.push_back(m.rows[rng() % n]);
    std::vector<double> d2(n, 0.0);
    while (centroids.size() < static_cast<std::size_t>(k)) {
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        double dmin = kInf;
        for (const auto& c : centroids) dmin = std::min(dmin, dist(m.rows[i], c));
        d2[i] = dmin * dmin;
        total += d2[i];
      }
      double u = std::uniform_real_distribution<double>(0.0, total)(rng);
      std::size_t pick = n - 1;
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        acc += d2[i];
        if (u <= acc) {
          pick = i;
          break;
        }
      }
      centroids.push_back(m.rows[pick]);
    }

    std::vector<int> labels(n, -1);
    double prev_obj = kInf;
    std::vector<int> prev_labels;
    for (int iter = 0; iter < 300; ++iter) {
      // assignment
      double obj = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        double dmin = kInf;
        int arg = 0;
        for (int c = 0; c < k; ++c) {
          double d = dist(m.rows[i], centroids[c]);
          if (d < dmin) {
            dmin = d;
            arg = c;
          }
        }
        labels[i] = arg;
        obj += dmin;
      }
      // keep every cluster nonempty: pull the farthest point into an empty one
      for (int c = 0; c < k; ++c) {
        if (std::count(labels.begin(), labels.end(), c) > 0) continue;
        std::size_t far = 0;
        double dmax = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
          if (std::count(labels.begin(), labels.end(), labels[i]) <= 1) continue;
          double d = dist(m.rows[i], centroids[labels[i]]);
          if (d > dmax) {
            dmax = d;
            far = i;
          }
        }
        labels[far] = c;
        centroids[c] = m.rows[far];
      }
      if (strict_monotone && obj > prev_obj + 1e-9 * (1.0 + std::abs(prev_obj)))
        throw std::logic_error("kmeans: objective increased between iterations");
      if (!strict_monotone && obj > prev_obj) break;  // heuristic averaging stalled
      prev_obj = obj;
      if (labels == prev_labels) break;
      prev_labels = labels;
      // update
      for (int c = 0; c < k; ++c) {
        std::vector<int> members;
        for (std::size_t i = 0; i < n; ++i)
          if (labels[i] == c) members.push_back(static_cast<int>(i));
        if (!members.empty()) centroids[c] = update(members, centroids[c]);
      }
    }
    return {labels, centroids, prev_obj};
  }
};

std::vector<double> mean_of(const TrajectoryMatrix& m, const std::vector<int>& members) {
  std::vector<double> c(m.dim(), 0.0);
  for (int i : members) axpy(1.0, m.rows[i].data(), c.data(), c.size());
  for (double& x : c) x /= static_cast<double>(members.size());
  return c;
}

}  // namespace

ClusteringResult kmeans_euclidean(const TrajectoryMatrix& m, int k, std::uint64_t seed,
                                  int restarts) {
  KmeansDriver drv{m, k, &euclidean_sq,
                   [&m](const std::vector<int>& members, const std::vector<double>&) {
                     return mean_of(m, members);
                   },
                   true};
  return drv.run(seed, restarts, "euclidean");
}

ClusteringResult kmeans_dtw(const TrajectoryMatrix& m, int k, std::uint64_t seed,
                            int restarts, int dba_iterations) {
  auto dtw_raw = [](std::span<const double> a, std::span<const double> b) {
    return dtw_distance(a, b);
  };
  KmeansDriver drv{
      m, k, static_cast<double (*)(std::span<const double>, std::span<const double>)>(dtw_raw),
      [&m, dba_iterations](const std::vector<int>& members,
                           const std::vector<double>& prev) {
        // DTW barycenter averaging: align members to the running centroid and
        // average the aligned values.
        std::vector<double> center = prev;
        for (int it = 0; it < dba_iterations; ++it) {
          std::vector<double> sum(center.size(), 0.0);
          std::vector<double> cnt(center.size(), 0.0);
          std::vector<std::pair<std::size_t, std::size_t>> path;
          for (int i : members) {
            dtw_path(center, m.rows[i], path);
            for (auto [ci, mi] : path) {
              sum[ci] += m.rows[i][mi];
              cnt[ci] += 1.0;
            }
          }
          bool changed = false;
          for (std::size_t j = 0; j < center.size(); ++j) {
            double next = cnt[j] > 0 ? sum[j] / cnt[j] : center[j];
            if (next != center[j]) changed = true;
            center[j] = next;
          }
          if (!changed) break;
        }
        return center;
      },
      false};
  return drv.run(seed, restarts, "dtw");
}

ClusteringResult kmeans_sbd(const TrajectoryMatrix& m, int k, std::uint64_t seed,
                            int restarts) {
  auto sbd_raw = [](std::span<const double> a, std::span<const double> b) {
    return sbd_distance(a, b);
  };
  KmeansDriver drv{
      m, k, static_cast<double (*)(std::span<const double>, std::span<const double>)>(sbd_raw),
      [&m](const std::vector<int>& members, const std::vector<double>& prev) {
        // Shift-aligned mean toward the previous centroid.
        std::vector<double> sum(prev.size(), 0.0);
        std::vector<double> cnt(prev.size(), 0.0);
        for (int i : members) {
          long shift = 0;
          ncc_max(prev, m.rows[i], &shift);
          for (std::size_t j = 0; j < m.rows[i].size(); ++j) {
            long ci = static_cast<long>(j) + shift;
            if (ci >= 0 && ci < static_cast<long>(prev.size())) {
              sum[static_cast<std::size_t>(ci)] += m.rows[i][j];
              cnt[static_cast<std::size_t>(ci)] += 1.0;
            }
          }
        }
        std::vector<double> center(prev.size());
        for (std::size_t j = 0; j < prev.size(); ++j)
          center[j] = cnt[j] > 0 ? sum[j] / cnt[j] : prev[j];
        double n = norm2(center.data(), center.size());
        if (n == 0.0) return prev;
        return center;
      },
      false};
  return drv.run(seed, restarts, "sbd");
}

// -- hierarchical agglomerative (Ward) ---------------------------------------

namespace {

struct WardState {
  std::vector<std::vector<double>> centroid;
  std::vector<double> size;
  std::vector<int> node;  // dendrogram node id or ~leaf
  std::vector<bool> alive;
};

double ward_cost(const WardState& s, int a, int b) {
  double d2 = euclidean_sq(s.centroid[a], s.centroid[b]);
  return s.size[a] * s.size[b] / (s.size[a] + s.size[b]) * d2;
}

}  // namespace

std::vector<DendrogramNode> hac_ward_dendrogram(const TrajectoryMatrix& m) {
  m.validate();
  const std::size_t n = m.n();
  WardState s;
  s.centroid = m.rows;
  s.size.assign(n, 1.0);
  s.alive.assign(n, true);
  s.node.resize(n);
  std::vector<DendrogramNode> nodes(n);
  for (std::size_t i = 0; i < n; ++i) {
    s.node[i] = static_cast<int>(i);
    nodes[i].members = {static_cast<int>(i)};
  }
  std::vector<int> active;
  for (std::size_t i = 0; i < n; ++i) active.push_back(static_cast<int>(i));
  while (active.size() > 1) {
    double best = kInf;
    std::pair<int, int> arg{-1, -1};
    for (std::size_t x = 0; x < active.size(); ++x)
      for (std::size_t y = x + 1; y < active.size(); ++y) {
        double c = ward_cost(s, active[x], active[y]);
        // deterministic tie-break: lowest pair index
        if (c < best - 1e-15) {
          best = c;
          arg = {active[x], active[y]};
        }
      }
    int a = arg.first, b = arg.second;
    DendrogramNode merged;
    merged.left = s.node[a];
    merged.right = s.node[b];
    merged.height = best;
    merged.members = nodes[s.node[a]].members;
    for (int mm : nodes[s.node[b]].members) merged.members.push_back(mm);
    std::sort(merged.members.begin(), merged.members.end());
    nodes.push_back(merged);
    // merge b into a
    double sa = s.size[a], sb = s.size[b];
    for (std::size_t j = 0; j < m.dim(); ++j)
      s.centroid[a][j] = (sa * s.centroid[a][j] + sb * s.centroid[b][j]) / (sa + sb);
    s.size[a] = sa + sb;
    s.node[a] = static_cast<int>(nodes.size()) - 1;
    s.alive[b] = false;
    active.erase(std::remove(active.begin(), active.end(), b), active.end());
  }
  return nodes;
}

ClusteringResult hac_ward(const TrajectoryMatrix& m, int k) {
  if (k < 1 || static_cast<std::size_t>(k) > m.n())
    throw std::invalid_argument("hac_ward: k out of range");
  std::vector<DendrogramNode> nodes = hac_ward_dendrogram(m);
  const std::size_t n = m.n();
  // Cut: unwind the last k-1 merges.
  std::vector<int> roots;
  if (nodes.size() == n) {
    for (std::size_t i = 0; i < n; ++i) roots.push_back(static_cast<int>(i));
  } else {
    roots.push_back(static_cast<int>(nodes.size()) - 1);
    while (static_cast<int>(roots.size()) < k) {
      // split the root with the greatest merge height
      int split = -1;
      double hmax = -kInf;
      for (int r : roots)
        if (nodes[r].left >= 0 && nodes[r].height > hmax) {
          hmax = nodes[r].height;
          split = r;
        }
      if (split < 0) break;
      roots.erase(std::remove(roots.begin(), roots.end(), split), roots.end());
      roots.push_back(nodes[split].left);
      roots.push_back(nodes[split].right);
    }
  }
  ClusteringResult res;
  res.algorithm = "hac_ward";
  res.k = k;
  res.labels.assign(n, 0);
  std::sort(roots.begin(), roots.end());
  for (std::size_t c = 0; c < roots.size(); ++c)
    for (int mm : nodes[roots[c]].members) res.labels[mm] = static_cast<int>(c);
  for (int c = 0; c < k; ++c) {
    std::vector<int> members;
    for (std::size_t i = 0; i < n; ++i)
      if (res.labels[i] == c) members.push_back(static_cast<int>(i));
    res.centroids.push_back(mean_of(m, members));
  }
  res.metrics = cluster_metrics(m, res.labels);
  return res;
}

json dendrogram_to_json(const std::vector<DendrogramNode>& nodes,
                        const std::vector<std::string>& row_ids) {
  std::function<json(int)> emit = [&](int id) -> json {
    const DendrogramNode& nd = nodes[id];
    if (nd.left < 0)
      return {{"leaf", row_ids.empty() ? std::to_string(id) : row_ids[id]}};
    return {{"height", nd.height}, {"left", emit(nd.left)}, {"right", emit(nd.right)}};
  };
  if (nodes.empty()) return json::object();
  return emit(static_cast<int>(nodes.size()) - 1);
}

// -- metrics -------------------------------------------------------------------

ClusterMetrics cluster_metrics(const TrajectoryMatrix& m, const std::vector<int>& labels) {
  if (labels.size() != m.n())
    throw std::invalid_argument("cluster_metrics: labels size mismatch");
  ClusterMetrics out;
  const std::size_t n = m.n();
  int k = 0;
  for (int l : labels) k = std::max(k, l + 1);
  if (k < 2 || n < 2) return out;
  std::vector<std::vector<int>> members(k);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0) throw std::invalid_argument("cluster_metrics: negative label");
    members[labels[i]].push_back(static_cast<int>(i));
  }
  for (const auto& mem : members)
    if (mem.empty()) throw std::invalid_argument("cluster_metrics: empty cluster");

  // silhouette
  bool any_nonsingleton = false;
  for (const auto& mem : members)
    if (mem.size() > 1) any_nonsingleton = true;
  if (any_nonsingleton) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& own = members[labels[i]];
      if (own.size() == 1) continue;  // convention: s = 0 for singletons
      double a = 0.0;
      for (int j : own)
        if (static_cast<std::size_t>(j) != i) a += euclidean_distance(m.rows[i], m.rows[j]);
      a /= static_cast<double>(own.size() - 1);
      double b = kInf;
      for (int c = 0; c < k; ++c) {
        if (c == labels[i]) continue;
        double d = 0.0;
        for (int j : members[c]) d += euclidean_distance(m.rows[i], m.rows[j]);
        b = std::min(b, d / static_cast<double>(members[c].size()));
      }
      acc += (b - a) / std::max(a, b);
    }
    out.silhouette = acc / static_cast<double>(n);
    out.silhouette_defined = true;
  }

  // Calinski-Harabasz and Davies-Bouldin
  std::vector<double> global(m.dim(), 0.0);
  for (const auto& r : m.rows) axpy(1.0, r.data(), global.data(), global.size());
  for (double& x : global) x /= static_cast<double>(n);
  std::vector<std::vector<double>> cent(k);
  double w = 0.0, bsum = 0.0;
  std::vector<double> spread(k, 0.0);
  for (int c = 0; c < k; ++c) {
    cent[c] = mean_of(m, members[c]);
    for (int j : members[c]) {
      w += euclidean_sq(m.rows[j], cent[c]);
      spread[c] += euclidean_distance(m.rows[j], cent[c]);
    }
    spread[c] /= static_cast<double>(members[c].size());
    bsum += static_cast<double>(members[c].size()) * euclidean_sq(cent[c], global);
  }
  if (n > static_cast<std::size_t>(k) && w > 0.0)
    out.calinski_harabasz =
        (bsum / (k - 1)) / (w / static_cast<double>(n - k));
  double db = 0.0;
  for (int c = 0; c < k; ++c) {
    double worst = 0.0;
    for (int c2 = 0; c2 < k; ++c2) {
      if (c2 == c) continue;
      double d = euclidean_distance(cent[c], cent[c2]);
      double r = d > 0.0 ? (spread[c] + spread[c2]) / d : 0.0;
      worst = std::max(worst, r);
    }
    db += worst;
  }
  out.davies_bouldin = db / static_cast<double>(k);
  return out;
}

std::vector<double> resample_linear(std::span<const double> series, std::size_t out_len) {
  if (series.empty() || out_len == 0) return {};
  std::vector<double> out(out_len);
  if (out_len == 1) {
    out[0] = series[0];
    return out;
  }
  for (std::size_t i = 0; i < out_len; ++i) {
    double t = static_cast<double>(i) * static_cast<double>(series.size() - 1) /
               static_cast<double>(out_len - 1);
    std::size_t lo = static_cast<std::size_t>(t);
    std::size_t hi = std::min(lo + 1, series.size() - 1);
    double frac = t - static_cast<double>(lo);
    out[i] = series[lo] * (1.0 - frac) + series[hi] * frac;
  }
  return out;
}

std::vector<int> transfer_labels(const ClusteringResult& fitted,
                                 const TrajectoryMatrix& m_new) {
  if (fitted.centroids.empty())
    throw std::invalid_argument("transfer_labels: fitted result has no centroids");
  const std::size_t dim = fitted.centroids.front().size();
  std::vector<int> labels;
  for (const auto& raw : m_new.rows) {
    std::vector<double> row =
        raw.size() == dim ? raw : resample_linear(raw, dim);
    double dmin = kInf;
    int arg = 0;
    for (std::size_t c = 0; c < fitted.centroids.size(); ++c) {
      double d;
      if (fitted.algorithm == "dtw")
        d = dtw_distance(row, fitted.centroids[c]);
      else if (fitted.algorithm == "sbd")
        d = sbd_distance(row, fitted.centroids[c]);
      else
        d = euclidean_distance(row, fitted.centroids[c]);
      if (d < dmin) {
        dmin = d;
        arg = static_cast<int>(c);
      }
    }
    labels.push_back(arg);
  }
  return labels;
}

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("ari: size mismatch");
  const std::size_t n = a.size();
  if (n == 0) return 1.0;
  int ka = 1 + *std::max_element(a.begin(), a.end());
  int kb = 1 + *std::max_element(b.begin(), b.end());
  std::vector<std::vector<double>> table(ka, std::vector<double>(kb, 0.0));
  std::vector<double> ra(ka, 0.0), rb(kb, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    table[a[i]][b[i]] += 1.0;
    ra[a[i]] += 1.0;
    rb[b[i]] += 1.0;
  }
  auto c2 = [](double x) { return x * (x - 1.0) / 2.0; };
  double sum_ij = 0.0, sum_a = 0.0, sum_b = 0.0;
  for (int i = 0; i < ka; ++i)
    for (int j = 0; j < kb; ++j) sum_ij += c2(table[i][j]);
  for (int i = 0; i < ka; ++i) sum_a += c2(ra[i]);
  for (int j = 0; j < kb; ++j) sum_b += c2(rb[j]);
  double total = c2(static_cast<double>(n));
  double expected = sum_a * sum_b / total;
  double max_index = (sum_a + sum_b) / 2.0;
  if (max_index == expected) return 1.0;
  return (sum_ij - expected) / (max_index - expected);
}

}  // namespace headlab
