#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <random>

#include "doctest.h"
#include "headlab/clustering.hpp"

using namespace headlab;

namespace {

TrajectoryMatrix matrix_of(std::vector<std::vector<double>> rows) {
  TrajectoryMatrix m;
  m.rows = std::move(rows);
  for (std::size_t i = 0; i < m.rows.size(); ++i)
    m.row_ids.push_back("row" + std::to_string(i));
  return m;
}

// Three template curves with sigma-jitter; returns (matrix, labels).
std::pair<TrajectoryMatrix, std::vector<int>> planted_clusters(std::uint64_t seed,
                                                               double sigma,
                                                               int per_cluster = 6,
                                                               int len = 24) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, sigma);
  auto tmpl = [len](int c, int t) {
    double x = double(t) / (len - 1);
    if (c == 0) return 2.0 * x;                  // ramp
    if (c == 1) return std::sin(3.14159 * x);    // arch
    return 1.0 - x + 0.3 * std::sin(9.0 * x);    // decay with wiggle
  };
  TrajectoryMatrix m;
  std::vector<int> labels;
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < per_cluster; ++i) {
      std::vector<double> row(len);
      for (int t = 0; t < len; ++t) row[t] = tmpl(c, t) + noise(rng);
      m.rows.push_back(std::move(row));
      m.row_ids.push_back("r" + std::to_string(c) + "_" + std::to_string(i));
      labels.push_back(c);
    }
  return {m, labels};
}

}  // namespace

TEST_CASE("dtw identities") {
  std::vector<double> x{0.5, 1.0, -2.0, 0.25};
  CHECK(dtw_distance(x, x) == 0.0);
  std::vector<double> a{0, 0, 1}, b{0, 1, 1};
  CHECK(dtw_distance(a, b) == 0.0);  // warpable hand-computed DP table
  // identity path bounds dtw by the squared euclidean distance
  std::mt19937_64 rng(1);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> u(12), v(12);
    for (auto& e : u) e = std::normal_distribution<double>(0, 1)(rng);
    for (auto& e : v) e = std::normal_distribution<double>(0, 1)(rng);
    double d2 = 0.0;
    for (int i = 0; i < 12; ++i) d2 += (u[i] - v[i]) * (u[i] - v[i]);
    CHECK(dtw_distance(u, v) <= d2 + 1e-12);
    CHECK(dtw_distance(u, v) >= 0.0);
    CHECK(dtw_distance(u, v) == doctest::Approx(dtw_distance(v, u)));
  }
  // a Sakoe-Chiba window only restricts the alignment
  CHECK(dtw_distance(a, b, 1) >= dtw_distance(a, b));
  CHECK_THROWS_AS(dtw_distance(std::vector<double>{}, b), std::invalid_argument);
}

TEST_CASE("sbd identities") {
  std::vector<double> x{1.0, -0.5, 2.0, 0.0, 0.25};
  CHECK(sbd_distance(x, x) == doctest::Approx(0.0).epsilon(1e-12));
  std::vector<double> x3 = x;
  for (auto& e : x3) e *= 3.7;
  CHECK(sbd_distance(x, x3) == doctest::Approx(0.0).epsilon(1e-12));  // scale invariant
  // anti-correlation reaches the upper bound when no shift can escape it
  std::vector<double> one{3.0};
  std::vector<double> neg_one{-3.0};
  CHECK(sbd_distance(one, neg_one) == doctest::Approx(2.0).epsilon(1e-12));
  std::vector<double> nx = x;
  for (auto& e : nx) e = -e;
  CHECK(sbd_distance(x, nx) > sbd_distance(x, x3));  // still farther than aligned
  std::vector<double> zero(5, 0.0);
  CHECK_THROWS_WITH_AS(sbd_distance(x, zero), doctest::Contains("degenerate"),
                       std::invalid_argument);
}

TEST_CASE("kmeans basics: perfect split, singletons, determinism") {
  TrajectoryMatrix m = matrix_of({{0, 0, 0}, {0.01, 0, 0}, {1, 1, 1}, {0.99, 1, 1}});
  ClusteringResult r = kmeans_euclidean(m, 2, 7);
  CHECK(r.labels[0] == r.labels[1]);
  CHECK(r.labels[2] == r.labels[3]);
  CHECK(r.labels[0] != r.labels[2]);

  ClusteringResult all = kmeans_euclidean(m, 4, 7);
  std::set<int> distinct(all.labels.begin(), all.labels.end());
  CHECK(distinct.size() == 4);  // singletons; objective 0
  ClusteringResult again = kmeans_euclidean(m, 2, 7);
  CHECK(again.labels == r.labels);  // fixed seed, fixed input
  CHECK_THROWS_AS(kmeans_euclidean(m, 5, 7), std::invalid_argument);
}

TEST_CASE("all four algorithms recover planted clusters exactly") {
  auto [m, truth] = planted_clusters(3, 0.05);
  CHECK(adjusted_rand_index(kmeans_euclidean(m, 3, 1).labels, truth) == 1.0);
  CHECK(adjusted_rand_index(kmeans_dtw(m, 3, 1).labels, truth) == 1.0);
  CHECK(adjusted_rand_index(kmeans_sbd(m, 3, 1).labels, truth) == 1.0);
  CHECK(adjusted_rand_index(hac_ward(m, 3).labels, truth) == 1.0);
}

TEST_CASE("dtw kmeans tolerates time shifts where euclidean does not") {
  // Same-shape classes shifted by up to 10% of the length; euclidean sees
  // shifted narrow bumps as distant, warping does not.
  const int len = 40;
  std::mt19937_64 rng(4);
  TrajectoryMatrix m;
  std::vector<int> truth;
  auto gauss = [](double t, double c, double w) {
    return std::exp(-0.5 * std::pow((t - c) / w, 2.0));
  };
  int idx = 0;
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 6; ++i) {
      int shift = int(rng() % 9) - 4;  // +-4 = 10% of 40
      std::vector<double> row(len);
      for (int t = 0; t < len; ++t) {
        double x = 0.0;
        if (c == 0) x = gauss(t, 20 + shift, 1.5);  // single peak
        if (c == 1)
          x = 0.6 * gauss(t, 17 + shift, 1.5) + 0.6 * gauss(t, 23 + shift, 1.5);
        if (c == 2) x = -gauss(t, 20 + shift, 1.5);
        row[t] = x;
      }
      m.rows.push_back(std::move(row));
      m.row_ids.push_back("s" + std::to_string(idx++));
      truth.push_back(c);
    }
  double ari_dtw = adjusted_rand_index(kmeans_dtw(m, 3, 4).labels, truth);
  double ari_euc = adjusted_rand_index(kmeans_euclidean(m, 3, 4).labels, truth);
  CHECK(ari_dtw >= 0.9);
  CHECK(ari_euc < ari_dtw);  // shift dominates the euclidean view
}

TEST_CASE("hac ward: two groups, k=1, agreement with kmeans") {
  auto [m, truth] = planted_clusters(11, 0.05);
  ClusteringResult one = hac_ward(m, 1);
  for (int l : one.labels) CHECK(l == 0);
  ClusteringResult km = kmeans_euclidean(m, 3, 2);
  ClusteringResult hw = hac_ward(m, 3);
  CHECK(adjusted_rand_index(km.labels, hw.labels) >= 0.9);
  auto dendro = hac_ward_dendrogram(m);
  CHECK(dendro.size() == 2 * m.n() - 1);
  CHECK(dendro.back().members.size() == m.n());
  auto j = dendrogram_to_json(dendro, m.row_ids);
  CHECK(j.contains("height"));
}

TEST_CASE("cluster metrics match the hand-computed 4-point instance") {
  TrajectoryMatrix m = matrix_of({{0.0}, {1.0}, {4.0}, {5.0}});
  std::vector<int> labels{0, 0, 1, 1};
  ClusterMetrics mm = cluster_metrics(m, labels);
  REQUIRE(mm.silhouette_defined);
  CHECK(std::abs(mm.silhouette - 47.0 / 63.0) <= 1e-9);
  CHECK(std::abs(mm.calinski_harabasz - 32.0) <= 1e-9);
  CHECK(std::abs(mm.davies_bouldin - 0.25) <= 1e-9);

  // label permutation invariance
  std::vector<int> flipped{1, 1, 0, 0};
  ClusterMetrics mm2 = cluster_metrics(m, flipped);
  CHECK(mm2.silhouette == doctest::Approx(mm.silhouette));
  CHECK(mm2.calinski_harabasz == doctest::Approx(mm.calinski_harabasz));
  CHECK(mm2.davies_bouldin == doctest::Approx(mm.davies_bouldin));
}

TEST_CASE("degenerate metric conventions") {
  // identical singletons: zero centroid distance contributes zero to DB and
  // the silhouette is undefined
  TrajectoryMatrix m = matrix_of({{5.0}, {5.0}});
  ClusterMetrics mm = cluster_metrics(m, {0, 1});
  CHECK(!mm.silhouette_defined);
  CHECK(mm.davies_bouldin == 0.0);
  CHECK_THROWS_AS(cluster_metrics(m, {0, 0, 0}), std::invalid_argument);
}

TEST_CASE("transfer labels: self, planted, empty, resampled") {
  auto [m, truth] = planted_clusters(17, 0.05);
  ClusteringResult fit = kmeans_euclidean(m, 3, 9);
  CHECK(transfer_labels(fit, m) == fit.labels);  // self-transfer reproduces

  auto [m2, truth2] = planted_clusters(18, 0.05);
  std::vector<int> moved = transfer_labels(fit, m2);
  CHECK(adjusted_rand_index(moved, truth2) == 1.0);

  TrajectoryMatrix empty;
  CHECK(transfer_labels(fit, empty).empty());

  // different length: rows resampled by linear interpolation
  TrajectoryMatrix longer;
  for (const auto& row : m2.rows) longer.rows.push_back(resample_linear(row, 48));
  for (std::size_t i = 0; i < longer.rows.size(); ++i) longer.row_ids.push_back("x");
  std::vector<int> moved2 = transfer_labels(fit, longer);
  CHECK(adjusted_rand_index(moved2, truth2) == 1.0);

  ClusteringResult no_centroids;
  CHECK_THROWS_AS(transfer_labels(no_centroids, m2), std::invalid_argument);
}

TEST_CASE("adjusted rand index") {
  std::vector<int> a{0, 0, 1, 1, 2, 2};
  CHECK(adjusted_rand_index(a, a) == 1.0);
  std::vector<int> relabeled{2, 2, 0, 0, 1, 1};
  CHECK(adjusted_rand_index(a, relabeled) == 1.0);
  std::vector<int> anti{0, 1, 0, 1, 0, 1};
  CHECK(adjusted_rand_index(a, anti) < 0.2);
  CHECK_THROWS_AS(adjusted_rand_index(a, std::vector<int>{0}), std::invalid_argument);
}

TEST_CASE("matrix validation rejects ragged and non-finite rows") {
  TrajectoryMatrix bad = matrix_of({{1.0, 2.0}, {1.0}});
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  TrajectoryMatrix nan_row = matrix_of({{1.0, std::nan("")}});
  CHECK_THROWS_AS(nan_row.validate(), std::invalid_argument);
}
