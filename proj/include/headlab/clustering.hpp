#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace headlab {

// Per-head trajectory rows; a row may concatenate two metric series.
struct TrajectoryMatrix {
  std::vector<std::vector<double>> rows;
  std::vector<std::string> row_ids;
  std::vector<std::string> metrics;  // provenance of the (concatenated) columns
  std::vector<std::string> notes;    // imputation / dropped-row records

  std::size_t n() const { return rows.size(); }
  std::size_t dim() const { return rows.empty() ? 0 : rows.front().size(); }
  void validate() const;
};

struct ClusterMetrics {
  double silhouette = 0.0;
  bool silhouette_defined = false;
  double calinski_harabasz = 0.0;
  double davies_bouldin = 0.0;
};

struct ClusteringResult {
  std::string algorithm;
  int k = 0;
  std::vector<int> labels;
  std::vector<std::vector<double>> centroids;
  ClusterMetrics metrics;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
};

double euclidean_distance(std::span<const double> a, std::span<const double> b);
// Classic DP alignment with squared local cost; optional Sakoe-Chiba radius.
double dtw_distance(std::span<const double> a, std::span<const double> b,
                    std::optional<int> window = std::nullopt);
// 1 - max normalized cross-correlation over all integer shifts, in [0, 2].
double sbd_distance(std::span<const double> a, std::span<const double> b);

ClusteringResult kmeans_euclidean(const TrajectoryMatrix& m, int k, std::uint64_t seed,
                                  int restarts = 32);
ClusteringResult kmeans_dtw(const TrajectoryMatrix& m, int k, std::uint64_t seed,
                            int restarts = 8, int dba_iterations = 10);
ClusteringResult kmeans_sbd(const TrajectoryMatrix& m, int k, std::uint64_t seed,
                            int restarts = 8);
ClusteringResult hac_ward(const TrajectoryMatrix& m, int k);

ClusterMetrics cluster_metrics(const TrajectoryMatrix& m, const std::vector<int>& labels);

// Nearest-centroid assignment under the fitted algorithm's distance; series
// are linearly resampled when lengths differ.
std::vector<int> transfer_labels(const ClusteringResult& fitted,
                                 const TrajectoryMatrix& m_new);

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b);

// Ward merge tree (for export); leaves are row indices.
struct DendrogramNode {
  int left = -1;
  int right = -1;
  double height = 0.0;
  std::vector<int> members;
};
std::vector<DendrogramNode> hac_ward_dendrogram(const TrajectoryMatrix& m);
nlohmann::json dendrogram_to_json(const std::vector<DendrogramNode>& nodes,
                                  const std::vector<std::string>& row_ids);

std::vector<double> resample_linear(std::span<const double> series, std::size_t out_len);

}  // namespace headlab
