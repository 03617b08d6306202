#pragma once

#include <cstdint>
#include <filesystem>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace headlab {

struct CellKey {
  std::string config_hash;
  std::uint64_t step = 0;
  std::string target;
  std::string source;
  std::string metric;

  std::string file_stem() const;
  auto operator<=>(const CellKey&) const = default;
};

// Content-addressed directory of completed measurement cells. Cells are
// immutable once written; rewriting with a different value is an error.
class ResultsStore {
 public:
  explicit ResultsStore(std::filesystem::path root);

  const std::filesystem::path& root() const { return root_; }

  std::optional<nlohmann::json> get(const CellKey& key) const;
  void put(const CellKey& key, const nlohmann::json& value);
  bool contains(const CellKey& key) const;

  // All cells of one config, sorted by key.
  std::vector<std::pair<CellKey, nlohmann::json>> cells_for_config(
      const std::string& config_hash) const;

 private:
  std::filesystem::path cell_path(const CellKey& key) const;
  std::filesystem::path root_;
  mutable std::mutex write_mutex_;
};

// Strip // and /* */ comments so config files may carry them.
std::string strip_json_comments(const std::string& text);
nlohmann::json parse_json_with_comments(const std::string& text);
nlohmann::json load_json_file(const std::filesystem::path& file);

// Stable hash of the canonical (sorted-key, compact) JSON encoding.
std::string config_hash(const nlohmann::json& config);

inline constexpr const char* kToolVersion = "0.1.0";

}  // namespace headlab
