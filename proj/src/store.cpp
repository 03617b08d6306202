#include "headlab/store.hpp"

#include <fstream>
#include <sstream>

#include "headlab/datagen.hpp"

namespace headlab {

using nlohmann::json;

std::string CellKey::file_stem() const {
  std::ostringstream os;
  os << config_hash << "_s" << step << "_" << target << "_" << source << "_" << metric;
  std::string raw = os.str();
  for (char& c : raw)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '-') c = '-';
  std::ostringstream h;
  h << std::hex << hash_string(raw);
  return raw.substr(0, 96) + "_" + h.str();
}

ResultsStore::ResultsStore(std::filesystem::path root) : root_(std::move(root)) {
  std::filesystem::create_directories(root_ / "cells");
}

std::filesystem::path ResultsStore::cell_path(const CellKey& key) const {
  return root_ / "cells" / (key.file_stem() + ".json");
}

std::optional<json> ResultsStore::get(const CellKey& key) const {
  auto p = cell_path(key);
  std::ifstream in(p);
  if (!in) return std::nullopt;
  json j = json::parse(in);
  return j.at("value");
}

bool ResultsStore::contains(const CellKey& key) const {
  return std::filesystem::exists(cell_path(key));
}

void ResultsStore::put(const CellKey& key, const json& value) {
  std::lock_guard<std::mutex> lock(write_mutex_);
  auto p = cell_path(key);
  if (std::filesystem::exists(p)) {
    std::ifstream in(p);
    json existing = json::parse(in);
    if (existing.at("value") != value)
      throw std::runtime_error("store: cell " + key.file_stem() +
                               " already holds a different value");
    return;
  }
  json cell;
  cell["key"] = {{"config_hash", key.config_hash}, {"step", key.step},
                 {"target", key.target},           {"source", key.source},
                 {"metric", key.metric}};
  cell["value"] = value;
  cell["tool_version"] = kToolVersion;
  // Atomic publish: write to a temp file, then rename.
  auto tmp = p;
  tmp += ".tmp";
  {
    std::ofstream out(tmp);
    out << cell.dump(2) << "\n";
  }
  std::filesystem::rename(tmp, p);
}

std::vector<std::pair<CellKey, json>> ResultsStore::cells_for_config(
    const std::string& hash) const {
  std::vector<std::pair<CellKey, json>> out;
  auto dir = root_ / "cells";
  if (!std::filesystem::exists(dir)) return out;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.path().extension() != ".json") continue;
    std::ifstream in(entry.path());
    json j;
    try {
      j = json::parse(in);
    } catch (const json::parse_error&) {
      continue;  // ignore partial writes
    }
    if (!j.contains("key")) continue;
    const auto& k = j["key"];
    if (k.value("config_hash", "") != hash) continue;
    CellKey key;
    key.config_hash = hash;
    key.step = k.value("step", 0ULL);
    key.target = k.value("target", "");
    key.source = k.value("source", "");
    key.metric = k.value("metric", "");
    out.emplace_back(std::move(key), j.at("value"));
  }
  std::sort(out.begin(), out.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  return out;
}

std::string strip_json_comments(const std::string& text) {
  std::string out;
  out.reserve(text.size());
  bool in_string = false, escaped = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    char c = text[i];
    if (in_string) {
      out.push_back(c);
      if (escaped)
        escaped = false;
      else if (c == '\\')
        escaped = true;
      else if (c == '"')
        in_string = false;
      continue;
    }
    if (c == '"') {
      in_string = true;
      out.push_back(c);
      continue;
    }
    if (c == '/' && i + 1 < text.size() && text[i + 1] == '/') {
      while (i < text.size() && text[i] != '\n') ++i;
      if (i < text.size()) out.push_back('\n');
      continue;
    }
    if (c == '/' && i + 1 < text.size() && text[i + 1] == '*') {
      i += 2;
      while (i + 1 < text.size() && !(text[i] == '*' && text[i + 1] == '/')) ++i;
      ++i;
      continue;
    }
    out.push_back(c);
  }
  return out;
}

json parse_json_with_comments(const std::string& text) {
  return json::parse(strip_json_comments(text));
}

json load_json_file(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot open " + file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_json_with_comments(ss.str());
}

std::string config_hash(const json& config) {
  // nlohmann::json orders object keys, so dump() is canonical.
  std::string canon = config.dump();
  std::uint64_t h1 = hash_string(canon);
  std::uint64_t h2 = hash_string(canon + "#2");
  std::ostringstream os;
  os << std::hex << h1 << h2;
  return os.str().substr(0, 16);
}

}  // namespace headlab
