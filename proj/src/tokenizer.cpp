#include "headlab/tokenizer.hpp"

#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace headlab {

using nlohmann::json;

Tokenizer Tokenizer::train(const std::string& text, std::size_t vocab_size) {
  if (vocab_size < 256) throw std::invalid_argument("tokenizer: vocab_size must be >= 256");
  if (vocab_size > 65536) throw std::invalid_argument("tokenizer: vocab_size too large");
  Tokenizer tok;
  std::vector<TokenId> ids(text.size());
  for (std::size_t i = 0; i < text.size(); ++i)
    ids[i] = static_cast<unsigned char>(text[i]);
  while (tok.vocab_size() < vocab_size) {
    std::map<std::pair<TokenId, TokenId>, std::size_t> counts;
    for (std::size_t i = 0; i + 1 < ids.size(); ++i)
      ++counts[{ids[i], ids[i + 1]}];
    if (counts.empty()) break;
    auto best = counts.begin();
    for (auto it = counts.begin(); it != counts.end(); ++it)
      if (it->second > best->second) best = it;
    if (best->second < 2) break;
    const TokenId merged = static_cast<TokenId>(tok.vocab_size());
    const auto pair = best->first;
    tok.merges_.push_back(pair);
    std::vector<TokenId> next;
    next.reserve(ids.size());
    for (std::size_t i = 0; i < ids.size();) {
      if (i + 1 < ids.size() && ids[i] == pair.first && ids[i + 1] == pair.second) {
        next.push_back(merged);
        i += 2;
      } else {
        next.push_back(ids[i]);
        ++i;
      }
    }
    ids = std::move(next);
  }
  return tok;
}

std::vector<TokenId> Tokenizer::encode(const std::string& text) const {
  std::vector<TokenId> ids(text.size());
  for (std::size_t i = 0; i < text.size(); ++i)
    ids[i] = static_cast<unsigned char>(text[i]);
  for (std::size_t m = 0; m < merges_.size(); ++m) {
    const TokenId merged = static_cast<TokenId>(256 + m);
    const auto& pair = merges_[m];
    std::vector<TokenId> next;
    next.reserve(ids.size());
    for (std::size_t i = 0; i < ids.size();) {
      if (i + 1 < ids.size() && ids[i] == pair.first && ids[i + 1] == pair.second) {
        next.push_back(merged);
        i += 2;
      } else {
        next.push_back(ids[i]);
        ++i;
      }
    }
    ids = std::move(next);
  }
  return ids;
}

std::string Tokenizer::decode(const std::vector<TokenId>& ids) const {
  std::string out;
  // Expand a token to bytes recursively through the merge table.
  std::vector<TokenId> stack;
  for (auto it = ids.begin(); it != ids.end(); ++it) {
    stack.push_back(*it);
    while (!stack.empty()) {
      TokenId t = stack.back();
      stack.pop_back();
      if (t < 256) {
        out.push_back(static_cast<char>(t));
      } else {
        std::size_t m = t - 256;
        if (m >= merges_.size()) throw std::out_of_range("tokenizer: unknown token");
        stack.push_back(merges_[m].second);
        stack.push_back(merges_[m].first);
      }
    }
  }
  return out;
}

std::string Tokenizer::hash() const {
  std::ostringstream os;
  for (const auto& [a, b] : merges_) os << a << ',' << b << ';';
  std::ostringstream hex;
  hex << std::hex << hash_string(os.str());
  return hex.str();
}

void Tokenizer::save(const std::filesystem::path& file) const {
  json j;
  j["kind"] = "byte_bpe";
  json merges = json::array();
  for (const auto& [a, b] : merges_) merges.push_back({a, b});
  j["merges"] = merges;
  std::ofstream out(file);
  out << j.dump(2) << "\n";
}

Tokenizer Tokenizer::load(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("tokenizer: cannot open " + file.string());
  json j = json::parse(in);
  Tokenizer tok;
  for (const auto& m : j.at("merges"))
    tok.merges_.emplace_back(m.at(0).get<TokenId>(), m.at(1).get<TokenId>());
  return tok;
}

}  // namespace headlab
