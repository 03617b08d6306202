#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "headlab/datagen.hpp"

namespace headlab {

// Byte-level tokenizer with a learned pair-merge table. Tokens 0..255 are raw
// bytes; merges extend the vocabulary up to the configured size.
class Tokenizer {
 public:
  Tokenizer() = default;

  static Tokenizer train(const std::string& text, std::size_t vocab_size);

  std::vector<TokenId> encode(const std::string& text) const;
  std::string decode(const std::vector<TokenId>& ids) const;

  std::size_t vocab_size() const { return 256 + merges_.size(); }
  std::string hash() const;

  void save(const std::filesystem::path& file) const;
  static Tokenizer load(const std::filesystem::path& file);

 private:
  // merge i produces token 256+i from (first, second)
  std::vector<std::pair<TokenId, TokenId>> merges_;
};

}  // namespace headlab
