#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace headlab {

using TokenId = std::uint16_t;

enum class PatternKind { ngram, skip_ngram, dyck, induction };

const char* pattern_kind_name(PatternKind k);

// Side-channel record of one planted pattern instance. `predictable` lists
// absolute positions whose token is implied by the pattern (for induction,
// the copyable tail of the second occurrence).
struct Annotation {
  PatternKind kind;
  std::size_t begin = 0;
  std::size_t end = 0;        // one past the last token of the instance
  std::size_t ref_begin = 0;  // induction: start of the first occurrence
  std::vector<std::size_t> predictable;
  std::vector<TokenId> key;  // pattern identity used for multigram counting
};

struct SkipTemplate {
  TokenId head = 0;
  int gap_min = 1;
  int gap_max = 6;
  std::vector<TokenId> tail;
};

// Token-space layout and tables for the synthetic corpus. Bracket tokens are
// reserved exclusively for Dyck spans so open/close roles stay unambiguous.
struct PatternSpec {
  std::size_t vocab = 512;
  int dyck_kinds = 3;
  int dyck_max_depth = 4;
  int dyck_max_len = 12;
  std::vector<std::pair<std::vector<TokenId>, double>> ngrams;
  std::vector<SkipTemplate> skips;
  int induction_len_min = 2;
  int induction_len_max = 5;
  int induction_gap_min = 3;
  int induction_gap_max = 12;
  // Mixture over {ngram, skip, dyck, induction, filler}; nonnegative, sums to 1.
  double w_ngram = 0.2;
  double w_skip = 0.1;
  double w_dyck = 0.15;
  double w_induction = 0.35;
  double w_filler = 0.2;
  double zipf_s = 1.1;
  TokenId filler_base = 0;  // derived when 0
  TokenId induction_base = 0;  // alphabet for fresh induction grams
  std::size_t induction_alpha = 0;

  TokenId dyck_open(int kind) const { return static_cast<TokenId>(1 + 2 * kind); }
  TokenId dyck_close(int kind) const { return static_cast<TokenId>(2 + 2 * kind); }
  // >= 0 when t is a bracket; is_close set accordingly.
  std::optional<std::pair<int, bool>> bracket_of(TokenId t) const;

  void validate() const;
  // Tables filled from a seed: ngrams/skips over dedicated alphabet ranges.
  static PatternSpec example_tables(std::size_t vocab, std::uint64_t seed);

  nlohmann::json to_json() const;
  static PatternSpec from_json(const nlohmann::json& j);
};

struct TokenBatch {
  std::size_t n = 0;
  std::size_t length = 0;  // K
  std::vector<TokenId> tokens;  // row-major n x K
  std::vector<std::vector<Annotation>> annotations;  // empty for corpus sources

  const TokenId* seq(std::size_t i) const { return tokens.data() + i * length; }
};

// A replayable distribution over length-K token sequences. Sampling is a
// pure function of (seed, sequence index); batch b of size n covers indices
// [b*n, (b+1)*n).
class DataSource {
 public:
  struct Impl {
    virtual ~Impl() = default;
    virtual void fill(TokenId* out, std::size_t k, std::uint64_t seq_index,
                      std::vector<Annotation>* ann) const = 0;
  };

  DataSource() = default;
  DataSource(std::shared_ptr<const Impl> impl, std::size_t k, std::size_t vocab,
             std::string name)
      : impl_(std::move(impl)), k_(k), vocab_(vocab), name_(std::move(name)) {}

  bool valid() const { return impl_ != nullptr; }
  std::size_t context_length() const { return k_; }
  std::size_t vocab() const { return vocab_; }
  const std::string& name() const { return name_; }

  TokenBatch sample_batch(std::size_t n, std::uint64_t batch_index) const;

 private:
  std::shared_ptr<const Impl> impl_;
  std::size_t k_ = 0;
  std::size_t vocab_ = 0;
  std::string name_;
};

DataSource synthetic_source(const PatternSpec& spec, std::size_t k, std::uint64_t seed);
// Pre-tokenized u16 binary or raw token vector; sequences are random windows.
DataSource corpus_source(std::vector<TokenId> tokens, std::size_t k, std::size_t vocab,
                         std::uint64_t seed);
DataSource corpus_file_source(const std::filesystem::path& u16_file, std::size_t k,
                              std::size_t vocab, std::uint64_t seed);

// Deterministic per-stream RNG helpers shared across the project.
std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);
std::uint64_t hash_string(const std::string& s);

}  // namespace headlab
