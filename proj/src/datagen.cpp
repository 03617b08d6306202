#include "headlab/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>

namespace headlab {

using nlohmann::json;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  return splitmix64(a ^ splitmix64(b + 0x9e3779b97f4a7c15ULL));
}

std::uint64_t hash_string(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

const char* pattern_kind_name(PatternKind k) {
  switch (k) {
    case PatternKind::ngram: return "ngram";
    case PatternKind::skip_ngram: return "skip_ngram";
    case PatternKind::dyck: return "dyck";
    case PatternKind::induction: return "induction";
  }
  return "?";
}

std::optional<std::pair<int, bool>> PatternSpec::bracket_of(TokenId t) const {
  if (t < 1 || t > static_cast<TokenId>(2 * dyck_kinds)) return std::nullopt;
  int kind = (t - 1) / 2;
  bool is_close = ((t - 1) % 2) == 1;
  return std::make_pair(kind, is_close);
}

void PatternSpec::validate() const {
  const double ws[] = {w_ngram, w_skip, w_dyck, w_induction, w_filler};
  double total = 0.0;
  for (double w : ws) {
    if (w < 0.0) throw std::invalid_argument("pattern: mixture weight negative");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9)
    throw std::invalid_argument("pattern: mixture weights sum to " + std::to_string(total));
  if (vocab < 64) throw std::invalid_argument("pattern: vocab must be >= 64");
  if (dyck_kinds < 1 || 2 * dyck_kinds + 1 > static_cast<int>(vocab))
    throw std::invalid_argument("pattern: dyck_kinds out of range");
  if (filler_base == 0 || filler_base >= vocab)
    throw std::invalid_argument("pattern: filler_base out of range");
  for (const auto& [toks, w] : ngrams) {
    if (toks.size() < 2 || toks.size() > 8) throw std::invalid_argument("pattern: ngram length");
    for (TokenId t : toks)
      if (t >= vocab) throw std::invalid_argument("pattern: ngram token out of vocab");
    if (w <= 0) throw std::invalid_argument("pattern: ngram weight");
  }
  for (const auto& s : skips) {
    if (s.tail.empty() || s.gap_min < 1 || s.gap_max < s.gap_min)
      throw std::invalid_argument("pattern: bad skip template");
    if (s.head >= vocab) throw std::invalid_argument("pattern: skip head out of vocab");
    for (TokenId t : s.tail)
      if (t >= vocab) throw std::invalid_argument("pattern: skip tail out of vocab");
  }
  if (induction_len_min < 2 || induction_len_max < induction_len_min)
    throw std::invalid_argument("pattern: induction length range");
  if (induction_gap_min < 1 || induction_gap_max < induction_gap_min)
    throw std::invalid_argument("pattern: induction gap range");
}

PatternSpec PatternSpec::example_tables(std::size_t vocab, std::uint64_t seed) {
  PatternSpec spec;
  spec.vocab = vocab;
  std::mt19937_64 rng(mix_seed(seed, 0x7ab7e5));
  const TokenId bracket_end = static_cast<TokenId>(1 + 2 * spec.dyck_kinds);
  const TokenId ngram_base = bracket_end;  // token 0 reserved, brackets next
  const std::size_t ngram_alpha = std::max<std::size_t>(8, vocab / 16);
  const TokenId skip_base = static_cast<TokenId>(ngram_base + ngram_alpha);
  const std::size_t skip_alpha = std::max<std::size_t>(6, vocab / 32);
  const TokenId ind_base = static_cast<TokenId>(skip_base + skip_alpha);
  const std::size_t ind_alpha = std::max<std::size_t>(12, vocab / 8);
  spec.filler_base = static_cast<TokenId>(ind_base + ind_alpha);
  if (spec.filler_base + 8 > vocab)
    throw std::invalid_argument("pattern: vocab too small for example tables");

  auto pick = [&rng](TokenId base, std::size_t width) {
    return static_cast<TokenId>(base + rng() % width);
  };
  const int n_ngrams = 48;
  for (int i = 0; i < n_ngrams; ++i) {
    std::size_t len = 2 + rng() % 3;
    std::vector<TokenId> toks;
    for (std::size_t j = 0; j < len; ++j) toks.push_back(pick(ngram_base, ngram_alpha));
    double w = 1.0 / std::pow(static_cast<double>(i + 1), 0.8);
    spec.ngrams.emplace_back(std::move(toks), w);
  }
  const int n_skips = 8;
  for (int i = 0; i < n_skips; ++i) {
    SkipTemplate t;
    t.head = pick(skip_base, skip_alpha / 2);
    t.gap_min = 1;
    t.gap_max = 6;
    std::size_t tail_len = 1 + rng() % 2;
    for (std::size_t j = 0; j < tail_len; ++j)
      t.tail.push_back(pick(static_cast<TokenId>(skip_base + skip_alpha / 2),
                            skip_alpha - skip_alpha / 2));
    spec.skips.push_back(std::move(t));
  }
  spec.induction_len_min = 2;
  spec.induction_len_max = 5;
  spec.induction_gap_min = 3;
  spec.induction_gap_max = 12;
  // induction grams are drawn from [ind_base, ind_base + ind_alpha)
  spec.induction_base = ind_base;
  spec.induction_alpha = ind_alpha;
  spec.validate();
  return spec;
}

json PatternSpec::to_json() const {
  json j;
  j["vocab"] = vocab;
  j["dyck"] = {{"kinds", dyck_kinds}, {"max_depth", dyck_max_depth}, {"max_len", dyck_max_len}};
  json ng = json::array();
  for (const auto& [toks, w] : ngrams) ng.push_back({{"tokens", toks}, {"weight", w}});
  j["ngrams"] = ng;
  json sk = json::array();
  for (const auto& s : skips)
    sk.push_back({{"head", s.head}, {"gap_min", s.gap_min}, {"gap_max", s.gap_max}, {"tail", s.tail}});
  j["skips"] = sk;
  j["induction"] = {{"len_min", induction_len_min},
                    {"len_max", induction_len_max},
                    {"gap_min", induction_gap_min},
                    {"gap_max", induction_gap_max},
                    {"alphabet_base", induction_base},
                    {"alphabet_size", induction_alpha}};
  j["mixture"] = {{"ngram", w_ngram}, {"skip_ngram", w_skip}, {"dyck", w_dyck},
                  {"induction", w_induction}, {"filler", w_filler}};
  j["zipf_s"] = zipf_s;
  j["filler_base"] = filler_base;
  return j;
}

PatternSpec PatternSpec::from_json(const json& j) {
  PatternSpec s;
  s.vocab = j.at("vocab").get<std::size_t>();
  if (j.contains("dyck")) {
    s.dyck_kinds = j["dyck"].value("kinds", s.dyck_kinds);
    s.dyck_max_depth = j["dyck"].value("max_depth", s.dyck_max_depth);
    s.dyck_max_len = j["dyck"].value("max_len", s.dyck_max_len);
  }
  if (j.contains("ngrams")) {
    for (const auto& e : j["ngrams"])
      s.ngrams.emplace_back(e.at("tokens").get<std::vector<TokenId>>(),
                            e.at("weight").get<double>());
  }
  if (j.contains("skips")) {
    for (const auto& e : j["skips"]) {
      SkipTemplate t;
      t.head = e.at("head").get<TokenId>();
      t.gap_min = e.value("gap_min", 1);
      t.gap_max = e.value("gap_max", 6);
      t.tail = e.at("tail").get<std::vector<TokenId>>();
      s.skips.push_back(std::move(t));
    }
  }
  if (j.contains("induction")) {
    const auto& ind = j["induction"];
    s.induction_len_min = ind.value("len_min", s.induction_len_min);
    s.induction_len_max = ind.value("len_max", s.induction_len_max);
    s.induction_gap_min = ind.value("gap_min", s.induction_gap_min);
    s.induction_gap_max = ind.value("gap_max", s.induction_gap_max);
    s.induction_base = ind.value("alphabet_base", 0);
    s.induction_alpha = ind.value("alphabet_size", 0);
  }
  if (j.contains("mixture")) {
    const auto& m = j["mixture"];
    s.w_ngram = m.value("ngram", s.w_ngram);
    s.w_skip = m.value("skip_ngram", s.w_skip);
    s.w_dyck = m.value("dyck", s.w_dyck);
    s.w_induction = m.value("induction", s.w_induction);
    s.w_filler = m.value("filler", s.w_filler);
  }
  s.zipf_s = j.value("zipf_s", s.zipf_s);
  s.filler_base = j.value("filler_base", s.filler_base);
  if (s.induction_base == 0) {
    s.induction_base = s.filler_base > 64 ? s.filler_base - 48 : s.filler_base / 2;
    s.induction_alpha = s.filler_base - s.induction_base;
  }
  s.validate();
  return s;
}

namespace {

class ZipfSampler {
 public:
  ZipfSampler(std::size_t n, double s) : cdf_(n) {
    double acc = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      acc += 1.0 / std::pow(static_cast<double>(r + 1), s);
      cdf_[r] = acc;
    }
    for (auto& c : cdf_) c /= acc;
  }
  std::size_t operator()(std::mt19937_64& rng) const {
    double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    return static_cast<std::size_t>(
        std::upper_bound(cdf_.begin(), cdf_.end(), u) - cdf_.begin());
  }

 private:
  std::vector<double> cdf_;
};

class SyntheticImpl : public DataSource::Impl {
 public:
  SyntheticImpl(PatternSpec spec, std::uint64_t seed)
      : spec_(std::move(spec)),
        seed_(seed),
        zipf_(spec_.vocab - spec_.filler_base, spec_.zipf_s) {
    spec_.validate();
    double acc = 0.0;
    for (double w : {spec_.w_ngram, spec_.w_skip, spec_.w_dyck, spec_.w_induction,
                     spec_.w_filler})
      mix_cdf_.push_back(acc += w);
    double total_ng = 0.0;
    for (const auto& [toks, w] : spec_.ngrams) ngram_cdf_.push_back(total_ng += w);
    for (auto& c : ngram_cdf_) c /= total_ng;
  }

  void fill(TokenId* out, std::size_t k, std::uint64_t seq_index,
            std::vector<Annotation>* ann) const override {
    std::mt19937_64 rng(mix_seed(seed_, seq_index));
    std::size_t pos = 0;
    auto filler_tok = [&] {
      return static_cast<TokenId>(spec_.filler_base + zipf_(rng));
    };
    auto unif = [&](int lo, int hi) {  // inclusive
      return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
    };
    while (pos < k) {
      const std::size_t remaining = k - pos;
      if (remaining == 1) {
        out[pos++] = filler_tok();
        break;
      }
      double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
      int choice = 4;
      for (int i = 0; i < 5; ++i)
        if (u < mix_cdf_[i]) {
          choice = i;
          break;
        }
      switch (choice) {
        case 0: {  // ngram
          double v = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
          std::size_t idx = static_cast<std::size_t>(
              std::upper_bound(ngram_cdf_.begin(), ngram_cdf_.end(), v) -
              ngram_cdf_.begin());
          if (idx >= spec_.ngrams.size()) idx = spec_.ngrams.size() - 1;
          const auto& toks = spec_.ngrams[idx].first;
          if (toks.size() > remaining) {
            out[pos++] = filler_tok();
            break;
          }
          Annotation a{PatternKind::ngram, pos, pos + toks.size(), pos, {}, toks};
          for (std::size_t j = 0; j < toks.size(); ++j) {
            if (j > 0) a.predictable.push_back(pos + j);
            out[pos + j] = toks[j];
          }
          pos += toks.size();
          if (ann) ann->push_back(std::move(a));
          break;
        }
        case 1: {  // skip n-gram
          std::vector<std::size_t> fit;
          for (std::size_t i = 0; i < spec_.skips.size(); ++i) {
            const auto& t = spec_.skips[i];
            if (1 + static_cast<std::size_t>(t.gap_min) + t.tail.size() <= remaining)
              fit.push_back(i);
          }
          if (fit.empty()) {
            out[pos++] = filler_tok();
            break;
          }
          const auto& t = spec_.skips[fit[rng() % fit.size()]];
          int gap_cap = static_cast<int>(remaining - 1 - t.tail.size());
          int gap = unif(t.gap_min, std::min(t.gap_max, gap_cap));
          Annotation a{PatternKind::skip_ngram, pos,
                       pos + 1 + static_cast<std::size_t>(gap) + t.tail.size(), pos,
                       {}, {}};
          a.key.push_back(t.head);
          for (TokenId tt : t.tail) a.key.push_back(tt);
          out[pos++] = t.head;
          for (int g = 0; g < gap; ++g) out[pos++] = filler_tok();
          for (TokenId tt : t.tail) {
            a.predictable.push_back(pos);
            out[pos++] = tt;
          }
          if (ann) ann->push_back(std::move(a));
          break;
        }
        case 2: {  // dyck
          std::size_t cap = std::min<std::size_t>(spec_.dyck_max_len, remaining) & ~1UL;
          if (cap < 2) {
            out[pos++] = filler_tok();
            break;
          }
          std::size_t len = 2 * (1 + rng() % (cap / 2));
          Annotation a{PatternKind::dyck, pos, pos + len, pos, {}, {}};
          std::vector<int> stack;
          std::size_t emitted = 0;
          while (emitted < len) {
            std::size_t space = len - emitted;
            bool can_open = stack.size() < static_cast<std::size_t>(spec_.dyck_max_depth) &&
                            space >= stack.size() + 2;
            bool must_close = !stack.empty() && space <= stack.size();
            bool open = can_open && (stack.empty() || (!must_close && (rng() & 1)));
            if (open) {
              int kind = static_cast<int>(rng() % spec_.dyck_kinds);
              stack.push_back(kind);
              out[pos + emitted] = spec_.dyck_open(kind);
            } else {
              int kind = stack.back();
              stack.pop_back();
              a.predictable.push_back(pos + emitted);
              out[pos + emitted] = spec_.dyck_close(kind);
            }
            ++emitted;
          }
          a.key.assign(out + pos, out + pos + len);
          pos += len;
          if (ann) ann->push_back(std::move(a));
          break;
        }
        case 3: {  // induction
          int m = unif(spec_.induction_len_min, spec_.induction_len_max);
          int gap = unif(spec_.induction_gap_min, spec_.induction_gap_max);
          std::size_t unit = static_cast<std::size_t>(2 * m + gap);
          if (unit <= remaining) {
            Annotation a{PatternKind::induction, pos, pos + unit, pos, {}, {}};
            for (int j = 0; j < m; ++j) {
              TokenId t = static_cast<TokenId>(spec_.induction_base + rng() % spec_.induction_alpha);
              a.key.push_back(t);
              out[pos + j] = t;
            }
            for (int g = 0; g < gap; ++g) out[pos + m + g] = filler_tok();
            std::size_t second = pos + m + gap;
            for (int j = 0; j < m; ++j) {
              out[second + j] = a.key[j];
              if (j > 0) a.predictable.push_back(second + j);
            }
            pos += unit;
            if (ann) ann->push_back(std::move(a));
          } else if (pos >= 2) {
            // Echo an earlier substring: a second occurrence whose first
            // occurrence is already in the context.
            std::size_t me = std::min<std::size_t>(
                {static_cast<std::size_t>(m), pos, remaining});
            if (me < 2) {
              out[pos++] = filler_tok();
              break;
            }
            std::size_t u0 = rng() % (pos - me + 1);
            Annotation a{PatternKind::induction, pos, pos + me, u0, {}, {}};
            for (std::size_t j = 0; j < me; ++j) {
              out[pos + j] = out[u0 + j];
              a.key.push_back(out[u0 + j]);
              if (j > 0) a.predictable.push_back(pos + j);
            }
            pos += me;
            if (ann) ann->push_back(std::move(a));
          } else {
            out[pos++] = filler_tok();
          }
          break;
        }
        default: {  // filler run
          int run = unif(2, 6);
          for (int j = 0; j < run && pos < k; ++j) out[pos++] = filler_tok();
          break;
        }
      }
    }
  }

 private:
  PatternSpec spec_;
  std::uint64_t seed_;
  ZipfSampler zipf_;
  std::vector<double> mix_cdf_;
  std::vector<double> ngram_cdf_;
};

class CorpusImpl : public DataSource::Impl {
 public:
  CorpusImpl(std::vector<TokenId> tokens, std::size_t k, std::uint64_t seed)
      : tokens_(std::move(tokens)), seed_(seed) {
    if (tokens_.size() < k)
      throw std::invalid_argument("corpus: " + std::to_string(tokens_.size()) +
                                  " tokens < context length " + std::to_string(k));
  }
  void fill(TokenId* out, std::size_t k, std::uint64_t seq_index,
            std::vector<Annotation>* /*ann*/) const override {
    std::mt19937_64 rng(mix_seed(seed_, seq_index));
    std::size_t offset = rng() % (tokens_.size() - k + 1);
    std::copy(tokens_.begin() + offset, tokens_.begin() + offset + k, out);
  }

 private:
  std::vector<TokenId> tokens_;
  std::uint64_t seed_;
};

}  // namespace

TokenBatch DataSource::sample_batch(std::size_t n, std::uint64_t batch_index) const {
  if (!valid()) throw std::logic_error("sample_batch: empty data source");
  if (n < 1) throw std::invalid_argument("sample_batch: n must be >= 1");
  TokenBatch b;
  b.n = n;
  b.length = k_;
  b.tokens.resize(n * k_);
  b.annotations.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    impl_->fill(b.tokens.data() + i * k_, k_, batch_index * n + i, &b.annotations[i]);
  return b;
}

DataSource synthetic_source(const PatternSpec& spec, std::size_t k, std::uint64_t seed) {
  return DataSource(std::make_shared<SyntheticImpl>(spec, seed), k, spec.vocab,
                    "synthetic");
}

DataSource corpus_source(std::vector<TokenId> tokens, std::size_t k, std::size_t vocab,
                         std::uint64_t seed) {
  return DataSource(std::make_shared<CorpusImpl>(std::move(tokens), k, seed), k, vocab,
                    "corpus");
}

DataSource corpus_file_source(const std::filesystem::path& u16_file, std::size_t k,
                              std::size_t vocab, std::uint64_t seed) {
  std::ifstream in(u16_file, std::ios::binary);
  if (!in) throw std::runtime_error("corpus: cannot open " + u16_file.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
  std::vector<TokenId> toks(bytes.size() / 2);
  for (std::size_t i = 0; i < toks.size(); ++i) {
    toks[i] = static_cast<TokenId>(static_cast<unsigned char>(bytes[2 * i]) |
                                   (static_cast<unsigned char>(bytes[2 * i + 1]) << 8));
    if (toks[i] >= vocab)
      throw std::runtime_error("corpus: token " + std::to_string(toks[i]) +
                               " out of vocab at index " + std::to_string(i));
  }
  return corpus_source(std::move(toks), k, vocab, seed);
}

}  // namespace headlab
