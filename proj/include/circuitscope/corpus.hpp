#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

namespace circuitscope {

// A is the "German-like" language whose context neuron the pipeline looks
// for; B is the reference ("English-like") language.
enum class Language { A, B };

char language_code(Language l);
Language parse_language(std::string_view s);

struct TokenRange {
  int begin = 0;
  int end = 0;  // exclusive

  int size() const { return end - begin; }
  bool contains(int id) const { return id >= begin && id < end; }
  bool overlaps(const TokenRange& o) const { return begin < o.end && o.begin < end; }
  bool operator==(const TokenRange&) const = default;
};

using Trigram = std::array<int, 3>;

struct LanguageSpec {
  Language label = Language::A;
  TokenRange exclusive;
  TokenRange shared;
  double zipf_exponent = 1.0;
  std::vector<Trigram> planted_trigrams;
  double p_tri = 0.05;

  // Tokens in Zipf rank order: exclusive and shared ids interleaved in
  // proportion to the slice sizes, each slice in ascending id order.
  std::vector<int> rank_order() const;
  // Target unigram probabilities of the Zipf component, aligned to rank_order().
  std::vector<double> zipf_probabilities() const;

  bool operator==(const LanguageSpec&) const = default;
};

struct CorpusSpec {
  LanguageSpec a;
  LanguageSpec b;
  int vocab_size = 512;
  // Ids [0, non_content) are punctuation-like: shared and excluded by the
  // content filter.
  int non_content = 16;

  void validate() const;
  const LanguageSpec& language(Language l) const { return l == Language::A ? a : b; }

  // 512-token layout: 0-15 non-content, 16-95 shared content, 96-303
  // A-exclusive, 304-511 B-exclusive, 8 planted trigrams per language.
  static CorpusSpec default_spec();

  bool operator==(const CorpusSpec&) const = default;
};

void to_json(nlohmann::json& j, const CorpusSpec& s);
void from_json(const nlohmann::json& j, CorpusSpec& s);

struct Sequence {
  std::vector<int> tokens;
  Language language = Language::A;
  bool operator==(const Sequence&) const = default;
};

struct Corpus {
  std::vector<Sequence> sequences;
  std::uint64_t seed = 0;
  int vocab_size = 0;
  // One flag per token id; true for punctuation-like / non-alphabetic ids.
  std::vector<bool> non_content;

  std::vector<std::vector<int>> tokens_of(Language l) const;
  std::size_t count(Language l) const;
  bool is_content(int id) const { return id >= 0 && id < vocab_size && !non_content[static_cast<std::size_t>(id)]; }
};

// Draws one sequence from a language: at each step a planted trigram is
// emitted with probability p_tri (truncated at the end), otherwise one Zipf
// token.
class SequenceSampler {
 public:
  explicit SequenceSampler(const LanguageSpec& spec);
  template <class Rng>
  std::vector<int> sample(Rng& rng, int length) const;

 private:
  LanguageSpec spec_;
  std::vector<int> ranks_;
  std::vector<double> cdf_;
};

Corpus generate(const CorpusSpec& spec, int n_per_language, int seq_len, std::uint64_t seed);

struct TopTokens {
  std::vector<int> tokens;
  bool short_list = false;  // fewer than k content tokens were available
};

// The k most frequent content tokens of `language` minus any token that is
// also among the k most frequent content tokens of the other language. Ties
// are broken by ascending id.
TopTokens top_k_exclusive_tokens(const Corpus& corpus, Language language, int k);

struct VocabMap {
  std::map<std::string, int> word_to_id;
  std::map<int, std::string> id_to_word;
  int oov_id = -1;
  int pad_id = -1;

  // One "word<TAB>id" pair per line. "<unk>" is required and becomes the
  // out-of-vocabulary id; "<pad>" is optional and defaults to "<unk>".
  static VocabMap load(const std::filesystem::path& path);
  static VocabMap from_pairs(const std::vector<std::pair<std::string, int>>& pairs);

  int vocab_size() const;
  std::string detokenize(const std::vector<int>& ids) const;
};

// Whitespace tokenization into consecutive windows of seq_len tokens; the
// final partial window is padded with pad_id. Non-alphabetic words, <unk> and
// <pad> are flagged non-content.
Corpus ingest_text(const std::filesystem::path& path, const VocabMap& vocab, Language language, int seq_len);

// Corpus file: one sequence per line, "A\t" or "B\t" then space-separated ids.
void save_corpus(const Corpus& corpus, const std::filesystem::path& path);
Corpus load_corpus(const std::filesystem::path& path, int vocab_size, int non_content);

// -- template definitions ---------------------------------------------------

template <class Rng>
std::vector<int> SequenceSampler::sample(Rng& rng, int length) const {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(length));
  while (static_cast<int>(out.size()) < length) {
    if (!spec_.planted_trigrams.empty() && rng.uniform() < spec_.p_tri) {
      const auto& tri = spec_.planted_trigrams[rng.below(spec_.planted_trigrams.size())];
      for (int tok : tri) {
        if (static_cast<int>(out.size()) < length) out.push_back(tok);
      }
    } else {
      const double u = rng.uniform();
      auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
      if (it == cdf_.end()) --it;
      out.push_back(ranks_[static_cast<std::size_t>(it - cdf_.begin())]);
    }
  }
  return out;
}

}  // namespace circuitscope
