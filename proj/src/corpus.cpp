#include "circuitscope/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "circuitscope/error.hpp"
#include "circuitscope/rng.hpp"

namespace circuitscope {

char language_code(Language l) { return l == Language::A ? 'A' : 'B'; }

Language parse_language(std::string_view s) {
  if (s == "A" || s == "a") return Language::A;
  if (s == "B" || s == "b") return Language::B;
  throw InputError("unknown language label '" + std::string(s) + "' (expected A or B)");
}

// -- specs ------------------------------------------------------------------

std::vector<int> LanguageSpec::rank_order() const {
  // Weighted round-robin: always draw from the slice that is least consumed
  // relative to its size, preferring the shared slice on ties.
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(exclusive.size() + shared.size()));
  int si = 0, ei = 0;
  while (si < shared.size() || ei < exclusive.size()) {
    const bool take_shared =
        ei >= exclusive.size() ||
        (si < shared.size() &&
         static_cast<long long>(si) * exclusive.size() <= static_cast<long long>(ei) * shared.size());
    if (take_shared) {
      out.push_back(shared.begin + si++);
    } else {
      out.push_back(exclusive.begin + ei++);
    }
  }
  return out;
}

std::vector<double> LanguageSpec::zipf_probabilities() const {
  const std::size_t n = static_cast<std::size_t>(exclusive.size() + shared.size());
  std::vector<double> p(n);
  double z = 0.0;
  for (std::size_t r = 0; r < n; ++r) z += p[r] = std::pow(static_cast<double>(r + 1), -zipf_exponent);
  for (auto& v : p) v /= z;
  return p;
}

void CorpusSpec::validate() const {
  if (vocab_size < 1) throw ConfigError("corpus vocab_size must be >= 1");
  for (const LanguageSpec* s : {&a, &b}) {
    const char code = language_code(s->label);
    for (const auto& r : {s->exclusive, s->shared}) {
      if (r.begin < 0 || r.end > vocab_size || r.begin > r.end) {
        throw ConfigError(std::string("language ") + code + " slice [" + std::to_string(r.begin) + ", " +
                          std::to_string(r.end) + ") overflows vocabulary of " + std::to_string(vocab_size));
      }
    }
    if (s->exclusive.size() + s->shared.size() < 1) throw ConfigError(std::string("language ") + code + " has no tokens");
    if (s->exclusive.overlaps(s->shared)) {
      throw ConfigError(std::string("language ") + code + " exclusive slice overlaps its shared slice");
    }
    if (!(s->zipf_exponent > 0.0)) throw ConfigError("zipf_exponent must be positive");
    if (!(s->p_tri > 0.0 && s->p_tri < 1.0)) throw ConfigError("p_tri must lie in (0, 1)");
    for (const auto& tri : s->planted_trigrams) {
      for (int t : tri) {
        if (!s->exclusive.contains(t) && !s->shared.contains(t)) {
          throw ConfigError(std::string("planted trigram token ") + std::to_string(t) + " of language " + code +
                            " lies outside its exclusive and shared slices");
        }
      }
    }
  }
  if (a.label != Language::A || b.label != Language::B) throw ConfigError("corpus spec languages must be A then B");
  if (a.exclusive.overlaps(b.exclusive)) throw ConfigError("exclusive slices of A and B overlap");
  if (a.exclusive.overlaps(b.shared) || b.exclusive.overlaps(a.shared)) {
    throw ConfigError("an exclusive slice overlaps the other language's shared slice");
  }
  if (non_content < 0 || non_content > vocab_size) throw ConfigError("non_content out of range");
}

CorpusSpec CorpusSpec::default_spec() {
  CorpusSpec s;
  s.vocab_size = 512;
  s.non_content = 16;
  s.a.label = Language::A;
  s.a.shared = {0, 96};
  s.a.exclusive = {96, 304};
  s.b.label = Language::B;
  s.b.shared = {0, 96};
  s.b.exclusive = {304, 512};
  for (auto* l : {&s.a, &s.b}) {
    l->zipf_exponent = 1.0;
    l->p_tri = 0.05;
  }
  // A's trigrams share prefixes with each other and with B's first two, so
  // the completion depends on the language of the context.
  s.a.planted_trigrams = {{30, 31, 110}, {30, 31, 140}, {30, 31, 170}, {30, 31, 200},
                          {50, 51, 120}, {50, 51, 150}, {50, 51, 180}, {70, 71, 130}};
  s.b.planted_trigrams = {{30, 31, 330}, {50, 51, 350}, {23, 24, 380}, {43, 44, 400},
                          {63, 64, 420}, {83, 84, 440}, {25, 26, 460}, {45, 46, 480}};
  return s;
}

namespace {

nlohmann::json language_json(const LanguageSpec& l) {
  nlohmann::json tris = nlohmann::json::array();
  for (const auto& t : l.planted_trigrams) tris.push_back({t[0], t[1], t[2]});
  return {{"label", std::string(1, language_code(l.label))},
          {"exclusive", {l.exclusive.begin, l.exclusive.end}},
          {"shared", {l.shared.begin, l.shared.end}},
          {"zipf_exponent", l.zipf_exponent},
          {"p_tri", l.p_tri},
          {"planted_trigrams", tris}};
}

LanguageSpec language_from_json(const nlohmann::json& j) {
  LanguageSpec l;
  l.label = parse_language(j.at("label").get<std::string>());
  l.exclusive = {j.at("exclusive").at(0).get<int>(), j.at("exclusive").at(1).get<int>()};
  l.shared = {j.at("shared").at(0).get<int>(), j.at("shared").at(1).get<int>()};
  l.zipf_exponent = j.at("zipf_exponent").get<double>();
  l.p_tri = j.at("p_tri").get<double>();
  for (const auto& t : j.at("planted_trigrams")) l.planted_trigrams.push_back({t.at(0), t.at(1), t.at(2)});
  return l;
}

}  // namespace

void to_json(nlohmann::json& j, const CorpusSpec& s) {
  j = {{"vocab_size", s.vocab_size}, {"non_content", s.non_content}, {"A", language_json(s.a)}, {"B", language_json(s.b)}};
}

void from_json(const nlohmann::json& j, CorpusSpec& s) {
  s.vocab_size = j.at("vocab_size").get<int>();
  s.non_content = j.at("non_content").get<int>();
  s.a = language_from_json(j.at("A"));
  s.b = language_from_json(j.at("B"));
}

// -- corpus -----------------------------------------------------------------

std::vector<std::vector<int>> Corpus::tokens_of(Language l) const {
  std::vector<std::vector<int>> out;
  for (const auto& s : sequences) {
    if (s.language == l) out.push_back(s.tokens);
  }
  return out;
}

std::size_t Corpus::count(Language l) const {
  return static_cast<std::size_t>(
      std::count_if(sequences.begin(), sequences.end(), [&](const Sequence& s) { return s.language == l; }));
}

SequenceSampler::SequenceSampler(const LanguageSpec& spec) : spec_(spec), ranks_(spec.rank_order()) {
  const auto p = spec.zipf_probabilities();
  cdf_.resize(p.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) cdf_[i] = acc += p[i];
}

Corpus generate(const CorpusSpec& spec, int n_per_language, int seq_len, std::uint64_t seed) {
  spec.validate();
  if (n_per_language < 1) throw ConfigError("n_per_language must be >= 1");
  if (seq_len < 1) throw ConfigError("seq_len must be >= 1");
  Corpus c;
  c.seed = seed;
  c.vocab_size = spec.vocab_size;
  c.non_content.assign(static_cast<std::size_t>(spec.vocab_size), false);
  for (int i = 0; i < spec.non_content; ++i) c.non_content[static_cast<std::size_t>(i)] = true;
  Rng rng(seed);
  for (Language l : {Language::A, Language::B}) {
    const SequenceSampler sampler(spec.language(l));
    for (int i = 0; i < n_per_language; ++i) c.sequences.push_back({sampler.sample(rng, seq_len), l});
  }
  return c;
}

namespace {

std::vector<int> top_k_content(const Corpus& corpus, Language language, int k) {
  std::vector<std::size_t> counts(static_cast<std::size_t>(corpus.vocab_size), 0);
  for (const auto& s : corpus.sequences) {
    if (s.language != language) continue;
    for (int t : s.tokens) ++counts[static_cast<std::size_t>(t)];
  }
  std::vector<int> ids;
  for (int id = 0; id < corpus.vocab_size; ++id) {
    if (counts[static_cast<std::size_t>(id)] > 0 && corpus.is_content(id)) ids.push_back(id);
  }
  std::stable_sort(ids.begin(), ids.end(), [&](int x, int y) {
    return counts[static_cast<std::size_t>(x)] > counts[static_cast<std::size_t>(y)];
  });
  if (static_cast<int>(ids.size()) > k) ids.resize(static_cast<std::size_t>(k));
  return ids;
}

}  // namespace

TopTokens top_k_exclusive_tokens(const Corpus& corpus, Language language, int k) {
  if (k < 1) throw InputError("k must be >= 1");
  const Language other = language == Language::A ? Language::B : Language::A;
  const auto mine = top_k_content(corpus, language, k);
  const auto theirs = top_k_content(corpus, other, k);
  const std::set<int> exclude(theirs.begin(), theirs.end());
  TopTokens out;
  out.short_list = static_cast<int>(mine.size()) < k;
  for (int t : mine) {
    if (!exclude.count(t)) out.tokens.push_back(t);
  }
  return out;
}

// -- vocab & ingestion ------------------------------------------------------

VocabMap VocabMap::from_pairs(const std::vector<std::pair<std::string, int>>& pairs) {
  VocabMap v;
  for (const auto& [word, id] : pairs) {
    if (id < 0) throw ConfigError("negative token id for word '" + word + "'");
    if (!v.word_to_id.emplace(word, id).second) throw ConfigError("duplicate vocabulary word '" + word + "'");
    v.id_to_word.emplace(id, word);
  }
  auto unk = v.word_to_id.find("<unk>");
  if (unk == v.word_to_id.end()) throw ConfigError("vocabulary map has no <unk> entry");
  v.oov_id = unk->second;
  auto pad = v.word_to_id.find("<pad>");
  v.pad_id = pad == v.word_to_id.end() ? v.oov_id : pad->second;
  return v;
}

VocabMap VocabMap::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read vocabulary map " + path.string());
  std::vector<std::pair<std::string, int>> pairs;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected word<TAB>id");
    }
    try {
      pairs.emplace_back(line.substr(0, tab), std::stoi(line.substr(tab + 1)));
    } catch (const std::logic_error&) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": invalid token id");
    }
  }
  return from_pairs(pairs);
}

int VocabMap::vocab_size() const { return id_to_word.empty() ? 0 : id_to_word.rbegin()->first + 1; }

std::string VocabMap::detokenize(const std::vector<int>& ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    auto it = id_to_word.find(ids[i]);
    out += it == id_to_word.end() ? "<unk>" : it->second;
  }
  return out;
}

Corpus ingest_text(const std::filesystem::path& path, const VocabMap& vocab, Language language, int seq_len) {
  if (seq_len < 1) throw ConfigError("seq_len must be >= 1");
  std::ifstream in(path);
  if (!in) throw IoError("cannot read text file " + path.string());
  std::vector<int> stream;
  std::string word;
  while (in >> word) {
    auto it = vocab.word_to_id.find(word);
    stream.push_back(it == vocab.word_to_id.end() ? vocab.oov_id : it->second);
  }
  if (stream.empty()) throw DataError("text file " + path.string() + " contains no tokens");
  Corpus c;
  c.vocab_size = vocab.vocab_size();
  c.non_content.assign(static_cast<std::size_t>(c.vocab_size), true);
  for (const auto& [w, id] : vocab.word_to_id) {
    const bool alpha = std::any_of(w.begin(), w.end(), [](unsigned char ch) { return std::isalpha(ch); });
    c.non_content[static_cast<std::size_t>(id)] = !alpha || id == vocab.oov_id || id == vocab.pad_id;
  }
  for (std::size_t off = 0; off < stream.size(); off += static_cast<std::size_t>(seq_len)) {
    Sequence s;
    s.language = language;
    const std::size_t end = std::min(stream.size(), off + static_cast<std::size_t>(seq_len));
    s.tokens.assign(stream.begin() + static_cast<std::ptrdiff_t>(off), stream.begin() + static_cast<std::ptrdiff_t>(end));
    s.tokens.resize(static_cast<std::size_t>(seq_len), vocab.pad_id);
    c.sequences.push_back(std::move(s));
  }
  return c;
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write corpus file " + path.string());
  for (const auto& s : corpus.sequences) {
    out << language_code(s.language) << '\t';
    for (std::size_t i = 0; i < s.tokens.size(); ++i) {
      if (i) out << ' ';
      out << s.tokens[i];
    }
    out << '\n';
  }
  if (!out) throw IoError("failed writing corpus file " + path.string());
}

Corpus load_corpus(const std::filesystem::path& path, int vocab_size, int non_content) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read corpus file " + path.string());
  Corpus c;
  c.vocab_size = vocab_size;
  c.non_content.assign(static_cast<std::size_t>(vocab_size), false);
  for (int i = 0; i < non_content && i < vocab_size; ++i) c.non_content[static_cast<std::size_t>(i)] = true;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto where = path.string() + ":" + std::to_string(lineno);
    if (line.size() < 2 || line[1] != '\t') throw FormatError(where + ": expected 'A\\t' or 'B\\t' prefix");
    Sequence s;
    s.language = parse_language(line.substr(0, 1));
    std::istringstream ids(line.substr(2));
    std::string tok;
    while (ids >> tok) {
      int id = 0;
      try {
        std::size_t used = 0;
        id = std::stoi(tok, &used);
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::logic_error&) {
        throw FormatError(where + ": invalid token id '" + tok + "'");
      }
      if (id < 0 || id >= vocab_size) {
        throw FormatError(where + ": token id " + std::to_string(id) + " outside vocabulary of " +
                          std::to_string(vocab_size));
      }
      s.tokens.push_back(id);
    }
    c.sequences.push_back(std::move(s));
  }
  return c;
}

}  // namespace circuitscope
