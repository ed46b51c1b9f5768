#include "circuitscope/ngram.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "circuitscope/error.hpp"
#include "circuitscope/rng.hpp"
#include "circuitscope/table.hpp"

namespace circuitscope {

namespace {

constexpr std::uint64_t kPromptStream = 0x70726d74;  // "prmt"
constexpr std::size_t kRowsPerBatch = 2048;

// Runs pass_losses over sequences in equal-length chunks of about
// kRowsPerBatch rows and hands each chunk's losses to fn(first_index, losses).
template <class Fn>
void for_each_chunk(const Transformer& model, const std::vector<std::vector<int>>& seqs, const AblationSpec& ablation,
                    Fn&& fn) {
  std::size_t i = 0;
  while (i < seqs.size()) {
    const std::size_t len = seqs[i].size();
    const std::size_t cap = std::max<std::size_t>(1, kRowsPerBatch / len);
    std::size_t j = i + 1;
    while (j < seqs.size() && j - i < cap && seqs[j].size() == len) ++j;
    const std::vector<std::vector<int>> batch(seqs.begin() + static_cast<std::ptrdiff_t>(i),
                                              seqs.begin() + static_cast<std::ptrdiff_t>(j));
    fn(i, pass_losses(model, batch, ablation, true, true));
    i = j;
  }
}

}  // namespace

std::vector<CandidateSite> scan_sites(const Transformer& model, const std::vector<std::vector<int>>& seqs,
                                      const AblationSpec& ablation) {
  if (seqs.empty()) throw DataError("scan needs a non-empty corpus");
  std::vector<CandidateSite> out;
  for_each_chunk(model, seqs, ablation, [&](std::size_t first, const PassLosses& pl) {
    const std::size_t cols = pl.clean.dim(1);
    for (std::size_t b = 0; b < pl.clean.dim(0); ++b) {
      const auto& s = seqs[first + b];
      for (std::size_t pos = 2; pos < s.size(); ++pos) {
        const std::size_t i = b * cols + (pos - 1);
        CandidateSite c;
        c.sequence = static_cast<int>(first + b);
        c.position = static_cast<int>(pos);
        c.tokens = {s[pos - 2], s[pos - 1], s[pos]};
        c.clean = pl.clean[i];
        c.ablated = pl.ablated[i];
        c.direct = static_cast<double>((*pl.direct)[i]) - c.clean;
        c.indirect = static_cast<double>((*pl.indirect)[i]) - c.clean;
        out.push_back(c);
      }
    }
  });
  return out;
}

std::vector<Candidate> scan(const Transformer& model, const std::vector<std::vector<int>>& seqs,
                            const AblationSpec& ablation, int top_m) {
  if (top_m < 1) throw InputError("scan top_m must be >= 1");
  std::map<Trigram, Candidate> groups;
  for (const auto& site : scan_sites(model, seqs, ablation)) {
    auto& g = groups[site.tokens];
    g.tokens = site.tokens;
    g.occurrences += 1;
    g.clean += site.clean;
    g.ablated += site.ablated;
    g.direct += site.direct;
    g.indirect += site.indirect;
  }
  std::vector<Candidate> out;
  for (auto& [tri, g] : groups) {
    const double n = g.occurrences;
    g.clean /= n;
    g.ablated /= n;
    g.direct /= n;
    g.indirect /= n;
    out.push_back(g);
  }
  std::stable_sort(out.begin(), out.end(), [](const Candidate& a, const Candidate& b) { return a.indirect > b.indirect; });
  if (out.size() > static_cast<std::size_t>(top_m)) out.resize(static_cast<std::size_t>(top_m));
  return out;
}

bool FilterConfig::passes(double clean, double total, double direct, double indirect) const {
  return clean <= max_clean_loss && total >= min_total_delta && (!require_indirect_dominant || indirect > direct);
}

std::vector<Candidate> filter(const std::vector<Candidate>& candidates, const FilterConfig& config) {
  if (!std::isfinite(config.max_clean_loss) || !std::isfinite(config.min_total_delta)) {
    throw ConfigError("filter thresholds must be finite");
  }
  std::vector<Candidate> out;
  for (const auto& c : candidates) {
    if (config.passes(c.clean, c.total(), c.direct, c.indirect)) out.push_back(c);
  }
  return out;
}

std::vector<int> prompt_pool(const Corpus& corpus, int pool_size) {
  if (pool_size < 1) throw InputError("pool_size must be >= 1");
  if (pool_size > corpus.vocab_size) throw InputError("pool_size exceeds the vocabulary");
  auto pool = top_k_exclusive_tokens(corpus, Language::A, pool_size).tokens;
  if (pool.empty()) throw DataError("no frequent language-A content tokens for the prompt pool");
  return pool;
}

std::vector<std::vector<int>> make_prompts(std::span<const int> ngram, std::span<const int> pool, int vocab_size,
                                           int n_prompts, int prefix_len, std::uint64_t seed) {
  if (prefix_len < 1) throw InputError("prefix_len must be >= 1");
  if (n_prompts < 1) throw InputError("n_prompts must be >= 1");
  if (pool.empty()) throw InputError("prompt pool is empty");
  if (ngram.empty()) throw InputError("n-gram is empty");
  for (int t : ngram) {
    if (t < 0 || t >= vocab_size) throw InputError("n-gram token " + std::to_string(t) + " outside the vocabulary");
  }
  std::uint64_t key = seed;
  for (int t : ngram) key = mix_seed(key ^ static_cast<std::uint64_t>(t));
  Rng rng(derive_seed(key, kPromptStream));
  std::vector<std::vector<int>> out;
  for (int p = 0; p < n_prompts; ++p) {
    std::vector<int> prompt;
    prompt.reserve(static_cast<std::size_t>(prefix_len) + ngram.size());
    for (int i = 0; i < prefix_len; ++i) prompt.push_back(pool[rng.below(pool.size())]);
    prompt.insert(prompt.end(), ngram.begin(), ngram.end());
    out.push_back(std::move(prompt));
  }
  return out;
}

std::vector<std::vector<int>> make_prompts(const Trigram& trigram, const Corpus& corpus, int n_prompts,
                                           int prefix_len, int pool_size, std::uint64_t seed) {
  const auto pool = prompt_pool(corpus, pool_size);
  return make_prompts(trigram, pool, corpus.vocab_size, n_prompts, prefix_len, seed);
}

std::vector<TrigramRecord> verify_many(const Transformer& model, const AblationSpec& ablation,
                                       const std::vector<Trigram>& trigrams,
                                       const std::vector<std::vector<std::vector<int>>>& prompts,
                                       const FilterConfig& config) {
  if (trigrams.size() != prompts.size()) throw InputError("verify_many: one prompt set per trigram required");
  std::vector<std::vector<int>> all;
  std::vector<std::size_t> owner;
  for (std::size_t k = 0; k < trigrams.size(); ++k) {
    if (prompts[k].empty()) throw InputError("verify needs at least one prompt");
    for (const auto& p : prompts[k]) {
      if (p.size() < 3 || !std::equal(trigrams[k].begin(), trigrams[k].end(), p.end() - 3)) {
        throw InputError("prompt does not end with its trigram");
      }
      all.push_back(p);
      owner.push_back(k);
    }
  }
  std::vector<TrigramRecord> out(trigrams.size());
  for (std::size_t k = 0; k < trigrams.size(); ++k) {
    out[k].tokens = trigrams[k];
    out[k].n_prompts = static_cast<int>(prompts[k].size());
  }
  if (all.empty()) return out;
  for_each_chunk(model, all, ablation, [&](std::size_t first, const PassLosses& pl) {
    const std::size_t cols = pl.clean.dim(1);
    for (std::size_t b = 0; b < pl.clean.dim(0); ++b) {
      const std::size_t i = b * cols + cols - 1;
      auto& r = out[owner[first + b]];
      const double clean = pl.clean[i];
      r.clean += clean;
      r.ablated += pl.ablated[i];
      r.direct += static_cast<double>((*pl.direct)[i]) - clean;
      r.indirect += static_cast<double>((*pl.indirect)[i]) - clean;
    }
  });
  for (auto& r : out) {
    const double n = r.n_prompts;
    r.clean /= n;
    r.ablated /= n;
    r.direct /= n;
    r.indirect /= n;
    r.verdict = config.passes(r.clean, r.total(), r.direct, r.indirect);
  }
  return out;
}

TrigramRecord verify(const Transformer& model, const AblationSpec& ablation, const Trigram& trigram,
                     const std::vector<std::vector<int>>& prompts, const FilterConfig& config) {
  if (prompts.empty()) throw InputError("verify needs at least one prompt");
  return verify_many(model, ablation, {trigram}, {prompts}, config).front();
}

void write_trigram_jsonl(const std::vector<TrigramRecord>& records, const std::filesystem::path& path,
                         const VocabMap* vocab) {
  std::string out;
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["tokens"] = r.tokens;
    if (vocab) j["text"] = vocab->detokenize({r.tokens.begin(), r.tokens.end()});
    j["n_prompts"] = r.n_prompts;
    j["clean"] = r.clean;
    j["ablated"] = r.ablated;
    j["total"] = r.total();
    j["direct"] = r.direct;
    j["indirect"] = r.indirect;
    j["verdict"] = r.verdict;
    out += j.dump() + "\n";
  }
  write_text(path, out);
}

}  // namespace circuitscope
