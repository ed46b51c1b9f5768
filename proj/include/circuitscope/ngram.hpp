#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "circuitscope/causal.hpp"
#include "circuitscope/corpus.hpp"
#include "circuitscope/model.hpp"

namespace circuitscope {

// One occurrence of a token triple; losses are for predicting the third token.
struct CandidateSite {
  int sequence = 0;
  int position = 0;  // of the triple's last token, >= 2
  Trigram tokens{};
  double clean = 0.0, ablated = 0.0, direct = 0.0, indirect = 0.0;  // direct/indirect are deltas over clean
};

// A distinct triple with statistics averaged over all its occurrences.
struct Candidate {
  Trigram tokens{};
  int occurrences = 0;
  double clean = 0.0;
  double ablated = 0.0;
  double direct = 0.0;    // delta over clean
  double indirect = 0.0;  // delta over clean
  double total() const { return ablated - clean; }
};

// Per-position losses for every triple occurrence in the sequences.
std::vector<CandidateSite> scan_sites(const Transformer& model, const std::vector<std::vector<int>>& sequences,
                                      const AblationSpec& ablation);

// Occurrences grouped by triple; the top_m triples by mean indirect delta
// (ties by triple order).
std::vector<Candidate> scan(const Transformer& model, const std::vector<std::vector<int>>& sequences,
                            const AblationSpec& ablation, int top_m);

struct FilterConfig {
  double max_clean_loss = 1.5;
  double min_total_delta = 0.2;
  bool require_indirect_dominant = true;

  bool passes(double clean, double total, double direct, double indirect) const;
};

std::vector<Candidate> filter(const std::vector<Candidate>& candidates, const FilterConfig& config);

// The prefix pool: the pool_size most frequent language-A content tokens with
// tokens that are also frequent in B removed (top_k_exclusive_tokens).
std::vector<int> prompt_pool(const Corpus& corpus, int pool_size);

// n_prompts prompts of prefix_len tokens drawn i.i.d. from the pool, each
// followed by the n-gram.
std::vector<std::vector<int>> make_prompts(std::span<const int> ngram, std::span<const int> pool, int vocab_size,
                                           int n_prompts, int prefix_len, std::uint64_t seed);
std::vector<std::vector<int>> make_prompts(const Trigram& trigram, const Corpus& corpus, int n_prompts,
                                           int prefix_len = 20, int pool_size = 100, std::uint64_t seed = 0);

struct TrigramRecord {
  Trigram tokens{};
  int n_prompts = 0;
  double clean = 0.0;
  double ablated = 0.0;
  double direct = 0.0;    // delta over clean
  double indirect = 0.0;  // delta over clean
  bool verdict = false;
  double total() const { return ablated - clean; }
};

// Losses at the final token of each prompt, averaged over prompts.
TrigramRecord verify(const Transformer& model, const AblationSpec& ablation, const Trigram& trigram,
                     const std::vector<std::vector<int>>& prompts, const FilterConfig& config = {});

// verify() for many trigrams at once; equal-length prompt sets share batches.
std::vector<TrigramRecord> verify_many(const Transformer& model, const AblationSpec& ablation,
                                       const std::vector<Trigram>& trigrams,
                                       const std::vector<std::vector<std::vector<int>>>& prompts,
                                       const FilterConfig& config = {});

// JSON lines: {"tokens":[a,b,c],"text":"..."(with vocab),"n_prompts",...}
void write_trigram_jsonl(const std::vector<TrigramRecord>& records, const std::filesystem::path& path,
                         const VocabMap* vocab = nullptr);

}  // namespace circuitscope
