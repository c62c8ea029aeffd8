#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "dck/util.hpp"

namespace dck::corpus {

// Lowercase, split on whitespace; punctuation characters become single-char
// tokens. Deterministic by construction.
std::vector<std::string> tokenize(const std::string& text);

struct Turn {
  std::string speaker;
  std::string text;
  std::vector<std::string> candidates;  // provided 20-way lists when the source has them
  int section = -1;                     // knowledge section index (document-grounded sources)
};

struct Dialogue {
  std::vector<std::string> knowledge;  // persona sentences or document sections
  std::vector<Turn> turns;
};

struct Sample {
  std::vector<std::string> context;    // ordered utterances, oldest first
  std::vector<std::string> knowledge;  // sentences
  std::vector<std::string> candidates; // exactly n, truth included once
  int label = -1;
};

struct Limits {
  int max_utterances = 15;
  int max_knowledge = 5;
  int max_tokens = 20;
  int candidates = 20;

  void validate() const;
  bool operator==(const Limits&) const = default;
};

Limits default_limits(const std::string& dataset_id);

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr const char* kPadToken = "<pad>";
  static constexpr const char* kUnkToken = "<unk>";

  int id(const std::string& token) const;      // kUnk if absent
  const std::string& token(int id) const;
  int size() const { return static_cast<int>(tokens_.size()); }
  int64_t frequency(const std::string& token) const;
  uint64_t hash() const;

  void save(std::ostream& out) const;
  static Vocabulary load(std::istream& in);

  friend Vocabulary build_vocabulary(const std::vector<std::string>& tokens, int64_t min_freq);

 private:
  std::vector<std::string> tokens_;
  std::vector<int64_t> freqs_;
  std::map<std::string, int> ids_;
  void index();
};

// Frequency-descending, ties lexicographic; PAD and UNK reserved at 0 and 1.
Vocabulary build_vocabulary(const std::vector<std::string>& tokens, int64_t min_freq);

// ---- raw formats ------------------------------------------------------------
// Persona-style text: lines numbered from 1 per episode, either
//   "N your persona: <sentence>"
// or
//   "N <partner utterance>\t<true response>\t\t<cand_1>|...|<cand_20>"
// An episode ends when the line number resets.
std::vector<Dialogue> parse_persona_chat(std::istream& in);

// Document-grounded conversations, one JSON record per line:
//   {"sections": ["...", ...],
//    "turns": [{"speaker": "...", "text": "...", "section": 0}, ...]}
// Conversations with fewer than 4 turns are dropped.
std::vector<Dialogue> parse_cmudog(std::istream& in);

struct CorpusStats {
  int64_t conversations = 0;
  int64_t turns = 0;
};
CorpusStats stats(const std::vector<Dialogue>& dialogues, const std::string& dataset_id);

// n candidates: the truth plus n-1 negatives drawn uniformly without
// replacement from the distinct pool entries differing from the truth, then a
// seeded shuffle. Returns the candidate list and the truth's position.
std::pair<std::vector<std::string>, int> sample_negatives(const std::string& truth,
                                                          const std::vector<std::string>& pool,
                                                          int n, uint64_t seed);

// Expands dialogues into per-turn samples. Persona-style dialogues use their
// provided candidate lists (seeded shuffle); document-grounded ones draw
// negatives from `response_pool`.
std::vector<Sample> dialogues_to_samples(const std::vector<Dialogue>& dialogues,
                                         const std::string& dataset_id,
                                         const std::vector<std::string>& response_pool,
                                         int n_candidates, uint64_t seed);

// Split document-section text into sentences on ., ! and ?.
std::vector<std::string> split_sentences(const std::string& text);

// ---- encoded form -----------------------------------------------------------

struct EncodedSequence {
  std::vector<int> ids;              // truncated to the last max_tokens, no padding
  std::vector<std::string> tokens;   // aligned with ids
};

struct EncodedSample {
  std::vector<EncodedSequence> context;    // kept utterances, oldest first (latest max_utterances)
  std::vector<EncodedSequence> knowledge;  // first max_knowledge sentences
  std::vector<EncodedSequence> candidates; // exactly n
  int label = -1;
  std::vector<std::string> context_text, knowledge_text, candidate_text;
};

EncodedSample encode_sample(const Sample& sample, const Vocabulary& vocab, const Limits& limits);

// Fixed-extent integer view of a batch; mask bits are 1 exactly where the id
// is not PAD.
struct TokenizedBatch {
  Limits limits;
  int batch = 0;
  std::vector<int> context_ids, context_mask;      // [batch * max_utterances * max_tokens]
  std::vector<int> knowledge_ids, knowledge_mask;  // [batch * max_knowledge * max_tokens]
  std::vector<int> candidate_ids, candidate_mask;  // [batch * candidates * max_tokens]
  std::vector<int> labels;
  std::vector<const EncodedSample*> samples;
};

TokenizedBatch tokenized_batch(const std::vector<EncodedSample>& data,
                               const std::vector<int>& indices, const Limits& limits);

// Seeded shuffle, then contiguous batches; the final partial batch is kept.
std::vector<std::vector<int>> make_batches(int sample_count, int batch_size, uint64_t seed);

// ---- preprocessed cache ------------------------------------------------------

struct CacheHeader {
  std::string dataset;
  std::string split;
  Limits limits;
  uint64_t vocab_hash = 0;
  int64_t sample_count = 0;
};

void save_cache(std::ostream& out, const CacheHeader& header, const std::vector<Sample>& samples,
                const Vocabulary& vocab);
// Refuses caches whose vocabulary hash differs from `vocab`.
std::pair<CacheHeader, std::vector<EncodedSample>> load_cache(std::istream& in,
                                                              const Vocabulary& vocab);

}  // namespace dck::corpus
