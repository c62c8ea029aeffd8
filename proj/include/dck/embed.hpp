#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "dck/corpus.hpp"
#include "dck/optim.hpp"
#include "dck/tensor.hpp"

namespace dck::embed {

// Character alphabet: PAD, UNK, then printable ASCII 0x20..0x7e.
constexpr int kCharPad = 0;
constexpr int kCharUnk = 1;
constexpr int kCharAlphabet = 2 + 95;
int char_id(char c);

// Frozen lookup tables. Neither participates in optimization; the PAD row is
// all-zero in both.
struct EmbeddingTable {
  Tensor pretrained;  // [vocab x pretrained_dim]
  Tensor corpus;      // [vocab x corpus_dim]
  int pretrained_dim = 0;
  int corpus_dim = 0;
};

struct LoadReport {
  int loaded = 0;
  int malformed = 0;
};

// Whitespace-separated "token v1 .. vdim" lines. In-vocabulary tokens are
// filled; everything else (OOV, PAD) stays zero. Lines with the wrong value
// count are skipped and counted.
LoadReport load_word_vectors(std::istream& in, const corpus::Vocabulary& vocab, int dim,
                             Tensor& table);

// Frozen random table for runs without a pretrained-vector file; PAD row zero.
Tensor random_table(int vocab_size, int dim, uint64_t seed);

void save_table(std::ostream& out, const Tensor& table, const corpus::Vocabulary& vocab);

struct SkipgramOptions {
  int dim = 100;
  int window = 5;
  int negatives = 5;
  int epochs = 5;
  double learning_rate = 0.025;
};

// Skip-gram with negative sampling over the training sentences; deterministic
// under the seed. Returns a [vocab x dim] table with a zero PAD row.
Tensor train_skipgram(const std::vector<std::vector<std::string>>& sentences,
                      const corpus::Vocabulary& vocab, const SkipgramOptions& opt, uint64_t seed);

// Convolutional character features: per window size, convolve the character
// matrix and max-pool over positions; the three pools are concatenated.
struct CharConvParams {
  Tensor table;  // [alphabet x char_vec_dim]
  std::vector<int> windows{3, 4, 5};
  std::vector<Tensor> filters;  // per window [window*char_vec_dim x filters_per_window]
  std::vector<Tensor> biases;   // per window [filters_per_window]
  int char_vec_dim = 0;
  int filters_per_window = 0;

  int output_dim() const { return filters_per_window * static_cast<int>(windows.size()); }
};

// Registers trainable parameters in `store` when given, otherwise builds
// frozen tensors.
CharConvParams make_char_conv(ParameterStore* store, const std::string& prefix, int char_vec_dim,
                              int output_dim, Rng& rng);

Tensor char_embed(const std::string& word, const CharConvParams& params);

// Per token: [pretrained ; corpus ; char] concatenated. PAD ids map to the
// all-zero row. Disabled slices (dim 0) are skipped.
Tensor embed_tokens(const std::vector<int>& ids, const std::vector<std::string>& tokens,
                    const EmbeddingTable& table, const CharConvParams* char_params);

}  // namespace dck::embed
