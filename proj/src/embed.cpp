#include "dck/embed.hpp"

#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>

namespace dck::embed {

int char_id(char c) {
  unsigned char u = static_cast<unsigned char>(c);
  if (u >= 0x20 && u <= 0x7e) return 2 + (u - 0x20);
  return kCharUnk;
}

LoadReport load_word_vectors(std::istream& in, const corpus::Vocabulary& vocab, int dim,
                             Tensor& table) {
  if (table.rows() != vocab.size() || table.cols() != dim)
    throw Error(ErrorCode::shape_mismatch, "load_word_vectors: table extents mismatch");
  LoadReport report;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string token;
    ls >> token;
    std::vector<double> vals;
    vals.reserve(static_cast<size_t>(dim));
    double v;
    while (ls >> v) vals.push_back(v);
    if (static_cast<int>(vals.size()) != dim) {
      ++report.malformed;
      continue;
    }
    int id = vocab.id(token);
    if (id == corpus::Vocabulary::kUnk && token != corpus::Vocabulary::kUnkToken) continue;
    if (id == corpus::Vocabulary::kPad) continue;
    auto& data = table.mutable_data();
    for (int j = 0; j < dim; ++j) data[static_cast<size_t>(id) * dim + j] = vals[static_cast<size_t>(j)];
    ++report.loaded;
  }
  return report;
}

Tensor random_table(int vocab_size, int dim, uint64_t seed) {
  Rng rng(seed);
  std::vector<double> data(static_cast<size_t>(vocab_size) * dim);
  for (auto& v : data) v = rng.uniform(-0.4, 0.4);  // pretrained-vector component scale
  for (int j = 0; j < dim; ++j) data[static_cast<size_t>(corpus::Vocabulary::kPad) * dim + j] = 0.0;
  return Tensor::from_data({vocab_size, dim}, std::move(data));
}

void save_table(std::ostream& out, const Tensor& table, const corpus::Vocabulary& vocab) {
  const int dim = table.cols();
  for (int i = 0; i < table.rows(); ++i) {
    out << vocab.token(i);
    for (int j = 0; j < dim; ++j) out << ' ' << table.at(i, j);
    out << '\n';
  }
}

Tensor train_skipgram(const std::vector<std::vector<std::string>>& sentences,
                      const corpus::Vocabulary& vocab, const SkipgramOptions& opt, uint64_t seed) {
  const int V = vocab.size();
  const int d = opt.dim;
  Rng rng(seed);

  std::vector<double> in_vec(static_cast<size_t>(V) * d);
  std::vector<double> out_vec(static_cast<size_t>(V) * d, 0.0);
  for (auto& v : in_vec) v = rng.uniform(-0.5 / d, 0.5 / d);

  // id sequences and the unigram^0.75 negative table
  std::vector<std::vector<int>> seqs;
  std::vector<int64_t> counts(static_cast<size_t>(V), 0);
  int64_t total_positions = 0;
  for (const auto& sent : sentences) {
    std::vector<int> ids;
    for (const auto& t : sent) {
      int id = vocab.id(t);
      if (id == corpus::Vocabulary::kPad) continue;
      ids.push_back(id);
      ++counts[static_cast<size_t>(id)];
    }
    total_positions += static_cast<int64_t>(ids.size());
    if (!ids.empty()) seqs.push_back(std::move(ids));
  }
  std::vector<int> neg_table;
  {
    double z = 0.0;
    std::vector<double> pw(static_cast<size_t>(V), 0.0);
    for (int i = 2; i < V; ++i) {
      pw[static_cast<size_t>(i)] = std::pow(static_cast<double>(counts[static_cast<size_t>(i)]), 0.75);
      z += pw[static_cast<size_t>(i)];
    }
    const int table_size = 100000;
    if (z > 0.0) {
      neg_table.reserve(table_size);
      int i = 2;
      double cum = pw[2] / z;
      for (int a = 0; a < table_size; ++a) {
        neg_table.push_back(i);
        if (static_cast<double>(a) / table_size > cum && i < V - 1) {
          ++i;
          cum += pw[static_cast<size_t>(i)] / z;
        }
      }
    }
  }
  if (neg_table.empty()) neg_table.push_back(corpus::Vocabulary::kUnk);

  const int64_t total_steps = std::max<int64_t>(1, total_positions * opt.epochs);
  int64_t processed = 0;
  std::vector<double> grad_in(static_cast<size_t>(d));
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    for (const auto& ids : seqs) {
      for (size_t pos = 0; pos < ids.size(); ++pos) {
        const double lr = opt.learning_rate *
                          std::max(1.0 - static_cast<double>(processed) / total_steps, 1e-4);
        ++processed;
        const int center = ids[pos];
        const int reduced = 1 + static_cast<int>(rng.next_below(static_cast<uint64_t>(opt.window)));
        for (int off = -reduced; off <= reduced; ++off) {
          if (off == 0) continue;
          const long cpos = static_cast<long>(pos) + off;
          if (cpos < 0 || cpos >= static_cast<long>(ids.size())) continue;
          const int context = ids[static_cast<size_t>(cpos)];
          double* wi = in_vec.data() + static_cast<size_t>(center) * d;
          std::fill(grad_in.begin(), grad_in.end(), 0.0);
          for (int k = 0; k <= opt.negatives; ++k) {
            int target;
            double label;
            if (k == 0) {
              target = context;
              label = 1.0;
            } else {
              target = neg_table[static_cast<size_t>(rng.next_below(neg_table.size()))];
              if (target == context) continue;
              label = 0.0;
            }
            double* wo = out_vec.data() + static_cast<size_t>(target) * d;
            double s = 0.0;
            for (int j = 0; j < d; ++j) s += wi[j] * wo[j];
            const double g = (label - 1.0 / (1.0 + std::exp(-s))) * lr;
            for (int j = 0; j < d; ++j) {
              grad_in[static_cast<size_t>(j)] += g * wo[j];
              wo[j] += g * wi[j];
            }
          }
          for (int j = 0; j < d; ++j) wi[j] += grad_in[static_cast<size_t>(j)];
        }
      }
    }
  }
  for (int j = 0; j < d; ++j) in_vec[static_cast<size_t>(corpus::Vocabulary::kPad) * d + j] = 0.0;
  return Tensor::from_data({V, d}, std::move(in_vec));
}

CharConvParams make_char_conv(ParameterStore* store, const std::string& prefix, int char_vec_dim,
                              int output_dim, Rng& rng) {
  CharConvParams p;
  p.char_vec_dim = char_vec_dim;
  if (output_dim % static_cast<int>(p.windows.size()) != 0)
    throw Error(ErrorCode::bad_config, "char output dim must divide evenly across windows");
  p.filters_per_window = output_dim / static_cast<int>(p.windows.size());

  auto make = [&](const std::string& name, const Shape& shape, double lo, double hi) {
    if (store) return store->create_uniform(prefix + name, shape, lo, hi, rng);
    std::vector<double> init(static_cast<size_t>(shape_size(shape)));
    for (auto& v : init) v = rng.uniform(lo, hi);
    return Tensor::from_data(shape, std::move(init));
  };
  p.table = make("table", {kCharAlphabet, char_vec_dim}, -0.4, 0.4);
  for (int w : p.windows) {
    const double s = std::sqrt(3.0 / (w * char_vec_dim));
    p.filters.push_back(
        make("conv" + std::to_string(w) + ".filters", {w * char_vec_dim, p.filters_per_window}, -s, s));
    p.biases.push_back(make("conv" + std::to_string(w) + ".bias", {p.filters_per_window}, 0.0, 0.0));
  }
  return p;
}

Tensor char_embed(const std::string& word, const CharConvParams& params) {
  std::vector<Tensor> pools;
  for (size_t wi = 0; wi < params.windows.size(); ++wi) {
    const int w = params.windows[wi];
    std::vector<int> chars;
    const int pad_needed = w - static_cast<int>(word.size());
    for (int i = 0; i < pad_needed; ++i) chars.push_back(kCharPad);  // left pad short words
    for (char c : word) chars.push_back(char_id(c));
    const int len = static_cast<int>(chars.size());
    const int positions = len - w + 1;
    std::vector<int> windowed;
    windowed.reserve(static_cast<size_t>(positions) * w);
    for (int pstart = 0; pstart < positions; ++pstart)
      for (int q = 0; q < w; ++q) windowed.push_back(chars[static_cast<size_t>(pstart + q)]);
    Tensor rows = gather_rows(params.table, windowed);               // [positions*w x c]
    Tensor cols = reshape(rows, {positions, w * params.char_vec_dim});
    Tensor conv = add_rowwise(matmul(cols, params.filters[wi]), params.biases[wi]);
    pools.push_back(masked_max_rows(conv, Tensor::constant({positions}, 1.0)));
  }
  return concat_vec(pools);
}

Tensor embed_tokens(const std::vector<int>& ids, const std::vector<std::string>& tokens,
                    const EmbeddingTable& table, const CharConvParams* char_params) {
  if (ids.size() != tokens.size())
    throw Error(ErrorCode::length_mismatch, "embed_tokens: ids/tokens length mismatch");
  for (int id : ids)
    if (id < 0 || id >= table.pretrained.rows())
      throw Error(ErrorCode::id_out_of_range, "embed_tokens: id out of range");
  std::vector<Tensor> slices;
  if (table.pretrained_dim > 0) slices.push_back(gather_rows(table.pretrained, ids));
  if (table.corpus_dim > 0) slices.push_back(gather_rows(table.corpus, ids));
  if (char_params && char_params->output_dim() > 0) {
    std::vector<Tensor> rows;
    rows.reserve(ids.size());
    for (size_t t = 0; t < ids.size(); ++t) {
      if (ids[t] == corpus::Vocabulary::kPad) {
        rows.push_back(Tensor::zeros({1, char_params->output_dim()}));
      } else {
        rows.push_back(reshape(char_embed(tokens[t], *char_params), {1, char_params->output_dim()}));
      }
    }
    slices.push_back(concat_rows(rows));
  }
  if (slices.empty()) throw Error(ErrorCode::bad_config, "embed_tokens: all slices disabled");
  return slices.size() == 1 ? slices[0] : concat_cols(slices);
}

}  // namespace dck::embed
