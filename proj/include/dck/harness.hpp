#pragma once

#include <array>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "dck/aggregator.hpp"
#include "dck/corpus.hpp"
#include "dck/embed.hpp"
#include "dck/encoder.hpp"
#include "dck/matcher.hpp"
#include "dck/optim.hpp"
#include "dck/selector.hpp"

namespace dck::harness {

struct AblationFlags {
  bool disable_context_selector = false;
  bool disable_knowledge_selector = false;
  bool disable_post_selection = false;  // mean pooling instead
  bool drop_context = false;
  bool drop_knowledge = false;

  void validate() const;
  std::string summary() const;
  bool any() const {
    return disable_context_selector || disable_knowledge_selector || disable_post_selection ||
           drop_context || drop_knowledge;
  }
};

struct ModelConfig {
  std::string dataset = "persona_original";

  int pretrained_dim = 300;
  int corpus_dim = 100;
  int char_dim = 150;
  int char_vec_dim = 16;
  bool train_char_conv = true;
  std::string pretrained_vectors = "random";  // file path, or "random"
  std::string corpus_vectors = "train";       // file path, "train" or "random"

  int hidden = 300;
  int heads = 3;
  int hops = 3;
  int mlp_hidden = 256;
  std::string head_activation = "relu";  // relu | tanh
  double layer_norm_eps = 1e-6;

  corpus::Limits limits = corpus::default_limits("persona_original");

  double learning_rate = 0.00025;
  int batch_size = 12;
  int max_epochs = 20;
  int patience = 3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  uint64_t seed = 42;
  int threads = 0;  // 0 = hardware concurrency

  AblationFlags ablation;

  int embed_dim() const { return pretrained_dim + corpus_dim + char_dim; }
  int encoder_width() const { return 2 * hidden; }
  int feature_width() const { return 4 * hidden; }  // [max;last] of a 2h-wide BiLSTM
  int final_width() const { return 4 * feature_width(); }

  void validate() const;
  std::string serialize() const;
  uint64_t hash() const { return fnv1a(serialize()); }
  static ModelConfig parse(std::istream& in);
  static ModelConfig parse_file(const std::string& path);
  AdamHyper adam() const { return {learning_rate, adam_beta1, adam_beta2, adam_epsilon}; }
};

// Dataset-dependent defaults (limits, learning rate, batch size).
void apply_dataset_defaults(ModelConfig& cfg);

struct ForwardResult {
  Tensor logits;  // [n]
  // Diagnostics are value snapshots; they hold no graph references.
  std::vector<double> context_weights;                  // fused s_bar over utterances
  std::vector<double> knowledge_weights;                // fused s_bar over entries
  std::vector<std::vector<double>> hop_context;         // per hop
  std::vector<std::vector<double>> hop_knowledge;
  std::vector<std::vector<double>> gamma;               // per candidate
  std::vector<std::array<std::vector<double>, 4>> final_parts;  // per candidate M_c/M_k/M_r/M_rc
};

class Model {
 public:
  Model(const ModelConfig& cfg, corpus::Vocabulary vocab);

  // Fill the frozen lookup tables. `pretrained`/`corpus` follow the config
  // sources; a stream may be provided for file-backed tables.
  void init_tables(std::istream* pretrained_file, std::istream* corpus_file,
                   const std::vector<std::vector<std::string>>* train_sentences);
  void set_tables(Tensor pretrained, Tensor corpus);

  ForwardResult forward(const corpus::EncodedSample& sample, bool diagnostics = false) const;

  const ModelConfig& config() const { return cfg_; }
  const corpus::Vocabulary& vocab() const { return vocab_; }
  ParameterStore& store() { return store_; }
  const ParameterStore& store() const { return store_; }
  const embed::EmbeddingTable& tables() const { return tables_; }
  embed::EmbeddingTable& tables() { return tables_; }
  const embed::CharConvParams* char_conv() const {
    return cfg_.char_dim > 0 ? &char_conv_ : nullptr;
  }
  embed::CharConvParams* mutable_char_conv() { return cfg_.char_dim > 0 ? &char_conv_ : nullptr; }

 private:
  ModelConfig cfg_;
  corpus::Vocabulary vocab_;
  embed::EmbeddingTable tables_;
  embed::CharConvParams char_conv_;
  encoder::BiLstmParams token_encoder_;     // shared over context/knowledge/candidates
  encoder::BiLstmParams feature_encoder_;   // per-sentence aggregation
  encoder::BiLstmParams session_encoder_;   // across utterances
  selector::AttentionBlockParams context_block_, knowledge_block_;
  selector::SelectorParams context_sel_, knowledge_sel_;
  Tensor head_w1_, head_b1_, head_w2_, head_b2_;
  ParameterStore store_;
};

// lse(logits) - logits[label].
Tensor sample_loss(const Tensor& logits, int label);

// Mean cross-entropy after a softmax across each sample's candidates.
Tensor batch_loss(const std::vector<Tensor>& per_sample_logits, const std::vector<int>& labels);

// 1 iff the true candidate ranks within the top k by descending logit; ties
// break toward the lower candidate index.
bool recall_at_k(const std::vector<double>& logits, int label, int k);

struct BucketReport {
  int lo = 0, hi = 0;
  int64_t count = 0;
  double r_at_1 = 0, r_at_2 = 0, r_at_5 = 0;
};

struct MetricsReport {
  double r_at_1 = 0, r_at_2 = 0, r_at_5 = 0;
  int n_candidates = 0;
  int64_t sample_count = 0;
  std::string config_hash;
  std::string ablation = "none";
  double wall_seconds = 0;
  std::vector<BucketReport> buckets;  // empty unless requested

  std::string to_json() const;
};

std::vector<std::pair<int, int>> length_buckets(const std::string& dataset_id);

MetricsReport evaluate(const Model& model, const std::vector<corpus::EncodedSample>& samples,
                       bool with_buckets = false);

struct EpochStats {
  int epoch = 0;
  double train_loss = 0;
  double val_r_at_1 = 0;
  double seconds = 0;
};

struct TrainResult {
  std::vector<EpochStats> history;
  int best_epoch = -1;
  double best_val_r_at_1 = 0;
  std::map<std::string, std::vector<double>> best_params;  // snapshot at the best epoch
};

// Seeded shuffles per epoch, Adam updates, early stop on validation R_n@1
// after `patience` stale epochs. Throws DivergedLoss on non-finite loss.
// `epoch_hook` (optional) observes each epoch as it completes.
TrainResult train(Model& model, const std::vector<corpus::EncodedSample>& train_set,
                  const std::vector<corpus::EncodedSample>& val_set,
                  const std::function<void(const EpochStats&)>& epoch_hook = nullptr);

void restore_params(Model& model, const std::map<std::string, std::vector<double>>& values);

// Structured record with the selection weights, post-selection gamma of the
// top-ranked candidate, per-candidate logits and the raw texts.
std::string export_selection_weights(const Model& model, const corpus::EncodedSample& sample,
                                     int64_t sample_id);

void save_checkpoint(const std::string& path, const Model& model);
Model load_checkpoint(const std::string& path);

// Gradient-oracle suite: per-operation checks plus the full loss at a tiny
// configuration. Prints one line per check; returns the worst relative error.
double run_gradcheck_suite(std::ostream& out);

// Desk-scale configuration and fixture backing the gradient oracle.
ModelConfig tiny_config();
corpus::Vocabulary tiny_vocab();
corpus::EncodedSample tiny_sample(const corpus::Vocabulary& vocab, const corpus::Limits& limits);

void parallel_for(int n, int threads, const std::function<void(int)>& fn);

}  // namespace dck::harness
