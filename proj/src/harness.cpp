#include "dck/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <sstream>
#include <thread>

#include "json.hpp"

namespace dck::harness {

using ordered_json = nlohmann::ordered_json;

void AblationFlags::validate() const {
  if (drop_context && drop_knowledge)
    throw Error(ErrorCode::bad_config, "drop_context and drop_knowledge cannot both be set");
}

std::string AblationFlags::summary() const {
  std::vector<std::string> on;
  if (disable_context_selector) on.push_back("context_selector");
  if (disable_knowledge_selector) on.push_back("knowledge_selector");
  if (disable_post_selection) on.push_back("post_selection");
  if (drop_context) on.push_back("context");
  if (drop_knowledge) on.push_back("knowledge");
  if (on.empty()) return "none";
  std::string s;
  for (size_t i = 0; i < on.size(); ++i) s += (i ? "," : "") + on[i];
  return s;
}

void ModelConfig::validate() const {
  if (dataset != "persona_original" && dataset != "persona_revised" && dataset != "cmudog" &&
      dataset != "synthetic")
    throw Error(ErrorCode::bad_config, "unknown dataset: " + dataset);
  if (hidden <= 0 || heads <= 0 || hops <= 0 || mlp_hidden <= 0)
    throw Error(ErrorCode::bad_config, "model dimensions must be positive");
  if (embed_dim() <= 0) throw Error(ErrorCode::bad_config, "all embedding slices disabled");
  if (char_dim > 0 && char_dim % 3 != 0)
    throw Error(ErrorCode::bad_config, "char_dim must be divisible by the three windows");
  if (encoder_width() % heads != 0)
    throw Error(ErrorCode::bad_config, "encoder width must be divisible by heads");
  if (head_activation != "relu" && head_activation != "tanh")
    throw Error(ErrorCode::bad_config, "head_activation must be relu or tanh");
  if (learning_rate <= 0 || batch_size <= 0 || max_epochs <= 0 || patience <= 0)
    throw Error(ErrorCode::bad_config, "training settings must be positive");
  limits.validate();
  ablation.validate();
}

void apply_dataset_defaults(ModelConfig& cfg) {
  cfg.limits = corpus::default_limits(cfg.dataset);
  if (cfg.dataset == "cmudog") {
    cfg.learning_rate = 0.0001;
    cfg.batch_size = 6;
  } else {
    cfg.learning_rate = 0.00025;
    cfg.batch_size = 12;
  }
}

std::string ModelConfig::serialize() const {
  std::ostringstream o;
  o << "dataset = " << dataset << '\n';
  o << "pretrained_dim = " << pretrained_dim << '\n';
  o << "corpus_dim = " << corpus_dim << '\n';
  o << "char_dim = " << char_dim << '\n';
  o << "char_vec_dim = " << char_vec_dim << '\n';
  o << "train_char_conv = " << (train_char_conv ? "true" : "false") << '\n';
  o << "pretrained_vectors = " << pretrained_vectors << '\n';
  o << "corpus_vectors = " << corpus_vectors << '\n';
  o << "hidden = " << hidden << '\n';
  o << "heads = " << heads << '\n';
  o << "hops = " << hops << '\n';
  o << "mlp_hidden = " << mlp_hidden << '\n';
  o << "head_activation = " << head_activation << '\n';
  o << "layer_norm_eps = " << layer_norm_eps << '\n';
  o << "max_utterances = " << limits.max_utterances << '\n';
  o << "max_knowledge = " << limits.max_knowledge << '\n';
  o << "max_tokens = " << limits.max_tokens << '\n';
  o << "candidates = " << limits.candidates << '\n';
  o << "learning_rate = " << learning_rate << '\n';
  o << "batch_size = " << batch_size << '\n';
  o << "max_epochs = " << max_epochs << '\n';
  o << "patience = " << patience << '\n';
  o << "adam_beta1 = " << adam_beta1 << '\n';
  o << "adam_beta2 = " << adam_beta2 << '\n';
  o << "adam_epsilon = " << adam_epsilon << '\n';
  o << "seed = " << seed << '\n';
  o << "threads = " << threads << '\n';
  o << "ablate_context_selector = " << (ablation.disable_context_selector ? "true" : "false") << '\n';
  o << "ablate_knowledge_selector = " << (ablation.disable_knowledge_selector ? "true" : "false") << '\n';
  o << "ablate_post_selection = " << (ablation.disable_post_selection ? "true" : "false") << '\n';
  o << "drop_context = " << (ablation.drop_context ? "true" : "false") << '\n';
  o << "drop_knowledge = " << (ablation.drop_knowledge ? "true" : "false") << '\n';
  return o.str();
}

namespace {

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw Error(ErrorCode::bad_config, "expected boolean for " + key);
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

ModelConfig ModelConfig::parse(std::istream& in) {
  std::vector<std::pair<std::string, std::string>> entries;
  std::string line;
  while (std::getline(in, line)) {
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    auto eq = t.find('=');
    if (eq == std::string::npos)
      throw Error(ErrorCode::bad_config, "config line without '=': " + line);
    entries.emplace_back(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  ModelConfig cfg;
  // The dataset key steers defaults, so resolve it first.
  for (auto& [k, v] : entries)
    if (k == "dataset") cfg.dataset = v;
  apply_dataset_defaults(cfg);
  for (auto& [k, v] : entries) {
    if (k == "dataset") continue;
    else if (k == "pretrained_dim") cfg.pretrained_dim = std::stoi(v);
    else if (k == "corpus_dim") cfg.corpus_dim = std::stoi(v);
    else if (k == "char_dim") cfg.char_dim = std::stoi(v);
    else if (k == "char_vec_dim") cfg.char_vec_dim = std::stoi(v);
    else if (k == "train_char_conv") cfg.train_char_conv = parse_bool(v, k);
    else if (k == "pretrained_vectors") cfg.pretrained_vectors = v;
    else if (k == "corpus_vectors") cfg.corpus_vectors = v;
    else if (k == "hidden") cfg.hidden = std::stoi(v);
    else if (k == "heads") cfg.heads = std::stoi(v);
    else if (k == "hops") cfg.hops = std::stoi(v);
    else if (k == "mlp_hidden") cfg.mlp_hidden = std::stoi(v);
    else if (k == "head_activation") cfg.head_activation = v;
    else if (k == "layer_norm_eps") cfg.layer_norm_eps = std::stod(v);
    else if (k == "max_utterances") cfg.limits.max_utterances = std::stoi(v);
    else if (k == "max_knowledge") cfg.limits.max_knowledge = std::stoi(v);
    else if (k == "max_tokens") cfg.limits.max_tokens = std::stoi(v);
    else if (k == "candidates") cfg.limits.candidates = std::stoi(v);
    else if (k == "learning_rate") cfg.learning_rate = std::stod(v);
    else if (k == "batch_size") cfg.batch_size = std::stoi(v);
    else if (k == "max_epochs") cfg.max_epochs = std::stoi(v);
    else if (k == "patience") cfg.patience = std::stoi(v);
    else if (k == "adam_beta1") cfg.adam_beta1 = std::stod(v);
    else if (k == "adam_beta2") cfg.adam_beta2 = std::stod(v);
    else if (k == "adam_epsilon") cfg.adam_epsilon = std::stod(v);
    else if (k == "seed") cfg.seed = std::stoull(v);
    else if (k == "threads") cfg.threads = std::stoi(v);
    else if (k == "ablate_context_selector") cfg.ablation.disable_context_selector = parse_bool(v, k);
    else if (k == "ablate_knowledge_selector") cfg.ablation.disable_knowledge_selector = parse_bool(v, k);
    else if (k == "ablate_post_selection") cfg.ablation.disable_post_selection = parse_bool(v, k);
    else if (k == "drop_context") cfg.ablation.drop_context = parse_bool(v, k);
    else if (k == "drop_knowledge") cfg.ablation.drop_knowledge = parse_bool(v, k);
    else throw Error(ErrorCode::bad_config, "unknown config key: " + k);
  }
  cfg.validate();
  return cfg;
}

ModelConfig ModelConfig::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::file_unreadable, "cannot open config: " + path);
  return parse(in);
}

Model::Model(const ModelConfig& cfg, corpus::Vocabulary vocab)
    : cfg_(cfg), vocab_(std::move(vocab)) {
  cfg_.validate();
  Rng rng(cfg_.seed);
  const int d = cfg_.embed_dim();
  const int w = cfg_.encoder_width();
  token_encoder_ = encoder::make_bilstm(store_, "enc.token", d, cfg_.hidden, rng);
  context_block_ =
      selector::make_attention_block(store_, "sel.context", w, cfg_.heads, cfg_.layer_norm_eps, rng);
  knowledge_block_ =
      selector::make_attention_block(store_, "sel.knowledge", w, cfg_.heads, cfg_.layer_norm_eps, rng);
  context_sel_ = selector::make_selector_params(store_, "sel.context", cfg_.hops);
  knowledge_sel_ = selector::make_selector_params(store_, "sel.knowledge", cfg_.hops);
  feature_encoder_ = encoder::make_bilstm(store_, "agg.sentence", 4 * w, cfg_.hidden, rng);
  session_encoder_ = encoder::make_bilstm(store_, "agg.session", cfg_.feature_width(), cfg_.hidden, rng);
  const double s1 = std::sqrt(3.0 / cfg_.final_width());
  const double s2 = std::sqrt(3.0 / cfg_.mlp_hidden);
  head_w1_ = store_.create_uniform("head.w1", {cfg_.final_width(), cfg_.mlp_hidden}, -s1, s1, rng);
  head_b1_ = store_.create("head.b1", {cfg_.mlp_hidden},
                           std::vector<double>(static_cast<size_t>(cfg_.mlp_hidden), 0.0));
  head_w2_ = store_.create_uniform("head.w2", {cfg_.mlp_hidden, 1}, -s2, s2, rng);
  head_b2_ = store_.create("head.b2", {1}, {0.0});
  if (cfg_.char_dim > 0) {
    char_conv_ = embed::make_char_conv(cfg_.train_char_conv ? &store_ : nullptr, "embed.char.",
                                       cfg_.char_vec_dim, cfg_.char_dim, rng);
  }
  // Frozen tables default to seeded random; init_tables can replace them.
  tables_.pretrained_dim = cfg_.pretrained_dim;
  tables_.corpus_dim = cfg_.corpus_dim;
  if (cfg_.pretrained_dim > 0)
    tables_.pretrained = embed::random_table(vocab_.size(), cfg_.pretrained_dim, cfg_.seed ^ 0x9e37u);
  if (cfg_.corpus_dim > 0)
    tables_.corpus = embed::random_table(vocab_.size(), cfg_.corpus_dim, cfg_.seed ^ 0x79b9u);
}

void Model::init_tables(std::istream* pretrained_file, std::istream* corpus_file,
                        const std::vector<std::vector<std::string>>* train_sentences) {
  if (cfg_.pretrained_dim > 0 && cfg_.pretrained_vectors != "random") {
    if (!pretrained_file)
      throw Error(ErrorCode::file_unreadable, "pretrained vector file not provided");
    Tensor table = Tensor::zeros({vocab_.size(), cfg_.pretrained_dim});
    embed::load_word_vectors(*pretrained_file, vocab_, cfg_.pretrained_dim, table);
    tables_.pretrained = table;
  }
  if (cfg_.corpus_dim > 0 && cfg_.corpus_vectors != "random") {
    if (cfg_.corpus_vectors == "train") {
      if (!train_sentences)
        throw Error(ErrorCode::bad_config, "corpus_vectors=train needs training sentences");
      embed::SkipgramOptions opt;
      opt.dim = cfg_.corpus_dim;
      tables_.corpus = embed::train_skipgram(*train_sentences, vocab_, opt, cfg_.seed ^ 0xabcdu);
    } else {
      if (!corpus_file) throw Error(ErrorCode::file_unreadable, "corpus vector file not provided");
      Tensor table = Tensor::zeros({vocab_.size(), cfg_.corpus_dim});
      embed::load_word_vectors(*corpus_file, vocab_, cfg_.corpus_dim, table);
      tables_.corpus = table;
    }
  }
}

void Model::set_tables(Tensor pretrained, Tensor corpus) {
  if (cfg_.pretrained_dim > 0) tables_.pretrained = std::move(pretrained);
  if (cfg_.corpus_dim > 0) tables_.corpus = std::move(corpus);
}

namespace {

struct EncodedUnit {
  Tensor states;  // [len x 2h] (zeros row for empty units)
  Tensor mask;    // [len]
  int real_tokens = 0;
};

std::vector<double> snapshot(const Tensor& t) { return t.data(); }

}  // namespace

ForwardResult Model::forward(const corpus::EncodedSample& sample, bool diagnostics) const {
  const AblationFlags& ab = cfg_.ablation;
  const int w = cfg_.encoder_width();

  auto encode_unit = [&](const corpus::EncodedSequence& seq) {
    EncodedUnit u;
    u.real_tokens = static_cast<int>(seq.ids.size());
    if (u.real_tokens == 0) {
      u.states = Tensor::zeros({1, w});
      u.mask = Tensor::zeros({1});
      return u;
    }
    Tensor emb = embed::embed_tokens(seq.ids, seq.tokens, tables_,
                                     cfg_.char_dim > 0 ? &char_conv_ : nullptr);
    u.mask = Tensor::constant({u.real_tokens}, 1.0);
    u.states = encoder::bilstm_encode(emb, u.mask, token_encoder_);
    return u;
  };

  std::vector<EncodedUnit> ctx, kn;
  std::vector<Tensor> ctx_states, ctx_masks, kn_states, kn_masks;
  if (!ab.drop_context) {
    if (sample.context.empty()) throw Error(ErrorCode::empty_context, "sample has no context");
    for (const auto& u : sample.context) ctx.push_back(encode_unit(u));
    for (auto& u : ctx) {
      ctx_states.push_back(u.states);
      ctx_masks.push_back(u.mask);
    }
  }
  if (!ab.drop_knowledge) {
    if (sample.knowledge.empty()) throw Error(ErrorCode::empty_knowledge, "sample has no knowledge");
    for (const auto& u : sample.knowledge) kn.push_back(encode_unit(u));
    for (auto& u : kn) {
      kn_states.push_back(u.states);
      kn_masks.push_back(u.mask);
    }
  }

  ForwardResult out;

  // Pre-selection. The knowledge selector's query comes from the context's
  // self-attended states; with the context selector ablated the raw context
  // states serve as the query instead.
  std::vector<Tensor> ctx_selected = ctx_states;
  std::vector<Tensor> kn_selected = kn_states;
  std::vector<Tensor> query_hat = ctx_states;
  if (!ab.drop_context && !ab.disable_context_selector) {
    auto sel = selector::select_units(ctx_states, ctx_masks, context_block_, {}, {}, context_sel_);
    ctx_selected = sel.reweighted;
    query_hat = sel.units_hat;
    if (diagnostics) {
      out.context_weights = snapshot(sel.fused);
      for (auto& h : sel.per_hop) out.hop_context.push_back(snapshot(h));
    }
  }
  if (!ab.drop_knowledge && !ab.disable_knowledge_selector && !ab.drop_context) {
    auto sel = selector::select_units(kn_states, kn_masks, knowledge_block_, query_hat, ctx_masks,
                                      knowledge_sel_);
    kn_selected = sel.reweighted;
    if (diagnostics) {
      out.knowledge_weights = snapshot(sel.fused);
      for (auto& h : sel.per_hop) out.hop_knowledge.push_back(snapshot(h));
    }
  }

  std::vector<double> ctx_unit_mask, kn_unit_mask;
  for (auto& u : ctx) ctx_unit_mask.push_back(u.real_tokens > 0 ? 1.0 : 0.0);
  for (auto& u : kn) kn_unit_mask.push_back(u.real_tokens > 0 ? 1.0 : 0.0);

  const int n = static_cast<int>(sample.candidates.size());
  std::vector<Tensor> logits;
  logits.reserve(static_cast<size_t>(n));
  for (int j = 0; j < n; ++j) {
    const auto& cand = sample.candidates[static_cast<size_t>(j)];
    if (cand.ids.empty())
      throw Error(ErrorCode::empty_support, "candidate " + std::to_string(j) + " has no tokens");
    EncodedUnit r = encode_unit(cand);

    Tensor m_c, m_k, m_r, m_rc;
    if (!ab.drop_context) {
      auto match = matcher::match_pair(ctx_selected, ctx_masks, r.states, r.mask);
      std::vector<Tensor> utt_feats;
      for (size_t i = 0; i < ctx.size(); ++i) {
        auto [a, b] = match.seq.segments[i];
        if (ctx[i].real_tokens == 0) {
          utt_feats.push_back(Tensor::zeros({cfg_.feature_width()}));
        } else {
          utt_feats.push_back(agg::sentence_aggregate(slice_rows(match.side, a, b), ctx[i].mask,
                                                      feature_encoder_));
        }
      }
      m_c = agg::session_aggregate(utt_feats, ctx_unit_mask, session_encoder_);
      m_r = agg::sentence_aggregate(match.response, r.mask, feature_encoder_);
    } else {
      m_c = Tensor::zeros({cfg_.feature_width()});
      m_r = Tensor::zeros({cfg_.feature_width()});
    }
    if (!ab.drop_knowledge) {
      auto match = matcher::match_pair(kn_selected, kn_masks, r.states, r.mask);
      std::vector<Tensor> entry_feats;
      for (size_t i = 0; i < kn.size(); ++i) {
        auto [a, b] = match.seq.segments[i];
        if (kn[i].real_tokens == 0) {
          entry_feats.push_back(Tensor::zeros({cfg_.feature_width()}));
        } else {
          entry_feats.push_back(agg::sentence_aggregate(slice_rows(match.side, a, b), kn[i].mask,
                                                        feature_encoder_));
        }
      }
      m_rc = agg::sentence_aggregate(match.response, r.mask, feature_encoder_);
      auto post = agg::knowledge_post_select(entry_feats, kn_unit_mask, m_rc,
                                             ab.disable_post_selection);
      m_k = post.fused;
      if (diagnostics) out.gamma.push_back(snapshot(post.gamma));
    } else {
      m_k = Tensor::zeros({cfg_.feature_width()});
      m_rc = Tensor::zeros({cfg_.feature_width()});
    }

    Tensor final_vec = agg::assemble_final(m_c, m_k, m_r, m_rc, ab.drop_context, ab.drop_knowledge);
    if (diagnostics) {
      const int fw = cfg_.feature_width();
      std::array<std::vector<double>, 4> parts;
      for (int p = 0; p < 4; ++p)
        parts[static_cast<size_t>(p)] = std::vector<double>(
            final_vec.data().begin() + static_cast<long>(p) * fw,
            final_vec.data().begin() + static_cast<long>(p + 1) * fw);
      out.final_parts.push_back(std::move(parts));
    }

    Tensor hidden = add_rowwise(matmul(reshape(final_vec, {1, cfg_.final_width()}), head_w1_), head_b1_);
    hidden = cfg_.head_activation == "tanh" ? tanh_op(hidden) : relu_op(hidden);
    Tensor logit = add_rowwise(matmul(hidden, head_w2_), head_b2_);
    logits.push_back(reshape(logit, {1}));
  }
  out.logits = concat_vec(logits);
  if (!all_finite(out.logits))
    throw Error(ErrorCode::non_finite, "forward produced a non-finite logit");
  return out;
}

Tensor sample_loss(const Tensor& logits, int label) {
  if (label < 0 || label >= logits.shape()[0])
    throw Error(ErrorCode::label_out_of_range, "loss: label out of range");
  return sub(log_sum_exp(logits), element(logits, label));
}

Tensor batch_loss(const std::vector<Tensor>& per_sample_logits, const std::vector<int>& labels) {
  if (per_sample_logits.size() != labels.size() || per_sample_logits.empty())
    throw Error(ErrorCode::length_mismatch, "batch_loss: logits/labels mismatch");
  std::vector<Tensor> losses;
  losses.reserve(labels.size());
  for (size_t i = 0; i < labels.size(); ++i)
    losses.push_back(sample_loss(per_sample_logits[i], labels[i]));
  return mean_vec(concat_vec(losses));
}

bool recall_at_k(const std::vector<double>& logits, int label, int k) {
  if (label < 0 || label >= static_cast<int>(logits.size()))
    throw Error(ErrorCode::label_out_of_range, "recall: label out of range");
  if (k > static_cast<int>(logits.size()))
    throw Error(ErrorCode::bad_config, "recall: k exceeds candidate count");
  const double truth = logits[static_cast<size_t>(label)];
  int rank = 1;
  for (int j = 0; j < static_cast<int>(logits.size()); ++j) {
    if (j == label) continue;
    if (logits[static_cast<size_t>(j)] > truth || (logits[static_cast<size_t>(j)] == truth && j < label))
      ++rank;
  }
  return rank <= k;
}

std::vector<std::pair<int, int>> length_buckets(const std::string& dataset_id) {
  if (dataset_id == "cmudog") return {{1, 2}, {3, 4}, {5, 6}, {7, 8}};
  return {{1, 3}, {4, 7}, {8, 11}, {12, 15}};
}

void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  if (threads <= 0) threads = static_cast<int>(std::thread::hardware_concurrency());
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<size_t>(threads));
  pool.reserve(static_cast<size_t>(threads));
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&, t]() {
      try {
        for (int i = t; i < n; i += threads) fn(i);
      } catch (...) {
        errors[static_cast<size_t>(t)] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

MetricsReport evaluate(const Model& model, const std::vector<corpus::EncodedSample>& samples,
                       bool with_buckets) {
  const auto start = std::chrono::steady_clock::now();
  const int n = static_cast<int>(samples.size());
  std::vector<std::array<int, 3>> hits(static_cast<size_t>(n));
  std::vector<int> ctx_len(static_cast<size_t>(n));
  parallel_for(n, model.config().threads, [&](int i) {
    NoGradGuard ng;
    auto fwd = model.forward(samples[static_cast<size_t>(i)]);
    const auto& logits = fwd.logits.data();
    const int label = samples[static_cast<size_t>(i)].label;
    hits[static_cast<size_t>(i)] = {recall_at_k(logits, label, 1) ? 1 : 0,
                                    recall_at_k(logits, label, 2) ? 1 : 0,
                                    recall_at_k(logits, label, 5) ? 1 : 0};
    ctx_len[static_cast<size_t>(i)] = static_cast<int>(samples[static_cast<size_t>(i)].context.size());
  });

  MetricsReport report;
  report.sample_count = n;
  report.n_candidates = model.config().limits.candidates;
  report.config_hash = hex64(model.config().hash());
  report.ablation = model.config().ablation.summary();
  int64_t h1 = 0, h2 = 0, h5 = 0;
  for (auto& h : hits) {
    h1 += h[0];
    h2 += h[1];
    h5 += h[2];
  }
  if (n > 0) {
    report.r_at_1 = static_cast<double>(h1) / n;
    report.r_at_2 = static_cast<double>(h2) / n;
    report.r_at_5 = static_cast<double>(h5) / n;
  }
  if (with_buckets) {
    auto spans = length_buckets(model.config().dataset);
    std::vector<BucketReport> buckets;
    for (auto [lo, hi] : spans) buckets.push_back({lo, hi, 0, 0, 0, 0});
    for (int i = 0; i < n; ++i) {
      int b = static_cast<int>(spans.size()) - 1;  // lengths past the last span land there
      for (size_t s = 0; s < spans.size(); ++s)
        if (ctx_len[static_cast<size_t>(i)] >= spans[s].first &&
            ctx_len[static_cast<size_t>(i)] <= spans[s].second) {
          b = static_cast<int>(s);
          break;
        }
      auto& bucket = buckets[static_cast<size_t>(b)];
      bucket.count += 1;
      bucket.r_at_1 += hits[static_cast<size_t>(i)][0];
      bucket.r_at_2 += hits[static_cast<size_t>(i)][1];
      bucket.r_at_5 += hits[static_cast<size_t>(i)][2];
    }
    for (auto& b : buckets) {
      if (b.count > 0) {
        b.r_at_1 /= static_cast<double>(b.count);
        b.r_at_2 /= static_cast<double>(b.count);
        b.r_at_5 /= static_cast<double>(b.count);
      }
    }
    report.buckets = std::move(buckets);
  }
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

std::string MetricsReport::to_json() const {
  ordered_json j;
  j["r_at_1"] = r_at_1;
  j["r_at_2"] = r_at_2;
  j["r_at_5"] = r_at_5;
  j["n_candidates"] = n_candidates;
  j["sample_count"] = sample_count;
  j["config_hash"] = config_hash;
  j["ablation"] = ablation;
  j["wall_seconds"] = wall_seconds;
  if (!buckets.empty()) {
    ordered_json arr = ordered_json::array();
    for (const auto& b : buckets) {
      ordered_json e;
      e["utterances_from"] = b.lo;
      e["utterances_to"] = b.hi;
      e["count"] = b.count;
      e["r_at_1"] = b.r_at_1;
      e["r_at_2"] = b.r_at_2;
      e["r_at_5"] = b.r_at_5;
      arr.push_back(e);
    }
    j["buckets"] = arr;
  }
  return j.dump(2);
}

namespace {

std::map<std::string, std::vector<double>> snapshot_params(const ParameterStore& store) {
  std::map<std::string, std::vector<double>> out;
  for (const auto& [name, t] : store.all()) out[name] = t.data();
  return out;
}

}  // namespace

void restore_params(Model& model, const std::map<std::string, std::vector<double>>& values) {
  for (const auto& [name, data] : values) {
    Tensor t = model.store().get(name);
    if (t.data().size() != data.size())
      throw Error(ErrorCode::shape_mismatch, "restore: size mismatch for " + name);
    t.mutable_data() = data;
  }
}

TrainResult train(Model& model, const std::vector<corpus::EncodedSample>& train_set,
                  const std::vector<corpus::EncodedSample>& val_set,
                  const std::function<void(const EpochStats&)>& epoch_hook) {
  const ModelConfig& cfg = model.config();
  TrainResult result;
  int stale = 0;
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    auto batches = corpus::make_batches(static_cast<int>(train_set.size()), cfg.batch_size,
                                        cfg.seed + static_cast<uint64_t>(epoch) * 0x9e3779b9ULL);
    double loss_sum = 0.0;
    int64_t seen = 0;
    for (const auto& batch : batches) {
      const int bs = static_cast<int>(batch.size());
      std::vector<GradMap> maps(static_cast<size_t>(bs));
      std::vector<double> losses(static_cast<size_t>(bs));
      try {
        parallel_for(bs, cfg.threads, [&](int i) {
          const auto& sample = train_set[static_cast<size_t>(batch[static_cast<size_t>(i)])];
          auto fwd = model.forward(sample);
          Tensor raw = sample_loss(fwd.logits, sample.label);
          losses[static_cast<size_t>(i)] = raw.at(0);
          maps[static_cast<size_t>(i)] = backward(scale(raw, 1.0 / bs));
        });
      } catch (const Error& e) {
        if (e.code() == ErrorCode::non_finite)
          throw Error(ErrorCode::diverged_loss,
                      std::string("training diverged at epoch ") + std::to_string(epoch) + ": " +
                          e.what());
        throw;
      }
      double batch_loss_value = 0.0;
      for (double l : losses) batch_loss_value += l;
      batch_loss_value /= bs;
      if (!std::isfinite(batch_loss_value))
        throw Error(ErrorCode::diverged_loss,
                    "non-finite loss at epoch " + std::to_string(epoch));
      loss_sum += batch_loss_value * bs;
      seen += bs;

      // Deterministic reduction in sample order, then one Adam step.
      std::map<std::string, std::vector<double>> grads;
      for (const auto& [name, t] : model.store().all())
        grads[name] = std::vector<double>(t.data().size(), 0.0);
      for (int i = 0; i < bs; ++i) {
        for (const auto& [name, t] : model.store().all()) {
          auto it = maps[static_cast<size_t>(i)].find(t.node());
          if (it == maps[static_cast<size_t>(i)].end()) continue;
          auto& acc = grads[name];
          for (size_t e = 0; e < acc.size(); ++e) acc[e] += it->second[e];
        }
      }
      model.store().adam_step(grads, cfg.adam());
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = seen > 0 ? loss_sum / static_cast<double>(seen) : 0.0;
    if (!val_set.empty()) stats.val_r_at_1 = evaluate(model, val_set).r_at_1;
    stats.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.history.push_back(stats);
    if (epoch_hook) epoch_hook(stats);

    if (val_set.empty() || stats.val_r_at_1 > result.best_val_r_at_1 || result.best_epoch < 0) {
      result.best_epoch = epoch;
      result.best_val_r_at_1 = stats.val_r_at_1;
      result.best_params = snapshot_params(model.store());
      stale = 0;
    } else if (++stale >= cfg.patience) {
      break;
    }
  }
  return result;
}

std::string export_selection_weights(const Model& model, const corpus::EncodedSample& sample,
                                     int64_t sample_id) {
  NoGradGuard ng;
  auto fwd = model.forward(sample, /*diagnostics=*/true);
  const auto& logits = fwd.logits.data();
  int top = 0;
  for (int j = 1; j < static_cast<int>(logits.size()); ++j)
    if (logits[static_cast<size_t>(j)] > logits[static_cast<size_t>(top)]) top = j;

  ordered_json j;
  j["sample_id"] = sample_id;
  j["context"] = sample.context_text;
  j["knowledge"] = sample.knowledge_text;
  j["candidates"] = sample.candidate_text;
  j["label"] = sample.label;
  j["context_weights"] = fwd.context_weights;
  j["knowledge_weights"] = fwd.knowledge_weights;
  j["context_weights_per_hop"] = fwd.hop_context;
  j["knowledge_weights_per_hop"] = fwd.hop_knowledge;
  j["top_candidate"] = top;
  j["gamma"] = fwd.gamma.empty() ? std::vector<double>{} : fwd.gamma[static_cast<size_t>(top)];
  j["logits"] = logits;
  return j.dump(2);
}

namespace {

void write_u64(std::ostream& out, uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

uint64_t read_u64(std::istream& in) {
  uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

void write_blob(std::ostream& out, const std::string& s) {
  write_u64(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_blob(std::istream& in) {
  uint64_t n = read_u64(in);
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  return s;
}

void write_doubles(std::ostream& out, const std::vector<double>& v) {
  write_u64(out, v.size());
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
}

std::vector<double> read_doubles(std::istream& in) {
  uint64_t n = read_u64(in);
  std::vector<double> v(n);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
  return v;
}

constexpr char kCheckpointMagic[] = "DCKCKPT1";

}  // namespace

void save_checkpoint(const std::string& path, const Model& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::file_unreadable, "cannot write checkpoint: " + path);
  out.write(kCheckpointMagic, 8);
  write_blob(out, model.config().serialize());
  std::ostringstream vocab_text;
  model.vocab().save(vocab_text);
  write_blob(out, vocab_text.str());
  write_u64(out, model.vocab().hash());

  const auto& params = model.store().all();
  write_u64(out, params.size());
  for (const auto& [name, t] : params) {
    write_blob(out, name);
    write_doubles(out, t.data());
  }
  const auto& tables = model.tables();
  write_doubles(out, tables.pretrained_dim > 0 ? tables.pretrained.data() : std::vector<double>{});
  write_doubles(out, tables.corpus_dim > 0 ? tables.corpus.data() : std::vector<double>{});
  // Frozen char-conv parameters live outside the store.
  const auto* cc = model.char_conv();
  if (cc && !model.config().train_char_conv) {
    write_u64(out, 1);
    write_doubles(out, cc->table.data());
    for (size_t wi = 0; wi < cc->windows.size(); ++wi) {
      write_doubles(out, cc->filters[wi].data());
      write_doubles(out, cc->biases[wi].data());
    }
  } else {
    write_u64(out, 0);
  }
}

Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::file_unreadable, "cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  if (std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw Error(ErrorCode::malformed_record, "not a checkpoint file: " + path);
  std::istringstream cfg_in(read_blob(in));
  ModelConfig cfg = ModelConfig::parse(cfg_in);
  std::istringstream vocab_in(read_blob(in));
  corpus::Vocabulary vocab = corpus::Vocabulary::load(vocab_in);
  const uint64_t stored_hash = read_u64(in);
  if (stored_hash != vocab.hash())
    throw Error(ErrorCode::hash_mismatch, "checkpoint vocabulary hash mismatch");

  Model model(cfg, std::move(vocab));
  const uint64_t n_params = read_u64(in);
  std::map<std::string, std::vector<double>> values;
  for (uint64_t i = 0; i < n_params; ++i) {
    std::string name = read_blob(in);
    values[name] = read_doubles(in);
  }
  if (values.size() != model.store().count())
    throw Error(ErrorCode::hash_mismatch, "checkpoint parameter set mismatch");
  restore_params(model, values);
  auto pretrained = read_doubles(in);
  auto corpus_vecs = read_doubles(in);
  if (cfg.pretrained_dim > 0)
    model.tables().pretrained =
        Tensor::from_data({model.vocab().size(), cfg.pretrained_dim}, std::move(pretrained));
  if (cfg.corpus_dim > 0)
    model.tables().corpus =
        Tensor::from_data({model.vocab().size(), cfg.corpus_dim}, std::move(corpus_vecs));
  if (read_u64(in) == 1) {
    auto* cc = model.mutable_char_conv();
    if (!cc) throw Error(ErrorCode::malformed_record, "checkpoint has char data but config disables it");
    cc->table.mutable_data() = read_doubles(in);
    for (size_t wi = 0; wi < cc->windows.size(); ++wi) {
      cc->filters[wi].mutable_data() = read_doubles(in);
      cc->biases[wi].mutable_data() = read_doubles(in);
    }
  }
  if (!in) throw Error(ErrorCode::malformed_record, "checkpoint truncated: " + path);
  return model;
}

}  // namespace dck::harness
