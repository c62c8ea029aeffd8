#include <ostream>

#include "dck/harness.hpp"
#include "dck/matcher.hpp"

namespace dck::harness {

namespace {

// Reduce an arbitrary tensor to a scalar with fixed random weights so every
// element's gradient participates.
Tensor weighted_sum(const Tensor& t, uint64_t seed) {
  Rng rng(seed);
  std::vector<double> w(t.data().size());
  for (auto& v : w) v = rng.uniform(-1.0, 1.0);
  const int n = static_cast<int>(t.size());
  return dot(reshape(t, {n}), Tensor::from_data({n}, std::move(w)));
}

// Finite differences need a generic point. The pristine initialization is
// degenerate: unit layer-norm gains give every normalized row the exact same
// norm, so the self-similarity diagonal is an n-way tie and max pooling sits
// directly on a kink.
void jitter_params(ParameterStore& store, uint64_t seed, double scale = 0.05) {
  Rng rng(seed);
  for (const auto& [name, param] : store.all()) {
    Tensor t = param;
    for (auto& v : t.mutable_data()) v += rng.uniform(-scale, scale);
  }
}

}  // namespace

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.dataset = "synthetic";
  cfg.pretrained_dim = 6;
  cfg.corpus_dim = 3;
  cfg.char_dim = 3;
  cfg.char_vec_dim = 2;
  cfg.train_char_conv = true;
  cfg.pretrained_vectors = "random";
  cfg.corpus_vectors = "random";
  cfg.hidden = 4;
  cfg.heads = 2;
  cfg.hops = 2;
  cfg.mlp_hidden = 8;
  cfg.limits = corpus::Limits{2, 2, 4, 3};
  cfg.batch_size = 4;
  cfg.learning_rate = 0.003;
  cfg.seed = 20240901;
  cfg.threads = 1;
  return cfg;
}

corpus::Vocabulary tiny_vocab() {
  std::vector<std::string> tokens = {"alpha", "beta", "gamma", "delta", "epsilon",
                                     "zeta",  "eta",  "theta", "iota",  "kappa",
                                     "alpha", "beta"};  // repeats shape the frequency order
  return corpus::build_vocabulary(tokens, 1);
}

corpus::EncodedSample tiny_sample(const corpus::Vocabulary& vocab, const corpus::Limits& limits) {
  corpus::Sample s;
  s.context = {"alpha beta gamma", "delta beta eta"};
  s.knowledge = {"beta epsilon theta", "zeta iota"};
  s.candidates = {"beta gamma alpha kappa", "epsilon zeta", "delta eta iota"};
  s.label = 0;
  return corpus::encode_sample(s, vocab, limits);
}

double run_gradcheck_suite(std::ostream& out) {
  double worst = 0.0;
  auto report = [&](const std::string& name, double err) {
    worst = std::max(worst, err);
    out << (err < 1e-3 ? "pass" : "FAIL") << "  " << name << "  max_rel_err=" << err << "\n";
  };

  {
    ParameterStore store;
    Rng rng(101);
    Tensor x = store.create_uniform("x", {3, 5}, -1.0, 1.0, rng);
    Tensor g = store.create_uniform("gain", {5}, 0.5, 1.5, rng);
    Tensor b = store.create_uniform("bias", {5}, -0.5, 0.5, rng);
    report("layer_norm", gradient_check(
                             [&] { return weighted_sum(layer_norm(x, g, b, 1e-6), 11); }, store));
  }
  {
    ParameterStore store;
    Rng rng(102);
    Tensor x = store.create_uniform("logits", {3, 4}, -2.0, 2.0, rng);
    Tensor mask = Tensor::from_data({4}, {1, 1, 0, 1});
    report("masked_softmax", gradient_check(
                                 [&] { return weighted_sum(masked_softmax(x, mask, 1), 12); }, store));
  }
  {
    ParameterStore store;
    Rng rng(103);
    Tensor x = store.create_uniform("x", {5, 3}, -1.5, 1.5, rng);
    Tensor mask = Tensor::from_data({5}, {1, 1, 1, 0, 1});
    report("masked_pooling",
           gradient_check(
               [&] {
                 return add(weighted_sum(masked_max_rows(x, mask), 13),
                            weighted_sum(masked_mean_rows(x, mask), 14));
               },
               store));
  }
  {
    ParameterStore store;
    Rng rng(104);
    Tensor x = store.create_uniform("x", {6}, -1.0, 1.0, rng);
    report("log_sum_exp", gradient_check([&] { return log_sum_exp(x); }, store));
  }
  {
    ParameterStore store;
    Rng rng(105);
    encoder::LstmDirection dir;
    auto gate = [&](const std::string& name) {
      encoder::GateParams g;
      g.w_x = store.create_uniform(name + ".w_x", {3, 2}, -0.5, 0.5, rng);
      g.w_h = store.create_uniform(name + ".w_h", {2, 2}, -0.5, 0.5, rng);
      g.b = store.create_uniform(name + ".b", {2}, -0.2, 0.2, rng);
      return g;
    };
    dir.input = gate("input");
    dir.forget = gate("forget");
    dir.output = gate("output");
    dir.cell = gate("cell");
    Tensor x = store.create_uniform("x", {3}, -1.0, 1.0, rng);
    Tensor h = store.create_uniform("h", {2}, -0.5, 0.5, rng);
    Tensor c = store.create_uniform("c", {2}, -0.5, 0.5, rng);
    report("lstm_cell", gradient_check(
                            [&] {
                              auto [hn, cn] = encoder::lstm_cell(x, h, c, dir);
                              return add(weighted_sum(hn, 15), weighted_sum(cn, 16));
                            },
                            store));
  }
  {
    ParameterStore store;
    Rng rng(106);
    encoder::BiLstmParams p = encoder::make_bilstm(store, "bilstm", 3, 2, rng);
    Tensor seq = store.create_uniform("seq", {4, 3}, -1.0, 1.0, rng);
    jitter_params(store, 771);
    Tensor mask = Tensor::from_data({4}, {1, 1, 1, 0});
    report("bilstm_encode", gradient_check(
                                [&] { return weighted_sum(encoder::bilstm_encode(seq, mask, p), 17); },
                                store));
  }
  {
    ParameterStore store;
    Rng rng(107);
    auto block = selector::make_attention_block(store, "block", 6, 2, 1e-6, rng);
    Tensor q = store.create_uniform("q", {3, 6}, -0.8, 0.8, rng);
    jitter_params(store, 772);
    Tensor mask = Tensor::from_data({3}, {1, 1, 0});
    report("attention_block",
           gradient_check([&] { return weighted_sum(selector::self_attend(q, mask, block), 18); },
                          store));
  }
  {
    ParameterStore store;
    Rng rng(108);
    auto conv = embed::make_char_conv(&store, "char.", 2, 3, rng);
    jitter_params(store, 773);
    report("char_conv", gradient_check(
                            [&] { return weighted_sum(embed::char_embed("gradient", conv), 19); },
                            store));
  }
  {
    ParameterStore store;
    Rng rng(109);
    Tensor x = store.create_uniform("x", {4, 3}, -1.0, 1.0, rng);
    Tensor r = store.create_uniform("r", {2, 3}, -1.0, 1.0, rng);
    Tensor xm = Tensor::from_data({4}, {1, 1, 1, 0});
    Tensor rm = Tensor::from_data({2}, {1, 1});
    report("cross_attend",
           gradient_check(
               [&] {
                 auto ca = matcher::cross_attend(x, xm, r, rm);
                 return add(weighted_sum(matcher::enrich(x, ca.x_aligned), 20),
                            weighted_sum(matcher::enrich(r, ca.r_aligned), 21));
               },
               store));
  }
  {
    ParameterStore store;
    Rng rng(110);
    Tensor w1 = store.create_uniform("w1", {6, 4}, -0.5, 0.5, rng);
    Tensor b1 = store.create_uniform("b1", {4}, -0.2, 0.2, rng);
    Tensor w2 = store.create_uniform("w2", {4, 1}, -0.5, 0.5, rng);
    Tensor b2 = store.create_uniform("b2", {1}, -0.2, 0.2, rng);
    Tensor x = store.create_uniform("x", {1, 6}, -1.0, 1.0, rng);
    report("mlp_head", gradient_check(
                           [&] {
                             Tensor h = relu_op(add_rowwise(matmul(x, w1), b1));
                             return reshape(add_rowwise(matmul(h, w2), b2), {1});
                           },
                           store));
  }
  {
    ModelConfig cfg = tiny_config();
    corpus::Vocabulary vocab = tiny_vocab();
    Model model(cfg, vocab);
    jitter_params(model.store(), 777);
    corpus::EncodedSample sample = tiny_sample(vocab, cfg.limits);
    report("full_loss", gradient_check(
                            [&] {
                              auto fwd = model.forward(sample);
                              return sample_loss(fwd.logits, sample.label);
                            },
                            model.store()));
  }
  return worst;
}

}  // namespace dck::harness
