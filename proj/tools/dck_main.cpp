// Command-line front end: preprocess raw dialogue data, train, evaluate,
// inspect selection weights, and run the gradient-check suite.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "dck/harness.hpp"
#include "dck/synth.hpp"

namespace fs = std::filesystem;
using namespace dck;

namespace {

std::string data_root(const std::string& flag_value) {
  if (!flag_value.empty()) return flag_value;
  if (const char* env = std::getenv("DCK_DATA_DIR")) return env;
  return ".";
}

std::vector<std::string> split_names(const std::string& dataset) {
  if (dataset == "persona_original")
    return {"train_self_original.txt", "valid_self_original.txt", "test_self_original.txt"};
  if (dataset == "persona_revised")
    return {"train_self_revised.txt", "valid_self_revised.txt", "test_self_revised.txt"};
  if (dataset == "cmudog") return {"train.jsonl", "valid.jsonl", "test.jsonl"};
  return {"train_self_synthetic.txt", "valid_self_synthetic.txt", "test_self_synthetic.txt"};
}

std::vector<corpus::Dialogue> parse_split(const std::string& dataset, const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw Error(ErrorCode::file_unreadable, "cannot open " + file.string());
  if (dataset == "cmudog") return corpus::parse_cmudog(in);
  return corpus::parse_persona_chat(in);
}

void collect_sentences(const std::vector<corpus::Dialogue>& dialogues,
                       std::vector<std::string>& out) {
  for (const auto& d : dialogues) {
    for (const auto& k : d.knowledge) out.push_back(k);
    for (const auto& t : d.turns) out.push_back(t.text);
  }
}

std::vector<std::vector<std::string>> load_sentence_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::file_unreadable, "cannot open " + path.string());
  std::vector<std::vector<std::string>> out;
  std::string line;
  while (std::getline(in, line)) {
    auto toks = corpus::tokenize(line);
    if (!toks.empty()) out.push_back(std::move(toks));
  }
  return out;
}

struct LoadedSplit {
  corpus::CacheHeader header;
  std::vector<corpus::EncodedSample> samples;
};

LoadedSplit load_split(const fs::path& dir, const std::string& split,
                       const corpus::Vocabulary& vocab) {
  std::ifstream in(dir / (split + ".cache.jsonl"));
  if (!in)
    throw Error(ErrorCode::file_unreadable,
                "cannot open cache for split '" + split + "' under " + dir.string());
  auto [header, samples] = corpus::load_cache(in, vocab);
  return {header, std::move(samples)};
}

corpus::Vocabulary load_vocab(const fs::path& dir) {
  std::ifstream in(dir / "vocab.txt");
  if (!in) throw Error(ErrorCode::file_unreadable, "cannot open " + (dir / "vocab.txt").string());
  return corpus::Vocabulary::load(in);
}

harness::Model build_model(const harness::ModelConfig& cfg, const fs::path& data_dir) {
  corpus::Vocabulary vocab = load_vocab(data_dir);
  harness::Model model(cfg, std::move(vocab));
  std::ifstream pretrained_file;
  std::istream* pretrained = nullptr;
  if (cfg.pretrained_dim > 0 && cfg.pretrained_vectors != "random") {
    pretrained_file.open(cfg.pretrained_vectors);
    if (!pretrained_file)
      throw Error(ErrorCode::file_unreadable, "cannot open " + cfg.pretrained_vectors);
    pretrained = &pretrained_file;
  }
  std::ifstream corpus_file;
  std::istream* corpus_vecs = nullptr;
  std::vector<std::vector<std::string>> sentences;
  const std::vector<std::vector<std::string>>* sentences_ptr = nullptr;
  if (cfg.corpus_dim > 0) {
    if (cfg.corpus_vectors == "train") {
      sentences = load_sentence_file(data_dir / "train_sentences.txt");
      sentences_ptr = &sentences;
    } else if (cfg.corpus_vectors != "random") {
      corpus_file.open(cfg.corpus_vectors);
      if (!corpus_file) throw Error(ErrorCode::file_unreadable, "cannot open " + cfg.corpus_vectors);
      corpus_vecs = &corpus_file;
    }
  }
  model.init_tables(pretrained, corpus_vecs, sentences_ptr);
  return model;
}

void apply_ablate_list(harness::ModelConfig& cfg, const std::string& list) {
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    if (item == "context_selector") cfg.ablation.disable_context_selector = true;
    else if (item == "knowledge_selector") cfg.ablation.disable_knowledge_selector = true;
    else if (item == "post_selection") cfg.ablation.disable_post_selection = true;
    else if (item == "context") cfg.ablation.drop_context = true;
    else if (item == "knowledge") cfg.ablation.drop_knowledge = true;
    else throw Error(ErrorCode::bad_config, "unknown ablation flag: " + item);
  }
  cfg.ablation.validate();
}

int cmd_preprocess(const std::string& dataset, const std::string& in_dir,
                   const std::string& out_dir, uint64_t seed, int min_freq,
                   const corpus::Limits& limits) {
  fs::path in(in_dir), out(out_dir);
  fs::create_directories(out);

  auto names = split_names(dataset);
  std::vector<std::vector<corpus::Dialogue>> dialogues;
  for (const auto& name : names) dialogues.push_back(parse_split(dataset, in / name));

  std::vector<std::string> train_tokens;
  std::vector<std::string> train_sentences;
  collect_sentences(dialogues[0], train_sentences);
  for (const auto& s : train_sentences)
    for (auto& t : corpus::tokenize(s)) train_tokens.push_back(std::move(t));
  corpus::Vocabulary vocab = corpus::build_vocabulary(train_tokens, min_freq);
  {
    std::ofstream vf(out / "vocab.txt");
    vocab.save(vf);
    std::ofstream sf(out / "train_sentences.txt");
    for (const auto& s : train_sentences) sf << s << '\n';
  }

  const char* split_ids[3] = {"train", "valid", "test"};
  for (int i = 0; i < 3; ++i) {
    std::vector<std::string> pool;
    for (const auto& d : dialogues[static_cast<size_t>(i)])
      for (const auto& t : d.turns)
        if (dataset == "cmudog" || t.speaker == "self") pool.push_back(t.text);
    auto samples = corpus::dialogues_to_samples(dialogues[static_cast<size_t>(i)], dataset, pool,
                                                limits.candidates, seed + static_cast<uint64_t>(i));
    corpus::CacheHeader header;
    header.dataset = dataset;
    header.split = split_ids[i];
    header.limits = limits;
    header.sample_count = static_cast<int64_t>(samples.size());
    std::ofstream cf(out / (std::string(split_ids[i]) + ".cache.jsonl"));
    corpus::save_cache(cf, header, samples, vocab);
    auto st = corpus::stats(dialogues[static_cast<size_t>(i)], dataset);
    std::cout << split_ids[i] << ": " << st.conversations << " conversations, " << st.turns
              << " turns, " << samples.size() << " samples\n";
  }
  return 0;
}

int cmd_synth(const std::string& out_dir, int dialogues, int candidates, int exchanges_min,
              int exchanges_max, uint64_t seed) {
  fs::path out(out_dir);
  fs::create_directories(out);
  const char* names[3] = {"train_self_synthetic.txt", "valid_self_synthetic.txt",
                          "test_self_synthetic.txt"};
  const int counts[3] = {dialogues, std::max(1, dialogues / 5), std::max(1, dialogues / 5)};
  for (int i = 0; i < 3; ++i) {
    synth::SynthOptions opt;
    opt.dialogues = counts[i];
    opt.candidates = candidates;
    opt.exchanges_min = exchanges_min;
    opt.exchanges_max = exchanges_max;
    opt.seed = seed + static_cast<uint64_t>(i) * 7919;
    std::ofstream f(out / names[i]);
    f << synth::persona_corpus(opt);
    std::cout << names[i] << ": " << counts[i] << " dialogues\n";
  }
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_flag, int64_t seed_override,
              const std::string& ablate, const std::string& run_dir) {
  harness::ModelConfig cfg = harness::ModelConfig::parse_file(config_path);
  if (seed_override >= 0) cfg.seed = static_cast<uint64_t>(seed_override);
  if (!ablate.empty()) apply_ablate_list(cfg, ablate);
  fs::path data(data_root(data_flag));
  fs::path out(run_dir);
  fs::create_directories(out);

  harness::Model model = build_model(cfg, data);
  auto train_split = load_split(data, "train", model.vocab());
  auto valid_split = load_split(data, "valid", model.vocab());
  if (train_split.header.limits != cfg.limits)
    throw Error(ErrorCode::hash_mismatch, "cache limits do not match the config limits");

  std::cout << "training on " << train_split.samples.size() << " samples, validating on "
            << valid_split.samples.size() << " (ablation: " << cfg.ablation.summary() << ")\n";
  auto result = harness::train(model, train_split.samples, valid_split.samples,
                               [](const harness::EpochStats& e) {
                                 std::cout << "epoch " << e.epoch << "  loss " << e.train_loss
                                           << "  val R@1 " << e.val_r_at_1 << "  (" << e.seconds
                                           << "s)\n";
                               });
  harness::restore_params(model, result.best_params);
  harness::save_checkpoint((out / "checkpoint.bin").string(), model);
  {
    std::ofstream hf(out / "history.json");
    hf << "[\n";
    for (size_t i = 0; i < result.history.size(); ++i) {
      const auto& e = result.history[i];
      hf << "  {\"epoch\": " << e.epoch << ", \"train_loss\": " << e.train_loss
         << ", \"val_r_at_1\": " << e.val_r_at_1 << ", \"seconds\": " << e.seconds << "}"
         << (i + 1 < result.history.size() ? "," : "") << "\n";
    }
    hf << "]\n";
  }
  std::cout << "best epoch " << result.best_epoch << " (val R@1 " << result.best_val_r_at_1
            << "); checkpoint written to " << (out / "checkpoint.bin").string() << "\n";
  return 0;
}

int cmd_evaluate(const std::string& checkpoint, const std::string& split,
                 const std::string& data_flag, bool buckets, const std::string& out_path) {
  harness::Model model = harness::load_checkpoint(checkpoint);
  fs::path data(data_root(data_flag));
  auto eval_split = load_split(data, split, model.vocab());
  auto report = harness::evaluate(model, eval_split.samples, buckets);
  std::string text = report.to_json();
  if (!out_path.empty()) {
    std::ofstream f(out_path);
    f << text << '\n';
  }
  std::cout << text << '\n';
  return 0;
}

int cmd_inspect(const std::string& checkpoint, int64_t sample_id, const std::string& split,
                const std::string& data_flag, const std::string& out_path) {
  harness::Model model = harness::load_checkpoint(checkpoint);
  fs::path data(data_root(data_flag));
  auto eval_split = load_split(data, split, model.vocab());
  if (sample_id < 0 || sample_id >= static_cast<int64_t>(eval_split.samples.size()))
    throw Error(ErrorCode::id_out_of_range, "sample id out of range");
  std::string record = harness::export_selection_weights(
      model, eval_split.samples[static_cast<size_t>(sample_id)], sample_id);
  if (!out_path.empty()) {
    std::ofstream f(out_path);
    f << record << '\n';
  }
  std::cout << record << '\n';
  return 0;
}

int cmd_gradcheck(const std::string& config_path) {
  if (!config_path.empty()) {
    // Parse for validation; the oracle itself runs at the desk-scale config.
    harness::ModelConfig::parse_file(config_path);
  }
  double worst = harness::run_gradcheck_suite(std::cout);
  std::cout << "worst max_rel_err = " << worst << (worst < 1e-3 ? "  (ok)" : "  (FAIL)") << "\n";
  return worst < 1e-3 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"knowledge-grounded multi-turn response selection"};
  app.require_subcommand(1);

  std::string dataset = "persona_original", in_dir = ".", out_dir = "data";
  uint64_t pre_seed = 17;
  int min_freq = 1;
  int opt_utts = -1, opt_knowledge = -1, opt_tokens = -1, opt_cands = -1;
  auto* pre = app.add_subcommand("preprocess", "parse raw data into caches");
  pre->add_option("--dataset", dataset, "persona_original|persona_revised|cmudog|synthetic");
  pre->add_option("--in", in_dir, "directory with the raw split files")->required();
  pre->add_option("--out", out_dir, "output directory")->required();
  pre->add_option("--seed", pre_seed, "negative-sampling seed");
  pre->add_option("--min-freq", min_freq, "vocabulary frequency cutoff");
  pre->add_option("--max-utterances", opt_utts, "override the dataset default");
  pre->add_option("--max-knowledge", opt_knowledge, "override the dataset default");
  pre->add_option("--max-tokens", opt_tokens, "override the dataset default");
  pre->add_option("--candidates", opt_cands, "override the dataset default");

  std::string synth_out = "data-synth";
  int synth_dialogues = 200, synth_cands = 20, synth_emin = 1, synth_emax = 3;
  uint64_t synth_seed = 11;
  auto* sy = app.add_subcommand("synth", "generate a synthetic persona-style corpus");
  sy->add_option("--out", synth_out, "output directory")->required();
  sy->add_option("--dialogues", synth_dialogues, "training dialogues");
  sy->add_option("--candidates", synth_cands, "candidates per sample");
  sy->add_option("--exchanges-min", synth_emin, "min exchanges per dialogue");
  sy->add_option("--exchanges-max", synth_emax, "max exchanges per dialogue");
  sy->add_option("--seed", synth_seed, "generator seed");

  std::string config_path, data_dir, ablate, run_dir = "run";
  int64_t seed_override = -1;
  auto* tr = app.add_subcommand("train", "train a model");
  tr->add_option("--config", config_path, "config file")->required();
  tr->add_option("--data", data_dir, "preprocessed data directory (or DCK_DATA_DIR)");
  tr->add_option("--seed", seed_override, "override the config seed");
  tr->add_option("--ablate", ablate,
                 "comma list: context_selector,knowledge_selector,post_selection,context,knowledge");
  tr->add_option("--out", run_dir, "run directory for checkpoint and history");

  std::string checkpoint, split = "test", eval_out;
  bool buckets = false;
  auto* ev = app.add_subcommand("evaluate", "evaluate a checkpoint");
  ev->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  ev->add_option("--split", split, "train|valid|test");
  ev->add_option("--data", data_dir, "preprocessed data directory (or DCK_DATA_DIR)");
  ev->add_flag("--buckets", buckets, "report per context-length bucket");
  ev->add_option("--out", eval_out, "write the report here too");

  int64_t sample_id = 0;
  std::string inspect_out;
  auto* ins = app.add_subcommand("inspect", "export selection weights for one sample");
  ins->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  ins->add_option("--sample-id", sample_id, "sample index within the split")->required();
  ins->add_option("--split", split, "train|valid|test");
  ins->add_option("--data", data_dir, "preprocessed data directory (or DCK_DATA_DIR)");
  ins->add_option("--out", inspect_out, "write the record here too");

  std::string gc_config;
  auto* gc = app.add_subcommand("gradcheck", "run the gradient oracle suite");
  gc->add_option("--config", gc_config, "config file (validated)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (pre->parsed()) {
      corpus::Limits limits = corpus::default_limits(dataset);
      if (opt_utts > 0) limits.max_utterances = opt_utts;
      if (opt_knowledge > 0) limits.max_knowledge = opt_knowledge;
      if (opt_tokens > 0) limits.max_tokens = opt_tokens;
      if (opt_cands > 0) limits.candidates = opt_cands;
      return cmd_preprocess(dataset, in_dir, out_dir, pre_seed, min_freq, limits);
    }
    if (sy->parsed())
      return cmd_synth(synth_out, synth_dialogues, synth_cands, synth_emin, synth_emax, synth_seed);
    if (tr->parsed()) return cmd_train(config_path, data_dir, seed_override, ablate, run_dir);
    if (ev->parsed()) return cmd_evaluate(checkpoint, split, data_dir, buckets, eval_out);
    if (ins->parsed()) return cmd_inspect(checkpoint, sample_id, split, data_dir, inspect_out);
    if (gc->parsed()) return cmd_gradcheck(gc_config);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
