#include <map>
#include <set>
#include <sstream>

#include "dck/corpus.hpp"
#include "doctest.h"

using namespace dck;
using namespace dck::corpus;

namespace {

const char* kPersonaFixture =
    "1 your persona: i like horror movies .\n"
    "2 your persona: i read twenty books a year .\n"
    "3 hello what are you doing ?\ti just got off work .\t\t"
    "a|b|c|d|e|f|g|h|i|j|k|l|m|n|o|p|q|r|s|i just got off work .\n"
    "4 i watched a movie today\ti rather read books .\t\t"
    "a2|b2|c2|d2|e2|f2|g2|h2|i2|j2|k2|l2|m2|n2|o2|p2|q2|r2|s2|i rather read books .\n";

std::vector<Dialogue> parse_fixture() {
  std::istringstream in(kPersonaFixture);
  return parse_persona_chat(in);
}

}  // namespace

TEST_SUITE("corpus") {

TEST_CASE("tokenize lowercases and splits punctuation") {
  auto t = tokenize("Hello, World! it's 2x");
  std::vector<std::string> expect = {"hello", ",", "world", "!", "it", "'", "s", "2x"};
  CHECK(t == expect);
  CHECK(tokenize("").empty());
  CHECK(tokenize("   ").empty());
}

TEST_CASE("persona fixture parses to one dialogue with two exchanges") {
  auto ds = parse_fixture();
  REQUIRE(ds.size() == 1);
  CHECK(ds[0].knowledge.size() == 2);
  REQUIRE(ds[0].turns.size() == 4);  // partner/self per exchange
  CHECK(ds[0].turns[0].speaker == "partner");
  CHECK(ds[0].turns[1].speaker == "self");
  CHECK(ds[0].turns[1].candidates.size() == 20);
  CHECK(ds[0].turns[3].text == "i rather read books .");
  auto st = stats(ds, "persona_original");
  CHECK(st.conversations == 1);
  CHECK(st.turns == 2);
}

TEST_CASE("empty stream parses to an empty list") {
  std::istringstream in("");
  CHECK(parse_persona_chat(in).empty());
  std::istringstream in2("");
  CHECK(parse_cmudog(in2).empty());
}

TEST_CASE("persona line without an index is malformed") {
  std::istringstream in("your persona: no index here\n");
  CHECK_THROWS_AS(parse_persona_chat(in), Error);
  std::istringstream in2("1 only one field, no tab\n");
  CHECK_THROWS_AS(parse_persona_chat(in2), Error);
}

TEST_CASE("numbering reset starts a new episode") {
  std::string text =
      "1 your persona: alpha .\n"
      "2 q1\tr1\n"
      "1 your persona: beta .\n"
      "2 q2\tr2\n";
  std::istringstream in(text);
  auto ds = parse_persona_chat(in);
  REQUIRE(ds.size() == 2);
  CHECK(ds[0].knowledge[0] == "alpha .");
  CHECK(ds[1].knowledge[0] == "beta .");
}

TEST_CASE("parse output independent of episode ordering") {
  std::string a =
      "1 your persona: one .\n1 q1\tr1\n";  // index reset inside: persona then turn both numbered 1
  std::string block1 = "1 your persona: one .\n2 q1\tr1\n";
  std::string block2 = "1 your persona: two .\n2 q2\tr2\n";
  std::istringstream in12(block1 + block2), in21(block2 + block1);
  auto d12 = parse_persona_chat(in12);
  auto d21 = parse_persona_chat(in21);
  REQUIRE(d12.size() == 2);
  REQUIRE(d21.size() == 2);
  auto key = [](const Dialogue& d) { return d.knowledge[0] + "|" + d.turns[0].text; };
  std::multiset<std::string> s12{key(d12[0]), key(d12[1])}, s21{key(d21[0]), key(d21[1])};
  CHECK(s12 == s21);
}

TEST_CASE("cmudog drops conversations shorter than four turns") {
  std::string rec3 =
      R"({"sections": ["sec one. sec one b.", "sec two."], "turns": [)"
      R"({"speaker": "a", "text": "t1", "section": 0},)"
      R"({"speaker": "b", "text": "t2", "section": 0},)"
      R"({"speaker": "a", "text": "t3", "section": 1}]})";
  std::string rec4 =
      R"({"sections": ["alpha beta."], "turns": [)"
      R"({"speaker": "a", "text": "t1", "section": 0},)"
      R"({"speaker": "b", "text": "t2", "section": 0},)"
      R"({"speaker": "a", "text": "t3", "section": 0},)"
      R"({"speaker": "b", "text": "t4", "section": 0}]})";
  std::istringstream in(rec3 + "\n" + rec4 + "\n");
  auto ds = parse_cmudog(in);
  REQUIRE(ds.size() == 1);
  CHECK(ds[0].turns.size() == 4);
  auto st = stats(ds, "cmudog");
  CHECK(st.conversations == 1);
  CHECK(st.turns == 4);
}

TEST_CASE("cmudog malformed records throw") {
  std::istringstream bad("{not json\n");
  CHECK_THROWS_AS(parse_cmudog(bad), Error);
  std::istringstream missing(R"({"sections": ["x."]})" "\n");
  CHECK_THROWS_AS(parse_cmudog(missing), Error);
  std::istringstream oob(
      R"({"sections": ["x."], "turns": [{"speaker":"a","text":"t","section":3},)"
      R"({"speaker":"a","text":"t","section":0},{"speaker":"a","text":"t","section":0},)"
      R"({"speaker":"a","text":"t","section":0}]})" "\n");
  CHECK_THROWS_AS(parse_cmudog(oob), Error);
}

TEST_CASE("sample_negatives draws 19 distinct negatives plus the truth") {
  std::vector<std::string> pool;
  for (int i = 0; i < 40; ++i) pool.push_back("response " + std::to_string(i));
  auto [cands, label] = sample_negatives("the truth", pool, 20, 7);
  REQUIRE(cands.size() == 20);
  CHECK(cands[static_cast<size_t>(label)] == "the truth");
  std::set<std::string> uniq(cands.begin(), cands.end());
  CHECK(uniq.size() == 20);  // no duplicates, truth included once

  auto [cands2, label2] = sample_negatives("the truth", pool, 20, 7);
  CHECK(cands == cands2);
  CHECK(label == label2);
}

TEST_CASE("sample_negatives requires a large enough pool") {
  std::vector<std::string> pool = {"a", "b", "truth", "a"};
  CHECK_THROWS_AS(sample_negatives("truth", pool, 20, 1), Error);
}

TEST_CASE("sample_negatives is uniform over the eligible pool") {
  // pool of 25 including the truth: each of the 24 eligible entries should
  // appear with frequency 19/24 over many draws (3-sigma binomial bound)
  std::vector<std::string> pool;
  for (int i = 0; i < 25; ++i) pool.push_back("p" + std::to_string(i));
  const std::string truth = pool[10];
  const int draws = 10000;
  std::map<std::string, int> counts;
  for (int d = 0; d < draws; ++d) {
    auto [cands, label] = sample_negatives(truth, pool, 20, 1000 + static_cast<uint64_t>(d));
    for (const auto& c : cands)
      if (c != truth) counts[c]++;
  }
  const double p = 19.0 / 24.0;
  const double sigma = std::sqrt(p * (1 - p) / draws);
  for (const auto& s : pool) {
    if (s == truth) continue;
    const double freq = counts[s] / static_cast<double>(draws);
    CHECK(std::fabs(freq - p) < 3 * sigma + 1e-9);
  }
}

TEST_CASE("build_vocabulary honors the frequency cutoff and ordering") {
  std::vector<std::string> tokens = {"a", "a", "b"};
  Vocabulary v2 = build_vocabulary(tokens, 2);
  CHECK(v2.size() == 3);  // pad, unk, a
  CHECK(v2.id("a") == 2);
  CHECK(v2.id("b") == Vocabulary::kUnk);

  Vocabulary v1 = build_vocabulary(tokens, 1);
  CHECK(v1.size() == 4);
  CHECK(v1.id("a") == 2);  // higher frequency first
  CHECK(v1.id("b") == 3);

  std::vector<std::string> tie = {"zeta", "echo", "zeta", "echo", "last"};
  Vocabulary vt = build_vocabulary(tie, 1);
  CHECK(vt.id("echo") == 2);  // frequency ties break lexicographically
  CHECK(vt.id("zeta") == 3);
  CHECK(vt.id("last") == 4);
}

TEST_CASE("vocabulary save/load round trip preserves ids and hash") {
  std::vector<std::string> tokens = {"kilo", "lima", "kilo", "mike"};
  Vocabulary v = build_vocabulary(tokens, 1);
  std::stringstream buf;
  v.save(buf);
  Vocabulary w = Vocabulary::load(buf);
  CHECK(w.size() == v.size());
  CHECK(w.id("kilo") == v.id("kilo"));
  CHECK(w.hash() == v.hash());
  CHECK(w.frequency("kilo") == 2);
}

TEST_CASE("encode_sample keeps the latter tokens") {
  std::vector<std::string> words;
  for (int i = 0; i < 25; ++i) words.push_back("w" + std::to_string(i));
  std::string long_utt;
  std::vector<std::string> all_tokens;
  for (const auto& w : words) {
    long_utt += w + " ";
    all_tokens.push_back(w);
  }
  all_tokens.push_back("resp");
  all_tokens.push_back("know");
  Vocabulary v = build_vocabulary(all_tokens, 1);
  Sample s;
  s.context = {long_utt};
  s.knowledge = {"know"};
  s.candidates = {"resp", "w0"};
  s.label = 0;
  Limits lim{15, 5, 20, 2};
  EncodedSample enc = encode_sample(s, v, lim);
  REQUIRE(enc.context.size() == 1);
  REQUIRE(enc.context[0].tokens.size() == 20);
  CHECK(enc.context[0].tokens.front() == "w5");  // first five dropped
  CHECK(enc.context[0].tokens.back() == "w24");
}

TEST_CASE("encode_sample pads short sequences in the batch view") {
  std::vector<std::string> toks = {"one", "two", "three", "four", "five", "x"};
  Vocabulary v = build_vocabulary(toks, 1);
  Sample s;
  s.context = {"one two three four five"};
  s.knowledge = {"x"};
  s.candidates = {"one", "two"};
  s.label = 1;
  Limits lim{15, 5, 20, 2};
  std::vector<EncodedSample> data{encode_sample(s, v, lim)};
  TokenizedBatch b = tokenized_batch(data, {0}, lim);
  CHECK(b.context_ids.size() == static_cast<size_t>(15 * 20));
  int mask_sum = 0;
  for (int t = 0; t < 20; ++t) mask_sum += b.context_mask[static_cast<size_t>(t)];
  CHECK(mask_sum == 5);
  for (size_t i = 0; i < b.context_ids.size(); ++i)
    CHECK((b.context_ids[i] != Vocabulary::kPad) == (b.context_mask[i] == 1));
}

TEST_CASE("encode_sample keeps the latest utterances and first knowledge") {
  std::vector<std::string> toks;
  for (int i = 0; i < 20; ++i) toks.push_back("u" + std::to_string(i));
  Vocabulary v = build_vocabulary(toks, 1);
  Sample s;
  for (int i = 1; i <= 18; ++i) s.context.push_back("u" + std::to_string(i));
  for (int i = 1; i <= 8; ++i) s.knowledge.push_back("u" + std::to_string(i));
  s.candidates = {"u1", "u2"};
  s.label = 0;
  Limits lim{15, 5, 20, 2};
  EncodedSample enc = encode_sample(s, v, lim);
  REQUIRE(enc.context.size() == 15);
  CHECK(enc.context.front().tokens[0] == "u4");  // utterances 4..18 kept
  CHECK(enc.context.back().tokens[0] == "u18");
  REQUIRE(enc.knowledge.size() == 5);
  CHECK(enc.knowledge.front().tokens[0] == "u1");  // document order from the front
  CHECK(enc.knowledge.back().tokens[0] == "u5");
}

TEST_CASE("encode_sample validates label and candidate count") {
  Vocabulary v = build_vocabulary({"a"}, 1);
  Sample s;
  s.context = {"a"};
  s.knowledge = {"a"};
  s.candidates = {"a", "a"};
  s.label = 5;
  CHECK_THROWS_AS(encode_sample(s, v, Limits{2, 2, 4, 2}), Error);
  s.label = 0;
  CHECK_THROWS_AS(encode_sample(s, v, Limits{2, 2, 4, 3}), Error);
}

TEST_CASE("round trip reproduces the kept tokens") {
  Rng rng(17);
  std::vector<std::string> pool = {"red", "green", "blue", "cyan", "teal", "plum", "gray"};
  std::vector<std::string> vocab_tokens = pool;
  Vocabulary v = build_vocabulary(vocab_tokens, 1);
  Limits lim{3, 2, 5, 2};
  for (int trial = 0; trial < 30; ++trial) {
    auto sentence = [&](int len) {
      std::string s;
      for (int i = 0; i < len; ++i) s += pool[rng.next_below(pool.size())] + " ";
      return s;
    };
    Sample smp;
    const int n_utt = 1 + static_cast<int>(rng.next_below(5));
    for (int i = 0; i < n_utt; ++i) smp.context.push_back(sentence(1 + static_cast<int>(rng.next_below(8))));
    smp.knowledge = {sentence(3)};
    smp.candidates = {sentence(2), sentence(4)};
    smp.label = static_cast<int>(rng.next_below(2));
    EncodedSample enc = encode_sample(smp, v, lim);
    for (const auto& seq : enc.context) {
      REQUIRE(seq.ids.size() == seq.tokens.size());
      for (size_t t = 0; t < seq.ids.size(); ++t) CHECK(v.token(seq.ids[t]) == seq.tokens[t]);
    }
  }
}

TEST_CASE("make_batches splits 25 samples into 12/12/1 deterministically") {
  auto b1 = make_batches(25, 12, 99);
  REQUIRE(b1.size() == 3);
  CHECK(b1[0].size() == 12);
  CHECK(b1[1].size() == 12);
  CHECK(b1[2].size() == 1);
  auto b2 = make_batches(25, 12, 99);
  CHECK(b1 == b2);
  auto b3 = make_batches(25, 12, 100);
  CHECK(b1 != b3);
  std::set<int> seen;
  for (auto& batch : b1) seen.insert(batch.begin(), batch.end());
  CHECK(seen.size() == 25);
}

TEST_CASE("persona samples grow the context by two utterances per exchange") {
  auto ds = parse_fixture();
  auto samples = dialogues_to_samples(ds, "persona_original", {}, 20, 3);
  REQUIRE(samples.size() == 2);
  CHECK(samples[0].context.size() == 1);
  CHECK(samples[1].context.size() == 3);
  CHECK(samples[1].context[1] == "i just got off work .");
  for (const auto& s : samples) {
    REQUIRE(s.label >= 0);
    CHECK(s.candidates.size() == 20);
    CHECK(s.candidates[static_cast<size_t>(s.label)] ==
          (s.context.size() == 1 ? "i just got off work ." : "i rather read books ."));
    CHECK(s.knowledge.size() == 2);
  }
}

TEST_CASE("cmudog samples use the current turn's section as knowledge") {
  std::string rec =
      R"({"sections": ["first one. second bit.", "third part."], "turns": [)"
      R"({"speaker": "a", "text": "t one", "section": 0},)"
      R"({"speaker": "b", "text": "t two", "section": 0},)"
      R"({"speaker": "a", "text": "t three", "section": 1},)"
      R"({"speaker": "b", "text": "t four", "section": 1}]})";
  std::istringstream in(rec + "\n");
  auto ds = parse_cmudog(in);
  std::vector<std::string> pool;
  for (int i = 0; i < 30; ++i) pool.push_back("pool " + std::to_string(i));
  auto samples = dialogues_to_samples(ds, "cmudog", pool, 20, 5);
  REQUIRE(samples.size() == 3);  // turns 2..4 each yield one sample
  CHECK(samples[0].context.size() == 1);
  CHECK(samples[0].knowledge == std::vector<std::string>{"first one.", "second bit."});
  CHECK(samples[1].knowledge == std::vector<std::string>{"third part."});
  CHECK(samples[2].context.size() == 3);
}

TEST_CASE("split_sentences cuts on terminators") {
  auto s = split_sentences("one two. three! four? five");
  REQUIRE(s.size() == 4);
  CHECK(s[0] == "one two.");
  CHECK(s[3] == "five");
}

TEST_CASE("cache round trip and hash refusal") {
  auto ds = parse_fixture();
  std::vector<std::string> tokens;
  for (auto& d : ds) {
    for (auto& k : d.knowledge)
      for (auto& t : tokenize(k)) tokens.push_back(t);
    for (auto& t : d.turns)
      for (auto& w : tokenize(t.text)) tokens.push_back(w);
  }
  Vocabulary v = build_vocabulary(tokens, 1);
  auto samples = dialogues_to_samples(ds, "persona_original", {}, 20, 3);
  CacheHeader header;
  header.dataset = "persona_original";
  header.split = "test";
  header.limits = Limits{15, 5, 20, 20};
  header.sample_count = static_cast<int64_t>(samples.size());
  std::stringstream buf;
  save_cache(buf, header, samples, v);

  auto [h2, loaded] = load_cache(buf, v);
  CHECK(h2.dataset == "persona_original");
  CHECK(h2.limits == header.limits);
  REQUIRE(loaded.size() == samples.size());
  CHECK(loaded[1].context.size() == 3);
  CHECK(loaded[1].label == Approx(samples[1].label));

  std::stringstream buf2;
  save_cache(buf2, header, samples, v);
  Vocabulary other = build_vocabulary({"different", "tokens"}, 1);
  CHECK_THROWS_AS(load_cache(buf2, other), Error);
}

}  // TEST_SUITE
