#include "dck/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <istream>
#include <ostream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"

namespace dck::corpus {

using json = nlohmann::json;

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else {
      if (!cur.empty()) {
        out.push_back(cur);
        cur.clear();
      }
      if (!std::isspace(c)) out.push_back(std::string(1, static_cast<char>(c)));
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

void Limits::validate() const {
  if (max_utterances <= 0 || max_knowledge <= 0 || max_tokens <= 0 || candidates <= 0)
    throw Error(ErrorCode::bad_config, "limits must be positive");
}

Limits default_limits(const std::string& dataset_id) {
  if (dataset_id == "cmudog") return Limits{8, 20, 40, 20};
  return Limits{15, 5, 20, 20};  // persona_original, persona_revised, synthetic
}

int Vocabulary::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw Error(ErrorCode::id_out_of_range, "vocabulary id out of range");
  return tokens_[static_cast<size_t>(id)];
}

int64_t Vocabulary::frequency(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? 0 : freqs_[static_cast<size_t>(it->second)];
}

uint64_t Vocabulary::hash() const {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (size_t i = 2; i < tokens_.size(); ++i) {
    h = fnv1a(tokens_[i].data(), tokens_[i].size(), h);
    h = fnv1a("\n", 1, h);
  }
  return h;
}

void Vocabulary::index() {
  ids_.clear();
  for (size_t i = 0; i < tokens_.size(); ++i) ids_[tokens_[i]] = static_cast<int>(i);
}

void Vocabulary::save(std::ostream& out) const {
  for (size_t i = 2; i < tokens_.size(); ++i) out << tokens_[i] << '\t' << freqs_[i] << '\n';
}

Vocabulary Vocabulary::load(std::istream& in) {
  Vocabulary v;
  v.tokens_ = {kPadToken, kUnkToken};
  v.freqs_ = {0, 0};
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos) throw Error(ErrorCode::malformed_line, "vocabulary line without tab");
    v.tokens_.push_back(line.substr(0, tab));
    v.freqs_.push_back(std::stoll(line.substr(tab + 1)));
  }
  v.index();
  return v;
}

Vocabulary build_vocabulary(const std::vector<std::string>& tokens, int64_t min_freq) {
  std::unordered_map<std::string, int64_t> freq;
  for (const auto& t : tokens) ++freq[t];
  std::vector<std::pair<std::string, int64_t>> entries;
  for (auto& [tok, f] : freq)
    if (f >= min_freq && tok != Vocabulary::kPadToken && tok != Vocabulary::kUnkToken)
      entries.emplace_back(tok, f);
  std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  Vocabulary v;
  v.tokens_ = {Vocabulary::kPadToken, Vocabulary::kUnkToken};
  v.freqs_ = {0, 0};
  for (auto& [tok, f] : entries) {
    v.tokens_.push_back(tok);
    v.freqs_.push_back(f);
  }
  v.index();
  return v;
}

namespace {

// Leading line index of a persona-format line; npos-style -1 on failure.
long parse_line_index(const std::string& line, size_t& body_start) {
  size_t i = 0;
  while (i < line.size() && std::isdigit(static_cast<unsigned char>(line[i]))) ++i;
  if (i == 0 || i >= line.size() || line[i] != ' ') return -1;
  body_start = i + 1;
  return std::stol(line.substr(0, i));
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

std::vector<Dialogue> parse_persona_chat(std::istream& in) {
  std::vector<Dialogue> dialogues;
  Dialogue cur;
  bool open = false;
  long prev_index = 0;
  std::string line;
  size_t lineno = 0;
  static const std::string kPersonaPrefix = "your persona: ";

  auto flush = [&]() {
    if (open) {
      dialogues.push_back(std::move(cur));
      cur = Dialogue{};
      open = false;
    }
  };

  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    size_t body_start = 0;
    long index = parse_line_index(line, body_start);
    if (index < 0)
      throw Error(ErrorCode::malformed_line,
                  "line " + std::to_string(lineno) + ": missing leading index");
    if (index <= prev_index) flush();  // episode boundary: the numbering reset
    prev_index = index;
    open = true;
    std::string body = line.substr(body_start);
    if (body.rfind(kPersonaPrefix, 0) == 0) {
      cur.knowledge.push_back(body.substr(kPersonaPrefix.size()));
      continue;
    }
    auto fields = split(body, '\t');
    if (fields.size() < 2)
      throw Error(ErrorCode::malformed_line,
                  "line " + std::to_string(lineno) + ": expected tab-separated exchange");
    Turn partner;
    partner.speaker = "partner";
    partner.text = fields[0];
    cur.turns.push_back(std::move(partner));
    Turn self;
    self.speaker = "self";
    self.text = fields[1];
    if (fields.size() >= 4 && !fields[3].empty()) self.candidates = split(fields[3], '|');
    cur.turns.push_back(std::move(self));
  }
  flush();
  return dialogues;
}

std::vector<Dialogue> parse_cmudog(std::istream& in) {
  std::vector<Dialogue> dialogues;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json rec = json::parse(line, nullptr, false);
    if (rec.is_discarded() || !rec.is_object() || !rec.contains("sections") || !rec.contains("turns"))
      throw Error(ErrorCode::malformed_record,
                  "record " + std::to_string(lineno) + ": expected {sections, turns}");
    Dialogue d;
    for (const auto& s : rec["sections"]) {
      if (!s.is_string()) throw Error(ErrorCode::malformed_record, "section must be a string");
      d.knowledge.push_back(s.get<std::string>());
    }
    for (const auto& t : rec["turns"]) {
      if (!t.is_object() || !t.contains("text") || !t.contains("section"))
        throw Error(ErrorCode::malformed_record,
                    "record " + std::to_string(lineno) + ": turn needs text and section");
      Turn turn;
      turn.speaker = t.value("speaker", "");
      turn.text = t["text"].get<std::string>();
      turn.section = t["section"].get<int>();
      if (turn.section < 0 || turn.section >= static_cast<int>(d.knowledge.size()))
        throw Error(ErrorCode::malformed_record,
                    "record " + std::to_string(lineno) + ": section index out of range");
      d.turns.push_back(std::move(turn));
    }
    if (d.turns.size() < 4) continue;  // short conversations are noise
    dialogues.push_back(std::move(d));
  }
  return dialogues;
}

CorpusStats stats(const std::vector<Dialogue>& dialogues, const std::string& dataset_id) {
  CorpusStats s;
  s.conversations = static_cast<int64_t>(dialogues.size());
  for (const auto& d : dialogues) {
    if (dataset_id == "cmudog") {
      s.turns += static_cast<int64_t>(d.turns.size());
    } else {
      for (const auto& t : d.turns)
        if (t.speaker == "self") ++s.turns;  // one exchange per response turn
    }
  }
  return s;
}

std::pair<std::vector<std::string>, int> sample_negatives(const std::string& truth,
                                                          const std::vector<std::string>& pool,
                                                          int n, uint64_t seed) {
  std::vector<std::string> eligible;
  std::unordered_set<std::string> seen;
  for (const auto& p : pool)
    if (p != truth && seen.insert(p).second) eligible.push_back(p);
  if (static_cast<int>(eligible.size()) < n - 1)
    throw Error(ErrorCode::insufficient_pool, "negative pool smaller than n-1");
  Rng rng(seed);
  // Partial Fisher-Yates: the first n-1 slots become the draw.
  for (int i = 0; i < n - 1; ++i) {
    size_t j = static_cast<size_t>(i) + static_cast<size_t>(rng.next_below(eligible.size() - static_cast<size_t>(i)));
    std::swap(eligible[static_cast<size_t>(i)], eligible[j]);
  }
  std::vector<std::string> cands(eligible.begin(), eligible.begin() + (n - 1));
  cands.push_back(truth);
  rng.shuffle(cands);
  int label = -1;
  for (int i = 0; i < n; ++i)
    if (cands[static_cast<size_t>(i)] == truth) label = i;
  return {std::move(cands), label};
}

std::vector<std::string> split_sentences(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&]() {
    size_t a = cur.find_first_not_of(" \t");
    if (a != std::string::npos) out.push_back(cur.substr(a));
    cur.clear();
  };
  for (char c : text) {
    cur.push_back(c);
    if (c == '.' || c == '!' || c == '?') flush();
  }
  flush();
  return out;
}

std::vector<Sample> dialogues_to_samples(const std::vector<Dialogue>& dialogues,
                                         const std::string& dataset_id,
                                         const std::vector<std::string>& response_pool,
                                         int n_candidates, uint64_t seed) {
  std::vector<Sample> samples;
  const bool doc_grounded = dataset_id == "cmudog";
  for (size_t di = 0; di < dialogues.size(); ++di) {
    const Dialogue& d = dialogues[di];
    if (doc_grounded) {
      for (size_t ti = 1; ti < d.turns.size(); ++ti) {
        Sample s;
        for (size_t u = 0; u < ti; ++u) s.context.push_back(d.turns[u].text);
        s.knowledge = split_sentences(d.knowledge[static_cast<size_t>(d.turns[ti].section)]);
        uint64_t sseed = fnv1a(&di, sizeof(di), fnv1a(&ti, sizeof(ti), seed ^ 0x5bd1e995u));
        auto [cands, label] = sample_negatives(d.turns[ti].text, response_pool, n_candidates, sseed);
        s.candidates = std::move(cands);
        s.label = label;
        samples.push_back(std::move(s));
      }
    } else {
      std::vector<std::string> history;
      for (size_t ti = 0; ti + 1 < d.turns.size(); ti += 2) {
        const Turn& partner = d.turns[ti];
        const Turn& self = d.turns[ti + 1];
        history.push_back(partner.text);
        Sample s;
        s.context = history;
        s.knowledge = d.knowledge;
        uint64_t sseed = fnv1a(&di, sizeof(di), fnv1a(&ti, sizeof(ti), seed ^ 0x5bd1e995u));
        if (!self.candidates.empty()) {
          int hits = 0;
          for (const auto& c : self.candidates)
            if (c == self.text) ++hits;
          if (hits != 1)
            throw Error(ErrorCode::malformed_record,
                        "candidate list must contain the true response exactly once");
          s.candidates = self.candidates;
          Rng rng(sseed);
          rng.shuffle(s.candidates);
          for (int i = 0; i < static_cast<int>(s.candidates.size()); ++i)
            if (s.candidates[static_cast<size_t>(i)] == self.text) s.label = i;
        } else {
          auto [cands, label] = sample_negatives(self.text, response_pool, n_candidates, sseed);
          s.candidates = std::move(cands);
          s.label = label;
        }
        samples.push_back(std::move(s));
        history.push_back(self.text);
      }
    }
  }
  return samples;
}

namespace {

EncodedSequence encode_sequence(const std::string& text, const Vocabulary& vocab, int max_tokens) {
  auto toks = tokenize(text);
  if (static_cast<int>(toks.size()) > max_tokens)
    toks.erase(toks.begin(), toks.end() - max_tokens);  // keep the latter words
  EncodedSequence seq;
  seq.tokens = toks;
  seq.ids.reserve(toks.size());
  for (const auto& t : toks) seq.ids.push_back(vocab.id(t));
  return seq;
}

}  // namespace

EncodedSample encode_sample(const Sample& sample, const Vocabulary& vocab, const Limits& limits) {
  limits.validate();
  if (sample.label < 0 || sample.label >= static_cast<int>(sample.candidates.size()))
    throw Error(ErrorCode::label_out_of_range, "sample label out of range");
  if (static_cast<int>(sample.candidates.size()) != limits.candidates)
    throw Error(ErrorCode::length_mismatch, "candidate count does not match limits");
  EncodedSample out;
  out.label = sample.label;

  size_t ctx_begin = sample.context.size() > static_cast<size_t>(limits.max_utterances)
                         ? sample.context.size() - static_cast<size_t>(limits.max_utterances)
                         : 0;
  for (size_t i = ctx_begin; i < sample.context.size(); ++i) {
    out.context.push_back(encode_sequence(sample.context[i], vocab, limits.max_tokens));
    out.context_text.push_back(sample.context[i]);
  }
  size_t kn = std::min(sample.knowledge.size(), static_cast<size_t>(limits.max_knowledge));
  for (size_t i = 0; i < kn; ++i) {  // knowledge keeps document order from the front
    out.knowledge.push_back(encode_sequence(sample.knowledge[i], vocab, limits.max_tokens));
    out.knowledge_text.push_back(sample.knowledge[i]);
  }
  for (const auto& c : sample.candidates) {
    out.candidates.push_back(encode_sequence(c, vocab, limits.max_tokens));
    out.candidate_text.push_back(c);
  }
  return out;
}

TokenizedBatch tokenized_batch(const std::vector<EncodedSample>& data,
                               const std::vector<int>& indices, const Limits& limits) {
  TokenizedBatch b;
  b.limits = limits;
  b.batch = static_cast<int>(indices.size());
  const int nc = limits.max_utterances, nk = limits.max_knowledge, l = limits.max_tokens,
            n = limits.candidates;
  b.context_ids.assign(static_cast<size_t>(b.batch) * nc * l, Vocabulary::kPad);
  b.knowledge_ids.assign(static_cast<size_t>(b.batch) * nk * l, Vocabulary::kPad);
  b.candidate_ids.assign(static_cast<size_t>(b.batch) * n * l, Vocabulary::kPad);

  auto fill = [l](std::vector<int>& dst, size_t base, const std::vector<EncodedSequence>& seqs) {
    for (size_t r = 0; r < seqs.size(); ++r)
      for (size_t t = 0; t < seqs[r].ids.size(); ++t)
        dst[base + r * static_cast<size_t>(l) + t] = seqs[r].ids[t];
  };
  for (int i = 0; i < b.batch; ++i) {
    const EncodedSample& s = data[static_cast<size_t>(indices[static_cast<size_t>(i)])];
    fill(b.context_ids, static_cast<size_t>(i) * nc * l, s.context);
    fill(b.knowledge_ids, static_cast<size_t>(i) * nk * l, s.knowledge);
    fill(b.candidate_ids, static_cast<size_t>(i) * n * l, s.candidates);
    b.labels.push_back(s.label);
    b.samples.push_back(&s);
  }
  auto mask_of = [](const std::vector<int>& ids) {
    std::vector<int> m(ids.size());
    for (size_t i = 0; i < ids.size(); ++i) m[i] = ids[i] != Vocabulary::kPad ? 1 : 0;
    return m;
  };
  b.context_mask = mask_of(b.context_ids);
  b.knowledge_mask = mask_of(b.knowledge_ids);
  b.candidate_mask = mask_of(b.candidate_ids);
  return b;
}

std::vector<std::vector<int>> make_batches(int sample_count, int batch_size, uint64_t seed) {
  std::vector<int> order(static_cast<size_t>(sample_count));
  for (int i = 0; i < sample_count; ++i) order[static_cast<size_t>(i)] = i;
  Rng rng(seed);
  rng.shuffle(order);
  std::vector<std::vector<int>> batches;
  for (int at = 0; at < sample_count; at += batch_size) {
    int end = std::min(sample_count, at + batch_size);
    batches.emplace_back(order.begin() + at, order.begin() + end);
  }
  return batches;
}

namespace {

json rows_json(const std::vector<EncodedSequence>& seqs) {
  json rows = json::array();
  for (const auto& s : seqs) rows.push_back(s.ids);
  return rows;
}

}  // namespace

void save_cache(std::ostream& out, const CacheHeader& header, const std::vector<Sample>& samples,
                const Vocabulary& vocab) {
  json h;
  h["format"] = "dck-cache";
  h["version"] = 1;
  h["dataset"] = header.dataset;
  h["split"] = header.split;
  h["limits"] = {{"max_utterances", header.limits.max_utterances},
                 {"max_knowledge", header.limits.max_knowledge},
                 {"max_tokens", header.limits.max_tokens},
                 {"candidates", header.limits.candidates}};
  h["vocab_hash"] = hex64(vocab.hash());
  h["sample_count"] = samples.size();
  out << h.dump() << '\n';
  for (const auto& s : samples) {
    EncodedSample enc = encode_sample(s, vocab, header.limits);
    json rec;
    rec["label"] = enc.label;
    rec["context"] = rows_json(enc.context);
    rec["knowledge"] = rows_json(enc.knowledge);
    rec["candidates"] = rows_json(enc.candidates);
    rec["context_text"] = enc.context_text;
    rec["knowledge_text"] = enc.knowledge_text;
    rec["candidate_text"] = enc.candidate_text;
    out << rec.dump() << '\n';
  }
}

std::pair<CacheHeader, std::vector<EncodedSample>> load_cache(std::istream& in,
                                                              const Vocabulary& vocab) {
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::malformed_record, "cache: missing header");
  json h = json::parse(line, nullptr, false);
  if (h.is_discarded() || h.value("format", "") != "dck-cache" || h.value("version", 0) != 1)
    throw Error(ErrorCode::malformed_record, "cache: unrecognized header");
  CacheHeader header;
  header.dataset = h.value("dataset", "");
  header.split = h.value("split", "");
  header.limits.max_utterances = h["limits"]["max_utterances"].get<int>();
  header.limits.max_knowledge = h["limits"]["max_knowledge"].get<int>();
  header.limits.max_tokens = h["limits"]["max_tokens"].get<int>();
  header.limits.candidates = h["limits"]["candidates"].get<int>();
  header.vocab_hash = std::stoull(h["vocab_hash"].get<std::string>(), nullptr, 16);
  header.sample_count = h["sample_count"].get<int64_t>();
  if (header.vocab_hash != vocab.hash())
    throw Error(ErrorCode::hash_mismatch, "cache: vocabulary hash mismatch");

  std::vector<EncodedSample> out;
  out.reserve(static_cast<size_t>(header.sample_count));
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json rec = json::parse(line, nullptr, false);
    if (rec.is_discarded()) throw Error(ErrorCode::malformed_record, "cache: bad sample record");
    Sample s;
    s.label = rec["label"].get<int>();
    s.context = rec["context_text"].get<std::vector<std::string>>();
    s.knowledge = rec["knowledge_text"].get<std::vector<std::string>>();
    s.candidates = rec["candidate_text"].get<std::vector<std::string>>();
    EncodedSample enc = encode_sample(s, vocab, header.limits);
    // The stored integer rows are the contract; re-encoding must agree.
    auto check = [&](const json& rows, const std::vector<EncodedSequence>& seqs, const char* side) {
      if (rows.size() != seqs.size())
        throw Error(ErrorCode::hash_mismatch, std::string("cache: ") + side + " row count drifted");
      for (size_t r = 0; r < seqs.size(); ++r)
        if (rows[r].get<std::vector<int>>() != seqs[r].ids)
          throw Error(ErrorCode::hash_mismatch, std::string("cache: ") + side + " ids drifted");
    };
    check(rec["context"], enc.context, "context");
    check(rec["knowledge"], enc.knowledge, "knowledge");
    check(rec["candidates"], enc.candidates, "candidates");
    out.push_back(std::move(enc));
  }
  if (static_cast<int64_t>(out.size()) != header.sample_count)
    throw Error(ErrorCode::malformed_record, "cache: sample count mismatch");
  return {header, std::move(out)};
}

}  // namespace dck::corpus
