#pragma once

#include <cstdint>
#include <string>

namespace dck::synth {

// Generator for Persona-style corpora with a learnable lexical structure:
// personas name topics, questions ask about them (sometimes obliquely, so the
// knowledge matters), and the true response mentions the topic. With
// `informative` off the true response is an arbitrary pool sentence, making
// every candidate exchangeable — the fixture for chance-level baselines.
struct SynthOptions {
  int dialogues = 32;
  int exchanges_min = 1;
  int exchanges_max = 3;
  int candidates = 20;
  int persona_sentences = 3;
  bool informative = true;
  uint64_t seed = 1;
};

// Text in the numbered-line dialogue format accepted by the persona parser.
std::string persona_corpus(const SynthOptions& opt);

}  // namespace dck::synth
