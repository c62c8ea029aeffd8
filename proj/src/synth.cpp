#include "dck/synth.hpp"

#include <sstream>
#include <vector>

#include "dck/util.hpp"

namespace dck::synth {

namespace {

const std::vector<std::string> kTopics = {
    "hiking",    "chess",     "jazz",      "baking",   "gardening", "astronomy",
    "cycling",   "painting",  "fishing",   "yoga",     "surfing",   "knitting",
    "archery",   "pottery",   "skiing",    "running",  "swimming",  "camping",
    "birding",   "climbing",  "sailing",   "dancing",  "boxing",    "origami",
    "juggling",  "magic",     "poetry",    "drumming", "sculpting", "skating",
    "bowling",   "darts",     "billiards", "karaoke",  "trivia",    "puzzles",
    "kayaking",  "foraging",  "beekeeping", "welding",  "carpentry", "calligraphy",
    "astrology", "geocaching", "quilting",  "brewing",  "falconry",  "lockpicking"};

const std::vector<std::string> kPersonaTemplates = {
    "my favorite hobby is %s .",
    "i spend my weekends on %s .",
    "i have loved %s since i was young .",
    "everyone knows me for my %s .",
};

const std::vector<std::string> kTopicQuestions = {
    "do you ever think about %s ?",
    "what can you tell me about %s ?",
    "someone mentioned %s to me today .",
    "i am curious about %s these days .",
};

const std::vector<std::string> kGenericQuestions = {
    "tell me something about yourself .",
    "what do you usually do for fun ?",
    "how was your week ?",
    "anything exciting going on with you ?",
};

const std::vector<std::string> kResponseTemplates = {
    "oh i adore %s , it is my thing .",
    "%s is what i do best .",
    "honestly %s keeps me busy all week .",
    "yes %s is a big part of my life .",
};

std::string fill(const std::string& tmpl, const std::string& word) {
  auto at = tmpl.find("%s");
  if (at == std::string::npos) return tmpl;
  return tmpl.substr(0, at) + word + tmpl.substr(at + 2);
}

}  // namespace

std::string persona_corpus(const SynthOptions& opt) {
  Rng rng(opt.seed);
  auto pick = [&](const std::vector<std::string>& v) {
    return v[static_cast<size_t>(rng.next_below(v.size()))];
  };

  // Global response pool, one entry per (topic, template) pair.
  std::vector<std::string> pool;
  for (const auto& t : kTopics)
    for (const auto& tmpl : kResponseTemplates) pool.push_back(fill(tmpl, t));

  std::ostringstream out;
  for (int d = 0; d < opt.dialogues; ++d) {
    // persona: distinct topics
    std::vector<int> topic_ids;
    while (static_cast<int>(topic_ids.size()) < opt.persona_sentences) {
      int t = static_cast<int>(rng.next_below(kTopics.size()));
      bool dup = false;
      for (int u : topic_ids) dup = dup || u == t;
      if (!dup) topic_ids.push_back(t);
    }
    int line = 1;
    for (int p = 0; p < opt.persona_sentences; ++p)
      out << line++ << " your persona: "
          << fill(kPersonaTemplates[static_cast<size_t>(rng.next_below(kPersonaTemplates.size()))],
                  kTopics[static_cast<size_t>(topic_ids[static_cast<size_t>(p)])])
          << '\n';

    const int exchanges =
        opt.exchanges_min +
        static_cast<int>(rng.next_below(
            static_cast<uint64_t>(opt.exchanges_max - opt.exchanges_min + 1)));
    for (int e = 0; e < exchanges; ++e) {
      std::string question, truth;
      if (opt.informative) {
        const std::string& topic =
            kTopics[static_cast<size_t>(topic_ids[static_cast<size_t>(rng.next_below(topic_ids.size()))])];
        // Half the questions name the topic; the rest leave it to the persona.
        question = rng.next_below(2) == 0
                       ? fill(pick(kTopicQuestions), topic)
                       : pick(kGenericQuestions);
        truth = fill(pick(kResponseTemplates), topic);
      } else {
        question = pick(kGenericQuestions);
        truth = pick(pool);
      }
      std::vector<std::string> cands;
      cands.reserve(static_cast<size_t>(opt.candidates));
      while (static_cast<int>(cands.size()) < opt.candidates - 1) {
        const std::string& neg = pick(pool);
        if (neg == truth) continue;
        bool dup = false;
        for (const auto& c : cands) dup = dup || c == neg;
        if (!dup) cands.push_back(neg);
      }
      cands.push_back(truth);
      out << line++ << ' ' << question << '\t' << truth << "\t\t";
      for (size_t c = 0; c < cands.size(); ++c) out << (c ? "|" : "") << cands[c];
      out << '\n';
    }
  }
  return out.str();
}

}  // namespace dck::synth
