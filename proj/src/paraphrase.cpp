#include <set>

#include "msdm/errors.hpp"
#include "msdm/rng.hpp"
#include "msdm/synthdata.hpp"
#include "prompt_grammar.hpp"

namespace msdm::synth {

namespace {

std::vector<std::string> rewrites(const PromptRecord& prompt) {
  if (prompt.template_id < 0 || prompt.template_id >= kTemplateCount) {
    throw ConfigError("paraphrase: prompt " + prompt.id + " has no known template");
  }
  const auto& tpl = grammar::kTemplates[static_cast<std::size_t>(prompt.template_id)];
  std::set<std::string> seen{prompt.text};
  std::vector<std::string> out;
  const auto push = [&](std::string s) {
    if (seen.insert(s).second) out.push_back(std::move(s));
  };
  for (const char* verb : grammar::kVerbs) {
    for (const char* noun : grammar::kNouns) {
      for (const char* conn : grammar::kConnectors) push(grammar::compose(verb, noun, conn, tpl, prompt.attrs, false));
      push(grammar::compose(verb, noun, "", tpl, prompt.attrs, true));
    }
  }
  return out;
}

}  // namespace

std::size_t paraphrase_capacity(const PromptRecord& prompt) { return rewrites(prompt).size(); }

std::vector<PromptRecord> paraphrase(const PromptRecord& prompt, int k, std::uint64_t seed, std::string* warning) {
  if (k < 1) throw ConfigError("paraphrase: k must be at least 1");
  auto texts = rewrites(prompt);
  Rng rng(mix_seed(seed, hash_string(prompt.id + "\n" + prompt.text)));
  shuffle(texts, rng);
  auto n = static_cast<std::size_t>(k);
  if (n > texts.size()) {
    if (warning) {
      *warning = "paraphrase: requested " + std::to_string(k) + " rewrites of " + prompt.id + " but only " +
                 std::to_string(texts.size()) + " exist; capped";
    }
    n = texts.size();
  }
  std::vector<PromptRecord> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    PromptRecord r;
    r.id = prompt.id + ".r" + std::to_string(i);
    r.text = std::move(texts[i]);
    r.attrs = prompt.attrs;
    r.origin = Origin::paraphrase;
    r.parent_id = prompt.parent_id ? *prompt.parent_id : prompt.id;
    r.template_id = prompt.template_id;
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace msdm::synth
