#pragma once

// Prompt templates shared by the dataset builder and the paraphraser.

#include <array>
#include <string>

#include "msdm/synthdata.hpp"

namespace msdm::synth::grammar {

enum class Adj { none, modality, hue };

struct Template {
  const char* verb;
  const char* noun;
  const char* connector;
  Adj adj;
  const char* tail;  // may contain {modality} and {hue}
};

inline constexpr std::array<Template, kTemplateCount> kTemplates = {{
    {"generate", "image", "containing", Adj::none, ""},
    {"create", "picture", "showing", Adj::modality, ""},
    {"generate", "image", "containing", Adj::modality, " with {hue} tones"},
    {"produce", "photo", "showing", Adj::hue, " in {modality} view"},
    {"render", "image", "depicting", Adj::modality, " on a {hue} background"},
    {"make", "frame", "with", Adj::hue, " from a {modality} exam"},
    {"synthesize", "view", "featuring", Adj::modality, " under {hue} lighting"},
    {"create", "snapshot", "including", Adj::none, " in {hue} {modality} style"},
    {"generate", "picture", "depicting", Adj::hue, " as seen in {modality} imaging"},
    {"produce", "image", "featuring", Adj::modality, " with a {hue} palette"},
    {"render", "photo", "containing", Adj::none, " for a {modality} study in {hue} hues"},
    {"make", "view", "showing", Adj::modality, " in {hue} colors"},
    {"synthesize", "frame", "with", Adj::hue, " of a {modality} procedure"},
    {"create", "image", "featuring", Adj::hue, " in a {modality} setting"},
}};

inline constexpr std::array<const char*, 6> kVerbs = {"generate", "create", "produce", "make", "render", "synthesize"};
inline constexpr std::array<const char*, 6> kNouns = {"image", "picture", "photo", "frame", "view", "snapshot"};
inline constexpr std::array<const char*, 6> kConnectors = {"containing", "showing", "depicting",
                                                           "featuring",  "with",    "including"};

std::string finding_phrase(const SceneAttributes& attrs);
std::string modality_word(Modality m);

// finding_first selects "<verb> <finding> in a <noun>..." instead of
// "<verb> a <noun> <connector> <finding>...".
std::string compose(const char* verb, const char* noun, const char* connector, const Template& tpl,
                    const SceneAttributes& attrs, bool finding_first);

// a/an agreement with the following word ("an x-ray", "a polyp").
std::string fix_articles(const std::string& text);

}  // namespace msdm::synth::grammar
