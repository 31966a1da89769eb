#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <set>

#include "msdm/errors.hpp"
#include "msdm/rng.hpp"
#include "msdm/synthdata.hpp"
#include "prompt_grammar.hpp"

namespace msdm::synth {

std::string_view to_string(Finding f) {
  switch (f) {
    case Finding::polyp: return "polyp";
    case Finding::clean: return "clean";
    case Finding::instrument: return "instrument";
  }
  return "?";
}

std::string_view to_string(Modality m) { return m == Modality::endo ? "endo" : "xray"; }

std::string_view to_string(Hue h) {
  switch (h) {
    case Hue::pink: return "pink";
    case Hue::amber: return "amber";
    case Hue::crimson: return "crimson";
    case Hue::teal: return "teal";
  }
  return "?";
}

Finding parse_finding(std::string_view s) {
  for (auto f : {Finding::polyp, Finding::clean, Finding::instrument}) {
    if (to_string(f) == s) return f;
  }
  throw ConfigError("unknown finding '" + std::string(s) + "'");
}

Modality parse_modality(std::string_view s) {
  for (auto m : {Modality::endo, Modality::xray}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("unknown modality '" + std::string(s) + "'");
}

Hue parse_hue(std::string_view s) {
  for (auto h : {Hue::pink, Hue::amber, Hue::crimson, Hue::teal}) {
    if (to_string(h) == s) return h;
  }
  throw ConfigError("unknown hue '" + std::string(s) + "'");
}

void SceneAttributes::validate() const {
  if (count < 0 || count > 3) throw ConfigError("scene count must be in 0..3");
  if ((finding == Finding::clean) != (count == 0)) {
    throw ConfigError("scene count must be 0 exactly when the finding is clean");
  }
}

std::string SceneAttributes::key() const {
  return std::string(to_string(finding)) + "/" + std::to_string(count) + "/" + std::string(to_string(modality)) + "/" +
         std::string(to_string(hue));
}

std::vector<SceneAttributes> attribute_grammar(const std::vector<Modality>& modalities, const std::vector<Hue>& hues) {
  std::vector<SceneAttributes> out;
  for (auto m : modalities) {
    for (auto h : hues) {
      out.push_back({Finding::clean, 0, m, h});
      for (int c = 1; c <= 3; ++c) out.push_back({Finding::polyp, c, m, h});
      for (int c = 1; c <= 3; ++c) out.push_back({Finding::instrument, c, m, h});
    }
  }
  return out;
}

// ---------------------------------------------------------------- rendering

namespace {

struct Rgb {
  int r, g, b;
};

Rgb palette_base(Modality m, Hue h) {
  if (m == Modality::endo) {
    switch (h) {
      case Hue::pink: return {214, 120, 132};
      case Hue::amber: return {208, 146, 84};
      case Hue::crimson: return {176, 58, 66};
      case Hue::teal: return {24, 76, 80};
    }
  }
  switch (h) {
    case Hue::pink: return {124, 110, 114};
    case Hue::amber: return {126, 118, 102};
    case Hue::crimson: return {128, 104, 104};
    case Hue::teal: return {188, 204, 208};
  }
  return {110, 110, 110};
}

constexpr int kNoiseAmplitude = 28;

double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

// Two-octave value noise in roughly [-1.5, 1.5].
std::vector<double> value_noise(std::size_t size, Rng& rng) {
  std::vector<double> field(size * size, 0.0);
  double amplitude = 1.0;
  for (std::size_t cells : {4u, 8u}) {
    const std::size_t n = cells + 1;
    std::vector<double> lattice(n * n);
    for (auto& v : lattice) v = rng.uniform(-1.0, 1.0);
    const double step = static_cast<double>(cells) / static_cast<double>(size);
    for (std::size_t y = 0; y < size; ++y) {
      const double fy = (static_cast<double>(y) + 0.5) * step;
      const std::size_t iy = std::min(static_cast<std::size_t>(fy), cells - 1);
      const double ty = smoothstep(fy - static_cast<double>(iy));
      for (std::size_t x = 0; x < size; ++x) {
        const double fx = (static_cast<double>(x) + 0.5) * step;
        const std::size_t ix = std::min(static_cast<std::size_t>(fx), cells - 1);
        const double tx = smoothstep(fx - static_cast<double>(ix));
        const double a = lattice[iy * n + ix], b = lattice[iy * n + ix + 1];
        const double c = lattice[(iy + 1) * n + ix], d = lattice[(iy + 1) * n + ix + 1];
        const double top = a + (b - a) * tx, bottom = c + (d - c) * tx;
        field[y * size + x] += amplitude * (top + (bottom - top) * ty);
      }
    }
    amplitude *= 0.5;
  }
  return field;
}

std::uint8_t clamp8(int v) { return static_cast<std::uint8_t>(std::clamp(v, 0, 255)); }

void set_px(Image& img, std::size_t y, std::size_t x, const std::uint8_t (&c)[3]) {
  auto* p = img.px(y, x);
  p[0] = c[0];
  p[1] = c[1];
  p[2] = c[2];
}

void draw_ellipse(Image& img, Modality modality, Rng rng) {
  const double s = static_cast<double>(img.width) / 32.0;
  const double rx = rng.uniform(4.0, 7.0) * s, ry = rng.uniform(4.0, 7.0) * s;
  const double r = std::max(rx, ry);
  const double cx = rng.uniform(r, static_cast<double>(img.width) - r);
  const double cy = rng.uniform(r, static_cast<double>(img.height) - r);
  const double theta = rng.uniform(0.0, std::numbers::pi);
  const double ct = std::cos(theta), st = std::sin(theta);
  const double rim_start = 1.0 - 1.1 / std::min(rx, ry);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      const double dx = static_cast<double>(x) + 0.5 - cx, dy = static_cast<double>(y) + 0.5 - cy;
      const double u = (dx * ct + dy * st) / rx, v = (-dx * st + dy * ct) / ry;
      const double q = std::sqrt(u * u + v * v);
      if (q > 1.0) continue;
      if (q >= rim_start) {
        set_px(img, y, x, modality == Modality::endo ? kEndoRim : kXrayRim);
        continue;
      }
      auto* p = img.px(y, x);
      if (modality == Modality::endo) {
        // Darker, redder body with a soft highlight toward the centre.
        const double shade = 1.0 - 0.35 * q;
        p[0] = clamp8(static_cast<int>(std::lround(0.7 * p[0] * shade + 40)));
        p[1] = clamp8(static_cast<int>(std::lround(0.55 * p[1] * shade + 10)));
        p[2] = clamp8(static_cast<int>(std::lround(0.6 * p[2] * shade + 10)));
      } else {
        const int level = static_cast<int>(std::lround(225 - 30 * q));
        p[0] = clamp8(level);
        p[1] = clamp8(level);
        p[2] = clamp8(level - 6);
      }
    }
  }
}

void draw_instrument(Image& img, Rng rng) {
  const auto size = static_cast<long long>(img.width);
  const double s = static_cast<double>(img.width) / 32.0;
  const bool horizontal = rng.bernoulli(0.5);
  const auto thickness = static_cast<long long>(std::lround(rng.uniform(4.0, 6.0) * s));
  const auto length = static_cast<long long>(std::lround(rng.uniform(14.0, 22.0) * s));
  const long long along0 = rng.between(0, size - length);
  const long long across0 = rng.between(0, size - thickness);
  const long long stripe = across0 + thickness / 2;
  for (long long a = along0; a < along0 + length; ++a) {
    for (long long b = across0; b < across0 + thickness; ++b) {
      const auto y = static_cast<std::size_t>(horizontal ? b : a);
      const auto x = static_cast<std::size_t>(horizontal ? a : b);
      set_px(img, y, x, b == stripe ? kInstrumentStripe : kInstrumentBody);
    }
  }
}

}  // namespace

Image render_scene(const SceneAttributes& attrs, std::uint64_t seed, std::size_t size) {
  attrs.validate();
  if (size < 16 || size % 4 != 0) throw ConfigError("render_scene: size must be a multiple of 4, at least 16");
  Rng rng(seed);
  Image img = Image::blank(size, size);
  Rng noise_rng = rng.fork("background");
  const auto field = value_noise(size, noise_rng);
  const Rgb base = palette_base(attrs.modality, attrs.hue);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const int n = static_cast<int>(std::lround(kNoiseAmplitude * field[y * size + x] / 1.5));
      auto* p = img.px(y, x);
      p[0] = clamp8(base.r + n);
      p[1] = clamp8(base.g + n);
      p[2] = clamp8(base.b + n);
    }
  }
  for (int i = 0; i < attrs.count; ++i) {
    Rng item = rng.fork(static_cast<std::uint64_t>(1000 + i));
    if (attrs.finding == Finding::polyp) {
      draw_ellipse(img, attrs.modality, item);
    } else {
      draw_instrument(img, item);
    }
  }
  return img;
}

std::size_t count_color(const Image& image, const std::uint8_t (&rgb)[3]) {
  std::size_t n = 0;
  for (std::size_t i = 0; i + 2 < image.rgb.size(); i += 3) {
    if (image.rgb[i] == rgb[0] && image.rgb[i + 1] == rgb[1] && image.rgb[i + 2] == rgb[2]) ++n;
  }
  return n;
}

// ------------------------------------------------------------------ prompts

namespace grammar {

std::string finding_phrase(const SceneAttributes& attrs) {
  static const char* const kCounts[] = {"", "a", "two", "three"};
  switch (attrs.finding) {
    case Finding::clean: return "no findings";
    case Finding::polyp: return attrs.count == 1 ? "a polyp" : std::string(kCounts[attrs.count]) + " polyps";
    case Finding::instrument:
      return attrs.count == 1 ? "biopsy forceps" : std::string(kCounts[attrs.count]) + " biopsy forceps";
  }
  return "";
}

std::string modality_word(Modality m) { return m == Modality::endo ? "endoscopic" : "x-ray"; }

namespace {

std::string fill(std::string text, const SceneAttributes& attrs) {
  const auto replace = [&](const std::string& key, const std::string& value) {
    for (auto pos = text.find(key); pos != std::string::npos; pos = text.find(key, pos + value.size())) {
      text.replace(pos, key.size(), value);
    }
  };
  replace("{modality}", modality_word(attrs.modality));
  replace("{hue}", std::string(to_string(attrs.hue)));
  return text;
}

std::string adjective(const Template& tpl, const SceneAttributes& attrs) {
  switch (tpl.adj) {
    case Adj::none: return "";
    case Adj::modality: return modality_word(attrs.modality) + " ";
    case Adj::hue: return std::string(to_string(attrs.hue)) + "-toned ";
  }
  return "";
}

}  // namespace

std::string compose(const char* verb, const char* noun, const char* connector, const Template& tpl,
                    const SceneAttributes& attrs, bool finding_first) {
  const std::string np = "a " + adjective(tpl, attrs) + noun;
  const std::string tail = fill(tpl.tail, attrs);
  std::string text = finding_first ? std::string(verb) + " " + finding_phrase(attrs) + " in " + np + tail
                                   : std::string(verb) + " " + np + " " + connector + " " + finding_phrase(attrs) + tail;
  return fix_articles(text);
}

std::string fix_articles(const std::string& text) {
  std::vector<std::string> words;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto end = text.find(' ', start);
    words.push_back(text.substr(start, end == std::string::npos ? std::string::npos : end - start));
    if (end == std::string::npos) break;
    start = end + 1;
  }
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    std::string w = words[i];
    if ((w == "a" || w == "an") && i + 1 < words.size() && !words[i + 1].empty()) {
      const std::string& next = words[i + 1];
      const bool vowel = std::string_view("aeiou").find(next[0]) != std::string_view::npos || next.rfind("x-", 0) == 0;
      w = vowel ? "an" : "a";
    }
    if (i) out += ' ';
    out += w;
  }
  return out;
}

}  // namespace grammar

std::string render_prompt_text(const SceneAttributes& attrs, int template_id) {
  if (template_id < 0 || template_id >= kTemplateCount) {
    throw ConfigError("unknown prompt template " + std::to_string(template_id));
  }
  attrs.validate();
  const auto& tpl = grammar::kTemplates[static_cast<std::size_t>(template_id)];
  return grammar::compose(tpl.verb, tpl.noun, tpl.connector, tpl, attrs, false);
}

PromptRecord render_prompt(const SceneAttributes& attrs, int template_id, std::string id) {
  return {std::move(id), render_prompt_text(attrs, template_id), attrs, Origin::original, std::nullopt, template_id};
}

// ------------------------------------------------------------------ dataset

const PromptRecord& DatasetManifest::prompt(std::string_view id) const {
  for (const auto& p : prompts) {
    if (p.id == id) return p;
  }
  throw ContractError("no prompt with id '" + std::string(id) + "'");
}

const ImageSample& DatasetManifest::image(std::string_view id) const {
  for (const auto& im : images) {
    if (im.id == id) return im;
  }
  throw ContractError("no image with id '" + std::string(id) + "'");
}

bool DatasetManifest::is_validation_prompt(std::string_view id) const {
  return std::find(validation_prompt_ids.begin(), validation_prompt_ids.end(), id) != validation_prompt_ids.end();
}

DatasetOptions generic_domain_options() {
  DatasetOptions o;
  o.hues = {Hue::teal};
  return o;
}

namespace {

std::string numbered(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%04zu", prefix, i);
  return buf;
}

}  // namespace

DatasetManifest build_dataset(std::size_t n_images, std::uint64_t seed, const DatasetOptions& options) {
  if (n_images < 20) throw ConfigError("build_dataset: need at least 20 images");
  if (options.modalities.empty() || options.hues.empty()) throw ConfigError("build_dataset: empty attribute domain");
  if (options.images_per_combo == 0) throw ConfigError("build_dataset: images_per_combo must be positive");
  Rng root(seed);

  auto grammar = attribute_grammar(options.modalities, options.hues);
  Rng combo_rng = root.fork("combos");
  shuffle(grammar, combo_rng);
  const std::size_t wanted = (n_images + options.images_per_combo - 1) / options.images_per_combo;
  grammar.resize(std::clamp<std::size_t>(wanted, 2, grammar.size()));

  DatasetManifest m;
  m.root_seed = seed;
  std::map<std::pair<std::size_t, int>, std::string> prompt_ids;  // (combo, template) -> id
  Rng link_rng = root.fork("links");
  for (std::size_t i = 0; i < n_images; ++i) {
    const std::size_t combo = i % grammar.size();
    ImageSample s;
    s.id = numbered("img_", i);
    s.attrs = grammar[combo];
    s.seed = mix_seed(seed, i);
    s.pixels = render_scene(s.attrs, s.seed, options.image_size);
    std::vector<int> templates(kTemplateCount);
    for (int t = 0; t < kTemplateCount; ++t) templates[static_cast<std::size_t>(t)] = t;
    shuffle(templates, link_rng);
    templates.resize(static_cast<std::size_t>(link_rng.between(7, 14)));
    std::sort(templates.begin(), templates.end());
    for (int t : templates) {
      auto [it, inserted] = prompt_ids.try_emplace({combo, t}, "");
      if (inserted) {
        it->second = numbered("p", m.prompts.size());
        m.prompts.push_back(render_prompt(s.attrs, t, it->second));
      }
      s.prompt_ids.push_back(it->second);
    }
    m.images.push_back(std::move(s));
  }
  for (const auto& im : m.images) m.train_ids.push_back(im.id);
  return m;
}

void refresh_prompt_split(DatasetManifest& m) {
  const std::set<std::string> val(m.validation_ids.begin(), m.validation_ids.end());
  std::map<std::string, std::pair<int, int>> links;  // prompt -> (train, validation)
  for (const auto& im : m.images) {
    const bool v = val.count(im.id) > 0;
    for (const auto& pid : im.prompt_ids) (v ? links[pid].second : links[pid].first)++;
  }
  m.validation_prompt_ids.clear();
  for (const auto& p : m.prompts) {
    const auto it = links.find(p.id);
    if (it != links.end() && it->second.first == 0 && it->second.second > 0) m.validation_prompt_ids.push_back(p.id);
  }
}

DatasetManifest split_holdout(const DatasetManifest& manifest, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("split_holdout: fraction must be in (0, 1)");
  DatasetManifest m = manifest;
  std::vector<std::string> ids;
  for (const auto& im : m.images) ids.push_back(im.id);
  Rng rng(mix_seed(seed, hash_string("holdout")));
  shuffle(ids, rng);
  const auto n_val = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(fraction * static_cast<double>(ids.size()))), 1, ids.size() - 1);
  const std::set<std::string> val(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_val));
  m.train_ids.clear();
  m.validation_ids.clear();
  for (const auto& im : m.images) (val.count(im.id) ? m.validation_ids : m.train_ids).push_back(im.id);
  m.holdout_fraction = fraction;
  refresh_prompt_split(m);
  return m;
}

// ------------------------------------------------------------- augmentation

std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::add: return "add";
    case Strategy::substitute: return "substitute";
    case Strategy::replace: return "replace";
  }
  return "?";
}

Strategy parse_strategy(std::string_view s) {
  for (auto st : {Strategy::add, Strategy::substitute, Strategy::replace}) {
    if (to_string(st) == s) return st;
  }
  throw ConfigError("unknown augmentation strategy '" + std::string(s) + "'");
}

std::vector<PromptRecord> paraphrase_all(const DatasetManifest& manifest, int k, std::uint64_t seed) {
  std::vector<PromptRecord> out;
  for (const auto& p : manifest.prompts) {
    if (p.origin != Origin::original) continue;
    auto para = paraphrase(p, k, seed);
    out.insert(out.end(), std::make_move_iterator(para.begin()), std::make_move_iterator(para.end()));
  }
  return out;
}

DatasetManifest augment(const DatasetManifest& manifest, const std::vector<PromptRecord>& paraphrases,
                        Strategy strategy, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw ConfigError("augment: fraction must be in [0, 1]");
  std::map<std::string, std::vector<const PromptRecord*>> children;
  for (const auto& p : paraphrases) {
    if (p.origin != Origin::paraphrase || !p.parent_id) throw ContractError("augment: record " + p.id + " is not a paraphrase");
    children[*p.parent_id].push_back(&p);
  }
  std::vector<const PromptRecord*> originals;
  for (const auto& p : manifest.prompts) {
    if (p.origin == Origin::original) originals.push_back(&p);
  }

  DatasetManifest m = manifest;
  m.strategy = std::string(to_string(strategy));
  std::map<std::string, std::vector<std::string>> link_map;  // original id -> replacement ids
  std::vector<PromptRecord> table;

  switch (strategy) {
    case Strategy::add:
      for (const auto& p : manifest.prompts) table.push_back(p);
      for (const auto& p : paraphrases) table.push_back(p);
      for (const auto* o : originals) {
        auto& ids = link_map[o->id];
        ids.push_back(o->id);
        for (const auto* c : children[o->id]) ids.push_back(c->id);
      }
      break;
    case Strategy::substitute: {
      const auto n_swap = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(originals.size())));
      std::vector<std::size_t> order(originals.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      Rng rng(mix_seed(seed, hash_string("substitute")));
      shuffle(order, rng);
      std::set<std::string> swapped;
      for (std::size_t i = 0; i < n_swap; ++i) swapped.insert(originals[order[i]]->id);
      for (const auto& p : manifest.prompts) {
        if (p.origin == Origin::original && swapped.count(p.id)) {
          const auto& kids = children[p.id];
          if (kids.empty()) throw ContractError("augment: prompt " + p.id + " has no paraphrase to substitute");
          table.push_back(*kids.front());
          link_map[p.id] = {kids.front()->id};
        } else {
          table.push_back(p);
        }
      }
      break;
    }
    case Strategy::replace:
      for (const auto& p : manifest.prompts) {
        if (p.origin != Origin::original) table.push_back(p);
      }
      for (const auto& p : paraphrases) table.push_back(p);
      for (const auto* o : originals) {
        auto& ids = link_map[o->id];
        for (const auto* c : children[o->id]) ids.push_back(c->id);
      }
      break;
  }

  m.prompts = std::move(table);
  for (auto& im : m.images) {
    std::vector<std::string> links;
    for (const auto& pid : im.prompt_ids) {
      const auto it = link_map.find(pid);
      if (it == link_map.end()) {
        links.push_back(pid);
      } else {
        links.insert(links.end(), it->second.begin(), it->second.end());
      }
    }
    im.prompt_ids = std::move(links);
  }
  if (!m.validation_ids.empty()) refresh_prompt_split(m);
  return m;
}

}  // namespace msdm::synth
