#include "ctxseg/scene.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>

#include <json.hpp>

#include "ctxseg/error.hpp"
#include "ctxseg/graph.hpp"

namespace ctxseg {
namespace {

constexpr std::uint64_t kNoiseKey = 0x6e6f697365ULL;  // separates noise from layout streams

std::size_t class_index(const SceneConfig& cfg, const std::string& name) {
  for (std::size_t i = 0; i < cfg.classes.size(); ++i) {
    if (cfg.classes[i].name == name) return i;
  }
  fail(ErrorCode::config, "scene: unknown class '" + name + "'");
}

bool separated(const SceneObject& a, const SceneObject& b) {
  // At least one background pixel between the boxes.
  return a.x + a.size < b.x || b.x + b.size < a.x || a.y + a.size < b.y || b.y + b.size < a.y;
}

std::size_t chebyshev(const SceneObject& a, const SceneObject& b) {
  const auto d = [](std::size_t u, std::size_t v) { return u > v ? u - v : v - u; };
  return std::max(d(a.x, b.x), d(a.y, b.y));
}

std::string sample_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06zu", index);
  return buf;
}

nlohmann::ordered_json color_json(const std::array<std::uint8_t, 3>& c) { return {c[0], c[1], c[2]}; }

std::array<std::uint8_t, 3> color_from(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) fail(ErrorCode::parse, "color must be [r, g, b]");
  std::array<std::uint8_t, 3> c{};
  for (std::size_t i = 0; i < 3; ++i) {
    const int v = j[i].get<int>();
    if (v < 0 || v > 255) fail(ErrorCode::parse, "color channel outside 0..255");
    c[i] = static_cast<std::uint8_t>(v);
  }
  return c;
}

}  // namespace

std::string to_string(ShapeKind shape) {
  switch (shape) {
    case ShapeKind::square: return "square";
    case ShapeKind::triangle: return "triangle";
    case ShapeKind::disc: return "disc";
    case ShapeKind::bar: return "bar";
    case ShapeKind::cross: return "cross";
  }
  return "unknown";
}

ShapeKind shape_from_string(const std::string& name) {
  for (const auto s : {ShapeKind::square, ShapeKind::triangle, ShapeKind::disc, ShapeKind::bar, ShapeKind::cross}) {
    if (to_string(s) == name) return s;
  }
  fail(ErrorCode::config, "unknown shape '" + name + "'");
}

std::vector<bool> shape_footprint(ShapeKind shape, std::size_t size) {
  std::vector<bool> f(size * size, false);
  const double c = (static_cast<double>(size) - 1.0) / 2.0;
  const double arm = static_cast<double>(size) / 6.0;
  // Bars cover more than half of each output cell they touch when objects sit
  // on a lattice aligned with the cells.
  const double bar = 0.3 * static_cast<double>(size);
  const double r2 = static_cast<double>(size * size) / 4.0;
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double dx = static_cast<double>(x) - c, dy = static_cast<double>(y) - c;
      bool in = false;
      switch (shape) {
        case ShapeKind::square: in = true; break;
        case ShapeKind::triangle: in = std::abs(dx) <= (static_cast<double>(y) + 1.0) * 0.5; break;
        case ShapeKind::disc: in = dx * dx + dy * dy <= r2; break;
        case ShapeKind::bar: in = std::abs(dy) <= bar; break;
        case ShapeKind::cross: in = std::abs(dx) <= arm || std::abs(dy) <= arm; break;
      }
      f[y * size + x] = in;
    }
  }
  return f;
}

SceneConfig SceneConfig::desk_default() {
  SceneConfig c;
  c.classes = {
      {"medic", ShapeKind::square, {200, 48, 48}},     {"pedestrian", ShapeKind::square, {200, 48, 48}},
      {"hospital", ShapeKind::triangle, {48, 168, 72}}, {"street", ShapeKind::disc, {56, 72, 200}},
      {"bar", ShapeKind::bar, {216, 196, 48}},         {"cross", ShapeKind::cross, {184, 96, 208}},
  };
  c.confusables = {{{"medic", "pedestrian"}, {"hospital", "street"}}};
  c.similar_pairs = {{"medic", "hospital"}, {"pedestrian", "street"}};
  return c;
}

void SceneConfig::validate() const {
  if (height == 0 || width == 0) fail(ErrorCode::config, "scene: zero extent");
  if (object_size == 0 || object_size > height || object_size > width) {
    fail(ErrorCode::config, "scene: object_size must fit the extents");
  }
  if (lattice == 0) fail(ErrorCode::config, "scene: lattice must be positive");
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) fail(ErrorCode::config, "scene: noise_sigma must be >= 0");
  if (min_objects > max_objects) fail(ErrorCode::config, "scene: min_objects > max_objects");
  if (classes.empty()) fail(ErrorCode::config, "scene: empty class roster");
  LabelVocabulary vocab = vocabulary();  // duplicates / size
  (void)vocab;
  std::set<std::string> roles;
  for (const auto& p : confusables) {
    for (std::size_t i = 0; i < 2; ++i) {
      class_index(*this, p.classes[i]);
      class_index(*this, p.contexts[i]);
      if (!roles.insert(p.classes[i]).second || !roles.insert(p.contexts[i]).second) {
        fail(ErrorCode::config, "scene: class '" + p.classes[i] + "' / '" + p.contexts[i] + "' has two roles");
      }
    }
    const auto& a = classes[class_index(*this, p.classes[0])];
    const auto& b = classes[class_index(*this, p.classes[1])];
    if (a.shape != b.shape || a.color != b.color) {
      fail(ErrorCode::config, "scene: confusable classes '" + a.name + "' and '" + b.name + "' must look identical");
    }
  }
  const bool need_distractors = max_objects > 2 || (max_objects >= 1 && confusables.empty()) ||
                                (min_objects <= 1 && max_objects >= 1);
  if (need_distractors && distractor_classes().empty()) {
    fail(ErrorCode::config, "scene: object counts need distractor classes but none are defined");
  }
  for (const auto& [a, b] : similar_pairs) SimilarityPairs::from_labels(vocabulary(), {{a, b}});
}

LabelVocabulary SceneConfig::vocabulary() const {
  std::vector<std::string> names;
  for (const auto& c : classes) names.push_back(c.name);
  try {
    return LabelVocabulary(std::move(names));
  } catch (const Error& e) {
    throw Error(ErrorCode::config, std::string("scene: ") + e.what());
  }
}

std::vector<std::size_t> SceneConfig::distractor_classes() const {
  std::set<std::string> roles;
  for (const auto& p : confusables) {
    roles.insert(p.classes.begin(), p.classes.end());
    roles.insert(p.contexts.begin(), p.contexts.end());
  }
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (!roles.count(classes[i].name)) out.push_back(i);
  }
  return out;
}

std::pair<RgbImage, GrayImage> render_scene(const SceneConfig& cfg, const std::vector<SceneObject>& objects,
                                            std::uint64_t seed, std::size_t index) {
  const std::size_t h = cfg.height, w = cfg.width;
  RgbImage image{h, w, std::vector<std::uint8_t>(h * w * 3)};
  GrayImage mask{h, w, std::vector<std::uint8_t>(h * w, 0)};
  std::vector<std::array<std::uint8_t, 3>> base(h * w, cfg.background);
  for (const auto& o : objects) {
    if (o.class_id >= cfg.classes.size()) fail(ErrorCode::unknown_label, "render: class id " + std::to_string(o.class_id));
    if (o.x + o.size > w || o.y + o.size > h) fail(ErrorCode::placement, "render: object outside the image");
    const auto& spec = cfg.classes[o.class_id];
    const auto fp = shape_footprint(spec.shape, o.size);
    for (std::size_t y = 0; y < o.size; ++y) {
      for (std::size_t x = 0; x < o.size; ++x) {
        if (!fp[y * o.size + x]) continue;
        const std::size_t p = (o.y + y) * w + o.x + x;
        base[p] = spec.color;
        mask.pixels[p] = static_cast<std::uint8_t>(o.class_id + 1);
      }
    }
  }
  Rng noise(seed ^ kNoiseKey, index);
  for (std::size_t p = 0; p < h * w; ++p) {
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const double v = std::round(static_cast<double>(base[p][ch]) + cfg.noise_sigma * noise.normal());
      image.pixels[p * 3 + ch] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
    }
  }
  return {std::move(image), std::move(mask)};
}

SampleRecord generate_sample(const SceneConfig& cfg, std::uint64_t seed, std::size_t index) {
  Rng rng(seed, index);
  const std::size_t count = cfg.min_objects + rng.below(cfg.max_objects - cfg.min_objects + 1);
  const auto distractors = cfg.distractor_classes();
  std::vector<std::size_t> roster;
  std::size_t context_pos = 0;  // roster[1] is the context of roster[0] when > 0
  if (count >= 2 && !cfg.confusables.empty()) {
    const auto& pair = cfg.confusables[rng.below(cfg.confusables.size())];
    const std::size_t side = rng.below(2);
    roster.push_back(class_index(cfg, pair.classes[side]));
    roster.push_back(class_index(cfg, pair.contexts[side]));
    context_pos = 1;
  }
  while (roster.size() < count) {
    if (distractors.empty()) fail(ErrorCode::config, "scene: no distractor classes to fill the scene");
    roster.push_back(distractors[rng.below(distractors.size())]);
  }

  std::vector<std::pair<std::size_t, std::size_t>> slots;
  for (std::size_t y = 0; y + cfg.object_size <= cfg.height; y += cfg.lattice) {
    for (std::size_t x = 0; x + cfg.object_size <= cfg.width; x += cfg.lattice) slots.emplace_back(y, x);
  }
  std::vector<SceneObject> placed;
  constexpr int kAttempts = 64;
  for (int attempt = 0; attempt < kAttempts && placed.size() < roster.size(); ++attempt) {
    placed.clear();
    rng.shuffle(slots.begin(), slots.end());
    for (std::size_t k = 0; k < roster.size(); ++k) {
      for (const auto& [y, x] : slots) {
        const SceneObject cand{roster[k], x, y, cfg.object_size};
        bool ok = std::all_of(placed.begin(), placed.end(), [&](const SceneObject& o) { return separated(o, cand); });
        if (ok && context_pos && k == context_pos) ok = chebyshev(placed[0], cand) >= cfg.context_min_distance;
        if (ok) {
          placed.push_back(cand);
          break;
        }
      }
      if (placed.size() != k + 1) break;
    }
  }
  if (placed.size() < roster.size()) {
    fail(ErrorCode::placement, "cannot place " + std::to_string(roster.size()) + " objects of size " +
                                   std::to_string(cfg.object_size) + " in " + std::to_string(cfg.height) + "x" +
                                   std::to_string(cfg.width));
  }
  SampleRecord s;
  s.id = sample_id(index);
  s.seed = seed;
  s.index = index;
  s.objects = std::move(placed);
  auto [image, mask] = render_scene(cfg, s.objects, seed, index);
  s.image = std::move(image);
  s.mask = std::move(mask);
  return s;
}

std::vector<SampleRecord> generate_samples(const SceneConfig& cfg, std::uint64_t seed, std::size_t first_index,
                                           std::size_t count) {
  cfg.validate();
  std::vector<SampleRecord> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_sample(cfg, seed, first_index + i));
  return out;
}

std::string manifest_json(const std::string& split, const SceneConfig& cfg, const std::vector<SampleRecord>& samples) {
  nlohmann::ordered_json j;
  j["version"] = 1;
  j["split"] = split;
  j["height"] = cfg.height;
  j["width"] = cfg.width;
  j["object_size"] = cfg.object_size;
  j["lattice"] = cfg.lattice;
  j["noise_sigma"] = cfg.noise_sigma;
  j["background"] = color_json(cfg.background);
  j["min_objects"] = cfg.min_objects;
  j["max_objects"] = cfg.max_objects;
  j["context_min_distance"] = cfg.context_min_distance;
  auto& classes = j["classes"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < cfg.classes.size(); ++i) {
    const auto& c = cfg.classes[i];
    classes.push_back({{"id", i + 1}, {"name", c.name}, {"shape", to_string(c.shape)}, {"color", color_json(c.color)}});
  }
  auto& conf = j["confusables"] = nlohmann::ordered_json::array();
  for (const auto& p : cfg.confusables) conf.push_back({{"classes", p.classes}, {"contexts", p.contexts}});
  auto& pairs = j["similar_pairs"] = nlohmann::ordered_json::array();
  for (const auto& [a, b] : cfg.similar_pairs) pairs.push_back({a, b});
  auto& list = j["samples"] = nlohmann::ordered_json::array();
  for (const auto& s : samples) {
    nlohmann::ordered_json e;
    e["id"] = s.id;
    e["image"] = "images/" + s.id + ".ppm";
    e["mask"] = "masks/" + s.id + ".pgm";
    e["seed"] = s.seed;
    e["index"] = s.index;
    auto& objs = e["objects"] = nlohmann::ordered_json::array();
    for (const auto& o : s.objects) {
      const auto& c = cfg.classes.at(o.class_id);
      objs.push_back({{"class", c.name}, {"shape", to_string(c.shape)}, {"x", o.x}, {"y", o.y}, {"size", o.size}});
    }
    list.push_back(std::move(e));
  }
  return j.dump(2) + "\n";
}

void write_split(const std::string& dir, const std::string& split, const SceneConfig& cfg,
                 const std::vector<SampleRecord>& samples) {
  const std::filesystem::path root(dir);
  for (const auto& s : samples) {
    write_ppm((root / "images" / (s.id + ".ppm")).string(), s.image);
    write_pgm((root / "masks" / (s.id + ".pgm")).string(), s.mask);
  }
  write_file((root / "manifest.json").string(), manifest_json(split, cfg, samples));
}

void check_sample(const SampleRecord& s, std::size_t classes) {
  if (s.image.pixels.size() != s.image.height * s.image.width * 3 || s.mask.height != s.image.height ||
      s.mask.width != s.image.width || s.mask.pixels.size() != s.mask.height * s.mask.width) {
    fail(ErrorCode::shape_mismatch, "sample " + s.id + ": image and mask extents differ");
  }
  for (const auto v : s.mask.pixels) {
    if (v > classes) fail(ErrorCode::unknown_label, "sample " + s.id + ": mask value " + std::to_string(v));
  }
}

Dataset read_split(const std::string& dir) {
  const std::filesystem::path root(dir);
  const auto path = (root / "manifest.json").string();
  Dataset d;
  try {
    const auto j = nlohmann::json::parse(read_file(path));
    if (j.at("version").get<int>() != 1) fail(ErrorCode::unsupported_version, path + ": manifest version");
    d.split = j.at("split").get<std::string>();
    auto& c = d.config;
    c.height = j.at("height").get<std::size_t>();
    c.width = j.at("width").get<std::size_t>();
    c.object_size = j.at("object_size").get<std::size_t>();
    c.lattice = j.at("lattice").get<std::size_t>();
    c.noise_sigma = j.at("noise_sigma").get<double>();
    c.background = color_from(j.at("background"));
    c.min_objects = j.at("min_objects").get<std::size_t>();
    c.max_objects = j.at("max_objects").get<std::size_t>();
    c.context_min_distance = j.at("context_min_distance").get<std::size_t>();
    c.classes.clear();
    for (const auto& e : j.at("classes")) {
      if (e.at("id").get<std::size_t>() != c.classes.size() + 1) fail(ErrorCode::parse, path + ": class ids must be 1..K in order");
      c.classes.push_back({e.at("name").get<std::string>(), shape_from_string(e.at("shape").get<std::string>()),
                           color_from(e.at("color"))});
    }
    c.confusables.clear();
    for (const auto& e : j.at("confusables")) {
      c.confusables.push_back({e.at("classes").get<std::array<std::string, 2>>(),
                               e.at("contexts").get<std::array<std::string, 2>>()});
    }
    c.similar_pairs.clear();
    for (const auto& e : j.at("similar_pairs")) {
      c.similar_pairs.emplace_back(e.at(0).get<std::string>(), e.at(1).get<std::string>());
    }
    c.validate();
    const auto vocab = c.vocabulary();
    for (const auto& e : j.at("samples")) {
      SampleRecord s;
      s.id = e.at("id").get<std::string>();
      s.seed = e.at("seed").get<std::uint64_t>();
      s.index = e.at("index").get<std::size_t>();
      for (const auto& o : e.at("objects")) {
        s.objects.push_back({vocab.id_of(o.at("class").get<std::string>()), o.at("x").get<std::size_t>(),
                             o.at("y").get<std::size_t>(), o.at("size").get<std::size_t>()});
      }
      s.image = read_ppm((root / e.at("image").get<std::string>()).string());
      s.mask = read_pgm((root / e.at("mask").get<std::string>()).string());
      if (s.image.height != c.height || s.image.width != c.width) {
        fail(ErrorCode::shape_mismatch, "sample " + s.id + ": image extents differ from manifest");
      }
      check_sample(s, c.classes.size());
      d.samples.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::parse, path + ": " + e.what());
  }
  return d;
}

SampleRecord flip_horizontal(const SampleRecord& s) {
  SampleRecord out = s;
  const std::size_t h = s.image.height, w = s.image.width;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t src = y * w + (w - 1 - x), dst = y * w + x;
      out.mask.pixels[dst] = s.mask.pixels[src];
      for (std::size_t c = 0; c < 3; ++c) out.image.pixels[dst * 3 + c] = s.image.pixels[src * 3 + c];
    }
  }
  // Every footprint is mirror-symmetric, so only the origin moves.
  for (auto& o : out.objects) o.x = w - o.x - o.size;
  return out;
}

SampleRecord crop(const SampleRecord& s, std::size_t y0, std::size_t x0, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0 || y0 + height > s.image.height || x0 + width > s.image.width) {
    fail(ErrorCode::invalid_argument, "crop window outside the image");
  }
  SampleRecord out = s;
  out.image = {height, width, std::vector<std::uint8_t>(height * width * 3)};
  out.mask = {height, width, std::vector<std::uint8_t>(height * width)};
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const std::size_t src = (y + y0) * s.image.width + x + x0, dst = y * width + x;
      out.mask.pixels[dst] = s.mask.pixels[src];
      for (std::size_t c = 0; c < 3; ++c) out.image.pixels[dst * 3 + c] = s.image.pixels[src * 3 + c];
    }
  }
  // Only instances that stay whole keep a manifest entry.
  out.objects.clear();
  for (const auto& o : s.objects) {
    if (o.x >= x0 && o.y >= y0 && o.x + o.size <= x0 + width && o.y + o.size <= y0 + height) {
      out.objects.push_back({o.class_id, o.x - x0, o.y - y0, o.size});
    }
  }
  return out;
}

SampleRecord augment(const SampleRecord& s, Rng& rng, const AugmentConfig& cfg) {
  const std::size_t ch = cfg.crop_height ? cfg.crop_height : s.image.height;
  const std::size_t cw = cfg.crop_width ? cfg.crop_width : s.image.width;
  if (ch > s.image.height || cw > s.image.width) fail(ErrorCode::invalid_argument, "crop size exceeds the image");
  SampleRecord out = cfg.flip && rng.bernoulli(0.5) ? flip_horizontal(s) : s;
  const std::size_t y0 = rng.below(s.image.height - ch + 1), x0 = rng.below(s.image.width - cw + 1);
  if (ch == s.image.height && cw == s.image.width) return out;
  return crop(out, y0, x0, ch, cw);
}

}  // namespace ctxseg
