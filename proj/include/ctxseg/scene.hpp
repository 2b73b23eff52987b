#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ctxseg/embeddings.hpp"
#include "ctxseg/netpbm.hpp"
#include "ctxseg/rng.hpp"

namespace ctxseg {

enum class ShapeKind { square, triangle, disc, bar, cross };

std::string to_string(ShapeKind shape);
/// Throws ErrorCode::config for unknown names.
ShapeKind shape_from_string(const std::string& name);

/// Pixels of a shape inside a size x size box, row-major; every shape is a
/// single 4-connected region.
std::vector<bool> shape_footprint(ShapeKind shape, std::size_t size);

struct ClassSpec {
  std::string name;
  ShapeKind shape = ShapeKind::square;
  std::array<std::uint8_t, 3> color{};
};

/// Two classes with identical appearance; class i only ever appears together
/// with context[i].
struct ConfusableSpec {
  std::array<std::string, 2> classes;
  std::array<std::string, 2> contexts;
};

struct SceneConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t object_size = 16;
  std::size_t lattice = 8;
  double noise_sigma = 8.0;  // in 8-bit units
  std::array<std::uint8_t, 3> background{96, 96, 96};
  std::size_t min_objects = 2;
  std::size_t max_objects = 4;
  /// Minimum Chebyshev distance (pixels) between the origins of a
  /// confusable instance and its context object.
  std::size_t context_min_distance = 0;
  std::vector<ClassSpec> classes;
  std::vector<ConfusableSpec> confusables;
  std::vector<std::pair<std::string, std::string>> similar_pairs;

  /// medic / pedestrian (identical red squares) disambiguated by hospital
  /// (triangle) / street (disc), plus bar and cross distractors.
  static SceneConfig desk_default();
  /// Throws ErrorCode::config.
  void validate() const;
  LabelVocabulary vocabulary() const;
  /// Classes that are neither confusable nor context.
  std::vector<std::size_t> distractor_classes() const;
};

struct SceneObject {
  std::size_t class_id = 0;  // vocabulary index; the mask stores class_id + 1
  std::size_t x = 0;
  std::size_t y = 0;
  std::size_t size = 0;

  friend bool operator==(const SceneObject&, const SceneObject&) = default;
};

struct SampleRecord {
  std::string id;
  std::uint64_t seed = 0;
  std::size_t index = 0;
  RgbImage image;
  GrayImage mask;
  std::vector<SceneObject> objects;
};

/// Renders objects over the background and adds per-pixel Gaussian noise
/// drawn from stream `index` of a generator keyed by `seed`. The noise does
/// not depend on the object list.
std::pair<RgbImage, GrayImage> render_scene(const SceneConfig& cfg, const std::vector<SceneObject>& objects,
                                            std::uint64_t seed, std::size_t index);

/// Layout and render of one sample; stream id = index. Throws
/// ErrorCode::placement when the objects cannot be placed.
SampleRecord generate_sample(const SceneConfig& cfg, std::uint64_t seed, std::size_t index);
std::vector<SampleRecord> generate_samples(const SceneConfig& cfg, std::uint64_t seed, std::size_t first_index,
                                           std::size_t count);

struct Dataset {
  SceneConfig config;  // roster and extents as recorded in the manifest
  std::string split;
  std::vector<SampleRecord> samples;
};

/// Writes `dir/{images/<id>.ppm, masks/<id>.pgm, manifest.json}`.
void write_split(const std::string& dir, const std::string& split, const SceneConfig& cfg,
                 const std::vector<SampleRecord>& samples);
/// Reads and cross-checks a split written by write_split.
Dataset read_split(const std::string& dir);
std::string manifest_json(const std::string& split, const SceneConfig& cfg, const std::vector<SampleRecord>& samples);

/// Throws ErrorCode::invalid_argument on inconsistent sample extents.
void check_sample(const SampleRecord& sample, std::size_t classes);

struct AugmentConfig {
  bool flip = true;
  std::size_t crop_height = 0;  // 0: full extent
  std::size_t crop_width = 0;
};

SampleRecord flip_horizontal(const SampleRecord& sample);
/// Throws ErrorCode::invalid_argument if the window leaves the image.
SampleRecord crop(const SampleRecord& sample, std::size_t y, std::size_t x, std::size_t height, std::size_t width);
/// Flip with probability 1/2 when enabled, then a uniformly placed crop.
SampleRecord augment(const SampleRecord& sample, Rng& rng, const AugmentConfig& cfg);

}  // namespace ctxseg
