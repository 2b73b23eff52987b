#include "ctxseg/pipeline.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>

#include "ctxseg/error.hpp"
#include "ctxseg/ops.hpp"

namespace ctxseg {
namespace {

std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::vector<std::string> class_names(const LabelVocabulary& vocab) {
  std::vector<std::string> names{"background"};
  names.insert(names.end(), vocab.labels().begin(), vocab.labels().end());
  return names;
}

void check_vocab(const LabelVocabulary& model_vocab, const Dataset& data) {
  if (!(data.config.vocabulary() == model_vocab)) {
    fail(ErrorCode::vocab_mismatch, "dataset '" + data.split + "' class roster differs from the model's");
  }
}

ModelOutput<float> run(const TrainedModel& m, Tape<float>& tape, ParamBinding<float>& bind, const RgbImage& image,
                       std::span<const std::uint8_t> gt = {}) {
  (void)tape;
  return m.model->forward(bind, image_tensor<float>(image.height, image.width, image.pixels), gt);
}

}  // namespace

void generate_data(const PipelineConfig& cfg, const std::string& out_dir) {
  const auto& scene = cfg.data.scene;
  const std::filesystem::path root(out_dir);
  write_split((root / "train").string(), "train", scene, generate_samples(scene, cfg.seed, 0, cfg.data.train_count));
  write_split((root / "val").string(), "val", scene,
              generate_samples(scene, cfg.seed, cfg.data.train_count, cfg.data.val_count));
}

Tensor<double> label_embeddings(const PipelineConfig& cfg, const LabelVocabulary& vocab) {
  auto e = cfg.embedding;
  if (!e.path.empty()) e.path = cfg.resolve(e.path);
  return embed_labels(vocab, e).vectors;
}

ModelSpec model_spec(const PipelineConfig& cfg, const Tensor<double>& embeddings) {
  ModelSpec s;
  s.variant = cfg.variant;
  s.backbone = cfg.backbone;
  s.fusion = cfg.fusion;
  s.graph = cfg.graph;
  s.graph_source = cfg.graph_source;
  s.head_dim = cfg.head_dim;
  s.label_embeddings = embeddings;
  s.trainable_embeddings = cfg.embedding.trainable;
  return s;
}

namespace {

TrainedModel build(const PipelineConfig& cfg, const LabelVocabulary& vocab, const Tensor<double>& embeddings) {
  TrainedModel m{cfg, vocab, nullptr, nullptr, Rng(cfg.seed, 2).state(), 0};
  Rng init(cfg.seed, 1);
  m.model = std::make_unique<SegmentationModel<float>>(model_spec(cfg, embeddings), init);
  m.optimizer = std::make_unique<Adam<float>>(cfg.optimizer, m.model->params());
  return m;
}

}  // namespace

TrainedModel initialize(const PipelineConfig& cfg, const LabelVocabulary& vocab) {
  cfg.validate();
  return build(cfg, vocab, label_embeddings(cfg, vocab));
}

std::string metrics_csv(const std::vector<EpochMetrics>& history) {
  std::string out = std::string(kMetricsHeader) + "\n";
  for (const auto& e : history) {
    out += std::to_string(e.epoch) + "," + fixed6(e.loss) + "," + fixed6(e.loss_ce) + "," +
           fixed6(e.loss_contrastive) + "," + fixed6(e.train_miou) + "," + fixed6(e.val_miou) + "," +
           fixed6(e.val_map) + "\n";
  }
  return out;
}

TrainResult train(const PipelineConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  const auto train_set = read_split(cfg.resolve(cfg.data.train));
  const auto val_set = read_split(cfg.resolve(cfg.data.val));
  return train(cfg, train_set, val_set, on_epoch);
}

TrainResult train(const PipelineConfig& cfg, const Dataset& train_set, const Dataset& val_set,
                  const EpochCallback& on_epoch) {
  cfg.validate();
  const auto vocab = train_set.config.vocabulary();
  check_vocab(vocab, val_set);
  if (train_set.samples.empty()) fail(ErrorCode::invalid_argument, "training split is empty");
  if (train_set.config.height != cfg.backbone.image_height || train_set.config.width != cfg.backbone.image_width) {
    fail(ErrorCode::config, "dataset extents differ from the backbone input extents");
  }
  const auto pairs = SimilarityPairs::from_labels(vocab, train_set.config.similar_pairs);
  TrainResult result{initialize(cfg, vocab), {}, {}};
  auto& m = result.model;
  auto& params = m.model->params();
  const std::size_t n = vocab.size();
  std::vector<std::size_t> class_ids(n);
  std::iota(class_ids.begin(), class_ids.end(), 0);
  Rng data_rng = Rng::from_state(m.data_rng);

  for (std::size_t epoch = 1; epoch <= cfg.training.epochs; ++epoch) {
    std::vector<std::size_t> order(train_set.samples.size());
    std::iota(order.begin(), order.end(), 0);
    data_rng.shuffle(order.begin(), order.end());
    double sum_loss = 0, sum_ce = 0, sum_con = 0;
    ConfusionMatrix train_cm(n + 1);
    for (std::size_t start = 0; start < order.size(); start += cfg.training.batch_size) {
      const std::size_t count = std::min(cfg.training.batch_size, order.size() - start);
      std::vector<Tensor<float>> grads;
      for (std::size_t k = 0; k < count; ++k) {
        const auto sample = augment(train_set.samples[order[start + k]], data_rng, cfg.training.augment);
        Tape<float> tape;
        ParamBinding<float> bind(tape, params);
        const auto out = run(m, tape, bind, sample.image, sample.mask.pixels);
        auto ce = cross_entropy_loss(out.logits, sample.mask.pixels, cfg.loss);
        if (out.first_pass) ce = ops::scale(ops::add(ce, cross_entropy_loss(*out.first_pass, sample.mask.pixels, cfg.loss)), 0.5);
        Var<float> total = ce;
        double con_value = 0.0;
        if (out.class_embeddings && n >= 2) {
          const auto con = contrastive_loss(*out.class_embeddings, class_ids, pairs, n, cfg.loss);
          con_value = con.value()[0];
          total = total_loss(ce, con, cfg.loss);
        }
        const double loss_value = total.value()[0];
        if (!std::isfinite(loss_value)) {
          fail(ErrorCode::non_finite, "loss diverged at epoch " + std::to_string(epoch) + " on sample " + sample.id +
                                          " (ce " + std::to_string(ce.value()[0]) + ")");
        }
        tape.backward(total);
        auto g = bind.gradients();
        if (grads.empty()) {
          grads = std::move(g);
        } else {
          for (std::size_t p = 0; p < grads.size(); ++p) {
            for (std::size_t i = 0; i < grads[p].size(); ++i) grads[p][i] += g[p][i];
          }
        }
        sum_loss += loss_value;
        sum_ce += ce.value()[0];
        sum_con += con_value;
        std::vector<std::uint8_t> labels;
        std::vector<float> confidence;
        decode_logits(out.logits.value(), labels, confidence);
        train_cm.add(labels, sample.mask.pixels);
      }
      const float inv = 1.0f / static_cast<float>(count);
      for (auto& g : grads) {
        for (auto& v : g.data()) v *= inv;
      }
      m.optimizer->step(params, grads);
    }
    const double batches = static_cast<double>(order.size());
    m.epoch = epoch;
    m.data_rng = data_rng.state();
    const auto val = evaluate(m, val_set);
    EpochMetrics e{epoch, sum_loss / batches, sum_ce / batches, sum_con / batches, compute_iou(train_cm).miou,
                   val.iou.miou, val.ap.map};
    result.history.push_back(e);
    if (on_epoch) on_epoch(e);
  }
  m.data_rng = data_rng.state();
  result.metrics_csv = metrics_csv(result.history);
  return result;
}

Prediction predict(const TrainedModel& m, const RgbImage& image) {
  Tape<float> tape;
  ParamBinding<float> bind(tape, m.model->params(), false);
  const auto out = run(m, tape, bind, image);
  Prediction p;
  decode_logits(out.logits.value(), p.labels, p.confidence);
  return p;
}

EvalReport evaluate(const TrainedModel& m, const Dataset& data) {
  check_vocab(m.vocab, data);
  const std::size_t k = m.vocab.size() + 1;
  ConfusionMatrix cm(k);
  ApAccumulator ap(k);
  for (const auto& s : data.samples) {
    const auto p = predict(m, s.image);
    cm.add(p.labels, s.mask.pixels);
    ap.add(p.labels, p.confidence, s.mask.pixels, s.mask.height, s.mask.width);
  }
  EvalReport r;
  r.class_names = class_names(m.vocab);
  r.iou = compute_iou(cm);
  r.ap = ap.finalize();
  r.confusion = cm.counts();
  r.samples = data.samples.size();
  return r;
}

EvalReport evaluate_oracle(const Dataset& data) {
  const auto vocab = data.config.vocabulary();
  const std::size_t k = vocab.size() + 1;
  ConfusionMatrix cm(k);
  ApAccumulator ap(k);
  for (const auto& s : data.samples) {
    cm.add(s.mask.pixels, s.mask.pixels);
    ap.add(s.mask.pixels, std::vector<float>(s.mask.pixels.size(), 1.0f), s.mask.pixels, s.mask.height, s.mask.width);
  }
  EvalReport r;
  r.class_names = class_names(vocab);
  r.iou = compute_iou(cm);
  r.ap = ap.finalize();
  r.confusion = cm.counts();
  r.samples = data.samples.size();
  return r;
}

Checkpoint to_checkpoint(const TrainedModel& m) {
  Checkpoint c;
  c.meta["format"] = "ctxseg";
  c.meta["config"] = m.config.to_json();
  c.meta["labels"] = m.vocab.labels();
  c.meta["epoch"] = m.epoch;
  c.meta["optimizer_steps"] = m.optimizer->steps();
  c.meta["rng"] = {{"seed", m.data_rng.seed}, {"stream", m.data_rng.stream}, {"counter", m.data_rng.counter}};
  c.tensors.push_back({"label_embeddings", m.model->spec().label_embeddings});
  const auto& params = m.model->params();
  for (std::size_t i = 0; i < params.size(); ++i) c.tensors.push_back({"param/" + params.name(i), params.value(i)});
  for (std::size_t i = 0; i < params.size(); ++i) {
    c.tensors.push_back({"adam.m/" + params.name(i), m.optimizer->first_moments()[i]});
    c.tensors.push_back({"adam.v/" + params.name(i), m.optimizer->second_moments()[i]});
  }
  return c;
}

namespace {

template <typename T>
const Tensor<T>& tensor_of(const Checkpoint& c, const std::string& name, const Shape& shape) {
  const auto* t = c.find(name);
  if (!t) fail(ErrorCode::parse, "checkpoint lacks tensor '" + name + "'");
  const auto* v = std::get_if<Tensor<T>>(&t->value);
  if (!v) fail(ErrorCode::parse, "checkpoint tensor '" + name + "' has the wrong dtype");
  if (!shape.empty() && v->shape() != shape) {
    fail(ErrorCode::parse, "checkpoint tensor '" + name + "' is " + shape_str(v->shape()) + ", expected " + shape_str(shape));
  }
  return *v;
}

}  // namespace

TrainedModel from_checkpoint(const Checkpoint& c) {
  try {
    if (c.meta.at("format") != "ctxseg") fail(ErrorCode::parse, "checkpoint metadata format");
    auto cfg = PipelineConfig::from_json(nlohmann::json::parse(c.meta.at("config").dump()));
    cfg.validate();
    const LabelVocabulary vocab(c.meta.at("labels").get<std::vector<std::string>>());
    const auto& emb = tensor_of<double>(c, "label_embeddings", {});
    if (emb.rank() != 2 || emb.dim(0) != vocab.size()) fail(ErrorCode::parse, "checkpoint label embeddings extents");
    auto m = build(cfg, vocab, emb);
    auto& params = m.model->params();
    std::size_t expected = 1 + 3 * params.size();
    if (c.tensors.size() != expected) fail(ErrorCode::parse, "checkpoint tensor count does not match the model");
    std::vector<Tensor<float>> first, second;
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& shape = params.value(i).shape();
      params.value(i) = tensor_of<float>(c, "param/" + params.name(i), shape);
      first.push_back(tensor_of<float>(c, "adam.m/" + params.name(i), shape));
      second.push_back(tensor_of<float>(c, "adam.v/" + params.name(i), shape));
    }
    m.optimizer->restore(c.meta.at("optimizer_steps").get<std::uint64_t>(), std::move(first), std::move(second));
    const auto& rng = c.meta.at("rng");
    m.data_rng = {rng.at("seed").get<std::uint64_t>(), rng.at("stream").get<std::uint64_t>(),
                  rng.at("counter").get<std::uint64_t>()};
    m.epoch = c.meta.at("epoch").get<std::size_t>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::parse, std::string("checkpoint metadata: ") + e.what());
  }
}

AblationResult ablate(const PipelineConfig& cfg, const std::function<void(Variant, const EpochMetrics&)>& on_epoch) {
  cfg.validate();
  const auto train_set = read_split(cfg.resolve(cfg.data.train));
  const auto val_set = read_split(cfg.resolve(cfg.data.val));
  AblationResult r;
  for (const auto v : kAllVariants) {
    auto c = cfg;
    c.variant = v;
    auto t = train(c, train_set, val_set, [&](const EpochMetrics& e) {
      if (on_epoch) on_epoch(v, e);
    });
    r.rows.push_back({v, evaluate(t.model, val_set), t.metrics_csv});
  }
  r.csv = "variant,miou,map,delta_miou,delta_map\n";
  r.text = "Variant      mIoU     mAP      dmIoU    dmAP\n";
  for (std::size_t i = 0; i < r.rows.size(); ++i) {
    const auto& row = r.rows[i];
    const double dm = i ? row.report.iou.miou - r.rows[i - 1].report.iou.miou : 0.0;
    const double da = i ? row.report.ap.map - r.rows[i - 1].report.ap.map : 0.0;
    r.csv += to_string(row.variant) + "," + fixed6(row.report.iou.miou) + "," + fixed6(row.report.ap.map) + "," +
             fixed6(dm) + "," + fixed6(da) + "\n";
    char line[128];
    std::snprintf(line, sizeof line, "%-10s %7.2f %7.2f %+8.2f %+8.2f\n", to_string(row.variant).c_str(),
                  100 * row.report.iou.miou, 100 * row.report.ap.map, 100 * dm, 100 * da);
    r.text += line;
  }
  return r;
}

std::array<std::uint8_t, 3> class_color(std::size_t mask_id) {
  static constexpr std::array<std::array<std::uint8_t, 3>, 12> kPalette{{{0, 0, 0},
                                                                         {230, 25, 75},
                                                                         {60, 180, 75},
                                                                         {255, 225, 25},
                                                                         {0, 130, 200},
                                                                         {245, 130, 48},
                                                                         {145, 30, 180},
                                                                         {70, 240, 240},
                                                                         {240, 50, 230},
                                                                         {210, 245, 60},
                                                                         {250, 190, 212},
                                                                         {0, 128, 128}}};
  if (mask_id == 0) return kPalette[0];
  return kPalette[1 + (mask_id - 1) % (kPalette.size() - 1)];
}

InferenceResult infer(const TrainedModel& m, const RgbImage& image) {
  Tape<float> tape;
  ParamBinding<float> bind(tape, m.model->params(), false);
  const auto out = run(m, tape, bind, image);
  Prediction p;
  decode_logits(out.logits.value(), p.labels, p.confidence);
  InferenceResult r;
  r.overlay = image;
  r.heatmap = {image.height, image.width, std::vector<std::uint8_t>(p.labels.size())};
  for (std::size_t i = 0; i < p.labels.size(); ++i) {
    const auto c = class_color(p.labels[i]);
    for (std::size_t ch = 0; ch < 3; ++ch) {
      r.overlay.pixels[i * 3 + ch] = static_cast<std::uint8_t>((image.pixels[i * 3 + ch] + c[ch] + 1) / 2);
    }
    r.heatmap.pixels[i] = static_cast<std::uint8_t>(std::lround(255.0 * static_cast<double>(p.confidence[i])));
  }
  if (m.config.infer.dump_graph) {
    const auto graph = out.graph ? *out.graph
                                 : build_scene_graph(p.labels, image.height, image.width, m.vocab.size(), m.config.graph);
    nlohmann::ordered_json j;
    auto& nodes = j["nodes"] = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
      const auto& node = graph.nodes[i];
      nodes.push_back({{"id", i}, {"class", m.vocab.label(node.class_id)}, {"centroid", {node.cx, node.cy}},
                       {"area", node.area}});
    }
    auto& edges = j["edges"] = nlohmann::ordered_json::array();
    for (const auto& [a, b] : graph.edges) edges.push_back({a, b});
    r.graph_json = j.dump(2) + "\n";
  }
  if (m.config.infer.dump_attention && out.fusion) {
    const auto& w = out.fusion->weights.value();  // [cells x heads x n]
    const std::size_t heads = w.dim(1), n = w.dim(2);
    const std::size_t fw = m.config.backbone.output_width();
    r.attention_csv = "row,col,head,label,weight\n";
    for (std::size_t cell = 0; cell < w.dim(0); ++cell) {
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t l = 0; l < n; ++l) {
          r.attention_csv += std::to_string(cell / fw) + "," + std::to_string(cell % fw) + "," + std::to_string(h) +
                             "," + m.vocab.label(l) + "," + fixed6(w[(cell * heads + h) * n + l]) + "\n";
        }
      }
    }
  }
  return r;
}

}  // namespace ctxseg
