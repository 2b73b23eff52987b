#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "ctxseg/error.hpp"
#include "ctxseg/pipeline.hpp"

using namespace ctxseg;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool config_required) {
  auto* opt = cmd->add_option("--config", c.config, "JSON configuration file");
  if (config_required) opt->required();
  cmd->add_option("--seed", c.seed, "Seed (overrides the config)");
  cmd->add_option("--out", c.out, "Output directory")->required();
}

PipelineConfig load_config(const Common& c) {
  PipelineConfig cfg = c.config.empty() ? PipelineConfig{} : PipelineConfig::load(c.config);
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  return cfg;
}

std::string join(const std::string& dir, const std::string& name) { return (std::filesystem::path(dir) / name).string(); }

void progress(const std::string& tag, const EpochMetrics& e) {
  std::fprintf(stderr, "%s epoch %zu loss %.4f ce %.4f con %.4f train_miou %.4f val_miou %.4f val_map %.4f\n",
               tag.c_str(), e.epoch, e.loss, e.loss_ce, e.loss_contrastive, e.train_miou, e.val_miou, e.val_map);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Context-aware semantic segmentation at desk scale"};
  app.require_subcommand(1);
  Common gen, tr, ev, ab, inf, pl;
  std::string ev_checkpoint, ev_split, inf_checkpoint, inf_image, pl_metrics;
  bool ev_oracle = false, quiet = false;
  app.add_flag("--quiet", quiet, "Suppress per-epoch progress on stderr");

  auto* c_gen = app.add_subcommand("gen-data", "Generate the synthetic train/val splits");
  add_common(c_gen, gen, true);
  auto* c_train = app.add_subcommand("train", "Train one variant");
  add_common(c_train, tr, true);
  auto* c_eval = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
  add_common(c_eval, ev, false);
  c_eval->add_option("--checkpoint", ev_checkpoint, "CSEG checkpoint");
  c_eval->add_option("--split", ev_split, "Split directory (default: config data.val)");
  c_eval->add_flag("--oracle", ev_oracle, "Score the ground truth against itself");
  auto* c_ablate = app.add_subcommand("ablate", "Train and evaluate all four variants");
  add_common(c_ablate, ab, true);
  auto* c_infer = app.add_subcommand("infer", "Segment one image");
  add_common(c_infer, inf, false);
  c_infer->add_option("--checkpoint", inf_checkpoint, "CSEG checkpoint")->required();
  c_infer->add_option("--image", inf_image, "Binary PPM image")->required();
  auto* c_plot = app.add_subcommand("plot", "Render SVG charts from a metrics CSV");
  add_common(c_plot, pl, false);
  c_plot->add_option("--metrics", pl_metrics, "metrics.csv written by train")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    for (auto& ch : msg) {
      if (ch == '\n') ch = ' ';
    }
    std::fprintf(stderr, "error: usage: %s\n", msg.c_str());
    return 2;
  }

  try {
    if (c_gen->parsed()) {
      const auto cfg = load_config(gen);
      generate_data(cfg, gen.out);
    } else if (c_train->parsed()) {
      const auto cfg = load_config(tr);
      const auto r = train(cfg, [&](const EpochMetrics& e) {
        if (!quiet) progress(to_string(cfg.variant), e);
      });
      save_checkpoint(join(tr.out, "checkpoint.cseg"), to_checkpoint(r.model));
      write_file(join(tr.out, "metrics.csv"), r.metrics_csv);
      write_file(join(tr.out, "config.json"), cfg.to_json().dump(2) + "\n");
    } else if (c_eval->parsed()) {
      EvalReport report;
      if (ev_oracle) {
        const auto cfg = load_config(ev);
        report = evaluate_oracle(read_split(ev_split.empty() ? cfg.resolve(cfg.data.val) : ev_split));
      } else {
        if (ev_checkpoint.empty()) fail(ErrorCode::config, "eval needs --checkpoint (or --oracle)");
        const auto model = from_checkpoint(load_checkpoint(ev_checkpoint));
        std::string split = ev_split;
        if (split.empty()) {
          const auto cfg = load_config(ev);
          split = cfg.resolve(cfg.data.val);
        }
        report = evaluate(model, read_split(split));
      }
      write_file(join(ev.out, "report.json"), report.to_json());
      write_file(join(ev.out, "report.csv"), report.to_csv());
    } else if (c_ablate->parsed()) {
      const auto cfg = load_config(ab);
      const auto r = ablate(cfg, [&](Variant v, const EpochMetrics& e) {
        if (!quiet) progress(to_string(v), e);
      });
      write_file(join(ab.out, "ablation.csv"), r.csv);
      write_file(join(ab.out, "ablation.txt"), r.text);
      for (const auto& row : r.rows) {
        const auto dir = join(ab.out, to_string(row.variant).substr(to_string(row.variant)[0] == '+' ? 1 : 0));
        write_file(join(dir, "metrics.csv"), row.metrics_csv);
        write_file(join(dir, "report.json"), row.report.to_json());
        write_file(join(dir, "report.csv"), row.report.to_csv());
      }
      std::fputs(r.text.c_str(), stdout);
    } else if (c_infer->parsed()) {
      if (!inf.config.empty()) load_config(inf);  // validated for consistency only
      const auto model = from_checkpoint(load_checkpoint(inf_checkpoint));
      const auto r = infer(model, read_ppm(inf_image));
      write_ppm(join(inf.out, "overlay.ppm"), r.overlay);
      write_pgm(join(inf.out, "heatmap.pgm"), r.heatmap);
      if (!r.graph_json.empty()) write_file(join(inf.out, "graph.json"), r.graph_json);
      if (!r.attention_csv.empty()) write_file(join(inf.out, "attention.csv"), r.attention_csv);
    } else if (c_plot->parsed()) {
      if (!pl.config.empty()) load_config(pl);
      const auto p = plot_metrics(read_file(pl_metrics));
      write_file(join(pl.out, "loss.svg"), p.loss_svg);
      write_file(join(pl.out, "miou.svg"), p.miou_svg);
    }
  } catch (const Error& e) {
    std::string msg = e.what();
    for (auto& ch : msg) {
      if (ch == '\n' || ch == '\r') ch = ' ';
    }
    std::fprintf(stderr, "error: %s: %s\n", std::string(to_string(e.code())).c_str(), msg.c_str());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: internal: %s\n", e.what());
    return 1;
  }
  return 0;
}
