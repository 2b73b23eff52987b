#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "ctxseg/error.hpp"
#include "ctxseg/pipeline.hpp"

namespace ctxseg {
namespace {

struct Series {
  std::string name;
  std::vector<double> values;
  const char* color;
};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

std::string chart(const std::string& title, const std::string& y_label, const std::vector<double>& xs,
                  const std::vector<Series>& series, double y_lo, double y_hi) {
  constexpr double W = 480, H = 300, L = 60, R = 130, T = 30, B = 40;
  double x_lo = xs.empty() ? 0.0 : xs.front(), x_hi = xs.empty() ? 1.0 : xs.back();
  if (x_hi <= x_lo) x_hi = x_lo + 1.0;
  if (y_hi <= y_lo) y_hi = y_lo + 1.0;
  const auto px = [&](double x) { return L + (x - x_lo) / (x_hi - x_lo) * (W - L - R); };
  const auto py = [&](double y) { return H - B - (y - y_lo) / (y_hi - y_lo) * (H - T - B); };

  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"480\" height=\"300\" viewBox=\"0 0 480 300\">\n";
  s += "<rect width=\"480\" height=\"300\" fill=\"white\"/>\n";
  s += "<text x=\"" + num(L) + "\" y=\"18\" font-family=\"sans-serif\" font-size=\"13\">" + title + "</text>\n";
  s += "<g stroke=\"black\" stroke-width=\"1\">\n";
  s += "<line x1=\"" + num(L) + "\" y1=\"" + num(H - B) + "\" x2=\"" + num(W - R) + "\" y2=\"" + num(H - B) + "\"/>\n";
  s += "<line x1=\"" + num(L) + "\" y1=\"" + num(T) + "\" x2=\"" + num(L) + "\" y2=\"" + num(H - B) + "\"/>\n";
  s += "</g>\n<g font-family=\"sans-serif\" font-size=\"10\">\n";
  for (int i = 0; i <= 4; ++i) {
    const double y = y_lo + (y_hi - y_lo) * i / 4.0;
    s += "<line x1=\"" + num(L - 4) + "\" y1=\"" + num(py(y)) + "\" x2=\"" + num(L) + "\" y2=\"" + num(py(y)) +
         "\" stroke=\"black\"/>\n";
    s += "<text x=\"" + num(L - 6) + "\" y=\"" + num(py(y) + 3) + "\" text-anchor=\"end\">" + tick(y) + "</text>\n";
  }
  const int x_ticks = static_cast<int>(std::min<double>(5, std::max<double>(1, x_hi - x_lo)));
  for (int i = 0; i <= x_ticks; ++i) {
    const double x = x_lo + (x_hi - x_lo) * i / x_ticks;
    s += "<line x1=\"" + num(px(x)) + "\" y1=\"" + num(H - B) + "\" x2=\"" + num(px(x)) + "\" y2=\"" +
         num(H - B + 4) + "\" stroke=\"black\"/>\n";
    s += "<text x=\"" + num(px(x)) + "\" y=\"" + num(H - B + 15) + "\" text-anchor=\"middle\">" + tick(x) + "</text>\n";
  }
  s += "<text x=\"" + num((L + W - R) / 2) + "\" y=\"" + num(H - 6) + "\" text-anchor=\"middle\">epoch</text>\n";
  s += "<text x=\"14\" y=\"" + num((T + H - B) / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 14 " +
       num((T + H - B) / 2) + ")\">" + y_label + "</text>\n</g>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& ser = series[k];
    if (!ser.values.empty()) {
      s += "<polyline fill=\"none\" stroke=\"" + std::string(ser.color) + "\" stroke-width=\"1.5\" points=\"";
      for (std::size_t i = 0; i < ser.values.size(); ++i) {
        s += (i ? " " : "") + num(px(xs[i])) + "," + num(py(ser.values[i]));
      }
      s += "\"/>\n";
    }
    const double ly = T + 10 + 16.0 * static_cast<double>(k);
    s += "<line x1=\"" + num(W - R + 10) + "\" y1=\"" + num(ly) + "\" x2=\"" + num(W - R + 28) + "\" y2=\"" + num(ly) +
         "\" stroke=\"" + ser.color + "\" stroke-width=\"2\"/>\n";
    s += "<text x=\"" + num(W - R + 32) + "\" y=\"" + num(ly + 3) +
         "\" font-family=\"sans-serif\" font-size=\"10\">" + ser.name + "</text>\n";
  }
  s += "</svg>\n";
  return s;
}

}  // namespace

Plots plot_metrics(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) {
    fail(ErrorCode::parse, "metrics CSV header must be '" + std::string(kMetricsHeader) + "'");
  }
  std::vector<std::vector<double>> cols(7);
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    std::vector<double> v;
    std::size_t start = 0;
    while (true) {
      const auto comma = line.find(',', start);
      const auto field = line.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
      std::size_t used = 0;
      double x = 0.0;
      try {
        x = std::stod(field, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (field.empty() || used != field.size() || !std::isfinite(x)) {
        fail(ErrorCode::parse, "metrics CSV row " + std::to_string(row) + ": bad number '" + field + "'");
      }
      v.push_back(x);
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (v.size() != 7) fail(ErrorCode::parse, "metrics CSV row " + std::to_string(row) + ": expected 7 fields");
    for (std::size_t c = 0; c < 7; ++c) cols[c].push_back(v[c]);
  }
  double lo = 0.0, hi = 1.0;
  if (!cols[1].empty()) {
    hi = 0.0;
    for (std::size_t c = 1; c <= 3; ++c) hi = std::max(hi, *std::max_element(cols[c].begin(), cols[c].end()));
    hi = hi > 0 ? hi * 1.05 : 1.0;
  }
  Plots p;
  p.loss_svg = chart("Training loss", "loss", cols[0],
                     {{"loss", cols[1], "#1f77b4"}, {"loss_ce", cols[2], "#ff7f0e"}, {"loss_contrastive", cols[3], "#2ca02c"}},
                     lo, hi);
  p.miou_svg = chart("Segmentation quality", "score", cols[0],
                     {{"train_miou", cols[4], "#1f77b4"}, {"val_miou", cols[5], "#d62728"}, {"val_map", cols[6], "#9467bd"}},
                     0.0, 1.0);
  return p;
}

}  // namespace ctxseg
