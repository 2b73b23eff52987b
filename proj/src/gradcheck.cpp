#include "ctxseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ctxseg/rng.hpp"

namespace ctxseg {
namespace {

double evaluate(const ParameterSet<double>& params, const std::vector<Tensor<double>>& inputs,
                const ScalarFunction& f) {
  Tape<double> tape;
  ParamBinding<double> bind(tape, params, false);
  std::vector<Var<double>> vars;
  vars.reserve(inputs.size());
  for (const auto& in : inputs) vars.push_back(tape.constant(in));
  return f(bind, vars).value().item();
}

std::vector<std::size_t> pick(std::size_t n, std::size_t samples, Rng& rng) {
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  if (samples == 0 || samples >= n) return all;
  rng.shuffle(all.begin(), all.end());
  all.resize(samples);
  std::sort(all.begin(), all.end());
  return all;
}

}  // namespace

GradCheckReport check_gradients(const ParameterSet<double>& params,
                                const std::vector<Tensor<double>>& inputs, const ScalarFunction& f,
                                const GradCheckOptions& options) {
  Tape<double> tape;
  ParamBinding<double> bind(tape, params, true);
  std::vector<Var<double>> vars;
  for (const auto& in : inputs) vars.push_back(tape.variable(in));
  const auto loss = f(bind, vars);
  tape.backward(loss);
  const auto param_grads = bind.gradients();
  std::vector<Tensor<double>> input_grads;
  for (const auto& v : vars) input_grads.push_back(tape.grad(v));

  GradCheckReport report;
  Rng rng(options.seed, 0x6772616463686bULL);
  const double h = options.step;
  auto record = [&](double analytic, double numeric, const std::string& where) {
    const double abs_err = std::abs(analytic - numeric);
    const double denom = std::max({std::abs(analytic), std::abs(numeric), options.denominator_floor});
    const double rel = abs_err / denom;
    report.max_absolute_error = std::max(report.max_absolute_error, abs_err);
    if (report.checked == 0 || rel > report.max_relative_error) {
      report.max_relative_error = rel;
      report.worst = where + " analytic=" + std::to_string(analytic) + " numeric=" + std::to_string(numeric);
    }
    ++report.checked;
  };

  ParameterSet<double> work = params;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& value = work.value(p);
    for (const auto j : pick(value.size(), options.samples_per_tensor, rng)) {
      const double saved = value[j];
      value[j] = saved + h;
      const double up = evaluate(work, inputs, f);
      value[j] = saved - h;
      const double down = evaluate(work, inputs, f);
      value[j] = saved;
      record(param_grads[p][j], (up - down) / (2.0 * h), params.name(p) + "[" + std::to_string(j) + "]");
    }
  }
  std::vector<Tensor<double>> work_inputs = inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto& value = work_inputs[i];
    for (const auto j : pick(value.size(), options.samples_per_tensor, rng)) {
      const double saved = value[j];
      value[j] = saved + h;
      const double up = evaluate(params, work_inputs, f);
      value[j] = saved - h;
      const double down = evaluate(params, work_inputs, f);
      value[j] = saved;
      record(input_grads[i][j], (up - down) / (2.0 * h),
             "input" + std::to_string(i) + "[" + std::to_string(j) + "]");
    }
  }
  return report;
}

}  // namespace ctxseg
