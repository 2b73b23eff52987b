#include "ctxseg/autodiff.hpp"

#include <sstream>

namespace ctxseg {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (const std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  if (!value.all_finite()) fail(ErrorCode::non_finite, "constant holds non-finite values");
  Node node;
  node.value = std::move(value);
  node.op = "constant";
  node.scope = scope_;
  nodes_.push_back(std::move(node));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::variable(Tensor<T> value) {
  if (!value.all_finite()) fail(ErrorCode::non_finite, "variable holds non-finite values");
  Node node;
  node.value = std::move(value);
  node.requires_grad = true;
  node.op = "variable";
  node.scope = scope_;
  nodes_.push_back(std::move(node));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::record(const char* op, Tensor<T> value, const std::vector<Var<T>>& inputs,
                       BackwardFn backward) {
  if (backward_done_) fail(ErrorCode::state, "tape already consumed by backward; reset() first");
  if (!value.all_finite()) {
    fail(ErrorCode::non_finite, std::string("non-finite output from ") + op);
  }
  bool needs = false;
  for (const auto& in : inputs) {
    if (&in.tape() != this) fail(ErrorCode::invalid_argument, std::string(op) + ": inputs on different tapes");
    needs = needs || nodes_[in.id()].requires_grad;
  }
  Node node;
  node.value = std::move(value);
  node.requires_grad = needs;
  node.op = op;
  node.scope = scope_;
  if (needs) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Tensor<T>& Tape<T>::accumulate_grad(std::size_t id) {
  Node& node = nodes_[id];
  if (node.grad.empty()) node.grad = Tensor<T>(node.value.shape());
  return node.grad;
}

template <typename T>
void Tape<T>::backward(const Var<T>& loss) {
  if (&loss.tape() != this) fail(ErrorCode::invalid_argument, "backward: loss from another tape");
  if (backward_done_) fail(ErrorCode::state, "backward called twice without reset");
  if (loss.value().size() != 1) {
    fail(ErrorCode::shape_mismatch, "backward needs a scalar loss, got " + shape_str(loss.shape()));
  }
  backward_done_ = true;
  if (!nodes_[loss.id()].requires_grad) return;
  accumulate_grad(loss.id())[0] = T(1);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.requires_grad || node.grad.empty() || !node.backward) continue;
    node.backward(*this, i);
  }
  for (std::size_t i = 0; i <= loss.id(); ++i) {
    if (!nodes_[i].grad.empty() && !nodes_[i].grad.all_finite()) {
      fail(ErrorCode::non_finite, std::string("non-finite gradient at ") + nodes_[i].op);
    }
  }
}

template <typename T>
Tensor<T> Tape<T>::grad(const Var<T>& v) const {
  const Node& node = nodes_.at(v.id());
  if (node.grad.empty()) return Tensor<T>(node.value.shape());
  return node.grad;
}

template <typename T>
std::size_t Tape<T>::count_in_scope(std::string_view name) const {
  std::size_t n = 0;
  for (const Node& node : nodes_) {
    std::string_view s = node.scope;
    while (!s.empty()) {
      const auto slash = s.find('/');
      if (s.substr(0, slash) == name) {
        ++n;
        break;
      }
      if (slash == std::string_view::npos) break;
      s.remove_prefix(slash + 1);
    }
  }
  return n;
}

template <typename T>
void Tape<T>::reset() {
  nodes_.clear();
  scope_.clear();
  backward_done_ = false;
}

template <typename T>
Tape<T>::Scope::Scope(Tape& tape, std::string name) : tape_(tape), previous_length_(tape.scope_.size()) {
  if (!tape_.scope_.empty()) tape_.scope_ += '/';
  tape_.scope_ += name;
}

template <typename T>
Tape<T>::Scope::~Scope() {
  tape_.scope_.resize(previous_length_);
}

template <typename T>
std::size_t ParameterSet<T>::add(std::string name, Tensor<T> init) {
  if (find(name)) fail(ErrorCode::invalid_argument, "duplicate parameter name " + name);
  names_.push_back(std::move(name));
  values_.push_back(std::move(init));
  return values_.size() - 1;
}

template <typename T>
std::optional<std::size_t> ParameterSet<T>::find(std::string_view name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return i;
  }
  return std::nullopt;
}

template <typename T>
std::size_t ParameterSet<T>::index_of(std::string_view name) const {
  const auto i = find(name);
  if (!i) fail(ErrorCode::invalid_argument, "no parameter named " + std::string(name));
  return *i;
}

template <typename T>
std::size_t ParameterSet<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

template <typename T>
ParamBinding<T>::ParamBinding(Tape<T>& tape, const ParameterSet<T>& params, bool trainable)
    : tape_(tape), params_(params), trainable_(trainable), bound_(params.size()),
      frozen_(params.size(), false) {}

template <typename T>
Var<T> ParamBinding<T>::operator()(std::size_t param) {
  auto& slot = bound_.at(param);
  if (!slot) {
    const auto& value = params_.value(param);
    slot = (trainable_ && !frozen_[param]) ? tape_.variable(value) : tape_.constant(value);
  }
  return *slot;
}

template <typename T>
std::vector<Tensor<T>> ParamBinding<T>::gradients() const {
  std::vector<Tensor<T>> out;
  out.reserve(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (bound_[i]) {
      out.push_back(tape_.grad(*bound_[i]));
    } else {
      out.emplace_back(params_.value(i).shape());
    }
  }
  return out;
}

template class Tape<float>;
template class Tape<double>;
template class ParameterSet<float>;
template class ParameterSet<double>;
template class ParamBinding<float>;
template class ParamBinding<double>;

}  // namespace ctxseg
