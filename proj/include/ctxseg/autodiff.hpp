#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ctxseg/tensor.hpp"

namespace ctxseg {

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape. Nodes are appended in creation order, which is a
/// topological order, so backward is a single reverse sweep.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value);
  Var<T> variable(Tensor<T> value);

  /// Append an op result. `backward` receives the node id and must push the
  /// node's gradient into its inputs via accumulate_grad.
  Var<T> record(const char* op, Tensor<T> value, const std::vector<Var<T>>& inputs,
                BackwardFn backward);

  void backward(const Var<T>& loss);

  /// Gradient of the last backward pass; zeros if the node was unreachable.
  Tensor<T> grad(const Var<T>& v) const;

  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const Tensor<T>& grad_of(std::size_t id) const { return nodes_[id].grad; }
  /// Mutable gradient buffer of an input, zero-initialised on first use.
  Tensor<T>& accumulate_grad(std::size_t id);

  std::size_t size() const noexcept { return nodes_.size(); }
  std::string_view op_name(std::size_t id) const { return nodes_[id].op; }
  const std::string& scope_of(std::size_t id) const { return nodes_[id].scope; }
  /// Number of recorded ops whose scope path contains `name` as a component.
  std::size_t count_in_scope(std::string_view name) const;

  void reset();

  /// RAII scope label attached to every op recorded while it is alive.
  class Scope {
   public:
    Scope(Tape& tape, std::string name);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape& tape_;
    std::size_t previous_length_;
  };

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    const char* op = "";
    std::string scope;
    BackwardFn backward;
  };

  std::deque<Node> nodes_;  // deque: appends keep value() references stable
  std::string scope_;
  bool backward_done_ = false;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(id_);
}

template <typename T>
bool Var<T>::requires_grad() const {
  return tape_->requires_grad(id_);
}

/// Ordered, named parameter tensors of a model.
template <typename T>
class ParameterSet {
 public:
  std::size_t add(std::string name, Tensor<T> init);

  std::size_t size() const noexcept { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  Tensor<T>& value(std::size_t i) { return values_.at(i); }
  const Tensor<T>& value(std::size_t i) const { return values_.at(i); }
  std::optional<std::size_t> find(std::string_view name) const;
  std::size_t index_of(std::string_view name) const;
  std::size_t scalar_count() const;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> values_;
};

/// Places parameters on a tape for one forward pass, lazily, and collects
/// their gradients afterwards. Overrides substitute an arbitrary Var for a
/// parameter (used by gradient checks and tests with hand-set weights).
template <typename T>
class ParamBinding {
 public:
  ParamBinding(Tape<T>& tape, const ParameterSet<T>& params, bool trainable = true);

  Var<T> operator()(std::size_t param);
  Tape<T>& tape() const { return tape_; }
  const ParameterSet<T>& params() const { return params_; }
  void freeze(std::size_t param) { frozen_.at(param) = true; }

  /// One gradient per parameter (zeros for parameters that were never used).
  std::vector<Tensor<T>> gradients() const;

 private:
  Tape<T>& tape_;
  const ParameterSet<T>& params_;
  bool trainable_;
  std::vector<std::optional<Var<T>>> bound_;
  std::vector<bool> frozen_;
};

}  // namespace ctxseg
