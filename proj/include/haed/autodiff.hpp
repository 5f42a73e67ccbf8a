#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "haed/tensor.hpp"

namespace haed {

/// Parameter groups that receive separate learning rates.
enum class ParamGroup : std::uint8_t { enc_dec, main };

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  ParamGroup group = ParamGroup::enc_dec;
  bool trainable = true;
};

/// Ordered, name-unique collection of parameters. Addresses are stable.
template <typename T>
class ParamStore {
 public:
  Parameter<T>& add(const std::string& name, Tensor<T> value, ParamGroup group) {
    require(!index_.contains(name), "DuplicateParameter", "duplicate parameter name: " + name);
    auto p = std::make_unique<Parameter<T>>();
    p->name = name;
    p->grad = Tensor<T>(value.shape());
    p->value = std::move(value);
    p->group = group;
    index_.emplace(name, params_.size());
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Parameter<T>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }
  const Parameter<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }
  Parameter<T>& get(const std::string& name) {
    auto* p = find(name);
    require(p != nullptr, "NotFound", "no parameter named " + name);
    return *p;
  }

  std::size_t size() const noexcept { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return *params_[i]; }

  void zero_grad() {
    for (auto& p : params_) p->grad.fill(T{0});
  }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }

  template <typename Fn>
  void for_each(Fn&& fn) {
    for (auto& p : params_) fn(*p);
  }
  template <typename Fn>
  void for_each(Fn&& fn) const {
    for (const auto& p : params_) fn(static_cast<const Parameter<T>&>(*p));
  }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Model component a tape node is attributed to, for timing breakdowns.
enum class Component : std::uint8_t { other = 0, encoder, main, decoder };
inline constexpr std::size_t kComponentCount = 4;

template <typename T>
class Graph;

/// Handle to a node on a Graph.
template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return graph->value(id); }
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

/// Reverse-mode tape. A Graph built with record=false evaluates the same
/// forward computation without storing any backward closures.
template <typename T>
class Graph {
 public:
  using Backward = std::function<void(const Tensor<T>& out_grad)>;

  explicit Graph(bool record = true) : record_(record) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const noexcept { return record_; }

  Var<T> constant(Tensor<T> value) {
    Node n;
    n.owned = std::move(value);
    n.tag = tag_;
    return push(std::move(n));
  }

  /// Leaf bound to an external parameter; gradients accumulate into p.grad.
  Var<T> parameter(Parameter<T>& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return {this, it->second};
    Node n;
    n.external = &p.value;
    n.external_grad = (record_ && p.trainable) ? &p.grad : nullptr;
    n.needs_grad = n.external_grad != nullptr;
    n.tag = tag_;
    Var<T> v = push(std::move(n));
    param_nodes_.emplace(&p, v.id);
    return v;
  }

  /// Appends an op result. `make_backward` is only invoked when some input
  /// requires a gradient.
  template <typename MakeBackward>
  Var<T> op(Tensor<T> value, std::initializer_list<Var<T>> inputs, MakeBackward&& make_backward) {
    return op(std::move(value), std::span<const Var<T>>(inputs.begin(), inputs.size()),
              std::forward<MakeBackward>(make_backward));
  }

  template <typename MakeBackward>
  Var<T> op(Tensor<T> value, std::span<const Var<T>> inputs, MakeBackward&& make_backward) {
    Node n;
    n.owned = std::move(value);
    n.tag = tag_;
    if (record_) {
      for (const auto& in : inputs) n.needs_grad = n.needs_grad || nodes_[in.id].needs_grad;
      if (n.needs_grad) n.backward = make_backward();
    }
    return push(std::move(n));
  }

  const Tensor<T>& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.owned;
  }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  /// Gradient buffer of a node, allocated lazily (zero-filled).
  Tensor<T>& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.external_grad) return *n.external_grad;
    if (n.grad.size() != value(id).size()) n.grad = Tensor<T>(value(id).shape());
    return n.grad;
  }

  /// Seeds d(loss)/d(loss) = 1 for a single-element node and propagates.
  void backward(Var<T> loss) {
    require(record_, "InvalidState", "backward on a non-recording graph");
    require(value(loss.id).size() == 1, "DimensionMismatch", "backward requires a scalar loss");
    if (!nodes_[loss.id].needs_grad) return;
    grad(loss.id)[0] += T{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      if (timing_) {
        const auto t0 = std::chrono::steady_clock::now();
        n.backward(n.grad);
        backward_seconds_[static_cast<std::size_t>(n.tag)] +=
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      } else {
        n.backward(n.grad);
      }
    }
  }

  Component tag() const noexcept { return tag_; }
  void set_tag(Component c) noexcept { tag_ = c; }

  /// Enables per-component accounting of backward time.
  void enable_backward_timing(bool on) noexcept { timing_ = on; }
  double backward_seconds(Component c) const {
    return backward_seconds_[static_cast<std::size_t>(c)];
  }

  std::size_t node_count() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* external = nullptr;
    Tensor<T>* external_grad = nullptr;
    Tensor<T> grad;
    Backward backward;
    bool needs_grad = false;
    Component tag = Component::other;
  };

  Var<T> push(Node n) {
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  bool record_;
  bool timing_ = false;
  Component tag_ = Component::other;
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter<T>*, std::size_t> param_nodes_;
  double backward_seconds_[kComponentCount] = {};
};

/// Attributes nodes created in scope to a component.
template <typename T>
class ComponentScope {
 public:
  ComponentScope(Graph<T>& g, Component c) : g_(g), prev_(g.tag()) { g.set_tag(c); }
  ~ComponentScope() { g_.set_tag(prev_); }
  ComponentScope(const ComponentScope&) = delete;
  ComponentScope& operator=(const ComponentScope&) = delete;

 private:
  Graph<T>& g_;
  Component prev_;
};

}  // namespace haed
