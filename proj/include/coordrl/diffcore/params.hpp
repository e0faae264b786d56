#pragma once

#include <map>
#include <stdexcept>
#include <string>

#include "coordrl/diffcore/graph.hpp"
#include "coordrl/diffcore/tensor.hpp"

namespace coordrl {

/// Named trainable tensors. Ordered by name so iteration (and therefore
/// serialization and optimizer updates) is deterministic.
class ParamSet {
 public:
  using Map = std::map<std::string, Tensor>;

  void add(const std::string& name, Tensor value) {
    if (!params_.emplace(name, std::move(value)).second)
      throw std::invalid_argument("duplicate parameter name: " + name);
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  const Tensor& operator[](const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
  }
  Tensor& operator[](const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
  }

  std::size_t size() const { return params_.size(); }
  std::size_t num_values() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.size();
    return n;
  }

  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }

  /// Same names and shapes, all zeros.
  ParamSet zeros_like() const {
    ParamSet out;
    for (const auto& [name, t] : params_) out.add(name, Tensor(t.shape()));
    return out;
  }

  bool same_layout(const ParamSet& other) const {
    if (params_.size() != other.params_.size()) return false;
    for (auto a = params_.begin(), b = other.params_.begin(); a != params_.end(); ++a, ++b)
      if (a->first != b->first || a->second.shape() != b->second.shape()) return false;
    return true;
  }

  friend bool operator==(const ParamSet&, const ParamSet&) = default;

 private:
  Map params_;
};

/// Parameter nodes of one graph, keyed like the ParamSet they came from.
class BoundParams {
 public:
  /// `trainable = false` binds the values as constants (inference only).
  BoundParams(ad::Graph& graph, const ParamSet& params, bool trainable = true) : graph_(&graph) {
    for (const auto& [name, t] : params)
      vars_.emplace(name, trainable ? graph.parameter(t) : graph.constant(t));
  }

  ad::Var operator[](const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
  }

  bool contains(const std::string& name) const { return vars_.count(name) != 0; }
  ad::Graph& graph() const { return *graph_; }

  /// Gradients after Graph::backward, shaped like the bound ParamSet.
  ParamSet gradients() const {
    ParamSet out;
    for (const auto& [name, v] : vars_) out.add(name, graph_->grad(v));
    return out;
  }

 private:
  ad::Graph* graph_;
  std::map<std::string, ad::Var> vars_;
};

}  // namespace coordrl
