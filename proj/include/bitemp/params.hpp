#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "bitemp/autograd.hpp"
#include "bitemp/rng.hpp"

namespace bitemp {

enum class Init { zeros, ones, xavier_uniform, he_uniform, normal };

struct InitSpec {
  Init kind = Init::zeros;
  double std = 0.02;  // Init::normal only
};

template <typename T>
struct Parameter {
  std::string name;
  ag::Var<T> var;
  bool trainable = true;
};

// Named, insertion-ordered parameter collection. Initial values are drawn in
// double precision so float and double models built from the same seed agree.
template <typename T>
class ParamStore {
 public:
  ag::Var<T> create(const std::string& name, Shape shape, InitSpec init, Rng& rng) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name " + name);
    Tensor<T> t(shape);
    const std::size_t fan_out = shape.empty() ? 1 : shape.back();
    const std::size_t fan_in = fan_out == 0 ? 0 : t.size() / fan_out;
    switch (init.kind) {
      case Init::zeros:
        break;
      case Init::ones:
        t.fill(T(1));
        break;
      case Init::xavier_uniform: {
        const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        for (auto& v : t.data) v = static_cast<T>(rng.uniform(-a, a));
        break;
      }
      case Init::he_uniform: {
        const double a = std::sqrt(6.0 / static_cast<double>(fan_in));
        for (auto& v : t.data) v = static_cast<T>(rng.uniform(-a, a));
        break;
      }
      case Init::normal:
        for (auto& v : t.data) v = static_cast<T>(rng.normal() * init.std);
        break;
    }
    index_[name] = params_.size();
    params_.push_back({name, ag::make_var(std::move(t), true), true});
    return params_.back().var;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const ag::Var<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter " + name);
    return params_[it->second].var;
  }

  std::vector<Parameter<T>>& all() { return params_; }
  const std::vector<Parameter<T>>& all() const { return params_; }

  // Freezes or unfreezes every parameter whose name starts with prefix.
  void set_trainable(const std::string& prefix, bool on) {
    for (auto& p : params_)
      if (p.name.rfind(prefix, 0) == 0) {
        p.trainable = on;
        p.var->requires_grad = on;
        if (!on) p.var->grad = Tensor<T>();
      }
  }

  void zero_grad() {
    for (auto& p : params_)
      if (p.var->has_grad()) p.var->grad.fill(T(0));
  }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.var->value.size();
    return n;
  }

  // Copies values (not gradients) from another store with identical layout.
  template <typename U>
  void copy_values_from(const ParamStore<U>& other) {
    for (const auto& op : other.all()) {
      const auto& dst = get(op.name);
      if (dst->value.shape != op.var->value.shape)
        throw ShapeError("parameter " + op.name + " shape mismatch on copy");
      dst->value = op.var->value.template cast<T>();
    }
  }

 private:
  std::vector<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace bitemp
