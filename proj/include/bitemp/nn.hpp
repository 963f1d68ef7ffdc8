#pragma once

#include <string>

#include "bitemp/ops.hpp"
#include "bitemp/params.hpp"

// Small layer building blocks bound to named entries of a ParamStore.
namespace bitemp::nn {

template <typename T>
struct Linear {
  ag::Var<T> weight;  // {in, out}
  ag::Var<T> bias;    // {out}

  Linear() = default;
  Linear(ParamStore<T>& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
         InitSpec init = {Init::xavier_uniform}) {
    weight = ps.create(name + ".w", {in, out}, init, rng);
    bias = ps.create(name + ".b", {out}, {Init::zeros}, rng);
  }

  ag::Var<T> operator()(ag::Tape<T>& tape, const ag::Var<T>& x) const { return ag::linear(tape, x, weight, bias); }
};

template <typename T>
struct LayerNorm {
  ag::Var<T> gamma, beta;

  LayerNorm() = default;
  LayerNorm(ParamStore<T>& ps, const std::string& name, std::size_t dim, Rng& rng) {
    gamma = ps.create(name + ".gamma", {dim}, {Init::ones}, rng);
    beta = ps.create(name + ".beta", {dim}, {Init::zeros}, rng);
  }

  ag::Var<T> operator()(ag::Tape<T>& tape, const ag::Var<T>& x) const { return ag::layer_norm(tape, x, gamma, beta); }
};

template <typename T>
struct MultiHeadAttention {
  Linear<T> q, k, v, o;
  std::size_t heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore<T>& ps, const std::string& name, std::size_t dim, std::size_t n_heads, Rng& rng)
      : heads(n_heads) {
    if (n_heads == 0 || dim % n_heads != 0)
      throw ConfigError(name + ": dimension " + std::to_string(dim) + " is not divisible by " +
                        std::to_string(n_heads) + " heads");
    q = Linear<T>(ps, name + ".q", dim, dim, rng);
    k = Linear<T>(ps, name + ".k", dim, dim, rng);
    v = Linear<T>(ps, name + ".v", dim, dim, rng);
    o = Linear<T>(ps, name + ".o", dim, dim, rng);
  }

  // queries {B, nq, D}; context {B, nk, D}
  ag::Var<T> operator()(ag::Tape<T>& tape, const ag::Var<T>& queries, const ag::Var<T>& context, std::size_t batch,
                        bool causal) const {
    auto a = ag::attention(tape, q(tape, queries), k(tape, context), v(tape, context), batch, heads, causal);
    return o(tape, a);
  }
};

template <typename T>
struct FeedForward {
  Linear<T> up, down;

  FeedForward() = default;
  FeedForward(ParamStore<T>& ps, const std::string& name, std::size_t dim, std::size_t hidden, Rng& rng) {
    up = Linear<T>(ps, name + ".up", dim, hidden, rng, {Init::he_uniform});
    down = Linear<T>(ps, name + ".down", hidden, dim, rng);
  }

  ag::Var<T> operator()(ag::Tape<T>& tape, const ag::Var<T>& x) const {
    return down(tape, ag::relu(tape, up(tape, x)));
  }
};

// Post-norm residual: LN(x + f(x)).
template <typename T, typename F>
ag::Var<T> residual_norm(ag::Tape<T>& tape, const LayerNorm<T>& ln, const ag::Var<T>& x, F&& sublayer) {
  return ln(tape, ag::add(tape, x, sublayer(x)));
}

}  // namespace bitemp::nn
