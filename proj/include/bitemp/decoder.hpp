#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "bitemp/nn.hpp"
#include "bitemp/vocab.hpp"

namespace bitemp {

struct DecoderConfig {
  std::size_t vocab_size = 0;
  std::size_t dim = 128;
  std::size_t heads = 4;
  std::size_t unimodal_layers = 2;
  std::size_t multimodal_layers = 2;
  std::size_t ffn_dim = 256;
  std::size_t max_len = 40;
  bool tie_embeddings = true;

  void validate() const {
    if (vocab_size <= static_cast<std::size_t>(Vocabulary::num_specials))
      throw ConfigError("decoder: vocabulary has no regular tokens");
    if (dim == 0 || heads == 0 || dim % heads != 0) throw ConfigError("decoder: dim not divisible by heads");
    if (max_len < 3) throw ConfigError("decoder: max_len must be at least 3");
    if (ffn_dim == 0) throw ConfigError("decoder: zero feed-forward width");
  }
};

template <typename T>
struct DecoderState {
  ag::Var<T> s_seq;  // {B, n, D}
  ag::Var<T> s_end;  // {B, D}, row of s_seq at each sequence's last real token
};

// Sinusoid table {max_len, dim}: even dims sin, odd dims cos.
template <typename T>
Tensor<T> sinusoidal_table(std::size_t max_len, std::size_t dim) {
  Tensor<T> t({max_len, dim});
  for (std::size_t p = 0; p < max_len; ++p)
    for (std::size_t i = 0; i < dim; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(dim));
      t.at(p, i) = static_cast<T>(std::sin(static_cast<double>(p) * freq));
      if (i + 1 < dim) t.at(p, i + 1) = static_cast<T>(std::cos(static_cast<double>(p) * freq));
    }
  return t;
}

template <typename T>
class Decoder {
 public:
  struct UniLayer {
    nn::MultiHeadAttention<T> self_attn;
    nn::LayerNorm<T> ln1, ln2;
    nn::FeedForward<T> ffn;
  };
  struct MultiLayer {
    nn::MultiHeadAttention<T> self_attn, cross_attn;
    nn::LayerNorm<T> ln1, ln2, ln3;
    nn::FeedForward<T> ffn;
  };

  Decoder() = default;
  Decoder(ParamStore<T>& ps, const DecoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t D = cfg_.dim;
    embedding_ = ps.create("dec.embed", {cfg_.vocab_size, D}, {Init::normal, 1.0 / std::sqrt(double(D))}, rng);
    positions_ = sinusoidal_table<T>(cfg_.max_len, D);
    for (std::size_t l = 0; l < cfg_.unimodal_layers; ++l) {
      const std::string n = "dec.uni." + std::to_string(l);
      UniLayer u;
      u.self_attn = nn::MultiHeadAttention<T>(ps, n + ".self", D, cfg_.heads, rng);
      u.ln1 = nn::LayerNorm<T>(ps, n + ".ln1", D, rng);
      u.ln2 = nn::LayerNorm<T>(ps, n + ".ln2", D, rng);
      u.ffn = nn::FeedForward<T>(ps, n + ".ffn", D, cfg_.ffn_dim, rng);
      uni_.push_back(std::move(u));
    }
    for (std::size_t l = 0; l < cfg_.multimodal_layers; ++l) {
      const std::string n = "dec.multi." + std::to_string(l);
      MultiLayer m;
      m.self_attn = nn::MultiHeadAttention<T>(ps, n + ".self", D, cfg_.heads, rng);
      m.cross_attn = nn::MultiHeadAttention<T>(ps, n + ".cross", D, cfg_.heads, rng);
      m.ln1 = nn::LayerNorm<T>(ps, n + ".ln1", D, rng);
      m.ln2 = nn::LayerNorm<T>(ps, n + ".ln2", D, rng);
      m.ln3 = nn::LayerNorm<T>(ps, n + ".ln3", D, rng);
      m.ffn = nn::FeedForward<T>(ps, n + ".ffn", D, cfg_.ffn_dim, rng);
      multi_.push_back(std::move(m));
    }
    if (!cfg_.tie_embeddings) out_weight_ = ps.create("dec.out.w", {D, cfg_.vocab_size}, {Init::xavier_uniform}, rng);
    out_bias_ = ps.create("dec.out.b", {cfg_.vocab_size}, {Init::zeros}, rng);
  }

  const DecoderConfig& config() const { return cfg_; }
  const ag::Var<T>& embedding_table() const { return embedding_; }
  // Null in tied mode: the projection reads the embedding table directly.
  const ag::Var<T>& output_weight() const { return out_weight_; }
  const Tensor<T>& positional_table() const { return positions_; }

  // ids: row-major {batch, n}. Row i of each sequence = emb(id_i) + pos(i).
  ag::Var<T> embed_tokens(ag::Tape<T>& tape, const std::vector<int>& ids, std::size_t batch) const {
    require_shape(batch > 0 && ids.size() % batch == 0, "embed_tokens: ids not divisible by batch");
    const std::size_t n = ids.size() / batch;
    if (n == 0 || n > cfg_.max_len)
      throw ShapeError("embed_tokens: sequence length " + std::to_string(n) + " outside [1, " +
                       std::to_string(cfg_.max_len) + "]");
    auto e = ag::embedding(tape, embedding_, ids, {batch, n});
    Tensor<T> pos({n, cfg_.dim});
    std::copy_n(positions_.data.begin(), n * cfg_.dim, pos.data.begin());
    return ag::add_tiled(tape, e, tape.constant(std::move(pos)));
  }

  // lengths[b] = number of real (non-pad) tokens of sequence b.
  DecoderState<T> unimodal_forward(ag::Tape<T>& tape, const ag::Var<T>& e, const std::vector<std::size_t>& lengths) const {
    const auto& s = e->value.shape;
    require_shape(s.size() == 3 && s[2] == cfg_.dim, "unimodal_forward: expected {B,n,D}, got " + shape_str(s));
    const std::size_t b = s[0], n = s[1];
    require_shape(lengths.size() == b, "unimodal_forward: one length per sequence required");
    std::vector<std::size_t> last(b);
    for (std::size_t i = 0; i < b; ++i) {
      if (lengths[i] == 0 || lengths[i] > n)
        throw ValidationError("unimodal_forward: sequence length " + std::to_string(lengths[i]) + " outside [1, " +
                              std::to_string(n) + "]");
      last[i] = i * n + lengths[i] - 1;
    }
    ag::Var<T> x = e;
    for (const auto& layer : uni_) {
      x = nn::residual_norm(tape, layer.ln1, x,
                            [&](const ag::Var<T>& in) { return layer.self_attn(tape, in, in, b, true); });
      x = nn::residual_norm(tape, layer.ln2, x, [&](const ag::Var<T>& in) { return layer.ffn(tape, in); });
    }
    return {x, ag::gather_rows(tape, x, last)};
  }

  // s_seq {B, n, D}, e_cap {B, hw, D} -> logits {B, n, |V|}
  ag::Var<T> multimodal_forward(ag::Tape<T>& tape, const ag::Var<T>& s_seq, const ag::Var<T>& e_cap) const {
    const auto& s = s_seq->value.shape;
    const auto& c = e_cap->value.shape;
    require_shape(s.size() == 3 && c.size() == 3 && s[0] == c[0] && s[2] == cfg_.dim && c[2] == cfg_.dim,
                  "multimodal_forward: " + shape_str(s) + " vs image tokens " + shape_str(c));
    const std::size_t b = s[0];
    ag::Var<T> x = s_seq;
    for (const auto& layer : multi_) {
      x = nn::residual_norm(tape, layer.ln1, x,
                            [&](const ag::Var<T>& in) { return layer.self_attn(tape, in, in, b, true); });
      x = nn::residual_norm(tape, layer.ln2, x,
                            [&](const ag::Var<T>& in) { return layer.cross_attn(tape, in, e_cap, b, false); });
      x = nn::residual_norm(tape, layer.ln3, x, [&](const ag::Var<T>& in) { return layer.ffn(tape, in); });
    }
    ag::Var<T> logits = cfg_.tie_embeddings ? ag::matmul_nt(tape, x, embedding_) : ag::matmul(tape, x, out_weight_);
    return ag::add_tiled(tape, logits, out_bias_);
  }

  // Greedy decoding for every grid in e_cap {B, hw, D}. Returns body token ids
  // (no start/end); a sequence stops at end or when it reaches max_len tokens
  // including the start token.
  std::vector<std::vector<int>> generate(const Tensor<T>& e_cap, std::size_t max_len = 0) const {
    if (max_len == 0 || max_len > cfg_.max_len) max_len = cfg_.max_len;
    const std::size_t b = e_cap.shape.at(0);
    std::vector<std::vector<int>> seqs(b, std::vector<int>{Vocabulary::start});
    std::vector<bool> done(b, false);
    ag::Tape<T> tape;
    tape.set_grad_enabled(false);
    auto cap = tape.constant(e_cap);
    for (std::size_t t = 1; t < max_len; ++t) {
      std::vector<int> ids;
      ids.reserve(b * t);
      for (const auto& s : seqs) ids.insert(ids.end(), s.begin(), s.end());
      auto e = embed_tokens(tape, ids, b);
      auto st = unimodal_forward(tape, e, std::vector<std::size_t>(b, t));
      auto logits = multimodal_forward(tape, st.s_seq, cap);
      const std::size_t V = cfg_.vocab_size;
      bool all_done = true;
      for (std::size_t i = 0; i < b; ++i) {
        if (done[i]) {
          seqs[i].push_back(Vocabulary::pad);
          continue;
        }
        const T* row = logits->value.data.data() + ((i * t) + t - 1) * V;
        int best = 0;
        for (std::size_t j = 1; j < V; ++j)
          if (row[j] > row[best]) best = static_cast<int>(j);
        seqs[i].push_back(best);
        if (best == Vocabulary::end) done[i] = true;
        else all_done = false;
      }
      tape.clear();
      if (all_done) break;
    }
    std::vector<std::vector<int>> out(b);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 1; j < seqs[i].size(); ++j) {
        if (seqs[i][j] == Vocabulary::end || seqs[i][j] == Vocabulary::pad) break;
        out[i].push_back(seqs[i][j]);
      }
    return out;
  }

 private:
  DecoderConfig cfg_;
  ag::Var<T> embedding_;
  Tensor<T> positions_;
  std::vector<UniLayer> uni_;
  std::vector<MultiLayer> multi_;
  ag::Var<T> out_weight_;
  ag::Var<T> out_bias_;
};

}  // namespace bitemp
