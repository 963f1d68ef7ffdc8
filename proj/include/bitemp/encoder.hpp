#pragma once

#include <string>
#include <utility>
#include <vector>

#include "bitemp/nn.hpp"

namespace bitemp {

enum class BackboneFinetune { frozen, last_two_stages, full };

inline const char* to_string(BackboneFinetune f) {
  switch (f) {
    case BackboneFinetune::frozen: return "frozen";
    case BackboneFinetune::last_two_stages: return "last2";
    case BackboneFinetune::full: return "full";
  }
  return "full";
}

inline BackboneFinetune parse_finetune(const std::string& s) {
  if (s == "frozen") return BackboneFinetune::frozen;
  if (s == "last2" || s == "last_two_stages") return BackboneFinetune::last_two_stages;
  if (s == "full") return BackboneFinetune::full;
  throw ConfigError("unknown backbone finetune policy '" + s + "' (expected frozen, last2 or full)");
}

struct EncoderConfig {
  std::size_t image_size = 64;
  std::vector<std::size_t> backbone_channels{16, 32, 64};  // one stride-2 3x3 conv per stage
  std::size_t dim = 128;
  std::size_t heads = 4;
  std::size_t hsa_layers = 2;
  std::size_t ffn_dim = 256;
  std::size_t res_width = 64;
  std::size_t pool_heads = 4;

  std::size_t stages() const { return backbone_channels.size(); }
  std::size_t grid() const { return image_size >> stages(); }
  std::size_t tokens() const { return grid() * grid(); }

  void validate() const {
    if (backbone_channels.empty()) throw ConfigError("encoder: backbone needs at least one stage");
    if (image_size == 0 || image_size % (std::size_t{1} << stages()) != 0)
      throw ConfigError("encoder: image size " + std::to_string(image_size) + " not divisible by 2^" +
                        std::to_string(stages()));
    if (dim == 0 || heads == 0 || dim % heads != 0)
      throw ConfigError("encoder: dim " + std::to_string(dim) + " not divisible by " + std::to_string(heads) +
                        " heads");
    if (pool_heads == 0 || dim % pool_heads != 0)
      throw ConfigError("encoder: dim not divisible by pooling heads");
    if (ffn_dim == 0 || res_width == 0) throw ConfigError("encoder: zero-width layer");
  }
};

template <typename T>
struct EncoderOutput {
  ag::Var<T> e_cap;  // {B, h*w, D}
  ag::Var<T> e_con;  // {B, D}
};

// Siamese bi-temporal encoder. Both images share every weight; the two token
// streams only meet in the cross-attention of the HSA block and in the fusion.
template <typename T>
class Encoder {
 public:
  struct HsaLayer {
    nn::MultiHeadAttention<T> self_attn, cross_attn;
    nn::LayerNorm<T> ln1, ln2, ln3;
    nn::FeedForward<T> ffn;
  };

  Encoder() = default;
  Encoder(ParamStore<T>& ps, const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    std::size_t cin = 3;
    for (std::size_t s = 0; s < cfg_.stages(); ++s) {
      const std::size_t cout = cfg_.backbone_channels[s];
      const std::string n = "enc.backbone." + std::to_string(s);
      stages_.push_back({ps.create(n + ".w", {9 * cin, cout}, {Init::he_uniform}, rng),
                         ps.create(n + ".b", {cout}, {Init::zeros}, rng)});
      cin = cout;
    }
    proj_ = nn::Linear<T>(ps, "enc.proj", cin, cfg_.dim, rng);
    pos_ = ps.create("enc.pos", {cfg_.tokens(), cfg_.dim}, {Init::normal, 0.02}, rng);
    for (std::size_t l = 0; l < cfg_.hsa_layers; ++l) {
      const std::string n = "enc.hsa." + std::to_string(l);
      HsaLayer layer;
      layer.self_attn = nn::MultiHeadAttention<T>(ps, n + ".self", cfg_.dim, cfg_.heads, rng);
      layer.cross_attn = nn::MultiHeadAttention<T>(ps, n + ".cross", cfg_.dim, cfg_.heads, rng);
      layer.ln1 = nn::LayerNorm<T>(ps, n + ".ln1", cfg_.dim, rng);
      layer.ln2 = nn::LayerNorm<T>(ps, n + ".ln2", cfg_.dim, rng);
      layer.ln3 = nn::LayerNorm<T>(ps, n + ".ln3", cfg_.dim, rng);
      layer.ffn = nn::FeedForward<T>(ps, n + ".ffn", cfg_.dim, cfg_.ffn_dim, rng);
      hsa_.push_back(std::move(layer));
    }
    fuse_ = nn::Linear<T>(ps, "enc.fuse", 2 * cfg_.dim, cfg_.dim, rng);
    res_in_ = nn::Linear<T>(ps, "enc.res.in", cfg_.dim, cfg_.res_width, rng, {Init::he_uniform});
    res_mid_w_ = ps.create("enc.res.mid.w", {9 * cfg_.res_width, cfg_.res_width}, {Init::he_uniform}, rng);
    res_mid_b_ = ps.create("enc.res.mid.b", {cfg_.res_width}, {Init::zeros}, rng);
    res_out_ = nn::Linear<T>(ps, "enc.res.out", cfg_.res_width, cfg_.dim, rng);
    pool_query_ = ps.create("enc.pool.query", {1, cfg_.dim}, {Init::normal, 1.0 / std::sqrt(double(cfg_.dim))}, rng);
    pool_ = nn::MultiHeadAttention<T>(ps, "enc.pool.attn", cfg_.dim, cfg_.pool_heads, rng);
  }

  const EncoderConfig& config() const { return cfg_; }

  // Parameter-name prefixes of the backbone stages, earliest first.
  std::vector<std::string> stage_prefixes() const {
    std::vector<std::string> out;
    for (std::size_t s = 0; s < cfg_.stages(); ++s) out.push_back("enc.backbone." + std::to_string(s) + ".");
    return out;
  }

  void apply_finetune(ParamStore<T>& ps, BackboneFinetune policy) const {
    const auto prefixes = stage_prefixes();
    for (std::size_t s = 0; s < prefixes.size(); ++s) {
      bool on = true;
      if (policy == BackboneFinetune::frozen) on = false;
      if (policy == BackboneFinetune::last_two_stages) on = s + 2 >= prefixes.size();
      ps.set_trainable(prefixes[s], on);
    }
  }

  // images {B, H, W, 3} -> features {B, h*w, D}
  ag::Var<T> backbone_forward(ag::Tape<T>& tape, const ag::Var<T>& images) const {
    const auto& s = images->value.shape;
    if (s.size() != 4 || s[1] != cfg_.image_size || s[2] != cfg_.image_size || s[3] != 3)
      throw ShapeError("backbone: expected {B," + std::to_string(cfg_.image_size) + "," +
                       std::to_string(cfg_.image_size) + ",3} images, got " + shape_str(s));
    ag::Var<T> x = images;
    for (const auto& st : stages_) x = ag::relu(tape, ag::conv2d(tape, x, st.first, st.second, 3, 2, 1));
    x = proj_(tape, x);
    return ag::reshape(tape, x, {s[0], cfg_.tokens(), cfg_.dim});
  }

  ag::Var<T> add_positional(ag::Tape<T>& tape, const ag::Var<T>& f) const {
    require_shape(f->value.cols() == cfg_.dim && f->value.rows() % cfg_.tokens() == 0,
                  "add_positional: feature grid " + shape_str(f->value.shape) + " does not match positional grid");
    return ag::add_tiled(tape, f, pos_);
  }

  // Returns (I1, I2). Streams are stacked so both use the same weights in a
  // single pass; the cross-attention context is the other half of the stack.
  std::pair<ag::Var<T>, ag::Var<T>> hierarchical_self_attention(ag::Tape<T>& tape, const ag::Var<T>& f1,
                                                                 const ag::Var<T>& f2) const {
    require_shape(f1->value.shape == f2->value.shape && f1->value.shape.size() == 3,
                  "hsa: stream shapes differ: " + shape_str(f1->value.shape) + " vs " + shape_str(f2->value.shape));
    const std::size_t b = f1->value.shape[0];
    auto x = ag::concat_rows(tape, f1, f2);
    for (const auto& layer : hsa_) {
      x = nn::residual_norm(tape, layer.ln1, x, [&](const ag::Var<T>& in) {
        return layer.self_attn(tape, in, in, 2 * b, false);
      });
      auto other = ag::concat_rows(tape, ag::slice_rows(tape, x, b, b), ag::slice_rows(tape, x, 0, b));
      x = nn::residual_norm(tape, layer.ln2, x, [&](const ag::Var<T>& in) {
        return layer.cross_attn(tape, in, other, 2 * b, false);
      });
      x = nn::residual_norm(tape, layer.ln3, x, [&](const ag::Var<T>& in) { return layer.ffn(tape, in); });
    }
    return {ag::slice_rows(tape, x, 0, b), ag::slice_rows(tape, x, b, b)};
  }

  // [I1; I2] + cos(I1, I2), the cosine broadcast over all 2D channels.
  ag::Var<T> fuse(ag::Tape<T>& tape, const ag::Var<T>& i1, const ag::Var<T>& i2) const {
    return ag::add_col_broadcast(tape, ag::concat_cols(tape, i1, i2), ag::row_cosine(tape, i1, i2));
  }

  // C = conv1x1(F_fus); E_cap = ReLU(ResBlock(C) + C)
  ag::Var<T> project_residual(ag::Tape<T>& tape, const ag::Var<T>& f_fus) const {
    const auto& s = f_fus->value.shape;
    require_shape(s.size() == 3 && s[1] == cfg_.tokens() && s[2] == 2 * cfg_.dim,
                  "project_residual: expected {B," + std::to_string(cfg_.tokens()) + "," +
                      std::to_string(2 * cfg_.dim) + "}, got " + shape_str(s));
    const std::size_t b = s[0], g = cfg_.grid();
    auto c = fuse_(tape, f_fus);
    auto r = ag::relu(tape, res_in_(tape, c));
    r = ag::reshape(tape, r, {b, g, g, cfg_.res_width});
    r = ag::relu(tape, ag::conv2d(tape, r, res_mid_w_, res_mid_b_, 3, 1, 1));
    r = ag::reshape(tape, r, {b, cfg_.tokens(), cfg_.res_width});
    r = res_out_(tape, r);
    return ag::relu(tape, ag::add(tape, r, c));
  }

  // Single learned query attending over the h*w tokens: {B, hw, D} -> {B, D}.
  ag::Var<T> attentive_pool(ag::Tape<T>& tape, const ag::Var<T>& e_cap) const {
    const auto& s = e_cap->value.shape;
    require_shape(s.size() == 3 && s[2] == cfg_.dim, "attentive_pool: bad grid " + shape_str(s));
    const std::size_t b = s[0];
    auto q = ag::tile(tape, pool_query_, b);  // {B, 1, D}
    auto out = pool_(tape, q, e_cap, b, false);
    return ag::reshape(tape, out, {b, cfg_.dim});
  }

  EncoderOutput<T> encode(ag::Tape<T>& tape, const ag::Var<T>& before, const ag::Var<T>& after) const {
    require_shape(before->value.shape == after->value.shape,
                  "encode: before/after shapes differ: " + shape_str(before->value.shape) + " vs " +
                      shape_str(after->value.shape));
    const std::size_t b = before->value.shape.at(0);
    auto f = backbone_forward(tape, ag::concat_rows(tape, before, after));
    f = add_positional(tape, f);
    auto [i1, i2] = hierarchical_self_attention(tape, ag::slice_rows(tape, f, 0, b), ag::slice_rows(tape, f, b, b));
    auto e_cap = project_residual(tape, fuse(tape, i1, i2));
    return {e_cap, attentive_pool(tape, e_cap)};
  }

  EncoderOutput<T> encode(ag::Tape<T>& tape, const Tensor<T>& before, const Tensor<T>& after) const {
    return encode(tape, tape.constant(before), tape.constant(after));
  }

 private:
  EncoderConfig cfg_;
  std::vector<std::pair<ag::Var<T>, ag::Var<T>>> stages_;
  nn::Linear<T> proj_;
  ag::Var<T> pos_;
  std::vector<HsaLayer> hsa_;
  nn::Linear<T> fuse_, res_in_, res_out_;
  ag::Var<T> res_mid_w_, res_mid_b_;
  ag::Var<T> pool_query_;
  nn::MultiHeadAttention<T> pool_;
};

}  // namespace bitemp
