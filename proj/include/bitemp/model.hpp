#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "bitemp/dataset.hpp"
#include "bitemp/decoder.hpp"
#include "bitemp/encoder.hpp"

namespace bitemp {

struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;  // vocab_size is filled from the vocabulary

  void validate() const {
    encoder.validate();
    decoder.validate();
    if (encoder.dim != decoder.dim)
      throw ConfigError("encoder dim " + std::to_string(encoder.dim) + " differs from decoder dim " +
                        std::to_string(decoder.dim));
  }
};

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"image_size", c.image_size}, {"backbone_channels", c.backbone_channels},
       {"dim", c.dim},               {"heads", c.heads},
       {"hsa_layers", c.hsa_layers}, {"ffn_dim", c.ffn_dim},
       {"res_width", c.res_width},   {"pool_heads", c.pool_heads}};
}
inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
  EncoderConfig d;
  c.image_size = j.value("image_size", d.image_size);
  c.backbone_channels = j.value("backbone_channels", d.backbone_channels);
  c.dim = j.value("dim", d.dim);
  c.heads = j.value("heads", d.heads);
  c.hsa_layers = j.value("hsa_layers", d.hsa_layers);
  c.ffn_dim = j.value("ffn_dim", d.ffn_dim);
  c.res_width = j.value("res_width", d.res_width);
  c.pool_heads = j.value("pool_heads", d.pool_heads);
}
inline void to_json(nlohmann::json& j, const DecoderConfig& c) {
  j = {{"vocab_size", c.vocab_size},
       {"dim", c.dim},
       {"heads", c.heads},
       {"unimodal_layers", c.unimodal_layers},
       {"multimodal_layers", c.multimodal_layers},
       {"ffn_dim", c.ffn_dim},
       {"max_len", c.max_len},
       {"tie_embeddings", c.tie_embeddings}};
}
inline void from_json(const nlohmann::json& j, DecoderConfig& c) {
  DecoderConfig d;
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.dim = j.value("dim", d.dim);
  c.heads = j.value("heads", d.heads);
  c.unimodal_layers = j.value("unimodal_layers", d.unimodal_layers);
  c.multimodal_layers = j.value("multimodal_layers", d.multimodal_layers);
  c.ffn_dim = j.value("ffn_dim", d.ffn_dim);
  c.max_len = j.value("max_len", d.max_len);
  c.tie_embeddings = j.value("tie_embeddings", d.tie_embeddings);
}
inline void to_json(nlohmann::json& j, const ModelConfig& c) { j = {{"encoder", c.encoder}, {"decoder", c.decoder}}; }
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.encoder = j.value("encoder", EncoderConfig{});
  c.decoder = j.value("decoder", DecoderConfig{});
}

// Parameters, encoder, decoder and the vocabulary they were built for. The
// modules hold handles into the store, so a model is never copied; use
// copy_values_from to move weights between precisions.
template <typename T>
class Model {
 public:
  Model(ModelConfig cfg, Vocabulary vocab, std::uint64_t seed) : cfg_(std::move(cfg)), vocab_(std::move(vocab)) {
    cfg_.decoder.vocab_size = vocab_.size();
    cfg_.validate();
    Rng rng(mix_seed(seed, 0x1417));
    encoder_ = Encoder<T>(params_, cfg_.encoder, rng);
    decoder_ = Decoder<T>(params_, cfg_.decoder, rng);
  }
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  const Vocabulary& vocab() const { return vocab_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  const Encoder<T>& encoder() const { return encoder_; }
  const Decoder<T>& decoder() const { return decoder_; }

  void apply_finetune(BackboneFinetune policy) { encoder_.apply_finetune(params_, policy); }

  template <typename U>
  void copy_values_from(const Model<U>& other) {
    params_.copy_values_from(other.params());
  }

 private:
  ModelConfig cfg_;
  Vocabulary vocab_;
  ParamStore<T> params_;
  Encoder<T> encoder_;
  Decoder<T> decoder_;
};

// {B, H, W, 3} stacks of the before and after images.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> image_tensors(const std::vector<const ImagePair*>& pairs) {
  if (pairs.empty()) throw ShapeError("image_tensors: empty batch");
  const std::size_t h = pairs.front()->before.height, w = pairs.front()->before.width;
  Tensor<T> before({pairs.size(), h, w, 3}), after({pairs.size(), h, w, 3});
  const std::size_t per = h * w * 3;
  for (std::size_t b = 0; b < pairs.size(); ++b) {
    const auto& p = *pairs[b];
    if (p.before.height != h || p.before.width != w || p.after.height != h || p.after.width != w)
      throw ShapeError("image_tensors: pair " + std::to_string(p.pair_id) + " has a different image size");
    std::copy(p.before.pixels.begin(), p.before.pixels.end(), before.data.begin() + static_cast<std::ptrdiff_t>(b * per));
    std::copy(p.after.pixels.begin(), p.after.pixels.end(), after.data.begin() + static_cast<std::ptrdiff_t>(b * per));
  }
  return {std::move(before), std::move(after)};
}

// Token ids {B, n} padded to the longest caption, and the number of real
// tokens (start..end) per caption.
struct TokenBatch {
  std::vector<int> ids;
  std::vector<std::size_t> lengths;
  std::size_t batch = 0, len = 0;
};

inline TokenBatch encode_captions(const Vocabulary& vocab, const std::vector<std::string>& texts, std::size_t max_len) {
  TokenBatch tb;
  tb.batch = texts.size();
  std::vector<std::vector<int>> rows;
  for (const auto& t : texts) {
    auto ids = vocab.encode(t, max_len);
    const std::size_t n = static_cast<std::size_t>(std::find(ids.begin(), ids.end(), Vocabulary::end) - ids.begin()) + 1;
    tb.lengths.push_back(n);
    tb.len = std::max(tb.len, n);
    rows.push_back(std::move(ids));
  }
  for (auto& r : rows) tb.ids.insert(tb.ids.end(), r.begin(), r.begin() + static_cast<std::ptrdiff_t>(tb.len));
  return tb;
}

// Row-normalized E_con for every pair, in chunks, without gradients.
template <typename T>
Tensor<T> embed_pairs(const Model<T>& model, const std::vector<const ImagePair*>& pairs, std::size_t chunk = 64) {
  const std::size_t d = model.config().encoder.dim;
  Tensor<T> out({pairs.size(), d});
  for (std::size_t i = 0; i < pairs.size(); i += chunk) {
    std::vector<const ImagePair*> part(pairs.begin() + static_cast<std::ptrdiff_t>(i),
                                       pairs.begin() + static_cast<std::ptrdiff_t>(std::min(pairs.size(), i + chunk)));
    ag::Tape<T> tape;
    tape.set_grad_enabled(false);
    auto [b, a] = image_tensors<T>(part);
    auto enc = model.encoder().encode(tape, b, a);
    auto e = ag::normalize_rows(tape, enc.e_con);
    std::copy(e->value.data.begin(), e->value.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return out;
}

// Row-normalized S_end for every caption.
template <typename T>
Tensor<T> embed_captions(const Model<T>& model, const std::vector<std::string>& texts, std::size_t chunk = 128) {
  const std::size_t d = model.config().decoder.dim;
  Tensor<T> out({texts.size(), d});
  for (std::size_t i = 0; i < texts.size(); i += chunk) {
    std::vector<std::string> part(texts.begin() + static_cast<std::ptrdiff_t>(i),
                                  texts.begin() + static_cast<std::ptrdiff_t>(std::min(texts.size(), i + chunk)));
    ag::Tape<T> tape;
    tape.set_grad_enabled(false);
    auto tb = encode_captions(model.vocab(), part, model.config().decoder.max_len);
    auto st = model.decoder().unimodal_forward(tape, model.decoder().embed_tokens(tape, tb.ids, tb.batch), tb.lengths);
    auto s = ag::normalize_rows(tape, st.s_end);
    std::copy(s->value.data.begin(), s->value.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return out;
}

// Greedy captions for every pair.
template <typename T>
std::vector<std::string> generate_captions(const Model<T>& model, const std::vector<const ImagePair*>& pairs,
                                           std::size_t chunk = 64) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < pairs.size(); i += chunk) {
    std::vector<const ImagePair*> part(pairs.begin() + static_cast<std::ptrdiff_t>(i),
                                       pairs.begin() + static_cast<std::ptrdiff_t>(std::min(pairs.size(), i + chunk)));
    ag::Tape<T> tape;
    tape.set_grad_enabled(false);
    auto [b, a] = image_tensors<T>(part);
    auto enc = model.encoder().encode(tape, b, a);
    for (const auto& ids : model.decoder().generate(enc.e_cap->value)) out.push_back(model.vocab().decode(ids));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint archive:
//   "BTCKPT\0\0" | u32 version | u64 header bytes | JSON header | raw arrays
// The header carries the model config, vocabulary tokens, free-form metadata
// and the (name, shape, dtype) of every array in storage order.

inline constexpr char kCheckpointMagic[8] = {'B', 'T', 'C', 'K', 'P', 'T', 0, 0};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void save_checkpoint(const Model<T>& model, const std::string& path, const nlohmann::json& meta = nlohmann::json::object()) {
  nlohmann::json header;
  header["model"] = model.config();
  header["vocab"] = model.vocab().tokens();
  header["vocab_min_freq"] = model.vocab().min_freq();
  header["meta"] = meta;
  header["dtype"] = "f32";
  auto& arrays = header["arrays"] = nlohmann::json::array();
  for (const auto& p : model.params().all()) arrays.push_back({{"name", p.name}, {"shape", p.var->value.shape}});
  const std::string hs = header.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint " + path);
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  const std::uint32_t ver = kCheckpointVersion;
  const std::uint64_t hlen = hs.size();
  os.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
  os.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& p : model.params().all()) {
    std::vector<float> buf(p.var->value.data.begin(), p.var->value.data.end());
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!os) throw IoError("short write to checkpoint " + path);
}

struct CheckpointHeader {
  ModelConfig model;
  Vocabulary vocab;
  nlohmann::json meta;
  nlohmann::json arrays;
  std::streamoff data_offset = 0;
};

inline CheckpointHeader read_checkpoint_header(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read checkpoint " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) throw ParseError(path + ": not a checkpoint file");
  std::uint32_t ver = 0;
  std::uint64_t hlen = 0;
  is.read(reinterpret_cast<char*>(&ver), sizeof(ver));
  is.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!is) throw ParseError(path + ": truncated checkpoint header");
  if (ver != kCheckpointVersion)
    throw VersionError(path + ": checkpoint version " + std::to_string(ver) + ", this build reads version " +
                       std::to_string(kCheckpointVersion));
  if (hlen > (std::uint64_t{1} << 30)) throw ParseError(path + ": implausible header length");
  std::string hs(hlen, '\0');
  is.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!is) throw ParseError(path + ": truncated checkpoint header");
  CheckpointHeader h;
  try {
    const auto j = nlohmann::json::parse(hs);
    h.model = j.at("model").get<ModelConfig>();
    h.vocab = Vocabulary::from_tokens(j.at("vocab").get<std::vector<std::string>>(), j.value("vocab_min_freq", 5));
    h.meta = j.value("meta", nlohmann::json::object());
    h.arrays = j.at("arrays");
    if (j.value("dtype", std::string("f32")) != "f32") throw ParseError(path + ": unsupported dtype");
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": malformed checkpoint header: " + e.what());
  }
  h.data_offset = static_cast<std::streamoff>(sizeof(magic) + sizeof(ver) + sizeof(hlen) + hlen);
  return h;
}

template <typename T>
std::unique_ptr<Model<T>> load_checkpoint(const std::string& path, nlohmann::json* meta = nullptr) {
  auto h = read_checkpoint_header(path);
  auto model = std::make_unique<Model<T>>(h.model, h.vocab, 0);
  const auto& params = model->params().all();
  if (h.arrays.size() != params.size())
    throw ValidationError(path + ": " + std::to_string(h.arrays.size()) + " arrays, model expects " +
                          std::to_string(params.size()));
  std::ifstream is(path, std::ios::binary);
  is.seekg(h.data_offset);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& a = h.arrays[i];
    const auto name = a.at("name").get<std::string>();
    const auto shape = a.at("shape").get<Shape>();
    if (name != params[i].name || shape != params[i].var->value.shape)
      throw ValidationError(path + ": array " + name + shape_str(shape) + " does not match parameter " +
                            params[i].name + shape_str(params[i].var->value.shape));
    std::vector<float> buf(shape_numel(shape));
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!is) throw ParseError(path + ": truncated array data for " + name);
    auto& v = params[i].var->value.data;
    std::copy(buf.begin(), buf.end(), v.begin());
  }
  if (meta) *meta = h.meta;
  return model;
}

}  // namespace bitemp
