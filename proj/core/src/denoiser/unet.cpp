#include "o2mag/denoiser/unet.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "o2mag/common/random.hpp"
#include "o2mag/numerics/kernels.hpp"
#include "o2mag/numerics/tensor_io.hpp"

namespace o2mag::denoiser {

namespace {

std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::vector<std::size_t> parse_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  for (const auto& part : split(s, ',')) out.push_back(static_cast<std::size_t>(std::stoull(part)));
  return out;
}

enum class Init { normal_fan_in, zeros, ones };

constexpr const char* kCheckpointMagic = "o2mag-denoiser v1";

}  // namespace

std::string kind_name(AttentionKind k) { return k == AttentionKind::self ? "self" : "cross"; }

std::string stage_name(Stage s) {
  switch (s) {
    case Stage::encoder: return "encoder";
    case Stage::middle: return "middle";
    case Stage::decoder: return "decoder";
  }
  return "?";
}

void DenoiserConfig::validate() const {
  if (channels.empty()) throw std::invalid_argument("denoiser config: no channel widths");
  if (image_size >> (channels.size() - 1) == 0 || image_size % (std::size_t{1} << (channels.size() - 1)) != 0) {
    throw std::invalid_argument("denoiser config: image_size " + std::to_string(image_size) + " not divisible for " +
                                std::to_string(channels.size()) + " levels");
  }
  for (auto c : channels) {
    if (c % groups != 0) {
      throw std::invalid_argument("denoiser config: width " + std::to_string(c) + " not divisible by " +
                                  std::to_string(groups) + " groups");
    }
    if (c % heads != 0) {
      throw std::invalid_argument("denoiser config: width " + std::to_string(c) + " not divisible by " +
                                  std::to_string(heads) + " heads");
    }
  }
  if (time_dim % 2 != 0 || time_dim == 0) throw std::invalid_argument("denoiser config: time_dim must be even");
  if (context_dim == 0) throw std::invalid_argument("denoiser config: context_dim must be positive");
}

KeyValues DenoiserConfig::to_kv() const {
  KeyValues kv;
  kv.set("image_size", std::to_string(image_size));
  kv.set("in_channels", std::to_string(in_channels));
  kv.set("channels", join_sizes(channels));
  kv.set("attention_resolutions", join_sizes(attention_resolutions));
  kv.set("heads", std::to_string(heads));
  kv.set("time_dim", std::to_string(time_dim));
  kv.set("context_dim", std::to_string(context_dim));
  kv.set("groups", std::to_string(groups));
  return kv;
}

DenoiserConfig DenoiserConfig::from_kv(const KeyValues& kv) {
  DenoiserConfig c;
  c.image_size = static_cast<std::size_t>(kv.get_int("image_size", static_cast<long long>(c.image_size)));
  c.in_channels = static_cast<std::size_t>(kv.get_int("in_channels", static_cast<long long>(c.in_channels)));
  if (kv.has("channels")) c.channels = parse_sizes(kv.get("channels"));
  if (kv.has("attention_resolutions")) c.attention_resolutions = parse_sizes(kv.get("attention_resolutions"));
  c.heads = static_cast<std::size_t>(kv.get_int("heads", static_cast<long long>(c.heads)));
  c.time_dim = static_cast<std::size_t>(kv.get_int("time_dim", static_cast<long long>(c.time_dim)));
  c.context_dim = static_cast<std::size_t>(kv.get_int("context_dim", static_cast<long long>(c.context_dim)));
  c.groups = static_cast<std::size_t>(kv.get_int("groups", static_cast<long long>(c.groups)));
  c.validate();
  return c;
}

Tensor timestep_features(const std::vector<int>& t, std::size_t dim) {
  const std::size_t half = dim / 2;
  Tensor out({t.size(), dim});
  for (std::size_t b = 0; b < t.size(); ++b) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      const double a = static_cast<double>(t[b]) * freq;
      out[b * dim + i] = static_cast<float>(std::sin(a));
      out[b * dim + half + i] = static_cast<float>(std::cos(a));
    }
  }
  return out;
}

// Walks the network structure once per forward. In creation mode missing
// parameters are allocated with their initializer, so init() and forward()
// cannot drift apart.
struct NetBuilder {
  Denoiser& net;
  Tape& tape;
  bool create;
  bool train;
  Rng* rng;
  const AttentionHook* hook;
  int step;
  std::size_t next_layer = 0;
  std::vector<AttentionLayerInfo> layers;

  NetBuilder(Denoiser& n, Tape& t, bool create_missing, bool train_weights, Rng* init_rng, const AttentionHook* h,
             int s)
      : net(n), tape(t), create(create_missing), train(train_weights), rng(init_rng), hook(h), step(s) {}

  Var p(const std::string& name, Shape shape, Init init) {
    auto it = net.params_.find(name);
    if (it == net.params_.end()) {
      if (!create) throw std::runtime_error("denoiser: missing parameter '" + name + "'");
      Tensor t(shape);
      if (init == Init::ones) {
        t.fill(1.0f);
      } else if (init == Init::normal_fan_in) {
        std::size_t fan_in = 1;
        for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
        const float sd = 1.0f / std::sqrt(static_cast<float>(fan_in));
        std::normal_distribution<float> n(0.0f, sd);
        for (auto& v : t.data()) v = n(*rng);
      }
      it = net.params_.emplace(name, std::move(t)).first;
    }
    if (it->second.shape() != shape) {
      throw std::runtime_error("denoiser: parameter '" + name + "' has shape " + shape_string(it->second.shape()) +
                               ", expected " + shape_string(shape));
    }
    return tape.borrow(it->second, train, name);
  }

  Var conv(Var x, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride,
           bool zero = false) {
    auto w = p(name + ".w", {cout, cin, k, k}, zero ? Init::zeros : Init::normal_fan_in);
    auto b = p(name + ".b", {cout}, Init::zeros);
    return ops::conv2d(x, w, b, stride, k / 2);
  }

  Var linear(Var x, const std::string& name, std::size_t in, std::size_t out, bool bias = true, bool zero = false) {
    auto w = p(name + ".w", {out, in}, zero ? Init::zeros : Init::normal_fan_in);
    if (!bias) return ops::linear(x, w, std::nullopt);
    return ops::linear(x, w, p(name + ".b", {out}, Init::zeros));
  }

  Var norm(Var x, const std::string& name, std::size_t c) {
    return ops::group_norm(x, p(name + ".g", {c}, Init::ones), p(name + ".b", {c}, Init::zeros),
                           net.cfg_.groups);
  }

  Var resblock(Var x, Var temb, const std::string& name, std::size_t cin, std::size_t cout) {
    const std::size_t tdim = temb.shape()[1];
    auto h = conv(ops::silu(norm(x, name + ".n1", cin)), name + ".c1", cin, cout, 3, 1);
    h = ops::add_channel(h, linear(temb, name + ".t", tdim, cout));
    h = conv(ops::silu(norm(h, name + ".n2", cout)), name + ".c2", cout, cout, 3, 1, true);
    auto skip = cin == cout ? x : conv(x, name + ".skip", cin, cout, 1, 1);
    return ops::add(skip, h);
  }

  Var attend(const AttentionSite& site, Var q, Var k, Var v) {
    if (hook && *hook) {
      auto replaced = (*hook)(site, q.value(), k.value(), v.value());
      if (replaced) {
        Shape expected = q.value().shape();
        expected.back() = v.value().shape().back();
        if (replaced->shape() != expected) {
          throw std::runtime_error("attention hook at layer " + std::to_string(site.layer) + " (" +
                                   kind_name(site.kind) + ", step " + std::to_string(site.step) +
                                   ") returned shape " + shape_string(replaced->shape()) + ", expected " +
                                   shape_string(expected));
        }
        return tape.leaf(std::move(*replaced));
      }
    }
    return ops::attention(q, k, v);
  }

  Var attention_block(Var x, Var context, const std::string& name, std::size_t c, Stage stage) {
    const std::size_t h = x.shape()[2], w = x.shape()[3];
    const std::size_t heads = net.cfg_.heads;
    const std::size_t dctx = net.cfg_.context_dim;
    AttentionLayerInfo info{next_layer++, stage, h, c};
    layers.push_back(info);
    AttentionSite site{info.index, AttentionKind::self, stage, h, step};

    auto tok = ops::to_tokens(norm(x, name + ".n1", c));
    auto q = ops::split_heads(linear(tok, name + ".q", c, c, false), heads);
    auto k = ops::split_heads(linear(tok, name + ".k", c, c, false), heads);
    auto v = ops::split_heads(linear(tok, name + ".v", c, c, false), heads);
    auto a = ops::merge_heads(attend(site, q, k, v));
    auto out = ops::from_tokens(linear(a, name + ".o", c, c, true, true), h, w);
    x = ops::add(x, out);

    site.kind = AttentionKind::cross;
    tok = ops::to_tokens(norm(x, name + ".n2", c));
    q = ops::split_heads(linear(tok, name + ".cq", c, c, false), heads);
    k = ops::split_heads(linear(context, name + ".ck", dctx, c, false), heads);
    v = ops::split_heads(linear(context, name + ".cv", dctx, c, false), heads);
    a = ops::merge_heads(attend(site, q, k, v));
    out = ops::from_tokens(linear(a, name + ".co", c, c, true, true), h, w);
    return ops::add(x, out);
  }

  Var run(Var z, const std::vector<int>& t, Var context) {
    const auto& cfg = net.cfg_;
    const std::size_t levels = cfg.channels.size();
    const std::size_t temb_dim = 4 * cfg.channels[0];
    auto tf = tape.leaf(timestep_features(t, cfg.time_dim));
    auto temb = linear(ops::silu(linear(tf, "time.l1", cfg.time_dim, temb_dim)), "time.l2", temb_dim, temb_dim);

    auto has_attn = [&](std::size_t res) {
      return std::find(cfg.attention_resolutions.begin(), cfg.attention_resolutions.end(), res) !=
             cfg.attention_resolutions.end();
    };

    auto h = conv(z, "in", cfg.in_channels, cfg.channels[0], 3, 1);
    std::vector<Var> skips{h};
    std::size_t ch = cfg.channels[0];
    for (std::size_t l = 0; l < levels; ++l) {
      const std::string pre = "enc" + std::to_string(l);
      h = resblock(h, temb, pre + ".res", ch, cfg.channels[l]);
      ch = cfg.channels[l];
      if (has_attn(h.shape()[2])) h = attention_block(h, context, pre + ".attn", ch, Stage::encoder);
      skips.push_back(h);
      if (l + 1 < levels) {
        h = conv(h, pre + ".down", ch, ch, 3, 2);
        skips.push_back(h);
      }
    }
    h = resblock(h, temb, "mid.res0", ch, ch);
    h = attention_block(h, context, "mid.attn", ch, Stage::middle);
    h = resblock(h, temb, "mid.res1", ch, ch);
    for (std::size_t l = levels; l-- > 0;) {
      const std::string pre = "dec" + std::to_string(l);
      for (int i = 0; i < 2; ++i) {
        auto s = skips.back();
        skips.pop_back();
        const std::size_t cin = ch + s.shape()[1];
        h = resblock(ops::concat_channels(h, s), temb, pre + ".res" + std::to_string(i), cin, cfg.channels[l]);
        ch = cfg.channels[l];
        if (has_attn(h.shape()[2])) {
          h = attention_block(h, context, pre + ".attn" + std::to_string(i), ch, Stage::decoder);
        }
      }
      if (l > 0) {
        // Mix channels at the coarse resolution, then repeat pixels.
        h = ops::upsample_nearest2x(conv(h, pre + ".up", ch, cfg.channels[l - 1], 3, 1));
        ch = cfg.channels[l - 1];
      }
    }
    h = ops::silu(norm(h, "out.n", ch));
    return conv(h, "out", ch, cfg.in_channels, 3, 1, true);
  }
};

Denoiser::Denoiser(DenoiserConfig cfg, Vocabulary vocab) : cfg_(std::move(cfg)), vocab_(std::move(vocab)) {
  cfg_.validate();
}

void Denoiser::init(std::uint64_t seed) {
  params_.clear();
  Rng rng(derive_seed(seed, "denoiser-init"));
  Tensor table({vocab_.size(), cfg_.context_dim});
  std::normal_distribution<float> n(0.0f, 0.5f);
  for (auto& v : table.data()) v = n(rng);
  params_.emplace("token_embedding", std::move(table));
  Tape tape(false);
  NetBuilder b{*this, tape, true, false, &rng, nullptr, 0};
  auto z = tape.leaf(Tensor({1, cfg_.in_channels, cfg_.image_size, cfg_.image_size}));
  auto ctx = tape.leaf(Tensor({1, Vocabulary::kPromptLength, cfg_.context_dim}));
  b.run(z, {1}, ctx);
  layers_ = b.layers;
}

const Tensor& Denoiser::param(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::invalid_argument("denoiser: no parameter '" + name + "'");
  return it->second;
}

std::size_t Denoiser::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params_) n += t.size();
  return n;
}

std::vector<std::size_t> Denoiser::decoder_layers() const {
  std::vector<std::size_t> out;
  for (const auto& l : layers_)
    if (l.stage == Stage::decoder) out.push_back(l.index);
  return out;
}

Var Denoiser::forward(Tape& tape, Var z, const std::vector<int>& t, Var context, const AttentionHook* hook, int step,
                      bool train_weights) const {
  const Shape& zs = z.shape();
  if (zs.size() != 4 || zs[1] != cfg_.in_channels || zs[2] != cfg_.image_size || zs[3] != cfg_.image_size) {
    throw std::invalid_argument("denoiser: input shape " + shape_string(zs) + " does not match config");
  }
  if (t.size() != zs[0]) throw std::invalid_argument("denoiser: " + std::to_string(t.size()) + " timesteps for batch " + std::to_string(zs[0]));
  const Shape& cs = context.shape();
  if (cs.size() != 3 || cs[0] != zs[0] || cs[2] != cfg_.context_dim) {
    throw std::invalid_argument("denoiser: context shape " + shape_string(cs) + " incompatible with batch " +
                                std::to_string(zs[0]));
  }
  // Parameters are only read, never created, when create == false.
  NetBuilder b{const_cast<Denoiser&>(*this), tape, false, train_weights, nullptr, hook, step};
  return b.run(z, t, context);
}

Tensor Denoiser::predict_noise(const Tensor& z, int t, const Tensor& e, const AttentionHook* hook, int step) const {
  Tensor zb = z.ndim() == 3 ? z.reshaped({1, z.dim(0), z.dim(1), z.dim(2)}) : z;
  const std::size_t batch = zb.dim(0);
  Tensor eb;
  if (e.ndim() == 2) {
    eb = Tensor({batch, e.dim(0), e.dim(1)});
    for (std::size_t b = 0; b < batch; ++b) std::copy(e.data().begin(), e.data().end(), eb.ptr() + b * e.size());
  } else {
    eb = e;
  }
  Tape tape(false);
  auto out = forward(tape, tape.leaf(std::move(zb)), std::vector<int>(batch, t), tape.leaf(std::move(eb)), hook, step);
  Tensor r = out.value();
  return z.ndim() == 3 ? r.reshaped(z.shape()) : r;
}

Tensor Denoiser::encode_prompt(const TokenIds& ids) const {
  const Tensor& table = param("token_embedding");
  const std::size_t d = cfg_.context_dim;
  Tensor out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= table.dim(0)) throw std::invalid_argument("encode_prompt: unknown token id " + std::to_string(ids[i]));
    std::copy_n(table.ptr() + ids[i] * d, d, out.ptr() + i * d);
  }
  return out;
}

Var Denoiser::embed(Tape& tape, const std::vector<TokenIds>& prompts, bool train_weights) const {
  std::vector<std::size_t> flat;
  for (const auto& p : prompts) {
    if (p.size() != Vocabulary::kPromptLength) throw std::invalid_argument("embed: prompt length mismatch");
    flat.insert(flat.end(), p.begin(), p.end());
  }
  auto table = tape.borrow(param("token_embedding"), train_weights, "token_embedding");
  return ops::reshape(ops::gather_rows(table, std::move(flat)),
                      {prompts.size(), Vocabulary::kPromptLength, cfg_.context_dim});
}

void Denoiser::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  KeyValues kv = cfg_.to_kv();
  std::string vocab;
  for (std::size_t i = 0; i < vocab_.size(); ++i) vocab += (i ? "," : "") + vocab_.token(i);
  kv.set("vocab", vocab);
  kv.set("tensors", std::to_string(params_.size()));
  out << kCheckpointMagic << "\n" << kv.serialize() << "end-header\n";
  for (const auto& [name, t] : params_) {
    const auto len = static_cast<std::uint32_t>(name.size());
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(name.data(), len);
    write_tensor(out, t);
  }
  if (!out) throw std::runtime_error("checkpoint write failed: " + path.string());
}

Denoiser Denoiser::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::string line, header;
  if (!std::getline(in, line) || line != kCheckpointMagic) throw std::runtime_error("not a denoiser checkpoint: " + path.string());
  while (std::getline(in, line) && line != "end-header") header += line + "\n";
  const KeyValues kv = KeyValues::parse(header);
  Denoiser d(DenoiserConfig::from_kv(kv), Vocabulary(split(kv.get("vocab"), ',')));
  const auto count = static_cast<std::size_t>(kv.get_int("tensors", 0));
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t len = 0;
    if (!in.read(reinterpret_cast<char*>(&len), sizeof len)) throw std::runtime_error("checkpoint truncated: " + path.string());
    std::string name(len, '\0');
    in.read(name.data(), len);
    d.params_.emplace(name, read_tensor(in));
  }
  // Recover the layer table by tracing the structure with the loaded weights.
  Tape tape(false);
  NetBuilder b{d, tape, false, false, nullptr, nullptr, 0};
  auto z = tape.leaf(Tensor({1, d.cfg_.in_channels, d.cfg_.image_size, d.cfg_.image_size}));
  auto ctx = tape.leaf(Tensor({1, Vocabulary::kPromptLength, d.cfg_.context_dim}));
  b.run(z, {1}, ctx);
  d.layers_ = b.layers;
  return d;
}

}  // namespace o2mag::denoiser
