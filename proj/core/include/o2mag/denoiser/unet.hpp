#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "o2mag/common/config.hpp"
#include "o2mag/denoiser/vocabulary.hpp"
#include "o2mag/numerics/ops.hpp"

namespace o2mag::denoiser {

struct DenoiserConfig {
  std::size_t image_size = 32;
  std::size_t in_channels = 3;
  std::vector<std::size_t> channels{32, 48, 64};  // one width per resolution, halving from image_size
  std::vector<std::size_t> attention_resolutions{16, 8};
  std::size_t heads = 1;
  std::size_t time_dim = 64;
  std::size_t context_dim = 32;
  std::size_t groups = 8;

  void validate() const;
  KeyValues to_kv() const;
  static DenoiserConfig from_kv(const KeyValues& kv);
  bool operator==(const DenoiserConfig&) const = default;
};

enum class AttentionKind { self, cross };
enum class Stage { encoder, middle, decoder };
std::string kind_name(AttentionKind k);
std::string stage_name(Stage s);

struct AttentionLayerInfo {
  std::size_t index = 0;   // shared by the self and cross site of one block
  Stage stage = Stage::encoder;
  std::size_t resolution = 0;
  std::size_t channels = 0;
};

struct AttentionSite {
  std::size_t layer = 0;
  AttentionKind kind = AttentionKind::self;
  Stage stage = Stage::encoder;
  std::size_t resolution = 0;
  int step = 0;  // sampling ordinal supplied by the caller, 0 when unused
};

/// Receives per-head q [B,H,n,d], k [B,H,m,d], v [B,H,m,d]. Returning nullopt
/// keeps standard attention; otherwise the tensor replaces the attention output
/// and must be shaped [B,H,n,d].
using AttentionHook = std::function<std::optional<Tensor>(const AttentionSite&, const Tensor& q, const Tensor& k,
                                                           const Tensor& v)>;

/// Small text-conditioned U-Net predicting the noise of a pixel-space sample.
class Denoiser {
 public:
  explicit Denoiser(DenoiserConfig cfg = {}, Vocabulary vocab = {});

  /// Fresh random weights; deterministic in seed.
  void init(std::uint64_t seed);

  const DenoiserConfig& config() const noexcept { return cfg_; }
  const Vocabulary& vocab() const noexcept { return vocab_; }
  std::map<std::string, Tensor>& params() noexcept { return params_; }
  const std::map<std::string, Tensor>& params() const noexcept { return params_; }
  const Tensor& param(const std::string& name) const;
  std::size_t parameter_count() const;

  const std::vector<AttentionLayerInfo>& attention_layers() const noexcept { return layers_; }
  std::vector<std::size_t> decoder_layers() const;

  /// Graph of eps_theta(z, t, context) on `tape`. z [B,C,H,W], context [B,m,d_tau], t has B entries.
  /// Weights are borrowed; they receive gradients only when `train_weights` is set.
  Var forward(Tape& tape, Var z, const std::vector<int>& t, Var context, const AttentionHook* hook = nullptr,
              int step = 0, bool train_weights = false) const;

  /// Inference convenience: z [C,H,W] or [B,C,H,W]; e [m,d] (shared) or [B,m,d].
  Tensor predict_noise(const Tensor& z, int t, const Tensor& e, const AttentionHook* hook = nullptr,
                       int step = 0) const;

  /// Row i is the table embedding of ids[i].
  Tensor encode_prompt(const TokenIds& ids) const;
  /// [B, m, d_tau] from the embedding table, differentiable into the table when train_weights.
  Var embed(Tape& tape, const std::vector<TokenIds>& prompts, bool train_weights) const;

  void save(const std::filesystem::path& path) const;
  static Denoiser load(const std::filesystem::path& path);

 private:
  friend struct NetBuilder;
  DenoiserConfig cfg_;
  Vocabulary vocab_;
  std::map<std::string, Tensor> params_;
  std::vector<AttentionLayerInfo> layers_;
};

/// Sinusoidal timestep features [B, dim].
Tensor timestep_features(const std::vector<int>& t, std::size_t dim);

}  // namespace o2mag::denoiser
