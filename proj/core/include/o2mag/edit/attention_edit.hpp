#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "o2mag/common/config.hpp"
#include "o2mag/common/image.hpp"
#include "o2mag/denoiser/unet.hpp"

namespace o2mag::edit {

using FlatMask = std::vector<std::uint8_t>;

/// Max-pool of `base` onto a resolution x resolution grid, row-major (the
/// denoiser's token order). A cell is 1 iff any pixel it covers is 1.
FlatMask downsample_mask(const BinaryMask& base, std::size_t resolution);

struct MaskPyramid {
  BinaryMask base;
  std::map<std::size_t, FlatMask> levels;

  static MaskPyramid build(const BinaryMask& base, const std::vector<std::size_t>& resolutions);
  const FlatMask& at(std::size_t resolution) const;
};

/// Self-attention enhancement: logits (A + log(gamma) m_R) / tau_fg on the foreground path.
struct DaeSelf {
  float gamma = 1.1f;
  float tau_fg = 0.7f;
};

struct TriagStats {
  std::size_t fg_masked_keys = 0;  // keys outside m_R
  std::size_t bg_masked_keys = 0;  // keys inside m_T
  bool fg_fallback = false;        // m_R empty: fg path used the target's own K, V
  bool bg_skipped = false;         // m_T covers every key
};

/// Masked grafting for one self-attention site. q [..., n, d]; reference and
/// normal k/v [..., m, d] with leading dims equal to q's or all 1. m_r and m_t
/// are flat masks over the m keys (the spatial tokens, so m = n in the model).
/// Query rows inside m_t take the foreground path (reference keys inside m_r),
/// the rest take the background path (normal keys outside m_t). k_t/v_t are
/// only read when m_r is empty. `query_gate` replaces m_t as the per-query
/// selector when the query count differs from the key count.
Tensor triag_attention(const Tensor& q, const Tensor& k_r, const Tensor& v_r, const Tensor& k_n, const Tensor& v_n,
                       std::span<const std::uint8_t> m_r, std::span<const std::uint8_t> m_t,
                       const std::optional<DaeSelf>& dae, const Tensor* k_t = nullptr, const Tensor* v_t = nullptr,
                       TriagStats* stats = nullptr, std::span<const std::uint8_t> query_gate = {});

/// Multiplies column j of every row inside m_t by c; probs [..., n, m]. No renormalization.
Tensor dae_cross(const Tensor& probs, std::span<const std::uint8_t> m_t, std::size_t j, float c);

/// Standard cross-attention with dae_cross applied to the probabilities before aggregating v.
Tensor cross_attention_dae(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const std::uint8_t> m_t,
                           std::size_t j, float c);

/// Half-open range of sampling ordinals; lo >= hi means empty.
struct StepRange {
  int lo = 0;
  int hi = 0;
  bool contains(int s) const noexcept { return s >= lo && s < hi; }
  bool empty() const noexcept { return lo >= hi; }
  bool operator==(const StepRange&) const = default;
};

enum class EditArm { standard, triag, triag_dae, dae_cross };
std::string arm_name(EditArm a);

struct EditPolicy {
  int graft_start = 5;                    // T_S: grafting needs s > graft_start
  std::vector<std::size_t> graft_layers;  // L_S
  StepRange self_enhance{5, 50};          // tau_s
  StepRange cross_enhance{20, 40};        // tau_c
  float gamma = 1.1f;
  float tau_fg = 0.7f;
  // C. 100 saturates the toy denoiser, whose anomaly token already carries
  // 5-30% of the cross-attention mass; 5 keeps the background stable.
  float cross_scale = 5.0f;
  std::size_t anomaly_index = denoiser::Vocabulary::kAnomalyIndex;

  /// Defaults with L_S = the model's decoder self-attention layers.
  static EditPolicy defaults_for(const denoiser::Denoiser& model);
  /// Turning DAE off empties both enhancement ranges.
  void disable_dae();
  void validate(int steps) const;
  bool operator==(const EditPolicy&) const = default;
};

/// L_S presets: "decoder" (all decoder self-attention layers), "decoder-skip1"
/// (drops the first decoder layer), or a comma-separated index list.
std::vector<std::size_t> resolve_graft_layers(const std::string& spec, const denoiser::Denoiser& model);

/// The edit applied at one site. Self sites: TriAG when s > T_S and the layer
/// is in L_S (with DAE when s is in tau_s); otherwise TriAG+DAE when s is in
/// tau_s; otherwise standard. Cross sites: dae_cross when s is in tau_c.
EditArm choose_arm(const EditPolicy& p, int step, std::size_t layer, denoiser::AttentionKind kind);

enum class Branch { reference, normal };

/// Self-attention K, V recorded from the reference and normal branches, keyed by (step, layer).
class CaptureStore {
 public:
  struct KV {
    Tensor k, v;
  };

  void put(Branch b, int step, std::size_t layer, Tensor k, Tensor v);
  /// Throws std::runtime_error naming the missing (branch, step, layer).
  const KV& get(Branch b, int step, std::size_t layer) const;
  bool has(Branch b, int step, std::size_t layer) const;
  /// Forgets every entry with step < `step`.
  void drop_before(int step);
  std::size_t size() const noexcept { return entries_.size(); }

 private:
  std::map<std::tuple<int, int, std::size_t>, KV> entries_;
};

/// Hook that records self-attention K, V into `store` and leaves attention unchanged.
denoiser::AttentionHook capture_hook(CaptureStore& store, Branch branch);

struct EditDecision {
  int step = 0;
  std::size_t layer = 0;
  denoiser::AttentionKind kind = denoiser::AttentionKind::self;
  EditArm arm = EditArm::standard;
  std::size_t masked_keys = 0;
  bool operator==(const EditDecision&) const = default;
};

/// Tab-separated: step, layer, kind, arm, masked_keys; one line per site.
std::string format_log(const std::vector<EditDecision>& log);
void write_log(const std::filesystem::path& path, const std::vector<EditDecision>& log);

/// Target-branch editing for one generation.
class EditSession {
 public:
  EditSession(EditPolicy policy, MaskPyramid ref_mask, MaskPyramid target_mask, const CaptureStore& captures);
  /// Reference and normal captures kept in separate stores.
  EditSession(EditPolicy policy, MaskPyramid ref_mask, MaskPyramid target_mask, const CaptureStore& reference,
              const CaptureStore& normal);

  /// Hook for one CFG pass. Self-attention edits apply to both passes;
  /// dae_cross only when `conditional`. Decisions are appended to `log` if given.
  denoiser::AttentionHook hook(bool conditional, std::vector<EditDecision>* log = nullptr) const;

  const EditPolicy& policy() const noexcept { return policy_; }
  /// Sites where the reference mask vanished at the attention resolution.
  const std::vector<std::string>& warnings() const noexcept { return *warnings_; }

 private:
  EditPolicy policy_;
  MaskPyramid ref_mask_, target_mask_;
  const CaptureStore* reference_;
  const CaptureStore* normal_;
  std::shared_ptr<std::vector<std::string>> warnings_;
};

}  // namespace o2mag::edit
