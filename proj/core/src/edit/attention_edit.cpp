#include "o2mag/edit/attention_edit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "o2mag/numerics/gemm.hpp"
#include "o2mag/numerics/kernels.hpp"

namespace o2mag::edit {

using denoiser::AttentionKind;

FlatMask downsample_mask(const BinaryMask& base, std::size_t resolution) {
  if (resolution == 0 || base.height % resolution != 0 || base.width % resolution != 0) {
    throw std::invalid_argument("downsample_mask: resolution " + std::to_string(resolution) + " does not divide " +
                                std::to_string(base.height) + "x" + std::to_string(base.width));
  }
  const std::size_t fy = base.height / resolution, fx = base.width / resolution;
  FlatMask out(resolution * resolution, 0);
  for (std::size_t y = 0; y < base.height; ++y) {
    for (std::size_t x = 0; x < base.width; ++x) {
      if (base.at(y, x)) out[(y / fy) * resolution + x / fx] = 1;
    }
  }
  return out;
}

MaskPyramid MaskPyramid::build(const BinaryMask& base, const std::vector<std::size_t>& resolutions) {
  MaskPyramid p;
  p.base = base;
  for (auto r : resolutions) p.levels.emplace(r, downsample_mask(base, r));
  return p;
}

const FlatMask& MaskPyramid::at(std::size_t resolution) const {
  auto it = levels.find(resolution);
  if (it == levels.end()) throw std::invalid_argument("mask pyramid has no level " + std::to_string(resolution));
  return it->second;
}

namespace {

struct Dims {
  std::size_t batch, n, d, nk, dv;
};

// Batch stride of a k/v tensor that is either per-batch or shared (all leading dims 1).
std::size_t batch_stride(const Tensor& t, std::size_t batch, const char* what) {
  const std::size_t per = t.dim(-2) * t.dim(-1);
  const std::size_t count = t.size() / per;
  if (count == batch) return per;
  if (count == 1) return 0;
  throw std::invalid_argument(std::string("triag_attention: ") + what + " " + shape_string(t.shape()) +
                              " has " + std::to_string(count) + " batches, query has " + std::to_string(batch));
}

// softmax((q k^T / sqrt(d)) [transformed] + bias) v for one batch slice.
// `shift` is added to logits at keys with shift_mask=1 before dividing by `temp`.
void masked_attention(const float* q, const float* k, const float* v, const Dims& dm, const float* bias,
                      const std::uint8_t* shift_mask, float shift, float temp, float* out, std::vector<float>& p) {
  p.resize(dm.n * dm.nk);
  kernels::attention_logits(q, k, p.data(), dm.n, dm.nk, dm.d);
  if (shift_mask) {
    for (std::size_t i = 0; i < dm.n; ++i) {
      float* row = p.data() + i * dm.nk;
      for (std::size_t j = 0; j < dm.nk; ++j) row[j] = (row[j] + (shift_mask[j] ? shift : 0.0f)) / temp;
    }
  }
  for (std::size_t i = 0; i < dm.n; ++i) {
    float* row = p.data() + i * dm.nk;
    kernels::softmax_rows(row, bias, row, 1, dm.nk);
  }
  kernels::gemm<float>(false, false, dm.n, dm.dv, dm.nk, p.data(), dm.nk, v, dm.dv, out, dm.dv, false);
}

}  // namespace

Tensor triag_attention(const Tensor& q, const Tensor& k_r, const Tensor& v_r, const Tensor& k_n, const Tensor& v_n,
                       std::span<const std::uint8_t> m_r, std::span<const std::uint8_t> m_t,
                       const std::optional<DaeSelf>& dae, const Tensor* k_t, const Tensor* v_t, TriagStats* stats,
                       std::span<const std::uint8_t> query_gate) {
  if (q.ndim() < 2) throw std::invalid_argument("triag_attention: query must be at least 2-D");
  Dims dm{0, q.dim(-2), q.dim(-1), k_r.dim(-2), v_r.dim(-1)};
  dm.batch = q.size() / (dm.n * dm.d);
  if (k_r.dim(-1) != dm.d || k_n.dim(-1) != dm.d || k_n.dim(-2) != dm.nk || v_r.dim(-2) != dm.nk ||
      v_n.dim(-2) != dm.nk || v_n.dim(-1) != dm.dv) {
    throw std::invalid_argument("triag_attention: incompatible q " + shape_string(q.shape()) + ", k_r " +
                                shape_string(k_r.shape()) + ", v_r " + shape_string(v_r.shape()) + ", k_n " +
                                shape_string(k_n.shape()) + ", v_n " + shape_string(v_n.shape()));
  }
  const auto gate = query_gate.empty() ? m_t : query_gate;
  if (m_r.size() != dm.nk || m_t.size() != dm.nk || gate.size() != dm.n) {
    throw std::invalid_argument("triag_attention: mask lengths " + std::to_string(m_r.size()) + "/" +
                                std::to_string(m_t.size()) + "/" + std::to_string(gate.size()) + " do not match " +
                                std::to_string(dm.n) + " queries and " + std::to_string(dm.nk) + " keys");
  }
  if (dae && !(dae->gamma > 0 && dae->tau_fg > 0)) throw std::invalid_argument("triag_attention: gamma and tau_fg must be positive");
  const std::size_t sr = batch_stride(k_r, dm.batch, "k_r"), svr = batch_stride(v_r, dm.batch, "v_r");
  const std::size_t sn = batch_stride(k_n, dm.batch, "k_n"), svn = batch_stride(v_n, dm.batch, "v_n");

  std::vector<float> fg_bias(dm.nk), bg_bias(dm.nk);
  std::size_t fg_open = 0, bg_open = 0;
  for (std::size_t j = 0; j < dm.nk; ++j) {
    fg_bias[j] = m_r[j] ? 0.0f : kNegInf;
    bg_bias[j] = m_t[j] ? kNegInf : 0.0f;
    fg_open += m_r[j] ? 1 : 0;
    bg_open += m_t[j] ? 0 : 1;
  }
  TriagStats st;
  st.fg_masked_keys = dm.nk - fg_open;
  st.bg_masked_keys = dm.nk - bg_open;
  st.fg_fallback = fg_open == 0;
  st.bg_skipped = bg_open == 0;
  if (st.fg_fallback && (!k_t || !v_t)) {
    throw std::invalid_argument("triag_attention: reference mask is empty and no target K/V was given");
  }
  const bool any_fg = std::any_of(gate.begin(), gate.end(), [](auto b) { return b != 0; });
  const bool any_bg = std::any_of(gate.begin(), gate.end(), [](auto b) { return b == 0; });

  Shape os = q.shape();
  os.back() = dm.dv;
  Tensor out(os);
  std::vector<float> fg(dm.n * dm.dv), bg(dm.n * dm.dv), p;
  for (std::size_t b = 0; b < dm.batch; ++b) {
    const float* qb = q.ptr() + b * dm.n * dm.d;
    if (any_fg) {
      if (st.fg_fallback) {
        const std::size_t skt = batch_stride(*k_t, dm.batch, "k_t"), svt = batch_stride(*v_t, dm.batch, "v_t");
        masked_attention(qb, k_t->ptr() + b * skt, v_t->ptr() + b * svt, dm, nullptr, nullptr, 0, 1, fg.data(), p);
      } else if (dae) {
        masked_attention(qb, k_r.ptr() + b * sr, v_r.ptr() + b * svr, dm, fg_bias.data(), m_r.data(),
                         std::log(dae->gamma), dae->tau_fg, fg.data(), p);
      } else {
        masked_attention(qb, k_r.ptr() + b * sr, v_r.ptr() + b * svr, dm, fg_bias.data(), nullptr, 0, 1, fg.data(), p);
      }
    }
    if (any_bg && !st.bg_skipped) {
      masked_attention(qb, k_n.ptr() + b * sn, v_n.ptr() + b * svn, dm, bg_bias.data(), nullptr, 0, 1, bg.data(), p);
    }
    float* ob = out.ptr() + b * dm.n * dm.dv;
    for (std::size_t i = 0; i < dm.n; ++i) {
      const float* src = (gate[i] ? fg.data() : bg.data()) + i * dm.dv;
      std::copy_n(src, dm.dv, ob + i * dm.dv);
    }
  }
  if (stats) *stats = st;
  return out;
}

Tensor dae_cross(const Tensor& probs, std::span<const std::uint8_t> m_t, std::size_t j, float c) {
  if (probs.ndim() < 2) throw std::invalid_argument("dae_cross: map must be at least 2-D");
  const std::size_t n = probs.dim(-2), m = probs.dim(-1);
  if (m_t.size() != n) {
    throw std::invalid_argument("dae_cross: mask of " + std::to_string(m_t.size()) + " for " + std::to_string(n) + " rows");
  }
  if (j >= m) throw std::invalid_argument("dae_cross: token index " + std::to_string(j) + " >= " + std::to_string(m));
  if (!(c >= 1.0f)) throw std::invalid_argument("dae_cross: scale must be >= 1");
  Tensor out = probs;
  const std::size_t batch = probs.size() / (n * m);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < n; ++i) {
      if (m_t[i]) out[(b * n + i) * m + j] *= c;
    }
  }
  return out;
}

Tensor cross_attention_dae(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const std::uint8_t> m_t,
                           std::size_t j, float c) {
  Tensor probs;
  kernels::attention_forward(q, k, v, &probs);
  return kernels::batched_matmul(dae_cross(probs, m_t, j, c), v);
}

std::string arm_name(EditArm a) {
  switch (a) {
    case EditArm::standard: return "standard";
    case EditArm::triag: return "triag";
    case EditArm::triag_dae: return "triag+dae";
    case EditArm::dae_cross: return "dae-cross";
  }
  return "?";
}

EditPolicy EditPolicy::defaults_for(const denoiser::Denoiser& model) {
  EditPolicy p;
  p.graft_layers = model.decoder_layers();
  return p;
}

void EditPolicy::disable_dae() {
  self_enhance = {0, 0};
  cross_enhance = {0, 0};
}

void EditPolicy::validate(int steps) const {
  if (!(gamma > 0) || !(tau_fg > 0)) throw std::invalid_argument("edit policy: gamma and tau_fg must be positive");
  if (!(cross_scale >= 1)) throw std::invalid_argument("edit policy: cross scale must be >= 1");
  for (const auto& [name, r] : {std::pair{"tau_s", self_enhance}, std::pair{"tau_c", cross_enhance}}) {
    if (!r.empty() && (r.lo < 1 || r.hi > steps + 1)) {
      throw std::invalid_argument(std::string("edit policy: ") + name + " [" + std::to_string(r.lo) + "," +
                                  std::to_string(r.hi) + ") outside [1," + std::to_string(steps) + "]");
    }
  }
  if (graft_start < 0 || graft_start > steps) throw std::invalid_argument("edit policy: T_S outside [0, S]");
}

std::vector<std::size_t> resolve_graft_layers(const std::string& spec, const denoiser::Denoiser& model) {
  auto dec = model.decoder_layers();
  if (spec == "decoder") return dec;
  if (spec == "decoder-skip1") {
    if (!dec.empty()) dec.erase(dec.begin());
    return dec;
  }
  std::vector<std::size_t> out;
  for (const auto& part : split(spec, ',')) {
    const auto t = trim(part);
    if (t.empty()) continue;
    std::size_t pos = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(t, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != t.size() || v >= model.attention_layers().size()) {
      throw std::invalid_argument("graft layers: bad entry '" + t + "' (want decoder, decoder-skip1 or indices < " +
                                  std::to_string(model.attention_layers().size()) + ")");
    }
    out.push_back(v);
  }
  return out;
}

EditArm choose_arm(const EditPolicy& p, int step, std::size_t layer, AttentionKind kind) {
  if (kind == AttentionKind::cross) return p.cross_enhance.contains(step) ? EditArm::dae_cross : EditArm::standard;
  const bool in_ls = std::find(p.graft_layers.begin(), p.graft_layers.end(), layer) != p.graft_layers.end();
  const bool enhance = p.self_enhance.contains(step);
  if (step > p.graft_start && in_ls) return enhance ? EditArm::triag_dae : EditArm::triag;
  if (enhance) return EditArm::triag_dae;
  return EditArm::standard;
}

namespace {
std::string branch_name(Branch b) { return b == Branch::reference ? "reference" : "normal"; }
}  // namespace

void CaptureStore::put(Branch b, int step, std::size_t layer, Tensor k, Tensor v) {
  entries_[{step, static_cast<int>(b), layer}] = KV{std::move(k), std::move(v)};
}

const CaptureStore::KV& CaptureStore::get(Branch b, int step, std::size_t layer) const {
  auto it = entries_.find({step, static_cast<int>(b), layer});
  if (it == entries_.end()) {
    throw std::runtime_error("no " + branch_name(b) + " capture for step " + std::to_string(step) + ", layer " +
                             std::to_string(layer));
  }
  return it->second;
}

bool CaptureStore::has(Branch b, int step, std::size_t layer) const {
  return entries_.count({step, static_cast<int>(b), layer}) != 0;
}

void CaptureStore::drop_before(int step) {
  entries_.erase(entries_.begin(), entries_.lower_bound({step, 0, 0}));
}

denoiser::AttentionHook capture_hook(CaptureStore& store, Branch branch) {
  return [&store, branch](const denoiser::AttentionSite& site, const Tensor&, const Tensor& k,
                          const Tensor& v) -> std::optional<Tensor> {
    if (site.kind == AttentionKind::self) store.put(branch, site.step, site.layer, k, v);
    return std::nullopt;
  };
}

std::string format_log(const std::vector<EditDecision>& log) {
  std::ostringstream out;
  out << "step\tlayer\tkind\tarm\tmasked_keys\n";
  for (const auto& d : log) {
    out << d.step << '\t' << d.layer << '\t' << denoiser::kind_name(d.kind) << '\t' << arm_name(d.arm) << '\t'
        << d.masked_keys << '\n';
  }
  return out.str();
}

void write_log(const std::filesystem::path& path, const std::vector<EditDecision>& log) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << format_log(log);
}

EditSession::EditSession(EditPolicy policy, MaskPyramid ref_mask, MaskPyramid target_mask,
                         const CaptureStore& captures)
    : policy_(std::move(policy)),
      ref_mask_(std::move(ref_mask)),
      target_mask_(std::move(target_mask)),
      reference_(&captures),
      normal_(&captures),
      warnings_(std::make_shared<std::vector<std::string>>()) {}

EditSession::EditSession(EditPolicy policy, MaskPyramid ref_mask, MaskPyramid target_mask, const CaptureStore& reference,
                         const CaptureStore& normal)
    : EditSession(std::move(policy), std::move(ref_mask), std::move(target_mask), reference) {
  normal_ = &normal;
}

denoiser::AttentionHook EditSession::hook(bool conditional, std::vector<EditDecision>* log) const {
  return [this, conditional, log](const denoiser::AttentionSite& site, const Tensor& q, const Tensor& k,
                                  const Tensor& v) -> std::optional<Tensor> {
    EditArm arm = choose_arm(policy_, site.step, site.layer, site.kind);
    if (arm == EditArm::dae_cross && !conditional) arm = EditArm::standard;
    EditDecision dec{site.step, site.layer, site.kind, arm, 0};
    std::optional<Tensor> out;
    if (arm == EditArm::triag || arm == EditArm::triag_dae) {
      const auto& ref = reference_->get(Branch::reference, site.step, site.layer);
      const auto& nor = normal_->get(Branch::normal, site.step, site.layer);
      std::optional<DaeSelf> dae;
      if (arm == EditArm::triag_dae) dae = DaeSelf{policy_.gamma, policy_.tau_fg};
      TriagStats st;
      out = triag_attention(q, ref.k, ref.v, nor.k, nor.v, ref_mask_.at(site.resolution),
                            target_mask_.at(site.resolution), dae, &k, &v, &st);
      dec.masked_keys = st.fg_masked_keys + st.bg_masked_keys;
      if (st.fg_fallback && conditional) {
        warnings_->push_back("reference mask empty at " + std::to_string(site.resolution) + "x" +
                             std::to_string(site.resolution) + " (step " + std::to_string(site.step) + ", layer " +
                             std::to_string(site.layer) + "); foreground path used standard attention");
      }
    } else if (arm == EditArm::dae_cross) {
      out = cross_attention_dae(q, k, v, target_mask_.at(site.resolution), policy_.anomaly_index, policy_.cross_scale);
    }
    if (log) log->push_back(dec);
    return out;
  };
}

}  // namespace o2mag::edit
