#include "o2mag/evaluation/segmenter.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "o2mag/common/random.hpp"
#include "o2mag/numerics/adam.hpp"

namespace o2mag::eval {

namespace {

struct Builder {
  std::map<std::string, Tensor>& params;
  Rng& rng;

  void conv(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k, float gain = 1.0f) {
    Tensor w = normal_tensor(rng, {cout, cin, k, k});
    const float s = gain * std::sqrt(2.0f / static_cast<float>(cin * k * k));
    for (auto& v : w.data()) v *= s;
    params[name + ".w"] = std::move(w);
    params[name + ".b"] = Tensor({cout});
  }
  void norm(const std::string& name, std::size_t c) {
    params[name + ".g"] = Tensor({c}, 1.0f);
    params[name + ".b"] = Tensor({c});
  }
  void block(const std::string& name, std::size_t cin, std::size_t cout) {
    conv(name + ".c1", cin, cout, 3);
    norm(name + ".n1", cout);
    conv(name + ".c2", cout, cout, 3);
    norm(name + ".n2", cout);
  }
};

}  // namespace

Segmenter::Segmenter(SegmenterConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.channels.size() != 4) throw std::invalid_argument("segmenter: expected 4 channel widths");
  for (auto c : cfg_.channels) {
    if (c == 0 || c % cfg_.groups != 0) throw std::invalid_argument("segmenter: channel widths must be multiples of groups");
  }
  init(cfg_.seed);
}

void Segmenter::init(std::uint64_t seed) {
  params_.clear();
  Rng rng(derive_seed(seed, "segmenter-init"));
  Builder b{params_, rng};
  const auto& c = cfg_.channels;
  b.block("e0", 3, c[0]);
  b.block("e1", c[0], c[1]);
  b.block("e2", c[1], c[2]);
  b.block("e3", c[2], c[3]);
  b.block("d2", c[3] + c[2], c[2]);
  b.block("d1", c[2] + c[1], c[1]);
  b.block("d0", c[1] + c[0], c[0]);
  b.conv("out", c[0], 1, 1, 0.1f);
  params_["out.b"][0] = -2.0f;  // anomalous pixels are rare
}

Var Segmenter::forward(Tape& tape, Var x, bool train) const {
  auto p = [&](const std::string& n) { return tape.borrow(params_.at(n), train, n); };
  auto block = [&](const std::string& n, Var h, std::size_t stride) {
    h = ops::conv2d(h, p(n + ".c1.w"), p(n + ".c1.b"), stride, 1);
    h = ops::silu(ops::group_norm(h, p(n + ".n1.g"), p(n + ".n1.b"), cfg_.groups));
    h = ops::conv2d(h, p(n + ".c2.w"), p(n + ".c2.b"), 1, 1);
    return ops::silu(ops::group_norm(h, p(n + ".n2.g"), p(n + ".n2.b"), cfg_.groups));
  };
  auto e0 = block("e0", x, 1);
  auto e1 = block("e1", e0, 2);
  auto e2 = block("e2", e1, 2);
  auto e3 = block("e3", e2, 2);
  auto d2 = block("d2", ops::concat_channels(ops::upsample_nearest2x(e3), e2), 1);
  auto d1 = block("d1", ops::concat_channels(ops::upsample_nearest2x(d2), e1), 1);
  auto d0 = block("d0", ops::concat_channels(ops::upsample_nearest2x(d1), e0), 1);
  return ops::conv2d(d0, p("out.w"), p("out.b"), 1, 0);
}

std::vector<float> Segmenter::predict(const Image& img) const {
  return predict_all({img}).front();
}

std::vector<std::vector<float>> Segmenter::predict_all(const std::vector<Image>& imgs) const {
  std::vector<std::vector<float>> out;
  constexpr std::size_t chunk = 32;
  for (std::size_t lo = 0; lo < imgs.size(); lo += chunk) {
    const std::size_t hi = std::min(imgs.size(), lo + chunk);
    const auto& s = imgs[lo].shape();
    if (s.size() != 3 || s[1] % 8 != 0 || s[2] % 8 != 0) {
      throw std::invalid_argument("segmenter: images must be [C, H, W] with H, W divisible by 8, got " + shape_string(s));
    }
    Tensor x({hi - lo, s[0], s[1], s[2]});
    const std::size_t n = imgs[lo].size();
    for (std::size_t i = lo; i < hi; ++i) {
      if (imgs[i].shape() != s) throw std::invalid_argument("segmenter: mixed image shapes");
      std::copy_n(imgs[i].ptr(), n, x.ptr() + (i - lo) * n);
    }
    Tape tape(false);
    const auto& y = forward(tape, tape.leaf(std::move(x)), false).value();
    const std::size_t hw = s[1] * s[2];
    for (std::size_t i = 0; i < hi - lo; ++i) out.emplace_back(y.ptr() + i * hw, y.ptr() + (i + 1) * hw);
  }
  return out;
}

namespace {

void flip_into(const float* src, float* dst, std::size_t c, std::size_t h, std::size_t w, bool fh, bool fv) {
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t sy = fv ? h - 1 - y : y, sx = fh ? w - 1 - x : x;
        dst[(ch * h + y) * w + x] = src[(ch * h + sy) * w + sx];
      }
}

}  // namespace

Segmenter train_segmenter(const std::vector<LabeledImage>& data, const SegmenterConfig& cfg, SegmenterTrace* trace,
                          std::size_t min_examples, const std::function<void(std::size_t, double)>& progress) {
  if (data.size() < min_examples) {
    throw std::invalid_argument("segmenter training needs at least " + std::to_string(min_examples) +
                                " pairs, got " + std::to_string(data.size()));
  }
  std::map<std::string, std::size_t> positives;
  for (const auto& d : data) positives[d.cls] += d.mask.area();
  for (const auto& [cls, n] : positives) {
    if (n == 0) throw std::invalid_argument("segmenter training: class '" + cls + "' has no anomalous pixels");
  }
  const Shape s = data.front().image.shape();
  for (const auto& d : data) {
    if (d.image.shape() != s || d.mask.height != s[1] || d.mask.width != s[2]) {
      throw std::invalid_argument("segmenter training: inconsistent image or mask sizes");
    }
  }

  Segmenter net(cfg);
  auto& params = net.params();
  std::vector<std::string> names;
  std::vector<Tensor*> ptrs;
  for (auto& [n, t] : params) {
    names.push_back(n);
    ptrs.push_back(&t);
  }
  std::vector<const Tensor*> cptrs(ptrs.begin(), ptrs.end());
  AdamState adam(cptrs, AdamOptions{cfg.lr});

  const std::size_t c = s[0], h = s[1], w = s[2], n_img = c * h * w, hw = h * w;
  std::vector<std::size_t> order(data.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(derive_seed(cfg.seed, "segmenter-epoch", epoch));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0;
    std::size_t batches = 0;
    for (std::size_t lo = 0; lo < order.size(); lo += cfg.batch) {
      const std::size_t hi = std::min(order.size(), lo + cfg.batch), b = hi - lo;
      Tensor x({b, c, h, w}), y({b, 1, h, w});
      for (std::size_t i = 0; i < b; ++i) {
        const auto& d = data[order[lo + i]];
        const bool fh = cfg.flips && (rng() & 1), fv = cfg.flips && (rng() & 1);
        flip_into(d.image.ptr(), x.ptr() + i * n_img, c, h, w, fh, fv);
        std::vector<float> m(d.mask.bits.begin(), d.mask.bits.end());
        flip_into(m.data(), y.ptr() + i * hw, 1, h, w, fh, fv);
      }
      Tape tape(true);
      auto loss = ops::bce_with_logits(net.forward(tape, tape.leaf(std::move(x)), true), y);
      tape.backward(loss);
      const double lv = loss.value()[0];
      if (!std::isfinite(lv)) throw std::runtime_error("segmenter training: non-finite loss in epoch " + std::to_string(epoch));
      std::map<std::string, const Tensor*> grads;
      for (const auto& node : tape.nodes()) {
        if (node.is_leaf() && node.requires_grad && !node.name.empty() && !node.grad.empty()) grads[node.name] = &node.grad;
      }
      std::vector<Tensor> glist;
      for (std::size_t i = 0; i < names.size(); ++i) {
        auto it = grads.find(names[i]);
        glist.push_back(it == grads.end() ? Tensor(ptrs[i]->shape()) : *it->second);
      }
      adam.update(ptrs, glist, names);
      total += lv;
      ++batches;
    }
    const double mean = total / static_cast<double>(std::max<std::size_t>(1, batches));
    if (trace) trace->epoch_losses.push_back(mean);
    if (progress) progress(epoch, mean);
  }
  return net;
}

}  // namespace o2mag::eval
