#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "o2mag/common/image.hpp"
#include "o2mag/numerics/ops.hpp"

namespace o2mag::eval {

struct LabeledImage {
  Image image;
  BinaryMask mask;
  std::string cls;
};

struct SegmenterConfig {
  std::vector<std::size_t> channels{16, 32, 48, 64};  // full, 1/2, 1/4, 1/8 resolution
  std::size_t groups = 4;
  std::size_t epochs = 15;
  std::size_t batch = 16;
  float lr = 2e-3f;
  bool flips = true;  // random horizontal/vertical flips per example
  std::uint64_t seed = 11;
};

struct SegmenterTrace {
  std::vector<double> epoch_losses;
};

/// Encoder-decoder with three stride-2 downsamplings and three upsamplings
/// with skip connections; maps [N, 3, H, W] to per-pixel logits [N, 1, H, W].
class Segmenter {
 public:
  explicit Segmenter(SegmenterConfig cfg = {});
  void init(std::uint64_t seed);

  const SegmenterConfig& config() const noexcept { return cfg_; }
  std::map<std::string, Tensor>& params() noexcept { return params_; }
  const std::map<std::string, Tensor>& params() const noexcept { return params_; }

  Var forward(Tape& tape, Var x, bool train) const;
  /// Logits [H, W] flattened, for a single [3, H, W] image.
  std::vector<float> predict(const Image& img) const;
  /// Logits for many images, processed in chunks.
  std::vector<std::vector<float>> predict_all(const std::vector<Image>& imgs) const;

 private:
  SegmenterConfig cfg_;
  std::map<std::string, Tensor> params_;
};

/// BCE training with Adam; deterministic under cfg.seed. Rejects sets with
/// fewer than `min_examples` items and classes without any anomalous pixel.
Segmenter train_segmenter(const std::vector<LabeledImage>& data, const SegmenterConfig& cfg,
                          SegmenterTrace* trace = nullptr, std::size_t min_examples = 50,
                          const std::function<void(std::size_t epoch, double loss)>& progress = {});

}  // namespace o2mag::eval
