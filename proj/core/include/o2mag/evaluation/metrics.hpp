#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "o2mag/common/image.hpp"

namespace o2mag::eval {

struct Scores {
  double auroc = 0;
  double ap = 0;
  double f1max = 0;
};

/// AUROC from the rank statistic with tied scores sharing their mean rank; AP
/// as the area under the precision-recall step function, one step per distinct
/// score; F1-max over every distinct score used as a threshold (score >= thr).
/// Throws std::invalid_argument unless both labels occur.
Scores pixel_metrics(std::span<const float> scores, std::span<const std::uint8_t> labels);

/// As pixel_metrics over per-image scores; additionally rejects the case where every image scores the same.
Scores image_metrics(std::span<const float> scores, std::span<const std::uint8_t> labels);

/// Mean absolute difference over channels and pixels outside the mask dilated by `dilation` pixels.
double background_fidelity(const Image& generated, const Image& reference, const BinaryMask& mask,
                           std::size_t dilation = 3);
/// Mean absolute difference over channels and pixels inside the mask.
double inside_change(const Image& generated, const Image& reference, const BinaryMask& mask);

}  // namespace o2mag::eval
