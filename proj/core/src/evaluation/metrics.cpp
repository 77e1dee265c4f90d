#include "o2mag/evaluation/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace o2mag::eval {

namespace {

void check_inputs(std::span<const float> scores, std::span<const std::uint8_t> labels, std::size_t& pos,
                  std::size_t& neg) {
  if (scores.size() != labels.size()) {
    throw std::invalid_argument("metrics: " + std::to_string(scores.size()) + " scores vs " +
                                std::to_string(labels.size()) + " labels");
  }
  pos = static_cast<std::size_t>(std::count_if(labels.begin(), labels.end(), [](auto l) { return l != 0; }));
  neg = labels.size() - pos;
  if (pos == 0 || neg == 0) {
    throw std::invalid_argument("metrics need both classes: " + std::to_string(pos) + " positive, " +
                                std::to_string(neg) + " negative labels");
  }
  for (float s : scores) {
    if (!std::isfinite(s)) throw std::invalid_argument("metrics: non-finite score");
  }
}

}  // namespace

Scores pixel_metrics(std::span<const float> scores, std::span<const std::uint8_t> labels) {
  std::size_t P = 0, N = 0;
  check_inputs(scores, labels, P, N);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });

  Scores out;
  // Walk groups of tied scores from the top. Each group is one threshold.
  double tp = 0, fp = 0, prev_recall = 0, rank_sum_pos = 0;
  std::size_t i = 0;
  const double n = static_cast<double>(order.size());
  while (i < order.size()) {
    std::size_t j = i;
    double gp = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      gp += labels[order[j]] ? 1 : 0;
      ++j;
    }
    const double gsize = static_cast<double>(j - i);
    // ascending ranks of this group are n - j + 1 .. n - i; mean shared by ties
    const double mean_rank = n - static_cast<double>(j) + (gsize + 1) / 2;
    rank_sum_pos += gp * mean_rank;
    tp += gp;
    fp += gsize - gp;
    const double precision = tp / (tp + fp), recall = tp / static_cast<double>(P);
    out.ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    if (tp > 0) out.f1max = std::max(out.f1max, 2 * precision * recall / (precision + recall));
    i = j;
  }
  const double p = static_cast<double>(P), q = static_cast<double>(N);
  out.auroc = (rank_sum_pos - p * (p + 1) / 2) / (p * q);
  return out;
}

Scores image_metrics(std::span<const float> scores, std::span<const std::uint8_t> labels) {
  if (!scores.empty() && std::all_of(scores.begin(), scores.end(), [&](float s) { return s == scores[0]; })) {
    throw std::invalid_argument("image metrics: all " + std::to_string(scores.size()) +
                                " images have the same score");
  }
  return pixel_metrics(scores, labels);
}

namespace {

void check_pair(const Image& a, const Image& b, const BinaryMask& m) {
  if (a.shape() != b.shape() || a.ndim() != 3) {
    throw std::invalid_argument("background fidelity: image shapes " + shape_string(a.shape()) + " and " +
                                shape_string(b.shape()) + " differ");
  }
  if (m.height != a.dim(1) || m.width != a.dim(2)) throw std::invalid_argument("background fidelity: mask size mismatch");
}

double masked_mad(const Image& a, const Image& b, const BinaryMask& region, std::uint8_t want) {
  const std::size_t hw = region.bits.size(), c = a.dim(0);
  double total = 0;
  std::size_t count = 0;
  for (std::size_t p = 0; p < hw; ++p) {
    if (region.bits[p] != want) continue;
    for (std::size_t ch = 0; ch < c; ++ch) total += std::abs(static_cast<double>(a[ch * hw + p]) - b[ch * hw + p]);
    count += c;
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

}  // namespace

double background_fidelity(const Image& generated, const Image& reference, const BinaryMask& mask,
                           std::size_t dilation) {
  check_pair(generated, reference, mask);
  const auto grown = dilate(mask, dilation);
  if (grown.area() == grown.bits.size()) {
    throw std::invalid_argument("background fidelity: dilated mask covers the whole image");
  }
  return masked_mad(generated, reference, grown, 0);
}

double inside_change(const Image& generated, const Image& reference, const BinaryMask& mask) {
  check_pair(generated, reference, mask);
  if (mask.area() == 0) throw std::invalid_argument("inside change: empty mask");
  return masked_mad(generated, reference, mask, 1);
}

}  // namespace o2mag::eval
