#pragma once

// Brute-force metric definitions: every threshold is tried by a full scan.

#include <algorithm>
#include <cstdint>
#include <random>
#include <vector>

namespace o2mag::testing {

struct MetricInstance {
  std::vector<float> scores;
  std::vector<std::uint8_t> labels;
};

inline double oracle_auroc(const MetricInstance& m) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < m.scores.size(); ++i) {
    if (!m.labels[i]) continue;
    for (std::size_t j = 0; j < m.scores.size(); ++j) {
      if (m.labels[j]) continue;
      pairs += 1;
      wins += m.scores[i] > m.scores[j] ? 1.0 : m.scores[i] == m.scores[j] ? 0.5 : 0.0;
    }
  }
  return wins / pairs;
}

// (tp, fp) when predicting positive for score >= thr.
inline std::pair<double, double> counts_at(const MetricInstance& m, float thr) {
  double tp = 0, fp = 0;
  for (std::size_t i = 0; i < m.scores.size(); ++i) {
    if (m.scores[i] < thr) continue;
    (m.labels[i] ? tp : fp) += 1;
  }
  return {tp, fp};
}

inline std::vector<float> thresholds_desc(const MetricInstance& m) {
  std::vector<float> t = m.scores;
  std::sort(t.begin(), t.end(), std::greater<>());
  t.erase(std::unique(t.begin(), t.end()), t.end());
  return t;
}

inline double oracle_ap(const MetricInstance& m) {
  const double p = static_cast<double>(std::count(m.labels.begin(), m.labels.end(), 1));
  double ap = 0, prev_recall = 0;
  for (float thr : thresholds_desc(m)) {
    const auto [tp, fp] = counts_at(m, thr);
    const double recall = tp / p;
    ap += (recall - prev_recall) * (tp / (tp + fp));
    prev_recall = recall;
  }
  return ap;
}

inline double oracle_f1(const MetricInstance& m, float thr) {
  const double p = static_cast<double>(std::count(m.labels.begin(), m.labels.end(), 1));
  const auto [tp, fp] = counts_at(m, thr);
  if (tp == 0) return 0.0;
  const double precision = tp / (tp + fp), recall = tp / p;
  return 2 * precision * recall / (precision + recall);
}

inline double oracle_f1max(const MetricInstance& m) {
  double best = 0;
  for (float thr : thresholds_desc(m)) best = std::max(best, oracle_f1(m, thr));
  return best;
}

/// 2..24 items on a coarse score grid (so ties are common), both labels present.
inline MetricInstance random_metric_instance(std::mt19937_64& rng) {
  MetricInstance m;
  const auto n = std::uniform_int_distribution<std::size_t>(2, 24)(rng);
  std::uniform_int_distribution<int> grid(0, 9);
  std::bernoulli_distribution coin(0.4);
  for (std::size_t i = 0; i < n; ++i) {
    m.scores.push_back(static_cast<float>(grid(rng)) / 10.0f);
    m.labels.push_back(coin(rng) ? 1 : 0);
  }
  m.labels[0] = 1;
  m.labels[1] = 0;
  return m;
}

}  // namespace o2mag::testing
