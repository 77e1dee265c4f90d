#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "o2mag/dataset/dataset.hpp"
#include "o2mag/evaluation/metrics.hpp"
#include "o2mag/evaluation/segmenter.hpp"
#include "o2mag/pipeline/pipeline.hpp"

namespace o2mag::eval {

/// Test images with their masks (empty for good images).
struct TestSet {
  std::vector<Image> images;
  std::vector<BinaryMask> masks;
  std::vector<std::string> cls;
  std::vector<std::string> defect;  // "good" for defect-free images
};

/// The test split, optionally restricted to one class; `defect` keeps that
/// defect plus the class's good images.
TestSet load_test_split(const dataset::Manifest& manifest, const std::string& cls = "", const std::string& defect = "");
std::vector<LabeledImage> reference_examples(const dataset::Manifest& manifest, const std::string& cls = "",
                                             const std::string& defect = "");
std::vector<LabeledImage> generated_examples(const std::vector<pipeline::GeneratedPair>& pairs);

struct PairScores {
  Scores pixel;
  Scores image;
};

struct DetectionResult {
  PairScores all;
  /// Keyed by (class, defect): that pair's anomalies plus the class's good images.
  std::map<std::pair<std::string, std::string>, PairScores> per_pair;
};

/// Pixel scores are the segmenter logits; the image score is the max pixel score.
DetectionResult evaluate_detection(const Segmenter& seg, const TestSet& test);

struct ReportRow {
  std::string section;  // e.g. "pixel", "image", "ablation"
  std::string key1, key2;
  Scores scores;
};

/// Tab-separated: section, key1, key2, auroc, ap, f1max; fixed 6-digit precision.
std::string format_report(const std::vector<ReportRow>& rows, const std::vector<std::string>& comments = {});
std::vector<ReportRow> detection_rows(const DetectionResult& r, const std::string& prefix = "");

/// One PNG per metric with a bar per row, grouped by section.
void write_bar_charts(const std::filesystem::path& stem, const std::vector<ReportRow>& rows);

// ---------------------------------------------------------------------------

struct AblationConfig {
  std::string name;
  bool dae = true;
  bool ago = true;
};
/// TriAG-only, TriAG+DAE, TriAG+AGO, full.
std::vector<AblationConfig> standard_ablation();

struct AblationOptions {
  pipeline::BatchOptions batch;   // count, seed, negative prompts, AGO settings
  SegmenterConfig segmenter;
  bool include_reference = true;  // add the reference split to every segmenter's training set
  /// Generations (per config) for which the normal reconstruction is also
  /// computed to measure background fidelity.
  std::size_t fidelity_items = 0;
  std::filesystem::path image_dir;  // when set, generated pairs are written per config
  std::function<void(const std::string& what)> progress;
};

struct FidelityStats {
  std::size_t count = 0;
  double background_mad = 0;  // vs the normal reconstruction, outside the 3-px-dilated mask; mean over items
  double outside_change = 0;  // |I - I_N| outside the dilated mask; mean over items
  double inside_change = 0;   // |I - I_N| inside the mask; mean over items
  std::vector<double> per_item_background;
};

struct AblationRow {
  AblationConfig config;
  std::size_t generated = 0;
  std::size_t failed = 0;
  DetectionResult detection;
  FidelityStats fidelity;
};

/// Generates one batch per configuration from the same plan (items share the
/// normal branch and, per embedding, the reference branch), trains one
/// segmenter each and scores it on the test split.
std::vector<AblationRow> run_ablation(const dataset::Manifest& manifest, const denoiser::Denoiser& model,
                                      const sched::Scheduler& sched, const std::vector<AblationConfig>& configs,
                                      const AblationOptions& opt);
std::vector<ReportRow> ablation_rows(const std::vector<AblationRow>& rows);

struct ZeroShotResult {
  PairScores same_class;
  PairScores cross_class;
  std::size_t generated = 0;
};

/// Same-class (target-class references) vs cross-class (source-class
/// references) generation of one defect on the target class; each trains a
/// segmenter on its synthesized pairs only and is scored on the target
/// class's test images of that defect.
ZeroShotResult run_zero_shot(const dataset::Manifest& manifest, const denoiser::Denoiser& model,
                             const sched::Scheduler& sched, const std::string& source_class,
                             const std::string& target_class, const std::string& defect, const AblationOptions& opt);

}  // namespace o2mag::eval
