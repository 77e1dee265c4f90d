#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "o2mag/common/config.hpp"
#include "o2mag/common/image.hpp"
#include "o2mag/denoiser/unet.hpp"
#include "o2mag/scheduler/scheduler.hpp"

namespace o2mag::ago {

/// How diffusion times are drawn during optimization. Both are uniform over
/// 1..train_steps per draw; `stratified` splits each block of `block` steps
/// into equal-width strata and visits them in a shuffled order.
enum class TimestepRule { uniform, stratified };
std::string rule_name(TimestepRule r);
TimestepRule parse_rule(const std::string& s);

struct AgoConfig {
  std::size_t steps = 500;
  float lr = 3e-3f;
  TimestepRule timesteps = TimestepRule::stratified;
  std::size_t block = 50;        // stratification block
  std::size_t noise_draws = 1;   // (t, eps) pairs per step
  bool periodic = false;         // every block reuses the first block's (t, eps) draws
  std::uint64_t seed = 0;

  void validate() const;
  KeyValues to_kv() const;
  static AgoConfig from_kv(const KeyValues& kv);
};

/// Diffusion times of the first `count` draws (draw q belongs to step q / noise_draws).
std::vector<int> draw_timesteps(const AgoConfig& cfg, int train_steps, std::size_t count);

struct AgoResult {
  Tensor embedding;            // e*, [m, d]
  std::vector<double> losses;  // one per step
};

/// Called once per step with the step's tape after backward.
using TapeInspector = std::function<void(std::size_t step, const Tape& tape)>;

/// Adam on the prompt embedding against the noise-prediction loss of a single
/// image; the model is only read. Throws std::runtime_error on a non-finite loss.
AgoResult optimize_embedding(const Tensor& e_ori, const Image& image, const denoiser::Denoiser& model,
                             const sched::Scheduler& sched, const AgoConfig& cfg, const TapeInspector& inspect = {});

/// Mean of losses over steps (step - window, step], 1-based.
double smoothed_loss(const std::vector<double>& losses, std::size_t step, std::size_t window = 50);

/// Phrases concatenated and padded to the prompt length; empty gives the null prompt.
Tensor build_negative_embedding(const denoiser::Denoiser& model, const std::vector<std::string>& phrases);
/// "intact shell;no crack" -> {"intact shell", "no crack"}; blank entries dropped.
std::vector<std::string> split_phrases(const std::string& text);

/// File layout: "o2mag-embedding" line, key=value provenance lines, a blank
/// line, then the tensor in the binary tensor format.
struct StoredEmbedding {
  Tensor embedding;
  KeyValues provenance;
};
void save_embedding(const std::filesystem::path& path, const Tensor& e, const KeyValues& provenance);
StoredEmbedding load_embedding(const std::filesystem::path& path);

/// Content hash of everything that determines e*.
std::uint64_t embedding_key(const Image& image, const denoiser::TokenIds& prompt, const denoiser::Denoiser& model,
                            const AgoConfig& cfg);
std::uint64_t model_hash(const denoiser::Denoiser& model);

/// Optimizes (or loads) e* for one reference image under the anomaly prompt
/// "a photo of a [cls] with a [anomaly]". With an empty cache_dir nothing is stored.
StoredEmbedding anomaly_embedding(const Image& image, const std::string& cls, const std::string& anomaly,
                                  const denoiser::Denoiser& model, const sched::Scheduler& sched, const AgoConfig& cfg,
                                  const std::filesystem::path& cache_dir = {});

}  // namespace o2mag::ago
