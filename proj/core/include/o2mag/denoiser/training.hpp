#pragma once

#include <functional>
#include <string>
#include <vector>

#include "o2mag/dataset/dataset.hpp"
#include "o2mag/denoiser/unet.hpp"
#include "o2mag/scheduler/scheduler.hpp"

namespace o2mag::denoiser {

struct TrainingExample {
  Image image;
  TokenIds prompt;
  std::string cls;
  std::string defect;  // "good" for normal images
};

/// Infinite stream of (image, prompt) pairs. Normal images come from a fixed
/// pool (augmented per draw) with normal prompts; defect images composite a
/// freshly sampled defect onto an augmented pool image and use the anomaly
/// prompt. The "no" token is never emitted.
class TrainingCorpus {
 public:
  struct PoolImage {
    std::string cls;
    Image image;
  };

  TrainingCorpus(std::vector<PoolImage> normals, Vocabulary vocab, double defect_fraction = 0.6);
  /// Pool = the train-normal split of a manifest.
  static TrainingCorpus from_manifest(const dataset::Manifest& manifest, Vocabulary vocab,
                                      double defect_fraction = 0.6);

  std::size_t pool_size() const noexcept { return normals_.size(); }
  /// Deterministic in `seed`.
  TrainingExample draw(std::uint64_t seed) const;

 private:
  std::vector<PoolImage> normals_;
  Vocabulary vocab_;
  double defect_fraction_;
};

struct TrainConfig {
  std::size_t steps = 5000;
  std::size_t batch = 8;
  float lr = 1e-3f;
  std::size_t warmup = 200;
  float final_lr_fraction = 0.1f;  // cosine decay floor
  float clip_norm = 1.0f;
  float ema_decay = 0.999f;
  double null_prompt_rate = 0.1;  // per sample
  std::size_t validation_size = 32;
  std::size_t validation_every = 500;
  std::size_t divergence_window = 500;
  double divergence_factor = 10.0;
  std::uint64_t seed = 7;

  KeyValues to_kv() const;
  static TrainConfig from_kv(const KeyValues& kv);
};

struct TrainProgress {
  std::size_t step = 0;
  double loss = 0;          // this step's batch loss
  double running_loss = 0;  // exponential average, factor 0.99
  float lr = 0;
  double validation_loss = -1;  // set on validation steps only
};

struct TrainResult {
  double final_running_loss = 0;
  std::vector<double> losses;
  /// (step, loss) of the EMA weights on the fixed validation batch; first entry is step 0.
  std::vector<std::pair<std::size_t, double>> validation;
};

/// Fixed batch of (x0, prompt, t, eps) used to compare weights across training.
struct ValidationBatch {
  std::vector<Tensor> x0;
  std::vector<TokenIds> prompts;
  std::vector<int> t;
  std::vector<Tensor> eps;
};
ValidationBatch make_validation_batch(const TrainingCorpus& corpus, std::size_t size, int train_steps,
                                      std::uint64_t seed);
double validation_loss(const Denoiser& model, const sched::Scheduler& sched, const ValidationBatch& batch);

/// Minimizes the noise-prediction MSE on `model` in place; on return the model
/// holds the EMA weights. Throws std::runtime_error when the loss stays above
/// divergence_factor x the first loss for divergence_window consecutive steps.
TrainResult train_denoiser(Denoiser& model, const TrainingCorpus& corpus, const sched::Scheduler& sched,
                           const TrainConfig& cfg, const std::function<void(const TrainProgress&)>& progress = {});

}  // namespace o2mag::denoiser
