#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "o2mag/ago/ago.hpp"
#include "o2mag/dataset/dataset.hpp"
#include "o2mag/edit/attention_edit.hpp"
#include "o2mag/scheduler/scheduler.hpp"

namespace o2mag::pipeline {

/// One branch replayed along its own inversion: the trajectory plus the
/// self-attention K, V seen at every sampling step.
struct BranchRun {
  edit::Branch branch = edit::Branch::normal;
  sched::InversionTrajectory trajectory;
  edit::CaptureStore captures;
  std::size_t evaluations = 0;  // model calls: inversion plus replay
};

/// Inverts `image` under `embedding` (guidance 1), then evaluates the model at
/// each stored latent to record K, V. 2 x S model evaluations.
BranchRun run_branch(const denoiser::Denoiser& model, const sched::Scheduler& sched, const Image& image,
                     const Tensor& embedding, edit::Branch branch);

struct TargetResult {
  Image image;  // clamped to [-1, 1]
  std::vector<edit::EditDecision> log;  // conditional pass
  std::vector<std::string> warnings;
  std::size_t evaluations = 0;  // model calls over both guidance passes
};

/// Denoises the target from the normal branch's noise with edit hooks on both
/// guidance passes. e_pos conditions the positive pass, e_neg the negative one.
TargetResult run_target(const denoiser::Denoiser& model, const sched::Scheduler& sched, const BranchRun& reference,
                        const BranchRun& normal, const BinaryMask& ref_mask, const BinaryMask& target_mask,
                        const Tensor& e_pos, const Tensor& e_neg, const edit::EditPolicy& policy, float guidance);

/// Plain sampling from the normal branch's noise with its own embedding at guidance 1.
Image normal_reconstruction(const denoiser::Denoiser& model, const sched::Scheduler& sched, const BranchRun& normal);

struct GenerationRequest {
  Image ref_image;
  BinaryMask ref_mask;
  Image normal_image;
  BinaryMask target_mask;
  std::string ref_cls;  // class shown in the reference
  std::string cls;      // class of the normal image
  std::string anomaly;
  std::vector<std::string> negative;  // phrases; empty = null prompt
  std::uint64_t seed = 0;
  bool dae = true;
  bool ago = true;
  std::optional<Tensor> e_star;  // used instead of optimizing when set (AGO on)
  std::optional<edit::EditPolicy> policy;
  std::optional<float> guidance;
  ago::AgoConfig ago_config;
  std::filesystem::path ago_cache;

  void validate() const;
};

struct GenerationRecord {
  Image image;
  BinaryMask mask;  // exactly the requested target mask
  std::vector<edit::EditDecision> log;
  KeyValues provenance;  // seeds, policy values, embedding source
  std::vector<std::string> warnings;
};

GenerationRecord generate(const GenerationRequest& req, const denoiser::Denoiser& model, const sched::Scheduler& sched);

/// Policy and guidance with the request's overrides applied (DAE off empties the enhancement ranges).
edit::EditPolicy effective_policy(const GenerationRequest& req, const denoiser::Denoiser& model);
KeyValues policy_kv(const edit::EditPolicy& p);

/// image.png, mask.png, edit_log.tsv, record.txt under dir.
void write_record(const std::filesystem::path& dir, const GenerationRecord& rec);

// ---------------------------------------------------------------------------
// Batches

struct BatchOptions {
  std::size_t count = 0;
  std::uint64_t seed = 1;
  bool dae = true;
  bool ago = true;
  std::string source_class;  // restrict references to this class (empty = all)
  std::string defect;        // restrict references to this defect (empty = all)
  std::string target_class;  // graft onto this class's normals (empty = the reference's class)
  std::vector<std::string> negative;
  std::string graft_layers = "decoder";
  std::optional<float> guidance;
  ago::AgoConfig ago_config;
  std::filesystem::path ago_cache;
  std::size_t workers = 0;  // 0 = worker_count()

  KeyValues to_kv() const;
  static BatchOptions from_kv(const KeyValues& kv);
};

/// Everything needed to run one batch item, before any model evaluation.
struct PlannedItem {
  std::size_t index = 0;
  const dataset::Record* reference = nullptr;
  std::string normal_source;  // manifest path of the normal image before augmentation
  Image normal_image;
  BinaryMask target_mask;
  std::string cls;  // target class
  bool zero_shot = false;
};

/// Round-robin over the selected references; normals are augmented
/// train-normal images of the target class; masks come from gen_target_masks.
std::vector<PlannedItem> plan_batch(const dataset::Manifest& manifest, const BatchOptions& opt);

/// e* for every (class, anomaly) pair appearing in `items`, each optimized on
/// the pair's first reference record.
std::map<std::pair<std::string, std::string>, ago::StoredEmbedding> pair_embeddings(
    const dataset::Manifest& manifest, const std::vector<PlannedItem>& items, const denoiser::Denoiser& model,
    const sched::Scheduler& sched, const ago::AgoConfig& cfg, const std::filesystem::path& cache_dir);

struct BatchItem {
  PlannedItem plan;
  std::optional<GenerationRecord> record;
  std::string error;
};

/// Generates every planned item. Individual failures are recorded; throws when more than 10% fail.
std::vector<BatchItem> generate_batch(const dataset::Manifest& manifest, const denoiser::Denoiser& model,
                                      const sched::Scheduler& sched, const BatchOptions& opt);

/// Writes records.tsv plus one directory per item; returns the records.tsv path.
std::filesystem::path write_batch(const std::filesystem::path& dir, const std::vector<BatchItem>& items);

/// One row of records.tsv.
struct GeneratedPair {
  std::filesystem::path image;
  std::filesystem::path mask;
  std::string cls;
  std::string anomaly;
  std::string ref_cls;
  bool zero_shot = false;
};
std::vector<GeneratedPair> read_batch(const std::filesystem::path& dir);

/// Any item failing when more than 10% of the batch did.
void check_failure_rate(std::size_t failed, std::size_t total);

}  // namespace o2mag::pipeline
