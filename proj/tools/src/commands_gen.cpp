#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "commands.hpp"
#include "o2mag/ago/ago.hpp"
#include "o2mag/common/config.hpp"
#include "o2mag/edit/pca.hpp"
#include "o2mag/pipeline/pipeline.hpp"

namespace o2mag::cli {

namespace fs = std::filesystem;

namespace {

struct AgoArgs {
  std::string ckpt = "denoiser.ckpt";
  std::string ref, mask, cls, anom, out, loss_log, timesteps = "stratified";
  std::size_t steps = 500;
  float lr = 3e-3f;
  std::uint64_t seed = 0;
  bool periodic = false;
};

void run_ago(const AgoArgs& a) {
  const auto model = denoiser::Denoiser::load(a.ckpt);
  const sched::Scheduler sched;
  const Image ref = read_png(a.ref);
  const BinaryMask mask = read_mask_png(a.mask);
  if (mask.height != ref.dim(1) || mask.width != ref.dim(2)) throw std::invalid_argument("ago: mask and image sizes differ");
  ago::AgoConfig cfg;
  cfg.steps = a.steps;
  cfg.lr = a.lr;
  cfg.seed = a.seed;
  cfg.timesteps = ago::parse_rule(a.timesteps);
  cfg.periodic = a.periodic;
  const auto prompt = model.vocab().anomaly_prompt(a.cls, a.anom);
  const auto res = ago::optimize_embedding(model.encode_prompt(prompt), ref, model, sched, cfg);
  KeyValues prov = cfg.to_kv();
  prov.set("class", a.cls);
  prov.set("anomaly", a.anom);
  prov.set("image_hash", std::to_string(hash_tensor(ref)));
  prov.set("mask_area", std::to_string(mask.area()));
  prov.set("model_hash", std::to_string(ago::model_hash(model)));
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", res.losses.empty() ? 0.0 : res.losses.back());
  prov.set("final_loss", buf);
  ago::save_embedding(a.out, res.embedding, prov);
  if (!a.loss_log.empty()) {
    std::ofstream log(a.loss_log);
    log << "step\tloss\n";
    for (std::size_t i = 0; i < res.losses.size(); ++i) log << i + 1 << '\t' << res.losses[i] << '\n';
  }
  if (res.losses.size() >= 500) {
    std::printf("smoothed loss: step 50 %.5f, step %zu %.5f\n", ago::smoothed_loss(res.losses, 50),
                res.losses.size(), ago::smoothed_loss(res.losses, res.losses.size()));
  }
  std::printf("wrote %s\n", a.out.c_str());
}

struct GenerateArgs {
  std::string ckpt = "denoiser.ckpt";
  std::string ref, refmask, normal, targetmask, cls, ref_cls, anom, neg, emb, ago_cache, out, graft_layers = "decoder";
  std::uint64_t seed = 0;
  bool no_dae = false, no_ago = false;
  float guidance = -1;
  float cross_scale = -1;
};

void run_generate(const GenerateArgs& a) {
  const auto model = denoiser::Denoiser::load(a.ckpt);
  const sched::Scheduler sched;
  pipeline::GenerationRequest req;
  req.ref_image = read_png(a.ref);
  req.ref_mask = read_mask_png(a.refmask);
  req.normal_image = read_png(a.normal);
  req.target_mask = read_mask_png(a.targetmask);
  req.cls = a.cls;
  req.ref_cls = a.ref_cls.empty() ? a.cls : a.ref_cls;
  req.anomaly = a.anom;
  req.negative = ago::split_phrases(a.neg);
  req.seed = a.seed;
  req.dae = !a.no_dae;
  req.ago = !a.no_ago;
  if (!a.emb.empty()) req.e_star = ago::load_embedding(a.emb).embedding;
  auto policy = edit::EditPolicy::defaults_for(model);
  policy.graft_layers = edit::resolve_graft_layers(a.graft_layers, model);
  if (a.cross_scale >= 0) policy.cross_scale = a.cross_scale;
  req.policy = policy;
  if (a.guidance >= 0) req.guidance = a.guidance;
  req.ago_cache = a.ago_cache;
  const auto rec = pipeline::generate(req, model, sched);
  pipeline::write_record(a.out, rec);
  for (const auto& w : rec.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  std::printf("wrote %s (%zu logged sites)\n", (fs::path(a.out) / "image.png").c_str(), rec.log.size());
}

struct BatchArgs {
  std::string ckpt = "denoiser.ckpt";
  std::string manifest, out, config, neg, ago_cache;
  pipeline::BatchOptions opt;
  bool no_dae = false, no_ago = false;
  float guidance = -1;
  float cross_scale = -1;
};

void run_generate_batch(BatchArgs a) {
  const auto model = denoiser::Denoiser::load(a.ckpt);
  const sched::Scheduler sched;
  const auto manifest = dataset::Manifest::load(a.manifest);
  auto opt = a.opt;
  if (!a.config.empty()) {
    const auto count = opt.count;
    opt = pipeline::BatchOptions::from_kv(KeyValues::load(a.config));
    if (count) opt.count = count;
  }
  if (a.no_dae) opt.dae = false;
  if (a.no_ago) opt.ago = false;
  if (!a.neg.empty()) opt.negative = ago::split_phrases(a.neg);
  if (a.guidance >= 0) opt.guidance = a.guidance;
  if (!a.ago_cache.empty()) opt.ago_cache = a.ago_cache;
  const auto items = pipeline::generate_batch(manifest, model, sched, opt);
  const auto index = pipeline::write_batch(a.out, items);
  std::ofstream(fs::path(a.out) / "batch.txt") << opt.to_kv().serialize();
  std::size_t failed = 0;
  for (const auto& it : items) failed += it.record ? 0 : 1;
  std::printf("generated %zu of %zu pairs; index %s\n", items.size() - failed, items.size(), index.c_str());
}

struct PcaArgs {
  std::string ckpt = "denoiser.ckpt";
  std::string image, out, cls;
  int step = 25;
  std::size_t layer = 0;
};

void run_pca(const PcaArgs& a) {
  const auto model = denoiser::Denoiser::load(a.ckpt);
  const sched::Scheduler sched;
  if (a.step < 1 || a.step > sched.steps()) {
    throw std::invalid_argument("pca-attn: step must be in 1.." + std::to_string(sched.steps()));
  }
  if (a.layer >= model.attention_layers().size()) {
    throw std::invalid_argument("pca-attn: layer must be below " + std::to_string(model.attention_layers().size()));
  }
  const Image img = read_png(a.image);
  const auto& vocab = model.vocab();
  const Tensor e = model.encode_prompt(a.cls.empty() ? vocab.null_prompt() : vocab.normal_prompt(a.cls));
  const auto traj = sched::ddim_invert(model, sched, img, e);
  std::optional<Tensor> map;
  const denoiser::AttentionHook hook = [&](const denoiser::AttentionSite& site, const Tensor& q, const Tensor& k,
                                           const Tensor&) -> std::optional<Tensor> {
    if (site.kind == denoiser::AttentionKind::self && site.layer == a.layer) map = edit::mean_attention_map(q, k);
    return std::nullopt;
  };
  const auto idx = static_cast<std::size_t>(a.step - 1);
  model.predict_noise(traj.latents[idx], sched.anchors()[idx], e, &hook, a.step);
  if (!map) throw std::runtime_error("pca-attn: layer " + std::to_string(a.layer) + " was not visited");
  Tensor pc = edit::pca_attention(*map);
  for (auto& v : pc.data()) v = 2.0f * v - 1.0f;
  write_png(a.out, pc);
  std::printf("wrote %s (%zux%zu)\n", a.out.c_str(), pc.dim(1), pc.dim(2));
}

}  // namespace

void add_generation_commands(CLI::App& app) {
  auto ag = std::make_shared<AgoArgs>();
  auto* c = app.add_subcommand("ago", "Optimize the anomaly prompt embedding on one reference image");
  c->add_option("--ckpt", ag->ckpt, "Denoiser checkpoint")->capture_default_str();
  c->add_option("--ref", ag->ref, "Reference anomaly image (PNG)")->required()->check(CLI::ExistingFile);
  c->add_option("--mask", ag->mask, "Reference mask (PNG); recorded in the provenance")->required()->check(CLI::ExistingFile);
  c->add_option("--cls", ag->cls, "Class token")->required();
  c->add_option("--anom", ag->anom, "Anomaly token")->required();
  c->add_option("--out", ag->out, "Embedding file")->required();
  c->add_option("--steps", ag->steps, "Optimization steps")->capture_default_str();
  c->add_option("--lr", ag->lr, "Adam learning rate")->capture_default_str();
  c->add_option("--seed", ag->seed, "Seed for timesteps and noise")->capture_default_str();
  c->add_option("--timesteps", ag->timesteps, "uniform or stratified")->capture_default_str();
  c->add_flag("--periodic", ag->periodic, "Reuse the first block's (t, noise) draws in every block");
  c->add_option("--loss-log", ag->loss_log, "Per-step loss (TSV)");
  c->callback([ag] { run_ago(*ag); });

  auto ge = std::make_shared<GenerateArgs>();
  c = app.add_subcommand("generate", "Graft a reference anomaly onto a normal image inside a target mask");
  c->add_option("--ckpt", ge->ckpt, "Denoiser checkpoint")->capture_default_str();
  c->add_option("--ref", ge->ref, "Reference anomaly image")->required()->check(CLI::ExistingFile);
  c->add_option("--refmask", ge->refmask, "Reference mask")->required()->check(CLI::ExistingFile);
  c->add_option("--normal", ge->normal, "Normal image")->required()->check(CLI::ExistingFile);
  c->add_option("--targetmask", ge->targetmask, "Target mask")->required()->check(CLI::ExistingFile);
  c->add_option("--cls", ge->cls, "Class of the normal image")->required();
  c->add_option("--ref-cls", ge->ref_cls, "Class of the reference (defaults to --cls; differs for cross-class transfer)");
  c->add_option("--anom", ge->anom, "Anomaly token")->required();
  c->add_option("--neg", ge->neg, "Negative prompt phrases separated by ';'");
  c->add_option("--seed", ge->seed, "Seed (embedding optimization)")->capture_default_str();
  c->add_option("--emb", ge->emb, "Precomputed embedding from the ago command");
  c->add_option("--ago-cache", ge->ago_cache, "Directory caching optimized embeddings");
  c->add_option("--guidance", ge->guidance, "Classifier-free guidance scale (default from the scheduler)");
  c->add_option("--graft-layers", ge->graft_layers, "decoder, decoder-skip1 or an index list")->capture_default_str();
  c->add_option("--cross-scale", ge->cross_scale, "Anomaly-token cross-attention upweight (default from the policy)");
  c->add_flag("--no-dae", ge->no_dae, "Disable attention enhancement");
  c->add_flag("--no-ago", ge->no_ago, "Use the plain text embedding");
  c->add_option("--out", ge->out, "Output directory")->required();
  c->callback([ge] { run_generate(*ge); });

  auto ba = std::make_shared<BatchArgs>();
  c = app.add_subcommand("generate-batch", "Generate image-mask pairs round-robin over the reference split");
  c->add_option("--ckpt", ba->ckpt, "Denoiser checkpoint")->capture_default_str();
  c->add_option("--manifest", ba->manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
  c->add_option("--count", ba->opt.count, "Number of pairs")->required();
  c->add_option("--out", ba->out, "Output directory")->required();
  c->add_option("--config", ba->config, "key=value batch options");
  c->add_option("--seed", ba->opt.seed, "Batch seed")->capture_default_str();
  c->add_option("--source-class", ba->opt.source_class, "Only references of this class");
  c->add_option("--target-class", ba->opt.target_class, "Graft onto this class (cross-class when it differs)");
  c->add_option("--defect", ba->opt.defect, "Only references of this defect");
  c->add_option("--neg", ba->neg, "Negative prompt phrases separated by ';'");
  c->add_option("--guidance", ba->guidance, "Classifier-free guidance scale");
  c->add_option("--ago-cache", ba->ago_cache, "Directory caching optimized embeddings");
  c->add_flag("--no-dae", ba->no_dae, "Disable attention enhancement");
  c->add_flag("--no-ago", ba->no_ago, "Use the plain text embedding");
  c->callback([ba] { run_generate_batch(*ba); });

  auto pc = std::make_shared<PcaArgs>();
  c = app.add_subcommand("pca-attn", "Visualize a self-attention map by its top principal components");
  c->add_option("--ckpt", pc->ckpt, "Denoiser checkpoint")->capture_default_str();
  c->add_option("--image", pc->image, "Input image")->required()->check(CLI::ExistingFile);
  c->add_option("--step", pc->step, "Sampling step (1 = noisiest)")->capture_default_str();
  c->add_option("--layer", pc->layer, "Attention layer index")->capture_default_str();
  c->add_option("--cls", pc->cls, "Class for the normal prompt (null prompt when omitted)");
  c->add_option("--out", pc->out, "Output PNG")->required();
  c->callback([pc] { run_pca(*pc); });
}

}  // namespace o2mag::cli
