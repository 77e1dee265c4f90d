#include "o2mag/pipeline/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "o2mag/common/parallel.hpp"
#include "o2mag/common/random.hpp"

namespace o2mag::pipeline {

using edit::Branch;

BranchRun run_branch(const denoiser::Denoiser& model, const sched::Scheduler& sched, const Image& image,
                     const Tensor& embedding, Branch branch) {
  BranchRun run;
  run.branch = branch;
  run.trajectory = sched::ddim_invert(model, sched, image, embedding);
  run.evaluations = run.trajectory.latents.size() - 1;
  const auto hook = edit::capture_hook(run.captures, branch);
  const auto& anchors = sched.anchors();
  for (int s = 1; s <= sched.steps(); ++s) {
    const auto idx = static_cast<std::size_t>(s - 1);
    model.predict_noise(run.trajectory.latents[idx], anchors[idx], run.trajectory.embedding, &hook, s);
    ++run.evaluations;
  }
  return run;
}

namespace {

std::vector<std::size_t> attention_resolutions(const denoiser::Denoiser& model) {
  std::set<std::size_t> r;
  for (const auto& l : model.attention_layers()) r.insert(l.resolution);
  return {r.begin(), r.end()};
}

void clamp_image(Image& img) {
  for (auto& v : img.data()) v = std::clamp(v, -1.0f, 1.0f);
}

std::string format_float(double v) {
  std::ostringstream os;
  os.precision(9);
  os << v;
  return os.str();
}

std::string join_indices(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

}  // namespace

TargetResult run_target(const denoiser::Denoiser& model, const sched::Scheduler& sched, const BranchRun& reference,
                        const BranchRun& normal, const BinaryMask& ref_mask, const BinaryMask& target_mask,
                        const Tensor& e_pos, const Tensor& e_neg, const edit::EditPolicy& policy, float guidance) {
  sched.check_anchors(reference.trajectory);
  sched.check_anchors(normal.trajectory);
  policy.validate(sched.steps());
  const auto res = attention_resolutions(model);
  edit::EditSession session(policy, edit::MaskPyramid::build(ref_mask, res), edit::MaskPyramid::build(target_mask, res),
                            reference.captures, normal.captures);
  TargetResult out;
  const auto pos_hook = session.hook(true, &out.log);
  const auto neg_hook = session.hook(false);
  const auto& anchors = sched.anchors();
  Tensor z = normal.trajectory.noise();
  for (int s = 1; s <= sched.steps(); ++s) {
    const int t = anchors[static_cast<std::size_t>(s - 1)], t_prev = anchors[static_cast<std::size_t>(s)];
    Tensor eps = model.predict_noise(z, t, e_pos, &pos_hook, s);
    ++out.evaluations;
    if (guidance != 1.0f) {
      eps = sched::cfg_combine(eps, model.predict_noise(z, t, e_neg, &neg_hook, s), guidance);
      ++out.evaluations;
    }
    z = sched.ddim_step(z, eps, t, t_prev);
    if (!z.all_finite()) throw std::runtime_error("target branch: non-finite latent after step " + std::to_string(s));
  }
  clamp_image(z);
  out.image = std::move(z);
  out.warnings = session.warnings();
  return out;
}

Image normal_reconstruction(const denoiser::Denoiser& model, const sched::Scheduler& sched, const BranchRun& normal) {
  const Tensor& e = normal.trajectory.embedding;
  Image img = sched.sample(normal.trajectory.noise(), [&](const Tensor& z, int t, int) { return model.predict_noise(z, t, e); });
  clamp_image(img);
  return img;
}

void GenerationRequest::validate() const {
  if (ref_image.ndim() != 3 || ref_image.shape() != normal_image.shape()) {
    throw std::invalid_argument("generate: reference " + shape_string(ref_image.shape()) + " and normal " +
                                shape_string(normal_image.shape()) + " images must share a [C, H, W] shape");
  }
  const std::size_t h = ref_image.dim(1), w = ref_image.dim(2);
  for (const auto* m : {&ref_mask, &target_mask}) {
    if (m->height != h || m->width != w) {
      throw std::invalid_argument("generate: mask " + std::to_string(m->height) + "x" + std::to_string(m->width) +
                                  " does not match image " + std::to_string(h) + "x" + std::to_string(w));
    }
  }
  if (ref_mask.area() == 0) throw std::invalid_argument("generate: reference mask is empty");
  if (target_mask.area() == 0) throw std::invalid_argument("generate: target mask is empty");
  if (e_star && !ago) throw std::invalid_argument("generate: an optimized embedding was supplied with AGO disabled");
}

edit::EditPolicy effective_policy(const GenerationRequest& req, const denoiser::Denoiser& model) {
  auto p = req.policy ? *req.policy : edit::EditPolicy::defaults_for(model);
  if (!req.dae) p.disable_dae();
  return p;
}

KeyValues policy_kv(const edit::EditPolicy& p) {
  KeyValues kv;
  kv.set("graft_start", std::to_string(p.graft_start));
  kv.set("graft_layers", join_indices(p.graft_layers));
  kv.set("self_enhance", std::to_string(p.self_enhance.lo) + "," + std::to_string(p.self_enhance.hi));
  kv.set("cross_enhance", std::to_string(p.cross_enhance.lo) + "," + std::to_string(p.cross_enhance.hi));
  kv.set("gamma", format_float(p.gamma));
  kv.set("tau_fg", format_float(p.tau_fg));
  kv.set("cross_scale", format_float(p.cross_scale));
  kv.set("anomaly_index", std::to_string(p.anomaly_index));
  return kv;
}

GenerationRecord generate(const GenerationRequest& req, const denoiser::Denoiser& model, const sched::Scheduler& sched) {
  req.validate();
  const auto policy = effective_policy(req, model);
  const float g = req.guidance.value_or(sched.config().guidance);
  const auto& vocab = model.vocab();

  GenerationRecord rec;
  rec.provenance = policy_kv(policy);
  Tensor e_ref;
  if (req.ago && req.e_star) {
    e_ref = *req.e_star;
    rec.provenance.set("embedding", "supplied");
  } else if (req.ago) {
    auto cfg = req.ago_config;
    cfg.seed = req.seed;
    auto stored = ago::anomaly_embedding(req.ref_image, req.ref_cls, req.anomaly, model, sched, cfg, req.ago_cache);
    e_ref = std::move(stored.embedding);
    rec.provenance.set("embedding", "optimized");
    for (const auto& [k, v] : stored.provenance.entries()) rec.provenance.set("ago." + k, v);
  } else {
    e_ref = model.encode_prompt(vocab.anomaly_prompt(req.ref_cls, req.anomaly));
    rec.provenance.set("embedding", "text");
  }
  const Tensor e_nor = model.encode_prompt(vocab.normal_prompt(req.cls));
  const Tensor e_neg = ago::build_negative_embedding(model, req.negative);

  const auto ref = run_branch(model, sched, req.ref_image, e_ref, Branch::reference);
  const auto nor = run_branch(model, sched, req.normal_image, e_nor, Branch::normal);
  auto target = run_target(model, sched, ref, nor, req.ref_mask, req.target_mask, e_ref, e_neg, policy, g);

  rec.image = std::move(target.image);
  rec.mask = req.target_mask;
  rec.log = std::move(target.log);
  rec.warnings = std::move(target.warnings);
  rec.provenance.set("seed", std::to_string(req.seed));
  rec.provenance.set("guidance", format_float(g));
  rec.provenance.set("steps", std::to_string(sched.steps()));
  rec.provenance.set("evaluations", std::to_string(ref.evaluations + nor.evaluations + target.evaluations));
  rec.provenance.set("dae", req.dae ? "on" : "off");
  rec.provenance.set("ago", req.ago ? "on" : "off");
  rec.provenance.set("ref_class", req.ref_cls);
  rec.provenance.set("class", req.cls);
  rec.provenance.set("anomaly", req.anomaly);
  std::string neg;
  for (std::size_t i = 0; i < req.negative.size(); ++i) neg += (i ? ";" : "") + req.negative[i];
  rec.provenance.set("negative", neg);
  rec.provenance.set("embedding_hash", std::to_string(hash_tensor(e_ref)));
  return rec;
}

void write_record(const std::filesystem::path& dir, const GenerationRecord& rec) {
  std::filesystem::create_directories(dir);
  write_png(dir / "image.png", rec.image);
  write_mask_png(dir / "mask.png", rec.mask);
  edit::write_log(dir / "edit_log.tsv", rec.log);
  std::ofstream out(dir / "record.txt", std::ios::binary);
  out << rec.provenance.serialize();
  for (const auto& w : rec.warnings) out << "# warning: " << w << "\n";
  if (!out) throw std::runtime_error("failed writing " + (dir / "record.txt").string());
}

// ---------------------------------------------------------------------------

KeyValues BatchOptions::to_kv() const {
  KeyValues kv = ago_config.to_kv();
  kv.set("count", std::to_string(count));
  kv.set("seed", std::to_string(seed));
  kv.set("dae", dae ? "true" : "false");
  kv.set("ago", ago ? "true" : "false");
  kv.set("source_class", source_class);
  kv.set("defect", defect);
  kv.set("target_class", target_class);
  std::string neg;
  for (std::size_t i = 0; i < negative.size(); ++i) neg += (i ? ";" : "") + negative[i];
  kv.set("negative", neg);
  kv.set("graft_layers", graft_layers);
  if (guidance) kv.set("guidance", format_float(*guidance));
  return kv;
}

BatchOptions BatchOptions::from_kv(const KeyValues& kv) {
  BatchOptions o;
  o.ago_config = ago::AgoConfig::from_kv(kv);
  o.count = static_cast<std::size_t>(kv.get_int("count", 0));
  o.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<long long>(o.seed)));
  o.dae = kv.get_bool("dae", true);
  o.ago = kv.get_bool("ago", true);
  o.source_class = kv.get("source_class", "");
  o.defect = kv.get("defect", "");
  o.target_class = kv.get("target_class", "");
  o.negative = ago::split_phrases(kv.get("negative", ""));
  o.graft_layers = kv.get("graft_layers", o.graft_layers);
  if (kv.has("guidance")) o.guidance = static_cast<float>(kv.get_double("guidance", 0));
  o.workers = static_cast<std::size_t>(kv.get_int("workers", 0));
  return o;
}

std::vector<PlannedItem> plan_batch(const dataset::Manifest& manifest, const BatchOptions& opt) {
  std::vector<PlannedItem> items;
  if (opt.count == 0) return items;
  const auto refs = manifest.select("reference", opt.source_class, opt.defect);
  if (refs.empty()) {
    throw std::invalid_argument("generate-batch: no reference records for class '" + opt.source_class +
                                "' and defect '" + opt.defect + "'");
  }
  for (std::size_t i = 0; i < opt.count; ++i) {
    PlannedItem it;
    it.index = i;
    it.reference = refs[i % refs.size()];
    it.cls = opt.target_class.empty() ? it.reference->cls : opt.target_class;
    it.zero_shot = it.cls != it.reference->cls;
    const auto normals = manifest.select("train-normal", it.cls);
    if (normals.empty()) throw std::invalid_argument("generate-batch: no train-normal images for class " + it.cls);
    Rng rng(derive_seed(opt.seed, "normal", i));
    const auto* src = normals[std::uniform_int_distribution<std::size_t>(0, normals.size() - 1)(rng)];
    it.normal_source = src->image;
    it.normal_image = dataset::augment_normal(manifest.image(*src), dataset::augment_policy_for(it.cls), rng);
    quantize_to_u8_grid(it.normal_image);
    it.target_mask = dataset::gen_target_masks(it.cls, it.reference->defect, 1, derive_seed(opt.seed, "mask", i)).front();
    items.push_back(std::move(it));
  }
  return items;
}

std::map<std::pair<std::string, std::string>, ago::StoredEmbedding> pair_embeddings(
    const dataset::Manifest& manifest, const std::vector<PlannedItem>& items, const denoiser::Denoiser& model,
    const sched::Scheduler& sched, const ago::AgoConfig& cfg, const std::filesystem::path& cache_dir) {
  std::vector<std::pair<std::string, std::string>> pairs;
  for (const auto& it : items) pairs.emplace_back(it.reference->cls, it.reference->defect);
  std::sort(pairs.begin(), pairs.end());
  pairs.erase(std::unique(pairs.begin(), pairs.end()), pairs.end());
  std::vector<ago::StoredEmbedding> out(pairs.size());
  parallel_for(pairs.size(), worker_count(), [&](std::size_t i) {
    const auto* first = manifest.select("reference", pairs[i].first, pairs[i].second).front();
    out[i] = ago::anomaly_embedding(manifest.image(*first), pairs[i].first, pairs[i].second, model, sched, cfg, cache_dir);
    out[i].provenance.set("reference", first->image);
  });
  std::map<std::pair<std::string, std::string>, ago::StoredEmbedding> m;
  for (std::size_t i = 0; i < pairs.size(); ++i) m.emplace(pairs[i], std::move(out[i]));
  return m;
}

void check_failure_rate(std::size_t failed, std::size_t total) {
  if (failed * 10 > total) {
    throw std::runtime_error(std::to_string(failed) + " of " + std::to_string(total) +
                             " generations failed (more than 10%)");
  }
}

std::vector<BatchItem> generate_batch(const dataset::Manifest& manifest, const denoiser::Denoiser& model,
                                      const sched::Scheduler& sched, const BatchOptions& opt) {
  auto plan = plan_batch(manifest, opt);
  std::map<std::pair<std::string, std::string>, ago::StoredEmbedding> embeddings;
  if (opt.ago) embeddings = pair_embeddings(manifest, plan, model, sched, opt.ago_config, opt.ago_cache);
  auto policy = edit::EditPolicy::defaults_for(model);
  policy.graft_layers = edit::resolve_graft_layers(opt.graft_layers, model);

  std::vector<BatchItem> items(plan.size());
  parallel_for(plan.size(), opt.workers ? opt.workers : worker_count(), [&](std::size_t i) {
    auto& item = items[i];
    item.plan = std::move(plan[i]);
    const auto& p = item.plan;
    try {
      GenerationRequest req;
      req.ref_image = manifest.image(*p.reference);
      req.ref_mask = manifest.mask(*p.reference);
      req.normal_image = p.normal_image;
      req.target_mask = p.target_mask;
      req.ref_cls = p.reference->cls;
      req.cls = p.cls;
      req.anomaly = p.reference->defect;
      req.negative = opt.negative;
      req.seed = derive_seed(opt.seed, "item", i);
      req.dae = opt.dae;
      req.ago = opt.ago;
      req.policy = policy;
      req.guidance = opt.guidance;
      KeyValues ago_prov;
      if (opt.ago) {
        const auto& stored = embeddings.at({p.reference->cls, p.reference->defect});
        req.e_star = stored.embedding;
        ago_prov = stored.provenance;
      }
      auto rec = generate(req, model, sched);
      for (const auto& [k, v] : ago_prov.entries()) rec.provenance.set("ago." + k, v);
      rec.provenance.set("reference", p.reference->image);
      rec.provenance.set("normal_source", p.normal_source);
      rec.provenance.set("batch_seed", std::to_string(opt.seed));
      rec.provenance.set("item", std::to_string(i));
      rec.provenance.set("zero_shot", p.zero_shot ? "true" : "false");
      item.record = std::move(rec);
    } catch (const std::exception& e) {
      item.error = e.what();
    }
  });
  const auto failed = static_cast<std::size_t>(std::count_if(items.begin(), items.end(), [](const BatchItem& b) { return !b.record; }));
  check_failure_rate(failed, items.size());
  return items;
}

namespace {

std::string item_dir(std::size_t i) {
  std::ostringstream os;
  os << "item_";
  os.width(4);
  os.fill('0');
  os << i;
  return os.str();
}

}  // namespace

std::filesystem::path write_batch(const std::filesystem::path& dir, const std::vector<BatchItem>& items) {
  std::filesystem::create_directories(dir);
  std::ofstream idx(dir / "records.tsv", std::ios::binary);
  idx << "id\timage\tmask\tclass\tanomaly\tref_class\tzero_shot\treference\n";
  std::ofstream fail(dir / "failures.tsv", std::ios::binary);
  fail << "id\terror\n";
  for (const auto& it : items) {
    const auto sub = item_dir(it.plan.index);
    if (!it.record) {
      fail << sub << "\t" << it.error << "\n";
      continue;
    }
    write_record(dir / sub, *it.record);
    idx << sub << "\t" << sub << "/image.png\t" << sub << "/mask.png\t" << it.plan.cls << "\t" << it.plan.reference->defect
        << "\t" << it.plan.reference->cls << "\t" << (it.plan.zero_shot ? "true" : "false") << "\t"
        << it.plan.reference->image << "\n";
  }
  if (!idx || !fail) throw std::runtime_error("failed writing batch index under " + dir.string());
  return dir / "records.tsv";
}

std::vector<GeneratedPair> read_batch(const std::filesystem::path& dir) {
  std::ifstream in(dir / "records.tsv");
  if (!in) throw std::runtime_error("cannot read " + (dir / "records.tsv").string());
  std::string line;
  std::getline(in, line);
  std::vector<GeneratedPair> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split(line, '\t');
    if (f.size() != 8) {
      throw std::runtime_error((dir / "records.tsv").string() + ":" + std::to_string(lineno) + ": expected 8 fields");
    }
    out.push_back({dir / f[1], dir / f[2], f[3], f[4], f[5], f[6] == "true"});
  }
  return out;
}

}  // namespace o2mag::pipeline
