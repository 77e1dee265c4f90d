#include "o2mag/evaluation/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>

#include "o2mag/common/parallel.hpp"
#include "o2mag/common/random.hpp"

namespace o2mag::eval {

TestSet load_test_split(const dataset::Manifest& manifest, const std::string& cls, const std::string& defect) {
  TestSet t;
  for (const auto* r : manifest.select("test", cls)) {
    if (!defect.empty() && r->defect != defect && r->defect != "good") continue;
    t.images.push_back(manifest.image(*r));
    t.masks.push_back(r->defect == "good" ? BinaryMask(t.images.back().dim(1), t.images.back().dim(2)) : manifest.mask(*r));
    t.cls.push_back(r->cls);
    t.defect.push_back(r->defect);
  }
  if (t.images.empty()) throw std::invalid_argument("test split is empty for class '" + cls + "'");
  return t;
}

std::vector<LabeledImage> reference_examples(const dataset::Manifest& manifest, const std::string& cls,
                                             const std::string& defect) {
  std::vector<LabeledImage> out;
  for (const auto* r : manifest.select("reference", cls, defect)) out.push_back({manifest.image(*r), manifest.mask(*r), r->cls});
  return out;
}

std::vector<LabeledImage> generated_examples(const std::vector<pipeline::GeneratedPair>& pairs) {
  std::vector<LabeledImage> out;
  for (const auto& p : pairs) out.push_back({read_png(p.image), read_mask_png(p.mask), p.cls});
  return out;
}

namespace {

PairScores score_subset(const std::vector<std::vector<float>>& logits, const TestSet& test,
                        const std::vector<std::size_t>& idx) {
  std::vector<float> px, img;
  std::vector<std::uint8_t> px_lab, img_lab;
  for (auto i : idx) {
    px.insert(px.end(), logits[i].begin(), logits[i].end());
    px_lab.insert(px_lab.end(), test.masks[i].bits.begin(), test.masks[i].bits.end());
    img.push_back(*std::max_element(logits[i].begin(), logits[i].end()));
    img_lab.push_back(test.defect[i] == "good" ? 0 : 1);
  }
  return {pixel_metrics(px, px_lab), image_metrics(img, img_lab)};
}

}  // namespace

DetectionResult evaluate_detection(const Segmenter& seg, const TestSet& test) {
  const auto logits = seg.predict_all(test.images);
  DetectionResult r;
  std::vector<std::size_t> all(test.images.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  r.all = score_subset(logits, test, all);
  std::set<std::pair<std::string, std::string>> pairs;
  for (std::size_t i = 0; i < all.size(); ++i)
    if (test.defect[i] != "good") pairs.emplace(test.cls[i], test.defect[i]);
  for (const auto& [cls, defect] : pairs) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < all.size(); ++i) {
      if (test.cls[i] == cls && (test.defect[i] == defect || test.defect[i] == "good")) idx.push_back(i);
    }
    r.per_pair[{cls, defect}] = score_subset(logits, test, idx);
  }
  return r;
}

std::string format_report(const std::vector<ReportRow>& rows, const std::vector<std::string>& comments) {
  std::string out;
  for (const auto& c : comments) out += "# " + c + "\n";
  out += "section\tkey1\tkey2\tauroc\tap\tf1max\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "\t%.6f\t%.6f\t%.6f\n", r.scores.auroc, r.scores.ap, r.scores.f1max);
    out += r.section + "\t" + r.key1 + "\t" + r.key2 + buf;
  }
  return out;
}

std::vector<ReportRow> detection_rows(const DetectionResult& r, const std::string& prefix) {
  std::vector<ReportRow> rows;
  rows.push_back({prefix + "pixel", "all", "all", r.all.pixel});
  rows.push_back({prefix + "image", "all", "all", r.all.image});
  for (const auto& [k, s] : r.per_pair) rows.push_back({prefix + "pixel", k.first, k.second, s.pixel});
  for (const auto& [k, s] : r.per_pair) rows.push_back({prefix + "image", k.first, k.second, s.image});
  return rows;
}

void write_bar_charts(const std::filesystem::path& stem, const std::vector<ReportRow>& rows) {
  static const std::uint8_t palette[][3] = {{52, 101, 164}, {204, 0, 0}, {78, 154, 6}, {196, 160, 0}, {117, 80, 123}};
  const std::size_t bar = 12, gap = 4, group_gap = 12, height = 160, top = 10;
  std::vector<std::size_t> section_of(rows.size());
  std::vector<std::string> sections;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto it = std::find(sections.begin(), sections.end(), rows[i].section);
    section_of[i] = static_cast<std::size_t>(it - sections.begin());
    if (it == sections.end()) sections.push_back(rows[i].section);
  }
  // one group gap per run of equal sections; sections can recur (pixel, image, pixel, ...)
  std::size_t runs = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) runs += i == 0 || section_of[i] != section_of[i - 1];
  const std::size_t width = 2 * gap + rows.size() * (bar + gap) + runs * group_gap;
  for (int metric = 0; metric < 3; ++metric) {
    std::vector<std::uint8_t> rgb(width * height * 3, 255);
    auto put = [&](std::size_t x, std::size_t y, const std::uint8_t* c) {
      std::copy_n(c, 3, rgb.data() + (y * width + x) * 3);
    };
    static const std::uint8_t grid[3] = {220, 220, 220};
    for (double level : {0.25, 0.5, 0.75, 1.0}) {
      const auto y = height - 1 - static_cast<std::size_t>(level * (height - top - 1));
      for (std::size_t x = 0; x < width; ++x) put(x, y, grid);
    }
    std::size_t x = gap;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (i == 0 || section_of[i] != section_of[i - 1]) x += group_gap;
      const double v = metric == 0 ? rows[i].scores.auroc : metric == 1 ? rows[i].scores.ap : rows[i].scores.f1max;
      const auto h = static_cast<std::size_t>(std::lround(std::clamp(v, 0.0, 1.0) * static_cast<double>(height - top - 1)));
      for (std::size_t y = height - h; y < height; ++y)
        for (std::size_t dx = 0; dx < bar; ++dx) put(x + dx, y, palette[section_of[i] % 5]);
      x += bar + gap;
    }
    static const char* names[] = {"auroc", "ap", "f1max"};
    write_rgb8_png(stem.string() + "_" + names[metric] + ".png", rgb, height, width);
  }
}

// ---------------------------------------------------------------------------

std::vector<AblationConfig> standard_ablation() {
  return {{"TriAG-only", false, false}, {"TriAG+DAE", true, false}, {"TriAG+AGO", false, true}, {"full", true, true}};
}

namespace {

struct Variant {
  const std::vector<pipeline::PlannedItem>* plan;
  bool dae;
  bool ago;
};

struct VariantOutput {
  std::vector<std::optional<Image>> images;
  std::vector<std::string> errors;
  FidelityStats fidelity;
};

// Runs every variant over the same normals and masks, sharing branch runs.
std::vector<VariantOutput> generate_variants(const dataset::Manifest& manifest, const denoiser::Denoiser& model,
                                             const sched::Scheduler& sched, const std::vector<Variant>& variants,
                                             const AblationOptions& opt) {
  const auto& first = *variants.front().plan;
  const std::size_t n = first.size();
  for (const auto& v : variants) {
    if (v.plan->size() != n) throw std::invalid_argument("variants must share their plan size");
    for (std::size_t i = 0; i < n; ++i) {
      if ((*v.plan)[i].normal_image != first[i].normal_image || (*v.plan)[i].target_mask != first[i].target_mask) {
        throw std::invalid_argument("variants must share normal images and target masks");
      }
    }
  }
  std::map<std::pair<std::string, std::string>, ago::StoredEmbedding> embeddings;
  std::vector<pipeline::PlannedItem> ago_items;
  for (const auto& v : variants)
    if (v.ago) ago_items.insert(ago_items.end(), v.plan->begin(), v.plan->end());
  if (!ago_items.empty()) {
    if (opt.progress) opt.progress("optimizing embeddings");
    embeddings = pipeline::pair_embeddings(manifest, ago_items, model, sched, opt.batch.ago_config, opt.batch.ago_cache);
  }
  auto base_policy = edit::EditPolicy::defaults_for(model);
  base_policy.graft_layers = edit::resolve_graft_layers(opt.batch.graft_layers, model);
  const float g = opt.batch.guidance.value_or(sched.config().guidance);
  const auto& vocab = model.vocab();
  const Tensor e_neg = ago::build_negative_embedding(model, opt.batch.negative);

  std::vector<VariantOutput> out(variants.size());
  for (auto& o : out) {
    o.images.resize(n);
    o.errors.resize(n);
  }
  struct ItemFidelity {
    bool valid = false;
    std::vector<double> bg, outside, inside;
  };
  std::vector<ItemFidelity> fid(n);
  std::mutex progress_mutex;
  parallel_for(n, opt.batch.workers ? opt.batch.workers : worker_count(), [&](std::size_t i) {
    const auto& item = first[i];
    const auto nor = pipeline::run_branch(model, sched, item.normal_image,
                                          model.encode_prompt(vocab.normal_prompt(item.cls)), edit::Branch::normal);
    std::optional<Image> recon;
    if (i < opt.fidelity_items) {
      recon = pipeline::normal_reconstruction(model, sched, nor);
      fid[i].valid = true;
      fid[i].bg.assign(variants.size(), 0.0);
      fid[i].outside.assign(variants.size(), 0.0);
      fid[i].inside.assign(variants.size(), 0.0);
    }
    std::map<std::pair<std::string, bool>, pipeline::BranchRun> refs;
    std::map<std::pair<std::string, bool>, Tensor> ref_embeddings;
    for (std::size_t v = 0; v < variants.size(); ++v) {
      const auto& it = (*variants[v].plan)[i];
      const bool use_ago = variants[v].ago;
      try {
        const std::pair<std::string, bool> key{it.reference->image, use_ago};
        if (!refs.count(key)) {
          Tensor e = use_ago ? embeddings.at({it.reference->cls, it.reference->defect}).embedding
                             : model.encode_prompt(vocab.anomaly_prompt(it.reference->cls, it.reference->defect));
          refs.emplace(key, pipeline::run_branch(model, sched, manifest.image(*it.reference), e, edit::Branch::reference));
          ref_embeddings.emplace(key, std::move(e));
        }
        auto policy = base_policy;
        if (!variants[v].dae) policy.disable_dae();
        auto res = pipeline::run_target(model, sched, refs.at(key), nor, manifest.mask(*it.reference), it.target_mask,
                                        ref_embeddings.at(key), e_neg, policy, g);
        quantize_to_u8_grid(res.image);
        if (recon) {
          fid[i].bg[v] = background_fidelity(res.image, *recon, it.target_mask);
          fid[i].outside[v] = background_fidelity(res.image, it.normal_image, it.target_mask);
          fid[i].inside[v] = inside_change(res.image, it.normal_image, it.target_mask);
        }
        out[v].images[i] = std::move(res.image);
      } catch (const std::exception& e) {
        out[v].errors[i] = e.what();
      }
    }
    if (opt.progress) {
      std::lock_guard lock(progress_mutex);
      opt.progress("generated item " + std::to_string(i + 1) + "/" + std::to_string(n));
    }
  });
  for (std::size_t v = 0; v < variants.size(); ++v) {
    auto& f = out[v].fidelity;
    for (std::size_t i = 0; i < n; ++i) {
      if (!fid[i].valid || !out[v].images[i]) continue;
      ++f.count;
      f.background_mad += fid[i].bg[v];
      f.outside_change += fid[i].outside[v];
      f.inside_change += fid[i].inside[v];
      f.per_item_background.push_back(fid[i].bg[v]);
    }
    if (f.count) {
      const double c = static_cast<double>(f.count);
      f.background_mad /= c;
      f.outside_change /= c;
      f.inside_change /= c;
    }
  }
  return out;
}

std::vector<LabeledImage> training_set(const std::vector<pipeline::PlannedItem>& plan, const VariantOutput& out,
                                       const std::vector<LabeledImage>& extra) {
  std::vector<LabeledImage> data;
  for (std::size_t i = 0; i < plan.size(); ++i) {
    if (out.images[i]) data.push_back({*out.images[i], plan[i].target_mask, plan[i].cls});
  }
  data.insert(data.end(), extra.begin(), extra.end());
  return data;
}

void write_variant(const std::filesystem::path& dir, const std::vector<pipeline::PlannedItem>& plan,
                   const VariantOutput& out) {
  std::vector<pipeline::BatchItem> items(plan.size());
  for (std::size_t i = 0; i < plan.size(); ++i) {
    items[i].plan = plan[i];
    if (out.images[i]) {
      pipeline::GenerationRecord rec;
      rec.image = *out.images[i];
      rec.mask = plan[i].target_mask;
      rec.provenance.set("reference", plan[i].reference->image);
      rec.provenance.set("normal_source", plan[i].normal_source);
      items[i].record = std::move(rec);
    } else {
      items[i].error = out.errors[i];
    }
  }
  pipeline::write_batch(dir, items);
}

std::size_t failures(const VariantOutput& o) {
  return static_cast<std::size_t>(std::count_if(o.images.begin(), o.images.end(), [](const auto& x) { return !x; }));
}

}  // namespace

std::vector<AblationRow> run_ablation(const dataset::Manifest& manifest, const denoiser::Denoiser& model,
                                      const sched::Scheduler& sched, const std::vector<AblationConfig>& configs,
                                      const AblationOptions& opt) {
  if (configs.empty()) throw std::invalid_argument("ablation: no configurations");
  const auto plan = pipeline::plan_batch(manifest, opt.batch);
  if (plan.empty()) throw std::invalid_argument("ablation: batch count is zero");
  std::vector<Variant> variants;
  for (const auto& c : configs) variants.push_back({&plan, c.dae, c.ago});
  const auto outputs = generate_variants(manifest, model, sched, variants, opt);

  const auto extra = opt.include_reference ? reference_examples(manifest) : std::vector<LabeledImage>{};
  const auto test = load_test_split(manifest);
  std::vector<AblationRow> rows;
  for (std::size_t v = 0; v < configs.size(); ++v) {
    AblationRow row;
    row.config = configs[v];
    row.failed = failures(outputs[v]);
    row.generated = plan.size() - row.failed;
    pipeline::check_failure_rate(row.failed, plan.size());
    if (!opt.image_dir.empty()) write_variant(opt.image_dir / configs[v].name, plan, outputs[v]);
    if (opt.progress) opt.progress("training segmenter for " + configs[v].name);
    const auto seg = train_segmenter(training_set(plan, outputs[v], extra), opt.segmenter);
    row.detection = evaluate_detection(seg, test);
    row.fidelity = outputs[v].fidelity;
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<ReportRow> ablation_rows(const std::vector<AblationRow>& rows) {
  std::vector<ReportRow> out;
  for (const auto& r : rows) out.push_back({"ablation-pixel", r.config.name, "all", r.detection.all.pixel});
  for (const auto& r : rows) out.push_back({"ablation-image", r.config.name, "all", r.detection.all.image});
  return out;
}

ZeroShotResult run_zero_shot(const dataset::Manifest& manifest, const denoiser::Denoiser& model,
                             const sched::Scheduler& sched, const std::string& source_class,
                             const std::string& target_class, const std::string& defect, const AblationOptions& opt) {
  if (source_class == target_class) throw std::invalid_argument("zero-shot: source and target class are the same");
  auto same_opt = opt.batch;
  same_opt.source_class = target_class;
  same_opt.target_class = target_class;
  same_opt.defect = defect;
  auto cross_opt = same_opt;
  cross_opt.source_class = source_class;
  const auto same_plan = pipeline::plan_batch(manifest, same_opt);
  const auto cross_plan = pipeline::plan_batch(manifest, cross_opt);
  if (same_plan.empty()) throw std::invalid_argument("zero-shot: batch count is zero");
  const auto outputs = generate_variants(manifest, model, sched,
                                         {{&same_plan, opt.batch.dae, opt.batch.ago}, {&cross_plan, opt.batch.dae, opt.batch.ago}}, opt);
  const auto test = load_test_split(manifest, target_class, defect);
  ZeroShotResult r;
  r.generated = same_plan.size();
  for (int k = 0; k < 2; ++k) {
    const auto& plan = k == 0 ? same_plan : cross_plan;
    pipeline::check_failure_rate(failures(outputs[static_cast<std::size_t>(k)]), plan.size());
    if (!opt.image_dir.empty()) write_variant(opt.image_dir / (k == 0 ? "same-class" : "cross-class"), plan, outputs[static_cast<std::size_t>(k)]);
    if (opt.progress) opt.progress(k == 0 ? "training same-class segmenter" : "training cross-class segmenter");
    const auto seg = train_segmenter(training_set(plan, outputs[static_cast<std::size_t>(k)], {}), opt.segmenter);
    const auto det = evaluate_detection(seg, test);
    (k == 0 ? r.same_class : r.cross_class) = det.all;
  }
  return r;
}

}  // namespace o2mag::eval
