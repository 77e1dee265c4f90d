#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "commands.hpp"
#include "o2mag/evaluation/evaluation.hpp"

namespace o2mag::cli {

namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

fs::path chart_stem(const fs::path& report) { return report.parent_path() / report.stem(); }

struct EvaluateArgs {
  std::string gen, manifest, out;
  eval::SegmenterConfig seg;
  bool no_reference = false;
  bool quiet = false;
};

void run_evaluate(const EvaluateArgs& a) {
  const auto manifest = dataset::Manifest::load(a.manifest);
  const auto pairs = pipeline::read_batch(a.gen);
  auto data = eval::generated_examples(pairs);
  if (!a.no_reference) {
    auto refs = eval::reference_examples(manifest);
    data.insert(data.end(), refs.begin(), refs.end());
  }
  const auto seg = eval::train_segmenter(data, a.seg, nullptr, 50, [&](std::size_t e, double loss) {
    if (!a.quiet) std::fprintf(stderr, "epoch %zu  loss %.5f\n", e + 1, loss);
  });
  const auto det = eval::evaluate_detection(seg, eval::load_test_split(manifest));
  const auto rows = eval::detection_rows(det);
  write_text(a.out, eval::format_report(rows, {"generated pairs: " + std::to_string(pairs.size()),
                                               std::string("reference split: ") + (a.no_reference ? "excluded" : "included"),
                                               "segmenter seed: " + std::to_string(a.seg.seed) +
                                                   ", epochs: " + std::to_string(a.seg.epochs)}));
  eval::write_bar_charts(chart_stem(a.out), rows);
  std::printf("pixel AUROC %.4f  AP %.4f  F1-max %.4f; image AUROC %.4f\n", det.all.pixel.auroc, det.all.pixel.ap,
              det.all.pixel.f1max, det.all.image.auroc);
}

struct AblationArgs {
  std::string ckpt = "denoiser.ckpt";
  std::string manifest, out, images, ago_cache;
  std::size_t count = 200, fidelity = 0;
  std::uint64_t seed = 1;
  float guidance = -1;
  std::vector<std::string> configs;
  eval::SegmenterConfig seg;
  bool quiet = false;
};

void run_ablation_cmd(const AblationArgs& a) {
  const auto model = denoiser::Denoiser::load(a.ckpt);
  const sched::Scheduler sched;
  const auto manifest = dataset::Manifest::load(a.manifest);
  eval::AblationOptions opt;
  opt.batch.count = a.count;
  opt.batch.seed = a.seed;
  opt.batch.ago_cache = a.ago_cache;
  if (a.guidance >= 0) opt.batch.guidance = a.guidance;
  opt.segmenter = a.seg;
  opt.fidelity_items = a.fidelity;
  opt.image_dir = a.images;
  if (!a.quiet) opt.progress = [](const std::string& s) { std::fprintf(stderr, "%s\n", s.c_str()); };
  std::vector<eval::AblationConfig> configs;
  for (const auto& c : eval::standard_ablation()) {
    if (a.configs.empty() || std::find(a.configs.begin(), a.configs.end(), c.name) != a.configs.end()) configs.push_back(c);
  }
  if (configs.empty()) throw std::invalid_argument("ablation: no known configuration selected");
  const auto rows = eval::run_ablation(manifest, model, sched, configs, opt);
  auto report = eval::ablation_rows(rows);
  std::vector<std::string> comments{"pairs per configuration: " + std::to_string(a.count),
                                    "batch seed: " + std::to_string(a.seed)};
  char buf[256];
  for (const auto& r : rows) {
    for (auto& row : eval::detection_rows(r.detection, r.config.name + ":")) report.push_back(row);
    if (r.fidelity.count) {
      std::snprintf(buf, sizeof buf, "%s fidelity over %zu items: background %.6f, outside %.6f, inside %.6f",
                    r.config.name.c_str(), r.fidelity.count, r.fidelity.background_mad, r.fidelity.outside_change,
                    r.fidelity.inside_change);
      comments.emplace_back(buf);
    }
  }
  write_text(a.out, eval::format_report(report, comments));
  eval::write_bar_charts(chart_stem(a.out), eval::ablation_rows(rows));
  for (const auto& r : rows) {
    std::printf("%-10s pixel AUROC %.4f  AP %.4f  F1-max %.4f\n", r.config.name.c_str(), r.detection.all.pixel.auroc,
                r.detection.all.pixel.ap, r.detection.all.pixel.f1max);
  }
}

}  // namespace

void add_evaluation_commands(CLI::App& app) {
  auto ev = std::make_shared<EvaluateArgs>();
  auto* c = app.add_subcommand("evaluate", "Train a segmenter on generated pairs and score it on the test split");
  c->add_option("--gen", ev->gen, "Directory written by generate-batch")->required()->check(CLI::ExistingDirectory);
  c->add_option("--manifest", ev->manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
  c->add_option("--out", ev->out, "Report (TSV); bar charts are written next to it")->required();
  c->add_option("--epochs", ev->seg.epochs, "Segmenter epochs")->capture_default_str();
  c->add_option("--seed", ev->seg.seed, "Segmenter seed")->capture_default_str();
  c->add_flag("--no-reference", ev->no_reference, "Train on generated pairs only");
  c->add_flag("--quiet", ev->quiet, "No per-epoch progress");
  c->callback([ev] { run_evaluate(*ev); });

  auto ab = std::make_shared<AblationArgs>();
  c = app.add_subcommand("ablation", "Compare TriAG-only, TriAG+DAE, TriAG+AGO and full by downstream detection");
  c->add_option("--ckpt", ab->ckpt, "Denoiser checkpoint")->capture_default_str();
  c->add_option("--manifest", ab->manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
  c->add_option("--out", ab->out, "Report (TSV)")->required();
  c->add_option("--count", ab->count, "Pairs per configuration")->capture_default_str();
  c->add_option("--seed", ab->seed, "Batch seed")->capture_default_str();
  c->add_option("--configs", ab->configs, "Subset of configurations by name");
  c->add_option("--fidelity", ab->fidelity, "Items whose background fidelity is measured")->capture_default_str();
  c->add_option("--images", ab->images, "Write generated pairs per configuration here");
  c->add_option("--ago-cache", ab->ago_cache, "Directory caching optimized embeddings");
  c->add_option("--guidance", ab->guidance, "Classifier-free guidance scale");
  c->add_option("--epochs", ab->seg.epochs, "Segmenter epochs")->capture_default_str();
  c->add_flag("--quiet", ab->quiet, "No progress output");
  c->callback([ab] { run_ablation_cmd(*ab); });
}

}  // namespace o2mag::cli
