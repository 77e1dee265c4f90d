#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "commands.hpp"
#include "o2mag/common/config.hpp"
#include "o2mag/common/random.hpp"
#include "o2mag/dataset/dataset.hpp"
#include "o2mag/denoiser/training.hpp"

namespace o2mag::cli {

namespace fs = std::filesystem;

namespace {

struct GenDatasetArgs {
  std::string out;
  dataset::DatasetConfig cfg;
};

struct TrainArgs {
  std::string config;
  std::string out;
  std::string log;
  std::string manifest;
  bool quiet = false;
};

void run_gen_dataset(const GenDatasetArgs& a) {
  const auto m = dataset::build_dataset(a.cfg, a.out);
  std::printf("wrote %zu records to %s\n", m.records.size(), (fs::path(a.out) / "manifest.tsv").c_str());
}

void run_train(const TrainArgs& a) {
  const KeyValues kv = KeyValues::load(a.config);
  fs::path manifest_path = a.manifest.empty() ? fs::path(kv.get("manifest")) : fs::path(a.manifest);
  if (a.manifest.empty() && manifest_path.is_relative()) manifest_path = fs::path(a.config).parent_path() / manifest_path;
  const auto manifest = dataset::Manifest::load(manifest_path);
  const auto tcfg = denoiser::TrainConfig::from_kv(kv);
  const auto dcfg = denoiser::DenoiserConfig::from_kv(kv);
  const sched::Scheduler sched;

  denoiser::Denoiser model(dcfg);
  model.init(derive_seed(static_cast<std::uint64_t>(kv.get_int("init_seed", 1)), "pretrain"));
  const auto corpus =
      denoiser::TrainingCorpus::from_manifest(manifest, model.vocab(), kv.get_double("defect_fraction", 0.6));
  std::printf("training %zu parameters for %zu steps on %zu pool images\n", model.parameter_count(), tcfg.steps,
              corpus.pool_size());

  std::ofstream log;
  if (!a.log.empty()) {
    log.open(a.log);
    if (!log) throw std::runtime_error("cannot write " + a.log);
    log << "step\tloss\trunning_loss\tlr\tvalidation_loss\n";
  }
  const auto result = denoiser::train_denoiser(model, corpus, sched, tcfg, [&](const denoiser::TrainProgress& p) {
    if (log) log << p.step << '\t' << p.loss << '\t' << p.running_loss << '\t' << p.lr << '\t' << p.validation_loss << '\n';
    if (!a.quiet && p.validation_loss >= 0) {
      std::printf("step %zu  running loss %.5f  validation %.5f\n", p.step, p.running_loss, p.validation_loss);
      std::fflush(stdout);
    }
  });
  model.save(a.out);
  std::printf("final running loss %.5f; validation %.5f -> %.5f\n", result.final_running_loss,
              result.validation.empty() ? 0.0 : result.validation.front().second,
              result.validation.empty() ? 0.0 : result.validation.back().second);
}

}  // namespace

void add_dataset_commands(CLI::App& app) {
  auto gen = std::make_shared<GenDatasetArgs>();
  auto* g = app.add_subcommand("gen-dataset", "Render the procedural texture/defect corpus and its manifest");
  g->add_option("--out", gen->out, "Output directory")->required();
  g->add_option("--seed", gen->cfg.seed, "Corpus seed");
  g->add_option("--refs", gen->cfg.references_per_pair, "Reference images per (class, defect)");
  g->add_option("--tests", gen->cfg.tests_per_pair, "Test images per (class, defect)");
  g->add_option("--test-good", gen->cfg.test_good_per_class, "Defect-free test images per class");
  g->add_option("--train-normal", gen->cfg.train_normal_per_class, "Training normals per class");
  g->callback([gen] { run_gen_dataset(*gen); });

  auto tr = std::make_shared<TrainArgs>();
  auto* t = app.add_subcommand("train-denoiser", "Train the text-conditioned denoiser");
  t->add_option("--config", tr->config, "key=value config file (manifest, steps, channels, ...)")->required()->check(CLI::ExistingFile);
  t->add_option("--out", tr->out, "Checkpoint path")->required();
  t->add_option("--manifest", tr->manifest, "Overrides the config's manifest (relative paths in the config resolve against its directory)");
  t->add_option("--log", tr->log, "Per-step loss log (TSV)");
  t->add_flag("--quiet", tr->quiet, "Only print the summary");
  t->callback([tr] { run_train(*tr); });
}

}  // namespace o2mag::cli
