#include <doctest.h>

#include <cmath>
#include <random>

#include "../support/metric_oracles.hpp"
#include "o2mag/common/random.hpp"
#include "o2mag/dataset/dataset.hpp"
#include "o2mag/evaluation/evaluation.hpp"

using namespace o2mag;
using namespace o2mag::eval;

TEST_CASE("metric examples") {
  SUBCASE("perfect separation") {
    const auto s = pixel_metrics(std::vector<float>{0.9f, 0.1f}, std::vector<std::uint8_t>{1, 0});
    CHECK(s.auroc == 1.0);
    CHECK(s.ap == 1.0);
    CHECK(s.f1max == 1.0);
  }
  SUBCASE("inverted labels") {
    CHECK(pixel_metrics(std::vector<float>{0.9f, 0.1f}, std::vector<std::uint8_t>{0, 1}).auroc == 0.0);
  }
  SUBCASE("four-item case") {
    const std::vector<float> sc{0.8f, 0.6f, 0.4f, 0.2f};
    const std::vector<std::uint8_t> lb{1, 0, 1, 0};
    const auto s = pixel_metrics(sc, lb);
    CHECK(s.auroc == 0.75);
    // thresholds 0.8: P=1 R=.5; 0.6: P=.5 R=.5; 0.4: P=2/3 R=1 -> AP = .5 + .5*2/3
    CHECK(s.ap == doctest::Approx(0.5 + 0.5 * 2.0 / 3.0));
    CHECK(s.f1max == doctest::Approx(0.8));
  }
  SUBCASE("all tied scores give AUROC 0.5") {
    CHECK(pixel_metrics(std::vector<float>{0.3f, 0.3f, 0.3f}, std::vector<std::uint8_t>{1, 0, 0}).auroc == 0.5);
  }
  SUBCASE("single-class labels are rejected with counts") {
    CHECK_THROWS_WITH_AS(pixel_metrics(std::vector<float>{0.1f, 0.2f}, std::vector<std::uint8_t>{1, 1}),
                         doctest::Contains("2 positive, 0 negative"), std::invalid_argument);
    CHECK_THROWS_AS(pixel_metrics(std::vector<float>{0.1f}, std::vector<std::uint8_t>{1, 0}), std::invalid_argument);
  }
  SUBCASE("image metrics") {
    CHECK_THROWS_AS(image_metrics(std::vector<float>{0.5f, 0.5f, 0.5f}, std::vector<std::uint8_t>{1, 0, 1}),
                    std::invalid_argument);
    const auto s = image_metrics(std::vector<float>{3, 2, 1}, std::vector<std::uint8_t>{1, 1, 0});
    CHECK(s.auroc == 1.0);
    CHECK(s.ap == 1.0);
    CHECK(s.f1max == 1.0);
  }
  SUBCASE("six-image hand case") {
    // scores 6..1 with labels 1 0 1 1 0 0
    const std::vector<float> sc{6, 5, 4, 3, 2, 1};
    const std::vector<std::uint8_t> lb{1, 0, 1, 1, 0, 0};
    const auto s = image_metrics(sc, lb);
    CHECK(s.auroc == doctest::Approx(7.0 / 9.0));
    CHECK(s.ap == doctest::Approx((1.0 + 2.0 / 3.0 + 3.0 / 4.0) / 3.0));
    CHECK(s.f1max == doctest::Approx(6.0 / 7.0));
  }
}

TEST_CASE("metrics agree with enumeration oracles") {
  std::mt19937_64 rng(10);
  for (int i = 0; i < 200; ++i) {
    const auto m = o2mag::testing::random_metric_instance(rng);
    const auto s = pixel_metrics(m.scores, m.labels);
    CHECK(std::abs(s.auroc - o2mag::testing::oracle_auroc(m)) <= 1e-12);
    CHECK(std::abs(s.ap - o2mag::testing::oracle_ap(m)) <= 1e-12);
    CHECK(std::abs(s.f1max - o2mag::testing::oracle_f1max(m)) <= 1e-12);
    for (float thr : o2mag::testing::thresholds_desc(m)) CHECK(s.f1max >= o2mag::testing::oracle_f1(m, thr) - 1e-12);
    CHECK(s.auroc >= 0.0);
    CHECK(s.auroc <= 1.0);
    CHECK(s.ap >= 0.0);
    CHECK(s.ap <= 1.0);
  }
}

TEST_CASE("AUROC is invariant under strictly increasing transforms") {
  std::mt19937_64 rng(12);
  for (int i = 0; i < 50; ++i) {
    auto m = o2mag::testing::random_metric_instance(rng);
    const double base = pixel_metrics(m.scores, m.labels).auroc;
    auto t = m.scores;
    for (auto& v : t) v = std::exp(3.0f * v) - 7.0f;
    CHECK(pixel_metrics(t, m.labels).auroc == base);
    for (auto& v : t) v = std::cbrt(v) * 2.0f + 1.0f;
    CHECK(pixel_metrics(t, m.labels).auroc == base);
  }
}

TEST_CASE("random scores against balanced labels average AUROC near one half") {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<float> u(0, 1);
  double mean = 0;
  for (int r = 0; r < 100; ++r) {
    std::vector<float> sc(200);
    std::vector<std::uint8_t> lb(200);
    for (std::size_t i = 0; i < 200; ++i) {
      sc[i] = u(rng);
      lb[i] = i % 2;
    }
    mean += pixel_metrics(sc, lb).auroc / 100.0;
  }
  CHECK(mean >= 0.45);
  CHECK(mean <= 0.55);
}

TEST_CASE("background fidelity") {
  Rng rng(1);
  const Image a = normal_tensor(rng, {3, 32, 32});
  BinaryMask m(32, 32);
  for (std::size_t y = 10; y < 14; ++y)
    for (std::size_t x = 10; x < 14; ++x) m.at(y, x) = 1;
  CHECK(background_fidelity(a, a, m) == 0.0);
  SUBCASE("differences inside the dilated mask do not count") {
    Image b = a;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 8; y < 16; ++y)
        for (std::size_t x = 8; x < 16; ++x) b[(c * 32 + y) * 32 + x] += 1.0f;
    CHECK(background_fidelity(b, a, m) == 0.0);
    CHECK(inside_change(b, a, m) == doctest::Approx(1.0));
  }
  SUBCASE("uniform offset outside") {
    Image b = a;
    for (auto& v : b.data()) v += 0.1f;
    CHECK(background_fidelity(b, a, m) == doctest::Approx(0.1).epsilon(1e-5));
  }
  SUBCASE("whole-image mask is rejected") {
    BinaryMask full(32, 32);
    full.at(16, 16) = 1;
    CHECK_NOTHROW(background_fidelity(a, a, full));
    CHECK_THROWS_AS(background_fidelity(a, a, full, 16), std::invalid_argument);
    CHECK_THROWS_AS(background_fidelity(a, Image({3, 16, 16}), m), std::invalid_argument);
  }
}

namespace {

std::vector<LabeledImage> defect_pairs(std::size_t n, std::uint64_t seed) {
  std::vector<LabeledImage> out;
  const auto& classes = dataset::texture_classes();
  const auto& defects = dataset::defect_types();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& cls = classes[i % classes.size()];
    auto s = dataset::gen_defect(cls, dataset::default_defect_spec(defects[i % defects.size()]), derive_seed(seed, "pair", i));
    out.push_back({s.image, s.mask, cls});
  }
  return out;
}

}  // namespace

TEST_CASE("segmenter") {
  SegmenterConfig cfg;
  cfg.channels = {8, 16, 16, 16};
  SUBCASE("output matches the input size") {
    Segmenter s(cfg);
    CHECK(s.predict(Image({3, 32, 32})).size() == 32 * 32);
    CHECK_THROWS_AS(s.predict(Image({3, 30, 30})), std::invalid_argument);
  }
  SUBCASE("training input checks") {
    CHECK_THROWS_AS(train_segmenter(defect_pairs(10, 1), cfg), std::invalid_argument);
    auto data = defect_pairs(12, 1);
    for (auto& d : data)
      if (d.cls == "grid") d.mask = BinaryMask(32, 32);
    CHECK_THROWS_WITH_AS(train_segmenter(data, cfg, nullptr, 10), doctest::Contains("grid"), std::invalid_argument);
  }
  SUBCASE("deterministic under the seed") {
    cfg.epochs = 1;
    const auto data = defect_pairs(16, 2);
    const auto a = train_segmenter(data, cfg, nullptr, 10);
    const auto b = train_segmenter(data, cfg, nullptr, 10);
    CHECK(a.params() == b.params());
  }
  SUBCASE("overfits ten pairs") {
    cfg.epochs = 200;
    cfg.batch = 10;
    cfg.flips = false;
    const auto data = defect_pairs(10, 3);
    SegmenterTrace trace;
    const auto seg = train_segmenter(data, cfg, &trace, 10);
    CHECK(trace.epoch_losses.back() < trace.epoch_losses.front());
    CHECK(trace.epoch_losses[199] < trace.epoch_losses[9]);
    std::vector<float> px;
    std::vector<std::uint8_t> lb;
    for (const auto& d : data) {
      const auto p = seg.predict(d.image);
      px.insert(px.end(), p.begin(), p.end());
      lb.insert(lb.end(), d.mask.bits.begin(), d.mask.bits.end());
    }
    CHECK(pixel_metrics(px, lb).auroc > 0.99);
  }
}

TEST_CASE("report formatting") {
  const std::vector<ReportRow> rows{{"pixel", "all", "all", {0.5, 0.25, 1.0 / 3.0}}};
  CHECK(format_report(rows, {"seed 1"}) ==
        "# seed 1\nsection\tkey1\tkey2\tauroc\tap\tf1max\npixel\tall\tall\t0.500000\t0.250000\t0.333333\n");
  const auto dir = std::filesystem::temp_directory_path() / "o2mag_test_charts";
  std::filesystem::create_directories(dir);
  write_bar_charts(dir / "r", rows);
  for (const char* m : {"auroc", "ap", "f1max"}) CHECK(std::filesystem::exists(dir / (std::string("r_") + m + ".png")));
  std::filesystem::remove_all(dir);
  CHECK(standard_ablation().size() == 4);
}

TEST_CASE("bar charts fit sections that recur") {
  const Scores full{1.0, 1.0, 1.0};
  const std::vector<ReportRow> rows{{"pixel", "all", "all", full},
                                    {"image", "all", "all", full},
                                    {"pixel", "grid", "hole", full},
                                    {"image", "grid", "hole", full}};
  const auto dir = std::filesystem::temp_directory_path() / "o2mag_test_charts_recur";
  std::filesystem::create_directories(dir);
  write_bar_charts(dir / "r", rows);
  const auto img = read_png(dir / "r_auroc.png");
  const std::size_t h = img.dim(1), w = img.dim(2);
  std::size_t coloured = 0;
  for (std::size_t x = 0; x < w; ++x) coloured += img[(h - 1) * w + x] < 0.99f;  // red channel, bottom row
  CHECK(coloured == 4 * 12);
  std::filesystem::remove_all(dir);
}
