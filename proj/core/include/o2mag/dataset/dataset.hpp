#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "o2mag/common/image.hpp"
#include "o2mag/common/random.hpp"

namespace o2mag::dataset {

inline constexpr std::size_t kImageSize = 32;

const std::vector<std::string>& texture_classes();
const std::vector<std::string>& defect_types();
void check_class(const std::string& cls);
void check_defect(const std::string& defect);

struct TextureParams {
  std::string cls;
  int period = 8;          // grid cell / stripe wavelength in pixels
  int line_width = 1;      // grid only
  float angle = 0.0f;      // stripes only, radians from horizontal
  int phase_x = 0, phase_y = 0;
  float phase = 0.0f;
  std::array<float, 3> base{};
  std::array<float, 3> accent{};
  float noise = 0.03f;
  int spots = 0;           // speckle only
};

/// Generator parameters for (class, seed). gen_normal renders exactly these.
TextureParams texture_params(const std::string& cls, std::uint64_t seed);
Image render_texture(const TextureParams& p, std::uint64_t noise_seed, std::size_t size = kImageSize);
Image gen_normal(const std::string& cls, std::uint64_t seed);

struct DefectSpec {
  std::string type;
  std::size_t min_area = 0;
  std::size_t max_area = 0;
  float intensity = 1.0f;
};
DefectSpec default_defect_spec(const std::string& type);

/// Soft coverage in [0, 1] of one defect shape; the binary support is alpha > 0.5.
/// Areas outside [min_area, max_area] are resampled.
std::vector<float> sample_defect_alpha(const DefectSpec& spec, Rng& rng, std::size_t size = kImageSize);

struct DefectSample {
  Image image;
  Image normal;
  BinaryMask mask;
};

/// Composites one defect onto gen_normal(cls, derive_seed(seed, "normal")).
/// Pixels outside the mask equal the normal image exactly; every mask pixel differs.
DefectSample gen_defect(const std::string& cls, const DefectSpec& spec, std::uint64_t seed);

/// Applies a defect with the given support to an arbitrary image (used for
/// grafting-free synthesis baselines and tests).
Image composite_defect(const Image& normal, const std::string& type, const std::vector<float>& alpha,
                       float intensity, Rng& rng);

/// Non-empty masks from the same shape family as gen_defect.
std::vector<BinaryMask> gen_target_masks(const std::string& cls, const std::string& defect, std::size_t count,
                                         std::uint64_t seed);

enum class Transform { identity, shift, flip_h, flip_v, rot90, rot180, rot270 };
std::string transform_name(Transform t);

struct AugmentPolicy {
  std::vector<Transform> transforms;
};
/// Orientation-sensitive classes (stripes) are restricted to flips.
AugmentPolicy augment_policy_for(const std::string& cls);
Image apply_transform(const Image& img, Transform t, int dx = 0, int dy = 0);
Image augment_normal(const Image& img, const AugmentPolicy& policy, Rng& rng);

struct Record {
  std::string image;  // relative to the manifest directory
  std::string mask;   // "-" for normal images
  std::string cls;
  std::string defect;  // "good" for normal images
  std::string split;   // reference | test | train-normal
  std::uint64_t seed = 0;
};

struct Manifest {
  std::filesystem::path root;
  std::vector<Record> records;

  std::vector<const Record*> select(const std::string& split, const std::string& cls = "",
                                    const std::string& defect = "") const;
  std::filesystem::path path_of(const std::string& rel) const { return root / rel; }
  Image image(const Record& r) const;
  BinaryMask mask(const Record& r) const;

  void save(const std::filesystem::path& file) const;
  static Manifest load(const std::filesystem::path& file);
};

struct DatasetConfig {
  std::uint64_t seed = 20240611;
  std::size_t references_per_pair = 60;
  std::size_t tests_per_pair = 120;
  std::size_t test_good_per_class = 60;
  std::size_t train_normal_per_class = 100;
};

/// Writes PNGs and manifest.tsv under dir; returns the manifest.
Manifest build_dataset(const DatasetConfig& cfg, const std::filesystem::path& dir);

}  // namespace o2mag::dataset
