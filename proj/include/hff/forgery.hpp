#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "hff/image.hpp"

namespace hff {

enum class Method { kNone, kA, kB, kC, kD };

inline constexpr std::array<Method, 4> kForgeryMethods{Method::kA, Method::kB, Method::kC, Method::kD};

std::string to_string(Method m);
Method parse_method(const std::string& text);

struct ForgerySample {
  Image8 image;  // RGB
  int label = 0;  // 0 real, 1 fake
  Method method = Method::kNone;
  Image8 mask;   // gray: 0 outside, 255 in the core, intermediate in the feather band
  double camera_sigma = 0.0;
};

/// Generator constants for the synthetic forgery families; defaults are the
/// values used throughout the tests and acceptance runs.
struct ForgeryParams {
  double blur_sigma_min = 1.0, blur_sigma_max = 2.0;      // A
  int block_size = 8, quant_step = 16;                    // B: 256 / 16 levels
  double noise_std_min = 4.0, noise_std_max = 8.0;        // C
  int resample_factor = 2;                                // D
  double ellipse_radius_min = 0.10, ellipse_radius_max = 0.25;  // fraction of image size
  double rect_side_min = 0.20, rect_side_max = 0.45;
  double feather_min = 1.5, feather_max = 3.0;            // Gaussian feather std, pixels
  double min_support = 0.05;                              // fraction of image area
  // Sensor-noise std of the pristine and donor images; the two always differ
  // by at least `min_sigma_gap`.
  double base_sigma_min = 0.5, base_sigma_max = 1.5;
  double donor_sigma_min = 0.5, donor_sigma_max = 5.0;
  double min_sigma_gap = 1.0;
};

/// Smooth colour field + soft shapes + Gaussian sensor noise, clipped to 8 bits.
Image8 gen_base_image(std::uint64_t seed, int size, double camera_sigma);

/// Two-stage forgery: the donor patch is altered per method family, then
/// blended into `base` under a mask with mean-colour correction.
ForgerySample forge(const Image8& base, double base_sigma, const Image8& donor, double donor_sigma, Method method,
                    std::uint64_t seed, const ForgeryParams& params = {});

/// Builds a sample from an explicit alpha mask (values in [0,1]). Rejects masks
/// whose support covers less than `params.min_support` of the image.
ForgerySample blend_with_mask(const Image8& base, double base_sigma, const Image8& patch, Method method,
                              const std::vector<double>& alpha, const ForgeryParams& params = {});

/// Raw alpha blend with an 8-bit mask; pixels where the mask is 0 are copied
/// from `base` unchanged.
Image8 alpha_blend(const Image8& base, const Image8& patch, const Image8& mask);

// Stage-one creation ops, exposed for tests.
Image8 gaussian_blur(const Image8& image, double sigma);
Image8 block_quantize(const Image8& image, int block, int step);
Image8 add_noise(const Image8& image, double stddev, std::uint64_t seed);
Image8 down_up_resample(const Image8& image, int factor);

struct ManifestRecord {
  std::string path;  // relative to the dataset directory
  int label = 0;
  Method method = Method::kNone;
  std::string video_id;
  double camera_sigma = 0.0;
  std::string digest;  // FNV-1a 64 of the PNG bytes, hex
  // Method family whose forgeries were derived from this real image
  // (kNone for fakes); derived from the video id.
  Method source_method() const;
};

struct DatasetManifest {
  int version = 1;
  std::uint64_t seed = 0;
  std::map<std::string, std::vector<ManifestRecord>> splits;

  const std::vector<ManifestRecord>& split(const std::string& name) const;
  std::string digest() const;
};

struct DatasetConfig {
  std::uint64_t seed = 1;
  int size = 64;
  int group_size = 5;  // consecutive frames sharing a video id
  // split -> method -> number of fakes (each paired with one real)
  std::map<std::string, std::map<Method, int>> counts;
  ForgeryParams forgery;

  static DatasetConfig per_method(std::uint64_t seed, int per_method, int size);
};

/// The sample at (split, method, index), generated in isolation.
std::pair<ForgerySample, ForgerySample> generate_pair(const DatasetConfig& config, const std::string& split,
                                                      Method method, int index);

DatasetManifest build_dataset(const DatasetConfig& config, const std::string& out_dir);

nlohmann::json to_json(const DatasetManifest& manifest);
DatasetManifest manifest_from_json(const nlohmann::json& j);
DatasetManifest load_manifest(const std::string& dataset_dir);
void save_manifest(const DatasetManifest& manifest, const std::string& dataset_dir);

/// Path of the tamper mask written next to a fake sample.
std::string mask_path(const std::string& image_path);

std::string file_digest(const std::string& path);

/// Re-hashes every file and throws IoError on a missing or altered file.
void verify_manifest(const DatasetManifest& manifest, const std::string& dataset_dir);

}  // namespace hff
