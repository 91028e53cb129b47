#include "hff/forgery.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "hff/errors.hpp"
#include "hff/random.hpp"

namespace hff {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Method m) {
  switch (m) {
    case Method::kNone: return "none";
    case Method::kA: return "A";
    case Method::kB: return "B";
    case Method::kC: return "C";
    case Method::kD: return "D";
  }
  return "none";
}

Method parse_method(const std::string& text) {
  if (text == "none") return Method::kNone;
  if (text == "A") return Method::kA;
  if (text == "B") return Method::kB;
  if (text == "C") return Method::kC;
  if (text == "D") return Method::kD;
  throw ContractError("unknown method id '" + text + "' (expected none, A, B, C or D)");
}

namespace {

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

Index reflect_index(Index i, Index n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
  return i;
}

void require_same_rgb(const Image8& a, const Image8& b, const char* what) {
  require(a.channels == 3 && b.channels == 3 && a.width == b.width && a.height == b.height,
          std::string(what) + ": images must be RGB of equal size");
}

}  // namespace

Image8 gen_base_image(std::uint64_t seed, int size, double camera_sigma) {
  require(size >= 32, "gen_base_image: size must be >= 32");
  require(camera_sigma >= 0, "gen_base_image: camera_sigma must be >= 0");
  Rng rng(seed);
  const auto n = static_cast<std::size_t>(size * size);
  std::vector<double> field(n * 3);
  std::array<double, 3> base{};
  for (double& c : base) c = rng.uniform(70.0, 190.0);
  for (std::size_t p = 0; p < n; ++p)
    for (int c = 0; c < 3; ++c) field[p * 3 + c] = base[static_cast<std::size_t>(c)];

  // Low-frequency cosine gradients.
  const int waves = rng.uniform_int(3, 6);
  for (int k = 0; k < waves; ++k) {
    const double amp = rng.uniform(8.0, 30.0);
    std::array<double, 3> tint{};
    for (double& t : tint) t = rng.uniform(-1.0, 1.0);
    const double fx = rng.uniform(-1.5, 1.5), fy = rng.uniform(-1.5, 1.5);
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double v = amp * std::cos(2.0 * std::numbers::pi * (fx * x + fy * y) / size + phase);
        const auto p = static_cast<std::size_t>(y * size + x);
        for (int c = 0; c < 3; ++c) field[p * 3 + c] += tint[static_cast<std::size_t>(c)] * v;
      }
  }

  // Soft-edged elliptical shapes.
  const int shapes = rng.uniform_int(1, 3);
  for (int k = 0; k < shapes; ++k) {
    const double cx = rng.uniform(0.2, 0.8) * size, cy = rng.uniform(0.2, 0.8) * size;
    const double rx = rng.uniform(0.1, 0.3) * size, ry = rng.uniform(0.1, 0.3) * size;
    std::array<double, 3> offset{};
    for (double& o : offset) o = rng.uniform(-50.0, 50.0);
    const double scale = std::min(rx, ry);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double rho = std::hypot((x - cx) / rx, (y - cy) / ry);
        const double weight = 1.0 / (1.0 + std::exp((rho - 1.0) * scale / 0.75));
        const auto p = static_cast<std::size_t>(y * size + x);
        for (int c = 0; c < 3; ++c) field[p * 3 + c] += offset[static_cast<std::size_t>(c)] * weight;
      }
  }

  Image8 image(size, size, 3);
  for (std::size_t i = 0; i < field.size(); ++i) {
    const double noise = camera_sigma > 0 ? camera_sigma * rng.normal() : 0.0;
    image.pixels[i] = to_byte(field[i] + noise);
  }
  return image;
}

Image8 gaussian_blur(const Image8& image, double sigma) {
  require(sigma > 0, "gaussian_blur: sigma must be positive");
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double total = 0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    total += kernel[static_cast<std::size_t>(i + radius)];
  }
  for (double& k : kernel) k /= total;
  const int w = image.width, h = image.height, ch = image.channels;
  std::vector<double> tmp(image.pixels.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < ch; ++c) {
        double acc = 0;
        for (int i = -radius; i <= radius; ++i)
          acc += kernel[static_cast<std::size_t>(i + radius)] * image.at(y, static_cast<int>(reflect_index(x + i, w)), c);
        tmp[static_cast<std::size_t>((y * w + x) * ch + c)] = acc;
      }
  Image8 out(w, h, ch);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < ch; ++c) {
        double acc = 0;
        for (int i = -radius; i <= radius; ++i)
          acc += kernel[static_cast<std::size_t>(i + radius)] *
                 tmp[static_cast<std::size_t>((reflect_index(y + i, h) * w + x) * ch + c)];
        out.at(y, x, c) = to_byte(acc);
      }
  return out;
}

Image8 block_quantize(const Image8& image, int block, int step) {
  require(block > 0 && step > 0, "block_quantize: block and step must be positive");
  Image8 out = image;
  for (int by = 0; by < image.height; by += block)
    for (int bx = 0; bx < image.width; bx += block)
      for (int c = 0; c < image.channels; ++c) {
        const int y1 = std::min(by + block, image.height), x1 = std::min(bx + block, image.width);
        double mean = 0;
        for (int y = by; y < y1; ++y)
          for (int x = bx; x < x1; ++x) mean += image.at(y, x, c);
        mean /= static_cast<double>((y1 - by) * (x1 - bx));
        for (int y = by; y < y1; ++y)
          for (int x = bx; x < x1; ++x)
            out.at(y, x, c) = to_byte(mean + step * std::round((image.at(y, x, c) - mean) / step));
      }
  return out;
}

Image8 add_noise(const Image8& image, double stddev, std::uint64_t seed) {
  Rng rng(seed);
  Image8 out = image;
  for (auto& p : out.pixels) p = to_byte(p + stddev * rng.normal());
  return out;
}

Image8 down_up_resample(const Image8& image, int factor) {
  require(factor >= 1 && image.width % factor == 0 && image.height % factor == 0,
          "down_up_resample: factor must divide the image size");
  const int w = image.width / factor, h = image.height / factor, ch = image.channels;
  std::vector<double> small(static_cast<std::size_t>(w * h * ch), 0.0);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      for (int c = 0; c < ch; ++c) small[static_cast<std::size_t>(((y / factor) * w + x / factor) * ch + c)] += image.at(y, x, c);
  for (double& v : small) v /= static_cast<double>(factor * factor);
  auto sample = [&](int y, int x, int c) {
    return small[static_cast<std::size_t>((std::clamp(y, 0, h - 1) * w + std::clamp(x, 0, w - 1)) * ch + c)];
  };
  Image8 out(image.width, image.height, ch);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x) {
      // Bilinear with half-pixel centres.
      const double sy = (y + 0.5) / factor - 0.5, sx = (x + 0.5) / factor - 0.5;
      const int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
      const double fy = sy - y0, fx = sx - x0;
      for (int c = 0; c < ch; ++c) {
        const double v = (1 - fy) * ((1 - fx) * sample(y0, x0, c) + fx * sample(y0, x0 + 1, c)) +
                         fy * ((1 - fx) * sample(y0 + 1, x0, c) + fx * sample(y0 + 1, x0 + 1, c));
        out.at(y, x, c) = to_byte(v);
      }
    }
  return out;
}

Image8 alpha_blend(const Image8& base, const Image8& patch, const Image8& mask) {
  require_same_rgb(base, patch, "alpha_blend");
  require(mask.channels == 1 && mask.width == base.width && mask.height == base.height,
          "alpha_blend: mask must be single-channel and match the image");
  Image8 out = base;
  for (int y = 0; y < base.height; ++y)
    for (int x = 0; x < base.width; ++x) {
      const int a8 = mask.at(y, x);
      if (a8 == 0) continue;
      const double a = a8 / 255.0;
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = to_byte(a * patch.at(y, x, c) + (1 - a) * base.at(y, x, c));
    }
  return out;
}

ForgerySample blend_with_mask(const Image8& base, double base_sigma, const Image8& patch, Method method,
                              const std::vector<double>& alpha, const ForgeryParams& params) {
  require(method != Method::kNone, "blend_with_mask: a forgery needs a method family");
  require_same_rgb(base, patch, "blend_with_mask");
  const std::size_t n = static_cast<std::size_t>(base.width * base.height);
  require(alpha.size() == n, "blend_with_mask: alpha must have one value per pixel");
  Image8 mask(base.width, base.height, 1);
  std::size_t support = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mask.pixels[i] = to_byte(std::clamp(alpha[i], 0.0, 1.0) * 255.0);
    support += mask.pixels[i] > 0;
  }
  require(static_cast<double>(support) >= params.min_support * static_cast<double>(n),
          "blend_with_mask: mask support " + std::to_string(support) + " px is below " +
              std::to_string(params.min_support * 100) + "% of the image");

  // Shift the patch towards the base's mean colour over the blended region.
  std::array<double, 3> patch_mean{}, base_mean{};
  double weight = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double a = mask.pixels[i] / 255.0;
    weight += a;
    for (int c = 0; c < 3; ++c) {
      patch_mean[static_cast<std::size_t>(c)] += a * patch.pixels[i * 3 + static_cast<std::size_t>(c)];
      base_mean[static_cast<std::size_t>(c)] += a * base.pixels[i * 3 + static_cast<std::size_t>(c)];
    }
  }
  Image8 corrected = patch;
  for (std::size_t i = 0; i < n; ++i) {
    if (mask.pixels[i] == 0) continue;
    for (std::size_t c = 0; c < 3; ++c)
      corrected.pixels[i * 3 + c] = to_byte(patch.pixels[i * 3 + c] + (base_mean[c] - patch_mean[c]) / weight);
  }

  ForgerySample sample;
  sample.image = alpha_blend(base, corrected, mask);
  sample.label = 1;
  sample.method = method;
  sample.mask = std::move(mask);
  sample.camera_sigma = base_sigma;
  return sample;
}

ForgerySample forge(const Image8& base, double base_sigma, const Image8& donor, double donor_sigma, Method method,
                    std::uint64_t seed, const ForgeryParams& params) {
  require(method != Method::kNone, "forge: method must be one of A, B, C, D");
  require_same_rgb(base, donor, "forge");
  require(base_sigma != donor_sigma, "forge: base and donor must carry different camera noise levels");
  Rng rng(seed);
  const int size = base.width;

  // Stage 1: fake creation.
  Image8 patch;
  switch (method) {
    case Method::kA: patch = gaussian_blur(donor, rng.uniform(params.blur_sigma_min, params.blur_sigma_max)); break;
    case Method::kB: patch = block_quantize(donor, params.block_size, params.quant_step); break;
    case Method::kC: {
      const double stddev = rng.uniform(params.noise_std_min, params.noise_std_max);
      patch = add_noise(donor, stddev, rng.next_u64());
      break;
    }
    case Method::kD: patch = down_up_resample(donor, params.resample_factor); break;
    case Method::kNone: break;
  }

  // Stage 2: blending mask, redrawn until its support clears the guard.
  const std::size_t n = static_cast<std::size_t>(size * base.height);
  std::vector<double> alpha(n);
  for (int attempt = 0;; ++attempt) {
    require(attempt < 256, "forge: could not draw a mask with sufficient support");
    const double feather = rng.uniform(params.feather_min, params.feather_max);
    if (method == Method::kA || method == Method::kC) {
      const double rx = rng.uniform(params.ellipse_radius_min, params.ellipse_radius_max) * size;
      const double ry = rng.uniform(params.ellipse_radius_min, params.ellipse_radius_max) * size;
      const double margin = 2.0 * feather;
      const double cx = rng.uniform(rx + margin, size - rx - margin);
      const double cy = rng.uniform(ry + margin, base.height - ry - margin);
      const double scale = std::min(rx, ry);
      for (int y = 0; y < base.height; ++y)
        for (int x = 0; x < size; ++x) {
          const double dist = (std::hypot((x + 0.5 - cx) / rx, (y + 0.5 - cy) / ry) - 1.0) * scale;
          alpha[static_cast<std::size_t>(y * size + x)] =
              dist <= 0 ? 1.0 : std::exp(-0.5 * dist * dist / (feather * feather));
        }
    } else {
      const double rw = rng.uniform(params.rect_side_min, params.rect_side_max) * size;
      const double rh = rng.uniform(params.rect_side_min, params.rect_side_max) * base.height;
      const double margin = method == Method::kD ? 2.0 * feather : 0.0;
      const double x0 = rng.uniform(margin, size - rw - margin);
      const double y0 = rng.uniform(margin, base.height - rh - margin);
      for (int y = 0; y < base.height; ++y)
        for (int x = 0; x < size; ++x) {
          const double dx = std::max({x0 - (x + 0.5), 0.0, (x + 0.5) - (x0 + rw)});
          const double dy = std::max({y0 - (y + 0.5), 0.0, (y + 0.5) - (y0 + rh)});
          double a;
          if (method == Method::kB) {
            a = (dx == 0.0 && dy == 0.0) ? 1.0 : 0.0;
          } else {
            const double d2 = dx * dx + dy * dy;
            a = std::exp(-0.5 * d2 / (feather * feather));
          }
          alpha[static_cast<std::size_t>(y * size + x)] = a;
        }
    }
    std::size_t support = 0;
    for (double a : alpha) support += std::lround(a * 255.0) > 0;
    if (static_cast<double>(support) >= params.min_support * static_cast<double>(n)) break;
  }
  return blend_with_mask(base, base_sigma, patch, method, alpha, params);
}

Method ManifestRecord::source_method() const {
  if (label != 0) return Method::kNone;
  // Real video ids look like "<split>/<M>-real-<group>".
  const auto slash = video_id.find('/');
  if (slash == std::string::npos || slash + 1 >= video_id.size()) return Method::kNone;
  const std::string tag(1, video_id[slash + 1]);
  if (tag == "A" || tag == "B" || tag == "C" || tag == "D") return parse_method(tag);
  return Method::kNone;
}

const std::vector<ManifestRecord>& DatasetManifest::split(const std::string& name) const {
  auto it = splits.find(name);
  require(it != splits.end(), "manifest has no split '" + name + "'");
  return it->second;
}

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

json splits_to_json(const DatasetManifest& m) {
  json splits = json::object();
  for (const auto& [name, records] : m.splits) {
    json list = json::array();
    for (const auto& r : records) {
      list.push_back(json{{"path", r.path},
                          {"label", r.label},
                          {"method", to_string(r.method)},
                          {"video_id", r.video_id},
                          {"camera_sigma", r.camera_sigma},
                          {"digest", r.digest}});
    }
    splits[name] = list;
  }
  return splits;
}

}  // namespace

std::string DatasetManifest::digest() const {
  const json body{{"version", version}, {"seed", seed}, {"splits", splits_to_json(*this)}};
  return hex64(stable_hash(body.dump()));
}

DatasetConfig DatasetConfig::per_method(std::uint64_t seed, int per_method, int size) {
  require(per_method > 0, "per_method count must be positive");
  DatasetConfig c;
  c.seed = seed;
  c.size = size;
  for (Method m : kForgeryMethods) {
    c.counts["train"][m] = per_method;
    c.counts["val"][m] = std::max(1, per_method / 8);
    c.counts["test"][m] = std::max(1, per_method / 4);
  }
  return c;
}

std::pair<ForgerySample, ForgerySample> generate_pair(const DatasetConfig& config, const std::string& split,
                                                      Method method, int index) {
  require(method != Method::kNone, "generate_pair: method must be a forgery family");
  std::uint64_t h = mix_seed(config.seed, stable_hash(split));
  h = mix_seed(h, static_cast<std::uint64_t>(method));
  h = mix_seed(h, static_cast<std::uint64_t>(index));
  Rng rng(h);
  const std::uint64_t base_seed = rng.next_u64(), donor_seed = rng.next_u64(), forge_seed = rng.next_u64();
  const ForgeryParams& fp = config.forgery;
  require(fp.base_sigma_min >= 0 && fp.base_sigma_min <= fp.base_sigma_max && fp.donor_sigma_min >= 0 &&
              fp.donor_sigma_min <= fp.donor_sigma_max,
          "generate_pair: invalid camera sigma ranges");
  const double base_sigma = rng.uniform(fp.base_sigma_min, fp.base_sigma_max);
  double donor_sigma = rng.uniform(fp.donor_sigma_min, fp.donor_sigma_max);
  for (int attempt = 0; std::abs(donor_sigma - base_sigma) < fp.min_sigma_gap; ++attempt) {
    require(attempt < 1024, "generate_pair: donor sigma range cannot satisfy the minimum gap");
    donor_sigma = rng.uniform(fp.donor_sigma_min, fp.donor_sigma_max);
  }

  ForgerySample real;
  real.image = gen_base_image(base_seed, config.size, base_sigma);
  real.label = 0;
  real.method = Method::kNone;
  real.mask = Image8(config.size, config.size, 1);
  real.camera_sigma = base_sigma;
  const Image8 donor = gen_base_image(donor_seed, config.size, donor_sigma);
  ForgerySample fake = forge(real.image, base_sigma, donor, donor_sigma, method, forge_seed, config.forgery);
  return {std::move(real), std::move(fake)};
}

std::string mask_path(const std::string& image_path) {
  const auto dot = image_path.rfind(".png");
  require(dot != std::string::npos, "mask_path: expected a .png path, got " + image_path);
  return image_path.substr(0, dot) + ".mask.png";
}

std::string file_digest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return hex64(stable_hash(bytes));
}

DatasetManifest build_dataset(const DatasetConfig& config, const std::string& out_dir) {
  require(config.group_size > 0, "build_dataset: group_size must be positive");
  DatasetManifest manifest;
  manifest.seed = config.seed;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create dataset directory " + out_dir + ": " + ec.message());
  for (const auto& [split, per_method] : config.counts) {
    fs::create_directories(fs::path(out_dir) / split, ec);
    if (ec) throw IoError("cannot create " + (fs::path(out_dir) / split).string() + ": " + ec.message());
    auto& records = manifest.splits[split];
    for (const auto& [method, count] : per_method) {
      require(count >= 0, "build_dataset: negative sample count");
      for (int i = 0; i < count; ++i) {
        auto [real, fake] = generate_pair(config, split, method, i);
        char stem[64];
        std::snprintf(stem, sizeof stem, "%s%05d", to_string(method).c_str(), i);
        char group[32];
        std::snprintf(group, sizeof group, "%04d", i / config.group_size);
        const std::string real_path = split + "/" + stem + "_real.png";
        const std::string fake_path = split + "/" + stem + "_fake.png";
        write_png((fs::path(out_dir) / real_path).string(), real.image);
        write_png((fs::path(out_dir) / fake_path).string(), fake.image);
        write_png((fs::path(out_dir) / mask_path(fake_path)).string(), fake.mask);
        records.push_back({real_path, 0, Method::kNone, split + "/" + to_string(method) + "-real-" + group,
                           real.camera_sigma, file_digest((fs::path(out_dir) / real_path).string())});
        records.push_back({fake_path, 1, method, split + "/" + to_string(method) + "-fake-" + group,
                           fake.camera_sigma, file_digest((fs::path(out_dir) / fake_path).string())});
      }
    }
  }
  save_manifest(manifest, out_dir);
  return manifest;
}

json to_json(const DatasetManifest& manifest) {
  return json{{"version", manifest.version},
              {"seed", manifest.seed},
              {"splits", splits_to_json(manifest)},
              {"digest", manifest.digest()}};
}

DatasetManifest manifest_from_json(const json& j) {
  DatasetManifest m;
  try {
    m.version = j.at("version").get<int>();
    m.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& [name, list] : j.at("splits").items()) {
      auto& records = m.splits[name];
      for (const auto& r : list) {
        ManifestRecord rec;
        rec.path = r.at("path").get<std::string>();
        rec.label = r.at("label").get<int>();
        rec.method = parse_method(r.at("method").get<std::string>());
        rec.video_id = r.at("video_id").get<std::string>();
        rec.camera_sigma = r.at("camera_sigma").get<double>();
        if (r.contains("digest")) rec.digest = r.at("digest").get<std::string>();
        require(rec.label == 0 || rec.label == 1, "manifest: invalid label in " + rec.path);
        require((rec.label == 0) == (rec.method == Method::kNone),
                "manifest: label and method disagree for " + rec.path);
        records.push_back(std::move(rec));
      }
    }
  } catch (const json::exception& e) {
    throw ContractError(std::string("malformed manifest: ") + e.what());
  }
  return m;
}

DatasetManifest load_manifest(const std::string& dataset_dir) {
  const std::string path = (fs::path(dataset_dir) / "manifest.json").string();
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IoError("cannot parse manifest " + path + ": " + e.what());
  }
  return manifest_from_json(j);
}

void save_manifest(const DatasetManifest& manifest, const std::string& dataset_dir) {
  const std::string path = (fs::path(dataset_dir) / "manifest.json").string();
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest " + path);
  out << to_json(manifest).dump(2) << "\n";
  if (!out) throw IoError("failed writing manifest " + path);
}

void verify_manifest(const DatasetManifest& manifest, const std::string& dataset_dir) {
  for (const auto& [name, records] : manifest.splits)
    for (const auto& r : records) {
      const std::string path = (fs::path(dataset_dir) / r.path).string();
      if (!fs::exists(path)) throw IoError("missing dataset file " + path);
      if (!r.digest.empty() && file_digest(path) != r.digest) throw IoError("digest mismatch for " + path);
    }
}

}  // namespace hff
