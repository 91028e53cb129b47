#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "hff/errors.hpp"
#include "hff/forgery.hpp"
#include "hff/srm.hpp"

using namespace hff;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("hff_test_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

int median3(const Image8& im, int y, int x, int c) {
  int v[9], k = 0;
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) v[k++] = im.at(y + dy, x + dx, c);
  std::nth_element(v, v + 4, v + 9);
  return v[4];
}

// Fraction of interior samples that differ from their 3x3 median.
double median_disagreement(const Image8& im) {
  int differ = 0, total = 0;
  for (int y = 1; y + 1 < im.height; ++y)
    for (int x = 1; x + 1 < im.width; ++x)
      for (int c = 0; c < 3; ++c) {
        ++total;
        if (median3(im, y, x, c) != im.at(y, x, c)) ++differ;
      }
  return static_cast<double>(differ) / total;
}

}  // namespace

TEST_SUITE("forgery") {

TEST_CASE("method names round-trip") {
  for (Method m : {Method::kNone, Method::kA, Method::kB, Method::kC, Method::kD})
    CHECK(parse_method(to_string(m)) == m);
  CHECK_THROWS_AS(parse_method("E"), ContractError);
}

TEST_CASE("base images are deterministic and non-degenerate") {
  CHECK(gen_base_image(17, 48, 2.0) == gen_base_image(17, 48, 2.0));
  CHECK_FALSE(gen_base_image(17, 48, 2.0) == gen_base_image(18, 48, 2.0));
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    const Image8 im = gen_base_image(seed, 64, 1.0);
    const std::set<std::uint8_t> distinct(im.pixels.begin(), im.pixels.end());
    REQUIRE(distinct.size() > 10);
  }
  CHECK_THROWS_AS(gen_base_image(1, 16, 1.0), ContractError);
}

TEST_CASE("noise-free images agree with their median filter away from shape edges") {
  double clean = 0, noisy = 0;
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    clean += median_disagreement(gen_base_image(seed, 64, 0.0)) / 50;
    noisy += median_disagreement(gen_base_image(seed, 64, 2.0)) / 50;
  }
  CHECK(clean < 0.1);
  CHECK(noisy > 0.5);
}

TEST_CASE("stage-one ops") {
  const Image8 im = gen_base_image(3, 32, 3.0);
  const Image8 blurred = gaussian_blur(im, 1.5);
  CHECK(median_disagreement(blurred) < median_disagreement(im));
  const Image8 q = block_quantize(im, 8, 16);
  for (int by = 0; by < 32; by += 8)
    for (int bx = 0; bx < 32; bx += 8)
      for (int c = 0; c < 3; ++c) {
        std::set<int> levels;
        for (int y = by; y < by + 8; ++y)
          for (int x = bx; x < bx + 8; ++x) levels.insert(q.at(y, x, c));
        CHECK(levels.size() <= 16);
        for (int v : levels) CHECK((v - *levels.begin()) % 16 == 0);
      }
  const Image8 n1 = add_noise(im, 6.0, 9), n2 = add_noise(im, 6.0, 9);
  CHECK(n1 == n2);
  CHECK_FALSE(n1 == im);
  const Image8 r = down_up_resample(im, 2);
  CHECK(r.width == 32);
  CHECK(median_disagreement(r) < median_disagreement(im));
  Image8 flat(32, 32, 3);
  std::fill(flat.pixels.begin(), flat.pixels.end(), 77);
  CHECK(down_up_resample(flat, 2) == flat);
  CHECK(gaussian_blur(flat, 2.0) == flat);
  CHECK_THROWS_AS(down_up_resample(gen_base_image(1, 33, 1.0), 2), ContractError);
}

TEST_CASE("blending preserves bytes outside the mask") {
  const Image8 base = gen_base_image(1, 32, 1.0), patch = gen_base_image(2, 32, 4.0);
  Image8 mask(32, 32, 1);
  for (int y = 8; y < 20; ++y)
    for (int x = 4; x < 16; ++x) mask.at(y, x) = static_cast<std::uint8_t>(y == 8 ? 128 : 255);
  const Image8 out = alpha_blend(base, patch, mask);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x)
      for (int c = 0; c < 3; ++c) {
        if (mask.at(y, x) == 0) REQUIRE(out.at(y, x, c) == base.at(y, x, c));
        if (mask.at(y, x) == 255) REQUIRE(out.at(y, x, c) == patch.at(y, x, c));
      }
  CHECK(alpha_blend(base, patch, Image8(32, 32, 1)) == base);
}

TEST_CASE("masks below the support guard are rejected") {
  const Image8 base = gen_base_image(1, 32, 1.0), patch = gen_base_image(2, 32, 4.0);
  std::vector<double> alpha(32 * 32, 0.0);
  CHECK_THROWS_AS(blend_with_mask(base, 1.0, patch, Method::kA, alpha), ContractError);
  for (int i = 0; i < 40; ++i) alpha[static_cast<std::size_t>(i)] = 1.0;  // about 3.9% of the area
  CHECK_THROWS_AS(blend_with_mask(base, 1.0, patch, Method::kA, alpha), ContractError);
  for (int i = 0; i < 60; ++i) alpha[static_cast<std::size_t>(i)] = 1.0;
  CHECK_NOTHROW(blend_with_mask(base, 1.0, patch, Method::kA, alpha));
}

TEST_CASE("forgeries are local, labelled and reproducible") {
  DatasetConfig config = DatasetConfig::per_method(5, 8, 64);
  for (Method m : kForgeryMethods)
    for (int i = 0; i < 10; ++i) {
      const auto [real, fake] = generate_pair(config, "train", m, i);
      CHECK(real.label == 0);
      CHECK(real.method == Method::kNone);
      CHECK(std::all_of(real.mask.pixels.begin(), real.mask.pixels.end(), [](auto v) { return v == 0; }));
      CHECK(fake.label == 1);
      CHECK(fake.method == m);
      CHECK(fake.camera_sigma == real.camera_sigma);
      int support = 0;
      for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) {
          if (fake.mask.at(y, x) == 0) {
            for (int c = 0; c < 3; ++c) REQUIRE(fake.image.at(y, x, c) == real.image.at(y, x, c));
          } else {
            ++support;
          }
        }
      CHECK(support >= 0.05 * 64 * 64);
      const auto again = generate_pair(config, "train", m, i);
      CHECK(again.second.image == fake.image);
      CHECK(again.second.mask == fake.mask);
    }
}

TEST_CASE("mask shapes follow the method family") {
  DatasetConfig config = DatasetConfig::per_method(11, 8, 64);
  auto has_partial = [](const Image8& mask) {
    return std::any_of(mask.pixels.begin(), mask.pixels.end(), [](auto v) { return v > 0 && v < 255; });
  };
  for (int i = 0; i < 5; ++i) {
    CHECK_FALSE(has_partial(generate_pair(config, "train", Method::kB, i).second.mask));
    CHECK(has_partial(generate_pair(config, "train", Method::kA, i).second.mask));
    CHECK(has_partial(generate_pair(config, "train", Method::kC, i).second.mask));
    CHECK(has_partial(generate_pair(config, "train", Method::kD, i).second.mask));
  }
}

TEST_CASE("forge contracts") {
  const Image8 a = gen_base_image(1, 32, 1.0), b = gen_base_image(2, 32, 3.0);
  CHECK_THROWS_AS(forge(a, 1.0, b, 1.0, Method::kA, 1), ContractError);
  CHECK_THROWS_AS(forge(a, 1.0, b, 3.0, Method::kNone, 1), ContractError);
  CHECK_THROWS_AS(forge(a, 1.0, gen_base_image(2, 48, 3.0), 3.0, Method::kA, 1), ContractError);
}

TEST_CASE("tampered regions carry a measurably different noise residual") {
  // Per sample: max(in/out, out/in) of the mean absolute residual over the
  // mask support versus its complement, averaged over 200 samples.
  DatasetConfig config = DatasetConfig::per_method(7, 8, 64);
  const SrmKernelBank bank;
  for (Method m : kForgeryMethods) {
    double factor = 0;
    for (int i = 0; i < 200; ++i) {
      const ForgerySample fake = generate_pair(config, "train", m, i).second;
      const auto r = srm_residual_image(Var<double>(image_to_tensor<double>(fake.image)), bank).value();
      double in = 0, out = 0;
      int n_in = 0, n_out = 0;
      for (Index ch = 0; ch < 9; ++ch)
        for (int y = 0; y < 64; ++y)
          for (int x = 0; x < 64; ++x) {
            const double v = std::abs(r[(ch * 64 + y) * 64 + x]);
            if (fake.mask.at(y, x) > 0) {
              in += v;
              ++n_in;
            } else {
              out += v;
              ++n_out;
            }
          }
      const double ratio = (in / n_in) / (out / n_out);
      factor += std::max(ratio, 1.0 / ratio) / 200.0;
    }
    CHECK_MESSAGE(factor >= 1.2, to_string(m) << " factor " << factor);
  }
}

}  // TEST_SUITE

TEST_SUITE("dataset") {

TEST_CASE("build_dataset writes the requested counts with disjoint splits") {
  TempDir dir("dataset");
  DatasetConfig config = DatasetConfig::per_method(3, 8, 32);
  const DatasetManifest m = build_dataset(config, dir.path.string());
  CHECK(m.split("train").size() == 4 * 2 * 8);
  CHECK(m.split("val").size() == 4 * 2 * 1);
  CHECK(m.split("test").size() == 4 * 2 * 2);
  std::map<std::string, std::set<std::string>> videos;
  for (const auto& [split, records] : m.splits) {
    int real = 0, fake = 0;
    for (const auto& r : records) {
      videos[split].insert(r.video_id);
      (r.label ? fake : real)++;
      CHECK(fs::exists(dir.path / r.path));
      if (r.label) CHECK(fs::exists(dir.path / mask_path(r.path)));
    }
    CHECK(real == fake);
  }
  for (const auto& [a, va] : videos)
    for (const auto& [b, vb] : videos)
      if (a != b)
        for (const auto& v : va) CHECK_FALSE(vb.contains(v));
  CHECK_NOTHROW(verify_manifest(m, dir.path.string()));
  CHECK(load_manifest(dir.path.string()).digest() == m.digest());
}

TEST_CASE("consecutive fakes share video ids in groups") {
  TempDir dir("groups");
  DatasetConfig config = DatasetConfig::per_method(3, 12, 32);
  config.counts = {{"train", {{Method::kA, 12}}}};
  const DatasetManifest m = build_dataset(config, dir.path.string());
  std::map<std::string, int> sizes;
  for (const auto& r : m.split("train"))
    if (r.label) ++sizes[r.video_id];
  CHECK(sizes.size() == 3);
  for (const auto& [id, n] : sizes) CHECK(n <= 5);
}

TEST_CASE("identical configs give identical digests and any sample is reproducible alone") {
  TempDir a("repro_a"), b("repro_b");
  DatasetConfig config = DatasetConfig::per_method(21, 4, 32);
  const DatasetManifest ma = build_dataset(config, a.path.string());
  const DatasetManifest mb = build_dataset(config, b.path.string());
  CHECK(ma.digest() == mb.digest());
  const auto [real, fake] = generate_pair(config, "test", Method::kC, 0);
  CHECK(read_png((a.path / "test/C00000_fake.png").string()) == fake.image);
  CHECK(read_png((a.path / "test/C00000_fake.mask.png").string()) == fake.mask);
  CHECK(read_png((a.path / "test/C00000_real.png").string()) == real.image);
  config.seed = 22;
  TempDir c("repro_c");
  CHECK(build_dataset(config, c.path.string()).digest() != ma.digest());
}

TEST_CASE("verification detects altered and missing files") {
  TempDir dir("verify");
  const DatasetManifest m = build_dataset(DatasetConfig::per_method(1, 2, 32), dir.path.string());
  const fs::path victim = dir.path / m.split("train").front().path;
  {
    std::ofstream out(victim, std::ios::binary | std::ios::app);
    out << "x";
  }
  CHECK_THROWS_AS(verify_manifest(m, dir.path.string()), IoError);
  fs::remove(victim);
  CHECK_THROWS_AS(verify_manifest(m, dir.path.string()), IoError);
}

TEST_CASE("manifest parsing validates records") {
  DatasetManifest m;
  m.seed = 4;
  m.splits["train"] = {{"train/x.png", 1, Method::kA, "train/A-fake-0000", 2.0, ""}};
  const DatasetManifest back = manifest_from_json(to_json(m));
  CHECK(back.split("train").front().method == Method::kA);
  nlohmann::json bad = to_json(m);
  bad["splits"]["train"][0]["method"] = "none";
  CHECK_THROWS_AS(manifest_from_json(bad), ContractError);
  CHECK_THROWS_AS(m.split("val"), ContractError);
  CHECK_THROWS_AS(load_manifest("/nonexistent/hff"), IoError);
}

TEST_CASE("real records name the family their fakes came from") {
  ManifestRecord r;
  r.video_id = "test/B-real-0003";
  CHECK(r.source_method() == Method::kB);
  r.video_id = "test/B-fake-0003";
  r.label = 1;
  r.method = Method::kB;
  CHECK(r.source_method() == Method::kNone);
}

}  // TEST_SUITE
