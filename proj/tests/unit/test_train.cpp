#include <doctest.h>

#include <unistd.h>

#include <filesystem>

#include "hff/checkpoint.hpp"
#include "hff/errors.hpp"
#include "hff/metrics.hpp"
#include "hff/train.hpp"

using namespace hff;
namespace fs = std::filesystem;

namespace {

struct ScratchDir {
  std::string path;
  ~ScratchDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

// Small dataset shared by the tests in this file, generated on first use.
const std::string& dataset_dir() {
  static const ScratchDir dir = [] {
    const fs::path p = fs::temp_directory_path() / ("hff_test_train_data_" + std::to_string(::getpid()));
    fs::remove_all(p);
    build_dataset(DatasetConfig::per_method(13, 8, 32), p.string());
    return ScratchDir{p.string()};
  }();
  return dir.path;
}

const DatasetManifest& manifest() {
  static const DatasetManifest m = load_manifest(dataset_dir());
  return m;
}

std::vector<LoadedSample> split(const std::string& name, int threads = 1) {
  return load_split(manifest(), dataset_dir(), name, threads, true);
}

TrainConfig small_config() {
  TrainConfig c;
  c.epochs = 1;
  c.seed = 5;
  c.model.input_size = 32;
  c.model.entry.widths = {4, 8, 8};
  c.model.entry.rsa_kernel = 3;
  c.model.exit_width = 8;
  return c;
}

std::vector<LoadedSample> first(const std::vector<LoadedSample>& s, std::size_t n) {
  return {s.begin(), s.begin() + static_cast<std::ptrdiff_t>(std::min(n, s.size()))};
}

}  // namespace

TEST_SUITE("train") {

TEST_CASE("method selection pairs fakes with the reals they came from") {
  const auto all = split("train");
  const auto a = select_method(all, Method::kA);
  CHECK(a.size() == 16);
  for (const auto& s : a) {
    if (s.record.label) CHECK(s.record.method == Method::kA);
    else CHECK(s.record.source_method() == Method::kA);
  }
  CHECK(select_method(all, std::nullopt).size() == all.size());
}

TEST_CASE("loader thread count does not change the decoded data") {
  const auto one = split("train", 1), many = split("train", 3);
  REQUIRE(one.size() == many.size());
  for (std::size_t i = 0; i < one.size(); ++i) {
    CHECK(one[i].record.path == many[i].record.path);
    CHECK(one[i].image == many[i].image);
    CHECK(one[i].mask == many[i].mask);
  }
}

TEST_CASE("training rejects degenerate inputs") {
  const auto a = select_method(split("train"), Method::kA);
  std::vector<LoadedSample> reals;
  for (const auto& s : a)
    if (!s.record.label) reals.push_back(s);
  CHECK_THROWS_AS(train(small_config(), reals, {}), ContractError);
  CHECK_THROWS_AS(train(small_config(), {}, {}), ContractError);
  TrainConfig wrong = small_config();
  wrong.model.input_size = 64;
  CHECK_THROWS_AS(train(wrong, a, {}), ContractError);
}

TEST_CASE("seed-fixed training is bit-reproducible") {
  const auto data = first(select_method(split("train"), Method::kB), 16);
  const auto val = select_method(split("val"), Method::kB);
  const TrainResult r1 = train(small_config(), data, val);
  const TrainResult r2 = train(small_config(), data, val);
  CHECK(r1.final_loss == r2.final_loss);
  CHECK(encode_checkpoint(r1.last) == encode_checkpoint(r2.last));
  REQUIRE(r1.log.size() == 1);
  CHECK(r1.log[0].val_auc.has_value());
  TrainConfig other = small_config();
  other.seed = 6;
  CHECK(train(other, data, val).final_loss != r1.final_loss);
}

TEST_CASE("per-epoch callback sees every epoch") {
  TrainConfig c = small_config();
  c.epochs = 2;
  std::vector<int> seen;
  const auto data = first(select_method(split("train"), Method::kC), 8);
  const TrainResult r = train(c, data, {}, [&](const EpochLog& e) { seen.push_back(e.epoch); });
  CHECK(seen == std::vector<int>{1, 2});
  CHECK(r.best_epoch == 2);
  CHECK_FALSE(r.best_val_auc.has_value());
}

TEST_CASE("prediction does not depend on the batch size") {
  const TwoStreamModel<float> model(small_config().model, 3);
  const auto samples = split("test");
  const auto a = predict(model, samples, 32), b = predict(model, samples, 3);
  REQUIRE(a.size() == samples.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-5));
}

TEST_CASE("evaluation reports every method and is invariant to duplication") {
  const TwoStreamModel<float> model(small_config().model, 3);
  const auto samples = split("test");
  const EvalReport r = evaluate(model, samples, "test", to_json(small_config()));
  CHECK(r.per_method.size() == 4);
  for (const auto& [m, metrics] : r.per_method) {
    CHECK(metrics.n_fake == 2);
    CHECK(metrics.n_real == 8);
    CHECK((metrics.auc >= 0.0 && metrics.auc <= 1.0));
    CHECK(metrics.video_auc.has_value());
  }
  auto twice = samples;
  twice.insert(twice.end(), samples.begin(), samples.end());
  const EvalReport r2 = evaluate(model, twice, "test", to_json(small_config()));
  CHECK(r2.overall.auc == doctest::Approx(r.overall.auc).epsilon(1e-12));
  CHECK(r2.overall.accuracy == doctest::Approx(r.overall.accuracy).epsilon(1e-12));
  const nlohmann::json j = to_json(r);
  CHECK(j.at("config") == to_json(small_config()));
  CHECK(j.at("build_id").get<std::string>() == build_id());
  CHECK(j.at("per_method").size() == 4);
}

TEST_CASE("cross evaluation fills one row of four cells") {
  TrainConfig c = small_config();
  const CrossEvalReport r = cross_eval(c, split("train"), split("val"), split("test"), Method::kA, {1});
  CHECK(r.row.size() == 4);
  for (const auto& [m, cell] : r.row) {
    CHECK(cell.seed_auc.size() == 1);
    CHECK(cell.n_fake >= 1);
    CHECK(cell.n_real >= 1);
  }
  const nlohmann::json j = to_json(r);
  CHECK(j.at("matrix").at("cols").size() == 4);
  CHECK(j.at("runs").size() == 1);
  CHECK_THROWS_AS(cross_eval(c, split("train"), split("val"), split("test"), Method::kNone, {1}), ContractError);
}

}  // TEST_SUITE

TEST_SUITE("checkpoint") {

TEST_CASE("encode and decode round-trip exactly") {
  const TwoStreamModel<float> model(small_config().model, 8);
  const Checkpoint c = snapshot(model, small_config());
  const Checkpoint back = decode_checkpoint(encode_checkpoint(c));
  REQUIRE(back.tensors.size() == c.tensors.size());
  for (std::size_t i = 0; i < c.tensors.size(); ++i) {
    CHECK(back.tensors[i].first == c.tensors[i].first);
    CHECK(bit_equal(back.tensors[i].second, c.tensors[i].second));
  }
  CHECK(back.config == c.config);
}

TEST_CASE("save and load give bit-identical forward outputs") {
  const TwoStreamModel<float> model(small_config().model, 8);
  const fs::path path = fs::temp_directory_path() / ("hff_test_roundtrip_" + std::to_string(::getpid()) + ".ckpt");
  save_checkpoint(path.string(), snapshot(model, small_config()));
  const TwoStreamModel<float> loaded = restore_model(load_checkpoint(path.string()));
  const auto samples = first(split("test"), 4);
  std::vector<const Image8*> images;
  for (const auto& s : samples) images.push_back(&s.image);
  const auto x = images_to_tensor<float>(images);
  CHECK(bit_equal(model.forward(x).cosines.value(), loaded.forward(x).cosines.value()));
  CHECK(to_json(checkpoint_config(load_checkpoint(path.string()))) == to_json(small_config()));
  fs::remove(path);
}

TEST_CASE("corrupt checkpoints are rejected") {
  const TwoStreamModel<float> model(small_config().model, 8);
  const Checkpoint c = snapshot(model, small_config());
  const std::string bytes = encode_checkpoint(c);
  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() / 2)), IoError);
  CHECK_THROWS_AS(decode_checkpoint(bytes + "x"), IoError);
  CHECK_THROWS_AS(decode_checkpoint("HFF0" + bytes.substr(4)), IoError);
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/model.ckpt"), IoError);
  Checkpoint missing = c;
  missing.tensors.pop_back();
  CHECK_THROWS_AS(restore_model(missing), ContractError);
  Checkpoint reshaped = c;
  reshaped.tensors.front().second = Tensor<float>({1});
  CHECK_THROWS_AS(restore_model(reshaped), ContractError);
}

}  // TEST_SUITE

TEST_SUITE("gradcam") {

TEST_CASE("zero gradients give an all-zero map") {
  Tensor<float> act({1, 2, 4, 4}, 1.0f), grad({1, 2, 4, 4});
  const Heatmap h = gradcam_from(act, grad, 8, 8);
  CHECK(h.values.size() == 64);
  for (double v : h.values) CHECK(v == 0.0);
}

TEST_CASE("heatmaps are normalized to [0,1] with a unit maximum") {
  Tensor<float> act({1, 2, 4, 4}), grad({1, 2, 4, 4}, 0.5f);
  for (Index i = 0; i < act.size(); ++i) act[i] = static_cast<float>(i % 7);
  const Heatmap h = gradcam_from(act, grad, 16, 16);
  double lo = 1, hi = 0;
  for (double v : h.values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  CHECK(lo >= 0.0);
  CHECK(hi == 1.0);
}

TEST_CASE("gradcam on a model covers the input and lists valid layers on error") {
  const TwoStreamModel<float> model(small_config().model, 2);
  const auto samples = first(split("test"), 1);
  const Heatmap h = gradcam(model, samples[0].image, "entry.s1.rgb");
  CHECK(h.height == 32);
  CHECK(h.width == 32);
  for (double v : h.values) CHECK((v >= 0.0 && v <= 1.0));
  try {
    gradcam(model, samples[0].image, "no.such.layer");
    FAIL("expected an error");
  } catch (const ContractError& e) {
    CHECK(std::string(e.what()).find("entry.s1.rgb") != std::string::npos);
  }
  for (const auto& p : model.store().params()) CHECK_FALSE(p.var.has_grad());
}

TEST_CASE("mask contrast compares inside and outside means") {
  Heatmap h{2, 2, {1.0, 0.0, 0.5, 0.0}};
  Image8 mask(2, 2, 1);
  mask.at(0, 0) = 255;
  mask.at(1, 0) = 10;
  CHECK(mask_heat_contrast(h, mask) == doctest::Approx(0.75));
  CHECK_THROWS_AS(mask_heat_contrast(h, Image8(2, 2, 1)), ContractError);
}

}  // TEST_SUITE
