// Acceptance run: prints one PASS/FAIL line per criterion and writes a JSON
// summary to <work-dir>/acceptance.json.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "support/oracles.hpp"
#include "unit/helpers.hpp"
#include "hff/checkpoint.hpp"
#include "hff/dcma.hpp"
#include "hff/gradcheck_suite.hpp"
#include "hff/metrics.hpp"
#include "hff/srm.hpp"
#include "hff/train.hpp"

using namespace hff;
namespace fs = std::filesystem;
using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

// Last spatial feature map of the RGB stream, the usual Grad-CAM target.
constexpr const char* kGradcamLayer = "exit.rgb";

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

Outcome gradient_suite(json& out) {
  const auto start = Clock::now();
  bool ok = true;
  double worst_op = 0, worst_model = 0;
  int min_seeds = 1 << 30;
  run_gradcheck_suite(20, [&](const GradCheckOutcome& o) {
    const bool model = o.name == "full_model";
    const double limit = model ? 1e-5 : 1e-6;
    ok = ok && o.passed && o.tolerance <= limit && o.worst <= limit;
    (model ? worst_model : worst_op) = std::max(model ? worst_model : worst_op, o.worst);
    min_seeds = std::min(min_seeds, o.seeds);
    out["cases"][o.name] = {{"worst", o.worst}, {"tolerance", o.tolerance}, {"passed", o.passed}};
    if (!o.passed) std::printf("  gradient case %s failed: %.3e\n", o.name.c_str(), o.worst);
  });
  const double secs = seconds_since(start);
  out["seconds"] = secs;
  return {ok && min_seeds >= 20 && secs < 120.0,
          fmt("worst op %.2e, full model %.2e, %d seeds, %.1f s", worst_op, worst_model, min_seeds, secs)};
}

Outcome srm_oracle(json& out) {
  double worst = 0;
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    Rng rng(mix_seed(seed, 101));
    const Index h = rng.uniform_int(6, 40), w = rng.uniform_int(6, 40);
    Tensor<double> x({1, 3, h, w});
    for (Index i = 0; i < x.size(); ++i) x[i] = static_cast<double>(rng.uniform_int(0, 255));
    const auto got = srm_residual_image(Var<double>(x), SrmKernelBank{}).value();
    worst = std::max(worst, testing::max_rel_diff(got, oracle::srm(x, 2.0)));
  }
  bool zero = true;
  for (double level : {0.0, 1.0, 64.5, 128.0, 255.0}) {
    const auto r = srm_residual_image(Var<double>(Tensor<double>({1, 3, 12, 12}, level)), SrmKernelBank{}).value();
    for (Index i = 0; i < r.size(); ++i) zero = zero && r[i] == 0.0;
  }
  bool clipped = true;
  SrmKernelBank raw;
  raw.clip_threshold = 0.0;
  for (double amplitude : {10.0, -10.0})
    for (Index pos : {0, 1, 5, 10}) {
      Tensor<double> x({1, 3, 11, 11});
      for (Index c = 0; c < 3; ++c) x.at(0, c, pos, 10 - pos) = amplitude;
      const auto r = srm_residual_image(Var<double>(x), SrmKernelBank{}).value();
      const auto unclipped = srm_filter(Var<double>(x), raw).value();
      double peak = 0, raw_peak = 0;
      for (Index i = 0; i < r.size(); ++i) {
        peak = std::max(peak, std::abs(r[i]));
        raw_peak = std::max(raw_peak, std::abs(unclipped[i]));
        clipped = clipped && r[i] == std::clamp(unclipped[i], -2.0, 2.0);
      }
      clipped = clipped && peak == 2.0 && raw_peak > 2.0;
      clipped = clipped && testing::max_abs_diff(r, oracle::srm(x, 2.0)) < 1e-12;
    }
  out = {{"worst_rel", worst}, {"constant_zero", zero}, {"impulse_clip", clipped}};
  return {worst <= 1e-6 && zero && clipped,
          fmt("50 images worst rel %.2e; constant zero %s; impulse clip %s", worst, zero ? "yes" : "no",
              clipped ? "yes" : "no")};
}

Outcome dcma_algebra(json& out) {
  const auto start = Clock::now();
  double worst_col = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    ParamStore<double> store;
    const Index c = 8, extent = rng.uniform_int(1, 6);
    auto p = make_dcma_params("d", c, extent, 2, store, rng);
    const Index hw = extent * extent;
    p.mix.mutable_value() = testing::random_tensor({hw, hw}, rng, -2, 2);
    p.hf_mix.mutable_value() = testing::random_tensor({hw, hw}, rng, -2, 2);
    const auto o = dcma_forward(Var<double>(testing::random_tensor({2, c, extent, extent}, rng)),
                                Var<double>(testing::random_tensor({2, c, extent, extent}, rng)), p);
    for (const auto* a : {&o.attention.value(), &o.hf_attention.value()})
      for (Index b = 0; b < 2; ++b)
        for (Index j = 0; j < hw; ++j) {
          double total = 0;
          for (Index i = 0; i < hw; ++i) total += (*a)[(b * hw + i) * hw + j];
          worst_col = std::max(worst_col, std::abs(total - 1.0));
        }
  }
  bool identity = true;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    ParamStore<double> store;
    auto p = make_dcma_params("d", 8, 4, 4, store, rng);
    for (auto* v : {&p.value_weight, &p.value_bias, &p.hf_value_weight, &p.hf_value_bias})
      v->mutable_value().array().setZero();
    const auto rgb = testing::random_tensor({2, 8, 4, 4}, rng), hf = testing::random_tensor({2, 8, 4, 4}, rng);
    const auto o = dcma_forward(Var<double>(rgb), Var<double>(hf), p);
    identity = identity && bit_equal(o.rgb.value(), rgb) && bit_equal(o.hf.value(), hf);
  }
  int shapes = 0, shape_failures = 0;
  for (Index c : {4, 8, 16, 32})
    for (Index extent : {1, 2, 3, 4, 8})
      for (Index r : {1, 2, 4}) {
        Rng rng(static_cast<std::uint64_t>(c * 100 + extent * 10 + r));
        ParamStore<double> store;
        const auto p = make_dcma_params("d", c, extent, r, store, rng);
        const auto o = dcma_forward(Var<double>(testing::random_tensor({2, c, extent, extent}, rng)),
                                    Var<double>(testing::random_tensor({2, c, extent, extent}, rng)), p);
        ++shapes;
        const Shape want{2, c, extent, extent};
        if (o.rgb.shape() != want || o.hf.shape() != want) ++shape_failures;
      }
  const double secs = seconds_since(start);
  out = {{"worst_column_error", worst_col}, {"zero_value_identity", identity}, {"shapes", shapes},
         {"shape_failures", shape_failures}, {"seconds", secs}};
  return {worst_col <= 1e-6 && identity && shape_failures == 0 && secs < 30.0,
          fmt("column sum error %.2e; zero-value identity %s; %d/%d shapes kept; %.2f s", worst_col,
              identity ? "bit-exact" : "broken", shapes - shape_failures, shapes, secs)};
}

Outcome loss_reduction(json& out) {
  Rng rng(77);
  double worst = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const double a = rng.uniform(-1, 1), b = rng.uniform(-1, 1);
    const int y = static_cast<int>(rng.below(2));
    const double ce = std::log(std::exp(a) + std::exp(b)) - (y == 0 ? a : b);
    const std::vector<int> labels{y};
    const auto loss = am_softmax_loss(Var<double>(Tensor<double>({1, 2}, {a, b})), labels, 1.0, 0.0);
    worst = std::max(worst, std::abs(loss.value()[0] - ce));
  }
  const std::vector<int> labels{kReal};
  const double got = am_softmax_loss(Var<double>(Tensor<double>({1, 2}, {0.9, 0.1})), labels, 30.0, 0.35).value()[0];
  const long double ref = oracle::am_softmax({0.9, 0.1}, {0}, 30.0, 0.35);
  const long double closed = std::log1p(std::exp(-13.5L));
  const double err = static_cast<double>(std::abs(static_cast<long double>(got) - ref));
  const bool closed_ok = std::abs(ref - closed) < 1e-15L;
  out = {{"ce_worst", worst}, {"margin_case", got}, {"margin_case_error", err}};
  return {worst <= 1e-6 && err <= 1e-9 && closed_ok,
          fmt("1000 pairs worst %.2e; margin case %.12g vs log(1+e^-13.5), error %.2e", worst, got, err)};
}

Outcome auc_oracle(json& out) {
  int exact = 0;
  for (std::uint64_t seed = 1; seed <= 200; ++seed) {
    Rng rng(mix_seed(seed, 55));
    const int n = rng.uniform_int(2, 50);
    const int levels = rng.uniform_int(1, 10);
    std::vector<double> scores;
    std::vector<int> labels;
    for (int i = 0; i < n; ++i) {
      scores.push_back(static_cast<double>(rng.uniform_int(0, levels)) / levels);
      labels.push_back(i < 2 ? i : static_cast<int>(rng.below(2)));
    }
    if (auc(scores, labels) == oracle::auc_pairs(scores, labels)) ++exact;
  }
  out = {{"exact", exact}, {"instances", 200}};
  return {exact == 200, fmt("%d/200 instances equal pair enumeration", exact)};
}

std::vector<LoadedSample> first_pairs(const std::vector<LoadedSample>& samples, Method method, int pairs) {
  std::vector<LoadedSample> fakes, chosen;
  for (const auto& s : samples)
    if (s.record.label == 1 && s.record.method == method && static_cast<int>(fakes.size()) < pairs) fakes.push_back(s);
  for (const auto& f : fakes) {
    chosen.push_back(f);
    const std::string real_path = f.record.path.substr(0, f.record.path.size() - 8) + "real.png";
    for (const auto& s : samples)
      if (s.record.path == real_path) chosen.push_back(s);
  }
  return chosen;
}

Outcome determinism(const fs::path& work, json& out) {
  const fs::path dir = work / "small";
  fs::remove_all(dir);
  const DatasetManifest manifest = build_dataset(DatasetConfig::per_method(3, 8, 64), dir.string());
  const auto train_set = select_method(load_split(manifest, dir.string(), "train"), Method::kA);
  const auto test_set = load_split(manifest, dir.string(), "test");
  TrainConfig config;
  config.epochs = 2;
  const TrainResult a = train(config, train_set, {});
  const TrainResult b = train(config, train_set, {});
  const bool same_loss = std::memcmp(&a.final_loss, &b.final_loss, sizeof(double)) == 0;
  const bool same_bytes = encode_checkpoint(a.last) == encode_checkpoint(b.last);

  const TwoStreamModel<float> model = restore_model(a.last);
  const fs::path path = dir / "model.ckpt";
  save_checkpoint(path.string(), snapshot(model, config));
  const TwoStreamModel<float> loaded = restore_model(load_checkpoint(path.string()));
  std::vector<const Image8*> images;
  for (const auto& s : test_set) images.push_back(&s.image);
  const auto x = images_to_tensor<float>(images);
  NoGradGuard no_grad;
  const auto before = model.forward(x), after = loaded.forward(x);
  const bool same_forward =
      bit_equal(before.cosines.value(), after.cosines.value()) && bit_equal(before.p_fake, after.p_fake);
  out = {{"final_loss", a.final_loss}, {"same_loss", same_loss}, {"same_checkpoint", same_bytes},
         {"round_trip_forward", same_forward}};
  return {same_loss && same_bytes && same_forward,
          fmt("final loss %.17g twice: %s; checkpoint bytes equal: %s; round-trip forward bit-identical: %s",
              a.final_loss, same_loss ? "yes" : "no", same_bytes ? "yes" : "no", same_forward ? "yes" : "no")};
}

double mean_unseen(const CrossEvalReport& r) {
  return (r.row.at(Method::kB).mean_auc + r.row.at(Method::kC).mean_auc + r.row.at(Method::kD).mean_auc) / 3.0;
}

json row_json(const CrossEvalReport& r) {
  json j = json::object();
  for (const auto& [m, cell] : r.row) j[to_string(m)] = {{"mean", cell.mean_auc}, {"seeds", cell.seed_auc}};
  return j;
}

struct Experiments {
  std::optional<CrossEvalReport> full, rgb, srm;
  double first_run_seconds = 0;
  double within_auc = 0;
};

CrossEvalReport run_ladder_entry(const char* label, StreamMode streams, const std::vector<LoadedSample>& train_split,
                                 const std::vector<LoadedSample>& val_split, const std::vector<LoadedSample>& test_split,
                                 double* first_run_seconds) {
  TrainConfig config;
  config.model.entry.streams = streams;
  const auto start = Clock::now();
  int runs_done = 0;
  auto report = cross_eval(config, train_split, val_split, test_split, Method::kA, {1, 2, 3}, [&](const EpochLog& e) {
    std::printf("  [%s seed %d] epoch %2d loss %.6f val auc %.4f (%.0f s)\n", label, runs_done + 1, e.epoch,
                e.mean_loss, e.val_auc.value_or(-1.0), seconds_since(start));
    std::fflush(stdout);
    if (e.epoch == config.epochs) {
      if (runs_done == 0 && first_run_seconds) *first_run_seconds = seconds_since(start);
      ++runs_done;
    }
  });
  std::printf("  [%s] mean AUC A %.4f B %.4f C %.4f D %.4f (%.0f s)\n", label, report.row.at(Method::kA).mean_auc,
              report.row.at(Method::kB).mean_auc, report.row.at(Method::kC).mean_auc,
              report.row.at(Method::kD).mean_auc, seconds_since(start));
  std::fflush(stdout);
  return report;
}

Outcome within_method(const Experiments& ex, const std::vector<LoadedSample>& test_split, json& out) {
  const TwoStreamModel<float> model = restore_model(ex.full->training.front().best);
  const auto subset = select_method(test_split, Method::kA);
  std::vector<int> labels;
  for (const auto& s : subset) labels.push_back(s.record.label);
  const double test_auc = auc(predict(model, subset), labels);
  out = {{"test_auc", test_auc}, {"test_samples", subset.size()}, {"train_seconds", ex.first_run_seconds}};
  return {test_auc >= 0.90 && ex.first_run_seconds <= 1800.0,
          fmt("test AUC %.4f on %zu method-A test samples; training %.0f s", test_auc, subset.size(),
              ex.first_run_seconds)};
}

Outcome generalization(const Experiments& ex, json& out) {
  const double full = mean_unseen(*ex.full), rgb = mean_unseen(*ex.rgb), srm = mean_unseen(*ex.srm);
  out = {{"unseen_mean", {{"rgb_only", rgb}, {"srm_only", srm}, {"full", full}}},
         {"rows", {{"rgb_only", row_json(*ex.rgb)}, {"srm_only", row_json(*ex.srm)}, {"full", row_json(*ex.full)}}}};
  return {full >= rgb && full - rgb > 0.0,
          fmt("unseen-method mean AUC: RGB-only %.4f, SRM-only %.4f, full %.4f (improvement %+.4f)", rgb, srm, full,
              full - rgb)};
}

Outcome diagonal(const Experiments& ex, json& out) {
  const auto& row = ex.full->row;
  const double within = row.at(Method::kA).mean_auc;
  bool ok = true;
  for (Method m : {Method::kB, Method::kC, Method::kD}) ok = ok && within > row.at(m).mean_auc;
  out = row_json(*ex.full);
  return {ok, fmt("full model A->A %.4f vs A->B %.4f, A->C %.4f, A->D %.4f", within, row.at(Method::kB).mean_auc,
                  row.at(Method::kC).mean_auc, row.at(Method::kD).mean_auc)};
}

Outcome localization(const std::vector<LoadedSample>& train_split, json& out) {
  const auto probe = first_pairs(train_split, Method::kA, 4);
  TrainConfig config;
  config.epochs = 200;
  const TrainResult trained = train(config, probe, {});
  const TwoStreamModel<float> model = restore_model(trained.last);
  std::vector<int> labels;
  for (const auto& s : probe) labels.push_back(s.record.label);
  const double train_accuracy = accuracy(predict(model, probe), labels);

  const auto layers = [&] {
    NoGradGuard no_grad;
    return spatial_layers(model.forward(image_to_tensor<float>(probe.front().image)));
  }();
  json per_layer = json::object();
  double chosen = -1;
  int fakes = 0;
  for (const auto& layer : layers) {
    int inside = 0;
    fakes = 0;
    for (const auto& s : probe) {
      if (s.record.label != 1) continue;
      ++fakes;
      if (mask_heat_contrast(gradcam(model, s.image, layer), s.mask) > 0) ++inside;
    }
    const double fraction = static_cast<double>(inside) / fakes;
    per_layer[layer] = fraction;
    if (layer == kGradcamLayer) chosen = fraction;
    std::printf("  gradcam %-22s inside > outside on %d/%d fakes\n", layer.c_str(), inside, fakes);
  }
  out = {{"layer", kGradcamLayer}, {"fraction", chosen}, {"train_accuracy", train_accuracy},
         {"final_loss", trained.final_loss}, {"per_layer", per_layer}};
  return {chosen >= 0.70, fmt("layer %s: inside > outside on %.0f%% of %d fakes; probe train accuracy %.3f",
                              kGradcamLayer, 100.0 * chosen, fakes, train_accuracy)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance run"};
  std::string work_dir = "acceptance_work";
  std::vector<int> only;
  app.add_option("--work-dir", work_dir, "Scratch directory for datasets and reports");
  app.add_option("--only", only, "Run only these criteria")->check(CLI::Range(1, 10));
  CLI11_PARSE(app, argc, argv);
  const auto wanted = [&](int c) { return only.empty() || std::find(only.begin(), only.end(), c) != only.end(); };

  const fs::path work(work_dir);
  fs::create_directories(work);
  json summary = json::object();
  std::map<int, Outcome> results;
  const char* titles[] = {"",
                          "gradient suite",
                          "SRM oracle",
                          "DCMA algebra",
                          "loss reduction",
                          "AUC oracle",
                          "determinism and checkpoint",
                          "within-method learning",
                          "directional generalization",
                          "diagonal dominance",
                          "Grad-CAM localization"};
  const auto record = [&](int c, Outcome o) {
    std::printf("criterion %2d %s: %s: %s\n", c, o.pass ? "PASS" : "FAIL", titles[c], o.detail.c_str());
    std::fflush(stdout);
    summary[std::to_string(c)]["pass"] = o.pass;
    summary[std::to_string(c)]["detail"] = o.detail;
    results[c] = std::move(o);
  };
  const auto guarded = [&](int c, auto&& body) {
    if (!wanted(c)) return;
    json detail;
    try {
      Outcome o = body(detail);
      summary[std::to_string(c)]["data"] = detail;
      record(c, std::move(o));
    } catch (const std::exception& e) {
      record(c, {false, std::string("error: ") + e.what()});
    }
  };

  guarded(1, gradient_suite);
  guarded(2, srm_oracle);
  guarded(3, dcma_algebra);
  guarded(4, loss_reduction);
  guarded(5, auc_oracle);
  guarded(6, [&](json& j) { return determinism(work, j); });

  if (wanted(7) || wanted(8) || wanted(9) || wanted(10)) {
    const fs::path data = work / "data";
    fs::remove_all(data);
    const DatasetManifest manifest = build_dataset(DatasetConfig::per_method(1, 400, 64), data.string());
    const auto train_split = load_split(manifest, data.string(), "train", 1, true);
    const auto val_split = load_split(manifest, data.string(), "val");
    const auto test_split = load_split(manifest, data.string(), "test");

    Experiments ex;
    if (wanted(7) || wanted(8) || wanted(9)) {
      try {
        ex.full = run_ladder_entry("full", StreamMode::kBoth, train_split, val_split, test_split,
                                   &ex.first_run_seconds);
        if (wanted(8)) {
          ex.rgb = run_ladder_entry("rgb-only", StreamMode::kRgbOnly, train_split, val_split, test_split, nullptr);
          ex.srm = run_ladder_entry("srm-only", StreamMode::kSrmOnly, train_split, val_split, test_split, nullptr);
        }
      } catch (const std::exception& e) {
        for (int c : {7, 8, 9})
          if (wanted(c)) record(c, {false, std::string("error: ") + e.what()});
      }
    }
    if (ex.full) {
      guarded(7, [&](json& j) { return within_method(ex, test_split, j); });
      if (ex.rgb && ex.srm) guarded(8, [&](json& j) { return generalization(ex, j); });
      guarded(9, [&](json& j) { return diagonal(ex, j); });
    }
    guarded(10, [&](json& j) { return localization(train_split, j); });
  }

  int passed = 0;
  for (const auto& [c, o] : results) passed += o.pass;
  std::printf("%d/%zu criteria passed\n", passed, results.size());
  std::ofstream(work / "acceptance.json") << summary.dump(2) << "\n";
  return passed == static_cast<int>(results.size()) ? 0 : 1;
}
