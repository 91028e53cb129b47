#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "hff/checkpoint.hpp"
#include "hff/errors.hpp"
#include "hff/gradcheck_suite.hpp"
#include "hff/train.hpp"

namespace {

namespace fs = std::filesystem;
using hff::ContractError;
using hff::IoError;

void write_json(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot create " + path);
  out << j.dump(2) << "\n";
  if (!out) throw IoError("failed writing " + path);
}

std::optional<hff::Method> parse_train_method(const std::string& text) {
  if (text == "all") return std::nullopt;
  const hff::Method m = hff::parse_method(text);
  if (m == hff::Method::kNone) throw ContractError("train method must be A, B, C, D or all");
  return m;
}

std::vector<unsigned long long> parse_seeds(const std::string& text) {
  std::vector<unsigned long long> seeds;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) throw ContractError("invalid seed '" + item + "' in --seeds");
    seeds.push_back(v);
  }
  if (seeds.empty()) throw ContractError("--seeds must list at least one seed");
  return seeds;
}

void print_epoch(const hff::EpochLog& e) {
  std::printf("epoch %3d  loss %.6f", e.epoch, e.mean_loss);
  if (e.val_auc) std::printf("  val_auc %.4f", *e.val_auc);
  std::printf("\n");
  std::fflush(stdout);
}

void write_map(const std::string& path, const std::vector<double>& values, int h, int w) {
  hff::write_png(path, hff::map_to_gray(values, h, w));
}

int run(int argc, char** argv) {
  CLI::App app{"Two-stream high-frequency forgery detector"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic forgery dataset");
  std::string gen_out;
  unsigned long long gen_seed = 1;
  int per_method = 400, size = 64;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--seed", gen_seed, "Global seed");
  gen->add_option("--per-method", per_method, "Training fakes per method (val K/8, test K/4)");
  gen->add_option("--size", size, "Image side in pixels");

  auto* tr = app.add_subcommand("train", "Train a detector");
  std::string data_dir, config_path, train_method = "A", ckpt_out;
  tr->add_option("--data", data_dir)->required();
  tr->add_option("--config", config_path)->required();
  tr->add_option("--train-method", train_method, "A, B, C, D or all");
  tr->add_option("--out", ckpt_out, "Checkpoint path")->required();

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
  std::string ckpt_path, split = "test", report_path;
  ev->add_option("--ckpt", ckpt_path)->required();
  ev->add_option("--data", data_dir)->required();
  ev->add_option("--split", split)->check(CLI::IsMember({"val", "test", "train"}));
  ev->add_option("--report", report_path)->required();

  auto* cx = app.add_subcommand("cross-eval", "Train on one method, test on all four");
  std::string seeds_text = "1,2,3";
  cx->add_option("--data", data_dir)->required();
  cx->add_option("--config", config_path)->required();
  cx->add_option("--train-method", train_method)->required();
  cx->add_option("--report", report_path)->required();
  cx->add_option("--seeds", seeds_text, "Comma-separated seeds");

  auto* srm = app.add_subcommand("srm", "Export the 9 SRM residual channels of an image");
  std::string image_path, out_prefix;
  srm->add_option("--image", image_path)->required();
  srm->add_option("--out-prefix", out_prefix)->required();

  auto* cam = app.add_subcommand("gradcam", "Grad-CAM heatmap of the fake class");
  std::string layer, out_path;
  cam->add_option("--ckpt", ckpt_path)->required();
  cam->add_option("--image", image_path)->required();
  cam->add_option("--layer", layer)->required();
  cam->add_option("--out", out_path)->required();

  auto* att = app.add_subcommand("attention", "Export residual-guided and cross-modality attention maps");
  att->add_option("--ckpt", ckpt_path)->required();
  att->add_option("--image", image_path)->required();
  att->add_option("--out-prefix", out_prefix)->required();

  auto* gc = app.add_subcommand("gradcheck", "Run the 64-bit gradient-check suite");
  int gc_seeds = 20;
  gc->add_option("--seeds", gc_seeds, "Random seeds per case");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  if (gen->parsed()) {
    hff::DatasetConfig config = hff::DatasetConfig::per_method(gen_seed, per_method, size);
    const hff::DatasetManifest manifest = hff::build_dataset(config, gen_out);
    std::printf("wrote %s (digest %s)\n", (fs::path(gen_out) / "manifest.json").c_str(), manifest.digest().c_str());
    for (const auto& [name, records] : manifest.splits) std::printf("  %-5s %zu samples\n", name.c_str(), records.size());
    return 0;
  }
  if (tr->parsed()) {
    const hff::TrainConfig config = hff::load_train_config(config_path);
    const auto method = parse_train_method(train_method);
    const hff::DatasetManifest manifest = hff::load_manifest(data_dir);
    const auto train_set =
        hff::select_method(hff::load_split(manifest, data_dir, "train", config.loader_threads), method);
    std::vector<hff::LoadedSample> val_set;
    if (manifest.splits.contains("val"))
      val_set = hff::select_method(hff::load_split(manifest, data_dir, "val", config.loader_threads), method);
    const hff::TrainResult result = hff::train(config, train_set, val_set, print_epoch);
    hff::save_checkpoint(ckpt_out, result.best);
    std::printf("final loss %.9g; best epoch %d; checkpoint %s\n", result.final_loss, result.best_epoch,
                ckpt_out.c_str());
    return 0;
  }
  if (ev->parsed()) {
    const hff::Checkpoint ckpt = hff::load_checkpoint(ckpt_path);
    const hff::TrainConfig config = hff::checkpoint_config(ckpt);
    const hff::TwoStreamModel<float> model = hff::restore_model(ckpt);
    const hff::DatasetManifest manifest = hff::load_manifest(data_dir);
    const auto samples = hff::load_split(manifest, data_dir, split, config.loader_threads);
    const hff::EvalReport report = hff::evaluate(model, samples, split, ckpt.config);
    write_json(report_path, hff::to_json(report));
    std::printf("overall auc %.4f accuracy %.4f\n", report.overall.auc, report.overall.accuracy);
    for (const auto& [m, metrics] : report.per_method)
      std::printf("  %s: auc %.4f accuracy %.4f (%d real / %d fake)\n", hff::to_string(m).c_str(), metrics.auc,
                  metrics.accuracy, metrics.n_real, metrics.n_fake);
    return 0;
  }
  if (cx->parsed()) {
    const hff::TrainConfig config = hff::load_train_config(config_path);
    const hff::Method method = hff::parse_method(train_method);
    if (method == hff::Method::kNone) throw ContractError("cross-eval needs a train method A, B, C or D");
    const auto seeds = parse_seeds(seeds_text);
    const hff::DatasetManifest manifest = hff::load_manifest(data_dir);
    const auto train_split = hff::load_split(manifest, data_dir, "train", config.loader_threads);
    const auto val_split = hff::load_split(manifest, data_dir, "val", config.loader_threads);
    const auto test_split = hff::load_split(manifest, data_dir, "test", config.loader_threads);
    const hff::CrossEvalReport report =
        hff::cross_eval(config, train_split, val_split, test_split, method, seeds, print_epoch);
    write_json(report_path, hff::to_json(report));
    std::printf("train %s:", train_method.c_str());
    for (const auto& [m, cell] : report.row) std::printf("  %s %.4f", hff::to_string(m).c_str(), cell.mean_auc);
    std::printf("\n");
    return 0;
  }
  if (srm->parsed()) {
    const hff::Image8 image = hff::read_png(image_path);
    if (image.channels != 3) throw ContractError("srm: " + image_path + " is not an RGB image");
    hff::SrmKernelBank bank;
    const auto residual = hff::srm_residual_image(hff::Var<double>(hff::image_to_tensor<double>(image)), bank);
    const hff::Index plane = image.width * image.height;
    static const char* kChannels = "rgb";
    for (int k = 0; k < hff::SrmKernelBank::kKernels; ++k)
      for (int c = 0; c < 3; ++c) {
        const hff::Index ch = k * 3 + c;
        std::vector<double> values(residual.value().data() + ch * plane, residual.value().data() + (ch + 1) * plane);
        const std::string path = out_prefix + "_k" + std::to_string(k + 1) + "_" + kChannels[c] + ".png";
        write_map(path, values, image.height, image.width);
        std::printf("%s\n", path.c_str());
      }
    return 0;
  }
  if (cam->parsed()) {
    const hff::TwoStreamModel<float> model = hff::restore_model(hff::load_checkpoint(ckpt_path));
    const hff::Heatmap heat = hff::gradcam(model, hff::read_png(image_path), layer);
    hff::Image8 gray(heat.width, heat.height, 1);
    for (std::size_t i = 0; i < heat.values.size(); ++i)
      gray.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(heat.values[i], 0.0, 1.0) * 255.0));
    hff::write_png(out_path, gray);
    return 0;
  }
  if (att->parsed()) {
    const hff::TwoStreamModel<float> model = hff::restore_model(hff::load_checkpoint(ckpt_path));
    const hff::Image8 image = hff::read_png(image_path);
    hff::NoGradGuard no_grad;
    const auto out = model.forward(hff::image_to_tensor<float>(image));
    for (const auto& [name, v] : out.activations) {
      const bool rsa = name == "entry.rsa";
      const bool dcma = name.rfind("dcma.", 0) == 0 && name.find("attention") != std::string::npos;
      if (!rsa && !dcma) continue;
      const auto& t = v.value();
      const int h = static_cast<int>(t.dim(t.rank() - 2)), w = static_cast<int>(t.dim(t.rank() - 1));
      std::vector<double> values(t.data(), t.data() + h * w);
      const std::string path = out_prefix + "_" + name + ".png";
      write_map(path, values, h, w);
      std::printf("%s\n", path.c_str());
    }
    return 0;
  }
  if (gc->parsed()) {
    if (gc_seeds < 1) throw ContractError("--seeds must be positive");
    const auto start = std::chrono::steady_clock::now();
    bool ok = true;
    hff::run_gradcheck_suite(gc_seeds, [&](const hff::GradCheckOutcome& o) {
      std::printf("%-30s max rel err %.3e (tol %.0e, %d seeds) %s\n", o.name.c_str(), o.worst, o.tolerance, o.seeds,
                  o.passed ? "ok" : "FAIL");
      std::fflush(stdout);
      ok = ok && o.passed;
    });
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("%s in %.1f s\n", ok ? "all passed" : "FAILED", secs);
    return ok ? 0 : 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const ContractError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const nlohmann::json::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
