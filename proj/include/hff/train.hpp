#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "hff/checkpoint.hpp"
#include "hff/forgery.hpp"

namespace hff {

/// A manifest record with its decoded pixels (and tamper mask, when loaded).
struct LoadedSample {
  ManifestRecord record;
  Image8 image;
  Image8 mask;
};

/// Reads every image of `split`. Worker threads only decode files into fixed
/// slots, so the result does not depend on `threads`.
std::vector<LoadedSample> load_split(const DatasetManifest& manifest, const std::string& dataset_dir,
                                     const std::string& split, int threads = 1, bool with_masks = false);

/// Fakes of `method` plus the reals they were forged from; all samples when
/// `method` is empty.
std::vector<LoadedSample> select_method(const std::vector<LoadedSample>& samples, std::optional<Method> method);

struct EpochLog {
  int epoch = 0;
  double mean_loss = 0.0;
  std::optional<double> val_auc;
};

struct TrainResult {
  std::vector<EpochLog> log;
  double final_loss = 0.0;  // mean loss of the last epoch
  int best_epoch = 0;
  std::optional<double> best_val_auc;
  Checkpoint best;  // highest validation AUC (latest on ties); the last epoch without validation data
  Checkpoint last;
};

using EpochCallback = std::function<void(const EpochLog&)>;

TrainResult train(const TrainConfig& config, const std::vector<LoadedSample>& train_set,
                  const std::vector<LoadedSample>& val_set, const EpochCallback& on_epoch = {});

/// Margin-free fake probability for every sample, in input order.
std::vector<double> predict(const TwoStreamModel<float>& model, const std::vector<LoadedSample>& samples,
                            int batch_size = 32);

struct MethodMetrics {
  double auc = 0.0;
  double accuracy = 0.0;
  std::optional<double> video_auc;
  int n_real = 0;
  int n_fake = 0;
};

struct EvalReport {
  std::string split;
  std::map<Method, MethodMetrics> per_method;  // reals of the split against each method's fakes
  MethodMetrics overall;
  nlohmann::json config;
  std::string build_id;
};

EvalReport evaluate(const TwoStreamModel<float>& model, const std::vector<LoadedSample>& samples,
                    const std::string& split, const nlohmann::json& config);

struct CrossEvalCell {
  double mean_auc = 0.0;
  std::vector<double> seed_auc;  // one per seed
  int n_real = 0;
  int n_fake = 0;
};

struct CrossEvalReport {
  Method train_method = Method::kA;
  std::vector<unsigned long long> seeds;
  std::map<Method, CrossEvalCell> row;  // test method -> cell
  std::vector<EvalReport> runs;        // per seed
  std::vector<TrainResult> training;   // per seed
  nlohmann::json config;
  std::string build_id;
};

/// Trains one model per seed on the train-method subset of the train split
/// (validated on the same subset of val) and scores every method of the test split.
CrossEvalReport cross_eval(const TrainConfig& config, const std::vector<LoadedSample>& train_split,
                           const std::vector<LoadedSample>& val_split, const std::vector<LoadedSample>& test_split,
                           Method train_method, const std::vector<unsigned long long>& seeds,
                           const EpochCallback& on_epoch = {});

nlohmann::json to_json(const EvalReport& report);
nlohmann::json to_json(const CrossEvalReport& report);

/// Row-major H x W class-activation map with values in [0,1].
struct Heatmap {
  int height = 0;
  int width = 0;
  std::vector<double> values;
};

/// Grad-CAM of the fake-class cosine with respect to the named activation.
/// Throws ContractError listing the spatial activation names when `layer`
/// is not one of them.
Heatmap gradcam(const TwoStreamModel<float>& model, const Image8& image, const std::string& layer);

/// Grad-CAM from an activation and its gradient, both [C,h,w] slices of
/// batch row 0, upsampled to `height` x `width`.
Heatmap gradcam_from(const Tensor<float>& activation, const Tensor<float>& gradient, int height, int width);

/// Mean heat over the tamper-mask support minus the mean outside it.
double mask_heat_contrast(const Heatmap& heatmap, const Image8& mask);

std::vector<std::string> spatial_layers(const ModelOutput<float>& out);

const char* build_id();

}  // namespace hff
