#include "hff/train.hpp"

#include <atomic>
#include <cmath>
#include <exception>
#include <filesystem>
#include <mutex>
#include <thread>

#include "hff/adam.hpp"
#include "hff/errors.hpp"
#include "hff/metrics.hpp"

namespace hff {

namespace fs = std::filesystem;
using nlohmann::json;

const char* build_id() { return HFF_BUILD_ID; }

std::vector<LoadedSample> load_split(const DatasetManifest& manifest, const std::string& dataset_dir,
                                     const std::string& split, int threads, bool with_masks) {
  require(threads >= 1, "load_split: threads must be >= 1");
  const auto& records = manifest.split(split);
  std::vector<LoadedSample> samples(records.size());
  auto load_one = [&](std::size_t i) {
    samples[i].record = records[i];
    const std::string path = (fs::path(dataset_dir) / records[i].path).string();
    samples[i].image = read_png(path);
    if (with_masks && records[i].label == 1) samples[i].mask = read_png(mask_path(path));
  };
  if (threads == 1) {
    for (std::size_t i = 0; i < samples.size(); ++i) load_one(i);
    return samples;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> workers;
  for (int t = 0; t < threads; ++t) {
    workers.emplace_back([&] {
      for (std::size_t i = next++; i < samples.size(); i = next++) {
        try {
          load_one(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& w : workers) w.join();
  if (failure) std::rethrow_exception(failure);
  return samples;
}

std::vector<LoadedSample> select_method(const std::vector<LoadedSample>& samples, std::optional<Method> method) {
  if (!method) return samples;
  std::vector<LoadedSample> out;
  for (const auto& s : samples) {
    const bool keep = s.record.label == 1 ? s.record.method == *method : s.record.source_method() == *method;
    if (keep) out.push_back(s);
  }
  return out;
}

namespace {

std::vector<int> labels_of(const std::vector<LoadedSample>& samples) {
  std::vector<int> labels;
  labels.reserve(samples.size());
  for (const auto& s : samples) labels.push_back(s.record.label);
  return labels;
}

bool has_both_classes(const std::vector<LoadedSample>& samples) {
  bool real = false, fake = false;
  for (const auto& s : samples) (s.record.label == 1 ? fake : real) = true;
  return real && fake;
}

}  // namespace

std::vector<double> predict(const TwoStreamModel<float>& model, const std::vector<LoadedSample>& samples,
                            int batch_size) {
  require(batch_size > 0, "predict: batch size must be positive");
  NoGradGuard no_grad;
  std::vector<double> scores;
  scores.reserve(samples.size());
  for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(samples.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<const Image8*> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(&samples[i].image);
    const ModelOutput<float> out = model.forward(images_to_tensor<float>(batch));
    for (Index i = 0; i < out.p_fake.size(); ++i) scores.push_back(out.p_fake[i]);
  }
  return scores;
}

TrainResult train(const TrainConfig& config, const std::vector<LoadedSample>& train_set,
                  const std::vector<LoadedSample>& val_set, const EpochCallback& on_epoch) {
  config.validate();
  require(!train_set.empty(), "train: the training split is empty");
  require(has_both_classes(train_set), "train: training data must contain both real and fake samples");
  for (const auto& s : train_set)
    require(s.image.width == config.model.input_size && s.image.height == config.model.input_size,
            "train: " + s.record.path + " is not " + std::to_string(config.model.input_size) + "x" +
                std::to_string(config.model.input_size));

  TwoStreamModel<float> model(config.model, config.seed);
  AdamState<float> adam;
  Rng order_rng(mix_seed(config.seed, stable_hash("batch-order")));
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const bool validate = !val_set.empty() && has_both_classes(val_set);
  const std::vector<int> val_labels = labels_of(val_set);

  TrainResult result;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    order_rng.shuffle(order.begin(), order.end());
    double loss_total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      std::vector<const Image8*> images;
      std::vector<int> labels;
      for (std::size_t k = start; k < end; ++k) {
        images.push_back(&train_set[order[k]].image);
        labels.push_back(train_set[order[k]].record.label);
      }
      const ModelOutput<float> out = model.forward(images_to_tensor<float>(images));
      const Var<float> loss = model.loss(out, labels);
      const float value = loss.value()[0];
      if (!std::isfinite(value)) {
        std::string ids;
        for (std::size_t k = start; k < end; ++k) ids += (ids.empty() ? "" : ", ") + train_set[order[k]].record.path;
        throw ContractError("train: non-finite loss at epoch " + std::to_string(epoch) + " in batch [" + ids + "]");
      }
      backward(loss);
      adam_step(model.params(), adam, config.lr);
      zero_grad(model.params());
      loss_total += static_cast<double>(value) * static_cast<double>(end - start);
    }
    EpochLog entry;
    entry.epoch = epoch;
    entry.mean_loss = loss_total / static_cast<double>(order.size());
    if (validate) entry.val_auc = auc(predict(model, val_set), val_labels);
    result.log.push_back(entry);
    if (on_epoch) on_epoch(entry);

    const bool improved = !validate || !result.best_val_auc || *entry.val_auc >= *result.best_val_auc;
    if (improved) {
      result.best = snapshot(model, config);
      result.best_epoch = epoch;
      result.best_val_auc = entry.val_auc;
    }
  }
  result.final_loss = result.log.empty() ? 0.0 : result.log.back().mean_loss;
  result.last = snapshot(model, config);
  if (result.log.empty()) {
    result.best = result.last;
  }
  return result;
}

namespace {

MethodMetrics score_subset(const std::vector<double>& scores, const std::vector<int>& labels,
                           const std::vector<std::string>& videos) {
  MethodMetrics m;
  for (int y : labels) (y == 1 ? m.n_fake : m.n_real) += 1;
  m.auc = auc(scores, labels);
  m.accuracy = accuracy(scores, labels);
  const VideoScores v = group_by_video(videos, scores, labels);
  bool real = false, fake = false;
  for (int y : v.labels) (y == 1 ? fake : real) = true;
  if (real && fake) m.video_auc = auc(v.scores, v.labels);
  return m;
}

json metrics_json(const MethodMetrics& m) {
  json j{{"auc", m.auc}, {"accuracy", m.accuracy}, {"n_real", m.n_real}, {"n_fake", m.n_fake}};
  j["video_auc"] = m.video_auc ? json(*m.video_auc) : json(nullptr);
  return j;
}

}  // namespace

EvalReport evaluate(const TwoStreamModel<float>& model, const std::vector<LoadedSample>& samples,
                    const std::string& split, const json& config) {
  require(has_both_classes(samples), "evaluate: split '" + split + "' needs both real and fake samples");
  const std::vector<double> scores = predict(model, samples);
  EvalReport report;
  report.split = split;
  report.config = config;
  report.build_id = build_id();

  std::vector<int> all_labels = labels_of(samples);
  std::vector<std::string> all_videos;
  for (const auto& s : samples) all_videos.push_back(s.record.video_id);
  report.overall = score_subset(scores, all_labels, all_videos);

  for (Method method : kForgeryMethods) {
    std::vector<double> sub_scores;
    std::vector<int> sub_labels;
    std::vector<std::string> sub_videos;
    bool any_fake = false;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const auto& r = samples[i].record;
      if (r.label == 1 && r.method != method) continue;
      any_fake = any_fake || r.label == 1;
      sub_scores.push_back(scores[i]);
      sub_labels.push_back(r.label);
      sub_videos.push_back(r.video_id);
    }
    if (any_fake) report.per_method[method] = score_subset(sub_scores, sub_labels, sub_videos);
  }
  return report;
}

CrossEvalReport cross_eval(const TrainConfig& config, const std::vector<LoadedSample>& train_split,
                           const std::vector<LoadedSample>& val_split, const std::vector<LoadedSample>& test_split,
                           Method train_method, const std::vector<unsigned long long>& seeds,
                           const EpochCallback& on_epoch) {
  require(train_method != Method::kNone, "cross_eval: train method must be one of A, B, C, D");
  require(!seeds.empty(), "cross_eval: at least one seed is required");
  for (Method m : kForgeryMethods) {
    bool present = false;
    for (const auto& s : test_split) present = present || (s.record.label == 1 && s.record.method == m);
    require(present, "cross_eval: test split has no fakes of method " + to_string(m));
  }
  const auto train_set = select_method(train_split, train_method);
  const auto val_set = select_method(val_split, train_method);

  CrossEvalReport report;
  report.train_method = train_method;
  report.seeds = seeds;
  report.config = to_json(config);
  report.build_id = build_id();
  for (unsigned long long seed : seeds) {
    TrainConfig run = config;
    run.seed = seed;
    TrainResult trained = train(run, train_set, val_set, on_epoch);
    const TwoStreamModel<float> model = restore_model(trained.best);
    EvalReport eval = evaluate(model, test_split, "test", to_json(run));
    for (const auto& [method, metrics] : eval.per_method) {
      CrossEvalCell& cell = report.row[method];
      cell.seed_auc.push_back(metrics.auc);
      cell.n_real = metrics.n_real;
      cell.n_fake = metrics.n_fake;
    }
    report.runs.push_back(std::move(eval));
    report.training.push_back(std::move(trained));
  }
  for (auto& [method, cell] : report.row) {
    double total = 0;
    for (double a : cell.seed_auc) total += a;
    cell.mean_auc = total / static_cast<double>(cell.seed_auc.size());
  }
  return report;
}

json to_json(const EvalReport& report) {
  json per_method = json::object();
  for (const auto& [method, m] : report.per_method) per_method[to_string(method)] = metrics_json(m);
  return json{{"split", report.split},
              {"per_method", per_method},
              {"overall", metrics_json(report.overall)},
              {"config", report.config},
              {"build_id", report.build_id}};
}

json to_json(const CrossEvalReport& report) {
  json cells = json::array();
  for (Method m : kForgeryMethods) {
    auto it = report.row.find(m);
    if (it == report.row.end()) continue;
    cells.push_back(json{{"test_method", to_string(m)},
                         {"auc", it->second.mean_auc},
                         {"seed_auc", it->second.seed_auc},
                         {"n_real", it->second.n_real},
                         {"n_fake", it->second.n_fake}});
  }
  json runs = json::array();
  for (std::size_t i = 0; i < report.runs.size(); ++i) {
    json losses = json::array();
    for (const auto& e : report.training[i].log) {
      losses.push_back(json{{"epoch", e.epoch},
                            {"mean_loss", e.mean_loss},
                            {"val_auc", e.val_auc ? json(*e.val_auc) : json(nullptr)}});
    }
    runs.push_back(json{{"seed", report.seeds[i]},
                        {"best_epoch", report.training[i].best_epoch},
                        {"epochs", losses},
                        {"report", to_json(report.runs[i])}});
  }
  return json{{"train_method", to_string(report.train_method)},
              {"seeds", report.seeds},
              {"matrix", json{{"rows", json::array({to_string(report.train_method)})},
                              {"cols", json{"A", "B", "C", "D"}},
                              {"cells", json::array({cells})}}},
              {"runs", runs},
              {"config", report.config},
              {"build_id", report.build_id}};
}

std::vector<std::string> spatial_layers(const ModelOutput<float>& out) {
  std::vector<std::string> names;
  for (const auto& [name, v] : out.activations)
    if (v.rank() == 4) names.push_back(name);
  return names;
}

Heatmap gradcam_from(const Tensor<float>& activation, const Tensor<float>& gradient, int height, int width) {
  require(activation.rank() == 4 && same_shape(activation, gradient),
          "gradcam: activation and gradient must share a [B,C,h,w] shape");
  const Index channels = activation.dim(1), h = activation.dim(2), w = activation.dim(3);
  const Index plane = h * w;
  std::vector<double> cam(static_cast<std::size_t>(plane), 0.0);
  for (Index c = 0; c < channels; ++c) {
    double weight = 0;
    for (Index p = 0; p < plane; ++p) weight += gradient[c * plane + p];
    weight /= static_cast<double>(plane);
    for (Index p = 0; p < plane; ++p) cam[static_cast<std::size_t>(p)] += weight * activation[c * plane + p];
  }
  for (double& v : cam) v = std::max(v, 0.0);

  Heatmap heat;
  heat.height = height;
  heat.width = width;
  heat.values.resize(static_cast<std::size_t>(height * width));
  auto at = [&](Index y, Index x) {
    return cam[static_cast<std::size_t>(std::clamp<Index>(y, 0, h - 1) * w + std::clamp<Index>(x, 0, w - 1))];
  };
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const double sy = (y + 0.5) * static_cast<double>(h) / height - 0.5;
      const double sx = (x + 0.5) * static_cast<double>(w) / width - 0.5;
      const auto y0 = static_cast<Index>(std::floor(sy)), x0 = static_cast<Index>(std::floor(sx));
      const double fy = sy - static_cast<double>(y0), fx = sx - static_cast<double>(x0);
      heat.values[static_cast<std::size_t>(y * width + x)] =
          (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
          fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
    }
  const auto [lo_it, hi_it] = std::minmax_element(heat.values.begin(), heat.values.end());
  const double lo = *lo_it, hi = *hi_it;
  if (hi <= 0.0) {
    std::fill(heat.values.begin(), heat.values.end(), 0.0);
  } else if (hi == lo) {
    std::fill(heat.values.begin(), heat.values.end(), 1.0);
  } else {
    for (double& v : heat.values) v = (v - lo) / (hi - lo);
  }
  return heat;
}

Heatmap gradcam(const TwoStreamModel<float>& model, const Image8& image, const std::string& layer) {
  const ModelOutput<float> out = model.forward(image_to_tensor<float>(image));
  const auto layers = spatial_layers(out);
  if (std::find(layers.begin(), layers.end(), layer) == layers.end()) {
    std::string names;
    for (const auto& n : layers) names += (names.empty() ? "" : ", ") + n;
    throw ContractError("gradcam: unknown layer '" + layer + "'; available: " + names);
  }
  const Var<float>& act = out.activations.at(layer);
  Tensor<float> seed(out.cosines.shape());
  seed[1] = 1.0f;  // fake-class cosine
  backward(out.cosines, &seed);
  const Tensor<float> grad = act.has_grad() ? act.grad() : Tensor<float>(act.shape());
  for (auto p : model.store().params()) p.var.zero_grad();
  return gradcam_from(act.value(), grad, image.height, image.width);
}

double mask_heat_contrast(const Heatmap& heatmap, const Image8& mask) {
  require(mask.channels == 1 && mask.width == heatmap.width && mask.height == heatmap.height,
          "mask_heat_contrast: mask must be single-channel and match the heatmap");
  double inside = 0, outside = 0;
  std::size_t n_in = 0, n_out = 0;
  for (std::size_t i = 0; i < heatmap.values.size(); ++i) {
    if (mask.pixels[i] > 0) {
      inside += heatmap.values[i];
      ++n_in;
    } else {
      outside += heatmap.values[i];
      ++n_out;
    }
  }
  require(n_in > 0 && n_out > 0, "mask_heat_contrast: mask must have both inside and outside pixels");
  return inside / static_cast<double>(n_in) - outside / static_cast<double>(n_out);
}

}  // namespace hff
