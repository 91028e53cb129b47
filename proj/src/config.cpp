#include "hff/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "hff/errors.hpp"

namespace hff {

using nlohmann::json;

std::string to_string(StreamMode mode) {
  switch (mode) {
    case StreamMode::kBoth: return "both";
    case StreamMode::kRgbOnly: return "rgb";
    case StreamMode::kSrmOnly: return "srm";
  }
  return "both";
}

StreamMode parse_stream_mode(const std::string& text) {
  if (text == "both") return StreamMode::kBoth;
  if (text == "rgb") return StreamMode::kRgbOnly;
  if (text == "srm") return StreamMode::kSrmOnly;
  throw ContractError("unknown stream mode '" + text + "' (expected both, rgb or srm)");
}

void EntryConfig::validate() const {
  require(!widths.empty(), "entry: at least one scale is required");
  for (int w : widths) require(w > 0, "entry: channel widths must be positive");
  for (int s : rsa_scales) require(s >= 1 && s <= num_scales(), "entry: rsa scale " + std::to_string(s) + " out of range");
  require(rsa_kernel > 0 && rsa_kernel % 2 == 1, "entry: rsa_kernel must be a positive odd integer");
}

void ModelConfig::validate() const {
  entry.validate();
  require(input_size > 0 && input_size % (1 << entry.num_scales()) == 0,
          "model: input_size " + std::to_string(input_size) + " must be divisible by 2^" +
              std::to_string(entry.num_scales()));
  require(middle_blocks >= 0, "model: middle_blocks must be >= 0");
  for (int p : dcma_placements)
    require(p >= 0 && p <= middle_blocks, "model: dcma placement " + std::to_string(p) + " out of range");
  require(std::set<int>(dcma_placements.begin(), dcma_placements.end()).size() == dcma_placements.size(),
          "model: duplicate dcma placement");
  require(dcma_reduction > 0 && final_width() % dcma_reduction == 0,
          "model: dcma_reduction must divide the final entry width");
  require(exit_width > 0, "model: exit_width must be positive");
  const int fused = two_stream() ? 2 * exit_width : exit_width;
  require(fusion_reduction > 0 && fused % fusion_reduction == 0, "model: fusion_reduction must divide the fused width");
  require(loss_s > 0, "model: loss scale s must be positive");
  require(loss_m >= 0 && loss_m < 1, "model: margin m must lie in [0, 1)");
  require(srm_clip >= 0, "model: srm_clip must be >= 0");
}

void TrainConfig::validate() const {
  require(lr > 0, "train: lr must be positive");
  require(batch_size > 0, "train: batch_size must be positive");
  require(epochs > 0, "train: epochs must be positive");
  require(loader_threads > 0, "train: loader_threads must be positive");
  model.validate();
}

json to_json(const ModelConfig& c) {
  return json{{"input_size", c.input_size},
              {"widths", c.entry.widths},
              {"rsa_scales", c.entry.rsa_scales},
              {"rsa_kernel", c.entry.rsa_kernel},
              {"multiscale", c.entry.multiscale},
              {"streams", to_string(c.entry.streams)},
              {"middle_blocks", c.middle_blocks},
              {"dcma_placements", c.dcma_placements},
              {"dcma_reduction", c.dcma_reduction},
              {"exit_width", c.exit_width},
              {"fusion_reduction", c.fusion_reduction},
              {"loss_s", c.loss_s},
              {"loss_m", c.loss_m},
              {"srm_clip", c.srm_clip}};
}

namespace {

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ContractError(std::string("config key '") + key + "': " + e.what());
  }
}

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  require(j.is_object(), where + " must be a JSON object");
  for (const auto& item : j.items())
    require(known.contains(item.key()), "unknown " + where + " key '" + item.key() + "'");
}

}  // namespace

ModelConfig model_config_from_json(const json& j) {
  reject_unknown(j,
                 {"input_size", "widths", "rsa_scales", "rsa_kernel", "multiscale", "streams", "middle_blocks",
                  "dcma_placements", "dcma_reduction", "exit_width", "fusion_reduction", "loss_s", "loss_m",
                  "srm_clip"},
                 "model config");
  ModelConfig c;
  read(j, "input_size", c.input_size);
  read(j, "widths", c.entry.widths);
  read(j, "rsa_scales", c.entry.rsa_scales);
  read(j, "rsa_kernel", c.entry.rsa_kernel);
  read(j, "multiscale", c.entry.multiscale);
  std::string streams = to_string(c.entry.streams);
  read(j, "streams", streams);
  c.entry.streams = parse_stream_mode(streams);
  read(j, "middle_blocks", c.middle_blocks);
  read(j, "dcma_placements", c.dcma_placements);
  read(j, "dcma_reduction", c.dcma_reduction);
  read(j, "exit_width", c.exit_width);
  read(j, "fusion_reduction", c.fusion_reduction);
  read(j, "loss_s", c.loss_s);
  read(j, "loss_m", c.loss_m);
  read(j, "srm_clip", c.srm_clip);
  c.validate();
  return c;
}

json to_json(const TrainConfig& c) {
  json model = to_json(c.model);
  for (const char* key : {"input_size", "rsa_scales", "dcma_placements", "loss_s", "loss_m"}) model.erase(key);
  return json{{"lr", c.lr},
              {"batch_size", c.batch_size},
              {"epochs", c.epochs},
              {"seed", c.seed},
              {"input_size", c.model.input_size},
              {"loss_s", c.model.loss_s},
              {"loss_m", c.model.loss_m},
              {"dcma_placements", c.model.dcma_placements},
              {"rsa_scales", c.model.entry.rsa_scales},
              {"loader_threads", c.loader_threads},
              {"model", model}};
}

TrainConfig train_config_from_json(const json& j) {
  reject_unknown(j,
                 {"lr", "batch_size", "epochs", "seed", "input_size", "loss_s", "loss_m", "dcma_placements",
                  "rsa_scales", "loader_threads", "model"},
                 "train config");
  TrainConfig c;
  json model = j.contains("model") ? j.at("model") : json::object();
  require(model.is_object(), "train config key 'model' must be an object");
  for (const char* key : {"input_size", "rsa_scales", "dcma_placements", "loss_s", "loss_m"}) {
    require(!model.contains(key), std::string("'") + key + "' belongs at the top level of the train config");
    if (j.contains(key)) model[key] = j.at(key);
  }
  c.model = model_config_from_json(model);
  read(j, "lr", c.lr);
  read(j, "batch_size", c.batch_size);
  read(j, "epochs", c.epochs);
  read(j, "seed", c.seed);
  read(j, "loader_threads", c.loader_threads);
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ContractError("config file " + path + " is not valid JSON: " + e.what());
  }
  return train_config_from_json(j);
}

}  // namespace hff
