#include "hff/metrics.hpp"

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <unordered_map>

#include "hff/errors.hpp"
#include "hff/model.hpp"

namespace hff {

double auc(std::span<const double> scores, std::span<const int> labels) {
  require(scores.size() == labels.size(), "auc: scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::uint64_t pos = 0, neg = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] == 0 || labels[i] == 1, "auc: labels must be 0 or 1");
    (labels[i] == 1 ? pos : neg) += 1;
  }
  require(pos > 0 && neg > 0, "auc: need at least one positive and one negative sample");
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Twice the Mann-Whitney numerator: 2 #(pos > neg) + #(pos = neg), in integers.
  std::uint64_t twice = 0, neg_below = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::uint64_t tie_pos = 0, tie_neg = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] == 1 ? tie_pos : tie_neg) += 1;
      ++j;
    }
    twice += tie_pos * (2 * neg_below + tie_neg);
    neg_below += tie_neg;
    i = j;
  }
  return (static_cast<double>(twice) / 2.0) / static_cast<double>(pos * neg);
}

double accuracy(std::span<const double> scores, std::span<const int> labels, double threshold) {
  require(scores.size() == labels.size(), "accuracy: scores and labels differ in length");
  require(!scores.empty(), "accuracy: no samples");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) correct += (scores[i] >= threshold ? 1 : 0) == labels[i];
  return static_cast<double>(correct) / static_cast<double>(scores.size());
}

VideoScores group_by_video(std::span<const std::string> video_ids, std::span<const double> scores,
                           std::span<const int> labels) {
  require(video_ids.size() == scores.size() && scores.size() == labels.size(),
          "group_by_video: inputs differ in length");
  VideoScores out;
  std::unordered_map<std::string, std::size_t> slot;
  std::vector<std::vector<double>> frames;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    auto [it, inserted] = slot.emplace(video_ids[i], out.ids.size());
    if (inserted) {
      out.ids.push_back(video_ids[i]);
      out.labels.push_back(labels[i]);
      frames.emplace_back();
    }
    require(out.labels[it->second] == labels[i], "group_by_video: mixed labels in video " + video_ids[i]);
    frames[it->second].push_back(scores[i]);
  }
  for (const auto& f : frames) out.scores.push_back(video_level_predict(f));
  return out;
}

}  // namespace hff
