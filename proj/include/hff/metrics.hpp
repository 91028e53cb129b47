#pragma once

#include <span>
#include <string>
#include <vector>

namespace hff {

/// Mann-Whitney ROC-AUC: (#(pos > neg) + 0.5 #(pos = neg)) / (#pos #neg).
/// Throws ContractError unless both classes are present.
double auc(std::span<const double> scores, std::span<const int> labels);

/// Fraction of samples whose thresholded score (score >= threshold means
/// fake) matches the label.
double accuracy(std::span<const double> scores, std::span<const int> labels, double threshold = 0.5);

struct VideoScores {
  std::vector<std::string> ids;
  std::vector<double> scores;
  std::vector<int> labels;
};

/// Averages frame scores per video id (first-seen order). Every frame of a
/// video must carry the same label.
VideoScores group_by_video(std::span<const std::string> video_ids, std::span<const double> scores,
                           std::span<const int> labels);

}  // namespace hff
