#pragma once

// Per-token hallucination detector: d_in -> 128 -> 64 -> 1 MLP with ReLU
// hidden layers and a sigmoid output. Trained with BCE and Adam.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tp/states.hpp"

namespace tp {

class DetectorModel {
 public:
  static constexpr std::size_t kHidden1 = 128;
  static constexpr std::size_t kHidden2 = 64;

  DetectorModel() = default;
  /// All-zero parameters.
  explicit DetectorModel(std::size_t d_in);

  /// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) per layer.
  static DetectorModel random(std::size_t d_in, std::uint64_t seed);

  static std::size_t parameter_count(std::size_t d_in);

  std::size_t d_in() const { return d_in_; }

  // Flat layout: w1 (128×d_in, row-major), b1, w2 (64×128), b2, w3 (64), b3.
  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }

  std::span<const double> w1() const { return {params_.data(), kHidden1 * d_in_}; }
  std::span<const double> b1() const { return {params_.data() + off_b1(), kHidden1}; }
  std::span<const double> w2() const { return {params_.data() + off_w2(), kHidden2 * kHidden1}; }
  std::span<const double> b2() const { return {params_.data() + off_b2(), kHidden2}; }
  std::span<const double> w3() const { return {params_.data() + off_w3(), kHidden2}; }
  double b3() const { return params_.back(); }

  std::size_t off_b1() const { return kHidden1 * d_in_; }
  std::size_t off_w2() const { return off_b1() + kHidden1; }
  std::size_t off_b2() const { return off_w2() + kHidden2 * kHidden1; }
  std::size_t off_w3() const { return off_b2() + kHidden2; }
  std::size_t off_b3() const { return off_w3() + kHidden2; }

  bool operator==(const DetectorModel&) const = default;

 private:
  std::size_t d_in_ = 0;
  std::vector<double> params_;
};

/// Pre-sigmoid output.
double detector_logit(const DetectorModel& model, std::span<const double> h);
/// Score in (0, 1); throws ContractViolation on dimension mismatch.
double detector_forward(const DetectorModel& model, std::span<const double> h);
std::vector<double> detector_scores(const DetectorModel& model, const std::vector<LabeledState>& states);

/// Summed BCE over the batch; when `grad` is non-null it receives the
/// gradient of the summed loss (resized to the parameter count).
double bce_loss_and_gradient(const DetectorModel& model, std::span<const LabeledState> batch,
                             std::vector<double>* grad);

struct TrainConfig {
  int epochs = 30;
  std::size_t batch_size = 512;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 0;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;  // mean BCE over the full training set after the epoch
  double val_auc = 0.0;
  double val_loss = 0.0;
};

struct TrainResult {
  DetectorModel model;  // best checkpoint
  std::vector<EpochRecord> history;
  int best_epoch = 0;
};

TrainResult train_detector(const std::vector<LabeledState>& train, const std::vector<LabeledState>& val,
                           const TrainConfig& cfg);

/// Max relative error |a − n| / max(|a|, |n|, floor) between analytic and
/// central-difference gradients of the summed loss over `n_params` randomly
/// chosen parameters.
double gradient_check(const DetectorModel& model, std::span<const LabeledState> batch, std::uint64_t seed,
                      std::size_t n_params = 128, double step = 1e-5, double floor = 1e-4);

struct CalibrationTable {
  std::vector<std::pair<double, double>> entries;  // (alpha, threshold)

  /// Threshold for an exact alpha in the table; CalibrationError otherwise.
  double threshold(double alpha) const;
  bool operator==(const CalibrationTable&) const = default;
};

/// Smallest candidate threshold t with FPR(t) <= alpha, candidates being every
/// observed score plus the value just above the largest negative score.
CalibrationTable calibrate_scores(std::span<const double> scores, std::span<const int> labels,
                                  std::span<const double> alphas);
CalibrationTable calibrate_thresholds(const DetectorModel& model, const std::vector<LabeledState>& val,
                                      std::span<const double> alphas);

struct DetectorMetrics {
  double tpr = 0.0;
  double fpr = 0.0;
  double lr_plus = 0.0;  // +inf when FPR = 0 < TPR; NaN when both are 0
  double acc_top50 = 0.0;
};

DetectorMetrics evaluate_scores(std::span<const double> scores, std::span<const int> labels, double tau);
DetectorMetrics evaluate_detector(const DetectorModel& model, const std::vector<LabeledState>& states, double tau);

/// Area under the ROC curve, ties counted half.
double roc_auc(std::span<const double> scores, std::span<const int> labels);

struct DetectorCheckpoint {
  DetectorModel model;
  CalibrationTable calibration;
  std::string config_hash;
};

void save_detector(const std::filesystem::path& path, const DetectorCheckpoint& checkpoint);
DetectorCheckpoint load_detector(const std::filesystem::path& path);

}  // namespace tp
