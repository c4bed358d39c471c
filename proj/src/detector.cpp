#include "tp/detector.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <limits>
#include <numeric>

#include "tp/binary_io.hpp"
#include "tp/error.hpp"
#include "tp/rng.hpp"

namespace tp {

namespace {

constexpr std::size_t H1 = DetectorModel::kHidden1;
constexpr std::size_t H2 = DetectorModel::kHidden2;

double sigmoid_clamped(double z) {
  const double s = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  return std::clamp(s, std::nextafter(0.0, 1.0), std::nextafter(1.0, 0.0));
}

// log(1 + e^z) - y·z, stable for large |z|.
double bce_with_logit(double z, int y) {
  return std::max(z, 0.0) - (y ? z : 0.0) + std::log1p(std::exp(-std::abs(z)));
}

struct Activations {
  std::vector<double> z1, a1, z2, a2;
  double z3 = 0.0;
};

void forward_into(const DetectorModel& m, std::span<const double> h, Activations& act) {
  const auto p = m.params();
  const std::size_t d = m.d_in();
  act.z1.resize(H1);
  act.a1.resize(H1);
  act.z2.resize(H2);
  act.a2.resize(H2);
  for (std::size_t j = 0; j < H1; ++j) {
    const double* w = p.data() + j * d;
    double s = p[m.off_b1() + j];
    for (std::size_t i = 0; i < d; ++i) s += w[i] * h[i];
    act.z1[j] = s;
    act.a1[j] = s > 0 ? s : 0.0;
  }
  for (std::size_t k = 0; k < H2; ++k) {
    const double* w = p.data() + m.off_w2() + k * H1;
    double s = p[m.off_b2() + k];
    for (std::size_t j = 0; j < H1; ++j) s += w[j] * act.a1[j];
    act.z2[k] = s;
    act.a2[k] = s > 0 ? s : 0.0;
  }
  double s = p[m.off_b3()];
  for (std::size_t k = 0; k < H2; ++k) s += p[m.off_w3() + k] * act.a2[k];
  act.z3 = s;
}

void check_dim(const DetectorModel& m, std::size_t n) {
  if (n != m.d_in()) {
    throw ContractViolation("detector: input has dimension " + std::to_string(n) + ", model expects " +
                            std::to_string(m.d_in()));
  }
}

void check_trainable(const std::vector<LabeledState>& s, const char* what) {
  std::size_t pos = 0;
  for (const auto& x : s) pos += x.label != 0;
  if (s.empty() || pos == 0 || pos == s.size()) {
    throw TrainingError(std::string("train_detector: ") + what + " set must contain both classes");
  }
}

std::vector<int> labels_of(const std::vector<LabeledState>& states) {
  std::vector<int> y;
  y.reserve(states.size());
  for (const auto& s : states) y.push_back(s.label);
  return y;
}

double mean_loss(const DetectorModel& m, const std::vector<LabeledState>& s) {
  return bce_loss_and_gradient(m, s, nullptr) / static_cast<double>(s.size());
}

}  // namespace

DetectorModel::DetectorModel(std::size_t d_in) : d_in_(d_in), params_(parameter_count(d_in), 0.0) {
  if (d_in == 0) throw ContractViolation("DetectorModel: d_in must be positive");
}

std::size_t DetectorModel::parameter_count(std::size_t d_in) { return H1 * d_in + H1 + H2 * H1 + H2 + H2 + 1; }

DetectorModel DetectorModel::random(std::size_t d_in, std::uint64_t seed) {
  DetectorModel m(d_in);
  rng::Engine eng(seed);
  auto fill = [&](std::size_t from, std::size_t to, std::size_t fan_in) {
    const double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t i = from; i < to; ++i) m.params_[i] = eng.uniform(-a, a);
  };
  fill(0, m.off_w2(), d_in);
  fill(m.off_w2(), m.off_w3(), H1);
  fill(m.off_w3(), m.params_.size(), H2);
  return m;
}

double detector_logit(const DetectorModel& model, std::span<const double> h) {
  check_dim(model, h.size());
  Activations act;
  forward_into(model, h, act);
  return act.z3;
}

double detector_forward(const DetectorModel& model, std::span<const double> h) {
  return sigmoid_clamped(detector_logit(model, h));
}

std::vector<double> detector_scores(const DetectorModel& model, const std::vector<LabeledState>& states) {
  std::vector<double> out;
  out.reserve(states.size());
  Activations act;
  for (const auto& s : states) {
    check_dim(model, s.vector.size());
    forward_into(model, s.vector, act);
    out.push_back(sigmoid_clamped(act.z3));
  }
  return out;
}

double bce_loss_and_gradient(const DetectorModel& model, std::span<const LabeledState> batch,
                             std::vector<double>* grad) {
  const auto p = model.params();
  const std::size_t d = model.d_in();
  if (grad) grad->assign(p.size(), 0.0);
  Activations act;
  std::vector<double> d2(H2), d1(H1);
  double loss = 0.0;
  for (const auto& s : batch) {
    check_dim(model, s.vector.size());
    forward_into(model, s.vector, act);
    loss += bce_with_logit(act.z3, s.label);
    if (!grad) continue;
    auto& g = *grad;
    const double dz = sigmoid_clamped(act.z3) - (s.label ? 1.0 : 0.0);
    g[model.off_b3()] += dz;
    for (std::size_t k = 0; k < H2; ++k) {
      g[model.off_w3() + k] += dz * act.a2[k];
      d2[k] = act.z2[k] > 0 ? dz * p[model.off_w3() + k] : 0.0;
    }
    std::fill(d1.begin(), d1.end(), 0.0);
    for (std::size_t k = 0; k < H2; ++k) {
      if (d2[k] == 0.0) continue;
      g[model.off_b2() + k] += d2[k];
      double* gw = g.data() + model.off_w2() + k * H1;
      const double* w = p.data() + model.off_w2() + k * H1;
      for (std::size_t j = 0; j < H1; ++j) {
        gw[j] += d2[k] * act.a1[j];
        d1[j] += d2[k] * w[j];
      }
    }
    for (std::size_t j = 0; j < H1; ++j) {
      if (act.z1[j] <= 0 || d1[j] == 0.0) continue;
      g[model.off_b1() + j] += d1[j];
      double* gw = g.data() + j * d;
      for (std::size_t i = 0; i < d; ++i) gw[i] += d1[j] * s.vector[i];
    }
  }
  return loss;
}

TrainResult train_detector(const std::vector<LabeledState>& train, const std::vector<LabeledState>& val,
                           const TrainConfig& cfg) {
  if (cfg.epochs < 1 || cfg.batch_size < 1 || !(cfg.learning_rate > 0)) {
    throw ConfigError("train_detector: epochs, batch_size and learning_rate must be positive");
  }
  check_trainable(train, "training");
  if (val.empty()) throw TrainingError("train_detector: validation set is empty");
  const std::size_t d = train.front().vector.size();

  TrainResult result;
  DetectorModel model = DetectorModel::random(d, rng::mix(cfg.seed, 1));
  const std::size_t n_params = model.params().size();
  std::vector<double> m(n_params, 0.0), v(n_params, 0.0), grad;
  std::vector<std::size_t> order(train.size());
  std::vector<LabeledState> batch;
  const auto val_labels = labels_of(val);
  long step = 0;

  double best_auc = -1.0, best_loss = 0.0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng::Engine shuffler(rng::mix(cfg.seed, 1000 + static_cast<std::uint64_t>(epoch)));
    shuffler.shuffle(order);

    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      batch.clear();
      for (std::size_t i = start; i < end; ++i) batch.push_back(train[order[i]]);
      bce_loss_and_gradient(model, batch, &grad);
      ++step;
      const double scale = 1.0 / static_cast<double>(batch.size());
      const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
      auto params = model.params();
      for (std::size_t i = 0; i < n_params; ++i) {
        const double g = grad[i] * scale;
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        params[i] -= cfg.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.epsilon);
      }
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = mean_loss(model, train);
    if (!std::isfinite(rec.train_loss)) throw DivergenceError("train_detector: non-finite loss at epoch " + std::to_string(epoch), static_cast<std::size_t>(epoch));
    rec.val_loss = mean_loss(model, val);
    rec.val_auc = roc_auc(detector_scores(model, val), val_labels);
    result.history.push_back(rec);

    const double auc = std::isnan(rec.val_auc) ? -1.0 : rec.val_auc;
    if (epoch == 0 || auc > best_auc || (auc == best_auc && rec.val_loss < best_loss)) {
      best_auc = auc;
      best_loss = rec.val_loss;
      result.best_epoch = epoch;
      result.model = model;
    }
  }
  return result;
}

double gradient_check(const DetectorModel& model, std::span<const LabeledState> batch, std::uint64_t seed,
                      std::size_t n_params, double step, double floor) {
  if (batch.empty()) throw ContractViolation("gradient_check: empty batch");
  std::vector<double> grad;
  bce_loss_and_gradient(model, batch, &grad);
  DetectorModel probe = model;
  rng::Engine eng(seed);
  double worst = 0.0;
  for (std::size_t n = 0; n < n_params; ++n) {
    const auto i = static_cast<std::size_t>(eng.below(grad.size()));
    const double orig = probe.params()[i];
    probe.params()[i] = orig + step;
    const double up = bce_loss_and_gradient(probe, batch, nullptr);
    probe.params()[i] = orig - step;
    const double down = bce_loss_and_gradient(probe, batch, nullptr);
    probe.params()[i] = orig;
    const double numeric = (up - down) / (2.0 * step);
    const double denom = std::max({std::abs(grad[i]), std::abs(numeric), floor});
    worst = std::max(worst, std::abs(grad[i] - numeric) / denom);
  }
  return worst;
}

double CalibrationTable::threshold(double alpha) const {
  for (const auto& [a, t] : entries)
    if (a == alpha) return t;
  throw CalibrationError("no calibrated threshold for alpha " + std::to_string(alpha));
}

CalibrationTable calibrate_scores(std::span<const double> scores, std::span<const int> labels,
                                  std::span<const double> alphas) {
  if (scores.size() != labels.size()) throw ContractViolation("calibrate: scores and labels differ in length");
  std::vector<double> neg, cand(scores.begin(), scores.end());
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (!labels[i]) neg.push_back(scores[i]);
  if (neg.empty()) throw CalibrationError("calibrate: validation set has no negatives");
  std::sort(neg.begin(), neg.end());
  cand.push_back(std::nextafter(neg.back(), std::numeric_limits<double>::infinity()));
  std::sort(cand.begin(), cand.end());
  cand.erase(std::unique(cand.begin(), cand.end()), cand.end());

  // FPR(t) is non-increasing in t, so scan candidates upward.
  auto fpr = [&](double t) {
    const auto above = neg.end() - std::lower_bound(neg.begin(), neg.end(), t);
    return static_cast<double>(above) / static_cast<double>(neg.size());
  };
  CalibrationTable table;
  for (double alpha : alphas) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ContractViolation("calibrate: alpha must lie in [0, 1]");
    auto it = std::partition_point(cand.begin(), cand.end(), [&](double t) { return fpr(t) > alpha; });
    table.entries.emplace_back(alpha, *it);
  }
  return table;
}

CalibrationTable calibrate_thresholds(const DetectorModel& model, const std::vector<LabeledState>& val,
                                      std::span<const double> alphas) {
  const auto scores = detector_scores(model, val);
  const auto labels = labels_of(val);
  return calibrate_scores(scores, labels, alphas);
}

DetectorMetrics evaluate_scores(std::span<const double> scores, std::span<const int> labels, double tau) {
  if (scores.size() != labels.size()) throw ContractViolation("evaluate: scores and labels differ in length");
  std::size_t pos = 0, neg = 0, tp = 0, fp = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool fire = scores[i] >= tau;
    if (labels[i]) {
      ++pos;
      tp += fire;
    } else {
      ++neg;
      fp += fire;
    }
  }
  if (pos == 0 || neg == 0) throw EvaluationError("evaluate: both classes are required");
  DetectorMetrics out;
  out.tpr = static_cast<double>(tp) / static_cast<double>(pos);
  out.fpr = static_cast<double>(fp) / static_cast<double>(neg);
  if (out.fpr > 0) {
    out.lr_plus = out.tpr / out.fpr;
  } else {
    out.lr_plus = out.tpr > 0 ? std::numeric_limits<double>::infinity() : std::numeric_limits<double>::quiet_NaN();
  }

  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  const std::size_t top = scores.size() / 2;
  std::size_t correct = 0;
  for (std::size_t r = 0; r < idx.size(); ++r) correct += (r < top) == (labels[idx[r]] != 0);
  out.acc_top50 = static_cast<double>(correct) / static_cast<double>(scores.size());
  return out;
}

DetectorMetrics evaluate_detector(const DetectorModel& model, const std::vector<LabeledState>& states, double tau) {
  return evaluate_scores(detector_scores(model, states), labels_of(states), tau);
}

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + j + 1);
    for (std::size_t r = i; r < j; ++r)
      if (labels[idx[r]]) {
        rank_sum += avg_rank;
        ++pos;
      }
    i = j;
  }
  const std::size_t neg = scores.size() - pos;
  if (pos == 0 || neg == 0) return std::numeric_limits<double>::quiet_NaN();
  const double p = static_cast<double>(pos);
  return (rank_sum - p * (p + 1) / 2) / (p * static_cast<double>(neg));
}

void save_detector(const std::filesystem::path& path, const DetectorCheckpoint& ck) {
  nlohmann::ordered_json head;
  head["format"] = "tpdet";
  head["version"] = 1;
  head["d_in"] = ck.model.d_in();
  head["n_calibration"] = ck.calibration.entries.size();
  head["config_hash"] = ck.config_hash;
  std::string out = head.dump() + "\n";
  for (double x : ck.model.params()) io::append_le(out, x);
  for (const auto& [a, t] : ck.calibration.entries) {
    io::append_le(out, a);
    io::append_le(out, t);
  }
  io::write_file(path, out);
}

DetectorCheckpoint load_detector(const std::filesystem::path& path) {
  using Kind = ParseError::Kind;
  if (!std::filesystem::exists(path)) throw IoError("missing detector checkpoint " + path.string());
  const std::string raw = io::read_file(path);
  const auto nl = raw.find('\n');
  if (nl == std::string::npos) throw ParseError(Kind::kHeader, 0, "detector checkpoint has no header");
  DetectorCheckpoint ck;
  std::size_t d_in = 0, n_cal = 0;
  try {
    auto head = nlohmann::json::parse(raw.substr(0, nl));
    if (head.value("format", "") != "tpdet") throw ParseError(Kind::kHeader, 0, "not a tpdet file");
    if (head.at("version").get<int>() != 1) throw ParseError(Kind::kVersion, 0, "unsupported tpdet version");
    d_in = head.at("d_in").get<std::size_t>();
    n_cal = head.value("n_calibration", std::size_t{0});
    ck.config_hash = head.value("config_hash", "");
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(Kind::kHeader, 0, e.what());
  }
  if (d_in == 0) throw ParseError(Kind::kDimension, 0, "d_in must be positive");
  const std::size_t n_params = DetectorModel::parameter_count(d_in);
  const std::string_view body(raw.data() + nl + 1, raw.size() - nl - 1);
  if (body.size() != (n_params + 2 * n_cal) * 8) {
    throw ParseError(Kind::kTruncated, 0, "detector checkpoint body has " + std::to_string(body.size()) + " bytes");
  }
  ck.model = DetectorModel(d_in);
  auto p = ck.model.params();
  for (std::size_t i = 0; i < n_params; ++i) p[i] = io::read_le<double>(body, i * 8);
  for (std::size_t c = 0; c < n_cal; ++c) {
    const std::size_t at = (n_params + 2 * c) * 8;
    ck.calibration.entries.emplace_back(io::read_le<double>(body, at), io::read_le<double>(body, at + 8));
  }
  return ck;
}

}  // namespace tp
