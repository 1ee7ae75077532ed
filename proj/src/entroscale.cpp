#include "enstom/entroscale.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace enstom {

void EntropyProbeConfig::validate(const ModelSpec& spec) const {
  if (epsilon <= 0.0) throw std::invalid_argument("epsilon must be positive");
  if (token_count < 1) throw std::invalid_argument("token_count must be >= 1");
  if (probe_layers.empty()) throw std::invalid_argument("no probe layers");
  for (int l : probe_layers)
    if (l < 0 || l >= spec.layer_count)
      throw std::invalid_argument("probe layer out of range");
}

void ScalingConfig::validate() const {
  if (c_max <= 0.0) throw std::invalid_argument("c_max must be positive");
  if (alpha <= 0.0) throw std::invalid_argument("alpha must be positive");
  if (delta != -1 && delta != 1) throw std::invalid_argument("delta must be -1 or +1");
}

double distribution_entropy(std::span<const float> logits, double epsilon) {
  if (logits.empty()) throw std::invalid_argument("empty logits");
  if (epsilon <= 0.0) throw std::invalid_argument("epsilon must be positive");
  double mx = -std::numeric_limits<double>::infinity();
  for (float z : logits) {
    if (!std::isfinite(z)) throw std::invalid_argument("non-finite logit");
    mx = std::max(mx, double(z));
  }
  double sum = 0.0;
  for (float z : logits) sum += std::exp(double(z) - mx);
  double h = 0.0;
  for (float z : logits) {
    const double p = std::exp(double(z) - mx) / sum;
    h -= p * std::log(p + epsilon);
  }
  return std::max(h, 0.0);
}

std::map<int, EntropyReading> probe_entropy(const Backend& model,
                                            const TokenSequence& input,
                                            const EntropyProbeConfig& cfg) {
  const auto& spec = model.spec();
  cfg.validate(spec);
  if (input.empty()) throw std::invalid_argument("empty probe input");
  if (int(input.size()) + cfg.token_count > spec.max_context)
    throw std::invalid_argument("probe exceeds context");

  HookPlan plan;
  for (int l : cfg.probe_layers) plan.reads.push_back({l, PositionSelector::kLast, 0});

  std::map<int, EntropyReading> readings;
  for (int l : cfg.probe_layers) readings[l] = EntropyReading{l, {}, 0.0};

  TokenSequence seq = input;
  for (int step = 0; step < cfg.token_count; ++step) {
    ForwardResult r = model.forward(seq, plan);
    for (const auto& snap : r.snapshots) {
      const auto z = model.logit_lens(snap.hidden);
      readings[snap.layer].per_token.push_back(distribution_entropy(z, cfg.epsilon));
    }
    seq.push_back(greedy_next(r.logits_at(r.positions - 1)));
  }

  for (auto& [l, reading] : readings) {
    double sum = 0.0;
    for (double h : reading.per_token) sum += h;
    reading.mean = sum / double(reading.per_token.size());
  }
  return readings;
}

double scaled_coefficient(double entropy, const ScalingConfig& cfg) {
  cfg.validate();
  if (!std::isfinite(entropy)) throw std::invalid_argument("non-finite entropy");
  double e = -cfg.alpha * double(cfg.delta) * (entropy - cfg.threshold);
  e = std::clamp(e, -60.0, 60.0);
  return cfg.c_max / (1.0 + std::exp(e));
}

namespace {

double mean_of(std::span<const double> xs) {
  if (xs.empty()) throw std::invalid_argument("empty entropy list");
  double s = 0.0;
  for (double x : xs) s += x;
  return s / double(xs.size());
}

}  // namespace

int calibrate_delta(std::span<const double> distractor_entropies,
                    std::span<const double> ontopic_entropies) {
  const double md = mean_of(distractor_entropies);
  const double mo = mean_of(ontopic_entropies);
  if (md == mo)
    throw DataError("entropy means tie exactly; pick a different layer");
  return md < mo ? -1 : 1;
}

ThresholdSuggestion suggest_threshold(std::span<const double> distractor_entropies,
                                      std::span<const double> ontopic_entropies) {
  const double md = mean_of(distractor_entropies);
  const double mo = mean_of(ontopic_entropies);
  if (md == mo) throw DataError("entropy means tie exactly; no separation");

  auto sq_dev_sum = [](std::span<const double> xs, double m) {
    double s = 0.0;
    for (double x : xs) {
      const double d = x - m;
      s += d * d;
    }
    return s;
  };
  const double n = double(distractor_entropies.size() + ontopic_entropies.size());
  const double pooled_var =
      (sq_dev_sum(distractor_entropies, md) + sq_dev_sum(ontopic_entropies, mo)) / n;
  const double pooled_sd = std::sqrt(pooled_var);

  ThresholdSuggestion s;
  s.threshold = 0.5 * (md + mo);
  s.separation = pooled_sd > 0.0 ? std::abs(md - mo) / pooled_sd
                                 : std::numeric_limits<double>::infinity();
  return s;
}

}  // namespace enstom
