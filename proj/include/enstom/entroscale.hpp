#pragma once

#include <map>
#include <span>
#include <vector>

#include "enstom/model.hpp"

namespace enstom {

struct EntropyProbeConfig {
  std::vector<int> probe_layers;
  double epsilon = 1e-12;
  int token_count = 2;  // k

  void validate(const ModelSpec& spec) const;
};

struct ScalingConfig {
  double c_max = 1.5;
  double alpha = 5.0;
  double threshold = 7.5;  // t
  int delta = -1;          // -1 or +1

  void validate() const;
};

struct EntropyReading {
  int layer = 0;
  std::vector<double> per_token;  // nats, one per generated token
  double mean = 0.0;              // H^(L)
};

// H = -sum p_i ln(p_i + eps) with p = softmax(logits); natural log,
// double-precision accumulation, stable against large logits.
double distribution_entropy(std::span<const float> logits, double epsilon);

// Greedily generates k tokens without steering; at every step each probe
// layer's last-position hidden state goes through the logit lens and its
// entropy is recorded. The probe never mutates the model or the prompt.
std::map<int, EntropyReading> probe_entropy(const Backend& model,
                                            const TokenSequence& input,
                                            const EntropyProbeConfig& cfg);

// C = c_max / (1 + exp(-alpha * delta * (H - t))), exponent clamped to +-60.
double scaled_coefficient(double entropy, const ScalingConfig& cfg);

// -1 when distractors average lower entropy than on-topic inputs, +1 when
// higher. An exact tie is a calibration error; pick a different layer.
int calibrate_delta(std::span<const double> distractor_entropies,
                    std::span<const double> ontopic_entropies);

struct ThresholdSuggestion {
  double threshold = 0.0;   // midpoint of the class means
  double separation = 0.0;  // |mean difference| / pooled standard deviation
};

ThresholdSuggestion suggest_threshold(std::span<const double> distractor_entropies,
                                      std::span<const double> ontopic_entropies);

}  // namespace enstom
