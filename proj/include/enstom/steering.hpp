#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "enstom/model.hpp"

namespace enstom {

// One (q^p, q^n) multiple-choice prompt pair: a shared prompt followed by
// either the desired or the undesired completion letter.
struct ContrastPair {
  std::string pair_id;
  TokenSequence common_prompt;
  int positive_completion = 0;  // c_p, single token
  int negative_completion = 0;  // c_n, single token
};

struct RawPairVector {
  std::string pair_id;
  int layer = 0;
  std::vector<float> vec;
  double norm = 0.0;  // Euclidean norm of vec
};

struct SteeringVector {
  int layer = 0;
  std::vector<float> vec;
  int pair_count = 0;
  double mean_norm = 0.0;  // average pre-normalization norm over pairs
  std::string source_digest;
};

// Two forward passes (common prompt + c_p / + c_n); the hidden state is read
// at the completion-letter position itself, i.e. the final token.
RawPairVector extract_pair_vector(const Backend& model, const ContrastPair& pair,
                                  int layer);

// Rescales every raw to the mean norm, then averages componentwise. Sums in
// sorted pair_id order in double precision. Zero-norm raws are dropped (they
// carry no direction) and excluded from the mean norm as well.
SteeringVector aggregate_steering_vector(std::vector<RawPairVector> raws);

// h + C * v componentwise.
std::vector<float> apply_steering(std::span<const float> hidden, double coefficient,
                                  const SteeringVector& v);

// The steered pass: one additive write of C*v at the designated layer.
HookWrite steering_write(const SteeringVector& v, double coefficient, int steer_layer,
                         PositionSelector where = PositionSelector::kAll,
                         int index = 0);

struct LayerVariance {
  int layer = 0;
  double var = 0.0;    // mean over components of per-component population variance
  double l2 = 0.0;     // mean Euclidean norm
  double ratio = 0.0;  // sqrt(var) / l2
};

std::vector<LayerVariance> vector_statistics(
    const std::map<int, std::vector<RawPairVector>>& raws_by_layer);

void write_variance_csv(const std::filesystem::path& path,
                        const std::vector<LayerVariance>& rows);

// enstom-sv/1 JSON envelope with base64 little-endian float32 payload.
void save_steering_vector(const std::filesystem::path& path, const SteeringVector& v);
SteeringVector load_steering_vector(const std::filesystem::path& path);

}  // namespace enstom
