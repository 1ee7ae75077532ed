#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "enstom/corpus.hpp"
#include "enstom/entroscale.hpp"
#include "enstom/model.hpp"
#include "enstom/steering.hpp"
#include "enstom/tokenizer.hpp"

namespace enstom {

enum class SteerMode { kPromptOnly, kVanilla, kEnstom };

std::string to_string(SteerMode mode);
SteerMode steer_mode_from_string(const std::string& s);

enum class SteerPositions {
  kAllPositions,   // prompt and generated positions
  kGeneratedOnly,  // positions at or past the original prompt length
};

struct PipelineConfig {
  SteeringVector steering_vector;
  int steer_layer = -1;  // "Steer @"
  EntropyProbeConfig probe;
  ScalingConfig scaling;
  int entropy_layer = -1;  // L, must be in probe.probe_layers
  int max_new_tokens = 8;
  SteerMode mode = SteerMode::kEnstom;
  SteerPositions positions = SteerPositions::kAllPositions;

  void validate(const ModelSpec& spec) const;
};

struct GenerationTrace {
  std::string input_id;
  std::string label;  // carried from the dialogue sample when present
  SteerMode mode = SteerMode::kPromptOnly;
  std::map<int, EntropyReading> entropy_readings;
  double coefficient = 0.0;
  TokenSequence generated_tokens;
  std::vector<bool> per_step_steered;
  std::string response_text;
  std::string error;  // set when a batch item failed
};

// The steered pass in isolation: greedy decoding with C*v added at the steer
// layer every step. Vanilla mode is exactly this with C = c_max.
TokenSequence steered_generate(const Backend& model, const TokenSequence& prompt,
                               const SteeringVector& v, double coefficient,
                               int steer_layer, SteerPositions positions,
                               int max_new_tokens);

// Full pass: probe entropy on the prompt (enstom mode), derive C once, then
// regenerate from the original prompt with steering active. Probe tokens are
// never part of the output.
GenerationTrace generate(const Backend& model, const TokenSequence& prompt,
                         const PipelineConfig& cfg,
                         const std::string& input_id = "");

// Maps generate over the samples; output order matches input order. Items
// that fail carry their error in the trace instead of aborting the batch.
// jobs = 0 keeps the OpenMP default.
std::vector<GenerationTrace> run_batch(const Backend& model,
                                       const std::vector<DialogueSample>& samples,
                                       const PipelineConfig& cfg,
                                       const Tokenizer& tokenizer, int jobs = 0);

void write_traces_jsonl(const std::filesystem::path& path,
                        const std::vector<GenerationTrace>& traces);
std::vector<GenerationTrace> read_traces_jsonl(const std::filesystem::path& path);

}  // namespace enstom
