#include "enstom/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace enstom {

namespace {
using nlohmann::json;
}

std::string to_string(SteerMode mode) {
  switch (mode) {
    case SteerMode::kPromptOnly: return "prompt_only";
    case SteerMode::kVanilla: return "vanilla";
    case SteerMode::kEnstom: return "enstom";
  }
  return "prompt_only";
}

SteerMode steer_mode_from_string(const std::string& s) {
  if (s == "prompt_only") return SteerMode::kPromptOnly;
  if (s == "vanilla") return SteerMode::kVanilla;
  if (s == "enstom") return SteerMode::kEnstom;
  throw DataError("unknown mode: " + s);
}

void PipelineConfig::validate(const ModelSpec& spec) const {
  if (max_new_tokens < 1) throw std::invalid_argument("max_new_tokens must be >= 1");
  if (mode == SteerMode::kPromptOnly) return;
  if (steering_vector.vec.empty())
    throw std::invalid_argument("steering vector required in steering modes");
  if (int(steering_vector.vec.size()) != spec.hidden_dim)
    throw std::invalid_argument("steering vector dimension mismatch");
  if (steer_layer < 0 || steer_layer >= spec.layer_count)
    throw std::invalid_argument("steer_layer out of range");
  scaling.validate();
  if (mode == SteerMode::kEnstom) {
    probe.validate(spec);
    if (std::find(probe.probe_layers.begin(), probe.probe_layers.end(),
                  entropy_layer) == probe.probe_layers.end())
      throw std::invalid_argument("entropy_layer must be one of the probe layers");
  }
}

TokenSequence steered_generate(const Backend& model, const TokenSequence& prompt,
                               const SteeringVector& v, double coefficient,
                               int steer_layer, SteerPositions positions,
                               int max_new_tokens) {
  HookPlan plan;
  plan.writes.push_back(steering_write(
      v, coefficient, steer_layer,
      positions == SteerPositions::kAllPositions ? PositionSelector::kAll
                                                 : PositionSelector::kFrom,
      int(prompt.size())));
  return greedy_generate(model, prompt, max_new_tokens, plan);
}

GenerationTrace generate(const Backend& model, const TokenSequence& prompt,
                         const PipelineConfig& cfg, const std::string& input_id) {
  const auto& spec = model.spec();
  cfg.validate(spec);
  if (prompt.empty()) throw std::invalid_argument("empty prompt");
  if (int(prompt.size()) + cfg.max_new_tokens > spec.max_context)
    throw std::invalid_argument("prompt too long for max_new_tokens");

  GenerationTrace trace;
  trace.input_id = input_id;
  trace.mode = cfg.mode;

  TokenSequence full;
  switch (cfg.mode) {
    case SteerMode::kPromptOnly:
      trace.coefficient = 0.0;
      full = greedy_generate(model, prompt, cfg.max_new_tokens);
      break;
    case SteerMode::kVanilla:
      trace.coefficient = cfg.scaling.c_max;
      full = steered_generate(model, prompt, cfg.steering_vector, trace.coefficient,
                              cfg.steer_layer, cfg.positions, cfg.max_new_tokens);
      break;
    case SteerMode::kEnstom: {
      if (int(prompt.size()) + cfg.probe.token_count > spec.max_context)
        throw std::invalid_argument("prompt too long for entropy probe");
      trace.entropy_readings = probe_entropy(model, prompt, cfg.probe);
      trace.coefficient =
          scaled_coefficient(trace.entropy_readings.at(cfg.entropy_layer).mean,
                             cfg.scaling);
      full = steered_generate(model, prompt, cfg.steering_vector, trace.coefficient,
                              cfg.steer_layer, cfg.positions, cfg.max_new_tokens);
      break;
    }
  }

  trace.generated_tokens.assign(full.begin() + long(prompt.size()), full.end());
  const bool steered = cfg.mode != SteerMode::kPromptOnly && trace.coefficient != 0.0;
  trace.per_step_steered.assign(trace.generated_tokens.size(), steered);
  return trace;
}

std::vector<GenerationTrace> run_batch(const Backend& model,
                                       const std::vector<DialogueSample>& samples,
                                       const PipelineConfig& cfg,
                                       const Tokenizer& tokenizer, int jobs) {
  std::vector<GenerationTrace> traces(samples.size());
#ifdef _OPENMP
  const int threads = jobs > 0 ? jobs : omp_get_max_threads();
#pragma omp parallel for schedule(dynamic) num_threads(threads)
#endif
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    try {
      const TokenSequence prompt = render_dialogue_prompt(s, tokenizer);
      traces[i] = generate(model, prompt, cfg, s.sample_id);
      traces[i].label = s.label;
      traces[i].response_text = tokenizer.decode(traces[i].generated_tokens);
    } catch (const std::exception& e) {
      traces[i] = GenerationTrace{};
      traces[i].input_id = s.sample_id;
      traces[i].label = s.label;
      traces[i].mode = cfg.mode;
      traces[i].error = e.what();
    }
  }
  return traces;
}

void write_traces_jsonl(const std::filesystem::path& path,
                        const std::vector<GenerationTrace>& traces) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  for (const auto& t : traces) {
    json j;
    j["input_id"] = t.input_id;
    j["label"] = t.label;
    j["mode"] = to_string(t.mode);
    j["coefficient"] = t.coefficient;
    json entropy = json::object();
    for (const auto& [layer, r] : t.entropy_readings)
      entropy[std::to_string(layer)] = {{"per_token", r.per_token}, {"mean", r.mean}};
    j["entropy"] = entropy;
    j["tokens"] = t.generated_tokens;
    j["steered"] = t.per_step_steered;
    j["response"] = t.response_text;
    if (!t.error.empty()) j["error"] = t.error;
    os << j.dump() << "\n";
  }
}

std::vector<GenerationTrace> read_traces_jsonl(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open " + path.string());
  std::vector<GenerationTrace> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) +
                      ": invalid JSON: " + e.what());
    }
    GenerationTrace t;
    t.input_id = j.value("input_id", "");
    t.label = j.value("label", "");
    t.mode = steer_mode_from_string(j.value("mode", "prompt_only"));
    t.coefficient = j.value("coefficient", 0.0);
    const json entropy = j.value("entropy", json::object());
    for (const auto& [key, val] : entropy.items()) {
      EntropyReading r;
      r.layer = std::stoi(key);
      r.per_token = val.value("per_token", std::vector<double>{});
      r.mean = val.value("mean", 0.0);
      t.entropy_readings[r.layer] = std::move(r);
    }
    t.generated_tokens = j.value("tokens", TokenSequence{});
    t.per_step_steered = j.value("steered", std::vector<bool>{});
    t.response_text = j.value("response", "");
    t.error = j.value("error", "");
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace enstom
