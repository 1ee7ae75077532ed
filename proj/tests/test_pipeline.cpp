#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "enstom/corpus.hpp"
#include "enstom/entroscale.hpp"
#include "enstom/model.hpp"
#include "enstom/pipeline.hpp"
#include "enstom/steering.hpp"
#include "enstom/tokenizer.hpp"

using namespace enstom;
namespace fs = std::filesystem;

namespace {
const ModelSpec kSpec = default_fixture_spec();
const FixtureModel& fixture() {
  static FixtureModel model(kSpec);
  return model;
}
const Tokenizer& tok() {
  static Tokenizer t(kSpec.vocab_size);
  return t;
}

SteeringVector letter_vector(int layer) {
  ContrastPair p;
  p.pair_id = "p0";
  p.common_prompt = tok().encode("Question : w10 Choices : ( A ) w50 ( B ) w52 Answer : (");
  p.positive_completion = 1;
  p.negative_completion = 2;
  return aggregate_steering_vector({extract_pair_vector(fixture(), p, layer)});
}

PipelineConfig base_config(SteerMode mode) {
  PipelineConfig cfg;
  cfg.steering_vector = letter_vector(1);
  cfg.steer_layer = 1;
  cfg.entropy_layer = kSpec.layer_count - 1;
  cfg.probe.probe_layers = {cfg.entropy_layer};
  cfg.mode = mode;
  return cfg;
}
}  // namespace

TEST_CASE("steer mode names round-trip") {
  for (auto m : {SteerMode::kPromptOnly, SteerMode::kVanilla, SteerMode::kEnstom})
    CHECK(steer_mode_from_string(to_string(m)) == m);
  CHECK_THROWS(steer_mode_from_string("banana"));
}

TEST_CASE("config validation") {
  auto cfg = base_config(SteerMode::kEnstom);
  CHECK_NOTHROW(cfg.validate(kSpec));
  cfg.steer_layer = kSpec.layer_count;
  CHECK_THROWS(cfg.validate(kSpec));
  cfg = base_config(SteerMode::kEnstom);
  cfg.entropy_layer = 0;  // not in probe_layers
  CHECK_THROWS(cfg.validate(kSpec));
  cfg = base_config(SteerMode::kEnstom);
  cfg.max_new_tokens = 0;
  CHECK_THROWS(cfg.validate(kSpec));
}

TEST_CASE("prompt_only trace: C = 0, nothing steered") {
  const auto cfg = base_config(SteerMode::kPromptOnly);
  const auto t = generate(fixture(), tok().encode("w5 w6 w7"), cfg, "in0");
  CHECK(t.coefficient == 0.0);
  CHECK(t.input_id == "in0");
  for (bool s : t.per_step_steered) CHECK_FALSE(s);
  // greedy_generate returns prompt + continuation; the trace keeps only the
  // continuation
  const auto full = greedy_generate(fixture(), tok().encode("w5 w6 w7"),
                                    cfg.max_new_tokens);
  CHECK(t.generated_tokens == TokenSequence(full.begin() + 3, full.end()));
}

TEST_CASE("vanilla trace: C = c_max exactly, equal to steered_generate") {
  const auto cfg = base_config(SteerMode::kVanilla);
  const auto prompt = tok().encode("w5 w6 w7");
  const auto t = generate(fixture(), prompt, cfg);
  CHECK(t.coefficient == cfg.scaling.c_max);
  const auto full =
      steered_generate(fixture(), prompt, cfg.steering_vector, cfg.scaling.c_max,
                       cfg.steer_layer, cfg.positions, cfg.max_new_tokens);
  CHECK(t.generated_tokens ==
        TokenSequence(full.begin() + long(prompt.size()), full.end()));
  for (bool s : t.per_step_steered) CHECK(s);
}

TEST_CASE("zero vector: enstom equals prompt_only token-for-token") {
  auto cfg = base_config(SteerMode::kEnstom);
  std::fill(cfg.steering_vector.vec.begin(), cfg.steering_vector.vec.end(), 0.0f);
  const auto prompt = tok().encode("w9 w3 w8");
  const auto ens = generate(fixture(), prompt, cfg);
  cfg.mode = SteerMode::kPromptOnly;
  const auto po = generate(fixture(), prompt, cfg);
  CHECK(ens.generated_tokens == po.generated_tokens);
}

TEST_CASE("zero coefficient: C forced tiny reproduces prompt_only") {
  auto cfg = base_config(SteerMode::kEnstom);
  // Displace t far past every observable entropy so the sigmoid floors out.
  cfg.scaling.threshold = -100.0;
  cfg.scaling.delta = +1;  // H >> t would saturate; use delta -1 semantics below
  cfg.scaling.delta = -1;
  cfg.scaling.threshold = -1000.0;  // H - t huge positive, delta -1 -> C ~ 0
  const auto prompt = tok().encode("w11 w12");
  const auto ens = generate(fixture(), prompt, cfg);
  CHECK(ens.coefficient < 1e-9);
  cfg.mode = SteerMode::kPromptOnly;
  const auto po = generate(fixture(), prompt, cfg);
  CHECK(ens.generated_tokens == po.generated_tokens);
}

TEST_CASE("mode collapse: saturated enstom reproduces vanilla") {
  auto cfg = base_config(SteerMode::kEnstom);
  cfg.scaling.threshold = 1000.0;  // H << t, delta -1 -> C -> c_max
  cfg.scaling.delta = -1;
  const auto prompt = tok().encode("w4 w18 w2");
  const auto ens = generate(fixture(), prompt, cfg);
  CHECK(ens.coefficient == doctest::Approx(cfg.scaling.c_max).epsilon(1e-9));
  cfg.mode = SteerMode::kVanilla;
  const auto van = generate(fixture(), prompt, cfg);
  CHECK(ens.generated_tokens == van.generated_tokens);
}

TEST_CASE("coefficient provenance in enstom mode") {
  const auto cfg = base_config(SteerMode::kEnstom);
  const auto t = generate(fixture(), tok().encode("w7 w7 w7 w7"), cfg);
  const double expected =
      scaled_coefficient(t.entropy_readings.at(cfg.entropy_layer).mean, cfg.scaling);
  CHECK(std::fabs(t.coefficient - expected) <= 1e-9);
}

TEST_CASE("steering locality: layers below steer_layer unchanged") {
  const auto cfg = base_config(SteerMode::kVanilla);
  const auto prompt = tok().encode("w5 w6");
  HookPlan reads;
  reads.reads.push_back({0, PositionSelector::kLast, 0});

  const auto plain = fixture().forward(prompt, reads);
  HookPlan steered = reads;
  steered.writes.push_back(steering_write(cfg.steering_vector, cfg.scaling.c_max,
                                          cfg.steer_layer));
  const auto hooked = fixture().forward(prompt, steered);
  // steer layer is 1; the layer-0 snapshot must be bit-identical
  CHECK(plain.snapshots[0].hidden == hooked.snapshots[0].hidden);
  // and final logits must differ
  CHECK(plain.logits != hooked.logits);
}

TEST_CASE("generated-only steering leaves prompt positions alone") {
  auto cfg = base_config(SteerMode::kVanilla);
  const auto prompt = tok().encode("w5 w6 w7");
  const auto all = steered_generate(fixture(), prompt, cfg.steering_vector, 1.5,
                                    cfg.steer_layer, SteerPositions::kAllPositions,
                                    4);
  const auto gen_only = steered_generate(fixture(), prompt, cfg.steering_vector, 1.5,
                                         cfg.steer_layer,
                                         SteerPositions::kGeneratedOnly, 4);
  // First generated token under generated-only steering equals the unsteered
  // one: no position is past the prompt yet when it is decoded.
  const auto plain = greedy_generate(fixture(), prompt, 1);
  CHECK(gen_only[prompt.size()] == plain[prompt.size()]);
  CHECK(all.size() >= prompt.size() + 1);
}

TEST_CASE("run_batch matches direct generate and preserves order") {
  std::vector<DialogueSample> samples;
  for (int i = 0; i < 6; ++i) {
    DialogueSample s;
    s.sample_id = "s" + std::to_string(i);
    s.query = "w" + std::to_string(5 + i) + " w9";
    s.label = i % 2 ? "on_topic" : "distractor";
    samples.push_back(s);
  }
  const auto cfg = base_config(SteerMode::kEnstom);
  CHECK(run_batch(fixture(), {}, cfg, tok()).empty());

  const auto traces = run_batch(fixture(), samples, cfg, tok(), 2);
  REQUIRE(traces.size() == samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    CHECK(traces[i].input_id == samples[i].sample_id);
    const auto direct = generate(fixture(), render_dialogue_prompt(samples[i], tok()),
                                 cfg, samples[i].sample_id);
    CHECK(traces[i].generated_tokens == direct.generated_tokens);
    CHECK(traces[i].coefficient == direct.coefficient);
  }

  // permuted batch -> permuted identical traces
  auto shuffled = samples;
  std::reverse(shuffled.begin(), shuffled.end());
  const auto rev = run_batch(fixture(), shuffled, cfg, tok(), 3);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    CHECK(rev[samples.size() - 1 - i].input_id == traces[i].input_id);
    CHECK(rev[samples.size() - 1 - i].generated_tokens == traces[i].generated_tokens);
  }
}

TEST_CASE("run_batch carries per-sample errors without aborting") {
  std::vector<DialogueSample> samples(2);
  samples[0].sample_id = "ok";
  samples[0].query = "w5";
  samples[0].label = "on_topic";
  samples[1].sample_id = "too-long";
  samples[1].label = "distractor";
  for (int i = 0; i < kSpec.max_context; ++i) samples[1].query += " w9";
  const auto cfg = base_config(SteerMode::kEnstom);
  const auto traces = run_batch(fixture(), samples, cfg, tok());
  REQUIRE(traces.size() == 2);
  CHECK(traces[0].error.empty());
  CHECK_FALSE(traces[1].error.empty());
  CHECK(traces[1].input_id == "too-long");
}

TEST_CASE("traces JSONL round-trip") {
  const auto cfg = base_config(SteerMode::kEnstom);
  std::vector<GenerationTrace> traces;
  traces.push_back(generate(fixture(), tok().encode("w5 w6"), cfg, "a"));
  traces.push_back(generate(fixture(), tok().encode("w7 w7 w7"), cfg, "b"));
  traces[1].label = "distractor";
  traces[1].response_text = tok().decode(
      TokenSequence(traces[1].generated_tokens.begin(), traces[1].generated_tokens.end()));

  const auto path = fs::temp_directory_path() / "enstom_traces_rt.jsonl";
  write_traces_jsonl(path, traces);
  const auto back = read_traces_jsonl(path);
  REQUIRE(back.size() == traces.size());
  for (std::size_t i = 0; i < traces.size(); ++i) {
    CHECK(back[i].input_id == traces[i].input_id);
    CHECK(back[i].mode == traces[i].mode);
    CHECK(back[i].coefficient == traces[i].coefficient);
    CHECK(back[i].generated_tokens == traces[i].generated_tokens);
    CHECK(back[i].label == traces[i].label);
    for (const auto& [l, r] : traces[i].entropy_readings) {
      CHECK(back[i].entropy_readings.at(l).mean == r.mean);
      CHECK(back[i].entropy_readings.at(l).per_token == r.per_token);
    }
  }
  fs::remove(path);
}

TEST_CASE("identical config gives bit-identical traces") {
  const auto cfg = base_config(SteerMode::kEnstom);
  const auto prompt = tok().encode("w3 w1 w4 w1 w5");
  const auto a = generate(fixture(), prompt, cfg);
  const auto b = generate(fixture(), prompt, cfg);
  CHECK(a.generated_tokens == b.generated_tokens);
  CHECK(a.coefficient == b.coefficient);
  CHECK(a.entropy_readings.at(cfg.entropy_layer).per_token ==
        b.entropy_readings.at(cfg.entropy_layer).per_token);
}
