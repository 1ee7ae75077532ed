#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "enstom/corpus.hpp"
#include "enstom/evalharness.hpp"
#include "enstom/model.hpp"
#include "enstom/pipeline.hpp"
#include "enstom/steering.hpp"
#include "enstom/tokenizer.hpp"

using namespace enstom;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {
std::vector<std::pair<std::string, Verdict>> verdict_counts(int d_refused,
                                                            int d_total,
                                                            int o_engaged,
                                                            int o_total) {
  std::vector<std::pair<std::string, Verdict>> v;
  for (int i = 0; i < d_total; ++i)
    v.emplace_back("distractor",
                   i < d_refused ? Verdict::kRefusal : Verdict::kEngaging);
  for (int i = 0; i < o_total; ++i)
    v.emplace_back("on_topic", i < o_engaged ? Verdict::kEngaging : Verdict::kRefusal);
  return v;
}
}  // namespace

TEST_CASE("rule-based judge on exemplary responses") {
  const auto markers = default_judge_markers();
  // published exemplary distractor refusals
  CHECK(judge_rule_based(
            "Sorry, I cannot answer this question as it is outside of my knowledge. "
            "Let's get back on the topic and continue discussing your insurance claim.",
            markers)
            .verdict == Verdict::kRefusal);
  CHECK(judge_rule_based(
            "I apologize, but I'm a home entertainment specialist and I cannot provide "
            "information on maintaining indoor plants.",
            markers)
            .verdict == Verdict::kRefusal);
  // engaging / faulty generations
  CHECK(judge_rule_based(
            "Great question! Your credit score is calculated based on your credit "
            "report, which includes your payment history and amounts owed.",
            markers)
            .verdict == Verdict::kEngaging);
  CHECK(judge_rule_based(
            "Of course! For a 30-year fixed-rate mortgage, the interest rate is 4.25%.",
            markers)
            .verdict == Verdict::kEngaging);
}

TEST_CASE("rule-based judge details") {
  const auto markers = default_judge_markers();
  CHECK_THROWS_AS(judge_rule_based("", markers), DataError);
  // case-insensitive
  CHECK(judge_rule_based("I CANNOT ANSWER that.", markers).verdict ==
        Verdict::kRefusal);
  // whole-word padded matching: a marker " a " must not fire inside words
  JudgeMarkers letter;
  letter.refusal_markers = {"a"};
  CHECK(judge_rule_based("A A A", letter).verdict == Verdict::kRefusal);
  CHECK(judge_rule_based("banana", letter).verdict == Verdict::kEngaging);
  // determinism
  const auto v1 = judge_rule_based("unable to help", markers);
  const auto v2 = judge_rule_based("unable to help", markers);
  CHECK(v1.verdict == v2.verdict);
}

TEST_CASE("marker file loading") {
  const auto path = fs::temp_directory_path() / "enstom_markers_test.json";
  {
    std::ofstream os(path);
    os << R"({"format":"enstom-markers/1","refusal":["nope"]})";
  }
  const auto m = load_judge_markers(path);
  REQUIRE(m.refusal_markers.size() == 1);
  CHECK(judge_rule_based("nope , not that", m).verdict == Verdict::kRefusal);
  {
    std::ofstream os(path);
    os << R"({"format":"wrong/9","refusal":["x"]})";
  }
  CHECK_THROWS_AS(load_judge_markers(path), DataError);
  fs::remove(path);
  CHECK_THROWS_AS(load_judge_markers(path), DataError);
}

TEST_CASE("accuracy: published count replays") {
  // Prompt Only row: 28 refusals / 100 distractors, 94 engaging / 100 on-topic
  auto r = accuracy(verdict_counts(28, 100, 94, 100));
  CHECK(r.distractor_accuracy == 0.28);
  CHECK(r.ontopic_accuracy == 0.94);

  // overall is the unweighted mean: 0.709 and 0.895 -> 0.802
  r = accuracy(verdict_counts(709, 1000, 895, 1000));
  CHECK(r.overall == 0.802);

  r = accuracy(verdict_counts(5, 5, 7, 7));
  CHECK(r.distractor_accuracy == 1.0);
  CHECK(r.ontopic_accuracy == 1.0);
  CHECK(r.overall == 1.0);
}

TEST_CASE("accuracy requires both classes") {
  CHECK_THROWS_AS(accuracy({}), DataError);
  CHECK_THROWS_AS(accuracy({{"distractor", Verdict::kRefusal}}), DataError);
  CHECK_THROWS_AS(accuracy({{"weird", Verdict::kRefusal}}), DataError);
}

TEST_CASE("entropy difference report") {
  std::vector<EntropyObservation> obs;
  for (int i = 0; i < 3; ++i) {
    obs.push_back({"dom", "distractor", 2, 6.0});
    obs.push_back({"dom", "on_topic", 2, 7.0});
  }
  auto table = entropy_difference_report(obs);
  CHECK(table.at({"dom", 2}) == doctest::Approx(-1.0));

  obs.clear();
  obs.push_back({"dom", "distractor", 0, 5.0});
  obs.push_back({"dom", "on_topic", 0, 5.0});
  table = entropy_difference_report(obs);
  CHECK(table.at({"dom", 0}) == doctest::Approx(0.0));

  obs.clear();
  obs.push_back({"dom", "distractor", 1, 5.0});
  CHECK_THROWS_AS(entropy_difference_report(obs), DataError);
}

TEST_CASE("coefficient bin report") {
  auto trace = [](double c, std::string label, std::string resp) {
    GenerationTrace t;
    t.coefficient = c;
    t.label = std::move(label);
    t.response_text = std::move(resp);
    return t;
  };
  JudgeMarkers markers;
  markers.refusal_markers = {"refuse"};
  std::vector<GenerationTrace> traces{
      trace(0.1, "distractor", "chat chat"),
      trace(0.7, "distractor", "refuse this"),
      trace(1.2, "distractor", "refuse this"),
  };
  auto rows = coefficient_bin_report(traces, markers);
  double total_ratio = 0.0;
  for (const auto& r : rows) {
    if (r.label != "distractor") continue;
    total_ratio += r.ratio_percent;
    CHECK(r.ratio_percent == doctest::Approx(100.0 / 3).epsilon(1e-6));
  }
  CHECK(total_ratio == doctest::Approx(100.0).epsilon(1e-3));
  for (const auto& r : rows) {
    if (r.label != "distractor") continue;
    if (r.bin == "C<0.5") CHECK(r.accuracy == doctest::Approx(0.0));
    if (r.bin == "0.5<=C<1.0") CHECK(r.accuracy == doctest::Approx(1.0));
    if (r.bin == "C>=1.0") CHECK(r.accuracy == doctest::Approx(1.0));
  }

  // boundary placement: C=0.5 middle bin, C=1.0 top bin
  std::vector<GenerationTrace> edges{trace(0.5, "on_topic", "ok"),
                                     trace(1.0, "on_topic", "ok")};
  rows = coefficient_bin_report(edges, markers);
  for (const auto& r : rows) {
    if (r.bin == "0.5<=C<1.0") CHECK(r.count == 1);
    if (r.bin == "C>=1.0") CHECK(r.count == 1);
    if (r.bin == "C<0.5") CHECK(r.count == 0);
  }
}

TEST_CASE("threshold sweep: single t equals direct evaluation") {
  const ModelSpec spec = default_fixture_spec();
  const FixtureModel model(spec);
  const Tokenizer tok(spec.vocab_size);

  ContrastPair p;
  p.pair_id = "p0";
  p.common_prompt = tok.encode("Question : w10 Choices : ( A ) w50 ( B ) w52 Answer : (");
  p.positive_completion = 1;
  p.negative_completion = 2;
  PipelineConfig cfg;
  cfg.steering_vector = aggregate_steering_vector({extract_pair_vector(model, p, 1)});
  cfg.steer_layer = 1;
  cfg.entropy_layer = spec.layer_count - 1;
  cfg.probe.probe_layers = {cfg.entropy_layer};
  cfg.mode = SteerMode::kEnstom;
  cfg.scaling.threshold = 0.5;

  std::vector<DialogueSample> samples;
  for (int i = 0; i < 4; ++i) {
    DialogueSample s;
    s.sample_id = "s" + std::to_string(i);
    s.query = i % 2 ? "w9 w8 w7" : "w7 w7 w7 w7 w7 w7";
    s.label = i % 2 ? "on_topic" : "distractor";
    samples.push_back(s);
  }
  JudgeMarkers markers;
  markers.refusal_markers = {"a"};

  const auto rows = threshold_sweep(model, samples, cfg, {0.5}, markers, tok);
  REQUIRE(rows.size() == 3);  // prompt_only + vanilla + one t
  CHECK(rows[0].threshold_label == "prompt_only");
  CHECK(rows[1].threshold_label == "vanilla");
  CHECK(rows[2].threshold_label == "0.5");

  const auto traces = run_batch(model, samples, cfg, tok);
  const auto direct = evaluate_traces(traces, markers);
  CHECK(rows[2].report.overall == doctest::Approx(direct.overall));
  CHECK(rows[2].report.distractor_accuracy ==
        doctest::Approx(direct.distractor_accuracy));

  // CSV shape
  const auto path = fs::temp_directory_path() / "enstom_sweep_test.csv";
  write_sweep_csv(path, rows);
  std::ifstream is(path);
  std::string header;
  std::getline(is, header);
  CHECK(header == "t,distractor,ontopic,overall");
  fs::remove(path);
}

TEST_CASE("external judge against a local endpoint") {
  httplib::Server server;
  std::atomic<int> calls{0};
  std::string seen_auth, seen_prompt;
  server.Post("/v1/chat/completions",
              [&](const httplib::Request& req, httplib::Response& res) {
                ++calls;
                if (auto it = req.headers.find("Authorization");
                    it != req.headers.end())
                  seen_auth = it->second;
                const auto body = json::parse(req.body);
                seen_prompt = body["messages"][0]["content"].get<std::string>();
                json out;
                const std::string reply =
                    seen_prompt.find("bot: chatty") != std::string::npos
                        ? "(B) The response answers the question."
                        : "A";
                out["choices"] = json::array(
                    {{{"message", {{"role", "assistant"}, {"content", reply}}}}});
                res.set_content(out.dump(), "application/json");
              });
  server.Post("/unparseable", [](const httplib::Request&, httplib::Response& res) {
    json out;
    out["choices"] =
        json::array({{{"message", {{"role", "assistant"}, {"content", "maybe"}}}}});
    res.set_content(out.dump(), "application/json");
  });

  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  DialogueSample s;
  s.sample_id = "s0";
  s.scenario = "banking";
  s.query = "w9";
  s.history = {{"user", "w4"}, {"bot", "w5"}};
  s.label = "distractor";

  ExternalJudgeConfig cfg;
  cfg.url = "http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions";
  cfg.api_key = "sekret";

  auto v = judge_external(cfg, s, "cannot say");
  CHECK(v.verdict == Verdict::kRefusal);
  CHECK(v.judge_kind == "external");
  CHECK(seen_auth == "Bearer sekret");
  // prompt carries the structured sections
  CHECK(seen_prompt.find("Task: Classify the <Response>") != std::string::npos);
  CHECK(seen_prompt.find("Scenario: banking") != std::string::npos);
  CHECK(seen_prompt.find("<Response> bot: cannot say") != std::string::npos);

  v = judge_external(cfg, s, "chatty answer");
  CHECK(v.verdict == Verdict::kEngaging);

  cfg.url = "http://127.0.0.1:" + std::to_string(port) + "/unparseable";
  CHECK_THROWS_AS(judge_external(cfg, s, "resp"), DataError);

  cfg.url = "http://127.0.0.1:1/nowhere";  // refused connection -> retries then error
  cfg.max_retries = 2;
  CHECK_THROWS_AS(judge_external(cfg, s, "resp"), DataError);

  server.stop();
  th.join();
  CHECK(calls >= 2);
}

TEST_CASE("external judge env config") {
#ifdef _WIN32
#else
  unsetenv("ENSTOM_JUDGE_URL");
  unsetenv("ENSTOM_JUDGE_KEY");
  CHECK_FALSE(external_judge_config_from_env().has_value());
  setenv("ENSTOM_JUDGE_URL", "http://example.test/v1", 1);
  setenv("ENSTOM_JUDGE_KEY", "k", 1);
  const auto cfg = external_judge_config_from_env();
  REQUIRE(cfg.has_value());
  CHECK(cfg->url == "http://example.test/v1");
  CHECK(cfg->api_key == "k");
  unsetenv("ENSTOM_JUDGE_URL");
  unsetenv("ENSTOM_JUDGE_KEY");
#endif
}
