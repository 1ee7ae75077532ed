// enstom: steering-vector extraction, entropy probing, steered generation
// and evaluation on the shipped deterministic fixture model.
//
// Exit codes: 0 success, 2 usage error, 3 data error, 4 runtime error.
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "enstom/common.hpp"
#include "enstom/corpus.hpp"
#include "enstom/entroscale.hpp"
#include "enstom/evalharness.hpp"
#include "enstom/model.hpp"
#include "enstom/pipeline.hpp"
#include "enstom/steering.hpp"
#include "enstom/tokenizer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace enstom;

namespace {

std::uint64_t file_digest(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open input: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(is)),
                    std::istreambuf_iterator<char>());
  return fnv1a64(bytes);
}

std::int64_t manifest_timestamp() {
  if (const char* e = std::getenv("SOURCE_DATE_EPOCH")) {
    char* end = nullptr;
    const long long v = std::strtoll(e, &end, 10);
    if (end && *end == '\0') return v;
  }
  return 0;
}

// Every command writes exactly one manifest next to its outputs.
void write_run_manifest(const fs::path& out_dir, const std::string& command,
                        const json& config, const std::vector<fs::path>& inputs,
                        const std::vector<fs::path>& outputs) {
  json m;
  m["format"] = "enstom-run/1";
  m["command"] = command;
  m["tool_version"] = kToolVersion;
  m["timestamp"] = manifest_timestamp();
  m["config_digest"] = hex64(fnv1a64(config.dump()));
  json in = json::object();
  for (const auto& p : inputs) in[p.string()] = hex64(file_digest(p));
  m["inputs"] = in;
  json out = json::array();
  for (const auto& p : outputs) out.push_back(p.string());
  m["outputs"] = out;
  std::ofstream os(out_dir / (command + "_manifest.json"), std::ios::binary);
  os << m.dump(2) << "\n";
}

struct CommonArgs {
  std::uint64_t seed = default_fixture_spec().seed;
  std::string out_dir = ".";
  std::string config_path;
  int jobs = 0;
};

void add_common(CLI::App* cmd, CommonArgs& c) {
  cmd->add_option("--seed", c.seed, "fixture model seed");
  cmd->add_option("--out-dir", c.out_dir, "output directory");
  cmd->add_option("--config", c.config_path, "JSON config file");
  cmd->add_option("--jobs", c.jobs, "parallel worker cap (0 = default)");
}

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream is(path);
  if (!is) throw DataError("cannot open config: " + path);
  json j = json::parse(is, nullptr, false);
  if (j.is_discarded() || !j.is_object())
    throw DataError("config is not a JSON object: " + path);
  return j;
}

// Precedence: flags > config file > defaults.
template <typename T>
T pick(const CLI::App* cmd, const std::string& flag, T flag_value,
       const json& config, const std::string& key, T fallback) {
  const auto* opt = cmd->get_option_no_throw(flag);
  if (opt && opt->count() > 0) return flag_value;
  if (config.contains(key)) return config[key].get<T>();
  return fallback;
}

ScalingConfig scaling_from(const CLI::App* cmd, const json& config, double t_flag,
                           int delta_flag, double cmax_flag, double alpha_flag) {
  ScalingConfig s;
  s.threshold = pick(cmd, "--t", t_flag, config, "t", s.threshold);
  s.delta = pick(cmd, "--delta", delta_flag, config, "delta", s.delta);
  s.c_max = pick(cmd, "--c-max", cmax_flag, config, "c_max", s.c_max);
  s.alpha = pick(cmd, "--alpha", alpha_flag, config, "alpha", s.alpha);
  s.validate();
  return s;
}

int cmd_extract(const CommonArgs& common, const std::string& data, int layer,
                const std::string& out, const json& config) {
  const ModelSpec spec{.seed = common.seed};
  const FixtureModel model(spec);
  const Tokenizer tok(spec.vocab_size);

  const auto records = load_steering_qa(data);
  const auto pairs = build_contrast_pairs(records, tok);
  if (pairs.empty()) throw DataError("no pairs in " + data);

  std::vector<RawPairVector> raws;
  raws.reserve(pairs.size());
  for (const auto& p : pairs) raws.push_back(extract_pair_vector(model, p, layer));

  auto sv = aggregate_steering_vector(raws);
  sv.source_digest = hex64(file_digest(data));

  const fs::path out_dir(common.out_dir);
  fs::create_directories(out_dir);
  const fs::path vec_path = out.empty() ? out_dir / "vector.json" : fs::path(out);
  save_steering_vector(vec_path, sv);

  std::map<int, std::vector<RawPairVector>> by_layer;
  by_layer[layer] = std::move(raws);
  const fs::path var_path = out_dir / "variance.csv";
  write_variance_csv(var_path, vector_statistics(by_layer));

  write_run_manifest(out_dir, "extract", config, {data}, {vec_path, var_path});
  return 0;
}

int cmd_probe(const CommonArgs& common, const std::string& data,
              const json& config) {
  const ModelSpec spec{.seed = common.seed};
  const FixtureModel model(spec);
  const Tokenizer tok(spec.vocab_size);

  const auto samples = load_dialogues(data);
  if (samples.empty()) throw DataError("no samples in " + data);

  EntropyProbeConfig probe;
  for (int l = 0; l < spec.layer_count; ++l) probe.probe_layers.push_back(l);
  probe.validate(spec);

  const fs::path out_dir(common.out_dir);
  fs::create_directories(out_dir);

  std::vector<EntropyObservation> observations;
  std::map<int, std::pair<std::vector<double>, std::vector<double>>> per_layer;
  const fs::path ent_path = out_dir / "entropies.csv";
  {
    std::ofstream os(ent_path, std::ios::binary);
    os << "input_id,label,domain,layer,mean_entropy\n";
    char buf[64];
    for (const auto& s : samples) {
      const auto readings = probe_entropy(model, render_dialogue_prompt(s, tok), probe);
      for (const auto& [layer, r] : readings) {
        std::snprintf(buf, sizeof buf, "%.9g", r.mean);
        os << s.sample_id << ',' << s.label << ',' << s.domain << ',' << layer
           << ',' << buf << '\n';
        observations.push_back({s.domain, s.label, layer, r.mean});
        auto& bucket = per_layer[layer];
        (s.label == "distractor" ? bucket.first : bucket.second).push_back(r.mean);
      }
    }
  }

  const fs::path diff_path = out_dir / "entropy_diff.csv";
  write_entropy_diff_csv(diff_path, entropy_difference_report(observations));

  // Per-layer delta/threshold suggestions; a tie yields no usable sign.
  const fs::path sug_path = out_dir / "suggestions.csv";
  {
    std::ofstream os(sug_path, std::ios::binary);
    os << "layer,delta,threshold,separation,flag\n";
    char buf[128];
    for (const auto& [layer, bucket] : per_layer) {
      const auto& [d, o] = bucket;
      std::string delta_s = "0", flag;
      try {
        delta_s = std::to_string(calibrate_delta(d, o));
      } catch (const DataError&) {
        flag = "no-separation";
      }
      const auto sug = suggest_threshold(d, o);
      std::snprintf(buf, sizeof buf, "%d,%s,%.9g,%.9g,%s", layer, delta_s.c_str(),
                    sug.threshold, sug.separation, flag.c_str());
      os << buf << '\n';
    }
  }

  write_run_manifest(out_dir, "probe", config, {data},
                     {ent_path, diff_path, sug_path});
  return 0;
}

PipelineConfig pipeline_config(const CLI::App* cmd, const json& config,
                               const ModelSpec& spec, const std::string& vector_path,
                               const std::string& mode, int entropy_layer,
                               double t_flag, int delta_flag, double cmax_flag,
                               double alpha_flag) {
  PipelineConfig cfg;
  cfg.steering_vector = load_steering_vector(vector_path);
  cfg.steer_layer = cfg.steering_vector.layer;
  cfg.mode = steer_mode_from_string(
      pick<std::string>(cmd, "--mode", mode, config, "mode", "enstom"));
  cfg.entropy_layer =
      pick(cmd, "--L", entropy_layer, config, "entropy_layer", spec.layer_count - 1);
  cfg.probe.probe_layers = {cfg.entropy_layer};
  cfg.scaling = scaling_from(cmd, config, t_flag, delta_flag, cmax_flag, alpha_flag);
  cfg.max_new_tokens = config.value("max_new_tokens", cfg.max_new_tokens);
  cfg.validate(spec);
  return cfg;
}

int cmd_generate(const CommonArgs& common, const CLI::App* cmd, const json& config,
                 const std::string& data, const std::string& vector_path,
                 const std::string& mode, int entropy_layer, double t_flag,
                 int delta_flag, double cmax_flag, double alpha_flag,
                 const std::string& out) {
  const ModelSpec spec{.seed = common.seed};
  const FixtureModel model(spec);
  const Tokenizer tok(spec.vocab_size);

  const auto samples = load_dialogues(data);
  if (samples.empty()) throw DataError("no samples in " + data);
  const auto cfg = pipeline_config(cmd, config, spec, vector_path, mode,
                                   entropy_layer, t_flag, delta_flag, cmax_flag,
                                   alpha_flag);

  const auto traces = run_batch(model, samples, cfg, tok, common.jobs);

  const fs::path out_dir(common.out_dir);
  fs::create_directories(out_dir);
  const fs::path traces_path = out.empty() ? out_dir / "traces.jsonl" : fs::path(out);
  write_traces_jsonl(traces_path, traces);

  write_run_manifest(out_dir, "generate", config, {data, vector_path},
                     {traces_path});
  return 0;
}

int cmd_evaluate(const CommonArgs& common, const json& config,
                 const std::string& traces_path, const std::string& markers_path,
                 bool external, const std::string& data) {
  const auto traces = read_traces_jsonl(traces_path);
  if (traces.empty()) throw DataError("no traces in " + traces_path);

  const JudgeMarkers markers = markers_path.empty()
                                   ? default_judge_markers()
                                   : load_judge_markers(markers_path);

  AccuracyReport report;
  std::vector<fs::path> inputs{traces_path};
  if (!markers_path.empty()) inputs.push_back(markers_path);
  if (external) {
    const auto jcfg = external_judge_config_from_env();
    if (!jcfg) throw DataError("external judge requested but ENSTOM_JUDGE_URL unset");
    if (data.empty()) throw DataError("--external requires --data for judge prompts");
    const auto samples = load_dialogues(data);
    inputs.push_back(data);
    std::map<std::string, const DialogueSample*> by_id;
    for (const auto& s : samples) by_id[s.sample_id] = &s;
    std::vector<std::pair<std::string, Verdict>> verdicts;
    for (const auto& t : traces) {
      const auto it = by_id.find(t.input_id);
      if (it == by_id.end()) throw DataError("trace has no matching sample: " + t.input_id);
      verdicts.emplace_back(t.label, judge_external(*jcfg, *it->second, t.response_text).verdict);
    }
    report = accuracy(verdicts);
  } else {
    report = evaluate_traces(traces, markers);
  }

  const fs::path out_dir(common.out_dir);
  fs::create_directories(out_dir);
  const fs::path report_path = out_dir / "report.csv";
  {
    std::ofstream os(report_path, std::ios::binary);
    os << "metric,value\n";
    char buf[64];
    auto row = [&](const char* name, double v) {
      std::snprintf(buf, sizeof buf, "%.6g", v);
      os << name << ',' << buf << '\n';
    };
    row("distractor_accuracy", report.distractor_accuracy);
    row("ontopic_accuracy", report.ontopic_accuracy);
    row("overall", report.overall);
    os << "distractor_total," << report.distractor_total << '\n';
    os << "ontopic_total," << report.ontopic_total << '\n';
  }

  const fs::path bins_path = out_dir / "coeff_bins.csv";
  write_coeff_bins_csv(bins_path, coefficient_bin_report(traces, markers));

  write_run_manifest(out_dir, "evaluate", config, inputs, {report_path, bins_path});
  return 0;
}

int cmd_sweep(const CommonArgs& common, const CLI::App* cmd, const json& config,
              const std::string& data, const std::string& vector_path,
              const std::vector<double>& thresholds, const std::string& markers_path,
              int entropy_layer, int delta_flag, double cmax_flag,
              double alpha_flag) {
  const ModelSpec spec{.seed = common.seed};
  const FixtureModel model(spec);
  const Tokenizer tok(spec.vocab_size);

  const auto samples = load_dialogues(data);
  if (samples.empty()) throw DataError("no samples in " + data);
  if (thresholds.empty()) throw DataError("no thresholds given");

  auto cfg = pipeline_config(cmd, config, spec, vector_path, "enstom",
                             entropy_layer, 0.0, delta_flag, cmax_flag, alpha_flag);
  const JudgeMarkers markers = markers_path.empty()
                                   ? default_judge_markers()
                                   : load_judge_markers(markers_path);

  const auto rows = threshold_sweep(model, samples, cfg, thresholds, markers, tok,
                                    common.jobs);

  const fs::path out_dir(common.out_dir);
  fs::create_directories(out_dir);
  const fs::path sweep_path = out_dir / "sweep.csv";
  write_sweep_csv(sweep_path, rows);

  std::vector<fs::path> inputs{data, vector_path};
  if (!markers_path.empty()) inputs.push_back(markers_path);
  write_run_manifest(out_dir, "sweep", config, inputs, {sweep_path});
  return 0;
}

int cmd_synth(const CommonArgs& common, const json& config) {
  const ModelSpec spec{.seed = default_fixture_spec().seed};
  const FixtureModel model(spec);
  SynthesisOptions opt;
  opt.seed = common.seed == default_fixture_spec().seed ? opt.seed : common.seed;
  const fs::path out_dir(common.out_dir);
  fs::create_directories(out_dir);
  synthesize_fixture_corpus(model, opt, out_dir);
  write_run_manifest(out_dir, "synth", config, {},
                     {out_dir / "dialogues.jsonl", out_dir / "sqa.jsonl",
                      out_dir / "manifest.json"});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"entropy-scaled steering for topic maintenance"};
  app.require_subcommand(1);

  CommonArgs common;
  std::string data, out, vector_path, mode = "enstom", markers_path, traces_path;
  int layer = -1, entropy_layer = -1, delta = -1;
  double t = 7.5, c_max = 1.5, alpha = 5.0;
  std::vector<double> thresholds;
  bool external = false;

  auto* extract = app.add_subcommand("extract", "extract + aggregate a steering vector");
  add_common(extract, common);
  extract->add_option("--data", data, "steering-QA JSONL")->required();
  extract->add_option("--layer", layer, "extraction layer")->required();
  extract->add_option("--out", out, "vector output path");

  auto* probe = app.add_subcommand("probe", "layer-wise entropy analysis");
  add_common(probe, common);
  probe->add_option("--data", data, "dialogue JSONL")->required();

  auto* generate = app.add_subcommand("generate", "steered batch generation");
  add_common(generate, common);
  generate->add_option("--data", data, "dialogue JSONL")->required();
  generate->add_option("--vector", vector_path, "steering vector file")->required();
  generate->add_option("--mode", mode, "prompt_only | vanilla | enstom");
  generate->add_option("--L", entropy_layer, "entropy layer");
  generate->add_option("--t", t, "entropy threshold");
  generate->add_option("--delta", delta, "entropy direction (-1 or +1)");
  generate->add_option("--c-max", c_max, "maximum coefficient");
  generate->add_option("--alpha", alpha, "sigmoid steepness");
  generate->add_option("--out", out, "traces output path");

  auto* evaluate = app.add_subcommand("evaluate", "judge traces and report accuracy");
  add_common(evaluate, common);
  evaluate->add_option("--traces", traces_path, "traces JSONL")->required();
  evaluate->add_option("--markers", markers_path, "judge markers JSON");
  evaluate->add_flag("--external", external, "use the external judge (env-configured)");
  evaluate->add_option("--data", data, "dialogue JSONL (external judge prompts)");

  auto* sweep = app.add_subcommand("sweep", "threshold sweep with baseline rows");
  add_common(sweep, common);
  sweep->add_option("--data", data, "dialogue JSONL")->required();
  sweep->add_option("--vector", vector_path, "steering vector file")->required();
  sweep->add_option("--t-list", thresholds, "thresholds to sweep")->required();
  sweep->add_option("--markers", markers_path, "judge markers JSON");
  sweep->add_option("--L", entropy_layer, "entropy layer");
  sweep->add_option("--delta", delta, "entropy direction (-1 or +1)");
  sweep->add_option("--c-max", c_max, "maximum coefficient");
  sweep->add_option("--alpha", alpha, "sigmoid steepness");

  auto* synth = app.add_subcommand("synth", "synthesize the fixture corpus");
  add_common(synth, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;  // usage errors are always exit 2
  }

  try {
    const json config = load_config(common.config_path);
    if (extract->parsed()) return cmd_extract(common, data, layer, out, config);
    if (probe->parsed()) return cmd_probe(common, data, config);
    if (generate->parsed())
      return cmd_generate(common, generate, config, data, vector_path, mode,
                          entropy_layer, t, delta, c_max, alpha, out);
    if (evaluate->parsed())
      return cmd_evaluate(common, config, traces_path, markers_path, external, data);
    if (sweep->parsed())
      return cmd_sweep(common, sweep, config, data, vector_path, thresholds,
                       markers_path, entropy_layer, delta, c_max, alpha);
    if (synth->parsed()) return cmd_synth(common, config);
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  }
  return 0;
}
