#include "enstom/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "enstom/rng.hpp"

namespace enstom {

namespace {

using nlohmann::json;

json parse_line(const std::string& line, const std::filesystem::path& path,
                std::size_t lineno) {
  try {
    return json::parse(line);
  } catch (const json::exception& e) {
    throw DataError(path.string() + ":" + std::to_string(lineno) +
                    ": invalid JSON: " + e.what());
  }
}

void expect_schema(std::ifstream& is, const std::filesystem::path& path,
                   std::string_view schema, bool& empty_file) {
  std::string line;
  if (!std::getline(is, line)) {
    empty_file = true;
    return;
  }
  empty_file = false;
  json j = parse_line(line, path, 1);
  if (j.value("schema", "") != schema)
    throw DataError(path.string() + ":1: expected schema header \"" +
                    std::string(schema) + "\"");
}

[[noreturn]] void fail_at(const std::filesystem::path& path, std::size_t lineno,
                          const std::string& msg) {
  throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + msg);
}

}  // namespace

std::vector<DialogueSample> load_dialogues(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open " + path.string());
  bool empty = false;
  expect_schema(is, path, "enstom-dlg/1", empty);
  std::vector<DialogueSample> out;
  if (empty) return out;

  std::string line;
  std::size_t lineno = 1;
  std::vector<std::string> seen_ids;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j = parse_line(line, path, lineno);
    DialogueSample s;
    if (!j.contains("sample_id")) fail_at(path, lineno, "missing sample_id");
    s.sample_id = j["sample_id"].get<std::string>();
    if (std::find(seen_ids.begin(), seen_ids.end(), s.sample_id) != seen_ids.end())
      fail_at(path, lineno, "duplicate sample_id " + s.sample_id);
    seen_ids.push_back(s.sample_id);
    s.instruction = j.value("instruction", "");
    s.query = j.value("query", "");
    if (!j.contains("label")) fail_at(path, lineno, "missing label");
    s.label = j["label"].get<std::string>();
    if (s.label != "on_topic" && s.label != "distractor")
      fail_at(path, lineno, "label must be on_topic or distractor");
    s.domain = j.value("domain", "");
    s.scenario = j.value("scenario", "");
    s.distractor_text = j.value("distractor", "");
    for (const auto& t : j.value("history", json::array())) {
      DialogueTurn turn;
      turn.speaker = t.value("speaker", "");
      turn.text = t.value("text", "");
      if (turn.speaker != "user" && turn.speaker != "bot")
        fail_at(path, lineno, "history speaker must be user or bot");
      s.history.push_back(std::move(turn));
    }
    // On-topic prompts deliberately exclude the distractor turn and its reply.
    if (s.label == "on_topic" && !s.distractor_text.empty()) {
      std::vector<DialogueTurn> kept;
      for (std::size_t i = 0; i < s.history.size(); ++i) {
        if (s.history[i].speaker == "user" && s.history[i].text == s.distractor_text) {
          if (i + 1 < s.history.size() && s.history[i + 1].speaker == "bot") ++i;
          continue;
        }
        kept.push_back(s.history[i]);
      }
      s.history = std::move(kept);
    }
    for (std::size_t i = 0; i < s.history.size(); ++i) {
      const bool want_user = i % 2 == 0;
      if ((s.history[i].speaker == "user") != want_user)
        fail_at(path, lineno, "history speakers must alternate starting with user");
    }
    out.push_back(std::move(s));
  }
  return out;
}

void save_dialogues(const std::filesystem::path& path,
                    const std::vector<DialogueSample>& samples) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  os << R"({"schema":"enstom-dlg/1"})" << "\n";
  for (const auto& s : samples) {
    json j;
    j["sample_id"] = s.sample_id;
    j["instruction"] = s.instruction;
    json hist = json::array();
    for (const auto& t : s.history) hist.push_back({{"speaker", t.speaker}, {"text", t.text}});
    j["history"] = hist;
    j["query"] = s.query;
    j["label"] = s.label;
    j["domain"] = s.domain;
    j["scenario"] = s.scenario;
    if (!s.distractor_text.empty()) j["distractor"] = s.distractor_text;
    os << j.dump() << "\n";
  }
}

std::vector<SteeringQARecord> load_steering_qa(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open " + path.string());
  bool empty = false;
  expect_schema(is, path, "enstom-sqa/1", empty);
  std::vector<SteeringQARecord> out;
  if (empty) return out;

  std::string line;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j = parse_line(line, path, lineno);
    SteeringQARecord r;
    if (!j.contains("record_id")) fail_at(path, lineno, "missing record_id");
    r.record_id = j["record_id"].get<std::string>();
    r.distractor = j.value("distractor", "");
    r.refusal_choice = j.value("refusal_choice", "");
    r.engaging_choice = j.value("engaging_choice", "");
    if (r.refusal_choice.empty() || r.engaging_choice.empty())
      fail_at(path, lineno, "choices must be nonempty");
    if (r.refusal_choice == r.engaging_choice)
      fail_at(path, lineno, "choices must be distinct");
    const std::string letter = j.value("letter_assignment", "");
    if (letter != "A" && letter != "B")
      fail_at(path, lineno, "letter_assignment must be A or B");
    r.letter_assignment = letter[0];
    out.push_back(std::move(r));
  }
  return out;
}

void save_steering_qa(const std::filesystem::path& path,
                      const std::vector<SteeringQARecord>& records) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  os << R"({"schema":"enstom-sqa/1"})" << "\n";
  for (const auto& r : records) {
    json j;
    j["record_id"] = r.record_id;
    j["distractor"] = r.distractor;
    j["refusal_choice"] = r.refusal_choice;
    j["engaging_choice"] = r.engaging_choice;
    j["letter_assignment"] = std::string(1, r.letter_assignment);
    os << j.dump() << "\n";
  }
}

std::vector<JailbreakRecord> load_jailbreaks(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open " + path.string());
  bool empty = false;
  expect_schema(is, path, "enstom-jbk/1", empty);
  std::vector<JailbreakRecord> out;
  if (empty) return out;

  std::string line;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j = parse_line(line, path, lineno);
    JailbreakRecord r;
    r.template_text = j.value("template", "");
    r.query = j.value("query", "");
    r.harm_label = j.value("harm_label", "");
    if (r.harm_label != "harmful" && r.harm_label != "harmless")
      fail_at(path, lineno, "harm_label must be harmful or harmless");
    out.push_back(std::move(r));
  }
  return out;
}

std::string render_dialogue_text(const DialogueSample& sample) {
  std::ostringstream os;
  os << sample.instruction;
  for (const auto& t : sample.history) {
    if (sample.label == "on_topic" && t.text == sample.distractor_text &&
        !sample.distractor_text.empty())
      continue;
    os << ' ' << t.text;
  }
  os << ' ' << sample.query;
  return os.str();
}

TokenSequence render_dialogue_prompt(const DialogueSample& sample,
                                     const Tokenizer& tokenizer) {
  return tokenizer.encode(render_dialogue_text(sample));
}

std::string render_pair_text(const SteeringQARecord& record) {
  const bool refusal_on_a = record.letter_assignment == 'A';
  const std::string& choice_a = refusal_on_a ? record.refusal_choice : record.engaging_choice;
  const std::string& choice_b = refusal_on_a ? record.engaging_choice : record.refusal_choice;
  std::ostringstream os;
  os << "Question : " << record.distractor << " Choices : ( A ) " << choice_a
     << " ( B ) " << choice_b << " Answer : (";
  return os.str();
}

std::vector<ContrastPair> build_contrast_pairs(
    const std::vector<SteeringQARecord>& records, const Tokenizer& tokenizer) {
  std::vector<ContrastPair> out;
  out.reserve(records.size());
  const int tok_a = tokenizer.token_of("A");
  const int tok_b = tokenizer.token_of("B");
  for (const auto& r : records) {
    ContrastPair p;
    p.pair_id = r.record_id;
    p.common_prompt = tokenizer.encode(render_pair_text(r));
    p.positive_completion = r.letter_assignment == 'A' ? tok_a : tok_b;
    p.negative_completion = r.letter_assignment == 'A' ? tok_b : tok_a;
    out.push_back(std::move(p));
  }
  return out;
}

void assign_letters(std::vector<SteeringQARecord>& records, std::uint64_t seed) {
  SplitMix64 rng(seed ^ fnv1a64("letter_assignment"));
  for (auto& r : records) r.letter_assignment = rng.next() & 1 ? 'A' : 'B';
}

std::string compose_jailbreak_text(const JailbreakRecord& record) {
  const std::string placeholder = "{q}";
  const auto first = record.template_text.find(placeholder);
  if (first == std::string::npos)
    throw DataError("jailbreak template has no {q} placeholder");
  if (record.template_text.find(placeholder, first + placeholder.size()) !=
      std::string::npos)
    throw DataError("jailbreak template has more than one {q} placeholder");
  std::string out = record.template_text;
  out.replace(first, placeholder.size(), record.query);
  return out;
}

TokenSequence compose_jailbreak(const JailbreakRecord& record,
                                const Tokenizer& tokenizer) {
  return tokenizer.encode(compose_jailbreak_text(record));
}

namespace {

std::string words_of(const std::vector<int>& ids, const Tokenizer& tok) {
  std::string s;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) s += ' ';
    s += tok.word_of(ids[i]);
  }
  return s;
}

}  // namespace

SynthesisManifest synthesize_fixture_corpus(const Backend& model,
                                            const SynthesisOptions& options,
                                            const std::filesystem::path& out_dir) {
  if (options.distractor_count <= 0 || options.ontopic_count <= 0 ||
      options.qa_count <= 0)
    throw std::invalid_argument("synthesis counts must be positive");
  const auto& spec = model.spec();
  const Tokenizer tok(spec.vocab_size);
  std::filesystem::create_directories(out_dir);

  const std::string instruction = "w40 w41 w42 w43";
  const std::vector<DialogueTurn> base_history = {
      {"user", "w44 w45 w46"},
      {"bot", "w47 w48"},
  };

  EntropyProbeConfig probe;
  for (int l = 0; l < spec.layer_count; ++l) probe.probe_layers.push_back(l);

  auto query_of = [&](SplitMix64& rng, bool repeated) {
    std::vector<int> ids(options.query_tokens);
    if (repeated) {
      // Repetitive queries: the residual stream stays aligned with a single
      // token embedding, which sharpens intermediate lens distributions.
      const int t = 3 + int(rng.below(std::uint64_t(spec.vocab_size - 3)));
      std::fill(ids.begin(), ids.end(), t);
    } else {
      for (auto& id : ids) id = 3 + int(rng.below(std::uint64_t(spec.vocab_size - 3)));
    }
    return words_of(ids, tok);
  };

  for (int attempt = 0; attempt <= options.max_retries; ++attempt) {
    SplitMix64 rng(options.seed + std::uint64_t(attempt) * 0x9e3779b9ULL);

    std::vector<DialogueSample> samples;
    auto make_sample = [&](const std::string& id, const std::string& label,
                           const std::string& query) {
      DialogueSample s;
      s.sample_id = id;
      s.instruction = instruction;
      s.history = base_history;
      s.query = query;
      s.label = label;
      s.domain = "fixture";
      s.scenario = "synthetic-topic";
      samples.push_back(std::move(s));
    };
    for (int i = 0; i < options.distractor_count; ++i)
      make_sample("dlg-d-" + std::to_string(i), "distractor", query_of(rng, true));
    for (int i = 0; i < options.ontopic_count; ++i)
      make_sample("dlg-o-" + std::to_string(i), "on_topic", query_of(rng, false));

    // Measure per-layer class means on the rendered prompts.
    std::map<int, std::vector<double>> dist_means, on_means;
    for (const auto& s : samples) {
      const auto readings = probe_entropy(model, render_dialogue_prompt(s, tok), probe);
      for (const auto& [layer, r] : readings)
        (s.label == "distractor" ? dist_means : on_means)[layer].push_back(r.mean);
    }

    int best_layer = -1;
    double best_gap = 0.0, best_md = 0.0, best_mo = 0.0;
    for (int l = 0; l < spec.layer_count; ++l) {
      auto mean = [](const std::vector<double>& xs) {
        double s = 0.0;
        for (double x : xs) s += x;
        return s / double(xs.size());
      };
      const double md = mean(dist_means[l]);
      const double mo = mean(on_means[l]);
      const double gap = std::abs(md - mo);
      if (gap > best_gap) {
        best_gap = gap;
        best_layer = l;
        best_md = md;
        best_mo = mo;
      }
    }

    if (best_layer < 0 || best_gap < options.min_separation) {
      if (attempt == options.max_retries)
        throw DataError("synthesis could not reach the requested entropy separation (best " +
                        std::to_string(best_gap) + " nats)");
      continue;
    }

    // Steering QA records; for the shipped corpus the refusal sits on a fixed
    // letter so the toy model has a consistent direction to learn.
    std::vector<SteeringQARecord> qa;
    SplitMix64 qa_rng(options.seed ^ fnv1a64("qa_queries"));
    for (int i = 0; i < options.qa_count; ++i) {
      SteeringQARecord r;
      r.record_id = "sqa-" + std::to_string(i);
      r.distractor = query_of(qa_rng, true);
      r.refusal_choice = "w50 w51 " + tok.word_of(3 + int(qa_rng.below(std::uint64_t(spec.vocab_size - 3))));
      r.engaging_choice = "w52 w53 " + tok.word_of(3 + int(qa_rng.below(std::uint64_t(spec.vocab_size - 3))));
      r.letter_assignment = 'A';
      qa.push_back(std::move(r));
    }
    if (options.letter_policy == LetterPolicy::kBalanced)
      assign_letters(qa, options.seed);

    save_dialogues(out_dir / "dialogues.jsonl", samples);
    save_steering_qa(out_dir / "sqa.jsonl", qa);

    SynthesisManifest m;
    m.entropy_layer = best_layer;
    m.mean_distractor = best_md;
    m.mean_ontopic = best_mo;
    m.separation = best_gap;
    m.delta = best_md < best_mo ? -1 : 1;
    m.midpoint_threshold = 0.5 * (best_md + best_mo);
    m.seed = options.seed;
    m.letter_policy =
        options.letter_policy == LetterPolicy::kBalanced ? "balanced" : "fixed_a";

    nlohmann::json j;
    j["format"] = "enstom-manifest/1";
    j["entropy_layer"] = m.entropy_layer;
    j["mean_distractor"] = m.mean_distractor;
    j["mean_ontopic"] = m.mean_ontopic;
    j["separation"] = m.separation;
    j["delta"] = m.delta;
    j["midpoint_threshold"] = m.midpoint_threshold;
    j["seed"] = m.seed;
    j["letter_policy"] = m.letter_policy;
    std::ofstream os(out_dir / "manifest.json");
    if (!os) throw DataError("cannot write manifest");
    os << j.dump(2) << "\n";
    return m;
  }
  throw DataError("unreachable");
}

SynthesisManifest load_synthesis_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad manifest " + path.string() + ": " + e.what());
  }
  SynthesisManifest m;
  m.entropy_layer = j.at("entropy_layer").get<int>();
  m.mean_distractor = j.at("mean_distractor").get<double>();
  m.mean_ontopic = j.at("mean_ontopic").get<double>();
  m.separation = j.at("separation").get<double>();
  m.delta = j.at("delta").get<int>();
  m.midpoint_threshold = j.at("midpoint_threshold").get<double>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.letter_policy = j.value("letter_policy", "");
  return m;
}

}  // namespace enstom
