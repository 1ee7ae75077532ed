#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "enstom/entroscale.hpp"
#include "enstom/model.hpp"
#include "enstom/steering.hpp"
#include "enstom/tokenizer.hpp"

namespace enstom {

struct DialogueTurn {
  std::string speaker;  // "user" | "bot"
  std::string text;

  bool operator==(const DialogueTurn&) const = default;
};

// X = {I, D, u} plus the on-topic/distractor label.
struct DialogueSample {
  std::string sample_id;
  std::string instruction;
  std::vector<DialogueTurn> history;
  std::string query;
  std::string label;  // "on_topic" | "distractor"
  std::string domain;
  std::string scenario;
  // The paired distractor query, when known; on-topic prompt assembly must
  // exclude any history turn carrying it.
  std::string distractor_text;

  bool operator==(const DialogueSample&) const = default;
};

struct SteeringQARecord {
  std::string record_id;
  std::string distractor;
  std::string refusal_choice;
  std::string engaging_choice;
  char letter_assignment = 'A';  // which letter carries the refusal

  bool operator==(const SteeringQARecord&) const = default;
};

struct JailbreakRecord {
  std::string template_text;  // must contain exactly one "{q}" placeholder
  std::string query;
  std::string harm_label;  // "harmful" | "harmless"
};

// JSONL with a schema header line ({"schema":"enstom-dlg/1"} etc.).
std::vector<DialogueSample> load_dialogues(const std::filesystem::path& path);
void save_dialogues(const std::filesystem::path& path,
                    const std::vector<DialogueSample>& samples);

std::vector<SteeringQARecord> load_steering_qa(const std::filesystem::path& path);
void save_steering_qa(const std::filesystem::path& path,
                      const std::vector<SteeringQARecord>& records);

std::vector<JailbreakRecord> load_jailbreaks(const std::filesystem::path& path);

// Canonical prompt assembly for generation/probing. For on-topic samples the
// distractor turn (and its reply) never appears in the rendered history.
std::string render_dialogue_text(const DialogueSample& sample);
TokenSequence render_dialogue_prompt(const DialogueSample& sample,
                                     const Tokenizer& tokenizer);

// Canonical two-choice prompt: question, both choices, "Answer : (".
std::string render_pair_text(const SteeringQARecord& record);
std::vector<ContrastPair> build_contrast_pairs(
    const std::vector<SteeringQARecord>& records, const Tokenizer& tokenizer);

// Draws a balanced A/B refusal assignment from a seeded generator.
void assign_letters(std::vector<SteeringQARecord>& records, std::uint64_t seed);

TokenSequence compose_jailbreak(const JailbreakRecord& record,
                                const Tokenizer& tokenizer);
std::string compose_jailbreak_text(const JailbreakRecord& record);

enum class LetterPolicy {
  kBalanced,  // seeded random assignment
  kFixedA,    // refusal always on A (used by the shipped synthetic corpus)
};

struct SynthesisOptions {
  std::uint64_t seed = 1;
  int distractor_count = 20;
  int ontopic_count = 20;
  int qa_count = 24;
  int query_tokens = 20;
  int pool_size = 300;
  int max_retries = 4;
  double min_separation = 1.0;  // nats between class entropy means
  LetterPolicy letter_policy = LetterPolicy::kFixedA;
};

struct SynthesisManifest {
  int entropy_layer = 0;
  double mean_distractor = 0.0;
  double mean_ontopic = 0.0;
  double separation = 0.0;  // |mean difference| in nats
  int delta = 0;
  double midpoint_threshold = 0.0;
  std::uint64_t seed = 0;
  std::string letter_policy;
};

// Emits dialogues.jsonl, sqa.jsonl and manifest.json under out_dir. The two
// label classes are engineered (and verified at generation time) to separate
// in probe entropy on the given model; fails after bounded retries otherwise.
SynthesisManifest synthesize_fixture_corpus(const Backend& model,
                                            const SynthesisOptions& options,
                                            const std::filesystem::path& out_dir);

SynthesisManifest load_synthesis_manifest(const std::filesystem::path& path);

}  // namespace enstom
