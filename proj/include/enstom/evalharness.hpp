#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "enstom/corpus.hpp"
#include "enstom/pipeline.hpp"

namespace enstom {

enum class Verdict { kRefusal, kEngaging };

std::string to_string(Verdict v);

struct JudgeVerdict {
  std::string input_id;
  Verdict verdict = Verdict::kEngaging;
  std::string judge_kind;  // "rule_based" | "external"
  std::string rationale;
};

// Refusal markers are versioned data so fixture texts and markers evolve
// together. Matching is case-insensitive substring against the response
// padded with spaces, so a marker like " a " matches only the whole word.
struct JudgeMarkers {
  std::vector<std::string> refusal_markers;
};

JudgeMarkers default_judge_markers();
JudgeMarkers load_judge_markers(const std::filesystem::path& path);

JudgeVerdict judge_rule_based(const std::string& response,
                              const JudgeMarkers& markers,
                              const std::string& input_id = "");

struct ExternalJudgeConfig {
  std::string url;                   // chat-completion shaped endpoint
  std::string api_key;               // sent as a bearer token, never logged
  std::string model = "judge";
  int max_retries = 3;
  // Appendix-style letter mapping, kept explicit per request.
  Verdict letter_a = Verdict::kRefusal;
  Verdict letter_b = Verdict::kEngaging;
};

// Reads ENSTOM_JUDGE_URL / ENSTOM_JUDGE_KEY.
std::optional<ExternalJudgeConfig> external_judge_config_from_env();

std::string render_judge_prompt(const DialogueSample& sample,
                                const std::string& response);

JudgeVerdict judge_external(const ExternalJudgeConfig& cfg,
                            const DialogueSample& sample,
                            const std::string& response);

struct AccuracyReport {
  double distractor_accuracy = 0.0;
  double ontopic_accuracy = 0.0;
  double overall = 0.0;  // unweighted mean of the two
  int distractor_total = 0, distractor_refused = 0;
  int ontopic_total = 0, ontopic_engaged = 0;
};

// label is "distractor" or "on_topic".
AccuracyReport accuracy(const std::vector<std::pair<std::string, Verdict>>& verdicts);

AccuracyReport evaluate_traces(const std::vector<GenerationTrace>& traces,
                               const JudgeMarkers& markers);

struct SweepRow {
  std::string threshold_label;  // numeric t, "prompt_only" or "vanilla"
  AccuracyReport report;
};

// Runs the full pipeline per threshold with everything else fixed, plus
// prompt_only and vanilla baseline rows.
std::vector<SweepRow> threshold_sweep(const Backend& model,
                                      const std::vector<DialogueSample>& samples,
                                      const PipelineConfig& base,
                                      const std::vector<double>& thresholds,
                                      const JudgeMarkers& markers,
                                      const Tokenizer& tokenizer, int jobs = 0);

void write_sweep_csv(const std::filesystem::path& path,
                     const std::vector<SweepRow>& rows);

struct EntropyObservation {
  std::string domain;
  std::string label;  // "distractor" | "on_topic"
  int layer = 0;
  double entropy = 0.0;
};

// Per domain and layer: mean(distractor) - mean(on_topic).
std::map<std::pair<std::string, int>, double> entropy_difference_report(
    const std::vector<EntropyObservation>& observations);

void write_entropy_diff_csv(const std::filesystem::path& path,
                            const std::map<std::pair<std::string, int>, double>& table);

struct CoefficientBinRow {
  std::string label;
  std::string bin;  // "C<0.5" | "0.5<=C<1.0" | "C>=1.0"
  double ratio_percent = 0.0;
  double accuracy = 0.0;
  int count = 0;
};

// Bins trace coefficients per label; accuracy per bin is the fraction of
// label-correct verdicts (refusal for distractors, engaging for on-topic).
std::vector<CoefficientBinRow> coefficient_bin_report(
    const std::vector<GenerationTrace>& traces, const JudgeMarkers& markers);

void write_coeff_bins_csv(const std::filesystem::path& path,
                          const std::vector<CoefficientBinRow>& rows);

}  // namespace enstom
