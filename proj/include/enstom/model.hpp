#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "enstom/common.hpp"

namespace enstom {

struct ModelSpec {
  int layer_count = 6;
  int hidden_dim = 32;
  int vocab_size = 64;
  int head_count = 4;
  int max_context = 160;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const ModelSpec&) const = default;
};

// The spec every shipped fixture, test and CLI default builds from.
ModelSpec default_fixture_spec();

using TokenSequence = std::vector<int>;

void validate_tokens(const TokenSequence& tokens, const ModelSpec& spec);

// Token id 0 terminates greedy generation.
inline constexpr int kEosToken = 0;

enum class PositionSelector {
  kAll,    // every position
  kLast,   // final position only
  kIndex,  // exactly `index`
  kFrom,   // positions >= `index`
};

struct HookRead {
  int layer = 0;
  PositionSelector where = PositionSelector::kLast;
  int index = 0;
};

struct HookWrite {
  int layer = 0;
  std::vector<float> delta;
  PositionSelector where = PositionSelector::kAll;
  int index = 0;
};

// At most one additive write per layer; reads are captured after the write
// at the same layer has been applied.
struct HookPlan {
  std::vector<HookRead> reads;
  std::vector<HookWrite> writes;
};

struct ActivationSnapshot {
  int layer = 0;
  int position = 0;
  std::vector<float> hidden;
};

struct ForwardResult {
  int positions = 0;
  int vocab = 0;
  std::vector<float> logits;  // row-major positions x vocab
  std::vector<ActivationSnapshot> snapshots;

  std::span<const float> logits_at(int position) const {
    return {logits.data() + std::size_t(position) * vocab, std::size_t(vocab)};
  }
};

// Backend abstraction over the inference engine. The fixture model below is
// the shipped implementation; an external-checkpoint backend is a declared
// extension point behind this interface.
class Backend {
 public:
  virtual ~Backend() = default;
  virtual const ModelSpec& spec() const = 0;
  virtual ForwardResult forward(const TokenSequence& input,
                                const HookPlan& plan) const = 0;
  // Project an intermediate hidden state through the output head.
  virtual std::vector<float> logit_lens(std::span<const float> hidden) const = 0;
};

// Deterministic decoder-only transformer: pre-norm blocks, learned absolute
// position embeddings, tied input/output embedding, weights a pure function
// of spec.seed. Immutable after construction; forward passes own their
// workspace, so concurrent read-only use is safe.
class FixtureModel final : public Backend {
 public:
  explicit FixtureModel(const ModelSpec& spec);

  const ModelSpec& spec() const override { return spec_; }
  ForwardResult forward(const TokenSequence& input,
                        const HookPlan& plan) const override;
  std::vector<float> logit_lens(std::span<const float> hidden) const override;

  // The paper never states whether lens logits include the final norm; we
  // default to applying it (keeps the last-layer lens equal to the head)
  // but the other variant stays available for comparison.
  void set_lens_applies_final_norm(bool v) { lens_final_norm_ = v; }
  bool lens_applies_final_norm() const { return lens_final_norm_; }

  void save_checkpoint(const std::filesystem::path& path) const;
  static FixtureModel load_checkpoint(const std::filesystem::path& path);

 private:
  struct LayerWeights {
    std::vector<float> attn_gain, wq, wk, wv, wo;
    std::vector<float> mlp_gain, w1, w2;
  };

  FixtureModel() = default;
  void init_from_seed();

  ModelSpec spec_;
  std::vector<float> embedding_;  // vocab x dim, also the output head
  std::vector<float> position_;   // max_context x dim
  std::vector<LayerWeights> layers_;
  std::vector<float> final_gain_;
  bool lens_final_norm_ = true;
};

FixtureModel build_fixture_model(const ModelSpec& spec);

// Argmax with ties broken toward the lowest token id; throws on NaN.
int greedy_next(std::span<const float> logits);

// Greedy generation with a per-step hook plan applied to the growing
// sequence. Stops at max_new_tokens or after emitting kEosToken (the eos
// token is kept in the returned sequence).
TokenSequence greedy_generate(const Backend& model, const TokenSequence& prompt,
                              int max_new_tokens, const HookPlan& plan = {});

}  // namespace enstom
