#include "enstom/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "enstom/kernels.hpp"
#include "enstom/rng.hpp"

namespace enstom {

namespace {

constexpr char kMagic[5] = {'S', 'T', 'K', 'M', '1'};

// Per-tensor RNG stream so weight layout changes don't reshuffle everything.
SplitMix64 stream_for(std::uint64_t seed, std::string_view tag, int layer) {
  std::uint64_t h = fnv1a64(tag);
  h = fnv1a64(&layer, sizeof(layer), h);
  return SplitMix64(seed ^ h);
}

std::vector<float> random_tensor(std::uint64_t seed, std::string_view tag,
                                 int layer, std::size_t n, float scale) {
  SplitMix64 rng = stream_for(seed, tag, layer);
  std::vector<float> t(n);
  for (auto& v : t) v = rng.symmetric(scale);
  return t;
}

std::vector<float> gain_tensor(std::uint64_t seed, std::string_view tag,
                               int layer, std::size_t n) {
  SplitMix64 rng = stream_for(seed, tag, layer);
  std::vector<float> t(n);
  for (auto& v : t) v = 1.0f + rng.symmetric(0.05f);
  return t;
}

// Square matrix with an identity backbone plus noise. Used for the value and
// output projections so attention moves token embeddings through the
// residual stream instead of rotating them into arbitrary directions.
std::vector<float> identity_plus_tensor(std::uint64_t seed, std::string_view tag,
                                        int layer, int dim, float diag,
                                        float scale) {
  SplitMix64 rng = stream_for(seed, tag, layer);
  std::vector<float> t(std::size_t(dim) * dim);
  for (int r = 0; r < dim; ++r)
    for (int c = 0; c < dim; ++c)
      t[std::size_t(r) * dim + c] = (r == c ? diag : 0.0f) + rng.symmetric(scale);
  return t;
}

void check_finite(std::span<const float> v, const char* what) {
  for (float x : v)
    if (!std::isfinite(x)) throw std::invalid_argument(std::string(what) + " contains a non-finite value");
}

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <typename T>
void read_pod(std::istream& is, T& v) {
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
}

void write_tensor(std::ostream& os, const std::vector<float>& t) {
  os.write(reinterpret_cast<const char*>(t.data()),
           std::streamsize(t.size() * sizeof(float)));
}

void read_tensor(std::istream& is, std::vector<float>& t, std::size_t n) {
  t.resize(n);
  is.read(reinterpret_cast<char*>(t.data()), std::streamsize(n * sizeof(float)));
}

}  // namespace

void ModelSpec::validate() const {
  if (layer_count < 2) throw std::invalid_argument("layer_count must be >= 2");
  if (hidden_dim <= 0 || head_count <= 0 || max_context <= 0)
    throw std::invalid_argument("model dimensions must be positive");
  if (vocab_size < 4) throw std::invalid_argument("vocab_size must be >= 4");
  if (hidden_dim % head_count != 0)
    throw std::invalid_argument("hidden_dim must be divisible by head_count");
}

ModelSpec default_fixture_spec() {
  ModelSpec s;
  s.layer_count = 6;
  s.hidden_dim = 32;
  s.vocab_size = 64;
  s.head_count = 4;
  s.max_context = 160;
  s.seed = 0x00e57031;
  return s;
}

void validate_tokens(const TokenSequence& tokens, const ModelSpec& spec) {
  if (int(tokens.size()) > spec.max_context)
    throw std::invalid_argument("token sequence exceeds max_context");
  for (int t : tokens)
    if (t < 0 || t >= spec.vocab_size)
      throw std::invalid_argument("token id out of range");
}

FixtureModel::FixtureModel(const ModelSpec& spec) : spec_(spec) {
  spec_.validate();
  init_from_seed();
}

void FixtureModel::init_from_seed() {
  const int d = spec_.hidden_dim;
  const int v = spec_.vocab_size;
  const float ws = 1.2f / std::sqrt(float(d));

  embedding_ = random_tensor(spec_.seed, "embedding", 0, std::size_t(v) * d, 0.8f);
  // Letter-choice tokens get oversized embeddings so completion contrasts
  // carry a strong, well-separated residual direction.
  for (int t = 1; t <= 2 && t < v; ++t)
    for (int c = 0; c < d; ++c) embedding_[std::size_t(t) * d + c] *= 1.6f;
  position_ = random_tensor(spec_.seed, "position", 0,
                            std::size_t(spec_.max_context) * d, 0.15f);
  final_gain_ = gain_tensor(spec_.seed, "final_gain", 0, std::size_t(d));

  layers_.resize(spec_.layer_count);
  for (int l = 0; l < spec_.layer_count; ++l) {
    auto& lw = layers_[l];
    const std::size_t dd = std::size_t(d) * d;
    lw.attn_gain = gain_tensor(spec_.seed, "attn_gain", l, std::size_t(d));
    lw.wq = random_tensor(spec_.seed, "wq", l, dd, ws);
    lw.wk = random_tensor(spec_.seed, "wk", l, dd, ws);
    lw.wv = identity_plus_tensor(spec_.seed, "wv", l, d, 0.6f, ws * 0.25f);
    lw.wo = identity_plus_tensor(spec_.seed, "wo", l, d, 0.6f, ws * 0.25f);
    lw.mlp_gain = gain_tensor(spec_.seed, "mlp_gain", l, std::size_t(d));
    lw.w1 = random_tensor(spec_.seed, "w1", l, dd * 4, ws);
    lw.w2 = random_tensor(spec_.seed, "w2", l, dd * 4, ws * 0.5f);
  }
}

FixtureModel build_fixture_model(const ModelSpec& spec) {
  return FixtureModel(spec);
}

ForwardResult FixtureModel::forward(const TokenSequence& input,
                                    const HookPlan& plan) const {
  const int n = int(input.size());
  const int d = spec_.hidden_dim;
  const int v = spec_.vocab_size;
  const int heads = spec_.head_count;
  const int hd = d / heads;

  if (n == 0) throw std::invalid_argument("empty input");
  validate_tokens(input, spec_);

  auto position_ok = [&](PositionSelector where, int index) {
    switch (where) {
      case PositionSelector::kAll:
      case PositionSelector::kLast:
        return true;
      case PositionSelector::kIndex:
        return index >= 0 && index < n;
      case PositionSelector::kFrom:
        return index >= 0 && index <= n;  // == n means an empty range
    }
    return false;
  };
  std::vector<char> write_seen(spec_.layer_count, 0);
  for (const auto& w : plan.writes) {
    if (w.layer < 0 || w.layer >= spec_.layer_count)
      throw std::invalid_argument("hook write layer out of range");
    if (write_seen[w.layer]++)
      throw std::invalid_argument("multiple additive writes at one layer");
    if (int(w.delta.size()) != d)
      throw std::invalid_argument("hook write dimension mismatch");
    if (!position_ok(w.where, w.index))
      throw std::invalid_argument("hook write position out of range");
    check_finite(w.delta, "hook write");
  }
  for (const auto& r : plan.reads) {
    if (r.layer < 0 || r.layer >= spec_.layer_count)
      throw std::invalid_argument("hook read layer out of range");
    if (!position_ok(r.where, r.index))
      throw std::invalid_argument("hook read position out of range");
  }

  std::vector<float> x(std::size_t(n) * d);
  for (int i = 0; i < n; ++i) {
    const float* e = embedding_.data() + std::size_t(input[i]) * d;
    const float* p = position_.data() + std::size_t(i) * d;
    float* row = x.data() + std::size_t(i) * d;
    for (int c = 0; c < d; ++c) row[c] = e[c] + p[c];
  }

  std::vector<float> xn(std::size_t(n) * d), q(std::size_t(n) * d),
      k(std::size_t(n) * d), val(std::size_t(n) * d), att(std::size_t(n) * d),
      tmp(std::size_t(d) * 4);
  std::vector<float> scores(static_cast<std::size_t>(n), 0.0f);

  ForwardResult out;
  out.positions = n;
  out.vocab = v;

  auto each_position = [&](PositionSelector where, int index, auto&& fn) {
    switch (where) {
      case PositionSelector::kAll:
        for (int i = 0; i < n; ++i) fn(i);
        break;
      case PositionSelector::kLast:
        fn(n - 1);
        break;
      case PositionSelector::kIndex:
        fn(index);
        break;
      case PositionSelector::kFrom:
        for (int i = index; i < n; ++i) fn(i);
        break;
    }
  };

  for (int l = 0; l < spec_.layer_count; ++l) {
    const auto& lw = layers_[l];
    // attention
    for (int i = 0; i < n; ++i)
      kernels::rmsnorm(x.data() + std::size_t(i) * d, lw.attn_gain.data(),
                       xn.data() + std::size_t(i) * d, d);
    for (int i = 0; i < n; ++i) {
      const float* xi = xn.data() + std::size_t(i) * d;
      kernels::gemv(lw.wq.data(), xi, q.data() + std::size_t(i) * d, d, d);
      kernels::gemv(lw.wk.data(), xi, k.data() + std::size_t(i) * d, d, d);
      kernels::gemv(lw.wv.data(), xi, val.data() + std::size_t(i) * d, d, d);
    }
    const float inv_sqrt = 1.0f / std::sqrt(float(hd));
    for (int h = 0; h < heads; ++h) {
      const int off = h * hd;
      for (int i = 0; i < n; ++i) {
        const float* qi = q.data() + std::size_t(i) * d + off;
        for (int j = 0; j <= i; ++j) {
          const float* kj = k.data() + std::size_t(j) * d + off;
          float s = 0.0f;
          for (int c = 0; c < hd; ++c) s += qi[c] * kj[c];
          scores[j] = s * inv_sqrt;
        }
        kernels::softmax_inplace(scores.data(), i + 1);
        float* ai = att.data() + std::size_t(i) * d + off;
        std::fill(ai, ai + hd, 0.0f);
        for (int j = 0; j <= i; ++j) {
          const float* vj = val.data() + std::size_t(j) * d + off;
          const float w = scores[j];
          for (int c = 0; c < hd; ++c) ai[c] += w * vj[c];
        }
      }
    }
    for (int i = 0; i < n; ++i) {
      kernels::gemv(lw.wo.data(), att.data() + std::size_t(i) * d, tmp.data(), d, d);
      float* row = x.data() + std::size_t(i) * d;
      for (int c = 0; c < d; ++c) row[c] += tmp[c];
    }
    // mlp
    for (int i = 0; i < n; ++i) {
      float* row = x.data() + std::size_t(i) * d;
      kernels::rmsnorm(row, lw.mlp_gain.data(), xn.data(), d);
      kernels::gemv(lw.w1.data(), xn.data(), tmp.data(), 4 * d, d);
      for (int c = 0; c < 4 * d; ++c) tmp[c] = kernels::silu(tmp[c]);
      std::vector<float> mlp_out(d);
      kernels::gemv(lw.w2.data(), tmp.data(), mlp_out.data(), d, 4 * d);
      for (int c = 0; c < d; ++c) row[c] += mlp_out[c];
    }
    // hooks at this layer: write first, then capture
    for (const auto& w : plan.writes) {
      if (w.layer != l) continue;
      each_position(w.where, w.index, [&](int i) {
        float* row = x.data() + std::size_t(i) * d;
        for (int c = 0; c < d; ++c) row[c] += w.delta[c];
      });
    }
    for (const auto& r : plan.reads) {
      if (r.layer != l) continue;
      each_position(r.where, r.index, [&](int i) {
        ActivationSnapshot snap;
        snap.layer = l;
        snap.position = i;
        const float* row = x.data() + std::size_t(i) * d;
        snap.hidden.assign(row, row + d);
        out.snapshots.push_back(std::move(snap));
      });
    }
  }

  out.logits.resize(std::size_t(n) * v);
  for (int i = 0; i < n; ++i) {
    kernels::rmsnorm(x.data() + std::size_t(i) * d, final_gain_.data(), xn.data(), d);
    kernels::gemv(embedding_.data(), xn.data(),
                  out.logits.data() + std::size_t(i) * v, v, d);
  }
  return out;
}

std::vector<float> FixtureModel::logit_lens(std::span<const float> hidden) const {
  const int d = spec_.hidden_dim;
  if (int(hidden.size()) != d)
    throw std::invalid_argument("logit_lens: hidden dimension mismatch");
  check_finite(hidden, "logit_lens input");
  std::vector<float> z(spec_.vocab_size);
  if (lens_final_norm_) {
    std::vector<float> normed(d);
    kernels::rmsnorm(hidden.data(), final_gain_.data(), normed.data(), d);
    kernels::gemv(embedding_.data(), normed.data(), z.data(), spec_.vocab_size, d);
  } else {
    kernels::gemv(embedding_.data(), hidden.data(), z.data(), spec_.vocab_size, d);
  }
  return z;
}

void FixtureModel::save_checkpoint(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open checkpoint for writing: " + path.string());
  os.write(kMagic, sizeof(kMagic));
  write_pod(os, std::uint32_t(spec_.layer_count));
  write_pod(os, std::uint32_t(spec_.hidden_dim));
  write_pod(os, std::uint32_t(spec_.vocab_size));
  write_pod(os, std::uint32_t(spec_.head_count));
  write_pod(os, std::uint32_t(spec_.max_context));
  write_pod(os, std::uint64_t(spec_.seed));
  write_tensor(os, embedding_);
  write_tensor(os, position_);
  for (const auto& lw : layers_) {
    write_tensor(os, lw.attn_gain);
    write_tensor(os, lw.wq);
    write_tensor(os, lw.wk);
    write_tensor(os, lw.wv);
    write_tensor(os, lw.wo);
    write_tensor(os, lw.mlp_gain);
    write_tensor(os, lw.w1);
    write_tensor(os, lw.w2);
  }
  write_tensor(os, final_gain_);
  if (!os) throw DataError("checkpoint write failed: " + path.string());
}

FixtureModel FixtureModel::load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path.string());
  char magic[5];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw DataError("bad checkpoint magic: " + path.string());
  std::uint32_t lc, hd, vs, hc, mc;
  std::uint64_t seed;
  read_pod(is, lc);
  read_pod(is, hd);
  read_pod(is, vs);
  read_pod(is, hc);
  read_pod(is, mc);
  read_pod(is, seed);

  FixtureModel m;
  m.spec_.layer_count = int(lc);
  m.spec_.hidden_dim = int(hd);
  m.spec_.vocab_size = int(vs);
  m.spec_.head_count = int(hc);
  m.spec_.max_context = int(mc);
  m.spec_.seed = seed;
  m.spec_.validate();

  const std::size_t d = hd;
  read_tensor(is, m.embedding_, std::size_t(vs) * d);
  read_tensor(is, m.position_, std::size_t(mc) * d);
  m.layers_.resize(lc);
  for (auto& lw : m.layers_) {
    read_tensor(is, lw.attn_gain, d);
    read_tensor(is, lw.wq, d * d);
    read_tensor(is, lw.wk, d * d);
    read_tensor(is, lw.wv, d * d);
    read_tensor(is, lw.wo, d * d);
    read_tensor(is, lw.mlp_gain, d);
    read_tensor(is, lw.w1, d * d * 4);
    read_tensor(is, lw.w2, d * d * 4);
  }
  read_tensor(is, m.final_gain_, d);
  if (!is) throw DataError("truncated checkpoint: " + path.string());
  return m;
}

int greedy_next(std::span<const float> logits) {
  if (logits.empty()) throw std::invalid_argument("empty logits");
  int best = 0;
  for (int i = 0; i < int(logits.size()); ++i) {
    if (std::isnan(logits[i])) throw std::invalid_argument("NaN in logits");
    if (logits[i] > logits[best]) best = i;
  }
  return best;
}

TokenSequence greedy_generate(const Backend& model, const TokenSequence& prompt,
                              int max_new_tokens, const HookPlan& plan) {
  TokenSequence seq = prompt;
  for (int step = 0; step < max_new_tokens; ++step) {
    ForwardResult r = model.forward(seq, plan);
    const int next = greedy_next(r.logits_at(r.positions - 1));
    seq.push_back(next);
    if (next == kEosToken) break;
  }
  return seq;
}

}  // namespace enstom
