#include "enstom/steering.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "enstom/base64.hpp"

namespace enstom {

namespace {

double euclidean_norm(std::span<const float> v) {
  double ss = 0.0;
  for (float x : v) ss += double(x) * double(x);
  return std::sqrt(ss);
}

}  // namespace

RawPairVector extract_pair_vector(const Backend& model, const ContrastPair& pair,
                                  int layer) {
  const auto& spec = model.spec();
  if (layer < 0 || layer >= spec.layer_count)
    throw std::invalid_argument("extraction layer out of range");
  if (int(pair.common_prompt.size()) + 1 > spec.max_context)
    throw std::invalid_argument("contrast pair exceeds context");
  if (pair.positive_completion == pair.negative_completion)
    throw std::invalid_argument("contrast pair completions must differ");

  HookPlan plan;
  plan.reads.push_back({layer, PositionSelector::kLast, 0});

  auto hidden_for = [&](int completion) {
    TokenSequence seq = pair.common_prompt;
    seq.push_back(completion);
    ForwardResult r = model.forward(seq, plan);
    return r.snapshots.at(0).hidden;
  };

  const std::vector<float> hp = hidden_for(pair.positive_completion);
  const std::vector<float> hn = hidden_for(pair.negative_completion);

  RawPairVector raw;
  raw.pair_id = pair.pair_id;
  raw.layer = layer;
  raw.vec.resize(hp.size());
  for (std::size_t i = 0; i < hp.size(); ++i) raw.vec[i] = hp[i] - hn[i];
  raw.norm = euclidean_norm(raw.vec);
  return raw;
}

SteeringVector aggregate_steering_vector(std::vector<RawPairVector> raws) {
  if (raws.empty()) throw std::invalid_argument("no raw pair vectors");
  const int layer = raws.front().layer;
  const std::size_t dim = raws.front().vec.size();
  std::uint64_t digest = 0xcbf29ce484222325ULL;

  std::sort(raws.begin(), raws.end(),
            [](const RawPairVector& a, const RawPairVector& b) {
              return a.pair_id < b.pair_id;
            });

  std::vector<const RawPairVector*> live;
  double norm_sum = 0.0;
  for (const auto& r : raws) {
    if (r.layer != layer) throw std::invalid_argument("mixed layers in aggregation");
    if (r.vec.size() != dim) throw std::invalid_argument("mixed dimensions in aggregation");
    digest = fnv1a64(r.pair_id.data(), r.pair_id.size(), digest);
    if (r.norm == 0.0) continue;  // degenerate pair, no direction
    live.push_back(&r);
    norm_sum += r.norm;
  }
  if (live.empty()) throw std::invalid_argument("all raw pair vectors are zero");

  const double mean_norm = norm_sum / double(live.size());
  std::vector<double> acc(dim, 0.0);
  for (const auto* r : live) {
    const double scale = mean_norm / r->norm;
    for (std::size_t i = 0; i < dim; ++i) acc[i] += double(r->vec[i]) * scale;
  }

  SteeringVector v;
  v.layer = layer;
  v.pair_count = int(live.size());
  v.mean_norm = mean_norm;
  v.source_digest = hex64(digest);
  v.vec.resize(dim);
  for (std::size_t i = 0; i < dim; ++i)
    v.vec[i] = float(acc[i] / double(live.size()));
  return v;
}

std::vector<float> apply_steering(std::span<const float> hidden, double coefficient,
                                  const SteeringVector& v) {
  if (hidden.size() != v.vec.size())
    throw std::invalid_argument("apply_steering dimension mismatch");
  if (!std::isfinite(coefficient))
    throw std::invalid_argument("non-finite steering coefficient");
  std::vector<float> out(hidden.begin(), hidden.end());
  if (coefficient == 0.0) return out;  // bit-exact no-op
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] += float(coefficient) * v.vec[i];
  return out;
}

HookWrite steering_write(const SteeringVector& v, double coefficient, int steer_layer,
                         PositionSelector where, int index) {
  HookWrite w;
  w.layer = steer_layer;
  w.where = where;
  w.index = index;
  w.delta.resize(v.vec.size());
  for (std::size_t i = 0; i < v.vec.size(); ++i)
    w.delta[i] = float(coefficient) * v.vec[i];
  return w;
}

std::vector<LayerVariance> vector_statistics(
    const std::map<int, std::vector<RawPairVector>>& raws_by_layer) {
  std::vector<LayerVariance> out;
  for (const auto& [layer, raws] : raws_by_layer) {
    if (raws.empty()) throw std::invalid_argument("empty raw list for layer");
    const std::size_t dim = raws.front().vec.size();
    const double k = double(raws.size());

    double var_sum = 0.0;
    for (std::size_t c = 0; c < dim; ++c) {
      double mean = 0.0;
      for (const auto& r : raws) mean += double(r.vec[c]);
      mean /= k;
      double ss = 0.0;
      for (const auto& r : raws) {
        const double d = double(r.vec[c]) - mean;
        ss += d * d;
      }
      var_sum += ss / k;  // population variance
    }

    double l2 = 0.0;
    for (const auto& r : raws) l2 += euclidean_norm(r.vec);
    l2 /= k;

    LayerVariance row;
    row.layer = layer;
    row.var = var_sum / double(dim);
    row.l2 = l2;
    row.ratio = l2 > 0.0 ? std::sqrt(row.var) / l2 : 0.0;
    out.push_back(row);
  }
  return out;
}

void write_variance_csv(const std::filesystem::path& path,
                        const std::vector<LayerVariance>& rows) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  os << "layer,var,l2,ratio\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g\n", r.layer, r.var, r.l2,
                  r.ratio);
    os << buf;
  }
}

void save_steering_vector(const std::filesystem::path& path, const SteeringVector& v) {
  nlohmann::json j;
  j["format"] = "enstom-sv/1";
  j["layer"] = v.layer;
  j["pair_count"] = v.pair_count;
  j["mean_norm"] = v.mean_norm;
  j["source_digest"] = v.source_digest;
  j["dims"] = v.vec.size();
  j["data"] = base64_encode(v.vec.data(), v.vec.size() * sizeof(float));
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  os << j.dump(2) << "\n";
}

SteeringVector load_steering_vector(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad steering vector file " + path.string() + ": " + e.what());
  }
  if (j.value("format", "") != "enstom-sv/1")
    throw DataError("unsupported steering vector format in " + path.string());
  SteeringVector v;
  v.layer = j.at("layer").get<int>();
  v.pair_count = j.at("pair_count").get<int>();
  v.mean_norm = j.at("mean_norm").get<double>();
  v.source_digest = j.at("source_digest").get<std::string>();
  const std::size_t dims = j.at("dims").get<std::size_t>();
  const auto bytes = base64_decode(j.at("data").get<std::string>());
  if (bytes.size() != dims * sizeof(float))
    throw DataError("steering vector payload size mismatch in " + path.string());
  v.vec.resize(dims);
  std::memcpy(v.vec.data(), bytes.data(), bytes.size());
  return v;
}

}  // namespace enstom
