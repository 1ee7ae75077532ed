// Compares the OpenMP gemv kernel against the serial reference, plus a
// whole-forward-pass timing with parallelism on and off.
#include <chrono>
#include <cstdio>
#include <vector>

#include "enstom/kernels.hpp"
#include "enstom/model.hpp"
#include "enstom/rng.hpp"

using namespace enstom;
using clk = std::chrono::steady_clock;

namespace {
double ms_since(clk::time_point t0) {
  return std::chrono::duration<double, std::milli>(clk::now() - t0).count();
}
}  // namespace

int main() {
  for (int dim : {64, 256, 1024, 2048}) {
    const int rows = dim, cols = dim;
    std::vector<float> w(std::size_t(rows) * cols), x(cols), y(rows), yr(rows);
    SplitMix64 rng(0x9e3779b97f4a7c15ULL + dim);
    for (auto& v : w) v = rng.symmetric(1.0f);
    for (auto& v : x) v = rng.symmetric(1.0f);

    const int reps = 64 * (2048 / dim);

    kernels::parallel_enabled() = false;
    auto t0 = clk::now();
    for (int r = 0; r < reps; ++r) kernels::gemv_ref(w.data(), x.data(), yr.data(), rows, cols);
    const double serial_ms = ms_since(t0) / reps;

    kernels::parallel_enabled() = true;
    t0 = clk::now();
    for (int r = 0; r < reps; ++r) kernels::gemv(w.data(), x.data(), y.data(), rows, cols);
    const double omp_ms = ms_since(t0) / reps;

    const bool same = y == yr;
    std::printf("gemv %5dx%-5d serial %8.4f ms  omp %8.4f ms  speedup %5.2fx  bitexact=%s\n",
                dim, dim, serial_ms, omp_ms, serial_ms / omp_ms, same ? "yes" : "NO");
  }

  const ModelSpec spec = default_fixture_spec();
  const FixtureModel model(spec);
  TokenSequence prompt(64);
  for (std::size_t i = 0; i < prompt.size(); ++i) prompt[i] = 3 + int(i % 50);

  for (bool parallel : {false, true}) {
    kernels::parallel_enabled() = parallel;
    const auto t0 = clk::now();
    const int reps = 50;
    for (int r = 0; r < reps; ++r) (void)model.forward(prompt, {});
    std::printf("forward (64 tokens) %s: %8.4f ms\n", parallel ? "omp   " : "serial",
                ms_since(t0) / reps);
  }
  return 0;
}
