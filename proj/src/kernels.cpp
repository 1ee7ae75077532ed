#include "enstom/kernels.hpp"

namespace enstom::kernels {

bool& parallel_enabled() {
  static bool enabled = true;
  return enabled;
}

void gemv_ref(const float* w, const float* x, float* y, int rows, int cols) {
  for (int r = 0; r < rows; ++r) {
    const float* wr = w + std::size_t(r) * cols;
    float sum = 0.0f;
    for (int c = 0; c < cols; ++c) sum += wr[c] * x[c];
    y[r] = sum;
  }
}

void gemv_omp(const float* w, const float* x, float* y, int rows, int cols) {
#pragma omp parallel for schedule(static) if (std::size_t(rows) * cols > 16384)
  for (int r = 0; r < rows; ++r) {
    const float* wr = w + std::size_t(r) * cols;
    float sum = 0.0f;
    for (int c = 0; c < cols; ++c) sum += wr[c] * x[c];
    y[r] = sum;
  }
}

void gemv(const float* w, const float* x, float* y, int rows, int cols) {
  if (parallel_enabled())
    gemv_omp(w, x, y, rows, cols);
  else
    gemv_ref(w, x, y, rows, cols);
}

void rmsnorm(const float* x, const float* gain, float* out, int n) {
  float ss = 0.0f;
  for (int i = 0; i < n; ++i) ss += x[i] * x[i];
  const float inv = 1.0f / std::sqrt(ss / float(n) + 1e-6f);
  for (int i = 0; i < n; ++i) out[i] = gain[i] * x[i] * inv;
}

void softmax_inplace(float* x, int n) {
  float mx = x[0];
  for (int i = 1; i < n; ++i) mx = x[i] > mx ? x[i] : mx;
  float sum = 0.0f;
  for (int i = 0; i < n; ++i) {
    x[i] = std::exp(x[i] - mx);
    sum += x[i];
  }
  const float inv = 1.0f / sum;
  for (int i = 0; i < n; ++i) x[i] *= inv;
}

}  // namespace enstom::kernels
