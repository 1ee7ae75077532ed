#pragma once

#include <cmath>

namespace enstom::kernels {

// Global switch between the OpenMP kernels and the serial reference path.
// Both paths accumulate each output row serially, so results are bit-equal
// for any thread count; tests assert that.
bool& parallel_enabled();

// y = W x with W row-major (rows x cols).
void gemv(const float* w, const float* x, float* y, int rows, int cols);
void gemv_ref(const float* w, const float* x, float* y, int rows, int cols);
void gemv_omp(const float* w, const float* x, float* y, int rows, int cols);

// RMS norm with learned gain: out_i = gain_i * x_i / rms(x).
void rmsnorm(const float* x, const float* gain, float* out, int n);

// In-place numerically stable softmax.
void softmax_inplace(float* x, int n);

inline float silu(float x) { return x / (1.0f + std::exp(-x)); }

}  // namespace enstom::kernels
