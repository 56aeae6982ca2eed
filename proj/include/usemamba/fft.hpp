// Copyright 2025 USEMamba Contributors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <complex>
#include <vector>

namespace usemamba {

// One-sided real FFT of arbitrary size backed by FFTW. Unnormalized in both
// directions: inverse(forward(x)) == n * x. Thread-safe; plans are cached
// per size and execution is serialized per plan.
class RealFft {
 public:
  explicit RealFft(int n);

  int size() const { return n_; }
  int bins() const { return n_ / 2 + 1; }

  // in: n real samples -> out: n/2+1 complex bins, X_k = sum_t x_t e^{-i2pi kt/n}
  void forward(const double* in, std::complex<double>* out) const;
  // in: n/2+1 complex bins (Hermitian half) -> out: n real samples, unnormalized
  void inverse(const std::complex<double>* in, double* out) const;

 private:
  int n_;
  void* impl_;  // shared plan entry owned by the global cache
};

}  // namespace usemamba
