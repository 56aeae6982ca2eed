// Copyright 2025 USEMamba Contributors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "usemamba/fft.hpp"

#include <fftw3.h>

#include <cstring>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>

namespace usemamba {

namespace {

struct PlanEntry {
  int n = 0;
  double* real_buf = nullptr;
  fftw_complex* cplx_buf = nullptr;
  fftw_plan fwd = nullptr;
  fftw_plan inv = nullptr;
  std::mutex exec_mu;

  explicit PlanEntry(int n_in) : n(n_in) {
    real_buf = fftw_alloc_real(static_cast<size_t>(n));
    cplx_buf = fftw_alloc_complex(static_cast<size_t>(n / 2 + 1));
    if (!real_buf || !cplx_buf) throw std::bad_alloc();
    fwd = fftw_plan_dft_r2c_1d(n, real_buf, cplx_buf, FFTW_ESTIMATE);
    inv = fftw_plan_dft_c2r_1d(n, cplx_buf, real_buf, FFTW_ESTIMATE);
    if (!fwd || !inv) throw std::runtime_error("fftw: plan creation failed");
  }
  ~PlanEntry() {
    if (fwd) fftw_destroy_plan(fwd);
    if (inv) fftw_destroy_plan(inv);
    fftw_free(real_buf);
    fftw_free(cplx_buf);
  }
  PlanEntry(const PlanEntry&) = delete;
  PlanEntry& operator=(const PlanEntry&) = delete;
};

std::mutex g_cache_mu;
std::map<int, std::unique_ptr<PlanEntry>>& plan_cache() {
  static std::map<int, std::unique_ptr<PlanEntry>> cache;
  return cache;
}

PlanEntry* get_plan(int n) {
  std::lock_guard<std::mutex> lk(g_cache_mu);
  auto& cache = plan_cache();
  auto it = cache.find(n);
  if (it == cache.end()) it = cache.emplace(n, std::make_unique<PlanEntry>(n)).first;
  return it->second.get();
}

}  // namespace

RealFft::RealFft(int n) : n_(n) {
  if (n < 2) throw std::invalid_argument("RealFft: size must be >= 2");
  impl_ = get_plan(n);
}

void RealFft::forward(const double* in, std::complex<double>* out) const {
  auto* p = static_cast<PlanEntry*>(impl_);
  std::lock_guard<std::mutex> lk(p->exec_mu);
  std::memcpy(p->real_buf, in, sizeof(double) * static_cast<size_t>(n_));
  fftw_execute(p->fwd);
  std::memcpy(reinterpret_cast<double*>(out), p->cplx_buf,
              sizeof(fftw_complex) * static_cast<size_t>(bins()));
}

void RealFft::inverse(const std::complex<double>* in, double* out) const {
  auto* p = static_cast<PlanEntry*>(impl_);
  std::lock_guard<std::mutex> lk(p->exec_mu);
  std::memcpy(p->cplx_buf, reinterpret_cast<const double*>(in),
              sizeof(fftw_complex) * static_cast<size_t>(bins()));
  fftw_execute(p->inv);
  std::memcpy(out, p->real_buf, sizeof(double) * static_cast<size_t>(n_));
}

}  // namespace usemamba
