// Copyright 2025 USEMamba Contributors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "usemamba/signals.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "usemamba/fft.hpp"

namespace usemamba {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Reflect (mirror without edge repeat) an index into [0, n).
std::size_t reflect_index(long long i, long long n) {
  if (n == 1) return 0;
  const long long period = 2 * (n - 1);
  long long m = i % period;
  if (m < 0) m += period;
  if (m >= n) m = period - m;
  return static_cast<std::size_t>(m);
}

double bessel_i0(double x) {
  // Series expansion; converges fast for the Kaiser betas used here.
  double sum = 1.0, term = 1.0;
  const double half_x = x / 2.0;
  for (int k = 1; k < 64; ++k) {
    term *= (half_x / k) * (half_x / k);
    sum += term;
    if (term < 1e-18 * sum) break;
  }
  return sum;
}

}  // namespace

std::vector<double> hann_window(int n) {
  std::vector<double> w(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) w[i] = 0.5 * (1.0 - std::cos(2.0 * kPi * i / n));
  return w;
}

double wrap_phase(double x) {
  double y = std::remainder(x, 2.0 * kPi);  // (-pi, pi] up to the boundary
  if (y <= -kPi) y += 2.0 * kPi;
  return y;
}

SfiStft::SfiStft(const StftConfig& cfg, int rate_hz) : cfg_(cfg), rate_(rate_hz) {
  require(rate_hz > 0, "SfiStft: rate must be positive");
  require(cfg.frame_ms > 0 && cfg.hop_ms > 0, "SfiStft: frame/hop must be positive");
  require(cfg.hop_ms <= cfg.frame_ms, "SfiStft: hop_ms must not exceed frame_ms");

  const double exact = cfg.frame_ms * rate_hz / 1000.0;
  // Nearest even frame length. Rounding to even shifts the effective frame
  // duration; tolerate up to 0.1% (44.1/22.05 kHz land at 0.057%) and reject
  // anything coarser, such as frame lengths stuck on an odd sample count.
  const long long cand = 2 * std::llround(exact / 2.0);
  if (cand < 2 || std::abs(exact - static_cast<double>(cand)) > 0.001 * exact) {
    throw std::invalid_argument(
        "SfiStft: frame_ms=" + std::to_string(cfg.frame_ms) + " at rate " +
        std::to_string(rate_hz) + " Hz gives " + std::to_string(exact) +
        " samples, which has no even frame length within 0.1%");
  }
  n_fft_ = static_cast<int>(cand);
  hop_ = static_cast<int>(std::llround(cfg.hop_ms * rate_hz / 1000.0));
  require(hop_ >= 1, "SfiStft: hop rounds to zero samples at this rate");
  require(hop_ <= n_fft_, "SfiStft: hop exceeds frame length");
  window_ = hann_window(n_fft_);

  // Overlap coverage check: the squared window sum must stay bounded away
  // from zero over a steady-state hop period, or synthesis cannot invert.
  std::vector<double> cover(static_cast<std::size_t>(hop_), 0.0);
  for (int start = -n_fft_; start <= 0; start += hop_) {
    for (int i = 0; i < n_fft_; ++i) {
      const int pos = start + i;
      if (pos >= 0 && pos < hop_) cover[static_cast<std::size_t>(pos)] += window_[i] * window_[i];
    }
  }
  const double cmin = *std::min_element(cover.begin(), cover.end());
  const double cmax = *std::max_element(cover.begin(), cover.end());
  if (!(cmin > 1e-8 * cmax)) {
    throw std::invalid_argument("SfiStft: window/hop combination violates the overlap condition");
  }
}

int SfiStft::frame_count(std::size_t n_samples) const {
  // Center padding by n_fft/2 on both sides: 1 + floor(len / hop).
  return 1 + static_cast<int>(n_samples / static_cast<std::size_t>(hop_));
}

ComplexSpectrogram SfiStft::analyze(const Waveform& wave) const {
  require(!wave.samples.empty(), "sfi_stft: empty waveform");
  require(wave.rate_hz == rate_, "sfi_stft: waveform rate does not match config rate");
  for (double s : wave.samples) {
    if (!std::isfinite(s)) throw std::invalid_argument("sfi_stft: non-finite sample");
  }

  const long long len = static_cast<long long>(wave.samples.size());
  const int pad = n_fft_ / 2;
  const int frames = frame_count(wave.samples.size());
  const int nb = bins();

  ComplexSpectrogram spec;
  spec.frames = frames;
  spec.bins = nb;
  spec.frame_ms = cfg_.frame_ms;
  spec.hop_ms = cfg_.hop_ms;
  spec.rate_hz = rate_;
  spec.n_fft = n_fft_;
  spec.hop = hop_;
  spec.data.resize(static_cast<std::size_t>(frames) * nb);

  RealFft fft(n_fft_);
  std::vector<double> seg(static_cast<std::size_t>(n_fft_));
  for (int t = 0; t < frames; ++t) {
    const long long start = static_cast<long long>(t) * hop_ - pad;
    for (int i = 0; i < n_fft_; ++i) {
      seg[i] = wave.samples[reflect_index(start + i, len)] * window_[i];
    }
    fft.forward(seg.data(), &spec.data[static_cast<std::size_t>(t) * nb]);
  }
  return spec;
}

Waveform SfiStft::synthesize(const ComplexSpectrogram& spec, int target_len) const {
  require(spec.n_fft == n_fft_ && spec.hop == hop_, "sfi_istft: geometry mismatch");
  require(spec.bins == bins(), "sfi_istft: bin count mismatch");
  require(spec.frames >= 1, "sfi_istft: empty spectrogram");
  const long long analyzable = static_cast<long long>(spec.frames - 1) * hop_;
  require(std::llabs(static_cast<long long>(target_len) - analyzable) <= hop_,
          "sfi_istft: target_len not within one hop of the analyzable length");

  const int pad = n_fft_ / 2;
  const std::size_t buf_len = static_cast<std::size_t>(analyzable) + n_fft_;
  std::vector<double> acc(buf_len, 0.0), wsq(buf_len, 0.0);

  RealFft fft(n_fft_);
  std::vector<double> seg(static_cast<std::size_t>(n_fft_));
  const double inv_n = 1.0 / n_fft_;
  for (int t = 0; t < spec.frames; ++t) {
    fft.inverse(&spec.data[static_cast<std::size_t>(t) * bins()], seg.data());
    const std::size_t off = static_cast<std::size_t>(t) * hop_;
    for (int i = 0; i < n_fft_; ++i) {
      acc[off + i] += seg[i] * inv_n * window_[i];
      wsq[off + i] += window_[i] * window_[i];
    }
  }

  Waveform out;
  out.rate_hz = rate_;
  out.samples.assign(static_cast<std::size_t>(std::max(target_len, 0)), 0.0);
  for (int i = 0; i < target_len; ++i) {
    const std::size_t pos = static_cast<std::size_t>(pad) + i;
    if (pos < buf_len && wsq[pos] > 1e-12) out.samples[i] = acc[pos] / wsq[pos];
  }
  return out;
}

ComplexSpectrogram sfi_stft(const Waveform& wave, const StftConfig& cfg) {
  return SfiStft(cfg, wave.rate_hz).analyze(wave);
}

Waveform sfi_istft(const ComplexSpectrogram& spec, int target_len) {
  StftConfig cfg;
  cfg.frame_ms = spec.frame_ms;
  cfg.hop_ms = spec.hop_ms;
  return SfiStft(cfg, spec.rate_hz).synthesize(spec, target_len);
}

MagPhase compress(const ComplexSpectrogram& spec, double c) {
  require(c > 0.0 && c <= 1.0, "compress: exponent must be in (0, 1]");
  MagPhase mp;
  mp.mag = NdArray({spec.frames, spec.bins});
  mp.phase = NdArray({spec.frames, spec.bins});
  for (std::size_t i = 0; i < spec.data.size(); ++i) {
    const double m = std::abs(spec.data[i]);
    if (m == 0.0) {
      mp.mag.v[i] = 0.0;
      mp.phase.v[i] = 0.0;  // zero-bin phase defined as 0
    } else {
      mp.mag.v[i] = (c == 1.0) ? m : std::pow(m, c);
      double ph = std::atan2(spec.data[i].imag(), spec.data[i].real());
      if (ph <= -kPi) ph = kPi;
      mp.phase.v[i] = ph;
    }
  }
  return mp;
}

ComplexSpectrogram decompress(const MagPhase& mp, double c, const ComplexSpectrogram& like) {
  require(c > 0.0 && c <= 1.0, "decompress: exponent must be in (0, 1]");
  require(mp.mag.same_shape(mp.phase), "decompress: mag/phase shape mismatch");
  require(mp.mag.ndim() == 2 && mp.mag.dim(0) == like.frames && mp.mag.dim(1) == like.bins,
          "decompress: shape does not match spectrogram geometry");
  ComplexSpectrogram out = like;
  const double inv_c = 1.0 / c;
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    const double m = mp.mag.v[i];
    const double mag = (m == 0.0) ? 0.0 : ((c == 1.0) ? m : std::pow(m, inv_c));
    out.data[i] = std::complex<double>(mag * std::cos(mp.phase.v[i]),
                                       mag * std::sin(mp.phase.v[i]));
  }
  return out;
}

Waveform resample(const Waveform& wave, int new_rate) {
  require(wave.rate_hz > 0 && new_rate > 0, "resample: rates must be positive");
  if (new_rate == wave.rate_hz) return wave;
  if (wave.samples.empty()) return Waveform{{}, new_rate};

  const long long old_rate = wave.rate_hz;
  const long long g = std::gcd<long long>(old_rate, new_rate);
  const long long p = new_rate / g;  // upsample factor
  const long long q = old_rate / g;  // downsample factor

  // Kaiser-windowed sinc lowpass at the p-upsampled rate. Passband to
  // 0.45*min(rates), stopband from 0.50*min(rates), ~80 dB attenuation.
  const double up_rate = static_cast<double>(old_rate) * p;
  const double f_min = static_cast<double>(std::min<long long>(old_rate, new_rate));
  const double fc = 0.475 * f_min;
  const double beta = 7.857;
  long long taps = static_cast<long long>(std::ceil(100.4 * up_rate / f_min));
  if (taps % 2 == 0) ++taps;  // odd length, integer group delay
  const long long mid = (taps - 1) / 2;

  std::vector<double> h(static_cast<std::size_t>(taps));
  const double i0_beta = bessel_i0(beta);
  for (long long i = 0; i < taps; ++i) {
    const double t = static_cast<double>(i - mid);
    const double x = 2.0 * fc / up_rate * t;
    const double sinc = (t == 0.0) ? 1.0 : std::sin(kPi * x) / (kPi * x);
    const double r = t / static_cast<double>(mid);
    const double win = bessel_i0(beta * std::sqrt(std::max(0.0, 1.0 - r * r))) / i0_beta;
    h[static_cast<std::size_t>(i)] = 2.0 * fc / up_rate * sinc * win;
  }
  // Per-phase DC normalization keeps constants exact through the resampler.
  for (long long r = 0; r < p; ++r) {
    double s = 0.0;
    for (long long i = r; i < taps; i += p) s += h[static_cast<std::size_t>(i)];
    if (s != 0.0) {
      for (long long i = r; i < taps; i += p) h[static_cast<std::size_t>(i)] /= s;
    }
  }

  const long long in_len = static_cast<long long>(wave.samples.size());
  const long long out_len = std::llround(static_cast<double>(in_len) * new_rate / old_rate);

  Waveform out;
  out.rate_hz = new_rate;
  out.samples.assign(static_cast<std::size_t>(out_len), 0.0);
  for (long long m = 0; m < out_len; ++m) {
    const long long u = m * q + mid;          // center tap position, upsampled grid
    const long long r = u % p;                // polyphase branch
    const long long base = (u - r) / p;       // input index of the k=0 tap
    double acc = 0.0;
    for (long long i = r, k = 0; i < taps; i += p, ++k) {
      const long long xi = base - k;
      if (xi >= 0 && xi < in_len) acc += h[static_cast<std::size_t>(i)] * wave.samples[static_cast<std::size_t>(xi)];
    }
    out.samples[static_cast<std::size_t>(m)] = acc;
  }
  return out;
}

}  // namespace usemamba
