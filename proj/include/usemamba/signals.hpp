// Copyright 2025 USEMamba Contributors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <complex>
#include <optional>
#include <vector>

#include "usemamba/nd.hpp"

namespace usemamba {

// Rates the challenge setting cares about. Other positive rates are accepted
// by the signal ops; this list drives SFI compatibility checks and tests.
inline constexpr int kSupportedRates[] = {8000, 16000, 22050, 24000, 32000, 44100, 48000};

struct Waveform {
  std::vector<double> samples;  // nominally in [-1, 1]
  int rate_hz = 0;

  double duration_s() const {
    return rate_hz > 0 ? static_cast<double>(samples.size()) / rate_hz : 0.0;
  }
};

struct StftConfig {
  double frame_ms = 32.0;
  double hop_ms = 8.0;
  double compression_exponent = 0.3;  // c in (0, 1]
};

struct ComplexSpectrogram {
  // Row-major (frame, bin); bins = n_fft/2 + 1.
  std::vector<std::complex<double>> data;
  int frames = 0;
  int bins = 0;
  double frame_ms = 0.0;
  double hop_ms = 0.0;
  int rate_hz = 0;
  int n_fft = 0;
  int hop = 0;

  std::complex<double>& at(int t, int f) { return data[static_cast<size_t>(t) * bins + f]; }
  std::complex<double> at(int t, int f) const { return data[static_cast<size_t>(t) * bins + f]; }
};

struct MagPhase {
  NdArray mag;    // (frames, bins), >= 0
  NdArray phase;  // (frames, bins), wrapped to (-pi, pi]
};

// Sampling-frequency-independent STFT/iSTFT. Window and hop are fixed in
// milliseconds; sample counts are derived per rate, with n_fft rounded to the
// nearest even integer (rejecting rates that would be more than half a sample
// off). Analysis uses a periodic Hann window and reflection center padding;
// synthesis divides by the accumulated squared window, which reconstructs
// exactly for any hop <= frame.
class SfiStft {
 public:
  SfiStft(const StftConfig& cfg, int rate_hz);

  int n_fft() const { return n_fft_; }
  int hop() const { return hop_; }
  int bins() const { return n_fft_ / 2 + 1; }
  int rate_hz() const { return rate_; }
  double effective_frame_ms() const { return 1000.0 * n_fft_ / rate_; }
  int frame_count(std::size_t n_samples) const;

  ComplexSpectrogram analyze(const Waveform& wave) const;
  Waveform synthesize(const ComplexSpectrogram& spec, int target_len) const;

  const std::vector<double>& window() const { return window_; }

 private:
  StftConfig cfg_;
  int rate_;
  int n_fft_;
  int hop_;
  std::vector<double> window_;
};

ComplexSpectrogram sfi_stft(const Waveform& wave, const StftConfig& cfg);
Waveform sfi_istft(const ComplexSpectrogram& spec, int target_len);

// mag = |spec|^c, phase = arg(spec) with the zero-bin phase defined as 0.
MagPhase compress(const ComplexSpectrogram& spec, double c);
// data = mag^(1/c) * exp(i*phase) back on the geometry of `like`.
ComplexSpectrogram decompress(const MagPhase& mp, double c, const ComplexSpectrogram& like);

// Band-limited rational resampling (polyphase Kaiser-windowed sinc).
// Output length = round(len * new_rate / old_rate). Identity rate returns a
// bit-identical copy.
Waveform resample(const Waveform& wave, int new_rate);

// Periodic Hann of length n.
std::vector<double> hann_window(int n);

double wrap_phase(double x);  // into (-pi, pi]

}  // namespace usemamba
