// Copyright 2025 USEMamba Contributors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <complex>
#include <cstdio>
#include <random>

#include "usemamba/signals.hpp"
#include "usemamba/wav.hpp"

using namespace usemamba;

namespace {

constexpr double kPi = 3.14159265358979323846;

Waveform random_wave(int rate, double seconds, uint64_t seed) {
  std::mt19937_64 eng(seed);
  std::uniform_real_distribution<double> d(-0.5, 0.5);
  Waveform w;
  w.rate_hz = rate;
  w.samples.resize(static_cast<std::size_t>(rate * seconds));
  for (auto& s : w.samples) s = d(eng);
  return w;
}

Waveform sine_wave(int rate, double freq, double seconds, double amp = 0.5) {
  Waveform w;
  w.rate_hz = rate;
  w.samples.resize(static_cast<std::size_t>(rate * seconds));
  for (std::size_t i = 0; i < w.samples.size(); ++i) {
    w.samples[i] = amp * std::sin(2.0 * kPi * freq * static_cast<double>(i) / rate);
  }
  return w;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("sfi geometry at 16 kHz: 32/8 ms gives n_fft=512, hop=128, 126 frames") {
  SfiStft stft(StftConfig{}, 16000);
  CHECK(stft.n_fft() == 512);
  CHECK(stft.hop() == 128);
  CHECK(stft.frame_count(16000) == 126);
}

TEST_CASE("sfi geometry at 48 kHz matches the 16 kHz frame count") {
  SfiStft s16(StftConfig{}, 16000);
  SfiStft s48(StftConfig{}, 48000);
  CHECK(s48.n_fft() == 1536);
  CHECK(s48.hop() == 384);
  CHECK(s48.frame_count(48000) == s16.frame_count(16000));
}

TEST_CASE("sfi frame-geometry invariance across all supported rates") {
  int fmin = 1 << 30, fmax = 0;
  for (int rate : kSupportedRates) {
    SfiStft stft(StftConfig{}, rate);
    const int frames = stft.frame_count(static_cast<std::size_t>(rate));  // 1 s of audio
    fmin = std::min(fmin, frames);
    fmax = std::max(fmax, frames);
    CHECK(stft.n_fft() % 2 == 0);
  }
  CHECK(fmax - fmin <= 1);
}

TEST_CASE("incompatible frame duration is rejected with the offending pair named") {
  StftConfig cfg;
  cfg.frame_ms = 20.0;  // 441 samples at 22050 Hz: odd, 1.0 from the nearest even
  CHECK_THROWS_WITH_AS(SfiStft(cfg, 22050), doctest::Contains("22050"), std::invalid_argument);
  CHECK_NOTHROW(SfiStft(cfg, 16000));
}

TEST_CASE("hop larger than frame is a construction error") {
  StftConfig cfg;
  cfg.frame_ms = 8.0;
  cfg.hop_ms = 32.0;
  CHECK_THROWS_AS(SfiStft(cfg, 16000), std::invalid_argument);
}

TEST_CASE("bin-centered sine concentrates energy in three bins") {
  const int rate = 16000;
  SfiStft stft(StftConfig{}, rate);
  const int k = 37;
  const double freq = static_cast<double>(k) * rate / stft.n_fft();
  Waveform w = sine_wave(rate, freq, 1.0);
  ComplexSpectrogram spec = stft.analyze(w);

  const int t = spec.frames / 2;  // interior frame, away from padding
  double total = 0.0, central = 0.0;
  for (int f = 0; f < spec.bins; ++f) {
    const double e = std::norm(spec.at(t, f));
    total += e;
    if (std::abs(f - k) <= 1) central += e;
  }
  CHECK(central / total > 0.95);
}

TEST_CASE("istft(stft(x)) round trip at every supported rate") {
  for (int rate : kSupportedRates) {
    Waveform w = random_wave(rate, 1.0, 1000 + rate);
    ComplexSpectrogram spec = sfi_stft(w, StftConfig{});
    Waveform rec = sfi_istft(spec, static_cast<int>(w.samples.size()));
    CHECK(max_abs_diff(w.samples, rec.samples) < 1e-6);
  }
}

TEST_CASE("white-noise round trip at 44.1 kHz has tiny relative error") {
  Waveform w = random_wave(44100, 0.7, 7);
  ComplexSpectrogram spec = sfi_stft(w, StftConfig{});
  Waveform rec = sfi_istft(spec, static_cast<int>(w.samples.size()));
  double err = 0.0, ref = 0.0;
  for (std::size_t i = 0; i < w.samples.size(); ++i) {
    err += (w.samples[i] - rec.samples[i]) * (w.samples[i] - rec.samples[i]);
    ref += w.samples[i] * w.samples[i];
  }
  CHECK(std::sqrt(err / ref) < 1e-10);
}

TEST_CASE("all-zero spectrogram synthesizes an all-zero waveform") {
  Waveform w = random_wave(16000, 0.25, 3);
  ComplexSpectrogram spec = sfi_stft(w, StftConfig{});
  for (auto& z : spec.data) z = 0.0;
  Waveform rec = sfi_istft(spec, static_cast<int>(w.samples.size()));
  for (double s : rec.samples) CHECK(s == 0.0);
}

TEST_CASE("Parseval consistency between windowed frames and spectrogram") {
  const int rate = 16000;
  SfiStft stft(StftConfig{}, rate);
  Waveform w = random_wave(rate, 0.5, 11);
  ComplexSpectrogram spec = stft.analyze(w);

  // Frame-domain energy recomputed from the padded signal directly.
  const int n = stft.n_fft();
  const int pad = n / 2;
  const auto& win = stft.window();
  double frame_energy = 0.0;
  auto sample_at = [&](long long i) -> double {
    const long long len = static_cast<long long>(w.samples.size());
    long long m = i;
    while (m < 0 || m >= len) {
      if (m < 0) m = -m;
      if (m >= len) m = 2 * len - 2 - m;
    }
    return w.samples[static_cast<std::size_t>(m)];
  };
  for (int t = 0; t < spec.frames; ++t) {
    for (int i = 0; i < n; ++i) {
      const double v = sample_at(static_cast<long long>(t) * stft.hop() - pad + i) * win[i];
      frame_energy += v * v;
    }
  }
  double spec_energy = 0.0;
  for (int t = 0; t < spec.frames; ++t) {
    for (int f = 0; f < spec.bins; ++f) {
      const double e = std::norm(spec.at(t, f));
      const bool interior = f != 0 && f != spec.bins - 1;
      spec_energy += (interior ? 2.0 : 1.0) * e;
    }
  }
  spec_energy /= n;
  CHECK(std::abs(frame_energy - spec_energy) / frame_energy < 1e-9);
}

TEST_CASE("compress basics: 4+0i at c=0.5 gives mag 2 phase 0; c=1 is identity") {
  Waveform w = random_wave(8000, 0.2, 5);
  ComplexSpectrogram spec = sfi_stft(w, StftConfig{});
  spec.at(0, 0) = {4.0, 0.0};
  MagPhase mp = compress(spec, 0.5);
  CHECK(mp.mag.at2(0, 0) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(mp.phase.at2(0, 0) == 0.0);

  MagPhase id = compress(spec, 1.0);
  for (std::size_t i = 0; i < spec.data.size(); ++i) {
    CHECK(id.mag.v[i] == std::abs(spec.data[i]));
  }
}

TEST_CASE("compress/decompress are mutually inverse for c in {0.3, 0.5, 1.0}") {
  Waveform w = random_wave(16000, 0.3, 21);
  ComplexSpectrogram spec = sfi_stft(w, StftConfig{});
  for (double c : {0.3, 0.5, 1.0}) {
    MagPhase mp = compress(spec, c);
    ComplexSpectrogram back = decompress(mp, c, spec);
    double worst = 0.0;
    for (std::size_t i = 0; i < spec.data.size(); ++i) {
      const double denom = std::max(std::abs(spec.data[i]), 1e-30);
      worst = std::max(worst, std::abs(back.data[i] - spec.data[i]) / denom);
    }
    CHECK(worst < 1e-12);

    MagPhase mp2 = compress(back, c);
    double worst2 = 0.0;
    for (std::size_t i = 0; i < mp.mag.size(); ++i) {
      worst2 = std::max(worst2, std::abs(mp.mag.v[i] - mp2.mag.v[i]));
      worst2 = std::max(worst2, std::abs(mp.phase.v[i] - mp2.phase.v[i]));
    }
    CHECK(worst2 < 1e-12);
  }
}

TEST_CASE("decompress rejects nonpositive exponent and maps zero magnitude to zero") {
  Waveform w = random_wave(8000, 0.2, 9);
  ComplexSpectrogram spec = sfi_stft(w, StftConfig{});
  MagPhase mp = compress(spec, 0.5);
  CHECK_THROWS_AS(decompress(mp, 0.0, spec), std::invalid_argument);
  mp.mag.at2(1, 1) = 0.0;
  ComplexSpectrogram back = decompress(mp, 0.5, spec);
  CHECK(back.at(1, 1) == std::complex<double>(0.0, 0.0));
  CHECK(mp.phase.v[0] <= kPi);
  CHECK(mp.phase.v[0] > -kPi);
}

TEST_CASE("resample identity rate is bit-identical") {
  Waveform w = random_wave(22050, 0.3, 17);
  Waveform r = resample(w, 22050);
  REQUIRE(r.samples.size() == w.samples.size());
  for (std::size_t i = 0; i < w.samples.size(); ++i) CHECK(r.samples[i] == w.samples[i]);
}

TEST_CASE("resample 440 Hz sine 48k -> 16k -> 48k keeps interior SNR above 60 dB") {
  Waveform w = sine_wave(48000, 440.0, 1.0);
  Waveform down = resample(w, 16000);
  CHECK(down.samples.size() == 16000);
  Waveform up = resample(down, 48000);
  REQUIRE(up.samples.size() == w.samples.size());

  const std::size_t guard = 2400;  // skip filter edges
  double err = 0.0, ref = 0.0;
  for (std::size_t i = guard; i + guard < w.samples.size(); ++i) {
    err += (w.samples[i] - up.samples[i]) * (w.samples[i] - up.samples[i]);
    ref += w.samples[i] * w.samples[i];
  }
  CHECK(10.0 * std::log10(ref / err) > 60.0);
}

TEST_CASE("resample preserves DC in the interior") {
  Waveform w;
  w.rate_hz = 32000;
  w.samples.assign(32000, 0.5);
  Waveform r = resample(w, 24000);
  CHECK(r.samples.size() == 24000);
  for (std::size_t i = 3000; i + 3000 < r.samples.size(); ++i) {
    CHECK(std::abs(r.samples[i] - 0.5) < 1e-12);
  }
}

TEST_CASE("resample output length follows round(len * new / old)") {
  Waveform w = random_wave(22050, 0.123, 2);
  Waveform r = resample(w, 48000);
  CHECK(r.samples.size() ==
        static_cast<std::size_t>(std::llround(static_cast<double>(w.samples.size()) * 48000.0 / 22050.0)));
}

TEST_CASE("wav round trip: float32 preserves doubles to float precision, pcm16 to lsb") {
  Waveform w = random_wave(16000, 0.1, 33);
  const char* path_f = "test_wav_f32.wav";
  const char* path_p = "test_wav_p16.wav";
  write_wav(path_f, w, WavFormat::float32);
  write_wav(path_p, w, WavFormat::pcm16);
  Waveform rf = read_wav(path_f);
  Waveform rp = read_wav(path_p);
  CHECK(rf.rate_hz == 16000);
  REQUIRE(rf.samples.size() == w.samples.size());
  REQUIRE(rp.samples.size() == w.samples.size());
  CHECK(max_abs_diff(rf.samples, w.samples) < 1e-7);
  CHECK(max_abs_diff(rp.samples, w.samples) < 1.0 / 32767.0);
  std::remove(path_f);
  std::remove(path_p);
}

TEST_CASE("multichannel wav is rejected with a clear error") {
  const char* path = "test_wav_stereo.wav";
  {
    Waveform w = random_wave(8000, 0.01, 1);
    write_wav(path, w, WavFormat::pcm16);
    std::FILE* f = std::fopen(path, "r+b");
    REQUIRE(f != nullptr);
    std::fseek(f, 22, SEEK_SET);
    const uint16_t two = 2;
    std::fwrite(&two, 2, 1, f);
    std::fclose(f);
  }
  CHECK_THROWS_WITH_AS(read_wav(path), doctest::Contains("channels"), std::runtime_error);
  std::remove(path);
}
