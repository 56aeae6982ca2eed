// Copyright 2025 USEMamba Contributors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <string>
#include <vector>

#include "usemamba/signals.hpp"

namespace usemamba {

enum class WavFormat { pcm16, float32 };

// Mono only. PCM 16-bit and IEEE float-32 are accepted on read; anything
// else (including multi-channel files) is rejected with a descriptive error.
Waveform read_wav(const std::string& path);
void write_wav(const std::string& path, const Waveform& wave,
               WavFormat fmt = WavFormat::float32);

}  // namespace usemamba
