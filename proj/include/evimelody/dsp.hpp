// Copyright 2026 The evimelody Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

namespace evimelody::dsp {

inline constexpr int kTargetSampleRate = 16000;

/// Interleaved PCM samples in [-1, 1].
struct AudioBuffer {
  std::vector<double> samples;
  int sample_rate = kTargetSampleRate;
  int channels = 1;

  std::size_t frames() const { return channels > 0 ? samples.size() / channels : 0; }
  double duration_seconds() const { return sample_rate > 0 ? double(frames()) / sample_rate : 0.0; }
};

/// T x F log-magnitude matrix, row-major by frame.
struct FeatureClip {
  std::vector<double> values;
  int n_frames = 0;
  int n_freq = 0;
  double hop_seconds = 0.010;
  bool mel = false;

  double at(int t, int f) const { return values[static_cast<std::size_t>(t) * n_freq + f]; }
  std::span<const double> frame(int t) const {
    return {values.data() + static_cast<std::size_t>(t) * n_freq, static_cast<std::size_t>(n_freq)};
  }
};

struct StftConfig {
  int fft_size = 2048;
  int hop = 160;
  int sample_rate = kTargetSampleRate;
  double clip_seconds = 1.0;

  int n_freq() const { return fft_size / 2 + 1; }
  int clip_samples() const;
  int n_frames() const;
};

/// Channel-average to mono and resample to 16 kHz with a windowed-sinc polyphase
/// filter. Inputs already at 16 kHz mono are returned unchanged.
AudioBuffer standardize(const AudioBuffer& audio);

/// Resample a mono buffer to `target_rate`. Output peak is rescaled to at most 1.
AudioBuffer resample(const AudioBuffer& mono, int target_rate);

/// Non-overlapping clips of exactly `clip_seconds`. A trailing remainder of at least
/// half a clip is zero-padded into one more clip; shorter remainders are dropped.
std::vector<AudioBuffer> segment(const AudioBuffer& audio, double clip_seconds = 1.0);

/// Hann-windowed, centered (reflect-padded) STFT; entries are ln(1 + |X|).
FeatureClip log_magnitude_stft(const AudioBuffer& clip, const StftConfig& config = {});

/// Triangular mel filterbank (0 Hz to Nyquist, rows normalized to unit sum) applied to
/// the linear magnitudes before the log. Requires 2 <= n_mel < F.
FeatureClip mel_project(const FeatureClip& clip, int n_mel, const StftConfig& config = {});

/// Rows are filters, columns are linear STFT bins.
std::vector<std::vector<double>> mel_filterbank(int n_mel, const StftConfig& config = {});

/// Keep the lowest `n_freq` frequency columns.
FeatureClip truncate_frequency(const FeatureClip& clip, int n_freq);

/// Reads PCM WAV: 8/16/24/32-bit integer and 32/64-bit float, any rate and channel count.
AudioBuffer read_wav(const std::filesystem::path& path);
/// Writes 32-bit float WAV.
void write_wav(const std::filesystem::path& path, const AudioBuffer& audio);

}  // namespace evimelody::dsp
