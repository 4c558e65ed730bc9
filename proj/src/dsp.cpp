// Copyright 2026 The evimelody Authors
// SPDX-License-Identifier: Apache-2.0

#include "evimelody/dsp.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numbers>
#include <numeric>
#include <string>

#include "evimelody/errors.hpp"

namespace evimelody::dsp {

namespace {

// FFTW planning is not thread-safe; execution is.
std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

class RealFft {
 public:
  explicit RealFft(int n) : n_(n) {
    in_ = fftw_alloc_real(n);
    out_ = fftw_alloc_complex(n / 2 + 1);
    std::lock_guard lock(fftw_planner_mutex());
    plan_ = fftw_plan_dft_r2c_1d(n, in_, out_, FFTW_ESTIMATE);
  }
  ~RealFft() {
    {
      std::lock_guard lock(fftw_planner_mutex());
      fftw_destroy_plan(plan_);
    }
    fftw_free(in_);
    fftw_free(out_);
  }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  double* input() { return in_; }
  void execute() { fftw_execute(plan_); }
  double magnitude(int k) const { return std::hypot(out_[k][0], out_[k][1]); }

 private:
  int n_;
  double* in_;
  fftw_complex* out_;
  fftw_plan plan_;
};

// numpy-style "reflect" indexing (edge sample not repeated).
std::size_t reflect_index(long i, long n) {
  if (n == 1) return 0;
  const long period = 2 * (n - 1);
  long m = i % period;
  if (m < 0) m += period;
  return static_cast<std::size_t>(m < n ? m : period - m);
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

void check_finite(const AudioBuffer& audio) {
  for (double s : audio.samples) {
    if (!std::isfinite(s)) throw FormatError("audio contains non-finite samples");
  }
}

}  // namespace

int StftConfig::clip_samples() const { return static_cast<int>(std::lround(clip_seconds * sample_rate)); }

int StftConfig::n_frames() const { return clip_samples() / hop; }

AudioBuffer standardize(const AudioBuffer& audio) {
  if (audio.sample_rate <= 0) throw FormatError("sample rate must be > 0");
  if (audio.channels <= 0) throw FormatError("channel count must be > 0");
  if (audio.samples.empty()) throw FormatError("empty audio buffer");
  if (audio.samples.size() % audio.channels != 0) throw FormatError("sample count not a multiple of channels");
  check_finite(audio);

  if (audio.channels == 1 && audio.sample_rate == kTargetSampleRate) return audio;

  AudioBuffer mono;
  mono.sample_rate = audio.sample_rate;
  mono.channels = 1;
  if (audio.channels == 1) {
    mono.samples = audio.samples;
  } else {
    const std::size_t n = audio.frames();
    mono.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      double sum = 0.0;
      for (int c = 0; c < audio.channels; ++c) sum += audio.samples[i * audio.channels + c];
      mono.samples[i] = sum / audio.channels;
    }
  }
  if (mono.sample_rate == kTargetSampleRate) return mono;
  return resample(mono, kTargetSampleRate);
}

AudioBuffer resample(const AudioBuffer& mono, int target_rate) {
  if (mono.channels != 1) throw ArgumentError("resample expects mono audio");
  if (mono.sample_rate <= 0 || target_rate <= 0) throw FormatError("sample rate must be > 0");
  if (mono.sample_rate == target_rate) return mono;

  const long g = std::gcd(mono.sample_rate, target_rate);
  const long up = target_rate / g;
  const long down = mono.sample_rate / g;

  // Kernel in units of input samples. The cutoff sits a little below the lower
  // Nyquist frequency; the Kaiser window trades ripple against transition width.
  constexpr int kZeroCrossings = 24;
  constexpr double kRolloff = 0.94;
  constexpr double kKaiserBeta = 8.6;
  const double cutoff = kRolloff * std::min(1.0, static_cast<double>(up) / static_cast<double>(down));
  const int half_width = static_cast<int>(std::ceil(kZeroCrossings / cutoff));
  const double window_norm = std::cyl_bessel_i(0.0, kKaiserBeta);

  auto kernel = [&](double x) {
    const double r = x / (half_width + 1);
    if (std::abs(r) >= 1.0) return 0.0;
    const double w = std::cyl_bessel_i(0.0, kKaiserBeta * std::sqrt(1.0 - r * r)) / window_norm;
    const double arg = std::numbers::pi * cutoff * x;
    const double sinc = x == 0.0 ? 1.0 : std::sin(arg) / arg;
    return cutoff * sinc * w;
  };

  // One tap table per output phase.
  const int taps = 2 * half_width + 2;
  std::vector<double> table(static_cast<std::size_t>(up) * taps);
  for (long phase = 0; phase < up; ++phase) {
    const double frac = static_cast<double>(phase) / static_cast<double>(up);
    for (int j = 0; j < taps; ++j) {
      const int offset = j - half_width;
      table[phase * taps + j] = kernel(frac - offset);
    }
  }

  const long n_in = static_cast<long>(mono.samples.size());
  const long n_out = (n_in * up + down - 1) / down;
  AudioBuffer out;
  out.sample_rate = target_rate;
  out.channels = 1;
  out.samples.assign(n_out, 0.0);
  for (long n = 0; n < n_out; ++n) {
    const long pos = n * down;
    const long base = pos / up;
    const long phase = pos % up;
    const double* h = &table[phase * taps];
    double acc = 0.0;
    for (int j = 0; j < taps; ++j) {
      const long k = base + j - half_width;
      if (k < 0 || k >= n_in) continue;
      acc += mono.samples[k] * h[j];
    }
    out.samples[n] = acc;
  }

  double peak = 0.0;
  for (double s : out.samples) peak = std::max(peak, std::abs(s));
  if (peak > 1.0) {
    for (double& s : out.samples) s /= peak;
  }
  return out;
}

std::vector<AudioBuffer> segment(const AudioBuffer& audio, double clip_seconds) {
  if (audio.channels != 1) throw ArgumentError("segment expects mono audio");
  if (!(clip_seconds > 0.0)) throw ConfigError("clip_seconds must be > 0");
  const std::size_t clip = static_cast<std::size_t>(std::lround(clip_seconds * audio.sample_rate));
  std::vector<AudioBuffer> clips;
  if (clip == 0) return clips;
  const std::size_t n = audio.samples.size();
  std::size_t count = n / clip;
  if (n % clip >= (clip + 1) / 2) ++count;
  for (std::size_t i = 0; i < count; ++i) {
    AudioBuffer c;
    c.sample_rate = audio.sample_rate;
    c.channels = 1;
    c.samples.assign(clip, 0.0);
    const std::size_t begin = i * clip;
    const std::size_t end = std::min(n, begin + clip);
    std::copy(audio.samples.begin() + begin, audio.samples.begin() + end, c.samples.begin());
    clips.push_back(std::move(c));
  }
  return clips;
}

FeatureClip log_magnitude_stft(const AudioBuffer& clip, const StftConfig& config) {
  if (clip.channels != 1 || clip.sample_rate != config.sample_rate) {
    throw ArgumentError("stft expects mono audio at " + std::to_string(config.sample_rate) + " Hz");
  }
  if (static_cast<int>(clip.samples.size()) != config.clip_samples()) {
    throw ArgumentError("stft expects exactly " + std::to_string(config.clip_samples()) + " samples");
  }
  const int n_fft = config.fft_size;
  const int n_freq = config.n_freq();
  const int n_frames = config.n_frames();

  std::vector<double> window(n_fft);
  for (int i = 0; i < n_fft; ++i) window[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / n_fft);

  FeatureClip out;
  out.n_frames = n_frames;
  out.n_freq = n_freq;
  out.hop_seconds = static_cast<double>(config.hop) / config.sample_rate;
  out.values.assign(static_cast<std::size_t>(n_frames) * n_freq, 0.0);

  RealFft fft(n_fft);
  const long n = static_cast<long>(clip.samples.size());
  for (int t = 0; t < n_frames; ++t) {
    const long start = static_cast<long>(t) * config.hop - n_fft / 2;
    double* in = fft.input();
    for (int i = 0; i < n_fft; ++i) in[i] = clip.samples[reflect_index(start + i, n)] * window[i];
    fft.execute();
    double* row = out.values.data() + static_cast<std::size_t>(t) * n_freq;
    for (int k = 0; k < n_freq; ++k) row[k] = std::log1p(fft.magnitude(k));
  }
  return out;
}

std::vector<std::vector<double>> mel_filterbank(int n_mel, const StftConfig& config) {
  const int n_freq = config.n_freq();
  if (n_mel < 2) throw ConfigError("n_mel must be >= 2");
  if (n_mel >= n_freq) throw ConfigError("n_mel must be smaller than the number of STFT bins");

  const double nyquist = config.sample_rate / 2.0;
  const double bin_hz = static_cast<double>(config.sample_rate) / config.fft_size;
  const double mel_max = hz_to_mel(nyquist);
  std::vector<double> edges(n_mel + 2);
  for (int i = 0; i < n_mel + 2; ++i) edges[i] = mel_to_hz(mel_max * i / (n_mel + 1));

  std::vector<std::vector<double>> bank(n_mel, std::vector<double>(n_freq, 0.0));
  for (int m = 0; m < n_mel; ++m) {
    const double lo = edges[m];
    const double center = edges[m + 1];
    const double hi = edges[m + 2];
    double sum = 0.0;
    for (int k = 0; k < n_freq; ++k) {
      const double f = k * bin_hz;
      double w = 0.0;
      if (f > lo && f <= center) {
        w = (f - lo) / (center - lo);
      } else if (f > center && f < hi) {
        w = (hi - f) / (hi - center);
      }
      bank[m][k] = w;
      sum += w;
    }
    if (sum > 0.0) {
      for (double& w : bank[m]) w /= sum;
    } else {
      // Filter narrower than one STFT bin: take the nearest bin.
      const int k = std::clamp(static_cast<int>(std::lround(center / bin_hz)), 0, n_freq - 1);
      bank[m][k] = 1.0;
    }
  }
  return bank;
}

FeatureClip mel_project(const FeatureClip& clip, int n_mel, const StftConfig& config) {
  if (clip.mel) throw ArgumentError("mel_project expects a linear-frequency clip");
  if (clip.n_freq != config.n_freq()) throw ArgumentError("mel_project expects the full STFT spectrum");
  const auto bank = mel_filterbank(n_mel, config);

  FeatureClip out;
  out.n_frames = clip.n_frames;
  out.n_freq = n_mel;
  out.hop_seconds = clip.hop_seconds;
  out.mel = true;
  out.values.assign(static_cast<std::size_t>(clip.n_frames) * n_mel, 0.0);
  std::vector<double> magnitude(clip.n_freq);
  for (int t = 0; t < clip.n_frames; ++t) {
    const auto row = clip.frame(t);
    for (int k = 0; k < clip.n_freq; ++k) magnitude[k] = std::expm1(row[k]);
    for (int m = 0; m < n_mel; ++m) {
      double acc = 0.0;
      for (int k = 0; k < clip.n_freq; ++k) acc += bank[m][k] * magnitude[k];
      out.values[static_cast<std::size_t>(t) * n_mel + m] = std::log1p(acc);
    }
  }
  return out;
}

FeatureClip truncate_frequency(const FeatureClip& clip, int n_freq) {
  if (n_freq <= 0 || n_freq > clip.n_freq) throw ConfigError("cannot keep " + std::to_string(n_freq) + " of " +
                                                            std::to_string(clip.n_freq) + " frequency bins");
  if (n_freq == clip.n_freq) return clip;
  FeatureClip out;
  out.n_frames = clip.n_frames;
  out.n_freq = n_freq;
  out.hop_seconds = clip.hop_seconds;
  out.mel = clip.mel;
  out.values.resize(static_cast<std::size_t>(clip.n_frames) * n_freq);
  for (int t = 0; t < clip.n_frames; ++t) {
    const auto row = clip.frame(t);
    std::copy(row.begin(), row.begin() + n_freq, out.values.begin() + static_cast<std::size_t>(t) * n_freq);
  }
  return out;
}

}  // namespace evimelody::dsp
