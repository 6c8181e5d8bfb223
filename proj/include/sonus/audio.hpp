// audio.hpp: waveforms, STFT/mel analysis, Griffin-Lim inversion, the
// procedural event-clip synthesizer, and temporal concat augmentation.
#pragma once

#include <complex>
#include <string>
#include <vector>

#include "sonus/tensor.hpp"

namespace sonus {

struct Waveform {
  std::vector<std::vector<double>> ch;  // planar; 1 or 2 channels
  int sample_rate = 44100;

  int channels() const { return static_cast<int>(ch.size()); }
  std::int64_t num_samples() const { return ch.empty() ? 0 : static_cast<std::int64_t>(ch[0].size()); }
  double duration_s() const { return static_cast<double>(num_samples()) / sample_rate; }
  const std::vector<double>& mono() const;  // throws InputError when stereo
  // max |sample| <= 1 + 1e-6
  void check_range() const;
};

struct MelConfig {
  int sample_rate = 44100;
  int n_fft = 2048;  // power of two
  int hop = 512;
  int n_mels = 80;
  double f_min = 20.0;
  double f_max = 22050.0;
  double log_floor = 1e-5;

  void validate() const;
  double frame_rate() const { return static_cast<double>(sample_rate) / hop; }
  int n_bins() const { return n_fft / 2 + 1; }
};

struct MelSpectrogram {
  Tensor frames;  // [T, n_mels], natural-log mel magnitudes, >= log(log_floor)
  double frame_rate = 0.0;
  MelConfig config;

  std::int64_t num_frames() const { return frames.defined() ? frames.dim(0) : 0; }
  std::int64_t num_bands() const { return frames.defined() ? frames.dim(1) : 0; }
};

// ---------------------------------------------------------------------------
// Event tracks: the desk-scale stand-in for video-derived features.
// ---------------------------------------------------------------------------

struct Event {
  double onset_s = 0.0;
  double offset_s = 0.0;
  std::string class_name;
};

struct EventTrack {
  std::vector<Event> events;
  double duration_s = 0.0;
};

std::string event_track_to_jsonl(const EventTrack& t);
EventTrack event_track_from_jsonl(const std::string& text);
void save_event_track(const EventTrack& t, const std::string& path);
EventTrack load_event_track(const std::string& path);

// ---------------------------------------------------------------------------
// FFT / STFT
// ---------------------------------------------------------------------------

// In-place iterative radix-2 FFT; size must be a power of two.
void fft_inplace(std::vector<std::complex<double>>& a, bool inverse);

struct Spectrogram {
  std::vector<std::complex<double>> bins;  // [frames x n_bins], row-major
  std::int64_t frames = 0;
  std::int64_t n_bins = 0;

  std::complex<double>& at(std::int64_t f, std::int64_t b) { return bins[f * n_bins + b]; }
  const std::complex<double>& at(std::int64_t f, std::int64_t b) const {
    return bins[f * n_bins + b];
  }
};

// Hann window, reflect padding (n_fft/2 each side); frames = 1 + floor(N/hop).
Spectrogram stft(const std::vector<double>& x, const MelConfig& cfg);
// Overlap-add inverse with window-square normalization; returns frames*hop
// samples (the center crop of the padded reconstruction).
std::vector<double> istft(const Spectrogram& s, const MelConfig& cfg);

// Triangular, discretely area-normalized HTK-mel filterbank [n_mels, n_bins].
std::vector<double> mel_filterbank(const MelConfig& cfg);
// Center frequency (Hz) of each mel band, the oracle for tone tests.
std::vector<double> mel_center_freqs(const MelConfig& cfg);

// magnitude STFT -> mel filterbank -> natural log with floor.
MelSpectrogram mel_spectrogram(const Waveform& w, const MelConfig& cfg);

// "Energy" domain used by the Parseval-style check and Mono2Stereo:
// energy = (linear mel magnitude)^2 = exp(2 * logmel).
double total_mel_energy(const MelSpectrogram& m);

// Phase reconstruction; iters >= 1. Deterministic (zero initial phase).
Waveform griffin_lim_invert(const MelSpectrogram& m, int iters);

// Mean-over-frames RMS log10 distance between two mel matrices; the
// round-trip quality measure for griffin_lim_invert tests.
double mel_log_distance(const MelSpectrogram& a, const MelSpectrogram& b);

// ---------------------------------------------------------------------------
// Procedural corpus
// ---------------------------------------------------------------------------

// The nine procedural event classes.
enum class EventClass {
  tone,
  noise,
  chirp_up,
  chirp_down,
  clicks,
  am_drone,
  harmonic,
  siren,
  thump,
};
inline constexpr int kNumEventClasses = 9;

const char* event_class_name(EventClass c);
EventClass event_class_from_name(const std::string& name);  // InputError if unknown

struct SynthClip {
  Waveform wave;
  EventTrack track;
};

// Deterministic per (kind, duration, seed); duration_s in [0.5, 10].
SynthClip synth_event_clip(EventClass kind, double duration_s, std::uint64_t seed);

// Click train with an explicit rate; synth_event_clip(clicks, ...) draws the
// rate from the seed, this overload pins it (one event per click).
SynthClip synth_click_train(double rate_hz, double duration_s, std::uint64_t seed);

enum class ConcatRule { sequential, gap_insert };
ConcatRule concat_rule_from_name(const std::string& name);

struct CaptionedClip {
  Waveform wave;
  EventTrack track;
  std::string caption;
};

// Concatenates clips; gap_insert places `gap_s` of silence between
// consecutive clips. Event onsets shift by the cumulative offset; captions
// join in order with ", then ".
CaptionedClip temporal_augment_concat(const std::vector<CaptionedClip>& clips, ConcatRule rule,
                                      double gap_s = 0.5, double max_total_s = 10.0);

// ---------------------------------------------------------------------------
// WAV I/O (PCM-16 little-endian, mono or stereo)
// ---------------------------------------------------------------------------

void wav_write(const Waveform& w, const std::string& path);
Waveform wav_read(const std::string& path);

}  // namespace sonus
