#include <cmath>
#include <complex>
#include <cstdio>
#include <filesystem>

#include "doctest.h"
#include "sonus/audio.hpp"

using namespace sonus;

namespace {

Waveform sine_wave(double freq, double dur_s, double amp = 0.4, int sr = 44100) {
  Waveform w;
  w.sample_rate = sr;
  w.ch.emplace_back();
  const auto n = static_cast<std::size_t>(dur_s * sr);
  w.ch[0].resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    w.ch[0][i] = amp * std::sin(2.0 * 3.14159265358979323846 * freq * static_cast<double>(i) / sr);
  }
  return w;
}

// dominant-bin oracle: argmax bin of an n-point FFT of the middle of the
// signal (n matches the mel analysis FFT so "one bin" is one analysis bin)
std::size_t dominant_bin(const Waveform& w, std::size_t n) {
  const auto& x = w.mono();
  REQUIRE(x.size() >= n);
  const std::size_t start = (x.size() - n) / 2;
  std::vector<std::complex<double>> buf(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double win = 0.5 - 0.5 * std::cos(2.0 * 3.14159265358979323846 * i / n);
    buf[i] = {x[start + i] * win, 0.0};
  }
  fft_inplace(buf, false);
  std::size_t best = 1;
  for (std::size_t k = 1; k < n / 2; ++k) {
    if (std::abs(buf[k]) > std::abs(buf[best])) best = k;
  }
  return best;
}

// geometric/arithmetic mean ratio of the power spectrum
double spectral_flatness(const Waveform& w) {
  const std::size_t n = 8192;
  const auto& x = w.mono();
  REQUIRE(x.size() >= n);
  std::vector<std::complex<double>> buf(n);
  for (std::size_t i = 0; i < n; ++i) buf[i] = {x[i], 0.0};
  fft_inplace(buf, false);
  double logsum = 0.0, sum = 0.0;
  const std::size_t bins = n / 2;
  for (std::size_t k = 1; k < bins; ++k) {
    const double p = std::norm(buf[k]) + 1e-12;
    logsum += std::log(p);
    sum += p;
  }
  return std::exp(logsum / static_cast<double>(bins - 1)) / (sum / static_cast<double>(bins - 1));
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("mel of silence is the log floor everywhere") {
  Waveform w;
  w.sample_rate = 44100;
  w.ch.emplace_back(44100, 0.0);
  MelConfig cfg;
  auto mel = mel_spectrogram(w, cfg);
  const double floor_log = std::log(cfg.log_floor);
  for (double v : mel.frames.data()) CHECK(v == doctest::Approx(floor_log));
  // frame rate invariant
  CHECK(mel.frame_rate == doctest::Approx(44100.0 / 512.0));
}

TEST_CASE("440 Hz tone peaks in the mel band nearest 440 Hz") {
  MelConfig cfg;
  auto mel = mel_spectrogram(sine_wave(440.0, 1.0), cfg);
  const auto centers = mel_center_freqs(cfg);
  // oracle: band whose center frequency is nearest 440
  std::size_t expect = 0;
  for (std::size_t m = 1; m < centers.size(); ++m) {
    if (std::fabs(centers[m] - 440.0) < std::fabs(centers[expect] - 440.0)) expect = m;
  }
  // argmax of the time-averaged mel
  const std::int64_t bands = mel.num_bands();
  std::vector<double> avg(static_cast<std::size_t>(bands), 0.0);
  const auto d = mel.frames.data();
  for (std::int64_t f = 0; f < mel.num_frames(); ++f) {
    for (std::int64_t m = 0; m < bands; ++m) avg[static_cast<std::size_t>(m)] += d[f * bands + m];
  }
  std::size_t got = 0;
  for (std::size_t m = 1; m < avg.size(); ++m) {
    if (avg[m] > avg[got]) got = m;
  }
  CHECK(got == expect);
}

TEST_CASE("total mel energy scales as amplitude squared") {
  MelConfig cfg;
  auto m1 = mel_spectrogram(sine_wave(500.0, 0.5, 0.2), cfg);
  auto m2 = mel_spectrogram(sine_wave(500.0, 0.5, 0.4), cfg);  // 2x amplitude
  const double e1 = total_mel_energy(m1);
  const double e2 = total_mel_energy(m2);
  CHECK(e2 / e1 == doctest::Approx(4.0).epsilon(1e-3));
}

TEST_CASE("mel is shift-covariant by whole hops on interior frames") {
  MelConfig cfg;
  Rng rng(123);
  Waveform a;
  a.sample_rate = 44100;
  a.ch.emplace_back(44100, 0.0);
  for (auto& v : a.ch[0]) v = 0.3 * rng.uniform(-1.0, 1.0);
  Waveform b;
  b.sample_rate = 44100;
  b.ch.emplace_back(a.ch[0].size() + static_cast<std::size_t>(cfg.hop), 0.0);
  for (std::size_t i = 0; i < a.ch[0].size(); ++i) {
    b.ch[0][i + static_cast<std::size_t>(cfg.hop)] = a.ch[0][i];
  }
  auto ma = mel_spectrogram(a, cfg);
  auto mb = mel_spectrogram(b, cfg);
  const std::int64_t bands = ma.num_bands();
  // interior frames: skip the first/last few affected by reflect padding
  for (std::int64_t f = 3; f < ma.num_frames() - 3; ++f) {
    for (std::int64_t m = 0; m < bands; ++m) {
      CHECK(mb.frames.at({f + 1, m}) == doctest::Approx(ma.frames.at({f, m})).epsilon(1e-6));
    }
  }
}

TEST_CASE("griffin-lim recovers a tone's dominant frequency within one bin") {
  MelConfig cfg;
  auto mel = mel_spectrogram(sine_wave(440.0, 1.0), cfg);
  Waveform inv = griffin_lim_invert(mel, 32);
  const auto n = static_cast<std::size_t>(cfg.n_fft);
  const std::size_t got = dominant_bin(inv, n);
  const auto expect =
      static_cast<std::size_t>(std::llround(440.0 * static_cast<double>(n) / 44100.0));
  CHECK(std::llabs(static_cast<long long>(got) - static_cast<long long>(expect)) <= 1);
}

TEST_CASE("griffin-lim of an all-floor spectrogram is near silence") {
  MelConfig cfg;
  MelSpectrogram m;
  m.config = cfg;
  m.frame_rate = cfg.frame_rate();
  m.frames = Tensor::full({40, cfg.n_mels}, std::log(cfg.log_floor));
  Waveform w = griffin_lim_invert(m, 8);
  double rms = 0.0;
  for (double v : w.mono()) rms += v * v;
  rms = std::sqrt(rms / static_cast<double>(w.num_samples()));
  CHECK(rms < 1e-3);
}

TEST_CASE("griffin-lim round-trip error shrinks with iterations (golden seed)") {
  MelConfig cfg;
  Rng rng(77);
  // mixed content: tone + noise floor
  Waveform w = sine_wave(660.0, 1.0, 0.3);
  for (auto& v : w.ch[0]) v += 0.02 * rng.uniform(-1.0, 1.0);
  auto target = mel_spectrogram(w, cfg);
  auto roundtrip = [&](int iters) {
    Waveform inv = griffin_lim_invert(target, iters);
    // match analysis length: crop/zero-pad to the original sample count
    inv.ch[0].resize(w.ch[0].size(), 0.0);
    return mel_log_distance(mel_spectrogram(inv, cfg), target);
  };
  const double d1 = roundtrip(1);
  const double d8 = roundtrip(8);
  const double d32 = roundtrip(32);
  CHECK(d8 <= d1 + 1e-9);
  CHECK(d32 <= d8 + 1e-9);
  // documented desk-scale round-trip quality bound
  CHECK(d32 < 0.5);
}

TEST_CASE("click train event count matches rate * duration") {
  auto clip = synth_click_train(4.0, 2.0, 99);
  CHECK(clip.track.events.size() == 8);
  for (const auto& e : clip.track.events) CHECK(e.class_name == "clicks");
}

TEST_CASE("synth determinism and range") {
  for (int i = 0; i < kNumEventClasses; ++i) {
    const auto kind = static_cast<EventClass>(i);
    auto a = synth_event_clip(kind, 1.0, 4242);
    auto b = synth_event_clip(kind, 1.0, 4242);
    REQUIRE(a.wave.ch[0].size() == b.wave.ch[0].size());
    bool same = true;
    for (std::size_t s = 0; s < a.wave.ch[0].size(); ++s) {
      if (a.wave.ch[0][s] != b.wave.ch[0][s]) {
        same = false;
        break;
      }
    }
    CHECK(same);
    a.wave.check_range();
    CHECK(a.track.events.size() >= 1);
  }
  CHECK_THROWS_AS(synth_event_clip(EventClass::tone, 0.1, 1), InputError);
  CHECK_THROWS_AS(event_class_from_name("laser"), InputError);
}

TEST_CASE("tone has lower spectral flatness than noise") {
  auto tone = synth_event_clip(EventClass::tone, 1.0, 7);
  auto noise = synth_event_clip(EventClass::noise, 1.0, 7);
  CHECK(spectral_flatness(tone.wave) < spectral_flatness(noise.wave));
}

TEST_CASE("temporal concat: identity, offsets, gaps, event counts") {
  auto a = synth_event_clip(EventClass::tone, 1.0, 1);
  auto b = synth_event_clip(EventClass::noise, 1.0, 2);
  CaptionedClip ca{a.wave, a.track, "a steady tone"};
  CaptionedClip cb{b.wave, b.track, "a burst of static"};

  // single clip is unchanged
  auto one = temporal_augment_concat({ca}, ConcatRule::sequential);
  CHECK(one.wave.num_samples() == a.wave.num_samples());
  CHECK(one.caption == "a steady tone");
  CHECK(one.track.events.size() == a.track.events.size());
  CHECK(one.track.events[0].onset_s == doctest::Approx(a.track.events[0].onset_s));

  // two 1 s clips: second clip's onsets shift by exactly 1.0 s
  auto two = temporal_augment_concat({ca, cb}, ConcatRule::sequential);
  CHECK(two.track.events.size() == a.track.events.size() + b.track.events.size());
  const auto& shifted = two.track.events[a.track.events.size()];
  CHECK(shifted.onset_s == doctest::Approx(b.track.events[0].onset_s + 1.0));
  CHECK(two.caption == "a steady tone, then a burst of static");

  // gap-insert adds exactly the gap
  auto gap = temporal_augment_concat({ca, cb}, ConcatRule::gap_insert, 0.5);
  CHECK(gap.wave.duration_s() == doctest::Approx(2.5).epsilon(1e-6));
  CHECK(gap.track.events.size() == two.track.events.size());

  // mixed sample rates rejected
  CaptionedClip bad = cb;
  bad.wave.sample_rate = 22050;
  CHECK_THROWS_AS(temporal_augment_concat({ca, bad}, ConcatRule::sequential), InputError);

  // duration cap enforced
  auto long6 = synth_event_clip(EventClass::tone, 6.0, 3);
  CaptionedClip cl{long6.wave, long6.track, "x"};
  CHECK_THROWS_AS(temporal_augment_concat({cl, cl}, ConcatRule::sequential), InputError);
}

TEST_CASE("wav round-trip within 16-bit quantization") {
  Rng rng(55);
  Waveform w;
  w.sample_rate = 44100;
  w.ch.emplace_back(1000);
  w.ch.emplace_back(1000);
  for (std::size_t i = 0; i < 1000; ++i) {
    w.ch[0][i] = rng.uniform(-0.99, 0.99);
    w.ch[1][i] = rng.uniform(-0.99, 0.99);
  }
  const std::string path = temp_path("sonus_test_rt.wav");
  wav_write(w, path);
  Waveform r = wav_read(path);
  REQUIRE(r.channels() == 2);
  REQUIRE(r.num_samples() == 1000);
  CHECK(r.sample_rate == 44100);
  const double tol = std::pow(2.0, -15.0) + 1e-9;
  for (std::size_t c = 0; c < 2; ++c) {
    for (std::size_t i = 0; i < 1000; ++i) {
      CHECK(std::fabs(r.ch[c][i] - w.ch[c][i]) <= tol);
    }
  }
  std::filesystem::remove(path);

  // out-of-range samples are rejected on write
  Waveform badw;
  badw.sample_rate = 44100;
  badw.ch.emplace_back(10, 1.5);
  CHECK_THROWS_AS(wav_write(badw, temp_path("sonus_bad.wav")), InputError);
}

TEST_CASE("event track JSONL round-trip") {
  EventTrack t;
  t.events.push_back({0.25, 0.75, "tone"});
  t.events.push_back({1.0, 1.5, "clicks"});
  t.duration_s = 1.5;
  EventTrack r = event_track_from_jsonl(event_track_to_jsonl(t));
  REQUIRE(r.events.size() == 2);
  CHECK(r.events[1].class_name == "clicks");
  CHECK(r.events[1].onset_s == doctest::Approx(1.0));
  CHECK(r.duration_s == doctest::Approx(1.5));
  CHECK_THROWS_AS(event_track_from_jsonl("{bad json"), InputError);
}

TEST_CASE("mel input validation") {
  MelConfig cfg;
  Waveform w;
  w.sample_rate = 44100;
  w.ch.emplace_back(100, 0.0);  // shorter than one frame
  CHECK_THROWS_AS(mel_spectrogram(w, cfg), InputError);
  MelConfig bad = cfg;
  bad.hop = 4096;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.f_max = 44100.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}
