#include "sonus/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include "json.hpp"

namespace sonus {

namespace {
constexpr double kTwoPi = 2.0 * std::numbers::pi;
}

const std::vector<double>& Waveform::mono() const {
  if (channels() != 1) throw InputError("expected a mono waveform");
  return ch[0];
}

void Waveform::check_range() const {
  for (const auto& c : ch) {
    for (double s : c) {
      if (!(std::fabs(s) <= 1.0 + 1e-6)) {
        throw InputError("waveform sample out of [-1, 1] range");
      }
    }
  }
}

void MelConfig::validate() const {
  if (sample_rate <= 0) throw ConfigError("MelConfig: sample_rate must be positive");
  if (n_fft < 4 || (n_fft & (n_fft - 1)) != 0) {
    throw ConfigError("MelConfig: n_fft must be a power of two >= 4");
  }
  if (hop <= 0 || hop > n_fft) throw ConfigError("MelConfig: need 0 < hop <= n_fft");
  if (n_mels < 1) throw ConfigError("MelConfig: n_mels must be >= 1");
  if (f_max > sample_rate / 2.0 + 1e-9) throw ConfigError("MelConfig: f_max above Nyquist");
  if (f_min < 0 || f_min >= f_max) throw ConfigError("MelConfig: need 0 <= f_min < f_max");
  if (log_floor <= 0) throw ConfigError("MelConfig: log_floor must be positive");
}

// ---------------------------------------------------------------------------
// Event tracks
// ---------------------------------------------------------------------------

std::string event_track_to_jsonl(const EventTrack& t) {
  std::ostringstream os;
  for (const auto& e : t.events) {
    nlohmann::json j;
    j["onset_s"] = e.onset_s;
    j["offset_s"] = e.offset_s;
    j["class"] = e.class_name;
    os << j.dump() << "\n";
  }
  return os.str();
}

EventTrack event_track_from_jsonl(const std::string& text) {
  EventTrack t;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains("onset_s") || !j.contains("offset_s") ||
        !j.contains("class")) {
      throw InputError("event track: malformed JSONL line: " + line);
    }
    Event e;
    e.onset_s = j["onset_s"].get<double>();
    e.offset_s = j["offset_s"].get<double>();
    e.class_name = j["class"].get<std::string>();
    t.events.push_back(e);
    t.duration_s = std::max(t.duration_s, e.offset_s);
  }
  return t;
}

void save_event_track(const EventTrack& t, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for write: " + path);
  f << event_track_to_jsonl(t);
}

EventTrack load_event_track(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open event track: " + path);
  std::ostringstream os;
  os << f.rdbuf();
  return event_track_from_jsonl(os.str());
}

// ---------------------------------------------------------------------------
// FFT / STFT
// ---------------------------------------------------------------------------

void fft_inplace(std::vector<std::complex<double>>& a, bool inverse) {
  const std::size_t n = a.size();
  if (n == 0 || (n & (n - 1)) != 0) throw ContractError("fft: size must be a power of two");
  // bit reversal
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = (inverse ? kTwoPi : -kTwoPi) / static_cast<double>(len);
    const std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t j = 0; j < len / 2; ++j) {
        const auto u = a[i + j];
        const auto v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
        w *= wl;
      }
    }
  }
  if (inverse) {
    for (auto& v : a) v /= static_cast<double>(n);
  }
}

namespace {

std::vector<double> hann_window(int n) {
  std::vector<double> w(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    w[static_cast<std::size_t>(i)] = 0.5 - 0.5 * std::cos(kTwoPi * i / n);
  }
  return w;
}

// reflect index without edge repetition: [-1 -> 1], [N -> N-2]
std::int64_t reflect_index(std::int64_t i, std::int64_t n) {
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
  }
  return i;
}

}  // namespace

Spectrogram stft(const std::vector<double>& x, const MelConfig& cfg) {
  cfg.validate();
  const std::int64_t n = static_cast<std::int64_t>(x.size());
  if (n < cfg.n_fft) throw InputError("stft: signal shorter than one frame");
  const std::int64_t pad = cfg.n_fft / 2;
  const std::int64_t frames = 1 + n / cfg.hop;
  const auto win = hann_window(cfg.n_fft);
  Spectrogram s;
  s.frames = frames;
  s.n_bins = cfg.n_bins();
  s.bins.assign(static_cast<std::size_t>(frames * s.n_bins), {0.0, 0.0});
  std::vector<std::complex<double>> buf(static_cast<std::size_t>(cfg.n_fft));
  for (std::int64_t f = 0; f < frames; ++f) {
    const std::int64_t start = f * cfg.hop - pad;
    for (int i = 0; i < cfg.n_fft; ++i) {
      const std::int64_t src = reflect_index(start + i, n);
      buf[static_cast<std::size_t>(i)] = {
          x[static_cast<std::size_t>(src)] * win[static_cast<std::size_t>(i)], 0.0};
    }
    fft_inplace(buf, false);
    for (std::int64_t b = 0; b < s.n_bins; ++b) s.at(f, b) = buf[static_cast<std::size_t>(b)];
  }
  return s;
}

std::vector<double> istft(const Spectrogram& s, const MelConfig& cfg) {
  cfg.validate();
  if (s.n_bins != cfg.n_bins()) throw ShapeError("istft: bin count mismatch");
  if (s.frames < 1) throw ShapeError("istft: empty spectrogram");
  const std::int64_t pad = cfg.n_fft / 2;
  const std::int64_t full = (s.frames - 1) * cfg.hop + cfg.n_fft;
  const auto win = hann_window(cfg.n_fft);
  std::vector<double> acc(static_cast<std::size_t>(full), 0.0);
  std::vector<double> den(static_cast<std::size_t>(full), 0.0);
  std::vector<std::complex<double>> buf(static_cast<std::size_t>(cfg.n_fft));
  for (std::int64_t f = 0; f < s.frames; ++f) {
    for (std::int64_t b = 0; b < s.n_bins; ++b) buf[static_cast<std::size_t>(b)] = s.at(f, b);
    for (std::int64_t b = s.n_bins; b < cfg.n_fft; ++b) {
      buf[static_cast<std::size_t>(b)] = std::conj(s.at(f, cfg.n_fft - b));
    }
    fft_inplace(buf, true);
    const std::int64_t base = f * cfg.hop;
    for (int i = 0; i < cfg.n_fft; ++i) {
      acc[static_cast<std::size_t>(base + i)] +=
          buf[static_cast<std::size_t>(i)].real() * win[static_cast<std::size_t>(i)];
      den[static_cast<std::size_t>(base + i)] +=
          win[static_cast<std::size_t>(i)] * win[static_cast<std::size_t>(i)];
    }
  }
  const std::int64_t out_len = s.frames * cfg.hop;
  std::vector<double> out(static_cast<std::size_t>(out_len), 0.0);
  for (std::int64_t i = 0; i < out_len; ++i) {
    const std::int64_t j = i + pad;
    if (j < full) {
      out[static_cast<std::size_t>(i)] =
          acc[static_cast<std::size_t>(j)] / std::max(den[static_cast<std::size_t>(j)], 1e-8);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mel filterbank
// ---------------------------------------------------------------------------

namespace {

double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

std::vector<double> mel_points(const MelConfig& cfg) {
  const double m_lo = hz_to_mel(cfg.f_min), m_hi = hz_to_mel(cfg.f_max);
  std::vector<double> pts(static_cast<std::size_t>(cfg.n_mels) + 2);
  for (int i = 0; i < cfg.n_mels + 2; ++i) {
    pts[static_cast<std::size_t>(i)] = mel_to_hz(m_lo + (m_hi - m_lo) * i / (cfg.n_mels + 1));
  }
  return pts;
}

}  // namespace

std::vector<double> mel_filterbank(const MelConfig& cfg) {
  cfg.validate();
  const auto pts = mel_points(cfg);
  const int bins = cfg.n_bins();
  std::vector<double> fb(static_cast<std::size_t>(cfg.n_mels) * bins, 0.0);
  for (int m = 0; m < cfg.n_mels; ++m) {
    const double lo = pts[static_cast<std::size_t>(m)];
    const double mid = pts[static_cast<std::size_t>(m) + 1];
    const double hi = pts[static_cast<std::size_t>(m) + 2];
    double* row = fb.data() + static_cast<std::size_t>(m) * bins;
    double wsum = 0.0;
    for (int k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * cfg.sample_rate / cfg.n_fft;
      double w = 0.0;
      if (f >= lo && f <= mid && mid > lo) {
        w = (f - lo) / (mid - lo);
      } else if (f > mid && f <= hi && hi > mid) {
        w = (hi - f) / (hi - mid);
      }
      row[k] = w;
      wsum += w;
    }
    if (wsum <= 0.0) {
      throw ConfigError("mel_filterbank: band " + std::to_string(m) +
                        " has no FFT-bin support; increase n_fft or reduce n_mels");
    }
    for (int k = 0; k < bins; ++k) row[k] /= wsum;  // unit discrete area
  }
  return fb;
}

std::vector<double> mel_center_freqs(const MelConfig& cfg) {
  const auto pts = mel_points(cfg);
  std::vector<double> c(static_cast<std::size_t>(cfg.n_mels));
  for (int m = 0; m < cfg.n_mels; ++m) {
    c[static_cast<std::size_t>(m)] = pts[static_cast<std::size_t>(m) + 1];
  }
  return c;
}

MelSpectrogram mel_spectrogram(const Waveform& w, const MelConfig& cfg) {
  cfg.validate();
  const auto& x = w.mono();
  if (w.sample_rate != cfg.sample_rate) {
    throw InputError("mel_spectrogram: waveform sample rate " + std::to_string(w.sample_rate) +
                     " does not match config " + std::to_string(cfg.sample_rate));
  }
  if (static_cast<int>(x.size()) < cfg.n_fft) {
    throw InputError("mel_spectrogram: waveform shorter than one analysis frame");
  }
  const Spectrogram s = stft(x, cfg);
  const auto fb = mel_filterbank(cfg);
  const int bins = cfg.n_bins();
  std::vector<double> out(static_cast<std::size_t>(s.frames * cfg.n_mels));
  std::vector<double> mag(static_cast<std::size_t>(bins));
  for (std::int64_t f = 0; f < s.frames; ++f) {
    for (int k = 0; k < bins; ++k) mag[static_cast<std::size_t>(k)] = std::abs(s.at(f, k));
    for (int m = 0; m < cfg.n_mels; ++m) {
      const double* row = fb.data() + static_cast<std::size_t>(m) * bins;
      double acc = 0.0;
      for (int k = 0; k < bins; ++k) acc += row[k] * mag[static_cast<std::size_t>(k)];
      out[static_cast<std::size_t>(f * cfg.n_mels + m)] = std::log(std::max(acc, cfg.log_floor));
    }
  }
  MelSpectrogram mel;
  mel.frames = Tensor::from({s.frames, cfg.n_mels}, std::move(out), DType::f32);
  mel.frame_rate = cfg.frame_rate();
  mel.config = cfg;
  return mel;
}

double total_mel_energy(const MelSpectrogram& m) {
  double acc = 0.0;
  for (double v : m.frames.data()) acc += std::exp(2.0 * v);
  return acc;
}

double mel_log_distance(const MelSpectrogram& a, const MelSpectrogram& b) {
  if (a.num_frames() != b.num_frames() || a.num_bands() != b.num_bands()) {
    throw ShapeError("mel_log_distance: shape mismatch");
  }
  const auto av = a.frames.data();
  const auto bv = b.frames.data();
  const std::int64_t t = a.num_frames(), d = a.num_bands();
  constexpr double ln10 = 2.302585092994046;
  double total = 0.0;
  for (std::int64_t f = 0; f < t; ++f) {
    double sq = 0.0;
    for (std::int64_t m = 0; m < d; ++m) {
      const double diff = (av[f * d + m] - bv[f * d + m]) / ln10;
      sq += diff * diff;
    }
    total += std::sqrt(sq / static_cast<double>(d));
  }
  return total / static_cast<double>(t);
}

// ---------------------------------------------------------------------------
// Griffin-Lim
// ---------------------------------------------------------------------------

namespace {

// Ridge-regularized pseudo-inverse applied to mel rows:
// lin = fb^T (fb fb^T + lambda I)^{-1} mel, clamped at 0.
std::vector<double> mel_pinv(const std::vector<double>& fb, int n_mels, int bins) {
  const int m = n_mels;
  std::vector<double> g(static_cast<std::size_t>(m) * m, 0.0);  // fb fb^T
  for (int i = 0; i < m; ++i) {
    for (int j = i; j < m; ++j) {
      double acc = 0.0;
      const double* ri = fb.data() + static_cast<std::size_t>(i) * bins;
      const double* rj = fb.data() + static_cast<std::size_t>(j) * bins;
      for (int k = 0; k < bins; ++k) acc += ri[k] * rj[k];
      g[static_cast<std::size_t>(i) * m + j] = acc;
      g[static_cast<std::size_t>(j) * m + i] = acc;
    }
  }
  double tr = 0.0;
  for (int i = 0; i < m; ++i) tr += g[static_cast<std::size_t>(i) * m + i];
  const double lambda = 1e-10 * tr / m + 1e-12;
  for (int i = 0; i < m; ++i) g[static_cast<std::size_t>(i) * m + i] += lambda;

  // invert g by Gauss-Jordan with partial pivoting
  std::vector<double> inv(static_cast<std::size_t>(m) * m, 0.0);
  for (int i = 0; i < m; ++i) inv[static_cast<std::size_t>(i) * m + i] = 1.0;
  for (int col = 0; col < m; ++col) {
    int piv = col;
    for (int r = col + 1; r < m; ++r) {
      if (std::fabs(g[static_cast<std::size_t>(r) * m + col]) >
          std::fabs(g[static_cast<std::size_t>(piv) * m + col])) {
        piv = r;
      }
    }
    if (std::fabs(g[static_cast<std::size_t>(piv) * m + col]) < 1e-300) {
      throw NumericError("mel_pinv: singular filterbank gram matrix");
    }
    if (piv != col) {
      for (int c = 0; c < m; ++c) {
        std::swap(g[static_cast<std::size_t>(piv) * m + c],
                  g[static_cast<std::size_t>(col) * m + c]);
        std::swap(inv[static_cast<std::size_t>(piv) * m + c],
                  inv[static_cast<std::size_t>(col) * m + c]);
      }
    }
    const double d = g[static_cast<std::size_t>(col) * m + col];
    for (int c = 0; c < m; ++c) {
      g[static_cast<std::size_t>(col) * m + c] /= d;
      inv[static_cast<std::size_t>(col) * m + c] /= d;
    }
    for (int r = 0; r < m; ++r) {
      if (r == col) continue;
      const double fval = g[static_cast<std::size_t>(r) * m + col];
      if (fval == 0.0) continue;
      for (int c = 0; c < m; ++c) {
        g[static_cast<std::size_t>(r) * m + c] -= fval * g[static_cast<std::size_t>(col) * m + c];
        inv[static_cast<std::size_t>(r) * m + c] -=
            fval * inv[static_cast<std::size_t>(col) * m + c];
      }
    }
  }
  // pinv[k, i] = sum_j fb[j, k] * inv[j, i]
  std::vector<double> pinv(static_cast<std::size_t>(bins) * m, 0.0);
  for (int k = 0; k < bins; ++k) {
    for (int j = 0; j < m; ++j) {
      const double f = fb[static_cast<std::size_t>(j) * bins + k];
      if (f == 0.0) continue;
      const double* invrow = inv.data() + static_cast<std::size_t>(j) * m;
      double* prow = pinv.data() + static_cast<std::size_t>(k) * m;
      for (int i = 0; i < m; ++i) prow[i] += f * invrow[i];
    }
  }
  return pinv;
}

}  // namespace

Waveform griffin_lim_invert(const MelSpectrogram& m, int iters) {
  if (iters < 1) throw InputError("griffin_lim_invert: iters must be >= 1");
  const MelConfig& cfg = m.config;
  cfg.validate();
  const std::int64_t frames = m.num_frames();
  if (frames < 1 || m.num_bands() != cfg.n_mels) {
    throw ShapeError("griffin_lim_invert: bad mel shape");
  }
  const int bins = cfg.n_bins();
  const auto fb = mel_filterbank(cfg);
  const auto pinv = mel_pinv(fb, cfg.n_mels, bins);

  // target linear magnitudes
  std::vector<double> mag(static_cast<std::size_t>(frames * bins), 0.0);
  const auto logmel = m.frames.data();
  for (std::int64_t f = 0; f < frames; ++f) {
    for (int k = 0; k < bins; ++k) {
      const double* prow = pinv.data() + static_cast<std::size_t>(k) * cfg.n_mels;
      double acc = 0.0;
      for (int b = 0; b < cfg.n_mels; ++b) {
        acc += prow[b] * std::exp(logmel[f * cfg.n_mels + b]);
      }
      mag[static_cast<std::size_t>(f * bins + k)] = std::max(acc, 0.0);
    }
  }

  Spectrogram s;
  s.frames = frames;
  s.n_bins = bins;
  s.bins.assign(mag.size(), {0.0, 0.0});
  for (std::size_t i = 0; i < mag.size(); ++i) s.bins[i] = {mag[i], 0.0};

  for (int it = 0; it < iters; ++it) {
    const auto x = istft(s, cfg);
    const Spectrogram re = stft(x, cfg);
    for (std::int64_t f = 0; f < frames; ++f) {
      for (int k = 0; k < bins; ++k) {
        std::complex<double> z =
            f < re.frames ? re.at(f, k) : std::complex<double>(1.0, 0.0);
        const double a = std::abs(z);
        const std::complex<double> unit =
            a > 1e-12 ? z / a : std::complex<double>(1.0, 0.0);
        s.at(f, k) = mag[static_cast<std::size_t>(f * bins + k)] * unit;
      }
    }
  }
  auto x = istft(s, cfg);
  double peak = 0.0;
  for (double v : x) peak = std::max(peak, std::fabs(v));
  if (peak > 1.0) {
    const double scl = 0.999 / peak;
    for (auto& v : x) v *= scl;
  }
  Waveform w;
  w.sample_rate = cfg.sample_rate;
  w.ch.push_back(std::move(x));
  return w;
}

// ---------------------------------------------------------------------------
// Procedural event synth
// ---------------------------------------------------------------------------

const char* event_class_name(EventClass c) {
  switch (c) {
    case EventClass::tone: return "tone";
    case EventClass::noise: return "noise";
    case EventClass::chirp_up: return "chirp_up";
    case EventClass::chirp_down: return "chirp_down";
    case EventClass::clicks: return "clicks";
    case EventClass::am_drone: return "am_drone";
    case EventClass::harmonic: return "harmonic";
    case EventClass::siren: return "siren";
    case EventClass::thump: return "thump";
  }
  throw ContractError("event_class_name: bad enum");
}

EventClass event_class_from_name(const std::string& name) {
  for (int i = 0; i < kNumEventClasses; ++i) {
    const auto c = static_cast<EventClass>(i);
    if (name == event_class_name(c)) return c;
  }
  throw InputError("unknown event class: '" + name + "'");
}

namespace {

void apply_edge_ramp(std::vector<double>& x, int sr, double ramp_s = 0.01) {
  const std::int64_t r = std::min<std::int64_t>(static_cast<std::int64_t>(ramp_s * sr),
                                                static_cast<std::int64_t>(x.size()) / 2);
  for (std::int64_t i = 0; i < r; ++i) {
    const double g = 0.5 - 0.5 * std::cos(std::numbers::pi * i / r);
    x[static_cast<std::size_t>(i)] *= g;
    x[x.size() - 1 - static_cast<std::size_t>(i)] *= g;
  }
}

SynthClip make_clip(std::vector<double> samples, int sr, EventClass kind,
                    std::vector<Event> events, double duration_s) {
  apply_edge_ramp(samples, sr);
  SynthClip clip;
  clip.wave.sample_rate = sr;
  clip.wave.ch.push_back(std::move(samples));
  clip.track.duration_s = duration_s;
  if (events.empty()) {
    events.push_back({0.02, duration_s - 0.02, event_class_name(kind)});
  }
  clip.track.events = std::move(events);
  return clip;
}

}  // namespace

SynthClip synth_click_train(double rate_hz, double duration_s, std::uint64_t seed) {
  if (rate_hz <= 0) throw InputError("synth_click_train: rate must be positive");
  if (duration_s < 0.5 || duration_s > 10.0) {
    throw InputError("synth_click_train: duration_s must be in [0.5, 10]");
  }
  const int sr = 44100;
  const std::int64_t n = static_cast<std::int64_t>(std::llround(duration_s * sr));
  std::vector<double> x(static_cast<std::size_t>(n), 0.0);
  Rng rng(derive_seed(seed, 0x11ull));
  std::vector<Event> events;
  for (int k = 0; k / rate_hz < duration_s - 1e-9; ++k) {
    const double onset = k / rate_hz;
    const std::int64_t s0 = static_cast<std::int64_t>(onset * sr);
    const std::int64_t len = sr / 250;  // 4 ms
    for (std::int64_t i = 0; i < len && s0 + i < n; ++i) {
      const double env = std::exp(-8.0 * static_cast<double>(i) / static_cast<double>(len));
      x[static_cast<std::size_t>(s0 + i)] += 0.45 * env * rng.uniform(-1.0, 1.0);
    }
    events.push_back({onset, std::min(onset + 0.03, duration_s), "clicks"});
  }
  return make_clip(std::move(x), sr, EventClass::clicks, std::move(events), duration_s);
}

SynthClip synth_event_clip(EventClass kind, double duration_s, std::uint64_t seed) {
  if (duration_s < 0.5 || duration_s > 10.0) {
    throw InputError("synth_event_clip: duration_s must be in [0.5, 10]");
  }
  const int sr = 44100;
  const std::int64_t n = static_cast<std::int64_t>(std::llround(duration_s * sr));
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(kind) + 1));
  std::vector<double> x(static_cast<std::size_t>(n), 0.0);

  switch (kind) {
    case EventClass::tone: {
      const double f = 300.0 + 1200.0 * rng.uniform();
      for (std::int64_t i = 0; i < n; ++i) {
        x[static_cast<std::size_t>(i)] = 0.4 * std::sin(kTwoPi * f * i / sr);
      }
      break;
    }
    case EventClass::noise: {
      for (auto& v : x) v = 0.3 * rng.uniform(-1.0, 1.0);
      break;
    }
    case EventClass::chirp_up:
    case EventClass::chirp_down: {
      double f0 = 200.0 + 100.0 * rng.uniform();
      double f1 = 3000.0 + 2000.0 * rng.uniform();
      if (kind == EventClass::chirp_down) std::swap(f0, f1);
      const double rate = (f1 - f0) / duration_s;
      for (std::int64_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / sr;
        const double phase = kTwoPi * (f0 * t + 0.5 * rate * t * t);
        x[static_cast<std::size_t>(i)] = 0.35 * std::sin(phase);
      }
      break;
    }
    case EventClass::clicks: {
      const double rate = 3.0 + static_cast<double>(rng.uniform_int(6));  // 3..8 Hz
      return synth_click_train(rate, duration_s, seed);
    }
    case EventClass::am_drone: {
      const double fc = 110.0 + 110.0 * rng.uniform();
      const double fm = 2.0 + 4.0 * rng.uniform();
      for (std::int64_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / sr;
        const double am = 1.0 - 0.8 * (0.5 + 0.5 * std::sin(kTwoPi * fm * t));
        x[static_cast<std::size_t>(i)] =
            0.4 * am * (std::sin(kTwoPi * fc * t) + 0.3 * std::sin(kTwoPi * 2 * fc * t));
      }
      break;
    }
    case EventClass::harmonic: {
      const double f0 = 150.0 + 150.0 * rng.uniform();
      for (std::int64_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / sr;
        double v = 0.0;
        for (int h = 1; h <= 6; ++h) v += std::sin(kTwoPi * f0 * h * t) / h;
        x[static_cast<std::size_t>(i)] = 0.22 * v;
      }
      break;
    }
    case EventClass::siren: {
      const double fc = 500.0 + 300.0 * rng.uniform();
      const double dev = 300.0 + 150.0 * rng.uniform();
      const double fm = 1.0 + 1.0 * rng.uniform();
      for (std::int64_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / sr;
        // integral of fc + dev*sin(2 pi fm t)
        const double phase =
            kTwoPi * (fc * t - dev / (kTwoPi * fm) * std::cos(kTwoPi * fm * t));
        x[static_cast<std::size_t>(i)] = 0.35 * std::sin(phase);
      }
      break;
    }
    case EventClass::thump: {
      const double f = 55.0 + 35.0 * rng.uniform();
      const double period = std::max(0.8, duration_s);
      for (std::int64_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / sr;
        const double tin = std::fmod(t, period);
        x[static_cast<std::size_t>(i)] = 0.5 * std::exp(-tin / 0.12) * std::sin(kTwoPi * f * tin);
      }
      break;
    }
  }
  return make_clip(std::move(x), sr, kind, {}, duration_s);
}

ConcatRule concat_rule_from_name(const std::string& name) {
  if (name == "sequential") return ConcatRule::sequential;
  if (name == "gap-insert" || name == "gap_insert") return ConcatRule::gap_insert;
  throw InputError("unknown concat rule: '" + name + "'");
}

CaptionedClip temporal_augment_concat(const std::vector<CaptionedClip>& clips, ConcatRule rule,
                                      double gap_s, double max_total_s) {
  if (clips.empty()) throw InputError("temporal_augment_concat: no clips");
  const int sr = clips[0].wave.sample_rate;
  double total = 0.0;
  for (const auto& c : clips) {
    if (c.wave.sample_rate != sr) {
      throw InputError("temporal_augment_concat: mixed sample rates");
    }
    if (c.wave.channels() != 1) {
      throw InputError("temporal_augment_concat: mono clips required");
    }
    total += c.wave.duration_s();
  }
  if (rule == ConcatRule::gap_insert) total += gap_s * static_cast<double>(clips.size() - 1);
  if (total > max_total_s + 1e-9) {
    throw InputError("temporal_augment_concat: total duration exceeds limit");
  }

  CaptionedClip out;
  out.wave.sample_rate = sr;
  out.wave.ch.emplace_back();
  auto& samples = out.wave.ch[0];
  double offset = 0.0;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    const auto& c = clips[i];
    samples.insert(samples.end(), c.wave.ch[0].begin(), c.wave.ch[0].end());
    for (const auto& e : c.track.events) {
      out.track.events.push_back({e.onset_s + offset, e.offset_s + offset, e.class_name});
    }
    out.caption += (i == 0 ? "" : ", then ") + c.caption;
    offset += c.wave.duration_s();
    if (rule == ConcatRule::gap_insert && i + 1 < clips.size()) {
      samples.insert(samples.end(), static_cast<std::size_t>(gap_s * sr), 0.0);
      offset += gap_s;
    }
  }
  out.track.duration_s = static_cast<double>(samples.size()) / sr;
  return out;
}

// ---------------------------------------------------------------------------
// WAV I/O
// ---------------------------------------------------------------------------

namespace {

void put_u32(std::string& s, std::uint32_t v) {
  s.push_back(static_cast<char>(v & 0xff));
  s.push_back(static_cast<char>((v >> 8) & 0xff));
  s.push_back(static_cast<char>((v >> 16) & 0xff));
  s.push_back(static_cast<char>((v >> 24) & 0xff));
}

void put_u16(std::string& s, std::uint16_t v) {
  s.push_back(static_cast<char>(v & 0xff));
  s.push_back(static_cast<char>((v >> 8) & 0xff));
}

std::uint32_t get_u32(const std::string& s, std::size_t off) {
  return static_cast<std::uint8_t>(s[off]) | (static_cast<std::uint8_t>(s[off + 1]) << 8) |
         (static_cast<std::uint8_t>(s[off + 2]) << 16) |
         (static_cast<std::uint32_t>(static_cast<std::uint8_t>(s[off + 3])) << 24);
}

std::uint16_t get_u16(const std::string& s, std::size_t off) {
  return static_cast<std::uint16_t>(static_cast<std::uint8_t>(s[off]) |
                                    (static_cast<std::uint8_t>(s[off + 1]) << 8));
}

}  // namespace

void wav_write(const Waveform& w, const std::string& path) {
  if (w.channels() != 1 && w.channels() != 2) {
    throw InputError("wav_write: 1 or 2 channels required");
  }
  if (w.channels() == 2 && w.ch[0].size() != w.ch[1].size()) {
    throw InputError("wav_write: channel length mismatch");
  }
  w.check_range();
  const std::uint32_t nch = static_cast<std::uint32_t>(w.channels());
  const std::uint32_t nsamp = static_cast<std::uint32_t>(w.num_samples());
  const std::uint32_t data_size = nsamp * nch * 2;
  std::string buf;
  buf.reserve(44 + data_size);
  buf += "RIFF";
  put_u32(buf, 36 + data_size);
  buf += "WAVE";
  buf += "fmt ";
  put_u32(buf, 16);
  put_u16(buf, 1);  // PCM
  put_u16(buf, static_cast<std::uint16_t>(nch));
  put_u32(buf, static_cast<std::uint32_t>(w.sample_rate));
  put_u32(buf, static_cast<std::uint32_t>(w.sample_rate) * nch * 2);
  put_u16(buf, static_cast<std::uint16_t>(nch * 2));
  put_u16(buf, 16);
  buf += "data";
  put_u32(buf, data_size);
  for (std::uint32_t i = 0; i < nsamp; ++i) {
    for (std::uint32_t c = 0; c < nch; ++c) {
      double s = std::clamp(w.ch[c][i], -1.0, 1.0);
      const auto v = static_cast<std::int16_t>(std::llround(s * 32767.0));
      put_u16(buf, static_cast<std::uint16_t>(v));
    }
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("wav_write: cannot open " + path);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw IoError("wav_write: write failed for " + path);
}

Waveform wav_read(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("wav_read: cannot open " + path);
  std::ostringstream os;
  os << f.rdbuf();
  const std::string buf = os.str();
  if (buf.size() < 44 || buf.compare(0, 4, "RIFF") != 0 || buf.compare(8, 4, "WAVE") != 0) {
    throw InputError("wav_read: not a RIFF/WAVE file: " + path);
  }
  std::size_t pos = 12;
  int channels = 0, sample_rate = 0, bits = 0;
  bool have_fmt = false;
  Waveform w;
  while (pos + 8 <= buf.size()) {
    const std::string id = buf.substr(pos, 4);
    const std::uint32_t size = get_u32(buf, pos + 4);
    pos += 8;
    if (pos + size > buf.size()) throw InputError("wav_read: truncated chunk in " + path);
    if (id == "fmt ") {
      if (size < 16) throw InputError("wav_read: bad fmt chunk");
      const int fmt = get_u16(buf, pos);
      channels = get_u16(buf, pos + 2);
      sample_rate = static_cast<int>(get_u32(buf, pos + 4));
      bits = get_u16(buf, pos + 14);
      if (fmt != 1 || bits != 16) throw InputError("wav_read: only PCM-16 supported");
      if (channels != 1 && channels != 2) throw InputError("wav_read: 1 or 2 channels only");
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw InputError("wav_read: data before fmt");
      const std::size_t n = size / (static_cast<std::size_t>(channels) * 2);
      w.sample_rate = sample_rate;
      w.ch.assign(static_cast<std::size_t>(channels), std::vector<double>(n));
      for (std::size_t i = 0; i < n; ++i) {
        for (int c = 0; c < channels; ++c) {
          const auto raw = static_cast<std::int16_t>(get_u16(
              buf, pos + (i * static_cast<std::size_t>(channels) + static_cast<std::size_t>(c)) * 2));
          w.ch[static_cast<std::size_t>(c)][i] = static_cast<double>(raw) / 32767.0;
        }
      }
      return w;
    }
    pos += size + (size & 1);  // chunks are word-aligned
  }
  throw InputError("wav_read: no data chunk in " + path);
}

}  // namespace sonus
