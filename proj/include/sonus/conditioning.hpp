// conditioning.hpp: toy modality encoders behind a feature interface,
// learned empty embeddings for missing modalities, duration embeddings,
// sync upsampling, and global condition fusion.
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "sonus/audio.hpp"
#include "sonus/nn.hpp"
#include "sonus/tensor.hpp"

namespace sonus {

struct DurationSpec {
  int seconds_start = 0;
  int seconds_total = 1;
};

// Raster feature width: one activity channel per event class plus a bias.
inline constexpr int kRasterDim = kNumEventClasses + 1;

// Caption lexicon: fixed phrases per class; vocabulary is closed.
std::string caption_for_class(EventClass c);
const std::vector<std::string>& caption_vocab();
// Lower-cases, strips punctuation, maps unknown words to <unk>.
std::vector<std::int64_t> tokenize_caption(const std::string& caption);

// EventTrack -> [frames, kRasterDim] activity raster at rate_hz.
Tensor rasterize_track(const EventTrack& track, double rate_hz);

// Sinusoidal features of the flow time t in [0, 1]; deterministic.
// Frequencies: w_i = 10000^(-i/(dim/2)), angle = 1000 * t * w_i.
Tensor timestep_embedding(double t, int dim, DType dt = DType::f32);
// Upper bound L with ||emb(t) - emb(t')|| <= L |t - t'|.
double timestep_embedding_lipschitz(int dim);

// Nearest-neighbor row upsampling: out[i] = x[floor(i * T / target_len)].
Tensor nn_upsample_rows(const Tensor& x, std::int64_t target_len);

struct CondConfig {
  std::int64_t d_text = 16;
  std::int64_t d_vision = 16;
  std::int64_t d_sync = 16;  // must equal d_vision (placeholder e_v is shared)
  std::int64_t d_dur = 16;
  std::int64_t d_time = 64;
  int max_seconds = 10;
  double vision_rate = 8.0;
  double sync_rate = 24.0;

  void validate() const;
};

enum class ModalityKind { text, vision, sync };
ModalityKind modality_kind_from_name(const std::string& name);

// Per-sample raw conditioning. Feature overrides (the drop-in file format)
// bypass the toy encoders entirely.
struct RawCondition {
  std::optional<std::string> caption;
  std::optional<EventTrack> track;
  DurationSpec duration;
  std::optional<Tensor> text_feats_override;    // [T_t, d_text]
  std::optional<Tensor> vision_feats_override;  // [T_v, d_vision]
  std::optional<Tensor> sync_feats_override;    // [T_sync, d_sync]
};

// Modality-dim feature sequences plus presence flags; the condition C.
struct ConditionBundle {
  Tensor text_feats;    // [T_t, d_text]
  Tensor vision_feats;  // [T_v, d_vision]
  Tensor sync_feats;    // [T_sync, d_sync]
  bool has_text = false;
  bool has_vision = false;
  DurationSpec duration;
};

// Toy encoders + learned empty embeddings + per-second duration tables.
class ConditionEncoder {
 public:
  ConditionEncoder() = default;
  ConditionEncoder(const CondConfig& cfg, Rng& rng, DType dt = DType::f32);

  // Present -> encoded features; absent -> broadcast placeholder (length 1).
  Tensor encode_or_placeholder(const std::optional<Tensor>& raw_feats, ModalityKind kind) const;

  // Full per-sample encoding incl. overrides and placeholder substitution.
  ConditionBundle encode(const RawCondition& raw) const;

  // Lookup of (start, total) per-second embeddings, concatenated [2*d_dur].
  Tensor duration_embed(const DurationSpec& d) const;

  const CondConfig& config() const { return cfg_; }
  Tensor empty_text() const { return e_t_; }
  Tensor empty_vision() const { return e_v_; }
  const EmbeddingTable& text_table() const { return text_table_; }

  void register_params(ParamMap& pm, const std::string& prefix);

 private:
  CondConfig cfg_;
  EmbeddingTable text_table_;  // caption vocab -> d_text
  Mlp vision_mlp_;             // raster -> d_vision
  Mlp sync_mlp_;               // raster -> d_sync
  Tensor e_t_;                 // [d_text]
  Tensor e_v_;                 // [d_vision]; shared by missing vision and sync
  EmbeddingTable dur_start_;   // [max_seconds+1, d_dur]
  EmbeddingTable dur_total_;   // [max_seconds+1, d_dur]
};

// Linear projection to the model dim followed by nearest-neighbor repeat to
// target_len; each audio latent frame receives the sync vector covering its
// timestamp.
Tensor sync_project_upsample(const Tensor& f_sync, const Linear& proj, std::int64_t target_len);

// Mean over rows: [T, d] -> [d]. Differentiable.
Tensor mean_rows(const Tensor& x);

// Fusion of pooled text/vision + duration + flow-timestep embeddings into
// the global condition vector g consumed by adaLN.
struct GlobalFusion {
  Mlp mlp;

  GlobalFusion() = default;
  GlobalFusion(const CondConfig& cfg, std::int64_t hidden, Rng& rng, DType dt = DType::f32);
  Tensor fuse(const Tensor& pooled_text, const Tensor& pooled_vision, const Tensor& dur_emb,
              const Tensor& t_emb) const;
  void register_params(ParamMap& pm, const std::string& prefix);
};

// ---------------------------------------------------------------------------
// Feature drop-in file format: JSON header line + little-endian f32 matrix.
// Lets externally computed features replace the toy encoders.
// ---------------------------------------------------------------------------

struct FeatureFile {
  std::string kind;  // "text" | "vision" | "sync" | "embedding"
  double frame_rate = 0.0;
  Tensor matrix;  // [length, dim]
};

void save_feature_file(const FeatureFile& f, const std::string& path);
FeatureFile load_feature_file(const std::string& path);

}  // namespace sonus
