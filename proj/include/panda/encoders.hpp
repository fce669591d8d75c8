#pragma once

// Visual encoder with deep visual prompts, the stage-1 MLP head, the text
// encoder and the cross-modal encoder with its learnable count token.
//
// All weights live in a ParamStore under dotted names:
//   visual.*   patch projection, [CLS], positions, N pre-norm layers, ln_f
//   visual.prompt.<i>   H×d prompt block fed to layer i+1
//   head.*     two-layer MLP classifier
//   text.*     token/position embeddings, N_t layers, ln_f
//   cross.*    count token, 3 segment-type rows, N_c layers
//   proj.*     text and visual projections into the shared similarity space

#include <json.hpp>

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "panda/segmenter.hpp"
#include "panda/tensor.hpp"

namespace panda {

struct EncoderConfig {
  int layers = 4;  // N
  int text_layers = 2;
  int cross_layers = 2;
  int width = 64;  // d
  int heads = 4;
  int ff_mult = 4;
  int feature_dim = 32;  // raw patch / viewpoint feature width
  int num_patches = 4;   // E capacity
  int max_text_len = 64;
  int prompt_count = 10;    // H
  int prompted_layers = 4;  // n
  int num_classes = 10;
  int proj_dim = 64;
  int vocab_size = 0;
  // false: only layer 1 receives prompts and their outputs propagate.
  bool deep_prompts = true;

  void validate() const;
  // Prompt blocks stored in the bank.
  int bank_size() const;

  nlohmann::json to_json() const;
  static EncoderConfig from_json(const nlohmann::json& j);

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

using ShapeMap = std::map<std::string, std::pair<Index, Index>>;

ShapeMap parameter_shapes(const EncoderConfig& cfg);
// Truncated normal (σ = 0.02, cut at 2σ) for weights, embeddings, prompts and
// the count token; zeros for biases; ones/zeros for layer-norm gain/shift.
ParamStore init_parameters(const EncoderConfig& cfg, std::uint64_t seed);

std::string prompt_name(int layer_index);
std::vector<std::string> prompt_bank_names(const EncoderConfig& cfg);
std::size_t head_parameter_count(const EncoderConfig& cfg);

// One pre-norm transformer layer: x + MHA(LN(x)), then + FFN(LN(·)).
Var transformer_layer(Tape& tape, const ParamStore& store, const std::string& prefix, const Var& x,
                      int heads);

// Sequence rows are laid out as [X | P | E] with sizes [1 | H | E].
struct LayerState {
  Var cls;
  Var prompts;
  Var patches;
};

// `sequence_lengths`, when given, receives the input length of every layer.
LayerState visual_encode(Tape& tape, const ParamStore& store, const EncoderConfig& cfg,
                         const Matrix& patches, std::vector<Index>* sequence_lengths = nullptr);

Var classify_logits(Tape& tape, const ParamStore& store, const Var& cls);
Var classify(Tape& tape, const ParamStore& store, const Var& cls);

// [CLS] output of every viewpoint, each encoded as a one-patch image. T×d.
Var encode_viewpoints(Tape& tape, const ParamStore& store, const EncoderConfig& cfg,
                      const Matrix& viewpoints);

struct TextEncoding {
  Var sequence;  // one row per non-pad token
  Var pooled;    // [CLS] position
};

// Pad ids are masked out of attention; the remaining tokens keep their
// original positional embeddings.
TextEncoding text_encode(Tape& tape, const ParamStore& store, const EncoderConfig& cfg,
                         const std::vector<int>& ids);

struct CrossModalOutput {
  Var subpath_features;  // M×d
  Var count_feature;     // 1×d
  Var overall_visual;    // 1×d
};

// Input rows: [count token | T viewpoints | M sequential prompts]. With no
// prompt features the sequence is [count token | viewpoints]. Boundaries may
// come in any order but must partition [0, T); row i of subpath_features
// pools boundaries[i].
CrossModalOutput cross_modal_encode(Tape& tape, const ParamStore& store, const EncoderConfig& cfg,
                                    const Var& viewpoints, const std::optional<Var>& seq_prompts,
                                    const std::vector<Range>& boundaries);

Var project_text(Tape& tape, const ParamStore& store, const Var& features);
Var project_visual(Tape& tape, const ParamStore& store, const Var& features);

enum class Stage { stage1, stage2 };

Stage parse_stage(const std::string& s);

// stage1: prompt bank + head. stage2: text, cross-modal and projection
// weights (prompt bank too when `joint_prompts`).
std::set<std::string> trainable_parameters(Stage stage, const ParamStore& store,
                                           bool joint_prompts = false);

}  // namespace panda
