#pragma once

// Synthetic data, the two training stages, retrieval metrics and
// checkpoints.

#include <json.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "panda/alignment.hpp"
#include "panda/encoders.hpp"
#include "panda/prompts.hpp"
#include "panda/segmenter.hpp"
#include "panda/tensor.hpp"

namespace panda {

struct RunConfig {
  std::uint64_t seed = 0;

  // indoor classification data
  int indoor_classes = 10;
  int indoor_samples_per_class = 100;
  double indoor_noise = 0.1;

  // trajectories
  int trajectory_count = 500;
  int min_actions = 2;
  int max_actions = 4;
  int min_length = 4;
  int max_length = 8;
  double trajectory_noise = 0.1;

  double val_fraction = 0.1;

  // encoder
  int layers = 4;
  int text_layers = 2;
  int cross_layers = 2;
  int width = 64;
  int heads = 4;
  int ff_mult = 4;
  int feature_dim = 32;
  int num_patches = 4;
  int max_text_len = 64;
  int prompt_count = 10;
  int prompted_layers = 4;
  int proj_dim = 64;
  bool deep_prompts = true;

  std::string optimizer = "adam";
  double weight_decay = 0.0;

  int stage1_epochs = 20;
  int stage1_batch_size = 10;
  double stage1_lr = 1e-3;
  int stage1_max_steps = 0;  // 0: no cap

  int stage2_epochs = 20;
  int stage2_batch_size = 20;
  double stage2_lr = 1e-3;
  int stage2_max_steps = 0;

  double lambda1 = kDefaultLambda1;
  double lambda2 = kDefaultLambda2;
  double temperature = kDefaultTemperature;
  double smoothing = kDefaultSmoothing;
  std::string ablation = "cnt+ind+ove";
  bool reverse_kl = false;
  bool joint_prompts = false;

  // Empty dataset paths mean "generate from the seed". An empty out_dir
  // disables all file output.
  std::string indoor_data;
  std::string trajectory_data;
  std::string out_dir = "runs";
  std::string stage1_checkpoint;
  std::string checkpoint;

  void validate() const;
  EncoderConfig encoder(int vocab_size) const;
  OptimConfig optim(double learning_rate) const;
  Ablation objective() const { return parse_ablation(ablation); }

  // key=value access by field name; ConfigError on unknown keys or bad values.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static const std::vector<std::string>& field_names();

  // Lines of key=value; '#' starts a comment.
  static RunConfig from_file(const std::string& path);
  void apply_file(const std::string& path);
  nlohmann::json to_json() const;
};

// ---------------------------------------------------------------------------
// Data.

struct IndoorSample {
  Matrix features;  // E×d_in
  int label = 0;
};

struct TrajectorySample {
  Matrix viewpoints;  // T×d_in
  Instruction instruction;
  std::vector<Range> chunks;
  std::vector<std::string> sub_instructions;
  std::vector<int> actions;  // action-bank ids, empty for external data
};

std::vector<IndoorSample> gen_indoor_dataset(int classes, int samples_per_class, double noise,
                                             int patches, int feature_dim, std::uint64_t seed);

struct TrajectoryOptions {
  int count = 500;
  int min_actions = 2;
  int max_actions = 4;
  int min_length = 4;
  int max_length = 8;
  double noise = 0.1;
  int feature_dim = 32;
};

std::vector<TrajectorySample> gen_trajectory_dataset(const TrajectoryOptions& options, std::uint64_t seed);

const std::vector<std::string>& action_bank();

// Template words plus the action bank plus any extra text.
Vocabulary build_vocabulary(const std::vector<TrajectorySample>& extra = {});

void write_indoor_jsonl(const std::string& path, const std::vector<IndoorSample>& samples);
std::vector<IndoorSample> read_indoor_jsonl(const std::string& path);
void write_trajectory_jsonl(const std::string& path, const std::vector<TrajectorySample>& samples);
// Missing sub_instructions are segmented, missing chunk_view is split evenly.
std::vector<TrajectorySample> read_trajectory_jsonl(const std::string& path);

nlohmann::json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const nlohmann::json& j);

// Seed-stable membership of sample `index` in the held-out split.
bool is_held_out(std::size_t index, std::uint64_t seed, double fraction);

template <typename T>
struct Split {
  std::vector<T> train;
  std::vector<T> held_out;
};

template <typename T>
Split<T> split_dataset(const std::vector<T>& samples, std::uint64_t seed, double fraction) {
  Split<T> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    (is_held_out(i, seed, fraction) ? out.held_out : out.train).push_back(samples[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints.

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ParamStore store;
  EncoderConfig encoder;
  Vocabulary vocabulary;
  std::string ablation = "cnt+ind+ove";
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);
nlohmann::json checkpoint_to_json(const Checkpoint& ckpt);
Checkpoint checkpoint_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Losses shared by training and gradient checks.

Var stage1_loss(Tape& tape, const ParamStore& store, const EncoderConfig& enc,
                const std::vector<const IndoorSample*>& batch, std::vector<int>* predictions = nullptr);

struct Stage2Loss {
  Var total;
  LossReport report;
};

struct Stage2Options {
  Ablation ablation = Ablation::full;
  double lambda1 = kDefaultLambda1;
  double lambda2 = kDefaultLambda2;
  double temperature = kDefaultTemperature;
  double smoothing = kDefaultSmoothing;
  bool reverse_kl = false;
};

// `viewpoint_cache[b]`, when present, replaces the visual encoding of batch[b].
Stage2Loss stage2_loss(Tape& tape, const ParamStore& store, const EncoderConfig& enc,
                       const Vocabulary& vocab, const std::vector<const TrajectorySample*>& batch,
                       const Stage2Options& options,
                       const std::vector<const Matrix*>& viewpoint_cache = {});

// ---------------------------------------------------------------------------
// Training.

struct Stage1Epoch {
  int epoch = 0;
  double loss = 0.0;
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
};

struct Stage1Result {
  Checkpoint checkpoint;
  std::vector<Stage1Epoch> epochs;
  long steps = 0;
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
  std::size_t prompt_parameters = 0;
  std::size_t head_parameters = 0;
  std::size_t trainable_parameters = 0;
};

Stage1Result run_stage1(const RunConfig& cfg);
Stage1Result run_stage1(const RunConfig& cfg, const std::vector<IndoorSample>& data, const Vocabulary& vocab);

struct Stage2Step {
  long step = 0;
  int epoch = 0;
  LossReport report;
  double tape_total = 0.0;
};

struct RetrievalMetrics {
  double subpair_accuracy = 0.0;
  double trajectory_accuracy = 0.0;
  double count_accuracy = 0.0;
  std::size_t trajectories = 0;
  std::size_t subpairs = 0;

  nlohmann::json to_json() const;
};

struct Stage2Epoch {
  int epoch = 0;
  double mean_total = 0.0;
  RetrievalMetrics held_out;
};

struct Stage2Result {
  Checkpoint checkpoint;
  std::vector<Stage2Step> steps;
  std::vector<Stage2Epoch> epochs;
  RetrievalMetrics held_out;
};

Stage2Result run_stage2(const RunConfig& cfg);
Stage2Result run_stage2(const RunConfig& cfg, const Checkpoint& stage1,
                        const std::vector<TrajectorySample>& data);

// CSV header and row for one step; only the components of the ablation appear.
std::string stage2_csv_header(Ablation a);
std::string stage2_csv_row(const Stage2Step& s, Ablation a);

// ---------------------------------------------------------------------------
// Evaluation.

struct TrajectoryFeatures {
  Matrix text_sub;        // M×p, one row per sub-instruction
  Matrix visual_sub;      // M×p, one row per sub-path
  Matrix text_overall;    // 1×p
  Matrix visual_overall;  // 1×p
  Matrix visual_count;    // 1×p
  int m = 0;
};

struct RetrievalFeatures {
  std::vector<TrajectoryFeatures> trajectories;
  Matrix count_text;  // row k: count prompt for M = k+1
};

RetrievalFeatures retrieval_features(const Checkpoint& ckpt, const std::vector<TrajectorySample>& data);
RetrievalMetrics retrieval_metrics(const RetrievalFeatures& features);
RetrievalMetrics evaluate_retrieval(const Checkpoint& ckpt, const std::vector<TrajectorySample>& data);

double classification_accuracy(const ParamStore& store, const EncoderConfig& enc,
                               const std::vector<IndoorSample>& data);

// ---------------------------------------------------------------------------

struct GradientCheckResult {
  GradCheckReport stage1;
  GradCheckReport stage2;
};

// Reduced encoder widths keep the finite differences affordable.
RunConfig gradcheck_config(std::uint64_t seed);
GradientCheckResult gradient_check(const RunConfig& cfg, double eps = 1e-5);

}  // namespace panda
