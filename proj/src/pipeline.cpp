#include "panda/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>
#include <variant>

namespace panda {

namespace fs = std::filesystem;

namespace {

using Field = std::variant<int RunConfig::*, double RunConfig::*, bool RunConfig::*,
                           std::string RunConfig::*, std::uint64_t RunConfig::*>;

#define PANDA_FIELD(name) {#name, &RunConfig::name}

const std::vector<std::pair<std::string, Field>>& field_table() {
  static const std::vector<std::pair<std::string, Field>> table = {
      PANDA_FIELD(seed),
      PANDA_FIELD(indoor_classes),
      PANDA_FIELD(indoor_samples_per_class),
      PANDA_FIELD(indoor_noise),
      PANDA_FIELD(trajectory_count),
      PANDA_FIELD(min_actions),
      PANDA_FIELD(max_actions),
      PANDA_FIELD(min_length),
      PANDA_FIELD(max_length),
      PANDA_FIELD(trajectory_noise),
      PANDA_FIELD(val_fraction),
      PANDA_FIELD(layers),
      PANDA_FIELD(text_layers),
      PANDA_FIELD(cross_layers),
      PANDA_FIELD(width),
      PANDA_FIELD(heads),
      PANDA_FIELD(ff_mult),
      PANDA_FIELD(feature_dim),
      PANDA_FIELD(num_patches),
      PANDA_FIELD(max_text_len),
      PANDA_FIELD(prompt_count),
      PANDA_FIELD(prompted_layers),
      PANDA_FIELD(proj_dim),
      PANDA_FIELD(deep_prompts),
      PANDA_FIELD(optimizer),
      PANDA_FIELD(weight_decay),
      PANDA_FIELD(stage1_epochs),
      PANDA_FIELD(stage1_batch_size),
      PANDA_FIELD(stage1_lr),
      PANDA_FIELD(stage1_max_steps),
      PANDA_FIELD(stage2_epochs),
      PANDA_FIELD(stage2_batch_size),
      PANDA_FIELD(stage2_lr),
      PANDA_FIELD(stage2_max_steps),
      PANDA_FIELD(lambda1),
      PANDA_FIELD(lambda2),
      PANDA_FIELD(temperature),
      PANDA_FIELD(smoothing),
      PANDA_FIELD(ablation),
      PANDA_FIELD(reverse_kl),
      PANDA_FIELD(joint_prompts),
      PANDA_FIELD(indoor_data),
      PANDA_FIELD(trajectory_data),
      PANDA_FIELD(out_dir),
      PANDA_FIELD(stage1_checkpoint),
      PANDA_FIELD(checkpoint),
  };
  return table;
}

#undef PANDA_FIELD

const Field& find_field(const std::string& key) {
  for (const auto& [name, f] : field_table()) {
    if (name == key) return f;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename Int>
Int parse_integer(const std::string& key, const std::string& v) {
  Int out{};
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) {
    throw ConfigError("config key '" + key + "': expected an integer, got '" + v + "'");
  }
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || !std::isfinite(out)) {
    throw ConfigError("config key '" + key + "': expected a finite number, got '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

void require_config(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

void write_text(const std::string& path, const std::string& content) {
  const fs::path p(path);
  if (p.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(p.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + p.parent_path().string() + ": " + ec.message());
  }
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp + " for writing");
    out << content;
    if (!out.flush()) throw IoError("write to " + tmp + " failed");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp + " to " + path + ": " + ec.message());
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string join_path(const std::string& dir, const std::string& file) {
  return (fs::path(dir) / file).string();
}

Index argmax_row(const Matrix& m, Index row) {
  Index arg = 0;
  m.row(row).maxCoeff(&arg);
  return arg;
}

// Bug trap: frozen tensors must never move.
void assert_frozen(const ParamStore& store, const ParamStore& snapshot) {
  for (const auto& name : store.frozen()) {
    const Matrix& now = store.at(name);
    const Matrix& then = snapshot.at(name);
    if (now.size() != then.size() ||
        std::memcmp(now.data(), then.data(), sizeof(double) * static_cast<std::size_t>(now.size())) != 0) {
      throw FreezeViolation("frozen parameter '" + name + "' changed during training");
    }
  }
}

template <typename T>
std::vector<std::vector<const T*>> make_batches(const std::vector<T>& data, int batch_size,
                                                std::mt19937_64& rng) {
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<const T*>> out;
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch_size)) {
    std::vector<const T*> b;
    for (std::size_t k = i; k < std::min(order.size(), i + static_cast<std::size_t>(batch_size)); ++k) {
      b.push_back(&data[order[k]]);
    }
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// RunConfig

void RunConfig::validate() const {
  require_config(indoor_classes >= 2, "indoor_classes must be at least 2");
  require_config(indoor_samples_per_class >= 1, "indoor_samples_per_class must be positive");
  require_config(indoor_noise >= 0.0, "indoor_noise must be nonnegative");
  require_config(trajectory_count >= 1, "trajectory_count must be positive");
  require_config(min_actions >= 1 && min_actions <= max_actions, "need 1 <= min_actions <= max_actions");
  require_config(min_length >= 1 && min_length <= max_length, "need 1 <= min_length <= max_length");
  require_config(max_actions <= max_length, "max_actions must not exceed max_length");
  require_config(trajectory_noise >= 0.0, "trajectory_noise must be nonnegative");
  require_config(val_fraction >= 0.0 && val_fraction < 1.0, "val_fraction must lie in [0, 1)");
  require_config(optimizer == "adam" || optimizer == "sgd", "optimizer must be adam or sgd");
  require_config(weight_decay >= 0.0, "weight_decay must be nonnegative");
  require_config(stage1_epochs >= 0 && stage2_epochs >= 0, "epochs must be nonnegative");
  require_config(stage1_batch_size >= 1 && stage2_batch_size >= 1, "batch sizes must be positive");
  require_config(stage1_lr > 0.0 && stage2_lr > 0.0, "learning rates must be positive");
  require_config(stage1_max_steps >= 0 && stage2_max_steps >= 0, "max_steps must be nonnegative");
  require_config(lambda1 >= 0.0 && lambda2 >= 0.0, "lambda1 and lambda2 must be nonnegative");
  require_config(temperature > 0.0, "temperature must be positive");
  require_config(smoothing >= 0.0 && smoothing < 0.5, "smoothing must lie in [0, 0.5)");
  try {
    parse_ablation(ablation);
  } catch (const ParameterError& e) {
    throw ConfigError(e.what());
  }
  EncoderConfig probe = encoder(4);
  probe.validate();
}

EncoderConfig RunConfig::encoder(int vocab_size) const {
  EncoderConfig e;
  e.layers = layers;
  e.text_layers = text_layers;
  e.cross_layers = cross_layers;
  e.width = width;
  e.heads = heads;
  e.ff_mult = ff_mult;
  e.feature_dim = feature_dim;
  e.num_patches = num_patches;
  e.max_text_len = max_text_len;
  e.prompt_count = prompt_count;
  e.prompted_layers = prompted_layers;
  e.num_classes = indoor_classes;
  e.proj_dim = proj_dim;
  e.vocab_size = vocab_size;
  e.deep_prompts = deep_prompts;
  return e;
}

OptimConfig RunConfig::optim(double learning_rate) const {
  OptimConfig o;
  o.algorithm = optimizer == "sgd" ? Algorithm::sgd : Algorithm::adam;
  o.learning_rate = learning_rate;
  o.weight_decay = weight_decay;
  o.validate();
  return o;
}

void RunConfig::set(const std::string& key, const std::string& raw) {
  const std::string value = trim(raw);
  std::visit(
      [&](auto member) {
        using T = std::remove_reference_t<decltype(this->*member)>;
        if constexpr (std::is_same_v<T, int>) {
          this->*member = parse_integer<int>(key, value);
        } else if constexpr (std::is_same_v<T, std::uint64_t>) {
          this->*member = parse_integer<std::uint64_t>(key, value);
        } else if constexpr (std::is_same_v<T, double>) {
          this->*member = parse_double(key, value);
        } else if constexpr (std::is_same_v<T, bool>) {
          this->*member = parse_bool(key, value);
        } else {
          this->*member = value;
        }
      },
      find_field(key));
}

std::string RunConfig::get(const std::string& key) const {
  return std::visit(
      [&](auto member) -> std::string {
        const auto& v = this->*member;
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, std::string>) {
          return v;
        } else if constexpr (std::is_same_v<T, bool>) {
          return v ? "true" : "false";
        } else if constexpr (std::is_same_v<T, double>) {
          return format_double(v);
        } else {
          return std::to_string(v);
        }
      },
      find_field(key));
}

const std::vector<std::string>& RunConfig::field_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& [name, f] : field_table()) n.push_back(name);
    return n;
  }();
  return names;
}

void RunConfig::apply_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key=value");
    }
    try {
      set(trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

RunConfig RunConfig::from_file(const std::string& path) {
  RunConfig cfg;
  cfg.apply_file(path);
  return cfg;
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, f] : field_table()) {
    std::visit([&](auto member) { j[name] = this->*member; }, f);
  }
  return j;
}

// ---------------------------------------------------------------------------
// Data generation

std::vector<IndoorSample> gen_indoor_dataset(int classes, int samples_per_class, double noise,
                                             int patches, int feature_dim, std::uint64_t seed) {
  if (classes < 2) throw ParameterError("gen_indoor_dataset needs at least 2 classes");
  if (samples_per_class < 1 || patches < 1 || feature_dim < 1) {
    throw ParameterError("gen_indoor_dataset: sizes must be positive");
  }
  if (!(noise >= 0.0)) throw ParameterError("noise must be nonnegative");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Matrix> prototypes;
  for (int c = 0; c < classes; ++c) {
    Matrix p(patches, feature_dim);
    for (Index i = 0; i < p.size(); ++i) p.data()[i] = normal(rng);
    prototypes.push_back(std::move(p));
  }
  std::vector<IndoorSample> out;
  out.reserve(static_cast<std::size_t>(classes * samples_per_class));
  for (int k = 0; k < classes * samples_per_class; ++k) {
    IndoorSample s;
    s.label = k % classes;
    s.features = prototypes[static_cast<std::size_t>(s.label)];
    for (Index i = 0; i < s.features.size(); ++i) s.features.data()[i] += noise * normal(rng);
    out.push_back(std::move(s));
  }
  return out;
}

const std::vector<std::string>& action_bank() {
  static const std::vector<std::string> bank = {
      "walk into the kitchen",     "turn left",
      "turn right",                "go up the stairs",
      "go down the stairs",        "exit the bedroom",
      "enter the bathroom",        "walk down the hallway",
      "stop at the door",          "pass the sofa",
      "wait near the table",       "go through the doorway",
      "walk past the dresser",     "stop by the fireplace",
      "head toward the window",    "walk onto the rug",
      "enter the living room",     "leave the dining room",
      "walk around the bed",       "stop in front of the mirror",
      "go past the piano",         "walk out of the office",
      "turn around",               "stop next to the plant",
  };
  return bank;
}

std::vector<TrajectorySample> gen_trajectory_dataset(const TrajectoryOptions& o, std::uint64_t seed) {
  if (o.count < 0) throw ParameterError("trajectory count must be nonnegative");
  if (o.min_actions < 1 || o.min_actions > o.max_actions) {
    throw ParameterError("need 1 <= min_actions <= max_actions");
  }
  if (o.min_length < 1 || o.min_length > o.max_length) {
    throw ParameterError("need 1 <= min_length <= max_length");
  }
  if (o.max_actions > o.max_length) {
    throw ParameterError("M > T: max_actions " + std::to_string(o.max_actions) + " exceeds max_length " +
                         std::to_string(o.max_length));
  }
  const auto& bank = action_bank();
  if (o.max_actions > static_cast<int>(bank.size())) {
    throw ParameterError("max_actions exceeds the action bank size " + std::to_string(bank.size()));
  }
  if (o.feature_dim < 1 || !(o.noise >= 0.0)) throw ParameterError("bad feature_dim or noise");

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<RowVector> prototypes;
  for (std::size_t a = 0; a < bank.size(); ++a) {
    RowVector p(o.feature_dim);
    for (Index i = 0; i < p.size(); ++i) p[i] = normal(rng);
    prototypes.push_back(std::move(p));
  }
  static const char* kJoiners[] = {", ", " and ", ". "};

  std::vector<TrajectorySample> out;
  out.reserve(static_cast<std::size_t>(o.count));
  for (int n = 0; n < o.count; ++n) {
    const int m = std::uniform_int_distribution<int>(o.min_actions, o.max_actions)(rng);
    const int t = std::uniform_int_distribution<int>(std::max(o.min_length, m), o.max_length)(rng);
    std::vector<int> pool(bank.size());
    std::iota(pool.begin(), pool.end(), 0);
    std::shuffle(pool.begin(), pool.end(), rng);

    TrajectorySample s;
    s.actions.assign(pool.begin(), pool.begin() + m);
    std::string text;
    for (int i = 0; i < m; ++i) {
      const std::string& phrase = bank[static_cast<std::size_t>(s.actions[static_cast<std::size_t>(i)])];
      if (i > 0) text += kJoiners[std::uniform_int_distribution<int>(0, 2)(rng)];
      text += phrase;
      s.sub_instructions.push_back(phrase);
    }
    text += ".";
    s.instruction = Instruction::from_text(text);
    s.chunks = uniform_chunks(m, t);
    s.viewpoints.resize(t, o.feature_dim);
    for (int i = 0; i < m; ++i) {
      const Range& r = s.chunks[static_cast<std::size_t>(i)];
      const RowVector& proto = prototypes[static_cast<std::size_t>(s.actions[static_cast<std::size_t>(i)])];
      for (int row = r.start; row < r.end; ++row) {
        for (Index k = 0; k < proto.size(); ++k) s.viewpoints(row, k) = proto[k] + o.noise * normal(rng);
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

Vocabulary build_vocabulary(const std::vector<TrajectorySample>& extra) {
  std::vector<std::string> corpus = action_bank();
  for (const auto& s : extra) {
    corpus.push_back(s.instruction.text);
    for (const auto& sub : s.sub_instructions) corpus.push_back(sub);
  }
  return Vocabulary::build(corpus);
}

bool is_held_out(std::size_t index, std::uint64_t seed, double fraction) {
  const std::uint64_t h = splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(index)));
  const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
  return u < fraction;
}

// ---------------------------------------------------------------------------
// JSON encodings

nlohmann::json matrix_to_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Index r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix matrix_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.empty()) throw DatasetError("features must be a non-empty array of rows");
  const std::size_t cols = j[0].is_array() ? j[0].size() : 0;
  if (cols == 0) throw DatasetError("feature rows must be non-empty arrays");
  Matrix m(static_cast<Index>(j.size()), static_cast<Index>(cols));
  for (std::size_t r = 0; r < j.size(); ++r) {
    if (!j[r].is_array() || j[r].size() != cols) throw DatasetError("feature rows must all have " + std::to_string(cols) + " entries");
    for (std::size_t c = 0; c < cols; ++c) {
      const auto& v = j[r][c];
      if (!v.is_number()) throw DatasetError("feature entries must be numbers");
      const double d = v.get<double>();
      if (!std::isfinite(d)) throw DatasetError("feature entries must be finite");
      m(static_cast<Index>(r), static_cast<Index>(c)) = d;
    }
  }
  return m;
}

void write_indoor_jsonl(const std::string& path, const std::vector<IndoorSample>& samples) {
  std::string out;
  for (const auto& s : samples) {
    out += nlohmann::json{{"label", s.label}, {"features", matrix_to_json(s.features)}}.dump();
    out += '\n';
  }
  write_text(path, out);
}

std::vector<IndoorSample> read_indoor_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<IndoorSample> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      if (!j.is_object() || !j.contains("label") || !j["label"].is_number_integer()) {
        throw DatasetError("missing integer field \"label\"");
      }
      if (!j.contains("features")) throw DatasetError("missing field \"features\"");
      IndoorSample s;
      s.label = j["label"].get<int>();
      if (s.label < 0) throw DatasetError("label must be nonnegative");
      s.features = matrix_from_json(j["features"]);
      out.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw DatasetError(path + " line " + std::to_string(lineno) + ": " + e.what());
    } catch (const DatasetError& e) {
      throw DatasetError(path + " line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_trajectory_jsonl(const std::string& path, const std::vector<TrajectorySample>& samples) {
  std::string out;
  for (const auto& s : samples) {
    nlohmann::json path_ids = nlohmann::json::array();
    for (Index t = 0; t < s.viewpoints.rows(); ++t) path_ids.push_back("v" + std::to_string(t));
    nlohmann::json chunks = nlohmann::json::array();
    for (const auto& r : s.chunks) chunks.push_back({r.start, r.end});
    nlohmann::json j{{"instruction", s.instruction.text},
                     {"path", path_ids},
                     {"chunk_view", chunks},
                     {"sub_instructions", s.sub_instructions},
                     {"features", matrix_to_json(s.viewpoints)}};
    if (!s.actions.empty()) j["actions"] = s.actions;
    out += j.dump();
    out += '\n';
  }
  write_text(path, out);
}

std::vector<TrajectorySample> read_trajectory_jsonl(const std::string& path) {
  LoadedDataset loaded = load_dataset(path);
  if (!loaded.warnings.empty()) throw DatasetError(path + " " + loaded.warnings.front());
  std::vector<TrajectorySample> out;
  for (const auto& rec : loaded.records) {
    const std::string where = path + " line " + std::to_string(rec.line) + ": ";
    try {
      TrajectorySample s;
      s.instruction = rec.instruction;
      if (!rec.raw.contains("features")) throw DatasetError("missing field \"features\"");
      s.viewpoints = matrix_from_json(rec.raw["features"]);
      const int t = static_cast<int>(rec.path.size());
      if (s.viewpoints.rows() != t) {
        throw DatasetError("features has " + std::to_string(s.viewpoints.rows()) + " rows but path has " +
                           std::to_string(t) + " viewpoints");
      }
      if (rec.raw.contains("sub_instructions")) {
        s.sub_instructions = rec.raw["sub_instructions"].get<std::vector<std::string>>();
      } else {
        for (const auto& sub : split_instruction(rec.instruction)) s.sub_instructions.push_back(sub.text);
      }
      if (rec.raw.contains("actions")) s.actions = rec.raw["actions"].get<std::vector<int>>();
      const int m = static_cast<int>(s.sub_instructions.size());
      s.chunks = rec.chunks ? *rec.chunks : uniform_chunks(m, t);
      if (static_cast<int>(s.chunks.size()) != m) {
        throw AlignmentError(where + std::to_string(m) + " sub-instructions but " +
                             std::to_string(s.chunks.size()) + " chunks");
      }
      out.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw DatasetError(where + e.what());
    } catch (const DatasetError& e) {
      throw DatasetError(where + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

nlohmann::json checkpoint_to_json(const Checkpoint& ckpt) {
  nlohmann::json tensors = nlohmann::json::object();
  for (const auto& [name, m] : ckpt.store.entries()) {
    std::vector<double> data(m.data(), m.data() + m.size());
    tensors[name] = {{"shape", {m.rows(), m.cols()}}, {"data", std::move(data)}};
  }
  return nlohmann::json{{"format_version", kCheckpointVersion},
                        {"config", ckpt.encoder.to_json()},
                        {"vocabulary", ckpt.vocabulary.to_json()},
                        {"ablation", ckpt.ablation},
                        {"tensors", std::move(tensors)},
                        {"frozen", ckpt.store.frozen()}};
}

Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  try {
    if (!j.is_object()) throw LoadError("checkpoint must be a JSON object");
    if (!j.contains("format_version") || !j["format_version"].is_number_integer()) {
      throw LoadError("checkpoint has no format_version");
    }
    const int version = j["format_version"].get<int>();
    if (version != kCheckpointVersion) {
      throw LoadError("checkpoint format_version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
    }
    for (const char* key : {"config", "vocabulary", "tensors", "frozen"}) {
      if (!j.contains(key)) throw LoadError(std::string("checkpoint is missing \"") + key + "\"");
    }
    Checkpoint ckpt;
    try {
      ckpt.encoder = EncoderConfig::from_json(j["config"]);
      ckpt.encoder.validate();
    } catch (const ConfigError& e) {
      throw LoadError(std::string("checkpoint config: ") + e.what());
    }
    ckpt.vocabulary = Vocabulary::from_json(j["vocabulary"]);
    if (ckpt.vocabulary.size() != ckpt.encoder.vocab_size) {
      throw LoadError("vocabulary has " + std::to_string(ckpt.vocabulary.size()) + " tokens but config says " +
                      std::to_string(ckpt.encoder.vocab_size));
    }
    if (j.contains("ablation")) ckpt.ablation = j["ablation"].get<std::string>();
    parse_ablation(ckpt.ablation);

    const auto& tensors = j["tensors"];
    if (!tensors.is_object()) throw LoadError("\"tensors\" must be an object");
    const ShapeMap shapes = parameter_shapes(ckpt.encoder);
    for (const auto& [name, t] : tensors.items()) {
      if (!shapes.count(name)) throw LoadError("unexpected tensor '" + name + "' for this config");
    }
    for (const auto& [name, shape] : shapes) {
      if (!tensors.contains(name)) throw LoadError("missing tensor '" + name + "'");
      const auto& t = tensors[name];
      const auto dims = t.at("shape").get<std::vector<Index>>();
      if (dims.size() != 2 || dims[0] != shape.first || dims[1] != shape.second) {
        std::string got = "[";
        for (std::size_t i = 0; i < dims.size(); ++i) got += (i ? "," : "") + std::to_string(dims[i]);
        got += "]";
        throw LoadError("shape mismatch for '" + name + "': checkpoint has " + got + ", config expects " +
                        shape_string(shape.first, shape.second));
      }
      const auto data = t.at("data").get<std::vector<double>>();
      if (static_cast<Index>(data.size()) != shape.first * shape.second) {
        throw LoadError("tensor '" + name + "' has " + std::to_string(data.size()) + " values, expected " +
                        std::to_string(shape.first * shape.second));
      }
      Matrix m(shape.first, shape.second);
      if (!data.empty()) std::memcpy(m.data(), data.data(), sizeof(double) * data.size());
      ckpt.store.add(name, std::move(m));
    }
    for (const auto& name : j["frozen"].get<std::vector<std::string>>()) {
      if (!ckpt.store.contains(name)) throw LoadError("frozen name '" + name + "' is not a tensor");
      ckpt.store.set_frozen(name, true);
    }
    return ckpt;
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("malformed checkpoint: ") + e.what());
  } catch (const ParameterError& e) {
    throw LoadError(std::string("checkpoint: ") + e.what());
  }
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  write_text(path, checkpoint_to_json(ckpt).dump());
}

Checkpoint load_checkpoint(const std::string& path) {
  std::string text;
  try {
    text = read_text(path);
  } catch (const IoError& e) {
    throw LoadError(e.what());
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw LoadError(path + ": malformed or truncated checkpoint (" + e.what() + ")");
  }
  try {
    return checkpoint_from_json(j);
  } catch (const LoadError& e) {
    throw LoadError(path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Losses

Var stage1_loss(Tape& tape, const ParamStore& store, const EncoderConfig& enc,
                const std::vector<const IndoorSample*>& batch, std::vector<int>* predictions) {
  if (batch.empty()) throw DatasetError("empty stage-1 batch");
  std::vector<Var> cls;
  std::vector<int> labels;
  for (const IndoorSample* s : batch) {
    if (s->label < 0 || s->label >= enc.num_classes) {
      throw DatasetError("label " + std::to_string(s->label) + " outside [0, " + std::to_string(enc.num_classes) + ")");
    }
    cls.push_back(visual_encode(tape, store, enc, s->features).cls);
    labels.push_back(s->label);
  }
  Var logits = classify_logits(tape, store, concat_rows(cls));
  if (predictions) {
    predictions->clear();
    for (Index r = 0; r < logits.rows(); ++r) predictions->push_back(static_cast<int>(argmax_row(logits.value(), r)));
  }
  return cross_entropy(logits, labels);
}

namespace {

Var pooled_text(Tape& tape, const ParamStore& store, const EncoderConfig& enc, const Vocabulary& vocab,
                const std::string& text) {
  return text_encode(tape, store, enc, tokenize(text, vocab, enc.max_text_len)).pooled;
}

Var pooled_texts(Tape& tape, const ParamStore& store, const EncoderConfig& enc, const Vocabulary& vocab,
                 const std::vector<std::string>& texts) {
  std::vector<Var> rows;
  for (const auto& t : texts) rows.push_back(pooled_text(tape, store, enc, vocab, t));
  return concat_rows(rows);
}

void check_alignment(const TrajectorySample& s) {
  if (s.sub_instructions.size() != s.chunks.size()) {
    throw AlignmentError(std::to_string(s.sub_instructions.size()) + " sub-instructions but " +
                         std::to_string(s.chunks.size()) + " sub-paths");
  }
  if (s.sub_instructions.empty()) throw AlignmentError("trajectory has no sub-instructions");
}

}  // namespace

Stage2Loss stage2_loss(Tape& tape, const ParamStore& store, const EncoderConfig& enc, const Vocabulary& vocab,
                       const std::vector<const TrajectorySample*>& batch, const Stage2Options& o,
                       const std::vector<const Matrix*>& viewpoint_cache) {
  if (batch.empty()) throw DatasetError("empty stage-2 batch");
  if (!viewpoint_cache.empty() && viewpoint_cache.size() != batch.size()) {
    throw ContractError("viewpoint cache does not match the batch");
  }
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  const bool sub_only = o.ablation == Ablation::sub_only;

  std::vector<Var> ind_terms;
  std::vector<Var> sub_terms;
  std::vector<Var> cnt_text, cnt_visual, ove_text, ove_visual;

  for (std::size_t b = 0; b < batch.size(); ++b) {
    const TrajectorySample& s = *batch[b];
    check_alignment(s);
    Var views = viewpoint_cache.empty() ? encode_viewpoints(tape, store, enc, s.viewpoints)
                                        : tape.constant(*viewpoint_cache[b]);
    if (sub_only) {
      Var text = project_text(tape, store, pooled_texts(tape, store, enc, vocab, s.sub_instructions));
      CrossModalOutput cross = cross_modal_encode(tape, store, enc, views, std::nullopt, s.chunks);
      Var visual = project_visual(tape, store, cross.subpath_features);
      sub_terms.push_back(contrastive_loss(similarity_matrix(text, visual), o.temperature, o.smoothing, o.reverse_kl));
      continue;
    }
    const ContextPromptSet prompts = build_prompt_set(s.sub_instructions);
    Var seq = pooled_texts(tape, store, enc, vocab, prompts.sequential_prompts);
    CrossModalOutput cross = cross_modal_encode(tape, store, enc, views, seq, s.chunks);
    if (uses_individual(o.ablation)) {
      Var text = project_text(tape, store, pooled_texts(tape, store, enc, vocab, prompts.individual_prompts));
      Var visual = project_visual(tape, store, cross.subpath_features);
      auto terms = contrastive_terms(similarity_matrix(text, visual), o.temperature, o.smoothing, o.reverse_kl);
      for (const Var& t : terms.per_index) ind_terms.push_back(scale(t, inv_b));
    }
    cnt_text.push_back(pooled_text(tape, store, enc, vocab, prompts.count_prompt));
    cnt_visual.push_back(cross.count_feature);
    if (uses_overall(o.ablation)) {
      ove_text.push_back(pooled_text(tape, store, enc, vocab, prompts.overall_prompt));
      ove_visual.push_back(cross.overall_visual);
    }
  }

  auto batch_loss = [&](const std::vector<Var>& text, const std::vector<Var>& visual) {
    Var t = project_text(tape, store, concat_rows(text));
    Var v = project_visual(tape, store, concat_rows(visual));
    return contrastive_loss(similarity_matrix(t, v), o.temperature, o.smoothing, o.reverse_kl);
  };

  Stage2Loss out;
  if (sub_only) {
    Var l_sub = sub_terms.front();
    for (std::size_t i = 1; i < sub_terms.size(); ++i) l_sub = add(l_sub, sub_terms[i]);
    l_sub = scale(l_sub, inv_b);
    out.total = l_sub;
    out.report = total_loss({}, 0.0, 0.0, o.lambda1, o.lambda2, o.ablation, l_sub.scalar());
    return out;
  }

  // Summation order mirrors LossReport::recomposed so the two agree bitwise.
  Var l_cnt = batch_loss(cnt_text, cnt_visual);
  std::optional<Var> l_ove;
  if (uses_overall(o.ablation)) l_ove = batch_loss(ove_text, ove_visual);
  Var total = scale(l_cnt, o.lambda2);
  if (l_ove) total = add(scale(*l_ove, o.lambda1), total);
  if (!ind_terms.empty()) {
    Var ind = ind_terms.front();
    for (std::size_t i = 1; i < ind_terms.size(); ++i) ind = add(ind, ind_terms[i]);
    total = add(total, ind);
  }
  std::vector<double> l_ind;
  for (const Var& t : ind_terms) l_ind.push_back(t.scalar());
  out.total = total;
  out.report = total_loss(l_ind, l_ove ? l_ove->scalar() : 0.0, l_cnt.scalar(), o.lambda1, o.lambda2, o.ablation);
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

double classification_accuracy(const ParamStore& store, const EncoderConfig& enc,
                               const std::vector<IndoorSample>& data) {
  if (data.empty()) return 0.0;
  std::size_t correct = 0;
  constexpr std::size_t kChunk = 50;
  for (std::size_t i = 0; i < data.size(); i += kChunk) {
    std::vector<const IndoorSample*> batch;
    for (std::size_t k = i; k < std::min(data.size(), i + kChunk); ++k) batch.push_back(&data[k]);
    Tape tape;
    std::vector<int> pred;
    stage1_loss(tape, store, enc, batch, &pred);
    for (std::size_t k = 0; k < batch.size(); ++k) correct += pred[k] == batch[k]->label ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

namespace {

RetrievalFeatures features_for(const ParamStore& store, const EncoderConfig& enc, const Vocabulary& vocab,
                               Ablation ablation, const std::vector<TrajectorySample>& data) {
  if (data.empty()) throw DatasetError("evaluation dataset is empty");
  RetrievalFeatures out;
  int m_max = 0;
  for (const auto& s : data) {
    check_alignment(s);
    const ContextPromptSet prompts = build_prompt_set(s.sub_instructions);
    Tape tape;
    Var views = encode_viewpoints(tape, store, enc, s.viewpoints);
    TrajectoryFeatures f;
    f.m = prompts.m;
    m_max = std::max(m_max, f.m);
    CrossModalOutput cross;
    if (ablation == Ablation::sub_only) {
      cross = cross_modal_encode(tape, store, enc, views, std::nullopt, s.chunks);
      f.text_sub = project_text(tape, store, pooled_texts(tape, store, enc, vocab, s.sub_instructions)).value();
    } else {
      Var seq = pooled_texts(tape, store, enc, vocab, prompts.sequential_prompts);
      cross = cross_modal_encode(tape, store, enc, views, seq, s.chunks);
      f.text_sub = project_text(tape, store, pooled_texts(tape, store, enc, vocab, prompts.individual_prompts)).value();
    }
    f.visual_sub = project_visual(tape, store, cross.subpath_features).value();
    f.visual_overall = project_visual(tape, store, cross.overall_visual).value();
    f.visual_count = project_visual(tape, store, cross.count_feature).value();
    f.text_overall = project_text(tape, store, pooled_text(tape, store, enc, vocab, prompts.overall_prompt)).value();
    out.trajectories.push_back(std::move(f));
  }
  Tape tape;
  std::vector<std::string> counts;
  for (int k = 1; k <= m_max; ++k) counts.push_back(count_prompt(k));
  out.count_text = project_text(tape, store, pooled_texts(tape, store, enc, vocab, counts)).value();
  return out;
}

}  // namespace

RetrievalFeatures retrieval_features(const Checkpoint& ckpt, const std::vector<TrajectorySample>& data) {
  return features_for(ckpt.store, ckpt.encoder, ckpt.vocabulary, parse_ablation(ckpt.ablation), data);
}

RetrievalMetrics retrieval_metrics(const RetrievalFeatures& features) {
  const auto& ts = features.trajectories;
  if (ts.empty()) throw DatasetError("no trajectories to evaluate");
  RetrievalMetrics out;
  out.trajectories = ts.size();
  std::size_t sub_hits = 0, cnt_hits = 0, traj_hits = 0;
  for (const auto& f : ts) {
    if (f.text_sub.rows() != f.m || f.visual_sub.rows() != f.m) {
      throw AlignmentError("feature rows do not match M = " + std::to_string(f.m));
    }
    const Matrix s = similarity_matrix(f.text_sub, f.visual_sub);
    for (Index i = 0; i < s.rows(); ++i) sub_hits += argmax_row(s, i) == i ? 1 : 0;
    out.subpairs += static_cast<std::size_t>(f.m);

    Index best = -1;
    double best_score = 0.0;
    for (Index k = 0; k < features.count_text.rows(); ++k) {
      const double c = cosine_similarity(f.visual_count.row(0), features.count_text.row(k)).value;
      if (best < 0 || c > best_score) {
        best = k;
        best_score = c;
      }
    }
    cnt_hits += best + 1 == f.m ? 1 : 0;
  }
  const Index n = static_cast<Index>(ts.size());
  Matrix text(n, ts.front().text_overall.cols());
  Matrix visual(n, ts.front().visual_overall.cols());
  for (Index b = 0; b < n; ++b) {
    text.row(b) = ts[static_cast<std::size_t>(b)].text_overall.row(0);
    visual.row(b) = ts[static_cast<std::size_t>(b)].visual_overall.row(0);
  }
  const Matrix s = similarity_matrix(text, visual);
  for (Index b = 0; b < n; ++b) traj_hits += argmax_row(s, b) == b ? 1 : 0;

  out.subpair_accuracy = static_cast<double>(sub_hits) / static_cast<double>(out.subpairs);
  out.count_accuracy = static_cast<double>(cnt_hits) / static_cast<double>(n);
  out.trajectory_accuracy = static_cast<double>(traj_hits) / static_cast<double>(n);
  return out;
}

RetrievalMetrics evaluate_retrieval(const Checkpoint& ckpt, const std::vector<TrajectorySample>& data) {
  return retrieval_metrics(retrieval_features(ckpt, data));
}

nlohmann::json RetrievalMetrics::to_json() const {
  return nlohmann::json{{"subpair_accuracy", subpair_accuracy},
                        {"trajectory_accuracy", trajectory_accuracy},
                        {"count_accuracy", count_accuracy},
                        {"trajectories", trajectories},
                        {"subpairs", subpairs}};
}

// ---------------------------------------------------------------------------
// Stage 1

Stage1Result run_stage1(const RunConfig& cfg) {
  cfg.validate();
  const std::vector<IndoorSample> data =
      cfg.indoor_data.empty() ? gen_indoor_dataset(cfg.indoor_classes, cfg.indoor_samples_per_class,
                                                   cfg.indoor_noise, cfg.num_patches, cfg.feature_dim, cfg.seed)
                              : read_indoor_jsonl(cfg.indoor_data);
  const Vocabulary vocab = cfg.trajectory_data.empty() ? build_vocabulary()
                                                       : build_vocabulary(read_trajectory_jsonl(cfg.trajectory_data));
  return run_stage1(cfg, data, vocab);
}

Stage1Result run_stage1(const RunConfig& cfg, const std::vector<IndoorSample>& data, const Vocabulary& vocab) {
  cfg.validate();
  const EncoderConfig enc = cfg.encoder(vocab.size());
  enc.validate();
  for (const auto& s : data) {
    if (s.label < 0 || s.label >= enc.num_classes) {
      throw DatasetError("label " + std::to_string(s.label) + " outside [0, " + std::to_string(enc.num_classes) + ")");
    }
    if (s.features.cols() != enc.feature_dim || s.features.rows() > enc.num_patches) {
      throw DatasetError("indoor sample " + shape_string(s.features) + " does not fit " +
                         std::to_string(enc.num_patches) + " patches of width " + std::to_string(enc.feature_dim));
    }
  }

  Stage1Result result;
  result.checkpoint.encoder = enc;
  result.checkpoint.vocabulary = vocab;
  result.checkpoint.ablation = cfg.ablation;
  ParamStore& store = result.checkpoint.store;
  store = init_parameters(enc, cfg.seed);
  const auto trainable = trainable_parameters(Stage::stage1, store);
  store.freeze_all_except(trainable);
  const ParamStore snapshot = store;

  result.prompt_parameters = static_cast<std::size_t>(enc.bank_size()) * static_cast<std::size_t>(enc.prompt_count) *
                             static_cast<std::size_t>(enc.width);
  result.head_parameters = head_parameter_count(enc);
  result.trainable_parameters = store.trainable_count();

  const auto split = split_dataset(data, cfg.seed, cfg.val_fraction);
  if (split.train.empty()) throw DatasetError("stage-1 training split is empty");

  Optimizer opt(cfg.optim(cfg.stage1_lr));
  std::mt19937_64 rng(splitmix64(cfg.seed ^ 0x51A6E1ull));
  bool capped = false;
  for (int epoch = 1; epoch <= cfg.stage1_epochs && !capped; ++epoch) {
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (const auto& batch : make_batches(split.train, cfg.stage1_batch_size, rng)) {
      Tape tape;
      Var loss = stage1_loss(tape, store, enc, batch);
      if (!std::isfinite(loss.scalar())) throw NumericError("stage-1 loss is not finite");
      tape.backward(loss);
      opt.step(store, tape.parameter_gradients());
      assert_frozen(store, snapshot);
      loss_sum += loss.scalar();
      ++batches;
      ++result.steps;
      if (cfg.stage1_max_steps > 0 && result.steps >= cfg.stage1_max_steps) {
        capped = true;
        break;
      }
    }
    Stage1Epoch e;
    e.epoch = epoch;
    e.loss = loss_sum / static_cast<double>(std::max<std::size_t>(batches, 1));
    e.train_accuracy = classification_accuracy(store, enc, split.train);
    e.val_accuracy = classification_accuracy(store, enc, split.held_out);
    result.epochs.push_back(e);
  }
  if (result.epochs.empty()) {
    result.train_accuracy = classification_accuracy(store, enc, split.train);
    result.val_accuracy = classification_accuracy(store, enc, split.held_out);
  } else {
    result.train_accuracy = result.epochs.back().train_accuracy;
    result.val_accuracy = result.epochs.back().val_accuracy;
  }

  if (!cfg.out_dir.empty()) {
    std::string csv = "epoch,loss,train_accuracy,val_accuracy\n";
    for (const auto& e : result.epochs) {
      csv += std::to_string(e.epoch) + "," + format_double(e.loss) + "," + format_double(e.train_accuracy) + "," +
             format_double(e.val_accuracy) + "\n";
    }
    write_text(join_path(cfg.out_dir, "stage1_log.csv"), csv);
    nlohmann::json summary{{"stage", "stage1"},
                           {"epochs", result.epochs.size()},
                           {"steps", result.steps},
                           {"train_samples", split.train.size()},
                           {"held_out_samples", split.held_out.size()},
                           {"train_accuracy", result.train_accuracy},
                           {"val_accuracy", result.val_accuracy},
                           {"prompt_parameters", result.prompt_parameters},
                           {"head_parameters", result.head_parameters},
                           {"trainable_parameters", result.trainable_parameters},
                           {"config", cfg.to_json()}};
    write_text(join_path(cfg.out_dir, "stage1_summary.json"), summary.dump(2) + "\n");
    save_checkpoint(result.checkpoint, join_path(cfg.out_dir, "stage1.ckpt.json"));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Stage 2

std::string stage2_csv_header(Ablation a) {
  std::string h = "step,epoch";
  if (a == Ablation::sub_only) return h + ",l_sub,total";
  if (uses_individual(a)) h += ",l_ind_sum";
  if (uses_overall(a)) h += ",l_ove";
  return h + ",l_cnt,total";
}

std::string stage2_csv_row(const Stage2Step& s, Ablation a) {
  std::string r = std::to_string(s.step) + "," + std::to_string(s.epoch);
  if (a == Ablation::sub_only) return r + "," + format_double(*s.report.l_sub) + "," + format_double(s.tape_total);
  if (uses_individual(a)) r += "," + format_double(s.report.l_ind_sum());
  if (uses_overall(a)) r += "," + format_double(*s.report.l_ove);
  return r + "," + format_double(*s.report.l_cnt) + "," + format_double(s.tape_total);
}

Stage2Result run_stage2(const RunConfig& cfg) {
  cfg.validate();
  std::string ckpt_path = cfg.stage1_checkpoint;
  if (ckpt_path.empty()) {
    if (cfg.out_dir.empty()) throw ConfigError("stage2 needs stage1_checkpoint or out_dir");
    ckpt_path = join_path(cfg.out_dir, "stage1.ckpt.json");
  }
  const Checkpoint stage1 = load_checkpoint(ckpt_path);
  TrajectoryOptions o;
  o.count = cfg.trajectory_count;
  o.min_actions = cfg.min_actions;
  o.max_actions = cfg.max_actions;
  o.min_length = cfg.min_length;
  o.max_length = cfg.max_length;
  o.noise = cfg.trajectory_noise;
  o.feature_dim = stage1.encoder.feature_dim;
  const auto data = cfg.trajectory_data.empty() ? gen_trajectory_dataset(o, cfg.seed)
                                                : read_trajectory_jsonl(cfg.trajectory_data);
  return run_stage2(cfg, stage1, data);
}

Stage2Result run_stage2(const RunConfig& cfg, const Checkpoint& stage1, const std::vector<TrajectorySample>& data) {
  cfg.validate();
  Stage2Options opts;
  opts.ablation = cfg.objective();
  opts.lambda1 = cfg.lambda1;
  opts.lambda2 = cfg.lambda2;
  opts.temperature = cfg.temperature;
  opts.smoothing = cfg.smoothing;
  opts.reverse_kl = cfg.reverse_kl;

  Stage2Result result;
  result.checkpoint = stage1;
  result.checkpoint.ablation = to_string(opts.ablation);
  const EncoderConfig& enc = result.checkpoint.encoder;
  const Vocabulary& vocab = result.checkpoint.vocabulary;
  ParamStore& store = result.checkpoint.store;
  for (const auto& s : data) {
    check_alignment(s);
    if (s.viewpoints.cols() != enc.feature_dim) {
      throw DatasetError("viewpoint features have width " + std::to_string(s.viewpoints.cols()) + ", encoder expects " +
                         std::to_string(enc.feature_dim));
    }
  }
  store.freeze_all_except(trainable_parameters(Stage::stage2, store, cfg.joint_prompts));
  const ParamStore snapshot = store;

  const auto split = split_dataset(data, cfg.seed, cfg.val_fraction);
  if (split.train.empty()) throw DatasetError("stage-2 training split is empty");

  // The visual side is frozen unless prompts are tuned jointly, so viewpoint
  // embeddings can be computed once.
  std::vector<Matrix> cache;
  if (!cfg.joint_prompts) {
    for (const auto& s : split.train) {
      Tape tape;
      cache.push_back(encode_viewpoints(tape, store, enc, s.viewpoints).value());
    }
  }

  Optimizer opt(cfg.optim(cfg.stage2_lr));
  std::mt19937_64 rng(splitmix64(cfg.seed ^ 0x52A6E2ull));
  long step = 0;
  bool capped = false;
  for (int epoch = 1; epoch <= cfg.stage2_epochs && !capped; ++epoch) {
    double total_sum = 0.0;
    std::size_t batches = 0;
    for (const auto& batch : make_batches(split.train, cfg.stage2_batch_size, rng)) {
      std::vector<const Matrix*> views;
      if (!cache.empty()) {
        for (const TrajectorySample* s : batch) views.push_back(&cache[static_cast<std::size_t>(s - split.train.data())]);
      }
      Tape tape;
      Stage2Loss loss = stage2_loss(tape, store, enc, vocab, batch, opts, views);
      const double t = loss.total.scalar();
      if (!std::isfinite(t)) throw NumericError("stage-2 loss is not finite at step " + std::to_string(step + 1));
      if (std::abs(t - loss.report.total) > 1e-12 * std::max(1.0, std::abs(t))) {
        throw NumericError("stage-2 total " + format_double(t) + " disagrees with its components " +
                           format_double(loss.report.total));
      }
      tape.backward(loss.total);
      opt.step(store, tape.parameter_gradients());
      assert_frozen(store, snapshot);
      ++step;
      result.steps.push_back(Stage2Step{step, epoch, loss.report, t});
      total_sum += t;
      ++batches;
      if (cfg.stage2_max_steps > 0 && step >= cfg.stage2_max_steps) {
        capped = true;
        break;
      }
    }
    Stage2Epoch e;
    e.epoch = epoch;
    e.mean_total = total_sum / static_cast<double>(std::max<std::size_t>(batches, 1));
    if (!split.held_out.empty()) {
      e.held_out = retrieval_metrics(features_for(store, enc, vocab, opts.ablation, split.held_out));
    }
    result.epochs.push_back(e);
  }
  if (!split.held_out.empty()) {
    result.held_out = result.epochs.empty()
                          ? retrieval_metrics(features_for(store, enc, vocab, opts.ablation, split.held_out))
                          : result.epochs.back().held_out;
  }

  if (!cfg.out_dir.empty()) {
    std::string csv = stage2_csv_header(opts.ablation) + "\n";
    for (const auto& s : result.steps) csv += stage2_csv_row(s, opts.ablation) + "\n";
    write_text(join_path(cfg.out_dir, "stage2_steps.csv"), csv);
    std::string ecsv = "epoch,mean_total,subpair_accuracy,trajectory_accuracy,count_accuracy\n";
    for (const auto& e : result.epochs) {
      ecsv += std::to_string(e.epoch) + "," + format_double(e.mean_total) + "," +
              format_double(e.held_out.subpair_accuracy) + "," + format_double(e.held_out.trajectory_accuracy) + "," +
              format_double(e.held_out.count_accuracy) + "\n";
    }
    write_text(join_path(cfg.out_dir, "stage2_epochs.csv"), ecsv);
    nlohmann::json summary{{"stage", "stage2"},
                           {"ablation", to_string(opts.ablation)},
                           {"epochs", result.epochs.size()},
                           {"steps", result.steps.size()},
                           {"train_trajectories", split.train.size()},
                           {"held_out_trajectories", split.held_out.size()},
                           {"trainable_parameters", store.trainable_count()},
                           {"held_out", result.held_out.to_json()},
                           {"config", cfg.to_json()}};
    write_text(join_path(cfg.out_dir, "stage2_summary.json"), summary.dump(2) + "\n");
    save_checkpoint(result.checkpoint, join_path(cfg.out_dir, "stage2.ckpt.json"));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Gradient check

RunConfig gradcheck_config(std::uint64_t seed) {
  RunConfig cfg;
  cfg.seed = seed;
  cfg.layers = 2;
  cfg.text_layers = 1;
  cfg.cross_layers = 1;
  cfg.width = 8;
  cfg.heads = 2;
  cfg.ff_mult = 2;
  cfg.feature_dim = 6;
  cfg.num_patches = 3;
  cfg.max_text_len = 24;
  cfg.prompt_count = 2;
  cfg.prompted_layers = 2;
  cfg.proj_dim = 8;
  cfg.indoor_classes = 3;
  cfg.out_dir.clear();
  return cfg;
}

GradientCheckResult gradient_check(const RunConfig& cfg, double eps) {
  cfg.validate();
  const Vocabulary vocab = build_vocabulary();
  const EncoderConfig enc = cfg.encoder(vocab.size());
  enc.validate();
  ParamStore base = init_parameters(enc, cfg.seed);
  // Move away from the near-zero initialization so every path carries signal.
  std::mt19937_64 rng(splitmix64(cfg.seed ^ 0x6C0ull));
  std::normal_distribution<double> normal(0.0, 0.3);
  for (const auto& name : base.names()) {
    Matrix& m = base.at(name);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] += normal(rng);
  }

  GradientCheckResult out;

  const auto indoor = gen_indoor_dataset(enc.num_classes, 2, 0.1, enc.num_patches, enc.feature_dim, cfg.seed);
  std::vector<const IndoorSample*> batch1;
  for (const auto& s : indoor) batch1.push_back(&s);
  ParamStore s1 = base;
  s1.freeze_all_except(trainable_parameters(Stage::stage1, s1));
  out.stage1 = finite_difference_check(
      [&](Tape& t, const ParamStore& st) { return stage1_loss(t, st, enc, batch1); }, s1, eps);

  TrajectoryOptions o;
  o.count = 2;
  o.min_actions = o.max_actions = 3;
  o.min_length = o.max_length = 6;
  o.feature_dim = enc.feature_dim;
  const auto trajectories = gen_trajectory_dataset(o, cfg.seed);
  std::vector<const TrajectorySample*> batch2;
  for (const auto& s : trajectories) batch2.push_back(&s);
  Stage2Options opts;
  opts.ablation = Ablation::full;
  opts.lambda1 = cfg.lambda1;
  opts.lambda2 = cfg.lambda2;
  opts.temperature = cfg.temperature;
  opts.smoothing = cfg.smoothing;
  opts.reverse_kl = cfg.reverse_kl;
  ParamStore s2 = base;
  s2.freeze_all_except(trainable_parameters(Stage::stage2, s2, cfg.joint_prompts));
  out.stage2 = finite_difference_check(
      [&](Tape& t, const ParamStore& st) { return stage2_loss(t, st, enc, vocab, batch2, opts).total; }, s2, eps);
  return out;
}

}  // namespace panda
