#include "panda/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "panda/errors.hpp"

namespace panda {

namespace {

constexpr double kInitStd = 0.02;
constexpr double kLayerNormEps = 1e-5;

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

void add_layer_shapes(ShapeMap& s, const std::string& p, Index d, Index ff) {
  s[p + ".ln1.g"] = {1, d};
  s[p + ".ln1.b"] = {1, d};
  for (const char* w : {"wq", "wk", "wv", "wo"}) s[p + ".attn." + w] = {d, d};
  for (const char* b : {"bq", "bk", "bv", "bo"}) s[p + ".attn." + b] = {1, d};
  s[p + ".ln2.g"] = {1, d};
  s[p + ".ln2.b"] = {1, d};
  s[p + ".ff.w1"] = {d, ff};
  s[p + ".ff.b1"] = {1, ff};
  s[p + ".ff.w2"] = {ff, d};
  s[p + ".ff.b2"] = {1, d};
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

bool starts_with(const std::string& s, const std::string& prefix) { return s.rfind(prefix, 0) == 0; }

Var param(Tape& t, const ParamStore& s, const std::string& name) { return t.parameter(s, name); }

Var linear(Tape& t, const ParamStore& s, const std::string& p, const Var& x) {
  return add_row(matmul(x, param(t, s, p + ".w")), param(t, s, p + ".b"));
}

Var norm(Tape& t, const ParamStore& s, const std::string& p, const Var& x) {
  return layer_norm(x, param(t, s, p + ".g"), param(t, s, p + ".b"), kLayerNormEps);
}

Var attention(Tape& t, const ParamStore& s, const std::string& p, const Var& x, int heads) {
  Var q = add_row(matmul(x, param(t, s, p + ".wq")), param(t, s, p + ".bq"));
  Var k = add_row(matmul(x, param(t, s, p + ".wk")), param(t, s, p + ".bk"));
  Var v = add_row(matmul(x, param(t, s, p + ".wv")), param(t, s, p + ".bv"));
  const Index dh = x.cols() / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Var qh = slice_cols(q, h * dh, dh);
    Var kh = slice_cols(k, h * dh, dh);
    Var vh = slice_cols(v, h * dh, dh);
    Var weights = softmax(scale(matmul(qh, transpose(kh)), inv), 1, 1.0);
    outs.push_back(matmul(weights, vh));
  }
  Var merged = heads == 1 ? outs.front() : concat_cols(outs);
  return add_row(matmul(merged, param(t, s, p + ".wo")), param(t, s, p + ".bo"));
}

void check_head(const ParamStore& store) {
  for (const char* n : {"head.fc1.w", "head.fc1.b", "head.fc2.w", "head.fc2.b"}) {
    if (!store.contains(n)) throw ConfigError(std::string("classifier head parameter missing: ") + n);
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void EncoderConfig::validate() const {
  require(layers >= 1 && text_layers >= 1 && cross_layers >= 1, "layer counts must be positive");
  require(width >= 1 && heads >= 1 && width % heads == 0, "width must be a positive multiple of heads");
  require(ff_mult >= 1, "ff_mult must be positive");
  require(feature_dim >= 1, "feature_dim must be positive");
  require(num_patches >= 1, "num_patches must be positive");
  require(max_text_len >= 3, "max_text_len must be at least 3");
  require(prompt_count >= 0, "prompt_count must be nonnegative");
  require(prompted_layers >= 0 && prompted_layers <= layers, "prompted_layers must lie in [0, layers]");
  require(num_classes >= 2, "num_classes must be at least 2");
  require(proj_dim >= 1, "proj_dim must be positive");
  require(vocab_size >= 4, "vocab_size must cover the reserved tokens");
}

int EncoderConfig::bank_size() const {
  if (prompt_count == 0 || prompted_layers == 0) return 0;
  return deep_prompts ? prompted_layers : 1;
}

nlohmann::json EncoderConfig::to_json() const {
  return nlohmann::json{{"layers", layers},
                        {"text_layers", text_layers},
                        {"cross_layers", cross_layers},
                        {"width", width},
                        {"heads", heads},
                        {"ff_mult", ff_mult},
                        {"feature_dim", feature_dim},
                        {"num_patches", num_patches},
                        {"max_text_len", max_text_len},
                        {"prompt_count", prompt_count},
                        {"prompted_layers", prompted_layers},
                        {"num_classes", num_classes},
                        {"proj_dim", proj_dim},
                        {"vocab_size", vocab_size},
                        {"deep_prompts", deep_prompts}};
}

EncoderConfig EncoderConfig::from_json(const nlohmann::json& j) {
  EncoderConfig c;
  try {
    c.layers = j.at("layers").get<int>();
    c.text_layers = j.at("text_layers").get<int>();
    c.cross_layers = j.at("cross_layers").get<int>();
    c.width = j.at("width").get<int>();
    c.heads = j.at("heads").get<int>();
    c.ff_mult = j.at("ff_mult").get<int>();
    c.feature_dim = j.at("feature_dim").get<int>();
    c.num_patches = j.at("num_patches").get<int>();
    c.max_text_len = j.at("max_text_len").get<int>();
    c.prompt_count = j.at("prompt_count").get<int>();
    c.prompted_layers = j.at("prompted_layers").get<int>();
    c.num_classes = j.at("num_classes").get<int>();
    c.proj_dim = j.at("proj_dim").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.deep_prompts = j.at("deep_prompts").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("encoder config: ") + e.what());
  }
  c.validate();
  return c;
}

ShapeMap parameter_shapes(const EncoderConfig& cfg) {
  cfg.validate();
  const Index d = cfg.width;
  const Index ff = static_cast<Index>(cfg.width) * cfg.ff_mult;
  ShapeMap s;
  s["visual.patch.w"] = {cfg.feature_dim, d};
  s["visual.patch.b"] = {1, d};
  s["visual.cls"] = {1, d};
  s["visual.pos"] = {1 + cfg.num_patches, d};
  for (int i = 0; i < cfg.layers; ++i) add_layer_shapes(s, "visual.layer" + std::to_string(i), d, ff);
  s["visual.ln_f.g"] = {1, d};
  s["visual.ln_f.b"] = {1, d};
  for (int i = 0; i < cfg.bank_size(); ++i) s[prompt_name(i)] = {cfg.prompt_count, d};

  s["head.fc1.w"] = {d, d};
  s["head.fc1.b"] = {1, d};
  s["head.fc2.w"] = {d, cfg.num_classes};
  s["head.fc2.b"] = {1, cfg.num_classes};

  s["text.tok"] = {cfg.vocab_size, d};
  s["text.pos"] = {cfg.max_text_len, d};
  for (int i = 0; i < cfg.text_layers; ++i) add_layer_shapes(s, "text.layer" + std::to_string(i), d, ff);
  s["text.ln_f.g"] = {1, d};
  s["text.ln_f.b"] = {1, d};

  s["cross.cnt"] = {1, d};
  s["cross.type"] = {3, d};
  for (int i = 0; i < cfg.cross_layers; ++i) add_layer_shapes(s, "cross.layer" + std::to_string(i), d, ff);

  s["proj.text.w"] = {d, cfg.proj_dim};
  s["proj.text.b"] = {1, cfg.proj_dim};
  s["proj.visual.w"] = {d, cfg.proj_dim};
  s["proj.visual.b"] = {1, cfg.proj_dim};
  return s;
}

ParamStore init_parameters(const EncoderConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, kInitStd);
  auto draw = [&] {
    for (;;) {
      const double v = normal(rng);
      if (std::abs(v) <= 2.0 * kInitStd) return v;
    }
  };
  ParamStore store;
  for (const auto& [name, shape] : parameter_shapes(cfg)) {
    Matrix m;
    const bool bias = ends_with(name, ".b") || ends_with(name, ".bq") || ends_with(name, ".bk") ||
                      ends_with(name, ".bv") || ends_with(name, ".bo") || ends_with(name, ".b1") ||
                      ends_with(name, ".b2");
    if (ends_with(name, ".g")) {
      m = Matrix::Ones(shape.first, shape.second);
    } else if (bias) {
      m = Matrix::Zero(shape.first, shape.second);
    } else {
      m.resize(shape.first, shape.second);
      for (Index i = 0; i < m.size(); ++i) m.data()[i] = draw();
    }
    store.add(name, std::move(m));
  }
  return store;
}

std::string prompt_name(int layer_index) { return "visual.prompt." + std::to_string(layer_index); }

std::vector<std::string> prompt_bank_names(const EncoderConfig& cfg) {
  std::vector<std::string> out;
  for (int i = 0; i < cfg.bank_size(); ++i) out.push_back(prompt_name(i));
  return out;
}

std::size_t head_parameter_count(const EncoderConfig& cfg) {
  const auto d = static_cast<std::size_t>(cfg.width);
  const auto c = static_cast<std::size_t>(cfg.num_classes);
  return d * d + d + d * c + c;
}

// ---------------------------------------------------------------------------
// Encoders

Var transformer_layer(Tape& tape, const ParamStore& store, const std::string& prefix, const Var& x,
                      int heads) {
  Var h = add(x, attention(tape, store, prefix + ".attn", norm(tape, store, prefix + ".ln1", x), heads));
  Var ff_in = norm(tape, store, prefix + ".ln2", h);
  Var ff = add_row(matmul(gelu(add_row(matmul(ff_in, param(tape, store, prefix + ".ff.w1")),
                                       param(tape, store, prefix + ".ff.b1"))),
                          param(tape, store, prefix + ".ff.w2")),
                   param(tape, store, prefix + ".ff.b2"));
  return add(h, ff);
}

LayerState visual_encode(Tape& tape, const ParamStore& store, const EncoderConfig& cfg,
                         const Matrix& patches, std::vector<Index>* sequence_lengths) {
  if (patches.rows() < 1 || patches.rows() > cfg.num_patches || patches.cols() != cfg.feature_dim) {
    throw ShapeError("visual_encode: patches " + shape_string(patches) + " do not fit [<=" +
                     std::to_string(cfg.num_patches) + "x" + std::to_string(cfg.feature_dim) + "]");
  }
  for (const auto& name : prompt_bank_names(cfg)) {
    const Matrix& p = store.at(name);
    if (p.rows() != cfg.prompt_count || p.cols() != cfg.width) {
      throw ConfigError("prompt bank entry " + name + " has shape " + shape_string(p) +
                        ", config expects " + shape_string(cfg.prompt_count, cfg.width));
    }
  }
  const Index e = patches.rows();
  const Index h = cfg.bank_size() > 0 ? cfg.prompt_count : 0;

  Var pos = param(tape, store, "visual.pos");
  Var x0 = add(param(tape, store, "visual.cls"), slice_rows(pos, 0, 1));
  Var e0 = add(linear(tape, store, "visual.patch", tape.constant(patches)), slice_rows(pos, 1, e));

  Var seq = h > 0 ? concat_rows({x0, param(tape, store, prompt_name(0)), e0}) : concat_rows({x0, e0});
  for (int i = 0; i < cfg.layers; ++i) {
    // Deep prompting: layers 2..n see fresh prompts in place of the previous
    // layer's prompt outputs.
    if (h > 0 && cfg.deep_prompts && i > 0 && i < cfg.prompted_layers) {
      seq = concat_rows({slice_rows(seq, 0, 1), param(tape, store, prompt_name(i)), slice_rows(seq, 1 + h, e)});
    }
    if (sequence_lengths) sequence_lengths->push_back(seq.rows());
    seq = transformer_layer(tape, store, "visual.layer" + std::to_string(i), seq, cfg.heads);
  }
  seq = norm(tape, store, "visual.ln_f", seq);
  return LayerState{slice_rows(seq, 0, 1), slice_rows(seq, 1, h), slice_rows(seq, 1 + h, e)};
}

Var classify_logits(Tape& tape, const ParamStore& store, const Var& cls) {
  check_head(store);
  return linear(tape, store, "head.fc2", gelu(linear(tape, store, "head.fc1", cls)));
}

Var classify(Tape& tape, const ParamStore& store, const Var& cls) {
  return softmax(classify_logits(tape, store, cls), 1, 1.0);
}

Var encode_viewpoints(Tape& tape, const ParamStore& store, const EncoderConfig& cfg,
                      const Matrix& viewpoints) {
  if (viewpoints.rows() < 1) throw ShapeError("encode_viewpoints: empty trajectory");
  std::vector<Var> rows;
  rows.reserve(static_cast<std::size_t>(viewpoints.rows()));
  for (Index i = 0; i < viewpoints.rows(); ++i) {
    rows.push_back(visual_encode(tape, store, cfg, viewpoints.row(i)).cls);
  }
  return concat_rows(rows);
}

TextEncoding text_encode(Tape& tape, const ParamStore& store, const EncoderConfig& cfg,
                         const std::vector<int>& ids) {
  if (ids.empty() || static_cast<int>(ids.size()) > cfg.max_text_len) {
    throw InputError("text_encode: sequence length " + std::to_string(ids.size()) + " outside [1, " +
                     std::to_string(cfg.max_text_len) + "]");
  }
  std::vector<int> kept;
  std::vector<int> positions;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= cfg.vocab_size) {
      throw InputError("text_encode: token id " + std::to_string(ids[i]) + " outside vocabulary of " +
                       std::to_string(cfg.vocab_size));
    }
    if (ids[i] == 0) continue;  // [pad]
    kept.push_back(ids[i]);
    positions.push_back(static_cast<int>(i));
  }
  if (kept.empty()) throw InputError("text_encode: sequence is all padding");
  Var x = add(gather_rows(param(tape, store, "text.tok"), kept),
              gather_rows(param(tape, store, "text.pos"), positions));
  for (int i = 0; i < cfg.text_layers; ++i) {
    x = transformer_layer(tape, store, "text.layer" + std::to_string(i), x, cfg.heads);
  }
  x = norm(tape, store, "text.ln_f", x);
  return TextEncoding{x, slice_rows(x, 0, 1)};
}

CrossModalOutput cross_modal_encode(Tape& tape, const ParamStore& store, const EncoderConfig& cfg,
                                    const Var& viewpoints, const std::optional<Var>& seq_prompts,
                                    const std::vector<Range>& boundaries) {
  const Index t = viewpoints.rows();
  if (viewpoints.cols() != cfg.width) {
    throw ShapeError("cross_modal_encode: viewpoint features " + shape_string(viewpoints.value()) +
                     " are not width " + std::to_string(cfg.width));
  }
  std::vector<Range> ordered = boundaries;
  std::sort(ordered.begin(), ordered.end(), [](const Range& a, const Range& b) { return a.start < b.start; });
  try {
    validate_chunks(ordered, static_cast<int>(t));
  } catch (const ValidationError& e) {
    throw AlignmentError(std::string("cross_modal_encode: ") + e.what());
  }
  if (seq_prompts && (seq_prompts->rows() != static_cast<Index>(boundaries.size()) ||
                      seq_prompts->cols() != cfg.width)) {
    throw AlignmentError("cross_modal_encode: " + std::to_string(seq_prompts->rows()) +
                         " sequential prompt features for " + std::to_string(boundaries.size()) +
                         " sub-paths");
  }
  Var types = param(tape, store, "cross.type");
  std::vector<Var> parts = {add(param(tape, store, "cross.cnt"), slice_rows(types, 0, 1)),
                            add_row(viewpoints, slice_rows(types, 1, 1))};
  if (seq_prompts) parts.push_back(add_row(*seq_prompts, slice_rows(types, 2, 1)));
  Var x = concat_rows(parts);
  for (int i = 0; i < cfg.cross_layers; ++i) {
    x = transformer_layer(tape, store, "cross.layer" + std::to_string(i), x, cfg.heads);
  }
  Var visual = slice_rows(x, 1, t);
  std::vector<Var> pooled;
  pooled.reserve(boundaries.size());
  for (const Range& r : boundaries) pooled.push_back(mean_rows(slice_rows(visual, r.start, r.end - r.start)));
  return CrossModalOutput{concat_rows(pooled), slice_rows(x, 0, 1), mean_rows(visual)};
}

Var project_text(Tape& tape, const ParamStore& store, const Var& features) {
  return linear(tape, store, "proj.text", features);
}

Var project_visual(Tape& tape, const ParamStore& store, const Var& features) {
  return linear(tape, store, "proj.visual", features);
}

// ---------------------------------------------------------------------------

Stage parse_stage(const std::string& s) {
  if (s == "stage1") return Stage::stage1;
  if (s == "stage2") return Stage::stage2;
  throw ParameterError("unknown stage '" + s + "'");
}

std::set<std::string> trainable_parameters(Stage stage, const ParamStore& store, bool joint_prompts) {
  std::set<std::string> out;
  for (const auto& name : store.names()) {
    const bool prompt = starts_with(name, "visual.prompt.");
    switch (stage) {
      case Stage::stage1:
        if (prompt || starts_with(name, "head.")) out.insert(name);
        break;
      case Stage::stage2:
        if (starts_with(name, "text.") || starts_with(name, "cross.") || starts_with(name, "proj.") ||
            (joint_prompts && prompt)) {
          out.insert(name);
        }
        break;
      default:
        throw ParameterError("unknown stage");
    }
  }
  return out;
}

}  // namespace panda
