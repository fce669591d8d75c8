// panda: command-line driver for data generation, segmentation, prompt
// construction, both training stages, evaluation and gradient checks.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "panda/pipeline.hpp"

using namespace panda;

namespace {

// Every RunConfig field as a --<name> flag on one subcommand.
struct ConfigFlags {
  std::string config_path;
  std::map<std::string, std::string> values;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "key=value file whose keys are RunConfig field names");
    for (const auto& name : RunConfig::field_names()) {
      if (name == "seed") continue;  // added separately so gen-data can require it
      app->add_option("--" + name, values[name], "RunConfig." + name);
    }
  }

  RunConfig resolve(const CLI::App* app, std::optional<std::uint64_t> seed) const {
    RunConfig cfg;
    if (!config_path.empty()) cfg.apply_file(config_path);
    for (const auto& [name, value] : values) {
      if (app->count("--" + name) > 0) cfg.set(name, value);
    }
    if (seed) cfg.seed = *seed;
    cfg.validate();
    return cfg;
  }
};

std::vector<TrajectorySample> trajectories_for(const RunConfig& cfg) {
  if (!cfg.trajectory_data.empty()) return read_trajectory_jsonl(cfg.trajectory_data);
  TrajectoryOptions o;
  o.count = cfg.trajectory_count;
  o.min_actions = cfg.min_actions;
  o.max_actions = cfg.max_actions;
  o.min_length = cfg.min_length;
  o.max_length = cfg.max_length;
  o.noise = cfg.trajectory_noise;
  o.feature_dim = cfg.feature_dim;
  return gen_trajectory_dataset(o, cfg.seed);
}

void write_lines(const std::string& path, const std::vector<nlohmann::json>& lines) {
  std::ostream* out = &std::cout;
  std::ofstream file;
  if (!path.empty() && path != "-") {
    file.open(path);
    if (!file) throw IoError("cannot open " + path + " for writing");
    out = &file;
  }
  for (const auto& j : lines) *out << j.dump() << "\n";
  if (!out->flush()) throw IoError("write failed");
}

LoadedDataset load_with_warnings(const std::string& path) {
  LoadedDataset d = load_dataset(path);
  for (const auto& w : d.warnings) std::cerr << "warning: " << w << "\n";
  return d;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int run(int argc, char** argv) {
  CLI::App app{"Prompt-based vision-language alignment toolkit"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate synthetic indoor and trajectory datasets");
  ConfigFlags gen_flags;
  gen_flags.attach(gen);
  std::uint64_t gen_seed = 0;
  gen->add_option("--seed", gen_seed, "RNG seed")->required();
  std::string gen_kind = "both";
  gen->add_option("--kind", gen_kind, "indoor, trajectory or both")
      ->check(CLI::IsMember({"indoor", "trajectory", "both"}));
  std::string indoor_out, traj_out;
  gen->add_option("--indoor-output", indoor_out, "defaults to <out_dir>/indoor.jsonl");
  gen->add_option("--trajectory-output", traj_out, "defaults to <out_dir>/trajectories.jsonl");

  // segment
  auto* seg = app.add_subcommand("segment", "split instructions and pair sub-instructions with sub-paths");
  std::string seg_in, seg_out;
  int min_fragment = SegmenterOptions{}.min_fragment_tokens;
  seg->add_option("--input", seg_in, "JSONL dataset")->required();
  seg->add_option("--output", seg_out, "JSONL output (stdout when omitted)");
  seg->add_option("--min-fragment-tokens", min_fragment, "fragments shorter than this are merged");

  // prompts
  auto* pr = app.add_subcommand("prompts", "print the context prompt set of every record");
  std::string pr_in, pr_out, vocab_out;
  pr->add_option("--input", pr_in, "JSONL dataset")->required();
  pr->add_option("--output", pr_out, "JSONL output (stdout when omitted)");
  pr->add_option("--vocab-output", vocab_out, "write the vocabulary JSON here");

  // stage1 / stage2 / eval / gradcheck
  auto* s1 = app.add_subcommand("stage1", "deep visual prompt tuning on the indoor dataset");
  ConfigFlags s1_flags;
  s1_flags.attach(s1);
  std::optional<std::uint64_t> s1_seed;
  s1->add_option("--seed", s1_seed, "RNG seed");

  auto* s2 = app.add_subcommand("stage2", "context-aware sub-instruction / sub-path alignment");
  ConfigFlags s2_flags;
  s2_flags.attach(s2);
  std::optional<std::uint64_t> s2_seed;
  s2->add_option("--seed", s2_seed, "RNG seed");

  auto* ev = app.add_subcommand("eval", "retrieval metrics of a checkpoint");
  ConfigFlags ev_flags;
  ev_flags.attach(ev);
  std::optional<std::uint64_t> ev_seed;
  ev->add_option("--seed", ev_seed, "RNG seed");
  std::string ev_split = "held_out";
  ev->add_option("--split", ev_split, "held_out, train or all")->check(CLI::IsMember({"held_out", "train", "all"}));

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of both training losses");
  ConfigFlags gc_flags;
  gc_flags.attach(gc);
  std::optional<std::uint64_t> gc_seed;
  gc->add_option("--seed", gc_seed, "RNG seed");
  double gc_eps = 1e-5, gc_tol = 1e-4;
  gc->add_option("--eps", gc_eps, "central difference step");
  gc->add_option("--tolerance", gc_tol, "maximum relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error[usage]: " << e.what() << "\n";
    return 2;
  }

  const auto t0 = std::chrono::steady_clock::now();

  if (gen->parsed()) {
    RunConfig cfg = gen_flags.resolve(gen, gen_seed);
    const std::string dir = cfg.out_dir.empty() ? "." : cfg.out_dir;
    std::filesystem::create_directories(dir);
    nlohmann::json report{{"seed", cfg.seed}};
    if (gen_kind != "trajectory") {
      const auto data = gen_indoor_dataset(cfg.indoor_classes, cfg.indoor_samples_per_class, cfg.indoor_noise,
                                           cfg.num_patches, cfg.feature_dim, cfg.seed);
      const std::string path = indoor_out.empty() ? (std::filesystem::path(dir) / "indoor.jsonl").string() : indoor_out;
      write_indoor_jsonl(path, data);
      report["indoor"] = {{"path", path}, {"samples", data.size()}};
    }
    if (gen_kind != "indoor") {
      cfg.trajectory_data.clear();
      const auto data = trajectories_for(cfg);
      const std::string path =
          traj_out.empty() ? (std::filesystem::path(dir) / "trajectories.jsonl").string() : traj_out;
      write_trajectory_jsonl(path, data);
      report["trajectory"] = {{"path", path}, {"samples", data.size()}};
    }
    std::cout << report.dump(2) << "\n";
    return 0;
  }

  if (seg->parsed()) {
    SegmenterOptions opts;
    opts.min_fragment_tokens = min_fragment;
    std::vector<nlohmann::json> lines;
    for (const auto& rec : load_with_warnings(seg_in).records) lines.push_back(segment_record(rec, opts));
    write_lines(seg_out, lines);
    return 0;
  }

  if (pr->parsed()) {
    const auto data = load_with_warnings(pr_in);
    std::vector<nlohmann::json> lines;
    std::vector<std::string> corpus;
    for (const auto& rec : data.records) {
      std::vector<std::string> subs;
      if (rec.raw.contains("sub_instructions")) {
        subs = rec.raw["sub_instructions"].get<std::vector<std::string>>();
      } else {
        for (const auto& s : split_instruction(rec.instruction)) subs.push_back(s.text);
      }
      lines.push_back(to_json(build_prompt_set(subs)));
      corpus.push_back(rec.instruction.text);
    }
    write_lines(pr_out, lines);
    if (!vocab_out.empty()) {
      std::ofstream v(vocab_out);
      if (!v) throw IoError("cannot open " + vocab_out + " for writing");
      v << Vocabulary::build(corpus).to_json().dump(2) << "\n";
    }
    return 0;
  }

  if (s1->parsed()) {
    RunConfig cfg = s1_flags.resolve(s1, s1_seed);
    Stage1Result r = run_stage1(cfg);
    for (const auto& e : r.epochs) {
      std::cerr << "epoch " << e.epoch << " loss " << e.loss << " train " << e.train_accuracy << " val "
                << e.val_accuracy << "\n";
    }
    nlohmann::json out{{"steps", r.steps},
                       {"train_accuracy", r.train_accuracy},
                       {"val_accuracy", r.val_accuracy},
                       {"prompt_parameters", r.prompt_parameters},
                       {"head_parameters", r.head_parameters},
                       {"trainable_parameters", r.trainable_parameters},
                       {"seconds", seconds_since(t0)}};
    std::cout << out.dump(2) << "\n";
    return 0;
  }

  if (s2->parsed()) {
    RunConfig cfg = s2_flags.resolve(s2, s2_seed);
    Stage2Result r = run_stage2(cfg);
    for (const auto& e : r.epochs) {
      std::cerr << "epoch " << e.epoch << " total " << e.mean_total << " subpair " << e.held_out.subpair_accuracy
                << " trajectory " << e.held_out.trajectory_accuracy << " count " << e.held_out.count_accuracy << "\n";
    }
    nlohmann::json out{{"ablation", cfg.ablation},
                       {"steps", r.steps.size()},
                       {"held_out", r.held_out.to_json()},
                       {"seconds", seconds_since(t0)}};
    std::cout << out.dump(2) << "\n";
    return 0;
  }

  if (ev->parsed()) {
    RunConfig cfg = ev_flags.resolve(ev, ev_seed);
    std::string path = cfg.checkpoint;
    if (path.empty()) {
      if (cfg.out_dir.empty()) throw ConfigError("eval needs checkpoint or out_dir");
      path = (std::filesystem::path(cfg.out_dir) / "stage2.ckpt.json").string();
    }
    const Checkpoint ckpt = load_checkpoint(path);
    cfg.feature_dim = ckpt.encoder.feature_dim;
    auto data = trajectories_for(cfg);
    if (ev_split != "all") {
      auto split = split_dataset(data, cfg.seed, cfg.val_fraction);
      data = ev_split == "train" ? split.train : split.held_out;
    }
    nlohmann::json out = evaluate_retrieval(ckpt, data).to_json();
    out["checkpoint"] = path;
    out["split"] = ev_split;
    std::cout << out.dump(2) << "\n";
    return 0;
  }

  if (gc->parsed()) {
    RunConfig cfg = gradcheck_config(gc_seed.value_or(0));
    if (!gc_flags.config_path.empty()) cfg.apply_file(gc_flags.config_path);
    for (const auto& [name, value] : gc_flags.values) {
      if (gc->count("--" + name) > 0) cfg.set(name, value);
    }
    const auto r = gradient_check(cfg, gc_eps);
    auto report = [](const GradCheckReport& g) {
      return nlohmann::json{{"max_rel_error", g.max_rel_error},
                            {"worst_parameter", g.worst_parameter},
                            {"worst_index", g.worst_index},
                            {"checked", g.checked}};
    };
    std::cout << nlohmann::json{{"stage1", report(r.stage1)}, {"stage2", report(r.stage2)},
                                {"seconds", seconds_since(t0)}}
                     .dump(2)
              << "\n";
    const double worst = std::max(r.stage1.max_rel_error, r.stage2.max_rel_error);
    if (!(worst < gc_tol)) {
      std::ostringstream msg;
      msg << "max relative error " << std::scientific << worst << " exceeds " << gc_tol;
      throw CheckError(msg.str());
    }
    return 0;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const panda::Error& e) {
    std::cerr << "error[" << e.category() << "]: " << e.what() << "\n";
    return 1;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error[io]: " << e.what() << "\n";
    return 1;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error[parse]: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error[internal]: " << e.what() << "\n";
    return 1;
  }
}
