// Command-line surface: train / eval / gradcheck / gen-fixtures / bench.
// Every config-file key can be overridden with a --key value flag.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "manta/harness.hpp"

namespace {

struct KeyOverride {
  std::string key, value;
};

// Registers one --key flag per config key so `--lr 0.01` works on any verb.
void add_config_flags(CLI::App* cmd, std::vector<KeyOverride>& overrides) {
  static const char* kKeys[] = {
      "n_way", "k_shot", "q_per_class", "frames", "feat_dim", "motif_len", "noise_std",
      "scales", "n_state", "tau", "lambda", "lr", "episodes", "eval_every", "seed",
      "frame_noise", "sample_noise_ratio", "gaussian_bg_std", "reverse_support",
      "disable_inner", "disable_outer", "disable_hc", "fragmenting", "selective"};
  for (const char* key : kKeys) {
    cmd->add_option_function<std::string>(
        std::string("--") + key,
        [&overrides, key](const std::string& v) { overrides.push_back({key, v}); });
  }
}

manta::RunConfig resolve_config(const std::string& config_path,
                                const std::vector<KeyOverride>& overrides) {
  manta::RunConfig cfg;
  if (!config_path.empty()) cfg = manta::parse_config_file(config_path);
  for (const KeyOverride& kv : overrides) manta::config_set(cfg, kv.key, kv.value);
  cfg.validate();
  return cfg;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  return f;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Matryoshka state-space few-shot learner on planted-motif sequence tasks"};
  app.require_subcommand(1);

  std::string config_path, out_dir = ".", checkpoint_path, fixture_prefix;
  std::size_t fixture_count = 1;
  std::vector<KeyOverride> overrides;

  auto* train_cmd = app.add_subcommand("train", "episodic training, writes checkpoint + metrics");
  train_cmd->add_option("--config", config_path, "key = value config file");
  train_cmd->add_option("--out", out_dir, "output directory");
  add_config_flags(train_cmd, overrides);

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint, writes confusion.csv");
  eval_cmd->add_option("--config", config_path, "key = value config file");
  eval_cmd->add_option("--checkpoint", checkpoint_path, "checkpoint to load")->required();
  eval_cmd->add_option("--out", out_dir, "output directory");
  add_config_flags(eval_cmd, overrides);

  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of the full objective");
  grad_cmd->add_option("--config", config_path, "key = value config file");
  add_config_flags(grad_cmd, overrides);

  auto* fix_cmd = app.add_subcommand("gen-fixtures", "export episode batches as .mepb files");
  fix_cmd->add_option("--config", config_path, "key = value config file");
  fix_cmd->add_option("--prefix", fixture_prefix, "output file prefix")->required();
  fix_cmd->add_option("--count", fixture_count, "number of episodes to export");
  add_config_flags(fix_cmd, overrides);

  auto* bench_cmd = app.add_subcommand("bench", "sequential scan throughput");
  std::size_t bench_len = 4096, bench_width = 16, bench_state = 16, bench_reps = 50;
  bench_cmd->add_option("--length", bench_len, "sequence length");
  bench_cmd->add_option("--width", bench_width, "channel width");
  bench_cmd->add_option("--n_state", bench_state, "state size");
  bench_cmd->add_option("--repeats", bench_reps, "repetitions");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train_cmd->parsed()) {
      manta::RunConfig cfg = resolve_config(config_path, overrides);
      std::filesystem::create_directories(out_dir);
      manta::TrainResult result = manta::train(cfg, &std::cout);
      auto metrics = open_out(std::filesystem::path(out_dir) / "metrics.jsonl");
      manta::write_metrics_jsonl(result.metrics, metrics);
      auto dtw = open_out(std::filesystem::path(out_dir) / "dtw.csv");
      manta::write_dtw_csv(result, cfg.scales, dtw);
      const auto ckpt = std::filesystem::path(out_dir) / "checkpoint.manta";
      manta::save_checkpoint(result.params, cfg, ckpt.string());
      std::cout << "checkpoint written to " << ckpt.string() << "\n";
    } else if (eval_cmd->parsed()) {
      manta::Checkpoint ck = manta::load_checkpoint(checkpoint_path);
      manta::RunConfig cfg = ck.config;
      if (!config_path.empty()) cfg = manta::parse_config_file(config_path, cfg);
      for (const KeyOverride& kv : overrides) manta::config_set(cfg, kv.key, kv.value);
      cfg.validate();
      manta::EvalResult r = manta::evaluate(ck.params, cfg);
      std::filesystem::create_directories(out_dir);
      auto cm = open_out(std::filesystem::path(out_dir) / "confusion.csv");
      manta::write_confusion_csv(r.confusion, cm);
      std::cout.precision(4);
      std::cout << "accuracy " << r.accuracy << " +- " << r.ci95 << " (95% CI, "
                << r.per_episode_accuracy.size() << " episodes)\n";
    } else if (grad_cmd->parsed()) {
      manta::RunConfig cfg = resolve_config(config_path, overrides);
      manta::FullGradcheck report = manta::gradcheck_full_loss(cfg);
      std::cout.precision(3);
      for (const auto& group : report.groups)
        std::cout << (group.finite && group.max_rel_err < 1e-4 ? "ok   " : "FAIL ") << group.name
                  << "  max rel err " << std::scientific << group.max_rel_err << std::defaultfloat
                  << (group.finite ? "" : "  (non-finite probe)") << "\n";
      std::cout << "worst " << std::scientific << report.worst << "\n";
      if (!report.ok(1e-4)) return 1;
    } else if (fix_cmd->parsed()) {
      manta::RunConfig cfg = resolve_config(config_path, overrides);
      for (std::size_t i = 0; i < fixture_count; ++i) {
        manta::EpisodeSpec spec = cfg.episode_spec();
        spec.seed = cfg.seed ^ i;
        manta::Rng rng(spec.seed);
        manta::EpisodeBatch batch = manta::gen_episode(spec, rng);
        manta::apply_perturbations(batch, cfg.noise_config(), rng);
        const std::string path = fixture_prefix + std::to_string(i) + ".mepb";
        manta::write_episode(batch, path);
        std::cout << "wrote " << path << "\n";
      }
    } else if (bench_cmd->parsed()) {
      const double rows_per_sec =
          manta::bench_scan(bench_len, bench_width, bench_state, bench_reps);
      std::cout << "scan throughput: " << rows_per_sec / 1e6 << " M rows/s  (L=" << bench_len
                << ", width=" << bench_width << ", n_state=" << bench_state << ")\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
