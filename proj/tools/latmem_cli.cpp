#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "latmem/checkpoint.hpp"
#include "latmem/config.hpp"
#include "latmem/decode.hpp"
#include "latmem/grpo.hpp"
#include "latmem/memory.hpp"
#include "latmem/model.hpp"
#include "latmem/pretrain.hpp"
#include "latmem/stats.hpp"
#include "latmem/tasks.hpp"

namespace fs = std::filesystem;
using namespace latmem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitConfig = 2;
constexpr int kExitDivergence = 3;

struct CommonOpts {
  std::string config_path;
  uint64_t seed = 1;
  std::string out_dir = "out";
};

void add_common(CLI::App* cmd, CommonOpts& o, bool config_required = true) {
  auto* c = cmd->add_option("--config", o.config_path, "run config (JSON)");
  if (config_required) c->required();
  cmd->add_option("--seed", o.seed, "run seed");
  cmd->add_option("--out", o.out_dir, "output directory");
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << content;
}

std::string read_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

uint64_t content_hash(const std::string& bytes) {
  return fnv1a64(reinterpret_cast<const uint8_t*>(bytes.data()),
                 bytes.size());
}

struct Workspace {
  RunConfig cfg;
  ToyVlm vlm;
  MemorySystem memsys;
  ParamList all_params;

  Workspace(RunConfig c, uint64_t seed)
      : cfg(std::move(c)), vlm(cfg.model, seed), memsys(vlm, seed) {
    vlm.collect_base_params(all_params);
    vlm.collect_policy_params(all_params);
    memsys.collect_params(all_params);
  }

  void load(const std::string& ckpt_path) {
    assign_params(all_params, load_checkpoint(ckpt_path));
  }
};

nlohmann::json base_manifest(const CommonOpts& o, const std::string& cfg_text) {
  nlohmann::json m;
  m["config"] = nlohmann::json::parse(dump_run_config(parse_run_config(cfg_text)));
  m["config_file"] = o.config_path;
  m["config_hash"] = content_hash(cfg_text);
  m["seed"] = o.seed;
  m["out_dir"] = o.out_dir;
  m["artifacts"] = nlohmann::json::array();
  return m;
}

int cmd_train(const CommonOpts& o, int stage_num, const std::string& init) {
  const std::string cfg_text = read_file(o.config_path);
  RunConfig cfg = parse_run_config(cfg_text);
  const StageConfig& stage = stage_num == 1 ? cfg.stage1 : cfg.stage2;
  if (stage_num == 2 && init.empty())
    throw std::runtime_error(
        "stage 2 continues from a stage 1 checkpoint; pass --init "
        "<dir>/stage1.ckpt");

  Workspace ws(cfg, o.seed);
  if (!init.empty()) ws.load(init);

  fs::create_directories(o.out_dir);
  if (stage_num == 1 && init.empty() && cfg.pretrain.steps > 0) {
    auto prep = pretrain_base(ws.vlm, cfg.pretrain, o.seed);
    std::cout << "warm-start: " << prep.steps << " steps, loss "
              << prep.first_loss << " -> " << prep.last_loss << '\n';
  }
  if (stage_num == 1 && init.empty() && cfg.align.steps > 0) {
    auto arep = align_memory(ws.vlm, ws.memsys, cfg.align, o.seed);
    std::cout << "memory alignment: " << arep.steps << " steps, loss "
              << arep.first_loss << " -> " << arep.last_loss << '\n';
  }
  std::vector<StepMetrics> metrics;
  run_stage(stage, ws.vlm, ws.memsys, o.seed, &metrics);

  const fs::path ckpt =
      fs::path(o.out_dir) / ("stage" + std::to_string(stage_num) + ".ckpt");
  save_checkpoint(ckpt.string(), ws.all_params);

  std::ostringstream csv;
  csv << metrics_csv_header() << '\n';
  for (const auto& m : metrics) csv << metrics_csv_row(m) << '\n';
  const fs::path csv_path =
      fs::path(o.out_dir) /
      ("metrics_stage" + std::to_string(stage_num) + ".csv");
  write_file(csv_path, csv.str());

  auto manifest = base_manifest(o, cfg_text);
  manifest["command"] = "train";
  manifest["stage"] = stage_num;
  if (!init.empty()) {
    manifest["init_checkpoint"] = init;
    manifest["init_checkpoint_hash"] = content_hash(read_file(init));
  }
  manifest["artifacts"].push_back(ckpt.string());
  manifest["artifacts"].push_back(csv_path.string());
  write_file(fs::path(o.out_dir) /
                 ("manifest_stage" + std::to_string(stage_num) + ".json"),
             manifest.dump(2));
  std::cout << "wrote " << ckpt.string() << " (" << metrics.size()
            << " steps)\n";
  return kExitOk;
}

int cmd_eval(const CommonOpts& o, const std::string& ckpt) {
  const std::string cfg_text = read_file(o.config_path);
  RunConfig cfg = parse_run_config(cfg_text);
  Workspace ws(cfg, o.seed);
  if (!ckpt.empty()) ws.load(ckpt);

  DecodePolicy pol = ablation_policy("full", cfg.stage2);
  auto rep = evaluate(ws.vlm, ws.memsys,
                      task_family_from_string(cfg.eval_family),
                      cfg.eval_tasks, pol, o.seed, true);

  fs::create_directories(o.out_dir);
  std::ostringstream csv;
  csv.precision(12);
  csv << "metric,value\n"
      << "mean_score," << rep.mean_score << '\n'
      << "mean_base_score," << rep.mean_base_score << '\n'
      << "mean_delta," << rep.mean_delta << '\n'
      << "inv_rate_short," << rep.inv_rate_short << '\n'
      << "inv_rate_long," << rep.inv_rate_long << '\n'
      << "harmful_invocations," << rep.harmful_invocations << '\n'
      << "invoking_tasks," << rep.invoking_tasks << '\n';
  write_file(fs::path(o.out_dir) / "eval.csv", csv.str());

  std::ostringstream dump;
  for (const auto& t : rep.trajectories) dump << trajectory_to_json(t) << '\n';
  write_file(fs::path(o.out_dir) / "trajectories.jsonl", dump.str());

  auto manifest = base_manifest(o, cfg_text);
  manifest["command"] = "eval";
  if (!ckpt.empty()) manifest["checkpoint"] = ckpt;
  manifest["artifacts"].push_back((fs::path(o.out_dir) / "eval.csv").string());
  manifest["artifacts"].push_back(
      (fs::path(o.out_dir) / "trajectories.jsonl").string());
  write_file(fs::path(o.out_dir) / "manifest_eval.json", manifest.dump(2));
  std::cout << "mean_score " << rep.mean_score << " mean_delta "
            << rep.mean_delta << '\n';
  return kExitOk;
}

int cmd_ablate(const CommonOpts& o, const std::string& ckpt,
               std::vector<std::string> modes) {
  const std::string cfg_text = read_file(o.config_path);
  RunConfig cfg = parse_run_config(cfg_text);
  Workspace ws(cfg, o.seed);
  if (!ckpt.empty()) ws.load(ckpt);

  if (modes.empty())
    modes = {"vanilla",   "random-25", "random-50", "random-75",
             "random-100", "short-only", "long-only", "full"};

  std::ostringstream csv;
  csv.precision(12);
  csv << "mode,mean_score,mean_base_score,mean_delta,inv_rate_short,"
         "inv_rate_long\n";
  for (const auto& mode : modes) {
    DecodePolicy pol = ablation_policy(mode, cfg.stage2);
    auto rep = evaluate(ws.vlm, ws.memsys,
                        task_family_from_string(cfg.eval_family),
                        cfg.eval_tasks, pol, o.seed);
    csv << mode << ',' << rep.mean_score << ',' << rep.mean_base_score << ','
        << rep.mean_delta << ',' << rep.inv_rate_short << ','
        << rep.inv_rate_long << '\n';
  }
  fs::create_directories(o.out_dir);
  write_file(fs::path(o.out_dir) / "ablation.csv", csv.str());

  auto manifest = base_manifest(o, cfg_text);
  manifest["command"] = "ablate";
  manifest["modes"] = modes;
  if (!ckpt.empty()) manifest["checkpoint"] = ckpt;
  manifest["artifacts"].push_back(
      (fs::path(o.out_dir) / "ablation.csv").string());
  write_file(fs::path(o.out_dir) / "manifest_ablate.json", manifest.dump(2));
  std::cout << "wrote " << (fs::path(o.out_dir) / "ablation.csv").string()
            << '\n';
  return kExitOk;
}

int cmd_stats(const std::string& dump_path, const std::string& out_dir,
              bool svg) {
  std::ifstream in(dump_path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read dump " + dump_path);
  auto s = scan_dump_stream(in);
  if (s.malformed_lines)
    std::cerr << "warning: skipped " << s.malformed_lines
              << " malformed dump line(s)\n";
  fs::create_directories(out_dir);
  write_file(fs::path(out_dir) / "stats.csv", stats_to_csv(s));
  if (svg) write_file(fs::path(out_dir) / "stats.svg", stats_to_svg(s));
  std::cout << "samples " << s.total_samples << " ratio_short "
            << s.ratio_short() << " ratio_long " << s.ratio_long() << '\n';
  return kExitOk;
}

int cmd_latency(const CommonOpts& o, const std::string& ckpt, int n_tasks) {
  const std::string cfg_text = read_file(o.config_path);
  RunConfig cfg = parse_run_config(cfg_text);
  Workspace ws(cfg, o.seed);
  if (!ckpt.empty()) ws.load(ckpt);

  std::vector<Image> images;
  std::vector<std::vector<int>> prompts;
  const TaskFamily fam = task_family_from_string(cfg.eval_family);
  for (int i = 0; i < n_tasks; ++i) {
    auto t = sample_task(fam, Rng::derive(o.seed, 0x1a7 + i), cfg.model);
    images.push_back(std::move(t.image));
    prompts.push_back(std::move(t.instruction));
  }

  DecodePolicy pol = ablation_policy("full", cfg.stage2);
  pol.force_invoke_prob = 1.0;  // guarantee the memory path is exercised
  // warm-up pass so timers see steady-state allocator behavior
  generate(ws.vlm, &ws.memsys, images[0], prompts[0], pol, o.seed);
  auto rep = measure_latency(ws.vlm, ws.memsys, images, prompts, pol, o.seed);

  std::ostringstream csv;
  csv.precision(12);
  csv << "variant,seconds_per_task,tasks_per_second,positions_per_task\n"
      << "vanilla," << rep.vanilla_seconds_per_task << ','
      << 1.0 / rep.vanilla_seconds_per_task << ','
      << rep.vanilla_positions_per_task << '\n'
      << "memory," << rep.memory_seconds_per_task << ','
      << 1.0 / rep.memory_seconds_per_task << ','
      << rep.memory_positions_per_task << '\n'
      << "overhead_fraction," << rep.overhead_fraction << ",,\n";
  fs::create_directories(o.out_dir);
  write_file(fs::path(o.out_dir) / "latency.csv", csv.str());

  auto manifest = base_manifest(o, cfg_text);
  manifest["command"] = "latency";
  manifest["tasks"] = n_tasks;
  if (!ckpt.empty()) manifest["checkpoint"] = ckpt;
  manifest["artifacts"].push_back(
      (fs::path(o.out_dir) / "latency.csv").string());
  write_file(fs::path(o.out_dir) / "manifest_latency.json", manifest.dump(2));
  std::cout << "overhead_fraction " << rep.overhead_fraction << '\n';
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"latent-memory toy VLM harness"};
  app.require_subcommand(1);

  // worker count is accepted for interface stability; evaluation currently
  // runs single-threaded
  if (const char* w = std::getenv("LATMEM_WORKERS")) (void)w;

  CommonOpts train_o, eval_o, ablate_o, latency_o;
  int stage_num = 1;
  std::string init_ckpt, eval_ckpt, ablate_ckpt, latency_ckpt, dump_path;
  std::string stats_out = "out";
  std::vector<std::string> modes;
  bool svg = false;
  int latency_tasks = 16;

  auto* train = app.add_subcommand("train", "run one training stage");
  add_common(train, train_o);
  train->add_option("--stage", stage_num, "1 or 2")
      ->check(CLI::Range(1, 2));
  train->add_option("--init", init_ckpt, "checkpoint to continue from");

  auto* eval_cmd = app.add_subcommand("eval", "evaluate with memory vs without");
  add_common(eval_cmd, eval_o);
  eval_cmd->add_option("--ckpt", eval_ckpt, "trained checkpoint");

  auto* ablate = app.add_subcommand("ablate", "score ablation modes");
  add_common(ablate, ablate_o);
  ablate->add_option("--ckpt", ablate_ckpt, "trained checkpoint");
  ablate->add_option("--mode", modes, "subset of modes (default: all)");

  auto* stats = app.add_subcommand("stats", "invocation statistics from a dump");
  stats->add_option("--dump", dump_path, "trajectory dump (.jsonl)")
      ->required();
  stats->add_option("--out", stats_out, "output directory");
  stats->add_flag("--svg", svg, "also emit an SVG figure");

  auto* latency = app.add_subcommand("latency", "wall-time comparison");
  add_common(latency, latency_o);
  latency->add_option("--ckpt", latency_ckpt, "trained checkpoint");
  latency->add_option("--tasks", latency_tasks, "suite size");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (train->parsed()) return cmd_train(train_o, stage_num, init_ckpt);
    if (eval_cmd->parsed()) return cmd_eval(eval_o, eval_ckpt);
    if (ablate->parsed()) return cmd_ablate(ablate_o, ablate_ckpt, modes);
    if (stats->parsed()) return cmd_stats(dump_path, stats_out, svg);
    if (latency->parsed())
      return cmd_latency(latency_o, latency_ckpt, latency_tasks);
  } catch (const DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  }
  return kExitUsage;
}
