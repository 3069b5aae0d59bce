#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "ettk/bench.hpp"
#include "ettk/config.hpp"
#include "ettk/eval.hpp"
#include "ettk/gradcheck.hpp"
#include "ettk/parallel.hpp"
#include "ettk/pipeline.hpp"
#include "ettk/synth.hpp"
#include "ettk/weights.hpp"

namespace {

using namespace ettk;

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitNumerical = 2;

// Config flags shared by every subcommand; an explicit flag overrides the
// value loaded from --config.
struct ConfigFlags {
  std::string config_path;
  RunConfig cfg;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "JSON config file");
    app->add_option("--head-kind", cfg.head_kind, "conv | conv_residual | exemplar | standard_attn");
    app->add_option("-E,--exemplars", cfg.e, "exemplar count");
    app->add_option("-S,--query-grid", cfg.s, "query grid size");
    app->add_option("-Z,--kernel-size", cfg.z, "value kernel size (odd)");
    app->add_option("-D,--channels", cfg.d, "head channel width");
    app->add_option("--dqk", cfg.d_qk, "query/key dimension");
    app->add_option("--variant", cfg.variant, "att_only | att_ffn");
    app->add_flag("--tcond", cfg.tcond, "template conditioning");
    app->add_flag("--ffn-residual", cfg.ffn_residual, "residual connection around the FFN");
    app->add_flag("--scale-after-softmax", cfg.scale_after_softmax,
                  "divide the similarity by sqrt(d_k) after the softmax");
    app->add_option("--seed", cfg.seed, "RNG seed");
    app->add_option("--penalty-k", cfg.penalty.k, "size/aspect penalty strength");
    app->add_option("--penalty-w", cfg.penalty.w, "window influence");
    app->add_option("--penalty-lr", cfg.penalty.lr, "box smoothing rate");
  }

  RunConfig resolve(CLI::App* app) {
    if (!config_path.empty()) {
      RunConfig merged = load_config(config_path);
      const RunConfig cli = cfg;
      auto passed = [&](const char* name) { return app->count(name) > 0; };
      if (passed("--head-kind")) merged.head_kind = cli.head_kind;
      if (passed("--exemplars")) merged.e = cli.e;
      if (passed("--query-grid")) merged.s = cli.s;
      if (passed("--kernel-size")) merged.z = cli.z;
      if (passed("--channels")) merged.d = cli.d;
      if (passed("--dqk")) merged.d_qk = cli.d_qk;
      if (passed("--variant")) merged.variant = cli.variant;
      if (passed("--tcond")) merged.tcond = cli.tcond;
      if (passed("--ffn-residual")) merged.ffn_residual = cli.ffn_residual;
      if (passed("--scale-after-softmax")) merged.scale_after_softmax = cli.scale_after_softmax;
      if (passed("--seed")) merged.seed = cli.seed;
      if (passed("--penalty-k")) merged.penalty.k = cli.penalty.k;
      if (passed("--penalty-w")) merged.penalty.w = cli.penalty.w;
      if (passed("--penalty-lr")) merged.penalty.lr = cli.penalty.lr;
      merged.validate();
      return merged;
    }
    cfg.validate();
    return cfg;
  }
};

int cmd_gradcheck(const RunConfig& cfg, const std::string& out_path, const std::string& dtype) {
  if (dtype != "f64") {
    std::cerr << "gradcheck runs in f64 only; --dtype " << dtype << " is not supported\n";
    return kExitValidation;
  }
  const auto results = gradcheck::run_suite(cfg.seed);
  bool pass = true;
  nlohmann::json checks = nlohmann::json::array();
  for (const auto& r : results) {
    pass = pass && r.pass();
    nlohmann::json params;
    for (const auto& p : r.params) params[p.name] = p.max_rel_err;
    checks.push_back({{"name", r.name},
                      {"pass", r.pass()},
                      {"max_rel_err", r.max_rel_err},
                      {"worst_param", r.worst_param},
                      {"params", params}});
    std::cout << (r.pass() ? "[pass] " : "[FAIL] ") << std::left << std::setw(44) << r.name << " max rel err "
              << std::scientific << std::setprecision(3) << r.max_rel_err << "  (" << r.worst_param << ")\n";
  }
  if (!out_path.empty()) {
    nlohmann::json report{{"tolerance", gradcheck::kTolerance}, {"pass", pass}, {"checks", checks}};
    std::ofstream out(out_path);
    if (!out) throw std::runtime_error("cannot write " + out_path);
    out << report.dump(2) << "\n";
  }
  std::cout << (pass ? "gradcheck: all checks passed\n" : "gradcheck: FAILURES above tolerance\n");
  return pass ? kExitOk : kExitNumerical;
}

HeadParams<float> build_head(const RunConfig& cfg, HeadKind kind) {
  HeadConfig hc = cfg.to_head_config();
  hc.kind = kind;
  std::mt19937 rng(cfg.seed);
  return init_head<float>(hc, rng);
}

int cmd_bench(const RunConfig& cfg, const std::vector<std::int64_t>& sizes, int warmup, int repeats,
              const std::vector<std::string>& kinds, const std::string& out_path) {
  std::ostringstream csv;
  csv << "head_kind,H,W,D,median_us,iqr_us\n";
  std::mt19937 rng(cfg.seed + 17);
  for (const auto& kind_name : kinds) {
    RunConfig kc = cfg;
    kc.head_kind = kind_name;
    const auto head = build_head(kc, kc.head_kind_enum());
    for (const auto size : sizes) {
      const auto corr = random_uniform<float>({cfg.d, size, size}, rng);
      const auto stats = bench_head_forward(head, corr, warmup, repeats);
      csv << kind_name << "," << size << "," << size << "," << cfg.d << "," << std::fixed << std::setprecision(2)
          << stats.median_us << "," << stats.iqr_us << "\n";
      std::cout << std::left << std::setw(14) << kind_name << " " << std::setw(3) << size << "x" << std::setw(4)
                << size << " D=" << cfg.d << "  median " << std::fixed << std::setprecision(1) << std::setw(12)
                << stats.median_us << " us   iqr " << stats.iqr_us << " us\n";
    }
  }
  if (!out_path.empty()) {
    std::ofstream out(out_path);
    if (!out) throw std::runtime_error("cannot write " + out_path);
    out << csv.str();
  }
  return kExitOk;
}

struct LoadedSequence {
  std::vector<Image> frames;
  std::vector<Box> gt;
};

LoadedSequence load_sequence_dir(const std::string& dir, int max_frames) {
  namespace fs = std::filesystem;
  LoadedSequence seq;
  const fs::path gt_path = fs::path(dir) / "groundtruth.txt";
  std::ifstream gt_in(gt_path);
  if (!gt_in) throw std::invalid_argument("track: missing " + gt_path.string());
  std::string line;
  while (std::getline(gt_in, line)) {
    if (line.empty()) continue;
    Box b;
    char comma;
    std::istringstream ls(line);
    if (!(ls >> b.x1 >> comma >> b.y1 >> comma >> b.x2 >> comma >> b.y2)) {
      throw std::invalid_argument("track: malformed ground-truth line '" + line + "'");
    }
    seq.gt.push_back(b);
  }
  if (seq.gt.empty()) throw std::invalid_argument("track: empty ground-truth file " + gt_path.string());
  const int count = max_frames > 0 ? std::min<int>(max_frames, static_cast<int>(seq.gt.size()))
                                   : static_cast<int>(seq.gt.size());
  for (int i = 0; i < count; ++i) {
    std::ostringstream name;
    name << std::setw(6) << std::setfill('0') << i;
    fs::path ppm = fs::path(dir) / (name.str() + ".ppm");
    fs::path png = fs::path(dir) / (name.str() + ".png");
    if (fs::exists(ppm)) {
      seq.frames.push_back(read_image(ppm.string()));
    } else if (fs::exists(png)) {
      seq.frames.push_back(read_image(png.string()));
    } else {
      throw std::invalid_argument("track: missing frame index " + std::to_string(i) + " (" + ppm.string() + ")");
    }
  }
  seq.gt.resize(seq.frames.size());
  return seq;
}

int cmd_track(const RunConfig& cfg, const std::string& synth_motion, const std::string& input_dir, int frames,
              double speed, bool out_of_view, const std::string& weights_path, bool init_learned,
              const std::string& save_weights_path, const std::string& out_prefix, const std::string& dump_dir) {
  LoadedSequence seq;
  if (!input_dir.empty()) {
    seq = load_sequence_dir(input_dir, frames);
  } else {
    SynthConfig scfg;
    scfg.motion = motion_from_string(synth_motion.empty() ? "translate" : synth_motion);
    scfg.length = frames > 0 ? frames : 50;
    scfg.speed = speed;
    scfg.seed = cfg.seed;
    scfg.out_of_view = out_of_view;
    auto s = synth_sequence(scfg);
    seq.frames = std::move(s.frames);
    seq.gt = std::move(s.gt);
  }

  TrackerParams params;
  params.penalty = cfg.penalty;
  const bool learned = init_learned || !weights_path.empty();
  if (learned) {
    std::mt19937 rng(cfg.seed);
    params.backbone = init_toy_backbone(rng);
    if (cfg.d != params.backbone.out_channels()) {
      throw std::invalid_argument("track: head channel width D=" + std::to_string(cfg.d) +
                                  " must match the toy backbone output of " +
                                  std::to_string(params.backbone.out_channels()));
    }
    params.head = build_head(cfg, cfg.head_kind_enum());
    params.oracle_head = false;
    if (!weights_path.empty()) {
      const auto entries = load_weights(weights_path);
      unpack_params(params.head, "head", entries);
    }
    if (!save_weights_path.empty()) {
      save_weights(save_weights_path, pack_params(params.head, "head"));
      std::cout << "saved weights to " << save_weights_path << "\n";
    }
  } else {
    params.backbone = oracle_backbone();
    params.oracle_head = true;
  }

  auto state = tracker_init(seq.frames.front(), seq.gt.front(), params);
  std::vector<Box> preds{seq.gt.front()};
  for (std::size_t f = 1; f < seq.frames.size(); ++f) {
    preds.push_back(tracker_update(state, seq.frames[f], params));
  }
  const auto result = summarize_sequence(preds, seq.gt);
  const std::string prefix = out_prefix.empty() ? "track" : out_prefix;
  write_sequence_csv(prefix + ".csv", result);
  write_summary_json(prefix + ".json", result);
  std::cout << "frames " << result.frames.size() << "  AO " << std::fixed << std::setprecision(4) << result.ao
            << "  AUC " << result.auc << "  precision@20px " << result.precision << "\n";
  std::cout << "wrote " << prefix << ".csv and " << prefix << ".json\n";

  if (!dump_dir.empty()) {
    std::filesystem::create_directories(dump_dir);
    for (std::size_t f = 0; f < seq.frames.size(); ++f) {
      Image img = seq.frames[f];
      draw_box(img, seq.gt[f], 40, 220, 60);
      draw_box(img, preds[f], 230, 40, 40);
      std::ostringstream name;
      name << dump_dir << "/" << std::setw(6) << std::setfill('0') << f << ".ppm";
      write_ppm(name.str(), img);
    }
    std::cout << "wrote overlays to " << dump_dir << "\n";
  }
  return kExitOk;
}

int cmd_ablate(const RunConfig& cfg, int steps, double lr, const std::string& out_path) {
  const std::vector<std::int64_t> exemplars{1, 4, 16};
  const std::vector<std::int64_t> grids{1, 2, 4};
  const std::vector<std::string> variants{"conv", "att_only", "att_ffn", "att_ffn_tcond"};

  struct Cell {
    std::int64_t e, s;
    std::string variant;
    std::int64_t param_count = 0;
    float final_loss = 0;
    double median_us = 0, iqr_us = 0;
    bool skipped = false;
    std::string note;
  };
  std::vector<Cell> cells;
  for (const auto& v : variants) {
    for (const auto e : exemplars) {
      for (const auto s : grids) cells.push_back(Cell{e, s, v, 0, 0, 0, 0, false, ""});
    }
  }

  const std::int64_t d = 32;  // desk-scale width for the grid
  const auto pair = make_training_pair(d, cfg.seed);

  const auto build = [&](const Cell& cell) {
    HeadConfig hc;
    hc.d = d;
    hc.d_qk = 16;
    hc.e = cell.e;
    hc.s = cell.s;
    hc.z = cfg.z;
    hc.scale_after_softmax = cfg.scale_after_softmax;
    hc.ffn_residual = cfg.ffn_residual;
    if (cell.variant == "conv") {
      hc.kind = HeadKind::kConv;
    } else {
      hc.kind = HeadKind::kExemplar;
      hc.variant = cell.variant == "att_only" ? LayerVariant::kAttOnly : LayerVariant::kAttFfn;
      hc.tcond = cell.variant == "att_ffn_tcond";
    }
    std::mt19937 rng(cfg.seed);
    return init_head<float>(hc, rng);
  };

  // training phase: cells are independent, run them in parallel
  parallel_for(static_cast<std::int64_t>(cells.size()), [&](std::int64_t idx) {
    Cell& cell = cells[static_cast<std::size_t>(idx)];
    try {
      auto head = build(cell);
      visit_params(head, "head", [&](const std::string&, Tensor<float>& t, bool) { cell.param_count += t.numel(); });
      float cell_lr = static_cast<float>(lr);
      for (int attempt = 0;; ++attempt) {
        auto trained = head;
        try {
          const auto trace = toy_train(trained, pair.corr, head.tcond_enabled ? &pair.tcond : nullptr, pair.gt_crop,
                                       pair.stride, steps, cell_lr);
          cell.final_loss = trace.back();
          break;
        } catch (const numeric_error&) {
          if (attempt == 4) throw;
          cell_lr *= 0.5f;  // halve on divergence
        }
      }
    } catch (const std::exception& e) {
      cell.skipped = true;
      cell.note = e.what();
    }
  });

  // latency phase: sequential, timing needs a quiet machine
  for (auto& cell : cells) {
    if (cell.skipped) continue;
    const auto head = build(cell);
    std::mt19937 rng(cfg.seed + 3);
    const auto corr = random_uniform<float>({d, 16, 16}, rng);
    const auto stats = bench_head_forward(head, corr, 3, 30);
    cell.median_us = stats.median_us;
    cell.iqr_us = stats.iqr_us;
  }

  std::ostringstream csv;
  csv << "variant,E,S,params,final_loss,median_us,iqr_us,note\n";
  for (const auto& cell : cells) {
    if (cell.skipped) {
      csv << cell.variant << "," << cell.e << "," << cell.s << ",,,,,skipped: " << cell.note << "\n";
      continue;
    }
    std::ostringstream row;
    row << cell.variant << "," << cell.e << "," << cell.s << "," << cell.param_count << "," << std::setprecision(6)
        << cell.final_loss << "," << std::fixed << std::setprecision(2) << cell.median_us << "," << cell.iqr_us
        << ",\n";
    csv << row.str();
  }
  std::cout << csv.str();
  if (!out_path.empty()) {
    std::ofstream out(out_path);
    if (!out) throw std::runtime_error("cannot write " + out_path);
    out << csv.str();
  }
  return kExitOk;
}

int cmd_make_synth(const RunConfig& cfg, const std::string& motion, int frames, double speed, bool out_of_view,
                   const std::string& out_dir) {
  SynthConfig scfg;
  scfg.motion = motion_from_string(motion);
  scfg.length = frames;
  scfg.speed = speed;
  scfg.seed = cfg.seed;
  scfg.out_of_view = out_of_view;
  const auto seq = synth_sequence(scfg);

  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  std::ofstream gt(fs::path(out_dir) / "groundtruth.txt");
  gt << std::setprecision(10);
  for (std::size_t f = 0; f < seq.frames.size(); ++f) {
    std::ostringstream name;
    name << out_dir << "/" << std::setw(6) << std::setfill('0') << f << ".ppm";
    write_ppm(name.str(), seq.frames[f]);
    gt << seq.gt[f].x1 << "," << seq.gt[f].y1 << "," << seq.gt[f].x2 << "," << seq.gt[f].y2 << "\n";
  }
  std::cout << "wrote " << seq.frames.size() << " frames and groundtruth.txt to " << out_dir << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ettk - exemplar-attention tracking toolkit"};
  app.require_subcommand(1);

  auto* gc = app.add_subcommand("gradcheck", "run the f64 finite-difference gradient suite");
  ConfigFlags gc_flags;
  gc_flags.attach(gc);
  std::string gc_out, gc_dtype = "f64";
  gc->add_option("--out", gc_out, "JSON report path");
  gc->add_option("--dtype", gc_dtype, "numeric type (f64 only)");

  auto* be = app.add_subcommand("bench", "latency of head forwards, median and IQR");
  ConfigFlags be_flags;
  be_flags.attach(be);
  std::vector<std::int64_t> be_sizes{16, 32, 64};
  int be_warmup = 3, be_repeats = 30;
  std::vector<std::string> be_kinds{"conv", "conv_residual", "exemplar", "standard_attn"};
  std::string be_out;
  be->add_option("--sizes", be_sizes, "square map sizes");
  be->add_option("--warmup", be_warmup, "warmup iterations (>= 3)");
  be->add_option("--repeats", be_repeats, "timed iterations (>= 30)");
  be->add_option("--kinds", be_kinds, "head kinds to measure");
  be->add_option("--out", be_out, "CSV output path");

  auto* tr = app.add_subcommand("track", "run the tracker over a synthetic or on-disk sequence");
  ConfigFlags tr_flags;
  tr_flags.attach(tr);
  std::string tr_synth = "translate", tr_input, tr_weights, tr_save_weights, tr_out = "track", tr_dump;
  int tr_frames = 50;
  double tr_speed = 2.0;
  bool tr_oov = false, tr_init = false;
  tr->add_option("--synth", tr_synth, "synthetic motion: translate | scale | turn");
  tr->add_option("--input", tr_input, "directory with %06d.ppm/.png frames and groundtruth.txt");
  tr->add_option("--frames", tr_frames, "frame count");
  tr->add_option("--speed", tr_speed, "synthetic translation speed, px/frame");
  tr->add_flag("--out-of-view", tr_oov, "let the synthetic target leave the frame");
  tr->add_option("--weights", tr_weights, "ETWB weights file for the learned head");
  tr->add_flag("--init", tr_init, "learned head from --seed instead of the oracle proposer");
  tr->add_option("--save-weights", tr_save_weights, "write the head weights after initialization");
  tr->add_option("--out", tr_out, "output prefix for .csv/.json");
  tr->add_option("--dump-frames", tr_dump, "directory for PPM overlays");

  auto* ab = app.add_subcommand("ablate", "parameter/loss/latency grid over E, S and layer variants");
  ConfigFlags ab_flags;
  ab_flags.attach(ab);
  int ab_steps = 60;
  double ab_lr = 0.05;
  std::string ab_out;
  ab->add_option("--steps", ab_steps, "training steps per cell");
  ab->add_option("--lr", ab_lr, "starting learning rate (halved on divergence)");
  ab->add_option("--out", ab_out, "CSV output path");

  auto* ms = app.add_subcommand("make-synth", "write a synthetic sequence as PPM frames + groundtruth.txt");
  ConfigFlags ms_flags;
  ms_flags.attach(ms);
  std::string ms_motion = "translate", ms_out = "synth_seq";
  int ms_frames = 50;
  double ms_speed = 2.0;
  bool ms_oov = false;
  ms->add_option("--motion", ms_motion, "translate | scale | turn");
  ms->add_option("--frames", ms_frames, "frame count");
  ms->add_option("--speed", ms_speed, "translation speed, px/frame");
  ms->add_flag("--out-of-view", ms_oov, "let the target leave the frame");
  ms->add_option("--out", ms_out, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    tune_allocator_for_throughput();
    set_finite_checks(true);
    if (gc->parsed()) return cmd_gradcheck(gc_flags.resolve(gc), gc_out, gc_dtype);
    if (be->parsed()) {
      if (be_warmup < 3 || be_repeats < 30) {
        std::cerr << "bench requires warmup >= 3 and repeats >= 30\n";
        return kExitValidation;
      }
      set_finite_checks(false);  // keep the timed loop clean
      return cmd_bench(be_flags.resolve(be), be_sizes, be_warmup, be_repeats, be_kinds, be_out);
    }
    if (tr->parsed()) {
      return cmd_track(tr_flags.resolve(tr), tr_synth, tr_input, tr_frames, tr_speed, tr_oov, tr_weights, tr_init,
                       tr_save_weights, tr_out, tr_dump);
    }
    if (ab->parsed()) return cmd_ablate(ab_flags.resolve(ab), ab_steps, ab_lr, ab_out);
    if (ms->parsed()) return cmd_make_synth(ms_flags.resolve(ms), ms_motion, ms_frames, ms_speed, ms_oov, ms_out);
  } catch (const numeric_error& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  }
  return kExitOk;
}
