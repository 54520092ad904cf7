// svos: train, evaluate, infer, fine-tune, synthesize data, check gradients.
//
// Exit codes: 0 success, 1 configuration / I/O / shape errors, 2 training
// divergence, 3 gradient check failure.

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "svos/config.hpp"
#include "svos/data.hpp"
#include "svos/error.hpp"
#include "svos/evaluate.hpp"
#include "svos/gradcheck_suite.hpp"
#include "svos/layers.hpp"
#include "svos/online.hpp"
#include "svos/synth.hpp"
#include "svos/training.hpp"
#include "svos/version.hpp"

namespace fs = std::filesystem;
using namespace svos;

namespace {

constexpr int kExitError = 1;
constexpr int kExitDiverged = 2;
constexpr int kExitGradcheck = 3;

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory '" + dir.string() + "'");
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

// Reproducibility header written into every output directory.
void write_run_info(const fs::path& dir, const std::string& command, std::uint64_t seed,
                    const std::map<std::string, std::string>& config, int threads) {
  const std::string rendered = render_key_values(config);
  nlohmann::json j{{"command", command},
                   {"version", kVersion},
                   {"seed", seed},
                   {"threads", threads},
                   {"config_digest", crc32_hex({reinterpret_cast<const std::uint8_t*>(rendered.data()), rendered.size()})},
                   {"config", config}};
  write_text(dir / "run_info.json", j.dump(2) + "\n");
}

std::string frame_name(int index, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%05d.%s", index, ext);
  return buf;
}

int resolve_threads(int flag) { return flag > 0 ? flag : default_thread_count(); }

// train

struct TrainArgs {
  std::string config, out, resume;
  int threads = 0;
};

int cmd_train(const TrainArgs& a) {
  const auto cfg = TrainConfig::load(a.config);
  if (cfg.data.empty()) throw ConfigError(a.config + ": missing 'data' (manifest path)");
  const fs::path out(a.out);
  ensure_dir(out);
  const int threads = resolve_threads(a.threads);
  write_run_info(out, "train", cfg.seed, cfg.to_key_values(), threads);

  auto videos = load_dataset(cfg.data, threads);
  if (videos.empty()) throw ValueError("dataset '" + cfg.data.string() + "' has no videos");
  auto prepared = prepare_training_set(videos, cfg.model);
  videos.clear();

  std::optional<Trainer> trainer;
  if (a.resume.empty())
    trainer.emplace(cfg, std::move(prepared));
  else
    trainer.emplace(cfg, std::move(prepared), load_checkpoint(a.resume, cfg.model.preset));

  std::ofstream log(out / "loss.csv", a.resume.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw IoError("cannot write '" + (out / "loss.csv").string() + "'");
  if (a.resume.empty()) log << "step,stage,loss\n";
  log.precision(9);

  const auto on_step = [&](const StepRecord& r) {
    log << r.step << ',' << to_string(r.stage) << (r.curriculum ? "+curriculum" : "") << ',' << r.loss << '\n';
    if (r.step % 100 == 0) log.flush();
  };
  const auto on_checkpoint = [&](const Checkpoint& ck) {
    save_checkpoint(ck, out / ("model_step" + std::to_string(ck.progress.step) + ".svos"));
  };
  try {
    const auto final_ck = trainer->run(on_step, on_checkpoint);
    log.flush();
    save_checkpoint(final_ck, out / "model_final.svos");
    std::cout << "trained " << final_ck.progress.step << " steps; checkpoint " << (out / "model_final.svos").string()
              << "\n";
  } catch (const DivergenceError& e) {
    log.flush();
    save_checkpoint(trainer->checkpoint(), out / "model_diverged.svos");
    throw;
  }
  return 0;
}

// eval

struct EvalArgs {
  std::string checkpoint, data, out, online_config, preset;
  bool online = false;
  bool no_predictions = false;
  int threads = 0;
};

int cmd_eval(const EvalArgs& a) {
  const auto ck = load_checkpoint(a.checkpoint, a.preset);
  const int threads = resolve_threads(a.threads);
  EvalOptions opt;
  opt.online = a.online;
  opt.threads = threads;
  opt.keep_probabilities = !a.no_predictions;
  if (!a.online_config.empty()) opt.online_config = OnlineConfig::load(a.online_config);

  const fs::path out(a.out);
  ensure_dir(out);
  auto info = ck.train_config;
  info["checkpoint"] = a.checkpoint;
  info["data"] = a.data;
  info["online"] = a.online ? "true" : "false";
  if (a.online)
    for (const auto& [k, v] : opt.online_config.to_key_values()) info["online." + k] = v;
  write_run_info(out, "eval", opt.online_config.seed, info, threads);

  const auto videos = load_dataset(a.data, threads);
  const auto model = ck.make_model();
  const auto result = evaluate(model, videos, opt);

  write_text(out / "report.json", report_json(result.report));
  write_text(out / "per_frame.csv", per_frame_csv(result.report));
  write_text(out / "curve.csv", curve_csv(result.report));

  if (opt.keep_probabilities) {
    for (const auto& pred : result.predictions) {
      const auto& video =
          *std::find_if(videos.begin(), videos.end(), [&](const VideoSequence& v) { return v.id == pred.video_id; });
      for (const auto& obj : pred.objects) {
        const auto dir = out / "predictions" / pred.video_id / std::to_string(obj.object_id);
        ensure_dir(dir);
        for (std::size_t t = 0; t < obj.probabilities.size(); ++t)
          write_mask_pgm(dir / frame_name(static_cast<int>(t + 1), "pgm"), tensor_to_mask(obj.probabilities[t]));
      }
      const auto odir = out / "overlays" / pred.video_id;
      ensure_dir(odir);
      for (std::size_t t = 1; t < video.length(); ++t) {
        std::vector<const Tensor<float>*> probs;
        for (const auto& obj : pred.objects) probs.push_back(&obj.probabilities[t - 1]);
        write_ppm(odir / frame_name(static_cast<int>(t), "ppm"), overlay(video.frames[t], resolve_overlaps(probs)));
      }
    }
  }
  const auto& r = result.report;
  std::printf("J mean %.4f recall %.4f decay %.4f | F mean %.4f recall %.4f decay %.4f (%zu objects)\n", r.j.mean,
              r.j.recall, r.j.decay, r.f.mean, r.f.recall, r.f.decay, r.objects.size());
  return 0;
}

// infer

struct InferArgs {
  std::string checkpoint, frames, mask, out;
};

int cmd_infer(const InferArgs& a) {
  const auto ck = load_checkpoint(a.checkpoint);
  std::vector<fs::path> paths;
  std::error_code ec;
  for (const auto& e : fs::directory_iterator(a.frames, ec))
    if (e.is_regular_file() && e.path().extension() == ".ppm") paths.push_back(e.path());
  if (ec) throw IoError("cannot read frame directory '" + a.frames + "'");
  std::sort(paths.begin(), paths.end());
  if (paths.size() < 2) throw ValueError("'" + a.frames + "' needs at least two .ppm frames");

  std::vector<Image> frames;
  for (const auto& p : paths) frames.push_back(read_ppm(p));
  const Mask mask = read_mask_pgm(a.mask);
  if (mask.width != frames[0].width || mask.height != frames[0].height)
    throw ShapeError("mask '" + a.mask + "' is " + std::to_string(mask.width) + "x" + std::to_string(mask.height) +
                     " but frame 0 is " + std::to_string(frames[0].width) + "x" + std::to_string(frames[0].height));

  const fs::path out(a.out);
  ensure_dir(out);
  write_run_info(out, "infer", 0, {{"checkpoint", a.checkpoint}, {"frames", a.frames}, {"mask", a.mask}}, 1);
  const auto model = ck.make_model();
  const auto probs = predict_object(model, frames, mask, EvalOptions{});
  for (std::size_t t = 0; t < probs.size(); ++t)
    write_mask_pgm(out / (paths[t + 1].stem().string() + ".pgm"), tensor_to_mask(probs[t]));
  std::cout << "wrote " << probs.size() << " masks to " << out.string() << "\n";
  return 0;
}

// finetune

struct FinetuneArgs {
  std::string checkpoint, frame, mask, config, out;
  int iterations = -1;
  long long seed = -1;
};

int cmd_finetune(const FinetuneArgs& a) {
  const auto ck = load_checkpoint(a.checkpoint);
  OnlineConfig oc;
  if (!a.config.empty()) oc = OnlineConfig::load(a.config);
  if (a.iterations >= 0) oc.iterations = a.iterations;
  if (a.seed >= 0) oc.seed = static_cast<std::uint64_t>(a.seed);
  oc.validate();

  const Image frame = read_ppm(a.frame);
  const Mask mask = read_mask_pgm(a.mask);
  if (mask.width != frame.width || mask.height != frame.height) throw ShapeError("mask and frame sizes differ");
  const auto x0 = resize_bilinear(image_to_tensor<float>(frame), ck.model.input_h, ck.model.input_w);
  const auto y0 = resize_nearest(mask_to_tensor<float>(mask), ck.model.input_h, ck.model.input_w);

  const fs::path out(a.out);
  ensure_dir(out);
  write_run_info(out, "finetune", oc.seed, oc.to_key_values(), 1);
  OnlineResult result;
  const auto tuned = online_finetune(ck, x0, y0, oc, &result);
  std::string csv = "iteration,loss\n";
  for (std::size_t i = 0; i < result.losses.size(); ++i) csv += std::to_string(i) + "," + std::to_string(result.losses[i]) + "\n";
  write_text(out / "finetune_loss.csv", csv);
  save_checkpoint(tuned, out / "model_finetuned.svos");
  std::printf("pair loss %.5f -> %.5f over %zu iterations%s\n", result.initial_loss(), result.final_loss(),
              result.losses.size(), result.diverged ? " (stopped on non-finite loss)" : "");
  return 0;
}

// synth

struct SynthArgs {
  std::string config, out;
  int count = 1;
  std::string prefix = "synth";
};

int cmd_synth(const SynthArgs& a) {
  SynthConfig sc;
  if (!a.config.empty()) {
    auto kv = KeyValues::load(a.config);
    sc = SynthConfig::from_key_values(kv);
    kv.finish();
  }
  if (a.count < 0) throw ConfigError("--count must be non-negative");
  const fs::path out(a.out);
  ensure_dir(out);
  write_run_info(out, "synth", sc.seed, sc.to_key_values(), 1);
  std::vector<VideoDescriptor> entries;
  for (int i = 0; i < a.count; ++i) {
    auto c = sc;
    c.seed = sc.seed + static_cast<std::uint64_t>(i);
    entries.push_back(write_video(out, synth_generate(c, a.prefix + "_" + std::to_string(i))));
  }
  write_manifest(out / "manifest.json", entries);
  std::cout << "wrote " << a.count << " sequences to " << (out / "manifest.json").string() << "\n";
  return 0;
}

// gradcheck

struct GradcheckArgs {
  std::string preset = "desk-micro";
  bool inject_fault = false;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  debug::set_conv_gradient_fault(a.inject_fault);
  const auto report = run_gradcheck_suite(a.preset);
  debug::set_conv_gradient_fault(false);
  std::size_t elements = 0, kinked = 0;
  for (const auto& e : report.entries) {
    elements += e.elements;
    kinked += e.kink_limited;
  }
  const auto& worst = report.worst();
  std::printf("%zu checks over %zu elements in %.1f s; worst %s rel err %.3e (tolerance %.0e)\n",
              report.entries.size(), elements, report.seconds, worst.name.c_str(), worst.max_rel_error,
              report.tolerance);
  std::printf("%zu elements used a reduced step next to a relu / max-pool kink\n", kinked);
  if (report.passed()) return 0;
  for (const auto& e : report.entries)
    if (e.max_rel_error >= report.tolerance || e.unresolved)
      std::printf("FAIL %s rel err %.3e (%zu elements unresolved at a kink)\n", e.name.c_str(), e.max_rel_error,
                  e.unresolved);
  return kExitGradcheck;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sequence-to-sequence video object segmentation"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train a model from a key=value config");
  t->add_option("--config", train.config, "Training config")->required();
  t->add_option("--out", train.out, "Output directory")->required();
  t->add_option("--resume", train.resume, "Checkpoint to resume from");
  t->add_option("--threads", train.threads, "Data loading workers (default: SVOS_THREADS or 1)");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest");
  e->add_option("--checkpoint", ev.checkpoint)->required();
  e->add_option("--data", ev.data, "manifest.json")->required();
  e->add_option("--out", ev.out)->required();
  e->add_flag("--online", ev.online, "Fine-tune on each object's first frame before unrolling");
  e->add_option("--online-config", ev.online_config, "Online learning config");
  e->add_option("--preset", ev.preset, "Refuse checkpoints trained with another preset");
  e->add_flag("--no-predictions", ev.no_predictions, "Skip mask and overlay images");
  e->add_option("--threads", ev.threads, "Evaluation workers (default: SVOS_THREADS or 1)");

  InferArgs inf;
  auto* i = app.add_subcommand("infer", "Segment one object through a directory of frames");
  i->add_option("--checkpoint", inf.checkpoint)->required();
  i->add_option("--frames", inf.frames, "Directory of .ppm frames, sorted by name")->required();
  i->add_option("--mask", inf.mask, "Frame-0 mask (.pgm)")->required();
  i->add_option("--out", inf.out)->required();

  FinetuneArgs ft;
  auto* f = app.add_subcommand("finetune", "Online-learn a checkpoint on one first frame");
  f->add_option("--checkpoint", ft.checkpoint)->required();
  f->add_option("--frame", ft.frame, "First frame (.ppm)")->required();
  f->add_option("--mask", ft.mask, "First-frame mask (.pgm)")->required();
  f->add_option("--config", ft.config, "Online learning config");
  f->add_option("--iterations", ft.iterations);
  f->add_option("--seed", ft.seed);
  f->add_option("--out", ft.out)->required();

  SynthArgs sy;
  auto* s = app.add_subcommand("synth", "Generate synthetic sequences and a manifest");
  s->add_option("--config", sy.config, "Synthesis config");
  s->add_option("--out", sy.out)->required();
  s->add_option("--count", sy.count, "Number of sequences");
  s->add_option("--prefix", sy.prefix, "Sequence id prefix");

  GradcheckArgs gc;
  auto* g = app.add_subcommand("gradcheck", "Finite-difference gradient checks in double precision");
  g->add_option("--preset", gc.preset, "Model shapes for the end-to-end check");
  g->add_flag("--inject-fault", gc.inject_fault)->group("");  // test fixture: corrupt conv backward

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForVersion& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex);
    return kExitError;
  }

  try {
    if (*t) return cmd_train(train);
    if (*e) return cmd_eval(ev);
    if (*i) return cmd_infer(inf);
    if (*f) return cmd_finetune(ft);
    if (*s) return cmd_synth(sy);
    if (*g) return cmd_gradcheck(gc);
  } catch (const DivergenceError& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return kExitDiverged;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return kExitError;
  }
  return kExitError;
}
