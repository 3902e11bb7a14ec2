#include "hdca/commands.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <regex>
#include <sstream>

#include <CLI11.hpp>

#include "hdca/checkpoint.hpp"
#include "hdca/config.hpp"
#include "hdca/dataset.hpp"
#include "hdca/gradsuite.hpp"
#include "hdca/netpbm.hpp"
#include "hdca/training.hpp"

namespace fs = std::filesystem;

namespace hdca {

const std::array<Rgb, 16>& palette() {
  static const std::array<Rgb, 16> colors{{
      {230, 25, 75},   {60, 180, 75},   {255, 225, 25}, {0, 130, 200},
      {245, 130, 48},  {145, 30, 180},  {70, 240, 240}, {240, 50, 230},
      {210, 245, 60},  {250, 190, 212}, {0, 128, 128},  {220, 190, 255},
      {170, 110, 40},  {255, 250, 200}, {128, 0, 0},    {170, 255, 195},
  }};
  return colors;
}

std::vector<std::uint8_t> colorize(const LabelMap& labels) {
  std::vector<std::uint8_t> rgb;
  rgb.reserve(3 * labels.values.size());
  for (auto v : labels.values) {
    const Rgb c = v == kIgnoreIndex ? Rgb{0, 0, 0} : palette()[v % 16];
    rgb.insert(rgb.end(), c.begin(), c.end());
  }
  return rgb;
}

namespace {

Tensor to_model_dtype(const Tensor& image, const SegModel& model) {
  return image.dtype() == model.config().dtype ? image : image.astype(model.config().dtype);
}

LabelMap crop(const LabelMap& m, std::size_t h, std::size_t w) {
  if (m.height == h && m.width == w) return m;
  LabelMap out(h, w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) out.at(y, x) = m.at(y, x);
  }
  return out;
}

}  // namespace

HierarchyMaps hierarchy_maps(SegModel& model, const Tensor& image_in) {
  if (image_in.rank() != 3 || image_in.dim(0) != 3) {
    throw ShapeError("expected a [3,H,W] image, got " + to_string(image_in.shape()));
  }
  const Tensor image = to_model_dtype(image_in, model);
  const std::size_t h = image.dim(1), w = image.dim(2);
  const std::size_t ph = (h + 7) / 8 * 8, pw = (w + 7) / 8 * 8;
  const Tensor padded = (ph == h && pw == w) ? image : reflect_pad(image, ph, pw);

  Graph g;
  g.set_grad_enabled(false);
  auto out = model.forward(g, padded.reshaped({1, 3, ph, pw}), ops::NormMode::Eval);

  HierarchyMaps maps;
  std::vector<Tensor> region_values;
  for (const auto& level : out.levels) {
    region_values.push_back(level.regions.values.value());
    maps.regions.push_back(static_cast<int>(level.regions.regions()));
  }
  for (const auto& m : extract_region_maps(region_values)) {
    maps.levels.push_back(crop(kernels::resize_nearest(m, ph, pw), h, w));
  }
  maps.prediction = crop(kernels::argmax_channels(out.logits.value()).front(), h, w);
  return maps;
}

namespace {

/// Thrown for flag validation problems; mapped to kExitUsage.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::pair<std::size_t, std::size_t> parse_size(const std::string& text) {
  static const std::regex pattern(R"((\d+)[xX](\d+))");
  std::smatch m;
  if (!std::regex_match(text, m, pattern)) {
    throw UsageError("--size " + text + ": expected HxW, e.g. 64x64");
  }
  const auto h = std::stoul(m[1].str()), w = std::stoul(m[2].str());
  if (h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0) {
    throw UsageError("--size " + text + ": height and width must be positive multiples of 8 "
                     "(the network has output stride 8)");
  }
  return {h, w};
}

void ensure_directory(const fs::path& dir, const char* flag) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw std::runtime_error(std::string(flag) + " " + dir.string() + ": cannot create directory" +
                             (ec ? " (" + ec.message() + ")" : std::string()));
  }
  const fs::path probe = dir / ".write_probe";
  std::ofstream f(probe);
  if (!f) throw std::runtime_error(std::string(flag) + " " + dir.string() + ": directory is not writable");
  f.close();
  fs::remove(probe, ec);
}

// ---- gen-data ----

struct GenDataArgs {
  std::string out;
  std::size_t count = 200;
  std::uint64_t seed = 7;
  std::string size = "64x64";
  int classes = 6;
};

int cmd_gen_data(const GenDataArgs& a, std::ostream& out, std::ostream& err) {
  SceneSpec spec;
  std::tie(spec.height, spec.width) = parse_size(a.size);
  spec.classes = a.classes;
  spec.seed = a.seed;
  try {
    spec.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("--classes ") + std::to_string(a.classes) + ": " + e.what());
  }
  ensure_directory(a.out, "--out");
  const auto histogram = generate_corpus(a.out, spec, a.count);
  if (a.count == 0) err << "warning: --count 0 wrote an empty index; this corpus cannot be trained on\n";
  out << "wrote " << a.count << " samples (" << spec.height << "x" << spec.width << ", " << spec.classes
      << " classes, seed " << spec.seed << ") to " << a.out << "\n";
  std::size_t total = 0;
  for (auto c : histogram) total += c;
  char line[96];
  for (std::size_t k = 0; k < histogram.size(); ++k) {
    std::snprintf(line, sizeof line, "class %2zu  pixels %10zu  frequency %.4f\n", k, histogram[k],
                  total ? static_cast<double>(histogram[k]) / static_cast<double>(total) : 0.0);
    out << line;
  }
  return kExitOk;
}

// ---- train ----

struct TrainArgs {
  std::string config;
  std::string data;
  std::string out;
  std::optional<std::string> levels;
  std::optional<std::int64_t> iters;
  std::optional<std::uint64_t> seed;
  std::optional<double> lr;
  std::optional<std::size_t> batch_size;
  std::optional<std::size_t> crop;
  std::optional<std::string> dtype;
  std::optional<std::int64_t> checkpoint_every;
  std::optional<bool> check_invariants;
  std::optional<bool> include_reduced;
  std::optional<bool> augment;
  std::string resume;
};

void apply_levels(RunConfig& cfg, const std::string& text) {
  cfg.model.hdca.region_schedule = parse_int_list(text, "--levels");
  try {
    cfg.model.hdca.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError("--levels " + text + ": " + e.what());
  }
}

RunConfig build_train_config(const TrainArgs& a) {
  RunConfig cfg;
  // The CLI checks region invariants unless told otherwise.
  cfg.train.check_invariants = true;
  if (!a.config.empty()) cfg = load_run_config(a.config, cfg);
  if (a.levels) apply_levels(cfg, *a.levels);
  if (a.iters) cfg.train.iterations = *a.iters;
  if (a.seed) {
    cfg.train.seed = *a.seed;
    cfg.model.init_seed = *a.seed;
  }
  if (a.lr) cfg.train.base_lr = *a.lr;
  if (a.batch_size) cfg.train.batch_size = *a.batch_size;
  if (a.crop) cfg.train.augmentation.crop = *a.crop;
  if (a.dtype) {
    if (*a.dtype == "float32") cfg.model.dtype = DType::Float32;
    else if (*a.dtype == "float64") cfg.model.dtype = DType::Float64;
    else throw UsageError("--dtype " + *a.dtype + ": expected float32 or float64");
  }
  if (a.checkpoint_every) cfg.train.checkpoint_every = *a.checkpoint_every;
  if (a.check_invariants) cfg.train.check_invariants = *a.check_invariants;
  if (a.include_reduced) cfg.model.hdca.include_reduced_features = *a.include_reduced;
  if (a.augment) cfg.train.augment = *a.augment;
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("invalid configuration: ") + e.what());
  }
  return cfg;
}

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  const RunConfig cfg = build_train_config(a);
  const Dataset data = load_dataset(a.data);
  if (!cfg.train.augment) {
    for (const auto& s : data.samples) {
      if (s.labels.height != cfg.train.augmentation.crop || s.labels.width != cfg.train.augmentation.crop) {
        throw UsageError("--crop " + std::to_string(cfg.train.augmentation.crop) +
                         ": without augmentation every image must be crop x crop");
      }
    }
  }
  ensure_directory(a.out, "--out");
  {
    std::ofstream f(fs::path(a.out) / "config.json");
    f << dump_run_config(cfg) << "\n";
  }

  SegModel model(cfg.model);
  OptimizerState state = make_optimizer(cfg.train);
  if (!a.resume.empty()) {
    const CheckpointData ck = read_checkpoint(a.resume);
    restore_parameters(model, ck);
    state = restore_optimizer(ck);
    if (state.iter_max != cfg.train.iterations) {
      throw UsageError("--resume " + a.resume + ": checkpoint was trained for " + std::to_string(state.iter_max) +
                       " iterations, --iters is " + std::to_string(cfg.train.iterations));
    }
    out << "resuming from iteration " << state.iter << "\n";
  }

  std::ofstream log(fs::path(a.out) / "loss.log", std::ios::trunc);
  if (!log) throw std::runtime_error("cannot write " + (fs::path(a.out) / "loss.log").string());
  TrainHooks hooks;
  hooks.on_iteration = [&](const TrainLogEntry& e) { log << format_log_line(e) << '\n'; };
  hooks.on_checkpoint = [&](std::int64_t completed, const OptimizerState& s) {
    log.flush();
    char name[48];
    std::snprintf(name, sizeof name, "checkpoint_%06lld.ckpt", static_cast<long long>(completed));
    save_checkpoint(fs::path(a.out) / name, model, &s);
  };

  const auto start = std::chrono::steady_clock::now();
  TrainResult result;
  try {
    result = train(model, data.samples, cfg.train, state, hooks);
  } catch (const TrainingError& e) {
    log.flush();
    err << "error: " << e.what() << "\n";
    return kExitDiverged;
  }
  log.flush();
  save_checkpoint(fs::path(a.out) / "final.ckpt", model, &state);
  const std::chrono::duration<double> took = std::chrono::steady_clock::now() - start;

  out << "trained " << result.log.size() << " iterations in " << took.count() << " s";
  if (!result.log.empty()) out << ", final loss " << result.log.back().loss;
  out << "\n";
  if (cfg.train.check_invariants && result.invariants.checks > 0) {
    out << "region invariants over " << result.invariants.checks << " level checks: row-sum error "
        << result.invariants.worst_row_sum_error << ", conservation error "
        << result.invariants.worst_conservation_relative << "\n";
  }
  out << "checkpoint: " << (fs::path(a.out) / "final.ckpt").string() << "\n";
  return kExitOk;
}

// ---- eval / infer / viz ----

std::unique_ptr<SegModel> open_model(const std::string& checkpoint, const std::optional<std::string>& levels) {
  const CheckpointData ck = read_checkpoint(checkpoint);
  ModelConfig mc = config_from_checkpoint(ck);
  if (levels) {
    RunConfig rc;
    rc.model = mc;
    apply_levels(rc, *levels);
    mc = rc.model;
  }
  auto model = std::make_unique<SegModel>(mc);
  restore_parameters(*model, ck);
  return model;
}

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  bool tta = false;
  std::string scales = "0.75,1.0,1.25";
  bool no_flip = false;
  std::optional<std::string> levels;
};

int cmd_eval(const EvalArgs& a, std::ostream& out, std::ostream&) {
  auto model = open_model(a.checkpoint, a.levels);
  const Dataset data = load_dataset(a.data);
  EvalOptions opts;
  opts.tta = a.tta;
  opts.scales = parse_double_list(a.scales, "--scales");
  for (double s : opts.scales) {
    if (!(s > 0.0)) throw UsageError("--scales " + a.scales + ": scales must be positive");
  }
  opts.flip = !a.no_flip;
  const EvalResult r = evaluate(*model, data.samples, opts);
  char line[96];
  out << "class  IoU\n";
  for (std::size_t k = 0; k < r.class_iou.size(); ++k) {
    if (r.class_iou[k]) std::snprintf(line, sizeof line, "%5zu  %.4f\n", k, *r.class_iou[k]);
    else std::snprintf(line, sizeof line, "%5zu  n/a (absent)\n", k);
    out << line;
  }
  std::snprintf(line, sizeof line, "pixel_accuracy=%.6f\n", r.pixel_accuracy);
  out << line;
  std::snprintf(line, sizeof line, "mIoU=%.6f\n", r.mean_iou);
  out << line;
  return kExitOk;
}

struct InferArgs {
  std::string checkpoint;
  std::string image;
  std::string out;
  std::string color;
};

int cmd_infer(const InferArgs& a, std::ostream& out, std::ostream&) {
  auto model = open_model(a.checkpoint, std::nullopt);
  const Tensor image = read_ppm(a.image);
  const LabelMap pred = predict_any_size(*model, to_model_dtype(image, *model));
  write_pgm(a.out, pred);
  if (!a.color.empty()) write_file(a.color, encode_ppm_rgb(pred.height, pred.width, colorize(pred)));
  out << "wrote " << pred.height << "x" << pred.width << " label map to " << a.out << "\n";
  return kExitOk;
}

struct VizArgs {
  std::string checkpoint;
  std::string image;
  std::string out;
};

int cmd_viz(const VizArgs& a, std::ostream& out, std::ostream&) {
  auto model = open_model(a.checkpoint, std::nullopt);
  if (!model->has_hierarchy()) {
    throw UsageError("--checkpoint " + a.checkpoint + ": model has no region hierarchy (trained with --levels none)");
  }
  const Tensor image = read_ppm(a.image);
  ensure_directory(a.out, "--out");
  const HierarchyMaps maps = hierarchy_maps(*model, image);
  const fs::path dir(a.out);
  for (std::size_t n = 0; n < maps.levels.size(); ++n) {
    const LabelMap& m = maps.levels[n];
    const std::string stem = "level_" + std::to_string(n + 1);
    write_pgm(dir / (stem + ".pgm"), m);
    write_file(dir / (stem + ".ppm"), encode_ppm_rgb(m.height, m.width, colorize(m)));
    out << stem << ": " << maps.regions[n] << " regions\n";
  }
  write_pgm(dir / "prediction.pgm", maps.prediction);
  write_file(dir / "prediction.ppm",
             encode_ppm_rgb(maps.prediction.height, maps.prediction.width, colorize(maps.prediction)));
  out << "wrote " << maps.levels.size() << " level maps and prediction to " << a.out << "\n";
  return kExitOk;
}

// ---- grad-check ----

int cmd_grad_check(std::uint64_t seed, std::ostream& out) {
  const auto start = std::chrono::steady_clock::now();
  const GradCheckReport report = run_grad_check_suite(seed);
  const std::chrono::duration<double> took = std::chrono::steady_clock::now() - start;
  char line[160];
  for (const auto& c : report.cases) {
    std::snprintf(line, sizeof line, "%-34s max_rel_err=%.3e  %s\n", c.name.c_str(), c.max_relative_error,
                  c.max_relative_error < report.threshold ? "ok" : "FAIL");
    out << line;
  }
  const auto failures = report.failures();
  std::snprintf(line, sizeof line, "%zu/%zu checks passed (threshold %.0e) in %.2f s\n",
                report.cases.size() - failures.size(), report.cases.size(), report.threshold, took.count());
  out << line;
  for (const auto& f : failures) out << "failed: " << f << "\n";
  return failures.empty() ? kExitOk : kExitFailure;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Hierarchical region-context segmentation: data, training, evaluation and inspection"};
  app.name("hdca");
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic scene corpus");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--count", gen.count, "Number of scenes")->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "Corpus seed")->capture_default_str();
  gen_cmd->add_option("--size", gen.size, "Scene size HxW, multiples of 8")->capture_default_str();
  gen_cmd->add_option("--classes", gen.classes, "Number of classes (even)")->capture_default_str();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  train_cmd->add_option("--config", tr.config, "JSON run configuration");
  train_cmd->add_option("--data", tr.data, "Corpus directory")->required();
  train_cmd->add_option("--out", tr.out, "Output directory")->required();
  train_cmd->add_option("--levels", tr.levels, "Region schedule, e.g. 2,4,8,16, or none for the baseline");
  train_cmd->add_option("--iters", tr.iters, "Training iterations");
  train_cmd->add_option("--seed", tr.seed, "Seed for initialization, batches and augmentation");
  train_cmd->add_option("--lr", tr.lr, "Base learning rate");
  train_cmd->add_option("--batch-size", tr.batch_size, "Batch size");
  train_cmd->add_option("--crop", tr.crop, "Crop size (multiple of 8)");
  train_cmd->add_option("--dtype", tr.dtype, "float32 or float64");
  train_cmd->add_option("--checkpoint-every", tr.checkpoint_every, "Checkpoint interval (0 = final only)");
  train_cmd->add_option("--check-invariants", tr.check_invariants, "Check region invariants every step (true/false)");
  train_cmd->add_option("--include-reduced", tr.include_reduced, "Feed X' to the classifier alongside the pyramid");
  train_cmd->add_option("--augment", tr.augment, "Random scale/crop/flip (true/false)");
  train_cmd->add_option("--resume", tr.resume, "Continue from a checkpoint with optimizer state");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a corpus");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--data", ev.data, "Corpus directory")->required();
  eval_cmd->add_flag("--tta", ev.tta, "Average predictions over scales and mirroring");
  eval_cmd->add_option("--scales", ev.scales, "TTA scales")->capture_default_str();
  eval_cmd->add_flag("--no-flip", ev.no_flip, "Disable mirrored TTA passes");
  eval_cmd->add_option("--levels", ev.levels, "Build the model with this schedule instead of the stored one");

  InferArgs inf;
  auto* infer_cmd = app.add_subcommand("infer", "Predict a label map for one image");
  infer_cmd->add_option("--checkpoint", inf.checkpoint, "Checkpoint file")->required();
  infer_cmd->add_option("--image", inf.image, "Input PPM")->required();
  infer_cmd->add_option("--out", inf.out, "Output PGM")->required();
  infer_cmd->add_option("--color", inf.color, "Optional colorized PPM");

  VizArgs viz;
  auto* viz_cmd = app.add_subcommand("viz-hierarchy", "Write per-level region maps for one image");
  viz_cmd->add_option("--checkpoint", viz.checkpoint, "Checkpoint file")->required();
  viz_cmd->add_option("--image", viz.image, "Input PPM")->required();
  viz_cmd->add_option("--out", viz.out, "Output directory")->required();

  std::uint64_t grad_seed = 0;
  auto* grad_cmd = app.add_subcommand("grad-check", "Finite-difference check of every differentiable op");
  grad_cmd->add_option("--seed", grad_seed, "Seed for the random test inputs")->capture_default_str();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    // --help and friends exit 0; every real parse failure is a usage error.
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen_cmd) return cmd_gen_data(gen, out, err);
    if (*train_cmd) return cmd_train(tr, out, err);
    if (*eval_cmd) return cmd_eval(ev, out, err);
    if (*infer_cmd) return cmd_infer(inf, out, err);
    if (*viz_cmd) return cmd_viz(viz, out, err);
    if (*grad_cmd) return cmd_grad_check(grad_seed, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace hdca
