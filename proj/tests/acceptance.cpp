// Acceptance suite: one PASS/FAIL line per criterion. Run with criterion
// numbers as arguments to select a subset; no arguments runs all of them.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>

#include "hdca/checkpoint.hpp"
#include "hdca/dataset.hpp"
#include "hdca/gradsuite.hpp"
#include "hdca/hdca.hpp"
#include "hdca/netpbm.hpp"
#include "hdca/synthdata.hpp"
#include "hdca/training.hpp"
#include "hdca_oracles.hpp"
#include "test_util.hpp"

namespace hdca {
namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

struct Verdict {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.at(i) - b.at(i)));
  return m;
}

Tensor random_regions(std::size_t b, std::size_t s, std::size_t h, std::size_t w, std::mt19937_64& rng) {
  Tensor logits = test::random_tensor({b, s, h, w}, rng, -3.0, 3.0);
  Graph g;
  return ops::softmax_channels(g.constant(logits)).value();
}

// ---- 1 ----

Verdict gradient_oracle() {
  const auto report = run_grad_check_suite(0, 1e-4);
  double worst = 0.0, seconds = 0.0;
  for (const auto& c : report.cases) {
    worst = std::max(worst, c.max_relative_error);
    seconds += c.seconds;
  }
  const bool has_stack = std::any_of(report.cases.begin(), report.cases.end(),
                                     [](const GradCheckCase& c) { return c.name.find("forward_stack") == 0; });
  Verdict v;
  v.pass = report.passed() && has_stack && seconds < 60.0;
  v.detail = std::to_string(report.cases.size()) + " cases, worst relative error " + fmt("%.3g", worst) +
             " (< 1e-4), " + fmt("%.2f", seconds) + " s (< 60 s)";
  for (const auto& f : report.failures()) v.detail += "; failed " + f;
  return v;
}

// ---- 2 ----

Verdict equation_oracles() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> side(1, 6), regions(1, 5), channels(1, 8), batch(1, 2);
  double worst_v = 0.0, worst_n = 0.0, worst_r = 0.0;
  const int instances = 200;
  for (int i = 0; i < instances; ++i) {
    const std::size_t b = batch(rng), h = side(rng), w = side(rng), s = regions(rng), c = channels(rng);
    const Tensor p = random_regions(b, s, h, w, rng);
    const Tensor x = test::random_tensor({b, c, h, w}, rng, -2.0, 2.0);
    const Tensor ctx = test::random_tensor({b, s, c}, rng);
    Graph g;
    const Var pv = g.constant(p);
    const Var v = aggregate_contexts(pv, g.constant(x));
    worst_v = std::max(worst_v, max_abs_diff(v.value(), oracle::aggregate(p, x)));
    const auto n = normalize_contexts(v, pv, 1e-6);
    worst_n = std::max(worst_n, max_abs_diff(n.normalized.value(), oracle::normalize(oracle::aggregate(p, x), p, 1e-6)));
    worst_r = std::max(worst_r, max_abs_diff(reproject(pv, g.constant(ctx)).value(), oracle::reproject(p, ctx)));
  }
  const double secs = seconds_since(t0);
  Verdict v;
  v.pass = worst_v <= 1e-6 && worst_n <= 1e-6 && worst_r <= 1e-6 && secs < 10.0;
  v.detail = std::to_string(instances) + " instances; max |diff| aggregate " + fmt("%.2g", worst_v) + ", normalize " +
             fmt("%.2g", worst_n) + ", reproject " + fmt("%.2g", worst_r) + " (<= 1e-6), " + fmt("%.2f", secs) +
             " s (< 10 s)";
  return v;
}

// ---- 3 ----

Verdict mean_broadcast_oracle() {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> side(1, 6), regions(1, 5), channels(1, 8);
  double worst = 0.0, worst_split = 0.0;
  const int trials = 100;
  for (int t = 0; t < trials; ++t) {
    const std::size_t h = side(rng), w = side(rng), s = regions(rng), c = channels(rng), hw = h * w;
    std::uniform_int_distribution<std::size_t> pick(0, s - 1);
    std::vector<std::vector<std::size_t>> assignment(1, std::vector<std::size_t>(hw));
    Tensor p = Tensor::zeros({1, s, h, w}, DType::Float64);
    for (std::size_t j = 0; j < hw; ++j) {
      assignment[0][j] = pick(rng);
      p.set(assignment[0][j] * hw + j, 1.0);
    }
    const Tensor x = test::random_tensor({1, c, h, w}, rng, -2.0, 2.0);

    ParameterSet params;
    std::mt19937_64 init(t);
    auto level = HdcaLevelParams::create(params, 1, static_cast<int>(std::max<std::size_t>(s, 2)), 2, 2, c, c,
                                         DType::Float64, init);
    Tensor eye = Tensor::zeros({c, c}, DType::Float64);
    for (std::size_t i = 0; i < c; ++i) eye.set(i * c + i, 1.0);
    level.reduce_weight->value = eye;
    level.reduce_bias->value.fill(0.0);

    Graph g;
    const auto out = contextualize(g, g.constant(x), {g.constant(p), 1}, level, 1e-6);
    worst = std::max(worst, max_abs_diff(out.output.value(), oracle::mean_broadcast(assignment, s, x)));

    // forward_level is region inference followed by exactly this computation.
    if (s >= 2) {
      const Tensor xr = test::random_tensor({1, 2, h, w}, rng);
      Graph g2;
      const auto full = forward_level(g2, g2.constant(x), g2.constant(xr), std::nullopt, level, ops::NormMode::Eval, 1e-6);
      const auto split = contextualize(g2, g2.constant(x), full.regions, level, 1e-6);
      worst_split = std::max(worst_split, max_abs_diff(full.output.value(), split.output.value()));
    }
  }
  Verdict v;
  v.pass = worst <= 1e-6 && worst_split == 0.0;
  v.detail = std::to_string(trials) + " one-hot instances, max |level - mean broadcast| " + fmt("%.2g", worst) +
             " (<= 1e-6); forward_level vs inference+contextualize " + fmt("%.2g", worst_split);
  return v;
}

// ---- 4 ----

std::vector<SceneSample> smoke_corpus(std::size_t n, std::size_t size, std::uint64_t seed) {
  SceneSpec spec;
  spec.height = spec.width = size;
  spec.seed = seed;
  std::vector<SceneSample> data;
  for (std::size_t i = 0; i < n; ++i) data.push_back(generate_scene(spec, i));
  return data;
}

Verdict stochasticity_conservation() {
  const auto data = smoke_corpus(8, 64, 4);
  std::string detail;
  bool pass = true;
  for (DType dtype : {DType::Float32, DType::Float64}) {
    ModelConfig mc;
    mc.hdca.region_schedule = {2, 4, 8, 16};
    mc.dtype = dtype;
    SegModel model(mc);
    TrainConfig tc;
    tc.iterations = 20;
    tc.check_invariants = true;
    tc.conservation_tolerance = 1e-4;
    OptimizerState state = make_optimizer(tc);
    TrainResult r;
    try {
      r = train(model, data, tc, state);
    } catch (const std::exception& e) {
      return {false, std::string("smoke run aborted: ") + e.what()};
    }
    const auto& inv = r.invariants;
    const bool ok = inv.checks == 20 * 4 && inv.worst_row_sum_error <= 1e-6 && inv.worst_range_violation == 0.0 &&
                    inv.worst_conservation_absolute <= 1e-4;
    pass = pass && ok;
    detail += std::string(dtype == DType::Float32 ? "float32" : "float64") + ": " + std::to_string(inv.checks) +
              " level checks, row-sum err " + fmt("%.2g", inv.worst_row_sum_error) + ", conservation abs " +
              fmt("%.2g", inv.worst_conservation_absolute) + " rel " + fmt("%.2g", inv.worst_conservation_relative) +
              "; ";
  }
  return {pass, detail + "tolerances 1e-6 / 1e-4"};
}

// ---- 5 ----

Verdict ablation_trend() {
  const auto t0 = Clock::now();
  test::TempDir dir("ablation");
  SceneSpec spec;
  spec.seed = 7;
  generate_corpus(dir.path() / "train", spec, 200);
  SceneSpec held_out = spec;
  held_out.seed = 1007;
  generate_corpus(dir.path() / "test", held_out, 100);
  const Dataset train_set = load_dataset(dir.path() / "train");
  const Dataset test_set = load_dataset(dir.path() / "test");

  const std::vector<std::pair<std::string, std::vector<int>>> variants{{"baseline", {}}, {"S_1", {2}}, {"S_2", {2, 4}}};
  std::map<std::string, double> median;
  std::string detail;
  for (const auto& [name, schedule] : variants) {
    std::vector<double> scores;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      ModelConfig mc;
      mc.hdca.region_schedule = schedule;
      mc.hdca.include_reduced_features = true;
      mc.init_seed = seed;
      SegModel model(mc);
      TrainConfig tc;
      tc.seed = seed;
      OptimizerState state = make_optimizer(tc);
      train(model, train_set.samples, tc, state);
      scores.push_back(evaluate(model, test_set.samples).mean_iou);
    }
    std::vector<double> sorted = scores;
    std::sort(sorted.begin(), sorted.end());
    median[name] = sorted[1];
    detail += name + " median " + fmt("%.4f", sorted[1]) + " [" + fmt("%.4f", scores[0]) + " " +
              fmt("%.4f", scores[1]) + " " + fmt("%.4f", scores[2]) + "]; ";
  }
  const double minutes = seconds_since(t0) / 60.0;
  const double gain = median["S_2"] - median["baseline"];
  Verdict v;
  v.pass = median["S_2"] >= median["S_1"] && median["S_1"] >= median["baseline"] && gain >= 0.02 && minutes < 45.0;
  v.detail = detail + "S_2 - baseline " + fmt("%+.4f", gain) + " (>= 0.02), " + fmt("%.1f", minutes) + " min (< 45)";
  return v;
}

// ---- 6 ----

Verdict schedule_fidelity() {
  ModelConfig mc;
  mc.hdca.region_schedule = {2, 4, 8, 16};
  SegModel model(mc);
  std::mt19937_64 rng(6);
  const Tensor images = test::random_tensor({2, 3, 64, 64}, rng, 0.0, 1.0, DType::Float32);
  Graph g;
  const auto out = model.forward(g, images, ops::NormMode::Eval);
  const int bounds[] = {2, 4, 8, 16};
  bool pass = out.levels.size() == 4;
  std::string detail = std::to_string(out.levels.size()) + " region maps; max index per level:";
  std::vector<Tensor> maps;
  for (const auto& l : out.levels) maps.push_back(l.regions.values.value());
  for (std::size_t b = 0; b < 2 && pass; ++b) {
    const auto labels = extract_region_maps(maps, b);
    for (std::size_t n = 0; n < labels.size(); ++n) {
      const int top = *std::max_element(labels[n].values.begin(), labels[n].values.end());
      pass = pass && top < bounds[n] && maps[n].dim(1) == static_cast<std::size_t>(bounds[n]);
      if (b == 0) detail += " " + std::to_string(top) + "<" + std::to_string(bounds[n]);
    }
  }
  const std::size_t cn = static_cast<std::size_t>(mc.hdca.context_channels);
  Graph g2;
  const auto again = model.forward(g2, images, ops::NormMode::Eval);
  const std::size_t pyramid = model.stack()->pyramid_channels();
  const Var stacked = model.stack()->forward(g2, again.features, again.reduced, ops::NormMode::Eval).pyramid;
  pass = pass && pyramid == 4 * cn && stacked.shape()[1] == 4 * cn && model.classifier_in_channels() == 4 * cn;
  detail += "; pyramid channels " + std::to_string(stacked.shape()[1]) + " = 4*C_n (" + std::to_string(4 * cn) + ")";
  return {pass, detail};
}

// ---- 7 ----

Verdict poly_lr_closed_form() {
  const auto data = smoke_corpus(4, 32, 7);
  ModelConfig mc;
  mc.hdca.region_schedule = {2};
  SegModel model(mc);
  TrainConfig tc;
  tc.iterations = 100;
  tc.batch_size = 1;
  tc.augmentation.crop = 32;
  OptimizerState state = make_optimizer(tc);
  const auto result = train(model, data, tc, state);
  double worst = 0.0;
  for (const auto& e : result.log) {
    const double expected = tc.base_lr * std::pow(1.0 - static_cast<double>(e.iter) / 100.0, 0.9);
    worst = std::max(worst, std::abs(e.lr - expected));
  }
  const bool bounds = poly_lr(0, 100, tc.base_lr) == tc.base_lr && poly_lr(100, 100, tc.base_lr) == 0.0 &&
                      result.log.front().lr == tc.base_lr;
  Verdict v;
  v.pass = result.log.size() == 100 && worst <= 1e-12 && bounds;
  v.detail = std::to_string(result.log.size()) + " logged iterations, max |lr - closed form| " + fmt("%.2g", worst) +
             " (<= 1e-12); boundary values " + (bounds ? "exact" : "NOT exact");
  return v;
}

// ---- 8 ----

std::vector<std::string> log_lines(const TrainResult& r) {
  std::vector<std::string> lines;
  for (const auto& e : r.log) lines.push_back(format_log_line(e));
  return lines;
}

Verdict checkpoint_resume() {
  test::TempDir dir("resume");
  const auto data = smoke_corpus(8, 64, 8);
  ModelConfig mc;
  mc.hdca.region_schedule = {2, 4};
  TrainConfig tc;
  tc.iterations = 80;
  tc.checkpoint_every = 20;
  const std::int64_t split = 20;

  SegModel straight(mc);
  OptimizerState state = make_optimizer(tc);
  TrainHooks hooks;
  hooks.on_checkpoint = [&](std::int64_t done, const OptimizerState& s) {
    if (done == split) save_checkpoint(dir.path() / "mid.ckpt", straight, &s);
  };
  const auto expected = log_lines(train(straight, data, tc, state, hooks));
  save_checkpoint(dir.path() / "final.ckpt", straight, &state);

  LoadedModel loaded = load_model(dir.path() / "mid.ckpt");
  if (!loaded.optimizer) return {false, "checkpoint lacks optimizer state"};
  tc.checkpoint_every = 0;
  const auto resumed = log_lines(train(*loaded.model, data, tc, *loaded.optimizer));
  save_checkpoint(dir.path() / "resumed.ckpt", *loaded.model, &*loaded.optimizer);

  const bool logs_equal = resumed == std::vector<std::string>(expected.begin() + split, expected.end());
  const bool finals_equal = read_file(dir.path() / "final.ckpt") == read_file(dir.path() / "resumed.ckpt");
  LoadedModel again = load_model(dir.path() / "final.ckpt");
  save_checkpoint(dir.path() / "resaved.ckpt", *again.model, &*again.optimizer);
  const bool roundtrip = read_file(dir.path() / "final.ckpt") == read_file(dir.path() / "resaved.ckpt");

  Verdict v;
  v.pass = logs_equal && finals_equal && roundtrip && resumed.size() >= 50;
  v.detail = "save-load-save " + std::string(roundtrip ? "byte-identical" : "DIFFERS") + "; resumed " +
             std::to_string(resumed.size()) + " iterations, loss log " + (logs_equal ? "bit-exact" : "DIFFERS") +
             ", final checkpoint " + (finals_equal ? "identical" : "DIFFERS");
  return v;
}

// ---- 9 ----

// Minimal reader written from the Netpbm format description, independent of
// the library codec: magic, whitespace/comment separated width, height,
// maxval, one whitespace byte, raster.
struct RawNetpbm {
  std::string magic;
  std::size_t width = 0, height = 0, maxval = 0;
  std::vector<std::uint8_t> raster;
};

RawNetpbm read_netpbm_independently(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::size_t i = 0;
  auto token = [&] {
    for (;;) {
      while (i < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[i]))) ++i;
      if (i < bytes.size() && bytes[i] == '#') {
        while (i < bytes.size() && bytes[i] != '\n') ++i;
        continue;
      }
      break;
    }
    std::string t;
    while (i < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[i]))) t += bytes[i++];
    return t;
  };
  RawNetpbm r;
  r.magic = token();
  r.width = std::stoul(token());
  r.height = std::stoul(token());
  r.maxval = std::stoul(token());
  ++i;  // single whitespace byte
  const std::size_t channels = r.magic == "P6" ? 3 : 1;
  const std::size_t need = r.width * r.height * channels;
  if (bytes.size() != i + need) throw std::runtime_error(path.string() + ": raster size mismatch");
  r.raster.assign(bytes.begin() + static_cast<std::ptrdiff_t>(i), bytes.end());
  return r;
}

bool python_pil_available() {
  return std::system("python3 -c 'import PIL' >/dev/null 2>&1") == 0;
}

Verdict format_compliance() {
  test::TempDir dir("formats");
  SceneSpec spec;
  spec.seed = 9;
  spec.height = 40;
  spec.width = 56;
  generate_corpus(dir.path(), spec, 3);

  bool pass = true;
  std::string detail;
  std::size_t checked = 0;
  std::ofstream expect(dir.path() / "expected.txt");
  for (int i = 0; i < 3; ++i) {
    char stem[16];
    std::snprintf(stem, sizeof stem, "%06d", i);
    const fs::path img = dir.path() / "images" / (std::string(stem) + ".ppm");
    const fs::path lbl = dir.path() / "labels" / (std::string(stem) + ".pgm");
    const SceneSample s = generate_scene(spec, static_cast<std::uint64_t>(i));

    const RawNetpbm pi = read_netpbm_independently(img);
    const RawNetpbm pl = read_netpbm_independently(lbl);
    bool ok = pi.magic == "P6" && pl.magic == "P5" && pi.maxval == 255 && pl.maxval == 255 && pi.width == 56 &&
              pi.height == 40 && pl.width == 56 && pl.height == 40;
    ok = ok && pl.raster == s.labels.values;  // lossless labels
    const std::size_t plane = 40 * 56;
    for (std::size_t j = 0; ok && j < plane; ++j) {
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = pi.raster[j * 3 + c] / 255.0;
        if (std::abs(v - s.image.at(c * plane + j)) > 0.5 / 255.0 + 1e-6) ok = false;
      }
    }
    ok = ok && decode_pgm(encode_pgm(s.labels)) == s.labels && read_pgm(lbl) == s.labels;
    pass = pass && ok;
    ++checked;

    // Checksums for the external reader: sum of raster bytes per file.
    std::uint64_t si = 0, sl = 0;
    for (auto b : pi.raster) si += b;
    for (auto b : pl.raster) sl += b;
    expect << img.string() << ' ' << si << '\n' << lbl.string() << ' ' << sl << '\n';
  }
  expect.close();
  detail = std::to_string(checked) + " image/label pairs parsed by an independent reader, labels lossless";

  if (python_pil_available()) {
    const fs::path script = dir.path() / "check.py";
    std::ofstream(script) << "import sys\n"
                             "from PIL import Image\n"
                             "for line in open(sys.argv[1]):\n"
                             "    path, total = line.rsplit(' ', 1)\n"
                             "    im = Image.open(path)\n"
                             "    assert im.size == (56, 40), im.size\n"
                             "    assert im.mode == ('RGB' if path.endswith('.ppm') else 'L'), im.mode\n"
                             "    assert sum(im.tobytes()) == int(total), path\n";
    const std::string cmd = "python3 '" + script.string() + "' '" + (dir.path() / "expected.txt").string() + "'";
    const bool pil_ok = std::system(cmd.c_str()) == 0;
    pass = pass && pil_ok;
    detail += std::string("; PIL ") + (pil_ok ? "accepts all files with matching pixels" : "REJECTED a file");
  } else {
    detail += "; PIL not available, external reader skipped";
  }
  return {pass, detail};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Verdict()> run;
};

}  // namespace
}  // namespace hdca

int main(int argc, char** argv) {
  using namespace hdca;
  const std::vector<Criterion> all{
      {1, "gradient oracle", gradient_oracle},
      {2, "aggregate/normalize/reproject scalar oracles", equation_oracles},
      {3, "mean-broadcast oracle", mean_broadcast_oracle},
      {4, "stochasticity and conservation", stochasticity_conservation},
      {5, "desk-scale ablation trend", ablation_trend},
      {6, "schedule fidelity", schedule_fidelity},
      {7, "poly LR closed form", poly_lr_closed_form},
      {8, "checkpoint round trip and resume", checkpoint_resume},
      {9, "format compliance", format_compliance},
  };
  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) selected.push_back(std::atoi(argv[i]));

  int failures = 0;
  for (const auto& c : all) {
    if (!selected.empty() && std::find(selected.begin(), selected.end(), c.id) == selected.end()) continue;
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << c.id << " (" << c.name << "): " << v.detail
              << std::endl;
    if (!v.pass) ++failures;
  }
  return failures == 0 ? 0 : 1;
}
