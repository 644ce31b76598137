// Acceptance suite: one PASS/FAIL line per criterion, plus INFO lines with
// the measured values, on stdout and in the file named by argv[1] if given.
// Exit status is nonzero when any criterion fails.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "ctxpatch/attack.hpp"
#include "ctxpatch/cli.hpp"
#include "ctxpatch/config.hpp"
#include "ctxpatch/detector_train.hpp"
#include "ctxpatch/eval.hpp"
#include "ctxpatch/scene_synth.hpp"
#include "oracles.hpp"

using namespace ctxpatch;
namespace fs = std::filesystem;

namespace {

int failures = 0;
std::FILE* results = nullptr;

void emit(const std::string& line) {
  std::printf("%s\n", line.c_str());
  std::fflush(stdout);
  if (results) {
    std::fprintf(results, "%s\n", line.c_str());
    std::fflush(results);
  }
}

class Timer {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

void verdict(int id, bool ok, const std::string& name, const std::string& detail) {
  char head[64];
  std::snprintf(head, sizeof head, "%s %d ", ok ? "PASS" : "FAIL", id);
  emit(head + name + ": " + detail);
  if (!ok) ++failures;
}

template <typename... Args>
std::string fmt(const char* f, Args... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

template <typename... Args>
void info(const char* f, Args... args) {
  emit("INFO " + fmt(f, args...));
}

double drop(double clean, double attacked) { return clean > 0 ? (clean - attacked) / clean : 0.0; }

// ---------------------------------------------------------------- 1

TargetRegion random_region(Rng& rng, ImageDims dims) {
  TargetRegion t;
  const double w = uniform(rng, 2, dims.width * 0.6), h = uniform(rng, 2, dims.height * 0.6);
  const double x = uniform(rng, 0, dims.width - w), y = uniform(rng, 0, dims.height - h);
  t.bbox = {x, y, x + w, y + h};
  t.context_scale = uniform(rng, 1.0, 2.5);
  t.fg_mask = Mask<float>(dims.height, dims.width);
  const double keep = uniform(rng, 0.2, 1.0);
  for (Index r = 0; r < dims.height; ++r)
    for (Index c = 0; c < dims.width; ++c)
      if (oracle::inside(t.bbox, r, c) && uniform(rng, 0, 1) < keep) t.fg_mask(r, c) = float(uniform(rng, 0.5, 1.0));
  return t;
}

void criterion_compositing() {
  const Timer timer;
  Rng rng(101);
  int bad_fg = 0, bad_zero = 0, bad_full = 0, bad_disjoint = 0, instances = 0;
  for (; instances < 1000; ++instances) {
    const ImageDims dims{Index(uniform_int(rng, 8, 48)), Index(uniform_int(rng, 8, 48))};
    Scene s;
    s.image = oracle::random_image<float>(rng, dims.height, dims.width);
    const int n = uniform_int(rng, 1, 3);
    for (int k = 0; k < n; ++k) s.targets.push_back(random_region(rng, dims));
    const auto canvas = oracle::random_image<float>(rng, uniform_int(rng, 1, 32), uniform_int(rng, 1, 32));
    const TargetRegion& region = s.targets[std::size_t(uniform_int(rng, 0, n - 1))];
    if (pixel_window(region.bbox.scaled(region.context_scale), dims).empty()) continue;

    const Mask<float> all_fg = foreground_union(s);
    const auto masks = extract_masks<float>(region, dims, &all_fg);
    if ((masks.fg.data() * masks.bg.data()).maxCoeff() != 0.0f || (masks.bg.data() * all_fg.data()).maxCoeff() != 0.0f)
      ++bad_disjoint;

    const Image<float> out = place_patch(s, canvas, region);
    if (!foreground_preserved(s.image, out, all_fg)) ++bad_fg;

    const auto pc = oracle::random_image<float>(rng, dims.height, dims.width);
    if (!(compose_adversarial(s.image, pc, Mask<float>(dims.height, dims.width, 0.0f)) == s.image)) ++bad_zero;
    if (!(compose_adversarial(s.image, pc, Mask<float>(dims.height, dims.width, 1.0f)) == pc)) ++bad_full;
  }
  const double t = timer.seconds();
  verdict(1, bad_fg + bad_zero + bad_full + bad_disjoint == 0 && t < 30, "compositing correctness",
          fmt("%d instances; violations fg=%d zero-mask=%d full-mask=%d disjoint=%d; %.2f s", instances, bad_fg,
              bad_zero, bad_full, bad_disjoint, t));
}

// ---------------------------------------------------------------- 2

void criterion_losses() {
  const Timer timer;
  Rng rng(202);
  double tv_err = 0, adv_err = 0, total_err = 0;
  for (int i = 0; i < 100; ++i) {
    const auto img = oracle::random_image<double>(rng, uniform_int(rng, 1, 8), uniform_int(rng, 1, 8));
    const double ref = oracle::tv(img);
    tv_err = std::max(tv_err, std::abs(tv_loss(img) - ref) / std::max(1.0, ref));

    std::vector<double> obj(std::size_t(uniform_int(rng, 0, 12)));
    for (auto& v : obj) v = uniform(rng, 0, 1);
    const double adv = adversary_loss(obj);
    adv_err = std::max(adv_err, std::abs(adv - oracle::mean(obj)));

    const double lambda = uniform(rng, 0, 2);
    const auto l = total_loss(adv, ref, lambda);
    total_err = std::max(total_err, std::abs(l.total - (adv + lambda * ref)));
  }
  const double t = timer.seconds();
  verdict(2, tv_err < 1e-12 && adv_err < 1e-12 && total_err <= 1e-9 && t < 10, "loss correctness",
          fmt("max rel tv err %.2e, adv err %.2e, total err %.2e; %.2f s", tv_err, adv_err, total_err, t));
}

// ---------------------------------------------------------------- 3

struct GradCheck {
  double max_rel = 0;
  int pixels = 0;
};

GradCheck gradient_check(const DetectorWeights& w, const std::vector<Scene>& scenes, const AttackConfig& base,
                         bool transformed, std::uint64_t seed) {
  AttackConfig cfg = base;
  const ConvDetector<double> det(w);
  std::vector<SceneCompositor<double>> comps;
  std::vector<const Scene*> ptrs;
  for (const auto& s : scenes) {
    comps.emplace_back(s, cfg.context_scale, cfg.canvas_size, cfg.canvas_size);
    ptrs.push_back(&s);
  }
  const PatchObjective<double> obj(det, comps, ptrs, cfg);
  Rng rng(seed);
  std::vector<BatchItem> batch;
  TransformConfig tc = cfg.transform;
  tc.noise_enabled = false;
  for (std::size_t i = 0; i < scenes.size(); ++i) batch.push_back({i, transformed ? sample_transform(tc, rng) : Transform{}});

  const Image<double> canvas = init_canvas(cfg.canvas_size, rng).cast<double>();
  const auto r = obj.evaluate(canvas, batch);

  // canvas pixels that reach some ring in the batch
  Image<double>::Storage reach = Image<double>::Storage::Zero(3, canvas.pixels());
  for (const auto& c : comps)
    reach += c.backward(Image<double>::Storage::Ones(3, c.clean().pixels()), canvas.height(), canvas.width()).abs();
  std::vector<Index> covered;
  for (Index k = 0; k < reach.size(); ++k)
    if (reach.data()[k] > 0) covered.push_back(k);

  GradCheck out;
  const double h = 1e-5;
  for (int i = 0; i < 20 && !covered.empty(); ++i) {
    const Index k = covered[std::size_t(uniform_int(rng, 0, int(covered.size()) - 1))];
    auto p = canvas, m = canvas;
    p.data().data()[k] += h;
    m.data().data()[k] -= h;
    const double fd = (obj.evaluate(p, batch, 1, false).loss.total - obj.evaluate(m, batch, 1, false).loss.total) / (2 * h);
    const double an = r.grad.data()[k];
    const double scale = std::max(std::abs(fd), std::abs(an));
    const double rel = scale < 1e-10 ? 0.0 : std::abs(fd - an) / scale;
    out.max_rel = std::max(out.max_rel, rel);
    ++out.pixels;
  }
  return out;
}

// ---------------------------------------------------------------- 9

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

bool pipeline(const fs::path& root, const std::string& workers, std::string& log) {
  fs::remove_all(root);
  fs::create_directories(root);
  const auto cfg = root / "config.json";
  std::ofstream(cfg) << R"({
    "seed": 9,
    "synth": {"train_scenes": 60, "heldout_scenes": 10},
    "detector": {"epochs": 3, "gate": 0.0},
    "attack": {"iterations": 30},
    "eval": {"renders": 3}
  })";
  for (const char* cmd : {"synth", "train-detector", "attack", "eval"}) {
    std::ostringstream out, err;
    const int code = run_cli({"--config", cfg.string(), "--out", (root / "out").string(), "--workers", workers, cmd}, out, err);
    if (code != 0) {
      log = std::string(cmd) + " exited " + std::to_string(code) + ": " + err.str();
      return false;
    }
  }
  return true;
}

}  // namespace

int main(int argc, char** argv) {
  const Timer total;
  if (argc > 1) results = std::fopen(argv[1], "w");
  RunConfig cfg;
  cfg.seed = 0;
  cfg.resolve();
  const int workers = 1;

  criterion_compositing();
  criterion_losses();

  // data
  SynthConfig held = cfg.synth;
  held.seed = cfg.heldout_seed();
  std::vector<Scene> train, heldout;
  for (int i = 0; i < cfg.train_scenes; ++i) train.push_back(generate_scene(cfg.synth, i));
  for (int i = 0; i < cfg.heldout_scenes; ++i) heldout.push_back(generate_scene(held, i));
  std::size_t heldout_targets = 0;
  for (const auto& s : heldout) heldout_targets += s.targets.size();
  info("data: %zu train scenes, %zu held-out scenes with %zu targets", train.size(), heldout.size(), heldout_targets);

  // detectors
  DetectorRecipe recipe = cfg.detector.recipe;
  recipe.workers = workers;
  recipe.gate = 0.0;  // the gate is judged below
  const auto train_one = [&](const std::string& name) {
    DetectorRecipe r = recipe;
    r.seed = cfg.detector_seed(name);
    return train_toy_detector(DetectorRegistry::instance().get(name), train, heldout, r);
  };
  Timer t4;
  const TrainedDetector a1 = train_one(cfg.detector.proxy);
  const double first_train_s = t4.seconds();
  const TrainedDetector a2 = train_one(cfg.detector.proxy);
  const double t4s = t4.seconds();
  const ConvDetector<float> det_a(a1.weights);

  {
    const Timer t3;
    std::vector<Scene> few(heldout.begin(), heldout.begin() + 4);
    const GradCheck plain = gradient_check(a1.weights, few, cfg.attack, false, 303);
    const GradCheck warped = gradient_check(a1.weights, few, cfg.attack, true, 304);
    const double s = t3.seconds();
    verdict(3, plain.pixels == 20 && warped.pixels == 20 && plain.max_rel < 1e-3 && warped.max_rel < 1e-2 && s < 120,
            "gradient fidelity",
            fmt("max rel err %.2e without transform, %.2e with transform (20 pixels each); %.1f s", plain.max_rel,
                warped.max_rel, s));
  }

  verdict(4, a1.heldout_confidence >= 0.8 && std::abs(a1.heldout_confidence - a2.heldout_confidence) <= 0.02 &&
                 first_train_s < 900,
          "detector gate",
          fmt("%s held-out confidence %.4f (rerun %.4f, final loss %.6f vs %.6f); %.1f s per run",
              cfg.detector.proxy.c_str(), a1.heldout_confidence, a2.heldout_confidence, a1.final_loss, a2.final_loss,
              t4s / 2));
  {
    const auto blank = det_a.detect(Image<float>(256, 256, 0.3f), 0.5, 0.5);
    int found = 0, total_t = 0;
    for (const auto& s : heldout) {
      const auto m = match_detections(det_a.detect(s.image, 0.25, 0.5), target_boxes(s), 0.5);
      for (const auto& x : m) found += x.confidence >= 0.8, ++total_t;
    }
    info("blank image: %zu detections at threshold 0.5; %d/%d held-out targets detected with IoU>=0.5 and objectness>=0.8",
         blank.size(), found, total_t);
  }

  const std::string other_name = cfg.detector.others.at(0);
  const TrainedDetector b = train_one(other_name);
  const ConvDetector<float> det_b(b.weights);
  info("%s held-out confidence %.4f", other_name.c_str(), b.heldout_confidence);

  // white-box attack
  EvalConfig ecfg = cfg.eval;
  ecfg.max_targets = 0;
  bool eval_fg_ok = true;
  std::size_t eval_renders = 0;
  const auto run_eval = [&](const ConvDetector<float>& det, const PatchDesign* patch, const std::string& id) {
    EvalStats st;
    const auto row = evaluate(det, heldout, patch, ecfg, id, workers, &st);
    eval_fg_ok = eval_fg_ok && st.foreground_preserved;
    eval_renders += st.renders;
    return row;
  };

  Timer t5;
  TrainOptions opts;
  opts.workers = workers;
  opts.gate = cfg.detector.recipe.gate;
  DetectorWeights proxy = a1.weights;
  const PatchResult attack = train_patch(train, proxy, cfg.attack, opts);
  const double attack_s = t5.seconds();
  const auto clean_a = run_eval(det_a, nullptr, "clean");
  const auto white = run_eval(det_a, &attack.patch, "white-box");
  const double t5s = t5.seconds();
  const auto& steps = attack.trace.steps;
  info("attack: %zu iterations in %.1f s; adv %.4f -> %.4f, tv %.1f -> %.1f", steps.size(), attack_s,
       steps.front().loss.adv, steps.back().loss.adv, steps.front().tv_exact, steps.back().tv_exact);
  info("training loss curve: final L_adv %s initial L_adv", steps.back().loss.adv < steps.front().loss.adv ? "<" : ">=");
  const double d5 = drop(clean_a.avg, white.avg);
  verdict(5, d5 >= 0.6 && t5s < 1800, "white-box attack efficacy",
          fmt("%s clean %.4f -> attacked %.4f (drop %.1f%%, %zu targets); %.1f s", det_a.arch().name.c_str(),
              clean_a.avg, white.avg, 100 * d5, clean_a.cells.size(), t5s));

  // transfer
  {
    const Timer t6;
    PatchDesign noise;
    Rng nrng = make_rng(cfg.eval.seed, "noise-control");
    noise.canvas = init_canvas(cfg.attack.canvas_size, nrng);
    noise.context_scale = cfg.attack.context_scale;
    noise.proxy = "noise";
    const auto clean_b = run_eval(det_b, nullptr, "clean");
    EvalStats st;
    const auto black = transfer_evaluate(attack.patch, det_b, heldout, ecfg, "black-box", workers, &st);
    eval_fg_ok = eval_fg_ok && st.foreground_preserved;
    eval_renders += st.renders;
    const auto noise_b = run_eval(det_b, &noise, "noise");
    const auto noise_a = run_eval(det_a, &noise, "noise");
    const double db = drop(clean_b.avg, black.avg), dn = drop(clean_b.avg, noise_b.avg);
    info("noise control on %s: clean %.4f -> %.4f", det_a.arch().name.c_str(), clean_a.avg, noise_a.avg);
    verdict(6, db >= 0.2 && db > dn && t6.seconds() < 600, "black-box transfer",
            fmt("%s clean %.4f -> black-box %.4f (drop %.1f%%) vs noise control %.4f (drop %.1f%%); %.1f s",
                other_name.c_str(), clean_b.avg, black.avg, 100 * db, noise_b.avg, 100 * dn, t6.seconds()));
  }

  // context-scale sweep (r = 1.8 is the run above)
  std::vector<TrendRow> rows;
  std::vector<double> sweep_values{1.2, 1.5, 1.8};
  for (double r : sweep_values) {
    PatchResult res;
    const PatchResult* use = &attack;
    if (r != cfg.attack.context_scale) {
      AttackConfig ac = cfg.attack;
      ac.context_scale = r;
      res = train_patch(train, proxy, ac, opts);
      use = &res;
    }
    const auto row = run_eval(det_a, &use->patch, "white-box");
    rows.push_back({r, row.avg, clean_a.avg, use->trace.steps.back().tv_exact});
    for (const auto& s : use->trace.steps)
      if (s.foreground_checked != cfg.attack.batch_size) eval_fg_ok = false;
  }

  // uncovered invariant: every training step checked its whole batch, every render was checked
  {
    long checked = 0;
    for (const auto& s : steps) checked += s.foreground_checked;
    const long expected = long(steps.size()) * cfg.attack.batch_size;
    verdict(7, checked == expected && eval_fg_ok, "uncovered-attack invariant",
            fmt("%ld/%ld training composites and %zu evaluation renders kept every foreground pixel", checked, expected,
                eval_renders));
  }

  {
    const Timer t8;
    const auto samples = attention_analysis(det_a, heldout, ecfg, workers);
    bool valid = !samples.empty();
    double frac = 0;
    int zero_maps = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const auto& h = samples[i].heatmap;
      const Scene* s = nullptr;
      for (const auto& sc : heldout)
        if (sc.scene_id == samples[i].scene_id) s = &sc;
      valid = valid && s && h.height == s->image.height() && h.width == s->image.width();
      const double mx = h.data.maxCoeff();
      valid = valid && h.data.minCoeff() >= 0.0 && (mx == 0.0 || std::abs(mx - 1.0) < 1e-12);
      zero_maps += mx == 0.0;
      frac += samples[i].context_fraction;
    }
    frac /= double(std::max<std::size_t>(1, samples.size()));
    double area = 0;
    for (const auto& sc : heldout) {
      const Mask<float> excl = foreground_union(sc);
      for (const auto& t : sc.targets) {
        const auto m = extract_masks<float>(t, sc.image.dims(), &excl);
        area += m.bg.data().sum() / (m.fg.data().sum() + m.bg.data().sum());
      }
    }
    info("uniform-heatmap baseline for the context fraction: %.3f", area / double(std::max<std::size_t>(1, heldout_targets)));
    verdict(8, valid && frac >= 0.1, "attention analysis",
            fmt("%zu heatmaps valid=%s (%d all-zero), mean context fraction %.3f; %.1f s", samples.size(),
                valid ? "yes" : "no", zero_maps, frac, t8.seconds()));
  }

  {
    const Timer t9;
    const fs::path root = fs::temp_directory_path() / "ctxpatch_acceptance";
    std::string log;
    bool ok = pipeline(root / "run1", "1", log) && pipeline(root / "run2", "2", log);
    std::string detail = log;
    if (ok) {
      int same = 0;
      for (const char* f : {"whitebox.csv", "blackbox.csv"}) {
        const auto x = slurp(root / "run1" / "out" / "eval" / f), y = slurp(root / "run2" / "out" / "eval" / f);
        same += !x.empty() && x == y;
      }
      ok = same == 2;
      detail = fmt("%d/2 table CSVs byte-identical across two pipeline runs (1 and 2 workers)", same);
    }
    verdict(9, ok, "determinism", fmt("%s; %.1f s", detail.c_str(), t9.seconds()));
  }

  {
    const TrendReport trend = make_trend("context_scale", rows, "attacked_avg");
    std::string cells;
    for (const auto& r : trend.rows) cells += fmt("r=%.1f: %.4f ", r.value, r.attacked_avg);
    verdict(10, trend.rows.size() == 3, "context-scale trend",
            fmt("%snon-increasing=%s%s", cells.c_str(), trend.non_increasing ? "yes" : "no",
                trend.non_increasing ? "" : " (flagged)"));
  }

  info("total %.1f s", total.seconds());
  if (results) std::fclose(results);
  return failures == 0 ? 0 : 1;
}
