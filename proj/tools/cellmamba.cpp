// Command-line front end for the CellMamba detector: training, evaluation,
// inference with overlay rendering, dataset synthesis and mask conversion,
// plus the gradient-check and scaling-benchmark diagnostics.
//
// Exit codes: 0 success, 1 validation failure (bad flags, bad inputs),
// 2 numeric failure (non-finite loss, gradient tolerance breach).

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cellmamba/core/parallel.hpp"
#include "cellmamba/data/image.hpp"
#include "cellmamba/data/synth.hpp"
#include "cellmamba/diag/bench.hpp"
#include "cellmamba/diag/gradsuite.hpp"
#include "cellmamba/eval/pipeline.hpp"
#include "cellmamba/train/checkpoint.hpp"
#include "cellmamba/train/trainer.hpp"

namespace fs = std::filesystem;
using namespace cm;

namespace {

// --data accepts either the manifest itself or its directory.
std::string resolve_manifest(const std::string& data) {
  if (fs::is_directory(data)) return (fs::path(data) / "manifest.json").string();
  return data;
}

void write_text_file(const std::string& path, const std::string& text) {
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  std::ofstream os(path, std::ios::binary);
  CM_CHECK(os.good(), "cannot open '", path, "' for writing");
  os << text;
  CM_CHECK(os.good(), "write to '", path, "' failed");
}

// Duplicates everything written to one stream into a second one, so the
// training CSV can go to the console and to disk byte-for-byte.
class TeeBuf : public std::streambuf {
 public:
  TeeBuf(std::streambuf* a, std::streambuf* b) : a_(a), b_(b) {}

 protected:
  int overflow(int c) override {
    if (c == traits_type::eof()) return 0;
    const int r1 = a_->sputc(static_cast<char>(c));
    const int r2 = b_->sputc(static_cast<char>(c));
    return r1 == traits_type::eof() || r2 == traits_type::eof() ? traits_type::eof() : c;
  }
  int sync() override { return a_->pubsync() == 0 && b_->pubsync() == 0 ? 0 : -1; }

 private:
  std::streambuf* a_;
  std::streambuf* b_;
};

// ---------------------------------------------------------------------------
// Overlay rendering

constexpr std::uint8_t kClassColors[8][3] = {
    {230, 57, 70},   // red
    {29, 161, 242},  // blue
    {46, 204, 113},  // green
    {241, 196, 15},  // yellow
    {155, 89, 182},  // purple
    {26, 188, 156},  // teal
    {243, 112, 33},  // orange
    {236, 240, 241}, // off-white
};

void put_px(ImageU8& img, int y, int x, const std::uint8_t* c) {
  if (y < 0 || y >= img.h || x < 0 || x >= img.w) return;
  std::uint8_t* p = img.pixel(y, x);
  p[0] = c[0];
  p[1] = c[1];
  p[2] = c[2];
}

void draw_rect(ImageU8& img, const BBox& b, const std::uint8_t* c, int thickness = 2) {
  const int x0 = static_cast<int>(std::lround(b.x0));
  const int y0 = static_cast<int>(std::lround(b.y0));
  const int x1 = static_cast<int>(std::lround(b.x1)) - 1;
  const int y1 = static_cast<int>(std::lround(b.y1)) - 1;
  for (int t = 0; t < thickness; ++t) {
    for (int x = x0; x <= x1; ++x) {
      put_px(img, y0 + t, x, c);
      put_px(img, y1 - t, x, c);
    }
    for (int y = y0; y <= y1; ++y) {
      put_px(img, y, x0 + t, c);
      put_px(img, y, x1 - t, c);
    }
  }
}

// 3x5 bitmap glyphs for the score labels ("0"-"9" then ".").
constexpr std::uint8_t kGlyphs[11][5] = {
    {0b111, 0b101, 0b101, 0b101, 0b111}, {0b010, 0b110, 0b010, 0b010, 0b111},
    {0b111, 0b001, 0b111, 0b100, 0b111}, {0b111, 0b001, 0b111, 0b001, 0b111},
    {0b101, 0b101, 0b111, 0b001, 0b001}, {0b111, 0b100, 0b111, 0b001, 0b111},
    {0b111, 0b100, 0b111, 0b101, 0b111}, {0b111, 0b001, 0b010, 0b010, 0b010},
    {0b111, 0b101, 0b111, 0b101, 0b111}, {0b111, 0b101, 0b111, 0b001, 0b111},
    {0b000, 0b000, 0b000, 0b000, 0b010},
};

void draw_text(ImageU8& img, int y, int x, const std::string& s, const std::uint8_t* c) {
  for (char ch : s) {
    const int g = ch == '.' ? 10 : (ch >= '0' && ch <= '9' ? ch - '0' : -1);
    if (g >= 0) {
      for (int r = 0; r < 5; ++r) {
        for (int k = 0; k < 3; ++k) {
          if (kGlyphs[g][r] & (1 << (2 - k))) put_px(img, y + r, x + k, c);
        }
      }
    }
    x += 4;
  }
}

// ---------------------------------------------------------------------------
// train

struct TrainOpts {
  std::string config, data, out = ".";
  std::int64_t seed = -1;
  int threads = 0;
};

void cmd_train(const TrainOpts& o) {
  set_num_threads(o.threads);
  RunConfig rc = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  if (o.seed >= 0) rc.train.seed = static_cast<std::uint64_t>(o.seed);

  const std::string manifest_path = resolve_manifest(o.data);
  DatasetManifest m = load_dataset(manifest_path);
  CM_CHECK(!m.images.empty(), "train: dataset '", manifest_path, "' has no images");
  CM_CHECK(static_cast<i64>(m.class_index().size()) <= rc.model.num_classes,
           "train: dataset has ", m.class_index().size(),
           " categories but the model is configured for ", rc.model.num_classes, " classes");
  std::vector<TrainExample> data = load_examples(m, dataset_root(manifest_path));

  fs::create_directories(o.out);
  const std::string ckpt_path = (fs::path(o.out) / "model.ckpt").string();
  const std::string csv_path = (fs::path(o.out) / "train_log.csv").string();

  Trainer trainer(rc.model, rc.train, rc.freeze_alpha);
  std::cout << "model: " << trainer.model().param_count() << " parameters | data: "
            << data.size() << " images, " << m.class_index().size() << " categories | "
            << rc.train.epochs << " epochs, coupling from epoch "
            << rc.train.warmup_epochs << "\n";

  std::ofstream csv_file(csv_path, std::ios::binary);
  CM_CHECK(csv_file.good(), "cannot open '", csv_path, "' for writing");
  TeeBuf tee(std::cout.rdbuf(), csv_file.rdbuf());
  std::ostream csv(&tee);
  TrainResult res = trainer.fit(data, ckpt_path, &csv);

  std::cout << "final mean loss " << res.epochs.back().mean_loss << " after "
            << res.epochs.size() << " epochs\ncheckpoint: " << ckpt_path
            << "\nlog: " << csv_path << "\n";
}

// ---------------------------------------------------------------------------
// eval

struct EvalOpts {
  std::string config, ckpt, data, out;
  int threads = 0;
};

void cmd_eval(const EvalOpts& o) {
  set_num_threads(o.threads);
  Detector<float> model;
  const CheckpointMeta meta = load_checkpoint(o.ckpt, model);

  RunConfig rc;
  rc.model = model.cfg;
  if (!o.config.empty()) {
    rc = load_run_config(o.config);
    RunConfig stored;
    stored.model = model.cfg;
    const auto a = nlohmann::json::parse(run_config_to_json(rc)).at("model");
    const auto b = nlohmann::json::parse(run_config_to_json(stored)).at("model");
    CM_CHECK(a == b, "eval: the model section of '", o.config,
             "' disagrees with the architecture stored in '", o.ckpt, "'");
  }

  const std::string manifest_path = resolve_manifest(o.data);
  DatasetManifest m = load_dataset(manifest_path);
  CM_CHECK(!m.images.empty(), "eval: dataset '", manifest_path, "' has no images");
  std::vector<TrainExample> data = load_examples(m, dataset_root(manifest_path));

  const EvalRun run = evaluate_model(model, data, meta.coupling, rc.eval, rc.freeze_alpha);
  const EvalReport& r = run.report;

  char line[256];
  std::snprintf(line, sizeof(line), "images            %d\n", r.num_images);
  std::cout << line;
  std::snprintf(line, sizeof(line), "parameters        %lld (%.2f M)\n",
                static_cast<long long>(model.param_count()),
                static_cast<double>(model.param_count()) / 1e6);
  std::cout << line;
  std::snprintf(line, sizeof(line), "mean per patch    %.2f ms\n", run.mean_infer_ms);
  std::cout << line;
  std::snprintf(line, sizeof(line), "mAP / @50 / @75   %.4f / %.4f / %.4f\n", r.map, r.map50,
                r.map75);
  std::cout << line;
  std::snprintf(line, sizeof(line), "best threshold    %.2f\n", r.best_threshold);
  std::cout << line;
  std::snprintf(line, sizeof(line), "P / R / F1        %.4f / %.4f / %.4f\n", r.precision,
                r.recall, r.f1);
  std::cout << line;

  const std::string report = to_json(r);
  std::cout << report << "\n";
  if (!o.out.empty()) {
    write_text_file(o.out, report + "\n");
    std::cout << "report: " << o.out << "\n";
  }
}

// ---------------------------------------------------------------------------
// infer

struct InferOpts {
  std::string config, ckpt, image, out = ".";
  int threads = 0;
};

void cmd_infer(const InferOpts& o) {
  set_num_threads(o.threads);
  Detector<float> model;
  const CheckpointMeta meta = load_checkpoint(o.ckpt, model);

  EvalConfig ecfg;
  bool freeze_alpha = false;
  if (!o.config.empty()) {
    const RunConfig rc = load_run_config(o.config);
    ecfg = rc.eval;
    freeze_alpha = rc.freeze_alpha;
  }

  const ImageU8 img = read_png_rgb(o.image);
  CM_CHECK(img.w % 128 == 0 && img.h % 128 == 0, "infer: image is ", img.w, "x", img.h,
           "; width and height must be multiples of 128 so every pyramid level down to "
           "stride 128 halves exactly");

  std::vector<Detection> dets;
  {
    Tape<float>::Scope no_tape(nullptr);
    const auto fwd = model.forward(image_to_tensor<float>(img), meta.coupling, freeze_alpha);
    const auto anchors = generate_anchors(fwd.pyramid, model.cfg.anchors_per_location);
    dets = detect_image<float>(fwd, anchors, 0, img.w, img.h, ecfg);
  }

  nlohmann::json j;
  j["image"] = o.image;
  j["width"] = img.w;
  j["height"] = img.h;
  j["detections"] = nlohmann::json::array();
  for (const Detection& d : dets) {
    j["detections"].push_back({{"bbox", {d.bbox.x0, d.bbox.y0, d.bbox.width(), d.bbox.height()}},
                               {"class_id", d.class_id},
                               {"score", d.score}});
  }

  fs::create_directories(o.out);
  const std::string stem = fs::path(o.image).stem().string();
  const std::string json_path = (fs::path(o.out) / (stem + "_detections.json")).string();
  const std::string overlay_path = (fs::path(o.out) / (stem + "_overlay.png")).string();
  write_text_file(json_path, j.dump(2) + "\n");

  ImageU8 overlay = img;
  for (const Detection& d : dets) {
    const std::uint8_t* c = kClassColors[d.class_id % 8];
    draw_rect(overlay, d.bbox, c);
    char score[16];
    std::snprintf(score, sizeof(score), "%.2f", d.score);
    const int ty = static_cast<int>(std::lround(d.bbox.y0)) - 7;
    draw_text(overlay, ty < 0 ? 0 : ty, static_cast<int>(std::lround(d.bbox.x0)) + 1, score, c);
  }
  write_png_rgb(overlay_path, overlay);

  std::cout << dets.size() << " detections\n" << json_path << "\n" << overlay_path << "\n";
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradOpts {
  std::uint64_t seed = 0x9a0b;
  double tol64 = 1e-5, tol32 = 1e-2;
  i64 coords = 2;  // sampled coordinates per parameter in the composed model
};

void cmd_gradcheck(const GradOpts& o) {
  int failures = 0;
  auto report = [&](const char* mode, const std::vector<SuiteEntry>& entries, double tol) {
    double worst = 0;
    std::string worst_name = "-";
    for (const SuiteEntry& e : entries) {
      const bool ok = e.result.max_rel_err < tol;
      char line[256];
      std::snprintf(line, sizeof(line), "[%s] %-12s max rel err %.3e over %lld coords%s\n",
                    mode, e.component.c_str(), e.result.max_rel_err,
                    static_cast<long long>(e.result.coords_checked), ok ? "" : "  FAIL");
      std::cout << line;
      if (!ok) {
        ++failures;
        std::cout << "      worst: " << e.result.worst_param << "[" << e.result.worst_coord
                  << "] analytic " << e.result.worst_analytic << " vs numeric "
                  << e.result.worst_numeric << "\n";
      }
      if (e.result.max_rel_err > worst) {
        worst = e.result.max_rel_err;
        worst_name = e.component;
      }
    }
    char line[160];
    std::snprintf(line, sizeof(line), "[%s] worst %.3e (%s), tolerance %.0e\n", mode, worst,
                  worst_name.c_str(), tol);
    std::cout << line;
  };

  report("f64", gradcheck_suite<double>(true, o.coords, o.seed), o.tol64);
  report("f32", gradcheck_suite<float>(true, o.coords, o.seed), o.tol32);
  if (failures > 0) {
    throw NumericError(str_cat("gradcheck: ", failures, " component(s) exceeded tolerance"));
  }
  std::cout << "all components within tolerance\n";
}

// ---------------------------------------------------------------------------
// bench

struct BenchOpts {
  std::string op;
  std::vector<i64> lengths{1024, 2048, 4096, 8192};
  int reps = 3;
  i64 channels = 32;
  int threads = 0;
};

void cmd_bench(const BenchOpts& o) {
  set_num_threads(o.threads);
  const BenchResult r = bench_mixer(o.op, o.lengths, o.reps, o.channels);
  for (const BenchPoint& p : r.points) {
    char line[96];
    std::snprintf(line, sizeof(line), "L=%-6lld %10.4f s\n", static_cast<long long>(p.length),
                  p.seconds);
    std::cout << line;
  }
  if (r.exponent_defined) {
    char line[96];
    std::snprintf(line, sizeof(line), "fitted exponent: %.3f\n", r.exponent);
    std::cout << line;
  } else {
    std::cout << "fitted exponent: n/a (need at least two lengths)\n";
  }
}

// ---------------------------------------------------------------------------
// synth

struct SynthOpts {
  std::string out;
  int images = 32, size = 256, classes = 3, density = 8;
  std::uint64_t seed = 7;
};

void cmd_synth(const SynthOpts& o) {
  SynthConfig cfg;
  cfg.n_images = o.images;
  cfg.size = o.size;
  cfg.num_classes = o.classes;
  cfg.density = o.density;
  cfg.seed = o.seed;
  const DatasetManifest m = synth_generate(cfg, o.out);
  std::cout << "wrote " << m.images.size() << " images (" << m.annotations.size()
            << " boxes, " << m.categories.size() << " categories) and manifest.json to "
            << o.out << "\n";
}

// ---------------------------------------------------------------------------
// convert

struct ConvertOpts {
  std::vector<std::string> masks;
  std::string out = "manifest.json";
  std::string strip_suffix;  // e.g. "_mask": img_0001_mask.png -> img_0001.png
};

void cmd_convert(const ConvertOpts& o) {
  DatasetManifest m;
  std::set<int> cats;
  const std::string root = dataset_root(o.out);
  for (std::size_t i = 0; i < o.masks.size(); ++i) {
    const LabelRaster raster = read_labels(o.masks[i]);
    const InstanceMask mask{raster, {}};
    std::vector<Annotation> anns = mask_to_bboxes(mask, static_cast<int>(i), 1);

    fs::path rel = fs::proximate(o.masks[i], root);
    if (rel.empty()) rel = o.masks[i];
    if (!o.strip_suffix.empty()) {
      std::string stem = rel.stem().string();
      const std::string ext = rel.extension().string();
      if (stem.size() > o.strip_suffix.size() &&
          stem.compare(stem.size() - o.strip_suffix.size(), o.strip_suffix.size(),
                       o.strip_suffix) == 0) {
        stem.resize(stem.size() - o.strip_suffix.size());
        rel.replace_filename(stem + ext);
      }
    }
    m.images.push_back({static_cast<int>(i), rel.generic_string(), raster.w, raster.h});
    std::cout << o.masks[i] << ": " << anns.size() << " instances\n";
    for (const Annotation& a : anns) cats.insert(a.category_id);
    m.annotations.insert(m.annotations.end(), anns.begin(), anns.end());
  }
  if (cats.empty()) cats.insert(1);
  for (int c : cats) m.categories.push_back({c, str_cat("class_", c)});
  m.validate();
  const fs::path parent = fs::path(o.out).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  save_dataset(o.out, m);
  std::cout << m.annotations.size() << " boxes -> " << o.out << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CellMamba: CPU-only one-stage cell detector (NC-Mamba backbone, TMAC head)"};
  app.require_subcommand(1);

  TrainOpts topt;
  CLI::App* train = app.add_subcommand("train", "Fit a detector on a box dataset");
  train->add_option("--config", topt.config, "JSON run config (model/train/eval sections)")
      ->check(CLI::ExistingFile);
  train->add_option("--data", topt.data, "manifest path or directory containing manifest.json")
      ->required();
  train->add_option("--out", topt.out, "output directory for model.ckpt and train_log.csv");
  train->add_option("--seed", topt.seed, "override the configured training seed");
  train->add_option("--threads", topt.threads, "worker threads (0 = hardware default)");

  EvalOpts eopt;
  CLI::App* eval = app.add_subcommand("eval", "Score a checkpoint against a labelled dataset");
  eval->add_option("--config", eopt.config, "JSON run config (eval section + model cross-check)")
      ->check(CLI::ExistingFile);
  eval->add_option("--ckpt", eopt.ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", eopt.data, "manifest path or directory containing manifest.json")
      ->required();
  eval->add_option("--out", eopt.out, "also write the report JSON here");
  eval->add_option("--threads", eopt.threads, "worker threads (0 = hardware default)");

  InferOpts iopt;
  CLI::App* infer = app.add_subcommand("infer", "Detect cells in one PNG image");
  infer->add_option("image", iopt.image, "input PNG (width and height multiples of 128)")
      ->required()
      ->check(CLI::ExistingFile);
  infer->add_option("--ckpt", iopt.ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  infer->add_option("--config", iopt.config, "JSON run config (eval section)")
      ->check(CLI::ExistingFile);
  infer->add_option("--out", iopt.out, "output directory for detections JSON and overlay PNG");
  infer->add_option("--threads", iopt.threads, "worker threads (0 = hardware default)");

  GradOpts gopt;
  CLI::App* gradcheck =
      app.add_subcommand("gradcheck", "Finite-difference checks for every layer and the "
                                      "composed micro model, in both precisions");
  gradcheck->add_option("--seed", gopt.seed, "suite seed");
  gradcheck->add_option("--tol64", gopt.tol64, "64-bit tolerance");
  gradcheck->add_option("--tol32", gopt.tol32, "32-bit tolerance");
  gradcheck->add_option("--coords", gopt.coords,
                        "sampled coordinates per parameter in the composed model");

  BenchOpts bopt;
  CLI::App* bench = app.add_subcommand("bench", "Wall-clock scaling of a token mixer");
  bench->add_option("op", bopt.op, "mixer to time")
      ->required()
      ->check(CLI::IsMember({"ncmamba", "msa"}));
  bench->add_option("--lengths", bopt.lengths, "ascending sequence lengths")
      ->delimiter(',');
  bench->add_option("--reps", bopt.reps, "repetitions per length (minimum is reported)");
  bench->add_option("--channels", bopt.channels, "token width");
  bench->add_option("--threads", bopt.threads, "worker threads (0 = hardware default)");

  SynthOpts sopt;
  CLI::App* synth = app.add_subcommand("synth", "Render a deterministic synthetic cell dataset");
  synth->add_option("--out", sopt.out, "output directory")->required();
  synth->add_option("--images", sopt.images, "number of images");
  synth->add_option("--size", sopt.size, "square image size (128 or 256)");
  synth->add_option("--classes", sopt.classes, "number of cell classes (size/color buckets)");
  synth->add_option("--density", sopt.density, "cells per image");
  synth->add_option("--seed", sopt.seed, "generator seed");

  ConvertOpts copt;
  CLI::App* convert =
      app.add_subcommand("convert", "Turn instance label rasters into a box manifest");
  convert->add_option("masks", copt.masks, "label rasters (.png 16-bit gray or .pgm)")
      ->required()
      ->check(CLI::ExistingFile);
  convert->add_option("--out", copt.out, "manifest path to write");
  convert->add_option("--strip-suffix", copt.strip_suffix,
                      "suffix removed from mask file stems when recording image names");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }

  try {
    if (train->parsed()) cmd_train(topt);
    if (eval->parsed()) cmd_eval(eopt);
    if (infer->parsed()) cmd_infer(iopt);
    if (gradcheck->parsed()) cmd_gradcheck(gopt);
    if (bench->parsed()) cmd_bench(bopt);
    if (synth->parsed()) cmd_synth(sopt);
    if (convert->parsed()) cmd_convert(copt);
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << std::endl;
    return 2;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
