#include "leafgrad/cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>

#include "leafgrad/ablation.hpp"
#include "leafgrad/checkpoint.hpp"
#include "leafgrad/dataset.hpp"
#include "leafgrad/gradcam.hpp"
#include "leafgrad/image_io.hpp"
#include "leafgrad/io_util.hpp"
#include "leafgrad/metrics.hpp"
#include "leafgrad/run_config.hpp"
#include "leafgrad/synthetic.hpp"

namespace fs = std::filesystem;

namespace leafgrad::cli {

namespace {

struct Common {
  std::string config_file;
  std::vector<std::string> assignments;
  std::optional<std::int64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_file, "key = value configuration file");
  cmd->add_option("--set", c.assignments, "override one configuration key (key=value), repeatable");
  cmd->add_option("--seed", c.seed, "master seed (overrides LEAFGRAD_SEED and the config file)");
}

// defaults < config file < LEAFGRAD_SEED < flags
RunConfig resolve(const Common& c, const std::vector<std::pair<std::string, std::string>>& flag_values) {
  RunConfig cfg;
  if (!c.config_file.empty()) cfg.merge_file(c.config_file);
  cfg.merge_env();
  if (c.seed) cfg.set("seed", std::to_string(*c.seed));
  for (const auto& a : c.assignments) cfg.set_assignment(a);
  for (const auto& [k, v] : flag_values) cfg.set(k, v);
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) { write_file_atomic(path, text); }

std::string with_provenance(const RunConfig& cfg, const std::string& body) {
  return "# " + cfg.provenance() + "\n" + body;
}

void write_run_config(const fs::path& dir, const RunConfig& cfg) {
  write_text(dir / "run_config.txt", "# " + cfg.provenance() + "\n" + cfg.canonical_text());
}

CheckpointMeta run_meta(const RunConfig& cfg) {
  const auto r = cfg.split_ratios();
  return {{"run_config_hash", cfg.hash_hex()},
          {"pipeline", cfg.get("pipeline")},
          {"channels", cfg.get("channels")},
          {"seed", cfg.get("seed")},
          {"split", format_double(r.train) + "," + format_double(r.val) + "," + format_double(r.test)}};
}

ImageU8 to_display(const ImageF& img, bool signed_range) {
  ImageF scaled = img;
  if (signed_range) {
    for (auto& v : scaled.values) v = (v + 1.0f) / 2.0f;
  }
  return to_u8(scaled);
}

std::vector<fs::path> collect_inputs(const fs::path& input) {
  if (fs::is_regular_file(input)) return {input};
  if (!fs::is_directory(input)) fail(ErrorKind::io, "input does not exist: " + input.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(input))
    if (e.is_regular_file() && is_image_path(e.path())) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) fail(ErrorKind::io, "no images under " + input.string());
  return files;
}

// ---- subcommands -------------------------------------------------------------

struct PreprocessArgs {
  Common common;
  std::string input, output, pipeline, format = "lgf1";
};

int do_preprocess(const PreprocessArgs& a, std::ostream& out) {
  std::vector<std::pair<std::string, std::string>> flags;
  if (!a.pipeline.empty()) flags.emplace_back("pipeline", a.pipeline);
  const RunConfig cfg = resolve(a.common, flags);
  const PipelineConfig pipeline = cfg.pipeline();
  const auto channels = cfg.get_size("channels");
  fs::create_directories(a.output);
  std::size_t n = 0;
  for (const auto& file : collect_inputs(a.input)) {
    const ImageF img = run_pipeline(convert_channels(read_image(file), channels), pipeline);
    if (a.format == "lgf1") {
      write_lgf1(fs::path(a.output) / (file.stem().string() + ".lgf1"), img);
    } else {
      const std::string ext = img.channels == 3 ? ".ppm" : ".pgm";
      write_pnm(fs::path(a.output) / (file.stem().string() + ext), to_display(img, pipeline.has_mpn()), cfg.provenance());
    }
    ++n;
  }
  write_run_config(a.output, cfg);
  out << "preprocessed " << n << " image(s) with " << pipeline.name() << " into " << a.output << "\n";
  return 0;
}

struct TrainArgs {
  Common common;
  std::string data, out, pipeline;
  std::optional<std::int64_t> epochs;
  bool quiet = false;
};

int do_train(const TrainArgs& a, Task task, std::ostream& out) {
  std::vector<std::pair<std::string, std::string>> flags;
  if (!a.pipeline.empty()) flags.emplace_back("pipeline", a.pipeline);
  if (a.epochs) flags.emplace_back("train.epochs", std::to_string(*a.epochs));
  const RunConfig cfg = resolve(a.common, flags);
  const fs::path dir(a.out);
  fs::create_directories(dir);

  const auto manifest = load_dataset(a.data, task, cfg.seed(), cfg.split_ratios(),
                                     task == Task::classify ? cfg.classes() : std::vector<std::string>{});
  const TrainData<float> data = materialize<float>(manifest, cfg.pipeline(), cfg.get_size("channels"));
  Rng init(cfg.seed());
  std::unique_ptr<ModelGraph<float>> model;
  if (task == Task::classify) {
    model = build_se_convnet<float>(cfg.convnet_config(), init);
    model->class_names = cfg.classes();
  } else {
    model = build_unet<float>(cfg.unet_config(), init);
  }
  const CheckpointMeta meta = run_meta(cfg);
  TrainConfig<float> tc = cfg.train_config(task);
  tc.on_best = [&](const ModelGraph<float>& m, const EpochRecord&) { save_checkpoint(m, dir / "best.lgc1", meta); };
  if (!a.quiet) {
    tc.on_epoch = [&](const EpochRecord& e) {
      out << "epoch " << e.epoch << " lr=" << e.lr << " train_loss=" << e.train_loss << " val_loss=" << e.val_loss
          << " val_" << (task == Task::classify ? "accuracy" : "dice") << "=" << e.val_metric << "\n";
    };
  }
  const TrainReport report = task == Task::classify ? train_classifier(*model, data, tc) : train_segmenter(*model, data, tc);

  report.write_csv(dir / "report.csv", {cfg.provenance()});
  save_checkpoint(*model, dir / "final.lgc1", meta);
  write_run_config(dir, cfg);
  if (data.test.size() > 0) {
    if (task == Task::classify) {
      const auto cm = confusion(report.test_predictions, data.test.labels, model->num_outputs());
      write_text(dir / "test_metrics.csv", with_provenance(cfg, class_metrics_csv(class_metrics(cm), model->class_names)));
      write_text(dir / "confusion.csv", with_provenance(cfg, confusion_csv(cm, model->class_names)));
    } else {
      std::ostringstream os;
      os << "metric,value\niou," << format_double(report.test_iou) << "\ndice," << format_double(report.test_metric) << "\n";
      write_text(dir / "test_metrics.csv", with_provenance(cfg, os.str()));
    }
  }
  out << "trained " << model->model_name() << " for " << report.epochs.size() << " epoch(s) (" << report.stop_reason
      << "), best epoch " << report.best_epoch << "; test " << report.metric_name << "=" << report.test_metric << "\n";
  return 0;
}

struct EvaluateArgs {
  Common common;
  std::string checkpoint, data, out, split = "test";
};

// Settings recorded in a checkpoint take precedence over the defaults so an
// evaluation sees the same split and preprocessing as training.
RunConfig config_for_checkpoint(const Common& common, const LoadedCheckpoint<float>& ckpt) {
  const CheckpointMeta& meta = ckpt.meta;
  const Shape in = ckpt.model->input_shape();
  std::vector<std::pair<std::string, std::string>> flags{{"image_height", std::to_string(in[1])},
                                                          {"image_width", std::to_string(in[2])}};
  if (auto it = meta.find("pipeline"); it != meta.end()) flags.emplace_back("pipeline", it->second);
  if (auto it = meta.find("channels"); it != meta.end()) flags.emplace_back("channels", it->second);
  if (auto it = meta.find("seed"); it != meta.end() && !common.seed) flags.emplace_back("seed", it->second);
  if (auto it = meta.find("split"); it != meta.end()) {
    std::istringstream in(it->second);
    std::string part;
    const char* keys[] = {"split_train", "split_val", "split_test"};
    for (int k = 0; k < 3 && std::getline(in, part, ','); ++k) flags.emplace_back(keys[k], part);
  }
  return resolve(common, flags);
}

int do_evaluate(const EvaluateArgs& a, std::ostream& out) {
  auto loaded = load_checkpoint<float>(a.checkpoint);
  ModelGraph<float>& model = *loaded.model;
  const RunConfig cfg = config_for_checkpoint(a.common, loaded);
  const Task task = model.task();
  const auto manifest = load_dataset(a.data, task, cfg.seed(), cfg.split_ratios(),
                                     task == Task::classify ? model.class_names : std::vector<std::string>{}, false);
  const SplitName which = parse_split_name(a.split);
  const DataSplit<float> split = materialize_split<float>(manifest, which, cfg.pipeline(), cfg.get_size("channels"));
  if (split.size() == 0) fail(ErrorKind::value, "the " + a.split + " split is empty");
  const fs::path dir(a.out);
  fs::create_directories(dir);
  const auto entries = manifest.split(which);
  const EvalResult<float> res = evaluate_split(model, split, cfg.get_size("train.batch_size"), cfg.get_double("eval.threshold"));
  if (task == Task::classify) {
    const auto cm = confusion(res.predictions, split.labels, model.num_outputs());
    const auto m = class_metrics(cm);
    write_text(dir / "metrics.csv", with_provenance(cfg, class_metrics_csv(m, model.class_names)));
    write_text(dir / "confusion.csv", with_provenance(cfg, confusion_csv(cm, model.class_names)));
    std::ostringstream os;
    os << "image,label,prediction\n";
    for (std::size_t i = 0; i < entries.size(); ++i)
      os << fs::relative(entries[i]->image, manifest.root).generic_string() << "," << split.labels[i] << ","
         << res.predictions[i] << "\n";
    write_text(dir / "predictions.csv", with_provenance(cfg, os.str()));
    out << "accuracy=" << m.accuracy << " macro_f1=" << m.macro_f1 << " on " << split.size() << " " << a.split
        << " image(s)\n";
  } else {
    std::ostringstream os;
    os << "image,iou,dice\n";
    for (std::size_t i = 0; i < entries.size(); ++i)
      os << fs::relative(entries[i]->image, manifest.root).generic_string() << "," << format_double(res.iou_per_sample[i])
         << "," << format_double(res.dice_per_sample[i]) << "\n";
    os << "mean," << format_double(res.iou) << "," << format_double(res.metric) << "\n";
    write_text(dir / "seg_metrics.csv", with_provenance(cfg, os.str()));
    out << "iou=" << res.iou << " dice=" << res.metric << " on " << split.size() << " " << a.split << " image(s)\n";
  }
  return 0;
}

struct ExplainArgs {
  Common common;
  std::string checkpoint, image, out, layer;
  std::optional<std::int64_t> target;
};

int do_explain(const ExplainArgs& a, std::ostream& out) {
  auto loaded = load_checkpoint<float>(a.checkpoint);
  ModelGraph<float>& model = *loaded.model;
  if (model.task() != Task::classify) fail(ErrorKind::state, "explain needs a classification checkpoint");
  const RunConfig cfg = config_for_checkpoint(a.common, loaded);
  const PipelineConfig pipeline = cfg.pipeline();
  const ImageU8 raw = convert_channels(read_image(a.image), cfg.get_size("channels"));
  const ImageF img = run_pipeline(raw, pipeline);
  const std::vector<ImageF> one{img};
  const Tensor<float> batch = stack_images<float>(one);

  const Tensor<float> probs = forward_classify(model, batch);
  std::size_t predicted = 0;
  for (std::size_t k = 1; k < probs.dim(1); ++k)
    if (probs[k] > probs[predicted]) predicted = k;
  const std::size_t target = a.target ? static_cast<std::size_t>(*a.target) : predicted;
  std::string layer = !a.layer.empty() ? a.layer : cfg.get("explain.layer");
  if (layer.empty()) {
    auto* net = dynamic_cast<SEConvNet<float>*>(&model);
    if (net == nullptr) fail(ErrorKind::state, "explain needs an SE-ConvNet checkpoint");
    layer = net->last_feature_layer();
  }
  const auto res = gradcam_pp_detailed(model, batch, target, layer);

  ImageU8 base = raw;
  for (const Stage& s : pipeline.stages)
    if (s.kind == StageKind::resize) base = resize_bilinear(base, s.height, s.width);
  const fs::path dir(a.out);
  fs::create_directories(dir);
  const std::string stem = fs::path(a.image).stem().string();
  write_pnm(dir / (stem + "_heatmap.pgm"), heatmap_gray(res.heatmap), cfg.provenance());
  write_pnm(dir / (stem + "_overlay.ppm"), heatmap_overlay(base, res.heatmap), cfg.provenance());
  const std::size_t peak = res.heatmap.argmax();
  std::ostringstream os;
  os << "image,layer,target_class,predicted_class,target_probability,score,peak_y,peak_x\n"
     << a.image << "," << layer << "," << target << "," << predicted << "," << format_double(probs[target]) << ","
     << format_double(res.score) << "," << peak / res.heatmap.width << "," << peak % res.heatmap.width << "\n";
  write_text(dir / (stem + "_gradcam.csv"), with_provenance(cfg, os.str()));
  const std::string name = target < model.class_names.size() ? model.class_names[target] : std::to_string(target);
  out << "explained class " << name << " at layer " << layer << "; peak at (" << peak / res.heatmap.width << ", "
      << peak % res.heatmap.width << ")\n";
  return 0;
}

struct AblateArgs {
  Common common;
  std::string data, out, pipelines, models;
  std::optional<std::int64_t> epochs;
};

int do_ablate(const AblateArgs& a, std::ostream& out) {
  std::vector<std::pair<std::string, std::string>> flags;
  if (!a.pipelines.empty()) flags.emplace_back("ablate.pipelines", a.pipelines);
  if (!a.models.empty()) flags.emplace_back("ablate.models", a.models);
  if (a.epochs) flags.emplace_back("train.epochs", std::to_string(*a.epochs));
  const RunConfig cfg = resolve(a.common, flags);

  std::vector<AblationModel> models;
  std::optional<Task> task;
  for (const auto& name : cfg.get_list("ablate.models")) {
    Rng r(0);
    std::unique_ptr<ModelGraph<float>> m;
    if (name == "cnn" || name == "se_convnet") {
      RunConfig c = cfg;
      c.set("model.se", name == "cnn" ? "0" : "1");
      m = build_se_convnet<float>(c.convnet_config(), r);
      m->class_names = cfg.classes();
    } else if (name == "unet" || name == "unet_se") {
      RunConfig c = cfg;
      c.set("unet.se", name == "unet" ? "0" : "1");
      m = build_unet<float>(c.unet_config(), r);
    } else {
      fail(ErrorKind::config, "unknown ablation model '" + name + "' (cnn, se_convnet, unet, unet_se)");
    }
    if (task && *task != m->task()) fail(ErrorKind::config, "ablation models must share one task");
    task = m->task();
    models.push_back({name, m->config_text()});
  }
  std::vector<AblationColumn> columns;
  for (const auto& name : cfg.get_list("ablate.pipelines")) columns.push_back({name, table_pipeline(name, cfg.pipeline_defaults())});

  const auto manifest = load_dataset(a.data, *task, cfg.seed(), cfg.split_ratios(),
                                     *task == Task::classify ? cfg.classes() : std::vector<std::string>{});
  const auto channels = cfg.get_size("channels");
  const AblationDataFn data = [&](const AblationColumn& col) { return materialize<float>(manifest, col.pipeline, channels); };
  const auto result = ablation_grid(columns, models, data, cfg.train_config(*task), cfg.seed(), [&](const AblationCell& c) {
    out << "cell " << c.column << " x " << c.model << ": test "
        << (c.report.task == Task::classify ? "accuracy=" + format_double(c.metrics.accuracy)
                                            : "dice=" + format_double(c.seg.dice))
        << "\n";
  });
  const fs::path dir(a.out);
  fs::create_directories(dir);
  write_text(dir / "ablation_cells.csv", with_provenance(cfg, result.cells_csv()));
  write_text(dir / "ablation_table.csv", with_provenance(cfg, result.table_csv()));
  if (*task == Task::classify) write_text(dir / "ablation_per_class.csv", with_provenance(cfg, result.per_class_csv()));
  write_run_config(dir, cfg);
  out << "wrote " << result.cells.size() << " ablation cell(s) to " << a.out << "\n";
  return 0;
}

struct InfoArgs {
  Common common;
  std::string checkpoint, model = "convnet";
};

int do_info(const InfoArgs& a, std::ostream& out) {
  std::unique_ptr<ModelGraph<float>> model;
  if (!a.checkpoint.empty()) {
    model = std::move(load_checkpoint<float>(a.checkpoint).model);
  } else {
    const RunConfig cfg = resolve(a.common, {});
    Rng r(cfg.seed());
    if (a.model == "convnet") {
      model = build_se_convnet<float>(cfg.convnet_config(), r);
    } else if (a.model == "unet") {
      model = build_unet<float>(cfg.unet_config(), r);
    } else {
      fail(ErrorKind::config, "unknown model family '" + a.model + "' (convnet or unet)");
    }
  }
  const ParamReport rep = param_report(*model);
  out << "model " << model->model_name() << "\n";
  out << "input " << shape_str(model->input_shape()) << "\n";
  for (const auto& l : model->layers()) {
    out << "  " << l.name << " " << to_string(l.kind) << " " << shape_str(l.output);
    if (l.params) out << " params=" << l.params;
    out << "\n";
  }
  out << "parameters " << rep.count << "\n";
  char mb[64];
  std::snprintf(mb, sizeof mb, "%.2f", rep.megabytes());
  out << "float32_megabytes " << mb << "\n";
  return 0;
}

struct SynthArgs {
  Common common;
  std::string out, task = "classify";
  std::size_t count = 16, size = 32;
};

int do_synth(const SynthArgs& a, std::ostream& out) {
  const RunConfig cfg = resolve(a.common, {});
  if (a.task == "classify") {
    write_synthetic_classification(a.out, cfg.classes(), a.count, a.size, cfg.seed());
  } else if (a.task == "segment") {
    write_synthetic_segmentation(a.out, a.count, a.size, cfg.seed());
  } else {
    fail(ErrorKind::config, "unknown task '" + a.task + "' (classify or segment)");
  }
  out << "wrote synthetic " << a.task << " data to " << a.out << "\n";
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"leafgrad: leaf disease classification and segmentation toolkit", "leafgrad"};
  app.require_subcommand(1);

  PreprocessArgs pre;
  auto* c_pre = app.add_subcommand("preprocess", "apply a preprocessing chain to images");
  add_common(c_pre, pre.common);
  c_pre->add_option("--input", pre.input, "image file or directory")->required();
  c_pre->add_option("--output", pre.output, "output directory")->required();
  c_pre->add_option("--pipeline", pre.pipeline, "chain such as resize,clahe,mpn");
  c_pre->add_option("--format", pre.format, "lgf1 (float) or pnm (8-bit preview)")->check(CLI::IsMember({"lgf1", "pnm"}));

  TrainArgs tcls, tseg;
  auto* c_tc = app.add_subcommand("train-classify", "train the SE-ConvNet classifier");
  auto* c_ts = app.add_subcommand("train-segment", "train the U-Net segmenter");
  for (auto [cmd, t] : {std::pair{c_tc, &tcls}, std::pair{c_ts, &tseg}}) {
    add_common(cmd, t->common);
    cmd->add_option("--data", t->data, "dataset root")->required();
    cmd->add_option("--out", t->out, "output directory")->required();
    cmd->add_option("--pipeline", t->pipeline, "preprocessing chain");
    cmd->add_option("--epochs", t->epochs, "maximum epochs");
    cmd->add_flag("--quiet", t->quiet, "no per-epoch progress lines");
  }

  EvaluateArgs ev;
  auto* c_ev = app.add_subcommand("evaluate", "score a checkpoint on a dataset split");
  add_common(c_ev, ev.common);
  c_ev->add_option("--checkpoint", ev.checkpoint, "LGC1 checkpoint")->required();
  c_ev->add_option("--data", ev.data, "dataset root")->required();
  c_ev->add_option("--out", ev.out, "output directory")->required();
  c_ev->add_option("--split", ev.split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));

  ExplainArgs ex;
  auto* c_ex = app.add_subcommand("explain", "GradCAM++ heatmap for one image");
  add_common(c_ex, ex.common);
  c_ex->add_option("--checkpoint", ex.checkpoint, "classification checkpoint")->required();
  c_ex->add_option("--image", ex.image, "input image")->required();
  c_ex->add_option("--out", ex.out, "output directory")->required();
  c_ex->add_option("--class", ex.target, "target class index (default: predicted class)")->check(CLI::NonNegativeNumber);
  c_ex->add_option("--layer", ex.layer, "feature layer name");

  AblateArgs ab;
  auto* c_ab = app.add_subcommand("ablate", "train every pipeline x model cell");
  add_common(c_ab, ab.common);
  c_ab->add_option("--data", ab.data, "dataset root")->required();
  c_ab->add_option("--out", ab.out, "output directory")->required();
  c_ab->add_option("--pipelines", ab.pipelines, "columns, e.g. resized,mpn");
  c_ab->add_option("--models", ab.models, "rows, e.g. cnn,se_convnet");
  c_ab->add_option("--epochs", ab.epochs, "maximum epochs per cell");

  InfoArgs in;
  auto* c_in = app.add_subcommand("info", "print layers and parameter counts");
  add_common(c_in, in.common);
  c_in->add_option("--checkpoint", in.checkpoint, "describe a saved model");
  c_in->add_option("--model", in.model, "convnet or unet")->check(CLI::IsMember({"convnet", "unet"}));

  SynthArgs sy;
  auto* c_sy = app.add_subcommand("synth", "write a synthetic toy dataset");
  add_common(c_sy, sy.common);
  c_sy->add_option("--out", sy.out, "output directory")->required();
  c_sy->add_option("--task", sy.task, "classify or segment")->check(CLI::IsMember({"classify", "segment"}));
  c_sy->add_option("--count", sy.count, "images per class (classify) or in total (segment)")->check(CLI::PositiveNumber);
  c_sy->add_option("--size", sy.size, "image side length")->check(CLI::Range(8, 4096));

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "leafgrad: usage error: " << e.what() << "\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return 2;
  }

  try {
    if (c_pre->parsed()) return do_preprocess(pre, out);
    if (c_tc->parsed()) return do_train(tcls, Task::classify, out);
    if (c_ts->parsed()) return do_train(tseg, Task::segment, out);
    if (c_ev->parsed()) return do_evaluate(ev, out);
    if (c_ex->parsed()) return do_explain(ex, out);
    if (c_ab->parsed()) return do_ablate(ab, out);
    if (c_in->parsed()) return do_info(in, out);
    if (c_sy->parsed()) return do_synth(sy, out);
  } catch (const Error& e) {
    err << "leafgrad: error: " << to_string(e.kind()) << ": " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "leafgrad: error: internal: " << e.what() << "\n";
    return 1;
  }
  err << app.help();
  return 2;
}

int run(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args, std::cout, std::cerr);
}

}  // namespace leafgrad::cli
