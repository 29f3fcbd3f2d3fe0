#include "leafgrad/ablation.hpp"

#include <sstream>

#include "leafgrad/io_util.hpp"

namespace leafgrad {

const AblationCell& AblationResult::cell(const std::string& column, const std::string& model) const {
  for (const auto& c : cells)
    if (c.column == column && c.model == model) return c;
  fail(ErrorKind::value, "no ablation cell for " + column + " x " + model);
}

std::string AblationResult::cells_csv() const {
  std::ostringstream os;
  const bool seg = task == Task::segment;
  os << "pipeline,model,config_hash,params,size_mb,epochs_run,stop_reason,best_epoch,best_val_loss,test_loss";
  if (seg) {
    os << ",test_iou,test_dice\n";
  } else {
    os << ",test_accuracy,macro_precision,macro_recall,macro_f1\n";
  }
  for (const auto& c : cells) {
    os << c.column << "," << c.model << "," << hex64(c.config_hash) << "," << c.params.count << ","
       << format_double(c.params.megabytes()) << "," << c.report.epochs.size() << "," << c.report.stop_reason << ","
       << c.report.best_epoch << "," << format_double(c.report.best_val_loss) << ","
       << format_double(c.report.test_loss);
    if (seg) {
      os << "," << format_double(c.seg.iou) << "," << format_double(c.seg.dice) << "\n";
    } else {
      os << "," << format_double(c.metrics.accuracy) << "," << format_double(c.metrics.macro_precision) << ","
         << format_double(c.metrics.macro_recall) << "," << format_double(c.metrics.macro_f1) << "\n";
    }
  }
  return os.str();
}

std::string AblationResult::table_csv() const {
  std::ostringstream os;
  const bool seg = task == Task::segment;
  os << "model";
  for (const auto& col : columns) {
    if (seg) {
      os << "," << col << "_iou_pct," << col << "_dice_pct";
    } else {
      os << "," << col;
    }
  }
  if (!seg) os << ",size_mb";
  os << "\n";
  for (const auto& m : models) {
    os << m;
    for (const auto& col : columns) {
      const auto& c = cell(col, m);
      if (seg) {
        os << "," << format_double(100.0 * c.seg.iou) << "," << format_double(100.0 * c.seg.dice);
      } else {
        os << "," << format_double(c.metrics.accuracy);
      }
    }
    if (!seg) os << "," << format_double(cell(columns.front(), m).params.megabytes());
    os << "\n";
  }
  return os.str();
}

std::string AblationResult::per_class_csv() const {
  std::ostringstream os;
  os << "pipeline,model,class,precision,recall,f1,support\n";
  if (task == Task::segment) return os.str();
  for (const auto& c : cells) {
    for (std::size_t k = 0; k < c.metrics.precision.size(); ++k) {
      const std::string name = k < class_names.size() ? class_names[k] : std::to_string(k);
      os << c.column << "," << c.model << "," << name << "," << format_double(c.metrics.precision[k]) << ","
         << format_double(c.metrics.recall[k]) << "," << format_double(c.metrics.f1[k]) << "," << c.metrics.support[k]
         << "\n";
    }
    os << c.column << "," << c.model << ",macro_avg," << format_double(c.metrics.macro_precision) << ","
       << format_double(c.metrics.macro_recall) << "," << format_double(c.metrics.macro_f1) << ","
       << c.confusion.total() << "\n";
  }
  return os.str();
}

AblationResult ablation_grid(const std::vector<AblationColumn>& columns, const std::vector<AblationModel>& models,
                             const AblationDataFn& data, const TrainConfig<float>& cfg, std::uint64_t init_seed,
                             const std::function<void(const AblationCell&)>& on_cell) {
  if (columns.empty() || models.empty()) fail(ErrorKind::config, "ablation grid needs at least one pipeline and one model");
  for (const auto& col : columns) col.pipeline.validate();
  AblationResult result;
  for (const auto& col : columns) result.columns.push_back(col.name);
  for (const auto& m : models) result.models.push_back(m.name);
  bool task_set = false;

  for (const auto& col : columns) {
    const TrainData<float> split = data(col);
    for (const auto& spec : models) {
      Rng init(init_seed);
      auto model = build_from_config_text<float>(spec.config_text, init);
      if (!task_set) {
        result.task = model->task();
        result.class_names = model->class_names;
        task_set = true;
      } else if (model->task() != result.task) {
        fail(ErrorKind::config, "ablation models must all share one task");
      }
      if (split.test.size() == 0) fail(ErrorKind::value, "ablation needs a non-empty test split");
      AblationCell cell;
      cell.column = col.name;
      cell.model = spec.name;
      cell.config_hash = fnv1a64(col.pipeline.name() + "\n" + model->config_text());
      cell.params = param_report(*model);
      if (model->task() == Task::classify) {
        cell.report = train_classifier(*model, split, cfg);
        cell.confusion = confusion(cell.report.test_predictions, split.test.labels, model->num_outputs());
        cell.metrics = class_metrics(cell.confusion);
      } else {
        cell.report = train_segmenter(*model, split, cfg);
        const EvalResult<float> test = evaluate_split(*model, split.test, cfg.batch_size, cfg.threshold);
        cell.seg.iou = test.iou;
        cell.seg.dice = test.metric;
        cell.seg.iou_per_sample = test.iou_per_sample;
        cell.seg.dice_per_sample = test.dice_per_sample;
      }
      if (on_cell) on_cell(cell);
      result.cells.push_back(std::move(cell));
    }
  }
  return result;
}

}  // namespace leafgrad
