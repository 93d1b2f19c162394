#include "commands.hpp"

#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "gffm/datasets.hpp"
#include "gffm/error.hpp"
#include "gffm/eval_bench.hpp"
#include "gffm/flow_train.hpp"
#include "gffm/sampler.hpp"
#include "gffm/velocity_model.hpp"

namespace gffm::cli {

namespace fs = std::filesystem;

namespace {

std::ofstream open_artifact(const fs::path& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  os << std::setprecision(17);
  return os;
}

void close_artifact(std::ofstream& os, const fs::path& path) {
  os.close();
  if (!os) throw Error("failed writing " + path.string());
}

void prepare_out_dir(const RunConfig& cfg) {
  std::error_code ec;
  fs::create_directories(cfg.out_dir, ec);
  if (ec) throw Error("cannot create output directory " + cfg.out_dir + ": " + ec.message());
}

// One line, no embedded newlines, so callers can parse it.
std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

template <class Body>
int guarded(std::ostream& err, Body&& body) {
  try {
    return body();
  } catch (const std::exception& e) {
    err << "error: " << one_line(e.what()) << '\n';
    return 1;
  }
}

void write_loss_curve(const fs::path& path, const TrainRecord& record) {
  std::ofstream os = open_artifact(path);
  os << "# step loss\n";
  for (const StepRecord& s : record.steps) os << s.step << ' ' << s.loss << '\n';
  close_artifact(os, path);
}

void write_metrics(const fs::path& path, const MetricsReport& m) {
  std::ofstream os = open_artifact(path);
  os << "metric,value\n";
  os << "sliced_w2," << m.sliced_w2 << '\n';
  os << "misclass_rate," << m.misclass_rate() << '\n';
  os << "fidelity," << m.fidelity << '\n';
  os << "forward_count," << m.model_forward_count << '\n';
  os << "fingerprint," << m.fingerprint << '\n';
  for (const LabelFidelity& l : m.per_condition) {
    os << "fidelity_" << l.label << ',' << l.fidelity() << '\n';
    os << "sliced_w2_" << l.label << ',' << l.sliced_w2 << '\n';
  }
  os << "wall_clock," << m.wall_clock_seconds << '\n';
  close_artifact(os, path);
}

// Label-major conditions; infill configs reuse dataset prompts so the sampler sees them.
std::vector<Condition> sampling_conditions(const RunConfig& cfg) {
  const int K = cfg.mixture.components;
  const int per = cfg.eval.samples_per_class;
  std::vector<Condition> conds;
  conds.reserve(static_cast<std::size_t>(K * per));
  if (cfg.dataset_kind == DatasetKind::Infill) {
    const Dataset ds = make_dataset(cfg.dataset_spec());
    std::vector<std::vector<Condition>> by_label(static_cast<std::size_t>(K));
    for (const DataItem& item : ds) by_label[static_cast<std::size_t>(*item.cond.label)].push_back(item.cond);
    for (int k = 0; k < K; ++k) {
      const auto& pool = by_label[static_cast<std::size_t>(k)];
      for (int i = 0; i < per; ++i) {
        conds.push_back(pool.empty() ? Condition{k, std::nullopt} : pool[static_cast<std::size_t>(i) % pool.size()]);
      }
    }
    return conds;
  }
  for (int k = 0; k < K; ++k)
    for (int i = 0; i < per; ++i) conds.push_back(Condition{k, std::nullopt});
  return conds;
}

}  // namespace

std::vector<double> parse_w_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    std::size_t used = 0;
    double w = 0.0;
    try {
      w = std::stod(part, &used);
    } catch (const std::exception&) {
      throw ConfigError("--w: not a number: '" + part + "'");
    }
    if (used != part.size() && part.find_first_not_of(" \t", used) != std::string::npos) {
      throw ConfigError("--w: not a number: '" + part + "'");
    }
    if (!(w >= 0.0)) throw ConfigError("--w: values must be non-negative");
    out.push_back(w);
  }
  if (out.empty()) throw ConfigError("--w: empty list");
  return out;
}

RunConfig load_run_config(const CommandArgs& args) {
  RunConfig cfg = parse_config(args.config);
  if (args.out) cfg.out_dir = args.out->string();
  if (args.seed) set_seed(cfg, *args.seed);
  if (args.w_list) cfg.eval.w_list = *args.w_list;
  return cfg;
}

fs::path artifact_path(const RunConfig& cfg, const std::string& stem, const std::string& ext) {
  return fs::path(cfg.out_dir) / (stem + "_" + fingerprint_hex(cfg) + "." + ext);
}

int cmd_train(const CommandArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig cfg = load_run_config(args);
    prepare_out_dir(cfg);
    const Dataset ds = make_dataset(cfg.dataset_spec());
    const fs::path csv = artifact_path(cfg, "train", "csv");
    const fs::path curve = artifact_path(cfg, "loss_curve", "dat");
    TrainResult result;
    try {
      result = train(cfg.train, cfg.arch(), ds);
    } catch (const TrainDivergedError& e) {
      e.record().write_csv(csv);
      write_loss_curve(curve, e.record());
      throw;
    }
    const fs::path ckpt = artifact_path(cfg, "model", "gffm");
    save_checkpoint(result.model, ckpt);
    result.record.write_csv(csv);
    write_loss_curve(curve, result.record);
    out << ckpt.string() << '\n' << csv.string() << '\n' << curve.string() << '\n';
    return 0;
  });
}

int cmd_sample(const CommandArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig cfg = load_run_config(args);
    const VelocityModel model = load_checkpoint(args.ckpt, cfg.arch());
    prepare_out_dir(cfg);
    const std::vector<Condition> conds = sampling_conditions(cfg);
    const SampleResult r = sample_batch(model, conds, cfg.sampler);
    const fs::path path = artifact_path(cfg, "samples", "csv");
    write_samples_csv(path, r.x, conds);
    out << path.string() << '\n';
    return 0;
  });
}

int cmd_eval(const CommandArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig cfg = load_run_config(args);
    const VelocityModel model = load_checkpoint(args.ckpt, cfg.arch());
    prepare_out_dir(cfg);
    MetricsReport m = evaluate_model(model, cfg.mixture_spec(), cfg.sampler, cfg.setup().eval);
    m.fingerprint = fingerprint(cfg);
    const fs::path path = artifact_path(cfg, "metrics", "csv");
    write_metrics(path, m);
    out << path.string() << '\n';
    return 0;
  });
}

int cmd_grid(const CommandArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig cfg = load_run_config(args);
    prepare_out_dir(cfg);
    const LossKind trainings[] = {LossKind::Cfm, LossKind::MgCfm};
    const bool infer[] = {false, true};
    const std::vector<std::uint64_t> seeds = cfg.seed_list();
    // Both timestep schedules share the trained models.
    const ScheduleKind schedules[] = {ScheduleKind::Uniform, ScheduleKind::Sway};
    const GridResult grid = run_grid(cfg.setup(), trainings, infer, cfg.eval.nfe_list, seeds, schedules);

    const fs::path csv = artifact_path(cfg, "grid", "csv");
    std::ofstream os = open_artifact(csv);
    write_grid_csv(os, grid, ScheduleKind::Uniform);
    close_artifact(os, csv);
    const fs::path sway_csv = artifact_path(cfg, "grid_sway", "csv");
    std::ofstream sway = open_artifact(sway_csv);
    write_grid_csv(sway, grid, ScheduleKind::Sway);
    close_artifact(sway, sway_csv);
    const fs::path txt = artifact_path(cfg, "grid", "txt");
    std::ofstream table = open_artifact(txt);
    table << format_grid_table(grid);
    close_artifact(table, txt);
    out << csv.string() << '\n' << sway_csv.string() << '\n' << txt.string() << '\n';
    return 0;
  });
}

int cmd_sweep(const CommandArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig cfg = load_run_config(args);
    prepare_out_dir(cfg);
    ExperimentSetup setup = cfg.setup();
    setup.train.loss_kind = LossKind::MgCfm;
    const std::vector<SweepRow> rows = w_sweep(cfg.eval.w_list, setup);

    const fs::path csv = artifact_path(cfg, "sweep", "csv");
    std::ofstream os = open_artifact(csv);
    write_sweep_csv(os, rows);
    close_artifact(os, csv);
    const fs::path dat = artifact_path(cfg, "w_sweep", "dat");
    std::ofstream curve = open_artifact(dat);
    curve << "# w misclass_rate\n";
    for (const SweepRow& r : rows) curve << r.w << ' ' << r.metrics.misclass_rate() << '\n';
    close_artifact(curve, dat);
    out << csv.string() << '\n' << dat.string() << '\n';
    return 0;
  });
}

int cmd_ablate(const CommandArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig cfg = load_run_config(args);
    prepare_out_dir(cfg);
    ExperimentSetup setup = cfg.setup();
    setup.train.loss_kind = LossKind::MgCfm;
    const std::vector<AblationRow> rows = sg_ablation(setup);
    const fs::path csv = artifact_path(cfg, "sg_ablation", "csv");
    std::ofstream os = open_artifact(csv);
    write_ablation_csv(os, rows);
    close_artifact(os, csv);
    out << csv.string() << '\n';
    return 0;
  });
}

}  // namespace gffm::cli
