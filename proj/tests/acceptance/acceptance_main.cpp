// Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "gffm/analytic_oracle.hpp"
#include "gffm/autodiff.hpp"
#include "gffm/datasets.hpp"
#include "gffm/eval_bench.hpp"
#include "gffm/flow_train.hpp"
#include "gffm/sampler.hpp"
#include "gffm/velocity_model.hpp"

using namespace gffm;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;

  void check(bool ok, const std::string& what) {
    if (!ok) pass = false;
    notes.push_back(std::string(ok ? "ok   " : "FAIL ") + what);
  }
};

std::string fmt(const char* f, double a) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string fmt(const char* f, double a, double b) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

std::string fmt(const char* f, double a, double b, double c) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

int failures = 0;

void run(int id, const char* title, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o.pass = false;
    o.notes.push_back(std::string("FAIL exception: ") + e.what());
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!o.pass) ++failures;
  std::printf("%s %d %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", id, title, secs);
  for (const std::string& n : o.notes) std::printf("       %s\n", n.c_str());
  std::fflush(stdout);
}

double max_abs(const std::vector<Eigen::MatrixXd>& a, const std::vector<Eigen::MatrixXd>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].size() > 0) m = std::max(m, (a[i] - b[i]).cwiseAbs().maxCoeff());
  return m;
}

std::vector<Eigen::MatrixXd> param_grads(const ad::Tape& tape, const ad::Var& loss, const ModelVars& vars) {
  const ad::GradientMap g = tape.backward(loss);
  std::vector<Eigen::MatrixXd> out;
  for (const ad::Var& p : vars.params) out.push_back(g.at(p.id()));
  return out;
}

ModelArch small_arch(int prompt_dim) {
  ModelArch a;
  a.data_dim = 2;
  a.num_classes = 4;
  a.hidden = 8;
  a.depth = 2;
  a.prompt_dim = prompt_dim;
  a.time_dim = 4;
  return a;
}

// Random weights well away from initialisation so every path carries gradient.
VelocityModel perturbed_model(std::uint64_t seed, const ModelArch& arch) {
  VelocityModel m = init_params(seed, arch);
  Rng rng(seed ^ 0x5EED);
  for (auto& p : m.params()) p += 0.3 * rng.normal_matrix(p.rows(), p.cols());
  return m;
}

Dataset small_mixture(int n, std::uint64_t seed) {
  DatasetSpec s;
  s.mixture = GaussianMixtureSpec::ring(4, 2, 3.0, 0.2);
  s.n_items = n;
  s.seed = seed;
  return make_mixture_dataset(s);
}

Dataset small_infill(int n, std::uint64_t seed) {
  DatasetSpec s;
  s.kind = DatasetKind::Infill;
  s.mixture = GaussianMixtureSpec::ring(4, 2, 3.0, 0.2);
  s.n_items = n;
  s.seed = seed;
  return make_infill_dataset(s);
}

Outcome gradient_correctness() {
  Outcome o;
  constexpr double eps = 1e-5;
  using ad::Var;
  double worst_op = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    Rng rng(mix_seed(101, static_cast<std::uint64_t>(trial)));
    const ad::Array A = rng.normal_matrix(3, 4);
    const ad::Array B = rng.normal_matrix(3, 4);
    const ad::Array M = rng.normal_matrix(4, 2);
    const ad::Array bias = rng.normal_matrix(3, 1);
    const ad::Array T = rng.normal_matrix(3, 5);
    const ad::Array W = rng.normal_matrix(3, 4);
    auto weighted = [W](const Var& v) {
      return ad::sum(ad::mul(v, v.tape().leaf(W.topLeftCorner(v.rows(), v.cols()).eval())));
    };
    const std::vector<std::pair<ad::ScalarGraph, std::vector<ad::Array>>> cases = {
        {[&](ad::Tape&, std::span<const Var> v) { return weighted(ad::add(v[0], v[1])); }, {A, B}},
        {[&](ad::Tape&, std::span<const Var> v) { return weighted(ad::sub(v[0], v[1])); }, {A, B}},
        {[&](ad::Tape&, std::span<const Var> v) { return weighted(ad::mul(v[0], v[1])); }, {A, B}},
        {[&](ad::Tape&, std::span<const Var> v) { return weighted(ad::add(v[0], 1.7)); }, {A}},
        {[&](ad::Tape&, std::span<const Var> v) { return weighted(ad::scale(v[0], -2.3)); }, {A}},
        {[&](ad::Tape&, std::span<const Var> v) { return weighted(ad::matmul(v[0], v[1])); }, {A, M}},
        {[&](ad::Tape&, std::span<const Var> v) { return weighted(ad::add_bias(v[0], v[1])); }, {A, bias}},
        {[&](ad::Tape&, std::span<const Var> v) { return weighted(ad::gelu(v[0])); }, {A}},
        {[&](ad::Tape&, std::span<const Var> v) { return ad::sum(v[0]); }, {A}},
        {[&](ad::Tape&, std::span<const Var> v) { return ad::mean(v[0]); }, {A}},
        {[&](ad::Tape&, std::span<const Var> v) { return ad::sq_l2(v[0]); }, {A}},
        {[&](ad::Tape&, std::span<const Var> v) {
           const Var parts[] = {v[0], v[1]};
           return weighted(ad::concat_rows(parts));
         },
         {A.topRows(1).eval(), B.topRows(2).eval()}},
        {[&](ad::Tape&, std::span<const Var> v) { return weighted(ad::gather_cols(v[0], {4, 0, 4, 2})); }, {T}},
        {[&](ad::Tape&, std::span<const Var> v) { return weighted(ad::where_cols({true, false, false, true}, v[0], v[1])); },
         {A, B}},
        {[&](ad::Tape&, std::span<const Var> v) {
           return weighted(ad::mul(ad::stop_gradient(v[0]), v[1])) + ad::sq_l2(v[0]);
         },
         {A, B}},
    };
    for (const auto& [f, in] : cases) worst_op = std::max(worst_op, ad::grad_check(f, in, eps));
  }
  o.check(worst_op < 1e-4, fmt("15 primitives x 20 random points: max rel err %.2e", worst_op));

  double worst_loss = 0.0;
  for (int prompt : {0, 1}) {
    const ModelArch arch = small_arch(prompt ? 4 : 0);
    const VelocityModel m = perturbed_model(3 + static_cast<std::uint64_t>(prompt), arch);
    const Dataset ds = prompt ? small_infill(6, 9) : small_mixture(6, 9);
    Rng rng(10);
    const LossBatch batch = draw_loss_batch(ds, rng, 0.2, 0.3);
    auto as_vars = [](std::span<const ad::Var> leaves) { return ModelVars{{leaves.begin(), leaves.end()}}; };
    const double cfm = ad::grad_check(
        [&](ad::Tape& t, std::span<const ad::Var> l) { return cfm_loss(t, as_vars(l), arch, batch); }, m.params(), eps);
    worst_loss = std::max(worst_loss, cfm);
    for (bool sg : {true, false}) {
      const double mg = ad::grad_check(
          [&](ad::Tape& t, std::span<const ad::Var> l) { return mg_cfm_loss(t, as_vars(l), arch, batch, 0.7, sg); },
          m.params(), eps);
      worst_loss = std::max(worst_loss, mg);
    }
  }
  o.check(worst_loss < 1e-4, fmt("cfm and mg_cfm (sg on/off, label and prompt models): max rel err %.2e", worst_loss));
  return o;
}

Outcome stop_gradient_semantics() {
  Outcome o;
  double worst = 0.0;
  for (std::uint64_t seed : {2, 5, 11}) {
    const ModelArch arch = small_arch(4);
    const VelocityModel m = perturbed_model(seed, arch);
    const Dataset ds = small_infill(24, seed + 1);
    Rng rng(seed + 2);
    const LossBatch batch = draw_loss_batch(ds, rng, 0.2, 0.3);
    const double w = 0.7;

    ad::Tape t1;
    const ModelVars v1 = bind(t1, m);
    const ad::Var mg = mg_cfm_loss(t1, v1, arch, batch, w, true);

    const std::vector<Condition> nulls(batch.conds.size(), Condition::null());
    const Eigen::MatrixXd dv = m.forward(batch.x_t, batch.t, batch.conds) - m.forward(batch.x_t, batch.t, nulls);
    ad::Tape t2;
    const ModelVars v2 = bind(t2, m);
    const ad::Var vc = velocity_forward(t2, v2, arch, batch.x_t, batch.t, batch.conds);
    const ad::Var frozen = assemble_cfm_loss(t2, ad::add(vc, t2.leaf(w * dv)), batch.target);

    worst = std::max(worst, std::abs(mg.scalar() - frozen.scalar()));
    worst = std::max(worst, max_abs(param_grads(t1, mg, v1), param_grads(t2, frozen, v2)));
  }
  o.check(worst < 1e-12, fmt("sg gradient vs frozen-dv surrogate over 3 draws: max abs diff %.2e", worst));
  return o;
}

Outcome degeneracy() {
  Outcome o;
  double worst = 0.0;
  for (std::uint64_t seed : {4, 8, 15}) {
    const ModelArch arch = small_arch(0);
    const VelocityModel m = perturbed_model(seed, arch);
    const Dataset ds = small_mixture(32, seed);
    Rng rng(seed + 16);
    const LossBatch batch = draw_loss_batch(ds, rng, 0.2, 0.3);
    for (bool sg : {true, false}) {
      ad::Tape ta;
      const ModelVars va = bind(ta, m);
      const ad::Var a = mg_cfm_loss(ta, va, arch, batch, 0.0, sg);
      ad::Tape tb;
      const ModelVars vb = bind(tb, m);
      const ad::Var b = cfm_loss(tb, vb, arch, batch);
      worst = std::max(worst, std::abs(a.scalar() - b.scalar()));
      worst = std::max(worst, max_abs(param_grads(ta, a, va), param_grads(tb, b, vb)));
    }
  }
  o.check(worst < 1e-12, fmt("mg_cfm(w=0) vs cfm, values and gradients: max abs diff %.2e", worst));
  return o;
}

Outcome cfg_identities() {
  Outcome o;
  const ModelArch arch = small_arch(0);
  const VelocityModel m = perturbed_model(21, arch);
  const ModelField field(m);
  Rng rng(22);
  const Eigen::MatrixXd x = 2.0 * rng.normal_matrix(2, 64);
  std::vector<Condition> conds;
  for (int j = 0; j < 64; ++j) conds.push_back(Condition{j % 4, std::nullopt});
  const std::vector<Condition> nulls(conds.size(), Condition::null());

  bool exact = true;
  for (double t : {0.0, 0.37, 0.999}) {
    EvalCounters c;
    const Eigen::MatrixXd cond = plain_velocity(field, x, t, conds, c);
    const Eigen::MatrixXd uncond = plain_velocity(field, x, t, nulls, c);
    exact = exact && cfg_velocity(field, x, t, conds, 0.0, c) == uncond;
    exact = exact && cfg_velocity(field, x, t, conds, 1.0, c) == cond;
  }
  o.check(exact, "trained-shape model: w=0 gives unconditional, w=1 conditional, bit for bit");

  const GaussianMixtureSpec spec = GaussianMixtureSpec::ring(8, 2, 4.0, 0.16);
  const AnalyticField oracle(spec);
  const Eigen::MatrixXd xs = 3.0 * rng.normal_matrix(2, 256);
  std::vector<Condition> labels;
  for (int j = 0; j < 256; ++j) labels.push_back(Condition{j % 8, std::nullopt});
  double worst = 0.0;
  for (double t : {0.05, 0.5, 0.9}) {
    EvalCounters c;
    const Eigen::MatrixXd guided = cfg_velocity(oracle, xs, t, labels, 1.0, c);
    for (int j = 0; j < 256; ++j) {
      const Eigen::VectorXd u = analytic_cond_velocity(spec, j % 8, xs.col(j), t);
      const Eigen::VectorXd marginal = analytic_marginal_velocity(spec, xs.col(j), t);
      // Difference form u + w (u_c - u) evaluated at w = 1.
      const Eigen::VectorXd rebuilt = marginal + 1.0 * (u - marginal);
      const double scale = std::max(1.0, u.cwiseAbs().maxCoeff());
      worst = std::max(worst, (guided.col(j) - u).cwiseAbs().maxCoeff() / scale);
      worst = std::max(worst, (rebuilt - u).cwiseAbs().maxCoeff() / scale);
    }
  }
  o.check(worst < 1e-14, fmt("analytic oracle: w=1 reconstruction of the conditional field, max rel err %.2e", worst));
  return o;
}

Outcome oracle_sampling() {
  Outcome o;
  const GaussianMixtureSpec spec = GaussianMixtureSpec::ring(8, 2, 4.0, 0.16);
  const AnalyticField field(spec);
  const int per_class = 10000;
  std::vector<Condition> conds;
  for (int k = 0; k < 8; ++k)
    for (int i = 0; i < per_class; ++i) conds.push_back(Condition{k, std::nullopt});
  SamplerConfig cfg;
  cfg.nfe = 256;
  cfg.seed = 7;
  const SampleResult res = sample_batch(field, conds, cfg);

  double worst_mean = 0.0;
  double worst_cov = 0.0;
  for (int k = 0; k < 8; ++k) {
    const Eigen::MatrixXd xs = res.x.middleCols(k * per_class, per_class);
    const Eigen::Vector2d mu = xs.rowwise().mean();
    const Eigen::MatrixXd centred = xs.colwise() - mu;
    const Eigen::Matrix2d cov = centred * centred.transpose() / (per_class - 1.0);
    const double sigma = std::sqrt(spec.variances[static_cast<std::size_t>(k)]);
    const Eigen::Matrix2d target = spec.variances[static_cast<std::size_t>(k)] * Eigen::Matrix2d::Identity();
    worst_mean = std::max(worst_mean, (mu - spec.means[static_cast<std::size_t>(k)]).norm() / sigma);
    worst_cov = std::max(worst_cov, (cov - target).norm() / target.norm());
  }
  o.check(worst_mean < 0.05, fmt("component means: worst |mean error| / sigma = %.4f", worst_mean));
  o.check(worst_cov < 0.10, fmt("component covariances: worst relative Frobenius error = %.4f", worst_cov));

  Rng rng(4);
  const Eigen::MatrixXd z0 = rng.normal_matrix(2, 256);
  std::vector<Condition> sub;
  for (int j = 0; j < 256; ++j) sub.push_back(Condition{j % 8, std::nullopt});
  auto at = [&](int nfe) {
    SamplerConfig c;
    c.nfe = nfe;
    return integrate(field, z0, c, sub).x;
  };
  const Eigen::MatrixXd ref = at(16384);
  auto err = [&](int nfe) { return (at(nfe) - ref).colwise().norm().mean(); };
  const double e32 = err(32);
  const double e64 = err(64);
  const double e128 = err(128);
  const double r1 = e32 / e64;
  const double r2 = e64 / e128;
  o.check(std::abs(r1 - 2.0) <= 0.4 && std::abs(r2 - 2.0) <= 0.4,
          fmt("first-order convergence: err(32)/err(64) = %.3f, err(64)/err(128) = %.3f", r1, r2));
  return o;
}

// Shared by criteria 6 and 7: the two-objective comparison at the main-table scale.
ExperimentSetup table_setup() {
  ExperimentSetup s;
  s.dataset.kind = DatasetKind::Mixture;
  s.dataset.mixture = GaussianMixtureSpec::ring(8, 2, 4.0, 0.16);
  s.dataset.n_items = 4096;
  s.dataset.seed = mix_seed(0, 0xDA7A);
  s.arch.data_dim = 2;
  s.arch.num_classes = 8;
  s.arch.hidden = 64;
  s.arch.depth = 3;
  s.arch.time_dim = 16;
  s.train.w = 0.7;
  s.train.p_uncond = 0.2;
  s.train.p_prompt_drop = 0.3;
  s.train.grad_clip_norm = 1.0;
  s.train.peak_lr = 1e-3;
  s.train.total_steps = 5000;
  s.train.warmup_steps = 250;
  s.train.batch_size = 128;
  s.sampler.guidance_scale = 2.0;
  s.eval.samples_per_class = 256;
  s.eval.n_proj = 128;
  return s;
}

GridResult table_grid;

const GridRow* summary_row(const std::vector<GridRow>& rows, LossKind kind, bool cfg, int nfe) {
  for (const GridRow& r : rows)
    if (r.training == kind && r.cfg_infer == cfg && r.nfe == nfe && r.schedule == ScheduleKind::Uniform) return &r;
  return nullptr;
}

Outcome core_claim() {
  Outcome o;
  const ExperimentSetup setup = table_setup();
  const LossKind variants[] = {LossKind::Cfm, LossKind::MgCfm};
  const bool infer[] = {false, true};
  const int nfes[] = {32, 16, 7};
  const std::uint64_t seeds[] = {0, 1, 2};
  table_grid = run_grid(setup, variants, infer, nfes, seeds);

  for (const GridRow& r : table_grid.rows)
    if (r.nfe == 32 && ((r.training == LossKind::Cfm && r.cfg_infer) || (r.training == LossKind::MgCfm && !r.cfg_infer)))
      o.notes.push_back(fmt("     seed %.0f: misclass %.4f  sw2 %.4f", static_cast<double>(r.seed), r.metrics.misclass_rate(),
                            r.metrics.sliced_w2) +
                        (r.training == LossKind::Cfm ? "  (CFM + CFG)" : "  (MG, no CFG)"));

  const std::vector<GridRow> summary = table_grid.summary();
  const GridRow* base = summary_row(summary, LossKind::Cfm, true, 32);
  const GridRow* mg = summary_row(summary, LossKind::MgCfm, false, 32);
  if (base == nullptr || mg == nullptr) throw Error("grid is missing the NFE 32 cells");
  const double gap = std::abs(mg->metrics.misclass_rate() - base->metrics.misclass_rate());
  const double ratio = mg->metrics.sliced_w2 / base->metrics.sliced_w2;
  o.check(gap <= 0.02, fmt("(a) misclass: MG %.4f vs CFM+CFG %.4f, gap %.4f (limit 0.02)", mg->metrics.misclass_rate(),
                           base->metrics.misclass_rate(), gap));
  o.check(ratio <= 1.2, fmt("(b) sliced W2: MG %.4f vs CFM+CFG %.4f, ratio %.3f (limit 1.2)", mg->metrics.sliced_w2,
                            base->metrics.sliced_w2, ratio));

  bool halves = true;
  for (const GridRow& r : table_grid.rows) {
    if (r.training != LossKind::MgCfm || r.cfg_infer) continue;
    for (const GridRow& b : table_grid.rows)
      if (b.training == LossKind::Cfm && b.cfg_infer && b.nfe == r.nfe && b.seed == r.seed)
        halves = halves && 2 * r.metrics.model_forward_count == b.metrics.model_forward_count;
  }
  o.check(halves, fmt("(c) forward passes per run: MG %.0f vs CFM+CFG %.0f, exactly half in every cell",
                      static_cast<double>(mg->metrics.model_forward_count),
                      static_cast<double>(base->metrics.model_forward_count)));
  return o;
}

// Every row has the header's column count and every numeric field parses.
bool well_formed(const std::string& csv, const std::string& header, std::size_t rows, std::string& why) {
  std::istringstream is(csv);
  std::string line;
  if (!std::getline(is, line) || line != header) {
    why = "bad header";
    return false;
  }
  const auto columns = static_cast<std::size_t>(std::count(header.begin(), header.end(), ',')) + 1;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    std::vector<std::string> fields;
    std::stringstream ls(line);
    for (std::string f; std::getline(ls, f, ',');) fields.push_back(f);
    if (fields.size() != columns) {
      why = "row " + std::to_string(n) + " has " + std::to_string(fields.size()) + " fields";
      return false;
    }
    for (std::size_t i = 1; i < fields.size(); ++i) {
      if (fields[i] == "true" || fields[i] == "false" || fields[i] == "nan") continue;
      char* end = nullptr;
      std::strtod(fields[i].c_str(), &end);
      if (end == fields[i].c_str() || *end != '\0') {
        why = "row " + std::to_string(n) + " field '" + fields[i] + "' is not numeric";
        return false;
      }
    }
  }
  if (n != rows) {
    why = std::to_string(n) + " rows, expected " + std::to_string(rows);
    return false;
  }
  return true;
}

ExperimentSetup harness_setup() {
  ExperimentSetup s = table_setup();
  s.arch.hidden = 32;
  s.arch.depth = 2;
  s.train.total_steps = 1500;
  s.train.warmup_steps = 75;
  s.eval.samples_per_class = 128;
  s.eval.n_proj = 64;
  return s;
}

Outcome harnesses() {
  Outcome o;
  std::string why;
  const std::string grid_header = "training,cfg_infer,nfe,seed,sw2,misclass_rate,forward_count,wall_clock,diverged";
  std::ostringstream grid_csv;
  write_grid_csv(grid_csv, table_grid);
  o.check(well_formed(grid_csv.str(), grid_header, 36, why),
          "grid {CFM, MG} x {CFG on, off} x NFE {32, 16, 7} x 3 seeds: 36 rows " + (why.empty() ? "well formed" : why));
  o.check(format_grid_table(table_grid).find("MG-CFM") != std::string::npos, "grid table rendered");

  const double ws[] = {0.0, 0.3, 0.5, 0.7, 1.0, 2.0};
  const std::vector<SweepRow> sweep = w_sweep(ws, harness_setup());
  std::ostringstream sweep_csv;
  write_sweep_csv(sweep_csv, sweep);
  why.clear();
  o.check(well_formed(sweep_csv.str(), "w,sw2,misclass_rate,forward_count,final_loss,diverged", 6, why),
          "w sweep {0, 0.3, 0.5, 0.7, 1.0, 2.0}: " + (why.empty() ? "6 rows well formed" : why));
  for (const SweepRow& r : sweep)
    o.notes.push_back(fmt("     w %.1f: misclass %.4f  sw2 %.4f", r.w, r.metrics.misclass_rate(), r.metrics.sliced_w2) +
                      (r.diverged ? "  diverged" : ""));

  // A learning rate far past stability must be flagged in both harnesses, not thrown.
  ExperimentSetup bad = harness_setup();
  bad.train.total_steps = 50;
  bad.train.warmup_steps = 0;
  bad.train.peak_lr = 1e300;
  const double w_bad[] = {0.7};
  const std::vector<SweepRow> blown = w_sweep(w_bad, bad);
  const LossKind mg_only[] = {LossKind::MgCfm};
  const bool off[] = {false};
  const int nfe32[] = {32};
  const std::uint64_t seed0[] = {0};
  const GridResult blown_grid = run_grid(bad, mg_only, off, nfe32, seed0);
  std::ostringstream blown_csv;
  write_grid_csv(blown_csv, blown_grid);
  why.clear();
  const bool flagged = blown.size() == 1 && blown[0].diverged && blown_grid.rows.size() == 1 && blown_grid.rows[0].metrics.diverged &&
                       well_formed(blown_csv.str(), grid_header, 1, why) && blown_csv.str().find(",1\n") != std::string::npos;
  o.check(flagged, "forced divergence (peak_lr 1e300) flagged in sweep and grid rows" + (why.empty() ? "" : ": " + why));
  return o;
}

Outcome ablation() {
  Outcome o;
  ExperimentSetup s = harness_setup();
  s.train.loss_kind = LossKind::MgCfm;
  const std::vector<AblationRow> rows = sg_ablation(s);
  std::ostringstream csv;
  write_ablation_csv(csv, rows);
  std::string why;
  const bool paired = rows.size() == 2 && rows[0].stop_gradient && !rows[1].stop_gradient;
  o.check(paired && well_formed(csv.str(), "stop_gradient,sw2,misclass_rate,forward_count,final_loss,diverged", 2, why),
          "paired sg-on / sg-off report " + (why.empty() ? "well formed" : why));
  for (const AblationRow& r : rows)
    o.notes.push_back(std::string("     sg ") + (r.stop_gradient ? "on:  " : "off: ") +
                      fmt("misclass %.4f  sw2 %.4f  final loss %.4f", r.metrics.misclass_rate(), r.metrics.sliced_w2,
                          r.final_loss) +
                      (r.diverged ? "  diverged" : ""));
  return o;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

Outcome determinism() {
  Outcome o;
  ExperimentSetup s = harness_setup();
  s.train.total_steps = 400;
  s.train.warmup_steps = 20;
  s.train.loss_kind = LossKind::MgCfm;
  s.train.seed = 9;
  s.sampler.seed = 9;
  s.eval.seed = 9;
  const fs::path dir = fs::temp_directory_path() / "gffm_acceptance_determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);

  struct Run {
    std::string ckpt, samples, train_csv;
    MetricsReport metrics;
  };
  auto once = [&](int i) {
    const Dataset ds = make_dataset(s.dataset);
    const TrainResult r = train(s.train, s.arch, ds);
    const fs::path ck = dir / ("model_" + std::to_string(i) + ".gffm");
    save_checkpoint(r.model, ck);
    const VelocityModel loaded = load_checkpoint(ck, s.arch);
    std::vector<Condition> conds;
    for (int k = 0; k < 8; ++k)
      for (int j = 0; j < 16; ++j) conds.push_back(Condition{k, std::nullopt});
    const SampleResult smp = sample_batch(loaded, conds, s.sampler);
    std::ostringstream samples;
    write_samples_csv(samples, smp.x, conds);
    std::ostringstream tr;
    r.record.write_csv(tr);
    return Run{slurp(ck), samples.str(), tr.str(), evaluate_model(loaded, s.dataset.mixture, s.sampler, s.eval)};
  };
  const Run a = once(0);
  const Run b = once(1);
  fs::remove_all(dir);

  o.check(!a.ckpt.empty() && a.ckpt == b.ckpt, fmt("checkpoint bytes identical (%.0f bytes)", static_cast<double>(a.ckpt.size())));
  o.check(a.train_csv == b.train_csv, "training record identical");
  o.check(a.samples == b.samples, "sample CSV identical");
  bool same = a.metrics.sliced_w2 == b.metrics.sliced_w2 && a.metrics.fidelity == b.metrics.fidelity &&
              a.metrics.model_forward_count == b.metrics.model_forward_count &&
              a.metrics.per_condition.size() == b.metrics.per_condition.size();
  for (std::size_t k = 0; same && k < a.metrics.per_condition.size(); ++k)
    same = a.metrics.per_condition[k].sliced_w2 == b.metrics.per_condition[k].sliced_w2 &&
           a.metrics.per_condition[k].correct == b.metrics.per_condition[k].correct;
  o.check(same, "metric values identical (wall clock excluded)");

  ExperimentSetup multi = s;
  const LossKind v[] = {LossKind::Cfm, LossKind::MgCfm};
  const bool on_off[] = {false, true};
  const int nfe[] = {8};
  const std::uint64_t seeds[] = {9, 10};
  multi.workers = 1;
  std::ostringstream one, two;
  const GridResult g1 = run_grid(multi, v, on_off, nfe, seeds);
  multi.workers = 2;
  const GridResult g2 = run_grid(multi, v, on_off, nfe, seeds);
  bool grid_same = g1.rows.size() == g2.rows.size();
  for (std::size_t i = 0; grid_same && i < g1.rows.size(); ++i)
    grid_same = g1.rows[i].metrics.sliced_w2 == g2.rows[i].metrics.sliced_w2 &&
                g1.rows[i].metrics.fidelity == g2.rows[i].metrics.fidelity &&
                g1.rows[i].metrics.fingerprint == g2.rows[i].metrics.fingerprint;
  o.check(grid_same, "grid metrics identical with 1 and 2 workers");
  return o;
}

}  // namespace

int main() {
  run(1, "gradient correctness", gradient_correctness);
  run(2, "stop-gradient semantics", stop_gradient_semantics);
  run(3, "w = 0 degeneracy", degeneracy);
  run(4, "CFG identities", cfg_identities);
  run(5, "oracle sampling", oracle_sampling);
  run(6, "MG without CFG vs CFM with CFG at NFE 32", core_claim);
  run(7, "grid and w sweep harnesses", harnesses);
  run(8, "stop-gradient ablation harness", ablation);
  run(9, "determinism", determinism);
  std::printf("%d of 9 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
