#include "gffm/flow_train.hpp"

#include <cmath>
#include <deque>
#include <fstream>
#include <iomanip>
#include <limits>
#include <ostream>
#include <sstream>

#include "gffm/error.hpp"

namespace gffm {

const char* loss_kind_name(LossKind kind) { return kind == LossKind::Cfm ? "cfm" : "mg_cfm"; }

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error("train config: " + what); };
  if (!(p_uncond >= 0.0 && p_uncond <= 1.0)) fail("p_uncond must lie in [0,1]");
  if (!(p_prompt_drop >= 0.0 && p_prompt_drop <= 1.0)) fail("p_prompt_drop must lie in [0,1]");
  if (!(w >= 0.0)) fail("w must be non-negative");
  if (total_steps < 0 || warmup_steps < 0) fail("step counts must be non-negative");
  if (warmup_steps > total_steps) fail("warmup_steps must not exceed total_steps");
  if (!(peak_lr >= 0.0)) fail("peak_lr must be non-negative");
  if (!(grad_clip_norm > 0.0)) fail("grad_clip_norm must be positive");
  if (batch_size < 1) fail("batch_size must be at least 1");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0)) fail("AdamW betas must lie in [0,1)");
  if (!(adam.eps > 0.0) || !(adam.weight_decay >= 0.0)) fail("AdamW eps must be positive and weight_decay non-negative");
}

bool TrainRecord::any_diverged() const {
  for (const auto& s : steps)
    if (s.diverged) return true;
  return false;
}

void TrainRecord::write_csv(std::ostream& os) const {
  os << "step,loss,grad_norm,lr,diverged\n";
  os << std::setprecision(17);
  for (const auto& s : steps) {
    os << s.step << ',' << s.loss << ',' << s.grad_norm << ',' << s.lr << ',' << (s.diverged ? 1 : 0) << '\n';
  }
}

void TrainRecord::write_csv(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  write_csv(os);
}

PathSample sample_path(const Eigen::VectorXd& x1, const Eigen::VectorXd& z, double t) {
  if (x1.size() != z.size()) throw ShapeError("sample_path: data and noise dimensions differ");
  if (!(t >= 0.0 && t <= 1.0)) throw Error("sample_path: t must lie in [0,1]");
  return {(1.0 - t) * z + t * x1, x1 - z};
}

Condition dropout_condition(const Condition& cond, Rng& rng, double p_uncond, double p_prompt_drop) {
  if (!(p_uncond >= 0.0 && p_uncond <= 1.0 && p_prompt_drop >= 0.0 && p_prompt_drop <= 1.0)) {
    throw Error("dropout_condition: probabilities must lie in [0,1]");
  }
  const double drop_all = rng.uniform();
  const double drop_prompt = rng.uniform();
  if (drop_all < p_uncond) return Condition::null();
  Condition out = cond;
  if (drop_prompt < p_prompt_drop) out.prompt.reset();
  return out;
}

LossBatch draw_loss_batch(std::span<const DataItem> items, Rng& rng, double p_uncond, double p_prompt_drop) {
  if (items.empty()) throw Error("loss: empty batch");
  const auto B = static_cast<Eigen::Index>(items.size());
  const Eigen::Index D = items.front().x1.size();
  LossBatch batch;
  batch.x_t.resize(D, B);
  batch.target.resize(D, B);
  batch.t.resize(B);
  batch.conds.reserve(items.size());
  for (Eigen::Index j = 0; j < B; ++j) {
    const DataItem& item = items[static_cast<std::size_t>(j)];
    if (item.x1.size() != D) throw ShapeError("loss: batch items have different dimensions");
    const double t = rng.uniform();
    const Eigen::VectorXd z = rng.normal_vector(D);
    PathSample p = sample_path(item.x1, z, t);
    batch.t(j) = t;
    batch.x_t.col(j) = p.x_t;
    batch.target.col(j) = p.u_target;
    batch.conds.push_back(dropout_condition(item.cond, rng, p_uncond, p_prompt_drop));
  }
  return batch;
}

ad::Var assemble_cfm_loss(ad::Tape& tape, const ad::Var& v_pred, const Eigen::MatrixXd& target) {
  const ad::Var residual = v_pred - tape.leaf(target);
  return ad::scale(ad::sq_l2(residual), 1.0 / static_cast<double>(target.cols()));
}

ad::Var assemble_mg_loss(ad::Tape& tape, const ad::Var& v_cond, const ad::Var& v_uncond, const Eigen::MatrixXd& target,
                         double w, bool use_stop_gradient) {
  ad::Var delta = v_cond - v_uncond;
  if (use_stop_gradient) delta = ad::stop_gradient(delta);
  const ad::Var residual = v_cond + w * delta - tape.leaf(target);
  return ad::scale(ad::sq_l2(residual), 1.0 / static_cast<double>(target.cols()));
}

ad::Var cfm_loss(ad::Tape& tape, const ModelVars& vars, const ModelArch& arch, const LossBatch& batch) {
  const ad::Var v = velocity_forward(tape, vars, arch, batch.x_t, batch.t, batch.conds);
  return assemble_cfm_loss(tape, v, batch.target);
}

ad::Var mg_cfm_loss(ad::Tape& tape, const ModelVars& vars, const ModelArch& arch, const LossBatch& batch, double w,
                    bool use_stop_gradient) {
  if (!(w >= 0.0)) throw Error("mg_cfm_loss: w must be non-negative");
  const ad::Var v_cond = velocity_forward(tape, vars, arch, batch.x_t, batch.t, batch.conds);
  const std::vector<Condition> null_conds(batch.conds.size(), Condition::null());
  const ad::Var v_uncond = velocity_forward(tape, vars, arch, batch.x_t, batch.t, null_conds);
  return assemble_mg_loss(tape, v_cond, v_uncond, batch.target, w, use_stop_gradient);
}

ad::Var cfm_loss(ad::Tape& tape, const ModelVars& vars, const ModelArch& arch, std::span<const DataItem> items,
                 const TrainConfig& cfg, Rng& rng) {
  return cfm_loss(tape, vars, arch, draw_loss_batch(items, rng, cfg.p_uncond, cfg.p_prompt_drop));
}

ad::Var mg_cfm_loss(ad::Tape& tape, const ModelVars& vars, const ModelArch& arch, std::span<const DataItem> items,
                    const TrainConfig& cfg, Rng& rng) {
  return mg_cfm_loss(tape, vars, arch, draw_loss_batch(items, rng, cfg.p_uncond, cfg.p_prompt_drop), cfg.w,
                     cfg.use_stop_gradient);
}

double lr_schedule(long step, const TrainConfig& cfg) {
  const long warmup = cfg.warmup_steps;
  const long total = cfg.total_steps;
  if (step < 0 || step > total) throw Error("lr_schedule: step " + std::to_string(step) + " outside [0, total_steps]");
  if (step < warmup) return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
  if (total == warmup) return cfg.peak_lr;
  return cfg.peak_lr * static_cast<double>(total - step) / static_cast<double>(total - warmup);
}

double clip_grad_norm(std::vector<Eigen::MatrixXd>& grads, double max_norm) {
  if (!(max_norm > 0.0)) throw Error("clip_grad_norm: max_norm must be positive");
  double sq = 0.0;
  for (const auto& g : grads) sq += g.squaredNorm();
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("clip_grad_norm: non-finite gradient");
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& g : grads) g *= s;
  }
  return norm;
}

AdamWState AdamWState::zeros_like(const std::vector<Eigen::MatrixXd>& params) {
  AdamWState s;
  for (const auto& p : params) {
    s.m.push_back(Eigen::MatrixXd::Zero(p.rows(), p.cols()));
    s.v.push_back(Eigen::MatrixXd::Zero(p.rows(), p.cols()));
  }
  return s;
}

void adamw_step(std::vector<Eigen::MatrixXd>& params, const std::vector<Eigen::MatrixXd>& grads, AdamWState& state,
                double lr, const AdamWConfig& cfg) {
  if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeError("adamw_step: parameter, gradient and state counts differ");
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    const auto& g = grads[i];
    if (g.rows() != p.rows() || g.cols() != p.cols()) {
      throw ShapeError("adamw_step: gradient " + ad::shape_string(g) + " vs parameter " + ad::shape_string(p));
    }
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g.cwiseAbs2();
    if (cfg.weight_decay != 0.0) p *= (1.0 - lr * cfg.weight_decay);
    p.array() -= lr * (state.m[i].array() / bc1) / ((state.v[i].array() / bc2).sqrt() + cfg.eps);
  }
}

TrainResult train(const TrainConfig& cfg, const ModelArch& arch, const Dataset& dataset, const StepCallback& on_step) {
  cfg.validate();
  TrainResult result{init_params(mix_seed(cfg.seed, 0), arch), {}};
  if (cfg.total_steps == 0) return result;
  if (dataset.empty()) throw Error("train: empty dataset");

  Rng rng(mix_seed(cfg.seed, 1));
  auto& params = result.model.params();
  AdamWState opt = AdamWState::zeros_like(params);
  std::vector<DataItem> batch_items(static_cast<std::size_t>(cfg.batch_size));
  std::deque<double> window;
  double window_sum = 0.0;
  long last_finite = -1;
  constexpr std::size_t kWindow = 100;
  constexpr double kSpikeFactor = 10.0;

  for (long step = 0; step < cfg.total_steps; ++step) {
    for (auto& item : batch_items) item = dataset[static_cast<std::size_t>(rng.below(dataset.size()))];

    ad::Tape tape;
    const ModelVars vars = bind(tape, result.model);
    const ad::Var loss = cfg.loss_kind == LossKind::Cfm ? cfm_loss(tape, vars, arch, batch_items, cfg, rng)
                                                        : mg_cfm_loss(tape, vars, arch, batch_items, cfg, rng);
    StepRecord rec;
    rec.step = step;
    rec.loss = loss.scalar();
    rec.lr = lr_schedule(step + 1, cfg);

    auto diverge = [&](const std::string& why) {
      rec.diverged = true;
      result.record.steps.push_back(rec);
      std::ostringstream os;
      os << "training diverged at step " << step << " (" << why << "); last finite step " << last_finite;
      throw TrainDivergedError(last_finite, os.str(), result.record);
    };
    if (!std::isfinite(rec.loss)) diverge("non-finite loss");

    const ad::GradientMap grads = tape.backward(loss);
    std::vector<Eigen::MatrixXd> g;
    g.reserve(params.size());
    for (const auto& v : vars.params) g.push_back(grads.at(v.id()));
    try {
      rec.grad_norm = clip_grad_norm(g, cfg.grad_clip_norm);
    } catch (const NumericError&) {
      rec.grad_norm = std::numeric_limits<double>::quiet_NaN();
      diverge("non-finite gradient");
    }
    adamw_step(params, g, opt, rec.lr, cfg.adam);

    if (window.size() == kWindow && rec.loss > kSpikeFactor * (window_sum / kWindow)) rec.diverged = true;
    window.push_back(rec.loss);
    window_sum += rec.loss;
    if (window.size() > kWindow) {
      window_sum -= window.front();
      window.pop_front();
    }
    last_finite = step;
    result.record.steps.push_back(rec);
    if (on_step) on_step(rec);
  }
  return result;
}

}  // namespace gffm
