#include "gffm/velocity_model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include "gffm/error.hpp"
#include "gffm/random.hpp"

namespace gffm {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

bool Condition::operator==(const Condition& other) const {
  if (label != other.label) return false;
  if (prompt.has_value() != other.prompt.has_value()) return false;
  if (!prompt) return true;
  return prompt->size() == other.prompt->size() && *prompt == *other.prompt;
}

void ModelArch::validate() const {
  if (data_dim < 1 || num_classes < 1 || hidden < 1 || depth < 1 || prompt_dim < 0 || time_dim < 2 ||
      time_dim % 2 != 0) {
    std::ostringstream os;
    os << "invalid model architecture: D=" << data_dim << " K=" << num_classes << " H=" << hidden
       << " L=" << depth << " prompt_dim=" << prompt_dim << " time_dim=" << time_dim;
    throw Error(os.str());
  }
}

Eigen::VectorXd time_embed(double t, int dim) {
  if (dim < 2 || dim % 2 != 0) throw Error("time_embed: dim must be a positive even integer, got " + std::to_string(dim));
  const int half = dim / 2;
  Eigen::VectorXd e(dim);
  for (int i = 0; i < half; ++i) {
    const double f = half == 1 ? 1.0 : std::pow(10.0, static_cast<double>(i) / (half - 1));
    const double angle = 2.0 * std::numbers::pi * f * t;
    e(i) = std::sin(angle);
    e(half + i) = std::cos(angle);
  }
  return e;
}

VelocityModel::VelocityModel(const ModelArch& arch) : arch_(arch) {
  arch_.validate();
  const int T = arch_.time_dim;
  params_.emplace_back(Eigen::MatrixXd::Zero(T, arch_.num_classes + 1));
  params_.emplace_back(Eigen::MatrixXd::Zero(T, 1));
  params_.emplace_back(Eigen::MatrixXd::Zero(T, arch_.prompt_dim));
  params_.emplace_back(Eigen::MatrixXd::Zero(T, 1));
  int fan_in = arch_.input_dim();
  for (int l = 0; l < arch_.depth; ++l) {
    params_.emplace_back(Eigen::MatrixXd::Zero(arch_.hidden, fan_in));
    params_.emplace_back(Eigen::MatrixXd::Zero(arch_.hidden, 1));
    fan_in = arch_.hidden;
  }
  params_.emplace_back(Eigen::MatrixXd::Zero(arch_.data_dim, fan_in));
  params_.emplace_back(Eigen::MatrixXd::Zero(arch_.data_dim, 1));
}

std::size_t VelocityModel::num_scalars() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.size());
  return n;
}

bool VelocityModel::operator==(const VelocityModel& other) const {
  if (arch_ != other.arch_ || params_.size() != other.params_.size()) return false;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& a = params_[i];
    const auto& b = other.params_[i];
    if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
    if (a.size() > 0 && std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) != 0) return false;
  }
  return true;
}

VelocityModel init_params(std::uint64_t seed, const ModelArch& arch) {
  VelocityModel model(arch);
  Rng rng(seed);
  auto& p = model.params();
  p[VelocityModel::kClassTable] = rng.normal_matrix(arch.time_dim, arch.num_classes + 1);
  p[VelocityModel::kNullPrompt] = rng.normal_matrix(arch.time_dim, 1);
  if (arch.prompt_dim > 0) {
    p[VelocityModel::kPromptWeight] =
        rng.normal_matrix(arch.time_dim, arch.prompt_dim) / std::sqrt(static_cast<double>(arch.prompt_dim));
  }
  for (int l = 0; l < arch.depth; ++l) {
    auto& w = p[VelocityModel::kFirstLayer + 2 * l];
    w = rng.normal_matrix(w.rows(), w.cols()) / std::sqrt(static_cast<double>(w.cols()));
  }
  return model;
}

namespace {

// Per-batch constant inputs shared by both forward paths.
struct BatchInputs {
  Eigen::MatrixXd time_features;
  Eigen::MatrixXd prompts;
  std::vector<Eigen::Index> class_index;
  std::vector<bool> prompt_present;
};

BatchInputs prepare_inputs(const ModelArch& arch, const Eigen::MatrixXd& x, const Eigen::VectorXd& t,
                           std::span<const Condition> conds) {
  const Eigen::Index B = x.cols();
  if (x.rows() != arch.data_dim) {
    throw ShapeError("velocity_forward: state has " + std::to_string(x.rows()) + " rows, model expects " +
                     std::to_string(arch.data_dim));
  }
  if (t.size() != B || static_cast<Eigen::Index>(conds.size()) != B) {
    throw ShapeError("velocity_forward: batch of " + std::to_string(B) + " states with " +
                     std::to_string(t.size()) + " times and " + std::to_string(conds.size()) + " conditions");
  }
  if (!x.allFinite()) throw NumericError("velocity_forward: non-finite state");

  BatchInputs in;
  in.time_features.resize(arch.time_dim, B);
  in.prompts = Eigen::MatrixXd::Zero(arch.prompt_dim, B);
  in.class_index.resize(static_cast<std::size_t>(B));
  in.prompt_present.resize(static_cast<std::size_t>(B));
  for (Eigen::Index j = 0; j < B; ++j) {
    const double tj = t(j);
    if (!(tj >= 0.0 && tj <= 1.0)) throw NumericError("velocity_forward: time " + std::to_string(tj) + " outside [0,1]");
    in.time_features.col(j) = time_embed(tj, arch.time_dim);
    const Condition& c = conds[static_cast<std::size_t>(j)];
    if (c.label) {
      if (*c.label < 0 || *c.label >= arch.num_classes) {
        throw Error("velocity_forward: label " + std::to_string(*c.label) + " outside [0," +
                    std::to_string(arch.num_classes) + ")");
      }
      in.class_index[static_cast<std::size_t>(j)] = *c.label;
    } else {
      in.class_index[static_cast<std::size_t>(j)] = arch.num_classes;
    }
    if (c.prompt) {
      if (c.prompt->size() != arch.prompt_dim) {
        throw ShapeError("velocity_forward: prompt of length " + std::to_string(c.prompt->size()) +
                         ", model expects " + std::to_string(arch.prompt_dim));
      }
      if (!c.prompt->allFinite()) throw NumericError("velocity_forward: non-finite prompt");
      in.prompts.col(j) = *c.prompt;
      in.prompt_present[static_cast<std::size_t>(j)] = true;
    }
  }
  return in;
}

double gelu_scalar(double x) { return x * (0.5 * std::erfc(-x / std::numbers::sqrt2)); }

}  // namespace

Eigen::MatrixXd VelocityModel::forward(const Eigen::MatrixXd& x, const Eigen::VectorXd& t,
                                       std::span<const Condition> conds) const {
  const BatchInputs in = prepare_inputs(arch_, x, t, conds);
  const Eigen::Index B = x.cols();
  const int T = arch_.time_dim;

  Eigen::MatrixXd h(arch_.input_dim(), B);
  h.topRows(arch_.data_dim) = x;
  h.middleRows(arch_.data_dim, T) = in.time_features;
  Eigen::MatrixXd prompt_emb = params_[kPromptWeight] * in.prompts;
  prompt_emb = prompt_emb.colwise() + params_[kPromptBias].col(0);
  for (Eigen::Index j = 0; j < B; ++j) {
    const auto s = static_cast<std::size_t>(j);
    h.block(arch_.data_dim + T, j, T, 1) = params_[kClassTable].col(in.class_index[s]);
    h.block(arch_.data_dim + 2 * T, j, T, 1) =
        in.prompt_present[s] ? Eigen::VectorXd(prompt_emb.col(j)) : Eigen::VectorXd(params_[kNullPrompt].col(0));
  }

  for (int l = 0; l < num_layers(); ++l) {
    Eigen::MatrixXd z = layer_weight(l) * h;
    z = z.colwise() + layer_bias(l).col(0);
    if (l + 1 < num_layers()) z = z.unaryExpr(&gelu_scalar);
    h = std::move(z);
  }
  return h;
}

Eigen::VectorXd VelocityModel::forward(const Eigen::VectorXd& x, double t, const Condition& cond) const {
  const Eigen::VectorXd tv = Eigen::VectorXd::Constant(1, t);
  return forward(Eigen::MatrixXd(x), tv, std::span<const Condition>(&cond, 1)).col(0);
}

ModelVars bind(ad::Tape& tape, const VelocityModel& model) {
  ModelVars vars;
  vars.params.reserve(model.params().size());
  for (const auto& p : model.params()) vars.params.push_back(tape.leaf(p));
  return vars;
}

ad::Var velocity_forward(ad::Tape& tape, const ModelVars& vars, const ModelArch& arch, const Eigen::MatrixXd& x,
                         const Eigen::VectorXd& t, std::span<const Condition> conds) {
  BatchInputs in = prepare_inputs(arch, x, t, conds);
  const auto& p = vars.params;
  using S = VelocityModel::Slot;

  const ad::Var class_emb = ad::gather_cols(p[S::kClassTable], std::move(in.class_index));
  ad::Var prompt_emb = ad::add_bias(ad::matmul(p[S::kPromptWeight], tape.leaf(std::move(in.prompts))), p[S::kPromptBias]);
  const ad::Var null_prompt = ad::gather_cols(p[S::kNullPrompt], std::vector<Eigen::Index>(in.prompt_present.size(), 0));
  prompt_emb = ad::where_cols(std::move(in.prompt_present), prompt_emb, null_prompt);

  const ad::Var parts[] = {tape.leaf(x), tape.leaf(std::move(in.time_features)), class_emb, prompt_emb};
  ad::Var h = ad::concat_rows(parts);
  const int layers = arch.depth + 1;
  for (int l = 0; l < layers; ++l) {
    h = ad::add_bias(ad::matmul(p[S::kFirstLayer + 2 * l], h), p[S::kFirstLayer + 2 * l + 1]);
    if (l + 1 < layers) h = ad::gelu(h);
  }
  return h;
}

namespace {

constexpr char kMagic[4] = {'G', 'F', 'F', 'M'};

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
bool get(std::istream& is, T& v) {
  return static_cast<bool>(is.read(reinterpret_cast<char*>(&v), sizeof(T)));
}

[[noreturn]] void corrupt(const std::filesystem::path& path, const std::string& detail) {
  throw CheckpointError(CheckpointError::Kind::CorruptLength, "checkpoint " + path.string() + ": corrupt length (" + detail + ")");
}

}  // namespace

void save_checkpoint(const VelocityModel& model, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError(CheckpointError::Kind::Io, "cannot open " + path.string() + " for writing");
  os.write(kMagic, 4);
  put<std::uint32_t>(os, kCheckpointVersion);
  const ModelArch& a = model.arch();
  for (int v : {a.data_dim, a.num_classes, a.hidden, a.depth, a.prompt_dim, a.time_dim}) put<std::uint32_t>(os, static_cast<std::uint32_t>(v));
  std::uint64_t count = 0;
  for (const auto& p : model.params()) {
    os.write(reinterpret_cast<const char*>(p.data()), static_cast<std::streamsize>(sizeof(double) * p.size()));
    count += static_cast<std::uint64_t>(p.size());
  }
  put<std::uint64_t>(os, count);
  if (!os) throw CheckpointError(CheckpointError::Kind::Io, "write failed for " + path.string());
}

VelocityModel load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw CheckpointError(CheckpointError::Kind::NotFound, "checkpoint not found: " + path.string());
  }
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError(CheckpointError::Kind::Io, "cannot open " + path.string());

  char magic[4];
  if (!is.read(magic, 4)) corrupt(path, "missing header");
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw CheckpointError(CheckpointError::Kind::BadMagic, "checkpoint " + path.string() + ": bad magic bytes");
  }
  std::uint32_t version = 0;
  if (!get(is, version)) corrupt(path, "missing version");
  if (version != kCheckpointVersion) {
    throw CheckpointError(CheckpointError::Kind::Version, "checkpoint " + path.string() + ": format version " +
                                                              std::to_string(version) + ", expected " +
                                                              std::to_string(kCheckpointVersion));
  }
  std::uint32_t fields[6];
  for (auto& f : fields)
    if (!get(is, f)) corrupt(path, "truncated architecture header");
  ModelArch arch{static_cast<int>(fields[0]), static_cast<int>(fields[1]), static_cast<int>(fields[2]),
                 static_cast<int>(fields[3]), static_cast<int>(fields[4]), static_cast<int>(fields[5])};
  try {
    arch.validate();
  } catch (const Error& e) {
    corrupt(path, e.what());
  }

  VelocityModel model(arch);
  const std::uint64_t expected = model.num_scalars();
  const auto header_bytes = static_cast<std::uintmax_t>(4 + 4 + 6 * 4);
  const std::uintmax_t want = header_bytes + expected * sizeof(double) + sizeof(std::uint64_t);
  const std::uintmax_t have = std::filesystem::file_size(path);
  if (have != want) corrupt(path, std::to_string(have) + " bytes, expected " + std::to_string(want));

  for (auto& p : model.params()) {
    if (!is.read(reinterpret_cast<char*>(p.data()), static_cast<std::streamsize>(sizeof(double) * p.size()))) {
      corrupt(path, "truncated payload");
    }
  }
  std::uint64_t count = 0;
  if (!get(is, count)) corrupt(path, "missing trailer");
  if (count != expected) corrupt(path, "trailer counts " + std::to_string(count) + " floats, expected " + std::to_string(expected));
  return model;
}

VelocityModel load_checkpoint(const std::filesystem::path& path, const ModelArch& expected) {
  VelocityModel model = load_checkpoint(path);
  if (model.arch() != expected) {
    const ModelArch& a = model.arch();
    std::ostringstream os;
    os << "checkpoint " << path.string() << ": architecture mismatch (file D=" << a.data_dim << " K=" << a.num_classes
       << " H=" << a.hidden << " L=" << a.depth << " prompt_dim=" << a.prompt_dim << " time_dim=" << a.time_dim
       << "; expected D=" << expected.data_dim << " K=" << expected.num_classes << " H=" << expected.hidden
       << " L=" << expected.depth << " prompt_dim=" << expected.prompt_dim << " time_dim=" << expected.time_dim << ")";
    throw CheckpointError(CheckpointError::Kind::ArchMismatch, os.str());
  }
  return model;
}

}  // namespace gffm
