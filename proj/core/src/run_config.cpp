#include "gffm/run_config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <cstdio>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <sstream>

#include "gffm/error.hpp"
#include "gffm/random.hpp"

namespace gffm {

namespace {

// Thrown by value parsers; parse_config adds the location.
struct BadValue {
  std::string message;
};

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(trim(cur));
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

long long to_int(const std::string& v) {
  long long out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw BadValue{"expected an integer, got '" + v + "'"};
  return out;
}

std::uint64_t to_u64(const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw BadValue{"expected a non-negative integer, got '" + v + "'"};
  return out;
}

double to_double(const std::string& v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out)) throw BadValue{"expected a finite number, got '" + v + "'"};
  return out;
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw BadValue{"expected true/false, got '" + v + "'"};
}

int int_at_least(const std::string& v, long long lo) {
  const long long x = to_int(v);
  if (x < lo || x > 1'000'000'000) throw BadValue{"value " + v + " out of range [" + std::to_string(lo) + ", 1e9]"};
  return static_cast<int>(x);
}

double double_in(const std::string& v, double lo, double hi) {
  const double x = to_double(v);
  if (x < lo || x > hi) {
    std::ostringstream os;
    os << "value " << v << " out of range [" << lo << ", " << hi << "]";
    throw BadValue{os.str()};
  }
  return x;
}

double positive(const std::string& v) {
  const double x = to_double(v);
  if (!(x > 0.0)) throw BadValue{"value " + v + " must be positive"};
  return x;
}

std::vector<double> double_list(const std::string& v) {
  std::vector<double> out;
  if (trim(v).empty()) return out;
  for (const auto& part : split(v, ',')) out.push_back(to_double(part));
  return out;
}

std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  // Prefer the shortest representation that round-trips.
  for (int prec = 1; prec < 17; ++prec) {
    char shorter[32];
    std::snprintf(shorter, sizeof shorter, "%.*g", prec, x);
    if (std::strtod(shorter, nullptr) == x) return shorter;
  }
  return buf;
}

std::string fmt_list(const std::vector<double>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + fmt(xs[i]);
  return s;
}

struct KeyDef {
  std::string section;
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

const std::vector<KeyDef>& key_table() {
  static const std::vector<KeyDef> keys = {
      {"run", "seed", [](RunConfig& c, const std::string& v) { set_seed(c, to_u64(v)); },
       [](const RunConfig& c) { return std::to_string(c.seed); }},
      {"run", "out", [](RunConfig& c, const std::string& v) { c.out_dir = v; }, [](const RunConfig& c) { return c.out_dir; }},

      {"dataset", "kind",
       [](RunConfig& c, const std::string& v) {
         if (v == "mixture") {
           c.dataset_kind = DatasetKind::Mixture;
         } else if (v == "infill") {
           c.dataset_kind = DatasetKind::Infill;
         } else {
           throw BadValue{"expected mixture or infill, got '" + v + "'"};
         }
       },
       [](const RunConfig& c) { return std::string(c.dataset_kind == DatasetKind::Infill ? "infill" : "mixture"); }},
      {"dataset", "n_items", [](RunConfig& c, const std::string& v) { c.n_items = int_at_least(v, 0); },
       [](const RunConfig& c) { return std::to_string(c.n_items); }},
      {"dataset", "mask_lo", [](RunConfig& c, const std::string& v) { c.mask_lo = double_in(v, 0.0, 1.0); },
       [](const RunConfig& c) { return fmt(c.mask_lo); }},
      {"dataset", "mask_hi", [](RunConfig& c, const std::string& v) { c.mask_hi = double_in(v, 0.0, 1.0); },
       [](const RunConfig& c) { return fmt(c.mask_hi); }},
      {"dataset", "components", [](RunConfig& c, const std::string& v) { c.mixture.components = int_at_least(v, 1); },
       [](const RunConfig& c) { return std::to_string(c.mixture.components); }},
      {"dataset", "dim", [](RunConfig& c, const std::string& v) { c.mixture.dim = int_at_least(v, 1); },
       [](const RunConfig& c) { return std::to_string(c.mixture.dim); }},
      {"dataset", "radius", [](RunConfig& c, const std::string& v) { c.mixture.radius = to_double(v); },
       [](const RunConfig& c) { return fmt(c.mixture.radius); }},
      {"dataset", "variance", [](RunConfig& c, const std::string& v) { c.mixture.variance = positive(v); },
       [](const RunConfig& c) { return fmt(c.mixture.variance); }},
      {"dataset", "weights", [](RunConfig& c, const std::string& v) { c.mixture.weights = double_list(v); },
       [](const RunConfig& c) { return fmt_list(c.mixture.weights); }},
      {"dataset", "variances", [](RunConfig& c, const std::string& v) { c.mixture.variances = double_list(v); },
       [](const RunConfig& c) { return fmt_list(c.mixture.variances); }},
      {"dataset", "means",
       [](RunConfig& c, const std::string& v) {
         c.mixture.means.clear();
         if (trim(v).empty()) return;
         for (const auto& vec : split(v, ';')) c.mixture.means.push_back(double_list(vec));
       },
       [](const RunConfig& c) {
         std::string s;
         for (std::size_t i = 0; i < c.mixture.means.size(); ++i) s += (i ? "; " : "") + fmt_list(c.mixture.means[i]);
         return s;
       }},

      {"model", "hidden", [](RunConfig& c, const std::string& v) { c.model.hidden = int_at_least(v, 1); },
       [](const RunConfig& c) { return std::to_string(c.model.hidden); }},
      {"model", "depth", [](RunConfig& c, const std::string& v) { c.model.depth = int_at_least(v, 1); },
       [](const RunConfig& c) { return std::to_string(c.model.depth); }},
      {"model", "time_dim",
       [](RunConfig& c, const std::string& v) {
         const int d = int_at_least(v, 2);
         if (d % 2 != 0) throw BadValue{"time_dim must be even, got " + v};
         c.model.time_dim = d;
       },
       [](const RunConfig& c) { return std::to_string(c.model.time_dim); }},

      {"train", "loss",
       [](RunConfig& c, const std::string& v) {
         if (v == "cfm") {
           c.train.loss_kind = LossKind::Cfm;
         } else if (v == "mg_cfm") {
           c.train.loss_kind = LossKind::MgCfm;
         } else {
           throw BadValue{"expected cfm or mg_cfm, got '" + v + "'"};
         }
       },
       [](const RunConfig& c) { return std::string(loss_kind_name(c.train.loss_kind)); }},
      {"train", "w",
       [](RunConfig& c, const std::string& v) {
         c.train.w = to_double(v);
         if (c.train.w < 0.0) throw BadValue{"value " + v + " must be non-negative"};
       },
       [](const RunConfig& c) { return fmt(c.train.w); }},
      {"train", "p_uncond", [](RunConfig& c, const std::string& v) { c.train.p_uncond = double_in(v, 0.0, 1.0); },
       [](const RunConfig& c) { return fmt(c.train.p_uncond); }},
      {"train", "p_prompt_drop", [](RunConfig& c, const std::string& v) { c.train.p_prompt_drop = double_in(v, 0.0, 1.0); },
       [](const RunConfig& c) { return fmt(c.train.p_prompt_drop); }},
      {"train", "stop_gradient", [](RunConfig& c, const std::string& v) { c.train.use_stop_gradient = to_bool(v); },
       [](const RunConfig& c) { return std::string(c.train.use_stop_gradient ? "true" : "false"); }},
      {"train", "peak_lr",
       [](RunConfig& c, const std::string& v) {
         c.train.peak_lr = to_double(v);
         if (c.train.peak_lr < 0.0) throw BadValue{"value " + v + " must be non-negative"};
       },
       [](const RunConfig& c) { return fmt(c.train.peak_lr); }},
      {"train", "total_steps", [](RunConfig& c, const std::string& v) { c.train.total_steps = int_at_least(v, 0); },
       [](const RunConfig& c) { return std::to_string(c.train.total_steps); }},
      {"train", "warmup_steps", [](RunConfig& c, const std::string& v) { c.train.warmup_steps = int_at_least(v, 0); },
       [](const RunConfig& c) { return std::to_string(c.train.warmup_steps); }},
      {"train", "grad_clip", [](RunConfig& c, const std::string& v) { c.train.grad_clip_norm = positive(v); },
       [](const RunConfig& c) { return fmt(c.train.grad_clip_norm); }},
      {"train", "batch_size", [](RunConfig& c, const std::string& v) { c.train.batch_size = int_at_least(v, 1); },
       [](const RunConfig& c) { return std::to_string(c.train.batch_size); }},
      {"train", "beta1", [](RunConfig& c, const std::string& v) { c.train.adam.beta1 = double_in(v, 0.0, 0.999999999); },
       [](const RunConfig& c) { return fmt(c.train.adam.beta1); }},
      {"train", "beta2", [](RunConfig& c, const std::string& v) { c.train.adam.beta2 = double_in(v, 0.0, 0.999999999); },
       [](const RunConfig& c) { return fmt(c.train.adam.beta2); }},
      {"train", "adam_eps", [](RunConfig& c, const std::string& v) { c.train.adam.eps = positive(v); },
       [](const RunConfig& c) { return fmt(c.train.adam.eps); }},
      {"train", "weight_decay",
       [](RunConfig& c, const std::string& v) {
         c.train.adam.weight_decay = to_double(v);
         if (c.train.adam.weight_decay < 0.0) throw BadValue{"value " + v + " must be non-negative"};
       },
       [](const RunConfig& c) { return fmt(c.train.adam.weight_decay); }},

      {"sampler", "nfe", [](RunConfig& c, const std::string& v) { c.sampler.nfe = int_at_least(v, 1); },
       [](const RunConfig& c) { return std::to_string(c.sampler.nfe); }},
      {"sampler", "cfg", [](RunConfig& c, const std::string& v) { c.sampler.cfg_enabled = to_bool(v); },
       [](const RunConfig& c) { return std::string(c.sampler.cfg_enabled ? "true" : "false"); }},
      {"sampler", "guidance_scale",
       [](RunConfig& c, const std::string& v) {
         c.sampler.guidance_scale = to_double(v);
         if (c.sampler.guidance_scale < 0.0) throw BadValue{"value " + v + " must be non-negative"};
       },
       [](const RunConfig& c) { return fmt(c.sampler.guidance_scale); }},
      {"sampler", "schedule",
       [](RunConfig& c, const std::string& v) {
         if (v == "uniform") {
           c.sampler.schedule = ScheduleKind::Uniform;
         } else if (v == "sway") {
           c.sampler.schedule = ScheduleKind::Sway;
         } else {
           throw BadValue{"expected uniform or sway, got '" + v + "'"};
         }
       },
       [](const RunConfig& c) { return std::string(c.sampler.schedule == ScheduleKind::Sway ? "sway" : "uniform"); }},
      {"sampler", "sway_s", [](RunConfig& c, const std::string& v) { c.sampler.sway_s = double_in(v, kSwayMin, kSwayMax); },
       [](const RunConfig& c) { return fmt(c.sampler.sway_s); }},

      {"eval", "samples_per_class", [](RunConfig& c, const std::string& v) { c.eval.samples_per_class = int_at_least(v, 1); },
       [](const RunConfig& c) { return std::to_string(c.eval.samples_per_class); }},
      {"eval", "n_proj", [](RunConfig& c, const std::string& v) { c.eval.n_proj = int_at_least(v, 1); },
       [](const RunConfig& c) { return std::to_string(c.eval.n_proj); }},
      {"eval", "seeds", [](RunConfig& c, const std::string& v) { c.eval.seeds = int_at_least(v, 1); },
       [](const RunConfig& c) { return std::to_string(c.eval.seeds); }},
      {"eval", "workers", [](RunConfig& c, const std::string& v) { c.eval.workers = int_at_least(v, 1); },
       [](const RunConfig& c) { return std::to_string(c.eval.workers); }},
      {"eval", "nfe_list",
       [](RunConfig& c, const std::string& v) {
         c.eval.nfe_list.clear();
         for (const auto& part : split(v, ',')) c.eval.nfe_list.push_back(int_at_least(part, 1));
         if (c.eval.nfe_list.empty()) throw BadValue{"nfe_list must not be empty"};
       },
       [](const RunConfig& c) {
         std::string s;
         for (std::size_t i = 0; i < c.eval.nfe_list.size(); ++i) s += (i ? "," : "") + std::to_string(c.eval.nfe_list[i]);
         return s;
       }},
      {"eval", "w_list",
       [](RunConfig& c, const std::string& v) {
         c.eval.w_list = double_list(v);
         if (c.eval.w_list.empty()) throw BadValue{"w_list must not be empty"};
         for (double w : c.eval.w_list)
           if (w < 0.0) throw BadValue{"w values must be non-negative"};
       },
       [](const RunConfig& c) { return fmt_list(c.eval.w_list); }},
  };
  return keys;
}

[[noreturn]] void fail(const std::string& source, int line, const std::string& name, const std::string& msg) {
  std::ostringstream os;
  os << source;
  if (line > 0) os << ':' << line;
  os << ": " << name << ": " << msg;
  throw ConfigError(os.str());
}

}  // namespace

void set_seed(RunConfig& cfg, std::uint64_t seed) {
  cfg.seed = seed;
  cfg.train.seed = seed;
  cfg.sampler.seed = seed;
}

GaussianMixtureSpec RunConfig::mixture_spec() const {
  const MixtureSection& m = mixture;
  GaussianMixtureSpec spec = GaussianMixtureSpec::ring(m.components, m.dim, m.radius, m.variance);
  if (!m.means.empty()) {
    for (std::size_t k = 0; k < m.means.size(); ++k) {
      spec.means[k] = Eigen::Map<const Eigen::VectorXd>(m.means[k].data(), static_cast<Eigen::Index>(m.means[k].size()));
    }
  }
  if (!m.weights.empty()) spec.weights = m.weights;
  if (!m.variances.empty()) spec.variances = m.variances;
  return spec;
}

DatasetSpec RunConfig::dataset_spec() const {
  DatasetSpec d;
  d.kind = dataset_kind;
  d.mixture = mixture_spec();
  d.n_items = n_items;
  d.mask_lo = mask_lo;
  d.mask_hi = mask_hi;
  d.seed = mix_seed(seed, 0xDA7A);
  return d;
}

ModelArch RunConfig::arch() const {
  ModelArch a;
  a.data_dim = mixture.dim;
  a.num_classes = mixture.components;
  a.hidden = model.hidden;
  a.depth = model.depth;
  a.prompt_dim = dataset_kind == DatasetKind::Infill ? 2 * mixture.dim : 0;
  a.time_dim = model.time_dim;
  return a;
}

ExperimentSetup RunConfig::setup() const {
  ExperimentSetup s;
  s.dataset = dataset_spec();
  s.arch = arch();
  s.train = train;
  s.sampler = sampler;
  s.eval.samples_per_class = eval.samples_per_class;
  s.eval.n_proj = eval.n_proj;
  s.eval.seed = seed;
  s.workers = eval.workers;
  return s;
}

std::vector<std::uint64_t> RunConfig::seed_list() const {
  std::vector<std::uint64_t> s;
  for (int i = 0; i < eval.seeds; ++i) s.push_back(seed + static_cast<std::uint64_t>(i));
  return s;
}

RunConfig parse_config(std::istream& is, const std::string& source_name) {
  RunConfig cfg;
  std::map<std::string, int> seen;  // "section.key" -> line
  std::string section = "run";
  std::string raw;
  int line_no = 0;
  while (std::getline(is, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail(source_name, line_no, "syntax", "unterminated section header '" + line + "'");
      section = trim(line.substr(1, line.size() - 2));
      static const char* known[] = {"run", "dataset", "model", "train", "sampler", "eval"};
      if (std::find(std::begin(known), std::end(known), section) == std::end(known)) {
        fail(source_name, line_no, section, "unknown section");
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail(source_name, line_no, "syntax", "expected key = value, got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const std::string name = section + "." + key;
    const auto& table = key_table();
    const auto it = std::find_if(table.begin(), table.end(), [&](const KeyDef& k) { return k.section == section && k.key == key; });
    if (it == table.end()) fail(source_name, line_no, name, "unknown key");
    if (seen.count(name)) fail(source_name, line_no, name, "duplicate key (first set on line " + std::to_string(seen[name]) + ")");
    try {
      it->set(cfg, value);
    } catch (const BadValue& e) {
      fail(source_name, line_no, name, e.message);
    }
    seen[name] = line_no;
  }

  auto line_of = [&](const std::string& name) { return seen.count(name) ? seen[name] : 0; };
  if (!seen.count("train.warmup_steps")) cfg.train.warmup_steps = cfg.train.total_steps / 20;
  if (cfg.train.warmup_steps > cfg.train.total_steps) {
    fail(source_name, line_of("train.warmup_steps"), "train.warmup_steps", "must not exceed train.total_steps");
  }
  if (cfg.mask_lo > cfg.mask_hi) fail(source_name, line_of("dataset.mask_lo"), "dataset.mask_lo", "must not exceed dataset.mask_hi");
  if (cfg.dataset_kind == DatasetKind::Infill && cfg.mixture.dim < 2) {
    fail(source_name, line_of("dataset.dim"), "dataset.dim", "infill datasets need dim >= 2");
  }
  const auto K = static_cast<std::size_t>(cfg.mixture.components);
  if (!cfg.mixture.weights.empty()) {
    if (cfg.mixture.weights.size() != K) fail(source_name, line_of("dataset.weights"), "dataset.weights", "expected one weight per component");
    double total = 0.0;
    for (double w : cfg.mixture.weights) {
      if (!(w > 0.0)) fail(source_name, line_of("dataset.weights"), "dataset.weights", "weights must be positive");
      total += w;
    }
    if (std::abs(total - 1.0) > 1e-12) fail(source_name, line_of("dataset.weights"), "dataset.weights", "weights must sum to 1");
  }
  if (!cfg.mixture.variances.empty()) {
    if (cfg.mixture.variances.size() != K) fail(source_name, line_of("dataset.variances"), "dataset.variances", "expected one variance per component");
    for (double v : cfg.mixture.variances)
      if (!(v > 0.0)) fail(source_name, line_of("dataset.variances"), "dataset.variances", "variances must be positive");
  }
  if (!cfg.mixture.means.empty()) {
    if (cfg.mixture.means.size() != K) fail(source_name, line_of("dataset.means"), "dataset.means", "expected one mean per component");
    for (const auto& m : cfg.mixture.means)
      if (m.size() != static_cast<std::size_t>(cfg.mixture.dim)) fail(source_name, line_of("dataset.means"), "dataset.means", "each mean needs dataset.dim entries");
  }
  return cfg;
}

RunConfig parse_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config not found: " + path.string());
  return parse_config(is, path.string());
}

std::string serialize(const RunConfig& cfg) {
  std::ostringstream os;
  std::string section;
  for (const KeyDef& k : key_table()) {
    if (k.section != section) {
      if (!section.empty()) os << '\n';
      section = k.section;
      os << '[' << section << "]\n";
    }
    os << k.key << " = " << k.get(cfg) << '\n';
  }
  return os.str();
}

std::uint64_t fingerprint(const RunConfig& cfg) {
  RunConfig c = cfg;
  c.out_dir.clear();
  return fnv1a64(serialize(c));
}

std::string fingerprint_hex(const RunConfig& cfg) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fingerprint(cfg)));
  return buf;
}

}  // namespace gffm
