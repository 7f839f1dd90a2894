#include "diat/cli.hpp"

#include <Eigen/Core>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "diat/checkpoint.hpp"
#include "diat/ops.hpp"
#include "diat/selfcheck.hpp"

namespace diat::cli {

namespace fs = std::filesystem;
using pipeline::MissingPrerequisite;

// --- value parsing ---

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double to_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double d = std::strtod(v.c_str(), &end);
  if (v.empty() || *end != '\0' || !std::isfinite(d)) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return d;
}

std::int64_t to_int(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const long long i = std::strtoll(v.c_str(), &end, 10);
  if (v.empty() || *end != '\0') throw ConfigError(key + ": expected an integer, got '" + v + "'");
  return i;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  if (!v.empty() && v[0] == '-') throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  char* end = nullptr;
  const unsigned long long i = std::strtoull(v.c_str(), &end, 10);
  if (v.empty() || *end != '\0') throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return i;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::string_view verbosity_name(Verbosity v) {
  switch (v) {
    case Verbosity::quiet: return "quiet";
    case Verbosity::info: return "info";
    case Verbosity::debug: return "debug";
  }
  return "info";
}

struct Key {
  const char* name;
  const char* doc;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define DIAT_KEY_DOUBLE(NAME, FIELD, DOC)                                                 \
  Key {                                                                                   \
    NAME, DOC, [](const RunConfig& c) { return fmt_double(c.FIELD); },                    \
        [](RunConfig& c, const std::string& v) { c.FIELD = to_double(NAME, v); }          \
  }
#define DIAT_KEY_INT(NAME, FIELD, DOC)                                                    \
  Key {                                                                                   \
    NAME, DOC, [](const RunConfig& c) { return std::to_string(c.FIELD); },                \
        [](RunConfig& c, const std::string& v) { c.FIELD = static_cast<decltype(c.FIELD)>(to_int(NAME, v)); } \
  }
#define DIAT_KEY_U64(NAME, FIELD, DOC)                                                    \
  Key {                                                                                   \
    NAME, DOC, [](const RunConfig& c) { return std::to_string(c.FIELD); },                \
        [](RunConfig& c, const std::string& v) { c.FIELD = to_u64(NAME, v); }             \
  }
#define DIAT_KEY_BOOL(NAME, FIELD, DOC)                                                   \
  Key {                                                                                   \
    NAME, DOC, [](const RunConfig& c) { return std::string(c.FIELD ? "true" : "false"); }, \
        [](RunConfig& c, const std::string& v) { c.FIELD = to_bool(NAME, v); }            \
  }
#define DIAT_KEY_PATH(NAME, FIELD, DOC)                                                   \
  Key {                                                                                   \
    NAME, DOC, [](const RunConfig& c) { return c.FIELD.string(); },                       \
        [](RunConfig& c, const std::string& v) {                                          \
          if (v.empty()) throw ConfigError(std::string(NAME) + ": empty path");           \
          c.FIELD = v;                                                                    \
        }                                                                                 \
  }

// Registry order is the serialization order. `variant` comes first because
// it selects the defaults the remaining keys override.
const std::vector<Key>& keys() {
  static const std::vector<Key> k = {
      Key{"variant", "DIAT, DIAT-A, DIAT-A0, DIAT1, DIAT2 or DIAT3; sets loss weights, rates and enhancement",
          [](const RunConfig& c) { return std::string(pipeline::variant_name(c.train.variant)); },
          [](RunConfig& c, const std::string& v) {
            try {
              c.train.variant = pipeline::parse_variant(v);
            } catch (const std::invalid_argument& e) {
              throw ConfigError(std::string("variant: ") + e.what());
            }
          }},
      Key{"attribute", "target attribute; a leading '-' means removal (e.g. -glasses)",
          [](const RunConfig& c) { return c.train.attribute.str(); },
          [](RunConfig& c, const std::string& v) {
            try {
              c.train.attribute = data::AttributeTarget::parse(v);
            } catch (const std::invalid_argument& e) {
              throw ConfigError(std::string("attribute: ") + e.what());
            }
          }},
      Key{"enhance", "none, local, global or auto (local for glasses/mouth_open, else global)",
          [](const RunConfig& c) { return std::string(pipeline::enhance_name(c.train.enhance)); },
          [](RunConfig& c, const std::string& v) {
            try {
              c.train.enhance = pipeline::parse_enhance(v);
            } catch (const std::invalid_argument& e) {
              throw ConfigError(std::string("enhance: ") + e.what());
            }
          }},
      Key{"scale", "size relative to 128x128 and full channel widths (1/4 gives 32x32)",
          [](const RunConfig& c) { return c.train.scale.str(); },
          [](RunConfig& c, const std::string& v) {
            try {
              c.train.scale = nn::Scale::parse(v);
            } catch (const std::exception& e) {
              throw ConfigError(std::string("scale: ") + e.what());
            }
          }},
      DIAT_KEY_U64("seed", train.seed, "seed for network init, batches and subsampling"),
      DIAT_KEY_DOUBLE("lambda", train.loss.lambda, "identity loss weight"),
      DIAT_KEY_DOUBLE("gamma", train.loss.gamma, "smooth regularizer weight"),
      DIAT_KEY_BOOL("scale_gamma_with_resolution", train.scale_gamma_with_resolution,
                    "multiply gamma by (128/S)^2"),
      DIAT_KEY_DOUBLE("w4", train.loss.w4, "identity loss weight of embedder tap conv4"),
      DIAT_KEY_DOUBLE("w5", train.loss.w5, "identity loss weight of embedder tap conv5"),
      DIAT_KEY_DOUBLE("beta0", train.loss.beta[0], "local enhancement weight, tap conv1"),
      DIAT_KEY_DOUBLE("beta1", train.loss.beta[1], "local enhancement weight, tap conv2"),
      DIAT_KEY_DOUBLE("beta2", train.loss.beta[2], "local enhancement weight, tap conv3"),
      DIAT_KEY_DOUBLE("sigma", train.loss.sigma, "Gaussian blur width for global enhancement"),
      Key{"generator_loss", "non_saturating or saturating",
          [](const RunConfig& c) {
            return std::string(c.train.loss.generator_loss == loss::GeneratorLoss::saturating ? "saturating"
                                                                                              : "non_saturating");
          },
          [](RunConfig& c, const std::string& v) {
            if (v == "saturating") c.train.loss.generator_loss = loss::GeneratorLoss::saturating;
            else if (v == "non_saturating") c.train.loss.generator_loss = loss::GeneratorLoss::non_saturating;
            else throw ConfigError("generator_loss: expected saturating or non_saturating, got '" + v + "'");
          }},
      DIAT_KEY_DOUBLE("log_eps", train.loss.log_eps, "clamp for log arguments in adversarial losses"),
      DIAT_KEY_BOOL("adaptive_in_d_update", train.loss.adaptive_in_d_update,
                    "also minimize the adaptive identity term in D's update"),
      DIAT_KEY_DOUBLE("lr_t", train.lr_t, "transform learning rate during adversarial training"),
      DIAT_KEY_DOUBLE("lr_d", train.lr_d, "discriminator learning rate during adversarial training"),
      DIAT_KEY_INT("dstep", train.dstep, "discriminator updates per outer iteration"),
      DIAT_KEY_INT("tstep", train.tstep, "transform updates per outer iteration"),
      DIAT_KEY_INT("batch", train.batch, "batch size"),
      DIAT_KEY_INT("max_iters", train.max_iters, "maximum outer iterations"),
      DIAT_KEY_INT("plateau_window", train.plateau_window, "plateau detection window (iterations)"),
      DIAT_KEY_DOUBLE("plateau_min_delta", train.plateau_min_delta, "minimum score gain per window"),
      DIAT_KEY_DOUBLE("success_threshold", train.success_threshold, "attribute score threshold recorded in reports"),
      DIAT_KEY_INT("eval_every", train.eval_every, "iterations between attribute-score evaluations"),
      DIAT_KEY_INT("eval_size", train.eval_size, "held-out inputs scored during training"),
      DIAT_KEY_INT("checkpoint_every", train.checkpoint_every, "iterations between checkpoints"),
      DIAT_KEY_INT("input_limit", train.input_limit, "cap on the input set size (0 = all)"),
      DIAT_KEY_DOUBLE("lr_pretrain", train.lr_pretrain, "learning rate for pretraining and auxiliary networks"),
      DIAT_KEY_DOUBLE("lr_enhance", train.lr_enhance, "enhancer learning rate"),
      DIAT_KEY_INT("pretrain_t_steps", train.pretrain_t_steps, "autoencoder pretraining steps"),
      DIAT_KEY_INT("pretrain_d_steps", train.pretrain_d_steps, "discriminator pretraining steps"),
      DIAT_KEY_INT("embedder_steps", train.embedder_steps, "identity embedder steps (phi and phi_eval)"),
      DIAT_KEY_INT("classifier_steps", train.classifier_steps, "evaluation attribute classifier steps"),
      DIAT_KEY_INT("regularizer_g_steps", train.regularizer_g_steps, "reconstruction network steps"),
      DIAT_KEY_INT("regularizer_f_steps", train.regularizer_f_steps, "denoising network steps"),
      DIAT_KEY_INT("enhancer_steps", train.enhancer_steps, "enhancer steps"),
      DIAT_KEY_INT("denoiser_width", denoiser_width, "channels of the denoising network"),
      DIAT_KEY_INT("local_enhancer_width", local_enhancer_width, "channels of the local enhancer"),
      DIAT_KEY_BOOL("global_enhancer_norm", global_enhancer_norm, "instance normalization in the global enhancer"),
      DIAT_KEY_BOOL("global_enhancer_from_transform", global_enhancer_from_transform,
                    "initialize the global enhancer from the pretrained autoencoder"),
      DIAT_KEY_U64("data_seed", data_seed, "seed of the training dataset"),
      DIAT_KEY_INT("data_n", data_n, "images per dataset"),
      DIAT_KEY_INT("n_identities", n_identities, "distinct identities per dataset"),
      Key{"marginals", "attribute probabilities, e.g. glasses=0.5,mouth_open=0.5,elderly=0.5,male=0.5",
          [](const RunConfig& c) { return c.marginals.str(); },
          [](RunConfig& c, const std::string& v) {
            try {
              c.marginals = data::Marginals::parse(v);
            } catch (const std::invalid_argument& e) {
              throw ConfigError(std::string("marginals: ") + e.what());
            }
          }},
      DIAT_KEY_U64("eval_data_seed", eval_data_seed, "seed of the dataset for the evaluation networks"),
      DIAT_KEY_INT("eval_count", eval_count, "held-out inputs scored by eval"),
      DIAT_KEY_PATH("data_root", data_root, "dataset directory (train/ and eval/)"),
      DIAT_KEY_PATH("pretrain_dir", pretrain_dir, "pretrained and auxiliary checkpoints"),
      DIAT_KEY_PATH("checkpoint_dir", checkpoint_dir, "adversarial run state and enhancer"),
      DIAT_KEY_PATH("report_dir", report_dir, "reports, metrics and mosaics"),
      Key{"verbosity", "quiet, info or debug",
          [](const RunConfig& c) { return std::string(verbosity_name(c.verbosity)); },
          [](RunConfig& c, const std::string& v) {
            if (v == "quiet") c.verbosity = Verbosity::quiet;
            else if (v == "info") c.verbosity = Verbosity::info;
            else if (v == "debug") c.verbosity = Verbosity::debug;
            else throw ConfigError("verbosity: expected quiet, info or debug, got '" + v + "'");
          }},
  };
  return k;
}

#undef DIAT_KEY_DOUBLE
#undef DIAT_KEY_INT
#undef DIAT_KEY_U64
#undef DIAT_KEY_BOOL
#undef DIAT_KEY_PATH

const Key* find_key(std::string_view name) {
  for (const auto& k : keys())
    if (name == k.name) return &k;
  return nullptr;
}

void validate_run(const RunConfig& c) {
  try {
    c.train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (c.data_n < 10) throw ConfigError("data_n must be >= 10");
  if (c.n_identities < 2) throw ConfigError("n_identities must be >= 2");
  if (c.eval_count < 1) throw ConfigError("eval_count must be >= 1");
  if (c.denoiser_width < 1 || c.local_enhancer_width < 1) throw ConfigError("network widths must be >= 1");
  if (c.global_enhancer_from_transform && !c.global_enhancer_norm)
    throw ConfigError("global_enhancer_from_transform needs global_enhancer_norm = true (same architecture)");
  try {
    c.generator(false).validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

}  // namespace

std::pair<std::string, std::string> split_assignment(std::string_view text) {
  const auto eq = text.find('=');
  if (eq == std::string_view::npos) throw ConfigError("expected key = value, got '" + std::string(text) + "'");
  auto key = trim(text.substr(0, eq));
  if (key.empty()) throw ConfigError("missing key in '" + std::string(text) + "'");
  return {key, trim(text.substr(eq + 1))};
}

RunConfig RunConfig::parse(std::string_view text, const std::vector<std::pair<std::string, std::string>>& overrides) {
  std::map<std::string, std::string> values;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    if (auto hash = t.find(" #"); hash != std::string::npos) t = trim(t.substr(0, hash));
    auto [k, v] = split_assignment(t);
    if (!find_key(k)) throw ConfigError("line " + std::to_string(lineno) + ": unknown key '" + k + "'");
    if (!values.emplace(k, v).second)
      throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" + k + "'");
  }
  for (const auto& [k, v] : overrides) {
    if (!find_key(k)) throw ConfigError("unknown key '" + k + "'");
    values[k] = v;
  }
  RunConfig c;
  if (auto it = values.find("variant"); it != values.end()) find_key("variant")->set(c, it->second);
  c.train = pipeline::TrainConfig::for_variant(c.train.variant);
  for (const auto& k : keys())
    if (auto it = values.find(k.name); it != values.end()) k.set(c, it->second);
  validate_run(c);
  return c;
}

RunConfig RunConfig::load(const fs::path& path, const std::vector<std::pair<std::string, std::string>>& overrides) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str(), overrides);
}

std::string RunConfig::serialize() const {
  std::string out = "# diat run configuration\n";
  for (const auto& k : keys()) out += std::string(k.name) + " = " + k.get(*this) + "\n";
  return out;
}

std::vector<std::pair<std::string, std::string>> RunConfig::documented_keys() {
  RunConfig defaults;
  defaults.train = pipeline::TrainConfig::for_variant(defaults.train.variant);
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& k : keys())
    out.emplace_back(k.name, std::string(k.doc) + " [default: " + k.get(defaults) + "]");
  return out;
}

data::GeneratorConfig RunConfig::generator(bool eval_set) const {
  data::GeneratorConfig g;
  g.seed = eval_set ? eval_data_seed : data_seed;
  g.n = data_n;
  g.size = train.scale.resolution();
  g.n_identities = n_identities;
  g.marginals = marginals;
  return g;
}

fs::path train_set_dir(const RunConfig& cfg) { return cfg.data_root / "train"; }
fs::path eval_set_dir(const RunConfig& cfg) { return cfg.data_root / "eval"; }
fs::path run_state_dir(const RunConfig& cfg) { return cfg.checkpoint_dir / "state"; }

// --- command plumbing ---

namespace {

class Log {
 public:
  Log(Verbosity v, std::ostream& err) : v_(v), err_(err) {}
  template <class... A>
  void info(const A&... a) {
    if (v_ != Verbosity::quiet) ((err_ << "[diat] ") << ... << a) << "\n";
  }
  template <class... A>
  void debug(const A&... a) {
    if (v_ == Verbosity::debug) ((err_ << "[diat] ") << ... << a) << "\n";
  }

 private:
  Verbosity v_;
  std::ostream& err_;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Independent streams for each phase from one configured seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t z = seed * 0x9e3779b97f4a7c15ULL + tag * 0xbf58476d1ce4e5b9ULL + 0x94d049bb133111ebULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

void write_text(const fs::path& path, const std::string& text) {
  ensure_dir(path.parent_path().empty() ? fs::path(".") : path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + tmp.string());
    f << text;
    if (!f.flush()) throw IoError("cannot write " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot write " + path.string() + ": " + ec.message());
}

std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

/// Exclusive ownership of an output directory for one process.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) : path_(dir / ".lock") {
    ensure_dir(dir);
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) throw IoError("output directory is locked by another run (remove " + path_.string() + " if stale)");
    std::fclose(f);
  }
  ~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
};

// Checkpoint file names under pretrain_dir, with the phase that writes them.
struct Artifact {
  const char* file;
  const char* phase;
};
constexpr Artifact kT{"t.ckpt", "t"}, kD{"d.ckpt", "d"}, kPhi{"phi.ckpt", "phi"}, kPhiEval{"phi_eval.ckpt", "eval"},
    kCAttr{"c_attr.ckpt", "eval"}, kG{"g.ckpt", "regularizer"}, kF{"f.ckpt", "regularizer"};

nn::Network load_into(nn::Network net, const fs::path& path, const std::string& hint) {
  if (!fs::exists(path)) throw MissingPrerequisite("missing " + path.string() + "; run " + hint + " first");
  restore_params(Checkpoint::load(path), net);
  net.set_trainable(false);
  return net;
}

nn::Network load_pretrained(const RunConfig& cfg, nn::Network net, const Artifact& a) {
  return load_into(std::move(net), cfg.pretrain_dir / a.file, std::string("`diat pretrain --phase ") + a.phase + "`");
}

void save_net(const nn::Network& net, const fs::path& path, const std::map<std::string, std::string>& meta = {}) {
  auto ck = make_checkpoint(net, 0);
  for (const auto& [k, v] : meta) ck.meta[k] = v;
  ensure_dir(path.parent_path());
  ck.save(path);
}

data::Dataset load_set(const fs::path& dir, const RunConfig& cfg) {
  if (!fs::exists(dir / "manifest.tsv")) throw MissingPrerequisite("missing dataset " + dir.string() + "; run `diat gen-data` first");
  auto ds = data::load_dataset(dir);
  const auto want = cfg.generator(dir == eval_set_dir(cfg));
  const auto& got = ds.manifest.config;
  if (got.seed != want.seed || got.n != want.n || got.size != want.size || got.n_identities != want.n_identities ||
      got.marginals.str() != want.marginals.str())
    throw MissingPrerequisite("dataset " + dir.string() + " was generated with a different configuration; rerun `diat gen-data`");
  return ds;
}

struct Networks {
  static nn::Network t(const RunConfig& c) { return nn::build_transform_net(c.train.scale, derive_seed(c.train.seed, 1)); }
  static nn::Network d(const RunConfig& c) { return nn::build_discriminator(c.train.scale, derive_seed(c.train.seed, 2)); }
  static nn::Network phi(const RunConfig& c) {
    return nn::build_identity_embedder(c.train.scale, c.n_identities, derive_seed(c.train.seed, 3));
  }
  static nn::Network phi_eval(const RunConfig& c) {
    return nn::build_identity_embedder(c.train.scale, c.n_identities, derive_seed(c.train.seed, 4));
  }
  static nn::Network c_attr(const RunConfig& c) {
    return nn::build_attribute_classifier(c.train.scale, derive_seed(c.train.seed, 5));
  }
  static nn::Network g(const RunConfig& c) { return nn::build_reconstruction_net(c.train.scale, derive_seed(c.train.seed, 6)); }
  static nn::Network f(const RunConfig& c) {
    return nn::build_denoising_net(c.train.scale, derive_seed(c.train.seed, 7), c.denoiser_width);
  }
  static nn::Network enhancer(const RunConfig& c, pipeline::EnhanceMode m) {
    if (m == pipeline::EnhanceMode::local)
      return nn::build_local_enhancer(c.train.scale, derive_seed(c.train.seed, 8), c.local_enhancer_width);
    return nn::build_global_enhancer(c.train.scale, derive_seed(c.train.seed, 9),
                                     nn::ArchOptions{.norm = c.global_enhancer_norm});
  }
};

pipeline::PhaseOptions phase(const RunConfig& c, std::int64_t steps, double lr, std::uint64_t tag) {
  return {steps, c.train.batch, lr, derive_seed(c.train.seed, 100 + tag)};
}

std::string phase_row(const std::string& name, const pipeline::PhaseReport& r, const char* metric) {
  std::ostringstream o;
  o << name << "\t" << r.losses.size() << "\t" << fmt_double(r.initial_loss) << "\t" << fmt_double(r.final_loss)
    << "\t" << metric << "\t" << fmt_double(r.held_out_metric) << "\n";
  return o.str();
}

constexpr const char* kPhaseHeader = "phase\tsteps\tinitial_loss\tfinal_loss\tmetric\tvalue\n";

// Rows of the adversarial run: inputs and guided images from the training
// portion, evaluation inputs from the held-out portion (attribute absent).
struct RunSplit {
  data::GuidedSplit train;
  std::vector<std::int64_t> held_inputs;
  data::TrainHeldOut parts;
};

RunSplit run_split(const RunConfig& cfg, const data::Dataset& ds) {
  RunSplit s;
  s.parts = data::train_held_out(ds.size());
  s.train = data::split_guided_and_input(ds.manifest, cfg.train.attribute, cfg.train.input_limit, cfg.train.seed,
                                         s.parts.train);
  if (!s.train.warning.empty()) throw ConfigError(s.train.warning);
  s.held_inputs = data::split_guided_and_input(ds.manifest, cfg.train.attribute, 0, 0, s.parts.held_out).input;
  if (s.held_inputs.empty()) throw ConfigError("no held-out inputs without the target attribute");
  return s;
}

std::vector<std::int64_t> first_n(const std::vector<std::int64_t>& v, std::int64_t n) {
  return {v.begin(), v.begin() + std::min<std::int64_t>(n, static_cast<std::int64_t>(v.size()))};
}

nn::Network trained_transform(const RunConfig& cfg) {
  return load_into(Networks::t(cfg), run_state_dir(cfg) / "t.ckpt", "`diat train`");
}

std::optional<nn::Network> load_enhancer(const RunConfig& cfg, pipeline::EnhanceMode mode) {
  if (mode == pipeline::EnhanceMode::none) return std::nullopt;
  const auto path = cfg.checkpoint_dir / "enhancer.ckpt";
  auto e = load_into(Networks::enhancer(cfg, mode), path, "`diat enhance-train`");
  const auto ck = Checkpoint::load(path);
  if (!ck.meta.count("mode") || ck.meta.at("mode") != pipeline::enhance_name(mode))
    throw MissingPrerequisite("enhancer at " + path.string() + " was trained for a different mode; rerun `diat enhance-train`");
  return e;
}

}  // namespace

// --- commands ---

int report_exception(std::ostream& err) {
  auto line = [&](const char* kind, const std::string& msg, int code) {
    std::string m = msg;
    for (auto& ch : m)
      if (ch == '\n' || ch == '\t') ch = ' ';
    err << "error\t" << kind << "\t" << m << "\n";
    return code;
  };
  try {
    throw;
  } catch (const MissingPrerequisite& e) {
    return line("missing_prerequisite", e.what(), kMissingPrerequisite);
  } catch (const NumericError& e) {
    return line("diverged", e.what(), kDiverged);
  } catch (const IoError& e) {
    return line("io", e.what(), kIoError);
  } catch (const data::CodecError& e) {
    return line("io", e.what(), kIoError);
  } catch (const CheckpointError& e) {
    return line("io", e.what(), kIoError);
  } catch (const fs::filesystem_error& e) {
    return line("io", e.what(), kIoError);
  } catch (const std::invalid_argument& e) {
    return line("config", e.what(), kConfigError);
  } catch (const std::exception& e) {
    return line("internal", e.what(), kFailed);
  }
}

void apply_thread_env() {
  if (const char* v = std::getenv("DIAT_NUM_THREADS")) {
    const int n = std::atoi(v);
    if (n > 0) Eigen::setNbThreads(n);
  }
}

int cmd_gen_data(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  try {
    Log log(cfg.verbosity, err);
    DirLock lock(cfg.data_root);
    for (bool eval_set : {false, true}) {
      const auto dir = eval_set ? eval_set_dir(cfg) : train_set_dir(cfg);
      const auto t0 = std::chrono::steady_clock::now();
      const auto m = data::generate_dataset(cfg.generator(eval_set), dir);
      log.info("wrote ", m.rows.size(), " images to ", dir.string(), " in ", seconds_since(t0), " s");
      out << (eval_set ? "eval" : "train") << "\t" << dir.string() << "\t" << m.rows.size();
      for (auto a : data::kAttributes) out << "\t" << a << "=" << m.count(a);
      out << "\n";
    }
    write_text(cfg.data_root / "effective_config.txt", cfg.serialize());
    return kOk;
  } catch (...) {
    return report_exception(err);
  }
}

int cmd_pretrain(const RunConfig& cfg, const std::vector<std::string>& phases, std::ostream& out, std::ostream& err) {
  try {
    static const std::vector<std::string> kAll{"t", "d", "phi", "eval", "regularizer"};
    std::set<std::string> want(phases.begin(), phases.end());
    for (const auto& p : want)
      if (std::find(kAll.begin(), kAll.end(), p) == kAll.end())
        throw ConfigError("unknown pretrain phase '" + p + "' (expected t, d, phi, eval or regularizer)");
    if (want.empty()) want.insert(kAll.begin(), kAll.end());

    Log log(cfg.verbosity, err);
    DirLock lock(cfg.pretrain_dir);
    const auto ds = load_set(train_set_dir(cfg), cfg);
    const auto parts = data::train_held_out(ds.size());
    const auto train_x = data::gather(ds.images, parts.train);
    const auto held_x = data::gather(ds.images, parts.held_out);
    const auto& tc = cfg.train;

    auto finish = [&](const char* name, const pipeline::PhaseReport& r, const char* metric,
                      std::chrono::steady_clock::time_point t0) {
      const auto row = phase_row(name, r, metric);
      write_text(cfg.pretrain_dir / (std::string(name) + ".tsv"), std::string(kPhaseHeader) + row);
      out << row;
      log.info(name, ": ", metric, " ", r.held_out_metric, " after ", r.losses.size(), " steps (",
               seconds_since(t0), " s)");
    };

    if (want.count("t")) {
      const auto t0 = std::chrono::steady_clock::now();
      auto t = Networks::t(cfg);
      const auto r = pipeline::pretrain_transform(t, train_x, held_x, phase(cfg, tc.pretrain_t_steps, tc.lr_pretrain, 1));
      save_net(t, cfg.pretrain_dir / kT.file);
      finish("t", r, "held_out_mse", t0);
    }
    if (want.count("d")) {
      const auto t0 = std::chrono::steady_clock::now();
      auto d = Networks::d(cfg);
      const auto r = pipeline::pretrain_discriminator(d, ds, parts.train, parts.held_out, tc.attribute,
                                                      phase(cfg, tc.pretrain_d_steps, tc.lr_pretrain, 2));
      save_net(d, cfg.pretrain_dir / kD.file, {{"attribute", tc.attribute.str()}});
      finish("d", r, "held_out_accuracy", t0);
    }
    if (want.count("phi")) {
      const auto t0 = std::chrono::steady_clock::now();
      auto phi = Networks::phi(cfg);
      const auto r = pipeline::train_embedder(phi, ds, parts.train, parts.held_out,
                                              phase(cfg, tc.embedder_steps, tc.lr_pretrain, 3));
      save_net(phi, cfg.pretrain_dir / kPhi.file);
      finish("phi", r, "held_out_identity_accuracy", t0);
    }
    if (want.count("eval")) {
      const auto ev = load_set(eval_set_dir(cfg), cfg);
      const auto ev_parts = data::train_held_out(ev.size());
      auto t0 = std::chrono::steady_clock::now();
      auto phi_eval = Networks::phi_eval(cfg);
      auto r = pipeline::train_embedder(phi_eval, ev, ev_parts.train, ev_parts.held_out,
                                        phase(cfg, tc.embedder_steps, tc.lr_pretrain, 4));
      save_net(phi_eval, cfg.pretrain_dir / kPhiEval.file);
      finish("phi_eval", r, "held_out_identity_accuracy", t0);
      t0 = std::chrono::steady_clock::now();
      auto c = Networks::c_attr(cfg);
      r = pipeline::train_attribute_classifier(c, ev, tc.attribute.index, ev_parts.train, ev_parts.held_out,
                                               phase(cfg, tc.classifier_steps, tc.lr_pretrain, 5));
      save_net(c, cfg.pretrain_dir / kCAttr.file, {{"attribute", std::string(tc.attribute.name())}});
      finish("c_attr", r, "held_out_accuracy", t0);
    }
    if (want.count("regularizer")) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto phi = load_pretrained(cfg, Networks::phi(cfg), kPhi);
      auto g = Networks::g(cfg);
      auto f = Networks::f(cfg);
      const auto r = pipeline::train_regularizer(g, f, phi, train_x, held_x, tc.loss,
                                                 phase(cfg, tc.regularizer_g_steps, tc.lr_pretrain, 6),
                                                 phase(cfg, tc.regularizer_f_steps, tc.lr_pretrain, 7));
      save_net(g, cfg.pretrain_dir / kG.file);
      save_net(f, cfg.pretrain_dir / kF.file);
      write_text(cfg.pretrain_dir / "regularizer.tsv",
                 std::string(kPhaseHeader) + phase_row("g", r.g, "final_loss") +
                     phase_row("f", r.f, "clean_residual_per_pixel"));
      out << phase_row("g", r.g, "final_loss") << phase_row("f", r.f, "clean_residual_per_pixel");
      log.info("regularizer: clean residual ", r.clean_residual_per_pixel, " per pixel (", seconds_since(t0), " s)");
    }
    write_text(cfg.pretrain_dir / "effective_config.txt", cfg.serialize());
    return kOk;
  } catch (...) {
    return report_exception(err);
  }
}

int cmd_train(const RunConfig& cfg, std::int64_t stop_after, bool fresh, std::ostream& out, std::ostream& err) {
  try {
    Log log(cfg.verbosity, err);
    DirLock lock(cfg.checkpoint_dir);
    const auto& tc = cfg.train;
    const auto terms = pipeline::active_terms(tc);
    const auto ds = load_set(train_set_dir(cfg), cfg);
    const auto split = run_split(cfg, ds);

    auto t = load_pretrained(cfg, Networks::t(cfg), kT);
    auto d = load_pretrained(cfg, Networks::d(cfg), kD);
    const auto d_meta = Checkpoint::load(cfg.pretrain_dir / kD.file).meta;
    if (!d_meta.count("attribute") || d_meta.at("attribute") != tc.attribute.str())
      throw MissingPrerequisite("discriminator was pretrained for a different attribute; run `diat pretrain --phase d`");
    std::optional<nn::Network> phi, f;
    if (terms.identity) phi = load_pretrained(cfg, Networks::phi(cfg), kPhi);
    if (terms.smooth) f = load_pretrained(cfg, Networks::f(cfg), kF);
    const auto phi_eval = load_pretrained(cfg, Networks::phi_eval(cfg), kPhiEval);
    const auto c_attr = load_pretrained(cfg, Networks::c_attr(cfg), kCAttr);
    const auto c_meta = Checkpoint::load(cfg.pretrain_dir / kCAttr.file).meta;
    if (!c_meta.count("attribute") || c_meta.at("attribute") != tc.attribute.name())
      throw MissingPrerequisite("evaluation classifier was trained for a different attribute; run `diat pretrain --phase eval`");

    pipeline::TrainData td{data::gather(ds.images, split.train.input), data::gather(ds.images, split.train.guided),
                           data::gather(ds.images, first_n(split.held_inputs, tc.eval_size))};
    pipeline::Auxiliary aux{phi ? &*phi : nullptr, f ? &*f : nullptr, &c_attr, &phi_eval};

    const auto state_dir = run_state_dir(cfg);
    const auto snapshot = cfg.checkpoint_dir / "effective_config.txt";
    const auto cfg_text = cfg.serialize();
    auto state = pipeline::start_training(tc, t, d);
    if (fresh) {
      std::error_code ec;
      fs::remove_all(state_dir, ec);
    } else if (fs::exists(state_dir / "t.ckpt")) {
      if (!fs::exists(snapshot) || read_text(snapshot) != cfg_text)
        throw ConfigError("existing run in " + cfg.checkpoint_dir.string() +
                          " used a different configuration; pass --fresh to restart");
      state.load(state_dir);
      log.info("resuming at iteration ", state.iteration);
    }
    write_text(snapshot, cfg_text);
    write_text(cfg.report_dir / "effective_config.txt", cfg_text);
    log.info(pipeline::variant_name(tc.variant), ": ", td.inputs.shape()[0], " inputs, ", td.guided.shape()[0],
             " guided images, target ", tc.attribute.str());

    const auto t0 = std::chrono::steady_clock::now();
    const auto start_iter = state.iteration;
    auto saved_iter = state.iteration;
    auto persist = [&](const pipeline::TrainState& s) {
      s.save(state_dir);
      saved_iter = s.iteration;
      write_text(cfg.report_dir / "train_report.tsv", s.report.to_tsv());
      const auto& row = s.report.rows.back();
      log.info("iteration ", row.iteration, ": loss_d ", row.loss_d, ", loss_t ", row.loss_t, ", score ",
               row.attribute_score, ", identity distance ", row.identity_distance);
    };
    try {
      pipeline::train_transform(tc, state, td, aux, stop_after, persist);
    } catch (const pipeline::Diverged&) {
      log.info("diverged; the last checkpoint in ", state_dir.string(), " is kept");
      throw;
    }
    if (state.iteration != saved_iter) persist(state);
    const double secs = seconds_since(t0);
    write_text(cfg.report_dir / "train_timing.tsv",
               "iterations\tseconds\n" + std::to_string(state.iteration - start_iter) + "\t" + fmt_double(secs) + "\n");
    out << "iterations\t" << state.iteration << "\n";
    out << "finished\t" << (state.finished ? "true" : "false") << "\n";
    out << "stop_reason\t" << state.report.stop_reason << "\n";
    out << "iterations_to_threshold\t" << state.report.iterations_to_threshold << "\n";
    if (!state.report.rows.empty()) out << "attribute_score\t" << fmt_double(state.report.rows.back().attribute_score) << "\n";
    return kOk;
  } catch (...) {
    return report_exception(err);
  }
}

int cmd_enhance_train(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  try {
    Log log(cfg.verbosity, err);
    const auto mode = cfg.train.effective_enhance();
    if (mode == pipeline::EnhanceMode::none) {
      out << "enhance\tnone\n";
      log.info("enhancement is disabled for this configuration");
      return kOk;
    }
    DirLock lock(cfg.checkpoint_dir);
    const auto& tc = cfg.train;
    const auto ds = load_set(train_set_dir(cfg), cfg);
    const auto split = run_split(cfg, ds);
    const auto t0 = std::chrono::steady_clock::now();
    auto e = Networks::enhancer(cfg, mode);
    pipeline::PhaseReport r;
    const char* metric = "";
    const auto opts = phase(cfg, tc.enhancer_steps, tc.lr_enhance, 8);
    if (mode == pipeline::EnhanceMode::local) {
      const auto t = trained_transform(cfg);
      const auto phi = load_pretrained(cfg, Networks::phi(cfg), kPhi);
      const auto& masks = ds.mask(tc.attribute.name());
      const auto held = first_n(split.held_inputs, cfg.eval_count);
      r = pipeline::train_local_enhancer(e, t, phi, data::gather(ds.images, split.train.input),
                                         data::gather(masks, split.train.input), data::gather(ds.images, held),
                                         data::gather(masks, held), tc.loss, opts);
      metric = "outside_mask_change";
    } else {
      if (cfg.global_enhancer_from_transform) e.load_values(load_pretrained(cfg, Networks::t(cfg), kT));
      const auto held = first_n(split.parts.held_out, cfg.eval_count);
      r = pipeline::train_global_enhancer(e, data::gather(ds.images, split.parts.train), data::gather(ds.images, held),
                                          tc.loss.sigma, opts);
      metric = "psnr_gain_db";
    }
    save_net(e, cfg.checkpoint_dir / "enhancer.ckpt", {{"mode", std::string(pipeline::enhance_name(mode))}});
    const auto row = phase_row(std::string("enhancer_") + std::string(pipeline::enhance_name(mode)), r, metric);
    write_text(cfg.report_dir / "enhance_report.tsv", std::string(kPhaseHeader) + row);
    out << row;
    log.info("enhancer (", pipeline::enhance_name(mode), "): ", metric, " ", r.held_out_metric, " (",
             seconds_since(t0), " s)");
    return kOk;
  } catch (...) {
    return report_exception(err);
  }
}

int cmd_transfer(const RunConfig& cfg, const std::vector<fs::path>& inputs, const fs::path& out_dir, std::ostream& out,
                 std::ostream& err) {
  try {
    if (inputs.empty()) throw ConfigError("transfer: no input images");
    Log log(cfg.verbosity, err);
    const auto mode = cfg.train.effective_enhance();
    const auto t = trained_transform(cfg);
    const auto e = load_enhancer(cfg, mode);
    const int S = cfg.train.image_size();
    ensure_dir(out_dir);
    for (const auto& in : inputs) {
      const auto x = data::decode_image(in, S);
      const auto t0 = std::chrono::steady_clock::now();
      const auto y = pipeline::run_transfer(t, e ? &*e : nullptr, mode, x, cfg.train.loss.sigma);
      const double secs = seconds_since(t0);
      auto dst = out_dir / in.filename();
      dst.replace_extension(".ppm");
      data::encode_image(y, dst);
      out << in.string() << "\t" << dst.string() << "\n";
      log.debug(in.string(), ": ", secs * 1000.0, " ms");
    }
    return kOk;
  } catch (...) {
    return report_exception(err);
  }
}

int cmd_eval(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  try {
    Log log(cfg.verbosity, err);
    const auto& tc = cfg.train;
    const auto mode = tc.effective_enhance();
    const auto ds = load_set(train_set_dir(cfg), cfg);
    const auto split = run_split(cfg, ds);
    const auto t = trained_transform(cfg);
    const auto e = load_enhancer(cfg, mode);
    const auto phi_eval = load_pretrained(cfg, Networks::phi_eval(cfg), kPhiEval);
    const auto c_attr = load_pretrained(cfg, Networks::c_attr(cfg), kCAttr);

    const auto rows = first_n(split.held_inputs, cfg.eval_count);
    std::vector<int> ids;
    for (auto i : rows) ids.push_back(ds.manifest.rows[static_cast<std::size_t>(i)].identity);
    const auto x = data::gather(ds.images, rows);
    std::optional<Tensor> masks;
    if (data::local_index(tc.attribute.name()) >= 0) masks = data::gather(ds.mask(tc.attribute.name()), rows);
    const Tensor* mp = masks ? &*masks : nullptr;

    const auto m = pipeline::evaluate(t, e ? &*e : nullptr, mode, phi_eval, c_attr, tc.attribute, x, ids, mp, tc.loss.sigma);
    const auto mt = pipeline::evaluate(t, nullptr, pipeline::EnhanceMode::none, phi_eval, c_attr, tc.attribute, x, ids,
                                       mp, tc.loss.sigma);
    std::vector<std::pair<std::string, double>> kv{
        {"count", static_cast<double>(m.count)},
        {"attribute_success", m.attribute_success},
        {"identity_distance", m.identity_distance},
        {"baseline_distance", m.baseline_distance},
        {"identity_ratio", m.identity_distance / m.baseline_distance},
        {"outside_mask_change", m.outside_mask_change},
        {"classifier_accuracy_raw", m.classifier_accuracy_raw},
        {"transform_attribute_success", mt.attribute_success},
        {"transform_identity_distance", mt.identity_distance},
        {"transform_outside_mask_change", mt.outside_mask_change},
    };
    // Residual-noise metric ||f(T(x)) - T(x)||_F, averaged per image, when the
    // denoiser exists.
    if (fs::exists(cfg.pretrain_dir / kF.file)) {
      const auto f = load_pretrained(cfg, Networks::f(cfg), kF);
      const auto tx = pipeline::run_transfer(t, nullptr, pipeline::EnhanceMode::none, x);
      Tensor ftx;
      {
        NoGradGuard guard;
        ftx = f(tx);
      }
      const auto a = ftx.to_vector(), b = tx.to_vector();
      const auto per = a.size() / static_cast<std::size_t>(m.count);
      double total = 0.0;
      for (std::size_t i = 0; i < a.size(); i += per) {
        double s = 0.0;
        for (std::size_t j = i; j < i + per; ++j) s += (a[j] - b[j]) * (a[j] - b[j]);
        total += std::sqrt(s);
      }
      kv.emplace_back("residual_noise", total / static_cast<double>(m.count));
    }
    std::string text = "metric\tvalue\n";
    for (const auto& [k, v] : kv) text += k + "\t" + fmt_double(v) + "\n";
    write_text(cfg.report_dir / "eval.tsv", text);
    out << text;

    // Single-image latency of the full inference path, reported but not
    // written to eval.tsv (which stays reproducible).
    const auto n_lat = std::min<std::int64_t>(16, m.count);
    const auto t0 = std::chrono::steady_clock::now();
    for (std::int64_t i = 0; i < n_lat; ++i)
      (void)pipeline::run_transfer(t, e ? &*e : nullptr, mode, data::gather(x, {i}), tc.loss.sigma);
    out << "latency_ms_per_image\t" << fmt_double(seconds_since(t0) * 1000.0 / static_cast<double>(n_lat)) << "\n";

    const auto show = first_n(std::vector<std::int64_t>(rows.size()), 8);
    std::vector<std::int64_t> head;
    for (std::size_t i = 0; i < show.size(); ++i) head.push_back(static_cast<std::int64_t>(i));
    const auto xs = data::gather(x, head);
    std::vector<Tensor> cols{xs, pipeline::run_transfer(t, nullptr, pipeline::EnhanceMode::none, xs)};
    if (e) cols.push_back(pipeline::run_transfer(t, &*e, mode, xs, tc.loss.sigma));
    ensure_dir(cfg.report_dir);
    pipeline::write_mosaic(cfg.report_dir / "mosaic.ppm", cols);
    log.info("attribute success ", m.attribute_success, ", identity distance ", m.identity_distance, " (baseline ",
             m.baseline_distance, ")");
    return kOk;
  } catch (...) {
    return report_exception(err);
  }
}

int cmd_gradcheck(int instances, std::uint64_t seed, std::ostream& out, std::ostream& err) {
  try {
    if (instances < 1) throw ConfigError("gradcheck: instances must be >= 1");
    const auto t0 = std::chrono::steady_clock::now();
    bool all = true;
    auto emit = [&](const char* group, const std::vector<selfcheck::CaseResult>& rs) {
      for (const auto& r : rs) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.3e", r.max_rel_error);
        out << group << "\t" << r.name << "\t" << r.instances << "\t" << buf << "\t" << (r.pass() ? "PASS" : "FAIL")
            << "\n";
        all = all && r.pass();
      }
    };
    emit("op", selfcheck::check_ops(instances, seed));
    emit("loss", selfcheck::check_losses(instances, seed));
    out << "seconds\t" << fmt_double(seconds_since(t0)) << "\n";
    out << "result\t" << (all ? "PASS" : "FAIL") << "\n";
    return all ? kOk : kFailed;
  } catch (...) {
    return report_exception(err);
  }
}

}  // namespace diat::cli
