#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "diat/data.hpp"
#include "diat/pipeline.hpp"

namespace diat::cli {

/// Process exit codes.
enum ExitCode : int {
  kOk = 0,
  kFailed = 1,  // a check did not pass (gradcheck)
  kConfigError = 2,
  kMissingPrerequisite = 3,
  kDiverged = 4,
  kIoError = 5,
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Verbosity { quiet, info, debug };

/// Everything a command reads. File format is `key = value` per line with
/// `#` comments.
struct RunConfig {
  pipeline::TrainConfig train;

  std::filesystem::path data_root = "data";          // train/ and eval/ datasets
  std::filesystem::path pretrain_dir = "runs/pretrain";
  std::filesystem::path checkpoint_dir = "runs/train";  // transform run + enhancer
  std::filesystem::path report_dir = "runs/report";
  Verbosity verbosity = Verbosity::info;

  std::uint64_t data_seed = 0;
  std::int64_t data_n = 2000;
  int n_identities = 64;
  data::Marginals marginals;
  std::uint64_t eval_data_seed = 1000;  // dataset for phi_eval and C_attr
  std::int64_t eval_count = 200;

  int denoiser_width = 32;
  int local_enhancer_width = 16;
  bool global_enhancer_norm = false;
  bool global_enhancer_from_transform = false;  // start from the pretrained autoencoder (needs norm)

  /// Parses a config file body. Precedence, lowest first: built-in defaults,
  /// variant defaults, file values, overrides. Throws ConfigError.
  static RunConfig parse(std::string_view text, const std::vector<std::pair<std::string, std::string>>& overrides = {});
  static RunConfig load(const std::filesystem::path& path,
                        const std::vector<std::pair<std::string, std::string>>& overrides = {});
  /// Every key, one per line, in a stable order. parse(serialize()) == *this.
  std::string serialize() const;

  data::GeneratorConfig generator(bool eval_set) const;
  /// Documented keys with their defaults, for --help.
  static std::vector<std::pair<std::string, std::string>> documented_keys();
};

/// "key=value" -> pair; throws ConfigError.
std::pair<std::string, std::string> split_assignment(std::string_view text);

// Commands. Each returns an ExitCode after reporting errors to `err` as one
// line: "error\t<kind>\t<message>".

int cmd_gen_data(const RunConfig& cfg, std::ostream& out, std::ostream& err);
/// phases: subset of {t, d, phi, eval, regularizer}; empty means all.
int cmd_pretrain(const RunConfig& cfg, const std::vector<std::string>& phases, std::ostream& out, std::ostream& err);
/// stop_after < 0 runs to completion; fresh discards an existing run.
int cmd_train(const RunConfig& cfg, std::int64_t stop_after, bool fresh, std::ostream& out, std::ostream& err);
int cmd_enhance_train(const RunConfig& cfg, std::ostream& out, std::ostream& err);
int cmd_transfer(const RunConfig& cfg, const std::vector<std::filesystem::path>& inputs,
                 const std::filesystem::path& out_dir, std::ostream& out, std::ostream& err);
int cmd_eval(const RunConfig& cfg, std::ostream& out, std::ostream& err);
int cmd_gradcheck(int instances, std::uint64_t seed, std::ostream& out, std::ostream& err);

/// Maps an in-flight exception to an exit code and writes the error line.
int report_exception(std::ostream& err);

/// Applies DIAT_NUM_THREADS (if set) to the linear-algebra backend.
void apply_thread_env();

// Layout helpers shared with tests.
std::filesystem::path train_set_dir(const RunConfig& cfg);
std::filesystem::path eval_set_dir(const RunConfig& cfg);
std::filesystem::path run_state_dir(const RunConfig& cfg);

}  // namespace diat::cli
