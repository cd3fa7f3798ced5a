#pragma once

// Experiment configuration: JSON schema, validation, and field diagnostics.

#include "ngkf/expfam.hpp"
#include "ngkf/natgrad.hpp"
#include "ngkf/types.hpp"

#include <json.hpp>

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace ngkf::app {

using V = Vector<double>;
using M = Matrix<double>;

// Invalid config, reported with the offending field path.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& field, const std::string& message, const std::string& source = "")
      : std::runtime_error((source.empty() ? "" : source + ": ") +
                           (field.empty() ? message : field + ": " + message)),
        field_(field), message_(message) {}
  const std::string& field() const noexcept { return field_; }
  const std::string& message() const noexcept { return message_; }

 private:
  std::string field_;
  std::string message_;
};

enum class ExperimentKind {
  StaticEkf,
  NatGrad,
  LockstepStatic,
  LockstepFading,
  LockstepRegularized,
  Rtrl,
  NatGradRtrl,
  LockstepRecurrent,
  Probes,
};

struct ExperimentInfo {
  ExperimentKind kind;
  const char* name;
  const char* summary;
  std::vector<const char*> required;
  std::vector<const char*> optional;
};

const std::vector<ExperimentInfo>& experiment_catalog();
const ExperimentInfo& experiment_info(ExperimentKind kind);

struct ModelConfig {
  std::string kind;  // linear | one_hidden_layer | linear_rnn | tanh_rnn
  int input_dim = 0;
  int output_dim = 0;
  int hidden = 0;
  bool bias = false;
  int state_dim = 0;
  int observed_offset = 0;
  int observed_length = 0;
  double spectral_radius = 0.7;  // random recurrent ground truth

  bool recurrent() const { return kind == "linear_rnn" || kind == "tanh_rnn"; }
};

struct FamilyConfig {
  FamilyKind kind = FamilyKind::GaussianKnownCov;
  int classes = 0;
  M fixed_cov;
};

struct ScheduleConfig {
  ScheduleKind kind = ScheduleKind::OneOverTPlusC;
  double c = 1.0;
  double eta = 0.1;
  double alpha = 0.5;

  RateSchedule<double> build() const;
};

struct PriorConfig {
  std::optional<V> theta_prior;  // zero when absent
  M sigma0;                      // empty: identity
  double sigma0_scale = 1.0;
  double n_prior = 0.0;
};

struct InitConfig {
  std::string theta0 = "zero";  // zero | truth | perturbed | random | explicit
  V theta0_value;
  double theta0_scale = 0.1;
  std::string J0 = "default";  // default | identity | scaled | explicit
  double J0_scale = 1.0;
  M J0_value;
  double P0_theta_scale = 1.0;  // recurrent runs: P0_theta = scale * I
  std::optional<V> y0;
  std::optional<V> y0_estimate;
  bool augment_initial_state = false;
};

struct InputConfig {
  double scale = 1.0;
  bool constant_first = false;
};

struct OutputConfig {
  std::string trace;   // CSV; empty disables
  std::string report;  // JSON; empty disables
};

struct ExperimentConfig {
  std::string name;  // file stem or "name" field
  ExperimentKind experiment = ExperimentKind::LockstepStatic;
  ModelConfig model;
  FamilyConfig family;
  ScheduleConfig schedule;
  std::optional<ScheduleConfig> gamma;  // independent metric rate, outside the equivalence regime
  std::optional<PriorConfig> prior;
  EstimatorKind estimator = EstimatorKind::ExactExpectation;
  int steps = 0;
  std::uint64_t seed = 0;
  std::optional<V> theta_star;  // absent: random
  double theta_star_scale = 1.0;
  InitConfig init;
  InputConfig inputs;
  OutputConfig output;
};

ExperimentConfig parse_config(const nlohmann::json& doc, const std::string& name = "");
ExperimentConfig load_config(const std::string& path);

std::string to_string(ExperimentKind kind);

}  // namespace ngkf::app
