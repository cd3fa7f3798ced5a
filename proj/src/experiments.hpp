#pragma once

// Experiment runners behind `ngkf run`. Each run is a pure function of its
// config: no clocks, no global state.

#include "config.hpp"
#include "output.hpp"

#include "ngkf/equiv.hpp"

#include <json.hpp>

#include <string>

namespace ngkf::app {

// Bounds a lockstep run must meet.
namespace tolerance {
inline constexpr double kStaticEquivalence = 1e-8;
inline constexpr double kRecurrentEquivalence = 1e-9;
inline constexpr double kSchurResidual = 1e-10;
inline constexpr double kGainIdentity = 1e-10;
inline constexpr double kGradientForm = 1e-10;
inline constexpr double kInformationForm = 1e-9;
}  // namespace tolerance

inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitToleranceBreach = 2;

struct RunOutput {
  int exit_code = kExitOk;
  nlohmann::ordered_json report;
  CsvTable trace;
  std::string summary;  // one line for the terminal
};

RunOutput run_experiment(const ExperimentConfig& config);

StaticModel<double> build_static_model(const ModelConfig& m);
RecurrentModel<double> build_recurrent_model(const ModelConfig& m);
ExpFamModel<double> build_family(const FamilyConfig& f);

// Ground truth and data, shared with the acceptance suite so both see the
// same streams.
V static_truth(const ExperimentConfig& c, const StaticModel<double>& model);
V static_theta0(const ExperimentConfig& c, const V& truth);
M static_J0(const ExperimentConfig& c, const StaticModel<double>& model);

struct RecurrentTruth {
  V theta;
  V y0;
};

// Random dynamics scaled to the configured spectral radius. For discrete
// readouts the first input is held at 1 and its weights centre the state on
// an interior mean (0.5 for Bernoulli, 1/K for categorical).
RecurrentTruth recurrent_truth(const ExperimentConfig& c, const RecurrentModel<double>& model,
                               const ExpFamModel<double>& family);
InputSpec<double> recurrent_inputs(const ExperimentConfig& c, const ExpFamModel<double>& family);
V recurrent_theta0(const ExperimentConfig& c, const RecurrentTruth& truth);

}  // namespace ngkf::app
