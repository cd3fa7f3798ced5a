#include "config.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace ngkf::app {

using nlohmann::json;

const std::vector<ExperimentInfo>& experiment_catalog() {
  static const std::vector<ExperimentInfo> catalog = {
      {ExperimentKind::StaticEkf, "static_ekf", "static extended Kalman filter on a parameter",
       {"model", "family", "steps", "seed"}, {"theta_star", "init", "inputs", "output"}},
      {ExperimentKind::NatGrad, "natgrad", "online natural gradient, optionally prior-regularized",
       {"model", "family", "schedule", "steps", "seed"},
       {"gamma", "prior", "estimator", "theta_star", "init", "inputs", "output"}},
      {ExperimentKind::LockstepStatic, "lockstep_static",
       "static filter vs natural gradient with eta_t = 1/(t+1)",
       {"model", "family", "steps", "seed"}, {"theta_star", "init", "inputs", "output"}},
      {ExperimentKind::LockstepFading, "lockstep_fading",
       "fading-memory filter vs natural gradient with a rate schedule",
       {"model", "family", "schedule", "steps", "seed"}, {"theta_star", "init", "inputs", "output"}},
      {ExperimentKind::LockstepRegularized, "lockstep_regularized",
       "prior-regularized natural gradient vs the filter keeping the prior",
       {"model", "family", "schedule", "prior", "steps", "seed"},
       {"theta_star", "init", "inputs", "output"}},
      {ExperimentKind::Rtrl, "rtrl", "real-time recurrent learning with plain gradient steps",
       {"model", "family", "schedule", "steps", "seed"}, {"theta_star", "init", "inputs", "output"}},
      {ExperimentKind::NatGradRtrl, "natgrad_rtrl",
       "natural-gradient RTRL with state correction",
       {"model", "family", "schedule", "steps", "seed"},
       {"estimator", "theta_star", "init", "inputs", "output"}},
      {ExperimentKind::LockstepRecurrent, "lockstep_recurrent",
       "joint filter over (theta, yhat) vs natural-gradient RTRL",
       {"model", "family", "steps", "seed"},
       {"schedule", "theta_star", "init", "inputs", "output"}},
      {ExperimentKind::Probes, "probes",
       "filter identities (gain, gradient form, information form) on a run",
       {"model", "family", "steps", "seed"},
       {"schedule", "theta_star", "init", "inputs", "output"}},
  };
  return catalog;
}

const ExperimentInfo& experiment_info(ExperimentKind kind) {
  for (const auto& e : experiment_catalog())
    if (e.kind == kind) return e;
  throw std::logic_error("unknown experiment kind");
}

std::string to_string(ExperimentKind kind) { return experiment_info(kind).name; }

RateSchedule<double> ScheduleConfig::build() const {
  switch (kind) {
    case ScheduleKind::OneOverTPlusC: return RateSchedule<double>::one_over_t_plus_c(c);
    case ScheduleKind::Constant: return RateSchedule<double>::constant(eta);
    case ScheduleKind::PowerLaw: return RateSchedule<double>::power_law(alpha, c);
  }
  throw std::logic_error("unknown schedule kind");
}

namespace {

// Typed access into a JSON object that remembers where it is.
class Reader {
 public:
  Reader(const json& node, std::string path) : node_(node), path_(std::move(path)) {
    if (!node_.is_object()) fail("", "expected an object");
  }

  bool has(const std::string& key) const { return node_.contains(key) && !node_.at(key).is_null(); }

  std::string field(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

  [[noreturn]] void fail(const std::string& key, const std::string& message) const {
    throw ConfigError(key.empty() ? path_ : field(key), message);
  }

  const json& at(const std::string& key) const {
    if (!has(key)) fail(key, "required field is missing");
    return node_.at(key);
  }

  Reader object(const std::string& key) const { return Reader(at(key), field(key)); }

  std::string str(const std::string& key) const {
    const json& v = at(key);
    if (!v.is_string()) fail(key, "expected a string");
    return v.get<std::string>();
  }
  std::string str(const std::string& key, const std::string& fallback) const {
    return has(key) ? str(key) : fallback;
  }

  double number(const std::string& key) const {
    const json& v = at(key);
    if (!v.is_number()) fail(key, "expected a number");
    return v.get<double>();
  }
  double number(const std::string& key, double fallback) const {
    return has(key) ? number(key) : fallback;
  }

  int integer(const std::string& key, int min_value) const {
    const json& v = at(key);
    if (!v.is_number_integer()) fail(key, "expected an integer");
    const auto x = v.get<long long>();
    if (x < min_value) fail(key, "must be >= " + std::to_string(min_value));
    if (x > 100000000) fail(key, "is unreasonably large");
    return static_cast<int>(x);
  }
  int integer(const std::string& key, int min_value, int fallback) const {
    return has(key) ? integer(key, min_value) : fallback;
  }

  bool boolean(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const json& v = at(key);
    if (!v.is_boolean()) fail(key, "expected true or false");
    return v.get<bool>();
  }

  V vector(const std::string& key) const { return to_vector(at(key), field(key)); }

  M matrix(const std::string& key) const {
    const json& v = at(key);
    if (!v.is_array() || v.empty()) fail(key, "expected a non-empty array of rows");
    const std::size_t cols = v.front().is_array() ? v.front().size() : 0;
    if (cols == 0) fail(key, "expected a non-empty array of rows");
    M m(static_cast<Eigen::Index>(v.size()), static_cast<Eigen::Index>(cols));
    for (std::size_t i = 0; i < v.size(); ++i) {
      const V row = to_vector(v[i], field(key) + "[" + std::to_string(i) + "]");
      if (static_cast<std::size_t>(row.size()) != cols) fail(key, "rows have different lengths");
      m.row(static_cast<Eigen::Index>(i)) = row.transpose();
    }
    return m;
  }

  void reject_unknown(const std::set<std::string>& known) const {
    for (auto it = node_.begin(); it != node_.end(); ++it)
      if (!known.count(it.key())) fail(it.key(), "unknown field");
  }

  static V to_vector(const json& v, const std::string& where) {
    if (!v.is_array()) throw ConfigError(where, "expected an array of numbers");
    V out(static_cast<Eigen::Index>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!v[i].is_number()) throw ConfigError(where + "[" + std::to_string(i) + "]", "expected a number");
      out(static_cast<Eigen::Index>(i)) = v[i].get<double>();
    }
    return out;
  }

 private:
  const json& node_;
  std::string path_;
};

ExperimentKind parse_kind(const Reader& r) {
  const std::string name = r.str("experiment");
  for (const auto& e : experiment_catalog())
    if (name == e.name) return e.kind;
  r.fail("experiment", "unknown experiment '" + name + "' (see `ngkf list`)");
}

ModelConfig parse_model(const Reader& r) {
  ModelConfig m;
  m.kind = r.str("kind");
  if (m.kind == "linear") {
    r.reject_unknown({"kind", "input_dim", "output_dim", "bias"});
    m.input_dim = r.integer("input_dim", 1);
    m.output_dim = r.integer("output_dim", 1);
    m.bias = r.boolean("bias", false);
  } else if (m.kind == "one_hidden_layer") {
    r.reject_unknown({"kind", "input_dim", "hidden", "output_dim"});
    m.input_dim = r.integer("input_dim", 1);
    m.hidden = r.integer("hidden", 1);
    m.output_dim = r.integer("output_dim", 1);
  } else if (m.kind == "linear_rnn" || m.kind == "tanh_rnn") {
    r.reject_unknown({"kind", "state_dim", "input_dim", "observed_slice", "spectral_radius"});
    m.state_dim = r.integer("state_dim", 1);
    m.input_dim = r.integer("input_dim", 0);
    m.spectral_radius = r.number("spectral_radius", 0.7);
    if (!(m.spectral_radius >= 0.0)) r.fail("spectral_radius", "must be >= 0");
    if (r.has("observed_slice")) {
      const V slice = r.vector("observed_slice");
      if (slice.size() != 2) r.fail("observed_slice", "expected [offset, length]");
      m.observed_offset = static_cast<int>(slice(0));
      m.observed_length = static_cast<int>(slice(1));
      if (slice(0) != m.observed_offset || slice(1) != m.observed_length || m.observed_offset < 0 ||
          m.observed_length < 1 || m.observed_offset + m.observed_length > m.state_dim)
        r.fail("observed_slice", "must be a non-empty [offset, length] range inside state_dim " +
                                     std::to_string(m.state_dim));
    } else {
      m.observed_offset = 0;
      m.observed_length = m.state_dim;
    }
  } else {
    r.fail("kind", "unknown model kind '" + m.kind +
                       "' (linear, one_hidden_layer, linear_rnn, tanh_rnn)");
  }
  return m;
}

FamilyConfig parse_family(const Reader& r) {
  FamilyConfig f;
  const std::string kind = r.str("kind");
  if (kind == "gaussian") {
    r.reject_unknown({"kind", "fixed_cov", "dim"});
    if (r.has("fixed_cov")) {
      f.fixed_cov = r.matrix("fixed_cov");
      if (f.fixed_cov.rows() != f.fixed_cov.cols()) r.fail("fixed_cov", "must be square");
      try {
        ExpFamModel<double>::gaussian(f.fixed_cov);
      } catch (const std::exception& e) {
        r.fail("fixed_cov", e.what());
      }
    } else {
      const int dim = r.integer("dim", 1);
      f.fixed_cov = M::Identity(dim, dim);
    }
    f.kind = FamilyKind::GaussianKnownCov;
  } else if (kind == "bernoulli") {
    r.reject_unknown({"kind"});
    f.kind = FamilyKind::Bernoulli;
  } else if (kind == "categorical") {
    r.reject_unknown({"kind", "classes"});
    f.kind = FamilyKind::Categorical;
    f.classes = r.integer("classes", 2);
  } else {
    r.fail("kind", "unknown family '" + kind + "' (gaussian, bernoulli, categorical)");
  }
  return f;
}

ScheduleConfig parse_schedule(const Reader& r) {
  ScheduleConfig s;
  const std::string kind = r.str("kind");
  if (kind == "one_over_t_plus_c") {
    r.reject_unknown({"kind", "c"});
    s.kind = ScheduleKind::OneOverTPlusC;
    s.c = r.number("c", 1.0);
  } else if (kind == "constant") {
    r.reject_unknown({"kind", "eta"});
    s.kind = ScheduleKind::Constant;
    s.eta = r.number("eta");
  } else if (kind == "power_law") {
    r.reject_unknown({"kind", "alpha", "c"});
    s.kind = ScheduleKind::PowerLaw;
    s.alpha = r.number("alpha");
    s.c = r.number("c", 1.0);
  } else {
    r.fail("kind", "unknown schedule '" + kind + "' (one_over_t_plus_c, constant, power_law)");
  }
  try {
    s.build();
  } catch (const ContractError& e) {
    r.fail("", e.what());
  }
  return s;
}

PriorConfig parse_prior(const Reader& r) {
  r.reject_unknown({"theta_prior", "sigma0", "n_prior"});
  PriorConfig p;
  if (r.has("theta_prior")) p.theta_prior = r.vector("theta_prior");
  if (r.has("sigma0")) {
    if (r.at("sigma0").is_number()) {
      p.sigma0_scale = r.number("sigma0");
      if (!(p.sigma0_scale > 0)) r.fail("sigma0", "must be positive");
    } else {
      p.sigma0 = r.matrix("sigma0");
    }
  }
  p.n_prior = r.number("n_prior");
  if (!(p.n_prior >= 0)) r.fail("n_prior", "must be >= 0");
  return p;
}

InitConfig parse_init(const Reader& r) {
  r.reject_unknown({"theta0", "theta0_scale", "J0", "P0_theta", "y0", "y0_estimate",
                    "augment_initial_state"});
  InitConfig c;
  if (r.has("theta0")) {
    if (r.at("theta0").is_array()) {
      c.theta0 = "explicit";
      c.theta0_value = r.vector("theta0");
    } else {
      c.theta0 = r.str("theta0");
      static const std::set<std::string> ok = {"zero", "truth", "perturbed", "random"};
      if (!ok.count(c.theta0))
        r.fail("theta0", "expected zero, truth, perturbed, random or an explicit vector");
    }
  }
  c.theta0_scale = r.number("theta0_scale", 0.1);
  if (r.has("J0")) {
    const json& j = r.at("J0");
    if (j.is_number()) {
      c.J0 = "scaled";
      c.J0_scale = r.number("J0");
      if (!(c.J0_scale > 0)) r.fail("J0", "must be positive");
    } else if (j.is_array()) {
      c.J0 = "explicit";
      c.J0_value = r.matrix("J0");
    } else {
      c.J0 = r.str("J0");
      if (c.J0 != "default" && c.J0 != "identity")
        r.fail("J0", "expected default, identity, a positive scale or a matrix");
    }
  }
  c.P0_theta_scale = r.number("P0_theta", 1.0);
  if (!(c.P0_theta_scale > 0)) r.fail("P0_theta", "must be positive");
  if (r.has("y0")) c.y0 = r.vector("y0");
  if (r.has("y0_estimate")) c.y0_estimate = r.vector("y0_estimate");
  c.augment_initial_state = r.boolean("augment_initial_state", false);
  return c;
}

EstimatorKind parse_estimator(const Reader& r) {
  const std::string e = r.str("estimator");
  if (e == "exact") return EstimatorKind::ExactExpectation;
  if (e == "monte_carlo") return EstimatorKind::MonteCarloOne;
  if (e == "outer_product") return EstimatorKind::OuterProduct;
  r.fail("estimator", "unknown estimator '" + e + "' (exact, monte_carlo, outer_product)");
}

void check_consistency(const ExperimentConfig& c, const Reader& r) {
  const bool recurrent_experiment =
      c.experiment == ExperimentKind::Rtrl || c.experiment == ExperimentKind::NatGradRtrl ||
      c.experiment == ExperimentKind::LockstepRecurrent;
  if (recurrent_experiment && !c.model.recurrent())
    r.fail("model.kind", "experiment " + to_string(c.experiment) + " needs a recurrent model");
  const bool static_only = c.experiment != ExperimentKind::Probes && !recurrent_experiment;
  if (static_only && c.model.recurrent())
    r.fail("model.kind", "experiment " + to_string(c.experiment) + " needs a static model");

  int stat_dim = 0;
  switch (c.family.kind) {
    case FamilyKind::GaussianKnownCov: stat_dim = static_cast<int>(c.family.fixed_cov.rows()); break;
    case FamilyKind::Bernoulli: stat_dim = 1; break;
    case FamilyKind::Categorical: stat_dim = c.family.classes - 1; break;
  }
  const int out = c.model.recurrent() ? c.model.observed_length : c.model.output_dim;
  if (out != stat_dim)
    r.fail(c.model.recurrent() ? "model.observed_slice" : "model.output_dim",
           "model output has dimension " + std::to_string(out) + " but the family statistic has " +
               std::to_string(stat_dim));

  int param_dim = 0;
  if (c.model.kind == "linear") {
    param_dim = c.model.output_dim * (c.model.input_dim + (c.model.bias ? 1 : 0));
  } else if (c.model.kind == "one_hidden_layer") {
    param_dim = c.model.hidden * (c.model.input_dim + 1) + c.model.output_dim * (c.model.hidden + 1);
  } else {
    const int n = c.model.state_dim;
    param_dim = n * n + n * c.model.input_dim + (c.model.kind == "tanh_rnn" ? n : 0);
  }
  if (c.theta_star && c.theta_star->size() != param_dim)
    r.fail("theta_star", "has " + std::to_string(c.theta_star->size()) +
                             " entries, model has " + std::to_string(param_dim) + " parameters");
  const int init_dim = param_dim + (c.init.augment_initial_state ? c.model.state_dim : 0);
  if (c.init.theta0 == "explicit" && c.init.theta0_value.size() != param_dim)
    r.fail("init.theta0", "has " + std::to_string(c.init.theta0_value.size()) +
                              " entries, model has " + std::to_string(param_dim) + " parameters");
  if (c.init.J0 == "explicit" && (c.init.J0_value.rows() != init_dim || c.init.J0_value.cols() != init_dim))
    r.fail("init.J0", "must be " + std::to_string(init_dim) + "x" + std::to_string(init_dim));
  if (c.init.y0 && c.init.y0->size() != c.model.state_dim)
    r.fail("init.y0", "must have state_dim entries");
  if (c.init.y0_estimate && c.init.y0_estimate->size() != c.model.state_dim)
    r.fail("init.y0_estimate", "must have state_dim entries");
  if (c.init.augment_initial_state && !c.model.recurrent())
    r.fail("init.augment_initial_state", "only applies to recurrent models");
  if (c.prior) {
    if (c.prior->theta_prior && c.prior->theta_prior->size() != param_dim)
      r.fail("prior.theta_prior", "must have " + std::to_string(param_dim) + " entries");
    if (c.prior->sigma0.size() != 0) {
      if (c.prior->sigma0.rows() != param_dim || c.prior->sigma0.cols() != param_dim)
        r.fail("prior.sigma0", "must be " + std::to_string(param_dim) + "x" + std::to_string(param_dim));
      try {
        PriorSpec<double>{V::Zero(param_dim), c.prior->sigma0, c.prior->n_prior}.check(param_dim);
      } catch (const std::exception& e) {
        r.fail("prior.sigma0", e.what());
      }
    }
  }
  if (c.experiment == ExperimentKind::LockstepRegularized && !c.prior)
    r.fail("prior", "required field is missing");
}

}  // namespace

ExperimentConfig parse_config(const json& doc, const std::string& name) {
  Reader r(doc, "");
  r.reject_unknown({"name", "experiment", "model", "family", "schedule", "gamma", "prior",
                    "estimator", "steps", "seed", "theta_star", "theta_star_scale", "init",
                    "inputs", "output", "description"});
  ExperimentConfig c;
  c.name = r.str("name", name.empty() ? std::string("experiment") : name);
  c.experiment = parse_kind(r);
  const auto& info = experiment_info(c.experiment);
  for (const char* key : info.required)
    if (!r.has(key)) r.fail(key, "required by experiment " + std::string(info.name));

  c.model = parse_model(r.object("model"));
  c.family = parse_family(r.object("family"));
  if (r.has("schedule")) c.schedule = parse_schedule(r.object("schedule"));
  if (r.has("gamma")) c.gamma = parse_schedule(r.object("gamma"));
  if (r.has("prior")) c.prior = parse_prior(r.object("prior"));
  if (r.has("estimator")) c.estimator = parse_estimator(r);
  c.steps = r.integer("steps", 0);
  const json& seed = r.at("seed");
  if (!seed.is_number_unsigned() && !(seed.is_number_integer() && seed.get<long long>() >= 0))
    r.fail("seed", "expected a non-negative integer");
  c.seed = seed.get<std::uint64_t>();
  if (r.has("theta_star")) {
    if (r.at("theta_star").is_string()) {
      if (r.str("theta_star") != "random") r.fail("theta_star", "expected \"random\" or a vector");
    } else {
      c.theta_star = r.vector("theta_star");
    }
  }
  c.theta_star_scale = r.number("theta_star_scale", 1.0);
  if (r.has("init")) c.init = parse_init(r.object("init"));
  if (r.has("inputs")) {
    const Reader in = r.object("inputs");
    in.reject_unknown({"scale", "constant_first"});
    c.inputs.scale = in.number("scale", 1.0);
    c.inputs.constant_first = in.boolean("constant_first", false);
  }
  if (r.has("output")) {
    const Reader out = r.object("output");
    out.reject_unknown({"trace", "report"});
    c.output.trace = out.str("trace", "");
    c.output.report = out.str("report", "");
  }

  const bool independent_gamma = c.gamma.has_value();
  if (independent_gamma && c.experiment != ExperimentKind::NatGrad)
    r.fail("gamma", "an independent metric rate is only allowed for the natgrad experiment");
  if (c.estimator != EstimatorKind::ExactExpectation &&
      c.experiment != ExperimentKind::NatGrad && c.experiment != ExperimentKind::NatGradRtrl)
    r.fail("estimator", "equivalence runs use the exact Fisher expectation");
  check_consistency(c, r);
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", "cannot open config " + path);
  json doc;
  try {
    doc = json::parse(in, nullptr, true, true);
  } catch (const json::parse_error& e) {
    // Translate the byte offset into a line number.
    std::ifstream again(path);
    std::string text((std::istreambuf_iterator<char>(again)), std::istreambuf_iterator<char>());
    std::size_t line = 1;
    for (std::size_t i = 0; i < std::min<std::size_t>(e.byte, text.size()); ++i)
      if (text[i] == '\n') ++line;
    throw ConfigError("", path + ":" + std::to_string(line) + ": " + e.what());
  }
  try {
    return parse_config(doc, std::filesystem::path(path).stem().string());
  } catch (const ConfigError& e) {
    throw ConfigError(e.field(), e.message(), path);
  }
}

}  // namespace ngkf::app
