#pragma once

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "perfgd/env.hpp"
#include "perfgd/grad.hpp"
#include "perfgd/opt.hpp"
#include "perfgd/oracle.hpp"
#include "perfgd/theory.hpp"
#include "perfgd/types.hpp"

namespace perfgd {

struct OptimizerRun {
  Algo algo;
  OptimConfig optim;
};

struct ExperimentConfig {
  std::string name;
  EnvSpec env;
  LossSpec loss;
  std::vector<OptimizerRun> optimizers;
  int trials = 10;
  std::uint64_t base_seed = 0;
  std::string out_dir = ".";
  bool emit_csv = true;
  bool emit_json = false;
};

// per-iteration statistics across trials; sem uses the (m-1) denominator and
// is 0 when only one trial contributes
struct IterAggregate {
  int t = 0;
  Vec theta_mean, theta_sem;
  double loss_mean = 0, loss_sem = 0;
  double gradnorm_mean = 0, gradnorm_sem = 0;
  int contributing = 0;
};

struct OptimizerResult {
  Algo algo;
  std::vector<TrialRecord> trials;
  std::vector<std::string> trial_errors;  // empty string = clean trial
  std::vector<IterAggregate> aggregate;
};

struct AggregateResult {
  ExperimentConfig cfg;
  std::vector<OptimizerResult> runs;
  GroundTruth truth;
  std::uint64_t config_hash = 0;
};

inline const char* algo_name(Algo a) {
  switch (a) {
    case Algo::RGD: return "rgd";
    case Algo::RRM: return "rrm";
    case Algo::PerfGD: return "perfgd";
  }
  throw SpecError("unknown algorithm");
}

inline Algo algo_from_name(const std::string& s) {
  if (s == "rgd") return Algo::RGD;
  if (s == "rrm") return Algo::RRM;
  if (s == "perfgd") return Algo::PerfGD;
  throw ConfigError("unknown optimizer '" + s + "'");
}

inline void validate(const ExperimentConfig& cfg) {
  if (cfg.name.empty()) throw ConfigError("experiment name must be nonempty");
  if (cfg.trials < 1) throw ConfigError("trials must be >= 1");
  if (cfg.optimizers.empty()) throw ConfigError("optimizer list must be nonempty");
  validate(cfg.env);
  for (const auto& run : cfg.optimizers) {
    validate(run.optim, cfg.env);
    if (run.algo == Algo::PerfGD) {
      const bool reparam = run.optim.estimator == Estimator::RegressionReparam;
      if (reparam != (cfg.env.family == Family::Regression))
        throw ConfigError("estimator does not match the environment family");
    }
  }
}

namespace detail {

inline std::string fmt_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

inline const char* family_name(Family f) {
  switch (f) {
    case Family::LinearMeanGaussian: return "linear_mean";
    case Family::SqrtMeanGaussian: return "sqrt_mean";
    case Family::GaussianMixture: return "mixture";
    case Family::Pricing: return "pricing";
    case Family::Classification: return "classification";
    case Family::Regression: return "regression";
  }
  throw SpecError("unknown family");
}

inline nlohmann::json vec_json(const Vec& v) {
  nlohmann::json a = nlohmann::json::array();
  for (int i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

inline nlohmann::json mat_json(const Mat& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (int i = 0; i < m.rows(); ++i) rows.push_back(vec_json(m.row(i).transpose()));
  return rows;
}

inline nlohmann::json env_json(const EnvSpec& s) {
  nlohmann::json j;
  j["family"] = family_name(s.family);
  j["lo"] = vec_json(s.domain.lo);
  j["hi"] = vec_json(s.domain.hi);
  switch (s.family) {
    case Family::LinearMeanGaussian: {
      const auto& m = std::get<LinearMeanSpec>(s.model);
      j["a1"] = m.a1; j["a0"] = m.a0; j["sigma2"] = m.sigma2;
      break;
    }
    case Family::SqrtMeanGaussian: {
      const auto& m = std::get<SqrtMeanSpec>(s.model);
      j["a1"] = m.a1; j["a0"] = m.a0; j["sigma2"] = m.sigma2;
      break;
    }
    case Family::GaussianMixture: {
      const auto& m = std::get<MixtureSpec>(s.model);
      j["gamma"] = m.gamma;
      j["c1"] = {{"a1", m.c1.a1}, {"a0", m.c1.a0}, {"var", m.c1.var}};
      j["c2"] = {{"a1", m.c2.a1}, {"a0", m.c2.a0}, {"var", m.c2.var}};
      break;
    }
    case Family::Pricing: {
      const auto& m = std::get<PricingSpec>(s.model);
      j["mu0"] = vec_json(m.mu0); j["eps"] = m.eps; j["Sigma"] = mat_json(m.Sigma);
      break;
    }
    case Family::Classification: {
      const auto& m = std::get<ClassificationSpec>(s.model);
      j["gamma"] = m.gamma; j["mu0"] = m.mu0; j["var0"] = m.var0;
      j["mu1"] = m.mu1; j["var1"] = m.var1; j["eps"] = m.eps;
      break;
    }
    case Family::Regression: {
      const auto& m = std::get<RegressionSpec>(s.model);
      j["x_mean"] = m.x_mean; j["x_var"] = m.x_var;
      j["b0"] = m.b0; j["b1"] = m.b1; j["noise_var"] = m.noise_var;
      break;
    }
  }
  return j;
}

inline nlohmann::json loss_json(const LossSpec& l) {
  nlohmann::json j;
  switch (l.kind) {
    case LossKind::LinearRevenue: j["kind"] = "linear_revenue"; break;
    case LossKind::RidgeCrossEntropy: j["kind"] = "ridge_xent"; break;
    case LossKind::RidgeSquared: j["kind"] = "ridge_squared"; break;
  }
  j["lambda"] = l.lambda;
  j["sign"] = l.sign;
  return j;
}

inline nlohmann::json optim_json(const OptimConfig& c) {
  nlohmann::json j;
  j["eta"] = c.eta;
  j["H"] = c.H;
  j["T"] = c.T;
  j["n"] = c.n;
  j["g"] = c.g;
  switch (c.estimator) {
    case Estimator::GaussianClosedForm: j["estimator"] = "gaussian"; break;
    case Estimator::Reinforce: j["estimator"] = "reinforce"; break;
    case Estimator::RegressionReparam: j["estimator"] = "regression-reparam"; break;
  }
  j["horizon"] = c.horizon_mode == HorizonMode::WindowH ? "window" : "full";
  j["split_dataset"] = c.split_dataset;
  j["init_steps"] = c.init_steps;
  if (c.theta0.size() > 0) j["theta0"] = vec_json(c.theta0);
  j["beta_ridge"] = c.beta_ridge;
  j["sample_covariance"] = c.sample_covariance;
  return j;
}

}  // namespace detail

// canonical form hashed for the ground-truth sidecar; output location and
// format flags are excluded so a config identifies the computation alone
inline nlohmann::json config_json(const ExperimentConfig& cfg) {
  nlohmann::json j;
  j["name"] = cfg.name;
  j["env"] = detail::env_json(cfg.env);
  j["loss"] = detail::loss_json(cfg.loss);
  nlohmann::json opts = nlohmann::json::array();
  for (const auto& run : cfg.optimizers) {
    nlohmann::json o = detail::optim_json(run.optim);
    o["algo"] = algo_name(run.algo);
    opts.push_back(std::move(o));
  }
  j["optimizers"] = std::move(opts);
  j["trials"] = cfg.trials;
  j["base_seed"] = cfg.base_seed;
  return j;
}

inline std::uint64_t config_hash(const ExperimentConfig& cfg) {
  return fnv1a64(config_json(cfg).dump());
}

// ---------------------------------------------------------------------------
// presets

namespace detail {

inline OptimConfig base_optim(int T, int n) {
  OptimConfig c;
  c.eta = 0.1;
  c.T = T;
  c.n = n;
  return c;
}

}  // namespace detail

inline ExperimentConfig preset_toy_linear() {
  ExperimentConfig cfg;
  cfg.name = "toy_linear";
  cfg.env = EnvSpec::linear_mean(1.0, 1.0, 0.1, make_box(-1.0, 1.0));
  cfg.loss = linear_revenue(1.0);
  OptimConfig base = detail::base_optim(200, 1000);
  base.H = 4;
  cfg.optimizers.push_back({Algo::RGD, base});
  cfg.optimizers.push_back({Algo::PerfGD, base});
  return cfg;
}

inline ExperimentConfig preset_toy_linear_rrm() {
  ExperimentConfig cfg;
  cfg.name = "toy_linear_rrm";
  cfg.env = EnvSpec::linear_mean(2.0, 0.5, 0.01, make_box(-1.0, 1.0));
  cfg.loss = linear_revenue(1.0);
  OptimConfig base = detail::base_optim(60, 1000);
  base.theta0 = Vec::Constant(1, 1.0);
  cfg.optimizers.push_back({Algo::RRM, base});
  return cfg;
}

inline ExperimentConfig preset_toy_sqrt() {
  ExperimentConfig cfg;
  cfg.name = "toy_sqrt";
  cfg.env = EnvSpec::sqrt_mean(1.0, 1.0, 1.0, make_box(-1.0, 1.0));
  cfg.loss = linear_revenue(1.0);
  OptimConfig base = detail::base_optim(100, 500);
  base.H = 4;
  base.init_steps = 1;
  cfg.optimizers.push_back({Algo::RGD, base});
  cfg.optimizers.push_back({Algo::PerfGD, base});
  return cfg;
}

inline ExperimentConfig preset_mixture() {
  ExperimentConfig cfg;
  cfg.name = "mixture";
  cfg.env = EnvSpec::mixture(0.5, MixtureComponent{1.0, -0.5, 1.0},
                             MixtureComponent{-0.3, 1.0, 0.25}, make_box(-1.0, 1.0));
  cfg.loss = linear_revenue(1.0);
  OptimConfig base = detail::base_optim(100, 1000);
  base.horizon_mode = HorizonMode::FullHistory;
  base.init_steps = 1;
  cfg.optimizers.push_back({Algo::RGD, base});
  cfg.optimizers.push_back({Algo::PerfGD, base});
  return cfg;
}

inline ExperimentConfig preset_pricing() {
  ExperimentConfig cfg;
  cfg.name = "pricing";
  Vec mu0(5);
  mu0 << 6.55, 6.72, 6.60, 6.54, 6.42;
  cfg.env = EnvSpec::pricing(mu0, 1.5, Mat::Identity(5, 5), make_box(0.0, 5.0, 5));
  cfg.loss = linear_revenue(-1.0);
  OptimConfig base = detail::base_optim(100, 500);
  base.horizon_mode = HorizonMode::FullHistory;
  base.init_steps = 14;
  cfg.optimizers.push_back({Algo::RRM, base});
  cfg.optimizers.push_back({Algo::RGD, base});
  cfg.optimizers.push_back({Algo::PerfGD, base});
  return cfg;
}

inline ExperimentConfig preset_classification() {
  ExperimentConfig cfg;
  cfg.name = "classification";
  cfg.env = EnvSpec::classification(0.5, 1.0, 0.25, -1.0, 0.25, 3.0, make_box(-5.0, 5.0, 2));
  cfg.loss = ridge_xent(1e-2);
  OptimConfig base = detail::base_optim(100, 500);
  base.horizon_mode = HorizonMode::FullHistory;
  base.init_steps = 1;
  cfg.optimizers.push_back({Algo::RRM, base});
  cfg.optimizers.push_back({Algo::RGD, base});
  cfg.optimizers.push_back({Algo::PerfGD, base});
  return cfg;
}

inline ExperimentConfig preset_regression() {
  ExperimentConfig cfg;
  cfg.name = "regression";
  cfg.env = EnvSpec::regression(1.67, 1.0, 1.67, 1.67, 4.12, make_box(-10.0, 10.0));
  cfg.loss = ridge_squared(3.33);
  OptimConfig base = detail::base_optim(100, 500);
  base.horizon_mode = HorizonMode::FullHistory;
  base.init_steps = 1;
  OptimConfig pg = base;
  pg.estimator = Estimator::RegressionReparam;
  cfg.optimizers.push_back({Algo::RRM, base});
  cfg.optimizers.push_back({Algo::RGD, base});
  cfg.optimizers.push_back({Algo::PerfGD, pg});
  return cfg;
}

inline std::vector<std::string> preset_names() {
  return {"toy_linear", "toy_linear_rrm", "toy_sqrt", "mixture",
          "pricing", "classification", "regression"};
}

inline ExperimentConfig preset(const std::string& name) {
  if (name == "toy_linear") return preset_toy_linear();
  if (name == "toy_linear_rrm") return preset_toy_linear_rrm();
  if (name == "toy_sqrt") return preset_toy_sqrt();
  if (name == "mixture") return preset_mixture();
  if (name == "pricing") return preset_pricing();
  if (name == "classification") return preset_classification();
  if (name == "regression") return preset_regression();
  throw ConfigError("unknown preset '" + name + "'");
}

// ---------------------------------------------------------------------------
// config parsing

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::vector<std::string>& allowed,
                           const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
      throw ConfigError("unknown field '" + it.key() + "' in " + where);
  }
}

inline double need_num(const nlohmann::json& j, const std::string& key, const std::string& where) {
  if (!j.contains(key)) throw ConfigError("missing field '" + key + "' in " + where);
  if (!j.at(key).is_number()) throw ConfigError("field '" + key + "' in " + where + " must be a number");
  return j.at(key).get<double>();
}

inline Vec vec_from(const nlohmann::json& j, const std::string& key, const std::string& where) {
  if (!j.contains(key) || !j.at(key).is_array())
    throw ConfigError("field '" + key + "' in " + where + " must be an array");
  const auto& a = j.at(key);
  Vec v(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) v(static_cast<int>(i)) = a[i].get<double>();
  return v;
}

inline Box box_from(const nlohmann::json& j, const std::string& where) {
  Box b{vec_from(j, "lo", where), vec_from(j, "hi", where)};
  if (b.lo.size() != b.hi.size()) throw ConfigError("lo and hi disagree in " + where);
  return b;
}

inline MixtureComponent component_from(const nlohmann::json& j, const std::string& where) {
  reject_unknown(j, {"a1", "a0", "var"}, where);
  return {need_num(j, "a1", where), need_num(j, "a0", where), need_num(j, "var", where)};
}

inline EnvSpec env_from(const nlohmann::json& j) {
  const std::string where = "env";
  if (!j.contains("family")) throw ConfigError("missing field 'family' in env");
  const std::string fam = j.at("family").get<std::string>();
  if (fam == "linear_mean" || fam == "sqrt_mean") {
    reject_unknown(j, {"family", "a1", "a0", "sigma2", "lo", "hi"}, where);
    const double a1 = need_num(j, "a1", where), a0 = need_num(j, "a0", where);
    const double s2 = need_num(j, "sigma2", where);
    Box b = box_from(j, where);
    return fam == "linear_mean" ? EnvSpec::linear_mean(a1, a0, s2, std::move(b))
                                : EnvSpec::sqrt_mean(a1, a0, s2, std::move(b));
  }
  if (fam == "mixture") {
    reject_unknown(j, {"family", "gamma", "c1", "c2", "lo", "hi"}, where);
    if (!j.contains("c1") || !j.contains("c2"))
      throw ConfigError("mixture env needs components 'c1' and 'c2'");
    return EnvSpec::mixture(need_num(j, "gamma", where),
                            component_from(j.at("c1"), "env.c1"),
                            component_from(j.at("c2"), "env.c2"), box_from(j, where));
  }
  if (fam == "pricing") {
    reject_unknown(j, {"family", "mu0", "eps", "Sigma", "lo", "hi"}, where);
    Vec mu0 = vec_from(j, "mu0", where);
    const int d = static_cast<int>(mu0.size());
    Mat Sigma = Mat::Identity(d, d);
    if (j.contains("Sigma")) {
      const auto& rows = j.at("Sigma");
      if (!rows.is_array() || static_cast<int>(rows.size()) != d)
        throw ConfigError("Sigma must be a " + std::to_string(d) + "-row matrix");
      for (int r = 0; r < d; ++r) {
        const auto& row = rows[r];
        if (!row.is_array() || static_cast<int>(row.size()) != d)
          throw ConfigError("Sigma must be square");
        for (int c = 0; c < d; ++c) Sigma(r, c) = row[c].get<double>();
      }
    }
    return EnvSpec::pricing(std::move(mu0), need_num(j, "eps", where), std::move(Sigma),
                            box_from(j, where));
  }
  if (fam == "classification") {
    reject_unknown(j, {"family", "gamma", "mu0", "var0", "mu1", "var1", "eps", "lo", "hi"}, where);
    return EnvSpec::classification(need_num(j, "gamma", where), need_num(j, "mu0", where),
                                   need_num(j, "var0", where), need_num(j, "mu1", where),
                                   need_num(j, "var1", where), need_num(j, "eps", where),
                                   box_from(j, where));
  }
  if (fam == "regression") {
    reject_unknown(j, {"family", "x_mean", "x_var", "b0", "b1", "noise_var", "lo", "hi"}, where);
    return EnvSpec::regression(need_num(j, "x_mean", where), need_num(j, "x_var", where),
                               need_num(j, "b0", where), need_num(j, "b1", where),
                               need_num(j, "noise_var", where), box_from(j, where));
  }
  throw ConfigError("unknown env family '" + fam + "'");
}

inline LossSpec loss_from(const nlohmann::json& j) {
  reject_unknown(j, {"kind", "lambda", "sign"}, "loss");
  if (!j.contains("kind")) throw ConfigError("missing field 'kind' in loss");
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "linear_revenue") {
    LossSpec l = linear_revenue(j.value("sign", -1.0));
    if (j.contains("lambda")) throw ConfigError("linear_revenue takes no 'lambda'");
    return l;
  }
  if (kind == "ridge_xent") return ridge_xent(need_num(j, "lambda", "loss"));
  if (kind == "ridge_squared") return ridge_squared(need_num(j, "lambda", "loss"));
  throw ConfigError("unknown loss kind '" + kind + "'");
}

inline void apply_optim(OptimConfig& c, const nlohmann::json& j, const std::string& where) {
  reject_unknown(j,
                 {"eta", "H", "T", "n", "g", "g_delta", "g_const", "estimator", "horizon",
                  "split_dataset", "init_steps", "theta0", "beta_ridge", "sample_covariance"},
                 where);
  if (j.contains("eta")) c.eta = need_num(j, "eta", where);
  if (j.contains("H")) c.H = j.at("H").get<int>();
  if (j.contains("T")) c.T = j.at("T").get<int>();
  if (j.contains("n")) c.n = j.at("n").get<int>();
  if (j.contains("g")) c.g = need_num(j, "g", where);
  if (j.contains("g_delta") != j.contains("g_const"))
    throw ConfigError("'g_delta' and 'g_const' must be given together in " + where);
  if (j.contains("g_delta"))
    c.g = stopping_rule(need_num(j, "g_delta", where), need_num(j, "g_const", where));
  if (j.contains("estimator")) {
    const std::string e = j.at("estimator").get<std::string>();
    if (e == "gaussian") c.estimator = Estimator::GaussianClosedForm;
    else if (e == "reinforce") c.estimator = Estimator::Reinforce;
    else if (e == "regression-reparam") c.estimator = Estimator::RegressionReparam;
    else throw ConfigError("unknown estimator '" + e + "' in " + where);
  }
  if (j.contains("horizon")) {
    const std::string h = j.at("horizon").get<std::string>();
    if (h == "window") c.horizon_mode = HorizonMode::WindowH;
    else if (h == "full") c.horizon_mode = HorizonMode::FullHistory;
    else throw ConfigError("unknown horizon mode '" + h + "' in " + where);
  }
  if (j.contains("split_dataset")) c.split_dataset = j.at("split_dataset").get<bool>();
  if (j.contains("init_steps")) c.init_steps = j.at("init_steps").get<int>();
  if (j.contains("theta0")) c.theta0 = vec_from(j, "theta0", where);
  if (j.contains("beta_ridge")) c.beta_ridge = need_num(j, "beta_ridge", where);
  if (j.contains("sample_covariance")) c.sample_covariance = j.at("sample_covariance").get<bool>();
}

inline void apply_emit(ExperimentConfig& cfg, const nlohmann::json& j) {
  if (!j.is_array()) throw ConfigError("'emit' must be an array of formats");
  cfg.emit_csv = false;
  cfg.emit_json = false;
  for (const auto& f : j) {
    const std::string s = f.get<std::string>();
    if (s == "csv") cfg.emit_csv = true;
    else if (s == "json") cfg.emit_json = true;
    else throw ConfigError("unknown emit format '" + s + "'");
  }
}

// preset references allow overriding run bookkeeping and optimizer knobs but
// not the environment; a different environment is a different experiment
inline ExperimentConfig parse_preset_config(const nlohmann::json& j) {
  reject_unknown(j,
                 {"preset", "name", "trials", "base_seed", "out", "emit", "optim", "rgd", "rrm",
                  "perfgd"},
                 "config");
  ExperimentConfig cfg = preset(j.at("preset").get<std::string>());
  if (j.contains("name")) cfg.name = j.at("name").get<std::string>();
  if (j.contains("trials")) cfg.trials = j.at("trials").get<int>();
  if (j.contains("base_seed")) cfg.base_seed = j.at("base_seed").get<std::uint64_t>();
  if (j.contains("out")) cfg.out_dir = j.at("out").get<std::string>();
  if (j.contains("emit")) apply_emit(cfg, j.at("emit"));
  if (j.contains("optim"))
    for (auto& run : cfg.optimizers) apply_optim(run.optim, j.at("optim"), "optim");
  for (const char* key : {"rgd", "rrm", "perfgd"}) {
    if (!j.contains(key)) continue;
    const Algo a = algo_from_name(key);
    bool hit = false;
    for (auto& run : cfg.optimizers)
      if (run.algo == a) {
        apply_optim(run.optim, j.at(key), key);
        hit = true;
      }
    if (!hit) throw ConfigError(std::string("preset has no '") + key + "' optimizer to override");
  }
  return cfg;
}

inline ExperimentConfig parse_full_config(const nlohmann::json& j) {
  reject_unknown(j,
                 {"name", "env", "loss", "optimizers", "optim", "rgd", "rrm", "perfgd", "trials",
                  "base_seed", "out", "emit"},
                 "config");
  for (const char* key : {"name", "env", "loss", "optimizers"})
    if (!j.contains(key)) throw ConfigError(std::string("missing field '") + key + "' in config");
  ExperimentConfig cfg;
  cfg.name = j.at("name").get<std::string>();
  cfg.env = env_from(j.at("env"));
  cfg.loss = loss_from(j.at("loss"));
  if (!j.at("optimizers").is_array()) throw ConfigError("'optimizers' must be an array");
  OptimConfig base;
  if (j.contains("optim")) apply_optim(base, j.at("optim"), "optim");
  for (const auto& o : j.at("optimizers")) {
    const Algo a = algo_from_name(o.get<std::string>());
    OptimConfig oc = base;
    const char* key = algo_name(a);
    if (j.contains(key)) apply_optim(oc, j.at(key), key);
    cfg.optimizers.push_back({a, oc});
  }
  if (j.contains("trials")) cfg.trials = j.at("trials").get<int>();
  if (j.contains("base_seed")) cfg.base_seed = j.at("base_seed").get<std::uint64_t>();
  if (j.contains("out")) cfg.out_dir = j.at("out").get<std::string>();
  if (j.contains("emit")) apply_emit(cfg, j.at("emit"));
  return cfg;
}

}  // namespace detail

inline ExperimentConfig parse_config(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  ExperimentConfig cfg = j.contains("preset") ? detail::parse_preset_config(j)
                                              : detail::parse_full_config(j);
  validate(cfg);
  return cfg;
}

inline ExperimentConfig parse_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  return parse_config(j);
}

// ---------------------------------------------------------------------------
// execution

namespace detail {

inline int parallelism_limit() {
  if (const char* s = std::getenv("PERFGD_MAX_PARALLEL")) {
    const int v = std::atoi(s);
    if (v >= 1) return v;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

inline std::vector<IterAggregate> aggregate_rows(const std::vector<TrialRecord>& trials, int p) {
  std::size_t max_rows = 0;
  for (const auto& tr : trials) max_rows = std::max(max_rows, tr.rows.size());
  std::vector<IterAggregate> out;
  out.reserve(max_rows);
  for (std::size_t t = 0; t < max_rows; ++t) {
    IterAggregate agg;
    agg.t = static_cast<int>(t);
    Vec sum = Vec::Zero(p), sq = Vec::Zero(p);
    double ls = 0, lq = 0, gs = 0, gq = 0;
    int m = 0;
    for (const auto& tr : trials) {
      if (t >= tr.rows.size()) continue;
      const IterRow& r = tr.rows[t];
      sum += r.theta;
      sq += r.theta.cwiseProduct(r.theta);
      ls += r.loss;
      lq += r.loss * r.loss;
      gs += r.gradnorm;
      gq += r.gradnorm * r.gradnorm;
      ++m;
    }
    if (m == 0) continue;
    agg.contributing = m;
    agg.theta_mean = sum / m;
    agg.loss_mean = ls / m;
    agg.gradnorm_mean = gs / m;
    if (m > 1) {
      const double shrink = 1.0 / (m - 1), root = std::sqrt(static_cast<double>(m));
      Vec var = (sq - sum.cwiseProduct(sum) / m).cwiseMax(0.0) * shrink;
      agg.theta_sem = var.cwiseSqrt() / root;
      agg.loss_sem = std::sqrt(std::max(0.0, (lq - ls * ls / m) * shrink)) / root;
      agg.gradnorm_sem = std::sqrt(std::max(0.0, (gq - gs * gs / m) * shrink)) / root;
    } else {
      agg.theta_sem = Vec::Zero(p);
      agg.loss_sem = 0;
      agg.gradnorm_sem = 0;
    }
    out.push_back(std::move(agg));
  }
  return out;
}

}  // namespace detail

// ground truth for the sidecar; families without closed-form reference points
// fall back to the root-finding oracle
inline GroundTruth reference_truth(const EnvSpec& env, const LossSpec& loss) {
  GroundTruth gt = analytic_ground_truth(env, loss);
  if (!gt.theta_opt && !gt.theta_stab) gt = numeric_ground_truth(env, loss);
  return gt;
}

inline AggregateResult run_experiment(const ExperimentConfig& cfg) {
  validate(cfg);
  AggregateResult res;
  res.cfg = cfg;
  res.config_hash = config_hash(cfg);
  res.runs.resize(cfg.optimizers.size());
  for (std::size_t i = 0; i < cfg.optimizers.size(); ++i) {
    res.runs[i].algo = cfg.optimizers[i].algo;
    res.runs[i].trials.resize(cfg.trials);
    res.runs[i].trial_errors.assign(cfg.trials, "");
  }

  struct Task {
    std::size_t run;
    int trial;
  };
  std::vector<Task> tasks;
  for (std::size_t i = 0; i < cfg.optimizers.size(); ++i)
    for (int k = 0; k < cfg.trials; ++k) tasks.push_back({i, k});

  // slots are preassigned, so completion order never affects the result
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      const std::size_t id = next.fetch_add(1);
      if (id >= tasks.size()) return;
      const Task& task = tasks[id];
      OptimConfig oc = cfg.optimizers[task.run].optim;
      oc.seed.seed = cfg.base_seed + static_cast<std::uint64_t>(task.trial);
      try {
        res.runs[task.run].trials[task.trial] =
            run(cfg.optimizers[task.run].algo, cfg.env, cfg.loss, oc);
      } catch (const std::exception& e) {
        res.runs[task.run].trial_errors[task.trial] = e.what();
      }
    }
  };
  const int workers =
      std::min<int>(detail::parallelism_limit(), static_cast<int>(tasks.size()));
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  std::size_t clean = 0;
  for (const auto& run : res.runs)
    for (const auto& err : run.trial_errors)
      if (err.empty()) ++clean;
  if (clean == 0) {
    std::string first;
    for (const auto& run : res.runs)
      for (const auto& err : run.trial_errors)
        if (first.empty() && !err.empty()) first = err;
    throw EstimError("experiment '" + cfg.name + "': all trials aborted: " + first);
  }

  const int p = param_dim(cfg.env);
  for (auto& run : res.runs) run.aggregate = detail::aggregate_rows(run.trials, p);
  res.truth = reference_truth(cfg.env, cfg.loss);
  return res;
}

// ---------------------------------------------------------------------------
// emission

namespace detail {

inline void csv_row(std::string& out, const std::string& experiment, const char* optimizer,
                    const std::string& trial, int t, const Vec& theta, double loss_mean,
                    double loss_sem, double gn_mean, double gn_sem, double oracle) {
  out += experiment;
  out += ',';
  out += optimizer;
  out += ',';
  out += trial;
  out += ',';
  out += std::to_string(t);
  for (int i = 0; i < theta.size(); ++i) {
    out += ',';
    out += fmt_double(theta(i));
  }
  for (double v : {loss_mean, loss_sem, gn_mean, gn_sem, oracle}) {
    out += ',';
    out += fmt_double(v);
  }
  out += '\n';
}

}  // namespace detail

inline std::string render_csv(const AggregateResult& res) {
  const int p = param_dim(res.cfg.env);
  std::string out = "experiment,optimizer,trial,iter";
  for (int i = 0; i < p; ++i) out += ",theta_" + std::to_string(i);
  out += ",loss_mean,loss_sem,gradnorm_mean,gradnorm_sem,loss_oracle\n";
  for (const auto& run : res.runs) {
    const char* opt = algo_name(run.algo);
    for (std::size_t k = 0; k < run.trials.size(); ++k) {
      const std::string trial = std::to_string(k);
      for (const IterRow& r : run.trials[k].rows)
        detail::csv_row(out, res.cfg.name, opt, trial, r.t, r.theta, r.loss, 0.0, r.gradnorm, 0.0,
                        closed_form_loss(res.cfg.env, res.cfg.loss, r.theta));
    }
    for (const IterAggregate& a : run.aggregate)
      detail::csv_row(out, res.cfg.name, opt, "agg", a.t, a.theta_mean, a.loss_mean, a.loss_sem,
                      a.gradnorm_mean, a.gradnorm_sem,
                      closed_form_loss(res.cfg.env, res.cfg.loss, a.theta_mean));
  }
  return out;
}

inline nlohmann::json render_json(const AggregateResult& res) {
  nlohmann::json doc;
  doc["experiment"] = res.cfg.name;
  doc["config_hash"] = res.config_hash;
  nlohmann::json rows = nlohmann::json::array();
  auto push = [&](const char* opt, const std::string& trial, int t, const Vec& theta,
                  double loss_mean, double loss_sem, double gn_mean, double gn_sem,
                  double oracle) {
    nlohmann::json r;
    r["experiment"] = res.cfg.name;
    r["optimizer"] = opt;
    r["trial"] = trial;
    r["iter"] = t;
    for (int i = 0; i < theta.size(); ++i) r["theta_" + std::to_string(i)] = theta(i);
    r["loss_mean"] = loss_mean;
    r["loss_sem"] = loss_sem;
    r["gradnorm_mean"] = gn_mean;
    r["gradnorm_sem"] = gn_sem;
    r["loss_oracle"] = oracle;
    rows.push_back(std::move(r));
  };
  for (const auto& run : res.runs) {
    const char* opt = algo_name(run.algo);
    for (std::size_t k = 0; k < run.trials.size(); ++k)
      for (const IterRow& r : run.trials[k].rows)
        push(opt, std::to_string(k), r.t, r.theta, r.loss, 0.0, r.gradnorm, 0.0,
             closed_form_loss(res.cfg.env, res.cfg.loss, r.theta));
    for (const IterAggregate& a : run.aggregate)
      push(opt, "agg", a.t, a.theta_mean, a.loss_mean, a.loss_sem, a.gradnorm_mean, a.gradnorm_sem,
           closed_form_loss(res.cfg.env, res.cfg.loss, a.theta_mean));
  }
  doc["rows"] = std::move(rows);
  return doc;
}

inline nlohmann::json render_groundtruth(const AggregateResult& res) {
  char hex[32];
  std::snprintf(hex, sizeof(hex), "%016llx",
                static_cast<unsigned long long>(res.config_hash));
  nlohmann::json doc;
  doc["experiment"] = res.cfg.name;
  doc["config_hash"] = hex;
  doc["theta_opt"] = res.truth.theta_opt ? detail::vec_json(res.truth.theta_opt->values)
                                         : nlohmann::json();
  doc["theta_stab"] = res.truth.theta_stab ? detail::vec_json(res.truth.theta_stab->values)
                                           : nlohmann::json();
  doc["loss_at_opt"] = res.truth.loss_at_opt ? nlohmann::json(*res.truth.loss_at_opt)
                                             : nlohmann::json();
  doc["loss_at_stab"] = res.truth.loss_at_stab ? nlohmann::json(*res.truth.loss_at_stab)
                                               : nlohmann::json();
  return doc;
}

namespace detail {

inline void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw EstimError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw EstimError("write failed for '" + path.string() + "'");
}

}  // namespace detail

inline std::vector<std::string> emit(const AggregateResult& res) {
  namespace fs = std::filesystem;
  const fs::path dir = res.cfg.out_dir.empty() ? fs::path(".") : fs::path(res.cfg.out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw EstimError("cannot create output directory '" + dir.string() + "'");
  std::vector<std::string> written;
  if (res.cfg.emit_csv) {
    const fs::path p = dir / (res.cfg.name + ".csv");
    detail::write_file(p, render_csv(res));
    written.push_back(p.string());
  }
  if (res.cfg.emit_json) {
    const fs::path p = dir / (res.cfg.name + ".json");
    detail::write_file(p, render_json(res).dump(2) + "\n");
    written.push_back(p.string());
  }
  const fs::path gt = dir / (res.cfg.name + "_groundtruth.json");
  detail::write_file(gt, render_groundtruth(res).dump(2) + "\n");
  written.push_back(gt.string());
  return written;
}

inline std::string render_sweep_csv(const SweepResult& s) {
  std::string out = s.axis + "," + s.measure + "\n";
  for (std::size_t i = 0; i < s.values.size(); ++i)
    out += detail::fmt_double(s.values[i]) + "," + detail::fmt_double(s.measured[i]) + "\n";
  return out;
}

}  // namespace perfgd
