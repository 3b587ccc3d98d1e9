#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "fixtures.hpp"
#include "perfgd/bench.hpp"

using namespace perfgd;

namespace {

ExperimentConfig tiny_cfg() {
  ExperimentConfig cfg = preset_toy_linear();
  cfg.name = "tiny";
  cfg.trials = 2;
  for (auto& r : cfg.optimizers) {
    r.optim.T = 5;
    r.optim.n = 32;
  }
  return cfg;
}

std::size_t count_lines(const std::string& s) {
  std::size_t n = 0;
  for (char c : s)
    if (c == '\n') ++n;
  return n;
}

std::size_t count_sub(const std::string& s, const std::string& sub) {
  std::size_t n = 0;
  for (std::size_t at = s.find(sub); at != std::string::npos; at = s.find(sub, at + 1)) ++n;
  return n;
}

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("perfgd_test_" + std::to_string(::getpid()) + "_" +
            std::to_string(std::rand()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("optimizer names round-trip", "[bench]") {
  for (Algo a : {Algo::RGD, Algo::RRM, Algo::PerfGD}) CHECK(algo_from_name(algo_name(a)) == a);
  CHECK_THROWS_AS(algo_from_name("sgd"), ConfigError);
}

TEST_CASE("presets are self-consistent", "[bench]") {
  for (const std::string& name : preset_names()) {
    ExperimentConfig cfg = preset(name);
    CHECK(cfg.name == name);
    CHECK_NOTHROW(validate(cfg));
    CHECK(cfg.trials == 10);
    CHECK(cfg.base_seed == 0);
    for (const auto& r : cfg.optimizers) CHECK(r.optim.eta == 0.1);
  }
  CHECK_THROWS_AS(preset("nope"), ConfigError);
}

TEST_CASE("preset constants are frozen", "[bench]") {
  ExperimentConfig sq = preset_toy_sqrt();
  CHECK(sq.env.family == Family::SqrtMeanGaussian);
  CHECK(true_f(sq.env, fixtures::vec1(0.0))(0) == 1.0);
  CHECK(noise_covariance(sq.env)(0, 0) == 1.0);
  CHECK(sq.loss.kind == LossKind::LinearRevenue);
  CHECK(sq.loss.sign == 1.0);
  REQUIRE(sq.optimizers.size() == 2);
  for (const auto& r : sq.optimizers) {
    CHECK(r.optim.T == 100);
    CHECK(r.optim.n == 500);
    CHECK(r.optim.H == 4);
    CHECK(r.optim.init_steps == 1);
  }

  ExperimentConfig pr = preset_pricing();
  CHECK(param_dim(pr.env) == 5);
  CHECK(pr.env.domain.lo(0) == 0.0);
  CHECK(pr.env.domain.hi(4) == 5.0);
  CHECK(pr.loss.sign == -1.0);
  REQUIRE(pr.optimizers.size() == 3);
  CHECK(pr.optimizers[0].algo == Algo::RRM);
  CHECK(pr.optimizers[2].algo == Algo::PerfGD);
  for (const auto& r : pr.optimizers) {
    CHECK(r.optim.init_steps == 14);
    CHECK(r.optim.horizon_mode == HorizonMode::FullHistory);
  }

  ExperimentConfig rg = preset_regression();
  CHECK(rg.optimizers[2].optim.estimator == Estimator::RegressionReparam);
  CHECK(rg.optimizers[0].optim.estimator == Estimator::GaussianClosedForm);
}

TEST_CASE("experiment validation rejects bad configs", "[bench]") {
  ExperimentConfig cfg = tiny_cfg();
  cfg.name = "";
  CHECK_THROWS_AS(validate(cfg), ConfigError);

  cfg = tiny_cfg();
  cfg.trials = 0;
  CHECK_THROWS_AS(validate(cfg), ConfigError);

  cfg = tiny_cfg();
  cfg.optimizers.clear();
  CHECK_THROWS_AS(validate(cfg), ConfigError);

  cfg = tiny_cfg();
  cfg.optimizers[1].optim.estimator = Estimator::RegressionReparam;
  CHECK_THROWS_AS(validate(cfg), ConfigError);

  cfg = tiny_cfg();
  cfg.optimizers[0].optim.eta = -1;
  CHECK_THROWS_AS(validate(cfg), ConfigError);
}

TEST_CASE("config_hash tracks the computation, not the bookkeeping", "[bench]") {
  ExperimentConfig a = tiny_cfg();
  ExperimentConfig b = tiny_cfg();
  CHECK(config_hash(a) == config_hash(b));

  b.optimizers[0].optim.eta = 0.2;
  CHECK(config_hash(a) != config_hash(b));

  ExperimentConfig c = tiny_cfg();
  c.out_dir = "/somewhere/else";
  c.emit_json = true;
  CHECK(config_hash(a) == config_hash(c));

  ExperimentConfig d = tiny_cfg();
  d.base_seed = 1;
  CHECK(config_hash(a) != config_hash(d));
}

TEST_CASE("parse_config resolves presets faithfully", "[bench]") {
  std::string text = R"({"preset": "toy_sqrt"})";
  ExperimentConfig got = parse_config(text);
  CHECK(config_json(got) == config_json(preset_toy_sqrt()));
}

TEST_CASE("parse_config applies overrides", "[bench]") {
  std::string text = R"({
    "preset": "toy_sqrt",
    "name": "sqrt_small",
    "trials": 3,
    "base_seed": 7,
    "out": "outdir",
    "emit": ["csv", "json"],
    "optim": {"eta": 0.2},
    "perfgd": {"H": 6}
  })";
  ExperimentConfig cfg = parse_config(text);
  CHECK(cfg.name == "sqrt_small");
  CHECK(cfg.trials == 3);
  CHECK(cfg.base_seed == 7);
  CHECK(cfg.out_dir == "outdir");
  CHECK(cfg.emit_csv);
  CHECK(cfg.emit_json);
  REQUIRE(cfg.optimizers.size() == 2);
  CHECK(cfg.optimizers[0].optim.eta == 0.2);
  CHECK(cfg.optimizers[1].optim.eta == 0.2);
  CHECK(cfg.optimizers[0].optim.H == 4);   // rgd keeps the preset window
  CHECK(cfg.optimizers[1].optim.H == 6);   // perfgd overridden
}

TEST_CASE("parse_config rejects malformed documents", "[bench]") {
  CHECK_THROWS_AS(parse_config(std::string("{not json")), ConfigError);
  CHECK_THROWS_AS(parse_config(std::string(R"(["list"])")), ConfigError);
  CHECK_THROWS_AS(parse_config(std::string(R"({"preset": "nope"})")), ConfigError);
  CHECK_THROWS_MATCHES(
      parse_config(std::string(R"({"preset": "toy_sqrt", "bogus": 1})")), ConfigError,
      Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("bogus")));
  CHECK_THROWS_MATCHES(
      parse_config(std::string(R"({"preset": "toy_sqrt", "rrm": {"eta": 0.2}})")), ConfigError,
      Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("rrm")));
  CHECK_THROWS_AS(parse_config(std::string(R"({"name": "x"})")), ConfigError);
  CHECK_THROWS_AS(parse_config(std::string(
                      R"({"preset": "toy_sqrt", "optim": {"g_delta": 1e-5}})")),
                  ConfigError);
}

TEST_CASE("paired stop fields install the matched threshold", "[bench]") {
  std::string text = R"({"preset": "toy_sqrt", "optim": {"g_delta": 1e-5, "g_const": 1.0}})";
  ExperimentConfig cfg = parse_config(text);
  for (const auto& r : cfg.optimizers)
    CHECK(r.optim.g == Catch::Approx(0.1).margin(1e-12));
}

TEST_CASE("parse_config builds experiments from scratch", "[bench]") {
  std::string text = R"({
    "name": "custom",
    "env": {"family": "linear_mean", "a1": 1.0, "a0": 1.0, "sigma2": 0.1,
            "lo": [-1.0], "hi": [1.0]},
    "loss": {"kind": "linear_revenue", "sign": 1.0},
    "optimizers": ["rgd", "perfgd"],
    "optim": {"T": 5, "n": 32, "H": 2},
    "perfgd": {"init_steps": 1},
    "trials": 2,
    "emit": ["json"]
  })";
  ExperimentConfig cfg = parse_config(text);
  CHECK(cfg.env.family == Family::LinearMeanGaussian);
  REQUIRE(cfg.optimizers.size() == 2);
  CHECK(cfg.optimizers[0].algo == Algo::RGD);
  CHECK(cfg.optimizers[0].optim.init_steps == -1);
  CHECK(cfg.optimizers[1].optim.init_steps == 1);
  CHECK_FALSE(cfg.emit_csv);
  CHECK(cfg.emit_json);
  CHECK_NOTHROW(run_experiment(cfg));
}

TEST_CASE("run_experiment fills preassigned slots deterministically", "[bench]") {
  ExperimentConfig cfg = tiny_cfg();
  AggregateResult res = run_experiment(cfg);
  REQUIRE(res.runs.size() == 2);
  CHECK(res.config_hash == config_hash(cfg));
  for (const auto& run : res.runs) {
    REQUIRE(run.trials.size() == 2);
    for (const auto& err : run.trial_errors) CHECK(err.empty());
    for (const auto& tr : run.trials) CHECK(tr.rows.size() == 6);
    REQUIRE(run.aggregate.size() == 6);
    for (const auto& a : run.aggregate) CHECK(a.contributing == 2);
  }

  // each slot must hold exactly the standalone trial for its derived seed
  OptimConfig oc = cfg.optimizers[0].optim;
  oc.seed.seed = cfg.base_seed + 1;
  TrialRecord solo = run(cfg.optimizers[0].algo, cfg.env, cfg.loss, oc);
  REQUIRE(solo.rows.size() == res.runs[0].trials[1].rows.size());
  for (std::size_t t = 0; t < solo.rows.size(); ++t)
    CHECK(solo.rows[t].theta == res.runs[0].trials[1].rows[t].theta);

  // aggregates are the plain across-trial means
  const auto& agg = res.runs[0].aggregate[3];
  const auto& t0 = res.runs[0].trials[0].rows[3];
  const auto& t1 = res.runs[0].trials[1].rows[3];
  CHECK(agg.theta_mean(0) == Catch::Approx((t0.theta(0) + t1.theta(0)) / 2).margin(1e-15));
  CHECK(agg.loss_mean == Catch::Approx((t0.loss + t1.loss) / 2).margin(1e-15));
  CHECK(agg.loss_sem >= 0.0);

  // reference points for the experiment family ride along
  REQUIRE(res.truth.theta_opt.has_value());
  CHECK(res.truth.theta_opt->values(0) == Catch::Approx(-0.5).margin(1e-10));
}

TEST_CASE("single-trial aggregates report zero spread", "[bench]") {
  ExperimentConfig cfg = tiny_cfg();
  cfg.trials = 1;
  AggregateResult res = run_experiment(cfg);
  for (const auto& a : res.runs[0].aggregate) {
    CHECK(a.loss_sem == 0.0);
    CHECK(a.theta_sem(0) == 0.0);
    CHECK(a.contributing == 1);
  }
}

TEST_CASE("rendered CSV has the fixed schema", "[bench]") {
  ExperimentConfig cfg = tiny_cfg();
  AggregateResult res = run_experiment(cfg);
  std::string csv = render_csv(res);
  std::string header = csv.substr(0, csv.find('\n'));
  CHECK(header ==
        "experiment,optimizer,trial,iter,theta_0,loss_mean,loss_sem,gradnorm_mean,gradnorm_sem,"
        "loss_oracle");
  // 2 optimizers x (2 trials + aggregate) x 6 iters, plus the header
  CHECK(count_lines(csv) == 1 + 2 * 3 * 6);
  CHECK(count_sub(csv, ",agg,") == 2 * 6);
  CHECK(count_sub(csv, "tiny,rgd,0,0,") == 1);
}

TEST_CASE("reruns and thread counts leave the bytes unchanged", "[bench]") {
  ExperimentConfig cfg = tiny_cfg();
  ::setenv("PERFGD_MAX_PARALLEL", "1", 1);
  std::string serial = render_csv(run_experiment(cfg));
  ::setenv("PERFGD_MAX_PARALLEL", "4", 1);
  std::string threaded = render_csv(run_experiment(cfg));
  ::unsetenv("PERFGD_MAX_PARALLEL");
  std::string again = render_csv(run_experiment(cfg));
  CHECK(serial == threaded);
  CHECK(serial == again);
}

TEST_CASE("rendered JSON mirrors the CSV rows", "[bench]") {
  ExperimentConfig cfg = tiny_cfg();
  AggregateResult res = run_experiment(cfg);
  nlohmann::json doc = render_json(res);
  CHECK(doc.at("experiment") == "tiny");
  CHECK(doc.at("config_hash").get<std::uint64_t>() == res.config_hash);
  CHECK(doc.at("rows").size() == 2 * 3 * 6);
  const auto& first = doc.at("rows").at(0);
  CHECK(first.at("optimizer") == "rgd");
  CHECK(first.at("trial") == "0");
  CHECK(first.contains("theta_0"));
  CHECK(first.contains("loss_oracle"));

  std::string dump1 = render_json(res).dump();
  std::string dump2 = render_json(run_experiment(cfg)).dump();
  CHECK(dump1 == dump2);
}

TEST_CASE("ground-truth sidecar carries the reference points and hash", "[bench]") {
  ExperimentConfig cfg = tiny_cfg();
  AggregateResult res = run_experiment(cfg);
  nlohmann::json gt = render_groundtruth(res);
  std::string hex = gt.at("config_hash").get<std::string>();
  CHECK(hex.size() == 16);
  CHECK(hex.find_first_not_of("0123456789abcdef") == std::string::npos);
  REQUIRE(gt.at("theta_opt").is_array());
  CHECK(gt.at("theta_opt").at(0).get<double>() == Catch::Approx(-0.5).margin(1e-10));
  CHECK(gt.at("loss_at_opt").get<double>() == Catch::Approx(-0.25).margin(1e-10));
  CHECK(gt.at("theta_stab").at(0).get<double>() == Catch::Approx(-1.0).margin(1e-10));
}

TEST_CASE("emit writes the requested files plus the sidecar", "[bench]") {
  TempDir tmp;
  ExperimentConfig cfg = tiny_cfg();
  cfg.out_dir = (tmp.path / "sub").string();
  cfg.emit_json = true;
  AggregateResult res = run_experiment(cfg);
  std::vector<std::string> written = emit(res);
  REQUIRE(written.size() == 3);
  for (const std::string& p : written) {
    CAPTURE(p);
    CHECK(std::filesystem::exists(p));
    CHECK(std::filesystem::file_size(p) > 0);
  }
  CHECK(slurp(written[0]) == render_csv(res));
  nlohmann::json side = nlohmann::json::parse(slurp(written[2]));
  CHECK(side.at("experiment") == "tiny");
}

TEST_CASE("emit surfaces filesystem failures", "[bench]") {
  TempDir tmp;
  std::ofstream(tmp.path / "blocker") << "x";
  ExperimentConfig cfg = tiny_cfg();
  cfg.out_dir = (tmp.path / "blocker" / "sub").string();
  AggregateResult res = run_experiment(cfg);
  res.cfg.out_dir = cfg.out_dir;
  CHECK_THROWS_AS(emit(res), EstimError);
}

TEST_CASE("a failing optimizer is recorded without sinking the experiment", "[bench]") {
  ExperimentConfig cfg = preset_mixture();
  cfg.name = "partial";
  cfg.trials = 2;
  cfg.optimizers.resize(2);
  cfg.optimizers[0].optim.T = 3;
  cfg.optimizers[0].optim.n = 1;  // a one-point batch always leaves a component empty
  cfg.optimizers[1].optim.T = 3;
  cfg.optimizers[1].optim.n = 64;
  AggregateResult res = run_experiment(cfg);
  for (const auto& err : res.runs[0].trial_errors) CHECK_FALSE(err.empty());
  for (const auto& err : res.runs[1].trial_errors) CHECK(err.empty());
  CHECK(res.runs[0].aggregate.empty());
  CHECK(res.runs[1].aggregate.size() == 4);
  CHECK_NOTHROW(render_csv(res));
}

TEST_CASE("an experiment with no surviving trial aborts", "[bench]") {
  ExperimentConfig cfg;
  cfg.name = "doomed";
  cfg.env = EnvSpec::sqrt_mean(1.0, 0.0, 1.0, make_box(-1.0, 1.0));
  cfg.loss = linear_revenue(1.0);
  OptimConfig oc;
  oc.T = 3;
  oc.n = 16;
  oc.theta0 = fixtures::vec1(-0.5);  // every deployment lands outside the mean map's domain
  cfg.optimizers.push_back({Algo::RGD, oc});
  cfg.trials = 2;
  CHECK_THROWS_MATCHES(
      run_experiment(cfg), EstimError,
      Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("all trials aborted")));
}

TEST_CASE("sweep results render as two-column CSV", "[bench]") {
  SweepResult s;
  s.axis = "eta";
  s.measure = "err";
  s.values = {0.1, 1.0};
  s.measured = {2.0, 3.0};
  std::string csv = render_sweep_csv(s);
  CHECK(csv == "eta,err\n0.10000000000000001,2\n1,3\n");
}
