#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "pgt/benchmarks.hpp"

using namespace pgt;
using namespace pgt::bench;

namespace {

ModelConfig tiny(ModelConfig c) {
  c.d_model = 8;
  c.n_heads = 2;
  c.n_layers = 1;
  c.decoder_layers = 2;
  c.decoder_width = 8;
  c.pinn_depth = 2;
  c.pinn_width = 8;
  return c;
}

train::TrainConfig short_run(std::size_t steps) {
  train::TrainConfig t;
  t.steps = steps;
  t.n_r = 16;
  t.n_b = 8;
  t.n_0 = 8;
  t.eval_every = 1000;
  return t;
}

void perturb(model::ParamStore& ps, std::uint64_t seed) {
  Rng rng = make_stream(seed, "perturb");
  for (std::size_t i = 0; i < ps.size(); ++i) {
    for (double& v : ps.value(i).data()) v += uniform(rng, -0.3, 0.3);
  }
}

class ZeroModel : public model::AnalyticModel {
 public:
  explicit ZeroModel(const Problem& p)
      : AnalyticModel(p.configure({}), [](std::span<const double>, std::span<double> o) {
          std::fill(o.begin(), o.end(), 0.0);
        }) {}
};

}  // namespace

TEST(Metrics, OracleHasZeroErrorAndSmallResidual) {
  for (const Problem& p : {Problem::heat(), Problem::taylor_green()}) {
    const auto oracle = p.oracle();
    const auto obs = sample_sparse_observations(p, 50, 3);
    const EvalReport r = evaluate(oracle, p, obs, 1e-3);
    EXPECT_EQ(r.rel_l2_total, 0.0) << p.name();
    for (double c : r.rel_l2_channel) EXPECT_EQ(c, 0.0);
    EXPECT_LT(r.pde_residual, 1e-4) << p.name();
    EXPECT_EQ(r.data_loss, 0.0);
    EXPECT_EQ(r.train_error, 0.0);
  }
}

TEST(Metrics, ZeroModelHasUnitErrorPerChannel) {
  for (const Problem& p : {Problem::heat(), Problem::taylor_green()}) {
    const EvalReport r = evaluate(ZeroModel(p), p, {}, 1e-3);
    EXPECT_DOUBLE_EQ(r.rel_l2_total, 1.0);
    ASSERT_EQ(r.rel_l2_channel.size(), p.channels());
    for (double c : r.rel_l2_channel) EXPECT_DOUBLE_EQ(c, 1.0);
    EXPECT_EQ(r.pde_residual, 0.0);
  }
}

TEST(Metrics, ResidualMatchesDirectStencilEvaluation) {
  const Problem p = Problem::heat();
  model::SirenModel m(tiny(p.configure({})), 5);
  Rng rng = make_stream(2, "test");
  const Tensor pts = p.sample_interior(rng, 20);
  const physics::Field u([&](const physics::Coordinates& c) {
    Tensor q({1, 2}, {c.x[0], c.t});
    return m.predict(q)[0];
  });
  double direct = 0.0;
  for (const auto& c : model::to_coordinates(pts)) direct += std::abs(physics::heat_residual_1d(u, c, p.nu(), 1e-3, p.box()));
  direct /= 20.0;
  EXPECT_NEAR(mean_abs_residual(m, p, pts, 1e-3), direct, 1e-12 * std::max(1.0, direct));
}

TEST(Sampling, ZeroObservationsRejected) {
  EXPECT_THROW(sample_sparse_observations(Problem::heat(), 0, 1), InputError);
}

TEST(Sampling, SameSeedIsDeterministicAndInsideTheBox) {
  const Problem p = Problem::taylor_green();
  const auto a = sample_sparse_observations(p, 200, 7);
  const auto b = sample_sparse_observations(p, 200, 7);
  const auto c = sample_sparse_observations(p, 200, 8);
  EXPECT_EQ(a.coords.storage(), b.coords.storage());
  EXPECT_EQ(a.values.storage(), b.values.storage());
  EXPECT_NE(a.coords.storage(), c.coords.storage());
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t d = 0; d < 3; ++d) {
      EXPECT_GT(a.coords(i, d), p.lo()[d]);
      EXPECT_LT(a.coords(i, d), p.hi()[d]);
    }
    // |u|, |v| <= 1 for the vortex.
    EXPECT_LE(std::abs(a.values(i, 0)), 1.0);
    EXPECT_LE(std::abs(a.values(i, 1)), 1.0);
  }
}

TEST(Sampling, MonteCarloMeanMatchesTheDomainAverage) {
  const Problem p = Problem::heat();
  const std::size_t n = 20000;
  const auto obs = sample_sparse_observations(p, n, 11);
  double s = 0.0, s2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    s += obs.values[i];
    s2 += obs.values[i] * obs.values[i];
  }
  const double mean = s / n, se = std::sqrt((s2 / n - mean * mean) / n);
  const double k = p.nu() * std::numbers::pi * std::numbers::pi;
  const double exact = (2.0 / std::numbers::pi) * (1.0 - std::exp(-k)) / k;
  EXPECT_LT(std::abs(mean - exact), 3.0 * se);
}

TEST(Noise, ZeroEtaIsIdentityAndNegativeEtaRejected) {
  const Problem p = Problem::taylor_green();
  const auto obs = sample_sparse_observations(p, 30, 1);
  EXPECT_EQ(add_observation_noise(obs, p, 0.0, 4).values.storage(), obs.values.storage());
  EXPECT_THROW(add_observation_noise(obs, p, -0.1, 4), InputError);
}

TEST(Noise, OnlyVelocityChannelsAreCorrupted) {
  const Problem p = Problem::taylor_green();
  const auto obs = sample_sparse_observations(p, 400, 1);
  const auto noisy = add_observation_noise(obs, p, 0.1, 4);
  EXPECT_EQ(noisy.coords.storage(), obs.coords.storage());
  for (std::size_t ch = 0; ch < 3; ++ch) {
    double mean = 0.0, var = 0.0, diff2 = 0.0;
    for (std::size_t i = 0; i < obs.size(); ++i) mean += obs.values(i, ch);
    mean /= obs.size();
    for (std::size_t i = 0; i < obs.size(); ++i) {
      var += (obs.values(i, ch) - mean) * (obs.values(i, ch) - mean);
      diff2 += std::pow(noisy.values(i, ch) - obs.values(i, ch), 2);
    }
    const double sd = std::sqrt(var / (obs.size() - 1)), noise_sd = std::sqrt(diff2 / obs.size());
    if (ch == 2) {
      EXPECT_EQ(diff2, 0.0);
    } else {
      EXPECT_NEAR(noise_sd / (0.1 * sd), 1.0, 0.15);
    }
  }
  EXPECT_EQ(add_observation_noise(obs, p, 0.1, 4).values.storage(), noisy.values.storage());
}

TEST(Variants, FlagsAndUnknownNames) {
  const ModelConfig base = Problem::taylor_green().configure({});
  EXPECT_THROW(apply_variant(base, "bogus"), ConfigError);
  for (const auto& v : variant_names()) EXPECT_NO_THROW(apply_variant(base, v).validate()) << v;
  EXPECT_EQ(variant_flags(apply_variant(base, "full")), "gamma=1;pde=1;bcic=1;decoder=film_siren;uw=0");
  EXPECT_EQ(variant_flags(apply_variant(base, "no_physics")), "gamma=0;pde=0;bcic=0;decoder=film_siren;uw=0");
  EXPECT_EQ(variant_flags(apply_variant(base, "no_pde_loss")), "gamma=1;pde=0;bcic=1;decoder=film_siren;uw=0");
  EXPECT_EQ(variant_flags(apply_variant(base, "pgt_uw")), "gamma=1;pde=1;bcic=1;decoder=film_siren;uw=1");
  EXPECT_EQ(variant_flags(apply_variant(base, "plain_mlp")), "gamma=1;pde=1;bcic=1;decoder=plain_mlp;uw=0");
  EXPECT_EQ(variant_flags(apply_variant(base, "pinn")), "gamma=0;pde=1;bcic=1");
  EXPECT_EQ(variant_flags(apply_variant(base, "siren")), "gamma=0;pde=0;bcic=0");
  EXPECT_EQ(ablation_rows().size(), 7u);
}

TEST(Ablation, NoGammaIgnoresTheDiffusivity) {
  const Problem p = Problem::heat();
  ModelConfig cfg = apply_variant(tiny(p.configure({})), "no_gamma");
  const auto obs = sample_sparse_observations(p, 12, 2);
  model::PgtModel a(cfg, 3);
  perturb(a.params(), 3);
  cfg.pde_family = physics::PdeFamily::parabolic(5.0, 1);
  model::PgtModel b(cfg, 3);
  b.params() = a.params();
  a.set_context(obs);
  b.set_context(obs);
  const Tensor q = p.eval_grid(7);
  EXPECT_EQ(a.predict(q).storage(), b.predict(q).storage());

  // With the bias on, the diffusivity does change predictions.
  ModelConfig on = tiny(p.configure({}));
  model::PgtModel c(on, 3);
  c.params() = a.params();
  on.pde_family = physics::PdeFamily::parabolic(5.0, 1);
  model::PgtModel d(on, 3);
  d.params() = a.params();
  c.set_context(obs);
  d.set_context(obs);
  EXPECT_NE(c.predict(q).storage(), d.predict(q).storage());
}

TEST(Ablation, NoPdeLossNeverUsesCollocationStencils) {
  const Problem p = Problem::heat();
  const auto obs = sample_sparse_observations(p, 10, 2);
  auto run = [&](const std::string& variant, double h) {
    auto m = model::make_model(apply_variant(tiny(p.configure({})), variant), 4);
    dynamic_cast<model::PgtModel&>(*m).set_context(obs);
    auto t = short_run(3);
    t.h = h;
    train::train(*m, p, obs, t, 4);
    return m->predict(p.eval_grid(5)).storage();
  };
  EXPECT_EQ(run("no_pde_loss", 1e-3), run("no_pde_loss", 1e-2));
  EXPECT_NE(run("full", 1e-3), run("full", 1e-2));
}

TEST(Ablation, PlainMlpDecoderHasNoSineAndSirenDoes) {
  const Problem p = Problem::heat();
  const auto obs = sample_sparse_observations(p, 6, 2);
  auto uses_sin = [&](const std::string& variant) {
    model::PgtModel m(apply_variant(tiny(p.configure({})), variant), 1);
    m.set_context(obs);
    ad::Tape tape;
    auto pred = m.forward(tape, model::bind(tape, m.params(), false), p.eval_grid(3));
    return tape.depends_on_op(pred.value, ad::OpKind::sin);
  };
  EXPECT_FALSE(uses_sin("plain_mlp"));
  EXPECT_FALSE(uses_sin("film_mlp"));
  EXPECT_TRUE(uses_sin("siren_no_film"));
  EXPECT_TRUE(uses_sin("full"));
}

TEST(Cells, UntrainedSirenHasOrderOneError) {
  CellSpec spec{"heat", Problem::heat(), "siren", 20, 0.0, 0, tiny({}), short_run(0)};
  const CellResult r = run_cell(spec);
  EXPECT_FALSE(r.diverged);
  EXPECT_GT(r.report.rel_l2_total, 0.5);
  EXPECT_LT(r.report.rel_l2_total, 5.0);
  EXPECT_TRUE(r.log.empty());
}

TEST(Cells, RunIsDeterministicAndRestorable) {
  CellSpec spec{"heat", Problem::heat(), "pgt", 12, 0.0, 1, tiny({}), short_run(3)};
  const CellResult a = run_cell(spec), b = run_cell(spec);
  EXPECT_EQ(a.report.rel_l2_total, b.report.rel_l2_total);
  EXPECT_EQ(a.log.size(), 3u);
  const auto m = restore_model(a);
  const EvalReport again = evaluate(*m, spec.problem, a.context, spec.train.h);
  EXPECT_EQ(again.rel_l2_total, a.report.rel_l2_total);
  EXPECT_EQ(again.pde_residual, a.report.pde_residual);
}

TEST(Cells, CacheReusesResultsAcrossSuites) {
  CellSpec spec{"ns", Problem::heat(), "pinn", 8, 0.0, 0, tiny({}), short_run(2)};
  CellSpec other = spec;
  other.suite = "ablation";
  EXPECT_EQ(spec.key(), other.key());
  CellSpec changed = spec;
  changed.train.adam.lr = 2e-3;
  EXPECT_NE(spec.key(), changed.key());

  CellCache cache;
  int ran = 0;
  run_cells({spec}, &cache, [&](const CellResult&) { ++ran; });
  ASSERT_NE(cache.find(spec.key()), nullptr);
  const auto reused = run_cells({other}, &cache);
  EXPECT_EQ(reused[0].spec.suite, "ablation");
  EXPECT_EQ(reused[0].wall_seconds, cache.find(spec.key())->wall_seconds);
  EXPECT_EQ(ran, 1);
}

TEST(Cells, AliasedVariantsShareACacheEntryButKeepTheirName) {
  CellSpec pgt{"ns", Problem::heat(), "pgt", 8, 0.0, 0, tiny({}), short_run(1)};
  CellSpec full = pgt;
  full.suite = "ablation";
  full.variant = "full";
  EXPECT_EQ(pgt.key(), full.key());
  CellCache cache;
  run_cells({pgt}, &cache);
  const auto hit = run_cells({full}, &cache);
  EXPECT_EQ(hit[0].spec.variant, "full");
  EXPECT_EQ(median_of(hit, "full", [](const CellResult& c) { return c.report.rel_l2_total; }),
            cache.find(pgt.key())->report.rel_l2_total);
}

TEST(Suites, CellCountsAndUnknownSuite) {
  SuitePlan plan;
  plan.seeds = {0, 1, 2};
  EXPECT_EQ(suite_cells("heat", plan).size(), 9u);
  EXPECT_EQ(suite_cells("ns", plan).size(), 12u);
  EXPECT_EQ(suite_cells("ablation", plan).size(), 21u);
  EXPECT_EQ(suite_cells("noise", plan).size(), 36u);
  EXPECT_THROW(suite_cells("weather", plan), UsageError);
  for (const auto& c : suite_cells("noise", plan)) EXPECT_EQ(c.n_obs, 1500u);
}

TEST(Results, CsvHasOneRowPerCellWithTheHeaderColumns) {
  SuitePlan plan;
  plan.heat_model = tiny({});
  plan.heat_train = short_run(1);
  plan.heat_m = {10};
  const auto cells = run_heat_suite(plan);
  std::ostringstream os;
  write_results_header(os);
  for (const auto& c : cells) write_results_row(os, c);
  std::istringstream in(os.str());
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 4u);
  auto fields = [](const std::string& s) { return std::count(s.begin(), s.end(), ',') + 1; };
  EXPECT_EQ(fields(lines[0]), 17);
  for (std::size_t i = 1; i < lines.size(); ++i) {
    EXPECT_EQ(fields(lines[i]), 17) << lines[i];
    EXPECT_EQ(lines[i].rfind("heat,heat,", 0), 0u);
  }
}

TEST(Results, MedianHandlesOddEvenAndEmpty) {
  EXPECT_EQ(median({3.0, 1.0, 2.0}), 2.0);
  EXPECT_EQ(median({4.0, 1.0, 2.0, 3.0}), 2.5);
  EXPECT_THROW(median({}), InputError);
}
