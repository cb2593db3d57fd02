#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "lexnmt/error.hpp"
#include "lexnmt/eval.hpp"
#include "support.hpp"

#include <nlohmann/json.hpp>

#include <limits>
#include <set>
#include <sstream>

using namespace lexnmt;
using namespace lexnmt::testing;

namespace {

// Single-step distribution driven only by the output bias.
Model bias_only_model(const std::vector<double>& probs) {
  Model m = small_model(5, probs.size(), 2, AttentionKind::Dot, 1);
  m.params.output_weight.setZero();
  for (std::size_t i = 0; i < probs.size(); ++i)
    m.params.output_bias(static_cast<Eigen::Index>(i), 0) = probs[i] > 0 ? std::log(probs[i]) : -200.0;
  return m;
}

TrainConfig quick_config() {
  TrainConfig c;
  c.word_budget = 40;
  c.dev_check_interval = 10;
  c.patience = 30;
  c.lr_schedule = {0.01, 0.005, 0.0025};
  return c;
}

}  // namespace

TEST_CASE("uniform model loss") {
  Model m = small_model(8, 8, 3, AttentionKind::Dot, 2);
  m.params.output_weight.setZero();
  m.params.output_bias.setZero();
  const std::vector<SentencePair> batch{{{2, 3, 4}, {5, 6}}};
  const auto lg = nll_loss(m, batch);
  CHECK(lg.loss == doctest::Approx(3.0 * std::log(8.0)).epsilon(1e-14));
  CHECK(nll_value(m, batch) == doctest::Approx(lg.loss).epsilon(1e-14));
  CHECK_THROWS(nll_loss(m, std::vector<SentencePair>{}));
}

TEST_CASE("batch loss is non-negative and its gradient matches finite differences") {
  for (auto kind : {AttentionKind::Dot, AttentionKind::Mlp}) {
    Model m = small_model(10, 10, 3, kind, 3, random_lexicon(10, 10, 1));
    randomize(m.params, 0.5, 4);
    const std::vector<SentencePair> batch{{{2, 3}, {4}}, {{5, 6, 7}, {8, 9}}};
    const auto lg = nll_loss(m, batch);
    CHECK(lg.loss >= 0.0);
    for (const auto& e : finite_difference_check(m, [&](const Model& x) { return nll_value(x, batch); }, lg.gradient)) {
      INFO(e.name);
      CHECK(e.relative_error < 1e-5);
    }
  }
}

TEST_CASE("gradient clipping") {
  const ModelConfig c = small_model(5, 5, 2, AttentionKind::Dot, 1).config;
  Parameters g = Parameters::zeros(c);
  CHECK(clip_gradients(g, 5.0) == 0.0);
  CHECK(global_norm(g) == 0.0);

  g.output_bias(0, 0) = 3.0;
  CHECK(clip_gradients(g, 5.0) == doctest::Approx(3.0));
  CHECK(g.output_bias(0, 0) == 3.0);

  g.output_bias(0, 0) = 6.0;
  g.eta_bias(1, 0) = 8.0;
  CHECK(clip_gradients(g, 5.0) == doctest::Approx(10.0));
  CHECK(g.output_bias(0, 0) == doctest::Approx(3.0));
  CHECK(g.eta_bias(1, 0) == doctest::Approx(4.0));
  CHECK(global_norm(g) == doctest::Approx(5.0));

  g.eta_bias(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_WITH_AS(clip_gradients(g, 5.0), "non-finite gradient", NumericalError);
}

TEST_CASE("ADAM matches a scalar reimplementation") {
  Model m = small_model(5, 5, 2, AttentionKind::Dot, 3);
  const Parameters start = m.params;
  AdamState state = AdamState::for_model(m.config);

  Parameters zero = Parameters::zeros(m.config);
  adam_update(m.params, zero, state, 0.001);
  CHECK(m.params == start);
  CHECK(state.first_moment == Parameters::zeros(m.config));

  m.params = start;
  state = AdamState::for_model(m.config);
  Parameters g = Parameters::zeros(m.config);
  randomize(g, 2.0, 8);
  const double lr = 0.001;
  adam_update(m.params, g, state, lr);
  // First step: m_hat = g, v_hat = g^2, so the move is lr * g / (|g| + eps).
  const double g0 = g.output_bias(0, 0);
  CHECK(m.params.output_bias(0, 0) - start.output_bias(0, 0) ==
        doctest::Approx(-lr * g0 / (std::abs(g0) + 1e-8)).epsilon(1e-10));
  adam_update(m.params, g, state, lr);

  auto p0 = start.tensors();
  auto p2 = m.params.tensors();
  auto gs = g.tensors();
  for (std::size_t t = 0; t < p0.size(); ++t)
    for (Eigen::Index i = 0; i < p0[t].second->size(); ++i) {
      double x = (*p0[t].second)(i), m1 = 0.0, m2 = 0.0;
      const double gi = (*gs[t].second)(i);
      for (int step = 1; step <= 2; ++step) {
        m1 = 0.9 * m1 + 0.1 * gi;
        m2 = 0.999 * m2 + 0.001 * gi * gi;
        const double mh = m1 / (1.0 - std::pow(0.9, step)), vh = m2 / (1.0 - std::pow(0.999, step));
        x -= lr * mh / (std::sqrt(vh) + 1e-8);
      }
      CHECK(std::abs((*p2[t].second)(i) - x) < 1e-12);
    }
}

TEST_CASE("plateau schedule") {
  PlateauSchedule s({0.001, 0.0005, 0.00025}, 100);
  CHECK(s.observe(0, 5.0) == PlateauSchedule::Action::Improved);
  CHECK(s.observe(50, 5.0) == PlateauSchedule::Action::Continue);
  CHECK(s.observe(100, 5.0) == PlateauSchedule::Action::Restart);
  CHECK(s.learning_rate() == 0.0005);
  CHECK(s.observe(150, 4.0) == PlateauSchedule::Action::Improved);
  CHECK(s.observe(250, 4.5) == PlateauSchedule::Action::Restart);
  CHECK(s.learning_rate() == 0.00025);
  CHECK(s.observe(350, 4.5) == PlateauSchedule::Action::Stop);
  CHECK(s.finished());
}

TEST_CASE("training schedule with stub evaluators") {
  const auto data = copy_task(20, 8, 2, 4, 1);
  const Model init = small_model(8, 8, 3, AttentionKind::Dot, 5);

  SUBCASE("dev loss never improves after the first check") {
    const auto result = train_ml(init, data, data, quick_config(), [](const Model&) { return 1.0; });
    CHECK(result.restarts == 2);
    CHECK(result.final_lr == 0.0025);
    CHECK(result.model.params == init.params);
  }
  SUBCASE("dev loss always improves") {
    double next = 100.0;
    TrainConfig c = quick_config();
    c.max_epochs = 4;
    const auto result = train_ml(init, data, data, c, [&](const Model&) { return next -= 1.0; });
    CHECK(result.restarts == 0);
    CHECK(result.final_lr == 0.01);
    CHECK(result.epochs == 4);
  }
}

TEST_CASE("train_ml returns the best dev checkpoint it saw") {
  const auto data = copy_task(30, 8, 2, 4, 2);
  TrainConfig c = quick_config();
  c.max_epochs = 6;
  const auto result = train_ml(small_model(8, 8, 4, AttentionKind::Dot, 7), data, data, c);
  double best = std::numeric_limits<double>::infinity();
  for (const auto& r : result.log.records()) best = std::min(best, *r.dev_loss);
  CHECK(result.best_dev == best);
  CHECK(per_token_nll(result.model, data) == doctest::Approx(best).epsilon(1e-12));
}

TEST_CASE("non-finite losses name the batch") {
  Model m = small_model(8, 8, 3, AttentionKind::Dot, 5);
  m.params.output_bias(3, 0) = std::numeric_limits<double>::infinity();
  const auto data = copy_task(10, 8, 2, 3, 3);
  TrainConfig c = quick_config();
  CHECK_THROWS_WITH_AS(train_ml(m, data, data, c, [](const Model&) { return 1.0; }), doctest::Contains("batch 0"),
                       NumericalError);
}

TEST_CASE("configuration validation") {
  TrainConfig c;
  c.validate();
  c.mrt.num_samples = 1;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.mrt.alpha = 0.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.lr_schedule.clear();
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("small copy task overfits") {
  const auto data = copy_task(50, 20, 2, 5, 11);
  TrainConfig c;
  c.word_budget = 64;
  c.dev_check_interval = 50;
  c.patience = 1000000;
  c.lr_schedule = {0.01};
  c.max_epochs = 60;
  const auto result = train_ml(small_model(20, 20, 16, AttentionKind::Dot, 1), data, data, c, {},
                               [&](const Model& m, int) { return per_token_nll(m, data) >= 0.05; });
  CHECK(per_token_nll(result.model, data) < 0.05);
}

TEST_CASE("sampling") {
  SUBCASE("frequency of the first word follows the model") {
    const Model m = bias_only_model({0.25, 0.0, 0.75});
    std::mt19937_64 rng(1);
    int a = 0;
    for (int k = 0; k < 10000; ++k) {
      const Sample s = sample_translation(m, Sentence{2}, 1, rng);
      REQUIRE(s.tokens.size() == 1);
      a += s.tokens[0] == 2;
    }
    CHECK(a / 10000.0 == doctest::Approx(0.75).epsilon(0.02 / 0.75));
  }
  SUBCASE("deterministic distributions give one sequence") {
    const Model m = bias_only_model({0.0, 0.0, 0.0, 1.0});
    std::mt19937_64 rng(2);
    for (int k = 0; k < 20; ++k) CHECK(sample_translation(m, Sentence{2, 3}, 4, rng).tokens == Sentence{3, 3, 3, 3});
  }
  SUBCASE("log-probabilities are those of the model") {
    Model m = small_model(8, 8, 3, AttentionKind::Mlp, 4);
    randomize(m.params, 1.0, 3);
    std::mt19937_64 rng(5);
    for (int k = 0; k < 10; ++k) {
      const Sample s = sample_translation(m, Sentence{2, 5}, 6, rng);
      CHECK(s.tokens.size() <= 6);
      if (s.tokens.back() == 0) CHECK(s.logprob == doctest::Approx(sentence_logprob(m, Sentence{2, 5}, s.tokens)));
    }
    CHECK_THROWS(sample_translation(m, Sentence{2}, 0, rng));
  }
}

TEST_CASE("risk weights and expected risk") {
  const double alpha = 0.005;
  Vector lp(2);
  lp << 0.0, -std::log(4.0) / alpha;
  Vector err(2);
  err << 0.2, 0.6;
  const Vector w = risk_weights(lp, alpha);
  CHECK(w(0) == doctest::Approx(0.8));
  CHECK(expected_risk(err, lp, alpha) == doctest::Approx(0.28).epsilon(1e-12));

  Vector same = Vector::Constant(3, 0.3);
  Vector any(3);
  any << -1.0, -7.0, -30.0;
  for (double a : {0.005, 0.5, 3.0}) CHECK(expected_risk(same, any, a) == doctest::Approx(0.3));

  // Multiplying every probability by one constant cancels in the normalizer.
  const Vector shifted = (any.array() - 123.4).matrix();
  CHECK((risk_weights(shifted, 0.7) - risk_weights(any, 0.7)).cwiseAbs().maxCoeff() < 1e-15);

  Vector errs(3);
  errs << 0.1, 0.5, 0.9;
  Vector higher = any;
  higher(0) += 1.0;
  CHECK(expected_risk(errs, higher, 0.5) < expected_risk(errs, any, 0.5));
  CHECK_THROWS(risk_weights(any, 0.0));
}

TEST_CASE("MRT loss on frozen samples") {
  for (auto kind : {AttentionKind::Dot, AttentionKind::Mlp})
    for (bool lexicon : {false, true})
      for (double alpha : {0.005, 1.0}) {
        Model m = small_model(10, 10, 3, kind, 6, lexicon ? std::optional(random_lexicon(10, 10, 2)) : std::nullopt);
        randomize(m.params, 0.6, 9);
        const Sentence src{2, 3, 4}, ref{5, 6, 7};
        const std::vector<Sentence> samples{{5, 6, 7, 0}, {5, 0}, {8, 6, 0}, {9, 9, 9}};
        const auto lg = mrt_loss_fixed(m, src, ref, samples, alpha);
        CHECK(lg.loss >= 0.0);
        CHECK(lg.loss <= 1.0);
        auto value = [&](const Model& x) {
          Vector lp(4), err(4);
          for (int k = 0; k < 4; ++k) {
            InferenceSession session(x, src);
            DecoderSnapshot s = session.initial_state();
            TokenId prev = 0;
            double total = 0.0;
            for (TokenId w : samples[k]) {
              auto step = session.step(s, prev);
              total += step.log_probs(w);
              s = step.state;
              prev = w;
            }
            lp(k) = total;
            err(k) = mrt_error(ref, strip_end(samples[k], 0));
          }
          return expected_risk(err, lp, alpha);
        };
        CHECK(lg.loss == doctest::Approx(value(m)).epsilon(1e-12));
        for (const auto& e : finite_difference_check(m, value, lg.gradient)) {
          INFO(e.name << " alpha " << alpha);
          CHECK(e.relative_error < 1e-4);
        }
      }
}

TEST_CASE("MRT sampling dedupes and rejects degenerate sets") {
  Model m = small_model(8, 8, 3, AttentionKind::Dot, 2);
  randomize(m.params, 1.0, 1);
  std::mt19937_64 rng(3);
  const auto out = mrt_loss(m, Sentence{2, 3}, Sentence{4, 5}, 20, 0.005, 0, rng);
  std::set<Sentence> unique(out.samples.begin(), out.samples.end());
  CHECK(unique.size() == out.samples.size());
  CHECK(out.value.loss >= 0.0);
  CHECK(out.value.loss <= 1.0);

  const Model ends = bias_only_model({1.0, 0.0, 0.0});
  CHECK_THROWS_AS(mrt_loss(ends, Sentence{2}, Sentence{2}, 5, 0.005, 0, rng), DegenerateSampleError);
}

TEST_CASE("MRT training logs its settings and is deterministic") {
  const auto data = copy_task(12, 8, 2, 3, 6);
  Model init = small_model(8, 8, 4, AttentionKind::Dot, 3);
  TrainConfig c;
  c.mrt.num_samples = 7;
  c.mrt.alpha = 0.25;
  c.mrt.epochs = 2;
  c.mrt.learning_rate = 0.01;
  const auto a = train_mrt(init, data, data, c);
  const auto b = train_mrt(init, data, data, c);
  CHECK(a.log.str() == b.log.str());
  CHECK(a.model.params == b.model.params);
  const auto header = nlohmann::json::parse(a.log.header());
  CHECK(header["config"]["mrt"]["num_samples"] == 7);
  CHECK(header["config"]["mrt"]["alpha"] == 0.25);
  CHECK(a.log.records().size() == 3);
  CHECK(a.log.records().back().expected_error.has_value());
}
