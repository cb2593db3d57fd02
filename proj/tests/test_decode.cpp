#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracles.hpp"
#include "support.hpp"

using namespace lexnmt;
using namespace lexnmt::testing;

TEST_CASE("hypothesis scores") {
  Hypothesis h;
  h.tokens = Sentence(10, 2);
  h.logprob = -10.0;
  CHECK(score_hypothesis(h, 0.0) == -10.0);
  CHECK(score_hypothesis(h, 0.8) == doctest::Approx(-2.0).epsilon(1e-15));
  for (double lambda : {-1.0, 0.3, 2.5})
    CHECK(score_hypothesis(h, lambda) - score_hypothesis(h, 0.0) ==
          doctest::Approx(lambda * 10.0).epsilon(1e-15));
}

TEST_CASE("ensemble distribution") {
  Vector a(2), b(2);
  a << 0.8, 0.2;
  b << 0.4, 0.6;
  const Vector mean = ensemble_distribution({a, b});
  CHECK(mean(0) == doctest::Approx(0.6));
  CHECK(mean(1) == doctest::Approx(0.4));
  CHECK(ensemble_distribution({a, a, a}).isApprox(a, 1e-15));
  CHECK(std::abs(ensemble_distribution({a, b, b}).sum() - 1.0) < 1e-12);
  CHECK_THROWS_AS(ensemble_distribution({a, Vector::Ones(3) / 3.0}), std::invalid_argument);
  CHECK_THROWS_AS(ensemble_distribution({}), std::invalid_argument);
}

TEST_CASE("beam search equals exhaustive search when nothing is pruned") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed)
    for (double lambda : {0.0, 0.8}) {
      const Model m = tiny_search_model(seed);
      const Sentence src = tiny_source(seed);
      BeamOptions o;
      o.beam_size = 200;
      o.word_penalty = lambda;
      o.max_len = 5;
      const Hypothesis best = beam_search(m, src, o);
      const Exhaustive oracle = exhaustive_search(m, src, 5, lambda);
      INFO("seed " << seed << " lambda " << lambda);
      CHECK(best.complete);
      CHECK(best.tokens == oracle.tokens);
      CHECK(score_hypothesis(best, lambda) == doctest::Approx(oracle.score).epsilon(1e-12));
    }
}

TEST_CASE("a wider beam recovers what greedy search misses") {
  int found = 0;
  for (std::uint64_t seed = 1; seed <= 200 && found < 3; ++seed) {
    const Model m = tiny_search_model(seed);
    const Sentence src = tiny_source(seed);
    const Exhaustive oracle = exhaustive_search(m, src, 5, 0.0);
    const Hypothesis greedy = greedy_decode(m, src, 5);
    if (!greedy.complete || greedy.tokens == oracle.tokens) continue;
    ++found;
    BeamOptions o;
    o.max_len = 5;
    const Hypothesis wide = beam_search(m, src, o);
    INFO("seed " << seed);
    CHECK(wide.logprob > greedy.logprob);
    CHECK(wide.tokens == oracle.tokens);
  }
  CHECK(found > 0);
}

TEST_CASE("one-hot distributions decode like a greedy rollout") {
  const Model m = one_hot_chain_model();
  const Hypothesis greedy = greedy_decode(m, Sentence{2, 3}, 6);
  CHECK(greedy.tokens == Sentence{2, 0});
  for (int beam : {1, 2, 5, 20}) {
    BeamOptions o;
    o.beam_size = beam;
    o.max_len = 6;
    CHECK(beam_search(m, Sentence{2, 3}, o).tokens == greedy.tokens);
  }
}

TEST_CASE("length limit and partial results") {
  Model m = small_model(6, 5, 2, AttentionKind::Dot, 1);
  m.params.output_weight.setZero();
  m.params.output_bias.setConstant(0.0);
  m.params.output_bias(0, 0) = -50.0;  // the sentence end is almost never chosen
  BeamOptions o;
  o.max_len = 4;
  o.beam_size = 1;
  const Hypothesis h = beam_search(m, Sentence{2}, o);
  CHECK(h.tokens.size() <= 4);
  CHECK_FALSE(h.complete);
  o.beam_size = 3;
  CHECK(beam_search(m, Sentence{2}, o).tokens.size() <= 4);
}

TEST_CASE("ensembles of identical models reproduce the single model") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Model m = small_model(10, 8, 3, seed % 2 ? AttentionKind::Dot : AttentionKind::Mlp, seed);
    randomize(m.params, 1.2, seed + 100);
    const Sentence src{2, 5, 7, 3};
    const Model* three[] = {&m, &m, &m};
    const Model* two[] = {&m, &m};
    const auto single = beam_search(m, src);
    CHECK(beam_search(std::span<const Model* const>(three), src).tokens == single.tokens);
    CHECK(beam_search(std::span<const Model* const>(two), src).tokens == single.tokens);
  }
}

TEST_CASE("invalid search requests") {
  const Model m = small_model(6, 5, 2, AttentionKind::Dot, 1);
  CHECK_THROWS_AS(beam_search(m, Sentence{}), std::invalid_argument);
  BeamOptions o;
  o.beam_size = 0;
  CHECK_THROWS_AS(beam_search(m, Sentence{2}, o), std::invalid_argument);
  const Model other = small_model(6, 7, 2, AttentionKind::Dot, 1);
  const Model* mixed[] = {&m, &other};
  CHECK_THROWS_AS(beam_search(std::span<const Model* const>(mixed), Sentence{2}), std::invalid_argument);
}
