#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "nmm/evaluation.hpp"
#include "test_util.hpp"

using nmm::EncodedCorpus;
using nmm::EvalOptions;
using nmm::Rng;
using nmm::SequenceModel;
namespace test = nmm::test;

namespace {

class UniformModel : public SequenceModel<double> {
 public:
  explicit UniformModel(int vocab) : vocab_(vocab) {}
  int vocab_size() const override { return vocab_; }
  void reset() override {}
  std::vector<double> next_distribution(int) override {
    return std::vector<double>(vocab_, 1.0 / vocab_);
  }

 private:
  int vocab_;
};

// Emits a scripted sequence of probabilities for whatever target comes
// next; mass is spread over the rest of the row.
class ScriptedModel : public SequenceModel<double> {
 public:
  ScriptedModel(int vocab, std::vector<double> probs) : vocab_(vocab), probs_(std::move(probs)) {}
  int vocab_size() const override { return vocab_; }
  void reset() override { pos_ = 0; }
  std::vector<double> next_distribution(int) override {
    const double p = probs_[pos_++ % probs_.size()];
    std::vector<double> row(vocab_, (1.0 - p) / (vocab_ - 1));
    row[target_] = p;
    return row;
  }
  void set_target(int t) { target_ = t; }

 private:
  int vocab_;
  std::vector<double> probs_;
  size_t pos_ = 0;
  int target_ = 0;
};

EncodedCorpus corpus_of(std::vector<int> ids) {
  EncodedCorpus c;
  c.token_count = static_cast<long long>(ids.size());
  c.ids = std::move(ids);
  return c;
}

}  // namespace

TEST_CASE("a uniform predictor scores exactly the vocabulary size") {
  UniformModel m(10);
  auto corpus = corpus_of({0, 3, 7, 9, 2, 5});
  const auto r = nmm::perplexity(m, corpus);
  CHECK(std::abs(r.perplexity - 10.0) < 1e-9);
  CHECK(r.token_count == 6);
}

TEST_CASE("scripted two-token corpus gives perplexity 4") {
  ScriptedModel m(8, {0.5, 0.125});
  m.set_target(3);
  auto corpus = corpus_of({3, 3});
  const auto r = nmm::perplexity(m, corpus);
  CHECK(r.perplexity == doctest::Approx(4.0).epsilon(1e-12));
}

TEST_CASE("perplexity is bounded below by 1 and stays finite") {
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> probs;
    for (int i = 0; i < 5; ++i) probs.push_back(rng.uniform(0.0, 1.0));
    ScriptedModel m(6, probs);
    m.set_target(2);
    auto corpus = corpus_of({2, 2, 2, 2, 2});
    const auto r = nmm::perplexity(m, corpus);
    REQUIRE(r.perplexity >= 1.0);
    REQUIRE(std::isfinite(r.perplexity));
  }
}

TEST_CASE("the probability floor guards a zero-probability script") {
  ScriptedModel m(4, {0.0});
  m.set_target(1);
  auto corpus = corpus_of({1});
  const auto r = nmm::perplexity(m, corpus);
  CHECK(std::isfinite(r.perplexity));
  CHECK(r.perplexity <= 1.0 / 1e-12 + 1.0);
}

TEST_CASE("empty corpus is an error") {
  UniformModel m(4);
  EncodedCorpus empty;
  CHECK_THROWS_AS(nmm::perplexity(m, empty), std::invalid_argument);
}

TEST_CASE("eos targets can be excluded from the sum") {
  UniformModel m(10);
  auto corpus = corpus_of({0, 1, 3, 1});  // two eos tokens (id 1)
  EvalOptions opt;
  opt.include_eos = false;
  const auto r = nmm::perplexity(m, corpus, opt);
  CHECK(r.token_count == 2);
  CHECK(std::abs(r.perplexity - 10.0) < 1e-9);
}

TEST_CASE("interpolating identical models changes nothing") {
  UniformModel a(8), b(8);
  std::vector<SequenceModel<double>*> models = {&a, &b};
  auto corpus = corpus_of({1, 2, 3});
  const auto alone = nmm::perplexity(a, corpus);
  for (auto w : {0.3, 0.5, 0.9}) {
    const auto mixed = nmm::interpolate_ppl(models, {w, 1 - w}, corpus);
    CHECK(mixed.perplexity == doctest::Approx(alone.perplexity).epsilon(1e-12));
  }
}

TEST_CASE("one-hot weights reproduce the single model bit for bit") {
  ScriptedModel a(6, {0.5, 0.25, 0.125});
  ScriptedModel b(6, {0.9, 0.8, 0.7});
  a.set_target(2);
  b.set_target(2);
  auto corpus = corpus_of({2, 2, 2});
  const auto alone = nmm::perplexity(a, corpus);
  std::vector<SequenceModel<double>*> models = {&a, &b};
  const auto mixed = nmm::interpolate_ppl(models, {1.0, 0.0}, corpus);
  CHECK(mixed.perplexity == alone.perplexity);
  CHECK(mixed.total_log_likelihood == alone.total_log_likelihood);
}

TEST_CASE("half-half interpolation matches hand-mixed probabilities") {
  ScriptedModel a(5, {0.5, 0.3});
  ScriptedModel b(5, {0.1, 0.7});
  a.set_target(4);
  b.set_target(4);
  auto corpus = corpus_of({4, 4});
  std::vector<SequenceModel<double>*> models = {&a, &b};
  const auto mixed = nmm::interpolate_ppl(models, {0.5, 0.5}, corpus);
  const double expected = std::exp(-(std::log(0.5 * 0.5 + 0.5 * 0.1) +
                                     std::log(0.5 * 0.3 + 0.5 * 0.7)) /
                                   2.0);
  CHECK(mixed.perplexity == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("interpolation validates weights and vocabularies") {
  UniformModel a(8), b(8), c(9);
  auto corpus = corpus_of({1});
  std::vector<SequenceModel<double>*> two = {&a, &b};
  CHECK_THROWS_AS(nmm::interpolate_ppl(two, {0.5, 0.6}, corpus), std::invalid_argument);
  CHECK_THROWS_AS(nmm::interpolate_ppl(two, {-0.1, 1.1}, corpus), std::invalid_argument);
  CHECK_THROWS_AS(nmm::interpolate_ppl(two, {1.0}, corpus), std::invalid_argument);
  std::vector<SequenceModel<double>*> one = {&a};
  CHECK_THROWS_AS(nmm::interpolate_ppl(one, {1.0}, corpus), std::invalid_argument);
  std::vector<SequenceModel<double>*> mismatched = {&a, &c};
  CHECK_THROWS_AS(nmm::interpolate_ppl(mismatched, {0.5, 0.5}, corpus),
                  std::invalid_argument);
}

TEST_CASE("mixed distributions still sum to one") {
  Rng rng(11);
  ScriptedModel a(7, {0.5, 0.2, 0.9});
  ScriptedModel b(7, {0.3, 0.6, 0.1});
  a.set_target(3);
  b.set_target(3);
  a.reset();
  b.reset();
  for (int t = 0; t < 3; ++t) {
    const auto da = a.next_distribution(0);
    const auto db = b.next_distribution(0);
    double sum = 0;
    for (int v = 0; v < 7; ++v) sum += 0.4 * da[v] + 0.6 * db[v];
    REQUIRE(sum == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("the two-model grid at step 0.1 has exactly 11 candidates") {
  const auto grid = nmm::simplex_weight_grid(2, 0.1);
  CHECK(grid.size() == 11);
  for (const auto& lambda : grid) {
    REQUIRE(lambda.size() == 2);
    REQUIRE(lambda[0] + lambda[1] == doctest::Approx(1.0).epsilon(1e-12));
  }
  // lexicographically ascending
  for (size_t i = 1; i < grid.size(); ++i) REQUIRE(grid[i - 1][0] < grid[i][0]);

  CHECK(nmm::simplex_weight_grid(3, 0.5).size() == 6);
  CHECK_THROWS_AS(nmm::simplex_weight_grid(2, 0.3), std::invalid_argument);
}

TEST_CASE("grid search puts all weight on a dominating model") {
  ScriptedModel strong(6, {0.9});
  ScriptedModel weak(6, {0.2});
  strong.set_target(1);
  weak.set_target(1);
  auto corpus = corpus_of({1, 1, 1, 1});
  std::vector<SequenceModel<double>*> models = {&weak, &strong};
  for (double step : {0.5, 0.1, 0.05}) {
    const auto lambda = nmm::grid_search_weights(models, corpus, step);
    REQUIRE(lambda.size() == 2);
    CHECK(lambda[0] == 0.0);
    CHECK(lambda[1] == 1.0);
  }
}

TEST_CASE("grid search never loses to either endpoint") {
  ScriptedModel a(6, {0.8, 0.1, 0.6, 0.2});
  ScriptedModel b(6, {0.2, 0.7, 0.3, 0.6});
  a.set_target(2);
  b.set_target(2);
  auto corpus = corpus_of({2, 2, 2, 2});
  std::vector<SequenceModel<double>*> models = {&a, &b};
  const auto lambda = nmm::grid_search_weights(models, corpus, 0.1);
  const auto tuned = nmm::interpolate_ppl(models, lambda, corpus);
  const auto left = nmm::perplexity(a, corpus);
  const auto right = nmm::perplexity(b, corpus);
  CHECK(tuned.perplexity <= left.perplexity + 1e-12);
  CHECK(tuned.perplexity <= right.perplexity + 1e-12);
}

TEST_CASE("ties break toward the lexicographically smallest weights") {
  UniformModel a(5), b(5);
  auto corpus = corpus_of({0, 1, 2});
  std::vector<SequenceModel<double>*> models = {&a, &b};
  const auto lambda = nmm::grid_search_weights(models, corpus, 0.25);
  CHECK(lambda[0] == 0.0);
  CHECK(lambda[1] == 1.0);
}

TEST_CASE("evaluation is side-effect free and repeatable") {
  ScriptedModel m(6, {0.4, 0.6, 0.3});
  m.set_target(5);
  auto corpus = corpus_of({5, 5, 5});
  const auto r1 = nmm::perplexity(m, corpus);
  const auto r2 = nmm::perplexity(m, corpus);
  CHECK(r1.perplexity == r2.perplexity);
  CHECK(r1.total_log_likelihood == r2.total_log_likelihood);
  CHECK(r1.token_count == r2.token_count);
}
