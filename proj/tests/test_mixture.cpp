#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "nmm/mixture.hpp"
#include "test_util.hpp"

using nmm::ComponentDesc;
using nmm::ComponentKind;
using nmm::DropoutMask;
using nmm::Matrix;
using nmm::MixtureSpec;
using nmm::NmmModel;
using nmm::Rng;
namespace test = nmm::test;

namespace {

MixtureSpec make_spec(const std::string& text, int emb, int mix, int vocab) {
  MixtureSpec s;
  s.components = nmm::parse_spec(text);
  s.embedding_size = emb;
  s.mixture_size = mix;
  s.vocab_size = vocab;
  return s;
}

double summed_ce(const std::vector<Matrix<double>>& probs,
                 const std::vector<std::vector<int>>& targets) {
  double loss = 0;
  for (size_t t = 0; t < probs.size(); ++t)
    for (int b = 0; b < probs[t].rows(); ++b)
      loss -= std::log(probs[t](b, targets[t][b]));
  return loss;
}

Matrix<double>& block_by_name(std::vector<nmm::ParamBlock<double>>& blocks,
                              const std::string& name) {
  for (auto& b : blocks)
    if (b.name == name) return *b.value;
  throw std::logic_error("no block named " + name);
}

}  // namespace

TEST_CASE("sample_dropout: boundary probabilities") {
  Rng rng(3);
  const auto comps = nmm::parse_spec("R4+F4^2+F4^3");
  auto none = nmm::sample_dropout(comps, 0.0, 8, rng);
  CHECK(none.all_active());

  auto all = nmm::sample_dropout(comps, 1.0, 8, rng);
  for (int b = 0; b < 8; ++b) {
    CHECK(all.active[0][b] == 1);  // recurrent: never dropped
    CHECK(all.active[1][b] == 0);
    CHECK(all.active[2][b] == 0);
  }

  CHECK_THROWS_AS(nmm::sample_dropout(comps, -0.1, 1, rng), std::invalid_argument);
  CHECK_THROWS_AS(nmm::sample_dropout(comps, 1.5, 1, rng), std::invalid_argument);
}

TEST_CASE("sample_dropout never touches recurrent-only mixtures") {
  Rng rng(5);
  const auto comps = nmm::parse_spec("R4+L4");
  for (double p : {0.2, 0.7, 0.99}) {
    auto m = nmm::sample_dropout(comps, p, 16, rng);
    CHECK(m.all_active());
  }
}

TEST_CASE("sample_dropout frequency matches the configured rate") {
  Rng rng(7);
  const auto comps = nmm::parse_spec("R4+F4^2");
  long long dropped = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    auto m = nmm::sample_dropout(comps, 0.4, 1, rng);
    if (!m.active[1][0]) ++dropped;
  }
  const double freq = static_cast<double>(dropped) / n;
  CHECK(std::abs(freq - 0.4) < 0.01);
}

TEST_CASE("single-component mixture equals the hand-composed pipeline") {
  Rng rng(11);
  const auto spec = make_spec("R3", 2, 4, 5);
  NmmModel<double> model(spec);
  model.init_params(rng);
  auto blocks = model.param_blocks();
  test::jitter_params(blocks, rng);

  model.reset_states(1, 1);
  const auto probs =
      model.forward({{2}}, DropoutMask::everything_active(1, 1), false, false);

  // embed -> rnn -> relu(H S + b) -> softmax(HW + b), composed directly
  auto emb = nmm::gather_rows(model.embedding(), {2});
  auto& rnn = dynamic_cast<nmm::RnnComponent<double>&>(model.component(0));
  Matrix<double> pre = test::naive_matmul(emb, rnn.params().w_in);
  nmm::add_row_inplace(pre, rnn.params().bias);  // previous state is zero
  auto h = nmm::sigmoid(pre);
  Matrix<double> mix = test::naive_matmul(h, model.mixing_weights(0));
  nmm::add_row_inplace(mix, block_by_name(blocks, "mixture.b"));
  mix = nmm::relu(mix);
  Matrix<double> logits = test::naive_matmul(mix, model.output_weights());
  nmm::add_row_inplace(logits, model.output_bias());
  auto expected = nmm::softmax_rows(logits);

  CHECK(test::max_abs_diff(probs[0], expected) < 1e-12);
}

TEST_CASE("two-component toy output matches a hand-composed walk") {
  // F3^2 + R2, emb 2, mixture 3, vocab 5, batch 1. The oracle composes
  // the feature, mixture and output layers with plain loops.
  Rng rng(13);
  const auto spec = make_spec("F3^2+R2", 2, 3, 5);
  NmmModel<double> model(spec);
  model.init_params(rng);
  auto blocks = model.param_blocks();
  test::jitter_params(blocks, rng);

  const std::vector<int> w1 = {4}, w2 = {1};
  model.reset_states(1, 1);
  const auto mask = DropoutMask::everything_active(2, 1);
  model.forward({w1}, mask, false, false);
  auto step2 = model.forward({w2}, mask, false, false);

  auto& fnn = dynamic_cast<nmm::FnnComponent<double>&>(model.component(0));
  auto& rnn = dynamic_cast<nmm::RnnComponent<double>&>(model.component(1));
  const auto& U = model.embedding();

  // step 2 by hand: FNN context is w2 (slot for t-1), RNN state from step 1
  std::vector<double> e2(2), e1(2);
  for (int c = 0; c < 2; ++c) {
    e2[c] = U(w2[0], c);
    e1[c] = U(w1[0], c);
  }

  // rnn hidden after step 1 (state was zero)
  std::vector<double> h_rnn1(2);
  for (int j = 0; j < 2; ++j) {
    double a = rnn.params().bias(0, j);
    for (int c = 0; c < 2; ++c) a += e1[c] * rnn.params().w_in(c, j);
    h_rnn1[j] = 1.0 / (1.0 + std::exp(-a));
  }
  // rnn hidden after step 2
  std::vector<double> h_rnn2(2);
  for (int j = 0; j < 2; ++j) {
    double a = rnn.params().bias(0, j);
    for (int c = 0; c < 2; ++c) a += e2[c] * rnn.params().w_in(c, j);
    for (int k = 0; k < 2; ++k) a += h_rnn1[k] * rnn.params().w_rec(k, j);
    h_rnn2[j] = 1.0 / (1.0 + std::exp(-a));
  }
  // fnn features at step 2: single context word w2
  std::vector<double> h_fnn2(3);
  for (int j = 0; j < 3; ++j) {
    double a = fnn.params().bias[0](0, j);
    for (int c = 0; c < 2; ++c) a += e2[c] * fnn.params().context_w[0](c, j);
    h_fnn2[j] = std::max(0.0, a);
  }
  // mixture layer
  const auto& mix_bias = block_by_name(blocks, "mixture.b");
  std::vector<double> mix(3);
  for (int j = 0; j < 3; ++j) {
    double a = mix_bias(0, j);
    for (int k = 0; k < 3; ++k) a += h_fnn2[k] * model.mixing_weights(0)(k, j);
    for (int k = 0; k < 2; ++k) a += h_rnn2[k] * model.mixing_weights(1)(k, j);
    mix[j] = std::max(0.0, a);
  }
  // output softmax
  std::vector<double> logits(5);
  double mx = -1e300;
  for (int v = 0; v < 5; ++v) {
    double a = model.output_bias()(0, v);
    for (int k = 0; k < 3; ++k) a += mix[k] * model.output_weights()(k, v);
    logits[v] = a;
    mx = std::max(mx, a);
  }
  double z = 0;
  for (int v = 0; v < 5; ++v) z += std::exp(logits[v] - mx);
  for (int v = 0; v < 5; ++v) {
    const double expected = std::exp(logits[v] - mx) / z;
    REQUIRE(step2[0](0, v) == doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("param block names are unique and ordered stably") {
  const auto spec = make_spec("F3^2+R2+L2", 2, 3, 5);
  NmmModel<double> model(spec);
  auto blocks = model.param_blocks();
  CHECK(blocks.front().name == "embedding.U");
  CHECK(blocks.back().name == "output.b");
  std::set<std::string> names;
  for (const auto& b : blocks) names.insert(b.name);
  CHECK(names.size() == blocks.size());

  // counting from live containers must agree with the arithmetic counter
  long long total = 0;
  for (const auto& b : blocks) total += static_cast<long long>(b.value->size());
  CHECK(total == nmm::count_params(spec, true));
}

TEST_CASE("output rows sum to one for any mask and spec") {
  Rng rng(17);
  for (const char* text : {"F3^2", "R3", "L3", "F3^2+R3", "F2^2+F3^3+L2"}) {
    const auto spec = make_spec(text, 3, 4, 6);
    NmmModel<double> model(spec);
    model.init_params(rng);
    const int batch = 3;
    model.reset_states(batch, 1);
    auto mask = nmm::sample_dropout(spec.components, 0.5, batch, rng);
    const std::vector<std::vector<int>> inputs = {{0, 1, 2}, {3, 4, 5}};
    auto probs = model.forward(inputs, mask, true, false);
    for (const auto& p : probs)
      for (int b = 0; b < p.rows(); ++b) {
        double sum = 0;
        for (int v = 0; v < p.cols(); ++v) {
          REQUIRE(p(b, v) >= 0.0);
          sum += p(b, v);
        }
        REQUIRE(sum == doctest::Approx(1.0).epsilon(1e-6));
      }
  }
}

TEST_CASE("all-FNN mixture with every model dropped emits a constant distribution") {
  Rng rng(19);
  const auto spec = make_spec("F3^2+F3^3", 2, 4, 6);
  NmmModel<double> model(spec);
  model.init_params(rng);
  model.reset_states(2, 1);
  DropoutMask mask;
  mask.p_drop = 1.0;
  mask.active.assign(2, std::vector<uint8_t>(2, 0));
  const std::vector<std::vector<int>> inputs = {{0, 1}, {2, 3}, {4, 5}};
  auto probs = model.forward(inputs, mask, true, false);
  // mixture input is bias-only, so every position sees the same distribution
  for (const auto& p : probs)
    for (int b = 0; b < p.rows(); ++b)
      for (int v = 0; v < p.cols(); ++v)
        REQUIRE(p(b, v) == doctest::Approx(probs[0](0, v)).epsilon(1e-12));
}

TEST_CASE("train-mode forward with zero dropout equals eval-mode bit for bit") {
  Rng rng(23);
  const auto spec = make_spec("L3+F3^2", 2, 4, 6);
  NmmModel<double> model(spec);
  model.init_params(rng);
  const std::vector<std::vector<int>> inputs = {{0, 1}, {2, 3}};
  const auto mask = DropoutMask::everything_active(2, 2);

  model.reset_states(2, 1);
  auto train_probs = model.forward(inputs, mask, true, false);
  model.reset_states(2, 1);
  auto eval_probs = model.forward(inputs, mask, false, false);
  for (size_t t = 0; t < train_probs.size(); ++t)
    REQUIRE(test::max_abs_diff(train_probs[t], eval_probs[t]) == 0.0);
}

TEST_CASE("backward with perfectly confident correct predictions gives zero gradients") {
  // Forcing the output bias to a huge logit on the target makes its softmax
  // probability exactly 1 in double precision, so dlogits vanishes.
  const auto spec = make_spec("F2^2", 2, 3, 4);
  NmmModel<double> model(spec);
  model.output_bias()(0, 2) = 1000.0;

  model.reset_states(1, 1);
  const auto mask = DropoutMask::everything_active(1, 1);
  auto probs = model.forward({{0}, {1}}, mask, true, true);
  CHECK(probs[0](0, 2) == 1.0);
  model.zero_grads();
  const double loss = model.backward({{2}, {2}});
  CHECK(loss == 0.0);
  for (const auto& b : model.param_blocks())
    for (size_t k = 0; k < b.grad->size(); ++k) REQUIRE(b.grad->data()[k] == 0.0);
}

TEST_CASE("full-model gradients match finite differences across mixture families") {
  const int vocab = 6, emb = 3, mix = 4, batch = 2, window = 3;
  int family = 0;
  for (const char* text :
       {"F3^2", "R3", "L3", "F3^3+R2", "F2^2+L3", "R2+L2", "F2^2+R3+L2"}) {
    ++family;
    Rng rng(100 + family);
    const auto spec = make_spec(text, emb, mix, vocab);
    NmmModel<double> model(spec);
    model.init_params(rng);
    auto blocks = model.param_blocks();
    test::jitter_params(blocks, rng);

    std::vector<std::vector<int>> inputs, targets;
    for (int t = 0; t < window; ++t) {
      std::vector<int> in, tg;
      for (int b = 0; b < batch; ++b) {
        in.push_back(static_cast<int>(rng.next_u64() % vocab));
        tg.push_back(static_cast<int>(rng.next_u64() % vocab));
      }
      inputs.push_back(in);
      targets.push_back(tg);
    }
    const auto mask = DropoutMask::everything_active(model.component_count(), batch);

    auto loss = [&]() {
      model.reset_states(batch, 1);
      return summed_ce(model.forward(inputs, mask, true, false), targets);
    };

    model.reset_states(batch, 1);
    model.forward(inputs, mask, true, true);
    model.zero_grads();
    model.backward(targets);

    test::GradCheckFailure fail;
    const bool ok =
        test::check_gradients(blocks, std::function<double()>(loss), 1e-5, 1e-4, &fail);
    if (!ok)
      FAIL("spec=", text, " block=", fail.block, " (", fail.row, ",", fail.col,
           ") analytic=", fail.analytic, " numeric=", fail.numeric);
  }
}

TEST_CASE("dropped components receive no gradients and contribute none to the embedding") {
  Rng rng(31);
  const auto spec = make_spec("F3^2+R3", 2, 4, 6);
  NmmModel<double> model(spec);
  model.init_params(rng);

  DropoutMask mask;
  mask.p_drop = 0.5;
  mask.active = {{0}, {1}};  // FNN dropped, RNN active

  model.reset_states(1, 1);
  model.forward({{2}, {3}}, mask, true, true);
  model.zero_grads();
  model.backward({{4}, {5}});

  for (const auto& b : model.param_blocks()) {
    const bool fnn_block = b.name.rfind("component0", 0) == 0;
    const bool fnn_mixing = b.name == "mixture.S0";
    double norm = 0;
    for (size_t k = 0; k < b.grad->size(); ++k)
      norm += std::abs(b.grad->data()[k]);
    if (fnn_block || fnn_mixing) {
      REQUIRE(norm == 0.0);
    } else if (b.name.rfind("component1", 0) == 0 || b.name == "mixture.S1") {
      REQUIRE(norm > 0.0);
    }
  }
}

TEST_CASE("zeroing the RNN branch isolates the FNN embedding-gradient path") {
  // Word 5 enters the window only through the FNN's carried context (it
  // was fed before the window start, so the RNN's use of it is truncated
  // away). With the RNN's mixing weights zeroed, its embedding gradient
  // must match a pure-FNN model sharing the same parameters exactly: no
  // gradient may leak across branches.
  const auto mixed_spec = make_spec("F3^3+R3", 2, 4, 6);
  const auto fnn_spec = make_spec("F3^3", 2, 4, 6);

  NmmModel<double> mixed(mixed_spec);
  Rng rng(37);
  mixed.init_params(rng);
  auto mixed_blocks = mixed.param_blocks();
  // keep the relu paths alive so the FNN contribution is nonzero
  block_by_name(mixed_blocks, "component0.b0").fill(0.5);
  block_by_name(mixed_blocks, "mixture.b").fill(0.5);
  mixed.mixing_weights(1).zero();  // disconnect the RNN branch

  NmmModel<double> pure(fnn_spec);
  auto pure_blocks = pure.param_blocks();
  for (auto& dst : pure_blocks)
    *dst.value = block_by_name(mixed_blocks, dst.name);

  auto run = [](NmmModel<double>& model) {
    const auto mask = DropoutMask::everything_active(model.component_count(), 1);
    model.reset_states(1, 1);
    model.forward({{5}}, mask, true, true);  // pre-window: feeds word 5
    model.drop_cache();
    model.forward({{2}, {3}}, mask, true, true);
    model.zero_grads();
    model.backward({{1}, {4}});
  };
  run(mixed);
  run(pure);

  const auto& mixed_emb_grad = *mixed_blocks[0].grad;
  const auto& pure_emb_grad = *pure_blocks[0].grad;
  double norm = 0;
  for (int c = 0; c < 2; ++c) {
    norm += std::abs(mixed_emb_grad(5, c));
    REQUIRE(mixed_emb_grad(5, c) == pure_emb_grad(5, c));
  }
  CHECK(norm > 0.0);
  // with the branch disconnected the whole embedding gradient coincides
  CHECK(test::max_abs_diff(mixed_emb_grad, pure_emb_grad) == 0.0);
}

TEST_CASE("count_params on the model agrees with its parameter containers") {
  for (const char* text : {"F3^2", "R3+L4", "F2^2+F3^4+R2"}) {
    const auto spec = make_spec(text, 3, 5, 7);
    NmmModel<double> model(spec);
    auto blocks = model.param_blocks();
    long long total = 0, weights = 0;
    for (const auto& b : blocks) {
      total += static_cast<long long>(b.value->size());
      if (b.decay) weights += static_cast<long long>(b.value->size());
    }
    CHECK(total == nmm::count_params(spec, true));
    CHECK(weights == nmm::count_params(spec, false));
  }
}
