#include <doctest.h>

#include <cmath>

#include "ft_check.hpp"
#include "helpers.hpp"
#include "setar/errors.hpp"
#include "setar/finetune.hpp"
#include "setar/task.hpp"

using namespace setar;

namespace {

RankPlan up_plan(const ModelConfig& c, double ratio) {
  RankPlan p;
  for (std::size_t l = 0; l < c.n_vision_layers; ++l) p.entries.push_back({layer_key(Tower::vision, l, WeightType::up), ratio});
  if (!c.unimodal)
    for (std::size_t l = 0; l < c.n_text_layers; ++l) p.entries.push_back({layer_key(Tower::text, l, WeightType::up), ratio});
  return p;
}

}  // namespace

TEST_CASE("ft_init shapes and fidelity") {
  const WeightStore s = init_weights(testing::tiny_config(), 3);
  FtConfig cfg;
  RankPlan plan = up_plan(s.config(), 0.25);
  plan.entries[1].ratio = 0.0;
  const auto states = ft_init(s, plan, cfg);
  REQUIRE(states.size() == 4);
  CHECK(states[1].b.cols() == 0);
  CHECK(states[1].a.rows() == 0);
  CHECK(states[1].w_hat == s.get(states[1].key));
  CHECK(states[0].b.cols() == 2);
  CHECK(states[0].a.rows() == 2);
  const WeightStore re = reassemble(s, states);
  for (const auto& st : states) {
    const Matrix& w = s.get(st.key);
    CHECK(frobenius_norm(re.get(st.key) - w) / frobenius_norm(w) < 1e-5);
  }
}

TEST_CASE("lora baseline starts as an exact identity") {
  const WeightStore s = init_weights(testing::tiny_config(), 4);
  FtConfig cfg;
  cfg.mode = FtMode::lora_baseline;
  cfg.baseline_rank = 3;
  const auto states = ft_init(s, up_plan(s.config(), 0.1), cfg);
  for (const auto& st : states) {
    CHECK(st.b == Matrix(st.b.rows(), 3));
    CHECK(st.a.rows() == 3);
    CHECK(frobenius_norm(st.a) > 0.0);
  }
  CHECK(reassemble(s, states) == s);
  cfg.baseline_rank = 9;
  CHECK_THROWS_AS(ft_init(s, up_plan(s.config(), 0.1), cfg), InvalidInput);
}

TEST_CASE("ft config validation") {
  FtConfig cfg;
  cfg.learning_rate = 0.0;
  CHECK_THROWS_AS(cfg.validate(), InvalidInput);
  cfg = FtConfig{};
  cfg.epochs = 0;
  CHECK_THROWS_AS(cfg.validate(), InvalidInput);
  CHECK(ft_mode_from_string(to_string(FtMode::lora_baseline)) == FtMode::lora_baseline);
  CHECK_THROWS_AS(ft_mode_from_string("full"), InvalidInput);
}

TEST_CASE("ft gradients match finite differences") {
  const SyntheticTask t = generate_task(testing::tiny_task_spec(5));
  LossParams lp;
  lp.lambda_ood = 0.5;
  lp.top_k = 1;
  SUBCASE("setar_ft") {
    const auto states = ft_init(t.noisy_store, up_plan(t.noisy_store.config(), 0.25), FtConfig{});
    const auto r = testing::check_ft_grads(t.noisy_store, states, std::span(t.id_train).first(4), t.prompts, lp);
    CHECK(r.entries > 0);
    CHECK(r.failures == 0);
  }
  SUBCASE("lora_baseline with nonzero b") {
    FtConfig cfg;
    cfg.mode = FtMode::lora_baseline;
    cfg.baseline_rank = 2;
    auto states = ft_init(t.noisy_store, up_plan(t.noisy_store.config(), 0.1), cfg);
    for (auto& st : states)
      for (double& x : st.b.data()) x = 0.05;
    const auto r = testing::check_ft_grads(t.noisy_store, states, std::span(t.id_train).first(3), t.prompts, lp);
    CHECK(r.failures == 0);
  }
  SUBCASE("unimodal") {
    const SyntheticTask u = generate_task(testing::tiny_task_spec(5, true));
    const auto states = ft_init(u.noisy_store, up_plan(u.noisy_store.config(), 0.25), FtConfig{});
    const auto r = testing::check_ft_grads(u.noisy_store, states, std::span(u.id_train).first(4), u.prompts, lp);
    CHECK(r.failures == 0);
  }
}

TEST_CASE("zero learning signal gives zero gradients") {
  WeightStore s = init_weights(testing::tiny_config(true), 6);
  const WeightKey head = tower_key(Tower::vision, WeightType::head);
  s = s.with(head, Matrix(s.get(head).rows(), s.get(head).cols()));
  LossParams lp;
  lp.lambda_ood = 0.0;
  Rng rng(1);
  const std::vector<LabeledImage> batch{testing::random_image(rng, s.config(), 0), testing::random_image(rng, s.config(), 2)};
  const auto states = ft_init(s, up_plan(s.config(), 0.25), FtConfig{});
  const auto g = ft_grads(s, states, batch, ClassPrompts::from_names({"a", "b", "c"}), lp);
  for (const auto& x : g) {
    for (double v : x.d_a.data()) CHECK(std::abs(v) < 1e-8);
    for (double v : x.d_b.data()) CHECK(std::abs(v) < 1e-8);
  }
}

TEST_CASE("duplicating the batch leaves gradients unchanged") {
  const SyntheticTask t = generate_task(testing::tiny_task_spec(7));
  const auto states = ft_init(t.noisy_store, up_plan(t.noisy_store.config(), 0.25), FtConfig{});
  const std::vector<LabeledImage> one(t.id_train.begin(), t.id_train.begin() + 3);
  std::vector<LabeledImage> two = one;
  two.insert(two.end(), one.begin(), one.end());
  const auto g1 = ft_grads(t.noisy_store, states, one, t.prompts, LossParams{});
  const auto g2 = ft_grads(t.noisy_store, states, two, t.prompts, LossParams{});
  for (std::size_t i = 0; i < g1.size(); ++i) {
    CHECK(max_abs_diff(g1[i].d_a, g2[i].d_a) < 1e-12);
    CHECK(max_abs_diff(g1[i].d_b, g2[i].d_b) < 1e-12);
  }
}

TEST_CASE("vanishing learning rate leaves the model unchanged") {
  const SyntheticTask t = generate_task(testing::tiny_task_spec(8));
  FtConfig cfg;
  cfg.learning_rate = 1e-12;
  cfg.epochs = 3;
  const RankPlan plan = up_plan(t.noisy_store.config(), 0.25);
  const FtResult r = ft_train(t.noisy_store, plan, t.id_train, t.prompts, cfg);
  REQUIRE(r.loss_curve.size() == 4);
  for (const auto& lb : r.loss_curve) CHECK(std::abs(lb.total - r.loss_curve[0].total) < 1e-6);
  const WeightStore init = reassemble(t.noisy_store, ft_init(t.noisy_store, plan, cfg));
  for (const auto& k : init.keys()) CHECK(max_abs_diff(r.store.get(k), init.get(k)) < 1e-9);
}

TEST_CASE("a single step is init minus lr times the gradient") {
  const SyntheticTask t = generate_task(testing::tiny_task_spec(9));
  FtConfig cfg;
  cfg.learning_rate = 0.05;
  cfg.epochs = 1;
  const RankPlan plan = up_plan(t.noisy_store.config(), 0.25);
  const std::vector<LabeledImage> one{t.id_train[0]};
  const auto init = ft_init(t.noisy_store, plan, cfg);
  const auto g = ft_grads(t.noisy_store, init, one, t.prompts, cfg.loss_params);
  const FtResult r = ft_train(t.noisy_store, plan, one, t.prompts, cfg);
  for (std::size_t i = 0; i < init.size(); ++i) {
    CHECK(r.states[i].a == init[i].a - cfg.learning_rate * g[i].d_a);
    CHECK(r.states[i].b == init[i].b - cfg.learning_rate * g[i].d_b);
  }
}

TEST_CASE("training keeps w_hat frozen and is deterministic") {
  const SyntheticTask t = generate_task(testing::tiny_task_spec(10));
  FtConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 4;
  cfg.seed = 3;
  const RankPlan plan = up_plan(t.noisy_store.config(), 0.3);
  const auto init = ft_init(t.noisy_store, plan, cfg);
  const FtResult a = ft_train(t.noisy_store, plan, t.id_train, t.prompts, cfg);
  const FtResult b = ft_train(t.noisy_store, plan, t.id_train, t.prompts, cfg);
  for (std::size_t i = 0; i < init.size(); ++i) CHECK(a.states[i].w_hat == init[i].w_hat);
  CHECK(a.store == b.store);
  CHECK(a.loss_curve.size() == 6);
  for (std::size_t i = 0; i < a.loss_curve.size(); ++i) CHECK(a.loss_curve[i].total == b.loss_curve[i].total);
  for (const auto& k : t.noisy_store.keys()) {
    const bool trained = std::any_of(plan.entries.begin(), plan.entries.end(), [&](const PlanEntry& e) { return e.key == k; });
    if (!trained) CHECK(a.store.get(k) == t.noisy_store.get(k));
  }
}

TEST_CASE("fine-tuning errors") {
  const SyntheticTask t = generate_task(testing::tiny_task_spec(11));
  const RankPlan plan = up_plan(t.noisy_store.config(), 0.25);
  CHECK_THROWS_AS(ft_train(t.noisy_store, plan, std::span<const LabeledImage>{}, t.prompts, FtConfig{}), InvalidInput);
  FtConfig cfg;
  cfg.learning_rate = 1e300;
  cfg.epochs = 3;
  CHECK_THROWS_AS(ft_train(t.noisy_store, plan, t.id_train, t.prompts, cfg), NumericError);
  RankPlan bad;
  bad.entries = {{layer_key(Tower::text, 7, WeightType::up), 0.1}};
  CHECK_THROWS_AS(ft_init(t.noisy_store, bad, FtConfig{}), InvalidInput);
}
