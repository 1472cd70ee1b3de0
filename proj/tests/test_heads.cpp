#include <gtest/gtest.h>

#include "debs/heads.hpp"
#include "test_util.hpp"

using namespace debs;
using ften = tensor<float>;
using dten = tensor<double>;

namespace {

head_config default_cfg() { return head_config{}; }

head_config toy_cfg() {
  head_config c;
  c.rep_dim = 4;
  c.proj_dim = 6;
  c.pred_hidden = 3;
  return c;
}

}  // namespace

TEST(Project, ZeroInputZeroBiasesGivesZeroOutput) {
  rng r(1);
  auto stack = head_stack<float>::init_student(default_cfg(), r);
  ften zeros({4, 128});
  auto out = project(stack, zeros, head_path::sim, /*train=*/false);
  ASSERT_EQ(out.shape, (shape_t{4, 256}));
  for (float v : out.data) EXPECT_FLOAT_EQ(v, 0.f);
}

TEST(Project, TrainModeNormalizesPreReluActivations) {
  rng r(2);
  auto stack = head_stack<float>::init_student(default_cfg(), r);
  ften x({256, 128});
  for (auto& v : x.data) v = static_cast<float>(r.normal(0.5, 2.0));

  tape<float> tp;
  auto l = register_head(tp, stack.proj_sim, false);
  auto fwd = head_forward(tp, l, stack.proj_sim, tp.constant(x), /*train=*/true, stack.cfg);
  const ften& pre = tp.value(fwd.pre_relu);
  ASSERT_EQ(pre.shape, (shape_t{256, 256}));
  for (std::size_t j = 0; j < 256; ++j) {
    double mean = 0, var = 0;
    for (std::size_t i = 0; i < 256; ++i) mean += pre[i * 256 + j];
    mean /= 256;
    for (std::size_t i = 0; i < 256; ++i) {
      const double d = pre[i * 256 + j] - mean;
      var += d * d;
    }
    var /= 256;
    EXPECT_NEAR(mean, 0.0, 1e-4);
    EXPECT_NEAR(var, 1.0, 1e-2);
  }
}

TEST(Project, SimAndDisBranchesDiffer) {
  rng r(3);
  auto stack = head_stack<float>::init_student(default_cfg(), r);
  ften x({2, 128});
  for (auto& v : x.data) v = static_cast<float>(r.normal());
  auto sim = project(stack, x, head_path::sim, false);
  auto dis = project(stack, x, head_path::dis, false);
  EXPECT_NE(sim.data, dis.data);
}

TEST(Project, TrainModeBatchOfOneRejected) {
  rng r(4);
  auto stack = head_stack<float>::init_student(default_cfg(), r);
  ften x({1, 128});
  EXPECT_THROW(project(stack, x, head_path::sim, true), contract_error);
}

TEST(Predict, ZeroInputGivesZeroAndTeacherSpaceWidth) {
  rng r(5);
  auto stack = head_stack<float>::init_student(default_cfg(), r);
  ften zeros({3, 256});
  auto out = predict(stack, zeros, head_path::sim, false);
  ASSERT_EQ(out.shape, (shape_t{3, 256}));  // prediction lives in projection space
  for (float v : out.data) EXPECT_FLOAT_EQ(v, 0.f);
}

TEST(Predict, TeacherStackRejected) {
  rng r(6);
  auto student = head_stack<float>::init_student(default_cfg(), r);
  auto teacher = head_stack<float>::teacher_from(student);
  EXPECT_FALSE(teacher.is_student());
  ften x({2, 256});
  EXPECT_THROW(predict(teacher, x, head_path::sim, false), contract_error);
}

TEST(Heads, PathsShareNoParameters) {
  rng r(7);
  auto stack = head_stack<float>::init_student(default_cfg(), r);
  ften x({2, 128});
  for (auto& v : x.data) v = static_cast<float>(r.normal());
  auto dis_before = project(stack, x, head_path::dis, false);
  // perturb every sim-path projector weight
  for (auto& v : stack.proj_sim.w1.data) v += 1.f;
  for (auto& v : stack.proj_sim.w2.data) v += 1.f;
  auto dis_after = project(stack, x, head_path::dis, false);
  EXPECT_EQ(dis_before.data, dis_after.data);  // bit identical
}

TEST(Heads, RunningStatsUpdateOnlyInTrainMode) {
  rng r(8);
  auto stack = head_stack<float>::init_student(default_cfg(), r);
  ften x({16, 128});
  for (auto& v : x.data) v = static_cast<float>(r.normal(1.0, 3.0));

  auto mean0 = stack.proj_sim.run_mean.data;
  auto var0 = stack.proj_sim.run_var.data;
  (void)project(stack, x, head_path::sim, /*train=*/false);
  EXPECT_EQ(stack.proj_sim.run_mean.data, mean0);
  EXPECT_EQ(stack.proj_sim.run_var.data, var0);

  (void)project(stack, x, head_path::sim, /*train=*/true);
  EXPECT_NE(stack.proj_sim.run_mean.data, mean0);
  EXPECT_NE(stack.proj_sim.run_var.data, var0);
}

// Full projector+predictor gradient check on a small head configuration.
TEST(Heads, GradientMatchesFiniteDifferences) {
  rng r(9);
  auto cfg = toy_cfg();
  auto stack = head_stack<double>::init_student(cfg, r);
  dten x({3, 4});
  for (auto& v : x.data) v = r.normal();

  auto build = [&](tape<double>& tp) {
    auto lp = register_head(tp, stack.proj_dis, true);
    auto lq = register_head(tp, *stack.pred_dis, true);
    auto proj = head_forward(tp, lp, stack.proj_dis, tp.constant(x), true, cfg);
    auto pred = head_forward(tp, lq, *stack.pred_dis, proj.out, true, cfg);
    auto sq = tp.mul(pred.out, pred.out);
    auto loss = tp.mean_all(sq);
    std::vector<tape<double>::id> ids = {lp.w1, lp.b1, lp.bn_g, lp.bn_b, lp.w2, lp.b2,
                                         lq.w1, lq.b1, lq.bn_g, lq.bn_b, lq.w2, lq.b2};
    return std::pair{loss, ids};
  };
  auto loss_fn = std::function<double()>([&]() {
    tape<double> tp;
    return tp.value(build(tp).first)[0];
  });
  auto grad_fn = std::function<std::vector<dten>()>([&]() {
    tape<double> tp;
    auto [loss, ids] = build(tp);
    tp.backward(loss);
    std::vector<dten> gs;
    for (auto id : ids)
      gs.push_back(tp.grad(id).empty() ? dten(tp.value(id).shape) : tp.grad(id));
    return gs;
  });
  std::vector<dten*> params;
  stack.proj_dis.for_each_param("p", [&](const std::string&, dten& t) { params.push_back(&t); });
  stack.pred_dis->for_each_param("q", [&](const std::string&, dten& t) { params.push_back(&t); });
  auto rep = finite_difference_check<double>(loss_fn, grad_fn, params, 1e-5);
  EXPECT_LT(rep.max_rel_dev, 1e-3);
}
