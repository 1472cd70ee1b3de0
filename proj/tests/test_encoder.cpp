#include <gtest/gtest.h>

#include "debs/encoder.hpp"
#include "test_util.hpp"

using namespace debs;
using dten = tensor<double>;

namespace {

encoder_config toy_config() {
  encoder_config c;
  c.input_len = 16;
  c.patch_size = 4;
  c.depth = 1;
  c.heads = 2;
  c.model_dim = 8;
  c.mlp_hidden = 32;
  return c;
}

}  // namespace

TEST(Patchify, SplitsSignalIntoRows) {
  tensor<float> ramp({40});
  for (std::size_t i = 0; i < 40; ++i) ramp[i] = static_cast<float>(i);
  auto p = patchify(ramp, 20);
  ASSERT_EQ(p.shape, (shape_t{2, 20}));
  EXPECT_FLOAT_EQ(p[0], 0.f);
  EXPECT_FLOAT_EQ(p[19], 19.f);
  EXPECT_FLOAT_EQ(p[20], 20.f);
  EXPECT_FLOAT_EQ(p[39], 39.f);
}

TEST(Patchify, DefaultDimensions) {
  tensor<float> s({1000});
  auto p = patchify(s, 20);
  EXPECT_EQ(p.shape, (shape_t{50, 20}));
}

TEST(Patchify, RejectsIndivisibleLength) {
  tensor<float> s({999});
  EXPECT_THROW(patchify(s, 20), contract_error);
}

TEST(ParamCount, DefaultIsCloseToTarget) {
  encoder_config cfg;
  const std::size_t n = encoder_param_count(cfg);
  EXPECT_EQ(n, 1192576u);
  // within +/- 1% of the 1,192,616 reference figure
  EXPECT_LT(std::abs(static_cast<double>(n) - 1192616.0) / 1192616.0, 0.01);
}

TEST(ParamCount, ToyHandCount) {
  // embed 4*8+8 = 40; block = 16 + 4*(64+8) + 16 + (8*32+32 + 32*8+8) = 872;
  // final norm 16; total 928.
  EXPECT_EQ(encoder_param_count(toy_config()), 928u);
}

TEST(ParamCount, DepthAdditivity) {
  encoder_config a = toy_config();
  encoder_config b = toy_config();
  b.depth = 4;
  const std::size_t per_block = 872;
  EXPECT_EQ(encoder_param_count(b), encoder_param_count(a) + 3 * per_block);
}

TEST(ParamCount, MatchesactualTensorSizes) {
  rng r(3);
  auto p = vit_params<double>::init(encoder_config{}, r);
  std::size_t total = 0;
  p.for_each([&](const std::string&, dten& t) { total += t.numel(); });
  EXPECT_EQ(total, encoder_param_count(encoder_config{}));
}

TEST(ParamCount, InvalidConfigRejected) {
  encoder_config c;
  c.input_len = 999;
  EXPECT_THROW(encoder_param_count(c), config_error);
  c = encoder_config{};
  c.model_dim = 126;
  EXPECT_THROW(encoder_param_count(c), config_error);
}

TEST(Encode, DeterministicOnZeroSignal) {
  rng r(11);
  auto p = vit_params<float>::init(toy_config(), r);
  tensor<float> zero({16});
  auto r1 = encode_one(p, zero);
  auto r2 = encode_one(p, zero);
  EXPECT_TRUE(r1.all_finite());
  EXPECT_EQ(r1.data, r2.data);  // bit identical
  EXPECT_EQ(r1.numel(), toy_config().model_dim);
}

TEST(Encode, DifferentSignalsGiveDifferentOutputs) {
  rng r(12);
  auto p = vit_params<float>::init(toy_config(), r);
  tensor<float> a({16}), b({16});
  for (std::size_t i = 0; i < 16; ++i) {
    a[i] = static_cast<float>(std::sin(0.3 * static_cast<double>(i)));
    b[i] = static_cast<float>(std::cos(0.7 * static_cast<double>(i)));
  }
  EXPECT_NE(encode_one(p, a).data, encode_one(p, b).data);
}

TEST(Encode, OutputLengthAndTokenCount) {
  encoder_config cfg;
  EXPECT_EQ(cfg.tokens(), 50u);
  EXPECT_EQ(cfg.model_dim, 128u);
  rng r(13);
  auto p = vit_params<float>::init(toy_config(), r);
  tensor<float> batch({3, 16});
  for (auto& v : batch.data) v = static_cast<float>(r.normal());
  auto reps = encode_eval(p, batch);
  EXPECT_EQ(reps.shape, (shape_t{3, 8}));
}

TEST(Encode, PatchPermutationChangesOutput) {
  rng r(14);
  auto cfg = toy_config();
  auto p = vit_params<float>::init(cfg, r);
  tensor<float> sig({16});
  for (auto& v : sig.data) v = static_cast<float>(r.normal());
  tensor<float> swapped = sig;
  for (std::size_t j = 0; j < cfg.patch_size; ++j)
    std::swap(swapped[j], swapped[cfg.patch_size + j]);  // swap patch 0 and 1
  EXPECT_NE(encode_one(p, sig).data, encode_one(p, swapped).data);
}

TEST(Encode, WrongLengthRejected) {
  rng r(15);
  auto p = vit_params<float>::init(toy_config(), r);
  tensor<float> bad({17});
  EXPECT_THROW(encode_one(p, bad), contract_error);
}

// Gradient of ||encode(x)||^2 w.r.t. every encoder parameter matches central
// finite differences on the toy config.
TEST(Encode, GradientMatchesFiniteDifferences) {
  rng r(16);
  auto cfg = toy_config();
  auto p = vit_params<double>::init(cfg, r);
  tensor<double> x({2, 16});
  for (auto& v : x.data) v = r.normal();

  auto build = [&](tape<double>& tp) {
    auto leaves = register_encoder(tp, p, true);
    auto rep = encode_batch(tp, leaves, cfg, tp.constant(x));
    auto sq = tp.mul(rep, rep);
    auto loss = tp.affine(tp.mean_all(sq), static_cast<double>(tp.value(sq).numel()), 0.0);
    return std::pair{loss, leaves};
  };
  auto loss_fn = std::function<double()>([&]() {
    tape<double> tp;
    return tp.value(build(tp).first)[0];
  });
  auto grad_fn = std::function<std::vector<tensor<double>>()>([&]() {
    tape<double> tp;
    auto [loss, leaves] = build(tp);
    tp.backward(loss);
    std::vector<tensor<double>> gs;
    // collect in the same order as for_each
    tape<double>::id order[] = {leaves.patch_w, leaves.patch_b};
    for (auto id : order) gs.push_back(tp.grad(id).empty() ? tensor<double>(tp.value(id).shape) : tp.grad(id));
    for (const auto& b : leaves.blocks)
      for (auto id : {b.ln1_g, b.ln1_b, b.wq, b.bq, b.wk, b.bk, b.wv, b.bv, b.wo, b.bo, b.ln2_g,
                      b.ln2_b, b.w_in, b.b_in, b.w_out, b.b_out})
        gs.push_back(tp.grad(id).empty() ? tensor<double>(tp.value(id).shape) : tp.grad(id));
    for (auto id : {leaves.lnf_g, leaves.lnf_b})
      gs.push_back(tp.grad(id).empty() ? tensor<double>(tp.value(id).shape) : tp.grad(id));
    return gs;
  });
  std::vector<tensor<double>*> params;
  p.for_each([&](const std::string&, tensor<double>& t) { params.push_back(&t); });
  auto rep = finite_difference_check<double>(loss_fn, grad_fn, params, 1e-5);
  EXPECT_LT(rep.max_rel_dev, 1e-3)
      << "worst param " << rep.worst_param << " coord " << rep.worst_coord << ": analytic "
      << rep.analytic << " vs central " << rep.central;
}
