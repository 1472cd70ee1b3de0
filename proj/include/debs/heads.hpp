#pragma once

#include <optional>
#include <string>

#include "debs/autodiff.hpp"
#include "debs/tensor.hpp"

namespace debs {

struct head_config {
  std::size_t rep_dim = 128;      // encoder output width
  std::size_t proj_dim = 256;     // projector hidden and output width
  std::size_t pred_hidden = 64;   // predictor bottleneck width
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;
};

// Two-layer MLP with batch norm + ReLU between the layers:
// linear(in->hidden) -> BN -> ReLU -> linear(hidden->out).
template <class T>
struct mlp_head {
  std::size_t in = 0, hidden = 0, out = 0;
  tensor<T> w1, b1, bn_g, bn_b, w2, b2;
  tensor<T> run_mean, run_var;  // buffers, not trained

  static mlp_head init(std::size_t in, std::size_t hidden, std::size_t out, rng& r) {
    mlp_head h;
    h.in = in;
    h.hidden = hidden;
    h.out = out;
    const T sigma = static_cast<T>(0.02);
    h.w1 = random_truncated_normal<T>({in, hidden}, r, sigma);
    h.b1 = tensor<T>({hidden});
    h.bn_g = tensor<T>::ones({hidden});
    h.bn_b = tensor<T>({hidden});
    h.w2 = random_truncated_normal<T>({hidden, out}, r, sigma);
    h.b2 = tensor<T>({out});
    h.run_mean = tensor<T>({hidden});
    h.run_var = tensor<T>::ones({hidden});
    return h;
  }

  template <class Fn>
  void for_each_param(const std::string& prefix, Fn&& fn) {
    fn(prefix + "/w1", w1);
    fn(prefix + "/b1", b1);
    fn(prefix + "/bn_g", bn_g);
    fn(prefix + "/bn_b", bn_b);
    fn(prefix + "/w2", w2);
    fn(prefix + "/b2", b2);
  }
  template <class Fn>
  void for_each_buffer(const std::string& prefix, Fn&& fn) {
    fn(prefix + "/run_mean", run_mean);
    fn(prefix + "/run_var", run_var);
  }
};

template <class T>
struct mlp_head_leaves {
  using id = typename tape<T>::id;
  id w1, b1, bn_g, bn_b, w2, b2;
};

template <class T>
mlp_head_leaves<T> register_head(tape<T>& tp, const mlp_head<T>& h, bool trainable) {
  return {tp.leaf(h.w1, trainable), tp.leaf(h.b1, trainable), tp.leaf(h.bn_g, trainable),
          tp.leaf(h.bn_b, trainable), tp.leaf(h.w2, trainable), tp.leaf(h.b2, trainable)};
}

// Leaf ids in the same order as mlp_head::for_each_param.
template <class T>
std::vector<typename tape<T>::id> head_leaf_ids(const mlp_head_leaves<T>& l) {
  return {l.w1, l.b1, l.bn_g, l.bn_b, l.w2, l.b2};
}

template <class T>
struct head_fwd {
  typename tape<T>::id pre_relu;  // BN output before the ReLU
  typename tape<T>::id out;
};

// Train mode uses batch statistics and, when `state` is given, advances its
// running buffers (momentum update, unbiased variance). Eval mode reads the
// stored running statistics and never mutates anything.
template <class T>
head_fwd<T> head_forward(tape<T>& tp, const mlp_head_leaves<T>& l, const mlp_head<T>& h,
                         typename tape<T>::id x, bool train_mode, const head_config& cfg,
                         mlp_head<T>* state = nullptr) {
  using id = typename tape<T>::id;
  id z = tp.linear(x, l.w1, l.b1);
  id bn;
  if (train_mode) {
    auto r = tp.batch_norm_train(z, l.bn_g, l.bn_b, static_cast<T>(cfg.bn_eps));
    bn = r.out;
    if (state) {
      const std::size_t b = tp.value(x).shape[0];
      const T mom = static_cast<T>(cfg.bn_momentum);
      const T unbias = static_cast<T>(b) / static_cast<T>(b - 1);
      for (std::size_t j = 0; j < h.hidden; ++j) {
        state->run_mean[j] = (T{1} - mom) * state->run_mean[j] + mom * r.batch_mean[j];
        state->run_var[j] = (T{1} - mom) * state->run_var[j] + mom * r.batch_var[j] * unbias;
      }
    }
  } else {
    bn = tp.batch_norm_eval(z, l.bn_g, l.bn_b, h.run_mean, h.run_var,
                            static_cast<T>(cfg.bn_eps));
  }
  id out = tp.linear(tp.relu(bn), l.w2, l.b2);
  return {bn, out};
}

enum class head_path { sim, dis };

// The two projector branches (both networks) plus, on the student only, the
// two predictors whose outputs live in the teacher-projection space.
template <class T>
struct head_stack {
  head_config cfg;
  mlp_head<T> proj_sim, proj_dis;
  std::optional<mlp_head<T>> pred_sim, pred_dis;

  bool is_student() const { return pred_sim.has_value(); }

  static head_stack init_student(const head_config& cfg, rng& r) {
    head_stack s;
    s.cfg = cfg;
    s.proj_sim = mlp_head<T>::init(cfg.rep_dim, cfg.proj_dim, cfg.proj_dim, r);
    s.proj_dis = mlp_head<T>::init(cfg.rep_dim, cfg.proj_dim, cfg.proj_dim, r);
    s.pred_sim = mlp_head<T>::init(cfg.proj_dim, cfg.pred_hidden, cfg.proj_dim, r);
    s.pred_dis = mlp_head<T>::init(cfg.proj_dim, cfg.pred_hidden, cfg.proj_dim, r);
    return s;
  }

  // Teacher stack: projectors copied from the student, no predictors.
  static head_stack teacher_from(const head_stack& student) {
    head_stack t;
    t.cfg = student.cfg;
    t.proj_sim = student.proj_sim;
    t.proj_dis = student.proj_dis;
    return t;
  }

  mlp_head<T>& projector(head_path p) { return p == head_path::sim ? proj_sim : proj_dis; }
  const mlp_head<T>& projector(head_path p) const {
    return p == head_path::sim ? proj_sim : proj_dis;
  }
  mlp_head<T>& predictor(head_path p) {
    if (!is_student()) throw contract_error("predict: teacher stack has no predictors");
    return p == head_path::sim ? *pred_sim : *pred_dis;
  }
  const mlp_head<T>& predictor(head_path p) const {
    if (!is_student()) throw contract_error("predict: teacher stack has no predictors");
    return p == head_path::sim ? *pred_sim : *pred_dis;
  }

  template <class Fn>
  void for_each_param(Fn&& fn) {
    proj_sim.for_each_param("proj_sim", fn);
    proj_dis.for_each_param("proj_dis", fn);
    if (pred_sim) pred_sim->for_each_param("pred_sim", fn);
    if (pred_dis) pred_dis->for_each_param("pred_dis", fn);
  }
  template <class Fn>
  void for_each_buffer(Fn&& fn) {
    proj_sim.for_each_buffer("proj_sim", fn);
    proj_dis.for_each_buffer("proj_dis", fn);
    if (pred_sim) pred_sim->for_each_buffer("pred_sim", fn);
    if (pred_dis) pred_dis->for_each_buffer("pred_dis", fn);
  }
};

// Plain-tensor convenience used by tests and evaluation: project a batch of
// representations through one branch. Train mode updates running statistics.
template <class T>
tensor<T> project(head_stack<T>& stack, const tensor<T>& reps, head_path which, bool train_mode) {
  require(reps.ndim() == 2 && reps.shape[1] == stack.cfg.rep_dim,
          "project: expected [batch, rep_dim]");
  tape<T> tp;
  mlp_head<T>& head = stack.projector(which);
  auto l = register_head(tp, head, false);
  auto fwd = head_forward(tp, l, head, tp.constant(reps), train_mode, stack.cfg,
                          train_mode ? &head : nullptr);
  return tp.value(fwd.out);
}

template <class T>
tensor<T> predict(head_stack<T>& stack, const tensor<T>& projections, head_path which,
                  bool train_mode) {
  mlp_head<T>& head = stack.predictor(which);
  require(projections.ndim() == 2 && projections.shape[1] == head.in,
          "predict: expected [batch, proj_dim]");
  tape<T> tp;
  auto l = register_head(tp, head, false);
  auto fwd = head_forward(tp, l, head, tp.constant(projections), train_mode, stack.cfg,
                          train_mode ? &head : nullptr);
  return tp.value(fwd.out);
}

}  // namespace debs
