#pragma once

#include <condition_variable>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <optional>
#include <thread>
#include <unordered_map>

#include "debs/data.hpp"
#include "debs/losses.hpp"
#include "debs/model.hpp"
#include "debs/optimizer.hpp"

namespace debs {

struct train_config {
  double tau = 0.995;
  double alpha = 0.1;
  std::uint32_t window_segments = 15;  // 2 minutes at 8-second segments
  std::uint64_t total_iters = 25000;
  std::uint64_t phase_switch_iter = 15000;
  std::size_t batch_size = 256;
  double lr = 3e-4;
  double weight_decay = 1.5e-6;
  std::uint64_t seed = 0;
  std::uint64_t eval_every = 500;
  bool similarity_only = false;           // ablation: phase 1 for the whole run
  bool symmetrize_pairs = false;          // optional swapped-view second term
  bool reset_adam_at_transition = false;
  bool use_predictor = true;              // identity predictor for collapse studies
  bool freeze_bn_stats = false;           // eval-mode head BN; removes batch coupling

  void validate() const {
    if (tau < 0.0 || tau > 1.0) throw config_error("train config: tau must be in [0, 1]");
    if (alpha <= 0.0) throw config_error("train config: alpha must be positive");
    if (total_iters == 0) throw config_error("train config: total_iters must be positive");
    if (!similarity_only &&
        (phase_switch_iter == 0 || phase_switch_iter >= total_iters))
      throw config_error("train config: need 0 < phase_switch_iter < total_iters");
    if (window_segments < 2) throw config_error("train config: window_segments must be >= 2");
    if (batch_size < 2) throw config_error("train config: batch_size must be >= 2");
    if (lr <= 0.0) throw config_error("train config: lr must be positive");
    if (weight_decay < 0.0) throw config_error("train config: weight_decay must be >= 0");
    if (eval_every == 0) throw config_error("train config: eval_every must be positive");
  }

  int phase_of(std::uint64_t iter) const {
    return (similarity_only || iter <= phase_switch_iter) ? 1 : 2;
  }
};

struct step_metrics {
  std::uint64_t iteration = 0;
  int phase = 1;
  double loss = 0, loss_sim = 0, loss_dis = 0, loss_gra = 0;
};

inline int sampling_threads_from_env() {
  if (const char* v = std::getenv("DEBS_NUM_THREADS")) {
    const int n = std::atoi(v);
    if (n >= 1) return n;
  }
  return 1;
}

// A sampled batch for one iteration, plus the sampler rng state after the
// draw so a checkpoint taken at this iteration resumes the exact stream.
struct train_batch {
  std::uint64_t iter = 0;
  int phase = 1;
  pair_batch pairs;
  triplet_batch triplets;
  std::array<std::uint64_t, 4> rng_state_after{};
};

// Sequential batch stream; with more than one thread the next batch is
// prepared concurrently with the current step. Batch content depends only on
// the rng stream, so both modes produce identical runs.
class batch_source {
 public:
  batch_source(const dataset& ds, const train_config& cfg,
               const std::array<std::uint64_t, 4>& rng_state, std::uint64_t first_iter,
               int threads)
      : smp_(ds), cfg_(cfg), next_produce_(first_iter) {
    rng_.set_state(rng_state);
    if (threads > 1 && first_iter <= cfg_.total_iters)
      worker_ = std::thread([this] { worker_loop(); });
  }

  ~batch_source() {
    if (worker_.joinable()) {
      {
        std::lock_guard<std::mutex> lk(mu_);
        stop_ = true;
      }
      cv_.notify_all();
      worker_.join();
    }
  }

  train_batch next(std::uint64_t iter) {
    if (!worker_.joinable()) {
      require(iter == next_produce_, "batch_source: batches must be consumed in order");
      ++next_produce_;
      return produce(iter);
    }
    std::unique_lock<std::mutex> lk(mu_);
    cv_.wait(lk, [&] { return slot_.has_value(); });
    train_batch b = std::move(*slot_);
    slot_.reset();
    cv_.notify_all();
    require(b.iter == iter, "batch_source: batches must be consumed in order");
    return b;
  }

 private:
  train_batch produce(std::uint64_t iter) {
    train_batch b;
    b.iter = iter;
    b.phase = cfg_.phase_of(iter);
    if (b.phase == 1)
      b.pairs = smp_.make_pair_batch(cfg_.batch_size, rng_);
    else
      b.triplets = smp_.make_triplet_batch(cfg_.batch_size, cfg_.window_segments, rng_);
    b.rng_state_after = rng_.state();
    return b;
  }

  void worker_loop() {
    std::uint64_t iter = next_produce_;
    while (iter <= cfg_.total_iters) {
      train_batch b = produce(iter);
      std::unique_lock<std::mutex> lk(mu_);
      cv_.wait(lk, [&] { return !slot_.has_value() || stop_; });
      if (stop_) return;
      slot_ = std::move(b);
      cv_.notify_all();
      ++iter;
    }
  }

  sampler smp_;
  train_config cfg_;
  rng rng_;
  std::uint64_t next_produce_;
  std::thread worker_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::optional<train_batch> slot_;
  bool stop_ = false;
};

template <class T>
struct train_hooks {
  std::function<void(const step_metrics&)> on_step;
  std::function<void(std::uint64_t iter, double rep_std, model_state<T>& student)> on_eval;
  std::function<bool()> should_stop;
  std::function<void(std::uint64_t iter)> on_checkpoint;
  std::uint64_t checkpoint_every = 0;
};

// Two-phase optimization: phase 1 trains the similarity path on same-subject
// pairs; at the switch the teacher becomes a copy of the student and phase 2
// trains the dissimilarity path on window-constrained triplets. The teacher
// is EMA-updated after every step and never receives gradient.
template <class T>
class trainer {
 public:
  trainer(train_config cfg, model_state<T> student)
      : cfg_(cfg), student_(std::move(student)),
        teacher_(model_state<T>::teacher_from(student_)) {
    cfg_.validate();
    params_ = student_.named_params();
    opt_ = adam_state<T>::init(params_);
    rng sample_seed(cfg_.seed ^ 0x5A5A5A5Aull);
    batch_rng_state_ = sample_seed.state();
  }

  trainer(const trainer&) = delete;
  trainer& operator=(const trainer&) = delete;

  // ---- one optimization step, similarity phase ---------------------------
  step_metrics step_phase1(const pair_batch& batch) {
    if (transitioned_) throw contract_error("step_phase1: called after the phase transition");
    validate_pair_batch(batch);
    ++iteration_;

    tape<T> tp;
    auto reg = register_student(tp, head_path::sim);
    const T one_dir = cfg_.symmetrize_pairs ? T{0.5} : T{1};

    auto dir_loss = [&](const tensor<float>& student_x, const tensor<float>& teacher_x) {
      tensor<T> z_t = teacher_projection(teacher_x, head_path::sim);
      auto pred = student_prediction(tp, reg, student_x, head_path::sim);
      return similarity_loss(tp, tp.constant(std::move(z_t)), pred);
    };

    auto loss = dir_loss(batch.x1, batch.x2);
    if (cfg_.symmetrize_pairs)
      loss = tp.affine(tp.add(loss, dir_loss(batch.x2, batch.x1)), one_dir, T{0});
    const double lval = static_cast<double>(tp.value(loss)[0]);
    check_loss(lval, 2.0);
    tp.backward(loss);
    apply_adam(tp, reg);
    ema_update(teacher_, student_, static_cast<T>(cfg_.tau));
    return {iteration_, 1, lval, lval, 0, 0};
  }

  // ---- teacher reset at the phase boundary -------------------------------
  void phase_transition() {
    if (transitioned_) throw contract_error("phase_transition: already executed");
    copy_student_to_teacher(teacher_, student_);
    if (cfg_.reset_adam_at_transition) opt_ = adam_state<T>::init(params_);
    transitioned_ = true;
  }

  // ---- one optimization step, dissimilarity phase -------------------------
  step_metrics step_phase2(const triplet_batch& batch) {
    if (!transitioned_) throw contract_error("step_phase2: phase transition has not happened");
    validate_triplet_batch(batch);
    ++iteration_;

    tensor<T> z_before = teacher_projection(batch.x_before, head_path::dis);
    tensor<T> z_after = teacher_projection(batch.x_after, head_path::dis);
    tensor<T> par = par_interpolate(z_before, z_after, batch.i_sep, batch.j_sep);

    tape<T> tp;
    auto reg = register_student(tp, head_path::dis);
    // fixed forward order: the t-i segment first, then the middle segment
    auto pred_before = student_prediction(tp, reg, batch.x_before, head_path::dis);
    auto pred_mid = student_prediction(tp, reg, batch.x_mid, head_path::dis);

    dis_path_parts parts;
    auto loss = dis_path_loss(tp, pred_mid, pred_before, tp.constant(std::move(z_after)),
                              tp.constant(std::move(par)), static_cast<T>(cfg_.alpha), &parts);
    check_loss(parts.dis, 2.0);
    check_loss(parts.gra, 2.0);
    check_loss(parts.total, 2.0 + 2.0 * cfg_.alpha);
    tp.backward(loss);
    apply_adam(tp, reg);
    ema_update(teacher_, student_, static_cast<T>(cfg_.tau));
    return {iteration_, 2, parts.total, 0, parts.dis, parts.gra};
  }

  // ---- full procedure ------------------------------------------------------
  void run(const dataset& ds, const train_hooks<T>& hooks) {
    sampler smp(ds);
    if (!smp.can_sample_pairs())
      throw config_error("training: dataset has no subject with two segments");
    if (!cfg_.similarity_only && !smp.can_sample_triplets(cfg_.window_segments))
      throw config_error("training: dataset too small for triplet sampling");
    if (ds.segment_len != student_.encoder.cfg.input_len)
      throw config_error("training: dataset segment length does not match encoder input");

    batch_source source(ds, cfg_, batch_rng_state_, iteration_ + 1,
                        sampling_threads_from_env());
    for (std::uint64_t iter = iteration_ + 1; iter <= cfg_.total_iters; ++iter) {
      if (hooks.should_stop && hooks.should_stop()) break;
      train_batch b = source.next(iter);
      batch_rng_state_ = b.rng_state_after;
      step_metrics m;
      if (b.phase == 1) {
        m = step_phase1(b.pairs);
      } else {
        if (!transitioned_) phase_transition();
        m = step_phase2(b.triplets);
      }
      if (hooks.on_step) hooks.on_step(m);
      if (iter % cfg_.eval_every == 0 || iter == cfg_.total_iters) {
        if (hooks.on_eval) hooks.on_eval(iter, representation_std(ds), student_);
      }
      if (hooks.checkpoint_every && hooks.on_checkpoint && iter % hooks.checkpoint_every == 0 &&
          iter != cfg_.total_iters)
        hooks.on_checkpoint(iter);
    }
  }

  // RMS per-feature standard deviation of eval-mode representations over a
  // fixed probe batch (the first segments of the dataset, in order).
  double representation_std(const dataset& ds) const {
    const std::size_t n = std::min<std::size_t>(cfg_.batch_size, ds.total_segments());
    if (n < 2) return 0.0;
    tensor<float> batch({n, ds.segment_len});
    std::size_t row = 0;
    for (const auto& s : ds.subjects) {
      for (const auto& seg : s.segments) {
        if (row == n) break;
        zscore(seg.samples, batch.ptr() + row * ds.segment_len);
        ++row;
      }
      if (row == n) break;
    }
    tensor<T> in(batch.shape);
    for (std::size_t i = 0; i < batch.numel(); ++i) in[i] = static_cast<T>(batch[i]);
    tensor<T> reps = encode_eval(student_.encoder, in);
    const std::size_t d = reps.shape[1];
    double acc = 0;
    for (std::size_t j = 0; j < d; ++j) {
      double mean = 0;
      for (std::size_t i = 0; i < n; ++i) mean += reps[i * d + j];
      mean /= static_cast<double>(n);
      double var = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const double dv = reps[i * d + j] - mean;
        var += dv * dv;
      }
      acc += var / static_cast<double>(n);
    }
    return std::sqrt(acc / static_cast<double>(d));
  }

  const train_config& config() const { return cfg_; }
  std::uint64_t iteration() const { return iteration_; }
  bool transitioned() const { return transitioned_; }
  model_state<T>& student() { return student_; }
  model_state<T>& teacher() { return teacher_; }
  adam_state<T>& opt() { return opt_; }
  const std::vector<std::pair<std::string, tensor<T>*>>& named_params() const { return params_; }
  const std::array<std::uint64_t, 4>& batch_rng_state() const { return batch_rng_state_; }

  // checkpoint restore plumbing
  void restore_counters(std::uint64_t iteration, bool transitioned,
                        const std::array<std::uint64_t, 4>& rng_state) {
    iteration_ = iteration;
    transitioned_ = transitioned;
    batch_rng_state_ = rng_state;
  }

 private:
  struct registration {
    vit_leaves<T> enc;
    mlp_head_leaves<T> proj;
    mlp_head_leaves<T> pred;
    head_path path = head_path::sim;
    std::unordered_map<std::string, typename tape<T>::id> by_name;
  };

  registration register_student(tape<T>& tp, head_path path) {
    registration r;
    r.path = path;
    r.enc = register_encoder(tp, student_.encoder, true);
    mlp_head<T>& proj = student_.heads.projector(path);
    r.proj = register_head(tp, proj, true);
    const std::string proj_name = path == head_path::sim ? "proj_sim" : "proj_dis";
    const std::string pred_name = path == head_path::sim ? "pred_sim" : "pred_dis";
    {
      auto ids = encoder_leaf_ids(r.enc);
      std::size_t k = 0;
      student_.encoder.for_each(
          [&](const std::string& name, tensor<T>&) { r.by_name[name] = ids[k++]; });
    }
    {
      auto ids = head_leaf_ids(r.proj);
      std::size_t k = 0;
      proj.for_each_param(proj_name,
                          [&](const std::string& name, tensor<T>&) { r.by_name[name] = ids[k++]; });
    }
    if (cfg_.use_predictor) {
      mlp_head<T>& pred = student_.heads.predictor(path);
      r.pred = register_head(tp, pred, true);
      auto ids = head_leaf_ids(r.pred);
      std::size_t k = 0;
      pred.for_each_param(pred_name,
                          [&](const std::string& name, tensor<T>&) { r.by_name[name] = ids[k++]; });
    }
    return r;
  }

  // student forward through encoder + projector (+ predictor), train mode
  typename tape<T>::id student_prediction(tape<T>& tp, registration& reg,
                                          const tensor<float>& x, head_path path) {
    const bool bn_train = !cfg_.freeze_bn_stats;
    auto rep = encode_batch(tp, reg.enc, student_.encoder.cfg, tp.constant(to_t(x)));
    mlp_head<T>& proj = student_.heads.projector(path);
    auto p = head_forward(tp, reg.proj, proj, rep, bn_train, student_.heads.cfg,
                          bn_train ? &proj : nullptr);
    if (!cfg_.use_predictor) return p.out;
    mlp_head<T>& pred = student_.heads.predictor(path);
    auto q = head_forward(tp, reg.pred, pred, p.out, bn_train, student_.heads.cfg,
                          bn_train ? &pred : nullptr);
    return q.out;
  }

  // teacher forward: eval-style batch norm on the teacher's own running
  // statistics; output is a constant with respect to the student graph.
  tensor<T> teacher_projection(const tensor<float>& x, head_path path) {
    tape<T> tp;
    auto enc = register_encoder(tp, teacher_.encoder, false);
    auto rep = encode_batch(tp, enc, teacher_.encoder.cfg, tp.constant(to_t(x)));
    const mlp_head<T>& proj = teacher_.heads.projector(path);
    auto l = register_head(tp, proj, false);
    auto out = head_forward(tp, l, proj, rep, /*train=*/false, teacher_.heads.cfg);
    tensor<T> z = tp.value(out.out);
    if (!z.all_finite())
      throw numeric_error("iteration " + std::to_string(iteration_) +
                          ": non-finite teacher projection");
    return z;
  }

  tensor<T> to_t(const tensor<float>& x) const {
    if constexpr (std::is_same_v<T, float>) {
      return x;
    } else {
      tensor<T> out(x.shape);
      for (std::size_t i = 0; i < x.numel(); ++i) out[i] = static_cast<T>(x[i]);
      return out;
    }
  }

  void apply_adam(tape<T>& tp, const registration& reg) {
    adam_config<T> acfg;
    acfg.lr = static_cast<T>(cfg_.lr);
    acfg.weight_decay = static_cast<T>(cfg_.weight_decay);
    for (std::size_t p = 0; p < params_.size(); ++p) {
      auto it = reg.by_name.find(params_[p].first);
      if (it == reg.by_name.end()) continue;  // frozen in this phase
      const tensor<T>& g = tp.grad(it->second);
      adam_step_tensor(*params_[p].second, g.empty() ? nullptr : &g, opt_.m[p], opt_.v[p],
                       opt_.steps[p], acfg);
    }
  }

  void check_loss(double v, double hi) const {
    if (!std::isfinite(v) || v < -1e-5 || v > hi + 1e-5)
      throw numeric_error("iteration " + std::to_string(iteration_) + ": loss " +
                          format_double(v) + " outside [0, " + format_double(hi) + "]");
  }

  void validate_pair_batch(const pair_batch& b) const {
    const std::size_t n = b.x1.shape.empty() ? 0 : b.x1.shape[0];
    require(n >= 2 && b.x1.same_shape(b.x2), "pair batch: malformed shapes");
    require(b.subjects_a.size() == n && b.subjects_b.size() == n,
            "pair batch: subject list size mismatch");
    for (std::size_t k = 0; k < n; ++k)
      if (b.subjects_a[k] != b.subjects_b[k])
        throw contract_error("sampler contract: pair element spans two subjects");
  }

  void validate_triplet_batch(const triplet_batch& b) const {
    const std::size_t n = b.x_mid.shape.empty() ? 0 : b.x_mid.shape[0];
    require(n >= 2 && b.x_before.same_shape(b.x_mid) && b.x_mid.same_shape(b.x_after),
            "triplet batch: malformed shapes");
    require(b.i_sep.size() == n && b.j_sep.size() == n, "triplet batch: separation size mismatch");
    for (std::size_t k = 0; k < n; ++k) {
      if (b.i_sep[k] < 1 || b.j_sep[k] < 1 || b.i_sep[k] + b.j_sep[k] > cfg_.window_segments)
        throw contract_error("sampler contract: triplet separations violate the window");
    }
  }

  train_config cfg_;
  model_state<T> student_;
  model_state<T> teacher_;
  std::vector<std::pair<std::string, tensor<T>*>> params_;
  adam_state<T> opt_;
  std::uint64_t iteration_ = 0;
  bool transitioned_ = false;
  std::array<std::uint64_t, 4> batch_rng_state_{};
};

}  // namespace debs
