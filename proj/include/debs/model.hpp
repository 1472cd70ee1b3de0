#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "debs/encoder.hpp"
#include "debs/heads.hpp"

namespace debs {

// Encoder + head stack. The student carries predictors; the teacher is an
// EMA shadow holding encoder + projectors (and their batch-norm buffers) only.
template <class T>
struct model_state {
  vit_params<T> encoder;
  head_stack<T> heads;

  template <class Fn>
  void for_each_param(Fn&& fn) {
    encoder.for_each(fn);
    heads.for_each_param(fn);
  }
  template <class Fn>
  void for_each_buffer(Fn&& fn) {
    heads.for_each_buffer(fn);
  }

  std::vector<std::pair<std::string, tensor<T>*>> named_params() {
    std::vector<std::pair<std::string, tensor<T>*>> out;
    for_each_param([&](const std::string& n, tensor<T>& t) { out.emplace_back(n, &t); });
    return out;
  }
  std::vector<std::pair<std::string, tensor<T>*>> named_buffers() {
    std::vector<std::pair<std::string, tensor<T>*>> out;
    for_each_buffer([&](const std::string& n, tensor<T>& t) { out.emplace_back(n, &t); });
    return out;
  }

  static model_state init_student(const encoder_config& ecfg, const head_config& hcfg,
                                  std::uint64_t seed) {
    rng r(seed);
    model_state m;
    m.encoder = vit_params<T>::init(ecfg, r);
    m.heads = head_stack<T>::init_student(hcfg, r);
    return m;
  }

  static model_state teacher_from(const model_state& student) {
    model_state t;
    t.encoder = student.encoder;
    t.heads = head_stack<T>::teacher_from(student.heads);
    return t;
  }
};

// tau*teacher + (1-tau)*student, elementwise, over every teacher tensor
// including batch-norm buffers. Tensors are paired by name.
template <class T>
void ema_update(model_state<T>& teacher, model_state<T>& student, T tau) {
  if (tau < T{0} || tau > T{1}) throw contract_error("ema_update: tau must be in [0, 1]");
  std::unordered_map<std::string, tensor<T>*> student_map;
  for (auto& [name, t] : student.named_params()) student_map[name] = t;
  for (auto& [name, t] : student.named_buffers()) student_map[name] = t;
  auto blend = [&](const std::string& name, tensor<T>& te) {
    auto it = student_map.find(name);
    require(it != student_map.end(), "ema_update: teacher tensor missing in student");
    const tensor<T>& st = *it->second;
    if (!te.same_shape(st)) throw contract_error("ema_update: shape mismatch for " + name);
    for (std::size_t i = 0; i < te.numel(); ++i)
      te[i] = tau * te[i] + (T{1} - tau) * st[i];
  };
  teacher.for_each_param(blend);
  teacher.for_each_buffer(blend);
}

// Scalar form of the same rule (used by tests against the closed form).
template <class T>
void ema_update(tensor<T>& teacher, const tensor<T>& student, T tau) {
  if (!teacher.same_shape(student)) throw contract_error("ema_update: shape mismatch");
  for (std::size_t i = 0; i < teacher.numel(); ++i)
    teacher[i] = tau * teacher[i] + (T{1} - tau) * student[i];
}

// Bitwise copy of the shared subset (encoder, projectors, buffers) from the
// student into the teacher.
template <class T>
void copy_student_to_teacher(model_state<T>& teacher, model_state<T>& student) {
  std::unordered_map<std::string, tensor<T>*> student_map;
  for (auto& [name, t] : student.named_params()) student_map[name] = t;
  for (auto& [name, t] : student.named_buffers()) student_map[name] = t;
  auto copy = [&](const std::string& name, tensor<T>& te) {
    auto it = student_map.find(name);
    require(it != student_map.end(), "teacher copy: tensor missing in student");
    te = *it->second;
  };
  teacher.for_each_param(copy);
  teacher.for_each_buffer(copy);
}

}  // namespace debs
