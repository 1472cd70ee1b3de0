#pragma once

#include "debs/autodiff.hpp"
#include "debs/tensor.hpp"

namespace debs {

// The four objectives, built from row-wise cosine similarity. Teacher-side
// inputs must enter the tape as constants; the losses themselves do not
// enforce that, the trainer does.

// 1 - cos(target, prediction), averaged over rows. Range [0, 2].
template <class T>
typename tape<T>::id similarity_loss(tape<T>& tp, typename tape<T>::id teacher_proj,
                                     typename tape<T>::id student_pred) {
  auto c = tp.cosine_rows(teacher_proj, student_pred);
  return tp.mean_all(tp.affine(c, T{-1}, T{1}));
}

// 1 + cos(target, prediction), averaged over rows. Range [0, 2].
template <class T>
typename tape<T>::id dissimilarity_loss(tape<T>& tp, typename tape<T>::id teacher_proj,
                                        typename tape<T>::id student_pred) {
  auto c = tp.cosine_rows(teacher_proj, student_pred);
  return tp.mean_all(tp.affine(c, T{1}, T{1}));
}

// Distance-weighted interpolation between the two teacher projections:
// (z_before * j + z_after * i) / (i + j). The row nearer in time gets the
// larger weight. Computed on plain tensors (teacher side, constant).
template <class T>
tensor<T> par_interpolate(const tensor<T>& z_before, const tensor<T>& z_after,
                          const std::vector<std::uint32_t>& i_sep,
                          const std::vector<std::uint32_t>& j_sep) {
  if (!z_before.same_shape(z_after)) throw contract_error("par: shape mismatch");
  require(z_before.ndim() == 2, "par: expected [rows, dim]");
  const std::size_t rows = z_before.shape[0], d = z_before.shape[1];
  require(i_sep.size() == rows && j_sep.size() == rows, "par: separation count mismatch");
  tensor<T> out({rows, d});
  for (std::size_t r = 0; r < rows; ++r) {
    if (i_sep[r] + j_sep[r] == 0) throw contract_error("par: i + j must be positive");
    const T wi = static_cast<T>(j_sep[r]) / static_cast<T>(i_sep[r] + j_sep[r]);
    const T wj = static_cast<T>(i_sep[r]) / static_cast<T>(i_sep[r] + j_sep[r]);
    const T* zb = z_before.ptr() + r * d;
    const T* za = z_after.ptr() + r * d;
    T* o = out.ptr() + r * d;
    for (std::size_t k = 0; k < d; ++k) o[k] = zb[k] * wi + za[k] * wj;
  }
  return out;
}

// Single-pair convenience.
template <class T>
tensor<T> par_interpolate(const tensor<T>& z_before, const tensor<T>& z_after, std::uint32_t i,
                          std::uint32_t j) {
  tensor<T> zb({1, z_before.numel()}, z_before.data);
  tensor<T> za({1, z_after.numel()}, z_after.data);
  tensor<T> r = par_interpolate(zb, za, std::vector<std::uint32_t>{i},
                                std::vector<std::uint32_t>{j});
  return tensor<T>({z_before.numel()}, std::move(r.data));
}

// 1 - cos(prediction of the middle segment, PAR target). Range [0, 2].
template <class T>
typename tape<T>::id gradual_loss(tape<T>& tp, typename tape<T>::id student_pred_mid,
                                  typename tape<T>::id par_target) {
  auto c = tp.cosine_rows(student_pred_mid, par_target);
  return tp.mean_all(tp.affine(c, T{-1}, T{1}));
}

struct dis_path_parts {
  double total = 0, dis = 0, gra = 0;
};

// alpha * dissimilarity + gradual term; the combined phase-2 objective.
// Range [0, 2 + 2*alpha].
template <class T>
typename tape<T>::id dis_path_loss(tape<T>& tp, typename tape<T>::id student_pred_mid,
                                   typename tape<T>::id student_pred_before,
                                   typename tape<T>::id teacher_after,
                                   typename tape<T>::id par_target, T alpha,
                                   dis_path_parts* parts = nullptr) {
  auto l_dis = dissimilarity_loss(tp, teacher_after, student_pred_before);
  auto l_gra = gradual_loss(tp, student_pred_mid, par_target);
  auto total = tp.add(tp.affine(l_dis, alpha, T{0}), l_gra);
  if (parts) {
    parts->dis = static_cast<double>(tp.value(l_dis)[0]);
    parts->gra = static_cast<double>(tp.value(l_gra)[0]);
    parts->total = static_cast<double>(tp.value(total)[0]);
  }
  return total;
}

// Plain scalar forms for single vector pairs (tests, diagnostics).
template <class T>
T similarity_loss_value(const tensor<T>& teacher_proj, const tensor<T>& student_pred) {
  return T{1} - cosine_similarity(teacher_proj, student_pred);
}
template <class T>
T dissimilarity_loss_value(const tensor<T>& teacher_proj, const tensor<T>& student_pred) {
  return T{1} + cosine_similarity(teacher_proj, student_pred);
}
template <class T>
T gradual_loss_value(const tensor<T>& student_pred_mid, const tensor<T>& par_target) {
  return T{1} - cosine_similarity(student_pred_mid, par_target);
}

}  // namespace debs
