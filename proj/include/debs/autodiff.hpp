#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "debs/tensor.hpp"

namespace debs {

// Reverse-mode tape. Ops append nodes in topological (creation) order;
// backward() is a single reverse sweep, so every node is visited exactly
// once. Leaves created with requires_grad=false (teacher outputs, inputs)
// never receive gradient - that is the stop-gradient convention.
template <class T>
class tape {
 public:
  using id = std::int32_t;

  struct node {
    tensor<T> value;
    tensor<T> grad;  // allocated lazily during backward
    std::function<void(tape&)> backprop;
    bool requires_grad = false;
    bool is_leaf = false;
  };

  id leaf(tensor<T> v, bool requires_grad) {
    nodes_.push_back(node{std::move(v), {}, nullptr, requires_grad, true});
    return static_cast<id>(nodes_.size() - 1);
  }
  id constant(tensor<T> v) { return leaf(std::move(v), false); }

  const tensor<T>& value(id n) const { return nodes_[n].value; }
  const tensor<T>& grad(id n) const { return nodes_[n].grad; }
  bool requires_grad(id n) const { return nodes_[n].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // ---- elementwise -------------------------------------------------------

  id add(id a, id b) {
    check_same_shape("add", a, b);
    tensor<T> out = value(a);
    const tensor<T>& vb = value(b);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += vb[i];
    return make(std::move(out), {a, b}, [a, b](tape& tp) {
      const tensor<T>& g = tp.cur_grad();
      tp.accum(a, [&](tensor<T>& ga) {
        for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
      });
      tp.accum(b, [&](tensor<T>& gb) {
        for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i];
      });
    });
  }

  id mul(id a, id b) {
    check_same_shape("mul", a, b);
    tensor<T> out = value(a);
    const tensor<T>& vb = value(b);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= vb[i];
    return make(std::move(out), {a, b}, [a, b](tape& tp) {
      const tensor<T>& g = tp.cur_grad();
      const tensor<T>& va = tp.value(a);
      const tensor<T>& vb2 = tp.value(b);
      tp.accum(a, [&](tensor<T>& ga) {
        for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * vb2[i];
      });
      tp.accum(b, [&](tensor<T>& gb) {
        for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * va[i];
      });
    });
  }

  // y = k*x + m
  id affine(id x, T k, T m) {
    tensor<T> out = value(x);
    for (auto& v : out.data) v = k * v + m;
    return make(std::move(out), {x}, [x, k](tape& tp) {
      const tensor<T>& g = tp.cur_grad();
      tp.accum(x, [&](tensor<T>& gx) {
        for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += k * g[i];
      });
    });
  }

  // x + r where r.shape is a trailing suffix of x.shape (positional encodings).
  id add_broadcast(id x, id r) {
    const tensor<T>& vx = value(x);
    const tensor<T>& vr = value(r);
    require(vr.numel() > 0 && vx.numel() % vr.numel() == 0,
            "add_broadcast: suffix does not divide input");
    tensor<T> out = vx;
    const std::size_t n = vr.numel();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += vr[i % n];
    return make(std::move(out), {x, r}, [x, r, n](tape& tp) {
      const tensor<T>& g = tp.cur_grad();
      tp.accum(x, [&](tensor<T>& gx) {
        for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
      });
      tp.accum(r, [&](tensor<T>& gr) {
        for (std::size_t i = 0; i < g.numel(); ++i) gr[i % n] += g[i];
      });
    });
  }

  id relu(id x) {
    tensor<T> out = value(x);
    for (auto& v : out.data) v = v > T{0} ? v : T{0};
    return make(std::move(out), {x}, [x](tape& tp) {
      const tensor<T>& g = tp.cur_grad();
      const tensor<T>& vx = tp.value(x);
      tp.accum(x, [&](tensor<T>& gx) {
        for (std::size_t i = 0; i < g.numel(); ++i)
          if (vx[i] > T{0}) gx[i] += g[i];
      });
    });
  }

  // Exact GELU: x * Phi(x).
  id gelu(id x) {
    const tensor<T>& vx = value(x);
    tensor<T> out(vx.shape);
    for (std::size_t i = 0; i < vx.numel(); ++i) out[i] = vx[i] * normal_cdf(vx[i]);
    return make(std::move(out), {x}, [x](tape& tp) {
      const tensor<T>& g = tp.cur_grad();
      const tensor<T>& v = tp.value(x);
      tp.accum(x, [&](tensor<T>& gx) {
        for (std::size_t i = 0; i < g.numel(); ++i) {
          const T xi = v[i];
          gx[i] += g[i] * (normal_cdf(xi) + xi * normal_pdf(xi));
        }
      });
    });
  }

  // ---- shape -------------------------------------------------------------

  id reshape(id x, shape_t s) {
    const tensor<T>& vx = value(x);
    require(shape_numel(s) == vx.numel(), "reshape: element count mismatch");
    tensor<T> out(std::move(s), vx.data);
    return make(std::move(out), {x}, [x](tape& tp) {
      const tensor<T>& g = tp.cur_grad();
      tp.accum(x, [&](tensor<T>& gx) {
        for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
      });
    });
  }

  id transpose_last2(id x) {
    const tensor<T>& vx = value(x);
    require(vx.ndim() >= 2, "transpose_last2: needs at least 2 dims");
    const std::size_t m = vx.shape[vx.ndim() - 2], n = vx.shape[vx.ndim() - 1];
    const std::size_t outer = vx.numel() / (m * n);
    shape_t s = vx.shape;
    std::swap(s[s.size() - 2], s[s.size() - 1]);
    tensor<T> out(std::move(s));
    transpose_batch(vx.ptr(), out.ptr(), outer, m, n);
    return make(std::move(out), {x}, [x, outer, m, n](tape& tp) {
      const tensor<T>& g = tp.cur_grad();
      tp.accum(x, [&](tensor<T>& gx) {
        // g is [outer, n, m]; scatter back transposed
        for (std::size_t o = 0; o < outer; ++o) {
          const T* gp = g.ptr() + o * m * n;
          T* xp = gx.ptr() + o * m * n;
          for (std::size_t j = 0; j < n; ++j)
            for (std::size_t i = 0; i < m; ++i) xp[i * n + j] += gp[j * m + i];
        }
      });
    });
  }

  // [B, T, H*D] -> [B*H, T, D]
  id split_heads(id x, std::size_t heads) {
    const tensor<T>& vx = value(x);
    require(vx.ndim() == 3 && vx.shape[2] % heads == 0, "split_heads: bad shape");
    const std::size_t b = vx.shape[0], t = vx.shape[1], d = vx.shape[2] / heads;
    tensor<T> out({b * heads, t, d});
    split_kernel(vx.ptr(), out.ptr(), b, t, heads, d, /*merge=*/false);
    return make(std::move(out), {x}, [x, b, t, heads, d](tape& tp) {
      const tensor<T>& g = tp.cur_grad();
      tp.accum(x, [&](tensor<T>& gx) { split_adjoint(g.ptr(), gx.ptr(), b, t, heads, d, false); });
    });
  }

  // [B*H, T, D] -> [B, T, H*D]
  id merge_heads(id x, std::size_t heads) {
    const tensor<T>& vx = value(x);
    require(vx.ndim() == 3 && vx.shape[0] % heads == 0, "merge_heads: bad shape");
    const std::size_t b = vx.shape[0] / heads, t = vx.shape[1], d = vx.shape[2];
    tensor<T> out({b, t, heads * d});
    split_kernel(vx.ptr(), out.ptr(), b, t, heads, d, /*merge=*/true);
    return make(std::move(out), {x}, [x, b, t, heads, d](tape& tp) {
      const tensor<T>& g = tp.cur_grad();
      tp.accum(x, [&](tensor<T>& gx) { split_adjoint(g.ptr(), gx.ptr(), b, t, heads, d, true); });
    });
  }

  // ---- contractions ------------------------------------------------------

  // x[..., K] @ w[K, N] (+ b[N]); leading dims of x are treated as rows.
  id linear(id x, id w, id b = -1) {
    const tensor<T>& vx = value(x);
    const tensor<T>& vw = value(w);
    require(vw.ndim() == 2, "linear: weight must be 2-d");
    const std::size_t k = vw.shape[0], n = vw.shape[1];
    require(vx.ndim() >= 1 && vx.shape.back() == k, "linear: inner dimension mismatch");
    const std::size_t rows = vx.numel() / k;
    shape_t s = vx.shape;
    s.back() = n;
    tensor<T> out(std::move(s));
    matmul_nn(vx.ptr(), vw.ptr(), out.ptr(), rows, k, n, T{0});
    if (b >= 0) {
      const tensor<T>& vb = value(b);
      require(vb.numel() == n, "linear: bias length mismatch");
      for (std::size_t r = 0; r < rows; ++r) {
        T* o = out.ptr() + r * n;
        for (std::size_t j = 0; j < n; ++j) o[j] += vb[j];
      }
    }
    std::vector<id> ps = b >= 0 ? std::vector<id>{x, w, b} : std::vector<id>{x, w};
    return make(std::move(out), ps, [x, w, b, rows, k, n](tape& tp) {
      const tensor<T>& g = tp.cur_grad();
      const tensor<T>& vx2 = tp.value(x);
      const tensor<T>& vw2 = tp.value(w);
      tp.accum(x, [&](tensor<T>& gx) { matmul_nt(g.ptr(), vw2.ptr(), gx.ptr(), rows, n, k, T{1}); });
      tp.accum(w, [&](tensor<T>& gw) { matmul_tn(vx2.ptr(), g.ptr(), gw.ptr(), k, rows, n, T{1}); });
      if (b >= 0)
        tp.accum(b, [&](tensor<T>& gb) {
          for (std::size_t r = 0; r < rows; ++r) {
            const T* gr = g.ptr() + r * n;
            for (std::size_t j = 0; j < n; ++j) gb[j] += gr[j];
          }
        });
    });
  }

  id matmul(id a, id b) {
    const tensor<T>& va = value(a);
    const tensor<T>& vb = value(b);
    require(va.ndim() == 2 && vb.ndim() == 2 && va.shape[1] == vb.shape[0],
            "matmul: shape mismatch");
    return linear(a, b);
  }

  // a[B, M, K] @ b[B, K, N] -> [B, M, N]
  id bmm(id a, id b) {
    const tensor<T>& va = value(a);
    const tensor<T>& vb = value(b);
    require(va.ndim() == 3 && vb.ndim() == 3 && va.shape[0] == vb.shape[0] &&
                va.shape[2] == vb.shape[1],
            "bmm: shape mismatch");
    const std::size_t bs = va.shape[0], m = va.shape[1], k = va.shape[2], n = vb.shape[2];
    tensor<T> out({bs, m, n});
    for (std::size_t i = 0; i < bs; ++i)
      matmul_nn(va.ptr() + i * m * k, vb.ptr() + i * k * n, out.ptr() + i * m * n, m, k, n, T{0});
    return make(std::move(out), {a, b}, [a, b, bs, m, k, n](tape& tp) {
      const tensor<T>& g = tp.cur_grad();
      const tensor<T>& va2 = tp.value(a);
      const tensor<T>& vb2 = tp.value(b);
      tp.accum(a, [&](tensor<T>& ga) {
        for (std::size_t i = 0; i < bs; ++i)
          matmul_nt(g.ptr() + i * m * n, vb2.ptr() + i * k * n, ga.ptr() + i * m * k, m, n, k,
                    T{1});
      });
      tp.accum(b, [&](tensor<T>& gb) {
        for (std::size_t i = 0; i < bs; ++i)
          matmul_tn(va2.ptr() + i * m * k, g.ptr() + i * m * n, gb.ptr() + i * k * n, k, m, n,
                    T{1});
      });
    });
  }

  // ---- normalization & activations over rows ------------------------------

  id softmax_last(id x) {
    const tensor<T>& vx = value(x);
    require(vx.ndim() >= 1, "softmax_last: empty shape");
    const std::size_t c = vx.shape.back();
    const std::size_t rows = vx.numel() / c;
    tensor<T> out(vx.shape);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* xi = vx.ptr() + r * c;
      T* oi = out.ptr() + r * c;
      T mx = xi[0];
      for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, xi[j]);
      T sum{0};
      for (std::size_t j = 0; j < c; ++j) {
        oi[j] = std::exp(xi[j] - mx);
        sum += oi[j];
      }
      const T inv = T{1} / sum;
      for (std::size_t j = 0; j < c; ++j) oi[j] *= inv;
    }
    const id self_hint = static_cast<id>(nodes_.size());
    return make(std::move(out), {x}, [x, rows, c, self_hint](tape& tp) {
      const tensor<T>& g = tp.cur_grad();
      const tensor<T>& y = tp.value(self_hint);
      tp.accum(x, [&](tensor<T>& gx) {
        for (std::size_t r = 0; r < rows; ++r) {
          const T* yr = y.ptr() + r * c;
          const T* gr = g.ptr() + r * c;
          T* xr = gx.ptr() + r * c;
          T dot{0};
          for (std::size_t j = 0; j < c; ++j) dot += gr[j] * yr[j];
          for (std::size_t j = 0; j < c; ++j) xr[j] += yr[j] * (gr[j] - dot);
        }
      });
    });
  }

  id layer_norm_last(id x, id gain, id bias, T eps) {
    const tensor<T>& vx = value(x);
    const std::size_t c = vx.shape.back();
    require(value(gain).numel() == c && value(bias).numel() == c, "layer_norm: affine mismatch");
    const std::size_t rows = vx.numel() / c;
    tensor<T> out(vx.shape);
    std::vector<T> mean(rows), rstd(rows);
    const tensor<T>& vg = value(gain);
    const tensor<T>& vb = value(bias);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* xr = vx.ptr() + r * c;
      T mu{0};
      for (std::size_t j = 0; j < c; ++j) mu += xr[j];
      mu /= static_cast<T>(c);
      T var{0};
      for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
      var /= static_cast<T>(c);
      const T rs = T{1} / std::sqrt(var + eps);
      mean[r] = mu;
      rstd[r] = rs;
      T* o = out.ptr() + r * c;
      for (std::size_t j = 0; j < c; ++j) o[j] = (xr[j] - mu) * rs * vg[j] + vb[j];
    }
    return make(std::move(out), {x, gain, bias},
                [x, gain, bias, rows, c, mean = std::move(mean),
                 rstd = std::move(rstd)](tape& tp) {
                  const tensor<T>& g = tp.cur_grad();
                  const tensor<T>& vx2 = tp.value(x);
                  const tensor<T>& vg2 = tp.value(gain);
                  tp.accum(gain, [&](tensor<T>& gg) {
                    for (std::size_t r = 0; r < rows; ++r) {
                      const T* xr = vx2.ptr() + r * c;
                      const T* gr = g.ptr() + r * c;
                      for (std::size_t j = 0; j < c; ++j)
                        gg[j] += gr[j] * (xr[j] - mean[r]) * rstd[r];
                    }
                  });
                  tp.accum(bias, [&](tensor<T>& gb) {
                    for (std::size_t r = 0; r < rows; ++r) {
                      const T* gr = g.ptr() + r * c;
                      for (std::size_t j = 0; j < c; ++j) gb[j] += gr[j];
                    }
                  });
                  tp.accum(x, [&](tensor<T>& gx) {
                    const T invc = T{1} / static_cast<T>(c);
                    for (std::size_t r = 0; r < rows; ++r) {
                      const T* xr = vx2.ptr() + r * c;
                      const T* gr = g.ptr() + r * c;
                      T* dxr = gx.ptr() + r * c;
                      T sum_dxh{0}, sum_dxh_xh{0};
                      for (std::size_t j = 0; j < c; ++j) {
                        const T xh = (xr[j] - mean[r]) * rstd[r];
                        const T dxh = gr[j] * vg2[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                      }
                      for (std::size_t j = 0; j < c; ++j) {
                        const T xh = (xr[j] - mean[r]) * rstd[r];
                        const T dxh = gr[j] * vg2[j];
                        dxr[j] += rstd[r] * (dxh - invc * sum_dxh - xh * invc * sum_dxh_xh);
                      }
                    }
                  });
                });
  }

  struct bn_result {
    id out;
    tensor<T> batch_mean;  // [F], for the caller's running-stat update
    tensor<T> batch_var;   // [F], biased
  };

  // Batch norm over the batch dimension of x[B, F] using batch statistics.
  bn_result batch_norm_train(id x, id gain, id bias, T eps) {
    const tensor<T>& vx = value(x);
    require(vx.ndim() == 2, "batch_norm: input must be [batch, features]");
    const std::size_t b = vx.shape[0], f = vx.shape[1];
    if (b < 2)
      throw contract_error("batch_norm: train mode requires batch size >= 2");
    require(value(gain).numel() == f && value(bias).numel() == f, "batch_norm: affine mismatch");
    tensor<T> mu({f}), var({f});
    const T invb = T{1} / static_cast<T>(b);
    for (std::size_t j = 0; j < f; ++j) {
      T s{0};
      for (std::size_t i = 0; i < b; ++i) s += vx[i * f + j];
      mu[j] = s * invb;
    }
    for (std::size_t j = 0; j < f; ++j) {
      T s{0};
      for (std::size_t i = 0; i < b; ++i) {
        const T d = vx[i * f + j] - mu[j];
        s += d * d;
      }
      var[j] = s * invb;
    }
    std::vector<T> rstd(f);
    for (std::size_t j = 0; j < f; ++j) rstd[j] = T{1} / std::sqrt(var[j] + eps);
    tensor<T> out({b, f});
    const tensor<T>& vg = value(gain);
    const tensor<T>& vbi = value(bias);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < f; ++j)
        out[i * f + j] = (vx[i * f + j] - mu[j]) * rstd[j] * vg[j] + vbi[j];
    std::vector<T> mu_copy(mu.data);
    id out_id = make(std::move(out), {x, gain, bias},
                     [x, gain, bias, b, f, mu = std::move(mu_copy),
                      rstd = std::move(rstd)](tape& tp) {
                       const tensor<T>& g = tp.cur_grad();
                       const tensor<T>& vx2 = tp.value(x);
                       const tensor<T>& vg2 = tp.value(gain);
                       tp.accum(gain, [&](tensor<T>& gg) {
                         for (std::size_t i = 0; i < b; ++i)
                           for (std::size_t j = 0; j < f; ++j)
                             gg[j] += g[i * f + j] * (vx2[i * f + j] - mu[j]) * rstd[j];
                       });
                       tp.accum(bias, [&](tensor<T>& gb) {
                         for (std::size_t i = 0; i < b; ++i)
                           for (std::size_t j = 0; j < f; ++j) gb[j] += g[i * f + j];
                       });
                       tp.accum(x, [&](tensor<T>& gx) {
                         const T invb2 = T{1} / static_cast<T>(b);
                         for (std::size_t j = 0; j < f; ++j) {
                           T sum_dxh{0}, sum_dxh_xh{0};
                           for (std::size_t i = 0; i < b; ++i) {
                             const T xh = (vx2[i * f + j] - mu[j]) * rstd[j];
                             const T dxh = g[i * f + j] * vg2[j];
                             sum_dxh += dxh;
                             sum_dxh_xh += dxh * xh;
                           }
                           for (std::size_t i = 0; i < b; ++i) {
                             const T xh = (vx2[i * f + j] - mu[j]) * rstd[j];
                             const T dxh = g[i * f + j] * vg2[j];
                             gx[i * f + j] +=
                                 rstd[j] * (dxh - invb2 * sum_dxh - xh * invb2 * sum_dxh_xh);
                           }
                         }
                       });
                     });
    return {out_id, std::move(mu), std::move(var)};
  }

  // Batch norm with frozen running statistics (eval mode); a pure affine map.
  id batch_norm_eval(id x, id gain, id bias, const tensor<T>& run_mean,
                     const tensor<T>& run_var, T eps) {
    const tensor<T>& vx = value(x);
    require(vx.ndim() == 2, "batch_norm: input must be [batch, features]");
    const std::size_t b = vx.shape[0], f = vx.shape[1];
    require(run_mean.numel() == f && run_var.numel() == f, "batch_norm: stat mismatch");
    std::vector<T> scale(f), shift_mu(f);
    const tensor<T>& vg = value(gain);
    const tensor<T>& vbi = value(bias);
    for (std::size_t j = 0; j < f; ++j) {
      scale[j] = T{1} / std::sqrt(run_var[j] + eps);
      shift_mu[j] = run_mean[j];
    }
    tensor<T> out({b, f});
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < f; ++j)
        out[i * f + j] = (vx[i * f + j] - shift_mu[j]) * scale[j] * vg[j] + vbi[j];
    return make(std::move(out), {x, gain, bias},
                [x, gain, bias, b, f, scale = std::move(scale),
                 shift_mu = std::move(shift_mu)](tape& tp) {
                  const tensor<T>& g = tp.cur_grad();
                  const tensor<T>& vx2 = tp.value(x);
                  const tensor<T>& vg2 = tp.value(gain);
                  tp.accum(x, [&](tensor<T>& gx) {
                    for (std::size_t i = 0; i < b; ++i)
                      for (std::size_t j = 0; j < f; ++j)
                        gx[i * f + j] += g[i * f + j] * vg2[j] * scale[j];
                  });
                  tp.accum(gain, [&](tensor<T>& gg) {
                    for (std::size_t i = 0; i < b; ++i)
                      for (std::size_t j = 0; j < f; ++j)
                        gg[j] += g[i * f + j] * (vx2[i * f + j] - shift_mu[j]) * scale[j];
                  });
                  tp.accum(bias, [&](tensor<T>& gb) {
                    for (std::size_t i = 0; i < b; ++i)
                      for (std::size_t j = 0; j < f; ++j) gb[j] += g[i * f + j];
                  });
                });
  }

  // ---- reductions ---------------------------------------------------------

  // [B, T, D] -> [B, D], mean over tokens.
  id mean_axis1(id x) {
    const tensor<T>& vx = value(x);
    require(vx.ndim() == 3, "mean_axis1: input must be 3-d");
    const std::size_t b = vx.shape[0], t = vx.shape[1], d = vx.shape[2];
    tensor<T> out({b, d});
    const T invt = T{1} / static_cast<T>(t);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t k = 0; k < t; ++k) {
        const T* xr = vx.ptr() + (i * t + k) * d;
        T* o = out.ptr() + i * d;
        for (std::size_t j = 0; j < d; ++j) o[j] += xr[j] * invt;
      }
    return make(std::move(out), {x}, [x, b, t, d, invt](tape& tp) {
      const tensor<T>& g = tp.cur_grad();
      tp.accum(x, [&](tensor<T>& gx) {
        for (std::size_t i = 0; i < b; ++i)
          for (std::size_t k = 0; k < t; ++k) {
            T* xr = gx.ptr() + (i * t + k) * d;
            const T* gr = g.ptr() + i * d;
            for (std::size_t j = 0; j < d; ++j) xr[j] += gr[j] * invt;
          }
      });
    });
  }

  id mean_all(id x) {
    const tensor<T>& vx = value(x);
    require(vx.numel() > 0, "mean_all: empty input");
    T s{0};
    for (const T& v : vx.data) s += v;
    const T invn = T{1} / static_cast<T>(vx.numel());
    return make(tensor<T>::scalar(s * invn), {x}, [x, invn](tape& tp) {
      const T g0 = tp.cur_grad()[0];
      tp.accum(x, [&](tensor<T>& gx) {
        for (auto& v : gx.data) v += g0 * invn;
      });
    });
  }

  // ---- cosine similarity ---------------------------------------------------
  // Row-wise a.b / max(|a||b|, floor). The floor acts as a constant in the
  // backward pass: when the denominator sits at the floor, no gradient flows
  // through the norms.
  static constexpr T cosine_floor = static_cast<T>(1e-8);

  id cosine_rows(id a, id b) {
    const tensor<T>& va = value(a);
    const tensor<T>& vb = value(b);
    require(va.ndim() == 2 && vb.ndim() == 2, "cosine_rows: inputs must be [rows, dim]");
    if (va.shape != vb.shape) throw contract_error("cosine_rows: shape mismatch");
    const std::size_t rows = va.shape[0], d = va.shape[1];
    tensor<T> out({rows});
    std::vector<T> na(rows), nb(rows), denom(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* ar = va.ptr() + r * d;
      const T* br = vb.ptr() + r * d;
      T dot{0}, sa{0}, sb{0};
      for (std::size_t j = 0; j < d; ++j) {
        dot += ar[j] * br[j];
        sa += ar[j] * ar[j];
        sb += br[j] * br[j];
      }
      na[r] = std::sqrt(sa);
      nb[r] = std::sqrt(sb);
      denom[r] = std::max(na[r] * nb[r], cosine_floor);
      out[r] = dot / denom[r];
    }
    const id self_hint = static_cast<id>(nodes_.size());
    return make(std::move(out), {a, b},
                [a, b, rows, d, na = std::move(na), nb = std::move(nb),
                 denom = std::move(denom), self_hint](tape& tp) {
                  const tensor<T>& g = tp.cur_grad();
                  const tensor<T>& va2 = tp.value(a);
                  const tensor<T>& vb2 = tp.value(b);
                  const tensor<T>& c = tp.value(self_hint);
                  auto side = [&](id target, const tensor<T>& vt, const tensor<T>& vo,
                                  const std::vector<T>& nt) {
                    tp.accum(target, [&](tensor<T>& gt) {
                      for (std::size_t r = 0; r < rows; ++r) {
                        const T gr = g[r];
                        if (gr == T{0}) continue;
                        const T* tr = vt.ptr() + r * d;
                        const T* orow = vo.ptr() + r * d;
                        T* out_g = gt.ptr() + r * d;
                        const T inv_denom = T{1} / denom[r];
                        if (na[r] * nb[r] > cosine_floor) {
                          const T self_coef = c[r] / (nt[r] * nt[r]);
                          for (std::size_t j = 0; j < d; ++j)
                            out_g[j] += gr * (orow[j] * inv_denom - self_coef * tr[j]);
                        } else {
                          for (std::size_t j = 0; j < d; ++j) out_g[j] += gr * orow[j] * inv_denom;
                        }
                      }
                    });
                  };
                  side(a, va2, vb2, na);
                  side(b, vb2, va2, nb);
                });
  }

  // ---- backward ------------------------------------------------------------

  void backward(id loss) {
    if (value(loss).numel() != 1) throw contract_error("backward: loss must be scalar");
    if (!nodes_[loss].requires_grad) return;  // depends only on constants
    ensure_grad(loss);
    nodes_[loss].grad[0] = T{1};
    for (id n = loss; n >= 0; --n) {
      node& nd = nodes_[n];
      if (!nd.requires_grad || nd.grad.empty() || !nd.backprop) continue;
      cur_ = n;
      nd.backprop(*this);
    }
    cur_ = -1;
  }

  // Gradients of requires_grad leaves that participated in the loss.
  std::vector<std::pair<id, const tensor<T>*>> gradient_map() const {
    std::vector<std::pair<id, const tensor<T>*>> out;
    for (id n = 0; n < static_cast<id>(nodes_.size()); ++n)
      if (nodes_[n].is_leaf && nodes_[n].requires_grad && !nodes_[n].grad.empty())
        out.emplace_back(n, &nodes_[n].grad);
    return out;
  }

  // internal helpers used by op closures
  const tensor<T>& cur_grad() const { return nodes_[cur_].grad; }
  template <class Fn>
  void accum(id parent, Fn&& fn) {
    if (!nodes_[parent].requires_grad) return;
    ensure_grad(parent);
    fn(nodes_[parent].grad);
  }

 private:
  static T normal_cdf(T x) {
    return T{0.5} * (T{1} + std::erf(x * T{0.70710678118654752440}));
  }
  static T normal_pdf(T x) {
    return std::exp(T{-0.5} * x * x) * T{0.39894228040143267794};
  }

  static void transpose_batch(const T* in, T* out, std::size_t outer, std::size_t m,
                              std::size_t n) {
    for (std::size_t o = 0; o < outer; ++o) {
      const T* ip = in + o * m * n;
      T* op = out + o * m * n;
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) op[j * m + i] = ip[i * n + j];
    }
  }

  static void split_kernel(const T* in, T* out, std::size_t b, std::size_t t, std::size_t h,
                           std::size_t d, bool merge) {
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t hi = 0; hi < h; ++hi)
        for (std::size_t ti = 0; ti < t; ++ti) {
          const std::size_t split_off = ((bi * h + hi) * t + ti) * d;
          const std::size_t flat_off = (bi * t + ti) * h * d + hi * d;
          if (merge)
            for (std::size_t j = 0; j < d; ++j) out[flat_off + j] = in[split_off + j];
          else
            for (std::size_t j = 0; j < d; ++j) out[split_off + j] = in[flat_off + j];
        }
  }

  static void split_adjoint(const T* g, T* gx, std::size_t b, std::size_t t, std::size_t h,
                            std::size_t d, bool merge_forward) {
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t hi = 0; hi < h; ++hi)
        for (std::size_t ti = 0; ti < t; ++ti) {
          const std::size_t split_off = ((bi * h + hi) * t + ti) * d;
          const std::size_t flat_off = (bi * t + ti) * h * d + hi * d;
          if (merge_forward)  // forward was merge: grad of [B,T,H*D] -> split layout
            for (std::size_t j = 0; j < d; ++j) gx[split_off + j] += g[flat_off + j];
          else
            for (std::size_t j = 0; j < d; ++j) gx[flat_off + j] += g[split_off + j];
        }
  }

  id make(tensor<T> out, const std::vector<id>& parents, std::function<void(tape&)> bp) {
    bool rg = false;
    for (id p : parents) rg = rg || nodes_[p].requires_grad;
    nodes_.push_back(node{std::move(out), {}, rg ? std::move(bp) : nullptr, rg, false});
    return static_cast<id>(nodes_.size() - 1);
  }
  id make(tensor<T> out, std::initializer_list<id> parents, std::function<void(tape&)> bp) {
    return make(std::move(out), std::vector<id>(parents), std::move(bp));
  }

  void check_same_shape(const char* op, id a, id b) const {
    if (value(a).shape != value(b).shape)
      throw contract_error(std::string(op) + ": shape mismatch " + shape_str(value(a).shape) +
                           " vs " + shape_str(value(b).shape));
  }

  void ensure_grad(id n) {
    if (nodes_[n].grad.empty()) nodes_[n].grad = tensor<T>(nodes_[n].value.shape);
  }

  std::vector<node> nodes_;
  id cur_ = -1;
};

// Plain cosine similarity of two equal-length vectors, same floor semantics
// as the tape op.
template <class T>
T cosine_similarity(const tensor<T>& a, const tensor<T>& b) {
  if (a.numel() != b.numel()) throw contract_error("cosine_similarity: length mismatch");
  T dot{0}, sa{0}, sb{0};
  for (std::size_t i = 0; i < a.numel(); ++i) {
    dot += a[i] * b[i];
    sa += a[i] * a[i];
    sb += b[i] * b[i];
  }
  const T denom = std::max(std::sqrt(sa) * std::sqrt(sb), tape<T>::cosine_floor);
  return dot / denom;
}

// Central finite differences against analytic gradients.
//   loss_fn: evaluates the scalar objective at the current parameter values
//   grad_fn: evaluates analytic gradients, one tensor per parameter
// Returns the maximum relative deviation over all coordinates, where the
// deviation of a coordinate is |analytic - central| / max(|analytic|, |central|, 1e-6).
template <class T>
struct fd_report {
  T max_rel_dev{0};
  std::size_t worst_param{0};
  std::size_t worst_coord{0};
  T analytic{0};
  T central{0};
};

template <class T>
fd_report<T> finite_difference_check(const std::function<T()>& loss_fn,
                                     const std::function<std::vector<tensor<T>>()>& grad_fn,
                                     const std::vector<tensor<T>*>& params, T eps) {
  require(eps > T{0}, "finite_difference_check: epsilon must be positive");
  const T l0 = loss_fn();
  const T l1 = loss_fn();
  if (!(l0 == l1))
    throw numeric_error("finite_difference_check: objective is not deterministic (" +
                        format_double(static_cast<double>(l0)) + " vs " +
                        format_double(static_cast<double>(l1)) + ")");
  const std::vector<tensor<T>> analytic = grad_fn();
  require(analytic.size() == params.size(), "finite_difference_check: gradient count mismatch");
  fd_report<T> rep;
  for (std::size_t p = 0; p < params.size(); ++p) {
    tensor<T>& theta = *params[p];
    require(analytic[p].shape == theta.shape, "finite_difference_check: gradient shape mismatch");
    for (std::size_t i = 0; i < theta.numel(); ++i) {
      const T saved = theta[i];
      theta[i] = saved + eps;
      const T lp = loss_fn();
      theta[i] = saved - eps;
      const T lm = loss_fn();
      theta[i] = saved;
      const T central = (lp - lm) / (T{2} * eps);
      const T a = analytic[p][i];
      const T dev = std::abs(a - central) /
                    std::max({std::abs(a), std::abs(central), static_cast<T>(1e-6)});
      if (dev > rep.max_rel_dev) {
        rep.max_rel_dev = dev;
        rep.worst_param = p;
        rep.worst_coord = i;
        rep.analytic = a;
        rep.central = central;
      }
    }
  }
  return rep;
}

}  // namespace debs
