#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "debs/data.hpp"
#include "debs/encoder.hpp"

namespace debs {

// ---------------------------------------------------------------------------
// Frozen-representation extraction
// ---------------------------------------------------------------------------

template <class T>
tensor<T> extract_representations(const vit_params<T>& enc, const dataset& ds) {
  ds.validate();
  if (ds.segment_len != enc.cfg.input_len)
    throw config_error("extract: dataset segment length does not match encoder input");
  const std::size_t n = ds.total_segments();
  const std::size_t d = enc.cfg.model_dim;
  tensor<T> out({n, d});
  const std::size_t chunk = 64;
  std::vector<const segment*> order;
  order.reserve(n);
  for (const auto& s : ds.subjects)
    for (const auto& seg : s.segments) order.push_back(&seg);
  for (std::size_t base = 0; base < n; base += chunk) {
    const std::size_t b = std::min(chunk, n - base);
    tensor<float> batch({b, ds.segment_len});
    for (std::size_t r = 0; r < b; ++r)
      zscore(order[base + r]->samples, batch.ptr() + r * ds.segment_len);
    tensor<T> in(batch.shape);
    for (std::size_t i = 0; i < batch.numel(); ++i) in[i] = static_cast<T>(batch[i]);
    tensor<T> reps = encode_eval(enc, in);
    std::copy(reps.data.begin(), reps.data.end(), out.data.begin() + base * d);
  }
  return out;
}

inline std::vector<std::uint8_t> collect_labels(const dataset& ds) {
  std::vector<std::uint8_t> out;
  for (const auto& s : ds.subjects)
    for (const auto& seg : s.segments) out.push_back(seg.event_label);
  return out;
}

inline std::vector<std::uint32_t> collect_subjects(const dataset& ds) {
  std::vector<std::uint32_t> out;
  for (const auto& s : ds.subjects)
    for (const auto& seg : s.segments) out.push_back(seg.subject_id);
  return out;
}

// ---------------------------------------------------------------------------
// Linear probe: L2-regularized hinge loss, full-batch subgradient descent.
// Features are standardized internally and the scaling folded back, so the
// stored decision rule is plain sign(w.x + b). Hyperparameters are fixed so
// probe comparisons isolate the representation.
// ---------------------------------------------------------------------------

struct probe_config {
  double l2 = 1e-3;
  int epochs = 200;
  double lr = 0.1;      // decayed as lr / (1 + 0.05 * epoch)
};

template <class T>
struct linear_probe {
  tensor<T> w;
  T bias = 0;

  T decision(const T* x, std::size_t d) const {
    T acc = bias;
    for (std::size_t j = 0; j < d; ++j) acc += w[j] * x[j];
    return acc;
  }
};

template <class T>
linear_probe<T> fit_probe(const tensor<T>& reps, const std::vector<std::uint8_t>& labels,
                          const probe_config& cfg = {}) {
  require(reps.ndim() == 2, "fit_probe: expected [n, features]");
  const std::size_t n = reps.shape[0], d = reps.shape[1];
  require(labels.size() == n, "fit_probe: label count mismatch");
  if (n == 0) throw data_error("fit_probe: empty training set");
  bool has_pos = false, has_neg = false;
  for (auto l : labels) (l == label_event ? has_pos : has_neg) = true;
  if (!has_pos || !has_neg) throw data_error("fit_probe: training labels contain a single class");

  // standardize
  std::vector<double> mu(d, 0.0), sigma(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mu[j] += reps[i * d + j];
  for (auto& v : mu) v /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const double dv = reps[i * d + j] - mu[j];
      sigma[j] += dv * dv;
    }
  for (auto& v : sigma) v = std::max(std::sqrt(v / static_cast<double>(n)), 1e-6);

  std::vector<double> x(n * d);
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) x[i * d + j] = (reps[i * d + j] - mu[j]) / sigma[j];
    y[i] = labels[i] == label_event ? 1.0 : -1.0;
  }

  std::vector<double> w(d, 0.0);
  double b = 0.0;
  std::vector<double> gw(d);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.lr / (1.0 + 0.05 * epoch);
    std::fill(gw.begin(), gw.end(), 0.0);
    double gb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double margin = b;
      const double* xi = x.data() + i * d;
      for (std::size_t j = 0; j < d; ++j) margin += w[j] * xi[j];
      margin *= y[i];
      if (margin < 1.0) {
        for (std::size_t j = 0; j < d; ++j) gw[j] -= y[i] * xi[j];
        gb -= y[i];
      }
    }
    const double invn = 1.0 / static_cast<double>(n);
    for (std::size_t j = 0; j < d; ++j) w[j] = w[j] - lr * (cfg.l2 * w[j] + gw[j] * invn);
    b -= lr * gb * invn;
  }

  // fold standardization into the stored weights
  linear_probe<T> probe;
  probe.w = tensor<T>({d});
  double shift = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    probe.w[j] = static_cast<T>(w[j] / sigma[j]);
    shift += w[j] * mu[j] / sigma[j];
  }
  probe.bias = static_cast<T>(b - shift);
  return probe;
}

template <class T>
std::vector<std::uint8_t> probe_predict(const linear_probe<T>& probe, const tensor<T>& reps) {
  require(reps.ndim() == 2 && reps.shape[1] == probe.w.numel(), "probe_predict: shape mismatch");
  std::vector<std::uint8_t> out(reps.shape[0]);
  const std::size_t d = reps.shape[1];
  for (std::size_t i = 0; i < reps.shape[0]; ++i)
    out[i] = probe.decision(reps.ptr() + i * d, d) > T{0} ? label_event : label_normal;
  return out;
}

// ---------------------------------------------------------------------------
// Classification metrics (event class is positive)
// ---------------------------------------------------------------------------

struct probe_result {
  double accuracy = 0, sensitivity = 0, specificity = 0;  // percent
  std::uint64_t tp = 0, tn = 0, fp = 0, fn = 0;
};

inline probe_result metrics(const std::vector<std::uint8_t>& predictions,
                            const std::vector<std::uint8_t>& labels) {
  if (predictions.empty()) throw data_error("metrics: empty input");
  require(predictions.size() == labels.size(), "metrics: length mismatch");
  probe_result r;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool p = predictions[i] == label_event;
    const bool t = labels[i] == label_event;
    if (p && t) ++r.tp;
    else if (!p && !t) ++r.tn;
    else if (p && !t) ++r.fp;
    else ++r.fn;
  }
  const auto pct = [](std::uint64_t num, std::uint64_t den) {
    return den == 0 ? 0.0 : 100.0 * static_cast<double>(num) / static_cast<double>(den);
  };
  r.accuracy = pct(r.tp + r.tn, r.tp + r.tn + r.fp + r.fn);
  r.sensitivity = pct(r.tp, r.tp + r.fn);
  r.specificity = pct(r.tn, r.tn + r.fp);
  return r;
}

// ---------------------------------------------------------------------------
// PCA via power iteration with orthogonalization against earlier components.
// ---------------------------------------------------------------------------

template <class T>
void orthogonalize(std::vector<T>& w, const tensor<T>& components, std::size_t count) {
  const std::size_t d = w.size();
  for (std::size_t p = 0; p < count; ++p) {
    const T* cp = components.ptr() + p * d;
    T dot{0};
    for (std::size_t j = 0; j < d; ++j) dot += cp[j] * w[j];
    for (std::size_t j = 0; j < d; ++j) w[j] -= dot * cp[j];
  }
}

template <class T>
void orthonormalize(std::vector<T>& v, const tensor<T>& components, std::size_t count) {
  orthogonalize(v, components, count);
  T nrm{0};
  for (T x : v) nrm += x * x;
  nrm = std::sqrt(nrm);
  require(nrm > T{1e-12}, "pca: degenerate start vector");
  for (auto& x : v) x /= nrm;
}

template <class T>
struct pca_result {
  tensor<T> components;            // [k, d], rows orthonormal
  tensor<T> scores;                // [n, k]
  std::vector<T> explained_variance;  // eigenvalues, non-increasing
};

template <class T>
pca_result<T> pca(const tensor<T>& reps, std::size_t k, T tol = static_cast<T>(1e-8),
                  std::size_t max_iter = 10000) {
  require(reps.ndim() == 2, "pca: expected [n, features]");
  const std::size_t n = reps.shape[0], d = reps.shape[1];
  if (n <= k) throw data_error("pca: need more samples than components");
  require(k >= 1 && k <= d, "pca: component count out of range");
  require(max_iter >= 1, "pca: max_iter must be positive");

  tensor<T> centered({n, d});
  for (std::size_t j = 0; j < d; ++j) {
    T mu{0};
    for (std::size_t i = 0; i < n; ++i) mu += reps[i * d + j];
    mu /= static_cast<T>(n);
    for (std::size_t i = 0; i < n; ++i) centered[i * d + j] = reps[i * d + j] - mu;
  }
  tensor<T> cov({d, d});
  matmul_tn(centered.ptr(), centered.ptr(), cov.ptr(), d, n, d, T{0});
  const T invn1 = T{1} / static_cast<T>(n - 1);
  for (auto& v : cov.data) v *= invn1;

  pca_result<T> out;
  out.components = tensor<T>({k, d});
  out.explained_variance.resize(k);

  std::vector<T> v(d), w(d);
  for (std::size_t c = 0; c < k; ++c) {
    rng r(0xC0FFEEull + c);
    for (auto& x : v) x = static_cast<T>(r.normal());
    orthonormalize(v, out.components, c);
    bool converged = false;
    for (std::size_t it = 0; it < max_iter; ++it) {
      matmul_nn(cov.ptr(), v.data(), w.data(), d, d, 1, T{0});
      orthogonalize(w, out.components, c);
      T nrm{0};
      for (T x : w) nrm += x * x;
      nrm = std::sqrt(nrm);
      if (nrm < static_cast<T>(1e-30)) {
        converged = true;  // no variance left in the complement
        break;
      }
      T diff{0}, diff_neg{0};
      for (std::size_t j = 0; j < d; ++j) {
        const T nj = w[j] / nrm;
        diff += (nj - v[j]) * (nj - v[j]);
        diff_neg += (nj + v[j]) * (nj + v[j]);
        v[j] = nj;
      }
      if (std::sqrt(std::min(diff, diff_neg)) < tol) {
        converged = true;
        break;
      }
    }
    if (!converged)
      throw numeric_error("pca: component " + std::to_string(c) + " did not converge within " +
                          std::to_string(max_iter) + " iterations");
    // sign convention: largest-magnitude coordinate positive
    std::size_t arg = 0;
    for (std::size_t j = 1; j < d; ++j)
      if (std::abs(v[j]) > std::abs(v[arg])) arg = j;
    if (v[arg] < T{0})
      for (auto& x : v) x = -x;
    // eigenvalue = v' C v
    matmul_nn(cov.ptr(), v.data(), w.data(), d, d, 1, T{0});
    T lam{0};
    for (std::size_t j = 0; j < d; ++j) lam += v[j] * w[j];
    out.explained_variance[c] = lam;
    std::copy(v.begin(), v.end(), out.components.ptr() + c * d);
  }

  out.scores = tensor<T>({n, k});
  matmul_nt(centered.ptr(), out.components.ptr(), out.scores.ptr(), n, d, k, T{0});
  return out;
}

// ---------------------------------------------------------------------------
// Separation scores per component: silhouette of scores grouped by subject,
// and the absolute standardized mean difference between event and normal
// scores (pooled standard deviation).
// ---------------------------------------------------------------------------

inline double silhouette_1d(const std::vector<double>& values,
                            const std::vector<std::uint32_t>& groups) {
  require(values.size() == groups.size(), "silhouette: size mismatch");
  // group -> member indexes; groups with a single member are dropped
  std::vector<std::uint32_t> ids;
  for (auto g : groups)
    if (std::find(ids.begin(), ids.end(), g) == ids.end()) ids.push_back(g);
  std::vector<std::vector<std::size_t>> members(ids.size());
  for (std::size_t i = 0; i < groups.size(); ++i) {
    const auto gi = std::find(ids.begin(), ids.end(), groups[i]) - ids.begin();
    members[gi].push_back(i);
  }
  std::vector<std::size_t> kept;
  for (std::size_t g = 0; g < ids.size(); ++g)
    if (members[g].size() >= 2) kept.push_back(g);
  if (kept.size() < 2) return 0.0;

  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t gi : kept) {
    for (std::size_t i : members[gi]) {
      double a = 0.0;
      for (std::size_t j : members[gi])
        if (j != i) a += std::abs(values[i] - values[j]);
      a /= static_cast<double>(members[gi].size() - 1);
      double b = std::numeric_limits<double>::infinity();
      for (std::size_t go : kept) {
        if (go == gi) continue;
        double m = 0.0;
        for (std::size_t j : members[go]) m += std::abs(values[i] - values[j]);
        m /= static_cast<double>(members[go].size());
        b = std::min(b, m);
      }
      const double mx = std::max(a, b);
      acc += mx > 0.0 ? (b - a) / mx : 0.0;
      ++count;
    }
  }
  return count ? acc / static_cast<double>(count) : 0.0;
}

inline double standardized_mean_difference(const std::vector<double>& values,
                                           const std::vector<std::uint8_t>& labels) {
  require(values.size() == labels.size(), "smd: size mismatch");
  double m1 = 0, m0 = 0;
  std::size_t n1 = 0, n0 = 0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (labels[i] == label_event) {
      m1 += values[i];
      ++n1;
    } else {
      m0 += values[i];
      ++n0;
    }
  }
  if (n1 < 2 || n0 < 2) return 0.0;
  m1 /= static_cast<double>(n1);
  m0 /= static_cast<double>(n0);
  double s1 = 0, s0 = 0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double dv = values[i] - (labels[i] == label_event ? m1 : m0);
    (labels[i] == label_event ? s1 : s0) += dv * dv;
  }
  const double pooled =
      std::sqrt((s1 + s0) / static_cast<double>(n1 + n0 - 2));
  return pooled > 0.0 ? std::abs(m1 - m0) / pooled : 0.0;
}

struct separation_score {
  double subject_sep = 0;  // silhouette by subject
  double event_sep = 0;    // |standardized mean difference| event vs normal
};

template <class T>
std::vector<separation_score> separation_scores(const pca_result<T>& p,
                                                const std::vector<std::uint32_t>& subject_ids,
                                                const std::vector<std::uint8_t>& event_labels) {
  const std::size_t k = p.components.shape[0];
  require(k >= 5, "separation_scores: needs at least 5 components");
  const std::size_t n = p.scores.shape[0];
  require(subject_ids.size() == n && event_labels.size() == n,
          "separation_scores: metadata size mismatch");
  std::vector<separation_score> out(k);
  std::vector<double> col(n);
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t i = 0; i < n; ++i) col[i] = static_cast<double>(p.scores[i * k + c]);
    out[c].subject_sep = silhouette_1d(col, subject_ids);
    out[c].event_sep = standardized_mean_difference(col, event_labels);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Result files
// ---------------------------------------------------------------------------

template <class T>
void write_pca_csv(const pca_result<T>& p, const std::vector<std::uint32_t>& subject_ids,
                   const std::vector<std::uint8_t>& labels, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw io_error("cannot open for writing: " + path);
  const std::size_t n = p.scores.shape[0], k = p.scores.shape[1];
  f << "subject_id,event_label";
  for (std::size_t c = 0; c < k; ++c) f << ",pc" << (c + 1);
  f << "\n";
  for (std::size_t i = 0; i < n; ++i) {
    f << subject_ids[i] << "," << static_cast<int>(labels[i]);
    for (std::size_t c = 0; c < k; ++c)
      f << "," << format_double(static_cast<double>(p.scores[i * k + c]));
    f << "\n";
  }
}

// Minimal scatter of two score columns; fill hue tracks the subject, stroke
// marks event segments.
template <class T>
void write_scatter_svg(const pca_result<T>& p, std::size_t cx, std::size_t cy,
                       const std::vector<std::uint32_t>& subject_ids,
                       const std::vector<std::uint8_t>& labels, const std::string& path) {
  const std::size_t n = p.scores.shape[0], k = p.scores.shape[1];
  require(cx < k && cy < k, "scatter: component index out of range");
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw io_error("cannot open for writing: " + path);
  double xmin = 1e30, xmax = -1e30, ymin = 1e30, ymax = -1e30;
  for (std::size_t i = 0; i < n; ++i) {
    xmin = std::min(xmin, static_cast<double>(p.scores[i * k + cx]));
    xmax = std::max(xmax, static_cast<double>(p.scores[i * k + cx]));
    ymin = std::min(ymin, static_cast<double>(p.scores[i * k + cy]));
    ymax = std::max(ymax, static_cast<double>(p.scores[i * k + cy]));
  }
  const double w = 640, h = 480, pad = 40;
  auto sx = [&](double x) { return pad + (x - xmin) / std::max(xmax - xmin, 1e-12) * (w - 2 * pad); };
  auto sy = [&](double y) { return h - pad - (y - ymin) / std::max(ymax - ymin, 1e-12) * (h - 2 * pad); };
  f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
    << "\" viewBox=\"0 0 " << w << " " << h << "\">\n";
  f << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  f << "<text x=\"" << w / 2 << "\" y=\"" << h - 8 << "\" text-anchor=\"middle\" font-size=\"12\">pc"
    << (cx + 1) << "</text>\n";
  f << "<text x=\"12\" y=\"" << h / 2 << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 12 "
    << h / 2 << ")\">pc" << (cy + 1) << "</text>\n";
  for (std::size_t i = 0; i < n; ++i) {
    const int hue = static_cast<int>((subject_ids[i] * 47) % 360);
    const char* stroke = labels[i] == label_event ? "black" : "none";
    f << "<circle cx=\"" << sx(p.scores[i * k + cx]) << "\" cy=\"" << sy(p.scores[i * k + cy])
      << "\" r=\"4\" fill=\"hsl(" << hue << ",70%,50%)\" stroke=\"" << stroke
      << "\" stroke-width=\"1.5\"/>\n";
  }
  f << "</svg>\n";
}

}  // namespace debs
