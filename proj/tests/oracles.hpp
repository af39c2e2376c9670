#pragma once

// Independent reference implementations used by the tests. Everything here is
// written directly from the defining formulas in long double, without reusing
// library kernels, so agreement is evidence rather than tautology.

#include <algorithm>
#include <cmath>
#include <vector>

#include "mdlab/model.hpp"
#include "mdlab/numkit.hpp"
#include "mdlab/prior.hpp"
#include "mdlab/rope.hpp"

namespace oracle {

using LD = long double;
using Mat = std::vector<std::vector<LD>>;

inline Mat zeros(std::size_t r, std::size_t c) { return Mat(r, std::vector<LD>(c, 0.0L)); }

template <typename T>
Mat from(const mdlab::num::BasicMatrix<T>& m) {
  Mat out = zeros(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out[i][j] = m(i, j);
  return out;
}

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat c = zeros(a.size(), b.empty() ? 0 : b[0].size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < c[i].size(); ++j) {
      LD s = 0;
      for (std::size_t k = 0; k < b.size(); ++k) s += a[i][k] * b[k][j];
      c[i][j] = s;
    }
  return c;
}

inline std::vector<LD> softmax(const std::vector<LD>& x) {
  const LD mx = *std::max_element(x.begin(), x.end());
  std::vector<LD> e(x.size());
  LD s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (e[i] = std::exp(x[i] - mx));
  for (auto& v : e) v /= s;
  return e;
}

// Cyclic Jacobi eigenvalues of a symmetric matrix, descending.
inline std::vector<LD> jacobi_eigenvalues(Mat a, int sweeps = 100) {
  const std::size_t n = a.size();
  for (int s = 0; s < sweeps; ++s) {
    LD off = 0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
    if (off < 1e-30L) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::fabs(a[p][q]) < 1e-300L) continue;
        const LD theta = (a[q][q] - a[p][p]) / (2 * a[p][q]);
        const LD t = (theta >= 0 ? 1 : -1) / (std::fabs(theta) + std::sqrt(theta * theta + 1));
        const LD c = 1 / std::sqrt(t * t + 1), sn = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const LD akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - sn * akq;
          a[k][q] = sn * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const LD apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - sn * aqk;
          a[q][k] = sn * apk + c * aqk;
        }
      }
  }
  std::vector<LD> ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = a[i][i];
  std::sort(ev.begin(), ev.end(), std::greater<>());
  return ev;
}

// Sample covariance (divisor n - 1) of the rows of x.
inline Mat covariance(const Mat& x) {
  const std::size_t n = x.size(), d = x[0].size();
  std::vector<LD> mu(d, 0);
  for (const auto& r : x)
    for (std::size_t j = 0; j < d; ++j) mu[j] += r[j] / n;
  Mat c = zeros(d, d);
  for (const auto& r : x)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) c[i][j] += (r[i] - mu[i]) * (r[j] - mu[j]) / (n - 1);
  return c;
}

// Rotation of consecutive pairs by s_i * m * theta_i, theta_i = 10000^(-2i/d).
inline std::vector<LD> rotate(const std::vector<LD>& v, LD m, const std::vector<LD>& scale) {
  const std::size_t d = v.size();
  std::vector<LD> out(d);
  for (std::size_t i = 0; i < d / 2; ++i) {
    const LD theta = std::pow(10000.0L, -2.0L * i / d);
    const LD a = scale[i] * m * theta;
    out[2 * i] = v[2 * i] * std::cos(a) - v[2 * i + 1] * std::sin(a);
    out[2 * i + 1] = v[2 * i] * std::sin(a) + v[2 * i + 1] * std::cos(a);
  }
  return out;
}

inline LD dot(const std::vector<LD>& a, const std::vector<LD>& b) {
  LD s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline std::vector<LD> rms(const std::vector<LD>& x, const Mat& gain, LD eps) {
  LD ss = 0;
  for (LD v : x) ss += v * v;
  const LD inv = 1 / std::sqrt(ss / x.size() + eps);
  std::vector<LD> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * inv * gain[0][i];
  return y;
}

struct DenseResult {
  Mat final_hidden;  // J x d
  Mat logits;        // J x V
  std::vector<std::vector<Mat>> attention;  // [layer][head]
};

// Unfused forward: every position, head and layer written out as loops.
inline DenseResult dense_forward(const mdlab::model::ModelSpec& s, const mdlab::model::Weights<float>& w,
                                 const mdlab::model::SequenceLayout& lay, const mdlab::rope::PositionEncoding& pe) {
  const std::size_t J = lay.length(), d = s.d_model, H = s.n_heads, dh = s.d_head();
  Mat x = zeros(J, d);
  for (std::size_t j = 0; j < J; ++j)
    for (std::size_t c = 0; c < d; ++c) {
      if (lay.visual.contains(j)) {
        LD acc = w.vis_bias(0, c);
        for (std::size_t r = 0; r < s.d_visual; ++r) acc += LD(lay.visual_inputs(j, r)) * w.vis_proj(r, c);
        x[j][c] = acc;
      } else {
        x[j][c] = w.tok_embed(static_cast<std::size_t>(lay.tokens[j]), c);
      }
    }
  DenseResult out;
  for (const auto& lw : w.layers) {
    Mat xn(J), q(J), k(J), v(J);
    for (std::size_t j = 0; j < J; ++j) {
      xn[j] = rms(x[j], from(lw.attn_norm), s.rms_eps);
      q[j] = matmul({xn[j]}, from(lw.wq))[0];
      k[j] = matmul({xn[j]}, from(lw.wk))[0];
      v[j] = matmul({xn[j]}, from(lw.wv))[0];
    }
    Mat attn = zeros(J, d);
    std::vector<Mat> probs;
    for (std::size_t h = 0; h < H; ++h) {
      Mat p = zeros(J, J);
      for (std::size_t i = 0; i < J; ++i) {
        const auto& ti = pe.table_for(lay.segment_of(i));
        std::vector<LD> si(ti.scale.begin(), ti.scale.end());
        std::vector<LD> qi(q[i].begin() + h * dh, q[i].begin() + (h + 1) * dh);
        qi = rotate(qi, LD(i + lay.position_offset), si);
        std::vector<LD> row(J);
        for (std::size_t j = 0; j < J; ++j) {
          const auto& tj = pe.table_for(lay.segment_of(j));
          std::vector<LD> sj(tj.scale.begin(), tj.scale.end());
          std::vector<LD> kj(k[j].begin() + h * dh, k[j].begin() + (h + 1) * dh);
          kj = rotate(kj, LD(j + lay.position_offset), sj);
          row[j] = dot(qi, kj) / std::sqrt(LD(dh));
        }
        p[i] = softmax(row);
        for (std::size_t j = 0; j < J; ++j)
          for (std::size_t e = 0; e < dh; ++e) attn[i][h * dh + e] += p[i][j] * v[j][h * dh + e];
      }
      probs.push_back(p);
    }
    out.attention.push_back(probs);
    const Mat o = matmul(attn, from(lw.wo));
    for (std::size_t j = 0; j < J; ++j) {
      for (std::size_t c = 0; c < d; ++c) x[j][c] += o[j][c];
      auto hn = rms(x[j], from(lw.mlp_norm), s.rms_eps);
      auto pre = matmul({hn}, from(lw.w1))[0];
      for (auto& a : pre) a = a / (1 + std::exp(-a));
      auto m = matmul({pre}, from(lw.w2))[0];
      for (std::size_t c = 0; c < d; ++c) x[j][c] += m[c];
    }
  }
  out.final_hidden = zeros(J, d);
  for (std::size_t j = 0; j < J; ++j) out.final_hidden[j] = rms(x[j], from(w.final_norm), s.rms_eps);
  out.logits = zeros(J, s.vocab_size);
  for (std::size_t j = 0; j < J; ++j)
    for (std::size_t t = 0; t < s.vocab_size; ++t) {
      LD acc = 0;
      for (std::size_t c = 0; c < d; ++c) acc += out.final_hidden[j][c] * w.tok_embed(t, c);
      out.logits[j][t] = acc;
    }
  return out;
}

// MPS via an explicit d x d projector onto the prior direction U u:
// h~ = h - alpha * <z,u> * (U u), with alpha = lambda * max(0, c).
inline std::vector<LD> dense_suppress(const std::vector<LD>& h, const mdlab::prior::PriorSubspace& sub, LD lambda) {
  const std::size_t d = sub.d(), k = sub.k();
  std::vector<LD> dir(d, 0), z(k, 0);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t c = 0; c < k; ++c) {
      dir[i] += LD(sub.basis(i, c)) * LD(sub.prior_dir[c]);
      z[c] += LD(sub.basis(i, c)) * (h[i] - LD(sub.mu[i]));
    }
  LD nz = 0, zu = 0;
  for (std::size_t c = 0; c < k; ++c) {
    nz += z[c] * z[c];
    zu += z[c] * LD(sub.prior_dir[c]);
  }
  nz = std::sqrt(nz);
  if (nz < 1e-12L) return h;
  const LD alpha = lambda * std::max(LD(0), zu / nz);
  // projector P = dir dir^T applied to U z: P U z = dir * <dir, U z> = dir * <z, u>
  Mat P = zeros(d, d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) P[i][j] = dir[i] * dir[j];
  std::vector<LD> uz(d, 0);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t c = 0; c < k; ++c) uz[i] += LD(sub.basis(i, c)) * z[c];
  std::vector<LD> out = h;
  for (std::size_t i = 0; i < d; ++i) {
    LD pi = 0;
    for (std::size_t j = 0; j < d; ++j) pi += P[i][j] * uz[j];
    out[i] -= alpha * pi;
  }
  return out;
}

}  // namespace oracle
