#include "sardiff/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <unordered_set>

#include "sardiff/threading.hpp"

namespace sardiff::ag {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

thread_local bool g_grad_enabled = true;

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a->value.same_shape(b->value))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a->value.shape_str() +
                                " vs " + b->value.shape_str());
}

Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  bool needs = false;
  if (g_grad_enabled)
    for (const auto& p : parents) needs = needs || p->requires_grad;
  node->requires_grad = needs;
  if (needs) {
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward);
  }
  return node;
}

void accumulate(const Var& target, const Tensor& g) {
  if (!target->requires_grad) return;
  Tensor& dst = target->ensure_grad();
  float* d = dst.data();
  const float* s = g.data();
  for (std::int64_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

}  // namespace

Tensor& Node::ensure_grad() {
  if (!grad.defined()) grad = Tensor::zeros(value.shape());
  return grad;
}

Var leaf(Tensor value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  return node;
}

Var constant(Tensor value) { return leaf(std::move(value), false); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

void backward(const Var& root) {
  // Iterative post-order DFS.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* parent = node->parents[idx++].get();
      if (parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->ensure_grad().fill(1.0f);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward_fn && node->grad.defined()) node->backward_fn(*node);
  }
}

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tensor out(a->value.shape());
  const float* pa = a->value.data();
  const float* pb = b->value.data();
  float* po = out.data();
  for (std::int64_t i = 0; i < out.size(); ++i) po[i] = pa[i] + pb[i];
  return make_node(std::move(out), {a, b}, [a, b](Node& n) {
    accumulate(a, n.grad);
    accumulate(b, n.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tensor out(a->value.shape());
  const float* pa = a->value.data();
  const float* pb = b->value.data();
  float* po = out.data();
  for (std::int64_t i = 0; i < out.size(); ++i) po[i] = pa[i] - pb[i];
  return make_node(std::move(out), {a, b}, [a, b](Node& n) {
    accumulate(a, n.grad);
    if (b->requires_grad) {
      Tensor& dst = b->ensure_grad();
      const float* g = n.grad.data();
      float* d = dst.data();
      for (std::int64_t i = 0; i < dst.size(); ++i) d[i] -= g[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Tensor out(a->value.shape());
  const float* pa = a->value.data();
  const float* pb = b->value.data();
  float* po = out.data();
  for (std::int64_t i = 0; i < out.size(); ++i) po[i] = pa[i] * pb[i];
  return make_node(std::move(out), {a, b}, [a, b](Node& n) {
    const float* g = n.grad.data();
    if (a->requires_grad) {
      float* d = a->ensure_grad().data();
      const float* pb = b->value.data();
      for (std::int64_t i = 0; i < n.grad.size(); ++i) d[i] += g[i] * pb[i];
    }
    if (b->requires_grad) {
      float* d = b->ensure_grad().data();
      const float* pa = a->value.data();
      for (std::int64_t i = 0; i < n.grad.size(); ++i) d[i] += g[i] * pa[i];
    }
  });
}

Var add_scalar(const Var& a, float s) {
  Tensor out(a->value.shape());
  const float* pa = a->value.data();
  float* po = out.data();
  for (std::int64_t i = 0; i < out.size(); ++i) po[i] = pa[i] + s;
  return make_node(std::move(out), {a}, [a](Node& n) { accumulate(a, n.grad); });
}

Var mul_scalar(const Var& a, float s) {
  Tensor out(a->value.shape());
  const float* pa = a->value.data();
  float* po = out.data();
  for (std::int64_t i = 0; i < out.size(); ++i) po[i] = pa[i] * s;
  return make_node(std::move(out), {a}, [a, s](Node& n) {
    if (!a->requires_grad) return;
    float* d = a->ensure_grad().data();
    const float* g = n.grad.data();
    for (std::int64_t i = 0; i < n.grad.size(); ++i) d[i] += g[i] * s;
  });
}

Var silu(const Var& x) {
  Tensor out(x->value.shape());
  const float* px = x->value.data();
  float* po = out.data();
  for (std::int64_t i = 0; i < out.size(); ++i) {
    const float s = 1.0f / (1.0f + std::exp(-px[i]));
    po[i] = px[i] * s;
  }
  return make_node(std::move(out), {x}, [x](Node& n) {
    if (!x->requires_grad) return;
    float* d = x->ensure_grad().data();
    const float* g = n.grad.data();
    const float* px = x->value.data();
    for (std::int64_t i = 0; i < n.grad.size(); ++i) {
      const float s = 1.0f / (1.0f + std::exp(-px[i]));
      d[i] += g[i] * s * (1.0f + px[i] * (1.0f - s));
    }
  });
}

Var sigmoid(const Var& x) {
  Tensor out(x->value.shape());
  const float* px = x->value.data();
  float* po = out.data();
  for (std::int64_t i = 0; i < out.size(); ++i) po[i] = 1.0f / (1.0f + std::exp(-px[i]));
  Tensor y = out;
  return make_node(std::move(out), {x}, [x, y](Node& n) {
    if (!x->requires_grad) return;
    float* d = x->ensure_grad().data();
    const float* g = n.grad.data();
    const float* py = y.data();
    for (std::int64_t i = 0; i < n.grad.size(); ++i) d[i] += g[i] * py[i] * (1.0f - py[i]);
  });
}

Var clamp(const Var& x, float lo, float hi) {
  Tensor out(x->value.shape());
  const float* px = x->value.data();
  float* po = out.data();
  for (std::int64_t i = 0; i < out.size(); ++i) po[i] = std::min(hi, std::max(lo, px[i]));
  return make_node(std::move(out), {x}, [x, lo, hi](Node& n) {
    if (!x->requires_grad) return;
    float* d = x->ensure_grad().data();
    const float* g = n.grad.data();
    const float* px = x->value.data();
    for (std::int64_t i = 0; i < n.grad.size(); ++i)
      if (px[i] >= lo && px[i] <= hi) d[i] += g[i];
  });
}

// ---------------------------------------------------------------------- shape

Var reshape(const Var& x, std::vector<int> shape) {
  Tensor out = x->value.reshaped(shape);
  return make_node(std::move(out), {x}, [x](Node& n) {
    if (!x->requires_grad) return;
    accumulate(x, n.grad.reshaped(x->value.shape()));
  });
}

Var concat_channels(const Var& a, const Var& b) {
  const auto& sa = a->value.shape();
  const auto& sb = b->value.shape();
  if (sa.size() != 4 || sb.size() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3])
    throw std::invalid_argument("concat_channels: incompatible shapes");
  const int N = sa[0], Ca = sa[1], Cb = sb[1], H = sa[2], W = sa[3];
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  Tensor out({N, Ca + Cb, H, W});
  for (int n = 0; n < N; ++n) {
    std::memcpy(out.data() + (static_cast<std::int64_t>(n) * (Ca + Cb)) * plane,
                a->value.data() + static_cast<std::int64_t>(n) * Ca * plane,
                static_cast<size_t>(Ca * plane) * sizeof(float));
    std::memcpy(out.data() + (static_cast<std::int64_t>(n) * (Ca + Cb) + Ca) * plane,
                b->value.data() + static_cast<std::int64_t>(n) * Cb * plane,
                static_cast<size_t>(Cb * plane) * sizeof(float));
  }
  return make_node(std::move(out), {a, b}, [a, b, N, Ca, Cb, plane](Node& n) {
    const float* g = n.grad.data();
    if (a->requires_grad) {
      float* d = a->ensure_grad().data();
      for (int i = 0; i < N; ++i) {
        const float* src = g + (static_cast<std::int64_t>(i) * (Ca + Cb)) * plane;
        float* dst = d + static_cast<std::int64_t>(i) * Ca * plane;
        for (std::int64_t k = 0; k < Ca * plane; ++k) dst[k] += src[k];
      }
    }
    if (b->requires_grad) {
      float* d = b->ensure_grad().data();
      for (int i = 0; i < N; ++i) {
        const float* src = g + (static_cast<std::int64_t>(i) * (Ca + Cb) + Ca) * plane;
        float* dst = d + static_cast<std::int64_t>(i) * Cb * plane;
        for (std::int64_t k = 0; k < Cb * plane; ++k) dst[k] += src[k];
      }
    }
  });
}

Var slice_channels(const Var& x, int c0, int c1) {
  const auto& s = x->value.shape();
  if (s.size() != 4 || c0 < 0 || c1 > s[1] || c0 >= c1)
    throw std::invalid_argument("slice_channels: bad range");
  const int N = s[0], C = s[1], H = s[2], W = s[3], Cs = c1 - c0;
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  Tensor out({N, Cs, H, W});
  for (int n = 0; n < N; ++n)
    std::memcpy(out.data() + static_cast<std::int64_t>(n) * Cs * plane,
                x->value.data() + (static_cast<std::int64_t>(n) * C + c0) * plane,
                static_cast<size_t>(Cs * plane) * sizeof(float));
  return make_node(std::move(out), {x}, [x, N, C, c0, Cs, plane](Node& n) {
    if (!x->requires_grad) return;
    float* d = x->ensure_grad().data();
    const float* g = n.grad.data();
    for (int i = 0; i < N; ++i) {
      float* dst = d + (static_cast<std::int64_t>(i) * C + c0) * plane;
      const float* src = g + static_cast<std::int64_t>(i) * Cs * plane;
      for (std::int64_t k = 0; k < Cs * plane; ++k) dst[k] += src[k];
    }
  });
}

Var upsample_nearest2x(const Var& x) {
  const auto& s = x->value.shape();
  if (s.size() != 4) throw std::invalid_argument("upsample_nearest2x: expects NCHW");
  const int N = s[0], C = s[1], H = s[2], W = s[3];
  Tensor out({N, C, 2 * H, 2 * W});
  const float* px = x->value.data();
  float* po = out.data();
  for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(N) * C; ++nc) {
    const float* src = px + nc * H * W;
    float* dst = po + nc * 4 * H * W;
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) {
        const float v = src[h * W + w];
        float* d0 = dst + (2 * h) * 2 * W + 2 * w;
        d0[0] = v;
        d0[1] = v;
        d0[2 * W] = v;
        d0[2 * W + 1] = v;
      }
  }
  return make_node(std::move(out), {x}, [x, N, C, H, W](Node& n) {
    if (!x->requires_grad) return;
    float* d = x->ensure_grad().data();
    const float* g = n.grad.data();
    for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(N) * C; ++nc) {
      float* dst = d + nc * H * W;
      const float* src = g + nc * 4 * H * W;
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) {
          const float* s0 = src + (2 * h) * 2 * W + 2 * w;
          dst[h * W + w] += s0[0] + s0[1] + s0[2 * W] + s0[2 * W + 1];
        }
    }
  });
}

// ------------------------------------------------------------- linear algebra

Var matmul(const Var& a, const Var& b) {
  const auto& sa = a->value.shape();
  const auto& sb = b->value.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
    throw std::invalid_argument("matmul: incompatible shapes");
  const int M = sa[0], K = sa[1], N = sb[1];
  Tensor out({M, N});
  CMapMat ma(a->value.data(), M, K);
  CMapMat mb(b->value.data(), K, N);
  MapMat mo(out.data(), M, N);
  mo.noalias() = ma * mb;
  return make_node(std::move(out), {a, b}, [a, b, M, K, N](Node& n) {
    CMapMat g(n.grad.data(), M, N);
    if (a->requires_grad) {
      MapMat da(a->ensure_grad().data(), M, K);
      CMapMat mb(b->value.data(), K, N);
      da.noalias() += g * mb.transpose();
    }
    if (b->requires_grad) {
      MapMat db(b->ensure_grad().data(), K, N);
      CMapMat ma(a->value.data(), M, K);
      db.noalias() += ma.transpose() * g;
    }
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  const auto& sx = x->value.shape();
  const auto& sw = w->value.shape();
  if (sx.size() != 2 || sw.size() != 2 || sx[1] != sw[0])
    throw std::invalid_argument("linear: incompatible shapes");
  const int N = sx[0], D = sx[1], M = sw[1];
  Tensor out({N, M});
  CMapMat mx(x->value.data(), N, D);
  CMapMat mw(w->value.data(), D, M);
  MapMat mo(out.data(), N, M);
  mo.noalias() = mx * mw;
  if (b) {
    if (b->value.size() != M) throw std::invalid_argument("linear: bias size mismatch");
    Eigen::Map<const Eigen::RowVectorXf> vb(b->value.data(), M);
    mo.rowwise() += vb;
  }
  std::vector<Var> parents = {x, w};
  if (b) parents.push_back(b);
  return make_node(std::move(out), std::move(parents), [x, w, b, N, D, M](Node& n) {
    CMapMat g(n.grad.data(), N, M);
    if (x->requires_grad) {
      MapMat dx(x->ensure_grad().data(), N, D);
      CMapMat mw(w->value.data(), D, M);
      dx.noalias() += g * mw.transpose();
    }
    if (w->requires_grad) {
      MapMat dw(w->ensure_grad().data(), D, M);
      CMapMat mx(x->value.data(), N, D);
      dw.noalias() += mx.transpose() * g;
    }
    if (b && b->requires_grad) {
      Eigen::Map<Eigen::RowVectorXf> db(b->ensure_grad().data(), M);
      db += g.colwise().sum();
    }
  });
}

Var bmm(const Var& a, const Var& b, bool trans_a, bool trans_b) {
  const auto& sa = a->value.shape();
  const auto& sb = b->value.shape();
  if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0])
    throw std::invalid_argument("bmm: expects [B,*,*] pairs");
  const int B = sa[0];
  const int M = trans_a ? sa[2] : sa[1];
  const int K = trans_a ? sa[1] : sa[2];
  const int Kb = trans_b ? sb[2] : sb[1];
  const int N = trans_b ? sb[1] : sb[2];
  if (K != Kb) throw std::invalid_argument("bmm: inner dimension mismatch");
  Tensor out({B, M, N});
  const std::int64_t stride_a = static_cast<std::int64_t>(sa[1]) * sa[2];
  const std::int64_t stride_b = static_cast<std::int64_t>(sb[1]) * sb[2];
  const std::int64_t stride_o = static_cast<std::int64_t>(M) * N;
  const Tensor av = a->value, bv = b->value;
  parallel_for(B, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t i = lo; i < hi; ++i) {
      CMapMat ma(av.data() + i * stride_a, sa[1], sa[2]);
      CMapMat mb(bv.data() + i * stride_b, sb[1], sb[2]);
      MapMat mo(out.data() + i * stride_o, M, N);
      if (!trans_a && !trans_b)
        mo.noalias() = ma * mb;
      else if (trans_a && !trans_b)
        mo.noalias() = ma.transpose() * mb;
      else if (!trans_a && trans_b)
        mo.noalias() = ma * mb.transpose();
      else
        mo.noalias() = ma.transpose() * mb.transpose();
    }
  });
  auto sa_c = sa;
  auto sb_c = sb;
  return make_node(std::move(out), {a, b},
                   [a, b, trans_a, trans_b, B, M, N, sa_c, sb_c, stride_a, stride_b,
                    stride_o](Node& n) {
    Tensor da_buf, db_buf;
    if (a->requires_grad) da_buf = a->ensure_grad();
    if (b->requires_grad) db_buf = b->ensure_grad();
    const Tensor av = a->value, bv = b->value, gt = n.grad;
    parallel_for(B, [&](std::int64_t lo, std::int64_t hi) {
      for (std::int64_t i = lo; i < hi; ++i) {
        CMapMat g(gt.data() + i * stride_o, M, N);
        CMapMat ma(av.data() + i * stride_a, sa_c[1], sa_c[2]);
        CMapMat mb(bv.data() + i * stride_b, sb_c[1], sb_c[2]);
        if (a->requires_grad) {
          MapMat da(da_buf.data() + i * stride_a, sa_c[1], sa_c[2]);
          // dA = dC op(B)^T (transposed per flags)
          if (!trans_a && !trans_b)
            da.noalias() += g * mb.transpose();
          else if (!trans_a && trans_b)
            da.noalias() += g * mb;
          else if (trans_a && !trans_b)
            da.noalias() += mb * g.transpose();
          else
            da.noalias() += mb.transpose() * g.transpose();
        }
        if (b->requires_grad) {
          MapMat db(db_buf.data() + i * stride_b, sb_c[1], sb_c[2]);
          if (!trans_a && !trans_b)
            db.noalias() += ma.transpose() * g;
          else if (trans_a && !trans_b)
            db.noalias() += ma * g;
          else if (!trans_a && trans_b)
            db.noalias() += g.transpose() * ma;
          else
            db.noalias() += g.transpose() * ma.transpose();
        }
      }
    });
  });
}

// ------------------------------------------------- convolution / normalization

namespace {

struct ConvDims {
  int N, C, H, W, O, KH, KW, OH, OW;
  int stride, pad;
  std::int64_t ckk() const { return static_cast<std::int64_t>(C) * KH * KW; }
  std::int64_t npos() const { return static_cast<std::int64_t>(OH) * OW; }
};

void im2col(const float* img, const ConvDims& d, float* cols) {
  // cols is [C*KH*KW, OH*OW] row-major.
  const std::int64_t P = d.npos();
  for (int c = 0; c < d.C; ++c) {
    const float* plane = img + static_cast<std::int64_t>(c) * d.H * d.W;
    for (int ki = 0; ki < d.KH; ++ki)
      for (int kj = 0; kj < d.KW; ++kj) {
        float* row = cols + ((static_cast<std::int64_t>(c) * d.KH + ki) * d.KW + kj) * P;
        for (int oy = 0; oy < d.OH; ++oy) {
          const int iy = oy * d.stride + ki - d.pad;
          float* out_row = row + static_cast<std::int64_t>(oy) * d.OW;
          if (iy < 0 || iy >= d.H) {
            std::memset(out_row, 0, sizeof(float) * d.OW);
            continue;
          }
          const float* in_row = plane + static_cast<std::int64_t>(iy) * d.W;
          if (d.stride == 1) {
            const int ox_lo = std::max(0, d.pad - kj);
            const int ox_hi = std::min(d.OW, d.W + d.pad - kj);
            if (ox_lo > 0) std::memset(out_row, 0, sizeof(float) * ox_lo);
            if (ox_hi > ox_lo)
              std::memcpy(out_row + ox_lo, in_row + ox_lo + kj - d.pad,
                          sizeof(float) * (ox_hi - ox_lo));
            if (ox_hi < d.OW) std::memset(out_row + ox_hi, 0, sizeof(float) * (d.OW - ox_hi));
          } else {
            for (int ox = 0; ox < d.OW; ++ox) {
              const int ix = ox * d.stride + kj - d.pad;
              out_row[ox] = (ix >= 0 && ix < d.W) ? in_row[ix] : 0.0f;
            }
          }
        }
      }
  }
}

void col2im_accumulate(const float* cols, const ConvDims& d, float* img) {
  const std::int64_t P = d.npos();
  for (int c = 0; c < d.C; ++c) {
    float* plane = img + static_cast<std::int64_t>(c) * d.H * d.W;
    for (int ki = 0; ki < d.KH; ++ki)
      for (int kj = 0; kj < d.KW; ++kj) {
        const float* row = cols + ((static_cast<std::int64_t>(c) * d.KH + ki) * d.KW + kj) * P;
        for (int oy = 0; oy < d.OH; ++oy) {
          const int iy = oy * d.stride + ki - d.pad;
          if (iy < 0 || iy >= d.H) continue;
          float* in_row = plane + static_cast<std::int64_t>(iy) * d.W;
          const float* src = row + static_cast<std::int64_t>(oy) * d.OW;
          for (int ox = 0; ox < d.OW; ++ox) {
            const int ix = ox * d.stride + kj - d.pad;
            if (ix >= 0 && ix < d.W) in_row[ix] += src[ox];
          }
        }
      }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  const auto& sx = x->value.shape();
  const auto& sw = w->value.shape();
  if (sx.size() != 4 || sw.size() != 4) throw std::invalid_argument("conv2d: expects NCHW");
  if (sx[1] != sw[1]) throw std::invalid_argument("conv2d: channel mismatch");
  if (stride < 1) throw std::invalid_argument("conv2d: bad stride");
  ConvDims d;
  d.N = sx[0]; d.C = sx[1]; d.H = sx[2]; d.W = sx[3];
  d.O = sw[0]; d.KH = sw[2]; d.KW = sw[3];
  d.stride = stride; d.pad = pad;
  d.OH = (d.H + 2 * pad - d.KH) / stride + 1;
  d.OW = (d.W + 2 * pad - d.KW) / stride + 1;
  if (d.OH < 1 || d.OW < 1) throw std::invalid_argument("conv2d: output would be empty");

  Tensor out({d.N, d.O, d.OH, d.OW});
  const std::int64_t ckk = d.ckk(), P = d.npos();
  const Tensor xv = x->value, wv = w->value;
  const bool has_bias = static_cast<bool>(b);
  const Tensor bv = has_bias ? b->value : Tensor();
  parallel_for(d.N, [&](std::int64_t lo, std::int64_t hi) {
    std::vector<float> cols(static_cast<size_t>(ckk * P));
    for (std::int64_t n = lo; n < hi; ++n) {
      im2col(xv.data() + n * d.C * d.H * d.W, d, cols.data());
      CMapMat mw(wv.data(), d.O, ckk);
      CMapMat mc(cols.data(), ckk, P);
      MapMat mo(out.data() + n * d.O * P, d.O, P);
      mo.noalias() = mw * mc;
      if (has_bias) {
        for (int o = 0; o < d.O; ++o)
          mo.row(o).array() += bv.data()[o];
      }
    }
  });

  std::vector<Var> parents = {x, w};
  if (b) parents.push_back(b);
  return make_node(std::move(out), std::move(parents), [x, w, b, d, ckk, P](Node& n) {
    const Tensor xv = x->value, wv = w->value, gt = n.grad;
    // Per-image weight/bias partials, reduced in fixed order afterwards.
    Tensor dw_part, db_part;
    if (w->requires_grad) dw_part = Tensor::zeros({d.N, static_cast<int>(ckk) * d.O});
    if (b && b->requires_grad) db_part = Tensor::zeros({d.N, d.O});
    Tensor dx_buf;
    if (x->requires_grad) dx_buf = x->ensure_grad();
    parallel_for(d.N, [&](std::int64_t lo, std::int64_t hi) {
      std::vector<float> cols(static_cast<size_t>(ckk * P));
      std::vector<float> dcols(static_cast<size_t>(ckk * P));
      for (std::int64_t i = lo; i < hi; ++i) {
        CMapMat g(gt.data() + i * d.O * P, d.O, P);
        if (w->requires_grad) im2col(xv.data() + i * d.C * d.H * d.W, d, cols.data());
        if (w->requires_grad) {
          MapMat dw(dw_part.data() + i * ckk * d.O, d.O, ckk);
          CMapMat mc(cols.data(), ckk, P);
          dw.noalias() = g * mc.transpose();
        }
        if (b && b->requires_grad) {
          for (int o = 0; o < d.O; ++o)
            db_part.data()[i * d.O + o] = static_cast<float>(g.row(o).sum());
        }
        if (x->requires_grad) {
          CMapMat mw(wv.data(), d.O, ckk);
          MapMat dc(dcols.data(), ckk, P);
          dc.noalias() = mw.transpose() * g;
          col2im_accumulate(dcols.data(), d, dx_buf.data() + i * d.C * d.H * d.W);
        }
      }
    });
    if (w->requires_grad) {
      float* dw = w->ensure_grad().data();
      for (int i = 0; i < d.N; ++i) {
        const float* src = dw_part.data() + static_cast<std::int64_t>(i) * ckk * d.O;
        for (std::int64_t k = 0; k < ckk * d.O; ++k) dw[k] += src[k];
      }
    }
    if (b && b->requires_grad) {
      float* db = b->ensure_grad().data();
      for (int i = 0; i < d.N; ++i)
        for (int o = 0; o < d.O; ++o) db[o] += db_part.data()[i * d.O + o];
    }
  });
}

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, float eps) {
  const auto& s = x->value.shape();
  if (s.size() != 4) throw std::invalid_argument("group_norm: expects NCHW");
  const int N = s[0], C = s[1], H = s[2], W = s[3];
  if (groups < 1 || C % groups != 0)
    throw std::invalid_argument("group_norm: channels not divisible by groups");
  if (gamma->value.size() != C || beta->value.size() != C)
    throw std::invalid_argument("group_norm: affine size mismatch");
  const int cpg = C / groups;
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  const std::int64_t gsize = cpg * plane;

  Tensor out({N, C, H, W});
  Tensor mean_t({N, groups}), inv_std_t({N, groups});
  const Tensor xv = x->value, gv = gamma->value, bv = beta->value;
  parallel_for(static_cast<std::int64_t>(N) * groups, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t ng = lo; ng < hi; ++ng) {
      const std::int64_t n = ng / groups, g = ng % groups;
      const float* src = xv.data() + (n * C + g * cpg) * plane;
      double sum = 0.0, sq = 0.0;
      for (std::int64_t k = 0; k < gsize; ++k) {
        sum += src[k];
        sq += static_cast<double>(src[k]) * src[k];
      }
      const double mu = sum / static_cast<double>(gsize);
      const double var = std::max(0.0, sq / static_cast<double>(gsize) - mu * mu);
      const double inv = 1.0 / std::sqrt(var + eps);
      mean_t.data()[ng] = static_cast<float>(mu);
      inv_std_t.data()[ng] = static_cast<float>(inv);
      float* dst = out.data() + (n * C + g * cpg) * plane;
      for (int c = 0; c < cpg; ++c) {
        const float ga = gv.data()[g * cpg + c];
        const float be = bv.data()[g * cpg + c];
        const float* sc = src + c * plane;
        float* dc = dst + c * plane;
        for (std::int64_t k = 0; k < plane; ++k)
          dc[k] = static_cast<float>((sc[k] - mu) * inv) * ga + be;
      }
    }
  });

  return make_node(std::move(out), {x, gamma, beta},
                   [x, gamma, beta, N, C, groups, cpg, plane, gsize, mean_t, inv_std_t](Node& n) {
    const Tensor xv = x->value, gv = gamma->value, gt = n.grad;
    Tensor dgamma_part, dbeta_part;
    const bool want_affine = gamma->requires_grad || beta->requires_grad;
    if (want_affine) {
      dgamma_part = Tensor::zeros({N, C});
      dbeta_part = Tensor::zeros({N, C});
    }
    Tensor dx_buf;
    if (x->requires_grad) dx_buf = x->ensure_grad();
    parallel_for(static_cast<std::int64_t>(N) * groups, [&](std::int64_t lo, std::int64_t hi) {
      for (std::int64_t ng = lo; ng < hi; ++ng) {
        const std::int64_t i = ng / groups, g = ng % groups;
        const float mu = mean_t.data()[ng];
        const float inv = inv_std_t.data()[ng];
        const float* src = xv.data() + (i * C + g * cpg) * plane;
        const float* gr = gt.data() + (i * C + g * cpg) * plane;
        // Accumulate sums for the normalization backward.
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (int c = 0; c < cpg; ++c) {
          const float ga = gv.data()[g * cpg + c];
          const float* sc = src + c * plane;
          const float* gc = gr + c * plane;
          double dg = 0.0, db = 0.0;
          for (std::int64_t k = 0; k < plane; ++k) {
            const float xhat = (sc[k] - mu) * inv;
            const float dxhat = gc[k] * ga;
            sum_dxhat += dxhat;
            sum_dxhat_xhat += static_cast<double>(dxhat) * xhat;
            dg += static_cast<double>(gc[k]) * xhat;
            db += gc[k];
          }
          if (dgamma_part.defined()) {
            dgamma_part.data()[i * C + g * cpg + c] = static_cast<float>(dg);
            dbeta_part.data()[i * C + g * cpg + c] = static_cast<float>(db);
          }
        }
        if (x->requires_grad) {
          float* dx = dx_buf.data() + (i * C + g * cpg) * plane;
          const double inv_m = 1.0 / static_cast<double>(gsize);
          for (int c = 0; c < cpg; ++c) {
            const float ga = gv.data()[g * cpg + c];
            const float* sc = src + c * plane;
            const float* gc = gr + c * plane;
            float* dc = dx + c * plane;
            for (std::int64_t k = 0; k < plane; ++k) {
              const double xhat = (sc[k] - mu) * inv;
              const double dxhat = static_cast<double>(gc[k]) * ga;
              dc[k] += static_cast<float>(
                  inv * (dxhat - inv_m * sum_dxhat - xhat * inv_m * sum_dxhat_xhat));
            }
          }
        }
      }
    });
    if (want_affine) {
      float* dga = gamma->requires_grad ? gamma->ensure_grad().data() : nullptr;
      float* dbe = beta->requires_grad ? beta->ensure_grad().data() : nullptr;
      for (int i = 0; i < N; ++i)
        for (int c = 0; c < C; ++c) {
          if (dga) dga[c] += dgamma_part.data()[i * C + c];
          if (dbe) dbe[c] += dbeta_part.data()[i * C + c];
        }
    }
  });
}

// ---------------------------------------------------------------- conditioning

Var film(const Var& x, const Var& gamma, const Var& beta) {
  const auto& s = x->value.shape();
  if (s.size() != 4) throw std::invalid_argument("film: expects NCHW");
  const int N = s[0], C = s[1];
  const std::int64_t plane = static_cast<std::int64_t>(s[2]) * s[3];
  if (gamma->value.ndim() != 2 || gamma->value.dim(0) != N || gamma->value.dim(1) != C ||
      !gamma->value.same_shape(beta->value))
    throw std::invalid_argument("film: gamma/beta must be [N,C]");
  Tensor out({s[0], s[1], s[2], s[3]});
  const float* px = x->value.data();
  const float* pg = gamma->value.data();
  const float* pb = beta->value.data();
  float* po = out.data();
  for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(N) * C; ++nc) {
    const float g = pg[nc], b = pb[nc];
    const float* sx = px + nc * plane;
    float* so = po + nc * plane;
    for (std::int64_t k = 0; k < plane; ++k) so[k] = g * sx[k] + b;
  }
  return make_node(std::move(out), {x, gamma, beta}, [x, gamma, beta, N, C, plane](Node& n) {
    const float* g = n.grad.data();
    const float* px = x->value.data();
    const float* pg = gamma->value.data();
    if (x->requires_grad) {
      float* dx = x->ensure_grad().data();
      for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(N) * C; ++nc) {
        const float ga = pg[nc];
        const float* sg = g + nc * plane;
        float* sd = dx + nc * plane;
        for (std::int64_t k = 0; k < plane; ++k) sd[k] += ga * sg[k];
      }
    }
    if (gamma->requires_grad) {
      float* dg = gamma->ensure_grad().data();
      for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(N) * C; ++nc) {
        const float* sg = g + nc * plane;
        const float* sx = px + nc * plane;
        double acc = 0.0;
        for (std::int64_t k = 0; k < plane; ++k) acc += static_cast<double>(sg[k]) * sx[k];
        dg[nc] += static_cast<float>(acc);
      }
    }
    if (beta->requires_grad) {
      float* db = beta->ensure_grad().data();
      for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(N) * C; ++nc) {
        const float* sg = g + nc * plane;
        double acc = 0.0;
        for (std::int64_t k = 0; k < plane; ++k) acc += sg[k];
        db[nc] += static_cast<float>(acc);
      }
    }
  });
}

Var add_channel(const Var& x, const Var& v) {
  const auto& s = x->value.shape();
  if (s.size() != 4) throw std::invalid_argument("add_channel: expects NCHW");
  const int N = s[0], C = s[1];
  const std::int64_t plane = static_cast<std::int64_t>(s[2]) * s[3];
  if (v->value.ndim() != 2 || v->value.dim(0) != N || v->value.dim(1) != C)
    throw std::invalid_argument("add_channel: v must be [N,C]");
  Tensor out({s[0], s[1], s[2], s[3]});
  const float* px = x->value.data();
  const float* pv = v->value.data();
  float* po = out.data();
  for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(N) * C; ++nc) {
    const float b = pv[nc];
    const float* sx = px + nc * plane;
    float* so = po + nc * plane;
    for (std::int64_t k = 0; k < plane; ++k) so[k] = sx[k] + b;
  }
  return make_node(std::move(out), {x, v}, [x, v, N, C, plane](Node& n) {
    const float* g = n.grad.data();
    if (x->requires_grad) accumulate(x, n.grad);
    if (v->requires_grad) {
      float* dv = v->ensure_grad().data();
      for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(N) * C; ++nc) {
        const float* sg = g + nc * plane;
        double acc = 0.0;
        for (std::int64_t k = 0; k < plane; ++k) acc += sg[k];
        dv[nc] += static_cast<float>(acc);
      }
    }
  });
}

Var embedding(const Var& table, const std::vector<int>& ids) {
  const auto& s = table->value.shape();
  if (s.size() != 2) throw std::invalid_argument("embedding: table must be [R,D]");
  const int R = s[0], D = s[1];
  const int N = static_cast<int>(ids.size());
  Tensor out({N, D});
  for (int i = 0; i < N; ++i) {
    if (ids[i] < 0 || ids[i] >= R) throw std::invalid_argument("embedding: id out of range");
    std::memcpy(out.data() + static_cast<std::int64_t>(i) * D,
                table->value.data() + static_cast<std::int64_t>(ids[i]) * D,
                sizeof(float) * D);
  }
  return make_node(std::move(out), {table}, [table, ids, D](Node& n) {
    if (!table->requires_grad) return;
    float* dt = table->ensure_grad().data();
    const float* g = n.grad.data();
    for (size_t i = 0; i < ids.size(); ++i) {
      float* row = dt + static_cast<std::int64_t>(ids[i]) * D;
      const float* src = g + static_cast<std::int64_t>(i) * D;
      for (int k = 0; k < D; ++k) row[k] += src[k];
    }
  });
}

// --------------------------------------------------------- reductions / losses

Var softmax_rows(const Var& x) {
  const auto& s = x->value.shape();
  if (s.empty()) throw std::invalid_argument("softmax_rows: scalar input");
  const int L = s.back();
  const std::int64_t rows = x->value.size() / L;
  Tensor out(s);
  const float* px = x->value.data();
  float* po = out.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const float* src = px + r * L;
    float* dst = po + r * L;
    float mx = src[0];
    for (int i = 1; i < L; ++i) mx = std::max(mx, src[i]);
    double denom = 0.0;
    for (int i = 0; i < L; ++i) {
      dst[i] = std::exp(src[i] - mx);
      denom += dst[i];
    }
    const float inv = static_cast<float>(1.0 / denom);
    for (int i = 0; i < L; ++i) dst[i] *= inv;
  }
  Tensor y = out;
  return make_node(std::move(out), {x}, [x, y, L, rows](Node& n) {
    if (!x->requires_grad) return;
    float* dx = x->ensure_grad().data();
    const float* g = n.grad.data();
    const float* py = y.data();
    for (std::int64_t r = 0; r < rows; ++r) {
      const float* yr = py + r * L;
      const float* gr = g + r * L;
      double dot = 0.0;
      for (int i = 0; i < L; ++i) dot += static_cast<double>(gr[i]) * yr[i];
      float* dr = dx + r * L;
      for (int i = 0; i < L; ++i) dr[i] += yr[i] * (gr[i] - static_cast<float>(dot));
    }
  });
}

Var mean_all(const Var& x) {
  Tensor out({1});
  out.data()[0] = static_cast<float>(x->value.mean());
  const double inv = 1.0 / static_cast<double>(x->value.size());
  return make_node(std::move(out), {x}, [x, inv](Node& n) {
    if (!x->requires_grad) return;
    const float g = n.grad.data()[0] * static_cast<float>(inv);
    float* dx = x->ensure_grad().data();
    for (std::int64_t i = 0; i < x->value.size(); ++i) dx[i] += g;
  });
}

Var sum_all(const Var& x) {
  Tensor out({1});
  out.data()[0] = static_cast<float>(x->value.sum());
  return make_node(std::move(out), {x}, [x](Node& n) {
    if (!x->requires_grad) return;
    const float g = n.grad.data()[0];
    float* dx = x->ensure_grad().data();
    for (std::int64_t i = 0; i < x->value.size(); ++i) dx[i] += g;
  });
}

Var avg_pool_all(const Var& x) {
  const auto& s = x->value.shape();
  if (s.size() != 4) throw std::invalid_argument("avg_pool_all: expects NCHW");
  const int N = s[0], C = s[1];
  const std::int64_t plane = static_cast<std::int64_t>(s[2]) * s[3];
  Tensor out({N, C});
  const float* px = x->value.data();
  for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(N) * C; ++nc) {
    const float* src = px + nc * plane;
    double acc = 0.0;
    for (std::int64_t k = 0; k < plane; ++k) acc += src[k];
    out.data()[nc] = static_cast<float>(acc / static_cast<double>(plane));
  }
  return make_node(std::move(out), {x}, [x, N, C, plane](Node& n) {
    if (!x->requires_grad) return;
    float* dx = x->ensure_grad().data();
    const float* g = n.grad.data();
    const float inv = 1.0f / static_cast<float>(plane);
    for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(N) * C; ++nc) {
      const float gv = g[nc] * inv;
      float* dst = dx + nc * plane;
      for (std::int64_t k = 0; k < plane; ++k) dst[k] += gv;
    }
  });
}

Var mse(const Var& a, const Var& b) {
  check_same_shape(a, b, "mse");
  const std::int64_t sz = a->value.size();
  const float* pa = a->value.data();
  const float* pb = b->value.data();
  double acc = 0.0;
  for (std::int64_t i = 0; i < sz; ++i) {
    const double dlt = static_cast<double>(pa[i]) - pb[i];
    acc += dlt * dlt;
  }
  Tensor out({1});
  out.data()[0] = static_cast<float>(acc / static_cast<double>(sz));
  return make_node(std::move(out), {a, b}, [a, b, sz](Node& n) {
    const float g = n.grad.data()[0] * 2.0f / static_cast<float>(sz);
    const float* pa = a->value.data();
    const float* pb = b->value.data();
    if (a->requires_grad) {
      float* d = a->ensure_grad().data();
      for (std::int64_t i = 0; i < sz; ++i) d[i] += g * (pa[i] - pb[i]);
    }
    if (b->requires_grad) {
      float* d = b->ensure_grad().data();
      for (std::int64_t i = 0; i < sz; ++i) d[i] -= g * (pa[i] - pb[i]);
    }
  });
}

Var nll_probs(const Var& probs, const std::vector<int>& ids, float floor) {
  const auto& s = probs->value.shape();
  if (s.size() != 2 || static_cast<size_t>(s[0]) != ids.size())
    throw std::invalid_argument("nll_probs: probs must be [N,K] with one id per row");
  const int N = s[0], K = s[1];
  double acc = 0.0;
  for (int i = 0; i < N; ++i) {
    if (ids[i] < 0 || ids[i] >= K) throw std::invalid_argument("nll_probs: id out of range");
    const float p = probs->value.data()[static_cast<std::int64_t>(i) * K + ids[i]];
    acc -= std::log(std::max(p, floor));
  }
  Tensor out({1});
  out.data()[0] = static_cast<float>(acc / N);
  return make_node(std::move(out), {probs}, [probs, ids, N, K, floor](Node& n) {
    if (!probs->requires_grad) return;
    const float g = n.grad.data()[0] / static_cast<float>(N);
    float* d = probs->ensure_grad().data();
    for (int i = 0; i < N; ++i) {
      const float p = probs->value.data()[static_cast<std::int64_t>(i) * K + ids[i]];
      if (p > floor) d[static_cast<std::int64_t>(i) * K + ids[i]] -= g / p;
    }
  });
}

Var cosine_color_loss(const Var& a, const Var& b, float eps) {
  check_same_shape(a, b, "cosine_color_loss");
  const auto& s = a->value.shape();
  if (s.size() != 4 || s[1] != 3)
    throw std::invalid_argument("cosine_color_loss: expects [N,3,H,W]");
  const int N = s[0], H = s[2], W = s[3];
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  const std::int64_t npix = static_cast<std::int64_t>(N) * plane;
  const float* pa = a->value.data();
  const float* pb = b->value.data();
  double acc = 0.0;
  for (int n = 0; n < N; ++n) {
    const float* an = pa + static_cast<std::int64_t>(n) * 3 * plane;
    const float* bn = pb + static_cast<std::int64_t>(n) * 3 * plane;
    for (std::int64_t k = 0; k < plane; ++k) {
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (int c = 0; c < 3; ++c) {
        const double av = an[c * plane + k], bv = bn[c * plane + k];
        dot += av * bv;
        na += av * av;
        nb += bv * bv;
      }
      acc += dot / (std::sqrt(na) * std::sqrt(nb) + eps);
    }
  }
  Tensor out({1});
  out.data()[0] = static_cast<float>(1.0 - acc / static_cast<double>(npix));
  return make_node(std::move(out), {a, b}, [a, b, N, plane, npix, eps](Node& n) {
    const float g0 = n.grad.data()[0];
    const double scale = -static_cast<double>(g0) / static_cast<double>(npix);
    const float* pa = a->value.data();
    const float* pb = b->value.data();
    float* da = a->requires_grad ? a->ensure_grad().data() : nullptr;
    float* db = b->requires_grad ? b->ensure_grad().data() : nullptr;
    for (int i = 0; i < N; ++i) {
      const float* an = pa + static_cast<std::int64_t>(i) * 3 * plane;
      const float* bn = pb + static_cast<std::int64_t>(i) * 3 * plane;
      for (std::int64_t k = 0; k < plane; ++k) {
        double dot = 0.0, na2 = 0.0, nb2 = 0.0;
        for (int c = 0; c < 3; ++c) {
          const double av = an[c * plane + k], bv = bn[c * plane + k];
          dot += av * bv;
          na2 += av * av;
          nb2 += bv * bv;
        }
        const double na = std::sqrt(na2), nb = std::sqrt(nb2);
        const double D = na * nb + eps;
        for (int c = 0; c < 3; ++c) {
          const double av = an[c * plane + k], bv = bn[c * plane + k];
          if (da) {
            double t = bv / D;
            if (na > 1e-20) t -= dot * nb * (av / na) / (D * D);
            da[(static_cast<std::int64_t>(i) * 3 + c) * plane + k] +=
                static_cast<float>(scale * t);
          }
          if (db) {
            double t = av / D;
            if (nb > 1e-20) t -= dot * na * (bv / nb) / (D * D);
            db[(static_cast<std::int64_t>(i) * 3 + c) * plane + k] +=
                static_cast<float>(scale * t);
          }
        }
      }
    }
  });
}

}  // namespace sardiff::ag
