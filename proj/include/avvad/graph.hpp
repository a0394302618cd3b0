// Copyright 2026 The avvad Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//
// Reverse-mode tape over Tensor<S>. Each operation appends an output node to
// an arena and registers a closure that pulls the output gradient and pushes
// it into the inputs. The tape is rebuilt for every forward pass; creation
// order is a valid topological order, so backward() just walks the closures
// in reverse.

#ifndef AVVAD_GRAPH_HPP_
#define AVVAD_GRAPH_HPP_

#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "avvad/random.hpp"
#include "avvad/tensor.hpp"

namespace avvad {

enum class Mode { kTrain, kEval };

// ---------------------------------------------------------------------------
// Small dense kernels, row-major. These carry nearly all of the training
// FLOPs, so the inner loops are kept contiguous for the vectorizer.
// ---------------------------------------------------------------------------

// C[M,N] += A[M,K] * B[K,N]
template <typename S>
inline void gemm_acc(const S* a, const S* b, S* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const S* arow = a + static_cast<std::size_t>(i) * k;
    S* crow = c + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const S av = arow[p];
      const S* brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[M,N] += A[L,M]^T * B[L,N]
template <typename S>
inline void gemm_tacc(const S* a, const S* b, S* c, int l, int m, int n) {
  for (int r = 0; r < l; ++r) {
    const S* arow = a + static_cast<std::size_t>(r) * m;
    const S* brow = b + static_cast<std::size_t>(r) * n;
    for (int i = 0; i < m; ++i) {
      const S av = arow[i];
      S* crow = c + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[M,N] += A[M,L] * B[N,L]^T
template <typename S>
inline void gemm_ntacc(const S* a, const S* b, S* c, int m, int l, int n) {
  for (int i = 0; i < m; ++i) {
    const S* arow = a + static_cast<std::size_t>(i) * l;
    S* crow = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const S* brow = b + static_cast<std::size_t>(j) * l;
      S acc = S(0);
      for (int p = 0; p < l; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

template <typename S>
inline S sigmoid_scalar(S x) {
  if (x >= S(0)) {
    return S(1) / (S(1) + std::exp(-x));
  }
  const S e = std::exp(x);
  return e / (S(1) + e);
}

// Per-channel batch normalization state. gamma/beta are learned; the running
// statistics feed eval-mode forward passes and are saved in checkpoints.
template <typename S>
struct BnParam {
  Tensor<S> gamma, beta;
  std::vector<S> run_mean, run_var;
  S momentum = S(0.9);
  S eps = S(1e-5);

  BnParam() = default;
  explicit BnParam(int channels)
      : gamma(std::vector<int>{channels}, S(1)),
        beta(std::vector<int>{channels}, S(0)),
        run_mean(static_cast<std::size_t>(channels), S(0)),
        run_var(static_cast<std::size_t>(channels), S(1)) {
    gamma.set_requires_grad(true);
    beta.set_requires_grad(true);
  }
};

template <typename S>
class Tape {
 public:
  // Constant leaf (inputs, targets); takes part in backward but its gradient
  // is discarded with the tape.
  Tensor<S>* input(Tensor<S> value) {
    arena_.push_back(std::move(value));
    Tensor<S>* node = &arena_.back();
    node->grad.assign(node->data.size(), S(0));
    return node;
  }

  // Parameter leaf: the value is copied in; backward() accumulates the node
  // gradient into the external tensor's grad buffer.
  Tensor<S>* param(Tensor<S>& external) {
    if (!external.requires_grad) external.set_requires_grad(true);
    Tensor<S>* node = input(external);
    links_.emplace_back(node, &external);
    return node;
  }

  // ---- elementwise ----

  Tensor<S>* add(Tensor<S>* a, Tensor<S>* b) {
    check_same_shape("add", a, b);
    Tensor<S>* y = fresh(a->shape);
    for (std::size_t i = 0; i < y->size(); ++i) y->data[i] = a->data[i] + b->data[i];
    steps_.push_back([a, b, y] {
      for (std::size_t i = 0; i < y->size(); ++i) {
        a->grad[i] += y->grad[i];
        b->grad[i] += y->grad[i];
      }
    });
    return y;
  }

  Tensor<S>* sub(Tensor<S>* a, Tensor<S>* b) {
    check_same_shape("sub", a, b);
    Tensor<S>* y = fresh(a->shape);
    for (std::size_t i = 0; i < y->size(); ++i) y->data[i] = a->data[i] - b->data[i];
    steps_.push_back([a, b, y] {
      for (std::size_t i = 0; i < y->size(); ++i) {
        a->grad[i] += y->grad[i];
        b->grad[i] -= y->grad[i];
      }
    });
    return y;
  }

  Tensor<S>* mul(Tensor<S>* a, Tensor<S>* b) {
    check_same_shape("mul", a, b);
    Tensor<S>* y = fresh(a->shape);
    for (std::size_t i = 0; i < y->size(); ++i) y->data[i] = a->data[i] * b->data[i];
    steps_.push_back([a, b, y] {
      for (std::size_t i = 0; i < y->size(); ++i) {
        a->grad[i] += y->grad[i] * b->data[i];
        b->grad[i] += y->grad[i] * a->data[i];
      }
    });
    return y;
  }

  // y = scale * x + shift
  Tensor<S>* affine(Tensor<S>* x, S scale, S shift) {
    Tensor<S>* y = fresh(x->shape);
    for (std::size_t i = 0; i < y->size(); ++i) y->data[i] = scale * x->data[i] + shift;
    steps_.push_back([x, y, scale] {
      for (std::size_t i = 0; i < y->size(); ++i) x->grad[i] += scale * y->grad[i];
    });
    return y;
  }

  Tensor<S>* sigmoid(Tensor<S>* x) {
    Tensor<S>* y = fresh(x->shape);
    for (std::size_t i = 0; i < y->size(); ++i) y->data[i] = sigmoid_scalar(x->data[i]);
    steps_.push_back([x, y] {
      for (std::size_t i = 0; i < y->size(); ++i) {
        x->grad[i] += y->grad[i] * y->data[i] * (S(1) - y->data[i]);
      }
    });
    return y;
  }

  Tensor<S>* tanh_(Tensor<S>* x) {
    Tensor<S>* y = fresh(x->shape);
    for (std::size_t i = 0; i < y->size(); ++i) y->data[i] = std::tanh(x->data[i]);
    steps_.push_back([x, y] {
      for (std::size_t i = 0; i < y->size(); ++i) {
        x->grad[i] += y->grad[i] * (S(1) - y->data[i] * y->data[i]);
      }
    });
    return y;
  }

  Tensor<S>* relu(Tensor<S>* x) {
    Tensor<S>* y = fresh(x->shape);
    for (std::size_t i = 0; i < y->size(); ++i) {
      const S v = x->data[i];
      y->data[i] = v > S(0) ? v : S(0);
      relu_hash_ = (relu_hash_ ^ static_cast<std::uint64_t>(v > S(0))) * 1099511628211ull;
      if (std::abs(v) < kink_eps_) ++relu_kinks_;
    }
    steps_.push_back([x, y] {
      for (std::size_t i = 0; i < y->size(); ++i) {
        if (x->data[i] > S(0)) x->grad[i] += y->grad[i];
      }
    });
    return y;
  }

  // ---- shape ----

  Tensor<S>* reshape(Tensor<S>* x, std::vector<int> shape) {
    Tensor<S>* y = fresh(std::move(shape));
    if (y->size() != x->size()) {
      fail("reshape " + shape_str(x->shape) + " -> " + shape_str(y->shape) +
           " changes element count");
    }
    y->data = x->data;
    steps_.push_back([x, y] {
      for (std::size_t i = 0; i < y->size(); ++i) x->grad[i] += y->grad[i];
    });
    return y;
  }

  // ---- dense ----

  // x[N,I] * w[I,O] -> y[N,O]
  Tensor<S>* matmul(Tensor<S>* x, Tensor<S>* w) {
    if (x->rank() != 2 || w->rank() != 2 || x->extent(1) != w->extent(0)) {
      fail("matmul shape mismatch: " + shape_str(x->shape) + " x " + shape_str(w->shape));
    }
    const int n = x->extent(0), in = x->extent(1), out = w->extent(1);
    Tensor<S>* y = fresh({n, out});
    gemm_acc(x->ptr(), w->ptr(), y->ptr(), n, in, out);
    steps_.push_back([x, w, y, n, in, out] {
      gemm_tacc(x->ptr(), y->gptr(), w->gptr(), n, in, out);
      gemm_ntacc(y->gptr(), w->ptr(), x->gptr(), n, out, in);
    });
    return y;
  }

  // x[N,O] + b[O] broadcast over rows
  Tensor<S>* add_rowvec(Tensor<S>* x, Tensor<S>* b) {
    if (x->rank() != 2 || b->rank() != 1 || x->extent(1) != b->extent(0)) {
      fail("add_rowvec shape mismatch: " + shape_str(x->shape) + " + " + shape_str(b->shape));
    }
    const int n = x->extent(0), out = x->extent(1);
    Tensor<S>* y = fresh(x->shape);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < out; ++j) (*y)(i, j) = (*x)(i, j) + (*b)(j);
    }
    steps_.push_back([x, b, y, n, out] {
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < out; ++j) {
          x->grad[static_cast<std::size_t>(i) * out + j] += y->grad[static_cast<std::size_t>(i) * out + j];
          b->grad[j] += y->grad[static_cast<std::size_t>(i) * out + j];
        }
      }
    });
    return y;
  }

  // ---- convolution ----

  // x[N,Ci,H,W] (*) k[Co,Ci,kh,kw] + b[Co], same padding, stride 1.
  Tensor<S>* conv2d(Tensor<S>* x, Tensor<S>* kern, Tensor<S>* bias) {
    if (x->rank() != 4 || kern->rank() != 4) {
      fail("conv2d expects 4-d input and kernels, got " + shape_str(x->shape) +
           " and " + shape_str(kern->shape));
    }
    if (x->extent(1) != kern->extent(1)) {
      fail("conv2d channel mismatch: input " + shape_str(x->shape) +
           " vs kernels " + shape_str(kern->shape));
    }
    const int n = x->extent(0), ci = x->extent(1), h = x->extent(2), w = x->extent(3);
    const int co = kern->extent(0), kh = kern->extent(2), kw = kern->extent(3);
    if (kh % 2 == 0 || kw % 2 == 0) fail("conv2d requires odd kernel extents");
    if (kh > h || kw > w) {
      fail("conv2d kernel " + shape_str(kern->shape) + " larger than input " + shape_str(x->shape));
    }
    if (bias->rank() != 1 || bias->extent(0) != co) {
      fail("conv2d bias shape " + shape_str(bias->shape) + " does not match " +
           std::to_string(co) + " output channels");
    }
    const int ph = kh / 2, pw = kw / 2;
    const int l = ci * kh * kw, hw = h * w;

    Tensor<S>* y = fresh({n, co, h, w});
    auto cols = std::make_shared<std::vector<std::vector<S>>>(
        static_cast<std::size_t>(n), std::vector<S>(static_cast<std::size_t>(l) * hw));

    for (int s = 0; s < n; ++s) {
      S* col = (*cols)[static_cast<std::size_t>(s)].data();
      im2col(x->ptr() + static_cast<std::size_t>(s) * ci * hw, col, ci, h, w, kh, kw, ph, pw);
      S* out = y->ptr() + static_cast<std::size_t>(s) * co * hw;
      gemm_acc(kern->ptr(), col, out, co, l, hw);
      for (int c = 0; c < co; ++c) {
        const S b = (*bias)(c);
        S* row = out + static_cast<std::size_t>(c) * hw;
        for (int i = 0; i < hw; ++i) row[i] += b;
      }
    }

    steps_.push_back([x, kern, bias, y, cols, n, ci, co, h, w, kh, kw, ph, pw, l, hw] {
      std::vector<S> gcol(static_cast<std::size_t>(l) * hw);
      for (int s = 0; s < n; ++s) {
        const S* gy = y->gptr() + static_cast<std::size_t>(s) * co * hw;
        const S* col = (*cols)[static_cast<std::size_t>(s)].data();
        for (int c = 0; c < co; ++c) {
          const S* row = gy + static_cast<std::size_t>(c) * hw;
          S acc = S(0);
          for (int i = 0; i < hw; ++i) acc += row[i];
          bias->grad[c] += acc;
        }
        gemm_ntacc(gy, col, kern->gptr(), co, hw, l);
        std::fill(gcol.begin(), gcol.end(), S(0));
        gemm_tacc(kern->ptr(), gy, gcol.data(), co, l, hw);
        col2im(gcol.data(), x->gptr() + static_cast<std::size_t>(s) * ci * hw,
               ci, h, w, kh, kw, ph, pw);
      }
    });
    return y;
  }

  // ---- pooling ----

  // 2x2 max pooling, stride 2, floor semantics on odd extents.
  Tensor<S>* maxpool2(Tensor<S>* x) {
    if (x->rank() != 4) fail("maxpool2 expects 4-d input, got " + shape_str(x->shape));
    const int n = x->extent(0), c = x->extent(1), h = x->extent(2), w = x->extent(3);
    const int h2 = h / 2, w2 = w / 2;
    if (h2 == 0 || w2 == 0) fail("maxpool2 input too small: " + shape_str(x->shape));
    Tensor<S>* y = fresh({n, c, h2, w2});
    auto idx = std::make_shared<std::vector<std::size_t>>(y->size());
    std::size_t o = 0;
    for (int s = 0; s < n; ++s) {
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t base = (static_cast<std::size_t>(s) * c + ch) * h * w;
        for (int i = 0; i < h2; ++i) {
          for (int j = 0; j < w2; ++j, ++o) {
            std::size_t best = base + static_cast<std::size_t>(2 * i) * w + 2 * j;
            S bv = x->data[best];
            const std::size_t cand[3] = {best + 1, best + w, best + w + 1};
            for (std::size_t cc : cand) {
              if (x->data[cc] > bv) {
                bv = x->data[cc];
                best = cc;
              }
            }
            y->data[o] = bv;
            (*idx)[o] = best;
          }
        }
      }
    }
    steps_.push_back([x, y, idx] {
      for (std::size_t i = 0; i < y->size(); ++i) x->grad[(*idx)[i]] += y->grad[i];
    });
    return y;
  }

  // ---- normalization / regularization ----

  Tensor<S>* batchnorm(Tensor<S>* x, BnParam<S>& bn, Mode mode, bool update_running = true) {
    if (x->rank() != 4) fail("batchnorm expects 4-d input, got " + shape_str(x->shape));
    const int n = x->extent(0), c = x->extent(1), h = x->extent(2), w = x->extent(3);
    if (c != bn.gamma.extent(0)) {
      fail("batchnorm channel mismatch: input " + shape_str(x->shape) + " vs " +
           std::to_string(bn.gamma.extent(0)) + " channels of state");
    }
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    const std::size_t m = static_cast<std::size_t>(n) * plane;
    Tensor<S>* y = fresh(x->shape);

    auto xhat = std::make_shared<std::vector<S>>(x->size());
    auto invstd = std::make_shared<std::vector<S>>(static_cast<std::size_t>(c));

    std::vector<S> mean(static_cast<std::size_t>(c)), var(static_cast<std::size_t>(c));
    if (mode == Mode::kTrain) {
      for (int ch = 0; ch < c; ++ch) {
        S sum = S(0), sq = S(0);
        for (int s = 0; s < n; ++s) {
          const S* p = x->ptr() + (static_cast<std::size_t>(s) * c + ch) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            sum += p[i];
            sq += p[i] * p[i];
          }
        }
        const S mu = sum / static_cast<S>(m);
        S v = sq / static_cast<S>(m) - mu * mu;
        if (v < S(0)) v = S(0);
        mean[ch] = mu;
        var[ch] = v;
        if (update_running) {
          bn.run_mean[ch] = bn.momentum * bn.run_mean[ch] + (S(1) - bn.momentum) * mu;
          bn.run_var[ch] = bn.momentum * bn.run_var[ch] + (S(1) - bn.momentum) * v;
        }
      }
    } else {
      for (int ch = 0; ch < c; ++ch) {
        mean[ch] = bn.run_mean[ch];
        var[ch] = bn.run_var[ch];
      }
    }

    for (int ch = 0; ch < c; ++ch) {
      (*invstd)[ch] = S(1) / std::sqrt(var[ch] + bn.eps);
    }
    for (int s = 0; s < n; ++s) {
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t base = (static_cast<std::size_t>(s) * c + ch) * plane;
        const S mu = mean[ch], is = (*invstd)[ch];
        const S g = bn.gamma(ch), b = bn.beta(ch);
        for (std::size_t i = 0; i < plane; ++i) {
          const S xh = (x->data[base + i] - mu) * is;
          (*xhat)[base + i] = xh;
          y->data[base + i] = g * xh + b;
        }
      }
    }

    BnParam<S>* state = &bn;
    const bool train = (mode == Mode::kTrain);
    steps_.push_back([x, y, state, xhat, invstd, n, c, plane, m, train] {
      for (int ch = 0; ch < c; ++ch) {
        S sum_gy = S(0), sum_gy_xh = S(0);
        for (int s = 0; s < n; ++s) {
          const std::size_t base = (static_cast<std::size_t>(s) * c + ch) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            sum_gy += y->grad[base + i];
            sum_gy_xh += y->grad[base + i] * (*xhat)[base + i];
          }
        }
        state->beta.grad[ch] += sum_gy;
        state->gamma.grad[ch] += sum_gy_xh;
        const S g = state->gamma(ch), is = (*invstd)[ch];
        if (train) {
          const S scale = g * is / static_cast<S>(m);
          for (int s = 0; s < n; ++s) {
            const std::size_t base = (static_cast<std::size_t>(s) * c + ch) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              x->grad[base + i] += scale * (static_cast<S>(m) * y->grad[base + i] - sum_gy -
                                            (*xhat)[base + i] * sum_gy_xh);
            }
          }
        } else {
          for (int s = 0; s < n; ++s) {
            const std::size_t base = (static_cast<std::size_t>(s) * c + ch) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              x->grad[base + i] += g * is * y->grad[base + i];
            }
          }
        }
      }
    });
    return y;
  }

  // Inverted dropout; identity in eval mode or at rate zero.
  Tensor<S>* dropout(Tensor<S>* x, S rate, Rng& rng, Mode mode) {
    if (mode == Mode::kEval || rate <= S(0)) return x;
    if (rate >= S(1)) fail("dropout rate must be < 1");
    Tensor<S>* y = fresh(x->shape);
    auto mask = std::make_shared<std::vector<S>>(x->size());
    const S keep = S(1) - rate;
    const S scale = S(1) / keep;
    for (std::size_t i = 0; i < x->size(); ++i) {
      (*mask)[i] = rng.uniform() < static_cast<double>(keep) ? scale : S(0);
      y->data[i] = x->data[i] * (*mask)[i];
    }
    steps_.push_back([x, y, mask] {
      for (std::size_t i = 0; i < y->size(); ++i) x->grad[i] += y->grad[i] * (*mask)[i];
    });
    return y;
  }

  // ---- sequence / attention plumbing ----

  // Slice time step t of x[N,C,T,W] and flatten to [N, C*W].
  Tensor<S>* time_rows(Tensor<S>* x, int t) {
    if (x->rank() != 4) fail("time_rows expects 4-d input, got " + shape_str(x->shape));
    const int n = x->extent(0), c = x->extent(1), h = x->extent(2), w = x->extent(3);
    if (t < 0 || t >= h) fail("time_rows step out of range");
    Tensor<S>* y = fresh({n, c * w});
    for (int s = 0; s < n; ++s) {
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t src = ((static_cast<std::size_t>(s) * c + ch) * h + t) * w;
        const std::size_t dst = static_cast<std::size_t>(s) * c * w + static_cast<std::size_t>(ch) * w;
        for (int j = 0; j < w; ++j) y->data[dst + j] = x->data[src + j];
      }
    }
    steps_.push_back([x, y, n, c, h, w, t] {
      for (int s = 0; s < n; ++s) {
        for (int ch = 0; ch < c; ++ch) {
          const std::size_t src = ((static_cast<std::size_t>(s) * c + ch) * h + t) * w;
          const std::size_t dst = static_cast<std::size_t>(s) * c * w + static_cast<std::size_t>(ch) * w;
          for (int j = 0; j < w; ++j) x->grad[src + j] += y->grad[dst + j];
        }
      }
    });
    return y;
  }

  // Stack four [N,D] rows into [N,4,D].
  Tensor<S>* stack4(Tensor<S>* a, Tensor<S>* b, Tensor<S>* c, Tensor<S>* d) {
    std::array<Tensor<S>*, 4> in{a, b, c, d};
    for (auto* t : in) {
      if (t->rank() != 2 || t->shape != a->shape) {
        fail("stack4 expects four equal [N,D] tensors");
      }
    }
    const int n = a->extent(0), dim = a->extent(1);
    Tensor<S>* y = fresh({n, 4, dim});
    for (int s = 0; s < n; ++s) {
      for (int r = 0; r < 4; ++r) {
        for (int j = 0; j < dim; ++j) (*y)(s, r, j) = (*in[r])(s, j);
      }
    }
    steps_.push_back([in, y, n, dim] {
      for (int s = 0; s < n; ++s) {
        for (int r = 0; r < 4; ++r) {
          for (int j = 0; j < dim; ++j) {
            in[r]->grad[static_cast<std::size_t>(s) * dim + j] +=
                y->grad[(static_cast<std::size_t>(s) * 4 + r) * dim + j];
          }
        }
      }
    });
    return y;
  }

  // Row i of x[N,R,D] -> [N,D].
  Tensor<S>* row(Tensor<S>* x, int i) {
    if (x->rank() != 3) fail("row expects 3-d input, got " + shape_str(x->shape));
    const int n = x->extent(0), r = x->extent(1), dim = x->extent(2);
    if (i < 0 || i >= r) fail("row index out of range");
    Tensor<S>* y = fresh({n, dim});
    for (int s = 0; s < n; ++s) {
      for (int j = 0; j < dim; ++j) (*y)(s, j) = (*x)(s, i, j);
    }
    steps_.push_back([x, y, n, r, dim, i] {
      for (int s = 0; s < n; ++s) {
        for (int j = 0; j < dim; ++j) {
          x->grad[(static_cast<std::size_t>(s) * r + i) * dim + j] +=
              y->grad[static_cast<std::size_t>(s) * dim + j];
        }
      }
    });
    return y;
  }

  // logits[n,r] = sum_d Q[n,r,d] * K[n,d]
  Tensor<S>* rows_dot(Tensor<S>* q, Tensor<S>* k) {
    if (q->rank() != 3 || k->rank() != 2 || q->extent(0) != k->extent(0) ||
        q->extent(2) != k->extent(1)) {
      fail("rows_dot shape mismatch: " + shape_str(q->shape) + " vs " + shape_str(k->shape));
    }
    const int n = q->extent(0), r = q->extent(1), dim = q->extent(2);
    Tensor<S>* y = fresh({n, r});
    for (int s = 0; s < n; ++s) {
      for (int i = 0; i < r; ++i) {
        S acc = S(0);
        for (int j = 0; j < dim; ++j) acc += (*q)(s, i, j) * (*k)(s, j);
        (*y)(s, i) = acc;
      }
    }
    steps_.push_back([q, k, y, n, r, dim] {
      for (int s = 0; s < n; ++s) {
        for (int i = 0; i < r; ++i) {
          const S g = y->grad[static_cast<std::size_t>(s) * r + i];
          for (int j = 0; j < dim; ++j) {
            q->grad[(static_cast<std::size_t>(s) * r + i) * dim + j] +=
                g * k->data[static_cast<std::size_t>(s) * dim + j];
            k->grad[static_cast<std::size_t>(s) * dim + j] +=
                g * q->data[(static_cast<std::size_t>(s) * r + i) * dim + j];
          }
        }
      }
    });
    return y;
  }

  // Row-wise stable softmax of x[N,M].
  Tensor<S>* softmax_rows(Tensor<S>* x) {
    if (x->rank() != 2) fail("softmax_rows expects 2-d input, got " + shape_str(x->shape));
    const int n = x->extent(0), m = x->extent(1);
    Tensor<S>* y = fresh(x->shape);
    for (int s = 0; s < n; ++s) {
      const S* in = x->ptr() + static_cast<std::size_t>(s) * m;
      S* out = y->ptr() + static_cast<std::size_t>(s) * m;
      S mx = in[0];
      for (int j = 1; j < m; ++j) mx = std::max(mx, in[j]);
      if (!std::isfinite(static_cast<double>(mx))) {
        fail("softmax input is not finite");
      }
      S sum = S(0);
      for (int j = 0; j < m; ++j) {
        out[j] = std::exp(in[j] - mx);
        sum += out[j];
      }
      for (int j = 0; j < m; ++j) out[j] /= sum;
    }
    steps_.push_back([x, y, n, m] {
      for (int s = 0; s < n; ++s) {
        const std::size_t base = static_cast<std::size_t>(s) * m;
        S dot = S(0);
        for (int j = 0; j < m; ++j) dot += y->grad[base + j] * y->data[base + j];
        for (int j = 0; j < m; ++j) {
          x->grad[base + j] += y->data[base + j] * (y->grad[base + j] - dot);
        }
      }
    });
    return y;
  }

  // out[n,r,:] = att[n,r] * q[n,r,:]
  Tensor<S>* scale_rows(Tensor<S>* q, Tensor<S>* att) {
    if (q->rank() != 3 || att->rank() != 2 || q->extent(0) != att->extent(0) ||
        q->extent(1) != att->extent(1)) {
      fail("scale_rows shape mismatch: " + shape_str(q->shape) + " vs " + shape_str(att->shape));
    }
    const int n = q->extent(0), r = q->extent(1), dim = q->extent(2);
    Tensor<S>* y = fresh(q->shape);
    for (int s = 0; s < n; ++s) {
      for (int i = 0; i < r; ++i) {
        const S a = (*att)(s, i);
        for (int j = 0; j < dim; ++j) (*y)(s, i, j) = a * (*q)(s, i, j);
      }
    }
    steps_.push_back([q, att, y, n, r, dim] {
      for (int s = 0; s < n; ++s) {
        for (int i = 0; i < r; ++i) {
          const std::size_t base = (static_cast<std::size_t>(s) * r + i) * dim;
          const S a = att->data[static_cast<std::size_t>(s) * r + i];
          S acc = S(0);
          for (int j = 0; j < dim; ++j) {
            q->grad[base + j] += a * y->grad[base + j];
            acc += y->grad[base + j] * q->data[base + j];
          }
          att->grad[static_cast<std::size_t>(s) * r + i] += acc;
        }
      }
    });
    return y;
  }

  // ---- losses ----

  // Mean binary cross-entropy over a batch of logits, computed in the
  // numerically stable softplus form; d/dlogit = (sigmoid(logit) - y) / N.
  Tensor<S>* bce_logits_mean(Tensor<S>* logits, const std::vector<S>& targets) {
    if (logits->rank() != 1 || logits->size() != targets.size()) {
      fail("bce_logits_mean expects matching 1-d logits and targets");
    }
    for (S t : targets) {
      if (t != S(0) && t != S(1)) fail("bce target must be 0 or 1");
    }
    const int n = logits->extent(0);
    Tensor<S>* y = fresh({1});
    S acc = S(0);
    for (int i = 0; i < n; ++i) {
      const S l = (*logits)(i);
      const S t = targets[static_cast<std::size_t>(i)];
      acc += std::max(l, S(0)) - l * t + std::log1p(std::exp(-std::abs(l)));
    }
    y->data[0] = acc / static_cast<S>(n);
    auto tg = std::make_shared<std::vector<S>>(targets);
    steps_.push_back([logits, y, tg, n] {
      const S g = y->grad[0] / static_cast<S>(n);
      for (int i = 0; i < n; ++i) {
        logits->grad[i] += g * (sigmoid_scalar(logits->data[i]) - (*tg)[static_cast<std::size_t>(i)]);
      }
    });
    return y;
  }

  // total = sum_i w[i] * scalars[i]
  Tensor<S>* weighted_sum(const std::vector<Tensor<S>*>& scalars, const std::vector<S>& w) {
    if (scalars.size() != w.size() || scalars.empty()) {
      fail("weighted_sum expects matching non-empty terms and weights");
    }
    Tensor<S>* y = fresh({1});
    S acc = S(0);
    for (std::size_t i = 0; i < scalars.size(); ++i) {
      if (scalars[i]->size() != 1) fail("weighted_sum terms must be scalars");
      acc += w[i] * scalars[i]->data[0];
    }
    y->data[0] = acc;
    auto terms = std::make_shared<std::vector<Tensor<S>*>>(scalars);
    auto wts = std::make_shared<std::vector<S>>(w);
    steps_.push_back([y, terms, wts] {
      for (std::size_t i = 0; i < terms->size(); ++i) {
        (*terms)[i]->grad[0] += (*wts)[i] * y->grad[0];
      }
    });
    return y;
  }

  // ---- driving ----

  void backward(Tensor<S>* root) {
    if (root->size() != 1) fail("backward root must be a scalar node");
    root->grad[0] = S(1);
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
    for (auto& [node, external] : links_) {
      for (std::size_t i = 0; i < node->size(); ++i) external->grad[i] += node->grad[i];
    }
  }

  std::uint64_t relu_sign_hash() const { return relu_hash_; }
  long relu_kink_hits() const { return relu_kinks_; }
  void set_kink_eps(S e) { kink_eps_ = e; }
  std::size_t node_count() const { return arena_.size(); }

 private:
  Tensor<S>* fresh(std::vector<int> shape) {
    arena_.emplace_back(std::move(shape));
    Tensor<S>* node = &arena_.back();
    node->grad.assign(node->data.size(), S(0));
    return node;
  }

  static void check_same_shape(const char* op, const Tensor<S>* a, const Tensor<S>* b) {
    if (a->shape != b->shape) {
      fail(std::string(op) + " shape mismatch: " + shape_str(a->shape) + " vs " +
           shape_str(b->shape));
    }
  }

  static void im2col(const S* x, S* col, int ci, int h, int w, int kh, int kw, int ph, int pw) {
    for (int c = 0; c < ci; ++c) {
      const S* plane = x + static_cast<std::size_t>(c) * h * w;
      for (int dy = 0; dy < kh; ++dy) {
        for (int dx = 0; dx < kw; ++dx) {
          S* dst = col + ((static_cast<std::size_t>(c) * kh + dy) * kw + dx) * h * w;
          for (int y = 0; y < h; ++y) {
            const int sy = y + dy - ph;
            S* drow = dst + static_cast<std::size_t>(y) * w;
            if (sy < 0 || sy >= h) {
              for (int xx = 0; xx < w; ++xx) drow[xx] = S(0);
              continue;
            }
            const S* srow = plane + static_cast<std::size_t>(sy) * w;
            const int off = dx - pw;
            for (int xx = 0; xx < w; ++xx) {
              const int sx = xx + off;
              drow[xx] = (sx >= 0 && sx < w) ? srow[sx] : S(0);
            }
          }
        }
      }
    }
  }

  static void col2im(const S* col, S* gx, int ci, int h, int w, int kh, int kw, int ph, int pw) {
    for (int c = 0; c < ci; ++c) {
      S* plane = gx + static_cast<std::size_t>(c) * h * w;
      for (int dy = 0; dy < kh; ++dy) {
        for (int dx = 0; dx < kw; ++dx) {
          const S* src = col + ((static_cast<std::size_t>(c) * kh + dy) * kw + dx) * h * w;
          for (int y = 0; y < h; ++y) {
            const int sy = y + dy - ph;
            if (sy < 0 || sy >= h) continue;
            const S* srow = src + static_cast<std::size_t>(y) * w;
            S* drow = plane + static_cast<std::size_t>(sy) * w;
            const int off = dx - pw;
            for (int xx = 0; xx < w; ++xx) {
              const int sx = xx + off;
              if (sx >= 0 && sx < w) drow[sx] += srow[xx];
            }
          }
        }
      }
    }
  }

  std::deque<Tensor<S>> arena_;
  std::vector<std::function<void()>> steps_;
  std::vector<std::pair<Tensor<S>*, Tensor<S>*>> links_;
  std::uint64_t relu_hash_ = 1469598103934665603ull;
  long relu_kinks_ = 0;
  S kink_eps_ = S(1e-6);
};

// ---------------------------------------------------------------------------
// Plain (non-tape) reference helpers used across the project.
// ---------------------------------------------------------------------------

// Numerically stable softmax of a vector; rejects non-finite input.
template <typename S>
inline std::vector<S> softmax(const std::vector<S>& logits) {
  if (logits.empty()) fail("softmax needs at least one logit");
  S mx = logits[0];
  for (S v : logits) {
    if (!std::isfinite(static_cast<double>(v))) fail("softmax input is not finite");
    mx = std::max(mx, v);
  }
  std::vector<S> out(logits.size());
  S sum = S(0);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    sum += out[i];
  }
  for (S& v : out) v /= sum;
  return out;
}

// Clamped binary cross-entropy on a probability. The clamp keeps log() away
// from zero; targets must be exactly 0 or 1.
template <typename S>
inline S binary_cross_entropy(S p, S y) {
  if (y != S(0) && y != S(1)) fail("bce target must be 0 or 1");
  const S eps = S(1e-7);
  const S pc = std::min(std::max(p, eps), S(1) - eps);
  return -(y * std::log(pc) + (S(1) - y) * std::log(S(1) - pc));
}

}  // namespace avvad

#endif  // AVVAD_GRAPH_HPP_
