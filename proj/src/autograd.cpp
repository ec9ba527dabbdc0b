#include "taskroute/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <unordered_set>

#include "taskroute/parallel.hpp"

namespace taskroute {

template <typename T>
void Tape<T>::backward(Var<T> loss, GradMode mode) {
  if (loss.tape != this) throw UsageError("backward: loss was recorded on a different tape");
  if (consumed_) throw UsageError("backward called twice on the same forward pass");
  Node& root = nodes_.at(loss.id);
  if (root.value.numel() != 1) {
    throw UsageError("backward requires a scalar loss, got shape " + shape_str(root.value.shape()));
  }
  if (!root.value.all_finite()) throw NumericError("loss is not finite");
  consumed_ = true;
  if (!root.requires_grad) return;

  root.grad.assign(1, T{1});
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.fn || n.grad.size() != n.value.numel()) continue;
    n.fn(*this, i);
  }

  std::unordered_set<Parameter<T>*> written;
  for (Node& n : nodes_) {
    if (n.param == nullptr || n.grad.size() != n.value.numel()) continue;
    for (const T g : n.grad) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient for parameter " + n.param->name);
    }
    Parameter<T>& p = *n.param;
    const bool first = written.insert(&p).second;
    if (first && (mode == GradMode::overwrite || !p.grad)) {
      p.grad = Tensor<T>(n.value.shape(), n.grad);
    } else {
      auto out = p.grad->data();
      for (std::size_t k = 0; k < out.size(); ++k) out[k] += n.grad[k];
    }
  }
}

template class Tape<float>;
template class Tape<double>;

namespace ops {

namespace {

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw ConfigError(std::string(what) + " expects rank " + std::to_string(rank) + ", got shape " +
                      shape_str(t.shape()));
  }
}

std::size_t conv_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding,
                        const char* axis) {
  const std::size_t padded = in + 2 * padding;
  if (padded < kernel || (padded - kernel) % stride != 0) {
    throw ConfigError(std::string("conv2d: ") + axis + " extent " + std::to_string(in) + " with kernel " +
                      std::to_string(kernel) + ", stride " + std::to_string(stride) + ", padding " +
                      std::to_string(padding) + " does not give a positive integer output size");
  }
  return (padded - kernel) / stride + 1;
}

struct ConvGeometry {
  std::size_t batch, cin, h, w, cout, kh, kw, ho, wo, stride, pad;
  std::size_t k() const { return cin * kh * kw; }
  std::size_t p() const { return ho * wo; }
};

template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const std::size_t P = g.p();
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* row = col + ((ci * g.kh + i) * g.kw + j) * P;
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + i) - static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t ow = 0; ow < g.wo; ++ow) {
            const auto iw =
                static_cast<std::ptrdiff_t>(ow * g.stride + j) - static_cast<std::ptrdiff_t>(g.pad);
            const bool inside = ih >= 0 && iw >= 0 && ih < static_cast<std::ptrdiff_t>(g.h) &&
                                iw < static_cast<std::ptrdiff_t>(g.w);
            row[oh * g.wo + ow] = inside ? x[(ci * g.h + static_cast<std::size_t>(ih)) * g.w +
                                             static_cast<std::size_t>(iw)]
                                         : T{0};
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* dx) {
  const std::size_t P = g.p();
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* row = col + ((ci * g.kh + i) * g.kw + j) * P;
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + i) - static_cast<std::ptrdiff_t>(g.pad);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ow = 0; ow < g.wo; ++ow) {
            const auto iw =
                static_cast<std::ptrdiff_t>(ow * g.stride + j) - static_cast<std::ptrdiff_t>(g.pad);
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.w)) continue;
            dx[(ci * g.h + static_cast<std::size_t>(ih)) * g.w + static_cast<std::size_t>(iw)] +=
                row[oh * g.wo + ow];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Var<T> conv2d(Var<T> input, Var<T> weight, Var<T> bias, std::size_t stride, std::size_t padding) {
  Tape<T>& tape = *input.tape;
  const Tensor<T>& x = input.value();
  const Tensor<T>& w = weight.value();
  const Tensor<T>& b = bias.value();
  require_rank(x, 4, "conv2d input");
  require_rank(w, 4, "conv2d weight");
  if (stride == 0) throw ConfigError("conv2d: stride must be positive");
  if (x.dim(1) != w.dim(1)) {
    throw ConfigError("conv2d: input " + shape_str(x.shape()) + " has " + std::to_string(x.dim(1)) +
                      " channels but weight " + shape_str(w.shape()) + " expects " + std::to_string(w.dim(1)));
  }
  if (b.rank() != 1 || b.dim(0) != w.dim(0)) {
    throw ConfigError("conv2d: bias " + shape_str(b.shape()) + " does not match weight " + shape_str(w.shape()));
  }
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3), 0, 0, stride, padding};
  g.ho = conv_extent(g.h, g.kh, stride, padding, "height");
  g.wo = conv_extent(g.w, g.kw, stride, padding, "width");

  const std::size_t K = g.k();
  const std::size_t P = g.p();
  auto cols = std::make_shared<std::vector<T>>(g.batch * K * P);
  Tensor<T> out({g.batch, g.cout, g.ho, g.wo});
  const T* xd = x.data().data();
  const T* wd = w.data().data();
  const T* bd = b.data().data();
  T* od = out.data().data();
  T* cd = cols->data();
  parallel_for(g.batch, [&](std::size_t begin, std::size_t end) {
    for (std::size_t n = begin; n < end; ++n) {
      T* col = cd + n * K * P;
      im2col(xd + n * g.cin * g.h * g.w, g, col);
      for (std::size_t co = 0; co < g.cout; ++co) {
        T* row = od + (n * g.cout + co) * P;
        std::fill(row, row + P, bd[co]);
        const T* wrow = wd + co * K;
        for (std::size_t k = 0; k < K; ++k) {
          const T wk = wrow[k];
          const T* crow = col + k * P;
          for (std::size_t p = 0; p < P; ++p) row[p] += wk * crow[p];
        }
      }
    }
  });

  const std::size_t in_id = input.id, w_id = weight.id, b_id = bias.id;
  return tape.record(std::move(out), {input, weight, bias}, [g, cols, in_id, w_id, b_id](Tape<T>& t, std::size_t self) {
    const std::size_t K = g.k();
    const std::size_t P = g.p();
    const T* gd = t.upstream(self).data();
    const T* cd = cols->data();
    if (auto* gb = t.accumulator(b_id)) {
      for (std::size_t n = 0; n < g.batch; ++n) {
        for (std::size_t co = 0; co < g.cout; ++co) {
          const T* grow = gd + (n * g.cout + co) * P;
          T acc{0};
          for (std::size_t p = 0; p < P; ++p) acc += grow[p];
          (*gb)[co] += acc;
        }
      }
    }
    if (auto* gw = t.accumulator(w_id)) {
      T* gwd = gw->data();
      parallel_for(g.cout, [&](std::size_t begin, std::size_t end) {
        for (std::size_t co = begin; co < end; ++co) {
          T* dw = gwd + co * K;
          for (std::size_t n = 0; n < g.batch; ++n) {
            const T* grow = gd + (n * g.cout + co) * P;
            const T* col = cd + n * K * P;
            for (std::size_t k = 0; k < K; ++k) {
              const T* crow = col + k * P;
              T acc{0};
              for (std::size_t p = 0; p < P; ++p) acc += grow[p] * crow[p];
              dw[k] += acc;
            }
          }
        }
      });
    }
    if (auto* gx = t.accumulator(in_id)) {
      const T* wd = t.value(w_id).data().data();
      T* gxd = gx->data();
      parallel_for(g.batch, [&](std::size_t begin, std::size_t end) {
        std::vector<T> dcol(K * P);
        for (std::size_t n = begin; n < end; ++n) {
          std::fill(dcol.begin(), dcol.end(), T{0});
          for (std::size_t co = 0; co < g.cout; ++co) {
            const T* grow = gd + (n * g.cout + co) * P;
            const T* wrow = wd + co * K;
            for (std::size_t k = 0; k < K; ++k) {
              const T wk = wrow[k];
              T* drow = dcol.data() + k * P;
              for (std::size_t p = 0; p < P; ++p) drow[p] += wk * grow[p];
            }
          }
          col2im_add(dcol.data(), g, gxd + n * g.cin * g.h * g.w);
        }
      });
    }
  });
}

template <typename T>
Var<T> batchnorm2d(Var<T> input, Var<T> gamma, Var<T> beta, BatchNormState<T> state, bool training,
                   double momentum, double eps) {
  Tape<T>& tape = *input.tape;
  const Tensor<T>& x = input.value();
  require_rank(x, 4, "batchnorm2d input");
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const auto check = [&](const Tensor<T>& t, const char* what) {
    if (t.rank() != 1 || t.dim(0) != C) {
      throw ConfigError(std::string("batchnorm2d: ") + what + " " + shape_str(t.shape()) +
                        " does not match input " + shape_str(x.shape()));
    }
  };
  check(gamma.value(), "gamma");
  check(beta.value(), "beta");
  check(state.running_mean, "running_mean");
  check(state.running_var, "running_var");
  const std::size_t count = B * HW;
  if (training && count < 2) {
    throw DegenerateBatchError("batchnorm2d: training needs at least 2 values per channel, got " +
                               std::to_string(count) + " for input " + shape_str(x.shape()));
  }

  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(C);
  const T* xd = x.data().data();
  const T* gd = gamma.value().data().data();
  const T* bd = beta.value().data().data();
  for (std::size_t c = 0; c < C; ++c) {
    double mean = 0.0, var = 0.0;
    if (training) {
      for (std::size_t n = 0; n < B; ++n) {
        const T* src = xd + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) mean += src[i];
      }
      mean /= static_cast<double>(count);
      for (std::size_t n = 0; n < B; ++n) {
        const T* src = xd + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) {
          const double d = src[i] - mean;
          var += d * d;
        }
      }
      const double unbiased = var / static_cast<double>(count - 1);
      var /= static_cast<double>(count);
      state.running_mean[c] = static_cast<T>((1.0 - momentum) * state.running_mean[c] + momentum * mean);
      state.running_var[c] = static_cast<T>((1.0 - momentum) * state.running_var[c] + momentum * unbiased);
    } else {
      mean = state.running_mean[c];
      var = state.running_var[c];
    }
    const double istd = 1.0 / std::sqrt(var + eps);
    inv_std[c] = static_cast<T>(istd);
    for (std::size_t n = 0; n < B; ++n) {
      const std::size_t base = (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) {
        const T xh = static_cast<T>((xd[base + i] - mean) * istd);
        xhat[base + i] = xh;
        out[base + i] = gd[c] * xh + bd[c];
      }
    }
  }

  const std::size_t in_id = input.id, g_id = gamma.id, b_id = beta.id;
  return tape.record(
      std::move(out), {input, gamma, beta},
      [B, C, HW, training, in_id, g_id, b_id, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Tape<T>& t, std::size_t self) {
        const std::vector<T>& dy = t.upstream(self);
        const T* gam = t.value(g_id).data().data();
        auto* dgamma = t.accumulator(g_id);
        auto* dbeta = t.accumulator(b_id);
        auto* dx = t.accumulator(in_id);
        const double count = static_cast<double>(B * HW);
        for (std::size_t c = 0; c < C; ++c) {
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::size_t n = 0; n < B; ++n) {
            const std::size_t base = (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) {
              sum_dy += dy[base + i];
              sum_dy_xhat += static_cast<double>(dy[base + i]) * xhat[base + i];
            }
          }
          if (dgamma) (*dgamma)[c] += static_cast<T>(sum_dy_xhat);
          if (dbeta) (*dbeta)[c] += static_cast<T>(sum_dy);
          if (!dx) continue;
          const double scale = static_cast<double>(gam[c]) * inv_std[c];
          for (std::size_t n = 0; n < B; ++n) {
            const std::size_t base = (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) {
              if (training) {
                (*dx)[base + i] += static_cast<T>(
                    scale * (dy[base + i] - sum_dy / count - xhat[base + i] * sum_dy_xhat / count));
              } else {
                (*dx)[base + i] += static_cast<T>(scale * dy[base + i]);
              }
            }
          }
        }
      });
}

template <typename T>
Var<T> relu(Var<T> x) {
  const Tensor<T>& in = x.value();
  Tensor<T> out(in.shape());
  for (std::size_t i = 0; i < in.numel(); ++i) out[i] = in[i] > T{0} ? in[i] : T{0};
  const std::size_t in_id = x.id;
  return x.tape->record(std::move(out), {x}, [in_id](Tape<T>& t, std::size_t self) {
    auto* gx = t.accumulator(in_id);
    if (!gx) return;
    const auto& dy = t.upstream(self);
    const auto& v = t.value(in_id);
    for (std::size_t i = 0; i < dy.size(); ++i) {
      if (v[i] > T{0}) (*gx)[i] += dy[i];
    }
  });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  const Tensor<T>& in = x.value();
  Tensor<T> out(in.shape());
  for (std::size_t i = 0; i < in.numel(); ++i) {
    const T z = in[i];
    if (z >= T{0}) {
      out[i] = T{1} / (T{1} + std::exp(-z));
    } else {
      const T e = std::exp(z);
      out[i] = e / (T{1} + e);
    }
  }
  const std::size_t in_id = x.id;
  return x.tape->record(std::move(out), {x}, [in_id](Tape<T>& t, std::size_t self) {
    auto* gx = t.accumulator(in_id);
    if (!gx) return;
    const auto& dy = t.upstream(self);
    const auto& y = t.value(self);
    for (std::size_t i = 0; i < dy.size(); ++i) (*gx)[i] += dy[i] * y[i] * (T{1} - y[i]);
  });
}

template <typename T>
Var<T> maxpool2d(Var<T> x, std::size_t kernel, std::size_t stride) {
  const Tensor<T>& in = x.value();
  require_rank(in, 4, "maxpool2d input");
  if (kernel == 0 || stride == 0) throw ConfigError("maxpool2d: kernel and stride must be positive");
  const std::size_t B = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
  if (kernel > H || kernel > W) {
    throw ConfigError("maxpool2d: window " + std::to_string(kernel) + " exceeds spatial extent of input " +
                      shape_str(in.shape()));
  }
  const std::size_t Ho = (H - kernel) / stride + 1, Wo = (W - kernel) / stride + 1;
  Tensor<T> out({B, C, Ho, Wo});
  std::vector<std::size_t> argmax(out.numel());
  const T* xd = in.data().data();
  for (std::size_t plane = 0; plane < B * C; ++plane) {
    const T* src = xd + plane * H * W;
    for (std::size_t oh = 0; oh < Ho; ++oh) {
      for (std::size_t ow = 0; ow < Wo; ++ow) {
        std::size_t best = (oh * stride) * W + ow * stride;
        for (std::size_t i = 0; i < kernel; ++i) {
          for (std::size_t j = 0; j < kernel; ++j) {
            const std::size_t idx = (oh * stride + i) * W + ow * stride + j;
            if (src[idx] > src[best]) best = idx;
          }
        }
        const std::size_t o = (plane * Ho + oh) * Wo + ow;
        out[o] = src[best];
        argmax[o] = plane * H * W + best;
      }
    }
  }
  const std::size_t in_id = x.id;
  return x.tape->record(std::move(out), {x}, [in_id, argmax = std::move(argmax)](Tape<T>& t, std::size_t self) {
    auto* gx = t.accumulator(in_id);
    if (!gx) return;
    const auto& dy = t.upstream(self);
    for (std::size_t o = 0; o < dy.size(); ++o) (*gx)[argmax[o]] += dy[o];
  });
}

template <typename T>
Var<T> flatten(Var<T> x) {
  const Tensor<T>& in = x.value();
  if (in.rank() < 1) throw ConfigError("flatten: scalar input");
  const std::size_t B = in.dim(0);
  const std::size_t rest = B == 0 ? 0 : in.numel() / B;
  Tensor<T> out = in.reshaped({B, rest});
  const std::size_t in_id = x.id;
  return x.tape->record(std::move(out), {x}, [in_id](Tape<T>& t, std::size_t self) {
    auto* gx = t.accumulator(in_id);
    if (!gx) return;
    const auto& dy = t.upstream(self);
    for (std::size_t i = 0; i < dy.size(); ++i) (*gx)[i] += dy[i];
  });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias) {
  const Tensor<T>& in = x.value();
  const Tensor<T>& w = weight.value();
  const Tensor<T>& b = bias.value();
  require_rank(in, 2, "linear input");
  require_rank(w, 2, "linear weight");
  if (in.dim(1) != w.dim(1) || b.rank() != 1 || b.dim(0) != w.dim(0)) {
    throw ConfigError("linear: input " + shape_str(in.shape()) + ", weight " + shape_str(w.shape()) + ", bias " +
                      shape_str(b.shape()) + " are incompatible");
  }
  const std::size_t B = in.dim(0), N = in.dim(1), M = w.dim(0);
  Tensor<T> out({B, M});
  const T* xd = in.data().data();
  const T* wd = w.data().data();
  const T* bd = b.data().data();
  T* od = out.data().data();
  parallel_for(B, [&](std::size_t begin, std::size_t end) {
    for (std::size_t r = begin; r < end; ++r) {
      const T* xr = xd + r * N;
      for (std::size_t m = 0; m < M; ++m) {
        const T* wr = wd + m * N;
        T acc{0};
        for (std::size_t n = 0; n < N; ++n) acc += xr[n] * wr[n];
        od[r * M + m] = acc + bd[m];
      }
    }
  });
  const std::size_t x_id = x.id, w_id = weight.id, b_id = bias.id;
  return x.tape->record(std::move(out), {x, weight, bias}, [B, N, M, x_id, w_id, b_id](Tape<T>& t, std::size_t self) {
    const T* dy = t.upstream(self).data();
    if (auto* gb = t.accumulator(b_id)) {
      for (std::size_t r = 0; r < B; ++r) {
        for (std::size_t m = 0; m < M; ++m) (*gb)[m] += dy[r * M + m];
      }
    }
    if (auto* gw = t.accumulator(w_id)) {
      const T* xd = t.value(x_id).data().data();
      T* gwd = gw->data();
      parallel_for(M, [&](std::size_t begin, std::size_t end) {
        for (std::size_t m = begin; m < end; ++m) {
          T* row = gwd + m * N;
          for (std::size_t r = 0; r < B; ++r) {
            const T g = dy[r * M + m];
            const T* xr = xd + r * N;
            for (std::size_t n = 0; n < N; ++n) row[n] += g * xr[n];
          }
        }
      });
    }
    if (auto* gx = t.accumulator(x_id)) {
      const T* wd = t.value(w_id).data().data();
      T* gxd = gx->data();
      parallel_for(B, [&](std::size_t begin, std::size_t end) {
        for (std::size_t r = begin; r < end; ++r) {
          T* row = gxd + r * N;
          for (std::size_t m = 0; m < M; ++m) {
            const T g = dy[r * M + m];
            const T* wr = wd + m * N;
            for (std::size_t n = 0; n < N; ++n) row[n] += g * wr[n];
          }
        }
      });
    }
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  if (a.shape() != b.shape()) {
    throw ConfigError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
  const std::size_t a_id = a.id, b_id = b.id;
  return a.tape->record(std::move(out), {a, b}, [a_id, b_id](Tape<T>& t, std::size_t self) {
    const auto& dy = t.upstream(self);
    for (const std::size_t id : {a_id, b_id}) {
      if (auto* g = t.accumulator(id)) {
        for (std::size_t i = 0; i < dy.size(); ++i) (*g)[i] += dy[i];
      }
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  if (a.shape() != b.shape()) {
    throw ConfigError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  const std::size_t a_id = a.id, b_id = b.id;
  return a.tape->record(std::move(out), {a, b}, [a_id, b_id](Tape<T>& t, std::size_t self) {
    const auto& dy = t.upstream(self);
    if (auto* ga = t.accumulator(a_id)) {
      const auto& bv = t.value(b_id);
      for (std::size_t i = 0; i < dy.size(); ++i) (*ga)[i] += dy[i] * bv[i];
    }
    if (auto* gb = t.accumulator(b_id)) {
      const auto& av = t.value(a_id);
      for (std::size_t i = 0; i < dy.size(); ++i) (*gb)[i] += dy[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * factor;
  const std::size_t a_id = a.id;
  return a.tape->record(std::move(out), {a}, [a_id, factor](Tape<T>& t, std::size_t self) {
    if (auto* g = t.accumulator(a_id)) {
      const auto& dy = t.upstream(self);
      for (std::size_t i = 0; i < dy.size(); ++i) (*g)[i] += dy[i] * factor;
    }
  });
}

template <typename T>
Var<T> sum(Var<T> a) {
  T acc{0};
  for (const T v : a.value().data()) acc += v;
  const std::size_t a_id = a.id;
  return a.tape->record(Tensor<T>::scalar(acc), {a}, [a_id](Tape<T>& t, std::size_t self) {
    if (auto* g = t.accumulator(a_id)) {
      const T dy = t.upstream(self)[0];
      for (auto& v : *g) v += dy;
    }
  });
}

template <typename T>
Var<T> select_channels(Var<T> x, std::span<const std::uint8_t> keep) {
  Tensor<T> out = taskroute::select_channels(x.value(), keep);
  const std::size_t in_id = x.id;
  std::vector<std::uint8_t> bits(keep.begin(), keep.end());
  const Shape shape = x.shape();
  return x.tape->record(std::move(out), {x}, [in_id, bits = std::move(bits), shape](Tape<T>& t, std::size_t self) {
    auto* gx = t.accumulator(in_id);
    if (!gx) return;
    const auto& dy = t.upstream(self);
    const std::size_t B = shape[0], C = shape[1], HW = shape[2] * shape[3];
    for (std::size_t n = 0; n < B; ++n) {
      for (std::size_t c = 0; c < C; ++c) {
        if (!bits[c]) continue;
        const std::size_t base = (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) (*gx)[base + i] += dy[base + i];
      }
    }
  });
}

template <typename T>
Var<T> bce_with_logits(Var<T> logits, std::span<const T> targets) {
  const Tensor<T>& z = logits.value();
  require_rank(z, 2, "bce_with_logits logits");
  const std::size_t B = z.dim(0), K = z.dim(1);
  if (K != 1 && K != 2) throw ConfigError("bce_with_logits: expected [B,1] or [B,2] logits, got " + shape_str(z.shape()));
  if (targets.size() != B) {
    throw ConfigError("bce_with_logits: " + std::to_string(targets.size()) + " targets for batch of " +
                      std::to_string(B));
  }
  if (B == 0) throw DataError("bce_with_logits: empty batch");
  for (std::size_t i = 0; i < B; ++i) {
    if (targets[i] != T{0} && targets[i] != T{1}) {
      throw DataError("bce_with_logits: target " + std::to_string(static_cast<double>(targets[i])) +
                      " at index " + std::to_string(i) + " is not in {0,1}");
    }
  }
  if (!z.all_finite()) throw NumericError("bce_with_logits: non-finite logits");

  // Everything reduces to the log-odds d of the positive class: loss = softplus(d) - y d.
  std::vector<T> prob(B);
  double total = 0.0;
  for (std::size_t i = 0; i < B; ++i) {
    const double d = K == 1 ? static_cast<double>(z[i]) : static_cast<double>(z[2 * i + 1]) - z[2 * i];
    const double y = targets[i];
    total += std::max(d, 0.0) - y * d + std::log1p(std::exp(-std::abs(d)));
    prob[i] = static_cast<T>(d >= 0 ? 1.0 / (1.0 + std::exp(-d)) : std::exp(d) / (1.0 + std::exp(d)));
  }
  std::vector<T> y(targets.begin(), targets.end());
  const std::size_t z_id = logits.id;
  return logits.tape->record(
      Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(B))), {logits},
      [B, K, z_id, prob = std::move(prob), y = std::move(y)](Tape<T>& t, std::size_t self) {
        auto* gz = t.accumulator(z_id);
        if (!gz) return;
        const T dy = t.upstream(self)[0] / static_cast<T>(B);
        for (std::size_t i = 0; i < B; ++i) {
          const T g = (prob[i] - y[i]) * dy;
          if (K == 1) {
            (*gz)[i] += g;
          } else {
            (*gz)[2 * i] -= g;
            (*gz)[2 * i + 1] += g;
          }
        }
      });
}

#define TASKROUTE_INSTANTIATE_OPS(T)                                                                     \
  template Var<T> conv2d(Var<T>, Var<T>, Var<T>, std::size_t, std::size_t);                            \
  template Var<T> batchnorm2d(Var<T>, Var<T>, Var<T>, BatchNormState<T>, bool, double, double);        \
  template Var<T> relu(Var<T>);                                                                         \
  template Var<T> sigmoid(Var<T>);                                                                      \
  template Var<T> maxpool2d(Var<T>, std::size_t, std::size_t);                                          \
  template Var<T> flatten(Var<T>);                                                                      \
  template Var<T> linear(Var<T>, Var<T>, Var<T>);                                                       \
  template Var<T> add(Var<T>, Var<T>);                                                                  \
  template Var<T> mul(Var<T>, Var<T>);                                                                  \
  template Var<T> scale(Var<T>, T);                                                                     \
  template Var<T> sum(Var<T>);                                                                          \
  template Var<T> select_channels(Var<T>, std::span<const std::uint8_t>);                               \
  template Var<T> bce_with_logits(Var<T>, std::span<const T>);

TASKROUTE_INSTANTIATE_OPS(float)
TASKROUTE_INSTANTIATE_OPS(double)

#undef TASKROUTE_INSTANTIATE_OPS

}  // namespace ops

template <typename T>
Tensor<T> select_channels(const Tensor<T>& x, std::span<const std::uint8_t> keep) {
  if (x.rank() != 4) throw ConfigError("select_channels expects [B,C,H,W], got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (keep.size() != C) {
    throw ConfigError("channel mask of length " + std::to_string(keep.size()) + " applied to input " +
                      shape_str(x.shape()));
  }
  Tensor<T> out(x.shape());
  for (std::size_t n = 0; n < B; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      if (!keep[c]) continue;
      const std::size_t base = (n * C + c) * HW;
      std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(base), HW,
                  out.data().begin() + static_cast<std::ptrdiff_t>(base));
    }
  }
  return out;
}

template Tensor<float> select_channels(const Tensor<float>&, std::span<const std::uint8_t>);
template Tensor<double> select_channels(const Tensor<double>&, std::span<const std::uint8_t>);

}  // namespace taskroute
