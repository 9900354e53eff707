#include "cpd/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace cpd::ops {

int normalize_axis(int axis, int rank) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  }
  return a;
}

namespace {

using Grads = std::vector<std::vector<double>>;

struct AxisView {
  std::int64_t outer = 1;
  std::int64_t n = 1;
  std::int64_t inner = 1;
};

AxisView axis_view(const Shape& s, int axis) {
  AxisView v;
  for (int i = 0; i < axis; ++i) v.outer *= s[static_cast<std::size_t>(i)];
  v.n = s[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const std::int64_t da = i + a.size() >= r ? a[i + a.size() - r] : 1;
    const std::int64_t db = i + b.size() >= r ? b[i + b.size() - r] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `s` laid out against an output of rank r, with 0 on broadcast axes.
std::vector<std::int64_t> broadcast_strides(const Shape& s, const Shape& out) {
  const std::size_t r = out.size();
  std::vector<std::int64_t> strides(r, 0);
  std::int64_t stride = 1;
  for (std::size_t k = 0; k < s.size(); ++k) {
    const std::size_t i = s.size() - 1 - k;
    const std::size_t o = r - 1 - k;
    strides[o] = s[i] == 1 ? 0 : stride;
    stride *= s[i];
  }
  return strides;
}

// Calls f(out_index, a_index, b_index) over every output element.
template <typename F>
void for_each_broadcast(const Shape& out, const std::vector<std::int64_t>& sa,
                        const std::vector<std::int64_t>& sb, F&& f) {
  const std::size_t r = out.size();
  const std::int64_t total = r == 0 ? 1 : numel_of(out);
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t ia = 0;
  std::int64_t ib = 0;
  for (std::int64_t k = 0; k < total; ++k) {
    f(k, ia, ib);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

template <typename Fwd, typename Bwd>
Tensor binary_broadcast(const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
  const Shape out = broadcast_shape(a.shape(), b.shape());
  const auto sa = broadcast_strides(a.shape(), out);
  const auto sb = broadcast_strides(b.shape(), out);
  std::vector<double> values(static_cast<std::size_t>(out.empty() ? 1 : numel_of(out)));
  const auto da = a.data();
  const auto db = b.data();
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = fwd(da[i], db[i]);
  } else {
    for_each_broadcast(out, sa, sb, [&](std::int64_t k, std::int64_t ia, std::int64_t ib) {
      values[static_cast<std::size_t>(k)] = fwd(da[static_cast<std::size_t>(ia)], db[static_cast<std::size_t>(ib)]);
    });
  }
  return make_result(out, std::move(values), {a, b},
                     [a, b, out, sa, sb, bwd](const std::vector<double>& g, Grads& gin) {
                       const auto da = a.data();
                       const auto db = b.data();
                       for_each_broadcast(out, sa, sb, [&](std::int64_t k, std::int64_t ia, std::int64_t ib) {
                         double ga = 0.0;
                         double gb = 0.0;
                         bwd(da[static_cast<std::size_t>(ia)], db[static_cast<std::size_t>(ib)],
                             g[static_cast<std::size_t>(k)], ga, gb);
                         if (!gin[0].empty()) gin[0][static_cast<std::size_t>(ia)] += ga;
                         if (!gin[1].empty()) gin[1][static_cast<std::size_t>(ib)] += gb;
                       });
                     });
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv) {
  const auto dx = x.data();
  std::vector<double> values(dx.size());
  for (std::size_t i = 0; i < dx.size(); ++i) values[i] = fwd(dx[i]);
  return make_result(x.shape(), std::move(values), {x}, [x, deriv](const std::vector<double>& g, Grads& gin) {
    const auto d = x.data();
    for (std::size_t i = 0; i < d.size(); ++i) gin[0][i] += g[i] * deriv(d[i]);
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_broadcast(
      a, b, [](double x, double y) { return x + y; },
      [](double, double, double g, double& ga, double& gb) {
        ga = g;
        gb = g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_broadcast(
      a, b, [](double x, double y) { return x - y; },
      [](double, double, double g, double& ga, double& gb) {
        ga = g;
        gb = -g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_broadcast(
      a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double g, double& ga, double& gb) {
        ga = g * y;
        gb = g * x;
      });
}

Tensor scale(const Tensor& x, double s) {
  return unary(x, [s](double v) { return v * s; }, [s](double) { return s; });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary(x, [s](double v) { return v + s; }, [](double) { return 1.0; });
}

Tensor relu(const Tensor& x) {
  return unary(x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [inv_sqrt_2pi](double v) {
        return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
      });
}

Tensor log(const Tensor& x) {
  return unary(x, [](double v) { return std::log(v); }, [](double v) { return 1.0 / v; });
}

Tensor exp(const Tensor& x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double v) { return std::exp(v); });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() < 2 || sa.size() > 3 || sb.size() < 2 || sb.size() > 3 || sb.size() > sa.size()) {
    throw ShapeError("matmul: unsupported ranks " + shape_str(sa) + " x " + shape_str(sb));
  }
  const std::int64_t batch = sa.size() == 3 ? sa[0] : 1;
  const bool shared_b = sb.size() == 2;
  if (!shared_b && sb[0] != batch) throw ShapeError("matmul: batch mismatch " + shape_str(sa) + " x " + shape_str(sb));
  const std::int64_t m = sa[sa.size() - 2];
  const std::int64_t k = sa[sa.size() - 1];
  const std::int64_t kb = sb[sb.size() - 2];
  const std::int64_t n = sb[sb.size() - 1];
  if (k != kb) throw ShapeError("matmul: contracted dims differ " + shape_str(sa) + " x " + shape_str(sb));

  Shape out = sa.size() == 3 ? Shape{batch, m, n} : Shape{m, n};
  std::vector<double> c(static_cast<std::size_t>(batch * m * n), 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::int64_t bi = 0; bi < batch; ++bi) {
    const double* ab = pa + bi * m * k;
    const double* bb = pb + (shared_b ? 0 : bi * k * n);
    double* cb = c.data() + bi * m * n;
    for (std::int64_t i = 0; i < m; ++i) {
      for (std::int64_t p = 0; p < k; ++p) {
        const double av = ab[i * k + p];
        if (av == 0.0) continue;
        const double* brow = bb + p * n;
        double* crow = cb + i * n;
        for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
  add_macs(static_cast<std::uint64_t>(batch * m * n * k));
  return make_result(std::move(out), std::move(c), {a, b},
                     [a, b, batch, m, k, n, shared_b](const std::vector<double>& g, Grads& gin) {
                       const double* pa = a.data().data();
                       const double* pb = b.data().data();
                       for (std::int64_t bi = 0; bi < batch; ++bi) {
                         const double* gb = g.data() + bi * m * n;
                         const double* ab = pa + bi * m * k;
                         const double* bb = pb + (shared_b ? 0 : bi * k * n);
                         if (!gin[0].empty()) {
                           double* ga = gin[0].data() + bi * m * k;
                           for (std::int64_t i = 0; i < m; ++i)
                             for (std::int64_t p = 0; p < k; ++p) {
                               double s = 0.0;
                               for (std::int64_t j = 0; j < n; ++j) s += gb[i * n + j] * bb[p * n + j];
                               ga[i * k + p] += s;
                             }
                         }
                         if (!gin[1].empty()) {
                           double* gbw = gin[1].data() + (shared_b ? 0 : bi * k * n);
                           for (std::int64_t i = 0; i < m; ++i)
                             for (std::int64_t p = 0; p < k; ++p) {
                               const double av = ab[i * k + p];
                               if (av == 0.0) continue;
                               for (std::int64_t j = 0; j < n; ++j) gbw[p * n + j] += av * gb[i * n + j];
                             }
                         }
                       }
                     });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad, int groups) {
  const auto& sx = x.shape();
  const auto& sw = w.shape();
  if (sx.size() != 4 || sw.size() != 4) throw ShapeError("conv2d expects 4-d input and weight");
  if (stride < 1 || pad < 0 || groups < 1) throw ShapeError("conv2d: invalid stride/pad/groups");
  const std::int64_t n = sx[0], ci = sx[1], h = sx[2], wd = sx[3];
  const std::int64_t co = sw[0], cig = sw[1], kh = sw[2], kw = sw[3];
  if (ci % groups != 0 || co % groups != 0 || ci / groups != cig) {
    throw ShapeError("conv2d: channel/group mismatch input " + shape_str(sx) + " weight " + shape_str(sw) +
                     " groups " + std::to_string(groups));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != co)) throw ShapeError("conv2d: bias shape");
  const std::int64_t ho = (h + 2 * pad - kh) / stride + 1;
  const std::int64_t wo = (wd + 2 * pad - kw) / stride + 1;
  if (ho <= 0 || wo <= 0) throw ShapeError("conv2d: empty output");
  const std::int64_t cog = co / groups;

  std::vector<double> out(static_cast<std::size_t>(n * co * ho * wo), 0.0);
  const double* px = x.data().data();
  const double* pw = w.data().data();
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t o = 0; o < co; ++o) {
      const std::int64_t grp = o / cog;
      double* po = out.data() + ((b * co + o) * ho) * wo;
      if (bias.defined()) std::fill(po, po + ho * wo, bias.data()[static_cast<std::size_t>(o)]);
      for (std::int64_t c = 0; c < cig; ++c) {
        const double* pin = px + ((b * ci + grp * cig + c) * h) * wd;
        for (std::int64_t u = 0; u < kh; ++u) {
          for (std::int64_t v = 0; v < kw; ++v) {
            const double wv = pw[((o * cig + c) * kh + u) * kw + v];
            if (wv == 0.0) continue;
            for (std::int64_t oy = 0; oy < ho; ++oy) {
              const std::int64_t iy = oy * stride - pad + u;
              if (iy < 0 || iy >= h) continue;
              const double* row = pin + iy * wd;
              double* orow = po + oy * wo;
              for (std::int64_t ox = 0; ox < wo; ++ox) {
                const std::int64_t ix = ox * stride - pad + v;
                if (ix < 0 || ix >= wd) continue;
                orow[ox] += wv * row[ix];
              }
            }
          }
        }
      }
    }
  }
  add_macs(static_cast<std::uint64_t>(n * co * ho * wo * cig * kh * kw));

  std::vector<Tensor> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  const bool has_bias = bias.defined();
  return make_result(
      Shape{n, co, ho, wo}, std::move(out), std::move(inputs),
      [x, w, n, ci, h, wd, co, cig, cog, kh, kw, ho, wo, stride, pad, has_bias](const std::vector<double>& g,
                                                                                 Grads& gin) {
        const double* px = x.data().data();
        const double* pw = w.data().data();
        double* gx = gin[0].empty() ? nullptr : gin[0].data();
        double* gw = gin[1].empty() ? nullptr : gin[1].data();
        for (std::int64_t b = 0; b < n; ++b) {
          for (std::int64_t o = 0; o < co; ++o) {
            const std::int64_t grp = o / cog;
            const double* pg = g.data() + ((b * co + o) * ho) * wo;
            if (has_bias && !gin[2].empty()) {
              double s = 0.0;
              for (std::int64_t i = 0; i < ho * wo; ++i) s += pg[i];
              gin[2][static_cast<std::size_t>(o)] += s;
            }
            for (std::int64_t c = 0; c < cig; ++c) {
              const std::int64_t cin = grp * cig + c;
              const double* pin = px + ((b * ci + cin) * h) * wd;
              double* gin_x = gx ? gx + ((b * ci + cin) * h) * wd : nullptr;
              for (std::int64_t u = 0; u < kh; ++u) {
                for (std::int64_t v = 0; v < kw; ++v) {
                  const std::size_t widx = static_cast<std::size_t>(((o * cig + c) * kh + u) * kw + v);
                  const double wv = pw[widx];
                  double acc = 0.0;
                  for (std::int64_t oy = 0; oy < ho; ++oy) {
                    const std::int64_t iy = oy * stride - pad + u;
                    if (iy < 0 || iy >= h) continue;
                    const double* row = pin + iy * wd;
                    const double* grow = pg + oy * wo;
                    double* gxrow = gin_x ? gin_x + iy * wd : nullptr;
                    for (std::int64_t ox = 0; ox < wo; ++ox) {
                      const std::int64_t ix = ox * stride - pad + v;
                      if (ix < 0 || ix >= wd) continue;
                      acc += grow[ox] * row[ix];
                      if (gxrow) gxrow[ix] += grow[ox] * wv;
                    }
                  }
                  if (gw) gw[widx] += acc;
                }
              }
            }
          }
        }
      });
}

Tensor softmax(const Tensor& x, int axis, double temperature, std::span<const double> mask) {
  if (!(temperature > 0.0)) throw Error("softmax temperature must be positive");
  axis = normalize_axis(axis, x.rank());
  const auto v = axis_view(x.shape(), axis);
  if (!mask.empty() && static_cast<std::int64_t>(mask.size()) != v.n) throw ShapeError("softmax: mask length");
  std::vector<double> keep(mask.begin(), mask.end());
  const auto dx = x.data();
  std::vector<double> y(dx.size(), 0.0);
  for (std::int64_t o = 0; o < v.outer; ++o) {
    for (std::int64_t i = 0; i < v.inner; ++i) {
      const std::int64_t base = o * v.n * v.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::int64_t a = 0; a < v.n; ++a) {
        if (!keep.empty() && keep[static_cast<std::size_t>(a)] == 0.0) continue;
        mx = std::max(mx, dx[static_cast<std::size_t>(base + a * v.inner)] / temperature);
      }
      double s = 0.0;
      for (std::int64_t a = 0; a < v.n; ++a) {
        if (!keep.empty() && keep[static_cast<std::size_t>(a)] == 0.0) continue;
        const auto idx = static_cast<std::size_t>(base + a * v.inner);
        y[idx] = std::exp(dx[idx] / temperature - mx);
        s += y[idx];
      }
      for (std::int64_t a = 0; a < v.n; ++a) y[static_cast<std::size_t>(base + a * v.inner)] /= s;
    }
  }
  auto ycopy = y;
  return make_result(x.shape(), std::move(y), {x},
                     [ycopy = std::move(ycopy), v, temperature](const std::vector<double>& g, Grads& gin) {
                       for (std::int64_t o = 0; o < v.outer; ++o) {
                         for (std::int64_t i = 0; i < v.inner; ++i) {
                           const std::int64_t base = o * v.n * v.inner + i;
                           double dot = 0.0;
                           for (std::int64_t a = 0; a < v.n; ++a) {
                             const auto idx = static_cast<std::size_t>(base + a * v.inner);
                             dot += g[idx] * ycopy[idx];
                           }
                           for (std::int64_t a = 0; a < v.n; ++a) {
                             const auto idx = static_cast<std::size_t>(base + a * v.inner);
                             gin[0][idx] += ycopy[idx] * (g[idx] - dot) / temperature;
                           }
                         }
                       }
                     });
}

Tensor log_softmax(const Tensor& x, int axis, double temperature) {
  if (!(temperature > 0.0)) throw Error("softmax temperature must be positive");
  axis = normalize_axis(axis, x.rank());
  const auto v = axis_view(x.shape(), axis);
  const auto dx = x.data();
  std::vector<double> y(dx.size());
  std::vector<double> p(dx.size());
  for (std::int64_t o = 0; o < v.outer; ++o) {
    for (std::int64_t i = 0; i < v.inner; ++i) {
      const std::int64_t base = o * v.n * v.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::int64_t a = 0; a < v.n; ++a) mx = std::max(mx, dx[static_cast<std::size_t>(base + a * v.inner)] / temperature);
      double s = 0.0;
      for (std::int64_t a = 0; a < v.n; ++a) s += std::exp(dx[static_cast<std::size_t>(base + a * v.inner)] / temperature - mx);
      const double lse = mx + std::log(s);
      for (std::int64_t a = 0; a < v.n; ++a) {
        const auto idx = static_cast<std::size_t>(base + a * v.inner);
        y[idx] = dx[idx] / temperature - lse;
        p[idx] = std::exp(y[idx]);
      }
    }
  }
  return make_result(x.shape(), std::move(y), {x},
                     [p = std::move(p), v, temperature](const std::vector<double>& g, Grads& gin) {
                       for (std::int64_t o = 0; o < v.outer; ++o) {
                         for (std::int64_t i = 0; i < v.inner; ++i) {
                           const std::int64_t base = o * v.n * v.inner + i;
                           double gs = 0.0;
                           for (std::int64_t a = 0; a < v.n; ++a) gs += g[static_cast<std::size_t>(base + a * v.inner)];
                           for (std::int64_t a = 0; a < v.n; ++a) {
                             const auto idx = static_cast<std::size_t>(base + a * v.inner);
                             gin[0][idx] += (g[idx] - p[idx] * gs) / temperature;
                           }
                         }
                       }
                     });
}

Tensor layer_norm(const Tensor& x, int axis, double eps, std::span<const double> mask) {
  axis = normalize_axis(axis, x.rank());
  const auto v = axis_view(x.shape(), axis);
  if (!mask.empty() && static_cast<std::int64_t>(mask.size()) != v.n) throw ShapeError("layer_norm: mask length");
  std::vector<double> keep(static_cast<std::size_t>(v.n), 1.0);
  if (!mask.empty()) std::copy(mask.begin(), mask.end(), keep.begin());
  double kept = 0.0;
  for (double k : keep) kept += k != 0.0 ? 1.0 : 0.0;
  if (kept == 0.0) throw Error("layer_norm: every channel is masked");

  const auto dx = x.data();
  std::vector<double> y(dx.size(), 0.0);
  std::vector<double> inv_std(static_cast<std::size_t>(v.outer * v.inner));
  for (std::int64_t o = 0; o < v.outer; ++o) {
    for (std::int64_t i = 0; i < v.inner; ++i) {
      const std::int64_t base = o * v.n * v.inner + i;
      double mu = 0.0;
      for (std::int64_t a = 0; a < v.n; ++a)
        if (keep[static_cast<std::size_t>(a)] != 0.0) mu += dx[static_cast<std::size_t>(base + a * v.inner)];
      mu /= kept;
      double var = 0.0;
      for (std::int64_t a = 0; a < v.n; ++a) {
        if (keep[static_cast<std::size_t>(a)] == 0.0) continue;
        const double d = dx[static_cast<std::size_t>(base + a * v.inner)] - mu;
        var += d * d;
      }
      var /= kept;
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[static_cast<std::size_t>(o * v.inner + i)] = is;
      for (std::int64_t a = 0; a < v.n; ++a) {
        if (keep[static_cast<std::size_t>(a)] == 0.0) continue;
        const auto idx = static_cast<std::size_t>(base + a * v.inner);
        y[idx] = (dx[idx] - mu) * is;
      }
    }
  }
  auto yc = y;
  return make_result(x.shape(), std::move(y), {x},
                     [yc = std::move(yc), inv_std = std::move(inv_std), keep, kept, v](const std::vector<double>& g,
                                                                                      Grads& gin) {
                       for (std::int64_t o = 0; o < v.outer; ++o) {
                         for (std::int64_t i = 0; i < v.inner; ++i) {
                           const std::int64_t base = o * v.n * v.inner + i;
                           double mg = 0.0;
                           double mgy = 0.0;
                           for (std::int64_t a = 0; a < v.n; ++a) {
                             if (keep[static_cast<std::size_t>(a)] == 0.0) continue;
                             const auto idx = static_cast<std::size_t>(base + a * v.inner);
                             mg += g[idx];
                             mgy += g[idx] * yc[idx];
                           }
                           mg /= kept;
                           mgy /= kept;
                           const double is = inv_std[static_cast<std::size_t>(o * v.inner + i)];
                           for (std::int64_t a = 0; a < v.n; ++a) {
                             if (keep[static_cast<std::size_t>(a)] == 0.0) continue;
                             const auto idx = static_cast<std::size_t>(base + a * v.inner);
                             gin[0][idx] += is * (g[idx] - mg - yc[idx] * mgy);
                           }
                         }
                       }
                     });
}

Tensor l2_normalize(const Tensor& x, int axis, double eps) {
  axis = normalize_axis(axis, x.rank());
  const auto v = axis_view(x.shape(), axis);
  const auto dx = x.data();
  std::vector<double> y(dx.size());
  std::vector<double> norms(static_cast<std::size_t>(v.outer * v.inner));
  for (std::int64_t o = 0; o < v.outer; ++o) {
    for (std::int64_t i = 0; i < v.inner; ++i) {
      const std::int64_t base = o * v.n * v.inner + i;
      double s = eps;
      for (std::int64_t a = 0; a < v.n; ++a) {
        const double d = dx[static_cast<std::size_t>(base + a * v.inner)];
        s += d * d;
      }
      const double nrm = std::sqrt(s);
      norms[static_cast<std::size_t>(o * v.inner + i)] = nrm;
      for (std::int64_t a = 0; a < v.n; ++a) {
        const auto idx = static_cast<std::size_t>(base + a * v.inner);
        y[idx] = dx[idx] / nrm;
      }
    }
  }
  auto yc = y;
  return make_result(x.shape(), std::move(y), {x},
                     [yc = std::move(yc), norms = std::move(norms), v](const std::vector<double>& g, Grads& gin) {
                       for (std::int64_t o = 0; o < v.outer; ++o) {
                         for (std::int64_t i = 0; i < v.inner; ++i) {
                           const std::int64_t base = o * v.n * v.inner + i;
                           double dot = 0.0;
                           for (std::int64_t a = 0; a < v.n; ++a) {
                             const auto idx = static_cast<std::size_t>(base + a * v.inner);
                             dot += g[idx] * yc[idx];
                           }
                           const double nrm = norms[static_cast<std::size_t>(o * v.inner + i)];
                           for (std::int64_t a = 0; a < v.n; ++a) {
                             const auto idx = static_cast<std::size_t>(base + a * v.inner);
                             gin[0][idx] += (g[idx] - yc[idx] * dot) / nrm;
                           }
                         }
                       }
                     });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  const auto n = x.data().size();
  return make_result(Shape{}, {s}, {x}, [n](const std::vector<double>& g, Grads& gin) {
    for (std::size_t i = 0; i < n; ++i) gin[0][i] += g[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor mean_axes(const Tensor& x, std::vector<int> axes) {
  const int r = x.rank();
  std::vector<bool> reduce(static_cast<std::size_t>(r), false);
  for (int a : axes) reduce[static_cast<std::size_t>(normalize_axis(a, r))] = true;
  Shape out;
  Shape kept_shape;  // rank-r shape with reduced axes set to 1
  std::int64_t count = 1;
  for (int i = 0; i < r; ++i) {
    const auto d = x.shape()[static_cast<std::size_t>(i)];
    if (reduce[static_cast<std::size_t>(i)]) {
      count *= d;
      kept_shape.push_back(1);
    } else {
      out.push_back(d);
      kept_shape.push_back(d);
    }
  }
  const auto strides = broadcast_strides(kept_shape, x.shape());
  std::vector<double> values(static_cast<std::size_t>(out.empty() ? 1 : numel_of(out)), 0.0);
  const auto dx = x.data();
  for_each_broadcast(x.shape(), strides, strides, [&](std::int64_t k, std::int64_t io, std::int64_t) {
    values[static_cast<std::size_t>(io)] += dx[static_cast<std::size_t>(k)];
  });
  for (auto& v : values) v /= static_cast<double>(count);
  const Shape in_shape = x.shape();
  return make_result(out, std::move(values), {x},
                     [in_shape, strides, count](const std::vector<double>& g, Grads& gin) {
                       for_each_broadcast(in_shape, strides, strides, [&](std::int64_t k, std::int64_t io, std::int64_t) {
                         gin[0][static_cast<std::size_t>(k)] += g[static_cast<std::size_t>(io)] / static_cast<double>(count);
                       });
                     });
}

Tensor avg_pool2d(const Tensor& x, int kernel, int stride) {
  if (x.rank() != 4) throw ShapeError("avg_pool2d expects a 4-d input");
  if (kernel < 1 || stride < 1) throw ShapeError("avg_pool2d: invalid kernel/stride");
  const auto& s = x.shape();
  const std::int64_t nc = s[0] * s[1], h = s[2], w = s[3];
  const std::int64_t ho = (h - kernel) / stride + 1;
  const std::int64_t wo = (w - kernel) / stride + 1;
  if (ho <= 0 || wo <= 0) throw ShapeError("avg_pool2d: empty output");
  const double inv = 1.0 / static_cast<double>(kernel * kernel);
  const auto dx = x.data();
  std::vector<double> y(static_cast<std::size_t>(nc * ho * wo), 0.0);
  for (std::int64_t c = 0; c < nc; ++c)
    for (std::int64_t oy = 0; oy < ho; ++oy)
      for (std::int64_t ox = 0; ox < wo; ++ox) {
        double acc = 0.0;
        for (int u = 0; u < kernel; ++u)
          for (int v = 0; v < kernel; ++v)
            acc += dx[static_cast<std::size_t>((c * h + oy * stride + u) * w + ox * stride + v)];
        y[static_cast<std::size_t>((c * ho + oy) * wo + ox)] = acc * inv;
      }
  return make_result(Shape{s[0], s[1], ho, wo}, std::move(y), {x},
                     [nc, h, w, ho, wo, kernel, stride, inv](const std::vector<double>& g, Grads& gin) {
                       for (std::int64_t c = 0; c < nc; ++c)
                         for (std::int64_t oy = 0; oy < ho; ++oy)
                           for (std::int64_t ox = 0; ox < wo; ++ox) {
                             const double gv = g[static_cast<std::size_t>((c * ho + oy) * wo + ox)] * inv;
                             for (int u = 0; u < kernel; ++u)
                               for (int v = 0; v < kernel; ++v)
                                 gin[0][static_cast<std::size_t>((c * h + oy * stride + u) * w + ox * stride + v)] += gv;
                           }
                     });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> values(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(values), {x}, [](const std::vector<double>& g, Grads& gin) {
    for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
  });
}

Tensor permute(const Tensor& x, std::vector<int> perm) {
  const int r = x.rank();
  if (static_cast<int>(perm.size()) != r) throw ShapeError("permute: rank mismatch");
  std::vector<bool> used(static_cast<std::size_t>(r), false);
  Shape out(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    const int p = normalize_axis(perm[static_cast<std::size_t>(i)], r);
    if (used[static_cast<std::size_t>(p)]) throw ShapeError("permute: repeated axis");
    used[static_cast<std::size_t>(p)] = true;
    perm[static_cast<std::size_t>(i)] = p;
    out[static_cast<std::size_t>(i)] = x.shape()[static_cast<std::size_t>(p)];
  }
  // Strides of the source taken in output-axis order.
  std::vector<std::int64_t> src_strides(static_cast<std::size_t>(r));
  {
    std::vector<std::int64_t> st(static_cast<std::size_t>(r), 1);
    for (int i = r - 2; i >= 0; --i) st[static_cast<std::size_t>(i)] = st[static_cast<std::size_t>(i + 1)] * x.shape()[static_cast<std::size_t>(i + 1)];
    for (int i = 0; i < r; ++i) src_strides[static_cast<std::size_t>(i)] = st[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
  }
  const auto dx = x.data();
  std::vector<double> y(dx.size());
  for_each_broadcast(out, src_strides, src_strides, [&](std::int64_t k, std::int64_t is, std::int64_t) {
    y[static_cast<std::size_t>(k)] = dx[static_cast<std::size_t>(is)];
  });
  return make_result(out, std::move(y), {x}, [out, src_strides](const std::vector<double>& g, Grads& gin) {
    for_each_broadcast(out, src_strides, src_strides, [&](std::int64_t k, std::int64_t is, std::int64_t) {
      gin[0][static_cast<std::size_t>(is)] += g[static_cast<std::size_t>(k)];
    });
  });
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  const int r = xs[0].rank();
  axis = normalize_axis(axis, r);
  Shape out = xs[0].shape();
  out[static_cast<std::size_t>(axis)] = 0;
  for (const auto& t : xs) {
    if (t.rank() != r) throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < r; ++i) {
      if (i != axis && t.shape()[static_cast<std::size_t>(i)] != xs[0].shape()[static_cast<std::size_t>(i)]) {
        throw ShapeError("concat: shape mismatch " + shape_str(t.shape()) + " vs " + shape_str(xs[0].shape()));
      }
    }
    out[static_cast<std::size_t>(axis)] += t.shape()[static_cast<std::size_t>(axis)];
  }
  const auto v = axis_view(out, axis);
  std::vector<double> y(static_cast<std::size_t>(numel_of(out)));
  std::vector<std::int64_t> sizes;
  std::int64_t offset = 0;
  for (const auto& t : xs) {
    const std::int64_t nt = t.shape()[static_cast<std::size_t>(axis)];
    const auto d = t.data();
    for (std::int64_t o = 0; o < v.outer; ++o)
      for (std::int64_t a = 0; a < nt; ++a)
        for (std::int64_t i = 0; i < v.inner; ++i)
          y[static_cast<std::size_t>((o * v.n + offset + a) * v.inner + i)] = d[static_cast<std::size_t>((o * nt + a) * v.inner + i)];
    sizes.push_back(nt);
    offset += nt;
  }
  return make_result(out, std::move(y), xs, [sizes, v](const std::vector<double>& g, Grads& gin) {
    std::int64_t offset = 0;
    for (std::size_t k = 0; k < sizes.size(); ++k) {
      const std::int64_t nt = sizes[k];
      if (!gin[k].empty()) {
        for (std::int64_t o = 0; o < v.outer; ++o)
          for (std::int64_t a = 0; a < nt; ++a)
            for (std::int64_t i = 0; i < v.inner; ++i)
              gin[k][static_cast<std::size_t>((o * nt + a) * v.inner + i)] += g[static_cast<std::size_t>((o * v.n + offset + a) * v.inner + i)];
      }
      offset += nt;
    }
  });
}

Tensor gather(const Tensor& x, int axis, std::span<const std::int64_t> indices) {
  axis = normalize_axis(axis, x.rank());
  const auto v = axis_view(x.shape(), axis);
  std::vector<std::int64_t> idx(indices.begin(), indices.end());
  for (auto i : idx) {
    if (i < 0 || i >= v.n) throw ShapeError("gather: index out of range");
  }
  Shape out = x.shape();
  out[static_cast<std::size_t>(axis)] = static_cast<std::int64_t>(idx.size());
  const std::int64_t m = static_cast<std::int64_t>(idx.size());
  const auto dx = x.data();
  std::vector<double> y(static_cast<std::size_t>(v.outer * m * v.inner));
  for (std::int64_t o = 0; o < v.outer; ++o)
    for (std::int64_t a = 0; a < m; ++a)
      for (std::int64_t i = 0; i < v.inner; ++i)
        y[static_cast<std::size_t>((o * m + a) * v.inner + i)] = dx[static_cast<std::size_t>((o * v.n + idx[static_cast<std::size_t>(a)]) * v.inner + i)];
  return make_result(out, std::move(y), {x}, [idx, v, m](const std::vector<double>& g, Grads& gin) {
    for (std::int64_t o = 0; o < v.outer; ++o)
      for (std::int64_t a = 0; a < m; ++a)
        for (std::int64_t i = 0; i < v.inner; ++i)
          gin[0][static_cast<std::size_t>((o * v.n + idx[static_cast<std::size_t>(a)]) * v.inner + i)] += g[static_cast<std::size_t>((o * m + a) * v.inner + i)];
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> labels, int class_axis) {
  class_axis = normalize_axis(class_axis, logits.rank());
  const auto v = axis_view(logits.shape(), class_axis);
  if (static_cast<std::int64_t>(labels.size()) != v.outer * v.inner) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                     shape_str(logits.shape()));
  }
  const auto dx = logits.data();
  std::vector<double> p(dx.size());
  double loss = 0.0;
  for (std::int64_t o = 0; o < v.outer; ++o) {
    for (std::int64_t i = 0; i < v.inner; ++i) {
      const std::int64_t base = o * v.n * v.inner + i;
      const std::int64_t label = labels[static_cast<std::size_t>(o * v.inner + i)];
      if (label < 0 || label >= v.n) throw ShapeError("cross_entropy: label out of range");
      double mx = -std::numeric_limits<double>::infinity();
      for (std::int64_t a = 0; a < v.n; ++a) mx = std::max(mx, dx[static_cast<std::size_t>(base + a * v.inner)]);
      double s = 0.0;
      for (std::int64_t a = 0; a < v.n; ++a) s += std::exp(dx[static_cast<std::size_t>(base + a * v.inner)] - mx);
      const double lse = mx + std::log(s);
      for (std::int64_t a = 0; a < v.n; ++a) {
        const auto idx = static_cast<std::size_t>(base + a * v.inner);
        p[idx] = std::exp(dx[idx] - lse);
      }
      loss += lse - dx[static_cast<std::size_t>(base + label * v.inner)];
    }
  }
  const double count = static_cast<double>(v.outer * v.inner);
  std::vector<std::int64_t> lab(labels.begin(), labels.end());
  return make_result(Shape{}, {loss / count}, {logits},
                     [p = std::move(p), lab = std::move(lab), v, count](const std::vector<double>& g, Grads& gin) {
                       const double s = g[0] / count;
                       for (std::int64_t o = 0; o < v.outer; ++o) {
                         for (std::int64_t i = 0; i < v.inner; ++i) {
                           const std::int64_t base = o * v.n * v.inner + i;
                           const std::int64_t label = lab[static_cast<std::size_t>(o * v.inner + i)];
                           for (std::int64_t a = 0; a < v.n; ++a) {
                             const auto idx = static_cast<std::size_t>(base + a * v.inner);
                             gin[0][idx] += s * (p[idx] - (a == label ? 1.0 : 0.0));
                           }
                         }
                       }
                     });
}

Tensor kl_divergence(const Tensor& p_log, const Tensor& q_log, int axis) {
  if (p_log.shape() != q_log.shape()) {
    throw ShapeError("kl_divergence: shape mismatch " + shape_str(p_log.shape()) + " vs " + shape_str(q_log.shape()));
  }
  axis = normalize_axis(axis, p_log.rank());
  const auto v = axis_view(p_log.shape(), axis);
  Shape out;
  for (int i = 0; i < p_log.rank(); ++i)
    if (i != axis) out.push_back(p_log.shape()[static_cast<std::size_t>(i)]);
  const auto lp = p_log.data();
  const auto lq = q_log.data();
  std::vector<double> y(static_cast<std::size_t>(v.outer * v.inner), 0.0);
  for (std::int64_t o = 0; o < v.outer; ++o)
    for (std::int64_t i = 0; i < v.inner; ++i) {
      double s = 0.0;
      for (std::int64_t a = 0; a < v.n; ++a) {
        const auto idx = static_cast<std::size_t>((o * v.n + a) * v.inner + i);
        const double pv = std::exp(lp[idx]);
        if (pv > 0.0) s += pv * (lp[idx] - lq[idx]);
      }
      y[static_cast<std::size_t>(o * v.inner + i)] = s;
    }
  return make_result(out, std::move(y), {p_log, q_log}, [p_log, q_log, v](const std::vector<double>& g, Grads& gin) {
    const auto lp = p_log.data();
    const auto lq = q_log.data();
    for (std::int64_t o = 0; o < v.outer; ++o)
      for (std::int64_t i = 0; i < v.inner; ++i) {
        const double gv = g[static_cast<std::size_t>(o * v.inner + i)];
        for (std::int64_t a = 0; a < v.n; ++a) {
          const auto idx = static_cast<std::size_t>((o * v.n + a) * v.inner + i);
          const double pv = std::exp(lp[idx]);
          if (!gin[0].empty()) gin[0][idx] += gv * pv * (lp[idx] - lq[idx] + 1.0);
          if (!gin[1].empty()) gin[1][idx] -= gv * pv;
        }
      }
  });
}

}  // namespace cpd::ops
