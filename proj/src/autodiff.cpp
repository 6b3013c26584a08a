#include "qsm/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace qsm::nn {

std::size_t numel(const Shape &s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape &s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

std::vector<double> &Node::grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
}

double Tensor::item() const {
    if (size() != 1) fail(ErrorCode::InvalidInput, "item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
}

Tensor Tape::constant(Shape shape, std::vector<double> value) {
    if (numel(shape) != value.size()) fail(ErrorCode::ShapeMismatch, "constant: value size does not match shape");
    auto n = std::make_unique<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    nodes_.push_back(std::move(n));
    return Tensor(this, nodes_.back().get());
}

Tensor Tape::variable(Shape shape, std::vector<double> value) {
    Tensor t = constant(std::move(shape), std::move(value));
    t.node_->requires_grad = true;
    return t;
}

Tensor Tape::record(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                    std::function<void(Node &)> backward) {
    auto n = std::make_unique<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    for (const auto &t : inputs) {
        if (t.tape_ != this) fail(ErrorCode::InvalidInput, "tensor belongs to a different tape");
        n->inputs.push_back(t.node_);
        n->requires_grad = n->requires_grad || t.node_->requires_grad;
    }
    if (n->requires_grad) n->backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Tensor(this, nodes_.back().get());
}

void Tape::backward(const Tensor &loss) {
    if (loss.tape_ != this) fail(ErrorCode::InvalidInput, "loss belongs to a different tape");
    if (loss.size() != 1) fail(ErrorCode::InvalidInput, "backward requires a scalar loss, got " + shape_str(loss.shape()));
    loss.node_->grad_buffer()[0] += 1.0;
    // Nodes are created after their inputs, so creation order is topological.
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node &n = **it;
        if (n.backward && !n.grad.empty()) n.backward(n);
    }
}

namespace {

struct VolGeom {
    std::size_t planes; // N * C
    std::size_t n, c, x, y, z;
};

VolGeom vol_geom(const Shape &s, const char *op) {
    if (s.size() == 4) return {s[0], 1, s[0], s[1], s[2], s[3]};
    if (s.size() == 5) return {s[0] * s[1], s[0], s[1], s[2], s[3], s[4]};
    fail(ErrorCode::ShapeMismatch, std::string(op) + ": expected [C,X,Y,Z] or [N,C,X,Y,Z], got " + shape_str(s));
}

Shape with_spatial(const Shape &s, std::size_t c, std::size_t x, std::size_t y, std::size_t z) {
    if (s.size() == 4) return {c, x, y, z};
    return {s[0], c, x, y, z};
}

bool wants_grad(const Node *n) { return n->requires_grad; }

void check_same(const Tensor &a, const Tensor &b, const char *op) {
    if (a.shape() != b.shape())
        fail(ErrorCode::ShapeMismatch, std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// Range of output index o such that o + off lands in [0, n_in), clipped to [0, n_out).
inline void valid_range(long off, long n_in, long n_out, long &lo, long &hi) {
    lo = std::max(0L, -off);
    hi = std::min(n_out, n_in - off);
    if (hi < lo) hi = lo;
}

struct ConvGeom {
    std::size_t batch, ci, co, k;
    long x, y, z;    // input spatial
    long ox, oy, oz; // output spatial
    long pad;
    std::size_t stride;
};

// Stride-1 kernels. `off = a - pad` maps output index to input index.
void conv_fwd_s1(const ConvGeom &g, const double *x, const double *w, double *out) {
    const long K = static_cast<long>(g.k);
    const std::size_t in_plane = static_cast<std::size_t>(g.x * g.y * g.z);
    const std::size_t out_plane = static_cast<std::size_t>(g.ox * g.oy * g.oz);
    for (std::size_t n = 0; n < g.batch; ++n)
        for (std::size_t o = 0; o < g.co; ++o) {
            double *op = out + (n * g.co + o) * out_plane;
            for (std::size_t c = 0; c < g.ci; ++c) {
                const double *xp = x + (n * g.ci + c) * in_plane;
                const double *wp = w + (o * g.ci + c) * g.k * g.k * g.k;
                for (long a = 0; a < K; ++a) {
                    long ilo, ihi;
                    valid_range(a - g.pad, g.x, g.ox, ilo, ihi);
                    for (long i = ilo; i < ihi; ++i)
                        for (long b = 0; b < K; ++b) {
                            long jlo, jhi;
                            valid_range(b - g.pad, g.y, g.oy, jlo, jhi);
                            for (long j = jlo; j < jhi; ++j) {
                                double *orow = op + (i * g.oy + j) * g.oz;
                                const double *xrow = xp + ((i + a - g.pad) * g.y + (j + b - g.pad)) * g.z;
                                for (long e = 0; e < K; ++e) {
                                    const double wv = wp[(a * K + b) * K + e];
                                    long klo, khi;
                                    valid_range(e - g.pad, g.z, g.oz, klo, khi);
                                    const double *xs = xrow + (e - g.pad);
                                    for (long k = klo; k < khi; ++k) orow[k] += wv * xs[k];
                                }
                            }
                        }
                }
            }
        }
}

void conv_bwd_s1(const ConvGeom &g, const double *x, const double *w, const double *gout, double *gx, double *gw) {
    const long K = static_cast<long>(g.k);
    const std::size_t in_plane = static_cast<std::size_t>(g.x * g.y * g.z);
    const std::size_t out_plane = static_cast<std::size_t>(g.ox * g.oy * g.oz);
    for (std::size_t n = 0; n < g.batch; ++n)
        for (std::size_t o = 0; o < g.co; ++o) {
            const double *gp = gout + (n * g.co + o) * out_plane;
            for (std::size_t c = 0; c < g.ci; ++c) {
                const double *xp = x + (n * g.ci + c) * in_plane;
                double *gxp = gx ? gx + (n * g.ci + c) * in_plane : nullptr;
                const double *wp = w + (o * g.ci + c) * g.k * g.k * g.k;
                double *gwp = gw ? gw + (o * g.ci + c) * g.k * g.k * g.k : nullptr;
                for (long a = 0; a < K; ++a) {
                    long ilo, ihi;
                    valid_range(a - g.pad, g.x, g.ox, ilo, ihi);
                    for (long b = 0; b < K; ++b) {
                        long jlo, jhi;
                        valid_range(b - g.pad, g.y, g.oy, jlo, jhi);
                        for (long e = 0; e < K; ++e) {
                            long klo, khi;
                            valid_range(e - g.pad, g.z, g.oz, klo, khi);
                            const std::size_t widx = static_cast<std::size_t>((a * K + b) * K + e);
                            const double wv = wp[widx];
                            double acc = 0.0;
                            for (long i = ilo; i < ihi; ++i)
                                for (long j = jlo; j < jhi; ++j) {
                                    const double *grow = gp + (i * g.oy + j) * g.oz;
                                    const long xoff = ((i + a - g.pad) * g.y + (j + b - g.pad)) * g.z + (e - g.pad);
                                    const double *xs = xp + xoff;
                                    if (gwp)
                                        for (long k = klo; k < khi; ++k) acc += grow[k] * xs[k];
                                    if (gxp) {
                                        double *gxs = gxp + xoff;
                                        for (long k = klo; k < khi; ++k) gxs[k] += wv * grow[k];
                                    }
                                }
                            if (gwp) gwp[widx] += acc;
                        }
                    }
                }
            }
        }
}

// Generic strided path.
void conv_generic(const ConvGeom &g, const double *x, const double *w, double *out, const double *gout, double *gx,
                  double *gw) {
    const long K = static_cast<long>(g.k);
    const long s = static_cast<long>(g.stride);
    const std::size_t in_plane = static_cast<std::size_t>(g.x * g.y * g.z);
    const std::size_t out_plane = static_cast<std::size_t>(g.ox * g.oy * g.oz);
    for (std::size_t n = 0; n < g.batch; ++n)
        for (std::size_t o = 0; o < g.co; ++o)
            for (std::size_t c = 0; c < g.ci; ++c) {
                const std::size_t xb = (n * g.ci + c) * in_plane, ob = (n * g.co + o) * out_plane;
                const std::size_t wb = (o * g.ci + c) * g.k * g.k * g.k;
                for (long i = 0; i < g.ox; ++i)
                    for (long j = 0; j < g.oy; ++j)
                        for (long k = 0; k < g.oz; ++k) {
                            const std::size_t oidx = ob + static_cast<std::size_t>((i * g.oy + j) * g.oz + k);
                            for (long a = 0; a < K; ++a) {
                                const long ii = i * s + a - g.pad;
                                if (ii < 0 || ii >= g.x) continue;
                                for (long b = 0; b < K; ++b) {
                                    const long jj = j * s + b - g.pad;
                                    if (jj < 0 || jj >= g.y) continue;
                                    for (long e = 0; e < K; ++e) {
                                        const long kk = k * s + e - g.pad;
                                        if (kk < 0 || kk >= g.z) continue;
                                        const std::size_t xi = xb + static_cast<std::size_t>((ii * g.y + jj) * g.z + kk);
                                        const std::size_t wi = wb + static_cast<std::size_t>((a * K + b) * K + e);
                                        if (out) out[oidx] += w[wi] * x[xi];
                                        if (gx) gx[xi] += w[wi] * gout[oidx];
                                        if (gw) gw[wi] += gout[oidx] * x[xi];
                                    }
                                }
                            }
                        }
            }
}

} // namespace

Tensor conv3d(const Tensor &x, const Tensor &w, const Tensor &b, ConvOptions opts) {
    const VolGeom vg = vol_geom(x.shape(), "conv3d");
    const Shape &ws = w.shape();
    if (ws.size() != 5 || ws[2] != ws[3] || ws[3] != ws[4])
        fail(ErrorCode::ShapeMismatch, "conv3d: kernel must be [Co,Ci,K,K,K], got " + shape_str(ws));
    if (ws[1] != vg.c)
        fail(ErrorCode::ShapeMismatch, "conv3d: input has " + std::to_string(vg.c) + " channels, kernel expects " +
                                           std::to_string(ws[1]));
    if (b.size() != ws[0]) fail(ErrorCode::ShapeMismatch, "conv3d: bias size does not match output channels");
    if (opts.stride == 0) fail(ErrorCode::InvalidInput, "conv3d: stride must be positive");

    ConvGeom g{};
    g.batch = vg.n;
    g.ci = ws[1];
    g.co = ws[0];
    g.k = ws[2];
    g.x = static_cast<long>(vg.x);
    g.y = static_cast<long>(vg.y);
    g.z = static_cast<long>(vg.z);
    g.stride = opts.stride;
    const long K = static_cast<long>(g.k), s = static_cast<long>(opts.stride);
    if (opts.padding == Padding::Same) {
        if (g.k % 2 == 0) fail(ErrorCode::InvalidInput, "conv3d: same padding needs an odd kernel");
        g.pad = K / 2;
        g.ox = (g.x + s - 1) / s;
        g.oy = (g.y + s - 1) / s;
        g.oz = (g.z + s - 1) / s;
    } else {
        g.pad = 0;
        if (g.x < K || g.y < K || g.z < K) fail(ErrorCode::ShapeMismatch, "conv3d: input smaller than kernel");
        g.ox = (g.x - K) / s + 1;
        g.oy = (g.y - K) / s + 1;
        g.oz = (g.z - K) / s + 1;
    }

    const Shape oshape = with_spatial(x.shape(), g.co, static_cast<std::size_t>(g.ox), static_cast<std::size_t>(g.oy),
                                      static_cast<std::size_t>(g.oz));
    std::vector<double> out(numel(oshape));
    const std::size_t out_plane = static_cast<std::size_t>(g.ox * g.oy * g.oz);
    for (std::size_t n = 0; n < g.batch; ++n)
        for (std::size_t o = 0; o < g.co; ++o)
            std::fill_n(out.begin() + static_cast<long>((n * g.co + o) * out_plane), out_plane, b.value()[o]);
    if (g.stride == 1)
        conv_fwd_s1(g, x.value().data(), w.value().data(), out.data());
    else
        conv_generic(g, x.value().data(), w.value().data(), out.data(), nullptr, nullptr, nullptr);

    return x.tape().record(oshape, std::move(out), {x, w, b}, [g, out_plane](Node &self) {
        Node *xn = self.inputs[0], *wn = self.inputs[1], *bn = self.inputs[2];
        double *gx = wants_grad(xn) ? xn->grad_buffer().data() : nullptr;
        double *gw = wants_grad(wn) ? wn->grad_buffer().data() : nullptr;
        if (wants_grad(bn)) {
            auto &gb = bn->grad_buffer();
            for (std::size_t n = 0; n < g.batch; ++n)
                for (std::size_t o = 0; o < g.co; ++o) {
                    const double *gp = self.grad.data() + (n * g.co + o) * out_plane;
                    gb[o] += std::accumulate(gp, gp + out_plane, 0.0);
                }
        }
        if (!gx && !gw) return;
        if (g.stride == 1)
            conv_bwd_s1(g, xn->value.data(), wn->value.data(), self.grad.data(), gx, gw);
        else
            conv_generic(g, xn->value.data(), wn->value.data(), nullptr, self.grad.data(), gx, gw);
    });
}

Tensor leaky_relu(const Tensor &x, double alpha) {
    std::vector<double> out(x.size());
    const auto &v = x.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] > 0.0 ? v[i] : alpha * v[i];
    return x.tape().record(x.shape(), std::move(out), {x}, [alpha](Node &self) {
        Node *xn = self.inputs[0];
        auto &gx = xn->grad_buffer();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += xn->value[i] > 0.0 ? self.grad[i] : alpha * self.grad[i];
    });
}

Tensor downsample2(const Tensor &x) {
    const VolGeom g = vol_geom(x.shape(), "downsample2");
    if (g.x % 2 || g.y % 2 || g.z % 2)
        fail(ErrorCode::ShapeMismatch, "downsample2: spatial dims must be even, got " + shape_str(x.shape()));
    const std::size_t hx = g.x / 2, hy = g.y / 2, hz = g.z / 2;
    const Shape os = with_spatial(x.shape(), g.c, hx, hy, hz);
    std::vector<double> out(numel(os), 0.0);
    const auto &v = x.value();
    const std::size_t ip = g.x * g.y * g.z, op = hx * hy * hz;
    for (std::size_t p = 0; p < g.planes; ++p)
        for (std::size_t i = 0; i < g.x; ++i)
            for (std::size_t j = 0; j < g.y; ++j)
                for (std::size_t k = 0; k < g.z; ++k)
                    out[p * op + ((i / 2) * hy + j / 2) * hz + k / 2] += 0.125 * v[p * ip + (i * g.y + j) * g.z + k];
    return x.tape().record(os, std::move(out), {x}, [g, hy, hz, ip, op](Node &self) {
        auto &gx = self.inputs[0]->grad_buffer();
        for (std::size_t p = 0; p < g.planes; ++p)
            for (std::size_t i = 0; i < g.x; ++i)
                for (std::size_t j = 0; j < g.y; ++j)
                    for (std::size_t k = 0; k < g.z; ++k)
                        gx[p * ip + (i * g.y + j) * g.z + k] += 0.125 * self.grad[p * op + ((i / 2) * hy + j / 2) * hz + k / 2];
    });
}

Tensor upsample2(const Tensor &x) {
    const VolGeom g = vol_geom(x.shape(), "upsample2");
    const std::size_t ux = g.x * 2, uy = g.y * 2, uz = g.z * 2;
    const Shape os = with_spatial(x.shape(), g.c, ux, uy, uz);
    std::vector<double> out(numel(os));
    const auto &v = x.value();
    const std::size_t ip = g.x * g.y * g.z, op = ux * uy * uz;
    for (std::size_t p = 0; p < g.planes; ++p)
        for (std::size_t i = 0; i < ux; ++i)
            for (std::size_t j = 0; j < uy; ++j)
                for (std::size_t k = 0; k < uz; ++k)
                    out[p * op + (i * uy + j) * uz + k] = v[p * ip + ((i / 2) * g.y + j / 2) * g.z + k / 2];
    return x.tape().record(os, std::move(out), {x}, [g, uy, uz, ux, ip, op](Node &self) {
        auto &gx = self.inputs[0]->grad_buffer();
        for (std::size_t p = 0; p < g.planes; ++p)
            for (std::size_t i = 0; i < ux; ++i)
                for (std::size_t j = 0; j < uy; ++j)
                    for (std::size_t k = 0; k < uz; ++k)
                        gx[p * ip + ((i / 2) * g.y + j / 2) * g.z + k / 2] += self.grad[p * op + (i * uy + j) * uz + k];
    });
}

Tensor concat_channels(const Tensor &a, const Tensor &b) {
    const VolGeom ga = vol_geom(a.shape(), "concat_channels");
    const VolGeom gb = vol_geom(b.shape(), "concat_channels");
    if (a.shape().size() != b.shape().size() || ga.n != gb.n || ga.x != gb.x || ga.y != gb.y || ga.z != gb.z)
        fail(ErrorCode::ShapeMismatch, "concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t plane = ga.x * ga.y * ga.z;
    const Shape os = with_spatial(a.shape(), ga.c + gb.c, ga.x, ga.y, ga.z);
    std::vector<double> out;
    out.reserve(numel(os));
    for (std::size_t n = 0; n < ga.n; ++n) {
        auto ab = a.value().begin() + static_cast<long>(n * ga.c * plane);
        out.insert(out.end(), ab, ab + static_cast<long>(ga.c * plane));
        auto bb = b.value().begin() + static_cast<long>(n * gb.c * plane);
        out.insert(out.end(), bb, bb + static_cast<long>(gb.c * plane));
    }
    return a.tape().record(os, std::move(out), {a, b}, [ga, gb, plane](Node &self) {
        Node *an = self.inputs[0], *bn = self.inputs[1];
        const std::size_t ca = ga.c * plane, cb = gb.c * plane;
        for (std::size_t n = 0; n < ga.n; ++n) {
            const double *src = self.grad.data() + n * (ca + cb);
            if (wants_grad(an)) {
                double *d = an->grad_buffer().data() + n * ca;
                for (std::size_t i = 0; i < ca; ++i) d[i] += src[i];
            }
            if (wants_grad(bn)) {
                double *d = bn->grad_buffer().data() + n * cb;
                for (std::size_t i = 0; i < cb; ++i) d[i] += src[ca + i];
            }
        }
    });
}

Tensor add(const Tensor &a, const Tensor &b) {
    check_same(a, b, "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
    return a.tape().record(a.shape(), std::move(out), {a, b}, [](Node &self) {
        for (Node *in : self.inputs) {
            if (!wants_grad(in)) continue;
            auto &g = in->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

Tensor sub(const Tensor &a, const Tensor &b) {
    check_same(a, b, "sub");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
    return a.tape().record(a.shape(), std::move(out), {a, b}, [](Node &self) {
        if (wants_grad(self.inputs[0])) {
            auto &g = self.inputs[0]->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (wants_grad(self.inputs[1])) {
            auto &g = self.inputs[1]->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

Tensor scale(const Tensor &x, double c) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * x.value()[i];
    return x.tape().record(x.shape(), std::move(out), {x}, [c](Node &self) {
        auto &g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * self.grad[i];
    });
}

Tensor scalar_mul(const Tensor &s, const Tensor &x) {
    const double sv = s.item();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = sv * x.value()[i];
    return x.tape().record(x.shape(), std::move(out), {s, x}, [](Node &self) {
        Node *sn = self.inputs[0], *xn = self.inputs[1];
        if (wants_grad(sn)) {
            double acc = 0.0;
            for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * xn->value[i];
            sn->grad_buffer()[0] += acc;
        }
        if (wants_grad(xn)) {
            const double sv = sn->value[0];
            auto &g = xn->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += sv * self.grad[i];
        }
    });
}

Tensor softplus(const Tensor &x) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = x.value()[i];
        out[i] = v > 30.0 ? v : std::log1p(std::exp(v));
    }
    return x.tape().record(x.shape(), std::move(out), {x}, [](Node &self) {
        Node *xn = self.inputs[0];
        auto &g = xn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / (1.0 + std::exp(-xn->value[i]));
    });
}

Tensor sum(const Tensor &x) {
    const double s = std::accumulate(x.value().begin(), x.value().end(), 0.0);
    return x.tape().record({1}, {s}, {x}, [](Node &self) {
        auto &g = self.inputs[0]->grad_buffer();
        for (auto &v : g) v += self.grad[0];
    });
}

Tensor mean(const Tensor &x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Tensor abs(const Tensor &x) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::abs(x.value()[i]);
    return x.tape().record(x.shape(), std::move(out), {x}, [](Node &self) {
        Node *xn = self.inputs[0];
        auto &g = xn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double v = xn->value[i];
            g[i] += v > 0.0 ? self.grad[i] : (v < 0.0 ? -self.grad[i] : 0.0);
        }
    });
}

namespace {

void check_mask(const VolGeom &g, const Mask3D &m, const char *op) {
    if (m.dims() != Dims{g.x, g.y, g.z}) fail(ErrorCode::DimensionMismatch, std::string(op) + ": mask dims differ");
}

} // namespace

Tensor mask_mul(const Tensor &x, const Mask3D &m) {
    const VolGeom g = vol_geom(x.shape(), "mask_mul");
    check_mask(g, m, "mask_mul");
    const std::size_t plane = g.x * g.y * g.z;
    std::vector<double> out(x.value());
    for (std::size_t p = 0; p < g.planes; ++p)
        for (std::size_t i = 0; i < plane; ++i)
            if (!m[i]) out[p * plane + i] = 0.0;
    return x.tape().record(x.shape(), std::move(out), {x}, [g, plane, m](Node &self) {
        auto &gx = self.inputs[0]->grad_buffer();
        for (std::size_t p = 0; p < g.planes; ++p)
            for (std::size_t i = 0; i < plane; ++i)
                if (m[i]) gx[p * plane + i] += self.grad[p * plane + i];
    });
}

Tensor masked_mean_abs_diff(const Tensor &a, const Tensor &b, const Mask3D &m) {
    check_same(a, b, "masked_mean_abs_diff");
    const VolGeom g = vol_geom(a.shape(), "masked_mean_abs_diff");
    check_mask(g, m, "masked_mean_abs_diff");
    const std::size_t plane = g.x * g.y * g.z;
    const std::size_t count = m.count() * g.planes;
    if (count == 0) fail(ErrorCode::InvalidInput, "masked_mean_abs_diff: empty mask");
    double s = 0.0;
    for (std::size_t p = 0; p < g.planes; ++p)
        for (std::size_t i = 0; i < plane; ++i)
            if (m[i]) s += std::abs(a.value()[p * plane + i] - b.value()[p * plane + i]);
    const double inv = 1.0 / static_cast<double>(count);
    return a.tape().record({1}, {s * inv}, {a, b}, [g, plane, inv, m](Node &self) {
        Node *an = self.inputs[0], *bn = self.inputs[1];
        const double go = self.grad[0] * inv;
        double *ga = wants_grad(an) ? an->grad_buffer().data() : nullptr;
        double *gb = wants_grad(bn) ? bn->grad_buffer().data() : nullptr;
        for (std::size_t p = 0; p < g.planes; ++p)
            for (std::size_t i = 0; i < plane; ++i) {
                if (!m[i]) continue;
                const std::size_t n = p * plane + i;
                const double d = an->value[n] - bn->value[n];
                const double sgn = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
                if (ga) ga[n] += go * sgn;
                if (gb) gb[n] -= go * sgn;
            }
    });
}

Tensor dipole_forward(const Tensor &x, const DipoleOperator &op) {
    const VolGeom g = vol_geom(x.shape(), "dipole_forward");
    if (op.dims() != Dims{g.x, g.y, g.z}) fail(ErrorCode::DimensionMismatch, "dipole_forward: operator dims differ");
    const std::size_t plane = g.x * g.y * g.z;
    std::vector<double> out(x.size());
    for (std::size_t p = 0; p < g.planes; ++p) op.apply(x.value().data() + p * plane, out.data() + p * plane);
    return x.tape().record(x.shape(), std::move(out), {x}, [g, plane, op](Node &self) {
        auto &gx = self.inputs[0]->grad_buffer();
        std::vector<double> tmp(plane);
        for (std::size_t p = 0; p < g.planes; ++p) {
            op.apply(self.grad.data() + p * plane, tmp.data());
            for (std::size_t i = 0; i < plane; ++i) gx[p * plane + i] += tmp[i];
        }
    });
}

Tensor pad_spatial(const Tensor &x, std::array<std::size_t, 3> before, std::array<std::size_t, 3> after) {
    const VolGeom g = vol_geom(x.shape(), "pad_spatial");
    const std::size_t px = g.x + before[0] + after[0], py = g.y + before[1] + after[1], pz = g.z + before[2] + after[2];
    const Shape os = with_spatial(x.shape(), g.c, px, py, pz);
    std::vector<double> out(numel(os), 0.0);
    const std::size_t ip = g.x * g.y * g.z, op = px * py * pz;
    for (std::size_t p = 0; p < g.planes; ++p)
        for (std::size_t i = 0; i < g.x; ++i)
            for (std::size_t j = 0; j < g.y; ++j)
                std::copy_n(x.value().begin() + static_cast<long>(p * ip + (i * g.y + j) * g.z), g.z,
                            out.begin() + static_cast<long>(p * op + ((i + before[0]) * py + j + before[1]) * pz + before[2]));
    return x.tape().record(os, std::move(out), {x}, [g, before, py, pz, ip, op](Node &self) {
        auto &gx = self.inputs[0]->grad_buffer();
        for (std::size_t p = 0; p < g.planes; ++p)
            for (std::size_t i = 0; i < g.x; ++i)
                for (std::size_t j = 0; j < g.y; ++j) {
                    const double *src = self.grad.data() + p * op + ((i + before[0]) * py + j + before[1]) * pz + before[2];
                    double *dst = gx.data() + p * ip + (i * g.y + j) * g.z;
                    for (std::size_t k = 0; k < g.z; ++k) dst[k] += src[k];
                }
    });
}

Tensor crop_spatial(const Tensor &x, std::array<std::size_t, 3> begin, std::array<std::size_t, 3> extent) {
    const VolGeom g = vol_geom(x.shape(), "crop_spatial");
    if (begin[0] + extent[0] > g.x || begin[1] + extent[1] > g.y || begin[2] + extent[2] > g.z)
        fail(ErrorCode::ShapeMismatch, "crop_spatial: window exceeds " + shape_str(x.shape()));
    const Shape os = with_spatial(x.shape(), g.c, extent[0], extent[1], extent[2]);
    std::vector<double> out(numel(os));
    const std::size_t ip = g.x * g.y * g.z, op = extent[0] * extent[1] * extent[2];
    for (std::size_t p = 0; p < g.planes; ++p)
        for (std::size_t i = 0; i < extent[0]; ++i)
            for (std::size_t j = 0; j < extent[1]; ++j)
                std::copy_n(x.value().begin() + static_cast<long>(p * ip + ((i + begin[0]) * g.y + j + begin[1]) * g.z + begin[2]),
                            extent[2], out.begin() + static_cast<long>(p * op + (i * extent[1] + j) * extent[2]));
    return x.tape().record(os, std::move(out), {x}, [g, begin, extent, ip, op](Node &self) {
        auto &gx = self.inputs[0]->grad_buffer();
        for (std::size_t p = 0; p < g.planes; ++p)
            for (std::size_t i = 0; i < extent[0]; ++i)
                for (std::size_t j = 0; j < extent[1]; ++j) {
                    const double *src = self.grad.data() + p * op + (i * extent[1] + j) * extent[2];
                    double *dst = gx.data() + p * ip + ((i + begin[0]) * g.y + j + begin[1]) * g.z + begin[2];
                    for (std::size_t k = 0; k < extent[2]; ++k) dst[k] += src[k];
                }
    });
}

Tensor from_volume(Tape &t, const Volume3D &v, bool requires_grad) {
    const Dims &d = v.dims();
    Shape s{1, d.nx, d.ny, d.nz};
    return requires_grad ? t.variable(s, v.values()) : t.constant(s, v.values());
}

Volume3D to_volume(const Tensor &x, VoxelSize voxel) {
    const VolGeom g = vol_geom(x.shape(), "to_volume");
    if (g.planes != 1) fail(ErrorCode::ShapeMismatch, "to_volume: expected a single channel, got " + shape_str(x.shape()));
    return Volume3D(Dims{g.x, g.y, g.z}, voxel, x.value());
}

} // namespace qsm::nn
