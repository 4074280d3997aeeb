#include "zskd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <utility>

#include "zskd/parallel.hpp"

namespace zskd {

int64_t shape_size(const Shape& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

int conv_out_dim(int in, int k, int stride, Padding padding) {
    if (stride < 1) throw ParameterError("conv: stride must be >= 1");
    if (padding == Padding::Valid) {
        if (in < k) {
            throw DimensionError("conv: input extent " + std::to_string(in) +
                                 " smaller than kernel " + std::to_string(k));
        }
        return (in - k) / stride + 1;
    }
    return (in + stride - 1) / stride;  // ceil(in / stride)
}

namespace {

void validate_shape(const Shape& shape) {
    for (int d : shape) {
        if (d <= 0) throw DimensionError("tensor: non-positive dimension in " + shape_str(shape));
    }
}

// One vectorizable pass; a NaN/Inf anywhere poisons the |x| sum.
void check_finite(const char* op, std::span<const double> v) {
    double acc = 0.0;
    for (double x : v) acc += std::fabs(x);
    if (!std::isfinite(acc)) {
        throw NumericError(std::string(op) + ": non-finite value in output");
    }
}

std::shared_ptr<detail::Node> make_node(Shape shape, std::vector<double> data) {
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    return n;
}

}  // namespace

Tensor make_op_output(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                      std::function<void(detail::Node&)> backprop, const char* op_name) {
    check_finite(op_name, data);
    auto n = make_node(std::move(shape), std::move(data));
    bool needs = false;
    for (const Tensor& p : parents) needs = needs || p.node()->needs_grad;
    if (needs) {
        n->needs_grad = true;
        n->parents.reserve(parents.size());
        for (Tensor& p : parents) n->parents.push_back(p.node_ptr());
        n->backprop = std::move(backprop);
    }
    return Tensor(std::move(n));
}

// ---- Tensor basics ----

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    validate_shape(shape);
    int64_t n = shape_size(shape);
    auto node = make_node(std::move(shape), std::vector<double>(n, value));
    node->requires_grad = requires_grad;
    node->needs_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    validate_shape(shape);
    if (shape_size(shape) != static_cast<int64_t>(data.size())) {
        throw DimensionError("tensor: shape " + shape_str(shape) + " does not match data length " +
                             std::to_string(data.size()));
    }
    auto node = make_node(std::move(shape), std::move(data));
    node->requires_grad = requires_grad;
    node->needs_grad = requires_grad;
    return Tensor(std::move(node));
}

double Tensor::item() const {
    if (size() != 1) throw DimensionError("item: tensor is not scalar, shape " + shape_str(shape()));
    return node()->data[0];
}

std::span<double> Tensor::mutable_data() {
    if (!is_leaf()) throw StateError("tensor: op outputs are immutable");
    return node()->data;
}

void Tensor::set_requires_grad(bool rg) {
    if (!is_leaf()) throw StateError("tensor: requires_grad can only be toggled on leaves");
    node()->requires_grad = rg;
    node()->needs_grad = rg;
}

std::span<const double> Tensor::grad() const {
    if (node()->grad.empty()) throw StateError("tensor: gradient not populated; call backward first");
    return node()->grad;
}

std::span<double> Tensor::mutable_grad() {
    if (node()->grad.empty()) throw StateError("tensor: gradient not populated; call backward first");
    return node()->grad;
}

void Tensor::zero_grad() {
    auto& g = node()->grad;
    std::fill(g.begin(), g.end(), 0.0);
}

// ---- conv2d ----

namespace {

struct ConvGeom {
    int B, H, W, Ci, KH, KW, Co, stride, Ho, Wo, pad_top, pad_left;
    bool batched;
};

ConvGeom conv_geometry(const Tensor& input, const Tensor& kernels, int stride, Padding padding) {
    const Shape& is = input.shape();
    const Shape& ks = kernels.shape();
    if (ks.size() != 4) {
        throw DimensionError("conv2d: kernels must be [kh,kw,Cin,Cout], got " + shape_str(ks));
    }
    ConvGeom g{};
    g.batched = is.size() == 4;
    if (is.size() == 3) {
        g.B = 1; g.H = is[0]; g.W = is[1]; g.Ci = is[2];
    } else if (is.size() == 4) {
        g.B = is[0]; g.H = is[1]; g.W = is[2]; g.Ci = is[3];
    } else {
        throw DimensionError("conv2d: input must be [H,W,Cin] or [B,H,W,Cin], got " + shape_str(is));
    }
    g.KH = ks[0]; g.KW = ks[1]; g.Co = ks[3]; g.stride = stride;
    if (ks[2] != g.Ci) {
        throw DimensionError("conv2d: input has " + std::to_string(g.Ci) + " channels but kernels expect " +
                             std::to_string(ks[2]));
    }
    g.Ho = conv_out_dim(g.H, g.KH, stride, padding);
    g.Wo = conv_out_dim(g.W, g.KW, stride, padding);
    if (padding == Padding::Same) {
        int pad_h = std::max((g.Ho - 1) * stride + g.KH - g.H, 0);
        int pad_w = std::max((g.Wo - 1) * stride + g.KW - g.W, 0);
        g.pad_top = pad_h / 2;
        g.pad_left = pad_w / 2;
    }
    return g;
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias, int stride,
              Padding padding) {
    ConvGeom g = conv_geometry(input, kernels, stride, padding);
    if (bias.shape() != Shape{g.Co}) {
        throw DimensionError("conv2d: bias must be [Cout]=" + std::to_string(g.Co) + ", got " +
                             shape_str(bias.shape()));
    }

    const double* in = input.data().data();
    const double* K = kernels.data().data();
    const double* b = bias.data().data();
    const int B = g.B, H = g.H, W = g.W, Ci = g.Ci, KH = g.KH, KW = g.KW, Co = g.Co;
    const int Ho = g.Ho, Wo = g.Wo, s = g.stride, pt = g.pad_top, pl = g.pad_left;

    std::vector<double> out(static_cast<size_t>(B) * Ho * Wo * Co);
    parallel_chunks([&](int chunk) {
        ChunkRange r = chunk_range(B, chunk);
        std::vector<double> acc(Co);
        for (int64_t bi = r.begin; bi < r.end; ++bi) {
            const double* inb = in + bi * H * W * Ci;
            double* outb = out.data() + bi * Ho * Wo * Co;
            for (int ho = 0; ho < Ho; ++ho) {
                for (int wo = 0; wo < Wo; ++wo) {
                    std::memcpy(acc.data(), b, sizeof(double) * Co);
                    for (int kh = 0; kh < KH; ++kh) {
                        int hi = ho * s + kh - pt;
                        if (hi < 0 || hi >= H) continue;
                        for (int kw = 0; kw < KW; ++kw) {
                            int wi = wo * s + kw - pl;
                            if (wi < 0 || wi >= W) continue;
                            const double* ip = inb + (hi * W + wi) * Ci;
                            const double* kp = K + ((kh * KW + kw) * Ci) * Co;
                            for (int ci = 0; ci < Ci; ++ci) {
                                double v = ip[ci];
                                const double* kc = kp + ci * Co;
                                for (int co = 0; co < Co; ++co) acc[co] += v * kc[co];
                            }
                        }
                    }
                    std::memcpy(outb + (ho * Wo + wo) * Co, acc.data(), sizeof(double) * Co);
                }
            }
        }
    });

    Shape out_shape = g.batched ? Shape{B, Ho, Wo, Co} : Shape{Ho, Wo, Co};
    auto backprop = [g, input, kernels, bias](detail::Node& self) {
        const int B = g.B, H = g.H, W = g.W, Ci = g.Ci, KH = g.KH, KW = g.KW, Co = g.Co;
        const int Ho = g.Ho, Wo = g.Wo, s = g.stride, pt = g.pad_top, pl = g.pad_left;
        const double* go = self.grad.data();
        const double* in = input.data().data();
        const double* K = kernels.data().data();

        if (input.node()->needs_grad) {
            auto* inode = input.node();
            inode->ensure_grad();
            double* gi = inode->grad.data();
            parallel_chunks([&](int chunk) {
                ChunkRange r = chunk_range(B, chunk);
                for (int64_t bi = r.begin; bi < r.end; ++bi) {
                    const double* gob = go + bi * Ho * Wo * Co;
                    double* gib = gi + bi * H * W * Ci;
                    for (int ho = 0; ho < Ho; ++ho) {
                        for (int wo = 0; wo < Wo; ++wo) {
                            const double* gp = gob + (ho * Wo + wo) * Co;
                            for (int kh = 0; kh < KH; ++kh) {
                                int hi = ho * s + kh - pt;
                                if (hi < 0 || hi >= H) continue;
                                for (int kw = 0; kw < KW; ++kw) {
                                    int wi = wo * s + kw - pl;
                                    if (wi < 0 || wi >= W) continue;
                                    double* gip = gib + (hi * W + wi) * Ci;
                                    const double* kp = K + ((kh * KW + kw) * Ci) * Co;
                                    for (int ci = 0; ci < Ci; ++ci) {
                                        const double* kc = kp + ci * Co;
                                        double acc = 0.0;
                                        for (int co = 0; co < Co; ++co) acc += gp[co] * kc[co];
                                        gip[ci] += acc;
                                    }
                                }
                            }
                        }
                    }
                }
            });
        }
        if (kernels.node()->needs_grad) {
            auto* knode = kernels.node();
            knode->ensure_grad();
            const int64_t ksize = knode->size();
            std::vector<std::vector<double>> scratch(kChunkCount);
            parallel_chunks([&](int chunk) {
                ChunkRange r = chunk_range(B, chunk);
                if (r.begin >= r.end) return;
                auto& sk = scratch[chunk];
                sk.assign(ksize, 0.0);
                for (int64_t bi = r.begin; bi < r.end; ++bi) {
                    const double* inb = in + bi * H * W * Ci;
                    const double* gob = go + bi * Ho * Wo * Co;
                    for (int ho = 0; ho < Ho; ++ho) {
                        for (int wo = 0; wo < Wo; ++wo) {
                            const double* gp = gob + (ho * Wo + wo) * Co;
                            for (int kh = 0; kh < KH; ++kh) {
                                int hi = ho * s + kh - pt;
                                if (hi < 0 || hi >= H) continue;
                                for (int kw = 0; kw < KW; ++kw) {
                                    int wi = wo * s + kw - pl;
                                    if (wi < 0 || wi >= W) continue;
                                    const double* ip = inb + (hi * W + wi) * Ci;
                                    double* sp = sk.data() + ((kh * KW + kw) * Ci) * Co;
                                    for (int ci = 0; ci < Ci; ++ci) {
                                        double v = ip[ci];
                                        double* sc = sp + ci * Co;
                                        for (int co = 0; co < Co; ++co) sc[co] += v * gp[co];
                                    }
                                }
                            }
                        }
                    }
                }
            });
            double* gk = knode->grad.data();
            for (int chunk = 0; chunk < kChunkCount; ++chunk) {
                if (scratch[chunk].empty()) continue;
                const double* sk = scratch[chunk].data();
                for (int64_t i = 0; i < ksize; ++i) gk[i] += sk[i];
            }
        }
        if (bias.node()->needs_grad) {
            auto* bnode = bias.node();
            bnode->ensure_grad();
            std::vector<std::vector<double>> scratch(kChunkCount);
            parallel_chunks([&](int chunk) {
                ChunkRange r = chunk_range(B, chunk);
                if (r.begin >= r.end) return;
                auto& sb = scratch[chunk];
                sb.assign(Co, 0.0);
                const double* p = go + r.begin * Ho * Wo * Co;
                for (int64_t i = 0; i < (r.end - r.begin) * Ho * Wo; ++i) {
                    for (int co = 0; co < Co; ++co) sb[co] += p[i * Co + co];
                }
            });
            double* gb = bnode->grad.data();
            for (int chunk = 0; chunk < kChunkCount; ++chunk) {
                if (scratch[chunk].empty()) continue;
                for (int co = 0; co < Co; ++co) gb[co] += scratch[chunk][co];
            }
        }
    };
    return make_op_output(std::move(out_shape), std::move(out), {input, kernels, bias},
                          std::move(backprop), "conv2d");
}

// ---- maxpool2d ----

Tensor maxpool2d(const Tensor& input, int k, int stride) {
    const Shape& is = input.shape();
    bool batched = is.size() == 4;
    if (is.size() != 3 && is.size() != 4) {
        throw DimensionError("maxpool2d: input must be [H,W,C] or [B,H,W,C], got " + shape_str(is));
    }
    if (k < 1 || stride < 1) throw ParameterError("maxpool2d: k and stride must be >= 1");
    const int B = batched ? is[0] : 1;
    const int H = batched ? is[1] : is[0];
    const int W = batched ? is[2] : is[1];
    const int C = batched ? is[3] : is[2];
    if (k > H || k > W) {
        throw DimensionError("maxpool2d: window " + std::to_string(k) + " exceeds input " +
                             std::to_string(H) + "x" + std::to_string(W));
    }
    const int Ho = (H - k) / stride + 1;
    const int Wo = (W - k) / stride + 1;

    const double* in = input.data().data();
    std::vector<double> out(static_cast<size_t>(B) * Ho * Wo * C);
    auto argmax = std::make_shared<std::vector<int64_t>>(out.size());
    parallel_chunks([&](int chunk) {
        ChunkRange r = chunk_range(B, chunk);
        for (int64_t bi = r.begin; bi < r.end; ++bi) {
            const double* inb = in + bi * H * W * C;
            for (int ho = 0; ho < Ho; ++ho) {
                for (int wo = 0; wo < Wo; ++wo) {
                    for (int c = 0; c < C; ++c) {
                        double best = -std::numeric_limits<double>::infinity();
                        int64_t best_idx = -1;
                        for (int kh = 0; kh < k; ++kh) {
                            for (int kw = 0; kw < k; ++kw) {
                                int64_t idx = ((int64_t)(ho * stride + kh) * W + (wo * stride + kw)) * C + c;
                                double v = inb[idx];
                                if (v > best) {  // strict: first max wins ties
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                        int64_t o = ((int64_t)(bi * Ho + ho) * Wo + wo) * C + c;
                        out[o] = best;
                        (*argmax)[o] = bi * H * W * C + best_idx;
                    }
                }
            }
        }
    });

    Shape out_shape = batched ? Shape{B, Ho, Wo, C} : Shape{Ho, Wo, C};
    const int64_t per_sample_out = static_cast<int64_t>(Ho) * Wo * C;
    auto backprop = [input, argmax, B, per_sample_out](detail::Node& self) {
        if (!input.node()->needs_grad) return;
        auto* inode = input.node();
        inode->ensure_grad();
        double* gi = inode->grad.data();
        const double* go = self.grad.data();
        parallel_chunks([&](int chunk) {
            ChunkRange r = chunk_range(B, chunk);
            for (int64_t o = r.begin * per_sample_out; o < r.end * per_sample_out; ++o) {
                gi[(*argmax)[o]] += go[o];
            }
        });
    };
    return make_op_output(std::move(out_shape), std::move(out), {input}, std::move(backprop),
                          "maxpool2d");
}

// ---- dense ----

Tensor dense(const Tensor& input, const Tensor& weight, const Tensor& bias) {
    const Shape& is = input.shape();
    const Shape& ws = weight.shape();
    if (ws.size() != 2) throw DimensionError("dense: weight must be [n,m], got " + shape_str(ws));
    bool batched = is.size() == 2;
    if (is.size() != 1 && is.size() != 2) {
        throw DimensionError("dense: input must be [n] or [B,n], got " + shape_str(is));
    }
    const int B = batched ? is[0] : 1;
    const int N = batched ? is[1] : is[0];
    const int M = ws[1];
    if (ws[0] != N) {
        throw DimensionError("dense: input length " + std::to_string(N) +
                             " does not match weight rows " + std::to_string(ws[0]));
    }
    if (bias.shape() != Shape{M}) {
        throw DimensionError("dense: bias must be [m]=" + std::to_string(M) + ", got " +
                             shape_str(bias.shape()));
    }

    const double* in = input.data().data();
    const double* Wp = weight.data().data();
    const double* bp = bias.data().data();
    std::vector<double> out(static_cast<size_t>(B) * M);
    parallel_chunks([&](int chunk) {
        ChunkRange r = chunk_range(B, chunk);
        for (int64_t bi = r.begin; bi < r.end; ++bi) {
            double* ob = out.data() + bi * M;
            std::memcpy(ob, bp, sizeof(double) * M);
            const double* ib = in + bi * N;
            for (int i = 0; i < N; ++i) {
                double v = ib[i];
                const double* wr = Wp + (int64_t)i * M;
                for (int j = 0; j < M; ++j) ob[j] += v * wr[j];
            }
        }
    });

    Shape out_shape = batched ? Shape{B, M} : Shape{M};
    auto backprop = [input, weight, bias, B, N, M](detail::Node& self) {
        const double* go = self.grad.data();
        const double* in = input.data().data();
        const double* Wp = weight.data().data();
        if (input.node()->needs_grad) {
            auto* inode = input.node();
            inode->ensure_grad();
            double* gi = inode->grad.data();
            parallel_chunks([&](int chunk) {
                ChunkRange r = chunk_range(B, chunk);
                for (int64_t bi = r.begin; bi < r.end; ++bi) {
                    const double* gb = go + bi * M;
                    double* gib = gi + bi * N;
                    for (int i = 0; i < N; ++i) {
                        const double* wr = Wp + (int64_t)i * M;
                        double acc = 0.0;
                        for (int j = 0; j < M; ++j) acc += gb[j] * wr[j];
                        gib[i] += acc;
                    }
                }
            });
        }
        if (weight.node()->needs_grad) {
            auto* wnode = weight.node();
            wnode->ensure_grad();
            const int64_t wsize = wnode->size();
            std::vector<std::vector<double>> scratch(kChunkCount);
            parallel_chunks([&](int chunk) {
                ChunkRange r = chunk_range(B, chunk);
                if (r.begin >= r.end) return;
                auto& sw = scratch[chunk];
                sw.assign(wsize, 0.0);
                for (int64_t bi = r.begin; bi < r.end; ++bi) {
                    const double* ib = in + bi * N;
                    const double* gb = go + bi * M;
                    for (int i = 0; i < N; ++i) {
                        double v = ib[i];
                        if (v == 0.0) continue;
                        double* sr = sw.data() + (int64_t)i * M;
                        for (int j = 0; j < M; ++j) sr[j] += v * gb[j];
                    }
                }
            });
            double* gw = wnode->grad.data();
            for (int chunk = 0; chunk < kChunkCount; ++chunk) {
                if (scratch[chunk].empty()) continue;
                const double* sw = scratch[chunk].data();
                for (int64_t i = 0; i < wsize; ++i) gw[i] += sw[i];
            }
        }
        if (bias.node()->needs_grad) {
            auto* bnode = bias.node();
            bnode->ensure_grad();
            double* gb = bnode->grad.data();
            for (int64_t bi = 0; bi < B; ++bi) {
                const double* gr = go + bi * M;
                for (int j = 0; j < M; ++j) gb[j] += gr[j];
            }
        }
    };
    return make_op_output(std::move(out_shape), std::move(out), {input, weight, bias},
                          std::move(backprop), "dense");
}

// ---- elementwise ----

Tensor relu(const Tensor& input) {
    std::vector<double> out(input.size());
    const double* in = input.data().data();
    for (int64_t i = 0; i < input.size(); ++i) out[i] = in[i] > 0.0 ? in[i] : 0.0;
    auto backprop = [input](detail::Node& self) {
        if (!input.node()->needs_grad) return;
        auto* inode = input.node();
        inode->ensure_grad();
        double* gi = inode->grad.data();
        const double* go = self.grad.data();
        const double* in = input.data().data();
        for (int64_t i = 0; i < self.size(); ++i) {
            if (in[i] > 0.0) gi[i] += go[i];
        }
    };
    return make_op_output(input.shape(), std::move(out), {input}, std::move(backprop), "relu");
}

namespace {

struct RowView {
    int64_t rows;
    int64_t cols;
};

RowView row_view(const Tensor& t, const char* op) {
    const Shape& s = t.shape();
    if (s.size() == 1) return {1, s[0]};
    if (s.size() == 2) return {s[0], s[1]};
    throw DimensionError(std::string(op) + ": expected [K] or [B,K], got " + shape_str(s));
}

}  // namespace

Tensor softmax_t(const Tensor& logits, double tau) {
    if (!(tau > 0.0)) throw ParameterError("softmax_t: temperature must be positive");
    RowView rv = row_view(logits, "softmax_t");
    const double* in = logits.data().data();
    std::vector<double> out(logits.size());
    for (int64_t r = 0; r < rv.rows; ++r) {
        const double* x = in + r * rv.cols;
        double* y = out.data() + r * rv.cols;
        double mx = x[0];
        for (int64_t i = 1; i < rv.cols; ++i) mx = std::max(mx, x[i]);
        double z = 0.0;
        for (int64_t i = 0; i < rv.cols; ++i) {
            y[i] = std::exp((x[i] - mx) / tau);
            z += y[i];
        }
        for (int64_t i = 0; i < rv.cols; ++i) y[i] /= z;
    }
    auto backprop = [logits, rv, tau](detail::Node& self) {
        if (!logits.node()->needs_grad) return;
        auto* lnode = logits.node();
        lnode->ensure_grad();
        double* gl = lnode->grad.data();
        const double* go = self.grad.data();
        const double* sm = self.data.data();
        for (int64_t r = 0; r < rv.rows; ++r) {
            const double* g = go + r * rv.cols;
            const double* s = sm + r * rv.cols;
            double* gx = gl + r * rv.cols;
            double dot = 0.0;
            for (int64_t i = 0; i < rv.cols; ++i) dot += g[i] * s[i];
            for (int64_t i = 0; i < rv.cols; ++i) gx[i] += s[i] * (g[i] - dot) / tau;
        }
    };
    return make_op_output(logits.shape(), std::move(out), {logits}, std::move(backprop),
                          "softmax_t");
}

namespace {

void validate_probability_rows(const Tensor& t, RowView rv, const char* role) {
    const double* p = t.data().data();
    for (int64_t r = 0; r < rv.rows; ++r) {
        double s = 0.0;
        for (int64_t i = 0; i < rv.cols; ++i) {
            double v = p[r * rv.cols + i];
            if (v < 0.0) {
                throw DomainError(std::string("cross_entropy: negative entry in ") + role);
            }
            s += v;
        }
        if (std::fabs(s - 1.0) > 1e-6) {
            throw DomainError(std::string("cross_entropy: ") + role + " row " + std::to_string(r) +
                              " sums to " + std::to_string(s) + ", not 1");
        }
    }
}

}  // namespace

Tensor cross_entropy(const Tensor& target, const Tensor& predicted) {
    if (target.shape() != predicted.shape()) {
        throw DimensionError("cross_entropy: target " + shape_str(target.shape()) +
                             " vs predicted " + shape_str(predicted.shape()));
    }
    RowView rv = row_view(target, "cross_entropy");
    validate_probability_rows(target, rv, "target");
    validate_probability_rows(predicted, rv, "predicted");

    const double* t = target.data().data();
    const double* p = predicted.data().data();
    double loss = 0.0;
    for (int64_t i = 0; i < target.size(); ++i) {
        if (t[i] != 0.0) loss -= t[i] * std::log(p[i] + kLogEpsilon);
    }
    loss /= static_cast<double>(rv.rows);

    const double inv_rows = 1.0 / static_cast<double>(rv.rows);
    auto backprop = [target, predicted, inv_rows](detail::Node& self) {
        const double g = self.grad[0] * inv_rows;
        const double* t = target.data().data();
        const double* p = predicted.data().data();
        if (predicted.node()->needs_grad) {
            auto* pnode = predicted.node();
            pnode->ensure_grad();
            double* gp = pnode->grad.data();
            for (int64_t i = 0; i < predicted.size(); ++i) {
                if (t[i] != 0.0) gp[i] -= g * t[i] / (p[i] + kLogEpsilon);
            }
        }
        if (target.node()->needs_grad) {
            auto* tnode = target.node();
            tnode->ensure_grad();
            double* gt = tnode->grad.data();
            for (int64_t i = 0; i < target.size(); ++i) {
                gt[i] -= g * std::log(p[i] + kLogEpsilon);
            }
        }
    };
    return make_op_output({1}, {loss}, {target, predicted}, std::move(backprop), "cross_entropy");
}

Tensor mse(const Tensor& target, const Tensor& predicted) {
    if (target.shape() != predicted.shape()) {
        throw DimensionError("mse: target " + shape_str(target.shape()) + " vs predicted " +
                             shape_str(predicted.shape()));
    }
    RowView rv = row_view(target, "mse");
    const double* t = target.data().data();
    const double* p = predicted.data().data();
    double loss = 0.0;
    for (int64_t i = 0; i < target.size(); ++i) {
        double d = p[i] - t[i];
        loss += d * d;
    }
    loss /= static_cast<double>(rv.rows);

    const double inv_rows = 1.0 / static_cast<double>(rv.rows);
    auto backprop = [target, predicted, inv_rows](detail::Node& self) {
        const double g = self.grad[0] * inv_rows;
        const double* t = target.data().data();
        const double* p = predicted.data().data();
        if (predicted.node()->needs_grad) {
            auto* pnode = predicted.node();
            pnode->ensure_grad();
            double* gp = pnode->grad.data();
            for (int64_t i = 0; i < predicted.size(); ++i) gp[i] += g * 2.0 * (p[i] - t[i]);
        }
        if (target.node()->needs_grad) {
            auto* tnode = target.node();
            tnode->ensure_grad();
            double* gt = tnode->grad.data();
            for (int64_t i = 0; i < target.size(); ++i) gt[i] -= g * 2.0 * (p[i] - t[i]);
        }
    };
    return make_op_output({1}, {loss}, {target, predicted}, std::move(backprop), "mse");
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    std::vector<double> out(a.size());
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (int64_t i = 0; i < a.size(); ++i) out[i] = pa[i] + pb[i];
    auto backprop = [a, b](detail::Node& self) {
        const double* go = self.grad.data();
        for (const Tensor& t : {a, b}) {
            if (!t.node()->needs_grad) continue;
            auto* n = t.node();
            n->ensure_grad();
            double* g = n->grad.data();
            for (int64_t i = 0; i < self.size(); ++i) g[i] += go[i];
        }
    };
    return make_op_output(a.shape(), std::move(out), {a, b}, std::move(backprop), "add");
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    std::vector<double> out(a.size());
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (int64_t i = 0; i < a.size(); ++i) out[i] = pa[i] * pb[i];
    auto backprop = [a, b](detail::Node& self) {
        const double* go = self.grad.data();
        const double* pa = a.data().data();
        const double* pb = b.data().data();
        if (a.node()->needs_grad) {
            auto* n = a.node();
            n->ensure_grad();
            double* g = n->grad.data();
            for (int64_t i = 0; i < self.size(); ++i) g[i] += go[i] * pb[i];
        }
        if (b.node()->needs_grad) {
            auto* n = b.node();
            n->ensure_grad();
            double* g = n->grad.data();
            for (int64_t i = 0; i < self.size(); ++i) g[i] += go[i] * pa[i];
        }
    };
    return make_op_output(a.shape(), std::move(out), {a, b}, std::move(backprop), "mul");
}

Tensor scalar_mul(const Tensor& a, double s) {
    if (!std::isfinite(s)) throw ParameterError("scalar_mul: non-finite scalar");
    std::vector<double> out(a.size());
    const double* pa = a.data().data();
    for (int64_t i = 0; i < a.size(); ++i) out[i] = pa[i] * s;
    auto backprop = [a, s](detail::Node& self) {
        if (!a.node()->needs_grad) return;
        auto* n = a.node();
        n->ensure_grad();
        double* g = n->grad.data();
        const double* go = self.grad.data();
        for (int64_t i = 0; i < self.size(); ++i) g[i] += go[i] * s;
    };
    return make_op_output(a.shape(), std::move(out), {a}, std::move(backprop), "scalar_mul");
}

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    auto backprop = [a](detail::Node& self) {
        if (!a.node()->needs_grad) return;
        auto* n = a.node();
        n->ensure_grad();
        double* g = n->grad.data();
        const double go = self.grad[0];
        for (int64_t i = 0; i < a.size(); ++i) g[i] += go;
    };
    return make_op_output({1}, {s}, {a}, std::move(backprop), "sum");
}

Tensor flatten(const Tensor& a) {
    const Shape& s = a.shape();
    Shape out_shape;
    if (s.size() == 4) {
        out_shape = {s[0], s[1] * s[2] * s[3]};
    } else if (s.size() == 3) {
        out_shape = {s[0] * s[1] * s[2]};
    } else {
        throw DimensionError("flatten: expected rank 3 or 4, got " + shape_str(s));
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    auto backprop = [a](detail::Node& self) {
        if (!a.node()->needs_grad) return;
        auto* n = a.node();
        n->ensure_grad();
        double* g = n->grad.data();
        const double* go = self.grad.data();
        for (int64_t i = 0; i < self.size(); ++i) g[i] += go[i];
    };
    return make_op_output(std::move(out_shape), std::move(out), {a}, std::move(backprop),
                          "flatten");
}

// ---- backward ----

void backward(const Tensor& loss) {
    detail::Node* root = loss.node();
    if (root->size() != 1) {
        throw DimensionError("backward: loss must be scalar, shape " + shape_str(root->shape));
    }
    if (!root->backprop) {
        throw StateError("backward: tensor has no recorded computation graph");
    }

    // Iterative post-order DFS; topo holds children after all their parents'
    // consumers... i.e., reverse(topo) is a valid execution order.
    std::vector<detail::Node*> topo;
    std::vector<std::pair<detail::Node*, size_t>> stack;
    std::vector<detail::Node*> visited;
    stack.emplace_back(root, 0);
    auto mark_visited = [&](detail::Node* n) {
        // visited flag kept out of Node to stay reentrant: use grad.capacity trick?
        // Simplest: a flat pointer set.
        visited.push_back(n);
    };
    std::vector<detail::Node*> seen;
    auto was_seen = [&](detail::Node* n) {
        return std::find(seen.begin(), seen.end(), n) != seen.end();
    };
    (void)mark_visited;
    seen.reserve(64);
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx == 0 && was_seen(node)) {
            stack.pop_back();
            continue;
        }
        if (idx == 0) seen.push_back(node);
        if (idx < node->parents.size()) {
            detail::Node* parent = node->parents[idx].get();
            ++idx;
            if (!was_seen(parent) && parent->needs_grad) stack.emplace_back(parent, 0);
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }

    // Fresh gradients for interior nodes; leaves keep accumulating.
    for (detail::Node* n : topo) {
        if (n->backprop) n->grad.assign(n->data.size(), 0.0);
    }
    root->grad.assign(1, 1.0);
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        detail::Node* n = *it;
        if (n->backprop) n->backprop(*n);
    }
}

// ---- Adam ----

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
               double lr) {
    if (!(lr > 0.0)) throw ParameterError("adam_step: learning rate must be positive");
    if (params.size() != grads.size() || params.size() != state.m.size() ||
        params.size() != state.v.size()) {
        throw DimensionError("adam_step: parameter/gradient/state size mismatch");
    }
    state.step += 1;
    const double b1 = state.beta1, b2 = state.beta2, eps = state.epsilon;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    double* p = params.data();
    const double* g = grads.data();
    double* m = state.m.data();
    double* v = state.v.data();
    const int64_t n = static_cast<int64_t>(params.size());
    for (int64_t i = 0; i < n; ++i) {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        p[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
    }
}

void adam_step(Tensor& param, AdamState& state, double lr) {
    adam_step(param.mutable_data(), param.grad(), state, lr);
}

}  // namespace zskd
