#include "fedinject/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "fedinject/errors.hpp"

namespace fedinject::tensor {

namespace {

void check_same_tape(Val a, Val b) {
    if (a.tape == nullptr || b.tape == nullptr || a.tape != b.tape) {
        throw ContractError("operands belong to different (or no) tapes");
    }
}

void check_valid(Val a) {
    if (a.tape == nullptr || a.id < 0) throw ContractError("use of an empty Val handle");
}

} // namespace

Val Tape::leaf(Parameter& p) {
    Node n;
    n.value = p.value;
    n.grad = Tensor(p.value.shape());
    n.param = &p;
    nodes_.push_back(std::move(n));
    return Val{this, static_cast<std::int32_t>(nodes_.size() - 1)};
}

Val Tape::constant(Tensor t) {
    Node n;
    n.grad = Tensor(t.shape());
    n.value = std::move(t);
    nodes_.push_back(std::move(n));
    return Val{this, static_cast<std::int32_t>(nodes_.size() - 1)};
}

Val Tape::emplace(Tensor value, BackFn back) {
    Node n;
    n.grad = Tensor(value.shape());
    n.value = std::move(value);
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Val{this, static_cast<std::int32_t>(nodes_.size() - 1)};
}

const Tape::Node& Tape::node(Val v) const {
    check_valid(v);
    return nodes_.at(static_cast<std::size_t>(v.id));
}

Tape::Node& Tape::node(Val v) {
    check_valid(v);
    return nodes_.at(static_cast<std::size_t>(v.id));
}

const Tensor& Tape::value(Val v) const { return node(v).value; }

Tensor& Tape::grad(Val v) { return node(v).grad; }

void Tape::backward(Val loss) {
    check_valid(loss);
    if (loss.tape != this) throw ContractError("loss recorded on a different tape");
    if (swept_) throw ContractError("backward already ran on this tape");
    const Node& ln = node(loss);
    if (!ln.value.is_scalar()) {
        throw ContractError("backward requires a scalar loss, got shape " + ln.value.shape_str());
    }
    swept_ = true;
    nodes_[static_cast<std::size_t>(loss.id)].grad.at(0) = 1.0;
    for (std::int32_t id = loss.id; id >= 0; --id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.back) n.back(*this, id);
        if (n.param != nullptr) {
            auto dst = n.param->grad.data();
            auto src = n.grad.data();
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
        }
    }
}

// --- op helpers --------------------------------------------------------------

namespace {

struct Dims2 {
    std::size_t rows, cols;
};

Dims2 as2d(const Tensor& t) {
    if (t.rank() == 2) return {t.shape()[0], t.shape()[1]};
    if (t.rank() == 1) return {1, t.shape()[0]};
    throw DimensionError("expected rank-1 or rank-2 tensor, got " + t.shape_str());
}

} // namespace

Val add(Val a, Val b) {
    check_same_tape(a, b);
    Tape& tp = *a.tape;
    const Tensor& av = tp.value(a);
    const Tensor& bv = tp.value(b);
    if (av.same_shape(bv)) {
        Tensor out = av;
        auto o = out.data();
        auto bd = bv.data();
        for (std::size_t i = 0; i < o.size(); ++i) o[i] += bd[i];
        return tp.emplace(std::move(out), [pa = a.id, pb = b.id](Tape& t, std::int32_t self) {
            const Tensor& g = t.grad(Val{&t, self});
            auto ga = t.grad(Val{&t, pa}).data();
            auto gb = t.grad(Val{&t, pb}).data();
            auto gs = g.data();
            for (std::size_t i = 0; i < gs.size(); ++i) {
                ga[i] += gs[i];
                gb[i] += gs[i];
            }
        });
    }
    // Row broadcast: a is [m x n], b is [n] or [1 x n].
    const Dims2 ad = as2d(av);
    const Dims2 bd2 = as2d(bv);
    if (bd2.rows != 1 || bd2.cols != ad.cols || av.rank() != 2) {
        throw DimensionError("add: incompatible shapes " + av.shape_str() + " and " +
                             bv.shape_str());
    }
    Tensor out = av;
    auto o = out.data();
    auto bd = bv.data();
    for (std::size_t r = 0; r < ad.rows; ++r)
        for (std::size_t c = 0; c < ad.cols; ++c) o[r * ad.cols + c] += bd[c];
    return tp.emplace(std::move(out),
                      [pa = a.id, pb = b.id, m = ad.rows, n = ad.cols](Tape& t, std::int32_t self) {
                          auto gs = t.grad(Val{&t, self}).data();
                          auto ga = t.grad(Val{&t, pa}).data();
                          auto gb = t.grad(Val{&t, pb}).data();
                          for (std::size_t r = 0; r < m; ++r)
                              for (std::size_t c = 0; c < n; ++c) {
                                  ga[r * n + c] += gs[r * n + c];
                                  gb[c] += gs[r * n + c];
                              }
                      });
}

Val sub(Val a, Val b) {
    check_same_tape(a, b);
    Tape& tp = *a.tape;
    const Tensor& av = tp.value(a);
    const Tensor& bv = tp.value(b);
    if (!av.same_shape(bv)) {
        throw DimensionError("sub: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
    }
    Tensor out = av;
    auto o = out.data();
    auto bd = bv.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bd[i];
    return tp.emplace(std::move(out), [pa = a.id, pb = b.id](Tape& t, std::int32_t self) {
        auto gs = t.grad(Val{&t, self}).data();
        auto ga = t.grad(Val{&t, pa}).data();
        auto gb = t.grad(Val{&t, pb}).data();
        for (std::size_t i = 0; i < gs.size(); ++i) {
            ga[i] += gs[i];
            gb[i] -= gs[i];
        }
    });
}

Val mul(Val a, Val b) {
    check_same_tape(a, b);
    Tape& tp = *a.tape;
    const Tensor& av = tp.value(a);
    const Tensor& bv = tp.value(b);
    if (!av.same_shape(bv)) {
        throw DimensionError("mul: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
    }
    Tensor out = av;
    auto o = out.data();
    auto bd = bv.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bd[i];
    return tp.emplace(std::move(out), [pa = a.id, pb = b.id](Tape& t, std::int32_t self) {
        auto gs = t.grad(Val{&t, self}).data();
        auto ga = t.grad(Val{&t, pa}).data();
        auto gb = t.grad(Val{&t, pb}).data();
        auto avd = t.value(Val{&t, pa}).data();
        auto bvd = t.value(Val{&t, pb}).data();
        for (std::size_t i = 0; i < gs.size(); ++i) {
            ga[i] += gs[i] * bvd[i];
            gb[i] += gs[i] * avd[i];
        }
    });
}

Val scale(Val a, double s) {
    check_valid(a);
    Tape& tp = *a.tape;
    Tensor out = tp.value(a);
    for (double& v : out.data()) v *= s;
    return tp.emplace(std::move(out), [pa = a.id, s](Tape& t, std::int32_t self) {
        auto gs = t.grad(Val{&t, self}).data();
        auto ga = t.grad(Val{&t, pa}).data();
        for (std::size_t i = 0; i < gs.size(); ++i) ga[i] += s * gs[i];
    });
}

Val matmul(Val a, Val b) {
    check_same_tape(a, b);
    Tape& tp = *a.tape;
    const Tensor& av = tp.value(a);
    const Tensor& bv = tp.value(b);
    if (av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0]) {
        throw DimensionError("matmul: incompatible shapes " + av.shape_str() + " x " +
                             bv.shape_str());
    }
    const std::size_t m = av.shape()[0], k = av.shape()[1], n = bv.shape()[1];
    Tensor out({m, n});
    auto o = out.data();
    auto ad = av.data();
    auto bd = bv.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double x = ad[i * k + p];
            if (x == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) o[i * n + j] += x * bd[p * n + j];
        }
    return tp.emplace(std::move(out), [pa = a.id, pb = b.id, m, k, n](Tape& t, std::int32_t self) {
        auto gs = t.grad(Val{&t, self}).data();
        auto ga = t.grad(Val{&t, pa}).data();
        auto gb = t.grad(Val{&t, pb}).data();
        auto ad = t.value(Val{&t, pa}).data();
        auto bd = t.value(Val{&t, pb}).data();
        // dA += dC * B^T
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                const double g = gs[i * n + j];
                if (g == 0.0) continue;
                for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += g * bd[p * n + j];
            }
        // dB += A^T * dC
        for (std::size_t p = 0; p < k; ++p)
            for (std::size_t i = 0; i < m; ++i) {
                const double x = ad[i * k + p];
                if (x == 0.0) continue;
                for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += x * gs[i * n + j];
            }
    });
}

Val matmul_transb(Val a, Val b) {
    check_same_tape(a, b);
    Tape& tp = *a.tape;
    const Tensor& av = tp.value(a);
    const Tensor& bv = tp.value(b);
    if (av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[1]) {
        throw DimensionError("matmul_transb: incompatible shapes " + av.shape_str() + " x " +
                             bv.shape_str() + "^T");
    }
    const std::size_t m = av.shape()[0], k = av.shape()[1], n = bv.shape()[0];
    Tensor out({m, n});
    auto o = out.data();
    auto ad = av.data();
    auto bd = bv.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += ad[i * k + p] * bd[j * k + p];
            o[i * n + j] = acc;
        }
    return tp.emplace(std::move(out), [pa = a.id, pb = b.id, m, k, n](Tape& t, std::int32_t self) {
        auto gs = t.grad(Val{&t, self}).data();
        auto ga = t.grad(Val{&t, pa}).data();
        auto gb = t.grad(Val{&t, pb}).data();
        auto ad = t.value(Val{&t, pa}).data();
        auto bd = t.value(Val{&t, pb}).data();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                const double g = gs[i * n + j];
                if (g == 0.0) continue;
                for (std::size_t p = 0; p < k; ++p) {
                    ga[i * k + p] += g * bd[j * k + p];
                    gb[j * k + p] += g * ad[i * k + p];
                }
            }
    });
}

Val relu(Val a) {
    check_valid(a);
    Tape& tp = *a.tape;
    Tensor out = tp.value(a);
    for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
    return tp.emplace(std::move(out), [pa = a.id](Tape& t, std::int32_t self) {
        auto gs = t.grad(Val{&t, self}).data();
        auto ga = t.grad(Val{&t, pa}).data();
        auto xv = t.value(Val{&t, pa}).data();
        for (std::size_t i = 0; i < gs.size(); ++i) {
            if (xv[i] > 0.0) ga[i] += gs[i];
        }
    });
}

namespace {

// Stabilized softmax over contiguous rows of length n laid out at stride 1.
void softmax_rows(std::span<const double> in, std::span<double> out, std::size_t rows,
                  std::size_t n) {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = in.data() + r * n;
        double* y = out.data() + r * n;
        double mx = x[0];
        for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
        double denom = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            y[i] = std::exp(x[i] - mx);
            denom += y[i];
        }
        for (std::size_t i = 0; i < n; ++i) y[i] /= denom;
    }
}

} // namespace

Tensor softmax_eager(const Tensor& x, std::size_t axis) {
    if (x.size() == 0) throw DimensionError("softmax over an empty tensor");
    if (x.rank() == 1 || x.rank() == 0) {
        if (axis != 0) throw DimensionError("softmax: axis out of range for " + x.shape_str());
        Tensor out(x.shape());
        softmax_rows(x.data(), out.data(), 1, x.size());
        return out;
    }
    if (x.rank() != 2 || axis > 1) {
        throw DimensionError("softmax: unsupported shape " + x.shape_str() + " axis " +
                             std::to_string(axis));
    }
    const std::size_t m = x.shape()[0], n = x.shape()[1];
    Tensor out(x.shape());
    if (axis == 1) {
        softmax_rows(x.data(), out.data(), m, n);
    } else {
        // Column-wise: transpose, row softmax, transpose back.
        std::vector<double> tmp(m * n), tout(m * n);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) tmp[j * m + i] = x.data()[i * n + j];
        softmax_rows(tmp, tout, n, m);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) out.data()[i * n + j] = tout[j * m + i];
    }
    return out;
}

Val softmax(Val a, std::size_t axis) {
    check_valid(a);
    Tape& tp = *a.tape;
    const Tensor& av = tp.value(a);
    Tensor out = softmax_eager(av, axis);

    // dx = y * (dy - sum(dy * y)) along the softmax axis.
    auto back = [pa = a.id, axis](Tape& t, std::int32_t self) {
        const Tensor& y = t.value(Val{&t, self});
        auto gs = t.grad(Val{&t, self}).data();
        auto ga = t.grad(Val{&t, pa}).data();
        auto yd = y.data();
        const bool rank1 = y.rank() <= 1;
        const std::size_t m = rank1 ? 1 : y.shape()[0];
        const std::size_t n = rank1 ? y.size() : y.shape()[1];
        if (rank1 || axis == 1) {
            for (std::size_t r = 0; r < m; ++r) {
                double dot = 0.0;
                for (std::size_t i = 0; i < n; ++i) dot += gs[r * n + i] * yd[r * n + i];
                for (std::size_t i = 0; i < n; ++i)
                    ga[r * n + i] += yd[r * n + i] * (gs[r * n + i] - dot);
            }
        } else {
            for (std::size_t c = 0; c < n; ++c) {
                double dot = 0.0;
                for (std::size_t r = 0; r < m; ++r) dot += gs[r * n + c] * yd[r * n + c];
                for (std::size_t r = 0; r < m; ++r)
                    ga[r * n + c] += yd[r * n + c] * (gs[r * n + c] - dot);
            }
        }
    };
    return tp.emplace(std::move(out), std::move(back));
}

Val cross_entropy(Val logits, const std::vector<int>& labels) {
    check_valid(logits);
    Tape& tp = *logits.tape;
    const Tensor& lv = tp.value(logits);
    if (lv.rank() != 2) {
        throw DimensionError("cross_entropy: logits must be [batch x classes], got " +
                             lv.shape_str());
    }
    const std::size_t b = lv.shape()[0], c = lv.shape()[1];
    if (labels.size() != b) {
        throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(b) + " rows");
    }
    for (int l : labels) {
        if (l < 0 || static_cast<std::size_t>(l) >= c) {
            throw DomainError("cross_entropy: label " + std::to_string(l) + " outside [0, " +
                              std::to_string(c) + ")");
        }
    }
    Tensor probs = softmax_eager(lv, 1);
    double loss = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        double p = probs.data()[i * c + static_cast<std::size_t>(labels[i])];
        p = std::max(p, 1e-300);
        loss -= std::log(p);
    }
    loss /= static_cast<double>(b);

    auto back = [pl = logits.id, labels, probs = std::move(probs), b, c](Tape& t,
                                                                         std::int32_t self) {
        const double g = t.grad(Val{&t, self}).at(0);
        auto ga = t.grad(Val{&t, pl}).data();
        auto pd = probs.data();
        const double inv_b = 1.0 / static_cast<double>(b);
        for (std::size_t i = 0; i < b; ++i)
            for (std::size_t j = 0; j < c; ++j) {
                double d = pd[i * c + j];
                if (j == static_cast<std::size_t>(labels[i])) d -= 1.0;
                ga[i * c + j] += g * d * inv_b;
            }
    };
    return tp.emplace(Tensor::scalar(loss), std::move(back));
}

Val sum(Val a) {
    check_valid(a);
    Tape& tp = *a.tape;
    double s = 0.0;
    for (double v : tp.value(a).data()) s += v;
    return tp.emplace(Tensor::scalar(s), [pa = a.id](Tape& t, std::int32_t self) {
        const double g = t.grad(Val{&t, self}).at(0);
        for (double& v : t.grad(Val{&t, pa}).data()) v += g;
    });
}

Val mean(Val a) {
    check_valid(a);
    const std::size_t n = a.tape->value(a).size();
    if (n == 0) throw DimensionError("mean over an empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(n));
}

Val mean_rows(Val a) {
    check_valid(a);
    Tape& tp = *a.tape;
    const Tensor& av = tp.value(a);
    if (av.rank() != 2) throw DimensionError("mean_rows expects rank-2, got " + av.shape_str());
    const std::size_t m = av.shape()[0], n = av.shape()[1];
    Tensor out({1, n});
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) out.data()[c] += av.data()[r * n + c];
    for (double& v : out.data()) v /= static_cast<double>(m);
    return tp.emplace(std::move(out), [pa = a.id, m, n](Tape& t, std::int32_t self) {
        auto gs = t.grad(Val{&t, self}).data();
        auto ga = t.grad(Val{&t, pa}).data();
        const double inv = 1.0 / static_cast<double>(m);
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c) ga[r * n + c] += gs[c] * inv;
    });
}

Val concat_cols(std::span<const Val> parts) {
    if (parts.empty()) throw DimensionError("concat_cols of zero blocks");
    Tape& tp = *parts[0].tape;
    const std::size_t m = tp.value(parts[0]).rows();
    std::size_t total = 0;
    std::vector<std::int32_t> ids;
    std::vector<std::size_t> widths;
    for (Val p : parts) {
        check_same_tape(parts[0], p);
        const Tensor& v = tp.value(p);
        if (v.rank() != 2 || v.shape()[0] != m) {
            throw DimensionError("concat_cols: block shape " + v.shape_str() +
                                 " incompatible with " + std::to_string(m) + " rows");
        }
        ids.push_back(p.id);
        widths.push_back(v.shape()[1]);
        total += v.shape()[1];
    }
    Tensor out({m, total});
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
        const Tensor& v = tp.value(Val{&tp, ids[k]});
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < widths[k]; ++c)
                out.data()[r * total + off + c] = v.data()[r * widths[k] + c];
        off += widths[k];
    }
    return tp.emplace(std::move(out), [ids, widths, m, total](Tape& t, std::int32_t self) {
        auto gs = t.grad(Val{&t, self}).data();
        std::size_t off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            auto ga = t.grad(Val{&t, ids[k]}).data();
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t c = 0; c < widths[k]; ++c)
                    ga[r * widths[k] + c] += gs[r * total + off + c];
            off += widths[k];
        }
    });
}

Val conv2d(Val x, Val w, Val b, const Conv2dSpec& spec) {
    check_same_tape(x, w);
    check_same_tape(x, b);
    Tape& tp = *x.tape;
    const Tensor& xv = tp.value(x);
    const Tensor& wv = tp.value(w);
    const Tensor& bv = tp.value(b);
    const std::size_t ci = spec.in_channels, h = spec.height, wd = spec.width;
    const std::size_t co = spec.out_channels, kh = spec.kernel_h, kw = spec.kernel_w;
    if (kh > h || kw > wd) throw DimensionError("conv2d: kernel larger than input");
    if (xv.rank() != 2 || xv.shape()[1] != ci * h * wd) {
        throw DimensionError("conv2d: input " + xv.shape_str() + " does not match C*H*W = " +
                             std::to_string(ci * h * wd));
    }
    if (wv.rank() != 2 || wv.shape()[0] != co || wv.shape()[1] != ci * kh * kw) {
        throw DimensionError("conv2d: weight " + wv.shape_str() + " does not match [Cout x Cin*Kh*Kw]");
    }
    if (bv.size() != co) throw DimensionError("conv2d: bias size mismatch");
    const std::size_t batch = xv.shape()[0];
    const std::size_t ho = spec.out_h(), wo = spec.out_w();
    Tensor out({batch, co * ho * wo});
    auto od = out.data();
    auto xd = xv.data();
    auto wdta = wv.data();
    auto bd = bv.data();
    for (std::size_t n = 0; n < batch; ++n) {
        const double* xn = xd.data() + n * ci * h * wd;
        double* on = od.data() + n * co * ho * wo;
        for (std::size_t oc = 0; oc < co; ++oc) {
            const double* wk = wdta.data() + oc * ci * kh * kw;
            for (std::size_t i = 0; i < ho; ++i)
                for (std::size_t j = 0; j < wo; ++j) {
                    double acc = bd[oc];
                    for (std::size_t ic = 0; ic < ci; ++ic)
                        for (std::size_t a = 0; a < kh; ++a)
                            for (std::size_t bb = 0; bb < kw; ++bb)
                                acc += xn[ic * h * wd + (i + a) * wd + (j + bb)] *
                                       wk[ic * kh * kw + a * kw + bb];
                    on[oc * ho * wo + i * wo + j] = acc;
                }
        }
    }
    auto back = [px = x.id, pw = w.id, pb = b.id, spec, batch](Tape& t, std::int32_t self) {
        const std::size_t ci = spec.in_channels, h = spec.height, wd = spec.width;
        const std::size_t co = spec.out_channels, kh = spec.kernel_h, kw = spec.kernel_w;
        const std::size_t ho = spec.out_h(), wo = spec.out_w();
        auto gs = t.grad(Val{&t, self}).data();
        auto gx = t.grad(Val{&t, px}).data();
        auto gw = t.grad(Val{&t, pw}).data();
        auto gb = t.grad(Val{&t, pb}).data();
        auto xd = t.value(Val{&t, px}).data();
        auto wdta = t.value(Val{&t, pw}).data();
        for (std::size_t n = 0; n < batch; ++n) {
            const double* xn = xd.data() + n * ci * h * wd;
            double* gxn = gx.data() + n * ci * h * wd;
            const double* gn = gs.data() + n * co * ho * wo;
            for (std::size_t oc = 0; oc < co; ++oc) {
                const double* wk = wdta.data() + oc * ci * kh * kw;
                double* gwk = gw.data() + oc * ci * kh * kw;
                for (std::size_t i = 0; i < ho; ++i)
                    for (std::size_t j = 0; j < wo; ++j) {
                        const double g = gn[oc * ho * wo + i * wo + j];
                        if (g == 0.0) continue;
                        gb[oc] += g;
                        for (std::size_t ic = 0; ic < ci; ++ic)
                            for (std::size_t a = 0; a < kh; ++a)
                                for (std::size_t bb = 0; bb < kw; ++bb) {
                                    const std::size_t xi = ic * h * wd + (i + a) * wd + (j + bb);
                                    const std::size_t wi = ic * kh * kw + a * kw + bb;
                                    gxn[xi] += g * wk[wi];
                                    gwk[wi] += g * xn[xi];
                                }
                    }
            }
        }
    };
    return tp.emplace(std::move(out), std::move(back));
}

Val channel_mean_pool(Val x, std::size_t channels, std::size_t spatial) {
    check_valid(x);
    Tape& tp = *x.tape;
    const Tensor& xv = tp.value(x);
    if (spatial == 0 || xv.rank() != 2 || xv.shape()[1] != channels * spatial) {
        throw DimensionError("channel_mean_pool: input " + xv.shape_str() +
                             " does not match C*S = " + std::to_string(channels * spatial));
    }
    const std::size_t batch = xv.shape()[0];
    Tensor out({batch, channels});
    for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t c = 0; c < channels; ++c) {
            double acc = 0.0;
            for (std::size_t s = 0; s < spatial; ++s)
                acc += xv.data()[n * channels * spatial + c * spatial + s];
            out.data()[n * channels + c] = acc / static_cast<double>(spatial);
        }
    return tp.emplace(std::move(out),
                      [px = x.id, channels, spatial, batch](Tape& t, std::int32_t self) {
                          auto gs = t.grad(Val{&t, self}).data();
                          auto gx = t.grad(Val{&t, px}).data();
                          const double inv = 1.0 / static_cast<double>(spatial);
                          for (std::size_t n = 0; n < batch; ++n)
                              for (std::size_t c = 0; c < channels; ++c) {
                                  const double g = gs[n * channels + c] * inv;
                                  for (std::size_t s = 0; s < spatial; ++s)
                                      gx[n * channels * spatial + c * spatial + s] += g;
                              }
                      });
}

Val scale_by_coeff(Val x, Val coeffs, std::size_t index) {
    check_same_tape(x, coeffs);
    Tape& tp = *x.tape;
    const Tensor& cv = tp.value(coeffs);
    if (index >= cv.size()) {
        throw DimensionError("scale_by_coeff: index " + std::to_string(index) +
                             " out of range for " + cv.shape_str());
    }
    const double s = cv.data()[index];
    Tensor out = tp.value(x);
    for (double& v : out.data()) v *= s;
    return tp.emplace(std::move(out), [px = x.id, pc = coeffs.id, index](Tape& t,
                                                                         std::int32_t self) {
        auto gs = t.grad(Val{&t, self}).data();
        auto gx = t.grad(Val{&t, px}).data();
        auto& gc = t.grad(Val{&t, pc});
        auto xv = t.value(Val{&t, px}).data();
        const double s = t.value(Val{&t, pc}).data()[index];
        double dot = 0.0;
        for (std::size_t i = 0; i < gs.size(); ++i) {
            gx[i] += s * gs[i];
            dot += xv[i] * gs[i];
        }
        gc.data()[index] += dot;
    });
}

} // namespace fedinject::tensor
