#include "lacoste/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

namespace lacoste::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

using BackFn = std::function<void(const Tensor&, const std::vector<Var>&,
                                  const std::vector<Tensor*>&)>;

thread_local int g_no_grad_depth = 0;

Var make(Tensor val, std::vector<Var> inputs, BackFn fn, const char* op) {
    auto n = std::make_shared<Node>();
    n->val = std::move(val);
    n->op = op;
    if (g_no_grad_depth == 0)
        for (const Var& in : inputs)
            if (in && in->needs_grad) n->needs_grad = true;
    if (n->needs_grad) {
        n->inputs = std::move(inputs);
        n->backward = std::move(fn);
    }
    return n;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (!a->val.same_shape(b->val))
        throw argument_error(std::string(op) + ": shape mismatch");
}

}  // namespace

Var leaf(Tensor value, bool needs_grad) {
    auto n = std::make_shared<Node>();
    n->val = std::move(value);
    n->needs_grad = needs_grad && g_no_grad_depth == 0;
    return n;
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool grad_enabled() { return g_no_grad_depth == 0; }

GradMap backward(const Var& root) {
    if (root->val.numel() != 1) throw argument_error("backward: root must be scalar");
    // Iterative post-order topological sort.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child && child->needs_grad && !seen.count(child)) {
                seen.insert(child);
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    GradMap grads;
    grads.emplace(root.get(), Tensor::scalar(1.0));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (!node->backward) continue;
        auto git = grads.find(node);
        if (git == grads.end()) continue;
        std::vector<Tensor*> gin(node->inputs.size(), nullptr);
        for (size_t i = 0; i < node->inputs.size(); ++i) {
            Node* in = node->inputs[i].get();
            if (!in || !in->needs_grad) continue;
            auto [slot, inserted] = grads.try_emplace(in, Tensor(in->val.shape()));
            gin[i] = &slot->second;
        }
        node->backward(git->second, node->inputs, gin);
        if (!node->inputs.empty()) grads.erase(node);  // interior grads are transient
    }
    return grads;
}

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    Tensor out = a->val;
    out.add_(b->val);
    return make(std::move(out), {a, b},
                [](const Tensor& g, const std::vector<Var>&, const std::vector<Tensor*>& gi) {
                    if (gi[0]) gi[0]->add_(g);
                    if (gi[1]) gi[1]->add_(g);
                },
                "add");
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a, b, "sub");
    Tensor out = a->val;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b->val[i];
    return make(std::move(out), {a, b},
                [](const Tensor& g, const std::vector<Var>&, const std::vector<Tensor*>& gi) {
                    if (gi[0]) gi[0]->add_(g);
                    if (gi[1])
                        for (int64_t i = 0; i < g.numel(); ++i) (*gi[1])[i] -= g[i];
                },
                "sub");
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    Tensor out = a->val;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b->val[i];
    return make(std::move(out), {a, b},
                [](const Tensor& g, const std::vector<Var>& in, const std::vector<Tensor*>& gi) {
                    for (int64_t i = 0; i < g.numel(); ++i) {
                        if (gi[0]) (*gi[0])[i] += g[i] * in[1]->val[i];
                        if (gi[1]) (*gi[1])[i] += g[i] * in[0]->val[i];
                    }
                },
                "mul");
}

Var div(const Var& a, const Var& b) {
    check_same_shape(a, b, "div");
    Tensor out = a->val;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] /= b->val[i];
    return make(std::move(out), {a, b},
                [](const Tensor& g, const std::vector<Var>& in, const std::vector<Tensor*>& gi) {
                    for (int64_t i = 0; i < g.numel(); ++i) {
                        const double bi = in[1]->val[i];
                        if (gi[0]) (*gi[0])[i] += g[i] / bi;
                        if (gi[1]) (*gi[1])[i] -= g[i] * in[0]->val[i] / (bi * bi);
                    }
                },
                "div");
}

Var affine(const Var& x, double k, double c) {
    Tensor out = x->val;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = k * out[i] + c;
    return make(std::move(out), {x},
                [k](const Tensor& g, const std::vector<Var>&, const std::vector<Tensor*>& gi) {
                    if (gi[0])
                        for (int64_t i = 0; i < g.numel(); ++i) (*gi[0])[i] += k * g[i];
                },
                "affine");
}

Var neg(const Var& x) { return affine(x, -1.0, 0.0); }

Var gelu(const Var& x) {
    static const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    static const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * M_PI);
    Tensor out = x->val;
    for (int64_t i = 0; i < out.numel(); ++i) {
        const double v = out[i];
        out[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
    }
    return make(std::move(out), {x},
                [](const Tensor& g, const std::vector<Var>& in, const std::vector<Tensor*>& gi) {
                    if (!gi[0]) return;
                    for (int64_t i = 0; i < g.numel(); ++i) {
                        const double v = in[0]->val[i];
                        const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
                        const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
                        (*gi[0])[i] += g[i] * (cdf + v * pdf);
                    }
                },
                "gelu");
}

Var sigmoid(const Var& x) {
    Tensor out = x->val;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = 1.0 / (1.0 + std::exp(-out[i]));
    Tensor saved = out;
    return make(std::move(out), {x},
                [saved](const Tensor& g, const std::vector<Var>&, const std::vector<Tensor*>& gi) {
                    if (!gi[0]) return;
                    for (int64_t i = 0; i < g.numel(); ++i) {
                        const double s = saved[i];
                        (*gi[0])[i] += g[i] * s * (1.0 - s);
                    }
                },
                "sigmoid");
}

Var exp(const Var& x) {
    Tensor out = x->val;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::exp(out[i]);
    Tensor saved = out;
    return make(std::move(out), {x},
                [saved](const Tensor& g, const std::vector<Var>&, const std::vector<Tensor*>& gi) {
                    if (!gi[0]) return;
                    for (int64_t i = 0; i < g.numel(); ++i) (*gi[0])[i] += g[i] * saved[i];
                },
                "exp");
}

// ---------------------------------------------------------------- reductions

Var sum(const Var& x) {
    double s = 0.0;
    for (int64_t i = 0; i < x->val.numel(); ++i) s += x->val[i];
    return make(Tensor::scalar(s), {x},
                [](const Tensor& g, const std::vector<Var>&, const std::vector<Tensor*>& gi) {
                    if (gi[0])
                        for (int64_t i = 0; i < gi[0]->numel(); ++i) (*gi[0])[i] += g[0];
                },
                "sum");
}

Var mean(const Var& x) { return affine(sum(x), 1.0 / static_cast<double>(x->val.numel()), 0.0); }

Var add_all(const std::vector<Var>& xs) {
    if (xs.empty()) throw argument_error("add_all: empty list");
    Var acc = xs[0];
    for (size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
    return acc;
}

Var scale_sum(const std::vector<Var>& xs, const std::vector<double>& ks) {
    if (xs.empty() || xs.size() != ks.size()) throw argument_error("scale_sum: bad arity");
    Var acc = affine(xs[0], ks[0], 0.0);
    for (size_t i = 1; i < xs.size(); ++i) acc = add(acc, affine(xs[i], ks[i], 0.0));
    return acc;
}

// --------------------------------------------------------------------- shape

Var reshape(const Var& x, std::vector<int64_t> shape) {
    Tensor out = x->val.reshaped(std::move(shape));
    return make(std::move(out), {x},
                [](const Tensor& g, const std::vector<Var>&, const std::vector<Tensor*>& gi) {
                    if (gi[0])
                        for (int64_t i = 0; i < g.numel(); ++i) (*gi[0])[i] += g[i];
                },
                "reshape");
}

Var transpose(const Var& x) {
    if (x->val.ndim() != 2) throw argument_error("transpose: need 2-D");
    const int64_t n = x->val.dim(0), m = x->val.dim(1);
    Tensor out({m, n});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < m; ++j) out.at2(j, i) = x->val.at2(i, j);
    return make(std::move(out), {x},
                [n, m](const Tensor& g, const std::vector<Var>&, const std::vector<Tensor*>& gi) {
                    if (!gi[0]) return;
                    for (int64_t j = 0; j < m; ++j)
                        for (int64_t i = 0; i < n; ++i) gi[0]->at2(i, j) += g.at2(j, i);
                },
                "transpose");
}

Var slice_rows(const Var& x, int64_t begin, int64_t count) {
    if (x->val.ndim() != 2) throw argument_error("slice_rows: need 2-D");
    const int64_t n = x->val.dim(0), d = x->val.dim(1);
    if (begin < 0 || begin + count > n) throw argument_error("slice_rows: out of range");
    Tensor out({count, d});
    std::memcpy(out.data(), x->val.data() + begin * d, sizeof(double) * count * d);
    return make(std::move(out), {x},
                [begin, d](const Tensor& g, const std::vector<Var>&, const std::vector<Tensor*>& gi) {
                    if (!gi[0]) return;
                    const int64_t count = g.dim(0);
                    for (int64_t i = 0; i < count * d; ++i)
                        (*gi[0])[begin * d + i] += g[i];
                },
                "slice_rows");
}

Var index_rows(const Var& x, std::vector<int64_t> idx) {
    if (x->val.ndim() != 2) throw argument_error("index_rows: need 2-D");
    const int64_t n = x->val.dim(0), d = x->val.dim(1);
    for (int64_t i : idx)
        if (i < 0 || i >= n) throw argument_error("index_rows: index out of range");
    Tensor out({static_cast<int64_t>(idx.size()), d});
    for (size_t r = 0; r < idx.size(); ++r)
        std::memcpy(out.data() + r * d, x->val.data() + idx[r] * d, sizeof(double) * d);
    return make(std::move(out), {x},
                [idx = std::move(idx), d](const Tensor& g, const std::vector<Var>&,
                                          const std::vector<Tensor*>& gi) {
                    if (!gi[0]) return;
                    for (size_t r = 0; r < idx.size(); ++r)
                        for (int64_t j = 0; j < d; ++j)
                            (*gi[0])[idx[r] * d + j] += g[static_cast<int64_t>(r) * d + j];
                },
                "index_rows");
}

Var concat_rows(const std::vector<Var>& xs) {
    if (xs.empty()) throw argument_error("concat_rows: empty list");
    const int64_t d = xs[0]->val.dim(1);
    int64_t n = 0;
    for (const Var& x : xs) {
        if (x->val.ndim() != 2 || x->val.dim(1) != d)
            throw argument_error("concat_rows: column mismatch");
        n += x->val.dim(0);
    }
    Tensor out({n, d});
    int64_t off = 0;
    for (const Var& x : xs) {
        std::memcpy(out.data() + off, x->val.data(), sizeof(double) * x->val.numel());
        off += x->val.numel();
    }
    return make(std::move(out), xs,
                [](const Tensor& g, const std::vector<Var>& in, const std::vector<Tensor*>& gi) {
                    int64_t off = 0;
                    for (size_t k = 0; k < in.size(); ++k) {
                        const int64_t cnt = in[k]->val.numel();
                        if (gi[k])
                            for (int64_t i = 0; i < cnt; ++i) (*gi[k])[i] += g[off + i];
                        off += cnt;
                    }
                },
                "concat_rows");
}

Var col_slice(const Var& x, int64_t begin, int64_t count) {
    if (x->val.ndim() != 2) throw argument_error("col_slice: need 2-D");
    const int64_t n = x->val.dim(0), d = x->val.dim(1);
    if (begin < 0 || begin + count > d) throw argument_error("col_slice: out of range");
    Tensor out({n, count});
    for (int64_t i = 0; i < n; ++i)
        std::memcpy(out.data() + i * count, x->val.data() + i * d + begin,
                    sizeof(double) * count);
    return make(std::move(out), {x},
                [begin, d](const Tensor& g, const std::vector<Var>&, const std::vector<Tensor*>& gi) {
                    if (!gi[0]) return;
                    const int64_t n = g.dim(0), count = g.dim(1);
                    for (int64_t i = 0; i < n; ++i)
                        for (int64_t j = 0; j < count; ++j)
                            (*gi[0])[i * d + begin + j] += g.at2(i, j);
                },
                "col_slice");
}

Var concat_cols(const std::vector<Var>& xs) {
    if (xs.empty()) throw argument_error("concat_cols: empty list");
    const int64_t n = xs[0]->val.dim(0);
    int64_t d = 0;
    for (const Var& x : xs) {
        if (x->val.ndim() != 2 || x->val.dim(0) != n)
            throw argument_error("concat_cols: row mismatch");
        d += x->val.dim(1);
    }
    Tensor out({n, d});
    int64_t off = 0;
    for (const Var& x : xs) {
        const int64_t dx = x->val.dim(1);
        for (int64_t i = 0; i < n; ++i)
            std::memcpy(out.data() + i * d + off, x->val.data() + i * dx, sizeof(double) * dx);
        off += dx;
    }
    return make(std::move(out), xs,
                [n, d](const Tensor& g, const std::vector<Var>& in, const std::vector<Tensor*>& gi) {
                    int64_t off = 0;
                    for (size_t k = 0; k < in.size(); ++k) {
                        const int64_t dx = in[k]->val.dim(1);
                        if (gi[k])
                            for (int64_t i = 0; i < n; ++i)
                                for (int64_t j = 0; j < dx; ++j)
                                    (*gi[k])[i * dx + j] += g[i * d + off + j];
                        off += dx;
                    }
                },
                "concat_cols");
}

// ------------------------------------------------------------ linear algebra

Var matmul(const Var& a, const Var& b) {
    if (a->val.ndim() != 2 || b->val.ndim() != 2 || a->val.dim(1) != b->val.dim(0))
        throw argument_error("matmul: incompatible shapes");
    const int64_t n = a->val.dim(0), k = a->val.dim(1), m = b->val.dim(1);
    Tensor out({n, m});
    CMapMat A(a->val.data(), n, k), B(b->val.data(), k, m);
    MapMat(out.data(), n, m).noalias() = A * B;
    return make(std::move(out), {a, b},
                [n, k, m](const Tensor& g, const std::vector<Var>& in,
                          const std::vector<Tensor*>& gi) {
                    CMapMat G(g.data(), n, m);
                    CMapMat A(in[0]->val.data(), n, k), B(in[1]->val.data(), k, m);
                    if (gi[0]) MapMat(gi[0]->data(), n, k).noalias() += G * B.transpose();
                    if (gi[1]) MapMat(gi[1]->data(), k, m).noalias() += A.transpose() * G;
                },
                "matmul");
}

Var linear(const Var& x, const Var& w, const Var& b) {
    const int64_t n = x->val.dim(0), di = x->val.dim(1);
    const int64_t dout = w->val.dim(0);
    if (w->val.dim(1) != di) throw argument_error("linear: weight shape mismatch");
    Tensor out({n, dout});
    CMapMat X(x->val.data(), n, di), W(w->val.data(), dout, di);
    MapMat O(out.data(), n, dout);
    O.noalias() = X * W.transpose();
    if (b) {
        if (b->val.numel() != dout) throw argument_error("linear: bias shape mismatch");
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < dout; ++j) out.at2(i, j) += b->val[j];
    }
    std::vector<Var> ins = b ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
    return make(std::move(out), std::move(ins),
                [n, di, dout](const Tensor& g, const std::vector<Var>& in,
                              const std::vector<Tensor*>& gi) {
                    CMapMat G(g.data(), n, dout);
                    CMapMat X(in[0]->val.data(), n, di), W(in[1]->val.data(), dout, di);
                    if (gi[0]) MapMat(gi[0]->data(), n, di).noalias() += G * W;
                    if (gi[1]) MapMat(gi[1]->data(), dout, di).noalias() += G.transpose() * X;
                    if (in.size() > 2 && gi[2])
                        for (int64_t i = 0; i < n; ++i)
                            for (int64_t j = 0; j < dout; ++j) (*gi[2])[j] += g.at2(i, j);
                },
                "linear");
}

Var add_rowvec(const Var& x, const Var& v) {
    const int64_t n = x->val.dim(0), d = x->val.dim(1);
    if (v->val.numel() != d) throw argument_error("add_rowvec: size mismatch");
    Tensor out = x->val;
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) out.at2(i, j) += v->val[j];
    return make(std::move(out), {x, v},
                [n, d](const Tensor& g, const std::vector<Var>&, const std::vector<Tensor*>& gi) {
                    if (gi[0]) gi[0]->add_(g);
                    if (gi[1])
                        for (int64_t i = 0; i < n; ++i)
                            for (int64_t j = 0; j < d; ++j) (*gi[1])[j] += g.at2(i, j);
                },
                "add_rowvec");
}

Var add_scalar_var(const Var& x, const Var& s) {
    if (s->val.numel() != 1) throw argument_error("add_scalar_var: s must be scalar");
    Tensor out = x->val;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += s->val[0];
    return make(std::move(out), {x, s},
                [](const Tensor& g, const std::vector<Var>&, const std::vector<Tensor*>& gi) {
                    if (gi[0]) gi[0]->add_(g);
                    if (gi[1]) {
                        double sum = 0.0;
                        for (int64_t i = 0; i < g.numel(); ++i) sum += g[i];
                        (*gi[1])[0] += sum;
                    }
                },
                "add_scalar_var");
}

// ------------------------------------------------- normalization, probability

Var normalize_rows(const Var& x) {
    const int64_t n = x->val.dim(0), d = x->val.dim(1);
    Tensor out({n, d});
    Tensor norms({n});
    for (int64_t i = 0; i < n; ++i) {
        double q = 0.0;
        for (int64_t j = 0; j < d; ++j) q += x->val.at2(i, j) * x->val.at2(i, j);
        const double nn = std::sqrt(q);
        if (nn == 0.0) throw data_error("normalize_rows: zero-norm row");
        norms[i] = nn;
        for (int64_t j = 0; j < d; ++j) out.at2(i, j) = x->val.at2(i, j) / nn;
    }
    Tensor unit = out;
    return make(std::move(out), {x},
                [n, d, norms = std::move(norms), unit = std::move(unit)](
                    const Tensor& g, const std::vector<Var>&, const std::vector<Tensor*>& gi) {
                    if (!gi[0]) return;
                    for (int64_t i = 0; i < n; ++i) {
                        double dot = 0.0;
                        for (int64_t j = 0; j < d; ++j) dot += g.at2(i, j) * unit.at2(i, j);
                        for (int64_t j = 0; j < d; ++j)
                            gi[0]->at2(i, j) += (g.at2(i, j) - dot * unit.at2(i, j)) / norms[i];
                    }
                },
                "normalize_rows");
}

Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const int64_t n = x->val.dim(0), d = x->val.dim(1);
    if (gamma->val.numel() != d || beta->val.numel() != d)
        throw argument_error("layer_norm_rows: affine shape mismatch");
    Tensor out({n, d});
    Tensor xhat({n, d});
    Tensor inv_std({n});
    for (int64_t i = 0; i < n; ++i) {
        double mu = 0.0;
        for (int64_t j = 0; j < d; ++j) mu += x->val.at2(i, j);
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            const double c = x->val.at2(i, j) - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double istd = 1.0 / std::sqrt(var + eps);
        inv_std[i] = istd;
        for (int64_t j = 0; j < d; ++j) {
            const double h = (x->val.at2(i, j) - mu) * istd;
            xhat.at2(i, j) = h;
            out.at2(i, j) = gamma->val[j] * h + beta->val[j];
        }
    }
    return make(std::move(out), {x, gamma, beta},
                [n, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                    const Tensor& g, const std::vector<Var>& in, const std::vector<Tensor*>& gi) {
                    for (int64_t i = 0; i < n; ++i) {
                        double m1 = 0.0, m2 = 0.0;
                        for (int64_t j = 0; j < d; ++j) {
                            const double dh = g.at2(i, j) * in[1]->val[j];
                            m1 += dh;
                            m2 += dh * xhat.at2(i, j);
                        }
                        m1 /= static_cast<double>(d);
                        m2 /= static_cast<double>(d);
                        for (int64_t j = 0; j < d; ++j) {
                            const double dh = g.at2(i, j) * in[1]->val[j];
                            if (gi[0])
                                gi[0]->at2(i, j) +=
                                    inv_std[i] * (dh - m1 - xhat.at2(i, j) * m2);
                            if (gi[1]) (*gi[1])[j] += g.at2(i, j) * xhat.at2(i, j);
                            if (gi[2]) (*gi[2])[j] += g.at2(i, j);
                        }
                    }
                },
                "layer_norm");
}

Var softmax_rows(const Var& x) {
    const int64_t n = x->val.dim(0), d = x->val.dim(1);
    Tensor out({n, d});
    for (int64_t i = 0; i < n; ++i) {
        double mx = -1e300;
        for (int64_t j = 0; j < d; ++j) mx = std::max(mx, x->val.at2(i, j));
        double z = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            const double e = std::exp(x->val.at2(i, j) - mx);
            out.at2(i, j) = e;
            z += e;
        }
        for (int64_t j = 0; j < d; ++j) out.at2(i, j) /= z;
    }
    Tensor saved = out;
    return make(std::move(out), {x},
                [n, d, saved = std::move(saved)](const Tensor& g, const std::vector<Var>&,
                                                 const std::vector<Tensor*>& gi) {
                    if (!gi[0]) return;
                    for (int64_t i = 0; i < n; ++i) {
                        double dot = 0.0;
                        for (int64_t j = 0; j < d; ++j) dot += g.at2(i, j) * saved.at2(i, j);
                        for (int64_t j = 0; j < d; ++j)
                            gi[0]->at2(i, j) += saved.at2(i, j) * (g.at2(i, j) - dot);
                    }
                },
                "softmax_rows");
}

Var masked_softmax_rows(const Var& x, const std::vector<uint8_t>& keep) {
    const int64_t n = x->val.dim(0), d = x->val.dim(1);
    if (static_cast<int64_t>(keep.size()) != d)
        throw argument_error("masked_softmax_rows: mask size mismatch");
    Tensor out({n, d});
    bool any = false;
    for (uint8_t k : keep) any |= (k != 0);
    if (any) {
        for (int64_t i = 0; i < n; ++i) {
            double mx = -1e300;
            for (int64_t j = 0; j < d; ++j)
                if (keep[j]) mx = std::max(mx, x->val.at2(i, j));
            double z = 0.0;
            for (int64_t j = 0; j < d; ++j) {
                if (!keep[j]) continue;
                const double e = std::exp(x->val.at2(i, j) - mx);
                out.at2(i, j) = e;
                z += e;
            }
            for (int64_t j = 0; j < d; ++j)
                if (keep[j]) out.at2(i, j) /= z;
        }
    }
    Tensor saved = out;
    return make(std::move(out), {x},
                [n, d, keep, saved = std::move(saved)](const Tensor& g, const std::vector<Var>&,
                                                       const std::vector<Tensor*>& gi) {
                    if (!gi[0]) return;
                    for (int64_t i = 0; i < n; ++i) {
                        double dot = 0.0;
                        for (int64_t j = 0; j < d; ++j)
                            if (keep[j]) dot += g.at2(i, j) * saved.at2(i, j);
                        for (int64_t j = 0; j < d; ++j)
                            if (keep[j])
                                gi[0]->at2(i, j) += saved.at2(i, j) * (g.at2(i, j) - dot);
                    }
                },
                "masked_softmax_rows");
}

// -------------------------------------------------------------------- losses

Var cross_entropy_rows(const Var& logits, const std::vector<int>& targets,
                       const std::vector<double>& weights) {
    const int64_t n = logits->val.dim(0), c = logits->val.dim(1);
    if (static_cast<int64_t>(targets.size()) != n ||
        static_cast<int64_t>(weights.size()) != n)
        throw argument_error("cross_entropy_rows: arity mismatch");
    for (int t : targets)
        if (t < 0 || t >= c) throw argument_error("cross_entropy_rows: target out of range");
    Tensor probs({n, c});
    double loss = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        double mx = -1e300;
        for (int64_t j = 0; j < c; ++j) mx = std::max(mx, logits->val.at2(i, j));
        double z = 0.0;
        for (int64_t j = 0; j < c; ++j) {
            const double e = std::exp(logits->val.at2(i, j) - mx);
            probs.at2(i, j) = e;
            z += e;
        }
        for (int64_t j = 0; j < c; ++j) probs.at2(i, j) /= z;
        loss += weights[i] * (std::log(z) + mx - logits->val.at2(i, targets[i]));
    }
    return make(Tensor::scalar(loss), {logits},
                [n, c, targets, weights, probs = std::move(probs)](
                    const Tensor& g, const std::vector<Var>&, const std::vector<Tensor*>& gi) {
                    if (!gi[0]) return;
                    for (int64_t i = 0; i < n; ++i) {
                        const double w = g[0] * weights[i];
                        for (int64_t j = 0; j < c; ++j)
                            gi[0]->at2(i, j) +=
                                w * (probs.at2(i, j) - (j == targets[i] ? 1.0 : 0.0));
                    }
                },
                "cross_entropy_rows");
}

Var bce_with_logits(const Var& logits, const Tensor& targets, bool mean_reduce) {
    if (!logits->val.same_shape(targets))
        throw argument_error("bce_with_logits: shape mismatch");
    const int64_t n = logits->val.numel();
    double loss = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double z = logits->val[i], y = targets[i];
        loss += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    }
    const double scale = mean_reduce ? 1.0 / static_cast<double>(n) : 1.0;
    return make(Tensor::scalar(loss * scale), {logits},
                [targets, scale](const Tensor& g, const std::vector<Var>& in,
                                 const std::vector<Tensor*>& gi) {
                    if (!gi[0]) return;
                    for (int64_t i = 0; i < targets.numel(); ++i) {
                        const double s = 1.0 / (1.0 + std::exp(-in[0]->val[i]));
                        (*gi[0])[i] += g[0] * scale * (s - targets[i]);
                    }
                },
                "bce_with_logits");
}

Var dice_loss_with_logits(const Var& logits, const Tensor& targets) {
    if (!logits->val.same_shape(targets))
        throw argument_error("dice_loss_with_logits: shape mismatch");
    const int64_t n = logits->val.numel();
    Tensor q({n});
    double inter = 0.0, denom = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double s = 1.0 / (1.0 + std::exp(-logits->val[i]));
        q[i] = s;
        inter += s * targets[i];
        denom += s + targets[i];
    }
    const double loss = 1.0 - 2.0 * inter / denom;
    return make(Tensor::scalar(loss), {logits},
                [targets, q = std::move(q), inter, denom](const Tensor& g, const std::vector<Var>&,
                                                          const std::vector<Tensor*>& gi) {
                    if (!gi[0]) return;
                    const double d2 = denom * denom;
                    for (int64_t i = 0; i < targets.numel(); ++i) {
                        const double dq = -2.0 * (targets[i] * denom - inter) / d2;
                        (*gi[0])[i] += g[0] * dq * q[i] * (1.0 - q[i]);
                    }
                },
                "dice_loss_with_logits");
}

// ----------------------------------------------------------------- image ops

namespace {

void im2col(const Tensor& x, int kh, int kw, int stride, int pad, int64_t ho, int64_t wo,
            Tensor& col) {
    const int64_t ci = x.dim(0), h = x.dim(1), w = x.dim(2);
    double* c = col.data();
    for (int64_t ch = 0; ch < ci; ++ch)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                for (int64_t oy = 0; oy < ho; ++oy) {
                    const int64_t iy = oy * stride + ky - pad;
                    for (int64_t ox = 0; ox < wo; ++ox) {
                        const int64_t ix = ox * stride + kx - pad;
                        *c++ = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                   ? x.at3(ch, iy, ix)
                                   : 0.0;
                    }
                }
            }
}

void col2im_accum(const Tensor& col, int kh, int kw, int stride, int pad, int64_t ho,
                  int64_t wo, Tensor& dx) {
    const int64_t ci = dx.dim(0), h = dx.dim(1), w = dx.dim(2);
    const double* c = col.data();
    for (int64_t ch = 0; ch < ci; ++ch)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                for (int64_t oy = 0; oy < ho; ++oy) {
                    const int64_t iy = oy * stride + ky - pad;
                    for (int64_t ox = 0; ox < wo; ++ox) {
                        const int64_t ix = ox * stride + kx - pad;
                        if (iy >= 0 && iy < h && ix >= 0 && ix < w) dx.at3(ch, iy, ix) += *c;
                        ++c;
                    }
                }
            }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    if (x->val.ndim() != 3 || w->val.ndim() != 4)
        throw argument_error("conv2d: expect x[C,H,W], w[Co,Ci,kh,kw]");
    const int64_t ci = x->val.dim(0), h = x->val.dim(1), wd = x->val.dim(2);
    const int64_t co = w->val.dim(0);
    const int kh = static_cast<int>(w->val.dim(2)), kw = static_cast<int>(w->val.dim(3));
    if (w->val.dim(1) != ci) throw argument_error("conv2d: channel mismatch");
    const int64_t ho = (h + 2 * pad - kh) / stride + 1;
    const int64_t wo = (wd + 2 * pad - kw) / stride + 1;
    const int64_t kdim = ci * kh * kw;
    Tensor col({kdim, ho * wo});
    im2col(x->val, kh, kw, stride, pad, ho, wo, col);
    Tensor out({co, ho, wo});
    CMapMat W(w->val.data(), co, kdim), C(col.data(), kdim, ho * wo);
    MapMat O(out.data(), co, ho * wo);
    O.noalias() = W * C;
    if (b) {
        for (int64_t ch = 0; ch < co; ++ch) {
            const double bias = b->val[ch];
            double* p = out.data() + ch * ho * wo;
            for (int64_t i = 0; i < ho * wo; ++i) p[i] += bias;
        }
    }
    std::vector<Var> ins = b ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
    return make(std::move(out), std::move(ins),
                [stride, pad, kh, kw, ho, wo, kdim, co](const Tensor& g,
                                                        const std::vector<Var>& in,
                                                        const std::vector<Tensor*>& gi) {
                    CMapMat G(g.data(), co, ho * wo);
                    if (gi[1] || gi[0]) {
                        // im2col is recomputed here rather than cached in the node.
                        Tensor col({kdim, ho * wo});
                        im2col(in[0]->val, kh, kw, stride, pad, ho, wo, col);
                        CMapMat C(col.data(), kdim, ho * wo);
                        if (gi[1])
                            MapMat(gi[1]->data(), co, kdim).noalias() += G * C.transpose();
                        if (gi[0]) {
                            Tensor dcol({kdim, ho * wo});
                            CMapMat W(in[1]->val.data(), co, kdim);
                            MapMat(dcol.data(), kdim, ho * wo).noalias() = W.transpose() * G;
                            col2im_accum(dcol, kh, kw, stride, pad, ho, wo, *gi[0]);
                        }
                    }
                    if (in.size() > 2 && gi[2]) {
                        for (int64_t ch = 0; ch < co; ++ch) {
                            double s = 0.0;
                            const double* p = g.data() + ch * ho * wo;
                            for (int64_t i = 0; i < ho * wo; ++i) s += p[i];
                            (*gi[2])[ch] += s;
                        }
                    }
                },
                "conv2d");
}

namespace {

struct ResampleAxis {
    std::vector<int64_t> i0, i1;
    std::vector<double> w0, w1;
};

ResampleAxis make_axis(int64_t in, int64_t out) {
    ResampleAxis ax;
    ax.i0.resize(out);
    ax.i1.resize(out);
    ax.w0.resize(out);
    ax.w1.resize(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (int64_t o = 0; o < out; ++o) {
        double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
        src = std::clamp(src, 0.0, static_cast<double>(in - 1));
        const int64_t lo = static_cast<int64_t>(std::floor(src));
        const int64_t hi = std::min(lo + 1, in - 1);
        const double f = src - static_cast<double>(lo);
        ax.i0[o] = lo;
        ax.i1[o] = hi;
        ax.w0[o] = 1.0 - f;
        ax.w1[o] = f;
    }
    return ax;
}

}  // namespace

Var upsample_bilinear(const Var& x, int64_t out_h, int64_t out_w) {
    if (x->val.ndim() != 3) throw argument_error("upsample_bilinear: need [C,H,W]");
    const int64_t c = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2);
    ResampleAxis ay = make_axis(h, out_h), ax = make_axis(w, out_w);
    Tensor out({c, out_h, out_w});
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t oy = 0; oy < out_h; ++oy)
            for (int64_t ox = 0; ox < out_w; ++ox) {
                out.at3(ch, oy, ox) =
                    ay.w0[oy] * (ax.w0[ox] * x->val.at3(ch, ay.i0[oy], ax.i0[ox]) +
                                 ax.w1[ox] * x->val.at3(ch, ay.i0[oy], ax.i1[ox])) +
                    ay.w1[oy] * (ax.w0[ox] * x->val.at3(ch, ay.i1[oy], ax.i0[ox]) +
                                 ax.w1[ox] * x->val.at3(ch, ay.i1[oy], ax.i1[ox]));
            }
    return make(std::move(out), {x},
                [c, out_h, out_w, ay = std::move(ay), ax = std::move(ax)](
                    const Tensor& g, const std::vector<Var>&, const std::vector<Tensor*>& gi) {
                    if (!gi[0]) return;
                    for (int64_t ch = 0; ch < c; ++ch)
                        for (int64_t oy = 0; oy < out_h; ++oy)
                            for (int64_t ox = 0; ox < out_w; ++ox) {
                                const double gg = g.at3(ch, oy, ox);
                                gi[0]->at3(ch, ay.i0[oy], ax.i0[ox]) += gg * ay.w0[oy] * ax.w0[ox];
                                gi[0]->at3(ch, ay.i0[oy], ax.i1[ox]) += gg * ay.w0[oy] * ax.w1[ox];
                                gi[0]->at3(ch, ay.i1[oy], ax.i0[ox]) += gg * ay.w1[oy] * ax.w0[ox];
                                gi[0]->at3(ch, ay.i1[oy], ax.i1[ox]) += gg * ay.w1[oy] * ax.w1[ox];
                            }
                },
                "upsample_bilinear");
}

// ------------------------------------------------------------------- masking

Var apply_mask(const Var& x, const std::vector<uint8_t>& keep) {
    const int64_t n = x->val.numel();
    const int64_t m = static_cast<int64_t>(keep.size());
    if (n % m != 0) throw argument_error("apply_mask: size mismatch");
    Tensor out = x->val;
    for (int64_t i = 0; i < n; ++i)
        if (!keep[i % m]) out[i] = 0.0;
    return make(std::move(out), {x},
                [keep, m](const Tensor& g, const std::vector<Var>&, const std::vector<Tensor*>& gi) {
                    if (!gi[0]) return;
                    for (int64_t i = 0; i < g.numel(); ++i)
                        if (keep[i % m]) (*gi[0])[i] += g[i];
                },
                "apply_mask");
}

Var mul_spatial(const Var& x, const Var& w) {
    if (x->val.ndim() != 3 || w->val.ndim() != 2 || x->val.dim(1) != w->val.dim(0) ||
        x->val.dim(2) != w->val.dim(1))
        throw argument_error("mul_spatial: shape mismatch");
    const int64_t c = x->val.dim(0), hw = w->val.numel();
    Tensor out = x->val;
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t p = 0; p < hw; ++p) out[ch * hw + p] *= w->val[p];
    return make(std::move(out), {x, w},
                [c, hw](const Tensor& g, const std::vector<Var>& in, const std::vector<Tensor*>& gi) {
                    for (int64_t ch = 0; ch < c; ++ch)
                        for (int64_t p = 0; p < hw; ++p) {
                            if (gi[0]) (*gi[0])[ch * hw + p] += g[ch * hw + p] * in[1]->val[p];
                            if (gi[1]) (*gi[1])[p] += g[ch * hw + p] * in[0]->val[ch * hw + p];
                        }
                },
                "mul_spatial");
}

Var cosine_weight(const Var& a, const Var& b, const std::vector<uint8_t>& valid_b, double eps) {
    check_same_shape(a, b, "cosine_weight");
    if (a->val.ndim() != 3) throw argument_error("cosine_weight: need [C,H,W]");
    const int64_t c = a->val.dim(0), h = a->val.dim(1), w = a->val.dim(2);
    const int64_t hw = h * w;
    if (static_cast<int64_t>(valid_b.size()) != hw)
        throw argument_error("cosine_weight: mask size mismatch");
    Tensor out({h, w});
    Tensor na({hw}), nb({hw}), dot({hw});
    std::vector<uint8_t> active(hw, 0);
    for (int64_t p = 0; p < hw; ++p) {
        double s = 0.0, qa = 0.0, qb = 0.0;
        for (int64_t ch = 0; ch < c; ++ch) {
            const double av = a->val[ch * hw + p], bv = b->val[ch * hw + p];
            s += av * bv;
            qa += av * av;
            qb += bv * bv;
        }
        na[p] = std::sqrt(qa);
        nb[p] = std::sqrt(qb);
        dot[p] = s;
        if (valid_b[p] && na[p] >= eps && nb[p] >= eps) {
            active[p] = 1;
            out[p] = s / (na[p] * nb[p] + eps);
        }
    }
    return make(std::move(out), {a, b},
                [c, hw, eps, na = std::move(na), nb = std::move(nb), dot = std::move(dot),
                 active = std::move(active)](const Tensor& g, const std::vector<Var>& in,
                                             const std::vector<Tensor*>& gi) {
                    for (int64_t p = 0; p < hw; ++p) {
                        if (!active[p]) continue;
                        const double gg = g[p];
                        if (gg == 0.0) continue;
                        const double D = na[p] * nb[p] + eps;
                        const double sD2 = dot[p] / (D * D);
                        for (int64_t ch = 0; ch < c; ++ch) {
                            const double av = in[0]->val[ch * hw + p];
                            const double bv = in[1]->val[ch * hw + p];
                            if (gi[0])
                                (*gi[0])[ch * hw + p] +=
                                    gg * (bv / D - sD2 * nb[p] * av / na[p]);
                            if (gi[1])
                                (*gi[1])[ch * hw + p] +=
                                    gg * (av / D - sD2 * na[p] * bv / nb[p]);
                        }
                    }
                },
                "cosine_weight");
}

Var warp_with_plan(const Var& x, const WarpPlan& plan) {
    if (x->val.ndim() != 3 || x->val.dim(1) != plan.h || x->val.dim(2) != plan.w)
        throw argument_error("warp_with_plan: shape mismatch");
    const int64_t c = x->val.dim(0), hw = plan.h * plan.w;
    Tensor out({c, plan.h, plan.w});
    for (int64_t p = 0; p < hw; ++p) {
        if (!plan.valid[p]) continue;
        for (int64_t ch = 0; ch < c; ++ch)
            out[ch * hw + p] = plan.w0[p] * x->val[ch * hw + plan.idx0[p]] +
                               plan.w1[p] * x->val[ch * hw + plan.idx1[p]];
    }
    return make(std::move(out), {x},
                [c, hw, plan](const Tensor& g, const std::vector<Var>&,
                              const std::vector<Tensor*>& gi) {
                    if (!gi[0]) return;
                    for (int64_t p = 0; p < hw; ++p) {
                        if (!plan.valid[p]) continue;
                        for (int64_t ch = 0; ch < c; ++ch) {
                            const double gg = g[ch * hw + p];
                            (*gi[0])[ch * hw + plan.idx0[p]] += gg * plan.w0[p];
                            (*gi[0])[ch * hw + plan.idx1[p]] += gg * plan.w1[p];
                        }
                    }
                },
                "warp_with_plan");
}

}  // namespace lacoste::ad
