#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numbers>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mhgt/errors.hpp"
#include "mhgt/tensor.hpp"

namespace mhgt {

// Trainable tensor with an accumulated gradient. Gradients persist across
// tapes until zero_grad(), so per-sample backward passes accumulate into a
// batch gradient.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;

    Parameter(std::string n, Tensor v)
        : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros(value.shape())) {}

    void zero_grad() { grad.fill(0.0); }
};

class ParameterStore {
  public:
    Parameter& create(std::string name, Tensor init) {
        if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
        params_.push_back(std::make_unique<Parameter>(name, std::move(init)));
        index_[params_.back()->name] = params_.size() - 1;
        return *params_.back();
    }

    Parameter& at(std::string_view name) {
        auto it = index_.find(std::string(name));
        if (it == index_.end()) throw ConfigError("unknown parameter: " + std::string(name));
        return *params_[it->second];
    }

    bool contains(std::string_view name) const { return index_.count(std::string(name)) > 0; }

    std::vector<Parameter*> all() {
        std::vector<Parameter*> out;
        out.reserve(params_.size());
        for (auto& p : params_) out.push_back(p.get());
        return out;
    }

    void zero_grads() {
        for (auto& p : params_) p->zero_grad();
    }

    std::size_t size() const { return params_.size(); }

  private:
    std::vector<std::unique_ptr<Parameter>> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

class Tape;

// Handle to a node on a tape. Cheap to copy; valid for the tape's lifetime.
struct Var {
    Tape* tape = nullptr;
    int id = -1;
};

// Reverse-mode tape over Tensor-valued nodes. Creation order is already a
// topological order, so backward() is a single reverse sweep.
class Tape {
  public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor v) { return push(std::move(v), nullptr, nullptr); }

    Var leaf(Parameter& p) {
        auto it = leaf_cache_.find(&p);
        if (it != leaf_cache_.end()) return Var{this, it->second};
        Var v = push(p.value, nullptr, &p);
        leaf_cache_[&p] = v.id;
        return v;
    }

    using BackwardFn = std::function<void(Tape&, int self)>;

    Var push(Tensor value, BackwardFn backward, Parameter* param = nullptr) {
        nodes_.push_back(Node{std::move(value), Tensor(), std::move(backward), param});
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    const Tensor& value(Var v) const { return nodes_[v.id].value; }
    Tensor& grad(int id) { return nodes_[id].grad; }
    const Tensor& grad(Var v) const { return nodes_[v.id].grad; }

    // Accumulates dL/d(node id) during the reverse sweep.
    void accumulate(int id, const Tensor& g) {
        Tensor& dst = nodes_[id].grad;
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }
    double* grad_data(int id) { return nodes_[id].grad.data().data(); }

    void backward(Var root) {
        if (ran_backward_) throw NumericError("tape backward may run only once");
        ran_backward_ = true;
        if (value(root).size() != 1) throw ShapeError("backward root must be scalar");
        for (auto& n : nodes_) n.grad = Tensor::zeros(n.value.shape());
        nodes_[root.id].grad[0] = 1.0;
        for (int i = root.id; i >= 0; --i) {
            if (nodes_[i].backward) nodes_[i].backward(*this, i);
        }
        for (auto& n : nodes_) {
            if (!n.param) continue;
            for (std::size_t i = 0; i < n.grad.size(); ++i) n.param->grad[i] += n.grad[i];
        }
    }

  private:
    struct Node {
        Tensor value;
        Tensor grad;
        BackwardFn backward;
        Parameter* param = nullptr;
    };

    std::vector<Node> nodes_;
    std::unordered_map<Parameter*, int> leaf_cache_;
    bool ran_backward_ = false;
};

namespace ops {

inline Tape& tape_of(Var a, Var b = Var{}) {
    if (!a.tape || (b.tape && b.tape != a.tape)) throw ShapeError("vars from different tapes");
    return *a.tape;
}

inline Var add(Var a, Var b) {
    Tape& t = tape_of(a, b);
    require_same_shape(t.value(a), t.value(b), "add");
    Tensor out = t.value(a);
    const Tensor& bv = t.value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    const int ia = a.id, ib = b.id;
    return t.push(std::move(out), [ia, ib](Tape& tp, int self) {
        tp.accumulate(ia, tp.grad(Var{&tp, self}));
        tp.accumulate(ib, tp.grad(Var{&tp, self}));
    });
}

inline Var sub(Var a, Var b) {
    Tape& t = tape_of(a, b);
    require_same_shape(t.value(a), t.value(b), "sub");
    Tensor out = t.value(a);
    const Tensor& bv = t.value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    const int ia = a.id, ib = b.id;
    return t.push(std::move(out), [ia, ib](Tape& tp, int self) {
        const Tensor& g = tp.grad(Var{&tp, self});
        tp.accumulate(ia, g);
        double* db = tp.grad_data(ib);
        for (std::size_t i = 0; i < g.size(); ++i) db[i] -= g[i];
    });
}

inline Var mul(Var a, Var b) {
    Tape& t = tape_of(a, b);
    require_same_shape(t.value(a), t.value(b), "mul");
    Tensor out = t.value(a);
    const Tensor& bv = t.value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    const int ia = a.id, ib = b.id;
    return t.push(std::move(out), [ia, ib](Tape& tp, int self) {
        const Tensor& g = tp.grad(Var{&tp, self});
        const Tensor& av = tp.value(Var{&tp, ia});
        const Tensor& bv2 = tp.value(Var{&tp, ib});
        double* da = tp.grad_data(ia);
        double* db = tp.grad_data(ib);
        for (std::size_t i = 0; i < g.size(); ++i) {
            da[i] += g[i] * bv2[i];
            db[i] += g[i] * av[i];
        }
    });
}

inline Var scale(Var a, double c) {
    Tape& t = tape_of(a);
    Tensor out = t.value(a);
    for (auto& v : out.data()) v *= c;
    const int ia = a.id;
    return t.push(std::move(out), [ia, c](Tape& tp, int self) {
        const Tensor& g = tp.grad(Var{&tp, self});
        double* da = tp.grad_data(ia);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += c * g[i];
    });
}

// y = a . b for a [m x k], b [k x n]
inline Var matmul(Var a, Var b) {
    Tape& t = tape_of(a, b);
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    if (av.ndim() != 2 || bv.ndim() != 2 || av.cols() != bv.rows()) {
        throw ShapeError("matmul: incompatible shapes " + av.shape_str() + " and " +
                         bv.shape_str());
    }
    const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double x = av.at(i, p);
            if (x == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) out.at(i, j) += x * bv.at(p, j);
        }
    }
    const int ia = a.id, ib = b.id;
    return t.push(std::move(out), [ia, ib, m, k, n](Tape& tp, int self) {
        const Tensor& g = tp.grad(Var{&tp, self});
        const Tensor& av2 = tp.value(Var{&tp, ia});
        const Tensor& bv2 = tp.value(Var{&tp, ib});
        Tensor& da = tp.grad(ia);
        Tensor& db = tp.grad(ib);
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                const double gij = g.at(i, j);
                if (gij == 0.0) continue;
                for (std::size_t p = 0; p < k; ++p) {
                    da.at(i, p) += gij * bv2.at(p, j);
                    db.at(p, j) += av2.at(i, p) * gij;
                }
            }
        }
    });
}

// y = a . b^T for a [m x k], b [n x k]; avoids materializing transposes in
// attention logits.
inline Var matmul_nt(Var a, Var b) {
    Tape& t = tape_of(a, b);
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    if (av.ndim() != 2 || bv.ndim() != 2 || av.cols() != bv.cols()) {
        throw ShapeError("matmul_nt: incompatible shapes");
    }
    const std::size_t m = av.rows(), k = av.cols(), n = bv.rows();
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += av.at(i, p) * bv.at(j, p);
            out.at(i, j) = acc;
        }
    }
    const int ia = a.id, ib = b.id;
    return t.push(std::move(out), [ia, ib, m, k, n](Tape& tp, int self) {
        const Tensor& g = tp.grad(Var{&tp, self});
        const Tensor& av2 = tp.value(Var{&tp, ia});
        const Tensor& bv2 = tp.value(Var{&tp, ib});
        Tensor& da = tp.grad(ia);
        Tensor& db = tp.grad(ib);
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                const double gij = g.at(i, j);
                if (gij == 0.0) continue;
                for (std::size_t p = 0; p < k; ++p) {
                    da.at(i, p) += gij * bv2.at(j, p);
                    db.at(j, p) += gij * av2.at(i, p);
                }
            }
        }
    });
}

// y = x . w + b with b broadcast over rows; pass b.id = -1 for no bias.
inline Var linear(Var x, Var w, Var b) {
    Tape& t = tape_of(x, w);
    Var y = matmul(x, w);
    if (b.id < 0) return y;
    const Tensor& bv = t.value(b);
    const Tensor& yv = t.value(y);
    if (bv.size() != yv.cols()) throw ShapeError("linear: bias length != output width");
    Tensor out = yv;
    for (std::size_t i = 0; i < out.rows(); ++i) {
        for (std::size_t j = 0; j < out.cols(); ++j) out.at(i, j) += bv[j];
    }
    const int iy = y.id, ib = b.id;
    return t.push(std::move(out), [iy, ib](Tape& tp, int self) {
        const Tensor& g = tp.grad(Var{&tp, self});
        tp.accumulate(iy, g);
        Tensor& db = tp.grad(ib);
        for (std::size_t i = 0; i < g.rows(); ++i) {
            for (std::size_t j = 0; j < g.cols(); ++j) db[j] += g.at(i, j);
        }
    });
}

inline Var linear(Var x, Var w) { return linear(x, w, Var{nullptr, -1}); }

// Row-wise softmax under an additive mask whose entries are 0 or -inf.
// Masked entries come out exactly 0; fully-masked rows come out all-zero.
inline Var softmax_rows(Var x, const Tensor& mask) {
    Tape& t = tape_of(x);
    const Tensor& xv = t.value(x);
    require_same_shape(xv, mask, "softmax_rows");
    for (double v : xv.data()) {
        if (std::isnan(v)) throw NumericError("softmax_rows: NaN input");
    }
    const std::size_t m = xv.rows(), n = xv.cols();
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
            const double z = xv.at(i, j) + mask.at(i, j);
            if (z > mx) mx = z;
        }
        if (mx == -std::numeric_limits<double>::infinity()) continue;  // fully masked
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double z = xv.at(i, j) + mask.at(i, j);
            const double e = std::isinf(z) ? 0.0 : std::exp(z - mx);
            out.at(i, j) = e;
            sum += e;
        }
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) /= sum;
    }
    const int ix = x.id;
    return t.push(std::move(out), [ix, m, n](Tape& tp, int self) {
        const Tensor& g = tp.grad(Var{&tp, self});
        const Tensor& y = tp.value(Var{&tp, self});
        Tensor& dx = tp.grad(ix);
        for (std::size_t i = 0; i < m; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += g.at(i, j) * y.at(i, j);
            for (std::size_t j = 0; j < n; ++j) {
                dx.at(i, j) += y.at(i, j) * (g.at(i, j) - dot);
            }
        }
    });
}

// sigma(e)_ij = e_ij / sum_j e_ij on non-negative input; all-zero rows stay
// all-zero.
inline Var renormalize_rows(Var x) {
    Tape& t = tape_of(x);
    const Tensor& xv = t.value(x);
    const std::size_t m = xv.rows(), n = xv.cols();
    for (double v : xv.data()) {
        if (v < 0.0) throw ValidationError("renormalize_rows: negative entry");
    }
    Tensor out({m, n});
    std::vector<double> sums(m, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) sums[i] += xv.at(i, j);
        if (sums[i] > 0.0) {
            for (std::size_t j = 0; j < n; ++j) out.at(i, j) = xv.at(i, j) / sums[i];
        }
    }
    const int ix = x.id;
    return t.push(std::move(out), [ix, m, n, sums](Tape& tp, int self) {
        const Tensor& g = tp.grad(Var{&tp, self});
        const Tensor& y = tp.value(Var{&tp, self});
        Tensor& dx = tp.grad(ix);
        for (std::size_t i = 0; i < m; ++i) {
            if (sums[i] <= 0.0) continue;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += g.at(i, j) * y.at(i, j);
            for (std::size_t j = 0; j < n; ++j) {
                dx.at(i, j) += (g.at(i, j) - dot) / sums[i];
            }
        }
    });
}

constexpr double kLayerNormEps = 1e-5;

// Row-wise layer norm with affine parameters; constant rows normalize to
// zero before the affine step.
inline Var layer_norm(Var x, Var gamma, Var beta) {
    Tape& t = tape_of(x, gamma);
    const Tensor& xv = t.value(x);
    const Tensor& gv = t.value(gamma);
    const Tensor& bv = t.value(beta);
    const std::size_t m = xv.rows(), d = xv.cols();
    if (gv.size() != d || bv.size() != d) throw ShapeError("layer_norm: affine length != width");
    Tensor out({m, d});
    Tensor xhat({m, d});
    std::vector<double> inv_std(m);
    for (std::size_t i = 0; i < m; ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += xv.at(i, j);
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = xv.at(i, j) - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        inv_std[i] = 1.0 / std::sqrt(var + kLayerNormEps);
        for (std::size_t j = 0; j < d; ++j) {
            xhat.at(i, j) = (xv.at(i, j) - mean) * inv_std[i];
            out.at(i, j) = gv[j] * xhat.at(i, j) + bv[j];
        }
    }
    const int ix = x.id, ig = gamma.id, ib = beta.id;
    auto xhat_s = std::make_shared<Tensor>(std::move(xhat));
    return t.push(std::move(out), [ix, ig, ib, m, d, inv_std, xhat_s](Tape& tp, int self) {
        const Tensor& g = tp.grad(Var{&tp, self});
        const Tensor& gv2 = tp.value(Var{&tp, ig});
        Tensor& dx = tp.grad(ix);
        Tensor& dgamma = tp.grad(ig);
        Tensor& dbeta = tp.grad(ib);
        for (std::size_t i = 0; i < m; ++i) {
            double mean_q = 0.0, mean_qx = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                const double q = gv2[j] * g.at(i, j);
                mean_q += q;
                mean_qx += q * xhat_s->at(i, j);
                dgamma[j] += g.at(i, j) * xhat_s->at(i, j);
                dbeta[j] += g.at(i, j);
            }
            mean_q /= static_cast<double>(d);
            mean_qx /= static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) {
                const double q = gv2[j] * g.at(i, j);
                dx.at(i, j) += (q - mean_q - xhat_s->at(i, j) * mean_qx) * inv_std[i];
            }
        }
    });
}

// Exact (erf) GELU.
inline Var gelu(Var x) {
    Tape& t = tape_of(x);
    Tensor out = t.value(x);
    for (auto& v : out.data()) v = 0.5 * v * (1.0 + std::erf(v * std::numbers::inv_sqrt2));
    const int ix = x.id;
    return t.push(std::move(out), [ix](Tape& tp, int self) {
        const Tensor& g = tp.grad(Var{&tp, self});
        const Tensor& xv = tp.value(Var{&tp, ix});
        double* dx = tp.grad_data(ix);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double v = xv[i];
            const double phi = std::exp(-0.5 * v * v) / std::numbers::sqrt2 /
                               std::sqrt(std::numbers::pi);
            const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::inv_sqrt2));
            dx[i] += g[i] * (cdf + v * phi);
        }
    });
}

// Gathers rows of a [r x d] matrix; duplicate indices are allowed and
// scatter-add on backward. Doubles as the embedding lookup.
inline Var gather_rows(Var x, std::vector<std::size_t> indices) {
    Tape& t = tape_of(x);
    const Tensor& xv = t.value(x);
    const std::size_t d = xv.cols();
    for (auto idx : indices) {
        if (idx >= xv.rows()) throw ValidationError("gather_rows: index out of range");
    }
    Tensor out({indices.size(), d});
    for (std::size_t i = 0; i < indices.size(); ++i) {
        for (std::size_t j = 0; j < d; ++j) out.at(i, j) = xv.at(indices[i], j);
    }
    const int ix = x.id;
    return t.push(std::move(out), [ix, indices, d](Tape& tp, int self) {
        const Tensor& g = tp.grad(Var{&tp, self});
        Tensor& dx = tp.grad(ix);
        for (std::size_t i = 0; i < indices.size(); ++i) {
            for (std::size_t j = 0; j < d; ++j) dx.at(indices[i], j) += g.at(i, j);
        }
    });
}

// Places rows of x [k x d] into an all-zero [n x d] matrix at the given
// (distinct) row indices.
inline Var place_rows(Var x, std::size_t n, const std::vector<std::size_t>& indices) {
    Tape& t = tape_of(x);
    const Tensor& xv = t.value(x);
    if (xv.rows() != indices.size()) throw ShapeError("place_rows: rows != indices");
    const std::size_t d = xv.cols();
    Tensor out({n, d});
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= n) throw ValidationError("place_rows: index out of range");
        for (std::size_t j = 0; j < d; ++j) out.at(indices[i], j) = xv.at(i, j);
    }
    const int ix = x.id;
    return t.push(std::move(out), [ix, indices, d](Tape& tp, int self) {
        const Tensor& g = tp.grad(Var{&tp, self});
        Tensor& dx = tp.grad(ix);
        for (std::size_t i = 0; i < indices.size(); ++i) {
            for (std::size_t j = 0; j < d; ++j) dx.at(i, j) += g.at(indices[i], j);
        }
    });
}

inline Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no parts");
    Tape& t = *parts.front().tape;
    const std::size_t m = t.value(parts.front()).rows();
    std::size_t total = 0;
    for (Var p : parts) {
        if (t.value(p).rows() != m) throw ShapeError("concat_cols: row mismatch");
        total += t.value(p).cols();
    }
    Tensor out({m, total});
    std::size_t off = 0;
    std::vector<int> ids;
    std::vector<std::size_t> widths;
    for (Var p : parts) {
        const Tensor& pv = t.value(p);
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < pv.cols(); ++j) out.at(i, off + j) = pv.at(i, j);
        }
        ids.push_back(p.id);
        widths.push_back(pv.cols());
        off += pv.cols();
    }
    return t.push(std::move(out), [ids, widths, m](Tape& tp, int self) {
        const Tensor& g = tp.grad(Var{&tp, self});
        std::size_t off2 = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            Tensor& dp = tp.grad(ids[k]);
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < widths[k]; ++j) {
                    dp.at(i, j) += g.at(i, off2 + j);
                }
            }
            off2 += widths[k];
        }
    });
}

// Stacks scalar vars into a [1 x k] row (e.g. the four choice scores).
inline Var stack_scalars(const std::vector<Var>& scalars) {
    if (scalars.empty()) throw ShapeError("stack_scalars: empty");
    Tape& t = *scalars.front().tape;
    Tensor out({1, scalars.size()});
    std::vector<int> ids;
    for (std::size_t i = 0; i < scalars.size(); ++i) {
        if (t.value(scalars[i]).size() != 1) throw ShapeError("stack_scalars: non-scalar");
        out[i] = t.value(scalars[i])[0];
        ids.push_back(scalars[i].id);
    }
    return t.push(std::move(out), [ids](Tape& tp, int self) {
        const Tensor& g = tp.grad(Var{&tp, self});
        for (std::size_t i = 0; i < ids.size(); ++i) {
            Tensor& d = tp.grad(ids[i]);
            d[0] += g[i];
        }
    });
}

inline Var mean_all(Var x) {
    Tape& t = tape_of(x);
    const Tensor& xv = t.value(x);
    double s = 0.0;
    for (double v : xv.data()) s += v;
    const double inv = 1.0 / static_cast<double>(xv.size());
    const int ix = x.id;
    return t.push(Tensor::scalar(s * inv), [ix, inv](Tape& tp, int self) {
        const double g = tp.grad(Var{&tp, self})[0];
        double* dx = tp.grad_data(ix);
        const std::size_t sz = tp.value(Var{&tp, ix}).size();
        for (std::size_t i = 0; i < sz; ++i) dx[i] += g * inv;
    });
}

inline Var sum_all(Var x) {
    Tape& t = tape_of(x);
    const Tensor& xv = t.value(x);
    double s = 0.0;
    for (double v : xv.data()) s += v;
    const int ix = x.id;
    return t.push(Tensor::scalar(s), [ix](Tape& tp, int self) {
        const double g = tp.grad(Var{&tp, self})[0];
        double* dx = tp.grad_data(ix);
        const std::size_t sz = tp.value(Var{&tp, ix}).size();
        for (std::size_t i = 0; i < sz; ++i) dx[i] += g;
    });
}

namespace detail {
inline void rowwise_log_softmax(const Tensor& z, std::size_t i, std::vector<double>& logp) {
    const std::size_t k = z.cols();
    double mx = z.at(i, 0);
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, z.at(i, j));
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(z.at(i, j) - mx);
    const double lse = mx + std::log(sum);
    logp.resize(k);
    for (std::size_t j = 0; j < k; ++j) logp[j] = z.at(i, j) - lse;
}
}  // namespace detail

// Mean negative log-likelihood over rows of logits.
inline Var cross_entropy_mean(Var logits, const std::vector<std::size_t>& targets) {
    Tape& t = tape_of(logits);
    const Tensor& z = t.value(logits);
    const std::size_t m = z.rows(), k = z.cols();
    if (targets.size() != m) throw ShapeError("cross_entropy_mean: target count != rows");
    double total = 0.0;
    std::vector<double> logp;
    for (std::size_t i = 0; i < m; ++i) {
        if (targets[i] >= k) throw ValidationError("cross_entropy_mean: bad target");
        detail::rowwise_log_softmax(z, i, logp);
        total -= logp[targets[i]];
    }
    const int iz = logits.id;
    return t.push(Tensor::scalar(total / static_cast<double>(m)),
                  [iz, targets, m, k](Tape& tp, int self) {
                      const double g = tp.grad(Var{&tp, self})[0] / static_cast<double>(m);
                      const Tensor& z2 = tp.value(Var{&tp, iz});
                      Tensor& dz = tp.grad(iz);
                      std::vector<double> logp2;
                      for (std::size_t i = 0; i < m; ++i) {
                          detail::rowwise_log_softmax(z2, i, logp2);
                          for (std::size_t j = 0; j < k; ++j) {
                              const double p = std::exp(logp2[j]);
                              dz.at(i, j) += g * (p - (j == targets[i] ? 1.0 : 0.0));
                          }
                      }
                  });
}

// Mean focal loss with optional per-class weights (empty = unweighted).
// gamma = 0 and unit weights reduce to cross_entropy_mean exactly: both
// paths share rowwise_log_softmax and the (1 - p)^0 factor is exactly 1.
inline Var focal_loss_mean(Var logits, const std::vector<std::size_t>& targets, double gamma,
                           const std::vector<double>& class_weights = {}) {
    Tape& t = tape_of(logits);
    const Tensor& z = t.value(logits);
    const std::size_t m = z.rows(), k = z.cols();
    if (gamma < 0.0) throw ConfigError("focal gamma must be >= 0");
    if (targets.size() != m) throw ShapeError("focal_loss_mean: target count != rows");
    if (!class_weights.empty() && class_weights.size() != k) {
        throw ShapeError("focal_loss_mean: weight count != classes");
    }
    auto wt = [&](std::size_t cls) {
        return class_weights.empty() ? 1.0 : class_weights[cls];
    };
    double total = 0.0;
    std::vector<double> logp;
    for (std::size_t i = 0; i < m; ++i) {
        if (targets[i] >= k) throw ValidationError("focal_loss_mean: bad target");
        detail::rowwise_log_softmax(z, i, logp);
        const double lp = logp[targets[i]];
        const double focal = gamma == 0.0 ? 1.0 : std::pow(1.0 - std::exp(lp), gamma);
        total -= wt(targets[i]) * focal * lp;
    }
    const int iz = logits.id;
    return t.push(
        Tensor::scalar(total / static_cast<double>(m)),
        [iz, targets, gamma, class_weights, m, k](Tape& tp, int self) {
            const double g = tp.grad(Var{&tp, self})[0] / static_cast<double>(m);
            const Tensor& z2 = tp.value(Var{&tp, iz});
            Tensor& dz = tp.grad(iz);
            std::vector<double> logp2;
            for (std::size_t i = 0; i < m; ++i) {
                detail::rowwise_log_softmax(z2, i, logp2);
                const double w = class_weights.empty() ? 1.0 : class_weights[targets[i]];
                const double lp = logp2[targets[i]];
                const double p = std::exp(lp);
                const double u = 1.0 - p;
                // d(term)/d(logp_t); the u -> 0 limit is 0 for gamma > 0.
                double dt;
                if (gamma == 0.0) {
                    dt = -w;
                } else if (u < 1e-15) {
                    dt = 0.0;
                } else {
                    dt = -w * (std::pow(u, gamma) - gamma * std::pow(u, gamma - 1.0) * p * lp);
                }
                for (std::size_t j = 0; j < k; ++j) {
                    const double pj = std::exp(logp2[j]);
                    dz.at(i, j) += g * dt * ((j == targets[i] ? 1.0 : 0.0) - pj);
                }
            }
        });
}

}  // namespace ops

}  // namespace mhgt
