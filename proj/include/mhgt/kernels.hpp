#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "mhgt/autograd.hpp"
#include "mhgt/errors.hpp"
#include "mhgt/scene_graph.hpp"

namespace mhgt {

// Distance-rescaling function applied to the attention matrix. The rational
// quadratic and Gaussian kernels peak at d = 1 and decay with distance;
// LinearIdentity (F(d) = d) exists only for ablation parity; Off disables
// rescaling.
enum class KernelKind { RationalQuadratic, Gaussian, LinearIdentity, Off };

inline const char* kernel_name(KernelKind k) {
    switch (k) {
        case KernelKind::RationalQuadratic: return "rq";
        case KernelKind::Gaussian: return "gaussian";
        case KernelKind::LinearIdentity: return "identity";
        case KernelKind::Off: return "off";
    }
    return "?";
}

inline KernelKind kernel_from_name(const std::string& s) {
    if (s == "rq" || s == "rational_quadratic") return KernelKind::RationalQuadratic;
    if (s == "gaussian") return KernelKind::Gaussian;
    if (s == "identity" || s == "linear") return KernelKind::LinearIdentity;
    if (s == "off") return KernelKind::Off;
    throw ConfigError("unknown kernel kind: " + s);
}

// Role of the query token; text and special queries are never rescaled.
enum class TokenRole { Entity, Predicate, Other };

inline TokenRole role_of(const TokenDescriptor& t) {
    switch (t.modality) {
        case Modality::Entity: return TokenRole::Entity;
        case Modality::Predicate: return TokenRole::Predicate;
        default: return TokenRole::Other;
    }
}

inline std::vector<TokenRole> token_roles(const TokenSequence& seq) {
    std::vector<TokenRole> roles;
    roles.reserve(seq.size());
    for (const auto& t : seq.tokens) roles.push_back(role_of(t));
    return roles;
}

// Mapped (positive) kernel scalars. Raw values are unconstrained and pass
// through exp, so alpha, l > 0 always holds; raw 0 gives alpha = l = 1.
struct KernelParams {
    double alpha_o = 1.0;
    double l_o = 1.0;
    double alpha_p = 1.0;
    double l_p = 1.0;

    static KernelParams from_raw(const Tensor& raw) {
        if (raw.size() != 4) throw ShapeError("kernel raw parameter must have 4 entries");
        return KernelParams{std::exp(raw[0]), std::exp(raw[1]), std::exp(raw[2]),
                            std::exp(raw[3])};
    }
};

namespace detail {
inline double rq_value(double d, double alpha, double l) {
    const double u = (d - 1.0) * (d - 1.0);
    return std::pow(1.0 + u / (2.0 * alpha * l * l), -alpha);
}
inline double gaussian_value(double d, double l) {
    const double u = (d - 1.0) * (d - 1.0);
    return std::exp(-u / (2.0 * l * l));
}
}  // namespace detail

inline double kernel_value(int d_ij, TokenRole query_role, const KernelParams& p,
                           KernelKind kind) {
    if (d_ij < 1) throw ValidationError("kernel_value: distances are >= 1 by convention");
    if (kind == KernelKind::Off) return 1.0;
    if (query_role == TokenRole::Other) return 1.0;
    const double d = static_cast<double>(d_ij);
    switch (kind) {
        case KernelKind::RationalQuadratic:
            return query_role == TokenRole::Entity ? detail::rq_value(d, p.alpha_o, p.l_o)
                                                   : detail::rq_value(d, p.alpha_p, p.l_p);
        case KernelKind::Gaussian:
            return query_role == TokenRole::Entity ? detail::gaussian_value(d, p.l_o)
                                                   : detail::gaussian_value(d, p.l_p);
        case KernelKind::LinearIdentity:
            return d;
        case KernelKind::Off:
            return 1.0;
    }
    return 1.0;
}

// Additive hop mask M: 0 where D_ij <= h, -inf beyond.
inline Tensor hop_mask(const DistanceMatrix& d, int h) {
    if (h < 1) throw ConfigError("hop limit h must be >= 1");
    Tensor m({d.n, d.n});
    const double neg_inf = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < d.n; ++i) {
        for (std::size_t j = 0; j < d.n; ++j) {
            if (d.at(i, j) > h) m.at(i, j) = neg_inf;
        }
    }
    return m;
}

namespace ops {

// F(D) as an [n x n] tape node differentiable in the 4 raw kernel scalars.
// Row i picks the (alpha, l) pair from the query token's role.
inline Var kernel_rescale_matrix(Var kernel_raw, const DistanceMatrix& dm,
                                 const std::vector<TokenRole>& roles, KernelKind kind) {
    Tape& t = tape_of(kernel_raw);
    const Tensor& raw = t.value(kernel_raw);
    const KernelParams p = KernelParams::from_raw(raw);
    const std::size_t n = dm.n;
    if (roles.size() != n) throw ShapeError("kernel_rescale_matrix: role count != n");

    Tensor out({n, n});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out.at(i, j) = kernel_value(dm.at(i, j), roles[i], p, kind);
        }
    }

    if (kind == KernelKind::Off || kind == KernelKind::LinearIdentity) {
        // Constant in the kernel parameters.
        return t.push(std::move(out), nullptr);
    }

    const int ir = kernel_raw.id;
    DistanceMatrix dm_copy = dm;
    return t.push(std::move(out), [ir, dm_copy, roles, kind, n](Tape& tp, int self) {
        const Tensor& g = tp.grad(Var{&tp, self});
        const Tensor& raw2 = tp.value(Var{&tp, ir});
        const KernelParams p2 = KernelParams::from_raw(raw2);
        Tensor& draw = tp.grad(ir);
        for (std::size_t i = 0; i < n; ++i) {
            if (roles[i] == TokenRole::Other) continue;
            const bool is_entity = roles[i] == TokenRole::Entity;
            const double alpha = is_entity ? p2.alpha_o : p2.alpha_p;
            const double l = is_entity ? p2.l_o : p2.l_p;
            const std::size_t ia = is_entity ? 0 : 2;
            const std::size_t il = is_entity ? 1 : 3;
            for (std::size_t j = 0; j < n; ++j) {
                const double gij = g.at(i, j);
                if (gij == 0.0) continue;
                const double d = static_cast<double>(dm_copy.at(i, j));
                const double u = (d - 1.0) * (d - 1.0);
                if (kind == KernelKind::RationalQuadratic) {
                    const double base = 1.0 + u / (2.0 * alpha * l * l);
                    const double f = std::pow(base, -alpha);
                    // d/d(raw_alpha) and d/d(raw_l) via alpha = e^raw, l = e^raw
                    draw[ia] += gij * alpha * f * (-std::log(base) + (base - 1.0) / base);
                    draw[il] += gij * 2.0 * alpha * f * (base - 1.0) / base;
                } else {  // Gaussian; no alpha dependence
                    const double s = u / (2.0 * l * l);
                    const double f = std::exp(-s);
                    draw[il] += gij * 2.0 * s * f;
                }
            }
        }
    });
}

}  // namespace ops

}  // namespace mhgt
