#pragma once

#include <cmath>
#include <cstddef>
#include <iostream>
#include <vector>

#include "mhgt/errors.hpp"
#include "mhgt/tensor.hpp"

namespace mhgt {

constexpr double kProbClamp = 1e-12;

// -log p_target from raw logits via a stable log-sum-exp.
inline double cross_entropy(const Tensor& logits, std::size_t target) {
    const std::size_t k = logits.size();
    if (target >= k) throw ValidationError("cross_entropy: target out of range");
    double mx = logits[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, logits[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(logits[j] - mx);
    return mx + std::log(sum) - logits[target];
}

// FL(p_t) = -(1 - p_t)^gamma * log(p_t) on an explicit class distribution.
// p_t = 0 is clamped to 1e-12 with a warning rather than returning inf.
inline double focal_loss(const Tensor& probs, std::size_t target, double gamma) {
    if (gamma < 0.0) throw ConfigError("focal gamma must be >= 0");
    if (target >= probs.size()) throw ValidationError("focal_loss: target out of range");
    double pt = probs[target];
    if (pt <= 0.0) {
        std::cerr << "warning: focal_loss target probability " << pt << " clamped to "
                  << kProbClamp << "\n";
        pt = kProbClamp;
    }
    const double focal = gamma == 0.0 ? 1.0 : std::pow(1.0 - pt, gamma);
    return -focal * std::log(pt);
}

// Raw class-balanced weight (1 - beta) / (1 - beta^count).
inline double class_balanced_weight_raw(std::size_t count, double beta) {
    if (beta < 0.0 || beta >= 1.0) throw ConfigError("class-balanced beta must be in [0, 1)");
    if (count == 0) throw ValidationError("class count must be >= 1");
    if (beta == 0.0) return 1.0;
    return (1.0 - beta) / (1.0 - std::pow(beta, static_cast<double>(count)));
}

// Per-class weights, renormalized to mean 1 so the effective learning rate
// does not depend on the count profile.
inline std::vector<double> class_balanced_weights(const std::vector<std::size_t>& class_counts,
                                                  double beta) {
    std::vector<double> w;
    w.reserve(class_counts.size());
    double total = 0.0;
    for (std::size_t c : class_counts) {
        w.push_back(class_balanced_weight_raw(c, beta));
        total += w.back();
    }
    if (!w.empty() && total > 0.0) {
        const double mean = total / static_cast<double>(w.size());
        for (double& v : w) v /= mean;
    }
    return w;
}

}  // namespace mhgt
