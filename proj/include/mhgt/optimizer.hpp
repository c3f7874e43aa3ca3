#pragma once

#include <span>
#include <vector>

#include "mhgt/autograd.hpp"
#include "mhgt/errors.hpp"

namespace mhgt {

// Plain SGD with a step decay schedule; paper-style defaults are
// lr 0.05 over 20 epochs, decayed by 0.1 at epochs 14 and 18.
struct OptimizerConfig {
    enum class Kind { Sgd };

    Kind kind = Kind::Sgd;
    double learning_rate = 0.05;
    std::vector<int> decay_epochs{14, 18};
    double decay_factor = 0.1;
    int epochs = 20;

    void validate() const {
        if (learning_rate <= 0.0) throw ConfigError("learning_rate must be positive");
        if (decay_factor <= 0.0 || decay_factor > 1.0) {
            throw ConfigError("decay_factor must be in (0, 1]");
        }
        if (epochs <= 0) throw ConfigError("epochs must be positive");
        int prev = -1;
        for (int e : decay_epochs) {
            if (e <= prev || e >= epochs) {
                throw ConfigError("decay_epochs must be strictly increasing and < epochs");
            }
            prev = e;
        }
    }
};

inline double learning_rate_at(const OptimizerConfig& cfg, int epoch) {
    double lr = cfg.learning_rate;
    for (int e : cfg.decay_epochs) {
        if (epoch >= e) lr *= cfg.decay_factor;
    }
    return lr;
}

inline void sgd_step(std::span<Parameter* const> params, const OptimizerConfig& cfg, int epoch) {
    const double lr = learning_rate_at(cfg, epoch);
    for (Parameter* p : params) {
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            p->value[i] -= lr * p->grad[i];
        }
    }
}

}  // namespace mhgt
