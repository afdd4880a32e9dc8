#ifndef ALLOMLM_OBJECTIVES_HPP
#define ALLOMLM_OBJECTIVES_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>

#include "allomlm/error.hpp"
#include "allomlm/glyphnet.hpp"
#include "allomlm/tensor.hpp"

namespace allomlm {

struct LossBreakdown {
    double mlm = 0.0;
    double gn = 0.0;
    double alpha = 0.0;
    double combined = 0.0;
    std::size_t masked = 0;
};

enum class AlphaShape : std::uint8_t { Constant, LinearWarm };

struct AlphaSchedule {
    AlphaShape shape = AlphaShape::LinearWarm;
    double start = 0.0;
    double end = 0.3;
    std::size_t warm_steps = 0;
};

/// Alpha at a global step; clamped to [0, 1].
inline double alpha_at(const AlphaSchedule& s, std::size_t step) {
    double a = s.start;
    if (s.shape == AlphaShape::LinearWarm) {
        if (s.warm_steps == 0 || step >= s.warm_steps) {
            a = s.end;
        } else {
            const double t = static_cast<double>(step) / static_cast<double>(s.warm_steps);
            a = s.start + (s.end - s.start) * t;
        }
    }
    return std::clamp(a, 0.0, 1.0);
}

namespace detail {

template <typename Real>
void check_targets(const Matrix<Real>& log_probs, std::span<const std::int32_t> gold) {
    if (log_probs.rows == 0) {
        throw UsageError("no masked positions");
    }
    if (gold.size() != log_probs.rows) {
        throw UsageError("need exactly one gold index per row");
    }
    for (auto g : gold) {
        if (g < 0 || static_cast<std::size_t>(g) >= log_probs.cols) {
            throw UsageError("gold index out of range");
        }
    }
}

} // namespace detail

/// Mean negative log-probability of the gold entries.
template <typename Real>
double mlm_loss(const Matrix<Real>& log_probs, std::span<const std::int32_t> gold) {
    detail::check_targets(log_probs, gold);
    double s = 0.0;
    for (std::size_t i = 0; i < gold.size(); ++i) {
        s -= static_cast<double>(log_probs(i, static_cast<std::size_t>(gold[i])));
    }
    return s / static_cast<double>(gold.size());
}

/// Family-averaged negative log-likelihood: each position contributes the mean
/// NLL over every member of its gold token's glyph family.
template <typename Real>
double gn_loss(const Matrix<Real>& log_probs, std::span<const std::int32_t> gold, const GlyphNet& net) {
    detail::check_targets(log_probs, gold);
    double s = 0.0;
    for (std::size_t i = 0; i < gold.size(); ++i) {
        const auto family = net.family_members_of(gold[i]);
        double f = 0.0;
        for (auto t : family) {
            f -= static_cast<double>(log_probs(i, static_cast<std::size_t>(t)));
        }
        s += f / static_cast<double>(family.size());
    }
    return s / static_cast<double>(gold.size());
}

inline double combined_loss(double mlm, double gn, double alpha) { return (1.0 - alpha) * mlm + alpha * gn; }

/// Classification counterpart of mlm_loss over a label space.
template <typename Real>
double classification_loss(const Matrix<Real>& log_probs, std::span<const std::int32_t> gold) {
    return mlm_loss(log_probs, gold);
}

/// Value and gradient (w.r.t. log-probabilities) of (1-alpha) L_MLM + alpha L_GN.
/// With alpha = 0 the GN term is still reported but contributes nothing.
template <typename Real>
LossBreakdown combined_objective(const Matrix<Real>& log_probs, std::span<const std::int32_t> gold,
                                 const GlyphNet& net, double alpha, Matrix<Real>* grad) {
    LossBreakdown lb;
    lb.masked = gold.size();
    lb.mlm = mlm_loss(log_probs, gold);
    lb.gn = gn_loss(log_probs, gold, net);
    lb.alpha = alpha;
    lb.combined = combined_loss(lb.mlm, lb.gn, alpha);
    if (grad) {
        *grad = Matrix<Real>(log_probs.rows, log_probs.cols);
        const double m = static_cast<double>(gold.size());
        for (std::size_t i = 0; i < gold.size(); ++i) {
            (*grad)(i, static_cast<std::size_t>(gold[i])) += static_cast<Real>(-(1.0 - alpha) / m);
            if (alpha != 0.0) {
                const auto family = net.family_members_of(gold[i]);
                const double w = -alpha / (m * static_cast<double>(family.size()));
                for (auto t : family) {
                    (*grad)(i, static_cast<std::size_t>(t)) += static_cast<Real>(w);
                }
            }
        }
    }
    return lb;
}

/// Value and gradient of the mean classification NLL.
template <typename Real>
double classification_objective(const Matrix<Real>& log_probs, std::span<const std::int32_t> gold, Matrix<Real>* grad) {
    const double loss = classification_loss(log_probs, gold);
    if (grad) {
        *grad = Matrix<Real>(log_probs.rows, log_probs.cols);
        const double m = static_cast<double>(gold.size());
        for (std::size_t i = 0; i < gold.size(); ++i) {
            (*grad)(i, static_cast<std::size_t>(gold[i])) = static_cast<Real>(-1.0 / m);
        }
    }
    return loss;
}

} // namespace allomlm

#endif
