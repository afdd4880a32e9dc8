#ifndef ALLOMLM_MASKING_HPP
#define ALLOMLM_MASKING_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "allomlm/corpus.hpp"
#include "allomlm/error.hpp"
#include "allomlm/glyphnet.hpp"
#include "allomlm/rng.hpp"

namespace allomlm {

enum class MaskMode : std::uint8_t { Uniform, GlyphBiased };

struct MaskConfig {
    std::size_t stride = 10;
    double mlm_prob = 0.2;
    double bias = 2.0;  // weight of glyph-family tokens, >= 1
    MaskMode mode = MaskMode::Uniform;
    /// Draw the stride phase per plan instead of always starting at the first
    /// character. Sequences no longer than the stride still get one candidate.
    bool random_offset = true;

    void validate() const {
        if (stride < 1) {
            throw UsageError("stride must be >= 1");
        }
        if (!(mlm_prob > 0.0 && mlm_prob <= 1.0)) {
            throw UsageError("mlm_prob must be in (0, 1]");
        }
        if (!(bias >= 1.0)) {
            throw UsageError("bias must be >= 1");
        }
    }
};

/// Masked positions for one sequence. Positions index the token list without
/// boundary markers (encoded position = position + 1).
struct MaskPlan {
    std::string sequence_id;
    std::vector<std::size_t> positions;  // ascending
    std::vector<std::int32_t> gold;      // vocabulary index per position
    std::vector<std::size_t> candidates;
    std::vector<double> probabilities;   // sampling law over `candidates`
};

/// Every s-th position starting at `offset`, skipping Unreadable and
/// Undeciphered cells (they are never masked).
inline std::vector<std::size_t> stride_candidates(std::span<const Token> tokens, std::size_t stride,
                                                  std::size_t offset = 0) {
    if (stride < 1) {
        throw UsageError("stride must be >= 1");
    }
    std::vector<std::size_t> out;
    for (std::size_t p = offset; p < tokens.size(); p += stride) {
        if (tokens[p].kind == TokenKind::Identifiable) {
            out.push_back(p);
        }
    }
    return out;
}

/// Same rule over vocabulary indices (boundaries excluded).
inline std::vector<std::size_t> stride_candidates(std::span<const std::int32_t> ids, const Vocabulary& vocab,
                                                  std::size_t stride, std::size_t offset = 0) {
    if (stride < 1) {
        throw UsageError("stride must be >= 1");
    }
    std::vector<std::size_t> out;
    for (std::size_t p = offset; p < ids.size(); p += stride) {
        if (vocab.is_glyph(ids[p])) {
            out.push_back(p);
        }
    }
    return out;
}

/// p(i) = w_i / sum_j w_j with w_i = bias for glyph-family tokens, 1 otherwise.
inline std::vector<double> glyph_bias_weights(std::span<const std::int32_t> ids, std::span<const std::size_t> candidates,
                                              const GlyphNet& net, double bias) {
    if (candidates.empty()) {
        throw UsageError("empty candidate set");
    }
    std::vector<double> w(candidates.size());
    double z = 0.0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        w[i] = net.is_glyph_token(ids[candidates[i]]) ? bias : 1.0;
        z += w[i];
    }
    for (auto& x : w) {
        x /= z;
    }
    return w;
}

/// Draw `count` distinct indices into `probabilities` by successive weighted
/// draws without replacement. Result is ascending.
inline std::vector<std::size_t> draw_without_replacement(std::span<const double> probabilities, std::size_t count,
                                                         Rng& rng) {
    std::vector<double> w(probabilities.begin(), probabilities.end());
    std::vector<std::size_t> picked;
    count = std::min(count, w.size());
    for (std::size_t k = 0; k < count; ++k) {
        double total = 0.0;
        for (double x : w) {
            total += x;
        }
        const double u = rng.uniform() * total;
        double acc = 0.0;
        std::size_t choice = w.size();
        std::size_t last_live = w.size();
        for (std::size_t i = 0; i < w.size(); ++i) {
            if (w[i] <= 0.0) {
                continue;
            }
            last_live = i;
            acc += w[i];
            if (u < acc) {
                choice = i;
                break;
            }
        }
        if (choice == w.size()) {
            choice = last_live;  // rounding at the top end
        }
        picked.push_back(choice);
        w[choice] = 0.0;
    }
    std::sort(picked.begin(), picked.end());
    return picked;
}

inline std::size_t masked_count(double mlm_prob, std::size_t candidates) {
    const auto m = static_cast<std::size_t>(std::llround(mlm_prob * static_cast<double>(candidates)));
    return std::max<std::size_t>(1, m);
}

/// Sample a plan for one encoded sequence (`ids` excludes boundaries).
/// Deterministic in `seed`. Empty when the drawn offset leaves nothing maskable.
inline std::optional<MaskPlan> try_sample_mask_plan(std::span<const std::int32_t> ids, const Vocabulary& vocab,
                                                    const MaskConfig& config, const GlyphNet& net, std::uint64_t seed,
                                                    std::string sequence_id = {}) {
    config.validate();
    Rng rng(seed);
    std::size_t offset = 0;
    if (config.random_offset && !ids.empty()) {
        offset = static_cast<std::size_t>(rng.below(std::min<std::size_t>(config.stride, ids.size())));
    }
    MaskPlan plan;
    plan.sequence_id = std::move(sequence_id);
    plan.candidates = stride_candidates(ids, vocab, config.stride, offset);
    if (plan.candidates.empty()) {
        return std::nullopt;
    }
    const double bias = config.mode == MaskMode::GlyphBiased ? config.bias : 1.0;
    plan.probabilities = glyph_bias_weights(ids, plan.candidates, net, bias);
    const auto m = masked_count(config.mlm_prob, plan.candidates.size());
    for (auto idx : draw_without_replacement(plan.probabilities, m, rng)) {
        plan.positions.push_back(plan.candidates[idx]);
        plan.gold.push_back(ids[plan.candidates[idx]]);
    }
    return plan;
}

/// As above, but throws UsageError when nothing is maskable.
inline MaskPlan sample_mask_plan(std::span<const std::int32_t> ids, const Vocabulary& vocab, const MaskConfig& config,
                                 const GlyphNet& net, std::uint64_t seed, std::string sequence_id = {}) {
    auto plan = try_sample_mask_plan(ids, vocab, config, net, seed, std::move(sequence_id));
    if (!plan) {
        throw UsageError("sequence has no mask candidates");
    }
    return std::move(*plan);
}

} // namespace allomlm

#endif
