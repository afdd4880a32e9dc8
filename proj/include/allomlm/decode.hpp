#ifndef ALLOMLM_DECODE_HPP
#define ALLOMLM_DECODE_HPP

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "allomlm/corpus.hpp"
#include "allomlm/encoder.hpp"
#include "allomlm/error.hpp"
#include "allomlm/evaluation.hpp"
#include "allomlm/glyphnet.hpp"

namespace allomlm {

enum class DecodeMode : std::uint8_t { Parallel, Greedy, Interactive };

inline std::string_view to_string(DecodeMode m) {
    switch (m) {
    case DecodeMode::Parallel:
        return "parallel";
    case DecodeMode::Greedy:
        return "greedy";
    case DecodeMode::Interactive:
        return "interactive";
    }
    return {};
}

inline DecodeMode parse_decode_mode(std::string_view s) {
    if (s == "parallel") {
        return DecodeMode::Parallel;
    }
    if (s == "greedy") {
        return DecodeMode::Greedy;
    }
    if (s == "interactive") {
        return DecodeMode::Interactive;
    }
    throw UsageError("unknown decode mode: " + std::string(s));
}

class SequenceTooLong : public DataError {
public:
    using DataError::DataError;
};

struct QueryOptions {
    bool mask_unreadable = true;     // treat □ as a position to restore
    bool mask_undeciphered = false;  // treat {UNK:n} as a position to restore
};

/// Content indices (no boundaries) with [MASK] at every position to restore.
struct Query {
    std::vector<std::int32_t> ids;
    std::vector<std::size_t> masks;
};

inline std::vector<std::size_t> mask_positions(std::span<const std::int32_t> ids) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] == Vocabulary::kMask) {
            out.push_back(i);
        }
    }
    return out;
}

/// Parse inscription text where `{MASK}` (or `[MASK]`) marks a gap.
inline Query parse_query(std::string_view text, const Vocabulary& vocab, std::size_t max_seq_len,
                         QueryOptions options = {}) {
    Query q;
    std::string_view rest = text;
    auto emit_segment = [&](std::string_view seg) {
        for (const auto& t : tokenize(seg)) {
            switch (t.kind) {
            case TokenKind::Unreadable:
                q.ids.push_back(options.mask_unreadable ? Vocabulary::kMask : Vocabulary::kUnreadable);
                break;
            case TokenKind::Undeciphered:
                q.ids.push_back(options.mask_undeciphered ? Vocabulary::kMask : vocab.at(t));
                break;
            case TokenKind::Identifiable:
                q.ids.push_back(vocab.at(t));
                break;
            }
        }
    };
    while (!rest.empty()) {
        const auto a = rest.find("{MASK}");
        const auto b = rest.find("[MASK]");
        const auto at = std::min(a, b);
        if (at == std::string_view::npos) {
            emit_segment(rest);
            break;
        }
        emit_segment(rest.substr(0, at));
        q.ids.push_back(Vocabulary::kMask);
        rest.remove_prefix(at + 6);
    }
    q.masks = mask_positions(q.ids);
    if (q.masks.empty()) {
        throw UsageError("query has no masked positions");
    }
    if (q.ids.size() + 2 > max_seq_len) {
        throw SequenceTooLong("query has " + std::to_string(q.ids.size()) + " characters; the model accepts " +
                              std::to_string(max_seq_len - 2));
    }
    return q;
}

struct Candidate {
    std::int32_t token = 0;
    double score = 0.0;  // log-probability
    FamilyId family = 0;

    bool operator==(const Candidate&) const = default;
};

struct PositionCandidates {
    std::size_t position = 0;
    std::vector<Candidate> candidates;
    std::size_t step = 0;  // greedy commit step; 0 otherwise

    bool operator==(const PositionCandidates&) const = default;
};

struct CandidateSet {
    DecodeMode mode = DecodeMode::Parallel;
    std::vector<PositionCandidates> positions;  // ascending position
    std::vector<std::size_t> fill_order;        // greedy only
    std::vector<std::int32_t> filled;           // sequence with each remaining gap set to its top-1

    bool operator==(const CandidateSet&) const = default;
};

namespace detail {

/// Log-probabilities at every [MASK] in `ids`, one row per mask.
template <typename Real>
Matrix<Real> mask_log_probs(const EncoderModel<Real>& model, std::span<const std::int32_t> ids,
                            std::span<const std::size_t> masks) {
    std::vector<std::vector<std::int32_t>> seqs{with_boundaries(ids)};
    auto batch = make_batch(seqs);
    for (auto p : masks) {
        batch.masked.push_back({0, p + 1});
        batch.gold.push_back(Vocabulary::kMask);
    }
    return forward_mlm(model, batch).log_probs;
}

inline void check_ids(std::span<const std::int32_t> ids, std::size_t k, std::size_t max_seq_len) {
    if (k == 0) {
        throw UsageError("K must be >= 1");
    }
    if (ids.size() + 2 > max_seq_len) {
        throw SequenceTooLong("sequence exceeds the model length");
    }
}

template <typename Real>
std::vector<Candidate> annotate(std::span<const Real> row, const Vocabulary& vocab, const GlyphNet& net,
                                std::size_t k) {
    std::vector<Candidate> out;
    for (const auto& s : top_k_glyphs<Real>(row, vocab, k)) {
        out.push_back({s.token, s.score, net.family_of(s.token)});
    }
    return out;
}

} // namespace detail

/// All gaps predicted from the same context in one forward pass.
template <typename Real>
CandidateSet restore_parallel(const EncoderModel<Real>& model, const Vocabulary& vocab, const GlyphNet& net,
                              std::span<const std::int32_t> ids, std::size_t k) {
    detail::check_ids(ids, k, model.config().max_seq_len);
    CandidateSet set;
    set.filled.assign(ids.begin(), ids.end());
    const auto masks = mask_positions(ids);
    if (masks.empty()) {
        return set;
    }
    const auto lp = detail::mask_log_probs(model, ids, masks);
    for (std::size_t m = 0; m < masks.size(); ++m) {
        auto cands = detail::annotate<Real>(lp.row(m), vocab, net, k);
        if (!cands.empty()) {
            set.filled[masks[m]] = cands.front().token;
        }
        set.positions.push_back({masks[m], std::move(cands), 0});
    }
    return set;
}

/// Fill the most confident gap (top-1 log-probability, ties to the lower
/// position), re-predict, repeat. Commitments are never revised.
template <typename Real>
CandidateSet restore_greedy(const EncoderModel<Real>& model, const Vocabulary& vocab, const GlyphNet& net,
                            std::span<const std::int32_t> ids, std::size_t k) {
    detail::check_ids(ids, k, model.config().max_seq_len);
    CandidateSet set;
    set.mode = DecodeMode::Greedy;
    std::vector<std::int32_t> current(ids.begin(), ids.end());
    std::map<std::size_t, PositionCandidates> done;
    for (std::size_t step = 1;; ++step) {
        const auto masks = mask_positions(current);
        if (masks.empty()) {
            break;
        }
        const auto lp = detail::mask_log_probs(model, current, masks);
        std::optional<std::size_t> best;
        std::vector<Candidate> best_cands;
        for (std::size_t m = 0; m < masks.size(); ++m) {
            auto cands = detail::annotate<Real>(lp.row(m), vocab, net, k);
            if (cands.empty()) {
                throw DataError("vocabulary has no glyph tokens");
            }
            if (!best || cands.front().score > best_cands.front().score) {
                best = m;
                best_cands = std::move(cands);
            }
        }
        const auto pos = masks[*best];
        current[pos] = best_cands.front().token;
        set.fill_order.push_back(pos);
        done[pos] = {pos, std::move(best_cands), step};
    }
    for (auto& [_, pc] : done) {
        set.positions.push_back(std::move(pc));
    }
    set.filled = std::move(current);
    return set;
}

/// Candidates for the gaps left after applying human-accepted tokens.
template <typename Real>
CandidateSet restore_step(const EncoderModel<Real>& model, const Vocabulary& vocab, const GlyphNet& net,
                          std::span<const std::int32_t> ids, const std::map<std::size_t, std::int32_t>& accepted,
                          std::size_t k) {
    std::vector<std::int32_t> current(ids.begin(), ids.end());
    for (auto [pos, token] : accepted) {
        if (pos >= current.size() || current[pos] != Vocabulary::kMask) {
            throw UsageError("position " + std::to_string(pos) + " is not a gap");
        }
        if (!vocab.is_glyph(token)) {
            throw UsageError("accepted token is not a glyph");
        }
        current[pos] = token;
    }
    auto set = restore_parallel(model, vocab, net, current, k);
    set.mode = DecodeMode::Interactive;
    return set;
}

template <typename Real>
CandidateSet restore(const EncoderModel<Real>& model, const Vocabulary& vocab, const GlyphNet& net,
                     std::span<const std::int32_t> ids, std::size_t k, DecodeMode mode) {
    switch (mode) {
    case DecodeMode::Greedy:
        return restore_greedy(model, vocab, net, ids, k);
    case DecodeMode::Interactive:
        return restore_step(model, vocab, net, ids, {}, k);
    case DecodeMode::Parallel:
        break;
    }
    return restore_parallel(model, vocab, net, ids, k);
}

inline std::string render_ids(std::span<const std::int32_t> ids, const Vocabulary& vocab) {
    std::string out;
    for (auto id : ids) {
        out += id == Vocabulary::kMask ? std::string("{MASK}") : vocab.label(id);
    }
    return out;
}

inline nlohmann::json to_json(const CandidateSet& set, const Vocabulary& vocab) {
    nlohmann::json positions = nlohmann::json::array();
    for (const auto& pc : set.positions) {
        nlohmann::json cands = nlohmann::json::array();
        for (const auto& c : pc.candidates) {
            cands.push_back({{"token", vocab.label(c.token)},
                             {"index", c.token},
                             {"score", c.score},
                             {"family", c.family},
                             {"family_head", vocab.label(c.family)}});
        }
        nlohmann::json p{{"position", pc.position}, {"candidates", cands}};
        if (set.mode == DecodeMode::Greedy) {
            p["step"] = pc.step;
        }
        positions.push_back(p);
    }
    nlohmann::json j{{"schema", kSchema},
                     {"mode", to_string(set.mode)},
                     {"positions", positions},
                     {"filled", render_ids(set.filled, vocab)}};
    if (set.mode == DecodeMode::Greedy) {
        j["fill_order"] = set.fill_order;
    }
    return j;
}

inline std::string render_candidates(const CandidateSet& set, const Vocabulary& vocab) {
    std::string out;
    for (const auto& pc : set.positions) {
        out += "position " + std::to_string(pc.position);
        if (set.mode == DecodeMode::Greedy) {
            out += " (step " + std::to_string(pc.step) + ")";
        }
        out += ":\n";
        std::size_t rank = 1;
        for (const auto& c : pc.candidates) {
            char score[32];
            std::snprintf(score, sizeof score, "%.4f", c.score);
            out += "  " + std::to_string(rank++) + ". " + vocab.label(c.token) + "  " + score + "  family " +
                   vocab.label(c.family) + "\n";
        }
    }
    out += "filled: " + render_ids(set.filled, vocab) + "\n";
    return out;
}

} // namespace allomlm

#endif
