#ifndef ALLOMLM_GLYPHNET_HPP
#define ALLOMLM_GLYPHNET_HPP

#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "allomlm/corpus.hpp"
#include "allomlm/error.hpp"
#include "allomlm/tensor.hpp"

namespace allomlm {

enum class Era : std::uint8_t { Shang, WesternZhou, EasternZhou };

inline std::string_view to_string(Era e) {
    switch (e) {
    case Era::Shang:
        return "Shang";
    case Era::WesternZhou:
        return "WesternZhou";
    case Era::EasternZhou:
        return "EasternZhou";
    }
    return {};
}

struct AllographPair {
    Token a;
    Token b;
    std::optional<Era> era;
    std::string source;
};

struct PairFile {
    std::vector<AllographPair> pairs;
    /// Loan-character (tongjia) links; kept for reference, never merged.
    std::vector<AllographPair> loans;
};

namespace detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

inline Token pair_token(const std::string& field) {
    auto toks = tokenize(field);
    if (toks.size() == 1) {
        return toks.front();
    }
    return Token::identifiable(field);
}

} // namespace detail

/// Parse `tokenA<TAB>tokenB<TAB>era<TAB>source` lines. `#` starts a comment
/// line. Era is Shang, WesternZhou, EasternZhou, empty or `-`; `loan` (or
/// `tongjia`) marks a loan-character link, which is set aside.
inline PairFile parse_pairs(std::string_view input) {
    PairFile file;
    std::istringstream in{std::string(input)};
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto trimmed = detail::trim(line);
        if (trimmed.empty() || trimmed.front() == '#') {
            continue;
        }
        std::vector<std::string> fields;
        std::size_t start = 0;
        while (true) {
            auto tab = line.find('\t', start);
            fields.push_back(detail::trim(std::string_view(line).substr(start, tab - start)));
            if (tab == std::string::npos) {
                break;
            }
            start = tab + 1;
        }
        const auto where = "pairs line " + std::to_string(line_no) + ": ";
        if (fields.size() < 2 || fields.size() > 4) {
            throw DataError(where + "expected 2 to 4 tab-separated fields");
        }
        if (fields[0].empty() || fields[1].empty()) {
            throw DataError(where + "empty token");
        }
        AllographPair p;
        try {
            p.a = detail::pair_token(fields[0]);
            p.b = detail::pair_token(fields[1]);
        } catch (const DataError& e) {
            throw DataError(where + e.what());
        }
        if (p.a == p.b) {
            throw DataError(where + "pair links a token to itself");
        }
        bool loan = false;
        if (fields.size() > 2) {
            const auto& era = fields[2];
            if (era == "Shang") {
                p.era = Era::Shang;
            } else if (era == "WesternZhou") {
                p.era = Era::WesternZhou;
            } else if (era == "EasternZhou") {
                p.era = Era::EasternZhou;
            } else if (era == "loan" || era == "tongjia") {
                loan = true;
            } else if (!era.empty() && era != "-") {
                throw DataError(where + "unknown era '" + era + "'");
            }
        }
        if (fields.size() > 3) {
            p.source = fields[3];
        }
        (loan ? file.loans : file.pairs).push_back(std::move(p));
    }
    return file;
}

/// Path-compressed, union-by-size disjoint sets over 0..n-1.
class DisjointSet {
public:
    explicit DisjointSet(std::size_t n) : parent_(n), size_(n, 1) {
        std::iota(parent_.begin(), parent_.end(), std::size_t{0});
    }

    std::size_t find(std::size_t x) {
        std::size_t root = x;
        while (parent_[root] != root) {
            root = parent_[root];
        }
        while (parent_[x] != root) {
            x = std::exchange(parent_[x], root);
        }
        return root;
    }

    bool unite(std::size_t a, std::size_t b) {
        a = find(a);
        b = find(b);
        if (a == b) {
            return false;
        }
        if (size_[a] < size_[b]) {
            std::swap(a, b);
        }
        parent_[b] = a;
        size_[a] += size_[b];
        return true;
    }

    std::size_t size() const noexcept { return parent_.size(); }

private:
    std::vector<std::size_t> parent_;
    std::vector<std::size_t> size_;
};

using FamilyId = std::int32_t;

/// Partition of the vocabulary into glyph families.
///
/// A family's id is the vocabulary index of its canonical representative,
/// the smallest member index (glyphs are indexed in code point order, so this
/// is the lexicographically smallest member). Unpaired tokens are singleton
/// families whose id is their own index. Immutable once built.
class GlyphNet {
public:
    GlyphNet() = default;

    /// Closure over index pairs within a universe of `universe_size` tokens.
    static GlyphNet from_index_pairs(std::span<const std::pair<std::int32_t, std::int32_t>> links,
                                     std::size_t universe_size) {
        DisjointSet sets(universe_size);
        for (auto [a, b] : links) {
            if (a < 0 || b < 0 || static_cast<std::size_t>(a) >= universe_size ||
                static_cast<std::size_t>(b) >= universe_size) {
                throw DataError("pair endpoint outside the token universe");
            }
            sets.unite(static_cast<std::size_t>(a), static_cast<std::size_t>(b));
        }
        GlyphNet net;
        net.family_.assign(universe_size, 0);
        std::vector<FamilyId> canonical_of_root(universe_size, -1);
        // ascending scan: the first member seen in each set is its minimum
        for (std::size_t i = 0; i < universe_size; ++i) {
            const auto root = sets.find(i);
            if (canonical_of_root[root] < 0) {
                canonical_of_root[root] = static_cast<FamilyId>(i);
            }
            net.family_[i] = canonical_of_root[root];
        }
        net.offsets_.assign(universe_size + 1, 0);
        for (auto f : net.family_) {
            ++net.offsets_[static_cast<std::size_t>(f) + 1];
        }
        std::partial_sum(net.offsets_.begin(), net.offsets_.end(), net.offsets_.begin());
        net.members_.assign(universe_size, 0);
        auto cursor = net.offsets_;
        for (std::size_t i = 0; i < universe_size; ++i) {
            const auto f = static_cast<std::size_t>(net.family_[i]);
            net.members_[cursor[f]++] = static_cast<std::int32_t>(i);
        }
        return net;
    }

    std::size_t universe_size() const noexcept { return family_.size(); }

    FamilyId family_of(std::int32_t token) const {
        if (token < 0 || static_cast<std::size_t>(token) >= family_.size()) {
            throw DataError("token index " + std::to_string(token) + " outside glyph net universe");
        }
        return family_[static_cast<std::size_t>(token)];
    }

    /// Members of a family, ascending. Empty span for ids that are not
    /// canonical representatives.
    std::span<const std::int32_t> members(FamilyId family) const {
        if (family < 0 || static_cast<std::size_t>(family) >= family_.size()) {
            throw DataError("unknown family id " + std::to_string(family));
        }
        const auto f = static_cast<std::size_t>(family);
        return {members_.data() + offsets_[f], offsets_[f + 1] - offsets_[f]};
    }

    std::span<const std::int32_t> family_members_of(std::int32_t token) const { return members(family_of(token)); }

    /// True iff the token belongs to a family with at least two members.
    bool is_glyph_token(std::int32_t token) const { return family_members_of(token).size() >= 2; }

    /// All family ids, ascending.
    std::vector<FamilyId> families() const {
        std::vector<FamilyId> out;
        for (std::size_t i = 0; i < family_.size(); ++i) {
            if (family_[i] == static_cast<FamilyId>(i)) {
                out.push_back(static_cast<FamilyId>(i));
            }
        }
        return out;
    }

    std::vector<FamilyId> multi_member_families() const {
        std::vector<FamilyId> out;
        for (auto f : families()) {
            if (members(f).size() >= 2) {
                out.push_back(f);
            }
        }
        return out;
    }

    std::size_t glyph_token_count() const {
        std::size_t n = 0;
        for (std::size_t i = 0; i < family_.size(); ++i) {
            n += is_glyph_token(static_cast<std::int32_t>(i)) ? 1 : 0;
        }
        return n;
    }

    /// A spanning link set (canonical, member) that reproduces this partition.
    std::vector<std::pair<std::int32_t, std::int32_t>> implied_pairs() const {
        std::vector<std::pair<std::int32_t, std::int32_t>> out;
        for (std::size_t i = 0; i < family_.size(); ++i) {
            if (family_[i] != static_cast<FamilyId>(i)) {
                out.emplace_back(family_[i], static_cast<std::int32_t>(i));
            }
        }
        return out;
    }

    const std::vector<FamilyId>& assignment() const noexcept { return family_; }

    /// Pair metadata retained for lookups (era and source per link).
    const std::vector<AllographPair>& source_pairs() const noexcept { return pairs_; }

    bool operator==(const GlyphNet& o) const { return family_ == o.family_; }

private:
    friend GlyphNet build_families(std::span<const AllographPair>, const Vocabulary&);

    std::vector<FamilyId> family_;
    std::vector<std::size_t> offsets_;
    std::vector<std::int32_t> members_;
    std::vector<AllographPair> pairs_;
};

/// Transitive closure of allograph pairs over the vocabulary. Era metadata is
/// kept but not used for merging.
inline GlyphNet build_families(std::span<const AllographPair> pairs, const Vocabulary& universe) {
    std::vector<std::pair<std::int32_t, std::int32_t>> links;
    links.reserve(pairs.size());
    for (const auto& p : pairs) {
        auto a = universe.find(p.a);
        auto b = universe.find(p.b);
        if (!a || !b) {
            throw DataError("pair endpoint not in vocabulary: " + display(!a ? p.a : p.b));
        }
        links.emplace_back(*a, *b);
    }
    auto net = GlyphNet::from_index_pairs(links, universe.size());
    net.pairs_.assign(pairs.begin(), pairs.end());
    return net;
}

/// Every glyph that appears in a pair list, for extending a vocabulary.
inline std::vector<Token> pair_tokens(std::span<const AllographPair> pairs) {
    std::vector<Token> out;
    for (const auto& p : pairs) {
        out.push_back(p.a);
        out.push_back(p.b);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Centroids and alignment
// ---------------------------------------------------------------------------

struct FamilyCentroid {
    FamilyId family = 0;
    std::vector<double> centroid;
    std::size_t members = 0;
};

/// One centroid per multi-member family, ordered by family id. `embeddings`
/// has one row per universe token.
template <typename Real>
std::vector<FamilyCentroid> compute_centroids(const GlyphNet& net, const Matrix<Real>& embeddings) {
    if (embeddings.rows != net.universe_size()) {
        throw UsageError("embedding table rows do not match the glyph net universe");
    }
    std::vector<FamilyCentroid> out;
    for (auto f : net.multi_member_families()) {
        FamilyCentroid c;
        c.family = f;
        c.centroid.assign(embeddings.cols, 0.0);
        const auto mem = net.members(f);
        c.members = mem.size();
        // running mean
        std::size_t seen = 0;
        for (auto t : mem) {
            const auto row = embeddings.row(static_cast<std::size_t>(t));
            ++seen;
            for (std::size_t d = 0; d < embeddings.cols; ++d) {
                c.centroid[d] += (static_cast<double>(row[d]) - c.centroid[d]) / static_cast<double>(seen);
            }
        }
        out.push_back(std::move(c));
    }
    return out;
}

/// Family whose centroid is most cosine-similar to `vec`, if that similarity
/// reaches `threshold`. Ties go to the smaller family id. Never mutates the net.
inline std::optional<FamilyId> align_new_glyph(std::span<const FamilyCentroid> centroids, std::span<const double> vec,
                                               double threshold) {
    std::optional<FamilyId> best;
    double best_sim = -std::numeric_limits<double>::infinity();
    for (const auto& c : centroids) {
        if (c.centroid.size() != vec.size()) {
            throw UsageError("vector dimension does not match centroid dimension");
        }
        const double sim = cosine(std::span<const double>(c.centroid), vec);
        if (sim > best_sim || (sim == best_sim && best && c.family < *best)) {
            best_sim = sim;
            best = c.family;
        }
    }
    if (best && best_sim >= threshold) {
        return best;
    }
    return std::nullopt;
}

} // namespace allomlm

#endif
