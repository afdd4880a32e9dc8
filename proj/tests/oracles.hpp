// Brute-force recomputations shared by the unit and acceptance suites.
#ifndef ALLOMLM_TESTS_ORACLES_HPP
#define ALLOMLM_TESTS_ORACLES_HPP

#include <algorithm>
#include <cmath>
#include <map>
#include <queue>
#include <set>
#include <vector>

#include "allomlm/evaluation.hpp"
#include "allomlm/rng.hpp"

namespace oracles {

using namespace allomlm;

/// Random universe with random links; family membership is recomputed by
/// flood fill for the oracle.
struct World {
    Vocabulary vocab;
    std::vector<std::pair<std::int32_t, std::int32_t>> links;
    GlyphNet net;

    explicit World(std::uint64_t seed, int glyphs = 40) {
        std::vector<std::string> g;
        for (int i = 0; i < glyphs; ++i) {
            g.push_back("w" + std::to_string(100 + i));
        }
        vocab = Vocabulary({}, g);
        Rng rng(seed);
        for (int i = 0; i < glyphs / 2; ++i) {
            links.emplace_back(vocab.first_glyph() + static_cast<std::int32_t>(rng.below(glyphs)),
                               vocab.first_glyph() + static_cast<std::int32_t>(rng.below(glyphs)));
        }
        net = GlyphNet::from_index_pairs(links, vocab.size());
    }

    bool same_family(std::int32_t a, std::int32_t b) const {
        std::set<std::int32_t> seen{a};
        std::vector<std::int32_t> stack{a};
        while (!stack.empty()) {
            const auto x = stack.back();
            stack.pop_back();
            for (auto [u, v] : links) {
                for (auto [from, to] : {std::pair{u, v}, std::pair{v, u}}) {
                    if (from == x && seen.insert(to).second) {
                        stack.push_back(to);
                    }
                }
            }
        }
        return seen.count(b) > 0;
    }
};

inline std::vector<RestorationItem> random_items(const World& w, Rng& rng, std::size_t n) {
    std::vector<RestorationItem> items;
    const auto glyphs = static_cast<std::int32_t>(w.vocab.size()) - w.vocab.first_glyph();
    for (std::size_t i = 0; i < n; ++i) {
        RestorationItem it;
        it.gold = w.vocab.first_glyph() + static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(glyphs)));
        std::vector<std::int32_t> pool;
        for (std::int32_t t = 0; t < glyphs; ++t) {
            pool.push_back(w.vocab.first_glyph() + t);
        }
        rng.shuffle(pool.begin(), pool.end());
        for (std::size_t r = 0; r < 10; ++r) {
            it.ranked.push_back({pool[r], -static_cast<double>(r)});
        }
        it.gold_seen = rng.bernoulli(0.7);
        items.push_back(it);
    }
    return items;
}

inline double oracle_exact(const std::vector<RestorationItem>& items, std::size_t k) {
    double hits = 0;
    for (const auto& it : items) {
        for (std::size_t r = 0; r < k && r < it.ranked.size(); ++r) {
            if (it.ranked[r].token == it.gold) {
                hits += 1;
                break;
            }
        }
    }
    return hits / static_cast<double>(items.size());
}

inline double oracle_family(const World& w, const std::vector<RestorationItem>& items, std::size_t k) {
    double hits = 0;
    for (const auto& it : items) {
        for (std::size_t r = 0; r < k && r < it.ranked.size(); ++r) {
            if (w.same_family(it.gold, it.ranked[r].token)) {
                hits += 1;
                break;
            }
        }
    }
    return hits / static_cast<double>(items.size());
}

/// Confusion-matrix recomputation of accuracy and macro-F1.
inline ClassScores oracle_scores(const std::vector<int>& gold, const std::vector<int>& pred) {
    std::map<std::pair<int, int>, std::size_t> cm;
    std::set<int> classes;
    for (std::size_t i = 0; i < gold.size(); ++i) {
        ++cm[{gold[i], pred[i]}];
        classes.insert(gold[i]);
        classes.insert(pred[i]);
    }
    ClassScores s;
    s.count = gold.size();
    std::size_t diag = 0;
    double f1 = 0.0;
    for (int c : classes) {
        std::size_t tp = cm[{c, c}], fp = 0, fn = 0;
        for (int o : classes) {
            if (o != c) {
                fp += cm[{o, c}];
                fn += cm[{c, o}];
            }
        }
        diag += tp;
        const double t = static_cast<double>(tp);
        const double denom = 2.0 * t + static_cast<double>(fp + fn);
        f1 += denom > 0 ? 2.0 * t / denom : 0.0;
    }
    s.accuracy = static_cast<double>(diag) / static_cast<double>(gold.size());
    s.macro_f1 = f1 / static_cast<double>(classes.size());
    return s;
}

inline std::vector<DatingItem> random_dating(Rng& rng, std::size_t n) {
    std::vector<DatingItem> items;
    for (std::size_t i = 0; i < n; ++i) {
        DatingItem it;
        it.gold_dynasty = static_cast<int>(rng.below(kDynastyCount));
        it.gold_period = rng.bernoulli(0.8) ? static_cast<int>(rng.below(kPeriodCount)) : -1;
        it.pred_dynasty = rng.bernoulli(0.5) ? it.gold_dynasty : static_cast<int>(rng.below(kDynastyCount));
        it.pred_period = rng.bernoulli(0.5) ? std::max(it.gold_period, 0) : static_cast<int>(rng.below(kPeriodCount));
        items.push_back(it);
    }
    return items;
}

/// Oracle: connected components by repeated BFS over an adjacency list.
/// Returns, per token, the smallest index in its component.
inline std::vector<std::int32_t> bfs_components(const std::vector<std::pair<std::int32_t, std::int32_t>>& edges,
                                         std::size_t n) {
    std::vector<std::vector<std::int32_t>> adj(n);
    for (auto [a, b] : edges) {
        adj[static_cast<std::size_t>(a)].push_back(b);
        adj[static_cast<std::size_t>(b)].push_back(a);
    }
    std::vector<std::int32_t> label(n, -1);
    for (std::size_t s = 0; s < n; ++s) {
        if (label[s] >= 0) {
            continue;
        }
        std::vector<std::int32_t> comp;
        std::queue<std::int32_t> q;
        q.push(static_cast<std::int32_t>(s));
        label[s] = 0;
        while (!q.empty()) {
            auto u = q.front();
            q.pop();
            comp.push_back(u);
            for (auto v : adj[static_cast<std::size_t>(u)]) {
                if (label[static_cast<std::size_t>(v)] < 0) {
                    label[static_cast<std::size_t>(v)] = 0;
                    q.push(v);
                }
            }
        }
        const auto mn = *std::min_element(comp.begin(), comp.end());
        for (auto u : comp) {
            label[static_cast<std::size_t>(u)] = mn;
        }
    }
    return label;
}

inline double brute_cos(const std::vector<double>& a, const std::vector<double>& b) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    return ab / (std::sqrt(aa) * std::sqrt(bb));
}

struct BruteRepresentation {
    std::size_t families = 0;
    double intra = 0.0;
    double inter = 0.0;  // meaningful with two or more families
};

/// Families by flood fill, centroids as plain means, all pairs scanned.
inline BruteRepresentation brute_representation(const World& w, const Matrix<double>& emb) {
    const auto n = static_cast<std::int32_t>(w.vocab.size());
    std::vector<std::vector<std::int32_t>> fams;
    std::set<std::int32_t> done;
    for (std::int32_t t = 0; t < n; ++t) {
        if (done.count(t)) {
            continue;
        }
        std::vector<std::int32_t> f;
        for (std::int32_t u = t; u < n; ++u) {
            if (w.same_family(t, u)) {
                f.push_back(u);
                done.insert(u);
            }
        }
        if (f.size() >= 2) {
            fams.push_back(f);
        }
    }
    std::vector<std::vector<double>> cents;
    for (const auto& f : fams) {
        std::vector<double> c(emb.cols, 0.0);
        for (auto m : f) {
            for (std::size_t d = 0; d < emb.cols; ++d) {
                c[d] += emb(static_cast<std::size_t>(m), d) / static_cast<double>(f.size());
            }
        }
        cents.push_back(c);
    }
    BruteRepresentation out;
    out.families = fams.size();
    for (std::size_t i = 0; i < fams.size(); ++i) {
        double s = 0;
        for (auto m : fams[i]) {
            const auto r = emb.row(static_cast<std::size_t>(m));
            s += brute_cos(std::vector<double>(r.begin(), r.end()), cents[i]);
        }
        out.intra += s / static_cast<double>(fams[i].size());
        double best = -2;
        for (std::size_t j = 0; j < fams.size(); ++j) {
            if (j != i) {
                best = std::max(best, brute_cos(cents[i], cents[j]));
            }
        }
        out.inter += best;
    }
    if (!fams.empty()) {
        out.intra /= static_cast<double>(fams.size());
        out.inter /= static_cast<double>(fams.size());
    }
    return out;
}

} // namespace oracles

#endif
