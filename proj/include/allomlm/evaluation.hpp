#ifndef ALLOMLM_EVALUATION_HPP
#define ALLOMLM_EVALUATION_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "allomlm/corpus.hpp"
#include "allomlm/encoder.hpp"
#include "allomlm/error.hpp"
#include "allomlm/glyphnet.hpp"
#include "allomlm/tensor.hpp"
#include "allomlm/trainer.hpp"

namespace allomlm {

inline constexpr std::string_view kSchema = "allomlm/v1";

struct ScoredToken {
    std::int32_t token = 0;
    double score = 0.0;  // log-probability

    bool operator==(const ScoredToken&) const = default;
};

/// One masked position: ranked predictions and the gold token.
struct RestorationItem {
    std::int32_t gold = 0;
    std::vector<ScoredToken> ranked;  // descending score, ties by token index
    bool gold_seen = true;            // gold form occurred in training data
};

/// Top-k glyph tokens of a log-probability row. Control, Unreadable and
/// placeholder entries are never proposed.
template <typename Real>
std::vector<ScoredToken> top_k_glyphs(std::span<const Real> log_probs, const Vocabulary& vocab, std::size_t k) {
    if (k == 0) {
        throw UsageError("K must be >= 1");
    }
    std::vector<ScoredToken> all;
    for (auto t = vocab.first_glyph(); t < static_cast<std::int32_t>(log_probs.size()); ++t) {
        all.push_back({t, static_cast<double>(log_probs[static_cast<std::size_t>(t)])});
    }
    const auto n = std::min(k, all.size());
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n), all.end(),
                      [](const ScoredToken& a, const ScoredToken& b) {
                          return a.score != b.score ? a.score > b.score : a.token < b.token;
                      });
    all.resize(n);
    return all;
}

namespace detail {

inline void require_items(std::size_t n) {
    if (n == 0) {
        throw UsageError("no results to score");
    }
}

} // namespace detail

inline double exact_at_k(std::span<const RestorationItem> items, std::size_t k) {
    detail::require_items(items.size());
    std::size_t hit = 0;
    for (const auto& it : items) {
        const auto n = std::min(k, it.ranked.size());
        hit += std::any_of(it.ranked.begin(), it.ranked.begin() + static_cast<std::ptrdiff_t>(n),
                           [&](const ScoredToken& s) { return s.token == it.gold; })
                   ? 1
                   : 0;
    }
    return static_cast<double>(hit) / static_cast<double>(items.size());
}

inline double family_at_k(std::span<const RestorationItem> items, std::size_t k, const GlyphNet& net) {
    detail::require_items(items.size());
    std::size_t hit = 0;
    for (const auto& it : items) {
        const auto fam = net.family_of(it.gold);
        const auto n = std::min(k, it.ranked.size());
        hit += std::any_of(it.ranked.begin(), it.ranked.begin() + static_cast<std::ptrdiff_t>(n),
                           [&](const ScoredToken& s) { return net.family_of(s.token) == fam; })
                   ? 1
                   : 0;
    }
    return static_cast<double>(hit) / static_cast<double>(items.size());
}

struct ClassScores {
    double accuracy = 0.0;
    double macro_f1 = 0.0;
    std::size_t count = 0;
};

/// Accuracy and macro-F1 over integer class labels. Classes that occur in
/// neither gold nor predictions are left out of the average.
inline ClassScores class_scores(std::span<const int> gold, std::span<const int> pred) {
    if (gold.size() != pred.size()) {
        throw UsageError("gold and prediction counts differ");
    }
    detail::require_items(gold.size());
    std::map<int, std::size_t> tp, fp, fn;
    std::set<int> classes;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < gold.size(); ++i) {
        classes.insert(gold[i]);
        classes.insert(pred[i]);
        if (gold[i] == pred[i]) {
            ++correct;
            ++tp[gold[i]];
        } else {
            ++fp[pred[i]];
            ++fn[gold[i]];
        }
    }
    double f1 = 0.0;
    for (int c : classes) {
        const double t = static_cast<double>(tp[c]);
        const double denom = 2.0 * t + static_cast<double>(fp[c] + fn[c]);
        f1 += denom > 0 ? 2.0 * t / denom : 0.0;
    }
    return {static_cast<double>(correct) / static_cast<double>(gold.size()), f1 / static_cast<double>(classes.size()),
            gold.size()};
}

/// Gold and predicted labels for one inscription; -1 marks a missing gold label.
struct DatingItem {
    int gold_dynasty = -1;
    int gold_period = -1;
    int pred_dynasty = 0;
    int pred_period = 0;
};

/// Flat dynasty accuracy and macro-F1 over items with a dynasty label.
inline ClassScores dynasty_metrics(std::span<const DatingItem> items) {
    std::vector<int> g, p;
    for (const auto& it : items) {
        if (it.gold_dynasty >= 0) {
            g.push_back(it.gold_dynasty);
            p.push_back(it.pred_dynasty);
        }
    }
    return class_scores(g, p);
}

struct HierarchicalScores {
    double acc_hier_dyn = 0.0;
    double f1_hier_dyn = 0.0;
    double acc_hier_per = 0.0;
    double f1_hier_per = 0.0;
    std::size_t covered = 0;
    std::size_t excluded = 0;
};

/// Two-stage scoring over items that carry both labels. A period counts only
/// under the correct dynasty; period macro-F1 runs over (dynasty, period)
/// classes.
inline HierarchicalScores hierarchical_metrics(std::span<const DatingItem> items) {
    std::vector<int> gd, pd, gp, pp;
    HierarchicalScores s;
    for (const auto& it : items) {
        if (it.gold_dynasty < 0 || it.gold_period < 0) {
            ++s.excluded;
            continue;
        }
        gd.push_back(it.gold_dynasty);
        pd.push_back(it.pred_dynasty);
        gp.push_back(it.gold_dynasty * static_cast<int>(kPeriodCount) + it.gold_period);
        pp.push_back(it.pred_dynasty * static_cast<int>(kPeriodCount) + it.pred_period);
    }
    s.covered = gd.size();
    if (s.covered == 0) {
        throw UsageError("no items with period labels");
    }
    const auto dyn = class_scores(gd, pd);
    const auto per = class_scores(gp, pp);
    s.acc_hier_dyn = dyn.accuracy;
    s.f1_hier_dyn = dyn.macro_f1;
    s.acc_hier_per = per.accuracy;
    s.f1_hier_per = per.macro_f1;
    return s;
}

struct FamilyRepresentation {
    FamilyId family = 0;
    std::size_t members = 0;
    double intra_cos = 0.0;
    std::optional<FamilyId> nearest;
    double nearest_cos = 0.0;
};

struct RepresentationReport {
    double intra_cos = 0.0;
    std::optional<double> nearest_inter_cos;  // needs two or more families
    std::vector<FamilyRepresentation> families;
};

/// Cohesion and separation of multi-member families in an embedding table.
template <typename Real>
RepresentationReport representation_report(const Matrix<Real>& embeddings, const GlyphNet& net) {
    const auto cents = compute_centroids(net, embeddings);
    if (cents.empty()) {
        throw UsageError("no multi-member families");
    }
    RepresentationReport rep;
    std::vector<double> row(embeddings.cols);
    double intra_sum = 0, nearest_sum = 0;
    for (std::size_t f = 0; f < cents.size(); ++f) {
        FamilyRepresentation fr;
        fr.family = cents[f].family;
        fr.members = cents[f].members;
        double s = 0;
        for (auto t : net.members(cents[f].family)) {
            const auto src = embeddings.row(static_cast<std::size_t>(t));
            std::copy(src.begin(), src.end(), row.begin());
            s += cosine<double>(row, cents[f].centroid);
        }
        fr.intra_cos = s / static_cast<double>(fr.members);
        intra_sum += fr.intra_cos;
        for (std::size_t o = 0; o < cents.size(); ++o) {
            if (o == f) {
                continue;
            }
            const double c = cosine<double>(cents[f].centroid, cents[o].centroid);
            if (!fr.nearest || c > fr.nearest_cos) {
                fr.nearest = cents[o].family;
                fr.nearest_cos = c;
            }
        }
        nearest_sum += fr.nearest_cos;
        rep.families.push_back(fr);
    }
    rep.intra_cos = intra_sum / static_cast<double>(cents.size());
    if (cents.size() >= 2) {
        rep.nearest_inter_cos = nearest_sum / static_cast<double>(cents.size());
    }
    return rep;
}

/// How many evaluated gold forms were never seen in training.
struct SplitAudit {
    std::size_t positions = 0;
    std::size_t unseen_positions = 0;
    std::size_t gold_types = 0;
    std::size_t unseen_types = 0;
};

inline SplitAudit split_audit(std::span<const RestorationItem> items) {
    SplitAudit a;
    std::set<std::int32_t> types, unseen;
    for (const auto& it : items) {
        ++a.positions;
        types.insert(it.gold);
        if (!it.gold_seen) {
            ++a.unseen_positions;
            unseen.insert(it.gold);
        }
    }
    a.gold_types = types.size();
    a.unseen_types = unseen.size();
    return a;
}

/// Single-position restoration over every glyph cell of `test`: each cell is
/// masked on its own and scored from one eval-mode forward pass.
template <typename Real>
std::vector<RestorationItem> evaluate_restoration(const EncoderModel<Real>& model, const Vocabulary& vocab,
                                                  const EncodedCorpus& test, std::span<const std::int32_t> seen_tokens,
                                                  std::size_t k = 10, std::size_t batch_size = 64) {
    const std::set<std::int32_t> seen(seen_tokens.begin(), seen_tokens.end());
    std::vector<std::vector<std::int32_t>> pending;
    std::vector<std::pair<std::size_t, std::int32_t>> slots;  // (encoded position, gold)
    std::vector<RestorationItem> items;
    auto flush = [&]() {
        if (pending.empty()) {
            return;
        }
        auto batch = make_batch(pending);
        for (std::size_t i = 0; i < slots.size(); ++i) {
            batch.masked.push_back({i, slots[i].first});
            batch.gold.push_back(slots[i].second);
        }
        auto out = forward_mlm(model, batch);
        for (std::size_t i = 0; i < slots.size(); ++i) {
            const auto row = out.log_probs.row(i);
            items.push_back({slots[i].second, top_k_glyphs<Real>(row, vocab, k), seen.count(slots[i].second) > 0});
        }
        pending.clear();
        slots.clear();
    };
    for (const auto& content : test.sequences) {
        const auto wrapped = with_boundaries(content);
        for (std::size_t p = 0; p < content.size(); ++p) {
            if (!vocab.is_glyph(content[p])) {
                continue;
            }
            auto s = wrapped;
            s[p + 1] = Vocabulary::kMask;
            pending.push_back(std::move(s));
            slots.emplace_back(p + 1, content[p]);
            if (pending.size() == batch_size) {
                flush();
            }
        }
    }
    flush();
    return items;
}

/// Argmax dynasty and period predictions against gold labels.
template <typename Real>
std::vector<DatingItem> evaluate_dating(const EncoderModel<Real>& model, const EncodedCorpus& test) {
    const auto dyn = predict_labels(model, test, Head::Dynasty);
    const auto per = predict_labels(model, test, Head::Period);
    std::vector<DatingItem> items;
    for (std::size_t i = 0; i < test.size(); ++i) {
        DatingItem it;
        it.gold_dynasty = test.dynasty[i];
        it.gold_period = test.period[i];
        const auto drow = dyn.row(i);
        const auto prow = per.row(i);
        it.pred_dynasty = static_cast<int>(std::max_element(drow.begin(), drow.end()) - drow.begin());
        it.pred_period = static_cast<int>(std::max_element(prow.begin(), prow.end()) - prow.begin());
        items.push_back(it);
    }
    return items;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

inline constexpr std::size_t kReportKs[] = {1, 5, 10};

inline nlohmann::json restoration_metrics_json(std::span<const RestorationItem> items, const GlyphNet& net) {
    nlohmann::json j = nlohmann::json::object();
    j["positions"] = items.size();
    if (items.empty()) {
        return j;
    }
    for (auto k : kReportKs) {
        j["exact@" + std::to_string(k)] = exact_at_k(items, k);
        j["family@" + std::to_string(k)] = family_at_k(items, k, net);
    }
    return j;
}

inline nlohmann::json to_json(const SplitAudit& a) {
    return {{"positions", a.positions},
            {"unseen_positions", a.unseen_positions},
            {"gold_types", a.gold_types},
            {"unseen_types", a.unseen_types}};
}

inline nlohmann::json to_json(const RepresentationReport& r) {
    nlohmann::json fams = nlohmann::json::array();
    for (const auto& f : r.families) {
        fams.push_back({{"family", f.family},
                        {"members", f.members},
                        {"intra_cos", f.intra_cos},
                        {"nearest", f.nearest ? nlohmann::json(*f.nearest) : nlohmann::json(nullptr)},
                        {"nearest_cos", f.nearest ? nlohmann::json(f.nearest_cos) : nlohmann::json(nullptr)}});
    }
    return {{"intra_cos", r.intra_cos},
            {"nearest_inter_cos", r.nearest_inter_cos ? nlohmann::json(*r.nearest_inter_cos) : nlohmann::json(nullptr)},
            {"families", fams}};
}

inline nlohmann::json restoration_report(std::span<const RestorationItem> items, const GlyphNet& net) {
    if (items.empty()) {
        throw DataError("test corpus has no glyph positions to evaluate");
    }
    std::vector<RestorationItem> unseen;
    for (const auto& it : items) {
        if (!it.gold_seen) {
            unseen.push_back(it);
        }
    }
    return {{"schema", kSchema},
            {"task", "restoration"},
            {"all", restoration_metrics_json(items, net)},
            {"unseen_gold", restoration_metrics_json(unseen, net)},
            {"split_audit", to_json(split_audit(items))}};
}

inline nlohmann::json dating_report(std::span<const DatingItem> items) {
    const auto flat = dynasty_metrics(items);
    nlohmann::json j{{"schema", kSchema}, {"task", "dating"}, {"items", items.size()}};
    j["Acc_Dyn"] = flat.accuracy;
    j["F1_Dyn"] = flat.macro_f1;
    std::size_t with_period = 0;
    for (const auto& it : items) {
        with_period += (it.gold_dynasty >= 0 && it.gold_period >= 0) ? 1 : 0;
    }
    if (with_period > 0) {
        const auto h = hierarchical_metrics(items);
        j["Acc_Hier_Dyn"] = h.acc_hier_dyn;
        j["F1_Hier_Dyn"] = h.f1_hier_dyn;
        j["Acc_Hier_Per"] = h.acc_hier_per;
        j["F1_Hier_Per"] = h.f1_hier_per;
        j["coverage"] = {{"covered", h.covered}, {"excluded", h.excluded}};
    } else {
        for (const char* key : {"Acc_Hier_Dyn", "F1_Hier_Dyn", "Acc_Hier_Per", "F1_Hier_Per"}) {
            j[key] = nullptr;
        }
        j["coverage"] = {{"covered", 0}, {"excluded", items.size()}};
    }
    return j;
}

namespace detail {

inline std::string pct(const nlohmann::json& v) {
    if (!v.is_number()) {
        return "-";
    }
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v.get<double>());
    return buf;
}

inline std::string pad_left(const std::string& s, std::size_t w) {
    return s.size() >= w ? s : std::string(w - s.size(), ' ') + s;
}

inline std::string pad_right(const std::string& s, std::size_t w) {
    return s.size() >= w ? s : s + std::string(w - s.size(), ' ');
}

} // namespace detail

/// Plain-text rendering of a restoration or dating report (percentages).
inline std::string render_report(const nlohmann::json& report) {
    using detail::pad_left;
    using detail::pad_right;
    using detail::pct;
    std::string out;
    const auto task = report.value("task", "");
    if (task == "restoration") {
        out += pad_right("Subset", 12) + pad_right("Positions", 11);
        for (auto k : kReportKs) {
            out += pad_left("E@" + std::to_string(k), 8);
        }
        for (auto k : kReportKs) {
            out += pad_left("F@" + std::to_string(k), 8);
        }
        out += '\n';
        for (const char* subset : {"all", "unseen_gold"}) {
            const auto& m = report.at(subset);
            out += pad_right(subset, 12) + pad_right(std::to_string(m.at("positions").get<std::size_t>()), 11);
            for (auto k : kReportKs) {
                out += pad_left(pct(m.value("exact@" + std::to_string(k), nlohmann::json())), 8);
            }
            for (auto k : kReportKs) {
                out += pad_left(pct(m.value("family@" + std::to_string(k), nlohmann::json())), 8);
            }
            out += '\n';
        }
        const auto& a = report.at("split_audit");
        out += "unseen gold forms: " + std::to_string(a.at("unseen_types").get<std::size_t>()) + " of " +
               std::to_string(a.at("gold_types").get<std::size_t>()) + " types\n";
        if (report.contains("representation")) {
            const auto& r = report["representation"];
            out += "IntraCos " + pad_left(pct(r.at("intra_cos")), 7) + "  Nearest-InterCos " +
                   pad_left(pct(r.at("nearest_inter_cos")), 7) + '\n';
        }
    } else if (task == "dating") {
        const char* keys[] = {"Acc_Dyn", "F1_Dyn", "Acc_Hier_Dyn", "F1_Hier_Dyn", "Acc_Hier_Per", "F1_Hier_Per"};
        for (const char* k : keys) {
            out += pad_left(k, 14);
        }
        out += '\n';
        for (const char* k : keys) {
            out += pad_left(pct(report.at(k)), 14);
        }
        out += '\n';
        const auto& c = report.at("coverage");
        out += "hierarchical coverage: " + std::to_string(c.at("covered").get<std::size_t>()) + " scored, " +
               std::to_string(c.at("excluded").get<std::size_t>()) + " without period labels\n";
    } else {
        throw DataError("unknown report task: " + task);
    }
    return out;
}

} // namespace allomlm

#endif
