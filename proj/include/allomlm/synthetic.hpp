#ifndef ALLOMLM_SYNTHETIC_HPP
#define ALLOMLM_SYNTHETIC_HPP

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "allomlm/corpus.hpp"
#include "allomlm/glyphnet.hpp"
#include "allomlm/rng.hpp"
#include "allomlm/utf8.hpp"

namespace allomlm::synthetic {

/// Glyph `i` of a private block of CJK ideographs.
inline std::string glyph(std::size_t i) {
    std::string s;
    utf8::append(s, static_cast<char32_t>(0x4E00 + i));
    return s;
}

/// A formula is a short fixed run of slots; a slot is a family or a filler.
struct Slot {
    bool family = false;
    std::size_t index = 0;
};

struct TemplateSpec {
    std::size_t families = 50;
    std::size_t fillers = 30;
    std::size_t phrases = 60;
    std::size_t phrase_len = 3;
    std::size_t phrases_per_template = 3;
    std::size_t templates = 500;
    double family_slot_rate = 0.7;
};

/// Distinct templates, each a concatenation of distinct phrases.
inline std::vector<std::vector<Slot>> make_templates(const TemplateSpec& spec, Rng& rng) {
    std::vector<std::vector<Slot>> phrases(spec.phrases);
    for (auto& p : phrases) {
        for (std::size_t i = 0; i < spec.phrase_len; ++i) {
            const bool fam = rng.bernoulli(spec.family_slot_rate);
            p.push_back({fam, static_cast<std::size_t>(rng.below(fam ? spec.families : spec.fillers))});
        }
    }
    std::set<std::vector<std::size_t>> used;
    std::vector<std::vector<Slot>> out;
    while (out.size() < spec.templates) {
        std::vector<std::size_t> pick;
        while (pick.size() < spec.phrases_per_template) {
            const auto p = static_cast<std::size_t>(rng.below(spec.phrases));
            if (std::find(pick.begin(), pick.end(), p) == pick.end()) {
                pick.push_back(p);
            }
        }
        if (!used.insert(pick).second) {
            continue;
        }
        std::vector<Slot> t;
        for (auto p : pick) {
            t.insert(t.end(), phrases[p].begin(), phrases[p].end());
        }
        out.push_back(std::move(t));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Restoration: held-out allograph forms
// ---------------------------------------------------------------------------

struct RestorationSpec {
    TemplateSpec templates;
    std::size_t seen_forms = 2;  // per family; one more form is held out
    std::size_t train_per_template = 4;
    std::size_t test_templates = 200;
};

struct RestorationData {
    Corpus train;
    Corpus test;  // every family slot uses the held-out form
    PairFile pairs;
    std::vector<std::string> held_out;
};

/// Glyph layout: fillers first, then each family's seen forms and its held-out form.
inline RestorationData restoration_corpus(const RestorationSpec& spec, std::uint64_t seed) {
    Rng rng(derive_seed(seed, {0x5E5}));
    const auto templates = make_templates(spec.templates, rng);
    const auto forms = spec.seen_forms + 1;
    auto filler = [&](std::size_t i) { return glyph(i); };
    auto form = [&](std::size_t fam, std::size_t f) { return glyph(spec.templates.fillers + fam * forms + f); };

    RestorationData d;
    for (std::size_t fam = 0; fam < spec.templates.families; ++fam) {
        for (std::size_t f = 0; f + 1 < forms; ++f) {
            d.pairs.pairs.push_back(
                {Token::identifiable(form(fam, f)), Token::identifiable(form(fam, f + 1)), std::nullopt, "synthetic"});
        }
        d.held_out.push_back(form(fam, spec.seen_forms));
    }
    auto realise = [&](const std::vector<Slot>& t, bool held_out) {
        std::vector<Token> toks;
        for (const auto& s : t) {
            if (!s.family) {
                toks.push_back(Token::identifiable(filler(s.index)));
            } else {
                const auto f = held_out ? spec.seen_forms : static_cast<std::size_t>(rng.below(spec.seen_forms));
                toks.push_back(Token::identifiable(form(s.index, f)));
            }
        }
        return toks;
    };
    std::size_t n = 0;
    for (const auto& t : templates) {
        for (std::size_t r = 0; r < spec.train_per_template; ++r) {
            d.train.inscriptions.push_back({"SYN.TR." + std::to_string(n++), realise(t, false), {}, {}, ""});
        }
    }
    for (std::size_t i = 0; i < std::min(spec.test_templates, templates.size()); ++i) {
        d.test.inscriptions.push_back({"SYN.TE." + std::to_string(i), realise(templates[i], true), {}, {}, ""});
    }
    return d;
}

// ---------------------------------------------------------------------------
// Dating: dynasty-specific allograph preferences
// ---------------------------------------------------------------------------

struct DatingSpec {
    TemplateSpec templates;
    double style_strength = 0.7;  // probability of the dynasty's own form
    std::size_t unlabeled = 2000;
    std::size_t labeled_per_dynasty = 8;
    std::size_t test = 400;
};

struct DatingData {
    Corpus unlabeled;  // adaptation text, labels stripped
    Corpus labeled;
    Corpus test;
    PairFile pairs;
};

/// Each family has one form per dynasty; an inscription of dynasty d writes
/// form d with probability `style_strength`, otherwise another form.
inline DatingData dating_corpus(const DatingSpec& spec, std::uint64_t seed) {
    Rng rng(derive_seed(seed, {0xDA7E}));
    const auto templates = make_templates(spec.templates, rng);
    constexpr std::size_t forms = kDynastyCount;
    auto form = [&](std::size_t fam, std::size_t f) { return glyph(spec.templates.fillers + fam * forms + f); };
    DatingData d;
    for (std::size_t fam = 0; fam < spec.templates.families; ++fam) {
        for (std::size_t f = 0; f + 1 < forms; ++f) {
            d.pairs.pairs.push_back(
                {Token::identifiable(form(fam, f)), Token::identifiable(form(fam, f + 1)), std::nullopt, "synthetic"});
        }
    }
    auto make = [&](const std::string& id, std::size_t dyn) {
        const auto& t = templates[static_cast<std::size_t>(rng.below(templates.size()))];
        Inscription ins;
        ins.id = id;
        for (const auto& s : t) {
            if (!s.family) {
                ins.tokens.push_back(Token::identifiable(glyph(s.index)));
                continue;
            }
            std::size_t f = dyn;
            if (!rng.bernoulli(spec.style_strength)) {
                f = (dyn + 1 + static_cast<std::size_t>(rng.below(forms - 1))) % forms;
            }
            ins.tokens.push_back(Token::identifiable(form(s.index, f)));
        }
        ins.dynasty = static_cast<Dynasty>(dyn);
        ins.period = static_cast<Period>(rng.below(kPeriodCount));
        return ins;
    };
    for (std::size_t i = 0; i < spec.unlabeled; ++i) {
        auto ins = make("SYN.U." + std::to_string(i), static_cast<std::size_t>(rng.below(forms)));
        ins.dynasty.reset();
        ins.period.reset();
        d.unlabeled.inscriptions.push_back(std::move(ins));
    }
    for (std::size_t dyn = 0; dyn < forms; ++dyn) {
        for (std::size_t i = 0; i < spec.labeled_per_dynasty; ++i) {
            d.labeled.inscriptions.push_back(make("SYN.L." + std::to_string(dyn) + "." + std::to_string(i), dyn));
        }
    }
    for (std::size_t i = 0; i < spec.test; ++i) {
        d.test.inscriptions.push_back(make("SYN.T." + std::to_string(i), i % forms));
    }
    return d;
}

/// Pair list in the tab-separated file format.
inline std::string render_pairs(const PairFile& pf) {
    std::string out;
    for (const auto& p : pf.pairs) {
        out += display(p.a) + "\t" + display(p.b) + "\t-\t" + p.source + "\n";
    }
    return out;
}

} // namespace allomlm::synthetic

#endif
