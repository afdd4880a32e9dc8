#ifndef ALLOMLM_CORPUS_HPP
#define ALLOMLM_CORPUS_HPP

#include <algorithm>
#include <array>
#include <charconv>
#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "allomlm/error.hpp"
#include "allomlm/utf8.hpp"

namespace allomlm {

// ---------------------------------------------------------------------------
// Tokens
// ---------------------------------------------------------------------------

enum class TokenKind : std::uint8_t { Identifiable, Unreadable, Undeciphered };

/// One encoded character cell of an inscription.
///
/// Identifiable tokens carry their transcription (one or more code points,
/// always treated atomically). Undeciphered tokens carry a stable placeholder
/// id; the same visual form must map to the same id across a corpus.
struct Token {
    TokenKind kind = TokenKind::Identifiable;
    std::string glyph;    // UTF-8 payload, Identifiable only
    int placeholder = 0;  // Undeciphered only

    static Token identifiable(std::string g) { return {TokenKind::Identifiable, std::move(g), 0}; }
    static Token unreadable() { return {TokenKind::Unreadable, {}, 0}; }
    static Token undeciphered(int id) { return {TokenKind::Undeciphered, {}, id}; }

    auto operator<=>(const Token&) const = default;
    bool operator==(const Token&) const = default;
};

inline constexpr std::string_view kUnreadableGlyph = "□";  // □

/// Human-readable form used in listings and the service payloads.
inline std::string display(const Token& t) {
    switch (t.kind) {
    case TokenKind::Identifiable:
        return t.glyph;
    case TokenKind::Unreadable:
        return std::string(kUnreadableGlyph);
    case TokenKind::Undeciphered:
        return "{UNK:" + std::to_string(t.placeholder) + "}";
    }
    return {};
}

enum class Dynasty : std::uint8_t { Shang, WesternZhou, SpringAutumn, WarringStates };
enum class Period : std::uint8_t { Early, Middle, Late };

inline constexpr std::size_t kDynastyCount = 4;
inline constexpr std::size_t kPeriodCount = 3;
inline constexpr std::array<std::string_view, kDynastyCount> kDynastyNames = {"Shang", "WesternZhou", "SpringAutumn",
                                                                             "WarringStates"};
inline constexpr std::array<std::string_view, kPeriodCount> kPeriodNames = {"Early", "Middle", "Late"};

inline std::string_view to_string(Dynasty d) { return kDynastyNames[static_cast<std::size_t>(d)]; }
inline std::string_view to_string(Period p) { return kPeriodNames[static_cast<std::size_t>(p)]; }

inline std::optional<Dynasty> parse_dynasty(std::string_view s) {
    for (std::size_t i = 0; i < kDynastyNames.size(); ++i) {
        if (kDynastyNames[i] == s) {
            return static_cast<Dynasty>(i);
        }
    }
    return std::nullopt;
}

inline std::optional<Period> parse_period(std::string_view s) {
    for (std::size_t i = 0; i < kPeriodNames.size(); ++i) {
        if (kPeriodNames[i] == s) {
            return static_cast<Period>(i);
        }
    }
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Inscriptions and corpora
// ---------------------------------------------------------------------------

struct Inscription {
    std::string id;
    std::vector<Token> tokens;
    std::optional<Dynasty> dynasty;
    std::optional<Period> period;
    std::string provenance;

    bool operator==(const Inscription&) const = default;
};

enum class CorpusKind : std::uint8_t { TaptInscriptional, DaptAuxiliary };

struct Corpus {
    std::vector<Inscription> inscriptions;
    CorpusKind kind = CorpusKind::TaptInscriptional;

    bool operator==(const Corpus&) const = default;
};

namespace detail {

inline int parse_small_int(std::string_view s) {
    int value = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
    if (ec != std::errc{} || ptr != s.data() + s.size() || value < 0 || value > 65535) {
        throw DataError("bad placeholder id '" + std::string(s) + "'");
    }
    return value;
}

inline std::u32string_view as_view(const std::vector<char32_t>& v) { return {v.data(), v.size()}; }

} // namespace detail

/// Split text into tokens.
///
/// `□` is Unreadable and `{UNK:n}` Undeciphered(n); `{G:...}` escapes an
/// atomic multi-code-point glyph. Otherwise each code point plus any
/// attaching marks after it is one Identifiable token. Whitespace is
/// ignored. Auxiliary (DAPT) text is all-Identifiable: `□` is a plain glyph
/// there and placeholders are rejected.
inline std::vector<Token> tokenize(std::string_view text, CorpusKind kind = CorpusKind::TaptInscriptional) {
    const auto cps = utf8::decode(text);
    std::vector<Token> out;
    std::size_t i = 0;
    while (i < cps.size()) {
        const char32_t cp = cps[i];
        if (utf8::is_space(cp)) {
            ++i;
            continue;
        }
        if (cp == U'{') {
            std::size_t close = i + 1;
            while (close < cps.size() && cps[close] != U'}') {
                ++close;
            }
            if (close == cps.size()) {
                throw DataError("unterminated '{' in text");
            }
            std::u32string body(cps.begin() + static_cast<std::ptrdiff_t>(i + 1),
                                cps.begin() + static_cast<std::ptrdiff_t>(close));
            const std::string inner = utf8::encode(body);
            if (inner.starts_with("UNK:")) {
                if (kind == CorpusKind::DaptAuxiliary) {
                    throw DataError("undeciphered placeholder in auxiliary text");
                }
                out.push_back(Token::undeciphered(detail::parse_small_int(std::string_view(inner).substr(4))));
            } else if (inner.starts_with("G:") && inner.size() > 2) {
                out.push_back(Token::identifiable(inner.substr(2)));
            } else {
                throw DataError("unknown escape '{" + inner + "}'");
            }
            i = close + 1;
            continue;
        }
        if (cp == U'}') {
            throw DataError("stray '}' in text");
        }
        if (cp == 0x25A1 && kind == CorpusKind::TaptInscriptional) {
            out.push_back(Token::unreadable());
            ++i;
            continue;
        }
        if (utf8::is_attaching(cp)) {
            throw DataError("combining mark without a base glyph");
        }
        std::u32string cell{cp};
        ++i;
        while (i < cps.size() && utf8::is_attaching(cps[i])) {
            cell.push_back(cps[i]);
            ++i;
        }
        out.push_back(Token::identifiable(utf8::encode(cell)));
    }
    return out;
}

/// Inverse of tokenize: tokenize(render_text(t, k), k) == t.
inline std::string render_text(std::span<const Token> tokens, CorpusKind kind = CorpusKind::TaptInscriptional) {
    std::string out;
    for (const auto& t : tokens) {
        switch (t.kind) {
        case TokenKind::Unreadable:
            out += kUnreadableGlyph;
            break;
        case TokenKind::Undeciphered:
            out += display(t);
            break;
        case TokenKind::Identifiable: {
            bool plain = false;
            try {
                auto back = tokenize(t.glyph, kind);
                plain = back.size() == 1 && back.front() == t;
            } catch (const DataError&) {
                plain = false;
            }
            if (plain) {
                out += t.glyph;
            } else {
                if (t.glyph.find('}') != std::string::npos || t.glyph.empty()) {
                    throw DataError("glyph payload cannot be serialized: '" + t.glyph + "'");
                }
                out += "{G:" + t.glyph + "}";
            }
            break;
        }
        }
    }
    return out;
}

namespace detail {

inline void check_inscription(const Inscription& ins) {
    if (ins.tokens.empty()) {
        throw DataError("empty inscription");
    }
    if (ins.period && !ins.dynasty) {
        throw DataError("period without dynasty");
    }
}

inline std::string line_prefix(std::size_t line) { return "line " + std::to_string(line) + ": "; }

} // namespace detail

/// Parse a line-delimited JSON corpus. Each non-blank line is one record with
/// fields id, text, and optional dynasty, period, provenance. Unknown fields
/// are rejected.
inline Corpus parse_corpus(std::string_view input, CorpusKind kind = CorpusKind::TaptInscriptional) {
    Corpus corpus;
    corpus.kind = kind;
    std::set<std::string> ids;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= input.size()) {
        auto eol = input.find('\n', pos);
        if (eol == std::string_view::npos) {
            eol = input.size();
        }
        auto line = input.substr(pos, eol - pos);
        pos = eol + 1;
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string_view::npos) {
            if (eol == input.size()) {
                break;
            }
            continue;
        }
        const auto where = detail::line_prefix(line_no);
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw DataError(where + "malformed record: " + e.what());
        }
        if (!rec.is_object()) {
            throw DataError(where + "record is not an object");
        }
        Inscription ins;
        bool have_text = false;
        for (const auto& [key, value] : rec.items()) {
            const bool nullable = key == "dynasty" || key == "period" || key == "provenance";
            if (value.is_null() && nullable) {
                continue;
            }
            if (!value.is_string()) {
                throw DataError(where + "field '" + key + "' must be a string");
            }
            const auto s = value.get<std::string>();
            if (key == "id") {
                ins.id = s;
            } else if (key == "text") {
                have_text = true;
                try {
                    ins.tokens = tokenize(s, kind);
                } catch (const DataError& e) {
                    throw DataError(where + e.what());
                }
            } else if (key == "dynasty") {
                ins.dynasty = parse_dynasty(s);
                if (!ins.dynasty) {
                    throw DataError(where + "unknown dynasty '" + s + "'");
                }
            } else if (key == "period") {
                ins.period = parse_period(s);
                if (!ins.period) {
                    throw DataError(where + "unknown period '" + s + "'");
                }
            } else if (key == "provenance") {
                ins.provenance = s;
            } else {
                throw DataError(where + "unknown field '" + key + "'");
            }
        }
        if (ins.id.empty()) {
            throw DataError(where + "missing id");
        }
        if (!have_text) {
            throw DataError(where + "missing text");
        }
        try {
            detail::check_inscription(ins);
        } catch (const DataError& e) {
            throw DataError(where + e.what());
        }
        if (!ids.insert(ins.id).second) {
            throw DataError(where + "duplicate id '" + ins.id + "'");
        }
        corpus.inscriptions.push_back(std::move(ins));
    }
    return corpus;
}

inline nlohmann::json to_json(const Inscription& ins, CorpusKind kind) {
    nlohmann::json rec;
    rec["id"] = ins.id;
    rec["text"] = render_text(ins.tokens, kind);
    if (ins.dynasty) {
        rec["dynasty"] = std::string(to_string(*ins.dynasty));
    }
    if (ins.period) {
        rec["period"] = std::string(to_string(*ins.period));
    }
    if (!ins.provenance.empty()) {
        rec["provenance"] = ins.provenance;
    }
    return rec;
}

inline std::string serialize_corpus(const Corpus& corpus) {
    std::string out;
    for (const auto& ins : corpus.inscriptions) {
        out += to_json(ins, corpus.kind).dump();
        out += '\n';
    }
    return out;
}

// ---------------------------------------------------------------------------
// Correction patches
// ---------------------------------------------------------------------------

/// A field-level edit applied to a parsed corpus before filtering.
struct Patch {
    std::string id;
    std::string field;  // text | dynasty | period | provenance
    std::string old_value;
    std::string new_value;
    std::string citation;
};

inline std::vector<Patch> parse_patches(std::string_view input) {
    std::vector<Patch> patches;
    std::istringstream in{std::string(input)};
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        const auto where = detail::line_prefix(line_no);
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw DataError(where + "malformed patch: " + e.what());
        }
        if (!rec.is_object()) {
            throw DataError(where + "patch is not an object");
        }
        Patch p;
        for (const auto& [key, value] : rec.items()) {
            std::string s;
            if (value.is_string()) {
                s = value.get<std::string>();
            } else if (!value.is_null()) {
                throw DataError(where + "field '" + key + "' must be a string");
            }
            if (key == "id") {
                p.id = s;
            } else if (key == "field") {
                p.field = s;
            } else if (key == "old") {
                p.old_value = s;
            } else if (key == "new") {
                p.new_value = s;
            } else if (key == "citation") {
                p.citation = s;
            } else {
                throw DataError(where + "unknown field '" + key + "'");
            }
        }
        if (p.id.empty() || p.field.empty()) {
            throw DataError(where + "patch needs id and field");
        }
        if (p.field != "text" && p.field != "dynasty" && p.field != "period" && p.field != "provenance") {
            throw DataError(where + "cannot patch field '" + p.field + "'");
        }
        patches.push_back(std::move(p));
    }
    return patches;
}

/// Apply patches in order. The old value must match the current value
/// exactly; an empty new value clears optional fields.
inline Corpus apply_patches(Corpus corpus, std::span<const Patch> patches) {
    std::unordered_map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < corpus.inscriptions.size(); ++i) {
        index.emplace(corpus.inscriptions[i].id, i);
    }
    for (const auto& p : patches) {
        auto it = index.find(p.id);
        if (it == index.end()) {
            throw DataError("patch for unknown id '" + p.id + "'");
        }
        auto& ins = corpus.inscriptions[it->second];
        std::string current;
        if (p.field == "text") {
            current = render_text(ins.tokens, corpus.kind);
        } else if (p.field == "dynasty") {
            current = ins.dynasty ? std::string(to_string(*ins.dynasty)) : "";
        } else if (p.field == "period") {
            current = ins.period ? std::string(to_string(*ins.period)) : "";
        } else {
            current = ins.provenance;
        }
        if (current != p.old_value) {
            throw DataError("patch for '" + p.id + "' expects " + p.field + " '" + p.old_value + "' but found '" +
                            current + "'");
        }
        if (p.field == "text") {
            ins.tokens = tokenize(p.new_value, corpus.kind);
        } else if (p.field == "dynasty") {
            ins.dynasty = p.new_value.empty() ? std::nullopt : parse_dynasty(p.new_value);
            if (!p.new_value.empty() && !ins.dynasty) {
                throw DataError("unknown dynasty '" + p.new_value + "'");
            }
        } else if (p.field == "period") {
            ins.period = p.new_value.empty() ? std::nullopt : parse_period(p.new_value);
            if (!p.new_value.empty() && !ins.period) {
                throw DataError("unknown period '" + p.new_value + "'");
            }
        } else {
            ins.provenance = p.new_value;
        }
    }
    for (const auto& ins : corpus.inscriptions) {
        try {
            detail::check_inscription(ins);
        } catch (const DataError& e) {
            throw DataError("after patching '" + ins.id + "': " + e.what());
        }
    }
    return corpus;
}

// ---------------------------------------------------------------------------
// Filtering and deduplication
// ---------------------------------------------------------------------------

/// Keep inscriptions with at least `min_tokens` tokens (so min_tokens = 2
/// removes single-character marks; 0 and 1 keep everything).
inline Corpus filter_short(const Corpus& corpus, std::size_t min_tokens) {
    Corpus out;
    out.kind = corpus.kind;
    for (const auto& ins : corpus.inscriptions) {
        if (ins.tokens.size() >= min_tokens) {
            out.inscriptions.push_back(ins);
        }
    }
    return out;
}

struct DedupGroup {
    std::string representative;
    std::vector<std::string> members;  // sorted, includes the representative
};

struct DedupResult {
    Corpus corpus;
    std::vector<DedupGroup> log;  // only groups of size >= 2, sorted by representative
};

/// Collapse inscriptions with identical token sequences to the member with
/// the lexicographically smallest id. Survivors keep their relative order.
inline DedupResult deduplicate(const Corpus& corpus) {
    std::map<std::vector<Token>, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < corpus.inscriptions.size(); ++i) {
        groups[corpus.inscriptions[i].tokens].push_back(i);
    }
    std::vector<bool> keep(corpus.inscriptions.size(), false);
    DedupResult result;
    result.corpus.kind = corpus.kind;
    for (const auto& [tokens, members] : groups) {
        auto rep = *std::min_element(members.begin(), members.end(), [&](std::size_t a, std::size_t b) {
            return corpus.inscriptions[a].id < corpus.inscriptions[b].id;
        });
        keep[rep] = true;
        if (members.size() > 1) {
            DedupGroup g;
            g.representative = corpus.inscriptions[rep].id;
            for (auto m : members) {
                g.members.push_back(corpus.inscriptions[m].id);
            }
            std::sort(g.members.begin(), g.members.end());
            result.log.push_back(std::move(g));
        }
    }
    std::sort(result.log.begin(), result.log.end(),
              [](const DedupGroup& a, const DedupGroup& b) { return a.representative < b.representative; });
    for (std::size_t i = 0; i < corpus.inscriptions.size(); ++i) {
        if (keep[i]) {
            result.corpus.inscriptions.push_back(corpus.inscriptions[i]);
        }
    }
    return result;
}

struct PrepareResult {
    Corpus corpus;
    std::size_t dropped_short = 0;
    std::vector<DedupGroup> duplicates;
};

/// Patch, drop short inscriptions, then deduplicate.
inline PrepareResult prepare(Corpus raw, std::span<const Patch> patches, std::size_t min_tokens) {
    auto patched = apply_patches(std::move(raw), patches);
    auto kept = filter_short(patched, min_tokens);
    PrepareResult r;
    r.dropped_short = patched.inscriptions.size() - kept.inscriptions.size();
    auto dedup = deduplicate(kept);
    r.corpus = std::move(dedup.corpus);
    r.duplicates = std::move(dedup.log);
    return r;
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

/// Token <-> index map. Indices 0..4 are fixed control entries, followed by
/// one entry per Undeciphered placeholder id (ascending), followed by
/// identifiable glyphs in code point order.
class Vocabulary {
public:
    static constexpr std::int32_t kPad = 0;
    static constexpr std::int32_t kMask = 1;
    static constexpr std::int32_t kBos = 2;
    static constexpr std::int32_t kEos = 3;
    static constexpr std::int32_t kUnreadable = 4;
    static constexpr std::int32_t kFixedReserved = 5;

    Vocabulary() = default;

    /// Build from the non-fixed entries. Placeholders and glyphs are sorted
    /// and deduplicated here, so argument order does not matter.
    Vocabulary(std::vector<int> placeholders, std::vector<std::string> glyphs) {
        std::sort(placeholders.begin(), placeholders.end());
        placeholders.erase(std::unique(placeholders.begin(), placeholders.end()), placeholders.end());
        std::sort(glyphs.begin(), glyphs.end());
        glyphs.erase(std::unique(glyphs.begin(), glyphs.end()), glyphs.end());
        placeholders_ = std::move(placeholders);
        glyphs_ = std::move(glyphs);
        for (std::size_t i = 0; i < placeholders_.size(); ++i) {
            placeholder_index_.emplace(placeholders_[i], kFixedReserved + static_cast<std::int32_t>(i));
        }
        for (std::size_t i = 0; i < glyphs_.size(); ++i) {
            glyph_index_.emplace(glyphs_[i], first_glyph() + static_cast<std::int32_t>(i));
        }
    }

    std::size_t size() const noexcept {
        return static_cast<std::size_t>(kFixedReserved) + placeholders_.size() + glyphs_.size();
    }
    std::int32_t first_glyph() const noexcept {
        return kFixedReserved + static_cast<std::int32_t>(placeholders_.size());
    }
    bool is_reserved(std::int32_t index) const noexcept { return index < first_glyph(); }
    bool is_glyph(std::int32_t index) const noexcept {
        return index >= first_glyph() && static_cast<std::size_t>(index) < size();
    }

    std::optional<std::int32_t> find(const Token& t) const {
        switch (t.kind) {
        case TokenKind::Unreadable:
            return kUnreadable;
        case TokenKind::Undeciphered: {
            auto it = placeholder_index_.find(t.placeholder);
            if (it == placeholder_index_.end()) {
                return std::nullopt;
            }
            return it->second;
        }
        case TokenKind::Identifiable: {
            auto it = glyph_index_.find(t.glyph);
            if (it == glyph_index_.end()) {
                return std::nullopt;
            }
            return it->second;
        }
        }
        return std::nullopt;
    }

    std::int32_t at(const Token& t) const {
        auto idx = find(t);
        if (!idx) {
            throw DataError("token not in vocabulary: " + display(t));
        }
        return *idx;
    }

    /// Token for a non-control index.
    Token token(std::int32_t index) const {
        if (index == kUnreadable) {
            return Token::unreadable();
        }
        if (index >= kFixedReserved && index < first_glyph()) {
            return Token::undeciphered(placeholders_[static_cast<std::size_t>(index - kFixedReserved)]);
        }
        if (is_glyph(index)) {
            return Token::identifiable(glyphs_[static_cast<std::size_t>(index - first_glyph())]);
        }
        throw UsageError("index " + std::to_string(index) + " has no token");
    }

    std::string label(std::int32_t index) const {
        switch (index) {
        case kPad:
            return "[PAD]";
        case kMask:
            return "[MASK]";
        case kBos:
            return "[BOS]";
        case kEos:
            return "[EOS]";
        default:
            return display(token(index));
        }
    }

    /// [BOS] tokens... [EOS]
    std::vector<std::int32_t> encode(std::span<const Token> tokens) const {
        std::vector<std::int32_t> ids;
        ids.reserve(tokens.size() + 2);
        ids.push_back(kBos);
        for (const auto& t : tokens) {
            ids.push_back(at(t));
        }
        ids.push_back(kEos);
        return ids;
    }

    const std::vector<int>& placeholders() const noexcept { return placeholders_; }
    const std::vector<std::string>& glyphs() const noexcept { return glyphs_; }

    /// FNV-1a over the entry list; identifies the index assignment.
    std::uint64_t hash() const noexcept {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        auto feed = [&h](std::string_view s) {
            for (unsigned char c : s) {
                h ^= c;
                h *= 0x100000001b3ULL;
            }
            h ^= 0xff;
            h *= 0x100000001b3ULL;
        };
        for (int p : placeholders_) {
            feed("{UNK:" + std::to_string(p) + "}");
        }
        feed("|");
        for (const auto& g : glyphs_) {
            feed(g);
        }
        return h;
    }

    nlohmann::json to_json() const { return {{"placeholders", placeholders_}, {"glyphs", glyphs_}}; }

    static Vocabulary from_json(const nlohmann::json& j) {
        return Vocabulary(j.at("placeholders").get<std::vector<int>>(), j.at("glyphs").get<std::vector<std::string>>());
    }

    bool operator==(const Vocabulary& o) const { return placeholders_ == o.placeholders_ && glyphs_ == o.glyphs_; }

private:
    std::vector<int> placeholders_;
    std::vector<std::string> glyphs_;
    std::unordered_map<int, std::int32_t> placeholder_index_;
    std::unordered_map<std::string, std::int32_t> glyph_index_;
};

/// Shared vocabulary over all corpora plus any extra tokens (e.g. glyphs that
/// only occur in an allograph pair list).
inline Vocabulary build_vocab(std::span<const Corpus> corpora, std::span<const Token> extra = {}) {
    std::vector<int> placeholders;
    std::vector<std::string> glyphs;
    auto add = [&](const Token& t) {
        if (t.kind == TokenKind::Identifiable) {
            glyphs.push_back(t.glyph);
        } else if (t.kind == TokenKind::Undeciphered) {
            placeholders.push_back(t.placeholder);
        }
    };
    for (const auto& c : corpora) {
        for (const auto& ins : c.inscriptions) {
            for (const auto& t : ins.tokens) {
                add(t);
            }
        }
    }
    for (const auto& t : extra) {
        add(t);
    }
    return Vocabulary(std::move(placeholders), std::move(glyphs));
}

// ---------------------------------------------------------------------------
// Audit
// ---------------------------------------------------------------------------

struct TokenTypeReport {
    std::size_t inscriptions = 0;
    std::size_t tokens = 0;
    std::size_t identifiable = 0;
    std::size_t unreadable = 0;
    std::size_t undeciphered = 0;

    double proportion(TokenKind k) const {
        if (tokens == 0) {
            return 0.0;
        }
        const auto n = k == TokenKind::Identifiable ? identifiable
                       : k == TokenKind::Unreadable ? unreadable
                                                    : undeciphered;
        return static_cast<double>(n) / static_cast<double>(tokens);
    }

    bool operator==(const TokenTypeReport&) const = default;
};

inline TokenTypeReport audit(const Corpus& corpus) {
    TokenTypeReport r;
    r.inscriptions = corpus.inscriptions.size();
    for (const auto& ins : corpus.inscriptions) {
        for (const auto& t : ins.tokens) {
            ++r.tokens;
            switch (t.kind) {
            case TokenKind::Identifiable:
                ++r.identifiable;
                break;
            case TokenKind::Unreadable:
                ++r.unreadable;
                break;
            case TokenKind::Undeciphered:
                ++r.undeciphered;
                break;
            }
        }
    }
    return r;
}

inline nlohmann::json to_json(const TokenTypeReport& r) {
    return {{"inscriptions", r.inscriptions},
            {"tokens", r.tokens},
            {"identifiable", r.identifiable},
            {"unreadable", r.unreadable},
            {"undeciphered", r.undeciphered},
            {"proportions",
             {{"identifiable", r.proportion(TokenKind::Identifiable)},
              {"unreadable", r.proportion(TokenKind::Unreadable)},
              {"undeciphered", r.proportion(TokenKind::Undeciphered)}}}};
}

namespace detail {

inline std::string group_thousands(std::size_t n) {
    auto s = std::to_string(n);
    for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3) {
        s.insert(static_cast<std::size_t>(i), ",");
    }
    return s;
}

} // namespace detail

/// Plain-text table: type, count, proportion (2 decimals).
inline std::string render_table(const TokenTypeReport& r) {
    std::ostringstream out;
    char buf[128];
    auto row = [&](std::string_view name, std::size_t count, double prop) {
        std::size_t width = 0;
        for (unsigned char c : name) {
            width += (c & 0xC0) != 0x80 ? 1 : 0;
        }
        out << name << std::string(width < 28 ? 28 - width : 0, ' ');
        std::snprintf(buf, sizeof buf, " %12s %9.2f%%\n", detail::group_thousands(count).c_str(), prop * 100.0);
        out << buf;
    };
    std::snprintf(buf, sizeof buf, "%-28s %12s %10s\n", "Type", "Count", "Proportion");
    out << buf;
    row("Identifiable", r.identifiable, r.proportion(TokenKind::Identifiable));
    row("Unreadable (□)", r.unreadable, r.proportion(TokenKind::Unreadable));
    row("Undeciphered ({UNK})", r.undeciphered, r.proportion(TokenKind::Undeciphered));
    out << "inscriptions: " << detail::group_thousands(r.inscriptions)
        << "  tokens: " << detail::group_thousands(r.tokens) << '\n';
    return out.str();
}

} // namespace allomlm

#endif
