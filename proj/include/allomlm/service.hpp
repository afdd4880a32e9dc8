#ifndef ALLOMLM_SERVICE_HPP
#define ALLOMLM_SERVICE_HPP

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "httplib.h"
#include "json.hpp"

#include "allomlm/checkpoint.hpp"
#include "allomlm/decode.hpp"
#include "allomlm/glyphnet.hpp"
#include "allomlm/trainer.hpp"

namespace allomlm {

struct ServiceOptions {
    std::size_t default_k = 5;
    std::size_t max_k = 100;
    /// Append-only session log; sessions are in memory only when unset.
    std::optional<std::filesystem::path> session_log;
};

struct HttpResponse {
    int status = 200;
    std::string body;
};

/// Request handling independent of the HTTP transport. The model is loaded
/// once and never mutated; session state lives here.
template <typename Real>
class Service {
public:
    Service(Checkpoint<Real> checkpoint, PairFile pairs, ServiceOptions options = {})
        : ck_(std::move(checkpoint)), pairs_(std::move(pairs)), options_(std::move(options)),
          net_(build_families(pairs_.pairs, ck_.vocab)) {
        if (options_.session_log && std::filesystem::exists(*options_.session_log)) {
            replay(io::read_file(*options_.session_log));
        }
    }

    const Vocabulary& vocab() const noexcept { return ck_.vocab; }
    const GlyphNet& net() const noexcept { return net_; }
    const EncoderModel<Real>& model() const noexcept { return ck_.model; }

    HttpResponse handle(std::string_view method, std::string_view path, std::string_view body) {
        try {
            return route(method, path, body);
        } catch (const HttpError& e) {
            return error(e.status, e.what());
        } catch (const SequenceTooLong& e) {
            return error(413, e.what());
        } catch (const UsageError& e) {
            return error(400, e.what());
        } catch (const DataError& e) {
            return error(422, e.what());
        } catch (const std::exception& e) {
            return error(500, e.what());
        }
    }

private:
    struct HttpError : std::runtime_error {
        HttpError(int s, const std::string& m) : std::runtime_error(m), status(s) {}
        int status;
    };

    struct Session {
        std::string id;
        std::string text;
        Query query;
        std::size_t k = 5;
        std::map<std::size_t, std::int32_t> accepted;
        std::vector<std::size_t> history;  // accepted positions, most recent last
        std::mutex mutex;
    };

    static HttpResponse error(int status, std::string_view message) {
        nlohmann::json j{{"schema", kSchema}, {"error", std::string(message)}, {"status", status}};
        return {status, j.dump()};
    }

    static HttpResponse ok(const nlohmann::json& j, int status = 200) { return {status, j.dump()}; }

    static std::vector<std::string_view> split_path(std::string_view path) {
        std::vector<std::string_view> parts;
        while (!path.empty()) {
            if (path.front() == '/') {
                path.remove_prefix(1);
                continue;
            }
            const auto slash = path.find('/');
            parts.push_back(path.substr(0, slash));
            if (slash == std::string_view::npos) {
                break;
            }
            path.remove_prefix(slash);
        }
        return parts;
    }

    static nlohmann::json parse_body(std::string_view body) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(body);
        } catch (const nlohmann::json::parse_error&) {
            throw UsageError("request body is not valid JSON");
        }
        if (!j.is_object()) {
            throw UsageError("request body must be a JSON object");
        }
        return j;
    }

    template <typename T>
    static T field(const nlohmann::json& j, const char* key, T fallback) {
        if (!j.contains(key)) {
            return fallback;
        }
        try {
            return j.at(key).get<T>();
        } catch (const nlohmann::json::exception&) {
            throw UsageError(std::string("bad value for ") + key);
        }
    }

    static std::string required_text(const nlohmann::json& j) {
        const auto text = field<std::string>(j, "text", "");
        if (text.empty()) {
            throw UsageError("text is required");
        }
        return text;
    }

    std::size_t read_k(const nlohmann::json& j) const {
        const auto k = field<std::int64_t>(j, "k", static_cast<std::int64_t>(options_.default_k));
        if (k < 1 || static_cast<std::size_t>(k) > options_.max_k) {
            throw UsageError("k must be in [1, " + std::to_string(options_.max_k) + "]");
        }
        return static_cast<std::size_t>(k);
    }

    static void require_method(std::string_view method, std::string_view want) {
        if (method != want) {
            throw HttpError(405, "method not allowed");
        }
    }

    HttpResponse route(std::string_view method, std::string_view path, std::string_view body) {
        const auto parts = split_path(path);
        if (parts.size() == 1 && parts[0] == "health") {
            require_method(method, "GET");
            return ok({{"schema", kSchema},
                       {"status", "ok"},
                       {"vocab_hash", hex64(ck_.vocab.hash())},
                       {"schedule", ck_.meta.schedule},
                       {"heads_trained", ck_.meta.heads_trained}});
        }
        if (parts.size() == 1 && parts[0] == "restore") {
            require_method(method, "POST");
            return post_restore(parse_body(body));
        }
        if (parts.size() == 1 && parts[0] == "date") {
            require_method(method, "POST");
            return post_date(parse_body(body));
        }
        if (parts.size() == 2 && parts[0] == "families") {
            require_method(method, "GET");
            return get_family(parts[1]);
        }
        if (!parts.empty() && parts[0] == "sessions") {
            if (parts.size() == 1) {
                require_method(method, "POST");
                return create_session(parse_body(body));
            }
            auto session = find_session(parts[1]);
            if (parts.size() == 2) {
                require_method(method, "GET");
                std::lock_guard lock(session->mutex);
                return ok(session_json(*session));
            }
            if (parts.size() == 3 && parts[2] == "accept") {
                require_method(method, "POST");
                return accept(*session, parse_body(body));
            }
            if (parts.size() == 3 && parts[2] == "undo") {
                require_method(method, "POST");
                return undo(*session);
            }
        }
        throw HttpError(404, "no such endpoint");
    }

    QueryOptions query_options(const nlohmann::json& j) const {
        QueryOptions o;
        o.mask_unreadable = field<bool>(j, "mask_unreadable", true);
        o.mask_undeciphered = field<bool>(j, "mask_undeciphered", false);
        return o;
    }

    HttpResponse post_restore(const nlohmann::json& j) {
        const auto text = required_text(j);
        const auto mode = parse_decode_mode(field<std::string>(j, "mode", "parallel"));
        const auto k = read_k(j);
        const auto q = parse_query(text, ck_.vocab, ck_.model.config().max_seq_len, query_options(j));
        return ok(to_json(restore(ck_.model, ck_.vocab, net_, q.ids, k, mode), ck_.vocab));
    }

    HttpResponse post_date(const nlohmann::json& j) {
        const auto text = required_text(j);
        std::vector<std::int32_t> ids;
        try {
            ids = parse_query(text, ck_.vocab, ck_.model.config().max_seq_len, {false, false}).ids;
        } catch (const SequenceTooLong&) {
            throw;
        } catch (const UsageError&) {
            // no gaps: plain text is the normal case here
            for (const auto& t : tokenize(text)) {
                ids.push_back(t.kind == TokenKind::Unreadable ? Vocabulary::kUnreadable : ck_.vocab.at(t));
            }
        }
        if (ids.empty()) {
            throw UsageError("text has no characters");
        }
        if (ids.size() + 2 > ck_.model.config().max_seq_len) {
            throw SequenceTooLong("text exceeds the model length");
        }
        EncodedCorpus one;
        one.sequences.push_back(ids);
        one.ids.push_back("query");
        one.dynasty.push_back(-1);
        one.period.push_back(-1);
        nlohmann::json out{{"schema", kSchema}};
        const auto dyn = predict_labels(ck_.model, one, Head::Dynasty);
        const auto per = predict_labels(ck_.model, one, Head::Period);
        nlohmann::json d = nlohmann::json::object(), p = nlohmann::json::object();
        for (std::size_t c = 0; c < kDynastyCount; ++c) {
            d[std::string(kDynastyNames[c])] = dyn(0, c);
        }
        for (std::size_t c = 0; c < kPeriodCount; ++c) {
            p[std::string(kPeriodNames[c])] = per(0, c);
        }
        out["dynasty"] = d;
        out["period"] = p;
        out["heads_trained"] = ck_.meta.heads_trained;
        return ok(out);
    }

    HttpResponse get_family(std::string_view token_text) {
        const auto toks = tokenize(token_text);
        if (toks.size() != 1) {
            throw HttpError(404, "not a single token");
        }
        const auto idx = ck_.vocab.find(toks[0]);
        if (!idx || !ck_.vocab.is_glyph(*idx)) {
            throw HttpError(404, "unknown token");
        }
        const auto fam = net_.family_of(*idx);
        nlohmann::json members = nlohmann::json::array();
        for (auto m : net_.members(fam)) {
            members.push_back({{"token", ck_.vocab.label(m)}, {"index", m}});
        }
        nlohmann::json pairs = nlohmann::json::array();
        for (const auto& p : pairs_.pairs) {
            const auto a = ck_.vocab.find(p.a);
            if (a && net_.family_of(*a) == fam) {
                pairs.push_back({{"a", display(p.a)},
                                 {"b", display(p.b)},
                                 {"era", p.era ? nlohmann::json(std::string(to_string(*p.era))) : nlohmann::json(nullptr)},
                                 {"source", p.source}});
            }
        }
        return ok({{"schema", kSchema},
                   {"token", ck_.vocab.label(*idx)},
                   {"family", fam},
                   {"family_head", ck_.vocab.label(fam)},
                   {"members", members},
                   {"pairs", pairs}});
    }

    // -- sessions ------------------------------------------------------------

    std::shared_ptr<Session> find_session(std::string_view id) {
        std::lock_guard lock(sessions_mutex_);
        auto it = sessions_.find(std::string(id));
        if (it == sessions_.end()) {
            throw HttpError(404, "unknown session");
        }
        return it->second;
    }

    nlohmann::json session_json(const Session& s) const {
        nlohmann::json accepted = nlohmann::json::array();
        for (auto [pos, tok] : s.accepted) {
            accepted.push_back({{"position", pos}, {"token", ck_.vocab.label(tok)}, {"index", tok}});
        }
        return {{"schema", kSchema},
                {"id", s.id},
                {"text", s.text},
                {"k", s.k},
                {"gaps", s.query.masks},
                {"accepted", accepted},
                {"history_depth", s.history.size()},
                {"candidates", to_json(restore_step(ck_.model, ck_.vocab, net_, s.query.ids, s.accepted, s.k), ck_.vocab)}};
    }

    void log_event(const nlohmann::json& event) {
        if (!options_.session_log) {
            return;
        }
        std::lock_guard lock(log_mutex_);
        std::ofstream out(*options_.session_log, std::ios::app | std::ios::binary);
        out << event.dump() << '\n';
        out.flush();
        if (!out) {
            throw DataError("cannot append to the session log");
        }
    }

    std::shared_ptr<Session> make_session(const std::string& id, const std::string& text, std::size_t k,
                                          QueryOptions qo) {
        auto s = std::make_shared<Session>();
        s->id = id;
        s->text = text;
        s->k = k;
        s->query = parse_query(text, ck_.vocab, ck_.model.config().max_seq_len, qo);
        return s;
    }

    HttpResponse create_session(const nlohmann::json& j) {
        const auto text = required_text(j);
        const auto k = read_k(j);
        const auto qo = query_options(j);
        std::string id;
        {
            std::lock_guard lock(sessions_mutex_);
            id = "s" + std::to_string(++next_id_);
        }
        auto s = make_session(id, text, k, qo);
        log_event({{"op", "create"},
                   {"id", id},
                   {"text", text},
                   {"k", k},
                   {"mask_unreadable", qo.mask_unreadable},
                   {"mask_undeciphered", qo.mask_undeciphered}});
        std::lock_guard slock(s->mutex);
        {
            std::lock_guard lock(sessions_mutex_);
            sessions_[id] = s;
        }
        return ok(session_json(*s), 201);
    }

    std::int32_t resolve_token(const nlohmann::json& j) const {
        if (j.contains("index")) {
            const auto idx = field<std::int32_t>(j, "index", -1);
            if (!ck_.vocab.is_glyph(idx)) {
                throw DataError("index is not a glyph token");
            }
            return idx;
        }
        const auto text = field<std::string>(j, "token", "");
        const auto toks = tokenize(text);
        if (toks.size() != 1) {
            throw UsageError("token must be a single character");
        }
        const auto idx = ck_.vocab.at(toks[0]);
        if (!ck_.vocab.is_glyph(idx)) {
            throw DataError("token is not a glyph");
        }
        return idx;
    }

    void apply_accept(Session& s, std::size_t pos, std::int32_t token) {
        if (pos >= s.query.ids.size() || s.query.ids[pos] != Vocabulary::kMask) {
            throw HttpError(409, "position " + std::to_string(pos) + " is not a gap");
        }
        if (s.accepted.count(pos)) {
            throw HttpError(409, "position " + std::to_string(pos) + " is already filled");
        }
        s.accepted[pos] = token;
        s.history.push_back(pos);
    }

    void apply_undo(Session& s) {
        if (s.history.empty()) {
            throw HttpError(409, "nothing to undo");
        }
        s.accepted.erase(s.history.back());
        s.history.pop_back();
    }

    HttpResponse accept(Session& s, const nlohmann::json& j) {
        if (!j.contains("position")) {
            throw UsageError("position is required");
        }
        const auto pos = field<std::int64_t>(j, "position", -1);
        if (pos < 0) {
            throw UsageError("position must be non-negative");
        }
        const auto token = resolve_token(j);
        std::lock_guard lock(s.mutex);
        apply_accept(s, static_cast<std::size_t>(pos), token);
        log_event({{"op", "accept"}, {"id", s.id}, {"position", pos}, {"index", token}});
        return ok(session_json(s));
    }

    HttpResponse undo(Session& s) {
        std::lock_guard lock(s.mutex);
        apply_undo(s);
        log_event({{"op", "undo"}, {"id", s.id}});
        return ok(session_json(s));
    }

    void replay(const std::string& log) {
        std::istringstream in(log);
        std::string line;
        std::size_t n = 0;
        while (std::getline(in, line)) {
            ++n;
            if (line.empty()) {
                continue;
            }
            try {
                const auto e = nlohmann::json::parse(line);
                const auto op = e.at("op").get<std::string>();
                const auto id = e.at("id").get<std::string>();
                if (op == "create") {
                    QueryOptions qo{e.at("mask_unreadable").get<bool>(), e.at("mask_undeciphered").get<bool>()};
                    sessions_[id] = make_session(id, e.at("text").get<std::string>(), e.at("k").get<std::size_t>(), qo);
                    if (id.size() > 1 && id[0] == 's') {
                        next_id_ = std::max<std::uint64_t>(next_id_, std::stoull(id.substr(1)));
                    }
                } else if (op == "accept") {
                    apply_accept(*sessions_.at(id), e.at("position").get<std::size_t>(), e.at("index").get<std::int32_t>());
                } else if (op == "undo") {
                    apply_undo(*sessions_.at(id));
                } else {
                    throw DataError("unknown op");
                }
            } catch (const std::exception& ex) {
                throw DataError("session log line " + std::to_string(n) + ": " + ex.what());
            }
        }
    }

    Checkpoint<Real> ck_;
    PairFile pairs_;
    ServiceOptions options_;
    GlyphNet net_;
    std::mutex sessions_mutex_;
    std::map<std::string, std::shared_ptr<Session>> sessions_;
    std::uint64_t next_id_ = 0;
    std::mutex log_mutex_;
};

/// httplib transport for a Service, with permissive CORS for a local UI.
template <typename Real>
class HttpServer {
public:
    explicit HttpServer(Service<Real>& service) : service_(service) {
        server_.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                                     {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                                     {"Access-Control-Allow-Headers", "Content-Type"}});
        auto forward = [this](const httplib::Request& req, httplib::Response& res) {
            const auto r = service_.handle(req.method, req.path, req.body);
            res.status = r.status;
            res.set_content(r.body, "application/json");
        };
        server_.Get(".*", forward);
        server_.Post(".*", forward);
        server_.Options(".*", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
    }

    /// Bind to `port` (0 picks a free one); returns the bound port.
    int bind(const std::string& host, int port) {
        if (port == 0) {
            const int p = server_.bind_to_any_port(host);
            if (p < 0) {
                throw DataError("cannot bind " + host);
            }
            return p;
        }
        if (!server_.bind_to_port(host, port)) {
            throw DataError("cannot bind " + host + ":" + std::to_string(port));
        }
        return port;
    }

    bool listen() { return server_.listen_after_bind(); }
    void stop() { server_.stop(); }
    void wait_until_ready() const { server_.wait_until_ready(); }

private:
    Service<Real>& service_;
    httplib::Server server_;
};

} // namespace allomlm

#endif
