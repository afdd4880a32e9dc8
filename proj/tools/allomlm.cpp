// allomlm command-line entry point.

#include <algorithm>
#include <csignal>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "allomlm/checkpoint.hpp"
#include "allomlm/config.hpp"
#include "allomlm/corpus.hpp"
#include "allomlm/decode.hpp"
#include "allomlm/error.hpp"
#include "allomlm/evaluation.hpp"
#include "allomlm/glyphnet.hpp"
#include "allomlm/io.hpp"
#include "allomlm/rng.hpp"
#include "allomlm/service.hpp"
#include "allomlm/trainer.hpp"

namespace fs = std::filesystem;
using namespace allomlm;
using json = nlohmann::json;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

struct Globals {
    std::optional<std::uint64_t> seed;
    std::string format = "text";

    bool structured() const { return format == "structured"; }
};

void emit(const Globals& g, const json& j, const std::string& text) {
    if (g.structured()) {
        std::cout << j.dump(2) << '\n';
    } else {
        std::cout << text;
    }
}

void write_json(const fs::path& path, const json& j) { io::atomic_write(path, j.dump(2) + "\n"); }

CorpusKind parse_kind(const std::string& s) {
    if (s == "tapt") {
        return CorpusKind::TaptInscriptional;
    }
    if (s == "dapt") {
        return CorpusKind::DaptAuxiliary;
    }
    throw UsageError("unknown corpus kind: " + s);
}

Corpus read_corpus(const fs::path& path, CorpusKind kind = CorpusKind::TaptInscriptional) {
    return parse_corpus(io::read_file(path), kind);
}

PairFile read_pairs(const fs::path& path) { return parse_pairs(io::read_file(path)); }

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h = (h ^ c) * 0x100000001b3ULL;
    }
    return h;
}

RunConfig load_run_config(const std::string& flag) {
    fs::path path = flag;
    if (path.empty()) {
        if (const char* dir = std::getenv("ALLOMLM_CONFIG_DIR"); dir && *dir) {
            path = fs::path(dir) / "run.json";
        }
    }
    if (path.empty()) {
        return {};
    }
    if (!fs::exists(path)) {
        throw UsageError("config file not found: " + path.string());
    }
    return parse_run_config(io::read_file(path));
}

Checkpoint<double> read_checkpoint(const fs::path& path) { return load_checkpoint<double>(path); }

GlyphNet net_for(const Vocabulary& vocab, const std::string& pairs_path) {
    if (pairs_path.empty()) {
        return GlyphNet::from_index_pairs({}, vocab.size());
    }
    return build_families(read_pairs(pairs_path).pairs, vocab);
}

// ---------------------------------------------------------------------------
// prep
// ---------------------------------------------------------------------------

struct PrepArgs {
    std::string in, out, kind = "tapt", patch, audit_out, dedup_log, test_out;
    std::size_t min_len = 2;
    double test_fraction = 0.1;
};

void cmd_prep(const Globals& g, const PrepArgs& a) {
    const auto kind = parse_kind(a.kind);
    auto raw = read_corpus(a.in, kind);
    std::vector<Patch> patches;
    if (!a.patch.empty()) {
        patches = parse_patches(io::read_file(a.patch));
    }
    const auto raw_audit = audit(raw);
    auto prepared = prepare(std::move(raw), patches, a.min_len);
    const auto prep_audit = audit(prepared.corpus);

    json report{{"schema", kSchema}, {"raw", to_json(raw_audit)}, {"prepared", to_json(prep_audit)}};
    report["prepared"]["duplicate_groups"] = prepared.duplicates.size();
    report["prepared"]["dropped_short"] = prepared.dropped_short;
    report["patches"] = patches.size();

    Corpus keep = prepared.corpus;
    if (!a.test_out.empty()) {
        if (!(a.test_fraction > 0.0 && a.test_fraction < 1.0)) {
            throw UsageError("--test-fraction must be in (0, 1)");
        }
        const auto seed = g.seed.value_or(0);
        Corpus test;
        test.kind = keep.kind;
        keep.inscriptions.clear();
        for (const auto& ins : prepared.corpus.inscriptions) {
            Rng rng(derive_seed(seed, {fnv1a(ins.id)}));
            (rng.uniform() < a.test_fraction ? test : keep).inscriptions.push_back(ins);
        }
        report["split"] = {{"train", keep.inscriptions.size()}, {"test", test.inscriptions.size()}};
        io::atomic_write(a.test_out, serialize_corpus(test));
    }
    io::atomic_write(a.out, serialize_corpus(keep));
    if (!a.audit_out.empty()) {
        write_json(a.audit_out, report);
    }
    if (!a.dedup_log.empty()) {
        json log = json::array();
        for (const auto& d : prepared.duplicates) {
            log.push_back({{"representative", d.representative}, {"members", d.members}});
        }
        write_json(a.dedup_log, log);
    }
    std::string text = "raw corpus\n" + render_table(raw_audit) + "\nprepared corpus (min length " +
                       std::to_string(a.min_len) + ")\n" + render_table(prep_audit) +
                       "dropped short: " + std::to_string(prepared.dropped_short) +
                       "  duplicate groups: " + std::to_string(prepared.duplicates.size()) + '\n';
    if (report.contains("split")) {
        text += "split: " + std::to_string(report["split"]["train"].get<std::size_t>()) + " train, " +
                std::to_string(report["split"]["test"].get<std::size_t>()) + " test\n";
    }
    emit(g, report, text);
}

// ---------------------------------------------------------------------------
// glyphnet
// ---------------------------------------------------------------------------

struct GlyphnetArgs {
    std::string pairs, out;
    std::vector<std::string> corpora;
};

void cmd_glyphnet(const Globals& g, const GlyphnetArgs& a) {
    const auto pf = read_pairs(a.pairs);
    std::vector<Corpus> corpora;
    for (const auto& c : a.corpora) {
        corpora.push_back(read_corpus(c));
    }
    const auto extra = pair_tokens(pf.pairs);
    const auto vocab = build_vocab(corpora, extra);
    const auto net = build_families(pf.pairs, vocab);

    json fams = json::array();
    std::string text;
    std::size_t largest = 0;
    for (auto f : net.multi_member_families()) {
        json members = json::array();
        std::string line = vocab.label(f) + ":";
        for (auto m : net.members(f)) {
            members.push_back(vocab.label(m));
            line += " " + vocab.label(m);
        }
        largest = std::max(largest, members.size());
        fams.push_back({{"head", vocab.label(f)}, {"members", members}});
        text += line + '\n';
    }
    json report{{"schema", kSchema},
                {"pairs", pf.pairs.size()},
                {"loans_set_aside", pf.loans.size()},
                {"glyph_tokens", net.glyph_token_count()},
                {"families", fams.size()},
                {"largest_family", largest},
                {"members", fams}};
    if (!a.out.empty()) {
        write_json(a.out, report);
    }
    text += std::to_string(pf.pairs.size()) + " pairs, " + std::to_string(net.glyph_token_count()) +
            " glyph tokens in " + std::to_string(fams.size()) + " families (largest " + std::to_string(largest) +
            ")\n";
    emit(g, report, text);
}

// ---------------------------------------------------------------------------
// train / finetune
// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string config, dapt, tapt, pairs, out, log, dtype = "f64";
    std::vector<std::string> vocab_from;
};

template <typename Real>
json train_as(const RunConfig& config, const Corpus* dapt, const Corpus& tapt, const Vocabulary& vocab,
              const GlyphNet& net, const TrainArgs& a) {
    auto result = run<Real>(config, dapt, tapt, vocab, net);
    save_checkpoint(a.out, result.model, vocab, result.meta);
    if (!a.log.empty()) {
        io::atomic_write(a.log, result.log.to_jsonl());
    }
    json stages = json::array();
    for (const auto& s : result.meta.stages) {
        stages.push_back({{"name", s.name}, {"epochs", s.epochs}, {"steps", s.steps}});
    }
    const auto losses = result.log.losses();
    return {{"schema", kSchema},
            {"schedule", result.meta.schedule},
            {"vocab_size", vocab.size()},
            {"parameters", result.model.parameter_count()},
            {"stages", stages},
            {"final_loss", losses.empty() ? json(nullptr) : json(losses.back())},
            {"checkpoint", a.out}};
}

void cmd_train(const Globals& g, const TrainArgs& a) {
    auto config = load_run_config(a.config);
    if (g.seed) {
        config.seed = *g.seed;
    }
    if (a.dtype != "f32" && a.dtype != "f64") {
        throw UsageError("--dtype must be f32 or f64");
    }
    std::optional<Corpus> dapt;
    if (!a.dapt.empty()) {
        dapt = read_corpus(a.dapt, CorpusKind::DaptAuxiliary);
    }
    Corpus tapt;
    if (!a.tapt.empty()) {
        tapt = read_corpus(a.tapt);
    }
    const auto pf = read_pairs(a.pairs);
    std::vector<Corpus> corpora{tapt};
    if (dapt) {
        corpora.push_back(*dapt);
    }
    for (const auto& v : a.vocab_from) {
        corpora.push_back(read_corpus(v));
    }
    const auto extra = pair_tokens(pf.pairs);
    const auto vocab = build_vocab(corpora, extra);
    const auto net = build_families(pf.pairs, vocab);
    const Corpus* dp = dapt ? &*dapt : nullptr;
    const auto summary = a.dtype == "f32" ? train_as<float>(config, dp, tapt, vocab, net, a)
                                          : train_as<double>(config, dp, tapt, vocab, net, a);
    std::string text = "schedule " + summary["schedule"].get<std::string>() + ", vocabulary " +
                       std::to_string(vocab.size()) + ", parameters " +
                       std::to_string(summary["parameters"].get<std::size_t>()) + '\n';
    for (const auto& s : summary["stages"]) {
        text += "  " + s["name"].get<std::string>() + ": " + std::to_string(s["epochs"].get<std::size_t>()) +
                " epochs, " + std::to_string(s["steps"].get<std::size_t>()) + " steps\n";
    }
    if (summary["final_loss"].is_number()) {
        text += "final loss " + std::to_string(summary["final_loss"].get<double>()) + '\n';
    }
    text += "wrote " + a.out + '\n';
    emit(g, summary, text);
}

struct FinetuneArgs {
    std::string checkpoint, train, out, log, head = "both", config;
    bool heads_only = false;
};

void cmd_finetune(const Globals& g, const FinetuneArgs& a) {
    auto ck = read_checkpoint(a.checkpoint);
    FinetuneConfig ft;
    std::uint64_t seed = 42;
    if (!a.config.empty()) {
        const auto rc = load_run_config(a.config);
        ft = rc.finetune;
        seed = rc.seed;
    } else if (ck.meta.run_config.is_object() && !ck.meta.run_config.empty()) {
        const auto rc = run_config_from_json(ck.meta.run_config);
        ft = rc.finetune;
        seed = rc.seed;
    }
    if (g.seed) {
        seed = *g.seed;
    }
    if (a.heads_only) {
        ft.heads_only = true;
    }
    std::vector<Head> heads;
    if (a.head == "dynasty" || a.head == "both") {
        heads.push_back(Head::Dynasty);
    }
    if (a.head == "period" || a.head == "both") {
        heads.push_back(Head::Period);
    }
    if (heads.empty()) {
        throw UsageError("--head must be dynasty, period or both");
    }
    const auto data = encode_corpus(read_corpus(a.train), ck.vocab, ck.model.config().max_seq_len);
    TrainLog log;
    fine_tune_dating(ck.model, data, std::span<const Head>(heads), ft, seed, &log);
    json trained = json::array();
    std::string stage = "finetune";
    for (auto h : heads) {
        const std::string name(head_name(h));
        if (std::find(ck.meta.heads_trained.begin(), ck.meta.heads_trained.end(), name) ==
            ck.meta.heads_trained.end()) {
            ck.meta.heads_trained.push_back(name);
        }
        stage += "-" + name;
        trained.push_back(name);
    }
    ck.meta.stages.push_back({stage, ft.epochs, log.records.size()});
    save_checkpoint(a.out, ck.model, ck.vocab, ck.meta);
    if (!a.log.empty()) {
        io::atomic_write(a.log, log.to_jsonl());
    }
    json summary{{"schema", kSchema}, {"heads", trained}, {"examples", data.size()}, {"checkpoint", a.out}};
    emit(g, summary, "fine-tuned " + trained.dump() + " on " + std::to_string(data.size()) + " sequences\nwrote " +
                         a.out + '\n');
}

// ---------------------------------------------------------------------------
// eval / report
// ---------------------------------------------------------------------------

struct EvalArgs {
    std::string checkpoint, test, pairs, task = "restoration", out;
    std::size_t k = 10;
};

json evaluate(const EvalArgs& a) {
    const auto ck = read_checkpoint(a.checkpoint);
    const auto test = encode_corpus(read_corpus(a.test), ck.vocab, ck.model.config().max_seq_len);
    if (a.task == "restoration") {
        const auto net = net_for(ck.vocab, a.pairs);
        const auto items = evaluate_restoration(ck.model, ck.vocab, test, ck.meta.seen_tokens, a.k);
        auto report = restoration_report(items, net);
        report["representation"] = to_json(representation_report(ck.model.token_embeddings(), net));
        return report;
    }
    if (a.task == "dating") {
        return dating_report(evaluate_dating(ck.model, test));
    }
    throw UsageError("--task must be restoration or dating");
}

void cmd_eval(const Globals& g, const EvalArgs& a) {
    if (a.k < 10) {
        throw UsageError("--k must be at least 10 to report @10 metrics");
    }
    const auto report = evaluate(a);
    if (!a.out.empty()) {
        write_json(a.out, report);
    }
    emit(g, report, render_report(report));
}

void cmd_report(const Globals& g, const std::vector<std::string>& inputs) {
    json all = json::array();
    std::string text;
    for (const auto& path : inputs) {
        json j;
        try {
            j = json::parse(io::read_file(path));
        } catch (const json::parse_error&) {
            throw DataError("not a JSON report: " + path);
        }
        if (inputs.size() > 1) {
            text += "== " + path + '\n';
        }
        text += render_report(j);
        all.push_back(j);
    }
    emit(g, inputs.size() == 1 ? all[0] : all, text);
}

// ---------------------------------------------------------------------------
// restore / serve
// ---------------------------------------------------------------------------

struct RestoreArgs {
    std::string checkpoint, pairs, text, mode = "parallel";
    std::size_t k = 5;
    bool mask_undeciphered = false, keep_unreadable = false;
};

void cmd_restore(const Globals& g, const RestoreArgs& a) {
    const auto mode = parse_decode_mode(a.mode);
    const auto ck = read_checkpoint(a.checkpoint);
    const auto net = net_for(ck.vocab, a.pairs);
    QueryOptions opts;
    opts.mask_unreadable = !a.keep_unreadable;
    opts.mask_undeciphered = a.mask_undeciphered;
    const auto q = parse_query(a.text, ck.vocab, ck.model.config().max_seq_len, opts);
    const auto set = restore(ck.model, ck.vocab, net, q.ids, a.k, mode);
    emit(g, to_json(set, ck.vocab), render_candidates(set, ck.vocab));
}

struct ServeArgs {
    std::string checkpoint, pairs, session_log, host = "127.0.0.1";
    int port = 8080;
    std::size_t max_k = 100;
};

std::function<void()> g_stop;

void cmd_serve(const ServeArgs& a) {
    ServiceOptions opts;
    opts.max_k = a.max_k;
    if (!a.session_log.empty()) {
        opts.session_log = a.session_log;
    }
    PairFile pf;
    if (!a.pairs.empty()) {
        pf = read_pairs(a.pairs);
    }
    Service<double> service(read_checkpoint(a.checkpoint), std::move(pf), opts);
    HttpServer<double> server(service);
    const int port = server.bind(a.host, a.port);
    g_stop = [&server] { server.stop(); };
    std::signal(SIGINT, [](int) {
        if (g_stop) {
            g_stop();
        }
    });
    std::signal(SIGTERM, [](int) {
        if (g_stop) {
            g_stop();
        }
    });
    std::cerr << "listening on http://" << a.host << ':' << port << std::endl;
    server.listen();
    g_stop = nullptr;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"allograph-aware masked language modelling for inscriptions"};
    app.require_subcommand(1);
    Globals g;
    std::uint64_t seed = 0;
    auto* seed_opt = app.add_option("--seed", seed, "seed for every stochastic step");
    app.add_option("--format", g.format, "output format")
        ->check(CLI::IsMember({"text", "structured"}))
        ->capture_default_str();

    PrepArgs prep;
    auto* sp = app.add_subcommand("prep", "clean, filter and deduplicate a corpus, and audit it");
    sp->add_option("--in", prep.in, "raw corpus (JSON lines)")->required();
    sp->add_option("--out", prep.out, "prepared corpus")->required();
    sp->add_option("--min-len", prep.min_len, "drop inscriptions shorter than this")->capture_default_str();
    sp->add_option("--patch", prep.patch, "correction patches (JSON lines)");
    sp->add_option("--kind", prep.kind, "tapt or dapt")->check(CLI::IsMember({"tapt", "dapt"}))->capture_default_str();
    sp->add_option("--audit-out", prep.audit_out, "write the audit report here");
    sp->add_option("--dedup-log", prep.dedup_log, "write duplicate groups here");
    sp->add_option("--test-out", prep.test_out, "hold out a test split into this file");
    sp->add_option("--test-fraction", prep.test_fraction, "share of inscriptions held out")->capture_default_str();

    GlyphnetArgs gn;
    auto* sg = app.add_subcommand("glyphnet", "build allograph families from a pair list");
    sg->add_option("--pairs", gn.pairs, "pair list (TSV)")->required();
    sg->add_option("--corpus", gn.corpora, "corpora whose tokens join the vocabulary");
    sg->add_option("--out", gn.out, "write the family table here");

    TrainArgs tr;
    auto* st = app.add_subcommand("train", "run an adaptation schedule");
    st->add_option("--config", tr.config, "run configuration (JSON)");
    st->add_option("--dapt", tr.dapt, "auxiliary corpus");
    st->add_option("--tapt", tr.tapt, "inscription corpus");
    st->add_option("--pairs", tr.pairs, "pair list (TSV)")->required();
    st->add_option("--vocab-from", tr.vocab_from, "extra corpora for the vocabulary only");
    st->add_option("--out", tr.out, "checkpoint path")->required();
    st->add_option("--log", tr.log, "training log (JSON lines)");
    st->add_option("--dtype", tr.dtype, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}))->capture_default_str();

    FinetuneArgs ft;
    auto* sf = app.add_subcommand("finetune", "train the dating heads");
    sf->add_option("--checkpoint", ft.checkpoint, "input checkpoint")->required();
    sf->add_option("--train", ft.train, "labelled corpus")->required();
    sf->add_option("--out", ft.out, "output checkpoint")->required();
    sf->add_option("--log", ft.log, "training log (JSON lines)");
    sf->add_option("--head", ft.head, "dynasty, period or both")
        ->check(CLI::IsMember({"dynasty", "period", "both"}))
        ->capture_default_str();
    sf->add_option("--config", ft.config, "run configuration supplying fine-tuning settings");
    sf->add_flag("--heads-only", ft.heads_only, "keep the encoder frozen");

    EvalArgs ev;
    auto* se = app.add_subcommand("eval", "score a checkpoint on a test corpus");
    se->add_option("--checkpoint", ev.checkpoint, "checkpoint")->required();
    se->add_option("--test", ev.test, "test corpus")->required();
    se->add_option("--pairs", ev.pairs, "pair list (TSV)");
    se->add_option("--task", ev.task, "restoration or dating")
        ->check(CLI::IsMember({"restoration", "dating"}))
        ->capture_default_str();
    se->add_option("--out", ev.out, "write the report here");
    se->add_option("--k", ev.k, "candidates kept per position")->capture_default_str();

    RestoreArgs rs;
    auto* sr = app.add_subcommand("restore", "rank candidates for masked positions");
    sr->add_option("--checkpoint", rs.checkpoint, "checkpoint")->required();
    sr->add_option("--pairs", rs.pairs, "pair list (TSV)");
    sr->add_option("--text", rs.text, "inscription with {MASK} gaps")->required();
    sr->add_option("--mode", rs.mode, "parallel, greedy or interactive")
        ->check(CLI::IsMember({"parallel", "greedy", "interactive"}))
        ->capture_default_str();
    sr->add_option("--k", rs.k, "candidates per position")->capture_default_str()->check(CLI::PositiveNumber);
    sr->add_flag("--mask-undeciphered", rs.mask_undeciphered, "treat {UNK:n} as gaps");
    sr->add_flag("--keep-unreadable", rs.keep_unreadable, "do not treat unreadable marks as gaps");

    std::vector<std::string> report_in;
    auto* sq = app.add_subcommand("report", "render saved evaluation reports");
    sq->add_option("inputs", report_in, "report files")->required();

    ServeArgs sv;
    auto* ss = app.add_subcommand("serve", "HTTP service for restoration and dating");
    ss->add_option("--checkpoint", sv.checkpoint, "checkpoint")->required();
    ss->add_option("--pairs", sv.pairs, "pair list (TSV)");
    ss->add_option("--port", sv.port, "port (0 picks a free one)")->capture_default_str();
    ss->add_option("--host", sv.host, "bind address")->capture_default_str();
    ss->add_option("--session-log", sv.session_log, "persist sessions to this append-only log");
    ss->add_option("--max-k", sv.max_k, "largest K a client may request")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitUsage;
    }
    if (*seed_opt) {
        g.seed = seed;
    }

    try {
        if (*sp) {
            cmd_prep(g, prep);
        } else if (*sg) {
            cmd_glyphnet(g, gn);
        } else if (*st) {
            cmd_train(g, tr);
        } else if (*sf) {
            cmd_finetune(g, ft);
        } else if (*se) {
            cmd_eval(g, ev);
        } else if (*sr) {
            cmd_restore(g, rs);
        } else if (*sq) {
            cmd_report(g, report_in);
        } else if (*ss) {
            cmd_serve(sv);
        }
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitData;
    }
    return 0;
}
