#ifndef ALLOMLM_TRAINER_HPP
#define ALLOMLM_TRAINER_HPP

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "allomlm/checkpoint.hpp"
#include "allomlm/config.hpp"
#include "allomlm/corpus.hpp"
#include "allomlm/encoder.hpp"
#include "allomlm/glyphnet.hpp"
#include "allomlm/masking.hpp"
#include "allomlm/objectives.hpp"
#include "allomlm/rng.hpp"

namespace allomlm {

struct TrainRecord {
    std::size_t step = 0;
    std::string stage;
    std::size_t epoch = 0;
    LossBreakdown loss;
    double wall_ms = 0.0;
};

struct TrainLog {
    std::vector<TrainRecord> records;

    /// One JSON object per line. Wall time is left out unless asked for, so
    /// that identical runs produce identical logs.
    std::string to_jsonl(bool with_timing = false) const {
        std::string out;
        for (const auto& r : records) {
            nlohmann::json j{{"step", r.step},
                             {"stage", r.stage},
                             {"epoch", r.epoch},
                             {"mlm", r.loss.mlm},
                             {"gn", r.loss.gn},
                             {"alpha", r.loss.alpha},
                             {"loss", r.loss.combined},
                             {"masked", r.loss.masked}};
            if (with_timing) {
                j["wall_ms"] = r.wall_ms;
            }
            out += j.dump();
            out += '\n';
        }
        return out;
    }

    std::vector<double> losses(std::string_view stage = {}) const {
        std::vector<double> out;
        for (const auto& r : records) {
            if (stage.empty() || r.stage == stage) {
                out.push_back(r.loss.combined);
            }
        }
        return out;
    }
};

/// Inscriptions as vocabulary indices without boundary markers, split into
/// chunks that fit the encoder. Labels are -1 when absent.
struct EncodedCorpus {
    std::vector<std::vector<std::int32_t>> sequences;
    std::vector<std::string> ids;
    std::vector<int> dynasty;
    std::vector<int> period;

    std::size_t size() const noexcept { return sequences.size(); }
};

inline EncodedCorpus encode_corpus(const Corpus& corpus, const Vocabulary& vocab, std::size_t max_seq_len,
                                   bool chunk = true) {
    if (max_seq_len < 3) {
        throw UsageError("max_seq_len must leave room for content");
    }
    const auto width = max_seq_len - 2;
    EncodedCorpus out;
    for (const auto& ins : corpus.inscriptions) {
        std::vector<std::int32_t> ids;
        ids.reserve(ins.tokens.size());
        for (const auto& t : ins.tokens) {
            ids.push_back(vocab.at(t));
        }
        std::size_t piece = 0;
        for (std::size_t start = 0; start < ids.size(); start += width, ++piece) {
            const auto end = std::min(ids.size(), start + width);
            out.sequences.emplace_back(ids.begin() + static_cast<std::ptrdiff_t>(start),
                                       ids.begin() + static_cast<std::ptrdiff_t>(end));
            out.ids.push_back(piece == 0 ? ins.id : ins.id + "#" + std::to_string(piece));
            out.dynasty.push_back(ins.dynasty ? static_cast<int>(*ins.dynasty) : -1);
            out.period.push_back(ins.period ? static_cast<int>(*ins.period) : -1);
            if (!chunk) {
                break;
            }
        }
    }
    return out;
}

inline std::vector<std::int32_t> with_boundaries(std::span<const std::int32_t> content) {
    std::vector<std::int32_t> s;
    s.reserve(content.size() + 2);
    s.push_back(Vocabulary::kBos);
    s.insert(s.end(), content.begin(), content.end());
    s.push_back(Vocabulary::kEos);
    return s;
}

/// Per-epoch permutation of [0, n) from (seed, tag, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t tag, std::size_t epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(seed, {tag, epoch}));
    rng.shuffle(order.begin(), order.end());
    return order;
}

/// Masked batch over the selected sequences; sequences with nothing
/// maskable are left out.
inline Batch masked_batch(const EncodedCorpus& corpus, std::span<const std::size_t> rows, const Vocabulary& vocab,
                          const MaskConfig& mask, const GlyphNet& net, std::uint64_t seed) {
    std::vector<std::vector<std::int32_t>> seqs;
    std::vector<MaskPlan> plans;
    for (auto r : rows) {
        const auto& content = corpus.sequences[r];
        auto plan = try_sample_mask_plan(content, vocab, mask, net, derive_seed(seed, {r}));
        if (!plan) {
            continue;
        }
        auto s = with_boundaries(content);
        for (auto p : plan->positions) {
            s[p + 1] = Vocabulary::kMask;
        }
        seqs.push_back(std::move(s));
        plans.push_back(std::move(*plan));
    }
    auto batch = make_batch(seqs);
    for (std::size_t i = 0; i < plans.size(); ++i) {
        for (std::size_t k = 0; k < plans[i].positions.size(); ++k) {
            batch.masked.push_back({i, plans[i].positions[k] + 1});
            batch.gold.push_back(plans[i].gold[k]);
        }
    }
    return batch;
}

template <typename Real>
struct TrainResult {
    EncoderModel<Real> model;
    TrainLog log;
    CheckpointMeta meta;
};

namespace detail {

inline constexpr std::uint64_t kDaptTag = 0xDA97;
inline constexpr std::uint64_t kTaptTag = 0x7A97;
inline constexpr std::uint64_t kMixTag = 0x313C;
inline constexpr std::uint64_t kMixStepOffset = std::uint64_t{1} << 40;

template <typename Real>
struct StepOutcome {
    LossBreakdown loss;
    Gradients<Real> grads;
};

template <typename Real>
StepOutcome<Real> mlm_step(const EncoderModel<Real>& model, const Batch& batch, const GlyphNet& net, double alpha,
                           std::uint64_t step) {
    auto out = forward_mlm(model, batch, {true, step});
    Matrix<Real> g;
    auto lb = combined_objective(out.log_probs, batch.gold, net, alpha, &g);
    if (!std::isfinite(lb.combined)) {
        throw NumericError("non-finite loss at step " + std::to_string(step));
    }
    return {lb, backward(model, out.tape, g)};
}

inline void check_vocab(const Vocabulary& vocab, const GlyphNet& net) {
    if (net.assignment().size() != vocab.size()) {
        throw DataError("glyph net was built over a different vocabulary");
    }
}

} // namespace detail

/// Execute an adaptation schedule from a fresh initialisation.
template <typename Real>
TrainResult<Real> run(const RunConfig& config, const Corpus* dapt, const Corpus& tapt, const Vocabulary& vocab,
                      const GlyphNet& net) {
    config.validate();
    detail::check_vocab(vocab, net);
    if (uses_dapt(config.schedule) && (dapt == nullptr || dapt->inscriptions.empty())) {
        throw UsageError("schedule " + std::string(to_string(config.schedule)) + " requires a DAPT corpus");
    }
    if (uses_tapt(config.schedule) && tapt.inscriptions.empty()) {
        throw UsageError("schedule " + std::string(to_string(config.schedule)) + " requires a TAPT corpus");
    }
    auto enc = config.encoder;
    enc.seed = config.seed;
    TrainResult<Real> result{EncoderModel<Real>(enc, vocab.size()), {}, {}};
    result.meta.schedule = std::string(to_string(config.schedule));
    result.meta.run_config = to_json(config);

    auto mask = config.mask;
    mask.mode = config.use_bias_sampling ? MaskMode::GlyphBiased : MaskMode::Uniform;

    EncodedCorpus dapt_enc, tapt_enc;
    std::set<std::int32_t> seen;
    auto collect = [&seen](const EncodedCorpus& c) {
        for (const auto& s : c.sequences) {
            seen.insert(s.begin(), s.end());
        }
    };
    if (uses_dapt(config.schedule)) {
        dapt_enc = encode_corpus(*dapt, vocab, enc.max_seq_len);
        collect(dapt_enc);
    }
    if (uses_tapt(config.schedule)) {
        tapt_enc = encode_corpus(tapt, vocab, enc.max_seq_len);
        collect(tapt_enc);
    }
    result.meta.seen_tokens.assign(seen.begin(), seen.end());

    AdamW<Real> opt;
    std::size_t global_step = 0;
    const auto t0 = std::chrono::steady_clock::now();
    auto& model = result.model;

    auto batches_per_epoch = [&](const EncodedCorpus& c) { return (c.size() + config.batch_size - 1) / config.batch_size; };

    auto train_stage = [&](const std::string& name, const EncodedCorpus& data, std::uint64_t tag, std::size_t epochs,
                           std::size_t frozen, const EncodedCorpus* mix) {
        model.freeze_layers(frozen);
        auto schedule = config.alpha;
        if (schedule.warm_steps == 0) {
            schedule.warm_steps = static_cast<std::size_t>(
                std::llround(config.alpha_warm_fraction * static_cast<double>(epochs * batches_per_epoch(data))));
        }
        std::size_t stage_steps = 0;
        std::size_t mix_epoch = 0;
        std::vector<std::size_t> mix_order;
        std::size_t mix_cursor = 0;
        for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
            const auto order = epoch_order(data.size(), config.seed, tag, epoch);
            for (std::size_t b = 0; b < order.size(); b += config.batch_size) {
                const auto end = std::min(order.size(), b + config.batch_size);
                std::span<const std::size_t> rows(order.data() + b, end - b);
                const auto batch =
                    masked_batch(data, rows, vocab, mask, net, derive_seed(config.seed, {tag, epoch, b}));
                if (batch.masked.empty()) {
                    continue;
                }
                const double alpha = config.use_gn_loss ? alpha_at(schedule, stage_steps) : 0.0;
                auto outcome = detail::mlm_step(model, batch, net, alpha, global_step);
                if (mix != nullptr && config.lambda_dapt > 0.0) {
                    std::vector<std::size_t> mix_rows;
                    while (mix_rows.size() < config.batch_size) {
                        if (mix_cursor == mix_order.size()) {
                            mix_order = epoch_order(mix->size(), config.seed, detail::kMixTag, mix_epoch++);
                            mix_cursor = 0;
                        }
                        mix_rows.push_back(mix_order[mix_cursor++]);
                        if (mix_rows.size() == mix->size()) {
                            break;
                        }
                    }
                    const auto mb = masked_batch(*mix, mix_rows, vocab, mask, net,
                                                 derive_seed(config.seed, {detail::kMixTag, global_step}));
                    if (!mb.masked.empty()) {
                        auto other = detail::mlm_step(model, mb, net, alpha, global_step + detail::kMixStepOffset);
                        const double lam = config.lambda_dapt;
                        for (auto& slot : outcome.grads.slots) {
                            for (auto& v : slot) {
                                v = static_cast<Real>((1.0 - lam) * static_cast<double>(v));
                            }
                        }
                        outcome.grads.add(other.grads, static_cast<Real>(lam));
                        outcome.loss.mlm = (1.0 - lam) * outcome.loss.mlm + lam * other.loss.mlm;
                        outcome.loss.gn = (1.0 - lam) * outcome.loss.gn + lam * other.loss.gn;
                        outcome.loss.combined = (1.0 - lam) * outcome.loss.combined + lam * other.loss.combined;
                    }
                }
                opt.step(model, outcome.grads, config.lr, config.weight_decay);
                const auto now = std::chrono::steady_clock::now();
                result.log.records.push_back(
                    {global_step, name, epoch, outcome.loss,
                     std::chrono::duration<double, std::milli>(now - t0).count()});
                ++global_step;
                ++stage_steps;
            }
        }
        result.meta.stages.push_back({name, epochs, stage_steps});
        model.freeze_layers(0);
    };

    if (uses_dapt(config.schedule)) {
        train_stage("dapt", dapt_enc, detail::kDaptTag, config.dapt_epochs, config.frozen_for_dapt(), nullptr);
    }
    if (uses_tapt(config.schedule)) {
        const EncodedCorpus* mix = config.schedule == Schedule::TAPTFromDAPT ? &dapt_enc : nullptr;
        train_stage("tapt", tapt_enc, detail::kTaptTag, config.tapt_epochs, 0, mix);
    }
    return result;
}

/// Classification batch: boundary-wrapped sequences (truncated to fit) with labels.
inline Batch label_batch(const EncodedCorpus& corpus, std::span<const std::size_t> rows, std::size_t max_seq_len) {
    std::vector<std::vector<std::int32_t>> seqs;
    for (auto r : rows) {
        const auto& c = corpus.sequences[r];
        const auto n = std::min(c.size(), max_seq_len - 2);
        seqs.push_back(with_boundaries(std::span<const std::int32_t>(c.data(), n)));
    }
    return make_batch(seqs);
}

inline std::string_view head_name(Head h) { return h == Head::Dynasty ? "dynasty" : "period"; }

/// Train classification heads on the labelled part of `corpus`. With several
/// heads each step sums their losses over the rows labelled for each. The
/// encoder is trained too unless `config.heads_only` is set.
template <typename Real>
void fine_tune_dating(EncoderModel<Real>& model, const EncodedCorpus& corpus, std::span<const Head> heads,
                      const FinetuneConfig& config, std::uint64_t seed, TrainLog* log = nullptr) {
    if (config.batch_size == 0) {
        throw UsageError("batch size must be positive");
    }
    if (heads.empty()) {
        throw UsageError("no heads to fine-tune");
    }
    auto labels_of = [&](Head h) -> const std::vector<int>& { return h == Head::Dynasty ? corpus.dynasty : corpus.period; };
    std::string stage = "finetune";
    std::uint64_t tag = 0xF1C;
    for (auto h : heads) {
        stage += "-" + std::string(head_name(h));
        tag = tag * 31 + (h == Head::Dynasty ? 0xD : 0xE);
        if (std::none_of(labels_of(h).begin(), labels_of(h).end(), [](int v) { return v >= 0; })) {
            throw DataError("corpus has no " + std::string(head_name(h)) + " labels");
        }
    }
    std::vector<std::size_t> labeled;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        if (std::any_of(heads.begin(), heads.end(), [&](Head h) { return labels_of(h)[i] >= 0; })) {
            labeled.push_back(i);
        }
    }
    model.freeze_layers(config.heads_only ? model.config().layers : 0);
    AdamW<Real> opt;
    const std::uint64_t step_base = tag << 32;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        const auto perm = epoch_order(labeled.size(), seed, tag, epoch);
        for (std::size_t b = 0; b < perm.size(); b += config.batch_size) {
            auto grads = model.zero_gradients();
            double loss = 0.0;
            std::size_t examples = 0;
            for (std::size_t hi = 0; hi < heads.size(); ++hi) {
                const auto& labels = labels_of(heads[hi]);
                std::vector<std::size_t> rows;
                std::vector<std::int32_t> gold;
                for (std::size_t k = b; k < std::min(perm.size(), b + config.batch_size); ++k) {
                    const auto r = labeled[perm[k]];
                    if (labels[r] >= 0) {
                        rows.push_back(r);
                        gold.push_back(labels[r]);
                    }
                }
                if (rows.empty()) {
                    continue;
                }
                const auto batch = label_batch(corpus, rows, model.config().max_seq_len);
                auto out = forward_classify(model, batch, heads[hi], {true, step_base + step * heads.size() + hi});
                Matrix<Real> g;
                loss += classification_objective(out.log_probs, gold, &g);
                grads.add(backward(model, out.tape, g));
                examples += rows.size();
            }
            if (!std::isfinite(loss)) {
                throw NumericError("non-finite loss while fine-tuning");
            }
            opt.step(model, grads, config.lr, config.weight_decay);
            if (log) {
                LossBreakdown lb;
                lb.combined = loss;
                lb.masked = examples;
                log->records.push_back({step, stage, epoch, lb, 0.0});
            }
            ++step;
        }
    }
    model.freeze_layers(0);
}

template <typename Real>
void fine_tune_dating(EncoderModel<Real>& model, const EncodedCorpus& corpus, Head head, const FinetuneConfig& config,
                      std::uint64_t seed, TrainLog* log = nullptr) {
    const Head one[] = {head};
    fine_tune_dating(model, corpus, std::span<const Head>(one), config, seed, log);
}

/// Label distributions for each sequence (eval mode).
template <typename Real>
Matrix<double> predict_labels(const EncoderModel<Real>& model, const EncodedCorpus& corpus, Head head,
                              std::size_t batch_size = 64) {
    Matrix<double> out(corpus.size(), label_count(head));
    std::vector<std::size_t> rows;
    for (std::size_t b = 0; b < corpus.size(); b += batch_size) {
        rows.clear();
        for (std::size_t r = b; r < std::min(corpus.size(), b + batch_size); ++r) {
            rows.push_back(r);
        }
        auto res = forward_classify(model, label_batch(corpus, rows, model.config().max_seq_len), head);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            for (std::size_t c = 0; c < out.cols; ++c) {
                out(rows[i], c) = std::exp(static_cast<double>(res.log_probs(i, c)));
            }
        }
    }
    return out;
}

} // namespace allomlm

#endif
