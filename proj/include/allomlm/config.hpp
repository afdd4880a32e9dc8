#ifndef ALLOMLM_CONFIG_HPP
#define ALLOMLM_CONFIG_HPP

#include <algorithm>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <string_view>

#include "json.hpp"

#include "allomlm/encoder.hpp"
#include "allomlm/error.hpp"
#include "allomlm/masking.hpp"
#include "allomlm/objectives.hpp"

namespace allomlm {

enum class Schedule : std::uint8_t { Baseline, DAPTOnly, TAPTOnly, TAPTFromDAPT };

inline std::string_view to_string(Schedule s) {
    switch (s) {
    case Schedule::Baseline:
        return "Baseline";
    case Schedule::DAPTOnly:
        return "DAPTOnly";
    case Schedule::TAPTOnly:
        return "TAPTOnly";
    case Schedule::TAPTFromDAPT:
        return "TAPTFromDAPT";
    }
    return {};
}

inline bool uses_dapt(Schedule s) { return s == Schedule::DAPTOnly || s == Schedule::TAPTFromDAPT; }
inline bool uses_tapt(Schedule s) { return s == Schedule::TAPTOnly || s == Schedule::TAPTFromDAPT; }

struct FinetuneConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 16;
    double lr = 3e-3;
    double weight_decay = 0.01;
    /// Train only the classification heads (encoder frozen).
    bool heads_only = false;
};

struct RunConfig {
    Schedule schedule = Schedule::TAPTOnly;
    bool use_gn_loss = false;
    bool use_bias_sampling = false;
    MaskConfig mask;
    EncoderConfig encoder;
    AlphaSchedule alpha;
    /// Warm-up length as a fraction of the TAPT steps when `alpha.warm_steps` is 0.
    double alpha_warm_fraction = 0.2;
    std::size_t dapt_epochs = 10;
    std::size_t tapt_epochs = 40;
    std::size_t batch_size = 32;
    double lr = 1e-3;
    double weight_decay = 0.01;
    std::optional<std::size_t> dapt_frozen_layers;  // default layers / 2
    double lambda_dapt = 0.0;
    std::uint64_t seed = 42;
    FinetuneConfig finetune;

    std::size_t frozen_for_dapt() const { return dapt_frozen_layers.value_or(encoder.layers / 2); }

    void validate() const {
        mask.validate();
        encoder.validate();
        if (batch_size == 0 || finetune.batch_size == 0) {
            throw UsageError("batch size must be positive");
        }
        if (!(lambda_dapt >= 0.0 && lambda_dapt <= 1.0)) {
            throw UsageError("lambda_dapt must be in [0, 1]");
        }
        if (!(lr >= 0.0) || !(weight_decay >= 0.0) || !(finetune.lr >= 0.0) || !(finetune.weight_decay >= 0.0)) {
            throw UsageError("learning rate and weight decay must be non-negative");
        }
        if (!(alpha_warm_fraction >= 0.0 && alpha_warm_fraction <= 1.0)) {
            throw UsageError("alpha_warm_fraction must be in [0, 1]");
        }
        if (frozen_for_dapt() > encoder.layers) {
            throw UsageError("dapt_frozen_layers exceeds the layer count");
        }
    }
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<std::string_view> known, std::string_view what) {
    if (!j.is_object()) {
        throw UsageError(std::string(what) + " must be an object");
    }
    for (const auto& [key, _] : j.items()) {
        if (std::find(known.begin(), known.end(), key) == known.end()) {
            throw UsageError("unknown " + std::string(what) + " field: " + key);
        }
    }
}

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) {
        try {
            out = j.at(key).get<T>();
        } catch (const nlohmann::json::exception&) {
            throw UsageError(std::string("bad value for ") + key);
        }
    }
}

template <typename E, std::size_t N>
E parse_enum(const nlohmann::json& j, const std::array<std::string_view, N>& names, std::string_view what) {
    if (!j.is_string()) {
        throw UsageError(std::string(what) + " must be a string");
    }
    const auto s = j.get<std::string>();
    for (std::size_t i = 0; i < N; ++i) {
        if (names[i] == s) {
            return static_cast<E>(i);
        }
    }
    throw UsageError("unknown " + std::string(what) + ": " + s);
}

inline constexpr std::array<std::string_view, 4> kScheduleNames = {"Baseline", "DAPTOnly", "TAPTOnly", "TAPTFromDAPT"};
inline constexpr std::array<std::string_view, 2> kMaskModeNames = {"Uniform", "GlyphBiased"};
inline constexpr std::array<std::string_view, 2> kAlphaShapeNames = {"Constant", "LinearWarm"};
inline constexpr std::array<std::string_view, 2> kPoolingNames = {"First", "Mean"};

} // namespace detail

inline nlohmann::json to_json(const EncoderConfig& c) {
    return {{"layers", c.layers},
            {"heads", c.heads},
            {"dim", c.dim},
            {"ff_dim", c.ff_dim},
            {"max_seq_len", c.max_seq_len},
            {"attention_dropout", c.attention_dropout},
            {"hidden_dropout", c.hidden_dropout},
            {"init_std", c.init_std},
            {"pooling", detail::kPoolingNames[static_cast<std::size_t>(c.pooling)]},
            {"seed", c.seed}};
}

inline EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
    detail::reject_unknown(j,
                           {"layers", "heads", "dim", "ff_dim", "max_seq_len", "attention_dropout", "hidden_dropout",
                            "init_std", "pooling", "seed"},
                           "encoder");
    EncoderConfig c;
    detail::read_opt(j, "layers", c.layers);
    detail::read_opt(j, "heads", c.heads);
    detail::read_opt(j, "dim", c.dim);
    detail::read_opt(j, "ff_dim", c.ff_dim);
    detail::read_opt(j, "max_seq_len", c.max_seq_len);
    detail::read_opt(j, "attention_dropout", c.attention_dropout);
    detail::read_opt(j, "hidden_dropout", c.hidden_dropout);
    detail::read_opt(j, "init_std", c.init_std);
    detail::read_opt(j, "seed", c.seed);
    if (j.contains("pooling")) {
        c.pooling = detail::parse_enum<Pooling>(j["pooling"], detail::kPoolingNames, "pooling");
    }
    c.validate();
    return c;
}

inline nlohmann::json to_json(const MaskConfig& c) {
    return {{"stride", c.stride},
            {"mlm_prob", c.mlm_prob},
            {"bias", c.bias},
            {"mode", detail::kMaskModeNames[static_cast<std::size_t>(c.mode)]},
            {"random_offset", c.random_offset}};
}

inline MaskConfig mask_config_from_json(const nlohmann::json& j) {
    detail::reject_unknown(j, {"stride", "mlm_prob", "bias", "mode", "random_offset"}, "mask");
    MaskConfig c;
    detail::read_opt(j, "stride", c.stride);
    detail::read_opt(j, "mlm_prob", c.mlm_prob);
    detail::read_opt(j, "bias", c.bias);
    detail::read_opt(j, "random_offset", c.random_offset);
    if (j.contains("mode")) {
        c.mode = detail::parse_enum<MaskMode>(j["mode"], detail::kMaskModeNames, "mask mode");
    }
    c.validate();
    return c;
}

inline nlohmann::json to_json(const AlphaSchedule& s) {
    return {{"shape", detail::kAlphaShapeNames[static_cast<std::size_t>(s.shape)]},
            {"start", s.start},
            {"end", s.end},
            {"warm_steps", s.warm_steps}};
}

inline AlphaSchedule alpha_schedule_from_json(const nlohmann::json& j) {
    detail::reject_unknown(j, {"shape", "start", "end", "warm_steps"}, "alpha");
    AlphaSchedule s;
    detail::read_opt(j, "start", s.start);
    detail::read_opt(j, "end", s.end);
    detail::read_opt(j, "warm_steps", s.warm_steps);
    if (j.contains("shape")) {
        s.shape = detail::parse_enum<AlphaShape>(j["shape"], detail::kAlphaShapeNames, "alpha shape");
    }
    return s;
}

inline nlohmann::json to_json(const FinetuneConfig& c) {
    return {{"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"lr", c.lr},
            {"weight_decay", c.weight_decay},
            {"heads_only", c.heads_only}};
}

inline FinetuneConfig finetune_config_from_json(const nlohmann::json& j) {
    detail::reject_unknown(j, {"epochs", "batch_size", "lr", "weight_decay", "heads_only"}, "finetune");
    FinetuneConfig c;
    detail::read_opt(j, "epochs", c.epochs);
    detail::read_opt(j, "batch_size", c.batch_size);
    detail::read_opt(j, "lr", c.lr);
    detail::read_opt(j, "weight_decay", c.weight_decay);
    detail::read_opt(j, "heads_only", c.heads_only);
    return c;
}

inline nlohmann::json to_json(const RunConfig& c) {
    nlohmann::json j{{"schedule", to_string(c.schedule)},
                     {"use_gn_loss", c.use_gn_loss},
                     {"use_bias_sampling", c.use_bias_sampling},
                     {"mask", to_json(c.mask)},
                     {"encoder", to_json(c.encoder)},
                     {"alpha", to_json(c.alpha)},
                     {"alpha_warm_fraction", c.alpha_warm_fraction},
                     {"dapt_epochs", c.dapt_epochs},
                     {"tapt_epochs", c.tapt_epochs},
                     {"batch_size", c.batch_size},
                     {"lr", c.lr},
                     {"weight_decay", c.weight_decay},
                     {"lambda_dapt", c.lambda_dapt},
                     {"seed", c.seed},
                     {"finetune", to_json(c.finetune)}};
    j["dapt_frozen_layers"] = c.dapt_frozen_layers ? nlohmann::json(*c.dapt_frozen_layers) : nlohmann::json(nullptr);
    return j;
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
    detail::reject_unknown(j,
                           {"schedule", "use_gn_loss", "use_bias_sampling", "mask", "encoder", "alpha",
                            "alpha_warm_fraction", "dapt_epochs", "tapt_epochs", "batch_size", "lr", "weight_decay",
                            "dapt_frozen_layers", "lambda_dapt", "seed", "finetune"},
                           "run config");
    RunConfig c;
    if (j.contains("schedule")) {
        c.schedule = detail::parse_enum<Schedule>(j["schedule"], detail::kScheduleNames, "schedule");
    }
    detail::read_opt(j, "use_gn_loss", c.use_gn_loss);
    detail::read_opt(j, "use_bias_sampling", c.use_bias_sampling);
    if (j.contains("mask")) {
        c.mask = mask_config_from_json(j["mask"]);
    }
    if (j.contains("encoder")) {
        c.encoder = encoder_config_from_json(j["encoder"]);
    }
    if (j.contains("alpha")) {
        c.alpha = alpha_schedule_from_json(j["alpha"]);
    }
    if (j.contains("finetune")) {
        c.finetune = finetune_config_from_json(j["finetune"]);
    }
    detail::read_opt(j, "alpha_warm_fraction", c.alpha_warm_fraction);
    detail::read_opt(j, "dapt_epochs", c.dapt_epochs);
    detail::read_opt(j, "tapt_epochs", c.tapt_epochs);
    detail::read_opt(j, "batch_size", c.batch_size);
    detail::read_opt(j, "lr", c.lr);
    detail::read_opt(j, "weight_decay", c.weight_decay);
    detail::read_opt(j, "lambda_dapt", c.lambda_dapt);
    detail::read_opt(j, "seed", c.seed);
    if (j.contains("dapt_frozen_layers") && !j["dapt_frozen_layers"].is_null()) {
        std::size_t k = 0;
        detail::read_opt(j, "dapt_frozen_layers", k);
        c.dapt_frozen_layers = k;
    }
    c.validate();
    return c;
}

inline RunConfig parse_run_config(std::string_view text) {
    try {
        return run_config_from_json(nlohmann::json::parse(text));
    } catch (const nlohmann::json::parse_error& e) {
        throw UsageError(std::string("run config is not valid JSON: ") + e.what());
    }
}

} // namespace allomlm

#endif
