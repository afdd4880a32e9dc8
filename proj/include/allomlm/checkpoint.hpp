#ifndef ALLOMLM_CHECKPOINT_HPP
#define ALLOMLM_CHECKPOINT_HPP

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "allomlm/config.hpp"
#include "allomlm/corpus.hpp"
#include "allomlm/encoder.hpp"
#include "allomlm/error.hpp"
#include "allomlm/io.hpp"

namespace allomlm {

inline constexpr std::string_view kCheckpointMagic = "ALLOMLM1";
inline constexpr int kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

struct StageRecord {
    std::string name;
    std::size_t epochs = 0;
    std::size_t steps = 0;

    bool operator==(const StageRecord&) const = default;
};

struct CheckpointMeta {
    std::string schedule = "Baseline";
    std::vector<StageRecord> stages;
    nlohmann::json run_config = nlohmann::json::object();
    /// Vocabulary indices that occurred in any training corpus.
    std::vector<std::int32_t> seen_tokens;
    std::vector<std::string> heads_trained;
};

template <typename Real>
struct Checkpoint {
    EncoderModel<Real> model;
    Vocabulary vocab;
    CheckpointMeta meta;
};

inline std::string hex64(std::uint64_t v) {
    static constexpr char kDigits[] = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = kDigits[v & 0xf];
        v >>= 4;
    }
    return s;
}

namespace detail {

template <typename Real>
constexpr const char* dtype_name() {
    return sizeof(Real) == 4 ? "f32" : "f64";
}

template <typename Stored, typename Real>
void read_tensor(std::string_view data, std::size_t offset, std::vector<Real>& out) {
    for (std::size_t i = 0; i < out.size(); ++i) {
        Stored v;
        std::memcpy(&v, data.data() + offset + i * sizeof(Stored), sizeof(Stored));
        out[i] = static_cast<Real>(v);
    }
}

} // namespace detail

template <typename Real>
std::string serialize_checkpoint(const EncoderModel<Real>& model, const Vocabulary& vocab, const CheckpointMeta& meta) {
    if (vocab.size() != model.vocab_size()) {
        throw UsageError("vocabulary size does not match the model");
    }
    nlohmann::json header;
    header["format_version"] = kCheckpointVersion;
    header["dtype"] = detail::dtype_name<Real>();
    header["config"] = to_json(model.config());
    header["frozen_layers"] = model.frozen_layers();
    header["vocab_size"] = vocab.size();
    header["vocab_hash"] = hex64(vocab.hash());
    header["vocab"] = vocab.to_json();
    nlohmann::json stages = nlohmann::json::array();
    for (const auto& s : meta.stages) {
        stages.push_back({{"name", s.name}, {"epochs", s.epochs}, {"steps", s.steps}});
    }
    header["meta"] = {{"schedule", meta.schedule},
                      {"stages", stages},
                      {"run_config", meta.run_config},
                      {"seen_tokens", meta.seen_tokens},
                      {"heads_trained", meta.heads_trained}};
    nlohmann::json tensors = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto& p : model.params()) {
        tensors.push_back({{"name", p.name}, {"rows", p.rows}, {"cols", p.cols}, {"offset", offset}});
        offset += p.value.size() * sizeof(Real);
    }
    header["tensors"] = tensors;
    header["data_bytes"] = offset;

    const auto head = header.dump();
    std::string out;
    out.reserve(kCheckpointMagic.size() + 4 + head.size() + offset);
    out += kCheckpointMagic;
    const auto len = static_cast<std::uint32_t>(head.size());
    char lenbuf[4];
    std::memcpy(lenbuf, &len, 4);
    out.append(lenbuf, 4);
    out += head;
    for (const auto& p : model.params()) {
        out.append(reinterpret_cast<const char*>(p.value.data()), p.value.size() * sizeof(Real));
    }
    return out;
}

template <typename Real>
Checkpoint<Real> deserialize_checkpoint(std::string_view bytes) {
    if (bytes.size() < kCheckpointMagic.size() + 4 || bytes.substr(0, kCheckpointMagic.size()) != kCheckpointMagic) {
        throw DataError("not a checkpoint file");
    }
    std::uint32_t len = 0;
    std::memcpy(&len, bytes.data() + kCheckpointMagic.size(), 4);
    const auto body = kCheckpointMagic.size() + 4;
    if (bytes.size() < body + len) {
        throw DataError("truncated checkpoint header");
    }
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(body, len));
    } catch (const nlohmann::json::parse_error&) {
        throw DataError("corrupt checkpoint header");
    }
    try {
        if (header.at("format_version").get<int>() != kCheckpointVersion) {
            throw DataError("unsupported checkpoint version");
        }
        const auto dtype = header.at("dtype").get<std::string>();
        if (dtype != "f32" && dtype != "f64") {
            throw DataError("unknown checkpoint dtype " + dtype);
        }
        const std::size_t width = dtype == "f32" ? 4 : 8;
        auto vocab = Vocabulary::from_json(header.at("vocab"));
        if (hex64(vocab.hash()) != header.at("vocab_hash").get<std::string>()) {
            throw DataError("checkpoint vocabulary hash mismatch");
        }
        auto config = encoder_config_from_json(header.at("config"));
        Checkpoint<Real> ck{EncoderModel<Real>(config, vocab.size()), std::move(vocab), {}};
        const auto data = bytes.substr(body + len);
        if (data.size() != header.at("data_bytes").get<std::size_t>()) {
            throw DataError("checkpoint data size mismatch");
        }
        const auto& tensors = header.at("tensors");
        auto& params = ck.model.params();
        if (tensors.size() != params.size()) {
            throw DataError("checkpoint tensor count mismatch");
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            const auto& t = tensors[i];
            if (t.at("name").get<std::string>() != params[i].name || t.at("rows").get<std::size_t>() != params[i].rows ||
                t.at("cols").get<std::size_t>() != params[i].cols) {
                throw DataError("checkpoint tensor layout mismatch at " + params[i].name);
            }
            const auto offset = t.at("offset").get<std::size_t>();
            if (offset + params[i].value.size() * width > data.size()) {
                throw DataError("checkpoint tensor out of bounds: " + params[i].name);
            }
            if (width == 4) {
                detail::read_tensor<float>(data, offset, params[i].value);
            } else {
                detail::read_tensor<double>(data, offset, params[i].value);
            }
        }
        ck.model.freeze_layers(header.at("frozen_layers").get<std::size_t>());
        const auto& m = header.at("meta");
        ck.meta.schedule = m.at("schedule").get<std::string>();
        for (const auto& s : m.at("stages")) {
            ck.meta.stages.push_back(
                {s.at("name").get<std::string>(), s.at("epochs").get<std::size_t>(), s.at("steps").get<std::size_t>()});
        }
        ck.meta.run_config = m.at("run_config");
        ck.meta.seen_tokens = m.at("seen_tokens").get<std::vector<std::int32_t>>();
        ck.meta.heads_trained = m.at("heads_trained").get<std::vector<std::string>>();
        return ck;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed checkpoint header: ") + e.what());
    } catch (const UsageError& e) {
        throw DataError(std::string("malformed checkpoint header: ") + e.what());
    }
}

template <typename Real>
void save_checkpoint(const std::filesystem::path& path, const EncoderModel<Real>& model, const Vocabulary& vocab,
                     const CheckpointMeta& meta) {
    io::atomic_write(path, serialize_checkpoint(model, vocab, meta));
}

template <typename Real>
Checkpoint<Real> load_checkpoint(const std::filesystem::path& path) {
    return deserialize_checkpoint<Real>(io::read_file(path));
}

} // namespace allomlm

#endif
