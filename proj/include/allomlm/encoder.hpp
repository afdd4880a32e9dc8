#ifndef ALLOMLM_ENCODER_HPP
#define ALLOMLM_ENCODER_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "allomlm/corpus.hpp"
#include "allomlm/error.hpp"
#include "allomlm/rng.hpp"
#include "allomlm/tensor.hpp"

namespace allomlm {

enum class Pooling : std::uint8_t { First, Mean };

struct EncoderConfig {
    std::size_t layers = 4;
    std::size_t heads = 4;
    std::size_t dim = 128;
    std::size_t ff_dim = 512;
    std::size_t max_seq_len = 128;
    double attention_dropout = 0.1;
    double hidden_dropout = 0.1;
    double init_std = 0.02;
    Pooling pooling = Pooling::First;
    std::uint64_t seed = 42;

    void validate() const {
        if (layers == 0 || heads == 0 || dim == 0 || ff_dim == 0 || max_seq_len < 3) {
            throw UsageError("encoder dimensions must be positive (max_seq_len >= 3)");
        }
        if (dim % heads != 0) {
            throw UsageError("model dim must be divisible by the number of heads");
        }
        if (!(attention_dropout >= 0.0 && attention_dropout < 1.0) ||
            !(hidden_dropout >= 0.0 && hidden_dropout < 1.0)) {
            throw UsageError("dropout must be in [0, 1)");
        }
        if (!(init_std > 0.0)) {
            throw UsageError("init_std must be positive");
        }
    }
};

enum class Head : std::uint8_t { Dynasty, Period };

inline constexpr std::size_t label_count(Head h) { return h == Head::Dynasty ? kDynastyCount : kPeriodCount; }

/// Parameter tensor with its optimisation group: 0 = embeddings,
/// 1..layers = transformer blocks, layers + 1 = output heads.
template <typename Real>
struct Parameter {
    std::string name;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t group = 0;
    std::vector<Real> value;
};

/// Gradient slots mirroring a model's parameter list.
template <typename Real>
struct Gradients {
    std::vector<std::vector<Real>> slots;

    void add(const Gradients& o, Real scale = Real(1)) {
        for (std::size_t i = 0; i < slots.size(); ++i) {
            for (std::size_t j = 0; j < slots[i].size(); ++j) {
                slots[i][j] += scale * o.slots[i][j];
            }
        }
    }
};

/// Pre-norm transformer encoder with a tied-embedding MLM head and two
/// linear classification heads (dynasty, period).
template <typename Real>
class EncoderModel {
public:
    // per-block parameter offsets
    enum BlockParam : std::size_t {
        Ln1Gain, Ln1Bias, Wq, Bq, Wk, Bk, Wv, Bv, Wo, Bo, Ln2Gain, Ln2Bias, W1, B1, W2, B2, kPerBlock
    };
    enum TopParam : std::size_t { LnfGain, LnfBias, MlmBias, DynW, DynB, PerW, PerB, kTop };
    static constexpr std::size_t kTokEmb = 0;
    static constexpr std::size_t kPosEmb = 1;

    EncoderModel() = default;

    /// Deterministic initialisation: weights ~ N(0, init_std^2), biases 0,
    /// norm gains 1.
    EncoderModel(const EncoderConfig& config, std::size_t vocab_size) : config_(config), vocab_size_(vocab_size) {
        config.validate();
        if (vocab_size < 1) {
            throw UsageError("vocabulary must be non-empty");
        }
        const auto d = config.dim;
        const auto f = config.ff_dim;
        add("tok_emb", vocab_size, d, 0, Init::Normal);
        add("pos_emb", config.max_seq_len, d, 0, Init::Normal);
        for (std::size_t l = 0; l < config.layers; ++l) {
            const auto g = l + 1;
            const auto p = "block" + std::to_string(l) + ".";
            add(p + "ln1.gain", 1, d, g, Init::One);
            add(p + "ln1.bias", 1, d, g, Init::Zero);
            add(p + "attn.wq", d, d, g, Init::Normal);
            add(p + "attn.bq", 1, d, g, Init::Zero);
            add(p + "attn.wk", d, d, g, Init::Normal);
            add(p + "attn.bk", 1, d, g, Init::Zero);
            add(p + "attn.wv", d, d, g, Init::Normal);
            add(p + "attn.bv", 1, d, g, Init::Zero);
            add(p + "attn.wo", d, d, g, Init::Normal);
            add(p + "attn.bo", 1, d, g, Init::Zero);
            add(p + "ln2.gain", 1, d, g, Init::One);
            add(p + "ln2.bias", 1, d, g, Init::Zero);
            add(p + "ffn.w1", d, f, g, Init::Normal);
            add(p + "ffn.b1", 1, f, g, Init::Zero);
            add(p + "ffn.w2", f, d, g, Init::Normal);
            add(p + "ffn.b2", 1, d, g, Init::Zero);
        }
        const auto top = config.layers + 1;
        add("final_ln.gain", 1, d, top, Init::One);
        add("final_ln.bias", 1, d, top, Init::Zero);
        add("mlm.bias", 1, vocab_size, top, Init::Zero);
        add("dynasty.w", d, kDynastyCount, top, Init::Normal);
        add("dynasty.b", 1, kDynastyCount, top, Init::Zero);
        add("period.w", d, kPeriodCount, top, Init::Normal);
        add("period.b", 1, kPeriodCount, top, Init::Zero);

        Rng rng(derive_seed(config.seed, {0x1417}));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            switch (init_[i]) {
            case Init::Normal:
                for (auto& v : p.value) {
                    v = static_cast<Real>(config.init_std * rng.normal());
                }
                break;
            case Init::One:
                std::fill(p.value.begin(), p.value.end(), Real(1));
                break;
            case Init::Zero:
                break;
            }
        }
    }

    const EncoderConfig& config() const noexcept { return config_; }
    std::size_t vocab_size() const noexcept { return vocab_size_; }

    std::vector<Parameter<Real>>& params() noexcept { return params_; }
    const std::vector<Parameter<Real>>& params() const noexcept { return params_; }

    Parameter<Real>& block(std::size_t layer, BlockParam which) { return params_[2 + layer * kPerBlock + which]; }
    const Parameter<Real>& block(std::size_t layer, BlockParam which) const {
        return params_[2 + layer * kPerBlock + which];
    }
    std::size_t block_index(std::size_t layer, BlockParam which) const { return 2 + layer * kPerBlock + which; }
    std::size_t top_index(TopParam which) const { return 2 + config_.layers * kPerBlock + which; }
    const Parameter<Real>& top(TopParam which) const { return params_[top_index(which)]; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) {
            n += p.value.size();
        }
        return n;
    }

    /// Exclude the embeddings and the bottom k blocks from optimisation.
    void freeze_layers(std::size_t k) {
        if (k > config_.layers) {
            throw UsageError("cannot freeze more layers than the model has");
        }
        frozen_ = k;
    }
    std::size_t frozen_layers() const noexcept { return frozen_; }

    bool is_trainable(std::size_t param_index) const { return !(frozen_ > 0 && params_[param_index].group <= frozen_); }

    /// Lowest optimisation group that still receives gradients.
    std::size_t lowest_trainable_group() const noexcept { return frozen_ == 0 ? 0 : frozen_ + 1; }

    Gradients<Real> zero_gradients() const {
        Gradients<Real> g;
        g.slots.reserve(params_.size());
        for (const auto& p : params_) {
            g.slots.emplace_back(p.value.size(), Real(0));
        }
        return g;
    }

    Matrix<Real> token_embeddings() const {
        Matrix<Real> m(vocab_size_, config_.dim);
        m.data = params_[kTokEmb].value;
        return m;
    }

    /// Replace parameter values (checkpoint loading). Shapes must match.
    void set_values(std::size_t index, std::vector<Real> values) {
        if (values.size() != params_.at(index).value.size()) {
            throw DataError("parameter shape mismatch for " + params_[index].name);
        }
        params_[index].value = std::move(values);
    }

private:
    enum class Init { Normal, Zero, One };

    void add(std::string name, std::size_t rows, std::size_t cols, std::size_t group, Init init) {
        params_.push_back({std::move(name), rows, cols, group, std::vector<Real>(rows * cols, Real(0))});
        init_.push_back(init);
    }

    EncoderConfig config_;
    std::size_t vocab_size_ = 0;
    std::vector<Parameter<Real>> params_;
    std::vector<Init> init_;
    std::size_t frozen_ = 0;
};

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

struct MaskedSlot {
    std::size_t row = 0;
    std::size_t position = 0;  // encoded position (boundary at 0)
};

/// Padded token matrix plus per-row lengths (the attention mask is
/// `position < length`), masked slots with gold indices, optional labels.
struct Batch {
    Matrix<std::int32_t> tokens;
    std::vector<std::size_t> lengths;
    std::vector<MaskedSlot> masked;
    std::vector<std::int32_t> gold;
    std::vector<int> labels;  // -1 when absent

    std::size_t size() const noexcept { return lengths.size(); }
};

/// Pack encoded sequences (already containing [MASK] where needed).
inline Batch make_batch(std::span<const std::vector<std::int32_t>> sequences) {
    Batch b;
    std::size_t width = 0;
    for (const auto& s : sequences) {
        width = std::max(width, s.size());
    }
    b.tokens = Matrix<std::int32_t>(sequences.size(), width, Vocabulary::kPad);
    for (std::size_t r = 0; r < sequences.size(); ++r) {
        std::copy(sequences[r].begin(), sequences[r].end(), b.tokens.row(r).begin());
        b.lengths.push_back(sequences[r].size());
    }
    b.labels.assign(sequences.size(), -1);
    return b;
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

namespace detail {

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

template <typename Real>
struct NormCache {
    Matrix<Real> xhat;
    std::vector<Real> rstd;
};

template <typename Real>
struct BlockCache {
    NormCache<Real> ln1;
    Matrix<Real> a;  // ln1 output
    Matrix<Real> q, k, v;
    std::vector<Matrix<Real>> probs;  // per head, before dropout
    std::vector<Matrix<Real>> attn_mask;
    Matrix<Real> ctx;
    std::vector<Real> drop1;
    NormCache<Real> ln2;
    Matrix<Real> b;  // ln2 output
    Matrix<Real> u;  // pre-activation
    Matrix<Real> g;  // activation
    std::vector<Real> drop2;
};

template <typename Real>
struct RowCache {
    std::vector<std::int32_t> ids;
    std::vector<Real> drop0;
    std::vector<BlockCache<Real>> blocks;
    NormCache<Real> lnf;
    Matrix<Real> z;  // final representations
};

template <typename Real>
void layer_norm(const Matrix<Real>& x, std::span<const Real> gain, std::span<const Real> bias, Matrix<Real>& out,
                NormCache<Real>& cache) {
    const auto n = x.rows;
    const auto d = x.cols;
    out = Matrix<Real>(n, d);
    cache.xhat = Matrix<Real>(n, d);
    cache.rstd.assign(n, Real(0));
    for (std::size_t i = 0; i < n; ++i) {
        const auto row = x.row(i);
        Real mean = 0;
        for (auto v : row) {
            mean += v;
        }
        mean /= static_cast<Real>(d);
        Real var = 0;
        for (auto v : row) {
            var += (v - mean) * (v - mean);
        }
        var /= static_cast<Real>(d);
        const Real rstd = Real(1) / std::sqrt(var + static_cast<Real>(kLayerNormEps));
        cache.rstd[i] = rstd;
        for (std::size_t j = 0; j < d; ++j) {
            const Real xh = (row[j] - mean) * rstd;
            cache.xhat(i, j) = xh;
            out(i, j) = xh * gain[j] + bias[j];
        }
    }
}

/// dx += LN backward; accumulates gain/bias gradients when non-null.
template <typename Real>
void layer_norm_backward(const Matrix<Real>& dy, std::span<const Real> gain, const NormCache<Real>& cache,
                         Matrix<Real>& dx, Real* dgain, Real* dbias) {
    const auto n = dy.rows;
    const auto d = dy.cols;
    std::vector<Real> dxhat(d);
    for (std::size_t i = 0; i < n; ++i) {
        Real mean_dxhat = 0;
        Real mean_dxhat_xhat = 0;
        for (std::size_t j = 0; j < d; ++j) {
            const Real g = dy(i, j);
            if (dgain) {
                dgain[j] += g * cache.xhat(i, j);
                dbias[j] += g;
            }
            dxhat[j] = g * gain[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * cache.xhat(i, j);
        }
        mean_dxhat /= static_cast<Real>(d);
        mean_dxhat_xhat /= static_cast<Real>(d);
        for (std::size_t j = 0; j < d; ++j) {
            dx(i, j) += cache.rstd[i] * (dxhat[j] - mean_dxhat - cache.xhat(i, j) * mean_dxhat_xhat);
        }
    }
}

template <typename Real>
std::vector<Real> dropout_mask(std::size_t count, double p, std::uint64_t seed) {
    std::vector<Real> mask;
    if (p <= 0.0) {
        return mask;
    }
    Rng rng(seed);
    mask.resize(count);
    const Real keep = static_cast<Real>(1.0 / (1.0 - p));
    for (auto& m : mask) {
        m = rng.uniform() < p ? Real(0) : keep;
    }
    return mask;
}

template <typename Real>
void apply_mask(Matrix<Real>& x, const std::vector<Real>& mask) {
    if (mask.empty()) {
        return;
    }
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        x.data[i] *= mask[i];
    }
}

template <typename Real>
void add_bias(Matrix<Real>& x, std::span<const Real> bias) {
    for (std::size_t i = 0; i < x.rows; ++i) {
        for (std::size_t j = 0; j < x.cols; ++j) {
            x(i, j) += bias[j];
        }
    }
}

template <typename Real>
void bias_grad(const Matrix<Real>& dy, Real* db) {
    for (std::size_t i = 0; i < dy.rows; ++i) {
        for (std::size_t j = 0; j < dy.cols; ++j) {
            db[j] += dy(i, j);
        }
    }
}

template <typename Real>
Real gelu(Real u) {
    const Real c = static_cast<Real>(kGeluC);
    return Real(0.5) * u * (Real(1) + std::tanh(c * (u + Real(0.044715) * u * u * u)));
}

template <typename Real>
Real gelu_grad(Real u) {
    const Real c = static_cast<Real>(kGeluC);
    const Real t = std::tanh(c * (u + Real(0.044715) * u * u * u));
    return Real(0.5) * (Real(1) + t) + Real(0.5) * u * (Real(1) - t * t) * c * (Real(1) + Real(3 * 0.044715) * u * u);
}

struct DropoutSites {
    bool train = false;
    std::uint64_t seed = 0;
    std::uint64_t step = 0;
    std::size_t row = 0;

    std::uint64_t at(std::size_t layer, std::size_t site, std::size_t head = 0) const {
        return derive_seed(seed, {step, layer, row, site, head});
    }
};

template <typename Real>
RowCache<Real> encode_row(const EncoderModel<Real>& model, std::span<const std::int32_t> ids,
                          const DropoutSites& sites) {
    using M = EncoderModel<Real>;
    const auto& cfg = model.config();
    const auto n = ids.size();
    const auto d = cfg.dim;
    const auto f = cfg.ff_dim;
    const auto heads = cfg.heads;
    const auto dh = d / heads;
    const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));
    const double p_attn = sites.train ? cfg.attention_dropout : 0.0;
    const double p_hid = sites.train ? cfg.hidden_dropout : 0.0;

    RowCache<Real> rc;
    rc.ids.assign(ids.begin(), ids.end());
    Matrix<Real> x(n, d);
    const auto& tok = model.params()[M::kTokEmb].value;
    const auto& pos = model.params()[M::kPosEmb].value;
    for (std::size_t i = 0; i < n; ++i) {
        const auto id = static_cast<std::size_t>(ids[i]);
        for (std::size_t j = 0; j < d; ++j) {
            x(i, j) = tok[id * d + j] + pos[i * d + j];
        }
    }
    rc.drop0 = dropout_mask<Real>(n * d, p_hid, sites.at(0, 0));
    apply_mask(x, rc.drop0);

    rc.blocks.resize(cfg.layers);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        auto& bc = rc.blocks[l];
        auto P = [&](typename M::BlockParam w) -> const std::vector<Real>& { return model.block(l, w).value; };

        layer_norm<Real>(x, P(M::Ln1Gain), P(M::Ln1Bias), bc.a, bc.ln1);
        bc.q = Matrix<Real>(n, d);
        bc.k = Matrix<Real>(n, d);
        bc.v = Matrix<Real>(n, d);
        kernel::gemm_nn(bc.a.data.data(), P(M::Wq).data(), bc.q.data.data(), n, d, d);
        kernel::gemm_nn(bc.a.data.data(), P(M::Wk).data(), bc.k.data.data(), n, d, d);
        kernel::gemm_nn(bc.a.data.data(), P(M::Wv).data(), bc.v.data.data(), n, d, d);
        add_bias<Real>(bc.q, P(M::Bq));
        add_bias<Real>(bc.k, P(M::Bk));
        add_bias<Real>(bc.v, P(M::Bv));

        bc.ctx = Matrix<Real>(n, d);
        bc.probs.assign(heads, Matrix<Real>(n, n));
        bc.attn_mask.assign(heads, Matrix<Real>());
        for (std::size_t h = 0; h < heads; ++h) {
            auto& probs = bc.probs[h];
            const auto off = h * dh;
            for (std::size_t i = 0; i < n; ++i) {
                Real mx = -std::numeric_limits<Real>::infinity();
                for (std::size_t j = 0; j < n; ++j) {
                    Real s = 0;
                    for (std::size_t c = 0; c < dh; ++c) {
                        s += bc.q(i, off + c) * bc.k(j, off + c);
                    }
                    s *= scale;
                    probs(i, j) = s;
                    mx = std::max(mx, s);
                }
                Real z = 0;
                for (std::size_t j = 0; j < n; ++j) {
                    probs(i, j) = std::exp(probs(i, j) - mx);
                    z += probs(i, j);
                }
                for (std::size_t j = 0; j < n; ++j) {
                    probs(i, j) /= z;
                }
            }
            auto mask = dropout_mask<Real>(n * n, p_attn, sites.at(l + 1, 1, h));
            if (!mask.empty()) {
                bc.attn_mask[h] = Matrix<Real>(n, n);
                bc.attn_mask[h].data = std::move(mask);
            }
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    Real pij = probs(i, j);
                    if (!bc.attn_mask[h].data.empty()) {
                        pij *= bc.attn_mask[h](i, j);
                    }
                    if (pij == Real(0)) {
                        continue;
                    }
                    for (std::size_t c = 0; c < dh; ++c) {
                        bc.ctx(i, off + c) += pij * bc.v(j, off + c);
                    }
                }
            }
        }
        Matrix<Real> o(n, d);
        kernel::gemm_nn(bc.ctx.data.data(), P(M::Wo).data(), o.data.data(), n, d, d);
        add_bias<Real>(o, P(M::Bo));
        bc.drop1 = dropout_mask<Real>(n * d, p_hid, sites.at(l + 1, 2));
        apply_mask(o, bc.drop1);
        for (std::size_t i = 0; i < x.data.size(); ++i) {
            x.data[i] += o.data[i];
        }

        layer_norm<Real>(x, P(M::Ln2Gain), P(M::Ln2Bias), bc.b, bc.ln2);
        bc.u = Matrix<Real>(n, f);
        kernel::gemm_nn(bc.b.data.data(), P(M::W1).data(), bc.u.data.data(), n, d, f);
        add_bias<Real>(bc.u, P(M::B1));
        bc.g = Matrix<Real>(n, f);
        for (std::size_t i = 0; i < bc.u.data.size(); ++i) {
            bc.g.data[i] = gelu(bc.u.data[i]);
        }
        Matrix<Real> y(n, d);
        kernel::gemm_nn(bc.g.data.data(), P(M::W2).data(), y.data.data(), n, f, d);
        add_bias<Real>(y, P(M::B2));
        bc.drop2 = dropout_mask<Real>(n * d, p_hid, sites.at(l + 1, 3));
        apply_mask(y, bc.drop2);
        for (std::size_t i = 0; i < x.data.size(); ++i) {
            x.data[i] += y.data[i];
        }
    }
    layer_norm<Real>(x, model.top(M::LnfGain).value, model.top(M::LnfBias).value, rc.z, rc.lnf);
    return rc;
}

/// Backpropagate dz (gradient w.r.t. final representations) through one row.
template <typename Real>
void backprop_row(const EncoderModel<Real>& model, const RowCache<Real>& rc, const Matrix<Real>& dz,
                  Gradients<Real>& grads) {
    using M = EncoderModel<Real>;
    const auto& cfg = model.config();
    const auto n = rc.ids.size();
    const auto d = cfg.dim;
    const auto f = cfg.ff_dim;
    const auto heads = cfg.heads;
    const auto dh = d / heads;
    const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));
    const auto lowest = model.lowest_trainable_group();
    const auto top_group = cfg.layers + 1;

    Matrix<Real> dx(n, d);
    {
        const bool train_top = lowest <= top_group;
        layer_norm_backward<Real>(dz, model.top(M::LnfGain).value, rc.lnf, dx,
                                  train_top ? grads.slots[model.top_index(M::LnfGain)].data() : nullptr,
                                  train_top ? grads.slots[model.top_index(M::LnfBias)].data() : nullptr);
    }

    for (std::size_t li = cfg.layers; li-- > 0;) {
        const auto group = li + 1;
        if (group < lowest) {
            return;  // everything below is frozen
        }
        const auto& bc = rc.blocks[li];
        auto P = [&](typename M::BlockParam w) -> const std::vector<Real>& { return model.block(li, w).value; };
        auto G = [&](typename M::BlockParam w) -> Real* { return grads.slots[model.block_index(li, w)].data(); };

        // FFN branch: x3 = x2 + drop(gelu(b W1 + b1) W2 + b2)
        Matrix<Real> dy = dx;
        if (!bc.drop2.empty()) {
            for (std::size_t i = 0; i < dy.data.size(); ++i) {
                dy.data[i] *= bc.drop2[i];
            }
        }
        bias_grad<Real>(dy, G(M::B2));
        kernel::gemm_tn(bc.g.data.data(), dy.data.data(), G(M::W2), n, f, d);
        Matrix<Real> du(n, f);
        kernel::gemm_nt(dy.data.data(), P(M::W2).data(), du.data.data(), n, d, f);
        for (std::size_t i = 0; i < du.data.size(); ++i) {
            du.data[i] *= gelu_grad(bc.u.data[i]);
        }
        bias_grad<Real>(du, G(M::B1));
        kernel::gemm_tn(bc.b.data.data(), du.data.data(), G(M::W1), n, d, f);
        Matrix<Real> db(n, d);
        kernel::gemm_nt(du.data.data(), P(M::W1).data(), db.data.data(), n, f, d);
        layer_norm_backward<Real>(db, P(M::Ln2Gain), bc.ln2, dx, G(M::Ln2Gain), G(M::Ln2Bias));

        // attention branch: x2 = x + drop(ctx Wo + bo)
        Matrix<Real> dout = dx;
        if (!bc.drop1.empty()) {
            for (std::size_t i = 0; i < dout.data.size(); ++i) {
                dout.data[i] *= bc.drop1[i];
            }
        }
        bias_grad<Real>(dout, G(M::Bo));
        kernel::gemm_tn(bc.ctx.data.data(), dout.data.data(), G(M::Wo), n, d, d);
        Matrix<Real> dctx(n, d);
        kernel::gemm_nt(dout.data.data(), P(M::Wo).data(), dctx.data.data(), n, d, d);

        Matrix<Real> dq(n, d), dk(n, d), dv(n, d);
        std::vector<Real> dp(n);
        for (std::size_t h = 0; h < heads; ++h) {
            const auto off = h * dh;
            const auto& probs = bc.probs[h];
            const bool masked = !bc.attn_mask[h].data.empty();
            for (std::size_t i = 0; i < n; ++i) {
                Real dot_pd = 0;
                for (std::size_t j = 0; j < n; ++j) {
                    const Real m = masked ? bc.attn_mask[h](i, j) : Real(1);
                    Real g = 0;
                    for (std::size_t c = 0; c < dh; ++c) {
                        g += dctx(i, off + c) * bc.v(j, off + c);
                    }
                    const Real pd = probs(i, j) * m;
                    if (pd != Real(0)) {
                        for (std::size_t c = 0; c < dh; ++c) {
                            dv(j, off + c) += pd * dctx(i, off + c);
                        }
                    }
                    dp[j] = g * m;
                    dot_pd += dp[j] * probs(i, j);
                }
                for (std::size_t j = 0; j < n; ++j) {
                    const Real ds = probs(i, j) * (dp[j] - dot_pd) * scale;
                    if (ds == Real(0)) {
                        continue;
                    }
                    for (std::size_t c = 0; c < dh; ++c) {
                        dq(i, off + c) += ds * bc.k(j, off + c);
                        dk(j, off + c) += ds * bc.q(i, off + c);
                    }
                }
            }
        }
        bias_grad<Real>(dq, G(M::Bq));
        bias_grad<Real>(dk, G(M::Bk));
        bias_grad<Real>(dv, G(M::Bv));
        kernel::gemm_tn(bc.a.data.data(), dq.data.data(), G(M::Wq), n, d, d);
        kernel::gemm_tn(bc.a.data.data(), dk.data.data(), G(M::Wk), n, d, d);
        kernel::gemm_tn(bc.a.data.data(), dv.data.data(), G(M::Wv), n, d, d);
        Matrix<Real> da(n, d);
        kernel::gemm_nt(dq.data.data(), P(M::Wq).data(), da.data.data(), n, d, d);
        kernel::gemm_nt(dk.data.data(), P(M::Wk).data(), da.data.data(), n, d, d);
        kernel::gemm_nt(dv.data.data(), P(M::Wv).data(), da.data.data(), n, d, d);
        layer_norm_backward<Real>(da, P(M::Ln1Gain), bc.ln1, dx, G(M::Ln1Gain), G(M::Ln1Bias));
    }

    if (lowest > 0) {
        return;
    }
    if (!rc.drop0.empty()) {
        for (std::size_t i = 0; i < dx.data.size(); ++i) {
            dx.data[i] *= rc.drop0[i];
        }
    }
    auto& dtok = grads.slots[M::kTokEmb];
    auto& dpos = grads.slots[M::kPosEmb];
    for (std::size_t i = 0; i < n; ++i) {
        const auto id = static_cast<std::size_t>(rc.ids[i]);
        for (std::size_t j = 0; j < d; ++j) {
            dtok[id * d + j] += dx(i, j);
            dpos[i * d + j] += dx(i, j);
        }
    }
}

template <typename Real>
void log_softmax_inplace(std::span<Real> logits, std::span<Real> probs_out) {
    Real mx = -std::numeric_limits<Real>::infinity();
    for (auto v : logits) {
        mx = std::max(mx, v);
    }
    Real z = 0;
    for (auto v : logits) {
        z += std::exp(v - mx);
    }
    const Real lse = mx + std::log(z);
    for (std::size_t i = 0; i < logits.size(); ++i) {
        logits[i] -= lse;
        probs_out[i] = std::exp(logits[i]);
    }
}

} // namespace detail

enum class TapeKind : std::uint8_t { None, Mlm, Classify };

/// Saved activations of one forward pass; consumed by backward().
template <typename Real>
struct Tape {
    TapeKind kind = TapeKind::None;
    Head head = Head::Dynasty;
    std::vector<detail::RowCache<Real>> rows;
    std::vector<MaskedSlot> masked;
    Matrix<Real> probs;  // softmax of the output layer
};

template <typename Real>
struct ForwardOutput {
    Matrix<Real> log_probs;  // one row per masked slot (MLM) or per sequence (classification)
    Tape<Real> tape;
};

struct ForwardOptions {
    bool train = false;
    std::uint64_t step = 0;  // dropout stream coordinate
};

namespace detail {

template <typename Real>
void check_batch(const EncoderModel<Real>& model, const Batch& batch) {
    for (std::size_t r = 0; r < batch.size(); ++r) {
        if (batch.lengths[r] > model.config().max_seq_len) {
            throw DataError("sequence of length " + std::to_string(batch.lengths[r]) + " exceeds max_seq_len " +
                            std::to_string(model.config().max_seq_len));
        }
        if (batch.lengths[r] == 0 || batch.lengths[r] > batch.tokens.cols) {
            throw UsageError("bad sequence length in batch");
        }
        for (std::size_t i = 0; i < batch.lengths[r]; ++i) {
            const auto id = batch.tokens(r, i);
            if (id < 0 || static_cast<std::size_t>(id) >= model.vocab_size()) {
                throw DataError("token index out of vocabulary range");
            }
        }
    }
}

template <typename Real>
std::vector<RowCache<Real>> encode_batch(const EncoderModel<Real>& model, const Batch& batch,
                                         const ForwardOptions& opt) {
    check_batch(model, batch);
    std::vector<RowCache<Real>> rows;
    rows.reserve(batch.size());
    for (std::size_t r = 0; r < batch.size(); ++r) {
        DropoutSites sites{opt.train, model.config().seed, opt.step, r};
        // padded positions are never read: each row is encoded at its true length
        rows.push_back(encode_row(model, std::span<const std::int32_t>(batch.tokens.row(r).data(), batch.lengths[r]),
                                  sites));
    }
    return rows;
}

} // namespace detail

/// Log-probabilities over the vocabulary at every masked slot of the batch.
template <typename Real>
ForwardOutput<Real> forward_mlm(const EncoderModel<Real>& model, const Batch& batch, ForwardOptions opt = {}) {
    using M = EncoderModel<Real>;
    ForwardOutput<Real> out;
    out.tape.kind = TapeKind::Mlm;
    out.tape.rows = detail::encode_batch(model, batch, opt);
    out.tape.masked = batch.masked;
    const auto V = model.vocab_size();
    const auto d = model.config().dim;
    const auto& emb = model.params()[M::kTokEmb].value;
    const auto& bias = model.top(M::MlmBias).value;
    out.log_probs = Matrix<Real>(batch.masked.size(), V);
    out.tape.probs = Matrix<Real>(batch.masked.size(), V);
    for (std::size_t m = 0; m < batch.masked.size(); ++m) {
        const auto& slot = batch.masked[m];
        if (slot.row >= batch.size() || slot.position >= batch.lengths[slot.row]) {
            throw UsageError("masked slot outside sequence bounds");
        }
        const auto z = out.tape.rows[slot.row].z.row(slot.position);
        auto logits = out.log_probs.row(m);
        std::copy(bias.begin(), bias.end(), logits.begin());
        kernel::gemm_nt(z.data(), emb.data(), logits.data(), 1, d, V);
        detail::log_softmax_inplace<Real>(logits, out.tape.probs.row(m));
    }
    return out;
}

/// Log-probabilities over labels of the selected head, one row per sequence.
template <typename Real>
ForwardOutput<Real> forward_classify(const EncoderModel<Real>& model, const Batch& batch, Head head,
                                     ForwardOptions opt = {}) {
    using M = EncoderModel<Real>;
    if (head != Head::Dynasty && head != Head::Period) {
        throw UsageError("unknown classification head");
    }
    ForwardOutput<Real> out;
    out.tape.kind = TapeKind::Classify;
    out.tape.head = head;
    out.tape.rows = detail::encode_batch(model, batch, opt);
    const auto C = label_count(head);
    const auto d = model.config().dim;
    const auto& w = model.top(head == Head::Dynasty ? M::DynW : M::PerW).value;
    const auto& b = model.top(head == Head::Dynasty ? M::DynB : M::PerB).value;
    out.log_probs = Matrix<Real>(batch.size(), C);
    out.tape.probs = Matrix<Real>(batch.size(), C);
    std::vector<Real> pooled(d);
    for (std::size_t r = 0; r < batch.size(); ++r) {
        const auto& z = out.tape.rows[r].z;
        std::fill(pooled.begin(), pooled.end(), Real(0));
        if (model.config().pooling == Pooling::First) {
            std::copy(z.row(0).begin(), z.row(0).end(), pooled.begin());
        } else {
            for (std::size_t i = 0; i < z.rows; ++i) {
                for (std::size_t j = 0; j < d; ++j) {
                    pooled[j] += z(i, j) / static_cast<Real>(z.rows);
                }
            }
        }
        auto logits = out.log_probs.row(r);
        std::copy(b.begin(), b.end(), logits.begin());
        kernel::gemm_nn(pooled.data(), w.data(), logits.data(), 1, d, C);
        detail::log_softmax_inplace<Real>(logits, out.tape.probs.row(r));
    }
    return out;
}

/// Exact gradients of a scalar loss given its gradient w.r.t. the forward
/// output's log-probabilities. Frozen parameters get zero gradients.
template <typename Real>
Gradients<Real> backward(const EncoderModel<Real>& model, const Tape<Real>& tape, const Matrix<Real>& dlogp) {
    using M = EncoderModel<Real>;
    if (tape.kind == TapeKind::None) {
        throw UsageError("backward called without a forward pass");
    }
    if (dlogp.rows != tape.probs.rows || dlogp.cols != tape.probs.cols) {
        throw UsageError("loss gradient shape does not match the forward output");
    }
    auto grads = model.zero_gradients();
    const auto d = model.config().dim;
    const auto top_trainable = model.lowest_trainable_group() <= model.config().layers + 1;

    // log-softmax backward: dlogits = g - p * sum(g)
    Matrix<Real> dlogits(dlogp.rows, dlogp.cols);
    for (std::size_t r = 0; r < dlogp.rows; ++r) {
        Real s = 0;
        for (std::size_t c = 0; c < dlogp.cols; ++c) {
            s += dlogp(r, c);
        }
        for (std::size_t c = 0; c < dlogp.cols; ++c) {
            dlogits(r, c) = dlogp(r, c) - tape.probs(r, c) * s;
        }
    }

    std::vector<Matrix<Real>> dz;
    dz.reserve(tape.rows.size());
    for (const auto& rc : tape.rows) {
        dz.emplace_back(rc.z.rows, d);
    }

    const bool embeddings_trainable = model.lowest_trainable_group() == 0;
    if (tape.kind == TapeKind::Mlm) {
        const auto V = model.vocab_size();
        const auto& emb = model.params()[M::kTokEmb].value;
        auto& demb = grads.slots[M::kTokEmb];
        auto& dbias = grads.slots[model.top_index(M::MlmBias)];
        for (std::size_t m = 0; m < tape.masked.size(); ++m) {
            const auto& slot = tape.masked[m];
            const auto z = tape.rows[slot.row].z.row(slot.position);
            const auto g = dlogits.row(m);
            if (top_trainable) {
                for (std::size_t c = 0; c < V; ++c) {
                    dbias[c] += g[c];
                }
            }
            if (embeddings_trainable) {
                kernel::gemm_tn(g.data(), z.data(), demb.data(), 1, V, d);
            }
            kernel::gemm_nn(g.data(), emb.data(), dz[slot.row].row(slot.position).data(), 1, V, d);
        }
    } else {
        const auto C = label_count(tape.head);
        const auto wi = model.top_index(tape.head == Head::Dynasty ? M::DynW : M::PerW);
        const auto bi = model.top_index(tape.head == Head::Dynasty ? M::DynB : M::PerB);
        const auto& w = model.params()[wi].value;
        std::vector<Real> pooled(d), dpooled(d);
        for (std::size_t r = 0; r < tape.rows.size(); ++r) {
            const auto& z = tape.rows[r].z;
            std::fill(pooled.begin(), pooled.end(), Real(0));
            if (model.config().pooling == Pooling::First) {
                std::copy(z.row(0).begin(), z.row(0).end(), pooled.begin());
            } else {
                for (std::size_t i = 0; i < z.rows; ++i) {
                    for (std::size_t j = 0; j < d; ++j) {
                        pooled[j] += z(i, j) / static_cast<Real>(z.rows);
                    }
                }
            }
            const auto g = dlogits.row(r);
            if (top_trainable) {
                kernel::gemm_tn(pooled.data(), g.data(), grads.slots[wi].data(), 1, d, C);
                for (std::size_t c = 0; c < C; ++c) {
                    grads.slots[bi][c] += g[c];
                }
            }
            std::fill(dpooled.begin(), dpooled.end(), Real(0));
            kernel::gemm_nt(g.data(), w.data(), dpooled.data(), 1, C, d);
            if (model.config().pooling == Pooling::First) {
                std::copy(dpooled.begin(), dpooled.end(), dz[r].row(0).begin());
            } else {
                for (std::size_t i = 0; i < z.rows; ++i) {
                    for (std::size_t j = 0; j < d; ++j) {
                        dz[r](i, j) = dpooled[j] / static_cast<Real>(z.rows);
                    }
                }
            }
        }
    }

    if (model.lowest_trainable_group() <= model.config().layers + 1) {
        for (std::size_t r = 0; r < tape.rows.size(); ++r) {
            detail::backprop_row(model, tape.rows[r], dz[r], grads);
        }
    }
    // frozen tensors never carry gradient
    for (std::size_t i = 0; i < grads.slots.size(); ++i) {
        if (!model.is_trainable(i)) {
            std::fill(grads.slots[i].begin(), grads.slots[i].end(), Real(0));
        }
    }
    return grads;
}

// ---------------------------------------------------------------------------
// Optimiser
// ---------------------------------------------------------------------------

/// Adam with decoupled weight decay. Frozen parameters are left untouched
/// (no decay either).
template <typename Real>
class AdamW {
public:
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    void step(EncoderModel<Real>& model, const Gradients<Real>& grads, double lr, double weight_decay) {
        auto& params = model.params();
        if (m_.size() != params.size()) {
            m_.clear();
            v_.clear();
            for (const auto& p : params) {
                m_.emplace_back(p.value.size(), 0.0);
                v_.emplace_back(p.value.size(), 0.0);
            }
        }
        ++t_;
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (!model.is_trainable(i)) {
                continue;
            }
            auto& value = params[i].value;
            const auto& g = grads.slots[i];
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t j = 0; j < value.size(); ++j) {
                const double gj = static_cast<double>(g[j]);
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                const double update = (m[j] / c1) / (std::sqrt(v[j] / c2) + eps);
                const double theta = static_cast<double>(value[j]);
                value[j] = static_cast<Real>(theta - lr * weight_decay * theta - lr * update);
            }
        }
    }

    std::uint64_t steps() const noexcept { return t_; }

private:
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    std::uint64_t t_ = 0;
};

} // namespace allomlm

#endif
