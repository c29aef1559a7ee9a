#pragma once

#include "habitat/core.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

// Feature-enhanced auto-encoder and the comparison variants.
//
// fae:          per modality pair w=(i,j): e_w = tanh(a2 . tanh(A1 [x_i x_j] + b1) + b2)
//               z = tanh(Wz e + bz)                             (latent, one node per modality)
//               d_w = tanh(u_w . z + c_w)
//               pair reconstruction r_w = V2 tanh(V1 d_w + c1) + c2    (D_w, linear output)
//               global reconstruction x' = S2 tanh(S1 d + s1) + s2      (D_s, linear output)
// ensemble_ae:  fae without D_s.
// standard_ae:  x -> tanh(H) -> tanh(latent) -> tanh(H) -> x' (linear output).
// baseline:     identity.
//
// Parameters live in one flat vector; ParamBlock records the fixed serialization order.

namespace habitat {

enum class VariantKind { baseline, standard_ae, ensemble_ae, fae };

inline std::string to_string(VariantKind kind) {
    switch (kind) {
        case VariantKind::baseline: return "baseline";
        case VariantKind::standard_ae: return "standard_ae";
        case VariantKind::ensemble_ae: return "ensemble_ae";
        case VariantKind::fae: return "fae";
    }
    return "unknown";
}

inline VariantKind parse_variant(const std::string& name) {
    if (name == "baseline") return VariantKind::baseline;
    if (name == "standard_ae") return VariantKind::standard_ae;
    if (name == "ensemble_ae") return VariantKind::ensemble_ae;
    if (name == "fae") return VariantKind::fae;
    throw Error(ErrorCode::invalid_argument, "unknown variant kind '" + name + "'");
}

inline constexpr VariantKind all_variants[] = {VariantKind::baseline, VariantKind::standard_ae,
                                               VariantKind::ensemble_ae, VariantKind::fae};

struct FaeConfig {
    int n_modalities = 3;
    int hidden_width = 10;
    int latent_dim = 0;  // 0 means n_modalities
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_epsilon = 1e-8;
    int epochs = 100;
    int batch_size = 256;
    std::uint64_t seed = 0;

    int latent() const { return latent_dim > 0 ? latent_dim : n_modalities; }
    int pairs() const { return n_modalities * (n_modalities - 1) / 2; }

    void validate() const {
        require(n_modalities >= 2, ErrorCode::invalid_argument, "FAE needs at least 2 modalities");
        require(hidden_width >= 1, ErrorCode::invalid_argument, "hidden_width must be positive");
        require(latent() >= 1 && latent() <= n_modalities, ErrorCode::invalid_argument,
                "latent_dim must lie in [1, n_modalities]");
        require(learning_rate > 0.0, ErrorCode::invalid_argument, "learning_rate must be positive");
        require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, ErrorCode::invalid_argument,
                "adam betas must lie in [0,1)");
        require(epochs >= 0 && batch_size >= 1, ErrorCode::invalid_argument, "invalid epochs or batch_size");
    }
};

struct ModalityPair {
    int first;
    int second;
};

inline std::vector<ModalityPair> modality_pairs(int n_modalities) {
    std::vector<ModalityPair> pairs;
    for (int i = 0; i < n_modalities; ++i) {
        for (int j = i + 1; j < n_modalities; ++j) {
            pairs.push_back({i, j});
        }
    }
    return pairs;
}

/// Which alternating step trains a block.
enum class ParamGroup { shared, pairwise, global };

struct ParamBlock {
    std::string name;
    std::size_t offset;
    int rows;
    int cols;
    bool bias;
    ParamGroup group;

    std::size_t size() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
};

enum class LossKind { pairwise, global };

struct TrainTrace {
    // Entry 0 is the loss before training, entry e the full-data loss after epoch e.
    std::vector<double> pairwise;
    std::vector<double> global;
};

class FeatureTransformer {
public:
    FeatureTransformer() = default;

    /// Glorot-uniform weights, zero biases; deterministic given config.seed.
    FeatureTransformer(VariantKind kind, const FaeConfig& config) : kind_(kind), config_(config) {
        config_.validate();
        build_layout();
        params_.assign(n_params_, 0.0);
        std::mt19937_64 rng(config_.seed);
        for (const auto& block : blocks_) {
            if (block.bias) {
                continue;
            }
            const double limit = std::sqrt(6.0 / static_cast<double>(block.rows + block.cols));
            std::uniform_real_distribution<double> dist(-limit, limit);
            for (std::size_t k = 0; k < block.size(); ++k) {
                params_[block.offset + k] = dist(rng);
            }
        }
    }

    VariantKind kind() const { return kind_; }
    const FaeConfig& config() const { return config_; }
    int n_modalities() const { return config_.n_modalities; }
    int latent_dim() const { return kind_ == VariantKind::baseline ? config_.n_modalities : config_.latent(); }
    bool has_global_decoder() const { return kind_ == VariantKind::fae; }
    bool has_pairwise_path() const { return kind_ == VariantKind::fae || kind_ == VariantKind::ensemble_ae; }

    const std::vector<ParamBlock>& blocks() const { return blocks_; }
    const std::vector<double>& params() const { return params_; }
    std::vector<double>& params() { return params_; }

    bool has_block(const std::string& name) const {
        return std::any_of(blocks_.begin(), blocks_.end(), [&](const ParamBlock& b) { return b.name == name; });
    }

    // -- Forward -----------------------------------------------------------

    template <typename T>
    struct Activations {
        std::vector<T> enc_hidden;   // W*H  (standard_ae: H)
        std::vector<T> enc_out;      // W
        std::vector<T> latent;       // L
        std::vector<T> proj;         // W
        std::vector<T> dec_hidden;   // W*H  (standard_ae: H)
        std::vector<T> pair_recon;   // W*2
        std::vector<T> glob_hidden;  // H
        std::vector<T> glob_recon;   // M   (standard_ae: its reconstruction)
    };

    struct ForwardResult {
        std::vector<double> latent;
        std::vector<std::array<double, 2>> pairwise_recon;
        std::vector<double> global_recon;
    };

    ForwardResult forward(std::span<const double> x) const {
        require(static_cast<int>(x.size()) == n_modalities(), ErrorCode::invalid_argument,
                "input has " + std::to_string(x.size()) + " modalities, expected " + std::to_string(n_modalities()));
        for (double v : x) {
            require(std::isfinite(v), ErrorCode::non_finite, "non-finite FAE input");
        }
        ForwardResult out;
        if (kind_ == VariantKind::baseline) {
            out.latent.assign(x.begin(), x.end());
            out.global_recon.assign(x.begin(), x.end());
            return out;
        }
        Activations<double> act;
        forward_impl<double>(params_.data(), x.data(), act, true, true);
        out.latent = act.latent;
        if (has_pairwise_path()) {
            for (std::size_t w = 0; w < pairs_.size(); ++w) {
                out.pairwise_recon.push_back({act.pair_recon[2 * w], act.pair_recon[2 * w + 1]});
            }
        }
        if (kind_ == VariantKind::fae || kind_ == VariantKind::standard_ae) {
            out.global_recon = act.glob_recon;
        }
        return out;
    }

    /// Latent rows for each pixel row; rows are processed independently.
    Matrix encode(const Matrix& pixels) const {
        require(pixels.cols() == n_modalities(), ErrorCode::invalid_argument,
                "encode: pixel matrix has " + std::to_string(pixels.cols()) + " columns, expected " +
                    std::to_string(n_modalities()));
        if (kind_ == VariantKind::baseline) {
            return pixels;
        }
        Matrix out(pixels.rows(), latent_dim());
        const std::size_t chunk = 2048;
        const std::size_t n = static_cast<std::size_t>(pixels.rows());
        const std::size_t n_chunks = (n + chunk - 1) / chunk;
        parallel_for(n_chunks, [&](std::size_t c) {
            Activations<double> act;
            for (std::size_t r = c * chunk; r < std::min(n, (c + 1) * chunk); ++r) {
                const auto row = static_cast<Eigen::Index>(r);
                forward_impl<double>(params_.data(), pixels.row(row).data(), act, false, false);
                for (int l = 0; l < latent_dim(); ++l) {
                    out(row, l) = act.latent[static_cast<std::size_t>(l)];
                }
            }
        });
        return out;
    }

    // -- Losses ------------------------------------------------------------

    /// Mean squared error over batch rows and every reconstructed component.
    template <typename T = double>
    T loss(const Matrix& batch, LossKind which, const T* params = nullptr) const {
        require(batch.rows() > 0, ErrorCode::empty_input, "loss on empty batch");
        require(batch.cols() == n_modalities(), ErrorCode::invalid_argument, "loss: batch width mismatch");
        const std::vector<T> converted = params ? std::vector<T>() : convert<T>(params_);
        const T* p = params ? params : converted.data();
        if (kind_ == VariantKind::baseline) {
            return T(0);
        }
        const bool pairwise = which == LossKind::pairwise;
        if (pairwise && !has_pairwise_path()) {
            return T(0);
        }
        if (!pairwise && kind_ == VariantKind::ensemble_ae) {
            return T(0);
        }
        Activations<T> act;
        T total = T(0);
        const int m = n_modalities();
        for (Eigen::Index r = 0; r < batch.rows(); ++r) {
            const double* x = batch.row(r).data();
            forward_impl<T>(p, x, act, pairwise, !pairwise);
            if (pairwise) {
                for (std::size_t w = 0; w < pairs_.size(); ++w) {
                    const T d0 = act.pair_recon[2 * w] - T(x[pairs_[w].first]);
                    const T d1 = act.pair_recon[2 * w + 1] - T(x[pairs_[w].second]);
                    total += d0 * d0 + d1 * d1;
                }
            } else {
                for (int j = 0; j < m; ++j) {
                    const T d = act.glob_recon[static_cast<std::size_t>(j)] - T(x[j]);
                    total += d * d;
                }
            }
        }
        const double per_row = pairwise ? 2.0 * static_cast<double>(pairs_.size()) : static_cast<double>(m);
        return total / T(per_row * static_cast<double>(batch.rows()));
    }

    /// Analytic gradient of loss(batch, which) with respect to the flat parameter vector.
    std::vector<double> gradient(const Matrix& batch, LossKind which) const {
        std::vector<double> grad(n_params_, 0.0);
        accumulate_gradient(batch, which, grad);
        return grad;
    }

    // -- Training ----------------------------------------------------------

    /// Adam over seeded minibatches. fae alternates a pairwise step and a global step per
    /// minibatch; ensemble_ae takes only the pairwise step; standard_ae its own MSE step.
    TrainTrace train(const Matrix& pixels) {
        require(pixels.cols() == n_modalities(), ErrorCode::invalid_argument, "train: pixel width mismatch");
        TrainTrace trace;
        if (kind_ == VariantKind::baseline) {
            return trace;
        }
        require(pixels.rows() > 0, ErrorCode::empty_input, "train on empty pixel matrix");
        adam_m_.assign(n_params_, 0.0);
        adam_v_.assign(n_params_, 0.0);
        adam_t_.assign(n_params_, 0);

        record_epoch(pixels, trace, 0);
        std::mt19937_64 rng(derive_seed(config_.seed, 0xBA7C4ULL));
        std::vector<Eigen::Index> order(static_cast<std::size_t>(pixels.rows()));
        std::iota(order.begin(), order.end(), Eigen::Index{0});
        const auto batch_size = static_cast<std::size_t>(config_.batch_size);
        Matrix batch;
        std::vector<double> grad(n_params_);
        for (int epoch = 1; epoch <= config_.epochs; ++epoch) {
            std::shuffle(order.begin(), order.end(), rng);
            for (std::size_t start = 0; start < order.size(); start += batch_size) {
                const std::size_t stop = std::min(order.size(), start + batch_size);
                batch.resize(static_cast<Eigen::Index>(stop - start), pixels.cols());
                for (std::size_t k = start; k < stop; ++k) {
                    batch.row(static_cast<Eigen::Index>(k - start)) = pixels.row(order[k]);
                }
                if (kind_ == VariantKind::standard_ae) {
                    std::fill(grad.begin(), grad.end(), 0.0);
                    accumulate_gradient(batch, LossKind::global, grad);
                    adam_step(grad, ParamGroup::global);
                    continue;
                }
                std::fill(grad.begin(), grad.end(), 0.0);
                accumulate_gradient(batch, LossKind::pairwise, grad);
                adam_step(grad, ParamGroup::pairwise);
                if (has_global_decoder()) {
                    std::fill(grad.begin(), grad.end(), 0.0);
                    accumulate_gradient(batch, LossKind::global, grad);
                    adam_step(grad, ParamGroup::global);
                }
            }
            record_epoch(pixels, trace, epoch);
        }
        return trace;
    }

    // -- Serialization -----------------------------------------------------

    /// Text format: header lines, then one parameter per line in block order.
    void save(std::ostream& out) const {
        out << "habitat-transformer 1\n";
        out << "kind " << to_string(kind_) << '\n';
        out << "modalities " << config_.n_modalities << '\n';
        out << "hidden " << config_.hidden_width << '\n';
        out << "latent " << config_.latent() << '\n';
        out << "parameters " << params_.size() << '\n';
        for (double v : params_) {
            out << format_real(v) << '\n';
        }
    }

    void save(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::binary);
        require(static_cast<bool>(out), ErrorCode::io, "cannot write " + path.string());
        save(out);
    }

    static FeatureTransformer load(std::istream& in) {
        std::string magic;
        int version = 0;
        in >> magic >> version;
        require(magic == "habitat-transformer" && version == 1, ErrorCode::parse_error,
                "not a transformer weight file");
        auto expect = [&](const std::string& key) {
            std::string got;
            in >> got;
            require(got == key, ErrorCode::parse_error, "transformer file: expected '" + key + "'");
        };
        std::string kind_name;
        FaeConfig config;
        expect("kind");
        in >> kind_name;
        expect("modalities");
        in >> config.n_modalities;
        expect("hidden");
        in >> config.hidden_width;
        expect("latent");
        in >> config.latent_dim;
        std::size_t count = 0;
        expect("parameters");
        in >> count;
        require(static_cast<bool>(in), ErrorCode::parse_error, "transformer file: bad header");
        FeatureTransformer model(parse_variant(kind_name), config);
        require(count == model.params_.size(), ErrorCode::parse_error, "transformer file: parameter count mismatch");
        std::string token;
        for (auto& v : model.params_) {
            in >> token;
            require(static_cast<bool>(in), ErrorCode::parse_error, "transformer file: truncated parameters");
            v = std::strtod(token.c_str(), nullptr);
        }
        return model;
    }

    static FeatureTransformer load(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        require(static_cast<bool>(in), ErrorCode::io, "cannot open " + path.string());
        return load(in);
    }

    friend bool operator==(const FeatureTransformer& a, const FeatureTransformer& b) {
        return a.kind_ == b.kind_ && a.config_.n_modalities == b.config_.n_modalities &&
               a.config_.hidden_width == b.config_.hidden_width && a.config_.latent() == b.config_.latent() &&
               a.params_ == b.params_;
    }

private:
    template <typename T>
    static std::vector<T> convert(const std::vector<double>& v) {
        return std::vector<T>(v.begin(), v.end());
    }

    std::size_t add_block(const std::string& name, int rows, int cols, bool bias, ParamGroup group) {
        blocks_.push_back({name, n_params_, rows, cols, bias, group});
        n_params_ += blocks_.back().size();
        return blocks_.back().offset;
    }

    void build_layout() {
        blocks_.clear();
        n_params_ = 0;
        const int m = config_.n_modalities;
        const int h = config_.hidden_width;
        const int l = config_.latent();
        if (kind_ == VariantKind::baseline) {
            return;
        }
        if (kind_ == VariantKind::standard_ae) {
            // The single loss is trained as the "global" group.
            o_.enc_w1 = {add_block("enc_w1", h, m, false, ParamGroup::global)};
            o_.enc_b1 = {add_block("enc_b1", h, 1, true, ParamGroup::global)};
            o_.enc_w2 = {add_block("enc_w2", l, h, false, ParamGroup::global)};
            o_.enc_b2 = {add_block("enc_b2", l, 1, true, ParamGroup::global)};
            o_.dec_w1 = {add_block("dec_w1", h, l, false, ParamGroup::global)};
            o_.dec_b1 = {add_block("dec_b1", h, 1, true, ParamGroup::global)};
            o_.dec_w2 = {add_block("dec_w2", m, h, false, ParamGroup::global)};
            o_.dec_b2 = {add_block("dec_b2", m, 1, true, ParamGroup::global)};
            return;
        }
        pairs_ = modality_pairs(m);
        const int w_count = static_cast<int>(pairs_.size());
        o_ = Offsets{};
        for (int w = 0; w < w_count; ++w) {
            const std::string tag = "[" + std::to_string(w) + "]";
            o_.enc_w1.push_back(add_block("enc_w1" + tag, h, 2, false, ParamGroup::shared));
            o_.enc_b1.push_back(add_block("enc_b1" + tag, h, 1, true, ParamGroup::shared));
            o_.enc_w2.push_back(add_block("enc_w2" + tag, 1, h, false, ParamGroup::shared));
            o_.enc_b2.push_back(add_block("enc_b2" + tag, 1, 1, true, ParamGroup::shared));
        }
        o_.lat_w = add_block("latent_w", l, w_count, false, ParamGroup::shared);
        o_.lat_b = add_block("latent_b", l, 1, true, ParamGroup::shared);
        for (int w = 0; w < w_count; ++w) {
            const std::string tag = "[" + std::to_string(w) + "]";
            o_.proj_w.push_back(add_block("proj_w" + tag, 1, l, false, ParamGroup::shared));
            o_.proj_b.push_back(add_block("proj_b" + tag, 1, 1, true, ParamGroup::shared));
        }
        for (int w = 0; w < w_count; ++w) {
            const std::string tag = "[" + std::to_string(w) + "]";
            o_.dec_w1.push_back(add_block("dec_w1" + tag, h, 1, false, ParamGroup::pairwise));
            o_.dec_b1.push_back(add_block("dec_b1" + tag, h, 1, true, ParamGroup::pairwise));
            o_.dec_w2.push_back(add_block("dec_w2" + tag, 2, h, false, ParamGroup::pairwise));
            o_.dec_b2.push_back(add_block("dec_b2" + tag, 2, 1, true, ParamGroup::pairwise));
        }
        if (kind_ == VariantKind::fae) {
            o_.glob_w1 = add_block("global_w1", h, w_count, false, ParamGroup::global);
            o_.glob_b1 = add_block("global_b1", h, 1, true, ParamGroup::global);
            o_.glob_w2 = add_block("global_w2", m, h, false, ParamGroup::global);
            o_.glob_b2 = add_block("global_b2", m, 1, true, ParamGroup::global);
        }
    }

    template <typename T>
    void forward_impl(const T* p, const double* x, Activations<T>& a, bool want_pairwise, bool want_global) const {
        using std::tanh;
        const int m = config_.n_modalities;
        const int h = config_.hidden_width;
        const int l = config_.latent();
        const auto uh = static_cast<std::size_t>(h);

        if (kind_ == VariantKind::standard_ae) {
            a.enc_hidden.resize(uh);
            a.latent.resize(static_cast<std::size_t>(l));
            for (int k = 0; k < h; ++k) {
                T s = p[o_.enc_b1[0] + k];
                for (int j = 0; j < m; ++j) s += p[o_.enc_w1[0] + k * m + j] * T(x[j]);
                a.enc_hidden[k] = tanh(s);
            }
            for (int q = 0; q < l; ++q) {
                T s = p[o_.enc_b2[0] + q];
                for (int k = 0; k < h; ++k) s += p[o_.enc_w2[0] + q * h + k] * a.enc_hidden[k];
                a.latent[q] = tanh(s);
            }
            if (!want_global) return;
            a.dec_hidden.resize(uh);
            a.glob_recon.resize(static_cast<std::size_t>(m));
            for (int k = 0; k < h; ++k) {
                T s = p[o_.dec_b1[0] + k];
                for (int q = 0; q < l; ++q) s += p[o_.dec_w1[0] + k * l + q] * a.latent[q];
                a.dec_hidden[k] = tanh(s);
            }
            for (int j = 0; j < m; ++j) {
                T s = p[o_.dec_b2[0] + j];
                for (int k = 0; k < h; ++k) s += p[o_.dec_w2[0] + j * h + k] * a.dec_hidden[k];
                a.glob_recon[j] = s;
            }
            return;
        }

        const auto wc = pairs_.size();
        a.enc_hidden.resize(wc * uh);
        a.enc_out.resize(wc);
        a.latent.resize(static_cast<std::size_t>(l));
        for (std::size_t w = 0; w < wc; ++w) {
            const T xi = T(x[pairs_[w].first]);
            const T xj = T(x[pairs_[w].second]);
            T s2 = p[o_.enc_b2[w]];
            for (int k = 0; k < h; ++k) {
                const T s = p[o_.enc_w1[w] + 2 * k] * xi + p[o_.enc_w1[w] + 2 * k + 1] * xj + p[o_.enc_b1[w] + k];
                const T hk = tanh(s);
                a.enc_hidden[w * uh + k] = hk;
                s2 += p[o_.enc_w2[w] + k] * hk;
            }
            a.enc_out[w] = tanh(s2);
        }
        for (int q = 0; q < l; ++q) {
            T s = p[o_.lat_b + q];
            for (std::size_t w = 0; w < wc; ++w) s += p[o_.lat_w + q * wc + w] * a.enc_out[w];
            a.latent[q] = tanh(s);
        }
        if (!want_pairwise && !want_global) return;

        a.proj.resize(wc);
        for (std::size_t w = 0; w < wc; ++w) {
            T s = p[o_.proj_b[w]];
            for (int q = 0; q < l; ++q) s += p[o_.proj_w[w] + q] * a.latent[q];
            a.proj[w] = tanh(s);
        }
        if (want_pairwise) {
            a.dec_hidden.resize(wc * uh);
            a.pair_recon.resize(2 * wc);
            for (std::size_t w = 0; w < wc; ++w) {
                T r0 = p[o_.dec_b2[w]];
                T r1 = p[o_.dec_b2[w] + 1];
                for (int k = 0; k < h; ++k) {
                    const T g = tanh(p[o_.dec_w1[w] + k] * a.proj[w] + p[o_.dec_b1[w] + k]);
                    a.dec_hidden[w * uh + k] = g;
                    r0 += p[o_.dec_w2[w] + k] * g;
                    r1 += p[o_.dec_w2[w] + h + k] * g;
                }
                a.pair_recon[2 * w] = r0;
                a.pair_recon[2 * w + 1] = r1;
            }
        }
        if (want_global && kind_ == VariantKind::fae) {
            a.glob_hidden.resize(uh);
            a.glob_recon.resize(static_cast<std::size_t>(m));
            for (int k = 0; k < h; ++k) {
                T s = p[o_.glob_b1 + k];
                for (std::size_t w = 0; w < wc; ++w) s += p[o_.glob_w1 + k * wc + w] * a.proj[w];
                a.glob_hidden[k] = tanh(s);
            }
            for (int j = 0; j < m; ++j) {
                T s = p[o_.glob_b2 + j];
                for (int k = 0; k < h; ++k) s += p[o_.glob_w2 + j * h + k] * a.glob_hidden[k];
                a.glob_recon[j] = s;
            }
        }
    }

    void accumulate_gradient(const Matrix& batch, LossKind which, std::vector<double>& grad) const {
        require(batch.rows() > 0, ErrorCode::empty_input, "gradient on empty batch");
        if (kind_ == VariantKind::baseline) return;
        const bool pairwise = which == LossKind::pairwise;
        if (pairwise && !has_pairwise_path()) return;
        if (!pairwise && kind_ == VariantKind::ensemble_ae) return;

        const int m = config_.n_modalities;
        const int h = config_.hidden_width;
        const int l = config_.latent();
        const auto uh = static_cast<std::size_t>(h);
        const double* p = params_.data();
        double* g = grad.data();
        Activations<double> a;

        if (kind_ == VariantKind::standard_ae) {
            const double scale = 2.0 / (static_cast<double>(m) * static_cast<double>(batch.rows()));
            std::vector<double> d_dh(uh), d_lat(static_cast<std::size_t>(l)), d_eh(uh);
            for (Eigen::Index r = 0; r < batch.rows(); ++r) {
                const double* x = batch.row(r).data();
                forward_impl<double>(p, x, a, false, true);
                std::fill(d_dh.begin(), d_dh.end(), 0.0);
                for (int j = 0; j < m; ++j) {
                    const double dy = scale * (a.glob_recon[j] - x[j]);
                    g[o_.dec_b2[0] + j] += dy;
                    for (int k = 0; k < h; ++k) {
                        g[o_.dec_w2[0] + j * h + k] += dy * a.dec_hidden[k];
                        d_dh[k] += dy * p[o_.dec_w2[0] + j * h + k];
                    }
                }
                std::fill(d_lat.begin(), d_lat.end(), 0.0);
                for (int k = 0; k < h; ++k) {
                    const double da = d_dh[k] * (1.0 - a.dec_hidden[k] * a.dec_hidden[k]);
                    g[o_.dec_b1[0] + k] += da;
                    for (int q = 0; q < l; ++q) {
                        g[o_.dec_w1[0] + k * l + q] += da * a.latent[q];
                        d_lat[q] += da * p[o_.dec_w1[0] + k * l + q];
                    }
                }
                std::fill(d_eh.begin(), d_eh.end(), 0.0);
                for (int q = 0; q < l; ++q) {
                    const double da = d_lat[q] * (1.0 - a.latent[q] * a.latent[q]);
                    g[o_.enc_b2[0] + q] += da;
                    for (int k = 0; k < h; ++k) {
                        g[o_.enc_w2[0] + q * h + k] += da * a.enc_hidden[k];
                        d_eh[k] += da * p[o_.enc_w2[0] + q * h + k];
                    }
                }
                for (int k = 0; k < h; ++k) {
                    const double da = d_eh[k] * (1.0 - a.enc_hidden[k] * a.enc_hidden[k]);
                    g[o_.enc_b1[0] + k] += da;
                    for (int j = 0; j < m; ++j) g[o_.enc_w1[0] + k * m + j] += da * x[j];
                }
            }
            return;
        }

        const auto wc = pairs_.size();
        const double scale = pairwise ? 2.0 / (2.0 * static_cast<double>(wc) * static_cast<double>(batch.rows()))
                                      : 2.0 / (static_cast<double>(m) * static_cast<double>(batch.rows()));
        std::vector<double> d_proj(wc), d_lat(static_cast<std::size_t>(l)), d_enc(wc), d_gh(uh);
        for (Eigen::Index r = 0; r < batch.rows(); ++r) {
            const double* x = batch.row(r).data();
            forward_impl<double>(p, x, a, pairwise, !pairwise);
            std::fill(d_proj.begin(), d_proj.end(), 0.0);
            if (pairwise) {
                for (std::size_t w = 0; w < wc; ++w) {
                    const double dy0 = scale * (a.pair_recon[2 * w] - x[pairs_[w].first]);
                    const double dy1 = scale * (a.pair_recon[2 * w + 1] - x[pairs_[w].second]);
                    g[o_.dec_b2[w]] += dy0;
                    g[o_.dec_b2[w] + 1] += dy1;
                    for (int k = 0; k < h; ++k) {
                        const double gk = a.dec_hidden[w * uh + k];
                        g[o_.dec_w2[w] + k] += dy0 * gk;
                        g[o_.dec_w2[w] + h + k] += dy1 * gk;
                        const double dg = dy0 * p[o_.dec_w2[w] + k] + dy1 * p[o_.dec_w2[w] + h + k];
                        const double da = dg * (1.0 - gk * gk);
                        g[o_.dec_b1[w] + k] += da;
                        g[o_.dec_w1[w] + k] += da * a.proj[w];
                        d_proj[w] += da * p[o_.dec_w1[w] + k];
                    }
                }
            } else {
                std::fill(d_gh.begin(), d_gh.end(), 0.0);
                for (int j = 0; j < m; ++j) {
                    const double dy = scale * (a.glob_recon[j] - x[j]);
                    g[o_.glob_b2 + j] += dy;
                    for (int k = 0; k < h; ++k) {
                        g[o_.glob_w2 + j * h + k] += dy * a.glob_hidden[k];
                        d_gh[k] += dy * p[o_.glob_w2 + j * h + k];
                    }
                }
                for (int k = 0; k < h; ++k) {
                    const double da = d_gh[k] * (1.0 - a.glob_hidden[k] * a.glob_hidden[k]);
                    g[o_.glob_b1 + k] += da;
                    for (std::size_t w = 0; w < wc; ++w) {
                        g[o_.glob_w1 + k * wc + w] += da * a.proj[w];
                        d_proj[w] += da * p[o_.glob_w1 + k * wc + w];
                    }
                }
            }
            // Shared path: projections, latent mixing, pair encoders.
            std::fill(d_lat.begin(), d_lat.end(), 0.0);
            for (std::size_t w = 0; w < wc; ++w) {
                const double da = d_proj[w] * (1.0 - a.proj[w] * a.proj[w]);
                g[o_.proj_b[w]] += da;
                for (int q = 0; q < l; ++q) {
                    g[o_.proj_w[w] + q] += da * a.latent[q];
                    d_lat[q] += da * p[o_.proj_w[w] + q];
                }
            }
            std::fill(d_enc.begin(), d_enc.end(), 0.0);
            for (int q = 0; q < l; ++q) {
                const double da = d_lat[q] * (1.0 - a.latent[q] * a.latent[q]);
                g[o_.lat_b + q] += da;
                for (std::size_t w = 0; w < wc; ++w) {
                    g[o_.lat_w + q * wc + w] += da * a.enc_out[w];
                    d_enc[w] += da * p[o_.lat_w + q * wc + w];
                }
            }
            for (std::size_t w = 0; w < wc; ++w) {
                const double da = d_enc[w] * (1.0 - a.enc_out[w] * a.enc_out[w]);
                g[o_.enc_b2[w]] += da;
                const double xi = x[pairs_[w].first];
                const double xj = x[pairs_[w].second];
                for (int k = 0; k < h; ++k) {
                    const double hk = a.enc_hidden[w * uh + k];
                    g[o_.enc_w2[w] + k] += da * hk;
                    const double dh = da * p[o_.enc_w2[w] + k] * (1.0 - hk * hk);
                    g[o_.enc_b1[w] + k] += dh;
                    g[o_.enc_w1[w] + 2 * k] += dh * xi;
                    g[o_.enc_w1[w] + 2 * k + 1] += dh * xj;
                }
            }
        }
    }

    void adam_step(const std::vector<double>& grad, ParamGroup step) {
        const double b1 = config_.beta1;
        const double b2 = config_.beta2;
        for (const auto& block : blocks_) {
            if (block.group != step && block.group != ParamGroup::shared) {
                continue;
            }
            for (std::size_t k = block.offset; k < block.offset + block.size(); ++k) {
                const int t = ++adam_t_[k];
                adam_m_[k] = b1 * adam_m_[k] + (1.0 - b1) * grad[k];
                adam_v_[k] = b2 * adam_v_[k] + (1.0 - b2) * grad[k] * grad[k];
                const double m_hat = adam_m_[k] / (1.0 - std::pow(b1, t));
                const double v_hat = adam_v_[k] / (1.0 - std::pow(b2, t));
                params_[k] -= config_.learning_rate * m_hat / (std::sqrt(v_hat) + config_.adam_epsilon);
            }
        }
    }

    void record_epoch(const Matrix& pixels, TrainTrace& trace, int epoch) const {
        if (has_pairwise_path()) {
            trace.pairwise.push_back(loss(pixels, LossKind::pairwise));
        }
        if (kind_ == VariantKind::fae || kind_ == VariantKind::standard_ae) {
            trace.global.push_back(loss(pixels, LossKind::global));
        }
        const bool finite = (trace.pairwise.empty() || std::isfinite(trace.pairwise.back())) &&
                            (trace.global.empty() || std::isfinite(trace.global.back()));
        require(finite, ErrorCode::divergence, "training diverged at epoch " + std::to_string(epoch));
    }

    struct Offsets {
        std::vector<std::size_t> enc_w1, enc_b1, enc_w2, enc_b2;
        std::vector<std::size_t> proj_w, proj_b;
        std::vector<std::size_t> dec_w1, dec_b1, dec_w2, dec_b2;
        std::size_t lat_w = 0, lat_b = 0;
        std::size_t glob_w1 = 0, glob_b1 = 0, glob_w2 = 0, glob_b2 = 0;
    };

    VariantKind kind_ = VariantKind::baseline;
    FaeConfig config_;
    std::vector<ModalityPair> pairs_;
    std::vector<ParamBlock> blocks_;
    Offsets o_;
    std::size_t n_params_ = 0;
    std::vector<double> params_;
    std::vector<double> adam_m_, adam_v_;
    std::vector<int> adam_t_;
};

inline FeatureTransformer build_variant(VariantKind kind, const FaeConfig& config) {
    return FeatureTransformer(kind, config);
}

inline FeatureTransformer fae_init(const FaeConfig& config) { return FeatureTransformer(VariantKind::fae, config); }

/// Max relative error between the analytic gradient and central finite differences
/// (evaluated in extended precision) of one loss.
inline double gradient_check(const FeatureTransformer& model, const Matrix& batch, LossKind which,
                             double epsilon = 1e-5) {
    const auto analytic = model.gradient(batch, which);
    std::vector<long double> p(model.params().begin(), model.params().end());
    double worst = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
        const long double saved = p[k];
        p[k] = saved + epsilon;
        const long double plus = model.loss<long double>(batch, which, p.data());
        p[k] = saved - epsilon;
        const long double minus = model.loss<long double>(batch, which, p.data());
        p[k] = saved;
        const double numeric = static_cast<double>((plus - minus) / (2.0L * epsilon));
        const double denom = std::max({std::abs(analytic[k]), std::abs(numeric), 1e-8});
        worst = std::max(worst, std::abs(analytic[k] - numeric) / denom);
    }
    return worst;
}

/// Worst case over both losses.
inline double gradient_check(const FeatureTransformer& model, const Matrix& batch, double epsilon = 1e-5) {
    return std::max(gradient_check(model, batch, LossKind::pairwise, epsilon),
                    gradient_check(model, batch, LossKind::global, epsilon));
}

}  // namespace habitat
