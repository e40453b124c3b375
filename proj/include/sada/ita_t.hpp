#pragma once

// Learnable augmenter e' = e + f(e) with an n-step recurrent-like structure.
// Step i runs a one-hidden-layer tanh MLP on e that emits a per-dimension
// scale w_i(e) and shift b_i(e):
//   h_0 = e,  h_i = e + h_{i-1} (.) w_i(e) + b_i(e),  e' = h_n.
// Trained with L = r * L_id(e', e) + (1 - r) * S(e, G(e')) against a frozen
// generator G; gradients are written out by hand.

#include <cmath>
#include <concepts>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "sada/covariance.hpp"
#include "sada/embedding_store.hpp"
#include "sada/error.hpp"
#include "sada/gisc_losses.hpp"
#include "sada/rng.hpp"

namespace sada {

template <class G>
concept FrozenGenerator = requires(const G& g, const Vector& x) {
    { g.apply(x) } -> std::convertible_to<Vector>;
    { g.vjp(x, x) } -> std::convertible_to<Vector>;
    { g.output_dim() } -> std::convertible_to<Index>;
};

/// G(x) = W x + c. vjp returns the vector-Jacobian product W^T g.
struct LinearGenerator {
    Matrix weight;
    Vector bias;

    Vector apply(const Vector& x) const { return weight * x + bias; }
    Vector vjp(const Vector& /*x*/, const Vector& grad_out) const { return weight.transpose() * grad_out; }
    Index input_dim() const { return weight.cols(); }
    Index output_dim() const { return weight.rows(); }
};

struct StepParams {
    Matrix w_in;     // H x D
    Vector b_in;     // H
    Matrix w_scale;  // D x H
    Vector b_scale;  // D
    Matrix w_shift;  // D x H
    Vector b_shift;  // D
};

struct TinyNet {
    Index dim = 0;
    Index hidden = 0;
    std::vector<StepParams> steps;

    static TinyNet zeros(Index dim, Index hidden, int n_steps = 2) {
        require(n_steps >= 1, ErrorKind::InvalidConfig, "TinyNet needs at least one step");
        require(dim >= 1 && hidden >= 1, ErrorKind::InvalidConfig, "TinyNet dims must be >= 1");
        TinyNet net;
        net.dim = dim;
        net.hidden = hidden;
        for (int i = 0; i < n_steps; ++i) {
            net.steps.push_back(StepParams{Matrix::Zero(hidden, dim), Vector::Zero(hidden), Matrix::Zero(dim, hidden),
                                           Vector::Zero(dim), Matrix::Zero(dim, hidden), Vector::Zero(dim)});
        }
        return net;
    }

    /// Random N(0, trunk_std^2) input layers, zero output heads: still the
    /// identity map, but every parameter receives gradient from the start.
    static TinyNet initialized(Index dim, Index hidden, int n_steps, std::uint64_t seed, double trunk_std) {
        TinyNet net = zeros(dim, hidden, n_steps);
        Rng rng(seed);
        for (auto& s : net.steps) {
            for (Index i = 0; i < s.w_in.size(); ++i) s.w_in.data()[i] = trunk_std * rng.normal();
        }
        return net;
    }

    int n_steps() const { return static_cast<int>(steps.size()); }

    Index parameter_count() const {
        return static_cast<Index>(steps.size()) * (hidden * dim + hidden + 2 * (dim * hidden + dim));
    }

    /// Flat view in step order: w_in, b_in, w_scale, b_scale, w_shift, b_shift
    /// (each matrix column-major).
    Vector flatten() const {
        Vector out(parameter_count());
        Index k = 0;
        auto put = [&](const auto& m) {
            for (Index i = 0; i < m.size(); ++i) out(k++) = m.data()[i];
        };
        for (const auto& s : steps) {
            put(s.w_in);
            put(s.b_in);
            put(s.w_scale);
            put(s.b_scale);
            put(s.w_shift);
            put(s.b_shift);
        }
        return out;
    }

    void unflatten(const Vector& flat) {
        require(flat.size() == parameter_count(), ErrorKind::DimMismatch, "flat parameter vector has wrong size");
        Index k = 0;
        auto take = [&](auto& m) {
            for (Index i = 0; i < m.size(); ++i) m.data()[i] = flat(k++);
        };
        for (auto& s : steps) {
            take(s.w_in);
            take(s.b_in);
            take(s.w_scale);
            take(s.b_scale);
            take(s.w_shift);
            take(s.b_shift);
        }
    }

    bool all_finite() const { return flatten().allFinite(); }
};

/// Forward pass for a single embedding.
inline Vector forward(const TinyNet& net, const Vector& e) {
    require(e.size() == net.dim, ErrorKind::DimMismatch,
            "input dim " + std::to_string(e.size()) + " vs net dim " + std::to_string(net.dim));
    Vector h = e;
    for (const auto& s : net.steps) {
        const Vector z = (s.w_in * e + s.b_in).array().tanh().matrix();
        const Vector w = s.w_scale * z + s.b_scale;
        const Vector b = s.w_shift * z + s.b_shift;
        h = e + h.cwiseProduct(w) + b;
    }
    return h;
}

/// Row-wise forward pass over a B x D batch.
inline Matrix forward(const TinyNet& net, const Matrix& batch) {
    require(batch.cols() == net.dim, ErrorKind::DimMismatch,
            "batch dim " + std::to_string(batch.cols()) + " vs net dim " + std::to_string(net.dim));
    Matrix out(batch.rows(), batch.cols());
    for (Index i = 0; i < batch.rows(); ++i) out.row(i) = forward(net, Vector(batch.row(i).transpose())).transpose();
    return out;
}

struct ItaTLoss {
    double loss = 0.0;
    double l_id = 0.0;    // -min(MSE, cap)
    double s_term = 0.0;  // mean_b S(e_b, G(e'_b))
    double mean_shift = 0.0;  // mean_b |e'_b - e_b|_2
    TinyNet gradient;     // same layout as the net
};

/// Loss and analytic parameter gradients. `id_weight` multiplies L_id (it is
/// r outside warm-up and 0 during warm-up); S is weighted by 1 - r.
template <FrozenGenerator Gen>
ItaTLoss loss_ita_t(const TinyNet& net, const Matrix& batch, const Gen& gen, double r, double id_weight,
                    double distance_cap) {
    require(batch.cols() == net.dim, ErrorKind::DimMismatch, "batch dim does not match the net");
    require(gen.output_dim() == net.dim, ErrorKind::DimMismatch,
            "generator output dim must match the text embedding dim");
    require(batch.rows() >= 1, ErrorKind::DimMismatch, "empty batch");

    const Index batch_size = batch.rows();
    const Index d = net.dim;
    const int n = net.n_steps();

    struct StepCache {
        Vector z, w, b, h_prev;
    };
    std::vector<std::vector<StepCache>> caches(static_cast<std::size_t>(batch_size));
    Matrix outputs(batch_size, d);
    for (Index i = 0; i < batch_size; ++i) {
        const Vector e = batch.row(i).transpose();
        auto& cache = caches[static_cast<std::size_t>(i)];
        cache.resize(static_cast<std::size_t>(n));
        Vector h = e;
        for (int k = 0; k < n; ++k) {
            const auto& s = net.steps[static_cast<std::size_t>(k)];
            auto& c = cache[static_cast<std::size_t>(k)];
            c.z = (s.w_in * e + s.b_in).array().tanh().matrix();
            c.w = s.w_scale * c.z + s.b_scale;
            c.b = s.w_shift * c.z + s.b_shift;
            c.h_prev = h;
            h = e + h.cwiseProduct(c.w) + c.b;
        }
        outputs.row(i) = h.transpose();
    }

    ItaTLoss out;
    out.gradient = TinyNet::zeros(net.dim, net.hidden, n);

    const Matrix diff = outputs - batch;
    const double mse = diff.squaredNorm() / static_cast<double>(diff.size());
    const bool capped = mse >= distance_cap;
    out.l_id = -std::min(mse, distance_cap);
    for (Index i = 0; i < batch_size; ++i) out.mean_shift += diff.row(i).norm();
    out.mean_shift /= static_cast<double>(batch_size);

    const double s_weight = 1.0 - r;
    const double inv_b = 1.0 / static_cast<double>(batch_size);
    for (Index i = 0; i < batch_size; ++i) {
        const Vector e = batch.row(i).transpose();
        const Vector y = outputs.row(i).transpose();
        const Vector g = gen.apply(y);
        out.s_term += semantic_consistency(e, g) * inv_b;

        Vector grad_y = s_weight * inv_b * gen.vjp(y, grad_semantic_wrt_image(e, g));
        if (!capped && id_weight != 0.0) {
            grad_y += id_weight * (-2.0 / static_cast<double>(diff.size())) * diff.row(i).transpose();
        }

        // backward through h_k = e + h_{k-1} (.) w_k + b_k
        Vector grad_h = grad_y;
        const auto& cache = caches[static_cast<std::size_t>(i)];
        for (int k = n - 1; k >= 0; --k) {
            const auto& s = net.steps[static_cast<std::size_t>(k)];
            const auto& c = cache[static_cast<std::size_t>(k)];
            auto& gs = out.gradient.steps[static_cast<std::size_t>(k)];
            const Vector grad_w = grad_h.cwiseProduct(c.h_prev);
            const Vector& grad_b = grad_h;
            gs.w_scale.noalias() += grad_w * c.z.transpose();
            gs.b_scale += grad_w;
            gs.w_shift.noalias() += grad_b * c.z.transpose();
            gs.b_shift += grad_b;
            const Vector grad_z = s.w_scale.transpose() * grad_w + s.w_shift.transpose() * grad_b;
            const Vector grad_a = grad_z.cwiseProduct((1.0 - c.z.array().square()).matrix());
            gs.w_in.noalias() += grad_a * e.transpose();
            gs.b_in += grad_a;
            grad_h = grad_h.cwiseProduct(c.w);  // into h_{k-1}; unused once k == 0
        }
    }
    out.loss = id_weight * out.l_id + s_weight * out.s_term;
    return out;
}

struct ItaTTrainConfig {
    double r = 0.2;
    double learning_rate = 0.1;
    // Divide the step by mean(e^2) over the corpus, so one learning rate
    // behaves the same for embeddings of any scale.
    bool scale_step = true;
    int epochs = 40;
    int warmup_epochs = 0;
    // <= 0 selects the default 100 * reference_scale^2.
    double distance_cap = 0.0;
    Index batch_size = 0;  // 0 = full batch
    std::uint64_t seed = 0;
};

inline void validate(const ItaTTrainConfig& cfg) {
    require(cfg.r >= 0.0 && cfg.r < 1.0, ErrorKind::InvalidConfig, "r must lie in [0, 1)");
    require(cfg.learning_rate > 0.0 && std::isfinite(cfg.learning_rate), ErrorKind::InvalidConfig,
            "learning rate must be positive");
    require(cfg.epochs >= 0 && cfg.warmup_epochs >= 0, ErrorKind::InvalidConfig, "epochs must be >= 0");
    require(cfg.batch_size >= 0, ErrorKind::InvalidConfig, "batch size must be >= 0");
}

struct ItaTEpoch {
    double l_ita_t = 0.0;
    double l_id = 0.0;
    double s_term = 0.0;
    double mean_shift = 0.0;
};

struct ItaTTrainTrace {
    std::vector<ItaTEpoch> epochs;
    double reference_scale = 0.0;  // mean(beta * d(C_ss|r))
    double distance_cap = 0.0;
    bool collapse_flag = false;
    bool aborted = false;  // non-finite loss, parameters or outputs

    double final_mean_shift() const {
        return epochs.empty() ? 0.0 : epochs.back().mean_shift;
    }
};

/// mean(beta * d(C_ss|r)): the ITA_C shift scale the collapse detector and
/// the default distance cap are measured against.
inline double ita_c_reference_scale(const Vector& d_ss_given_r, double beta) {
    require(d_ss_given_r.size() > 0, ErrorKind::DimMismatch, "empty variance vector");
    return beta * d_ss_given_r.mean();
}

/// Gradient descent on the augmenter only; `gen` is never modified. The
/// trace records the full-corpus loss after every epoch.
template <FrozenGenerator Gen>
ItaTTrainTrace train_ita_t(TinyNet& net, const Matrix& text, const Gen& gen, const ItaTTrainConfig& cfg,
                           double reference_scale) {
    validate(cfg);
    require(reference_scale > 0.0 && std::isfinite(reference_scale), ErrorKind::InvalidConfig,
            "reference scale must be positive");
    ItaTTrainTrace trace;
    trace.reference_scale = reference_scale;
    trace.distance_cap = cfg.distance_cap > 0.0 ? cfg.distance_cap : 100.0 * reference_scale * reference_scale;

    const Index n = text.rows();
    const Index batch = cfg.batch_size == 0 ? n : std::min(cfg.batch_size, n);
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    Rng rng(cfg.seed);
    double step_size = cfg.learning_rate;
    if (cfg.scale_step) {
        const double power = text.squaredNorm() / static_cast<double>(text.size());
        require(power > 0.0, ErrorKind::InvalidConfig, "text embeddings are all zero");
        step_size /= power;
    }

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double id_weight = epoch < cfg.warmup_epochs ? 0.0 : cfg.r;
        if (batch < n) {
            for (Index i = n - 1; i > 0; --i) {
                const auto j = static_cast<Index>(rng.below(static_cast<std::uint64_t>(i + 1)));
                std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
            }
        }
        for (Index start = 0; start < n; start += batch) {
            const Index len = std::min(batch, n - start);
            Matrix mb(len, text.cols());
            for (Index i = 0; i < len; ++i) mb.row(i) = text.row(order[static_cast<std::size_t>(start + i)]);
            const ItaTLoss step = loss_ita_t(net, mb, gen, cfg.r, id_weight, trace.distance_cap);
            if (!std::isfinite(step.loss)) {
                trace.aborted = true;
                break;
            }
            net.unflatten(net.flatten() - step_size * step.gradient.flatten());
            if (!net.all_finite()) {
                trace.aborted = true;
                break;
            }
        }
        if (trace.aborted) break;

        const ItaTLoss full = loss_ita_t(net, text, gen, cfg.r, id_weight, trace.distance_cap);
        if (!std::isfinite(full.loss) || !std::isfinite(full.mean_shift)) {
            trace.aborted = true;
            break;
        }
        trace.epochs.push_back({full.loss, full.l_id, full.s_term, full.mean_shift});
    }
    trace.collapse_flag = trace.aborted || trace.final_mean_shift() > 10.0 * reference_scale;
    return trace;
}

}  // namespace sada
