#pragma once

// A synthetic linear text-to-image world used to check the propositions as
// measurable experiments:
//   z ~ N(0, I_L),  e_s = M_s z + n_s,  r = M_r z + n_r,  E_I : raw -> semantic.
// Generators are linear maps from text embeddings to raw image space.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sada/covariance.hpp"
#include "sada/embedding_store.hpp"
#include "sada/error.hpp"
#include "sada/gisc_losses.hpp"
#include "sada/ita_c.hpp"
#include "sada/ita_t.hpp"
#include "sada/rng.hpp"

namespace sada {

struct WorldConfig {
    Index latent_dim = 4;
    Index text_dim = 8;
    Index image_dim = 8;     // raw image space
    Index semantic_dim = 8;  // image encoder output
    Index samples = 1000;
    double signal_scale = 10.0;  // per-coordinate std of the latent-driven part
    double noise = 0.1;          // noise std relative to signal_scale, both modalities
    double encoder_gain = 0.25;  // singular value of E_I
    bool identity_encoder = false;
    bool aligned = false;  // M_r = M_s: text and raw image share one embedding space
    std::uint64_t seed = 7;
};

struct LinearWorld {
    WorldConfig config;
    Matrix text_map;         // D_s x L
    Matrix image_map;        // D_r x L
    Matrix generator_truth;  // D_r x D_s, M_r M_s^+
    Matrix encoder;          // D_e x D_r

    /// Fresh pairs from the world; deterministic in `seed`.
    PairedCorpus sample(Index count, std::uint64_t seed) const {
        require(count >= 2, ErrorKind::BadConfig, "sample count must be >= 2");
        Rng rng(seed);
        const Index l = config.latent_dim;
        Matrix text(count, config.text_dim);
        Matrix image(count, config.image_dim);
        Vector z(l);
        for (Index i = 0; i < count; ++i) {
            for (Index k = 0; k < l; ++k) z(k) = rng.normal();
            Vector s = text_map * z;
            Vector r = image_map * z;
            for (Index j = 0; j < s.size(); ++j) s(j) += noise_std() * rng.normal();
            for (Index j = 0; j < r.size(); ++j) r(j) += noise_std() * rng.normal();
            text.row(i) = s.transpose();
            image.row(i) = r.transpose();
        }
        Manifest m;
        m.encoder_name = "linear-world";
        m.source_note = "synthetic linear world, seed " + std::to_string(seed);
        return make_corpus(std::move(text), std::move(image), std::move(m));
    }

    double noise_std() const { return config.noise * config.signal_scale; }

    /// Image embeddings pushed through the encoder: N x D_e.
    Matrix encode(const Matrix& raw_images) const { return raw_images * encoder.transpose(); }

    /// The corpus seen in semantic space (text, E_I(image)).
    PairedCorpus semantic_corpus(const PairedCorpus& corpus) const {
        Manifest m = corpus.manifest;
        m.image_file = "image_semantic.f32";
        return make_corpus(corpus.text.data, encode(corpus.image.data), std::move(m));
    }
};

inline Index matrix_rank(const Matrix& m, double rel_tol = 1e-10) {
    Eigen::JacobiSVD<Matrix> svd(m);
    const auto& sv = svd.singularValues();
    if (sv.size() == 0) return 0;
    const double cutoff = rel_tol * sv(0);
    Index rank = 0;
    for (Index i = 0; i < sv.size(); ++i) rank += sv(i) > cutoff ? 1 : 0;
    return rank;
}

inline bool full_row_rank(const Matrix& m) { return m.rows() <= m.cols() && matrix_rank(m) == m.rows(); }

inline Matrix gaussian_matrix(Index rows, Index cols, double std, Rng& rng) {
    Matrix m(rows, cols);
    for (Index j = 0; j < cols; ++j) {
        for (Index i = 0; i < rows; ++i) m(i, j) = std * rng.normal();
    }
    return m;
}

inline std::pair<LinearWorld, PairedCorpus> generate_world(const WorldConfig& config) {
    require(config.latent_dim >= 1 && config.text_dim >= 1 && config.image_dim >= 1 && config.semantic_dim >= 1,
            ErrorKind::BadConfig, "world dims must be >= 1");
    require(config.samples >= 2, ErrorKind::BadConfig, "world sample count must be >= 2");
    require(config.noise >= 0.0 && std::isfinite(config.noise), ErrorKind::BadConfig, "noise must be >= 0");
    require(config.signal_scale > 0.0 && std::isfinite(config.signal_scale), ErrorKind::BadConfig,
            "signal_scale must be > 0");
    require(config.encoder_gain > 0.0 && std::isfinite(config.encoder_gain), ErrorKind::BadConfig,
            "encoder_gain must be > 0");
    require(config.semantic_dim <= config.image_dim, ErrorKind::BadConfig,
            "encoder needs semantic_dim <= image_dim for full row rank");
    require(!config.identity_encoder || config.semantic_dim == config.image_dim, ErrorKind::BadConfig,
            "identity encoder needs semantic_dim == image_dim");
    require(!config.aligned || config.text_dim == config.image_dim, ErrorKind::BadConfig,
            "aligned world needs text_dim == image_dim");

    LinearWorld world;
    world.config = config;
    Rng rng(derive_seed(config.seed, 0));
    const double map_std = config.signal_scale / std::sqrt(static_cast<double>(config.latent_dim));
    world.text_map = gaussian_matrix(config.text_dim, config.latent_dim, map_std, rng);
    world.image_map = gaussian_matrix(config.image_dim, config.latent_dim, map_std, rng);
    if (config.aligned) world.image_map = world.text_map;
    if (config.identity_encoder) {
        world.encoder = Matrix::Identity(config.semantic_dim, config.image_dim);
    } else {
        // Haar-random orthonormal rows: full row rank with unit singular values.
        const Matrix g = gaussian_matrix(config.image_dim, config.semantic_dim, 1.0, rng);
        Eigen::HouseholderQR<Matrix> qr(g);
        const Matrix q = qr.householderQ() * Matrix::Identity(config.image_dim, config.semantic_dim);
        Vector signs = qr.matrixQR().diagonal().head(config.semantic_dim).cwiseSign();
        world.encoder = config.encoder_gain * (q * signs.asDiagonal()).transpose();
    }
    world.generator_truth = world.image_map * world.text_map.completeOrthogonalDecomposition().pseudoInverse();
    PairedCorpus corpus = world.sample(config.samples, derive_seed(config.seed, 1));
    return {std::move(world), std::move(corpus)};
}

// ---------------------------------------------------------------------------
// Report

struct Prop1Result {
    double trace_cov_unaug = 0.0;
    double trace_cov_aug = 0.0;
    int n_seeds = 0;
    double beta = 0.0;
    bool pass = false;
};

struct Prop3Result {
    double raw_space_variance_with_gisc = 0.0;
    double raw_space_variance_without = 0.0;
    double relative_change = 0.0;
    bool pass = false;
};

struct Quantiles {
    double p50 = 0.0;
    double p95 = 0.0;
    double max = 0.0;
};

struct Prop4Result {
    Quantiles lipschitz_with_lr;
    Quantiles lipschitz_without_lr;
    Vector bound;  // Lambda = beta * d(C_rr|s)
    double lipschitz_constant = 0.0;  // K: largest observed ratio with L_r
    double max_bound_excess = 0.0;    // max over eps*-pairs and dims of |df| - Lambda
    double bound_tolerance = 0.0;     // 0.05 * |Lambda|_inf
    Index pairs_used = 0;
    bool pass = false;
};

struct Prop5Result {
    double l_db = 0.0;
    double l_r = 0.0;
    double l_r_threshold = 0.0;
    double control_l_db = 0.0;
    double control_l_r = 0.0;
    bool pass = false;
};

enum class CollapseVerdict { healthy, collapse_similar, collapse_different, both };

inline constexpr std::string_view to_string(CollapseVerdict v) {
    switch (v) {
        case CollapseVerdict::healthy: return "healthy";
        case CollapseVerdict::collapse_similar: return "collapse_similar";
        case CollapseVerdict::collapse_different: return "collapse_different";
        case CollapseVerdict::both: return "both";
    }
    return "unknown";
}

struct CollapseResult {
    double min_pairwise_output_distance = 0.0;  // min |df|
    double similar_threshold = 0.0;             // 1e-3 * |Lambda|
    double max_ratio = 0.0;                     // max |df| / |de|
    double reference_lipschitz = 0.0;           // K_ref = |Lambda| / min nonzero |de|
    double different_threshold = 0.0;           // 10 * K_ref
    CollapseVerdict verdict = CollapseVerdict::healthy;
};

struct TestbedReport {
    Prop1Result prop1;
    Prop3Result prop3;
    Prop4Result prop4;
    Prop5Result prop5;
    CollapseResult collapse;  // the L_r-trained generator
    CollapseResult collapse_baseline;  // the generator trained without L_r

    bool all_pass() const { return prop1.pass && prop3.pass && prop4.pass && prop5.pass; }
};

// ---------------------------------------------------------------------------
// prop1: augmentation shrinks the covariance of the fitted generator.

/// Ridge least squares on the mean loss: A = argmin (1/N)|Y - X A^T|^2 + lambda |A|^2.
/// The mean scaling makes the fit invariant to row duplication.
inline Matrix fit_linear_map(const Matrix& inputs, const Matrix& targets, double ridge) {
    require(inputs.rows() == targets.rows(), ErrorKind::DimMismatch, "fit_linear_map row counts differ");
    const double n = static_cast<double>(inputs.rows());
    const Matrix gram = inputs.transpose() * inputs / n + ridge * Matrix::Identity(inputs.cols(), inputs.cols());
    const Matrix cross = inputs.transpose() * targets / n;
    return gram.llt().solve(cross).transpose();
}

inline double trace_of_sample_covariance(const std::vector<Vector>& samples) {
    const auto n = static_cast<double>(samples.size());
    Vector mean = Vector::Zero(samples.front().size());
    for (const auto& s : samples) mean += s;
    mean /= n;
    double trace = 0.0;
    for (const auto& s : samples) trace += (s - mean).squaredNorm();
    return trace / (n - 1.0);
}

struct Prop1Config {
    int n_seeds = 100;
    double fit_ridge = 1e-6;
    unsigned threads = 1;
};

inline Prop1Result run_prop1(const LinearWorld& world, const PairedCorpus& corpus, const AugmentationSpec& spec,
                             const Prop1Config& cfg = {}) {
    require(cfg.n_seeds >= 20, ErrorKind::TooFewSeeds, "need at least 20 seeds, got " + std::to_string(cfg.n_seeds));
    validate(spec);
    const Index n = corpus.count();
    std::vector<Vector> unaug(static_cast<std::size_t>(cfg.n_seeds));
    std::vector<Vector> aug(static_cast<std::size_t>(cfg.n_seeds));

    auto run_seed = [&](int s) {
        const auto stream = static_cast<std::uint64_t>(s);
        const PairedCorpus draw = world.sample(n, derive_seed(spec.seed, 2 * stream));
        const CovarianceSet cov = estimate_covariances(draw);
        const ConditionalDiagonals cond =
            conditional_covariance(cov, ConditionalTarget::ss_given_r, {.keep_full = false});
        AugmentationSpec seeded = spec;
        seeded.seed = derive_seed(spec.seed, 2 * stream + 1);
        const AugmentedBatch augmented = augment(draw.text.data, cond, seeded);

        const Matrix a_plain = fit_linear_map(draw.text.data, draw.image.data, cfg.fit_ridge);
        Matrix inputs(2 * n, draw.text.dim());
        inputs << draw.text.data, augmented.augmented;
        Matrix targets(2 * n, draw.image.dim());
        targets << draw.image.data, draw.image.data;
        const Matrix a_aug = fit_linear_map(inputs, targets, cfg.fit_ridge);
        unaug[static_cast<std::size_t>(s)] = Eigen::Map<const Vector>(a_plain.data(), a_plain.size());
        aug[static_cast<std::size_t>(s)] = Eigen::Map<const Vector>(a_aug.data(), a_aug.size());
    };

    const unsigned workers = std::max(1u, std::min<unsigned>(cfg.threads, static_cast<unsigned>(cfg.n_seeds)));
    if (workers == 1) {
        for (int s = 0; s < cfg.n_seeds; ++s) run_seed(s);
    } else {
        std::vector<std::jthread> pool;
        for (unsigned w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                for (int s = static_cast<int>(w); s < cfg.n_seeds; s += static_cast<int>(workers)) run_seed(s);
            });
        }
    }

    Prop1Result out;
    out.n_seeds = cfg.n_seeds;
    out.beta = spec.beta;
    out.trace_cov_unaug = trace_of_sample_covariance(unaug);
    out.trace_cov_aug = trace_of_sample_covariance(aug);
    out.pass = out.trace_cov_aug <= out.trace_cov_unaug;
    return out;
}

/// Affine ridge fit image ~ W text + c, as a frozen generator.
inline LinearGenerator fit_affine_generator(const PairedCorpus& corpus, double ridge = 1e-9) {
    const Index n = corpus.count();
    const Index ds = corpus.text.dim();
    Matrix inputs(n, ds + 1);
    inputs << corpus.text.data, Matrix::Ones(n, 1);
    const Matrix a = fit_linear_map(inputs, corpus.image.data, ridge);
    return LinearGenerator{a.leftCols(ds), a.col(ds)};
}

// ---------------------------------------------------------------------------
// ITA_T on the testbed: an aligned world (shared text/image space) and a
// frozen affine generator fitted to it.

struct ItaTSetup {
    LinearWorld world;
    PairedCorpus corpus;
    LinearGenerator generator;
    double reference_scale = 0.0;  // mean(beta * d(C_ss|r))
};

inline ItaTSetup ita_t_setup(WorldConfig config, double beta = 0.05) {
    config.aligned = true;
    auto [world, corpus] = generate_world(config);
    const ConditionalDiagonals cond =
        conditional_covariance(estimate_covariances(corpus), ConditionalTarget::ss_given_r, {.keep_full = false});
    ItaTSetup out{std::move(world), std::move(corpus), {}, 0.0};
    out.generator = fit_affine_generator(out.corpus);
    out.reference_scale = ita_c_reference_scale(cond.ss_given_r(), beta);
    return out;
}

inline ItaTTrainTrace run_ita_t(const ItaTSetup& setup, const ItaTTrainConfig& cfg, std::uint64_t init_seed = 1,
                                double trunk_std = 0.1) {
    const Index d = setup.corpus.text.dim();
    TinyNet net = TinyNet::initialized(d, 4 * d, 2, init_seed, trunk_std);
    return train_ita_t(net, setup.corpus.text.data, setup.generator, cfg, setup.reference_scale);
}

// ---------------------------------------------------------------------------
// Generators trained by gradient descent on S through the encoder, with and
// without L_r.

struct GeneratorTrainConfig {
    int epochs = 1000;
    double learning_rate = 0.5;  // divided by (1 + L_r curvature bound) for the L_r generator
    double beta = 0.05;
    // L_r weight. <= 0 selects varphi_scale / (max(Lambda_s^2) * |E_I|^2), so
    // the largest L_r curvature is about 2 * varphi_scale whatever the world scale.
    double varphi = 0.0;
    double varphi_scale = 1e4;
    double init_std = 0.0;  // <= 0: start from the ridge least-squares fit
    std::uint64_t seed = 11;
};

struct TrainedGenerators {
    LinearGenerator with_lr;     // raw space
    LinearGenerator without_lr;  // raw space
    double varphi = 0.0;
};

/// Composition E_I o G as a generator into semantic space.
inline LinearGenerator semantic_generator(const LinearWorld& world, const LinearGenerator& raw) {
    return LinearGenerator{world.encoder * raw.weight, world.encoder * raw.bias};
}

inline LinearGenerator train_linear_generator(const LinearWorld& world, const PairedCorpus& corpus,
                                              const ConditionalDiagonals& cond, const GeneratorTrainConfig& cfg,
                                              bool use_lr, double varphi) {
    const Matrix& text = corpus.text.data;
    const Matrix semantic_real = world.encode(corpus.image.data);
    const Index n = text.rows();
    const Index dr = world.config.image_dim;

    LinearGenerator gen;
    if (cfg.init_std > 0.0) {
        Rng init(derive_seed(cfg.seed, 0));
        gen.weight = gaussian_matrix(dr, text.cols(), cfg.init_std, init);
    } else {
        gen.weight = fit_linear_map(text, corpus.image.data, 1e-6);
    }
    gen.bias = Vector::Zero(dr);

    const Vector& d_ss = cond.ss_given_r();
    const Vector& d_rr = cond.rr_given_s();
    // epsilon* is drawn per text dim and scales d(C_rr|s) elementwise
    require(!use_lr || d_rr.size() == text.cols(), ErrorKind::DimMismatch,
            "L_r training needs text_dim == semantic_dim, got " + std::to_string(text.cols()) + " and " +
                std::to_string(d_rr.size()));
    const Matrix& enc = world.encoder;
    const double inv_n = 1.0 / static_cast<double>(n);
    const double encoder_norm = Eigen::JacobiSVD<Matrix>(enc).singularValues()(0);
    const double lr_curvature =
        use_lr ? 2.0 * varphi * (cfg.beta * d_ss).cwiseAbs2().maxCoeff() * encoder_norm * encoder_norm : 0.0;
    const double step = cfg.learning_rate / (1.0 + lr_curvature);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Matrix grad_w = Matrix::Zero(gen.weight.rows(), gen.weight.cols());
        Vector grad_c = Vector::Zero(dr);
        AugmentedBatch pairs;
        if (use_lr) {
            const AugmentationSpec spec{cfg.beta, PerturbationMode::rademacher,
                                        derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch) + 1)};
            pairs = augment(text, d_ss, spec);
        }
        for (Index i = 0; i < n; ++i) {
            const Vector e = text.row(i).transpose();
            const Vector f = enc * gen.apply(e);
            const Vector g_img = enc.transpose() * grad_semantic_wrt_image(semantic_real.row(i).transpose(), f);
            grad_w.noalias() += inv_n * g_img * e.transpose();
            grad_c += inv_n * g_img;
            if (use_lr) {
                const Vector de = (pairs.augmented.row(i) - pairs.original.row(i)).transpose();
                const LrTarget target{pairs.epsilon.row(i).transpose(), cfg.beta, d_rr, varphi};
                const Vector df = enc * (gen.weight * de);
                const Vector g_df = grad_loss_r(Vector::Zero(df.size()), df, target);
                grad_w.noalias() += inv_n * (enc.transpose() * g_df) * de.transpose();
            }
        }
        gen.weight -= step * grad_w;
        gen.bias -= step * grad_c;
        require(gen.weight.allFinite() && gen.bias.allFinite(), ErrorKind::NonFiniteValue,
                "generator training diverged at epoch " + std::to_string(epoch) + "; lower learning_rate");
    }
    return gen;
}

inline double default_varphi(const ConditionalDiagonals& cond, const GeneratorTrainConfig& cfg,
                             double encoder_norm) {
    if (cfg.varphi > 0.0) return cfg.varphi;
    const Vector lambda_s = cfg.beta * cond.ss_given_r();
    const double peak = lambda_s.cwiseAbs2().maxCoeff() * encoder_norm * encoder_norm;
    require(peak > 0.0, ErrorKind::NonPositiveVariance, "d(C_ss|r) is identically zero");
    return cfg.varphi_scale / peak;
}

inline TrainedGenerators train_generators(const LinearWorld& world, const PairedCorpus& corpus,
                                          const ConditionalDiagonals& cond, const GeneratorTrainConfig& cfg) {
    TrainedGenerators out;
    out.varphi = default_varphi(cond, cfg, Eigen::JacobiSVD<Matrix>(world.encoder).singularValues()(0));
    out.with_lr = train_linear_generator(world, corpus, cond, cfg, true, out.varphi);
    out.without_lr = train_linear_generator(world, corpus, cond, cfg, false, out.varphi);
    return out;
}

// ---------------------------------------------------------------------------
// prop3: a semantic-space constraint changes the raw-space outputs.

inline double raw_residual_variance(const LinearGenerator& gen, const PairedCorpus& corpus) {
    double total = 0.0;
    for (Index i = 0; i < corpus.count(); ++i) {
        total += (gen.apply(corpus.text.data.row(i).transpose()) - corpus.image.data.row(i).transpose()).squaredNorm();
    }
    return total / static_cast<double>(corpus.count() * corpus.image.dim());
}

inline Prop3Result run_prop3(const LinearWorld& world, const PairedCorpus& corpus, const TrainedGenerators& gens) {
    require(full_row_rank(world.encoder), ErrorKind::RankDeficientEncoder, "image encoder is not full row rank");
    Prop3Result out;
    out.raw_space_variance_with_gisc = raw_residual_variance(gens.with_lr, corpus);
    out.raw_space_variance_without = raw_residual_variance(gens.without_lr, corpus);
    out.relative_change = std::abs(out.raw_space_variance_with_gisc - out.raw_space_variance_without) /
                          out.raw_space_variance_without;
    out.pass = out.relative_change >= 0.01;
    return out;
}

inline Prop3Result run_prop3(const LinearWorld& world, const PairedCorpus& corpus, const GeneratorTrainConfig& cfg) {
    require(full_row_rank(world.encoder), ErrorKind::RankDeficientEncoder, "image encoder is not full row rank");
    const CovarianceSet cov = estimate_covariances(world.semantic_corpus(corpus));
    const ConditionalDiagonals cond = conditional_diagonals(cov, {.keep_full = false});
    return run_prop3(world, corpus, train_generators(world, corpus, cond, cfg));
}

// ---------------------------------------------------------------------------
// prop4: L_r bounds the semantic shift, giving a Lipschitz constant.

inline Quantiles quantiles(std::vector<double> values) {
    require(!values.empty(), ErrorKind::DegenerateShift, "no ratios to summarize");
    std::sort(values.begin(), values.end());
    auto at = [&](double q) {
        const double pos = q * static_cast<double>(values.size() - 1);
        const auto lo = static_cast<std::size_t>(std::floor(pos));
        const auto hi = std::min(lo + 1, values.size() - 1);
        const double frac = pos - static_cast<double>(lo);
        return values[lo] + frac * (values[hi] - values[lo]);
    };
    return {at(0.5), at(0.95), values.back()};
}

/// |E_I G(e') - E_I G(e)| / |e' - e| for every pair with e' != e.
inline std::vector<double> lipschitz_ratios(const LinearGenerator& semantic_gen, const AugmentedBatch& pairs) {
    std::vector<double> ratios;
    for (Index i = 0; i < pairs.original.rows(); ++i) {
        const Vector e = pairs.original.row(i).transpose();
        const Vector ep = pairs.augmented.row(i).transpose();
        const double de = (ep - e).norm();
        if (de == 0.0) continue;
        ratios.push_back((semantic_gen.apply(ep) - semantic_gen.apply(e)).norm() / de);
    }
    return ratios;
}

inline Prop4Result run_prop4(const LinearWorld& world, const TrainedGenerators& gens, const Matrix& text,
                             const ConditionalDiagonals& cond, const AugmentationSpec& spec) {
    const LinearGenerator with_lr = semantic_generator(world, gens.with_lr);
    const LinearGenerator without_lr = semantic_generator(world, gens.without_lr);

    const AugmentedBatch pairs = augment(text, cond, spec);
    const auto ratios_with = lipschitz_ratios(with_lr, pairs);
    const auto ratios_without = lipschitz_ratios(without_lr, pairs);
    require(!ratios_with.empty(), ErrorKind::DegenerateShift, "every ITA_C pair had e' == e");

    Prop4Result out;
    out.pairs_used = static_cast<Index>(ratios_with.size());
    out.lipschitz_with_lr = quantiles(ratios_with);
    out.lipschitz_without_lr = quantiles(ratios_without);
    out.lipschitz_constant = out.lipschitz_with_lr.max;
    out.bound = spec.beta * cond.rr_given_s();
    out.bound_tolerance = 0.05 * out.bound.cwiseAbs().maxCoeff();

    AugmentationSpec star = spec;
    star.mode = PerturbationMode::rademacher;
    star.seed = derive_seed(spec.seed, 1);
    const AugmentedBatch star_pairs = augment(text, cond, star);
    out.max_bound_excess = -std::numeric_limits<double>::infinity();
    for (Index i = 0; i < star_pairs.original.rows(); ++i) {
        const Vector df = with_lr.apply(star_pairs.augmented.row(i).transpose()) -
                          with_lr.apply(star_pairs.original.row(i).transpose());
        out.max_bound_excess = std::max(out.max_bound_excess, (df.cwiseAbs() - out.bound).maxCoeff());
    }
    out.pass = out.lipschitz_with_lr.p95 < out.lipschitz_without_lr.p95 &&
               out.max_bound_excess <= out.bound_tolerance;
    return out;
}

// ---------------------------------------------------------------------------
// prop5: L_r is tighter than L_db.

inline Prop5Result run_prop5(const Vector& d = Vector::Ones(2), double beta = 1.0, double varphi = 1.0) {
    Prop5Result out;
    const TightnessWitness witness = tightness_witness(d, beta, varphi);
    out.l_db = witness.l_db;
    out.l_r = witness.l_r;
    out.l_r_threshold = 0.99 * varphi * (beta * d).squaredNorm();
    const TightnessWitness control = tightness_witness(d, beta, varphi, std::nullopt, 1.0);
    out.control_l_db = control.l_db;
    out.control_l_r = control.l_r;
    out.pass = out.l_db <= 1e-6 && out.l_r >= out.l_r_threshold;
    return out;
}

// ---------------------------------------------------------------------------
// Collapse detectors (artifact-defined thresholds: 1e-3 and 10x).

template <FrozenGenerator Gen>
CollapseResult collapse_metrics(const Gen& semantic_gen, const Matrix& text, const ConditionalDiagonals& cond,
                                const AugmentationSpec& spec, Index n_pairs) {
    require(n_pairs >= 100, ErrorKind::TooFewPairs, "need at least 100 pairs, got " + std::to_string(n_pairs));
    require(text.rows() >= 1, ErrorKind::TooFewPairs, "no text rows");
    Matrix batch(n_pairs, text.cols());
    for (Index i = 0; i < n_pairs; ++i) batch.row(i) = text.row(i % text.rows());
    const AugmentedBatch pairs = augment(batch, cond, spec);
    const Vector lambda = spec.beta * cond.rr_given_s();

    CollapseResult out;
    out.min_pairwise_output_distance = std::numeric_limits<double>::infinity();
    double min_de = std::numeric_limits<double>::infinity();
    for (Index i = 0; i < n_pairs; ++i) {
        const Vector e = pairs.original.row(i).transpose();
        const Vector ep = pairs.augmented.row(i).transpose();
        const double de = (ep - e).norm();
        const double df = (semantic_gen.apply(ep) - semantic_gen.apply(e)).norm();
        out.min_pairwise_output_distance = std::min(out.min_pairwise_output_distance, df);
        if (de > 0.0) {
            min_de = std::min(min_de, de);
            out.max_ratio = std::max(out.max_ratio, df / de);
        }
    }
    require(std::isfinite(min_de), ErrorKind::DegenerateShift, "every ITA_C pair had e' == e");
    out.similar_threshold = 1e-3 * lambda.norm();
    out.reference_lipschitz = lambda.norm() / min_de;
    out.different_threshold = 10.0 * out.reference_lipschitz;
    const bool similar = out.min_pairwise_output_distance < out.similar_threshold;
    const bool different = out.max_ratio > out.different_threshold;
    out.verdict = similar && different ? CollapseVerdict::both
                  : similar            ? CollapseVerdict::collapse_similar
                  : different          ? CollapseVerdict::collapse_different
                                       : CollapseVerdict::healthy;
    return out;
}

// ---------------------------------------------------------------------------
// Full run

struct TestbedConfig {
    WorldConfig world;
    double beta = 0.05;
    Prop1Config prop1;
    GeneratorTrainConfig generator;
    Index n_pairs = 2000;
    std::uint64_t seed = 2024;
};

inline TestbedReport run_testbed(const TestbedConfig& cfg) {
    auto [world, corpus] = generate_world(cfg.world);
    TestbedReport report;

    const AugmentationSpec prop1_spec{cfg.beta, PerturbationMode::uniform, derive_seed(cfg.seed, 1)};
    report.prop1 = run_prop1(world, corpus, prop1_spec, cfg.prop1);

    const CovarianceSet cov = estimate_covariances(world.semantic_corpus(corpus));
    const ConditionalDiagonals cond = conditional_diagonals(cov, {.keep_full = false});
    GeneratorTrainConfig gen_cfg = cfg.generator;
    gen_cfg.beta = cfg.beta;
    gen_cfg.seed = derive_seed(cfg.seed, 2);
    const TrainedGenerators gens = train_generators(world, corpus, cond, gen_cfg);
    report.prop3 = run_prop3(world, corpus, gens);

    const AugmentationSpec pair_spec{cfg.beta, PerturbationMode::uniform, derive_seed(cfg.seed, 3)};
    report.prop4 = run_prop4(world, gens, corpus.text.data, cond, pair_spec);
    report.prop5 = run_prop5();
    report.collapse =
        collapse_metrics(semantic_generator(world, gens.with_lr), corpus.text.data, cond, pair_spec, cfg.n_pairs);
    report.collapse_baseline =
        collapse_metrics(semantic_generator(world, gens.without_lr), corpus.text.data, cond, pair_spec, cfg.n_pairs);
    return report;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::ordered_json to_json(const Quantiles& q) {
    nlohmann::ordered_json j;
    j["p50"] = q.p50;
    j["p95"] = q.p95;
    j["max"] = q.max;
    return j;
}

inline nlohmann::ordered_json to_json(const CollapseResult& c) {
    nlohmann::ordered_json j;
    j["min_pairwise_output_distance"] = c.min_pairwise_output_distance;
    j["similar_threshold"] = c.similar_threshold;
    j["max_ratio"] = c.max_ratio;
    j["reference_lipschitz"] = c.reference_lipschitz;
    j["different_threshold"] = c.different_threshold;
    j["verdict"] = std::string(to_string(c.verdict));
    j["detector_note"] = "thresholds 1e-3*|Lambda| and 10*K_ref are artifact-defined detectors";
    return j;
}

inline nlohmann::ordered_json to_json(const TestbedReport& r) {
    nlohmann::ordered_json j;
    j["prop1"] = {{"trace_cov_unaug", r.prop1.trace_cov_unaug},
                  {"trace_cov_aug", r.prop1.trace_cov_aug},
                  {"n_seeds", r.prop1.n_seeds},
                  {"beta", r.prop1.beta},
                  {"pass", r.prop1.pass}};
    j["prop3"] = {{"raw_space_variance_with_gisc", r.prop3.raw_space_variance_with_gisc},
                  {"raw_space_variance_without", r.prop3.raw_space_variance_without},
                  {"relative_change", r.prop3.relative_change},
                  {"pass", r.prop3.pass}};
    nlohmann::ordered_json p4;
    p4["lipschitz_with_lr"] = to_json(r.prop4.lipschitz_with_lr);
    p4["lipschitz_without_lr"] = to_json(r.prop4.lipschitz_without_lr);
    p4["bound_lambda"] = std::vector<double>(r.prop4.bound.data(), r.prop4.bound.data() + r.prop4.bound.size());
    p4["K"] = r.prop4.lipschitz_constant;
    p4["max_bound_excess"] = r.prop4.max_bound_excess;
    p4["bound_tolerance"] = r.prop4.bound_tolerance;
    p4["pairs_used"] = r.prop4.pairs_used;
    p4["pass"] = r.prop4.pass;
    j["prop4"] = p4;
    j["prop5"] = {{"l_db", r.prop5.l_db},
                  {"l_r", r.prop5.l_r},
                  {"l_r_threshold", r.prop5.l_r_threshold},
                  {"control_l_db", r.prop5.control_l_db},
                  {"control_l_r", r.prop5.control_l_r},
                  {"pass", r.prop5.pass}};
    j["collapse"] = to_json(r.collapse);
    j["collapse_baseline"] = to_json(r.collapse_baseline);
    return j;
}

}  // namespace sada
