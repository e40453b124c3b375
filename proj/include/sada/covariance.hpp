#pragma once

// Covariance blocks of a paired corpus and the two conditional (Schur
// complement) covariances:
//   C_ss|r = C_ss - C_sr (C_rr + lambda I)^-1 C_rs
//   C_rr|s = C_rr - C_rs (C_ss + lambda I)^-1 C_sr

#include <Eigen/Dense>

#include <algorithm>
#include <limits>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "sada/embedding_store.hpp"
#include "sada/error.hpp"

namespace sada {

struct CovarianceSet {
    Matrix c_ss;  // D_s x D_s
    Matrix c_rr;  // D_r x D_r
    Matrix c_sr;  // D_s x D_r
    Matrix c_rs;  // D_r x D_s, always c_sr transposed
    Vector mean_s;
    Vector mean_r;
    Index sample_count = 0;
    // Unset means the per-block default 1e-6 * trace(block) / D.
    std::optional<double> ridge_lambda;

    Index text_dim() const { return c_ss.rows(); }
    Index image_dim() const { return c_rr.rows(); }
};

enum class ConditionalTarget { ss_given_r, rr_given_s };

struct ConditionalDiagonals {
    std::optional<Vector> d_ss_given_r;
    std::optional<Vector> d_rr_given_s;
    std::optional<Matrix> full_ss_given_r;
    std::optional<Matrix> full_rr_given_s;
    // Ridge actually applied to the conditioning block and its condition
    // number after regularization (NaN when the block was not computed).
    double ridge_ss_given_r = 0.0;
    double ridge_rr_given_s = 0.0;
    double condition_ss_given_r = std::numeric_limits<double>::quiet_NaN();
    double condition_rr_given_s = std::numeric_limits<double>::quiet_NaN();

    const Vector& ss_given_r() const {
        if (!d_ss_given_r) fail(ErrorKind::NotComputed, "diag(C_ss|r) was not computed");
        return *d_ss_given_r;
    }
    const Vector& rr_given_s() const {
        if (!d_rr_given_s) fail(ErrorKind::NotComputed, "diag(C_rr|s) was not computed");
        return *d_rr_given_s;
    }
    const Matrix& full_ss() const {
        if (!full_ss_given_r) fail(ErrorKind::NotComputed, "full C_ss|r was not kept");
        return *full_ss_given_r;
    }
    const Matrix& full_rr() const {
        if (!full_rr_given_s) fail(ErrorKind::NotComputed, "full C_rr|s was not kept");
        return *full_rr_given_s;
    }
};

struct ConditionalOptions {
    bool keep_full = true;
    double max_condition = 1e12;
};

inline Matrix symmetrized(const Matrix& a) { return 0.5 * (a + a.transpose()); }

inline double default_ridge(const Matrix& block) {
    return block.rows() == 0 ? 0.0 : 1e-6 * block.trace() / static_cast<double>(block.rows());
}

/// Unbiased (N-1) covariance of the centered data. Entries are computed
/// one dot product at a time, so the result does not depend on `threads`.
inline CovarianceSet estimate_covariances(const PairedCorpus& corpus, unsigned threads = 1,
                                          std::optional<double> ridge_lambda = std::nullopt) {
    const Index n = corpus.count();
    require(n >= 2, ErrorKind::TooFewSamples, "need at least two samples, got " + std::to_string(n));
    require(corpus.image.count() == n, ErrorKind::ShapeMismatch, "text/image row counts differ");
    if (ridge_lambda) require(*ridge_lambda >= 0.0, ErrorKind::InvalidConfig, "ridge must be >= 0");

    const Index ds = corpus.text.dim();
    const Index dr = corpus.image.dim();
    Matrix joint(n, ds + dr);
    joint << corpus.text.data, corpus.image.data;

    Vector mean = Vector::Zero(ds + dr);
    for (Index i = 0; i < n; ++i) mean += joint.row(i).transpose();
    mean /= static_cast<double>(n);
    joint.rowwise() -= mean.transpose();

    const Index d = ds + dr;
    Matrix cov(d, d);
    const double denom = static_cast<double>(n - 1);
    auto fill_columns = [&](Index begin, Index end) {
        for (Index j = begin; j < end; ++j) {
            for (Index i = 0; i <= j; ++i) {
                const double v = joint.col(i).dot(joint.col(j)) / denom;
                cov(i, j) = v;
                cov(j, i) = v;
            }
        }
    };
    const unsigned workers = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(d)));
    if (workers == 1) {
        fill_columns(0, d);
    } else {
        std::vector<std::jthread> pool;
        for (unsigned w = 0; w < workers; ++w) {
            const Index begin = d * w / workers;
            const Index end = d * (w + 1) / workers;
            pool.emplace_back(fill_columns, begin, end);
        }
    }

    CovarianceSet out;
    out.c_ss = cov.topLeftCorner(ds, ds);
    out.c_rr = cov.bottomRightCorner(dr, dr);
    out.c_sr = cov.topRightCorner(ds, dr);
    out.c_rs = out.c_sr.transpose();
    out.mean_s = mean.head(ds);
    out.mean_r = mean.tail(dr);
    out.sample_count = n;
    out.ridge_lambda = ridge_lambda;
    return out;
}

/// Builds a CovarianceSet from explicit blocks (e.g. a known joint covariance).
inline CovarianceSet covariance_from_blocks(const Matrix& c_ss, const Matrix& c_rr, const Matrix& c_sr,
                                            std::optional<double> ridge_lambda = std::nullopt) {
    require(c_ss.rows() == c_ss.cols() && c_rr.rows() == c_rr.cols(), ErrorKind::ShapeMismatch,
            "self-covariance blocks must be square");
    require(c_sr.rows() == c_ss.rows() && c_sr.cols() == c_rr.rows(), ErrorKind::ShapeMismatch,
            "cross-covariance must be D_s x D_r");
    CovarianceSet out;
    out.c_ss = symmetrized(c_ss);
    out.c_rr = symmetrized(c_rr);
    out.c_sr = c_sr;
    out.c_rs = c_sr.transpose();
    out.mean_s = Vector::Zero(c_ss.rows());
    out.mean_r = Vector::Zero(c_rr.rows());
    out.ridge_lambda = ridge_lambda;
    return out;
}

inline double min_eigenvalue(const Matrix& symmetric) {
    Eigen::SelfAdjointEigenSolver<Matrix> solver(symmetric, Eigen::EigenvaluesOnly);
    return solver.eigenvalues().minCoeff();
}

/// a <= b in the Loewner order, i.e. b - a is PSD up to `tol`.
inline bool loewner_leq(const Matrix& a, const Matrix& b, double tol) {
    require(a.rows() == b.rows() && a.cols() == b.cols() && a.rows() == a.cols(), ErrorKind::ShapeMismatch,
            "loewner_leq needs two square matrices of the same shape");
    return min_eigenvalue(symmetrized(b - a)) >= -tol;
}

namespace detail {

struct SchurResult {
    Matrix full;
    Vector diagonal;
    double ridge = 0.0;
    double condition = 0.0;
};

// target - cross * (conditioning + ridge I)^-1 * cross^T
inline SchurResult schur_complement(const Matrix& target, const Matrix& cross, const Matrix& conditioning,
                                    std::optional<double> ridge_override, double max_condition,
                                    std::string_view label) {
    SchurResult out;
    out.ridge = ridge_override.value_or(default_ridge(conditioning));
    const Matrix regularized =
        conditioning + out.ridge * Matrix::Identity(conditioning.rows(), conditioning.cols());

    Eigen::SelfAdjointEigenSolver<Matrix> eig(regularized, Eigen::EigenvaluesOnly);
    const double lo = eig.eigenvalues().minCoeff();
    const double hi = eig.eigenvalues().maxCoeff();
    out.condition = lo > 0.0 ? hi / lo : std::numeric_limits<double>::infinity();
    if (!(lo > 0.0) || out.condition > max_condition) {
        fail(ErrorKind::SingularConditioningBlock, std::string(label) + ": condition number " +
                                                       std::to_string(out.condition) + " after ridge " +
                                                       std::to_string(out.ridge));
    }

    const Eigen::LLT<Matrix> llt(regularized);
    const Matrix solved = llt.solve(cross.transpose());
    out.full = symmetrized(target - cross * solved);

    const double tol = 1e-8 * std::max(1.0, target.diagonal().maxCoeff());
    out.diagonal = out.full.diagonal();
    for (Index i = 0; i < out.diagonal.size(); ++i) {
        double& v = out.diagonal(i);
        if (v < -tol) {
            fail(ErrorKind::NegativeConditionalVariance,
                 std::string(label) + " diagonal " + std::to_string(i) + " = " + std::to_string(v));
        }
        if (v < 0.0) v = 0.0;
    }
    return out;
}

}  // namespace detail

/// Computes one conditional covariance; the other fields stay empty.
inline ConditionalDiagonals conditional_covariance(const CovarianceSet& cov, ConditionalTarget target,
                                                   const ConditionalOptions& options = {}) {
    ConditionalDiagonals out;
    if (target == ConditionalTarget::ss_given_r) {
        auto r = detail::schur_complement(cov.c_ss, cov.c_sr, cov.c_rr, cov.ridge_lambda, options.max_condition,
                                          "C_rr");
        out.d_ss_given_r = std::move(r.diagonal);
        if (options.keep_full) out.full_ss_given_r = std::move(r.full);
        out.ridge_ss_given_r = r.ridge;
        out.condition_ss_given_r = r.condition;
    } else {
        auto r = detail::schur_complement(cov.c_rr, cov.c_rs, cov.c_ss, cov.ridge_lambda, options.max_condition,
                                          "C_ss");
        out.d_rr_given_s = std::move(r.diagonal);
        if (options.keep_full) out.full_rr_given_s = std::move(r.full);
        out.ridge_rr_given_s = r.ridge;
        out.condition_rr_given_s = r.condition;
    }
    return out;
}

/// Both conditional covariances.
inline ConditionalDiagonals conditional_diagonals(const CovarianceSet& cov, const ConditionalOptions& options = {}) {
    ConditionalDiagonals out = conditional_covariance(cov, ConditionalTarget::ss_given_r, options);
    ConditionalDiagonals other = conditional_covariance(cov, ConditionalTarget::rr_given_s, options);
    out.d_rr_given_s = std::move(other.d_rr_given_s);
    out.full_rr_given_s = std::move(other.full_rr_given_s);
    out.ridge_rr_given_s = other.ridge_rr_given_s;
    out.condition_rr_given_s = other.condition_rr_given_s;
    return out;
}

/// Role tags used when covariance artifacts are written as a MatrixBundle.
inline MatrixBundle to_bundle(const CovarianceSet& cov, const ConditionalDiagonals& cond) {
    MatrixBundle b;
    b.kind = "covariance";
    b.entries["cov_ss"] = cov.c_ss;
    b.entries["cov_rr"] = cov.c_rr;
    b.entries["cov_sr"] = cov.c_sr;
    b.entries["mean_s"] = cov.mean_s.transpose();
    b.entries["mean_r"] = cov.mean_r.transpose();
    if (cond.d_ss_given_r) b.entries["cond_diag_ss_r"] = cond.d_ss_given_r->transpose();
    if (cond.d_rr_given_s) b.entries["cond_diag_rr_s"] = cond.d_rr_given_s->transpose();
    b.attributes["sample_count"] = cov.sample_count;
    b.attributes["ridge_lambda"] = cov.ridge_lambda ? nlohmann::json(*cov.ridge_lambda) : nlohmann::json(nullptr);
    b.attributes["ridge_ss_given_r"] = cond.ridge_ss_given_r;
    b.attributes["ridge_rr_given_s"] = cond.ridge_rr_given_s;
    b.attributes["condition_ss_given_r"] = cond.condition_ss_given_r;
    b.attributes["condition_rr_given_s"] = cond.condition_rr_given_s;
    return b;
}

/// Reads the conditional diagonals back from a covariance bundle.
inline ConditionalDiagonals conditional_from_bundle(const MatrixBundle& b) {
    require(b.kind == "covariance", ErrorKind::ManifestSchemaError, "expected a covariance bundle, got " + b.kind);
    ConditionalDiagonals out;
    if (b.contains("cond_diag_ss_r")) out.d_ss_given_r = b.at("cond_diag_ss_r").row(0).transpose();
    if (b.contains("cond_diag_rr_s")) out.d_rr_given_s = b.at("cond_diag_rr_s").row(0).transpose();
    return out;
}

}  // namespace sada
