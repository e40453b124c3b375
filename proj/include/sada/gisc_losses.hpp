#pragma once

// Semantic consistency S, the total semantic loss L_S, the direction
// bounding loss L_db and the image semantic regularization loss L_r.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>

#include "sada/embedding_store.hpp"
#include "sada/error.hpp"

namespace sada {

struct ShiftQuadruple {
    Vector e_s;
    Vector e_s_prime;
    Vector e_f;
    Vector e_f_prime;
};

/// Target of L_r: the image shift should equal eps* (.) beta * d(C_rr|s).
struct LrTarget {
    Vector epsilon_star;
    double beta = 0.05;
    Vector d_rr_given_s;
    double varphi = 0.01;

    Vector shift() const { return epsilon_star.cwiseProduct(beta * d_rr_given_s); }
};

enum class DbVariant {
    cosine,        // 1 - <a,b> / (|a| |b|)
    squared_norm,  // 1 - <a,b> / (|a|^2 |b|^2), literal published denominator
};

namespace detail {

inline void same_size(const Vector& a, const Vector& b, std::string_view what) {
    require(a.size() == b.size(), ErrorKind::DimMismatch,
            std::string(what) + ": " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
}

inline double nonzero_norm(const Vector& v, std::string_view what) {
    const double n = v.norm();
    require(n > 0.0, ErrorKind::ZeroVector, std::string(what) + " is the zero vector");
    return n;
}

}  // namespace detail

inline double cosine(const Vector& a, const Vector& b) {
    detail::same_size(a, b, "cosine");
    const double na = detail::nonzero_norm(a, "cosine lhs");
    const double nb = detail::nonzero_norm(b, "cosine rhs");
    return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

/// S(text, image) = 1 - cos(text, image), in [0, 2].
inline double semantic_consistency(const Vector& text, const Vector& image) {
    detail::same_size(text, image, "semantic_consistency");
    detail::nonzero_norm(text, "text embedding");
    detail::nonzero_norm(image, "image embedding");
    return 1.0 - cosine(text, image);
}

/// dS/d(image).
inline Vector grad_semantic_wrt_image(const Vector& text, const Vector& image) {
    detail::same_size(text, image, "grad_semantic_wrt_image");
    const double nt = detail::nonzero_norm(text, "text embedding");
    const double ni = detail::nonzero_norm(image, "image embedding");
    const double c = text.dot(image) / (nt * ni);
    return -(text / (nt * ni) - c * image / (ni * ni));
}

/// dS/d(text).
inline Vector grad_semantic_wrt_text(const Vector& text, const Vector& image) {
    return grad_semantic_wrt_image(image, text);
}

/// L_S = S(e_s, G(e_s)) + S(e_s', G(e_s')) + S(e_s, G(e_s')) + S(e_s', G(e_s)).
/// With omit_first the S(e_s, G(e_s)) term is dropped (it already belongs to
/// the base objective of the generator).
inline double semantic_loss_total(const Vector& e_s, const Vector& e_s_prime, const Vector& g_of_s,
                                  const Vector& g_of_s_prime, bool omit_first = false) {
    detail::same_size(e_s, e_s_prime, "semantic_loss_total");
    detail::same_size(e_s, g_of_s, "semantic_loss_total");
    detail::same_size(e_s, g_of_s_prime, "semantic_loss_total");
    double total = omit_first ? 0.0 : semantic_consistency(e_s, g_of_s);
    total += semantic_consistency(e_s_prime, g_of_s_prime);
    total += semantic_consistency(e_s, g_of_s_prime);
    total += semantic_consistency(e_s_prime, g_of_s);
    return total;
}

inline void validate(const ShiftQuadruple& q) {
    const auto n = q.e_s.size();
    require(q.e_s_prime.size() == n && q.e_f.size() == n && q.e_f_prime.size() == n, ErrorKind::DimMismatch,
            "shift quadruple vectors must share one dimension");
}

/// Direction bounding loss between the text shift and the image shift.
inline double loss_db(const ShiftQuadruple& q, DbVariant variant = DbVariant::cosine) {
    validate(q);
    const Vector ds = q.e_s_prime - q.e_s;
    const Vector df = q.e_f_prime - q.e_f;
    const double ns = ds.norm();
    const double nf = df.norm();
    require(ns > 0.0, ErrorKind::DegenerateShift, "text shift is zero");
    require(nf > 0.0, ErrorKind::DegenerateShift, "image shift is zero");
    if (variant == DbVariant::cosine) return 1.0 - ds.dot(df) / (ns * nf);
    return 1.0 - ds.dot(df) / (ns * ns * nf * nf);
}

inline void validate(const LrTarget& t) {
    require(t.epsilon_star.size() == t.d_rr_given_s.size(), ErrorKind::DimMismatch,
            "epsilon* and d(C_rr|s) differ in size");
    for (Index i = 0; i < t.epsilon_star.size(); ++i) {
        require(t.epsilon_star(i) == 1.0 || t.epsilon_star(i) == -1.0, ErrorKind::InvalidTarget,
                "epsilon* entry " + std::to_string(i) + " is not +-1");
    }
    require(std::isfinite(t.beta) && t.beta >= 0.0, ErrorKind::InvalidTarget, "beta must be finite and >= 0");
    require(std::isfinite(t.varphi) && t.varphi >= 0.0, ErrorKind::InvalidTarget, "varphi must be finite and >= 0");
    require(t.shift().allFinite(), ErrorKind::InvalidTarget, "target shift is not finite");
}

/// L_r = varphi * |(e_f'' - e_f) - eps* (.) beta * d(C_rr|s)|^2
inline double loss_r(const Vector& e_f, const Vector& e_f_aug, const LrTarget& target) {
    validate(target);
    detail::same_size(e_f, e_f_aug, "loss_r");
    detail::same_size(e_f, target.d_rr_given_s, "loss_r target");
    return target.varphi * ((e_f_aug - e_f) - target.shift()).squaredNorm();
}

inline double loss_r(const ShiftQuadruple& q, const LrTarget& target) { return loss_r(q.e_f, q.e_f_prime, target); }

/// dL_r / d(e_f'').
inline Vector grad_loss_r(const Vector& e_f, const Vector& e_f_aug, const LrTarget& target) {
    validate(target);
    detail::same_size(e_f, e_f_aug, "grad_loss_r");
    detail::same_size(e_f, target.d_rr_given_s, "grad_loss_r target");
    return 2.0 * target.varphi * ((e_f_aug - e_f) - target.shift());
}

inline Vector grad_loss_r(const ShiftQuadruple& q, const LrTarget& target) {
    return grad_loss_r(q.e_f, q.e_f_prime, target);
}

/// L_id = -min(MSE(e', e), cap), MSE averaged over every entry.
inline double inverse_distance(const Matrix& augmented, const Matrix& original, double cap) {
    require(augmented.rows() == original.rows() && augmented.cols() == original.cols(), ErrorKind::DimMismatch,
            "inverse_distance shapes differ");
    const double mse = (augmented - original).squaredNorm() / static_cast<double>(original.size());
    return -std::min(mse, cap);
}

struct TightnessWitness {
    ShiftQuadruple quadruple;
    LrTarget target;
    double l_db = 0.0;
    double l_r = 0.0;
};

/// Builds shifts that are perfectly aligned (L_db ~ 0) while the image shift
/// is a 1e-9 fraction of the L_r target, so L_r stays near varphi*|beta d|^2.
/// `image_scale` = 1 gives the zero-residual control instead.
inline TightnessWitness tightness_witness(const Vector& d_rr_given_s, double beta, double varphi = 1.0,
                                          std::optional<Vector> epsilon_star = std::nullopt,
                                          double image_scale = 1e-9) {
    for (Index i = 0; i < d_rr_given_s.size(); ++i) {
        require(d_rr_given_s(i) > 0.0, ErrorKind::NonPositiveVariance,
                "d(C_rr|s) entry " + std::to_string(i) + " must be > 0");
    }
    require(d_rr_given_s.size() > 0, ErrorKind::NonPositiveVariance, "empty variance vector");
    require(beta > 0.0, ErrorKind::InvalidTarget, "beta must be > 0");

    TightnessWitness w;
    w.target.epsilon_star = epsilon_star.value_or(Vector::Ones(d_rr_given_s.size()));
    w.target.beta = beta;
    w.target.d_rr_given_s = d_rr_given_s;
    w.target.varphi = varphi;
    validate(w.target);

    const Vector full = w.target.shift();
    const Index n = d_rr_given_s.size();
    w.quadruple.e_s = Vector::Zero(n);
    w.quadruple.e_s_prime = full;
    w.quadruple.e_f = Vector::Zero(n);
    w.quadruple.e_f_prime = image_scale * full;
    w.l_db = loss_db(w.quadruple);
    w.l_r = loss_r(w.quadruple, w.target);
    return w;
}

}  // namespace sada
