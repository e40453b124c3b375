#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

using namespace sada;
using namespace sada::test_support;

namespace {

Vector vec(std::initializer_list<double> v) {
    Vector out(static_cast<Index>(v.size()));
    Index i = 0;
    for (double x : v) out(i++) = x;
    return out;
}

Vector random_vector(Index d, Rng& rng, double scale = 1.0) {
    Vector v(d);
    for (Index i = 0; i < d; ++i) v(i) = scale * rng.normal();
    return v;
}

Vector random_signs(Index d, Rng& rng) {
    Vector v(d);
    for (Index i = 0; i < d; ++i) v(i) = rng.rademacher();
    return v;
}

/// max_i |analytic_i - fd_i| / (1 + |analytic_i|), central differences.
template <class F>
double fd_error(const F& f, const Vector& x, const Vector& analytic, double h) {
    double worst = 0.0;
    for (Index i = 0; i < x.size(); ++i) {
        Vector xp = x, xm = x;
        xp(i) += h;
        xm(i) -= h;
        const double fd = (f(xp) - f(xm)) / (2.0 * h);
        worst = std::max(worst, std::abs(analytic(i) - fd) / (1.0 + std::abs(analytic(i))));
    }
    return worst;
}

}  // namespace

TEST(SemanticConsistency, Examples) {
    EXPECT_EQ(semantic_consistency(vec({1, 2, 3}), vec({1, 2, 3})), 0.0);
    EXPECT_DOUBLE_EQ(semantic_consistency(vec({1, 0}), vec({0, 1})), 1.0);
    EXPECT_DOUBLE_EQ(semantic_consistency(vec({1, 0}), vec({-1, 0})), 2.0);
    EXPECT_EQ(kind_of([] { semantic_consistency(vec({0, 0}), vec({1, 0})); }), ErrorKind::ZeroVector);
    EXPECT_EQ(kind_of([] { semantic_consistency(vec({1, 0}), vec({1, 0, 0})); }), ErrorKind::DimMismatch);
}

TEST(SemanticConsistency, RangeAndPositiveScaling) {
    Rng rng(1);
    for (int t = 0; t < 200; ++t) {
        const Vector a = random_vector(5, rng);
        const Vector b = random_vector(5, rng);
        const double s = semantic_consistency(a, b);
        EXPECT_GE(s, 0.0);
        EXPECT_LE(s, 2.0);
        EXPECT_NEAR(semantic_consistency(3.5 * a, 0.2 * b), s, 1e-12);
        EXPECT_NEAR(semantic_consistency(a, 7.0 * a), 0.0, 1e-12);
    }
}

TEST(SemanticConsistency, GradientsMatchFiniteDifferences) {
    Rng rng(2);
    for (int t = 0; t < 50; ++t) {
        const Vector text = random_vector(6, rng);
        const Vector image = random_vector(6, rng);
        EXPECT_LE(fd_error([&](const Vector& x) { return semantic_consistency(text, x); }, image,
                           grad_semantic_wrt_image(text, image), 1e-5),
                  1e-6);
        EXPECT_LE(fd_error([&](const Vector& x) { return semantic_consistency(x, image); }, text,
                           grad_semantic_wrt_text(text, image), 1e-5),
                  1e-6);
    }
}

TEST(SemanticConsistency, MidpointConvexOnEqualNormSegments) {
    // With |a| = |b| the midpoint is cos(angle/2) * |a| along the bisector, so
    // S(t, (a+b)/2) <= (S(t, a) + S(t, b)) / 2 exactly when t . (a+b) >= 0.
    Rng rng(3);
    int checked = 0;
    while (checked < 2000) {
        const Vector text = random_vector(4, rng);
        const Vector a = random_vector(4, rng);
        Vector b = random_vector(4, rng);
        b *= a.norm() / b.norm();
        if (text.dot(a + b) < 0.0) continue;
        const double mid = semantic_consistency(text, 0.5 * (a + b));
        const double chord = 0.5 * (semantic_consistency(text, a) + semantic_consistency(text, b));
        ASSERT_LE(mid, chord + 1e-10) << "check " << checked;
        // the same holds in the text argument by symmetry
        ASSERT_LE(semantic_consistency(0.5 * (a + b), text),
                  0.5 * (semantic_consistency(a, text) + semantic_consistency(b, text)) + 1e-10);
        ++checked;
    }
}

TEST(SemanticConsistency, NotConvexForMixedNorms) {
    const Vector text = vec({1, 0});
    const Vector a = vec({1, 0});
    const Vector b = vec({0, 10});
    const double mid = semantic_consistency(text, 0.5 * (a + b));
    const double chord = 0.5 * (semantic_consistency(text, a) + semantic_consistency(text, b));
    EXPECT_GT(mid, chord + 0.3);
}

TEST(SemanticLossTotal, Examples) {
    const Vector v = vec({1, 2, -1});
    EXPECT_EQ(semantic_loss_total(v, v, v, v), 0.0);
    EXPECT_EQ(semantic_loss_total(v, v, v, v, true), 0.0);

    // e_s orthogonal to G(e_s'), everything else collinear
    const Vector es = vec({1, 0});
    const Vector esp = vec({2, 0});
    const Vector g = vec({3, 0});
    const Vector gp = vec({0, 1});
    const std::array<std::pair<Vector, Vector>, 4> terms{
        {{es, g}, {esp, gp}, {es, gp}, {esp, g}}};
    double oracle = 0.0;
    for (const auto& [t, i] : terms) oracle += 1.0 - t.dot(i) / (t.norm() * i.norm());
    EXPECT_DOUBLE_EQ(semantic_loss_total(es, esp, g, gp), oracle);
    EXPECT_DOUBLE_EQ(oracle, 2.0);
    EXPECT_DOUBLE_EQ(semantic_loss_total(es, esp, g, gp, true), oracle - semantic_consistency(es, g));
    EXPECT_EQ(kind_of([&] { semantic_loss_total(es, esp, g, vec({1, 0, 0})); }), ErrorKind::DimMismatch);
}

TEST(LossDb, Examples) {
    const Vector es = vec({1, 1, 0});
    const Vector esp = vec({2, 0, 1});
    const Vector ds = esp - es;
    const Vector ef = vec({0.5, 0, 0});
    auto q = [&](const Vector& df) { return ShiftQuadruple{es, esp, ef, ef + df}; };
    EXPECT_NEAR(loss_db(q(3.0 * ds)), 0.0, 1e-15);
    const Vector orth = vec({1, 1, 0});  // ds = (1, -1, 1)
    EXPECT_NEAR(loss_db(q(orth)), 1.0, 1e-15);
    EXPECT_NEAR(loss_db(q(-ds)), 2.0, 1e-15);
    EXPECT_EQ(kind_of([&] { loss_db(ShiftQuadruple{es, es, ef, ef + ds}); }), ErrorKind::DegenerateShift);
    EXPECT_EQ(kind_of([&] { loss_db(q(Vector::Zero(3))); }), ErrorKind::DegenerateShift);
}

TEST(LossDb, ScaleInvariance) {
    Rng rng(4);
    for (int t = 0; t < 200; ++t) {
        const ShiftQuadruple q{random_vector(5, rng), random_vector(5, rng), random_vector(5, rng),
                               random_vector(5, rng)};
        const double before = loss_db(q);
        const double a = std::exp(3.0 * rng.normal());
        const double b = std::exp(3.0 * rng.normal());
        const ShiftQuadruple scaled{q.e_s, q.e_s + a * (q.e_s_prime - q.e_s), q.e_f, q.e_f + b * (q.e_f_prime - q.e_f)};
        EXPECT_LE(std::abs(loss_db(scaled) - before), 1e-12);
        EXPECT_GE(before, 0.0);
        EXPECT_LE(before, 2.0);
    }
}

TEST(LossDb, LiteralSquaredNormVariant) {
    const ShiftQuadruple q{vec({0, 0}), vec({2, 0}), vec({0, 0}), vec({3, 0})};
    EXPECT_NEAR(loss_db(q, DbVariant::cosine), 0.0, 1e-15);
    // 1 - 6 / (4 * 9)
    EXPECT_DOUBLE_EQ(loss_db(q, DbVariant::squared_norm), 1.0 - 6.0 / 36.0);
}

TEST(LossR, Examples) {
    const LrTarget target{vec({1, 1}), 0.05, vec({1, 1}), 0.01};
    const Vector ef = vec({0.3, -0.7});
    EXPECT_LE(loss_r(ef, ef + target.shift(), target), 1e-30);
    const LrTarget dyadic{vec({1, -1}), 0.5, vec({2, 4}), 1.0};
    EXPECT_EQ(loss_r(vec({1, 2}), vec({2, 0}), dyadic), 0.0);
    EXPECT_DOUBLE_EQ(loss_r(ef, ef, target), 5e-5);
    LrTarget doubled = target;
    doubled.varphi = 0.02;
    EXPECT_DOUBLE_EQ(loss_r(ef, ef, doubled), 2.0 * loss_r(ef, ef, target));
}

TEST(LossR, GradientExamples) {
    const LrTarget target{vec({1, -1}), 0.5, vec({1, 2}), 1.0};
    const Vector ef = vec({1, 1});
    EXPECT_TRUE(grad_loss_r(ef, ef + target.shift(), target).isZero(0.0));
    const Vector residual = vec({1, 0});
    EXPECT_TRUE(grad_loss_r(ef, ef + target.shift() + residual, target).isApprox(vec({2, 0})));
}

TEST(LossR, GradientMatchesFiniteDifferences) {
    Rng rng(5);
    for (int t = 0; t < 50; ++t) {
        const Index d = 1 + static_cast<Index>(rng.below(8));
        Vector var(d);
        for (Index i = 0; i < d; ++i) var(i) = 0.01 + rng.uniform01();
        const LrTarget target{random_signs(d, rng), 0.05 + rng.uniform01(), var, 0.01 + rng.uniform01()};
        const Vector ef = random_vector(d, rng);
        const Vector efp = random_vector(d, rng);
        const double err = fd_error([&](const Vector& x) { return loss_r(ef, x, target); }, efp,
                                    grad_loss_r(ef, efp, target), 1e-5);
        EXPECT_LE(err, 1e-6) << "point " << t;
    }
}

TEST(LossR, ZeroSetPinsTheShiftMagnitude) {
    Rng rng(6);
    for (int t = 0; t < 100; ++t) {
        const Index d = 4;
        Vector var(d);
        for (Index i = 0; i < d; ++i) var(i) = 0.1 + rng.uniform01();
        const LrTarget target{random_signs(d, rng), 0.05, var, 0.01};
        const Vector ef = random_vector(d, rng);
        const Vector efp = ef + target.shift();
        // ef + shift - ef rounds, so the loss is zero up to a few ulp of the shift
        ASSERT_LE(loss_r(ef, efp, target), 1e-28);
        const Vector shift = (efp - ef).cwiseAbs();
        // zero loss implies |shift| = beta * d, hence strictly positive and within the bound
        EXPECT_TRUE(shift.isApprox(0.05 * var, 1e-12));
        EXPECT_GT(shift.minCoeff(), 0.0);
        EXPECT_TRUE((shift.array() <= 0.05 * var.array() * (1.0 + 1e-12)).all());
    }
}

TEST(LossR, Validation) {
    EXPECT_EQ(kind_of([] { loss_r(vec({0, 0}), vec({1, 1}), LrTarget{vec({1, 0.5}), 0.05, vec({1, 1}), 1.0}); }),
              ErrorKind::InvalidTarget);
    EXPECT_EQ(kind_of([] { loss_r(vec({0, 0}), vec({1, 1}), LrTarget{vec({1, 1, 1}), 0.05, vec({1, 1}), 1.0}); }),
              ErrorKind::DimMismatch);
    EXPECT_EQ(kind_of([] { loss_r(vec({0, 0, 0}), vec({1, 1, 1}), LrTarget{vec({1, 1}), 0.05, vec({1, 1}), 1.0}); }),
              ErrorKind::DimMismatch);
    EXPECT_EQ(kind_of([] {
                  loss_r(vec({0}), vec({1}), LrTarget{vec({1}), 0.05, vec({std::numeric_limits<double>::infinity()}), 1.0});
              }),
              ErrorKind::InvalidTarget);
}

TEST(TightnessWitness, CanonicalCase) {
    const TightnessWitness w = tightness_witness(vec({1, 1}), 1.0, 1.0);
    EXPECT_LE(w.l_db, 1e-6);
    EXPECT_GE(w.l_r, 1.9);
    EXPECT_GE(w.l_r, 0.99 * 1.0 * 2.0);
}

TEST(TightnessWitness, FullShiftZeroesBothLosses) {
    const TightnessWitness w = tightness_witness(vec({1, 2, 0.5}), 0.05, 0.01, std::nullopt, 1.0);
    EXPECT_EQ(w.l_r, 0.0);
    EXPECT_LE(w.l_db, 1e-15);
}

TEST(TightnessWitness, HoldsAcrossRandomTargets) {
    Rng rng(7);
    for (int t = 0; t < 50; ++t) {
        const Index d = 1 + static_cast<Index>(rng.below(8));
        Vector var(d);
        for (Index i = 0; i < d; ++i) var(i) = 0.01 + 3.0 * rng.uniform01();
        const double beta = 0.01 + rng.uniform01();
        const double varphi = 0.01 + rng.uniform01();
        const TightnessWitness w = tightness_witness(var, beta, varphi, random_signs(d, rng));
        EXPECT_LE(w.l_db, 1e-6);
        EXPECT_GE(w.l_r, 0.99 * varphi * (beta * var).squaredNorm());
    }
}

TEST(TightnessWitness, RejectsZeroVariance) {
    EXPECT_EQ(kind_of([] { tightness_witness(vec({1, 0}), 1.0); }), ErrorKind::NonPositiveVariance);
    EXPECT_EQ(kind_of([] { tightness_witness(vec({1, 1}), 0.0); }), ErrorKind::InvalidTarget);
}

TEST(InverseDistance, CapAndShape) {
    const Matrix a = Matrix::Zero(2, 2);
    const Matrix b = Matrix::Constant(2, 2, 2.0);
    EXPECT_DOUBLE_EQ(inverse_distance(b, a, 10.0), -4.0);
    EXPECT_DOUBLE_EQ(inverse_distance(b, a, 1.5), -1.5);
    EXPECT_EQ(kind_of([&] { inverse_distance(Matrix::Zero(2, 3), a, 1.0); }), ErrorKind::DimMismatch);
}
