#pragma once

// Closed-form semantic-preserving text augmentation:
//   e' = e + eps (.) beta * d(C_ss|r)
// with eps ~ U(-1, 1) per entry, or eps* in {-1, +1} per entry.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "sada/covariance.hpp"
#include "sada/embedding_store.hpp"
#include "sada/error.hpp"
#include "sada/rng.hpp"

namespace sada {

enum class PerturbationMode { uniform, rademacher };

inline constexpr std::string_view to_string(PerturbationMode m) {
    return m == PerturbationMode::uniform ? "uniform" : "rademacher";
}

inline PerturbationMode parse_mode(std::string_view s) {
    if (s == "uniform") return PerturbationMode::uniform;
    if (s == "rademacher") return PerturbationMode::rademacher;
    fail(ErrorKind::InvalidSpec, "unknown perturbation mode '" + std::string(s) + "'");
}

struct AugmentationSpec {
    double beta = 0.05;
    PerturbationMode mode = PerturbationMode::uniform;
    std::uint64_t seed = 0;
};

struct AugmentedBatch {
    Matrix original;   // B x D
    Matrix augmented;  // B x D
    Matrix epsilon;    // B x D
    Vector scale;      // beta * d(C_ss|r)
    AugmentationSpec spec;

    Matrix shift() const { return augmented - original; }
};

inline void validate(const AugmentationSpec& spec) {
    require(std::isfinite(spec.beta) && spec.beta >= 0.0, ErrorKind::InvalidSpec,
            "beta must be finite and >= 0, got " + std::to_string(spec.beta));
}

/// Draws a B x D perturbation matrix row by row from a single stream.
inline Matrix draw_epsilon(Index rows, Index cols, PerturbationMode mode, Rng& rng) {
    Matrix eps(rows, cols);
    for (Index i = 0; i < rows; ++i) {
        for (Index j = 0; j < cols; ++j) {
            eps(i, j) = mode == PerturbationMode::uniform ? rng.uniform_pm1_open() : rng.rademacher();
        }
    }
    return eps;
}

/// Per-row augmentation with an explicit per-dimension variance vector.
///
/// The sum original + shift is rounded toward the original whenever
/// floating-point rounding would push |augmented - original| past
/// beta * d, so the sampling bound holds exactly for every entry.
inline AugmentedBatch augment(const Matrix& batch, const Vector& variance, const AugmentationSpec& spec) {
    validate(spec);
    require(batch.cols() == variance.size(), ErrorKind::DimMismatch,
            "batch dim " + std::to_string(batch.cols()) + " vs variance dim " + std::to_string(variance.size()));
    for (Index j = 0; j < variance.size(); ++j) {
        require(std::isfinite(variance(j)) && variance(j) >= 0.0, ErrorKind::InvalidSpec,
                "variance entry " + std::to_string(j) + " must be finite and >= 0");
    }

    AugmentedBatch out;
    out.spec = spec;
    out.original = batch;
    out.scale = spec.beta * variance;
    Rng rng(spec.seed);
    out.epsilon = draw_epsilon(batch.rows(), batch.cols(), spec.mode, rng);
    out.augmented.resize(batch.rows(), batch.cols());
    for (Index i = 0; i < batch.rows(); ++i) {
        for (Index j = 0; j < batch.cols(); ++j) {
            const double base = batch(i, j);
            const double bound = out.scale(j);
            double value = base + out.epsilon(i, j) * bound;
            while (std::abs(value - base) > bound) value = std::nextafter(value, base);
            out.augmented(i, j) = value;
        }
    }
    return out;
}

inline AugmentedBatch augment(const Matrix& batch, const ConditionalDiagonals& cond, const AugmentationSpec& spec) {
    return augment(batch, cond.ss_given_r(), spec);
}

/// Word-level embeddings of one sentence: T x D.
using WordTensor = std::vector<Matrix>;

/// e'_w = e_w + (e'_s - e_s), broadcast over the T word slots of each sentence.
inline WordTensor augment_words(const WordTensor& words, const Matrix& sentence_delta) {
    require(static_cast<Index>(words.size()) == sentence_delta.rows(), ErrorKind::DimMismatch,
            "word batch has " + std::to_string(words.size()) + " sentences, delta has " +
                std::to_string(sentence_delta.rows()));
    WordTensor out;
    out.reserve(words.size());
    for (std::size_t b = 0; b < words.size(); ++b) {
        const Matrix& sentence = words[b];
        require(sentence.cols() == sentence_delta.cols(), ErrorKind::DimMismatch,
                "word dim " + std::to_string(sentence.cols()) + " vs delta dim " +
                    std::to_string(sentence_delta.cols()));
        Matrix shifted = sentence;
        shifted.rowwise() += sentence_delta.row(static_cast<Index>(b));
        out.push_back(std::move(shifted));
    }
    return out;
}

/// `steps` evenly spaced points from e to e_prime, endpoints included exactly.
inline std::vector<Vector> interpolate(const Vector& e, const Vector& e_prime, int steps) {
    require(e.size() == e_prime.size(), ErrorKind::DimMismatch, "interpolation endpoints differ in size");
    require(steps >= 2, ErrorKind::StepsTooSmall, "steps must be >= 2, got " + std::to_string(steps));
    std::vector<Vector> points;
    points.reserve(static_cast<std::size_t>(steps));
    for (int k = 0; k < steps; ++k) {
        if (k == 0) {
            points.push_back(e);
        } else if (k == steps - 1) {
            points.push_back(e_prime);
        } else {
            const double t = static_cast<double>(k) / static_cast<double>(steps - 1);
            points.push_back((1.0 - t) * e + t * e_prime);
        }
    }
    return points;
}

}  // namespace sada
