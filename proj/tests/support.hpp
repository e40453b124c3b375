#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>

#include <gtest/gtest.h>

#include <unistd.h>

#include "sada/sada.hpp"

namespace sada::test_support {

namespace fs = std::filesystem;

/// Scratch directory removed on destruction.
class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        path_ = fs::temp_directory_path() /
                ("sada_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& name) const { return path_ / name; }

private:
    fs::path path_;
};

/// Entries are float-representable, so a save/load round trip is exact.
inline Matrix float_matrix(Index rows, Index cols, Rng& rng, double scale = 1.0) {
    Matrix m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<double>(static_cast<float>(scale * rng.normal()));
    return m;
}

inline PairedCorpus random_corpus(Index n, Index ds, Index dr, std::uint64_t seed) {
    Rng rng(seed);
    Matrix text = float_matrix(n, ds, rng);
    Matrix image = float_matrix(n, dr, rng);
    return make_corpus(std::move(text), std::move(image));
}

/// Text and image driven by shared latents, so C_sr is far from zero.
inline PairedCorpus coupled_corpus(Index n, Index ds, Index dr, Index latent, std::uint64_t seed, double noise = 0.3) {
    Rng rng(seed);
    const Matrix ms = float_matrix(ds, latent, rng);
    const Matrix mr = float_matrix(dr, latent, rng);
    const Matrix z = float_matrix(n, latent, rng);
    Matrix text = z * ms.transpose() + noise * float_matrix(n, ds, rng);
    Matrix image = z * mr.transpose() + noise * float_matrix(n, dr, rng);
    return make_corpus(std::move(text), std::move(image));
}

/// Random SPD matrix with eigenvalues in [lo, hi].
inline Matrix random_spd(Index d, Rng& rng, double lo = 0.1, double hi = 2.0) {
    Matrix g(d, d);
    for (Index i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();
    Eigen::HouseholderQR<Matrix> qr(g);
    const Matrix q = qr.householderQ();
    Vector eig(d);
    for (Index i = 0; i < d; ++i) eig(i) = lo + (hi - lo) * rng.uniform01();
    const Matrix a = q * eig.asDiagonal() * q.transpose();
    return 0.5 * (a + a.transpose());
}

inline void write_bytes(const fs::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << bytes;
}

inline std::string read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::string f32_bytes(std::initializer_list<float> values) {
    std::string out;
    for (float v : values) {
        const auto bits = std::bit_cast<std::uint32_t>(v);
        for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((bits >> (8 * k)) & 0xFFu));
    }
    return out;
}

inline ErrorKind kind_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.kind();
    }
    ADD_FAILURE() << "expected a sada::Error";
    return ErrorKind::IoError;
}

}  // namespace sada::test_support
