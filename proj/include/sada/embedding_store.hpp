#pragma once

// Paired text/image embedding corpora and the on-disk artifact format.
//
// Format: a JSON manifest next to header-less matrix files holding
// row-major little-endian IEEE-754 binary32 values. Everything is promoted
// to double on load; saving narrows back to float.

#include <Eigen/Dense>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sada/error.hpp"
#include "sada/rng.hpp"

namespace sada {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;
namespace fs = std::filesystem;

enum class Role { text, image };

inline constexpr std::string_view to_string(Role role) { return role == Role::text ? "text" : "image"; }

struct EmbeddingMatrix {
    Matrix data;  // N x D
    Role role = Role::text;

    Index count() const { return data.rows(); }
    Index dim() const { return data.cols(); }
};

struct Manifest {
    int format_version = 1;
    std::string dtype = "f32le";
    std::int64_t text_dim = 0;
    std::int64_t image_dim = 0;
    std::int64_t pair_count = 0;
    std::string encoder_name;
    bool normalized = false;
    std::string source_note;
    std::string text_file = "text.f32";
    std::string image_file = "image.f32";
};

struct PairedCorpus {
    EmbeddingMatrix text;
    EmbeddingMatrix image;
    Manifest manifest;

    Index count() const { return text.count(); }
};

namespace detail {

inline void check_finite(const Matrix& m, std::string_view what) {
    for (Index i = 0; i < m.rows(); ++i) {
        for (Index j = 0; j < m.cols(); ++j) {
            if (!std::isfinite(m(i, j))) {
                fail(ErrorKind::NonFiniteValue, std::string(what) + " row " + std::to_string(i) + " col " +
                                                    std::to_string(j));
            }
        }
    }
}

inline std::uint32_t to_little_endian(std::uint32_t v) {
    if constexpr (std::endian::native == std::endian::little) {
        return v;
    } else {
        return ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
    }
}

inline const nlohmann::json& field(const nlohmann::json& j, const char* key, const fs::path& where) {
    if (!j.contains(key)) fail(ErrorKind::ManifestSchemaError, where.string() + ": missing field '" + key + "'");
    return j.at(key);
}

inline std::int64_t int_field(const nlohmann::json& j, const char* key, const fs::path& where) {
    const auto& v = field(j, key, where);
    if (!v.is_number_integer()) {
        fail(ErrorKind::ManifestSchemaError, where.string() + ": field '" + key + "' must be an integer");
    }
    return v.get<std::int64_t>();
}

inline std::string string_field(const nlohmann::json& j, const char* key, const fs::path& where) {
    const auto& v = field(j, key, where);
    if (!v.is_string()) {
        fail(ErrorKind::ManifestSchemaError, where.string() + ": field '" + key + "' must be a string");
    }
    return v.get<std::string>();
}

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& allowed, const fs::path& where) {
    for (const auto& [key, _] : j.items()) {
        if (!allowed.contains(key)) {
            fail(ErrorKind::ManifestSchemaError, where.string() + ": unknown field '" + key + "'");
        }
    }
}

inline nlohmann::json parse_json_file(const fs::path& path) {
    if (!fs::exists(path)) fail(ErrorKind::MissingFile, path.string());
    std::ifstream in(path);
    if (!in) fail(ErrorKind::IoError, "cannot open " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        fail(ErrorKind::ManifestSchemaError, path.string() + ": " + e.what());
    }
}

inline void write_text_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::IoError, "cannot write " + path.string());
    out << text;
    if (!out) fail(ErrorKind::IoError, "short write to " + path.string());
}

inline void ensure_directory(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) {
        fail(ErrorKind::IoError, "cannot create directory " + dir.string() + (ec ? ": " + ec.message() : ""));
    }
}

}  // namespace detail

/// Reads an N x D binary32 little-endian row-major file. The byte length must
/// match exactly and every value must be finite.
inline Matrix read_f32_matrix(const fs::path& path, Index rows, Index cols) {
    if (!fs::exists(path)) fail(ErrorKind::MissingFile, path.string());
    const auto expected = static_cast<std::uintmax_t>(rows) * static_cast<std::uintmax_t>(cols) * 4u;
    const auto actual = fs::file_size(path);
    if (actual != expected) {
        fail(ErrorKind::ShapeMismatch, path.string() + ": declared " + std::to_string(rows) + "x" +
                                           std::to_string(cols) + " (" + std::to_string(expected) +
                                           " bytes) but file holds " + std::to_string(actual) + " bytes");
    }
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::IoError, "cannot open " + path.string());
    std::vector<std::uint32_t> raw(static_cast<std::size_t>(rows * cols));
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(expected));
    if (!in) fail(ErrorKind::IoError, "short read from " + path.string());

    Matrix m(rows, cols);
    for (Index i = 0; i < rows; ++i) {
        for (Index j = 0; j < cols; ++j) {
            const float v = std::bit_cast<float>(detail::to_little_endian(raw[static_cast<std::size_t>(i * cols + j)]));
            if (!std::isfinite(v)) {
                fail(ErrorKind::NonFiniteValue,
                     path.string() + " row " + std::to_string(i) + " col " + std::to_string(j));
            }
            m(i, j) = static_cast<double>(v);
        }
    }
    return m;
}

inline void write_f32_matrix(const fs::path& path, const Matrix& m) {
    std::vector<std::uint32_t> raw(static_cast<std::size_t>(m.size()));
    for (Index i = 0; i < m.rows(); ++i) {
        for (Index j = 0; j < m.cols(); ++j) {
            const auto v = static_cast<float>(m(i, j));
            raw[static_cast<std::size_t>(i * m.cols() + j)] = detail::to_little_endian(std::bit_cast<std::uint32_t>(v));
        }
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::IoError, "cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size() * 4));
    if (!out) fail(ErrorKind::IoError, "short write to " + path.string());
}

/// Validates the PairedCorpus invariants and fills the manifest shape fields.
inline PairedCorpus make_corpus(Matrix text, Matrix image, Manifest manifest = {}) {
    require(text.rows() == image.rows(), ErrorKind::ShapeMismatch,
            "text has " + std::to_string(text.rows()) + " rows, image has " + std::to_string(image.rows()));
    require(text.rows() >= 2, ErrorKind::TooFewSamples, "a corpus needs at least two pairs");
    require(text.cols() >= 1 && image.cols() >= 1, ErrorKind::ShapeMismatch, "embedding dims must be >= 1");
    detail::check_finite(text, "text");
    detail::check_finite(image, "image");
    manifest.text_dim = text.cols();
    manifest.image_dim = image.cols();
    manifest.pair_count = text.rows();
    return PairedCorpus{{std::move(text), Role::text}, {std::move(image), Role::image}, std::move(manifest)};
}

inline Manifest parse_manifest(const nlohmann::json& j, const fs::path& where) {
    using namespace detail;
    if (!j.is_object()) fail(ErrorKind::ManifestSchemaError, where.string() + ": manifest must be a JSON object");
    reject_unknown(j,
                   {"format_version", "dtype", "text_dim", "image_dim", "pair_count", "encoder_name", "normalized",
                    "source_note", "text_file", "image_file"},
                   where);
    Manifest m;
    m.format_version = static_cast<int>(int_field(j, "format_version", where));
    if (m.format_version != 1) fail(ErrorKind::ManifestSchemaError, where.string() + ": format_version must be 1");
    m.dtype = string_field(j, "dtype", where);
    if (m.dtype != "f32le") fail(ErrorKind::ManifestSchemaError, where.string() + ": dtype must be \"f32le\"");
    m.text_dim = int_field(j, "text_dim", where);
    m.image_dim = int_field(j, "image_dim", where);
    m.pair_count = int_field(j, "pair_count", where);
    if (m.text_dim < 1 || m.image_dim < 1) fail(ErrorKind::ManifestSchemaError, where.string() + ": dims must be >= 1");
    if (m.pair_count < 2) fail(ErrorKind::ManifestSchemaError, where.string() + ": pair_count must be >= 2");
    m.encoder_name = string_field(j, "encoder_name", where);
    const auto& normalized = field(j, "normalized", where);
    if (!normalized.is_boolean()) {
        fail(ErrorKind::ManifestSchemaError, where.string() + ": field 'normalized' must be a boolean");
    }
    m.normalized = normalized.get<bool>();
    m.source_note = string_field(j, "source_note", where);
    m.text_file = string_field(j, "text_file", where);
    m.image_file = string_field(j, "image_file", where);
    return m;
}

inline nlohmann::ordered_json to_json(const Manifest& m) {
    nlohmann::ordered_json j;
    j["format_version"] = m.format_version;
    j["dtype"] = m.dtype;
    j["text_dim"] = m.text_dim;
    j["image_dim"] = m.image_dim;
    j["pair_count"] = m.pair_count;
    j["encoder_name"] = m.encoder_name;
    j["normalized"] = m.normalized;
    j["source_note"] = m.source_note;
    j["text_file"] = m.text_file;
    j["image_file"] = m.image_file;
    return j;
}

/// Loads a corpus from its manifest. Matrix paths are resolved relative to
/// the manifest's directory.
inline PairedCorpus load_corpus(const fs::path& manifest_path) {
    const auto j = detail::parse_json_file(manifest_path);
    Manifest m = parse_manifest(j, manifest_path);
    const fs::path base = manifest_path.parent_path();
    Matrix text = read_f32_matrix(base / m.text_file, m.pair_count, m.text_dim);
    Matrix image = read_f32_matrix(base / m.image_file, m.pair_count, m.image_dim);
    return make_corpus(std::move(text), std::move(image), std::move(m));
}

/// Writes manifest.json plus the two matrix files into `dir` (created if
/// needed) and returns the manifest that was written.
inline Manifest save_corpus(const PairedCorpus& corpus, const fs::path& dir) {
    detail::ensure_directory(dir);
    Manifest m = corpus.manifest;
    m.format_version = 1;
    m.dtype = "f32le";
    m.text_dim = corpus.text.dim();
    m.image_dim = corpus.image.dim();
    m.pair_count = corpus.count();
    if (m.text_file.empty()) m.text_file = "text.f32";
    if (m.image_file.empty()) m.image_file = "image.f32";
    write_f32_matrix(dir / m.text_file, corpus.text.data);
    write_f32_matrix(dir / m.image_file, corpus.image.data);
    detail::write_text_file(dir / "manifest.json", to_json(m).dump(2) + "\n");
    return m;
}

/// k pairs drawn without replacement (partial Fisher-Yates). Row i of both
/// matrices travels together.
inline PairedCorpus subsample(const PairedCorpus& corpus, Index k, std::uint64_t seed) {
    require(k >= 2, ErrorKind::KTooSmall, "k=" + std::to_string(k) + " (need >= 2)");
    require(k <= corpus.count(), ErrorKind::KTooLarge,
            "k=" + std::to_string(k) + " exceeds pair count " + std::to_string(corpus.count()));
    std::vector<Index> order(static_cast<std::size_t>(corpus.count()));
    std::iota(order.begin(), order.end(), Index{0});
    Rng rng(seed);
    for (Index i = 0; i < k; ++i) {
        const auto remaining = static_cast<std::uint64_t>(corpus.count() - i);
        const auto j = i + static_cast<Index>(rng.below(remaining));
        std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }
    Matrix text(k, corpus.text.dim());
    Matrix image(k, corpus.image.dim());
    for (Index i = 0; i < k; ++i) {
        const Index src = order[static_cast<std::size_t>(i)];
        text.row(i) = corpus.text.data.row(src);
        image.row(i) = corpus.image.data.row(src);
    }
    Manifest m = corpus.manifest;
    return make_corpus(std::move(text), std::move(image), std::move(m));
}

// ---------------------------------------------------------------------------
// Matrix bundles: the same manifest + raw f32 layout, used for covariance
// artifacts and loss batches. Each entry carries a role tag.

struct MatrixBundle {
    std::string kind;
    std::map<std::string, Matrix> entries;
    nlohmann::json attributes = nlohmann::json::object();

    const Matrix& at(const std::string& role) const {
        auto it = entries.find(role);
        if (it == entries.end()) fail(ErrorKind::NotComputed, "bundle '" + kind + "' has no entry '" + role + "'");
        return it->second;
    }
    bool contains(const std::string& role) const { return entries.contains(role); }
};

inline void save_bundle(const MatrixBundle& bundle, const fs::path& dir, const std::string& manifest_name) {
    detail::ensure_directory(dir);
    nlohmann::ordered_json j;
    j["format_version"] = 1;
    j["dtype"] = "f32le";
    j["kind"] = bundle.kind;
    j["entries"] = nlohmann::ordered_json::array();
    for (const auto& [role, m] : bundle.entries) {
        const std::string file = role + ".f32";
        write_f32_matrix(dir / file, m);
        nlohmann::ordered_json e;
        e["role"] = role;
        e["file"] = file;
        e["rows"] = m.rows();
        e["cols"] = m.cols();
        j["entries"].push_back(e);
    }
    j["attributes"] = nlohmann::ordered_json::parse(bundle.attributes.dump());
    detail::write_text_file(dir / manifest_name, j.dump(2) + "\n");
}

inline MatrixBundle load_bundle(const fs::path& manifest_path) {
    using namespace detail;
    const auto j = parse_json_file(manifest_path);
    if (!j.is_object()) fail(ErrorKind::ManifestSchemaError, manifest_path.string() + ": must be a JSON object");
    reject_unknown(j, {"format_version", "dtype", "kind", "entries", "attributes"}, manifest_path);
    if (int_field(j, "format_version", manifest_path) != 1) {
        fail(ErrorKind::ManifestSchemaError, manifest_path.string() + ": format_version must be 1");
    }
    if (string_field(j, "dtype", manifest_path) != "f32le") {
        fail(ErrorKind::ManifestSchemaError, manifest_path.string() + ": dtype must be \"f32le\"");
    }
    MatrixBundle bundle;
    bundle.kind = string_field(j, "kind", manifest_path);
    const auto& entries = field(j, "entries", manifest_path);
    if (!entries.is_array()) fail(ErrorKind::ManifestSchemaError, manifest_path.string() + ": entries must be an array");
    const fs::path base = manifest_path.parent_path();
    for (const auto& e : entries) {
        reject_unknown(e, {"role", "file", "rows", "cols"}, manifest_path);
        const auto role = string_field(e, "role", manifest_path);
        const auto rows = int_field(e, "rows", manifest_path);
        const auto cols = int_field(e, "cols", manifest_path);
        if (rows < 1 || cols < 1) fail(ErrorKind::ManifestSchemaError, manifest_path.string() + ": empty entry " + role);
        bundle.entries[role] = read_f32_matrix(base / string_field(e, "file", manifest_path), rows, cols);
    }
    if (j.contains("attributes")) bundle.attributes = j.at("attributes");
    return bundle;
}

}  // namespace sada
