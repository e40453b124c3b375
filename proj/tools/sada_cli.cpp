// sada: command-line front end for the library.
//
// Exit codes: 0 success, 1 proposition failure, 2 usage or input error.

#include <bit>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "sada/sada.hpp"

namespace {

using sada::Index;
using sada::Matrix;
using sada::Vector;
using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

constexpr int kOk = 0;
constexpr int kPropositionFailure = 1;
constexpr int kUsageError = 2;

struct Global {
    std::uint64_t seed = 2024;
    unsigned threads = 1;
    std::string output_dir = "sada_out";
    std::string log_level = "info";
};

struct CovOpts {
    std::string corpus;
    Index subsample = 0;
    std::optional<double> ridge;
};

struct AugmentOpts {
    std::string corpus;
    std::string cov;
    double beta = 0.05;
    std::string mode = "uniform";
};

struct LossOpts {
    std::string batch;
    std::string cov;
    double beta = 0.05;
    double varphi = 0.01;
    std::string db_variant = "cosine";
};

struct ItaTOpts {
    std::string corpus;
    std::string cov;
    double beta = 0.05;
    sada::ItaTTrainConfig train;
    Index hidden = 0;
    int steps = 2;
    double trunk_std = 0.1;
};

struct TestbedOpts {
    sada::TestbedConfig cfg;
};

struct InterpolateOpts {
    std::string corpus;
    std::string cov;
    Index index = 0;
    int steps = 5;
    double beta = 0.05;
    std::string mode = "rademacher";
};

fs::path out_dir(const Global& g) { return fs::path(g.output_dir); }

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) sada::fail(sada::ErrorKind::IoError, "cannot open " + path.string() + " for writing");
    out << text;
    if (!out) sada::fail(sada::ErrorKind::IoError, "write failed: " + path.string());
}

void write_run_json(const Global& g, const std::string& command, const json& options) {
    sada::detail::ensure_directory(out_dir(g));
    json j;
    j["command"] = command;
    j["seed"] = g.seed;
    j["threads"] = g.threads;
    j["output_dir"] = g.output_dir;
    j["log_level"] = g.log_level;
    j["options"] = options;
    write_text(out_dir(g) / "run.json", j.dump(2) + "\n");
}

sada::ConditionalDiagonals load_conditional(const std::string& cov_manifest) {
    return sada::conditional_from_bundle(sada::load_bundle(cov_manifest));
}

std::string to_csv_number(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// ---------------------------------------------------------------------------

int cmd_compute_cov(const Global& g, const CovOpts& o) {
    json opts;
    opts["corpus"] = o.corpus;
    opts["subsample"] = o.subsample;
    opts["ridge"] = o.ridge ? json(*o.ridge) : json(nullptr);
    write_run_json(g, "compute-cov", opts);

    sada::PairedCorpus corpus = sada::load_corpus(o.corpus);
    spdlog::info("loaded {} pairs (text dim {}, image dim {})", corpus.count(), corpus.text.dim(), corpus.image.dim());
    if (o.subsample > 0) {
        corpus = sada::subsample(corpus, o.subsample, g.seed);
        spdlog::info("subsampled to {} pairs", corpus.count());
    }
    const sada::CovarianceSet cov = sada::estimate_covariances(corpus, g.threads, o.ridge);
    const sada::ConditionalDiagonals cond = sada::conditional_diagonals(cov, {.keep_full = false});
    sada::save_bundle(sada::to_bundle(cov, cond), out_dir(g), "covariance.json");
    std::cout << "pairs used: " << cov.sample_count << "\n"
              << "condition(C_rr + lambda I) for C_ss|r: " << cond.condition_ss_given_r << "\n"
              << "condition(C_ss + lambda I) for C_rr|s: " << cond.condition_rr_given_s << "\n"
              << "wrote " << (out_dir(g) / "covariance.json").string() << "\n";
    return kOk;
}

int cmd_augment(const Global& g, const AugmentOpts& o) {
    json opts;
    opts["corpus"] = o.corpus;
    opts["cov"] = o.cov;
    opts["beta"] = o.beta;
    opts["mode"] = o.mode;
    write_run_json(g, "augment", opts);

    const sada::PairedCorpus corpus = sada::load_corpus(o.corpus);
    const sada::ConditionalDiagonals cond = load_conditional(o.cov);
    const sada::AugmentationSpec spec{o.beta, sada::parse_mode(o.mode), g.seed};
    const sada::AugmentedBatch batch = sada::augment(corpus.text.data, cond, spec);

    sada::Manifest m = corpus.manifest;
    m.source_note = "ITA_C augmented (beta " + to_csv_number(o.beta) + ", " + o.mode + ", seed " +
                    std::to_string(g.seed) + ")" + (m.source_note.empty() ? "" : "; " + m.source_note);
    const sada::PairedCorpus out = sada::make_corpus(batch.augmented, corpus.image.data, std::move(m));
    sada::save_corpus(out, out_dir(g));
    std::cout << "augmented " << out.count() << " text embeddings; wrote "
              << (out_dir(g) / "manifest.json").string() << "\n";
    return kOk;
}

int cmd_losses(const Global& g, const LossOpts& o) {
    json opts;
    opts["batch"] = o.batch;
    opts["cov"] = o.cov;
    opts["beta"] = o.beta;
    opts["varphi"] = o.varphi;
    opts["db_variant"] = o.db_variant;
    write_run_json(g, "losses", opts);

    sada::DbVariant variant;
    if (o.db_variant == "cosine") {
        variant = sada::DbVariant::cosine;
    } else if (o.db_variant == "squared_norm") {
        variant = sada::DbVariant::squared_norm;
    } else {
        sada::fail(sada::ErrorKind::InvalidSpec, "unknown --db-variant '" + o.db_variant + "'");
    }

    const sada::MatrixBundle b = sada::load_bundle(o.batch);
    sada::require(b.kind == "loss_batch", sada::ErrorKind::ManifestSchemaError,
                  "expected a loss_batch bundle, got " + b.kind);
    const Matrix& es = b.at("e_s");
    const Matrix& esp = b.at("e_s_prime");
    const Matrix& ef = b.at("e_f");
    const Matrix& efp = b.at("e_f_prime");
    sada::require(es.rows() == esp.rows() && es.rows() == ef.rows() && es.rows() == efp.rows(),
                  sada::ErrorKind::ShapeMismatch, "loss_batch entries must have the same row count");
    const Vector d_rr = load_conditional(o.cov).rr_given_s();

    std::string csv = "l_db,l_r,l_s\n";
    double sum_db = 0.0, sum_r = 0.0, sum_s = 0.0;
    for (Index i = 0; i < es.rows(); ++i) {
        const sada::ShiftQuadruple q{es.row(i).transpose(), esp.row(i).transpose(), ef.row(i).transpose(),
                                     efp.row(i).transpose()};
        Vector eps;
        if (b.contains("epsilon_star")) {
            eps = b.at("epsilon_star").row(i).transpose();
        } else {
            sada::require(q.e_s.size() == d_rr.size(), sada::ErrorKind::ShapeMismatch,
                          "no epsilon_star entry and text dim differs from d(C_rr|s); cannot infer eps*");
            eps = (q.e_s_prime - q.e_s).unaryExpr([](double v) { return v < 0.0 ? -1.0 : 1.0; });
        }
        const sada::LrTarget target{eps, o.beta, d_rr, o.varphi};
        const double l_db = sada::loss_db(q, variant);
        const double l_r = sada::loss_r(q, target);
        const double l_s = sada::semantic_loss_total(q.e_s, q.e_s_prime, q.e_f, q.e_f_prime, false);
        sum_db += l_db;
        sum_r += l_r;
        sum_s += l_s;
        csv += to_csv_number(l_db) + "," + to_csv_number(l_r) + "," + to_csv_number(l_s) + "\n";
    }
    write_text(out_dir(g) / "losses.csv", csv);
    const double n = static_cast<double>(es.rows());
    std::cout << "rows: " << es.rows() << "\nmean l_db: " << sum_db / n << "\nmean l_r: " << sum_r / n
              << "\nmean l_s: " << sum_s / n << "\n";
    return kOk;
}

int cmd_train_ita_t(const Global& g, ItaTOpts o) {
    o.train.seed = g.seed;
    json opts;
    opts["corpus"] = o.corpus;
    opts["cov"] = o.cov;
    opts["beta"] = o.beta;
    opts["r"] = o.train.r;
    opts["learning_rate"] = o.train.learning_rate;
    opts["scale_step"] = o.train.scale_step;
    opts["epochs"] = o.train.epochs;
    opts["warmup_epochs"] = o.train.warmup_epochs;
    opts["distance_cap"] = o.train.distance_cap;
    opts["batch_size"] = o.train.batch_size;
    opts["hidden"] = o.hidden;
    opts["steps"] = o.steps;
    opts["trunk_std"] = o.trunk_std;
    write_run_json(g, "train-ita-t", opts);
    sada::validate(o.train);

    const sada::PairedCorpus corpus = sada::load_corpus(o.corpus);
    sada::require(corpus.text.dim() == corpus.image.dim(), sada::ErrorKind::DimMismatch,
                  "train-ita-t needs text and image embeddings in one space (equal dims)");
    const sada::ConditionalDiagonals cond = load_conditional(o.cov);
    const double ref = sada::ita_c_reference_scale(cond.ss_given_r(), o.beta);
    const sada::LinearGenerator gen = sada::fit_affine_generator(corpus);

    const Index d = corpus.text.dim();
    const Index hidden = o.hidden > 0 ? o.hidden : 4 * d;
    sada::TinyNet net = sada::TinyNet::initialized(d, hidden, o.steps, sada::derive_seed(g.seed, 1), o.trunk_std);
    const sada::ItaTTrainTrace trace = sada::train_ita_t(net, corpus.text.data, gen, o.train, ref);

    const Vector flat = net.flatten();
    {
        std::ofstream out(out_dir(g) / "net.f64", std::ios::binary);
        for (Index i = 0; i < flat.size(); ++i) {
            const auto bits = std::bit_cast<std::uint64_t>(flat(i));
            unsigned char bytes[8];
            for (int k = 0; k < 8; ++k) bytes[k] = static_cast<unsigned char>(bits >> (8 * k));
            out.write(reinterpret_cast<const char*>(bytes), 8);
        }
        if (!out) sada::fail(sada::ErrorKind::IoError, "cannot write net.f64");
    }
    json desc;
    desc["dtype"] = "f64le";
    desc["file"] = "net.f64";
    desc["dim"] = d;
    desc["hidden"] = hidden;
    desc["steps"] = o.steps;
    desc["parameter_count"] = net.parameter_count();
    desc["layout"] = "per step: w_in(HxD), b_in(H), w_scale(DxH), b_scale(D), w_shift(DxH), b_shift(D); column-major";
    desc["reference_scale"] = trace.reference_scale;
    desc["distance_cap"] = trace.distance_cap;
    desc["collapse_flag"] = trace.collapse_flag;
    desc["aborted"] = trace.aborted;
    write_text(out_dir(g) / "net.json", desc.dump(2) + "\n");

    std::string csv = "epoch,l_ita_t,l_id,s_term,mean_shift\n";
    for (std::size_t i = 0; i < trace.epochs.size(); ++i) {
        const auto& e = trace.epochs[i];
        csv += std::to_string(i) + "," + to_csv_number(e.l_ita_t) + "," + to_csv_number(e.l_id) + "," +
               to_csv_number(e.s_term) + "," + to_csv_number(e.mean_shift) + "\n";
    }
    write_text(out_dir(g) / "trace.csv", csv);

    std::cout << "epochs run: " << trace.epochs.size() << "\nfinal mean shift: " << trace.final_mean_shift()
              << " (reference " << ref << ")\ncollapse: " << (trace.collapse_flag ? "yes" : "no")
              << (trace.aborted ? " (aborted on non-finite values)" : "") << "\n";
    return kOk;
}

int cmd_testbed(const Global& g, TestbedOpts o) {
    o.cfg.seed = g.seed;
    o.cfg.prop1.threads = g.threads;
    const auto& c = o.cfg;
    json opts;
    opts["beta"] = c.beta;
    opts["n_seeds"] = c.prop1.n_seeds;
    opts["fit_ridge"] = c.prop1.fit_ridge;
    opts["n_pairs"] = c.n_pairs;
    opts["world"] = {{"latent_dim", c.world.latent_dim},   {"text_dim", c.world.text_dim},
                     {"image_dim", c.world.image_dim},     {"semantic_dim", c.world.semantic_dim},
                     {"samples", c.world.samples},         {"signal_scale", c.world.signal_scale},
                     {"noise", c.world.noise},             {"encoder_gain", c.world.encoder_gain},
                     {"identity_encoder", c.world.identity_encoder}, {"seed", c.world.seed}};
    opts["generator"] = {{"epochs", c.generator.epochs},
                         {"learning_rate", c.generator.learning_rate},
                         {"varphi", c.generator.varphi},
                         {"varphi_scale", c.generator.varphi_scale},
                         {"init_std", c.generator.init_std}};
    write_run_json(g, "testbed", opts);

    const sada::TestbedReport report = sada::run_testbed(c);
    write_text(out_dir(g) / "testbed_report.json", sada::to_json(report).dump(2) + "\n");

    auto line = [](const char* name, bool pass, const std::string& detail) {
        std::cout << name << " " << (pass ? "PASS" : "FAIL") << "  " << detail << "\n";
    };
    line("prop1", report.prop1.pass,
         "trace_cov_aug=" + to_csv_number(report.prop1.trace_cov_aug) +
             " trace_cov_unaug=" + to_csv_number(report.prop1.trace_cov_unaug));
    line("prop3", report.prop3.pass, "relative_change=" + to_csv_number(report.prop3.relative_change));
    line("prop4", report.prop4.pass,
         "p95_with_lr=" + to_csv_number(report.prop4.lipschitz_with_lr.p95) +
             " p95_without_lr=" + to_csv_number(report.prop4.lipschitz_without_lr.p95) +
             " max_bound_excess=" + to_csv_number(report.prop4.max_bound_excess));
    line("prop5", report.prop5.pass,
         "l_db=" + to_csv_number(report.prop5.l_db) + " l_r=" + to_csv_number(report.prop5.l_r));
    std::cout << "collapse (L_r generator): " << sada::to_string(report.collapse.verdict) << "\n";
    return report.all_pass() ? kOk : kPropositionFailure;
}

int cmd_interpolate(const Global& g, const InterpolateOpts& o) {
    json opts;
    opts["corpus"] = o.corpus;
    opts["cov"] = o.cov;
    opts["index"] = o.index;
    opts["steps"] = o.steps;
    opts["beta"] = o.beta;
    opts["mode"] = o.mode;
    write_run_json(g, "interpolate", opts);

    const sada::PairedCorpus corpus = sada::load_corpus(o.corpus);
    sada::require(o.index >= 0 && o.index < corpus.count(), sada::ErrorKind::InvalidSpec,
                  "--index " + std::to_string(o.index) + " out of range");
    const sada::ConditionalDiagonals cond = load_conditional(o.cov);
    const Matrix row = corpus.text.data.row(o.index);
    const sada::AugmentationSpec spec{o.beta, sada::parse_mode(o.mode), g.seed};
    const sada::AugmentedBatch aug = sada::augment(row, cond, spec);
    const auto path = sada::interpolate(row.row(0).transpose(), aug.augmented.row(0).transpose(), o.steps);

    std::string csv = "step,t";
    for (Index j = 0; j < row.cols(); ++j) csv += ",e" + std::to_string(j);
    csv += "\n";
    for (std::size_t k = 0; k < path.size(); ++k) {
        const double t = static_cast<double>(k) / static_cast<double>(path.size() - 1);
        csv += std::to_string(k) + "," + to_csv_number(t);
        for (Index j = 0; j < path[k].size(); ++j) csv += "," + to_csv_number(path[k](j));
        csv += "\n";
    }
    write_text(out_dir(g) / "interpolation.csv", csv);
    std::cout << "wrote " << path.size() << " points to " << (out_dir(g) / "interpolation.csv").string() << "\n";
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"sada: semantic-aware augmentation for paired text/image embeddings"};
    app.require_subcommand(1);
    app.fallthrough();

    Global g;
    app.add_option("--seed", g.seed, "master seed")->capture_default_str();
    app.add_option("--threads", g.threads, "worker threads")->capture_default_str()->check(CLI::PositiveNumber);
    app.add_option("--output-dir", g.output_dir, "directory for artifacts and run.json")->capture_default_str();
    app.add_option("--log-level", g.log_level, "trace|debug|info|warn|error|off")
        ->capture_default_str()
        ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));

    CovOpts cov;
    auto* c_cov = app.add_subcommand("compute-cov", "estimate covariances and conditional diagonals");
    c_cov->add_option("--corpus", cov.corpus, "corpus manifest")->required();
    c_cov->add_option("--subsample", cov.subsample, "use K random pairs (0 = all)");
    c_cov->add_option("--ridge", cov.ridge, "Schur ridge lambda (default 1e-6 * trace / D)");
    c_cov->add_option("--out", g.output_dir, "alias for --output-dir");

    AugmentOpts aug;
    auto* c_aug = app.add_subcommand("augment", "ITA_C augmentation of the text embeddings");
    c_aug->add_option("--corpus", aug.corpus, "corpus manifest")->required();
    c_aug->add_option("--cov", aug.cov, "covariance.json from compute-cov")->required();
    c_aug->add_option("--beta", aug.beta, "sampling range")->capture_default_str();
    c_aug->add_option("--mode", aug.mode, "uniform|rademacher")->capture_default_str();
    c_aug->add_option("--out", g.output_dir, "alias for --output-dir");

    LossOpts loss;
    auto* c_loss = app.add_subcommand("losses", "evaluate L_db, L_r and L_S on a loss_batch bundle");
    c_loss->add_option("--batch", loss.batch, "loss_batch bundle manifest")->required();
    c_loss->add_option("--cov", loss.cov, "covariance.json from compute-cov")->required();
    c_loss->add_option("--beta", loss.beta)->capture_default_str();
    c_loss->add_option("--varphi", loss.varphi, "L_r weight")->capture_default_str();
    c_loss->add_option("--db-variant", loss.db_variant, "cosine|squared_norm")->capture_default_str();
    c_loss->add_option("--out", g.output_dir, "alias for --output-dir");

    ItaTOpts itat;
    auto* c_itat = app.add_subcommand("train-ita-t", "train the learnable augmenter against a fitted generator");
    c_itat->add_option("--corpus", itat.corpus, "corpus manifest (text and image dims equal)")->required();
    c_itat->add_option("--cov", itat.cov, "covariance.json from compute-cov")->required();
    c_itat->add_option("--beta", itat.beta, "sets the reference scale mean(beta * d(C_ss|r))")->capture_default_str();
    c_itat->add_option("--r", itat.train.r, "augmentation strength in [0, 1)")->capture_default_str();
    c_itat->add_option("--lr", itat.train.learning_rate)->capture_default_str();
    c_itat->add_option("--scale-step", itat.train.scale_step, "divide lr by mean(e^2)")->capture_default_str();
    c_itat->add_option("--epochs", itat.train.epochs)->capture_default_str();
    c_itat->add_option("--warmup", itat.train.warmup_epochs, "epochs with the L_id weight at 0")
        ->capture_default_str();
    c_itat->add_option("--distance-cap", itat.train.distance_cap, "0 = 100 * reference^2")->capture_default_str();
    c_itat->add_option("--batch-size", itat.train.batch_size, "0 = full batch")->capture_default_str();
    c_itat->add_option("--hidden", itat.hidden, "hidden width (0 = 4 * D)")->capture_default_str();
    c_itat->add_option("--steps", itat.steps, "recurrent steps n")->capture_default_str();
    c_itat->add_option("--out", g.output_dir, "alias for --output-dir");

    TestbedOpts tb;
    auto* c_tb = app.add_subcommand("testbed", "run the synthetic proposition experiments");
    c_tb->add_option("--beta", tb.cfg.beta)->capture_default_str();
    c_tb->add_option("--seeds", tb.cfg.prop1.n_seeds, "Monte-Carlo seeds for prop1")->capture_default_str();
    c_tb->add_option("--pairs", tb.cfg.n_pairs, "pairs for the collapse detectors")->capture_default_str();
    c_tb->add_option("--world-seed", tb.cfg.world.seed)->capture_default_str();
    c_tb->add_option("--samples", tb.cfg.world.samples)->capture_default_str();
    c_tb->add_option("--text-dim", tb.cfg.world.text_dim, "must equal --semantic-dim")->capture_default_str();
    c_tb->add_option("--semantic-dim", tb.cfg.world.semantic_dim)->capture_default_str();
    c_tb->add_option("--epochs", tb.cfg.generator.epochs, "generator training epochs")->capture_default_str();
    c_tb->add_option("--out", g.output_dir, "alias for --output-dir");

    InterpolateOpts interp;
    auto* c_int = app.add_subcommand("interpolate", "points between a text embedding and its ITA_C augmentation");
    c_int->add_option("--corpus", interp.corpus, "corpus manifest")->required();
    c_int->add_option("--cov", interp.cov, "covariance.json from compute-cov")->required();
    c_int->add_option("--index", interp.index, "corpus row")->capture_default_str();
    c_int->add_option("--steps", interp.steps, "points including both endpoints")->capture_default_str();
    c_int->add_option("--beta", interp.beta)->capture_default_str();
    c_int->add_option("--mode", interp.mode, "uniform|rademacher")->capture_default_str();
    c_int->add_option("--out", g.output_dir, "alias for --output-dir");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsageError;
    }

    auto logger = spdlog::stderr_color_mt("sada");
    spdlog::set_default_logger(logger);
    spdlog::set_level(spdlog::level::from_str(g.log_level));

    try {
        if (*c_cov) return cmd_compute_cov(g, cov);
        if (*c_aug) return cmd_augment(g, aug);
        if (*c_loss) return cmd_losses(g, loss);
        if (*c_itat) return cmd_train_ita_t(g, itat);
        if (*c_tb) return cmd_testbed(g, tb);
        if (*c_int) return cmd_interpolate(g, interp);
    } catch (const sada::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsageError;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return kPropositionFailure;
    }
    return kUsageError;
}
