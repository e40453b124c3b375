// Acceptance run: one PASS/FAIL line per criterion, with its runtime.
// Exit status is nonzero if any criterion fails.

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "sada/sada.hpp"

using namespace sada;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Criterion {
    std::string name;
    double limit_s;  // 0 when no runtime limit applies
    std::function<Outcome()> run;
};

std::string fmt_g(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

Matrix random_spd(Index d, Rng& rng) {
    Matrix g(d, d);
    for (Index i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();
    const Matrix q = Eigen::HouseholderQR<Matrix>(g).householderQ();
    Vector eig(d);
    for (Index i = 0; i < d; ++i) eig(i) = 0.1 + 1.9 * rng.uniform01();
    const Matrix a = q * eig.asDiagonal() * q.transpose();
    return 0.5 * (a + a.transpose());
}

Vector residual_variance_oracle(const PairedCorpus& c) {
    Matrix s = c.text.data;
    Matrix r = c.image.data;
    s.rowwise() -= s.colwise().mean();
    r.rowwise() -= r.colwise().mean();
    const Matrix residual = s - r * r.householderQr().solve(s);
    return residual.colwise().squaredNorm().transpose() / static_cast<double>(c.count() - 1);
}

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

Vector normal_vector(Index d, Rng& rng) {
    Vector v(d);
    for (Index i = 0; i < d; ++i) v(i) = rng.normal();
    return v;
}

Outcome schur_loewner() {
    Rng rng(101);
    int loewner_fail = 0;
    double worst_rel = 0.0;
    for (int t = 0; t < 100; ++t) {
        const Matrix joint = random_spd(16, rng);
        const CovarianceSet cov =
            covariance_from_blocks(joint.topLeftCorner(8, 8), joint.bottomRightCorner(8, 8), joint.topRightCorner(8, 8), 0.0);
        const ConditionalDiagonals cond =
            conditional_covariance(cov, ConditionalTarget::ss_given_r, {.keep_full = true});
        if (!loewner_leq(cond.full_ss(), cov.c_ss, 1e-8)) ++loewner_fail;

        // sample from the same joint law and compare with least-squares residuals
        const Matrix chol = joint.llt().matrixL();
        Matrix x(400, 16);
        for (Index i = 0; i < x.rows(); ++i) x.row(i) = (chol * normal_vector(16, rng)).transpose();
        const PairedCorpus c = make_corpus(x.leftCols(8), x.rightCols(8));
        const Vector d = conditional_diagonals(estimate_covariances(c, 1, 0.0)).ss_given_r();
        const Vector oracle = residual_variance_oracle(c);
        for (Index j = 0; j < 8; ++j) worst_rel = std::max(worst_rel, std::abs(d(j) - oracle(j)) / std::abs(oracle(j)));
    }
    return {loewner_fail == 0 && worst_rel <= 1e-6,
            "loewner failures " + std::to_string(loewner_fail) + "/100, worst oracle rel err " + fmt_g(worst_rel)};
}

Outcome sampling_bound() {
    const Index n = 100000, d = 8;
    Rng rng(202);
    Matrix text(n, d);
    for (Index i = 0; i < text.size(); ++i) text.data()[i] = rng.normal();
    Vector var(d);
    for (Index j = 0; j < d; ++j) var(j) = 0.01 + rng.uniform01();
    const double beta = 0.05;

    const AugmentedBatch u = augment(text, var, {beta, PerturbationMode::uniform, 1});
    const Matrix du = u.shift();
    long violations = 0;
    for (Index i = 0; i < n; ++i) {
        for (Index j = 0; j < d; ++j) violations += std::abs(du(i, j)) > beta * var(j) ? 1 : 0;
    }
    const AugmentedBatch r = augment(text, var, {beta, PerturbationMode::rademacher, 2});
    const Matrix dr = r.shift();
    double worst = 0.0;
    for (Index i = 0; i < n; ++i) {
        for (Index j = 0; j < d; ++j) worst = std::max(worst, std::abs(std::abs(dr(i, j)) - beta * var(j)));
    }
    return {violations == 0 && worst <= 1e-12,
            "uniform violations " + std::to_string(violations) + ", rademacher max |err| " + fmt_g(worst)};
}

Outcome losses_and_gradients() {
    std::string detail;
    bool ok = true;

    // dyadic values make the residual exactly representable
    Vector ef(2), efp(2), eps(2), var(2);
    ef << 1, 2;
    eps << 1, -1;
    var << 2, 4;
    const LrTarget zero_target{eps, 0.5, var, 1.0};
    efp = ef + zero_target.shift();
    const double l_zero = loss_r(ef, efp, zero_target);
    ok = ok && l_zero == 0.0;
    detail += "zero-residual L_r " + fmt_g(l_zero);

    Vector d(8);
    for (Index j = 0; j < 8; ++j) d(j) = 0.5 + 0.125 * static_cast<double>(j);
    const double beta = 0.05, varphi = 1.0;
    const TightnessWitness w = tightness_witness(d, beta, varphi);
    const double bound = 0.99 * varphi * (beta * d).squaredNorm();
    ok = ok && w.l_db <= 1e-6 && w.l_r >= bound;
    detail += ", witness L_db " + fmt_g(w.l_db) + " L_r " + fmt_g(w.l_r) + " >= " + fmt_g(bound);

    Rng rng(303);
    double worst_lr = 0.0;
    for (int t = 0; t < 50; ++t) {
        const Index dim = 1 + static_cast<Index>(rng.below(8));
        Vector v(dim), signs(dim);
        for (Index i = 0; i < dim; ++i) {
            v(i) = 0.01 + rng.uniform01();
            signs(i) = rng.rademacher();
        }
        const LrTarget target{signs, 0.05 + rng.uniform01(), v, 0.01 + rng.uniform01()};
        const Vector a = normal_vector(dim, rng);
        const Vector b = normal_vector(dim, rng);
        worst_lr = std::max(worst_lr, fd_error([&](const Vector& x) { return loss_r(a, x, target); }, b,
                                               grad_loss_r(a, b, target), 1e-5));
    }
    ok = ok && worst_lr <= 1e-6;
    detail += ", L_r fd " + fmt_g(worst_lr);

    double worst_net = 0.0;
    for (int t = 0; t < 50; ++t) {
        const Index dim = 3;
        TinyNet net = TinyNet::zeros(dim, 5, 2);
        Vector flat = net.flatten();
        for (Index i = 0; i < flat.size(); ++i) flat(i) = 0.3 * rng.normal();
        net.unflatten(flat);
        Matrix batch(6, dim);
        for (Index i = 0; i < batch.size(); ++i) batch.data()[i] = rng.normal();
        Matrix a(dim, dim);
        for (Index i = 0; i < a.size(); ++i) a.data()[i] = rng.normal();
        const LinearGenerator gen{a, normal_vector(dim, rng)};
        const double r = 0.3 * rng.uniform01();
        auto loss_at = [&](const Vector& x) {
            TinyNet n2 = net;
            n2.unflatten(x);
            return loss_ita_t(n2, batch, gen, r, r, 1e9).loss;
        };
        worst_net = std::max(worst_net, fd_error(loss_at, flat, loss_ita_t(net, batch, gen, r, r, 1e9).gradient.flatten(), 1e-6));
    }
    ok = ok && worst_net <= 1e-5;
    detail += ", ITA_T fd " + fmt_g(worst_net);
    return {ok, detail};
}

struct WorldFixture {
    LinearWorld world;
    PairedCorpus corpus;
    ConditionalDiagonals cond;
    TrainedGenerators gens;
    AugmentationSpec pair_spec;
};

// Mirrors the default testbed pipeline; trained once and shared by the
// generator-based criteria, with the training time charged to the first.
const WorldFixture& fixture() {
    static const WorldFixture f = [] {
        const TestbedConfig cfg;
        auto [world, corpus] = generate_world(cfg.world);
        const ConditionalDiagonals cond =
            conditional_diagonals(estimate_covariances(world.semantic_corpus(corpus)), {.keep_full = false});
        GeneratorTrainConfig gen_cfg = cfg.generator;
        gen_cfg.beta = cfg.beta;
        gen_cfg.seed = derive_seed(cfg.seed, 2);
        TrainedGenerators gens = train_generators(world, corpus, cond, gen_cfg);
        return WorldFixture{world, corpus, cond, gens, {cfg.beta, PerturbationMode::uniform, derive_seed(cfg.seed, 3)}};
    }();
    return f;
}

Outcome prop1() {
    const TestbedConfig cfg;
    auto [world, corpus] = generate_world(cfg.world);
    const Prop1Result r = run_prop1(world, corpus, {0.05, PerturbationMode::uniform, derive_seed(cfg.seed, 1)}, cfg.prop1);
    const Prop1Result control =
        run_prop1(world, corpus, {0.0, PerturbationMode::uniform, derive_seed(cfg.seed, 1)}, cfg.prop1);
    const double gap = std::abs(control.trace_cov_aug - control.trace_cov_unaug);
    return {r.n_seeds == 100 && r.trace_cov_aug < r.trace_cov_unaug && gap <= 1e-10,
            "trace aug " + fmt_g(r.trace_cov_aug) + " < unaug " + fmt_g(r.trace_cov_unaug) + " over " +
                std::to_string(r.n_seeds) + " seeds, beta=0 gap " + fmt_g(gap)};
}

Outcome prop4() {
    const WorldFixture& f = fixture();
    const Prop4Result r = run_prop4(f.world, f.gens, f.corpus.text.data, f.cond, f.pair_spec);
    return {r.pass, "p95 Lipschitz with L_r " + fmt_g(r.lipschitz_with_lr.p95) + " vs without " +
                        fmt_g(r.lipschitz_without_lr.p95) + ", max bound excess " + fmt_g(r.max_bound_excess) +
                        " <= " + fmt_g(r.bound_tolerance)};
}

struct ConstantGenerator {
    Vector value;
    Vector apply(const Vector& /*x*/) const { return value; }
    Vector vjp(const Vector& x, const Vector& /*g*/) const { return Vector::Zero(x.size()); }
    Index output_dim() const { return value.size(); }
};

Outcome collapse() {
    const WorldFixture& f = fixture();
    const TestbedConfig cfg;
    const CollapseResult constant =
        collapse_metrics(ConstantGenerator{Vector::Ones(f.world.encoder.rows())}, f.corpus.text.data, f.cond,
                         f.pair_spec, cfg.n_pairs);
    Matrix normalized = f.corpus.text.data;
    normalized.rowwise().normalize();
    const LinearGenerator explosive{1e6 * f.world.encoder * f.world.generator_truth,
                                    Vector::Zero(f.world.encoder.rows())};
    const CollapseResult blown = collapse_metrics(explosive, normalized, f.cond, f.pair_spec, cfg.n_pairs);
    const CollapseResult trained = collapse_metrics(semantic_generator(f.world, f.gens.with_lr), f.corpus.text.data,
                                                    f.cond, f.pair_spec, cfg.n_pairs);
    return {constant.verdict == CollapseVerdict::collapse_similar &&
                blown.verdict == CollapseVerdict::collapse_different && trained.verdict == CollapseVerdict::healthy,
            std::string("constant ") + std::string(to_string(constant.verdict)) + ", explosive " +
                std::string(to_string(blown.verdict)) + ", L_r-trained " + std::string(to_string(trained.verdict))};
}

Outcome ita_t() {
    Rng rng(404);
    Matrix batch(64, 8);
    for (Index i = 0; i < batch.size(); ++i) batch.data()[i] = 10.0 * rng.normal();
    const bool identity = forward(TinyNet::zeros(8, 32, 2), batch) == batch;

    const ItaTSetup s = ita_t_setup(WorldConfig{});
    std::vector<double> shifts;
    for (double r : {0.0, 0.1, 0.2}) {
        ItaTTrainConfig cfg;
        cfg.r = r;
        shifts.push_back(run_ita_t(s, cfg).final_mean_shift());
    }
    const bool monotone = shifts[0] <= shifts[1] && shifts[1] <= shifts[2];
    ItaTTrainConfig strong;
    strong.r = 0.9;
    const ItaTTrainTrace t = run_ita_t(s, strong);
    return {identity && monotone && t.collapse_flag,
            std::string("zero-init identity ") + (identity ? "exact" : "inexact") + ", mean shift r=0/0.1/0.2 " +
                fmt_g(shifts[0]) + "/" + fmt_g(shifts[1]) + "/" + fmt_g(shifts[2]) + ", r=0.9 collapse_flag " +
                (t.collapse_flag ? "set" : "clear")};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

int run_cli(const std::string& args, const fs::path& log) {
    const std::string cmd = std::string("\"") + SADA_CLI_PATH + "\" " + args + " > \"" + log.string() + "\" 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome determinism_and_format() {
    const fs::path dir = fs::temp_directory_path() / ("sada_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::string detail;
    bool ok = true;

    Rng rng(505);
    Matrix s(257, 7), r(257, 5);
    for (Index i = 0; i < s.size(); ++i) s.data()[i] = static_cast<float>(100.0 * rng.normal());
    for (Index i = 0; i < r.size(); ++i) r.data()[i] = static_cast<float>(1e-3 * rng.normal());
    save_corpus(make_corpus(s, r), dir / "rt");
    const PairedCorpus back = load_corpus(dir / "rt" / "manifest.json");
    save_corpus(back, dir / "rt2");
    const bool round_trip = back.text.data == s && back.image.data == r &&
                            slurp(dir / "rt" / "text.f32") == slurp(dir / "rt2" / "text.f32") &&
                            slurp(dir / "rt" / "image.f32") == slurp(dir / "rt2" / "image.f32");
    ok = ok && round_trip;
    detail += std::string("round trip ") + (round_trip ? "bit-exact" : "differs");

    const int code_a = run_cli("--output-dir \"" + (dir / "a").string() + "\" testbed", dir / "a.log");
    const int code_b = run_cli("--output-dir \"" + (dir / "b").string() + "\" testbed", dir / "b.log");
    const std::string report_a = slurp(dir / "a" / "testbed_report.json");
    const bool identical = !report_a.empty() && report_a == slurp(dir / "b" / "testbed_report.json");
    ok = ok && identical && code_a == 0 && code_b == 0;
    detail += std::string(", testbed reports ") + (identical ? "identical" : "differ") + " (exit " +
              std::to_string(code_a) + "/" + std::to_string(code_b) + ")";

    const int missing = run_cli("--output-dir \"" + (dir / "m").string() + "\" compute-cov --corpus \"" +
                                    (dir / "absent.json").string() + "\"",
                                dir / "m.log");
    const int bad_flag = run_cli("testbed --bogus", dir / "f.log");
    const int help = run_cli("--help", dir / "h.log");
    const bool contract = missing == 2 && bad_flag == 2 && help == 0 &&
                          slurp(dir / "m.log").find("MissingFile") != std::string::npos;
    ok = ok && contract;
    detail += ", exit codes missing/bad-flag/help " + std::to_string(missing) + "/" + std::to_string(bad_flag) + "/" +
              std::to_string(help);
    fs::remove_all(dir);
    return {ok, detail};
}

}  // namespace

int main() {
    const std::vector<Criterion> criteria = {
        {"schur_loewner", 5.0, schur_loewner},
        {"sampling_bound", 5.0, sampling_bound},
        {"loss_zero_set_tightness_gradients", 0.0, losses_and_gradients},
        {"prop1_covariance_reduction", 60.0, prop1},
        {"prop4_lipschitz_bound", 120.0, prop4},
        {"collapse_detectors", 30.0, collapse},
        {"ita_t_suite", 120.0, ita_t},
        {"determinism_and_format", 0.0, determinism_and_format},
    };
    int failures = 0;
    for (const Criterion& c : criteria) {
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("threw ") + e.what()};
        }
        const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        const bool in_time = c.limit_s <= 0.0 || seconds < c.limit_s;
        const bool pass = o.pass && in_time;
        failures += pass ? 0 : 1;
        std::printf("%s %s  %.2fs%s  %s%s\n", pass ? "PASS" : "FAIL", c.name.c_str(), seconds,
                    c.limit_s > 0.0 ? (" (limit " + fmt_g(c.limit_s) + "s)").c_str() : "", o.detail.c_str(),
                    in_time ? "" : "  [over time limit]");
        std::fflush(stdout);
    }
    std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
    return failures == 0 ? 0 : 1;
}
