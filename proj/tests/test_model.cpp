#include <doctest.h>

#include <cmath>
#include <sstream>

#include <Eigen/Dense>

#include "tc/errors.hpp"
#include "tc/model.hpp"
#include "tc/rng.hpp"

using namespace tc;

namespace {

DenseTensor random_core(std::size_t r, std::size_t i, std::size_t q, Rng& rng) {
    DenseTensor c({r, i, q});
    for (auto& v : c.data()) v = rng.normal();
    return c;
}

TCModel random_model(const std::vector<std::size_t>& dims, const std::vector<std::size_t>& bonds,
                     std::uint64_t seed) {
    Rng rng(seed);
    std::vector<DenseTensor> cores;
    for (std::size_t n = 0; n < dims.size(); ++n)
        cores.push_back(random_core(bonds[n], dims[n], bonds[(n + 1) % dims.size()], rng));
    return TCModel(std::move(cores));
}

// Brute-force reconstruction: sum over every bond multi-index.
DenseTensor reconstruct_oracle(const TCModel& m) {
    const std::size_t order = m.order();
    DenseTensor out(m.mode_dims());
    std::vector<std::size_t> idx(order, 0);
    for (std::size_t lin = 0; lin < out.size(); ++lin) {
        std::vector<std::size_t> rest = out.multi_index(lin);
        double total = 0.0;
        std::vector<std::size_t> r(order, 0);
        while (true) {
            double p = 1.0;
            for (std::size_t n = 0; n < order; ++n)
                p *= m.core(n)(r[n], rest[n], r[(n + 1) % order]);
            total += p;
            std::size_t k = 0;
            for (; k < order; ++k) {
                if (++r[k] < m.bond_dim(k)) break;
                r[k] = 0;
            }
            if (k == order) break;
        }
        out[lin] = total;
    }
    return out;
}

double rel_diff(const DenseTensor& a, const DenseTensor& b) {
    double num = 0, den = 0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        num += (a[k] - b[k]) * (a[k] - b[k]);
        den += b[k] * b[k];
    }
    return std::sqrt(num) / (std::sqrt(den) + 1e-300);
}

TCModel scale_cores(const TCModel& m, const std::vector<double>& alpha) {
    std::vector<DenseTensor> cores;
    for (std::size_t n = 0; n < m.order(); ++n) {
        DenseTensor c = m.core(n);
        c.vec() *= alpha[n];
        cores.push_back(std::move(c));
    }
    return TCModel(std::move(cores));
}

} // namespace

TEST_CASE("reconstruct: rank-1 model is an outer product") {
    Rng rng(5);
    TCModel m = random_model({3, 4, 5}, {1, 1, 1}, 5);
    const DenseTensor y = reconstruct(m);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 4; ++j)
            for (std::size_t k = 0; k < 5; ++k)
                CHECK(y(i, j, k) == doctest::Approx(m.core(0)(0, i, 0) * m.core(1)(0, j, 0) *
                                                    m.core(2)(0, k, 0))
                                        .epsilon(1e-14));
}

TEST_CASE("reconstruct agrees with the elementwise trace formula") {
    TCModel m = random_model({7, 7, 7}, {3, 3, 3}, 17);
    const DenseTensor y = reconstruct(m);
    const DenseTensor o = reconstruct_oracle(m);
    CHECK(rel_diff(y, o) < 1e-12);

    // spot checks via explicit matrix traces
    Rng rng(18);
    for (int t = 0; t < 5; ++t) {
        const std::size_t i = rng.uniform_index(7), j = rng.uniform_index(7),
                          k = rng.uniform_index(7);
        Eigen::MatrixXd prod = Eigen::MatrixXd::Identity(3, 3);
        const std::size_t ijk[3] = {i, j, k};
        for (std::size_t n = 0; n < 3; ++n) {
            Eigen::MatrixXd s(3, 3);
            for (int a = 0; a < 3; ++a)
                for (int b = 0; b < 3; ++b) s(a, b) = m.core(n)(a, ijk[n], b);
            prod = prod * s;
        }
        CHECK(y(i, j, k) == doctest::Approx(prod.trace()).epsilon(1e-12));
    }
}

TEST_CASE("reconstruct works for higher orders") {
    TCModel m = random_model({3, 4, 2, 3}, {2, 3, 2, 2}, 19);
    CHECK(rel_diff(reconstruct(m), reconstruct_oracle(m)) < 1e-12);
}

TEST_CASE("btd_to_tc matches the direct shared-core sum") {
    Rng rng(23);
    const std::size_t t = 3, i1 = 5, i2 = 6, i3 = 7, r2 = 2, r3 = 4;
    BTDSharedModel b{std::vector<Eigen::MatrixXd>(t), DenseTensor({r2, i2, r3}),
                     std::vector<Eigen::MatrixXd>(t)};
    for (auto& a : b.A) {
        a.resize(i1, r2);
        for (Eigen::Index k = 0; k < a.size(); ++k) a(k) = rng.normal();
    }
    for (auto& c : b.C) {
        c.resize(i3, r3);
        for (Eigen::Index k = 0; k < c.size(); ++k) c(k) = rng.normal();
    }
    for (auto& v : b.core.data()) v = rng.normal();

    // direct sum of Tucker terms
    DenseTensor direct({i1, i2, i3});
    for (std::size_t tt = 0; tt < t; ++tt)
        for (std::size_t a = 0; a < i1; ++a)
            for (std::size_t bb = 0; bb < i2; ++bb)
                for (std::size_t c = 0; c < i3; ++c) {
                    double s = 0;
                    for (std::size_t r = 0; r < r2; ++r)
                        for (std::size_t q = 0; q < r3; ++q)
                            s += b.A[tt](a, r) * b.core(r, bb, q) * b.C[tt](c, q);
                    direct(a, bb, c) += s;
                }

    const TCModel m = btd_to_tc(b);
    CHECK(m.bond_dims() == std::vector<std::size_t>{t, r2, r3});
    CHECK(rel_diff(reconstruct(m), direct) < 1e-12);

    // field-level round trip
    const BTDSharedModel back = tc_to_btd(m);
    for (std::size_t tt = 0; tt < t; ++tt) {
        CHECK((back.A[tt] - b.A[tt]).cwiseAbs().maxCoeff() == 0.0);
        CHECK((back.C[tt] - b.C[tt]).cwiseAbs().maxCoeff() == 0.0);
    }
    CHECK(back.core.data() == b.core.data());
}

TEST_CASE("btd_to_tc single term reduces to a Tucker model") {
    Rng rng(29);
    BTDSharedModel b{{Eigen::MatrixXd(4, 2)}, DenseTensor({2, 3, 2}), {Eigen::MatrixXd(5, 2)}};
    for (Eigen::Index k = 0; k < b.A[0].size(); ++k) b.A[0](k) = rng.normal();
    for (Eigen::Index k = 0; k < b.C[0].size(); ++k) b.C[0](k) = rng.normal();
    for (auto& v : b.core.data()) v = rng.normal();
    const TCModel m = btd_to_tc(b);
    CHECK(m.bond_dims() == std::vector<std::size_t>{1, 2, 2});
    CHECK(rel_diff(reconstruct(m), reconstruct_oracle(m)) < 1e-12);
}

TEST_CASE("tc_to_btd rejects higher orders") {
    TCModel m = random_model({2, 2, 2, 2}, {2, 2, 2, 2}, 31);
    CHECK_THROWS_AS(tc_to_btd(m), unsupported_order_error);
}

TEST_CASE("intensity basics") {
    TCModel m = random_model({4, 5, 6}, {2, 2, 2}, 37);
    double prod = 1.0;
    for (std::size_t n = 0; n < 3; ++n) prod *= frobenius_norm(m.core(n));
    CHECK(intensity(m) == doctest::Approx(prod).epsilon(1e-14));

    // unit product of scalings leaves the intensity unchanged
    const TCModel scaled = scale_cores(m, {2.0, 3.0, 1.0 / 6.0});
    CHECK(intensity(scaled) == doctest::Approx(intensity(m)).epsilon(1e-12));
    CHECK(rel_diff(reconstruct(scaled), reconstruct(m)) < 1e-12);

    // unit-norm cores
    std::vector<double> inv = {1.0 / frobenius_norm(m.core(0)), 1.0 / frobenius_norm(m.core(1)),
                               1.0 / frobenius_norm(m.core(2))};
    CHECK(intensity(scale_cores(m, inv)) == doctest::Approx(1.0).epsilon(1e-12));

    TCModel z = random_model({3, 3, 3}, {2, 2, 2}, 38);
    z.set_core(1, DenseTensor({2, 3, 2}));
    CHECK_THROWS_AS(intensity(z), degenerate_model_error);
}

TEST_CASE("sensitivity closed form: rank-1 unit fibers give sum of dims") {
    Rng rng(41);
    std::vector<DenseTensor> cores;
    const std::vector<std::size_t> dims = {4, 5, 6};
    for (std::size_t n = 0; n < 3; ++n) {
        DenseTensor c({1, dims[n], 1});
        double norm2 = 0;
        for (auto& v : c.data()) {
            v = rng.normal();
            norm2 += v * v;
        }
        c.vec() /= std::sqrt(norm2);
        cores.push_back(std::move(c));
    }
    TCModel m(std::move(cores));
    const StabilityMeasures s = sensitivity(m);
    CHECK(s.sensitivity == doctest::Approx(15.0).epsilon(1e-12));
}

TEST_CASE("sensitivity: gram-chain evaluation equals dense subchain norms") {
    TCModel m = random_model({4, 4, 4}, {2, 2, 2}, 43);
    for (std::size_t n = 0; n < 3; ++n) {
        const double dense = subchain_norm_sq(m, n, ChainNormMethod::Dense);
        const double gram = subchain_norm_sq(m, n, ChainNormMethod::Gram);
        CHECK(gram == doctest::Approx(dense).epsilon(1e-12));
    }
    TCModel m4 = random_model({3, 4, 5, 3}, {2, 3, 2, 3}, 44);
    for (std::size_t n = 0; n < 4; ++n) {
        const double dense = subchain_norm_sq(m4, n, ChainNormMethod::Dense);
        const double gram = subchain_norm_sq(m4, n, ChainNormMethod::Gram);
        CHECK(gram == doctest::Approx(dense).epsilon(1e-12));
    }
}

TEST_CASE("sensitivity matches the Monte-Carlo perturbation definition") {
    TCModel m = random_model({5, 4, 6}, {2, 3, 2}, 47);
    const StabilityMeasures s = sensitivity(m);
    const DenseTensor y = reconstruct(m);

    const double sigma = 1e-5;
    const int draws = 2000;
    Rng rng(48);
    double acc = 0.0;
    for (int d = 0; d < draws; ++d) {
        std::vector<DenseTensor> cores;
        for (std::size_t n = 0; n < 3; ++n) {
            DenseTensor c = m.core(n);
            for (auto& v : c.data()) v += sigma * rng.normal();
            cores.push_back(std::move(c));
        }
        const DenseTensor yd = reconstruct(TCModel(std::move(cores)));
        acc += (yd.vec() - y.vec()).squaredNorm();
    }
    const double mc = acc / (draws * sigma * sigma);
    CHECK(std::abs(mc - s.sensitivity) / s.sensitivity < 0.02);
}

TEST_CASE("Eq-style intensity bound dominates the sensitivity") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        TCModel m = random_model({3, 5, 4}, {2, 3, 2}, 100 + seed);
        const StabilityMeasures s = sensitivity(m);
        double bound = 0.0;
        for (std::size_t n = 0; n < 3; ++n) {
            double p = static_cast<double>(m.mode_dim(n));
            for (std::size_t k = 0; k < 3; ++k)
                if (k != n) p *= frobenius_norm_sq(m.core(k));
            bound += p;
        }
        CHECK(s.sensitivity <= bound * (1 + 1e-12));
    }
}

TEST_CASE("balanced_normalize: equal terms, no worse ss, idempotent, reconstruction kept") {
    int strict = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const bool order4 = seed % 2 == 1;
        TCModel m = order4 ? random_model({3, 4, 3, 2}, {2, 2, 3, 2}, 200 + seed)
                           : random_model({5, 4, 6}, {2, 3, 2}, 200 + seed);
        const StabilityMeasures before = sensitivity(m);
        const TCModel b = balanced_normalize(m);
        const StabilityMeasures after = sensitivity(b);

        CHECK(after.sensitivity <= before.sensitivity * (1 + 1e-12));
        if (after.sensitivity < before.sensitivity * (1 - 1e-9)) ++strict;
        CHECK(rel_diff(reconstruct(b), reconstruct(m)) < 1e-10);

        // balanced terms all equal: beta_n / alpha_n == beta (terms are beta^2)
        const double mean = after.sensitivity / static_cast<double>(b.order());
        for (double term : after.per_mode_terms)
            CHECK(std::abs(term - mean) <= 1e-8 * mean);

        // ss equals N * beta^2 with beta the geometric mean of the old betas
        double log_geo = 0;
        for (double term : before.per_mode_terms) log_geo += 0.5 * std::log(term);
        const double beta2 = std::exp(2.0 * log_geo / static_cast<double>(b.order()));
        CHECK(after.sensitivity ==
              doctest::Approx(static_cast<double>(b.order()) * beta2).epsilon(1e-8));

        const TCModel bb = balanced_normalize(b);
        for (std::size_t n = 0; n < b.order(); ++n)
            CHECK(rel_diff(bb.core(n), b.core(n)) < 1e-12);
    }
    CHECK(strict > 50); // random models are essentially never balanced already
}

TEST_CASE("balanced_normalize undoes pure core rescalings") {
    TCModel m = random_model({4, 5, 6}, {2, 2, 3}, 53);
    const TCModel scaled = scale_cores(m, {100.0, 1.0, 0.01});
    const double ss_a = sensitivity(balanced_normalize(m)).sensitivity;
    const double ss_b = sensitivity(balanced_normalize(scaled)).sensitivity;
    CHECK(ss_b == doctest::Approx(ss_a).epsilon(1e-9));
}

TEST_CASE("scaling and rotation non-uniqueness hold on random models") {
    TCModel m = random_model({4, 5, 6}, {3, 2, 4}, 59);
    const DenseTensor y = reconstruct(m);
    CHECK(rel_diff(reconstruct(scale_cores(m, {2.0, 0.25, 2.0})), y) < 1e-12);

    // random invertible Q with modest condition number on bond 2
    Rng rng(60);
    const std::size_t r = m.bond_dim(1);
    Eigen::MatrixXd q(r, r);
    for (Eigen::Index k = 0; k < q.size(); ++k) q(k) = rng.normal();
    q += 3.0 * Eigen::MatrixXd::Identity(r, r); // keeps cond well under 1e3
    const Eigen::MatrixXd qi = q.inverse();

    DenseTensor a = m.core(0), b = m.core(1);
    DenseTensor a2(a.dims()), b2(b.dims());
    for (std::size_t i = 0; i < a.dim(0); ++i)
        for (std::size_t j = 0; j < a.dim(1); ++j)
            for (std::size_t k = 0; k < r; ++k) {
                double s = 0;
                for (std::size_t l = 0; l < r; ++l) s += a(i, j, l) * q(l, k);
                a2(i, j, k) = s;
            }
    for (std::size_t k = 0; k < r; ++k)
        for (std::size_t j = 0; j < b.dim(1); ++j)
            for (std::size_t l = 0; l < b.dim(2); ++l) {
                double s = 0;
                for (std::size_t u = 0; u < r; ++u) s += qi(k, u) * b(u, j, l);
                b2(k, j, l) = s;
            }
    TCModel rotated({a2, b2, m.core(2)});
    CHECK(rel_diff(reconstruct(rotated), y) < 1e-9);
}

TEST_CASE("degeneracy_sequence: closed-form intensity and preserved reconstruction") {
    TCModel m = random_model({5, 6, 4}, {2, 2, 3}, 61);
    const DenseTensor y = reconstruct(m);

    // independent singular values of the A.B unfolding
    const DenseTensor ab = train_contract(m.core(0), m.core(1));
    Eigen::Map<const Eigen::MatrixXd> mat(ab.data().data(), 2 * 5, 6 * 3);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(mat);
    const double s1 = svd.singularValues()(0), s2 = svd.singularValues()(1);
    const double cnorm = frobenius_norm(m.core(2));
    auto closed_form = [&](double x) {
        return (1 + x * x) * std::sqrt(2 * (s1 * s1 + s2 * s2)) / std::abs(1 - x * x) * cnorm;
    };

    for (double x : {0.0, 0.5, 0.9}) {
        const TCModel g = degeneracy_sequence(m, x);
        CHECK(intensity(g) == doctest::Approx(closed_form(x)).epsilon(1e-10));
        CHECK(rel_diff(reconstruct(g), y) < 1e-8);
    }
    const TCModel g99 = degeneracy_sequence(m, 0.99);
    CHECK(intensity(g99) > 10.0 * intensity(degeneracy_sequence(m, 0.9)));
    CHECK(rel_diff(reconstruct(g99), y) <= 1e-8);

    CHECK_THROWS_AS(degeneracy_sequence(m, 1.0), std::invalid_argument);
    TCModel r1 = random_model({3, 3, 3}, {2, 1, 2}, 62);
    CHECK_THROWS_AS(degeneracy_sequence(r1, 0.5), unsupported_order_error);
}

TEST_CASE("degeneracy_sequence inflates intensity for larger bonds too") {
    TCModel m = random_model({5, 5, 5}, {2, 4, 3}, 63);
    const DenseTensor y = reconstruct(m);
    const TCModel g = degeneracy_sequence(m, 0.95);
    CHECK(rel_diff(reconstruct(g), y) < 1e-8);
    CHECK(intensity(g) > intensity(degeneracy_sequence(m, 0.0)));
}

TEST_CASE("TCM1 round trip") {
    TCModel m = random_model({4, 3, 5}, {2, 3, 2}, 67);
    std::stringstream ss;
    write_tcm(ss, m);
    const TCModel back = read_tcm(ss);
    REQUIRE(back.order() == m.order());
    for (std::size_t n = 0; n < m.order(); ++n) {
        CHECK(back.core(n).dims() == m.core(n).dims());
        CHECK(back.core(n).data() == m.core(n).data());
    }
}
