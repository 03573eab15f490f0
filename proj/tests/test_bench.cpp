#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "tc/bench.hpp"
#include "tc/decompose.hpp"

using namespace tc;

TEST_CASE("gen_synthetic: deterministic exact TC data") {
    auto [y1, t1] = gen_synthetic({5, 6, 7}, {2, 3, 2}, 77);
    auto [y2, t2] = gen_synthetic({5, 6, 7}, {2, 3, 2}, 77);
    CHECK(y1.data() == y2.data());
    CHECK(y1.dims() == std::vector<std::size_t>{5, 6, 7});
    CHECK(t1.bond_dims() == std::vector<std::size_t>{2, 3, 2});
    CHECK(relative_error(y1, reconstruct(t1)) == 0.0);
    auto [y3, t3] = gen_synthetic({5, 6, 7}, {2, 3, 2}, 78);
    CHECK(y1.data() != y3.data());
}

TEST_CASE("gen_collinear: pairwise cosines land in the requested range") {
    auto [y, truth] = gen_collinear({27, 27, 27}, {5, 5, 5}, 0.97, 0.99, 83);
    for (std::size_t n = 0; n < 3; ++n) {
        const Eigen::MatrixXd u = core_mode2(truth.core(n));
        for (Eigen::Index a = 0; a < u.cols(); ++a)
            for (Eigen::Index b = a + 1; b < u.cols(); ++b) {
                const double c = u.col(a).dot(u.col(b)) / (u.col(a).norm() * u.col(b).norm());
                CHECK(c >= 0.97 - 1e-9);
                CHECK(c <= 0.99 + 1e-9);
            }
    }
    CHECK(relative_error(y, reconstruct(truth)) == 0.0);

    auto [y2, t2] = gen_collinear({10, 10, 10}, {2, 2, 2}, 1e-9, 1e-6, 89);
    for (std::size_t n = 0; n < 3; ++n) {
        const Eigen::MatrixXd u = core_mode2(t2.core(n));
        for (Eigen::Index a = 0; a < u.cols(); ++a)
            for (Eigen::Index b = a + 1; b < u.cols(); ++b)
                CHECK(std::abs(u.col(a).dot(u.col(b))) <= 1e-6 + 1e-9);
    }

    auto [y3a, t3a] = gen_collinear({27, 27, 27}, {5, 5, 5}, 0.97, 0.99, 83);
    CHECK(y3a.data() == y.data());

    CHECK_THROWS_AS(gen_collinear({4, 4, 4}, {3, 3, 3}, 0.9, 0.95, 1), generation_failure);
}

TEST_CASE("gen_mask removes the requested fraction deterministically") {
    const MaskTensor m = gen_mask({9, 9, 9}, 0.5, 97);
    CHECK(m.size() == 729);
    CHECK(m.observed_count() == 729 - 365); // round(0.5 * 729) = 365 removed
    const MaskTensor m2 = gen_mask({9, 9, 9}, 0.5, 97);
    CHECK(m.data == m2.data);
    const MaskTensor m3 = gen_mask({9, 9, 9}, 0.5, 98);
    CHECK(m.data != m3.data);
}

TEST_CASE("run_experiment: starting at the truth gives success rate 1") {
    ExperimentSpec spec;
    spec.family = ExperimentSpec::Family::Synthetic;
    spec.dims = {5, 5, 5};
    spec.bonds = {2, 2, 2};
    spec.n_instances = 3;
    spec.n_inits = 2;
    spec.solver = ExperimentSpec::Solver::Als;
    spec.fit.max_iters = 5;
    spec.init_at_truth = true;
    spec.seed = 101;
    const SuccessSummary s = run_experiment(spec);
    CHECK(s.records.size() == 6);
    CHECK(s.success_rate == 1.0);
}

TEST_CASE("run_experiment is reproducible and thread-count independent") {
    ExperimentSpec spec;
    spec.family = ExperimentSpec::Family::Synthetic;
    spec.dims = {6, 6, 6};
    spec.bonds = {2, 2, 2};
    spec.n_instances = 2;
    spec.n_inits = 2;
    spec.solver = ExperimentSpec::Solver::Als;
    spec.fit.max_iters = 60;
    spec.seed = 103;

    setenv("TC_THREADS", "2", 1);
    const SuccessSummary a = run_experiment(spec);
    setenv("TC_THREADS", "1", 1);
    const SuccessSummary b = run_experiment(spec);
    unsetenv("TC_THREADS");
    REQUIRE(a.records.size() == b.records.size());
    for (std::size_t k = 0; k < a.records.size(); ++k) {
        CHECK(a.records[k].final_err == b.records[k].final_err);
        CHECK(a.records[k].final_ss == b.records[k].final_ss);
        CHECK(a.records[k].iterations == b.records[k].iterations);
    }
}

TEST_CASE("run_suite writes per-experiment CSV and a summary bundle") {
    const nlohmann::json cfg = {
        {"experiments",
         {{{"name", "tiny"},
           {"family", "synthetic"},
           {"dims", {5, 5, 5}},
           {"bonds", {2, 2, 2}},
           {"n_instances", 2},
           {"n_inits", 1},
           {"solver", "als"},
           {"seed", 7},
           {"fit", {{"max_iters", 30}}}}}}};
    const std::string dir = "suite_test_tmp";
    const std::string cfg_path = dir + "_cfg.json";
    {
        std::ofstream f(cfg_path);
        f << cfg.dump();
    }
    run_suite(cfg_path, dir);
    CHECK(std::filesystem::exists(dir + "/tiny.csv"));
    CHECK(std::filesystem::exists(dir + "/summary.json"));

    // reproducible modulo the wall-time column (kept last in the CSV)
    auto strip_wall = [](const std::string& path) {
        std::ifstream f(path);
        std::string line, all;
        while (std::getline(f, line)) {
            all += line.substr(0, line.rfind(','));
            all += '\n';
        }
        return all;
    };
    const std::string first = strip_wall(dir + "/tiny.csv");
    run_suite(cfg_path, dir);
    CHECK(strip_wall(dir + "/tiny.csv") == first);

    std::filesystem::remove_all(dir);
    std::filesystem::remove(cfg_path);
}

TEST_CASE("image_fit_experiment: params column and the rank-1 agreement case") {
    // smooth deterministic image
    DenseTensor img({12, 12, 3});
    for (std::size_t i = 0; i < 12; ++i)
        for (std::size_t j = 0; j < 12; ++j)
            for (std::size_t c = 0; c < 3; ++c)
                img(i, j, c) = 0.5 + 0.5 * std::sin(0.3 * double(i) + 0.5 * double(j) + double(c));
    FitConfig fit;
    fit.max_iters = 150;
    CorrectionConfig corr;
    const auto rows = image_fit_experiment(img, {{1, 1}, {2, 3}}, fit, corr, 11);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].params == 1 * 12 * 1 + 1 * 12 * 1 + 1 * 3 * 1);
    CHECK(rows[1].params == 2 * 12 * 3 + 3 * 12 * 2 + 2 * 3 * 2);
    // rank-1 fits are benign: both solvers land on the same error
    CHECK(std::abs(rows[0].rel_err_als - rows[0].rel_err_ssc) <= 1e-8);

    // oversized entries are pruned by the parameter bound
    const auto pruned = image_fit_experiment(img, {{12, 12}}, fit, corr, 11);
    CHECK(pruned.empty());

    std::ostringstream csv;
    write_image_fit_csv(csv, rows);
    CHECK(csv.str().find("R1,R2,rel_err_als,rel_err_ssc,params") == 0);
}

TEST_CASE("PPM round trip within quantization error") {
    DenseTensor img({8, 10, 3});
    for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < 10; ++j)
            for (std::size_t c = 0; c < 3; ++c)
                img(i, j, c) = (double(i) * 10 + double(j)) / 100.0 + 0.003 * double(c);
    const std::string path = "ppm_test_tmp.ppm";
    write_ppm(path, img);
    const DenseTensor back = read_ppm(path);
    REQUIRE(back.dims() == img.dims());
    for (std::size_t k = 0; k < img.size(); ++k)
        CHECK(std::abs(back[k] - img[k]) <= 0.5 / 255.0 + 1e-12);
    std::remove(path.c_str());
    CHECK_THROWS(read_ppm("does_not_exist.ppm"));
}

TEST_CASE("experiment spec json parsing and validation") {
    nlohmann::json j = {{"name", "x"},        {"family", "collinear"}, {"dims", {27, 27, 27}},
                        {"bonds", {5, 5, 5}}, {"collinearity", {0.97, 0.99}},
                        {"n_instances", 4},   {"solver", "ssctrl"},    {"seed", 5}};
    const ExperimentSpec s = experiment_spec_from_json(j);
    CHECK(s.family == ExperimentSpec::Family::Collinear);
    CHECK(s.solver == ExperimentSpec::Solver::SsControl);
    CHECK(s.collinearity_hi == 0.99);

    j["collinearity"] = {0.99, 0.97};
    CHECK_THROWS_AS(experiment_spec_from_json(j), std::invalid_argument);
}
