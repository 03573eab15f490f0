#include "tc/bench.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include <Eigen/Dense>

#include "tc/conv.hpp"
#include "tc/errors.hpp"
#include "tc/rng.hpp"

namespace tc {

using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

ExperimentSpec::Family family_from_string(const std::string& s) {
    if (s == "synthetic") return ExperimentSpec::Family::Synthetic;
    if (s == "collinear") return ExperimentSpec::Family::Collinear;
    if (s == "masked") return ExperimentSpec::Family::Masked;
    if (s == "image") return ExperimentSpec::Family::Image;
    if (s == "kernel") return ExperimentSpec::Family::Kernel;
    throw std::invalid_argument("unknown experiment family: " + s);
}

ExperimentSpec::Solver solver_from_string(const std::string& s) {
    if (s == "als") return ExperimentSpec::Solver::Als;
    if (s == "ssctrl" || s == "ss_control") return ExperimentSpec::Solver::SsControl;
    throw std::invalid_argument("unknown solver: " + s);
}

std::vector<double> quantiles_of(std::vector<double> v) {
    if (v.empty()) return {0.0, 0.0, 0.0};
    std::sort(v.begin(), v.end());
    auto pick = [&](double q) {
        const double pos = q * static_cast<double>(v.size() - 1);
        return v[static_cast<std::size_t>(pos + 0.5)];
    };
    return {pick(0.1), pick(0.5), pick(0.9)};
}

} // namespace

void ExperimentSpec::validate() const {
    if (n_instances <= 0 || n_inits <= 0)
        throw std::invalid_argument("ExperimentSpec: counts must be positive");
    if (family == Family::Synthetic || family == Family::Collinear || family == Family::Masked) {
        if (dims.size() < 3 || dims.size() != bonds.size())
            throw std::invalid_argument("ExperimentSpec: need matching dims and bonds, N >= 3");
    }
    if (family == Family::Collinear &&
        !(collinearity_lo >= 0.0 && collinearity_lo < collinearity_hi && collinearity_hi < 1.0))
        throw std::invalid_argument("ExperimentSpec: collinearity range must be within (0, 1)");
    if (family == Family::Masked && !(mask_fraction > 0.0 && mask_fraction < 1.0))
        throw std::invalid_argument("ExperimentSpec: mask fraction must be in (0, 1)");
    fit.validate();
    correction.validate();
}

ExperimentSpec experiment_spec_from_json(const nlohmann::json& j) {
    ExperimentSpec s;
    if (j.contains("name")) s.name = j.at("name").get<std::string>();
    if (j.contains("family")) s.family = family_from_string(j.at("family").get<std::string>());
    if (j.contains("dims")) s.dims = j.at("dims").get<std::vector<std::size_t>>();
    if (j.contains("bonds")) s.bonds = j.at("bonds").get<std::vector<std::size_t>>();
    if (j.contains("n_instances")) s.n_instances = j.at("n_instances").get<int>();
    if (j.contains("n_inits")) s.n_inits = j.at("n_inits").get<int>();
    if (j.contains("collinearity")) {
        const auto r = j.at("collinearity").get<std::vector<double>>();
        if (r.size() != 2) throw std::invalid_argument("collinearity: expected [lo, hi]");
        s.collinearity_lo = r[0];
        s.collinearity_hi = r[1];
    }
    if (j.contains("mask_fraction")) s.mask_fraction = j.at("mask_fraction").get<double>();
    if (j.contains("solver")) s.solver = solver_from_string(j.at("solver").get<std::string>());
    if (j.contains("fit")) s.fit = fit_config_from_json(j.at("fit"));
    if (j.contains("correction")) s.correction = correction_config_from_json(j.at("correction"));
    if (j.contains("seed")) s.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("input_path")) s.input_path = j.at("input_path").get<std::string>();
    if (j.contains("dump_trajectories")) s.dump_trajectories = j.at("dump_trajectories").get<bool>();
    if (j.contains("init_at_truth")) s.init_at_truth = j.at("init_at_truth").get<bool>();
    s.validate();
    return s;
}

nlohmann::json SuccessSummary::to_json() const {
    nlohmann::json j;
    j["success_rate"] = success_rate;
    j["error_quantiles"] = error_quantiles;
    j["ss_quantiles"] = ss_quantiles;
    j["intensity_quantiles"] = intensity_quantiles;
    j["n_records"] = records.size();
    int failures = 0;
    for (const auto& r : records) failures += r.failed ? 1 : 0;
    j["n_failed"] = failures;
    return j;
}

void SuccessSummary::write_csv(std::ostream& os) const {
    os << "instance,init,final_rel_err,final_ss,final_intensity,iterations,correction_events,"
          "termination,failed,wall_time_sec\n";
    for (const auto& r : records)
        os << r.instance << ',' << r.init << ',' << r.final_err << ',' << r.final_ss << ','
           << r.final_intensity << ',' << r.iterations << ',' << r.events << ','
           << to_string(r.termination) << ',' << (r.failed ? 1 : 0) << ',' << r.wall_time_sec
           << '\n';
}

std::pair<DenseTensor, TCModel> gen_synthetic(const std::vector<std::size_t>& dims,
                                              const std::vector<std::size_t>& bonds,
                                              std::uint64_t seed) {
    TCModel truth = init_model(dims, bonds, seed, InitScheme::Gaussian);
    DenseTensor y = reconstruct(truth);
    return {std::move(y), std::move(truth)};
}

std::pair<DenseTensor, TCModel> gen_collinear(const std::vector<std::size_t>& dims,
                                              const std::vector<std::size_t>& bonds, double lo,
                                              double hi, std::uint64_t seed) {
    if (dims.size() < 3 || dims.size() != bonds.size())
        throw std::invalid_argument("gen_collinear: need matching dims and bonds, N >= 3");
    if (!(lo >= 0.0 && lo < hi && hi < 1.0))
        throw std::invalid_argument("gen_collinear: range must satisfy 0 <= lo < hi < 1");
    const std::size_t order = dims.size();
    Rng rng(seed);

    std::vector<DenseTensor> cores;
    cores.reserve(order);
    for (std::size_t n = 0; n < order; ++n) {
        const std::size_t in = dims[n];
        const std::size_t kk = bonds[n] * bonds[(n + 1) % order];
        if (in < kk + 1)
            throw generation_failure("gen_collinear: mode " + std::to_string(n) +
                                     " needs I_n >= R_n R_{n+1} + 1");
        bool ok = false;
        for (int attempt = 0; attempt < 16 && !ok; ++attempt) {
            // Orthonormal frame q0..qK; columns u_j = c_j q0 + sqrt(1-c_j^2) q_{j+1}
            // give pairwise cosines c_i c_j exactly.
            MatrixXd g(in, kk + 1);
            for (Eigen::Index c = 0; c < g.cols(); ++c)
                for (Eigen::Index r = 0; r < g.rows(); ++r) g(r, c) = rng.normal();
            Eigen::HouseholderQR<MatrixXd> qr(g);
            const MatrixXd q = qr.householderQ() * MatrixXd::Identity(in, kk + 1);

            const double clo = std::sqrt(lo), chi = std::sqrt(hi);
            MatrixXd u(in, kk);
            for (std::size_t jcol = 0; jcol < kk; ++jcol) {
                const double c = clo + (chi - clo) * rng.uniform();
                u.col(jcol) = c * q.col(0) + std::sqrt(1.0 - c * c) * q.col(jcol + 1);
            }
            ok = true;
            for (std::size_t a = 0; a < kk && ok; ++a)
                for (std::size_t b = a + 1; b < kk && ok; ++b) {
                    const double cos_ab =
                        u.col(a).dot(u.col(b)) / (u.col(a).norm() * u.col(b).norm());
                    if (cos_ab < lo - 1e-9 || cos_ab > hi + 1e-9) ok = false;
                }
            if (ok)
                cores.push_back(core_from_mode2(u, bonds[n], in, bonds[(n + 1) % order]));
        }
        if (!ok)
            throw generation_failure("gen_collinear: could not satisfy the cosine range at mode " +
                                     std::to_string(n));
    }
    // Normalize the instance to unit Frobenius norm (cosines are unaffected).
    // The near-parallel construction sums coherently, and the absolute
    // sensitivity levels of the paper's collinear figures correspond to O(1)
    // tensor norm; ss floors scale as ||y||^(4/3).
    {
        TCModel raw(std::move(cores));
        const double g = std::pow(frobenius_norm(reconstruct(raw)),
                                  -1.0 / static_cast<double>(order));
        cores.clear();
        for (std::size_t n = 0; n < order; ++n) {
            DenseTensor c = raw.core(n);
            c.vec() *= g;
            cores.push_back(std::move(c));
        }
    }
    TCModel truth(std::move(cores));
    DenseTensor y = reconstruct(truth);
    return {std::move(y), std::move(truth)};
}

MaskTensor gen_mask(const std::vector<std::size_t>& dims, double fraction_removed,
                    std::uint64_t seed) {
    if (!(fraction_removed >= 0.0 && fraction_removed < 1.0))
        throw std::invalid_argument("gen_mask: fraction must be in [0, 1)");
    std::size_t n = 1;
    for (std::size_t d : dims) n *= d;
    std::vector<std::uint8_t> data(n, 1);
    const auto removed = static_cast<std::size_t>(std::llround(fraction_removed * double(n)));
    std::vector<std::size_t> idx(n);
    for (std::size_t k = 0; k < n; ++k) idx[k] = k;
    Rng rng(seed);
    for (std::size_t k = 0; k < removed; ++k) {
        const std::size_t j = k + static_cast<std::size_t>(rng.uniform_index(n - k));
        std::swap(idx[k], idx[j]);
        data[idx[k]] = 0;
    }
    return MaskTensor(dims, std::move(data));
}

void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn) {
    if (count == 0) return;
    std::size_t threads = std::thread::hardware_concurrency();
    if (const char* env = std::getenv("TC_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v > 0) threads = static_cast<std::size_t>(v);
    }
    threads = std::min(std::max<std::size_t>(threads, 1), count);
    if (threads == 1) {
        for (std::size_t k = 0; k < count; ++k) fn(k);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (std::size_t t = 0; t < threads; ++t)
        pool.emplace_back([&] {
            for (std::size_t k = next.fetch_add(1); k < count; k = next.fetch_add(1)) fn(k);
        });
    for (auto& th : pool) th.join();
}

namespace {

struct RunOutput {
    RunRecord record;
    DecompositionReport report;
};

RunOutput run_one(const ExperimentSpec& spec, int instance, int init) {
    RunOutput out;
    out.record.instance = instance;
    out.record.init = init;
    try {
        const std::uint64_t data_seed = mix_seed(spec.seed, static_cast<std::uint64_t>(instance));
        const std::uint64_t init_seed =
            mix_seed(spec.seed ^ 0x5ca1ab1e5eed5ULL,
                     static_cast<std::uint64_t>(instance) * 1000003ULL +
                         static_cast<std::uint64_t>(init));

        auto [y, truth] =
            spec.family == ExperimentSpec::Family::Collinear
                ? gen_collinear(spec.dims, spec.bonds, spec.collinearity_lo, spec.collinearity_hi,
                                data_seed)
                : gen_synthetic(spec.dims, spec.bonds, data_seed);
        const TCModel m0 =
            spec.init_at_truth
                ? truth
                : init_model(spec.dims, spec.bonds, init_seed, spec.fit.init_scheme,
                             frobenius_norm(y));

        std::pair<TCModel, DecompositionReport> res = [&] {
            if (spec.family == ExperimentSpec::Family::Masked) {
                const MaskTensor mask =
                    gen_mask(spec.dims, spec.mask_fraction, mix_seed(data_seed, 0x3a5aULL));
                if (spec.solver == ExperimentSpec::Solver::Als)
                    return masked_als_fit(y, mask, m0, spec.fit);
                return fit_with_ss_control(y, mask, m0, spec.fit, spec.correction);
            }
            if (spec.solver == ExperimentSpec::Solver::Als) return als_fit(y, m0, spec.fit);
            return fit_with_ss_control(y, m0, spec.fit, spec.correction);
        }();

        const auto& rep = res.second;
        out.record.final_err = rep.final_error();
        out.record.final_ss = rep.sensitivity.empty() ? 0.0 : rep.sensitivity.back();
        out.record.final_intensity = rep.intensity.empty() ? 0.0 : rep.intensity.back();
        out.record.iterations = rep.iterations();
        out.record.events = static_cast<int>(rep.correction_events.size());
        out.record.termination = rep.termination;
        out.record.wall_time_sec = rep.wall_time_sec;
        out.report = rep;
    } catch (const std::exception& e) {
        out.record.failed = true;
        out.record.final_err = std::numeric_limits<double>::infinity();
        out.record.error_message = e.what();
    }
    return out;
}

} // namespace

SuccessSummary run_experiment(const ExperimentSpec& spec) {
    spec.validate();
    if (spec.family == ExperimentSpec::Family::Image ||
        spec.family == ExperimentSpec::Family::Kernel)
        throw std::invalid_argument(
            "run_experiment: image/kernel families run through their dedicated drivers");

    const std::size_t total =
        static_cast<std::size_t>(spec.n_instances) * static_cast<std::size_t>(spec.n_inits);
    std::vector<RunOutput> slots(total);
    parallel_for(total, [&](std::size_t k) {
        const int instance = static_cast<int>(k) / spec.n_inits;
        const int init = static_cast<int>(k) % spec.n_inits;
        slots[k] = run_one(spec, instance, init);
    });

    SuccessSummary s;
    s.records.reserve(total);
    std::vector<double> errs, sss, ints;
    int successes = 0;
    for (auto& slot : slots) {
        // Safety spot-check: a logged correction may never have raised the error.
        for (const auto& ev : slot.report.correction_events)
            if (ev.err_after > ev.err_before * (1.0 + 1e-9) + 1e-12)
                throw std::logic_error("run_experiment: correction event increased the error");
        if (!slot.record.failed) {
            errs.push_back(slot.record.final_err);
            sss.push_back(slot.record.final_ss);
            ints.push_back(slot.record.final_intensity);
            if (slot.record.final_err <= kSuccessRelErr) ++successes;
        }
        s.records.push_back(std::move(slot.record));
    }
    s.success_rate = total == 0 ? 0.0 : static_cast<double>(successes) / static_cast<double>(total);
    s.error_quantiles = quantiles_of(errs);
    s.ss_quantiles = quantiles_of(sss);
    s.intensity_quantiles = quantiles_of(ints);
    return s;
}

void run_suite(const std::string& config_path, const std::string& out_dir) {
    std::ifstream f(config_path);
    if (!f) throw std::runtime_error("run_suite: cannot open config " + config_path);
    nlohmann::json cfg = nlohmann::json::parse(f);
    std::filesystem::create_directories(out_dir);

    nlohmann::json summary_bundle;
    const auto& experiments = cfg.contains("experiments") ? cfg.at("experiments") : cfg;
    for (const auto& ej : experiments) {
        const ExperimentSpec spec = experiment_spec_from_json(ej);
        const SuccessSummary summary = run_experiment(spec);
        summary_bundle[spec.name] = summary.to_json();
        std::ofstream csv(out_dir + "/" + spec.name + ".csv");
        summary.write_csv(csv);
    }
    std::ofstream js(out_dir + "/summary.json");
    js << summary_bundle.dump(2) << '\n';
}

std::size_t image_tc_param_count(const std::vector<std::size_t>& dims, std::size_t r1,
                                 std::size_t r2) {
    if (dims.size() != 3) throw std::invalid_argument("image_tc_param_count: order-3 dims expected");
    return r1 * dims[0] * r2 + r2 * dims[1] * r1 + r1 * dims[2] * r1;
}

std::vector<ImageFitRow> image_fit_experiment(
    const DenseTensor& image, const std::vector<std::pair<std::size_t, std::size_t>>& grid,
    const FitConfig& fit, const CorrectionConfig& corr, std::uint64_t seed) {
    if (image.order() != 3) throw std::invalid_argument("image_fit_experiment: (H, W, 3) expected");
    const double ynorm = frobenius_norm(image);
    std::vector<std::pair<std::size_t, std::size_t>> feasible;
    for (const auto& [r1, r2] : grid) {
        if (r1 >= 1 && r2 >= 1 && image_tc_param_count(image.dims(), r1, r2) <= image.size())
            feasible.push_back({r1, r2});
    }
    std::vector<ImageFitRow> rows(feasible.size());
    parallel_for(feasible.size(), [&](std::size_t k) {
        const auto [r1, r2] = feasible[k];
        ImageFitRow row;
        row.r1 = r1;
        row.r2 = r2;
        row.params = image_tc_param_count(image.dims(), r1, r2);
        const TCModel m0 = init_model(image.dims(), {r1, r2, r1}, mix_seed(seed, k),
                                      fit.init_scheme, ynorm);
        const auto [ma, ra] = als_fit(image, m0, fit);
        const auto [ms, rs] = fit_with_ss_control(image, m0, fit, corr);
        row.rel_err_als = ra.final_error();
        row.rel_err_ssc = rs.final_error();
        rows[k] = row;
    });
    return rows;
}

void write_image_fit_csv(std::ostream& os, const std::vector<ImageFitRow>& rows) {
    os << "R1,R2,rel_err_als,rel_err_ssc,params\n";
    for (const auto& r : rows)
        os << r.r1 << ',' << r.r2 << ',' << r.rel_err_als << ',' << r.rel_err_ssc << ','
           << r.params << '\n';
}

DenseTensor read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_ppm: cannot open " + path);
    std::string magic;
    f >> magic;
    if (magic != "P6") throw std::runtime_error("read_ppm: only binary P6 is supported");
    auto next_int = [&]() {
        // skip whitespace and '#' comment lines
        while (true) {
            const int c = f.peek();
            if (c == '#') {
                std::string line;
                std::getline(f, line);
            } else if (std::isspace(c)) {
                f.get();
            } else {
                break;
            }
        }
        long v;
        f >> v;
        if (!f || v <= 0) throw std::runtime_error("read_ppm: malformed header");
        return v;
    };
    const long w = next_int();
    const long h = next_int();
    const long maxval = next_int();
    if (maxval > 255) throw std::runtime_error("read_ppm: 16-bit images not supported");
    f.get(); // single whitespace after maxval
    std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * 3);
    if (!f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
        throw std::runtime_error("read_ppm: truncated pixel data");
    DenseTensor img({static_cast<std::size_t>(h), static_cast<std::size_t>(w), 3});
    for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img(static_cast<std::size_t>(y), static_cast<std::size_t>(x),
                    static_cast<std::size_t>(c)) =
                    buf[3 * (static_cast<std::size_t>(y) * w + x) + c] / double(maxval);
    return img;
}

void write_ppm(const std::string& path, const DenseTensor& image) {
    if (image.order() != 3 || image.dim(2) != 3)
        throw std::invalid_argument("write_ppm: (H, W, 3) tensor expected");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("write_ppm: cannot open " + path);
    f << "P6\n" << image.dim(1) << ' ' << image.dim(0) << "\n255\n";
    const std::size_t h = image.dim(0), w = image.dim(1);
    std::vector<unsigned char> buf(h * w * 3);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c) {
                const double v = std::clamp(image(y, x, c), 0.0, 1.0);
                buf[3 * (y * w + x) + c] = static_cast<unsigned char>(std::lround(v * 255.0));
            }
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

} // namespace tc
