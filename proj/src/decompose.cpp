#include "tc/decompose.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include <Eigen/Dense>

#include "tc/errors.hpp"
#include "tc/rng.hpp"

namespace tc {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using MaskMatrix = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;

InitScheme init_scheme_from_string(const std::string& s) {
    if (s == "gaussian") return InitScheme::Gaussian;
    if (s == "scaled") return InitScheme::Scaled;
    if (s == "balanced") return InitScheme::Balanced;
    throw std::invalid_argument("unknown init scheme: " + s);
}

std::string to_string(InitScheme s) {
    switch (s) {
    case InitScheme::Gaussian: return "gaussian";
    case InitScheme::Scaled: return "scaled";
    case InitScheme::Balanced: return "balanced";
    }
    return "?";
}

std::string to_string(Termination t) {
    switch (t) {
    case Termination::Converged: return "converged";
    case Termination::Stalled: return "stalled";
    case Termination::MaxIters: return "max_iters";
    }
    return "?";
}

void FitConfig::validate() const {
    if (max_iters <= 0) throw std::invalid_argument("FitConfig: max_iters must be positive");
    if (!(rel_err_tol > 0) || !(stall_tol > 0) || !(ss_max > 0))
        throw std::invalid_argument("FitConfig: tolerances must be positive");
    if (stall_window <= 0 || max_corrections < 0)
        throw std::invalid_argument("FitConfig: window/correction counts must be positive");
}

FitConfig fit_config_from_json(const nlohmann::json& j) {
    FitConfig c;
    if (j.contains("max_iters")) c.max_iters = j.at("max_iters").get<int>();
    if (j.contains("rel_err_tol")) c.rel_err_tol = j.at("rel_err_tol").get<double>();
    if (j.contains("stall_tol")) c.stall_tol = j.at("stall_tol").get<double>();
    if (j.contains("ss_max")) c.ss_max = j.at("ss_max").get<double>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("init_scheme"))
        c.init_scheme = init_scheme_from_string(j.at("init_scheme").get<std::string>());
    if (j.contains("masked")) c.masked = j.at("masked").get<bool>();
    if (j.contains("stall_window")) c.stall_window = j.at("stall_window").get<int>();
    if (j.contains("max_corrections")) c.max_corrections = j.at("max_corrections").get<int>();
    if (j.contains("correction_schedule")) {
        const auto& s = j.at("correction_schedule");
        if (s.is_string()) {
            if (s.get<std::string>() != "trigger")
                throw std::invalid_argument("correction_schedule: expected \"trigger\" or a list");
            c.trigger_mode = true;
        } else {
            c.correction_schedule = s.get<std::vector<int>>();
            c.trigger_mode = false;
        }
    }
    c.validate();
    return c;
}

nlohmann::json DecompositionReport::to_json() const {
    nlohmann::json j;
    j["relative_error"] = relative_error;
    j["sensitivity"] = sensitivity;
    j["intensity"] = intensity;
    j["termination"] = to_string(termination);
    j["wall_time_sec"] = wall_time_sec;
    j["ridge_fallback_count"] = ridge_fallback_count;
    j["warnings"] = warnings;
    nlohmann::json ev = nlohmann::json::array();
    for (const auto& e : correction_events)
        ev.push_back({{"iteration", e.iteration},
                      {"kind", e.kind},
                      {"ss_before", e.ss_before},
                      {"ss_after", e.ss_after},
                      {"err_before", e.err_before},
                      {"err_after", e.err_after}});
    j["correction_events"] = ev;
    return j;
}

MatrixXd core_mode2(const DenseTensor& core) {
    const std::size_t r = core.dim(0), i = core.dim(1), q = core.dim(2);
    MatrixXd x(i, r * q);
    for (std::size_t c = 0; c < q; ++c)
        for (std::size_t k = 0; k < i; ++k)
            for (std::size_t a = 0; a < r; ++a)
                x(k, a + r * c) = core(a, k, c);
    return x;
}

DenseTensor core_from_mode2(const MatrixXd& x, std::size_t r, std::size_t i, std::size_t q) {
    DenseTensor core({r, i, q});
    for (std::size_t c = 0; c < q; ++c)
        for (std::size_t k = 0; k < i; ++k)
            for (std::size_t a = 0; a < r; ++a)
                core(a, k, c) = x(k, a + r * c);
    return core;
}

MatrixXd subchain_design(const DenseTensor& sub) {
    std::vector<std::size_t> rows(sub.order() - 2);
    for (std::size_t k = 0; k < rows.size(); ++k) rows[k] = k + 1;
    const Unfolding u = unfold(sub, rows, {sub.order() - 1, 0});
    return u.matrix();
}

TCModel init_model(const std::vector<std::size_t>& dims, const std::vector<std::size_t>& bonds,
                   std::uint64_t seed, InitScheme scheme, double data_norm) {
    if (dims.size() != bonds.size() || dims.size() < 3)
        throw std::invalid_argument("init_model: need N >= 3 matching dims and bonds");
    Rng rng(seed);
    const std::size_t order = dims.size();
    std::vector<DenseTensor> cores;
    cores.reserve(order);
    for (std::size_t n = 0; n < order; ++n) {
        DenseTensor c({bonds[n], dims[n], bonds[(n + 1) % order]});
        for (auto& v : c.data()) v = rng.normal();
        cores.push_back(std::move(c));
    }
    TCModel m(std::move(cores));
    if (scheme == InitScheme::Gaussian) return m;
    if (scheme == InitScheme::Balanced) return balanced_normalize(m);

    // Scaled: bring the reconstruction norm to the data norm with one global
    // factor spread evenly over the cores.
    const double rnorm = frobenius_norm(reconstruct(m));
    if (data_norm > 0.0 && rnorm > 0.0) {
        const double f = std::pow(data_norm / rnorm, 1.0 / static_cast<double>(order));
        std::vector<DenseTensor> scaled;
        scaled.reserve(order);
        for (std::size_t n = 0; n < order; ++n) {
            DenseTensor c = m.core(n);
            c.vec() *= f;
            scaled.push_back(std::move(c));
        }
        return TCModel(std::move(scaled));
    }
    return m;
}

namespace {

constexpr double kRidgeScale = 1e-10;

std::vector<std::size_t> cyclic_others(std::size_t order, std::size_t n) {
    std::vector<std::size_t> c(order - 1);
    for (std::size_t k = 0; k < order - 1; ++k) c[k] = (n + 1 + k) % order;
    return c;
}

struct FitWorkspace {
    std::vector<MatrixXd> yn;        // Y_(n), one per mode
    std::vector<MaskMatrix> maskn;   // mask_(n) when masked
    double ynorm = 0.0;              // full or observed norm of y
    bool masked = false;
};

FitWorkspace build_workspace(const DenseTensor& y, const TCModel& m, const MaskTensor* mask) {
    if (y.dims() != m.mode_dims())
        throw std::invalid_argument("fit: tensor and model dimensions differ");
    const std::size_t order = m.order();
    FitWorkspace ws;
    ws.yn.reserve(order);
    for (std::size_t n = 0; n < order; ++n) {
        const Unfolding u = unfold(y, {n}, cyclic_others(order, n));
        ws.yn.emplace_back(u.matrix());
    }
    if (mask) {
        if (mask->dims != y.dims())
            throw std::invalid_argument("fit: mask dimensions differ from tensor");
        if (mask->observed_count() == 0) throw std::invalid_argument("fit: mask is empty");
        if (mask->observed_count() == mask->size()) mask = nullptr; // reduces to the dense fit
    }
    if (mask) {
        ws.masked = true;
        DenseTensor md(mask->dims);
        for (std::size_t k = 0; k < md.size(); ++k) md[k] = mask->data[k];
        double obs = 0.0;
        for (std::size_t k = 0; k < y.size(); ++k)
            if (mask->data[k]) obs += y[k] * y[k];
        ws.ynorm = std::sqrt(obs);
        for (std::size_t n = 0; n < order; ++n) {
            const Unfolding mu = unfold(md, {n}, cyclic_others(order, n));
            ws.maskn.emplace_back(mu.matrix().cast<std::uint8_t>());
        }
    } else {
        ws.ynorm = frobenius_norm(y);
    }
    if (ws.ynorm == 0.0) throw std::invalid_argument("fit: data tensor has zero norm");
    return ws;
}

// Exact least-squares update of core n. Returns the absolute residual of the
// updated model; sets *ridge_used when the normal equations needed a ridge.
double update_core(TCModel& m, const FitWorkspace& ws, std::size_t n, bool* ridge_used) {
    const std::size_t order = m.order();
    const std::size_t rn = m.bond_dim(n), rq = m.bond_dim((n + 1) % order);
    const std::size_t kk = rn * rq;
    const MatrixXd z = subchain_design(subchain(m, n));
    const MatrixXd& yu = ws.yn[n];

    MatrixXd x;
    if (!ws.masked) {
        MatrixXd g = z.transpose() * z;
        const MatrixXd f = yu * z;
        Eigen::LDLT<MatrixXd> ldlt(g);
        bool ok = ldlt.info() == Eigen::Success;
        if (ok) {
            const VectorXd d = ldlt.vectorD();
            ok = d.minCoeff() > 1e-13 * std::max(d.maxCoeff(), 0.0) && d.minCoeff() > 0.0;
        }
        if (!ok) {
            const double ridge = kRidgeScale * (g.trace() / static_cast<double>(kk) + 1e-300);
            g.diagonal().array() += ridge;
            ldlt.compute(g);
            if (ridge_used) *ridge_used = true;
        }
        x = ldlt.solve(f.transpose()).transpose();
        m.set_core(n, core_from_mode2(x, rn, m.mode_dim(n), rq));
        return (yu - x * z.transpose()).norm();
    }

    // Masked: each row of the unfolding is an independent weighted LS over the
    // row's observed columns, with the same ridge fallback policy.
    const MaskMatrix& w = ws.maskn[n];
    const Eigen::Index rows = yu.rows();
    x.resize(rows, kk);
    double res2 = 0.0;
    for (Eigen::Index i = 0; i < rows; ++i) {
        MatrixXd g = MatrixXd::Zero(kk, kk);
        VectorXd f = VectorXd::Zero(kk);
        for (Eigen::Index j = 0; j < yu.cols(); ++j) {
            if (!w(i, j)) continue;
            const VectorXd zr = z.row(j).transpose();
            g.noalias() += zr * zr.transpose();
            f.noalias() += yu(i, j) * zr;
        }
        Eigen::LDLT<MatrixXd> ldlt(g);
        bool ok = ldlt.info() == Eigen::Success;
        if (ok) {
            const VectorXd d = ldlt.vectorD();
            ok = d.minCoeff() > 1e-13 * std::max(d.maxCoeff(), 0.0) && d.minCoeff() > 0.0;
        }
        if (!ok) {
            const double ridge = kRidgeScale * (g.trace() / static_cast<double>(kk) + 1e-300);
            g.diagonal().array() += ridge;
            ldlt.compute(g);
            if (ridge_used) *ridge_used = true;
        }
        x.row(i) = ldlt.solve(f).transpose();
        for (Eigen::Index j = 0; j < yu.cols(); ++j) {
            if (!w(i, j)) continue;
            const double e = yu(i, j) - z.row(j).dot(x.row(i));
            res2 += e * e;
        }
    }
    m.set_core(n, core_from_mode2(x, rn, m.mode_dim(n), rq));
    return std::sqrt(res2);
}

struct FitContext {
    const DenseTensor& y;
    const MaskTensor* mask;
    const FitConfig& cfg;
    const CorrectionConfig* ccfg; // non-null enables SS control
};

std::pair<TCModel, DecompositionReport> run_fit(const FitContext& fc, const TCModel& m0) {
    fc.cfg.validate();
    const auto t_start = std::chrono::steady_clock::now();
    TCModel m = m0;
    const MaskTensor* mask =
        fc.mask && fc.mask->observed_count() < fc.mask->size() ? fc.mask : nullptr;
    FitWorkspace ws = build_workspace(fc.y, m, mask);
    DecompositionReport rep;
    rep.termination = Termination::MaxIters;

    if (mask) {
        // Underdetermined rows cannot pin their core slices; flag once per mode.
        for (std::size_t n = 0; n < m.order(); ++n) {
            const std::size_t kk = m.bond_dim(n) * m.bond_dim((n + 1) % m.order());
            const auto& w = ws.maskn[n];
            for (Eigen::Index i = 0; i < w.rows(); ++i) {
                std::size_t cnt = 0;
                for (Eigen::Index j = 0; j < w.cols(); ++j) cnt += w(i, j);
                if (cnt < kk) {
                    rep.warnings.push_back("mode " + std::to_string(n) +
                                           " has a slice with fewer observed entries than R_nR_{n+1}");
                    break;
                }
            }
        }
    }

    int last_correction = -fc.cfg.stall_window;
    int corrections = 0;
    const bool control = fc.ccfg != nullptr;

    for (int it = 0; it < fc.cfg.max_iters; ++it) {
        bool ridge = false;
        double resid = 0.0;
        for (std::size_t n = 0; n < m.order(); ++n) resid = update_core(m, ws, n, &ridge);
        if (ridge) ++rep.ridge_fallback_count;

        const double err = resid / ws.ynorm;
        const StabilityMeasures meas = sensitivity(m);
        rep.relative_error.push_back(err);
        rep.sensitivity.push_back(meas.sensitivity);
        rep.intensity.push_back(meas.intensity);

        if (err <= fc.cfg.rel_err_tol) {
            rep.termination = Termination::Converged;
            break;
        }

        const int window = fc.cfg.stall_window;
        const bool window_clear = it + 1 >= window && it - last_correction >= window;
        const bool stalled =
            window_clear &&
            (rep.relative_error[it - window + 1] - err) < fc.cfg.stall_tol;

        if (!control) {
            if (stalled) {
                rep.termination = Termination::Stalled;
                break;
            }
            continue;
        }

        const bool ss_trigger = fc.cfg.trigger_mode && meas.sensitivity >= fc.cfg.ss_max &&
                                it - last_correction >= window;
        const bool scheduled =
            std::find(fc.cfg.correction_schedule.begin(), fc.cfg.correction_schedule.end(),
                      it + 1) != fc.cfg.correction_schedule.end();

        if ((ss_trigger || scheduled || stalled) && corrections < fc.cfg.max_corrections) {
            CorrectionEvent ev;
            ev.iteration = it + 1;
            ev.kind = ss_trigger ? "ss_trigger" : (scheduled ? "scheduled" : "stall");
            ev.ss_before = meas.sensitivity;
            ev.err_before = err;
            const double delta = resid;
            TCModel corrected = m;
            if (fc.ccfg->apply_intensity_first) {
                corrected = intensity_correct(fc.y, corrected, delta, *fc.ccfg, nullptr, mask);
                ev.kind += "+intensity";
            }
            corrected = ssc_correct(fc.y, corrected, delta, *fc.ccfg, nullptr, mask);
            const StabilityMeasures after = sensitivity(corrected);
            double err_after = 0.0;
            {
                const DenseTensor yh = reconstruct(corrected);
                err_after = mask ? masked_relative_error(fc.y, yh, *mask)
                                    : relative_error(fc.y, yh);
            }
            ev.ss_after = after.sensitivity;
            ev.err_after = err_after;
            rep.correction_events.push_back(ev);
            m = corrected;
            last_correction = it;
            ++corrections;
        } else if (stalled && corrections >= fc.cfg.max_corrections) {
            rep.termination = Termination::Stalled;
            break;
        }
    }

    rep.wall_time_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return {std::move(m), std::move(rep)};
}

} // namespace

TCModel als_step(const DenseTensor& y, const TCModel& m, std::size_t n) {
    TCModel out = m;
    FitWorkspace ws = build_workspace(y, m, nullptr);
    update_core(out, ws, n % m.order(), nullptr);
    return out;
}

std::pair<TCModel, DecompositionReport> als_fit(const DenseTensor& y, const TCModel& m0,
                                                const FitConfig& cfg) {
    return run_fit({y, nullptr, cfg, nullptr}, m0);
}

std::pair<TCModel, DecompositionReport> masked_als_fit(const DenseTensor& y,
                                                       const MaskTensor& mask, const TCModel& m0,
                                                       const FitConfig& cfg) {
    return run_fit({y, &mask, cfg, nullptr}, m0);
}

std::pair<TCModel, DecompositionReport> fit_with_ss_control(const DenseTensor& y,
                                                            const TCModel& m0,
                                                            const FitConfig& cfg,
                                                            const CorrectionConfig& ccfg) {
    return run_fit({y, nullptr, cfg, &ccfg}, m0);
}

std::pair<TCModel, DecompositionReport> fit_with_ss_control(const DenseTensor& y,
                                                            const MaskTensor& mask,
                                                            const TCModel& m0, const FitConfig& cfg,
                                                            const CorrectionConfig& ccfg) {
    return run_fit({y, &mask, cfg, &ccfg}, m0);
}

} // namespace tc
