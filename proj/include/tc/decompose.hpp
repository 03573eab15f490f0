#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "tc/model.hpp"
#include "tc/stabilize.hpp"
#include "tc/tensor.hpp"

namespace tc {

enum class InitScheme { Gaussian, Scaled, Balanced };

InitScheme init_scheme_from_string(const std::string& s);
std::string to_string(InitScheme s);

struct FitConfig {
    int max_iters = 1000;
    double rel_err_tol = 1e-6;
    double stall_tol = 1e-8; // min decrease of the relative error per stall window
    double ss_max = 1e7;     // sensitivity trigger for SS control
    std::uint64_t seed = 0;
    InitScheme init_scheme = InitScheme::Scaled;
    bool masked = false;
    std::vector<int> correction_schedule; // explicit sweep indices; empty = trigger mode
    bool trigger_mode = true;
    int stall_window = 100;
    int max_corrections = 25;

    void validate() const;
};

FitConfig fit_config_from_json(const nlohmann::json& j);

enum class Termination { Converged, Stalled, MaxIters };
std::string to_string(Termination t);

struct CorrectionEvent {
    int iteration = 0;
    std::string kind;
    double ss_before = 0.0;
    double ss_after = 0.0;
    double err_before = 0.0;
    double err_after = 0.0;
};

struct DecompositionReport {
    std::vector<double> relative_error; // one entry per sweep
    std::vector<double> sensitivity;
    std::vector<double> intensity;
    std::vector<CorrectionEvent> correction_events;
    Termination termination = Termination::MaxIters;
    double wall_time_sec = 0.0;
    int ridge_fallback_count = 0;
    std::vector<std::string> warnings;

    int iterations() const { return static_cast<int>(relative_error.size()); }
    double final_error() const {
        return relative_error.empty() ? 1.0 : relative_error.back();
    }
    nlohmann::json to_json() const;
};

/// Seeded model initialization. `data_norm` feeds the Scaled scheme (pass
/// frobenius_norm(y)); the Balanced scheme applies balanced_normalize to a
/// Gaussian draw.
TCModel init_model(const std::vector<std::size_t>& dims, const std::vector<std::size_t>& bonds,
                   std::uint64_t seed, InitScheme scheme, double data_norm = 0.0);

/// One exact least-squares replacement of core n (the global optimum of that
/// core given the others).
TCModel als_step(const DenseTensor& y, const TCModel& m, std::size_t n);

std::pair<TCModel, DecompositionReport> als_fit(const DenseTensor& y, const TCModel& m0,
                                                const FitConfig& cfg);

std::pair<TCModel, DecompositionReport> masked_als_fit(const DenseTensor& y,
                                                       const MaskTensor& mask, const TCModel& m0,
                                                       const FitConfig& cfg);

/// ALS with sensitivity control: when ss crosses cfg.ss_max (or the schedule
/// fires, or progress stalls), run the correction sweeps with delta set to
/// the current absolute error, then resume fitting.
std::pair<TCModel, DecompositionReport> fit_with_ss_control(const DenseTensor& y,
                                                            const TCModel& m0,
                                                            const FitConfig& cfg,
                                                            const CorrectionConfig& ccfg);

std::pair<TCModel, DecompositionReport> fit_with_ss_control(const DenseTensor& y,
                                                            const MaskTensor& mask,
                                                            const TCModel& m0, const FitConfig& cfg,
                                                            const CorrectionConfig& ccfg);

/// Mode-2 unfolding of an order-3 core: I_n x (R_n R_{n+1}), r_n fastest.
Eigen::MatrixXd core_mode2(const DenseTensor& core);
DenseTensor core_from_mode2(const Eigen::MatrixXd& x, std::size_t r, std::size_t i, std::size_t q);

/// Design matrix of a dense subchain A_{-n}: rows run over the free modes
/// (first fastest), columns over (r_n fastest, r_{n+1}).
Eigen::MatrixXd subchain_design(const DenseTensor& sub);

} // namespace tc
