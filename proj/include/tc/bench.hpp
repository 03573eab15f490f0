#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tc/decompose.hpp"
#include "tc/model.hpp"
#include "tc/tensor.hpp"

namespace tc {

/// Success criterion shared by every experiment: relative error <= 1e-6.
inline constexpr double kSuccessRelErr = 1e-6;

struct ExperimentSpec {
    enum class Family { Synthetic, Collinear, Masked, Image, Kernel };
    enum class Solver { Als, SsControl };

    std::string name = "experiment";
    Family family = Family::Synthetic;
    std::vector<std::size_t> dims;
    std::vector<std::size_t> bonds;
    int n_instances = 1;
    int n_inits = 1;
    double collinearity_lo = 0.97;
    double collinearity_hi = 0.99;
    double mask_fraction = 0.5; // fraction of entries removed
    Solver solver = Solver::Als;
    FitConfig fit;
    CorrectionConfig correction;
    std::uint64_t seed = 0;
    std::string input_path; // image / kernel families
    bool dump_trajectories = false;
    bool init_at_truth = false; // start every run from the generating model

    void validate() const;
};

ExperimentSpec experiment_spec_from_json(const nlohmann::json& j);

struct RunRecord {
    int instance = 0;
    int init = 0;
    double final_err = 1.0;
    double final_ss = 0.0;
    double final_intensity = 0.0;
    int iterations = 0;
    int events = 0;
    Termination termination = Termination::MaxIters;
    double wall_time_sec = 0.0;
    bool failed = false;
    std::string error_message;
};

struct SuccessSummary {
    double success_rate = 0.0;
    std::vector<double> error_quantiles;     // p10, p50, p90
    std::vector<double> ss_quantiles;        // p10, p50, p90 at termination
    std::vector<double> intensity_quantiles; // p10, p50, p90 at termination
    std::vector<RunRecord> records;

    nlohmann::json to_json() const;
    void write_csv(std::ostream& os) const;
};

/// Exact TC tensor from i.i.d. standard Gaussian cores.
std::pair<DenseTensor, TCModel> gen_synthetic(const std::vector<std::size_t>& dims,
                                              const std::vector<std::size_t>& bonds,
                                              std::uint64_t seed);

/// Cores whose mode-2 unfoldings have pairwise column cosines inside
/// [lo, hi]; verified post-hoc with bounded retries.
std::pair<DenseTensor, TCModel> gen_collinear(const std::vector<std::size_t>& dims,
                                              const std::vector<std::size_t>& bonds, double lo,
                                              double hi, std::uint64_t seed);

/// Random mask with round(fraction_removed * numel) zeros.
MaskTensor gen_mask(const std::vector<std::size_t>& dims, double fraction_removed,
                    std::uint64_t seed);

SuccessSummary run_experiment(const ExperimentSpec& spec);

/// Executes every experiment in the config file, writing one CSV of per-run
/// records plus a JSON summary per experiment into out_dir. Individual run
/// failures are recorded, never fatal.
void run_suite(const std::string& config_path, const std::string& out_dir);

struct ImageFitRow {
    std::size_t r1 = 0, r2 = 0;
    double rel_err_als = 0.0;
    double rel_err_ssc = 0.0;
    std::size_t params = 0;
};

/// Parameter count of a bonds-(R1, R2, R1) model over `dims` (order 3).
std::size_t image_tc_param_count(const std::vector<std::size_t>& dims, std::size_t r1,
                                 std::size_t r2);

/// Fit an (H, W, 3) image with bonds (R1, R2, R1) for each grid entry, both
/// solvers from a shared seed. Triples whose parameter count exceeds the
/// image size are pruned.
std::vector<ImageFitRow> image_fit_experiment(const DenseTensor& image,
                                              const std::vector<std::pair<std::size_t, std::size_t>>& grid,
                                              const FitConfig& fit, const CorrectionConfig& corr,
                                              std::uint64_t seed);

void write_image_fit_csv(std::ostream& os, const std::vector<ImageFitRow>& rows);

/// Binary PPM (P6) image as an (H, W, 3) tensor with values in [0, 1].
DenseTensor read_ppm(const std::string& path);
void write_ppm(const std::string& path, const DenseTensor& image);

/// Run fn(i) for i in [0, count) on a worker pool. TC_THREADS caps the pool;
/// results must be written to preallocated slots so scheduling cannot change
/// the outcome.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn);

} // namespace tc
