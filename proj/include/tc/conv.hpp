#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include <Eigen/Core>

#include "tc/decompose.hpp"
#include "tc/model.hpp"
#include "tc/tensor.hpp"

namespace tc {

/// Square convolution kernel (C_out, C_in, D, D) with its stride/padding.
struct ConvKernel {
    DenseTensor weights;
    int stride = 1;
    int padding = 0;

    ConvKernel(DenseTensor w, int s, int p);
    std::size_t c_out() const { return weights.dim(0); }
    std::size_t c_in() const { return weights.dim(1); }
    std::size_t d() const { return weights.dim(2); }
};

/// Factorized block layers: x -> W1 (1x1) -> permute -> W2 (shared spatial
/// filter over R1 replicas) -> permute -> W3 (1x1). Channel packing follows
/// the block's permute semantics: W1 columns are (r1, r2) with r2 fastest,
/// W3 rows are (r1, r3) with r3 fastest.
struct TcBlockFactors {
    Eigen::MatrixXd w1;                          // C_in x (R1*R2)
    DenseTensor w2 = DenseTensor({1, 1, 1, 1});  // R2 x R3 x D x D
    Eigen::MatrixXd w3;                          // (R3*R1) x C_out
    std::size_t r1 = 0, r2 = 0, r3 = 0;

    std::size_t param_count() const { return w1.size() + w2.size() + w3.size(); }
};

/// (C_out, C_in, D, D) -> (C_out, C_in, D^2) with the spatial pair flattened
/// row-major (ky*D + kx).
DenseTensor kernel_to_order3(const ConvKernel& k);

/// Inverse of kernel_to_order3; the last mode must be a perfect square.
DenseTensor order3_to_kernel(const DenseTensor& t);

/// Model cores must run over (C_out, C_in, D^2); the paper's rank labels are
/// R1 = bond between the C_out and C_in cores, R2 = C_in/spatial bond,
/// R3 = spatial/C_out bond.
TcBlockFactors build_tc_block(const TCModel& m);

/// Direct cross-correlation with zero padding; x is (C_in, H, W).
DenseTensor conv2d_reference(const DenseTensor& x, const ConvKernel& k);

/// Evaluate the factorized block; algebraically identical to
/// conv2d_reference on the kernel reconstructed from the model.
DenseTensor tc_block_forward(const DenseTensor& x, const TcBlockFactors& f, int stride,
                             int padding);

/// Multiply-accumulates of the three layers per output spatial position.
double tc_block_flops_per_position(std::size_t c_in, std::size_t c_out, std::size_t d,
                                   std::size_t r1, std::size_t r2, std::size_t r3);

std::size_t tc_block_param_count(std::size_t c_in, std::size_t c_out, std::size_t d,
                                 std::size_t r1, std::size_t r2, std::size_t r3);

struct RankSearchEntry {
    std::size_t r1 = 0, r2 = 0, r3 = 0;
    double rel_err = 0.0;
    double flops = 0.0; // per output position
    std::size_t params = 0;
};

struct RankSearchOptions {
    std::size_t r1_max = 6, r2_max = 6, r3_max = 6;
    FitConfig fit;            // small iteration caps by default
    CorrectionConfig correction;
    std::uint64_t seed = 0;

    RankSearchOptions() {
        fit.max_iters = 300;
        fit.stall_window = 50;
        fit.stall_tol = 1e-9;
    }
};

/// Fit every rank triple on the grid, keep those within the FLOPs budget,
/// sorted by approximation error. An empty feasible set returns an empty
/// list rather than throwing.
std::vector<RankSearchEntry> rank_grid_search(const ConvKernel& k, double flops_budget,
                                              double err_threshold,
                                              const RankSearchOptions& opts = {});

void write_rank_search_csv(std::ostream& os, const std::vector<RankSearchEntry>& entries);

} // namespace tc
