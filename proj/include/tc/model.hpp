#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "tc/tensor.hpp"

namespace tc {

/// Ring of N order-3 cores; core n has shape R_n x I_n x R_{n+1} with
/// R_{N+1} = R_1. Value type: copying a model copies its cores.
class TCModel {
public:
    explicit TCModel(std::vector<DenseTensor> cores);

    std::size_t order() const { return cores_.size(); }
    const DenseTensor& core(std::size_t n) const { return cores_[n]; }
    const std::vector<DenseTensor>& cores() const { return cores_; }

    std::size_t bond_dim(std::size_t n) const { return cores_[n % order()].dim(0); }
    std::size_t mode_dim(std::size_t n) const { return cores_[n].dim(1); }
    std::vector<std::size_t> bond_dims() const;
    std::vector<std::size_t> mode_dims() const;
    std::size_t param_count() const;

    /// Replace core n (shape must stay compatible with the ring).
    void set_core(std::size_t n, DenseTensor t);

private:
    std::vector<DenseTensor> cores_;
};

/// Sum of Tucker-2 terms sharing one core: Y = sum_t core x_1 A[t] x_3 C[t].
/// A[t]: I_1 x R_2, core: R_2 x I_2 x R_3, C[t]: I_3 x R_3, t = 1..T.
struct BTDSharedModel {
    std::vector<Eigen::MatrixXd> A;
    DenseTensor core;
    std::vector<Eigen::MatrixXd> C;
};

struct StabilityMeasures {
    double intensity = 0.0;        // product of core Frobenius norms
    double sensitivity = 0.0;      // sum of per_mode_terms
    std::vector<double> per_mode_terms; // beta_n^2 = I_n * ||subchain without core n||_F^2
};

enum class ChainNormMethod {
    Auto,  // Gram transfer matrices for N >= 4, dense contraction for N = 3
    Dense, // materialize the subchain and take its norm
    Gram,  // transfer-matrix chain between vectorized identities
};

/// Y[i_1..i_N] = tr(A_1(:,i_1,:) ... A_N(:,i_N,:)); computed by chaining
/// train_contract over the cores and tracing the boundary bond pair.
DenseTensor reconstruct(const TCModel& m);

/// Dense open train of `count` cores starting at `first` (cyclic), i.e.
/// A_first . A_{first+1} . ... ; shape R_first x I.. x R_{first+count}.
DenseTensor chain_section(const TCModel& m, std::size_t first, std::size_t count);

/// The subchain with core n removed: A_{n+1} . ... . A_{n-1}.
DenseTensor subchain(const TCModel& m, std::size_t n);

/// Transfer (Gram) matrix of one core: B = sum_i A(:,i,:) (x) A(:,i,:),
/// size R_n^2 x R_{n+1}^2 with the fast index of each pair first.
Eigen::MatrixXd transfer_matrix(const DenseTensor& core);

/// vec(I_R) under the pairing used by transfer_matrix.
Eigen::VectorXd vec_identity(std::size_t r);

/// ||A_{-n}||_F^2 by the chosen evaluation route.
double subchain_norm_sq(const TCModel& m, std::size_t n,
                        ChainNormMethod method = ChainNormMethod::Auto);

/// Product of core Frobenius norms. Throws degenerate_model_error on a zero core.
double intensity(const TCModel& m);

/// Closed-form sensitivity ss = sum_n I_n ||A_{-n}||_F^2 plus the intensity.
StabilityMeasures sensitivity(const TCModel& m,
                              ChainNormMethod method = ChainNormMethod::Auto);

/// Rescale cores by alpha_n = beta_n / geomean(beta) (unit product), which
/// minimizes ss over pure scalings; reconstruction is unchanged.
TCModel balanced_normalize(const TCModel& m, ChainNormMethod method = ChainNormMethod::Auto);

/// Equivalent order-3 model with inflated intensity: thin-SVD split of
/// A.B mixed by the matrix with unit diagonal and off-diagonal x at
/// positions (1,2)/(2,1). x in [0,1); R_2 >= 2.
TCModel degeneracy_sequence(const TCModel& m, double x);

TCModel btd_to_tc(const BTDSharedModel& b);
BTDSharedModel tc_to_btd(const TCModel& m); // order-3 only

// --- "TCM1" model format -----------------------------------------------------
// magic "TCM1" | u32 N | N x (u64 R_n, u64 I_n) | N cores as TCT1 blocks.

void write_tcm(std::ostream& os, const TCModel& m);
void write_tcm(const std::string& path, const TCModel& m);
TCModel read_tcm(std::istream& is);
TCModel read_tcm(const std::string& path);

} // namespace tc
