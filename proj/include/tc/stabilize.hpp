#pragma once

#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include <json.hpp>

#include "tc/model.hpp"
#include "tc/tensor.hpp"

namespace tc {

struct CorrectionConfig {
    int max_sweeps = 30;
    int stiefel_max_iters = 200;
    double stiefel_grad_tol = 1e-8;
    double scqp_lambda_tol = 1e-9;
    double sweep_ss_rel_tol = 1e-5;
    bool apply_balanced_norm_first = true;
    bool apply_intensity_first = false;
    int rotation_sweeps = 1; // rotation passes per outer correction sweep

    void validate() const;
};

CorrectionConfig correction_config_from_json(const nlohmann::json& j);

/// Bond-rotation subproblem between cores n and n+1: symmetric PSD pair
/// (T1, T2) of size R_{n+1} x R_{n+1}, the orthonormal iterate U, and the
/// closed-form eigenvalues s.
struct RotationProblem {
    Eigen::MatrixXd T1;
    Eigen::MatrixXd T2;
    Eigen::MatrixXd U;
    Eigen::VectorXd s;
};

/// T1 = sum_i A_{n+1}(:,i,:) X1 A_{n+1}(:,i,:)^T and
/// T2 = sum_i A_n(:,i,:)^T X2 A_n(:,i,:), with X1/X2 the self-contractions
/// of the chain A_{n+2}..A_{n-1} over all modes but its first/last bond.
std::pair<Eigen::MatrixXd, Eigen::MatrixXd>
rotation_matrices(const TCModel& m, std::size_t n,
                  ChainNormMethod method = ChainNormMethod::Auto);

struct StiefelOptions {
    int max_iters = 200;
    double grad_tol = 1e-8;
};

struct StiefelResult {
    Eigen::MatrixXd U;
    double objective = 0.0;
    double grad_norm = 0.0;
    int iters = 0;
    bool converged = false;
    std::vector<double> objective_trace; // objective at each accepted iterate
};

/// Eigenvectors of T1 + T2, columns ordered by descending eigenvalue.
Eigen::MatrixXd rotation_init_basis(const Eigen::MatrixXd& t1, const Eigen::MatrixXd& t2);

/// f(U) = sum_r sqrt((u_r^T T1 u_r)(u_r^T T2 u_r)).
double rotation_objective(const Eigen::MatrixXd& t1, const Eigen::MatrixXd& t2,
                          const Eigen::MatrixXd& u);

/// Euclidean gradient of the rotation objective (columnwise), with the
/// smoothing guard active near a_r b_r = 0.
Eigen::MatrixXd rotation_objective_gradient(const Eigen::MatrixXd& t1, const Eigen::MatrixXd& t2,
                                            const Eigen::MatrixXd& u);

/// Minimize the rotation objective over orthogonal U by curvilinear
/// (Cayley-retraction) descent with a Barzilai-Borwein trial step and a
/// monotone Armijo backtracking line search.
StiefelResult stiefel_minimize(const Eigen::MatrixXd& t1, const Eigen::MatrixXd& t2,
                               const Eigen::MatrixXd& u0, const StiefelOptions& opts = {});

/// Rotate the bond between cores n and n+1 by U diag(sqrt(s*)) U^T with the
/// closed-form s*; reconstruction is unchanged and ss cannot increase.
TCModel rotate_pair(const TCModel& m, std::size_t n, const CorrectionConfig& cfg = {});

/// Sweep rotate_pair over all bonds until the per-sweep ss decrease falls
/// below cfg.sweep_ss_rel_tol.
TCModel rotation_correct(const TCModel& m, const CorrectionConfig& cfg = {});

/// min tr(X Q X^T) s.t. ||Yu - X Z^T||_F^2 <= delta^2 (optionally masked:
/// ||W .* (Yu - X Z^T)||_F^2 <= delta^2 with W in {0,1}).
struct ScqpProblem {
    Eigen::MatrixXd Q;  // PSD, K x K
    Eigen::MatrixXd Yu; // m x M target
    Eigen::MatrixXd Z;  // M x K design
    double delta = 0.0;
    std::optional<Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>> mask; // m x M
};

struct ScqpSolution {
    Eigen::MatrixXd X;
    double lambda = 0.0;      // KKT multiplier of the residual constraint
    double residual_sq = 0.0; // ||Yu - X Z^T||^2 (masked if a mask is set)
    double objective = 0.0;   // tr(X Q X^T)
    int root_iters = 0;
};

ScqpSolution scqp_solve(const ScqpProblem& p, double lambda_tol = 1e-9);

struct CorrectionTrace {
    std::vector<double> error;       // absolute residual norm per sweep
    std::vector<double> ss;          // sensitivity per sweep
    std::vector<double> intensity;   // intensity per sweep
    int sweeps = 0;
    std::vector<std::string> warnings;
};

/// Algorithm: per sweep, balanced normalization + rotation, then one SCQP
/// update per core with Q = sum_{k != n} I_k (S_k S_k^T (x) L_k L_k^T) and
/// the shared residual bound delta. ss is non-increasing across sweeps and
/// the final error stays within delta.
TCModel ssc_correct(const DenseTensor& y, const TCModel& m0, double delta,
                    const CorrectionConfig& cfg, CorrectionTrace* trace = nullptr,
                    const MaskTensor* mask = nullptr);

/// Same sweep structure with Q = identity; drives down the intensity instead.
TCModel intensity_correct(const DenseTensor& y, const TCModel& m0, double delta,
                          const CorrectionConfig& cfg, CorrectionTrace* trace = nullptr,
                          const MaskTensor* mask = nullptr);

/// The Kronecker-structured Q for the core-n SCQP subproblem.
Eigen::MatrixXd ssc_quadratic_matrix(const TCModel& m, std::size_t n);

} // namespace tc
