#include "tc/stabilize.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Dense>

#include "tc/decompose.hpp"
#include "tc/errors.hpp"

namespace tc {

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

using MaskMatrix = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;

// Lateral slice A(:,i,:) of an order-3 core as a strided matrix view.
Eigen::Map<const MatrixXd, 0, Eigen::OuterStride<>> slice(const DenseTensor& core, std::size_t i) {
    const auto r = static_cast<Eigen::Index>(core.dim(0));
    const auto q = static_cast<Eigen::Index>(core.dim(2));
    const auto ld = static_cast<Eigen::Index>(core.dim(0) * core.dim(1));
    return {core.data().data() + core.dim(0) * i, r, q, Eigen::OuterStride<>(ld)};
}

// Gram of an open chain of cores over all modes except one boundary bond.
// `all_but_first`: contract everything except the chain's first bond.
MatrixXd chain_boundary_gram(const TCModel& m, const std::vector<std::size_t>& chain,
                             bool all_but_last) {
    if (chain.empty()) throw std::logic_error("chain_boundary_gram: empty chain");
    if (all_but_last) {
        // vec(G) = (B_{c0} ... B_{cK})^T vec(I_{R_first})
        const std::size_t r_first = m.core(chain.front()).dim(0);
        VectorXd v = vec_identity(r_first);
        for (std::size_t t = 0; t < chain.size(); ++t)
            v = transfer_matrix(m.core(chain[t])).transpose() * v;
        const std::size_t r = m.core(chain.back()).dim(2);
        return Eigen::Map<const MatrixXd>(v.data(), r, r);
    }
    // vec(G) = B_{c0} ... B_{cK} vec(I_{R_last})
    const std::size_t r_last = m.core(chain.back()).dim(2);
    VectorXd v = vec_identity(r_last);
    for (std::size_t t = chain.size(); t-- > 0;)
        v = transfer_matrix(m.core(chain[t])) * v;
    const std::size_t r = m.core(chain.front()).dim(0);
    return Eigen::Map<const MatrixXd>(v.data(), r, r);
}

std::vector<std::size_t> cyclic_others(std::size_t order, std::size_t n) {
    std::vector<std::size_t> c(order - 1);
    for (std::size_t k = 0; k < order - 1; ++k) c[k] = (n + 1 + k) % order;
    return c;
}

} // namespace

void CorrectionConfig::validate() const {
    if (max_sweeps <= 0 || stiefel_max_iters <= 0 || rotation_sweeps < 0)
        throw std::invalid_argument("CorrectionConfig: iteration counts must be positive");
    if (!(stiefel_grad_tol > 0) || !(scqp_lambda_tol > 0) || !(sweep_ss_rel_tol > 0))
        throw std::invalid_argument("CorrectionConfig: tolerances must be positive");
}

CorrectionConfig correction_config_from_json(const nlohmann::json& j) {
    CorrectionConfig c;
    if (j.contains("max_sweeps")) c.max_sweeps = j.at("max_sweeps").get<int>();
    if (j.contains("stiefel_max_iters")) c.stiefel_max_iters = j.at("stiefel_max_iters").get<int>();
    if (j.contains("stiefel_grad_tol")) c.stiefel_grad_tol = j.at("stiefel_grad_tol").get<double>();
    if (j.contains("scqp_lambda_tol")) c.scqp_lambda_tol = j.at("scqp_lambda_tol").get<double>();
    if (j.contains("sweep_ss_rel_tol")) c.sweep_ss_rel_tol = j.at("sweep_ss_rel_tol").get<double>();
    if (j.contains("intensity_first")) c.apply_intensity_first = j.at("intensity_first").get<bool>();
    if (j.contains("balanced_norm_first"))
        c.apply_balanced_norm_first = j.at("balanced_norm_first").get<bool>();
    if (j.contains("rotation_sweeps")) c.rotation_sweeps = j.at("rotation_sweeps").get<int>();
    c.validate();
    return c;
}

std::pair<MatrixXd, MatrixXd> rotation_matrices(const TCModel& m, std::size_t n,
                                                ChainNormMethod method) {
    const std::size_t order = m.order();
    n %= order;
    const std::size_t np1 = (n + 1) % order;
    if (method == ChainNormMethod::Auto)
        method = order > 3 ? ChainNormMethod::Gram : ChainNormMethod::Dense;

    // X1/X2: self-contractions of the chain A_{n+2}..A_{n-1} keeping its
    // first / last bond open.
    MatrixXd x1, x2;
    if (method == ChainNormMethod::Dense) {
        const DenseTensor rest = chain_section(m, (n + 2) % order, order - 2);
        const std::size_t rfirst = rest.dim(0);
        const std::size_t rlast = rest.dim(rest.order() - 1);
        Eigen::Map<const MatrixXd> front(rest.data().data(), rfirst, rest.size() / rfirst);
        Eigen::Map<const MatrixXd> back(rest.data().data(), rest.size() / rlast, rlast);
        x1 = front * front.transpose();
        x2 = back.transpose() * back;
    } else {
        std::vector<std::size_t> chain(order - 2);
        for (std::size_t k = 0; k < order - 2; ++k) chain[k] = (n + 2 + k) % order;
        x1 = chain_boundary_gram(m, chain, /*all_but_last=*/false);
        x2 = chain_boundary_gram(m, chain, /*all_but_last=*/true);
    }

    const DenseTensor& a = m.core(n);
    const DenseTensor& b = m.core(np1);
    const std::size_t r = m.bond_dim(np1);
    MatrixXd t1 = MatrixXd::Zero(r, r), t2 = MatrixXd::Zero(r, r);
    for (std::size_t i = 0; i < b.dim(1); ++i) {
        const auto s = slice(b, i);
        t1.noalias() += s * x1 * s.transpose();
    }
    for (std::size_t i = 0; i < a.dim(1); ++i) {
        const auto s = slice(a, i);
        t2.noalias() += s.transpose() * x2 * s;
    }
    t1 = ((t1 + t1.transpose()) * 0.5).eval();
    t2 = ((t2 + t2.transpose()) * 0.5).eval();
    return {t1, t2};
}

MatrixXd rotation_init_basis(const MatrixXd& t1, const MatrixXd& t2) {
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(t1 + t2);
    if (es.info() != Eigen::Success)
        throw std::runtime_error("rotation_init_basis: eigendecomposition failed");
    return es.eigenvectors().rowwise().reverse(); // descending eigenvalues
}

namespace {

constexpr double kStiefelGuard = 1e-14;
constexpr double kStiefelEps = 1e-12;

double stiefel_value_and_grad(const MatrixXd& t1, const MatrixXd& t2, const MatrixXd& u,
                              MatrixXd* grad) {
    const Eigen::Index r = u.cols();
    double f = 0.0;
    if (grad) grad->setZero(u.rows(), r);
    for (Eigen::Index k = 0; k < r; ++k) {
        const VectorXd ur = u.col(k);
        const VectorXd t1u = t1 * ur;
        const VectorXd t2u = t2 * ur;
        const double a = ur.dot(t1u);
        const double b = ur.dot(t2u);
        if (a < kStiefelGuard || b < kStiefelGuard) {
            // smoothed branch near a_r b_r = 0
            const double s = std::sqrt(std::max(a * b, 0.0) + kStiefelEps * kStiefelEps);
            f += s;
            if (grad) grad->col(k) = (b * t1u + a * t2u) / s;
        } else {
            const double s = std::sqrt(a * b);
            f += s;
            if (grad) grad->col(k) = std::sqrt(b / a) * t1u + std::sqrt(a / b) * t2u;
        }
    }
    return f;
}

} // namespace

double rotation_objective(const MatrixXd& t1, const MatrixXd& t2, const MatrixXd& u) {
    return stiefel_value_and_grad(t1, t2, u, nullptr);
}

MatrixXd rotation_objective_gradient(const MatrixXd& t1, const MatrixXd& t2, const MatrixXd& u) {
    MatrixXd g;
    stiefel_value_and_grad(t1, t2, u, &g);
    return g;
}

StiefelResult stiefel_minimize(const MatrixXd& t1, const MatrixXd& t2, const MatrixXd& u0,
                               const StiefelOptions& opts) {
    const Eigen::Index r = u0.rows();
    if (u0.cols() != r || t1.rows() != r || t2.rows() != r)
        throw std::invalid_argument("stiefel_minimize: square matrices of one size expected");
    if ((u0.transpose() * u0 - MatrixXd::Identity(r, r)).cwiseAbs().maxCoeff() > 1e-8)
        throw std::invalid_argument("stiefel_minimize: U0 is not orthonormal");

    StiefelResult res;
    res.U = u0;
    MatrixXd grad(r, r);
    double f = stiefel_value_and_grad(t1, t2, res.U, &grad);
    res.objective_trace.push_back(f);

    MatrixXd w = grad * res.U.transpose() - res.U * grad.transpose(); // skew
    double wnorm = w.norm();
    double tau = 0.1 / (wnorm + 1e-30);
    MatrixXd prev_u, prev_d;
    const MatrixXd eye = MatrixXd::Identity(r, r);

    int it = 0;
    for (; it < opts.max_iters; ++it) {
        if (wnorm <= opts.grad_tol) {
            res.converged = true;
            break;
        }
        const MatrixXd d = w * res.U; // descent direction is -d, slope -0.5 ||W||^2
        if (it > 0) {
            const MatrixXd s = res.U - prev_u;
            const MatrixXd ydiff = d - prev_d;
            const double sy = std::abs((s.array() * ydiff.array()).sum());
            const double ss = s.squaredNorm();
            if (sy > 1e-300) tau = std::min(std::max(ss / sy, 1e-15 / (wnorm + 1e-30)), 1e15);
        }

        const double slope = 0.5 * wnorm * wnorm;
        double step = tau;
        bool accepted = false;
        MatrixXd u_new;
        double f_new = f;
        for (int bt = 0; bt < 50; ++bt) {
            // Cayley curve U(t) = (I + t/2 W)^{-1} (I - t/2 W) U
            u_new = (eye + (step * 0.5) * w).partialPivLu().solve((eye - (step * 0.5) * w) * res.U);
            f_new = stiefel_value_and_grad(t1, t2, u_new, nullptr);
            if (f_new <= f - 1e-4 * step * slope) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) break; // no further monotone progress at fp resolution

        prev_u = res.U;
        prev_d = d;
        res.U = u_new;
        if ((res.U.transpose() * res.U - eye).cwiseAbs().maxCoeff() > 1e-12) {
            Eigen::HouseholderQR<MatrixXd> qr(res.U);
            MatrixXd q = qr.householderQ() * MatrixXd::Identity(r, r);
            const MatrixXd rr = qr.matrixQR().topRows(r).triangularView<Eigen::Upper>();
            for (Eigen::Index k = 0; k < r; ++k)
                if (rr(k, k) < 0) q.col(k) = -q.col(k);
            res.U = q;
        }
        f = stiefel_value_and_grad(t1, t2, res.U, &grad);
        res.objective_trace.push_back(f);
        w = grad * res.U.transpose() - res.U * grad.transpose();
        wnorm = w.norm();
    }
    res.objective = f;
    res.grad_norm = wnorm;
    res.iters = it;
    if (wnorm <= opts.grad_tol) res.converged = true;
    return res;
}

TCModel rotate_pair(const TCModel& m, std::size_t n, const CorrectionConfig& cfg) {
    const std::size_t order = m.order();
    n %= order;
    const std::size_t np1 = (n + 1) % order;
    auto [t1, t2] = rotation_matrices(m, n);
    const Eigen::Index r = t1.rows();

    const MatrixXd u0 = rotation_init_basis(t1, t2);
    StiefelOptions sopts{cfg.stiefel_max_iters, cfg.stiefel_grad_tol};
    StiefelResult sres = stiefel_minimize(t1, t2, u0, sopts);
    const MatrixXd& u = sres.U;

    const double in = static_cast<double>(m.mode_dim(n));
    const double inp1 = static_cast<double>(m.mode_dim(np1));
    const double scale1 = t1.trace() / static_cast<double>(r);
    const double scale2 = t2.trace() / static_cast<double>(r);

    VectorXd s(r);
    for (Eigen::Index k = 0; k < r; ++k) {
        const double a = u.col(k).dot(t1 * u.col(k));
        const double b = u.col(k).dot(t2 * u.col(k));
        if (!(b > 1e-14 * scale2))
            throw degenerate_rotation_error(
                "rotate_pair: zero denominator in closed-form eigenvalue", static_cast<int>(k));
        if (!(a > 1e-14 * scale1))
            throw degenerate_rotation_error(
                "rotate_pair: zero numerator makes the rotation singular", static_cast<int>(k));
        double sk = std::sqrt((in * a) / (inp1 * b));
        // Keep each eigenvalue between 1 and its optimum with a conditioning
        // cap; the per-component bound term then still cannot increase.
        const double capped = std::clamp(sk, 1e-6, 1e6);
        s(k) = std::clamp(capped, std::min(1.0, sk), std::max(1.0, sk));
    }

    const MatrixXd phi = u * s.cwiseSqrt().asDiagonal() * u.transpose();
    const MatrixXd phi_inv = u * s.cwiseSqrt().cwiseInverse().asDiagonal() * u.transpose();

    // A_n <- A_n . phi (contract last mode), A_{n+1} <- phi^{-1} . A_{n+1}.
    const DenseTensor& a = m.core(n);
    const DenseTensor& b = m.core(np1);
    DenseTensor a_new(a.dims()), b_new(b.dims());
    {
        const std::size_t lead = a.dim(0) * a.dim(1);
        Eigen::Map<const MatrixXd> src(a.data().data(), lead, a.dim(2));
        Eigen::Map<MatrixXd>(a_new.data().data(), lead, a.dim(2)).noalias() = src * phi;
    }
    {
        const std::size_t rest = b.dim(1) * b.dim(2);
        Eigen::Map<const MatrixXd> src(b.data().data(), b.dim(0), rest);
        Eigen::Map<MatrixXd>(b_new.data().data(), b.dim(0), rest).noalias() = phi_inv * src;
    }
    std::vector<DenseTensor> cores;
    cores.reserve(order);
    for (std::size_t k = 0; k < order; ++k) {
        if (k == n)
            cores.push_back(a_new);
        else if (k == np1)
            cores.push_back(b_new);
        else
            cores.push_back(m.core(k));
    }
    return TCModel(std::move(cores));
}

TCModel rotation_correct(const TCModel& m, const CorrectionConfig& cfg) {
    cfg.validate();
    TCModel cur = m;
    double ss_prev = sensitivity(cur).sensitivity;
    for (int sweep = 0; sweep < cfg.max_sweeps; ++sweep) {
        for (std::size_t n = 0; n < cur.order(); ++n) cur = rotate_pair(cur, n, cfg);
        const double ss = sensitivity(cur).sensitivity;
        if (ss_prev - ss <= cfg.sweep_ss_rel_tol * std::max(ss_prev, 1e-300)) break;
        ss_prev = ss;
    }
    return cur;
}

// --- SCQP --------------------------------------------------------------------

namespace {

struct RootFindResult {
    double lambda = 0.0;
    double residual_sq = 0.0;
    int iters = 0;
    bool hit_cap = false;
};

// Monotone decreasing residual(lambda); bisection in log-lambda with a
// bracket grown by doubling. Terminates on |res - delta^2| <= tol_abs.
template <typename F>
RootFindResult solve_secular(F&& residual, double delta_sq, double tol_abs, double lambda_scale,
                             double lambda_cap) {
    RootFindResult out;
    double lo = lambda_scale * 1e-18;
    double r_lo = residual(lo);
    ++out.iters;
    if (r_lo <= delta_sq + tol_abs) { // constraint already met at (nearly) zero weight
        out.lambda = lo;
        out.residual_sq = r_lo;
        return out;
    }
    double hi = std::max(lo * 2.0, lambda_scale);
    double r_hi = residual(hi);
    ++out.iters;
    while (r_hi > delta_sq && hi < lambda_cap) {
        lo = hi;
        r_lo = r_hi;
        hi *= 8.0;
        r_hi = residual(hi);
        ++out.iters;
    }
    if (r_hi > delta_sq) { // cannot reach delta even with a huge multiplier
        out.lambda = hi;
        out.residual_sq = r_hi;
        out.hit_cap = true;
        return out;
    }
    for (int k = 0; k < 400; ++k) {
        const double mid = std::sqrt(lo * hi);
        const double r_mid = residual(mid);
        ++out.iters;
        if (std::abs(r_mid - delta_sq) <= tol_abs || (hi / lo) < 1.0 + 1e-15) {
            out.lambda = mid;
            out.residual_sq = r_mid;
            return out;
        }
        if (r_mid > delta_sq)
            lo = mid;
        else
            hi = mid;
    }
    out.lambda = std::sqrt(lo * hi);
    out.residual_sq = residual(out.lambda);
    ++out.iters;
    return out;
}

} // namespace

ScqpSolution scqp_solve(const ScqpProblem& p, double lambda_tol) {
    const Eigen::Index k = p.Q.rows();
    if (p.Q.cols() != k || p.Z.cols() != k)
        throw std::invalid_argument("scqp_solve: Q must be K x K and Z must have K columns");
    if (p.Yu.cols() != p.Z.rows())
        throw std::invalid_argument("scqp_solve: Yu columns must match Z rows");
    if (!(p.delta >= 0.0)) throw std::invalid_argument("scqp_solve: delta must be >= 0");
    if ((p.Q - p.Q.transpose()).cwiseAbs().maxCoeff() >
        1e-10 * std::max(1.0, p.Q.cwiseAbs().maxCoeff()))
        throw std::invalid_argument("scqp_solve: Q must be symmetric");
    if (p.mask && (p.mask->rows() != p.Yu.rows() || p.mask->cols() != p.Yu.cols()))
        throw std::invalid_argument("scqp_solve: mask shape must match Yu");

    const Eigen::Index m = p.Yu.rows();
    const double delta_sq = p.delta * p.delta;

    double yn2 = 0.0;
    if (p.mask) {
        for (Eigen::Index i = 0; i < m; ++i)
            for (Eigen::Index j = 0; j < p.Yu.cols(); ++j)
                if ((*p.mask)(i, j)) yn2 += p.Yu(i, j) * p.Yu(i, j);
    } else {
        yn2 = p.Yu.squaredNorm();
    }

    ScqpSolution sol;
    if (yn2 <= delta_sq) { // X = 0 is feasible and optimal for PSD Q
        sol.X = MatrixXd::Zero(m, k);
        sol.residual_sq = yn2;
        return sol;
    }

    const double tol_abs = lambda_tol * std::max(delta_sq, 1e-14 * yn2);
    const double feas_slack = 1e-9 * std::max(delta_sq, 1e-12 * yn2) + 1e-300;

    if (!p.mask) {
        const MatrixXd g = p.Z.transpose() * p.Z;
        const MatrixXd f = p.Yu * p.Z; // m x K, rows Z^T y_i
        const double lambda_scale =
            (p.Q.trace() + 1e-300) / (g.trace() + 1e-300) + 1e-300;
        const double lambda_cap = lambda_scale * 1e20;

        // Fast path: simultaneous reduction of (Q, Z^T Z) when the Gram matrix
        // is positive definite; the secular function is then closed-form.
        Eigen::LLT<MatrixXd> llt(g);
        bool pd = llt.info() == Eigen::Success;
        if (pd) {
            const VectorXd d = llt.matrixL().toDenseMatrix().diagonal();
            if (d.minCoeff() <= 1e-8 * (d.maxCoeff() + 1e-300)) pd = false;
        }
        if (pd) {
            Eigen::GeneralizedSelfAdjointEigenSolver<MatrixXd> ges(p.Q, g);
            if (ges.info() == Eigen::Success) {
                VectorXd dvals = ges.eigenvalues().cwiseMax(0.0); // PSD clamp
                const MatrixXd v = ges.eigenvectors();            // V^T G V = I
                const MatrixXd c = f * v;                          // m x K, reduced coords

                // The residual is evaluated explicitly: the eigencoordinate
                // formula subtracts O(||Yu||^2) quantities and loses the
                // active constraint when delta^2 << ||Yu||^2.
                auto x_of = [&](double lambda) -> MatrixXd {
                    VectorXd w(k);
                    for (Eigen::Index j = 0; j < k; ++j)
                        w(j) = lambda / (dvals(j) + lambda);
                    return c * w.asDiagonal() * v.transpose();
                };
                auto residual = [&](double lambda) {
                    return (p.Yu - x_of(lambda) * p.Z.transpose()).squaredNorm();
                };
                const RootFindResult rf =
                    solve_secular(residual, delta_sq, tol_abs, lambda_scale, lambda_cap);
                if (rf.hit_cap && rf.residual_sq > delta_sq + feas_slack)
                    throw infeasible_bound_error(
                        "scqp_solve: least-squares floor exceeds delta", rf.residual_sq);
                sol.X = x_of(rf.lambda);
                sol.lambda = rf.lambda;
                sol.residual_sq = (p.Yu - sol.X * p.Z.transpose()).squaredNorm();
                sol.objective = (sol.X * p.Q).cwiseProduct(sol.X).sum();
                sol.root_iters = rf.iters;
                return sol;
            }
        }

        // General path: factor (Q + lambda G) per trial lambda.
        auto solve_x = [&](double lambda) {
            const MatrixXd a = p.Q + lambda * g;
            Eigen::LDLT<MatrixXd> ldlt(a);
            return MatrixXd((lambda * ldlt.solve(f.transpose())).transpose());
        };
        auto residual = [&](double lambda) {
            return (p.Yu - solve_x(lambda) * p.Z.transpose()).squaredNorm();
        };
        const RootFindResult rf =
            solve_secular(residual, delta_sq, tol_abs, lambda_scale, lambda_cap);
        if (rf.hit_cap && rf.residual_sq > delta_sq + feas_slack)
            throw infeasible_bound_error("scqp_solve: least-squares floor exceeds delta",
                                         rf.residual_sq);
        sol.X = solve_x(rf.lambda);
        sol.lambda = rf.lambda;
        sol.residual_sq = (p.Yu - sol.X * p.Z.transpose()).squaredNorm();
        sol.objective = (sol.X * p.Q).cwiseProduct(sol.X).sum();
        sol.root_iters = rf.iters;
        return sol;
    }

    // Masked: rows couple only through the shared multiplier; per-row Gram
    // matrices are restricted to observed columns.
    const MaskMatrix& w = *p.mask;
    std::vector<MatrixXd> gi(m);
    std::vector<VectorXd> fi(m);
    double g_trace = 0.0;
    for (Eigen::Index i = 0; i < m; ++i) {
        MatrixXd g = MatrixXd::Zero(k, k);
        VectorXd f = VectorXd::Zero(k);
        for (Eigen::Index j = 0; j < p.Yu.cols(); ++j) {
            if (!w(i, j)) continue;
            const VectorXd zr = p.Z.row(j).transpose();
            g.noalias() += zr * zr.transpose();
            f.noalias() += p.Yu(i, j) * zr;
        }
        g_trace += g.trace();
        gi[i] = std::move(g);
        fi[i] = std::move(f);
    }
    const double lambda_scale =
        (p.Q.trace() * static_cast<double>(m) + 1e-300) / (g_trace + 1e-300) + 1e-300;
    const double lambda_cap = lambda_scale * 1e20;

    auto solve_x = [&](double lambda) {
        MatrixXd x(m, k);
        for (Eigen::Index i = 0; i < m; ++i)
            x.row(i) = (lambda * Eigen::LDLT<MatrixXd>(p.Q + lambda * gi[i]).solve(fi[i])).transpose();
        return x;
    };
    auto masked_residual_sq = [&](const MatrixXd& x) {
        double r = 0.0;
        const MatrixXd e = p.Yu - x * p.Z.transpose();
        for (Eigen::Index i = 0; i < m; ++i)
            for (Eigen::Index j = 0; j < e.cols(); ++j)
                if (w(i, j)) r += e(i, j) * e(i, j);
        return r;
    };
    auto residual = [&](double lambda) { return masked_residual_sq(solve_x(lambda)); };
    const RootFindResult rf = solve_secular(residual, delta_sq, tol_abs, lambda_scale, lambda_cap);
    if (rf.hit_cap && rf.residual_sq > delta_sq + feas_slack)
        throw infeasible_bound_error("scqp_solve: masked least-squares floor exceeds delta",
                                     rf.residual_sq);
    sol.X = solve_x(rf.lambda);
    sol.lambda = rf.lambda;
    sol.residual_sq = masked_residual_sq(sol.X);
    sol.objective = (sol.X * p.Q).cwiseProduct(sol.X).sum();
    sol.root_iters = rf.iters;
    return sol;
}

// --- sweeps -------------------------------------------------------------------

MatrixXd ssc_quadratic_matrix(const TCModel& m, std::size_t n) {
    const std::size_t order = m.order();
    n %= order;
    const std::size_t rn = m.bond_dim(n);
    const std::size_t rn1 = m.bond_dim((n + 1) % order);
    const std::size_t kk = rn * rn1;
    MatrixXd q = MatrixXd::Zero(kk, kk);

    const auto chain = cyclic_others(order, n);
    std::vector<MatrixXd> transfers(chain.size());
    for (std::size_t t = 0; t < chain.size(); ++t) transfers[t] = transfer_matrix(m.core(chain[t]));

    for (std::size_t j = 0; j < chain.size(); ++j) {
        const std::size_t kcore = chain[j];
        // Gs: gram of A_{n+1}..A_{k-1} over all modes but its first bond.
        VectorXd wv = vec_identity(m.bond_dim(kcore));
        for (std::size_t t = j; t-- > 0;) wv = transfers[t] * wv;
        Eigen::Map<const MatrixXd> gs(wv.data(), rn1, rn1);
        // Gl: gram of A_{k+1}..A_{n-1} over all modes but its last bond.
        VectorXd vv = vec_identity(j + 1 < chain.size() ? m.bond_dim(chain[j + 1]) : rn);
        for (std::size_t t = j + 1; t < chain.size(); ++t) vv = transfers[t].transpose() * vv;
        Eigen::Map<const MatrixXd> gl(vv.data(), rn, rn);

        const double ik = static_cast<double>(m.mode_dim(kcore));
        // Q += I_k * kron(Gs, Gl) over the (r_n fastest, r_{n+1}) pair index.
        for (std::size_t qb = 0; qb < rn1; ++qb)
            for (std::size_t qa = 0; qa < rn1; ++qa) {
                const double gsv = ik * gs(qa, qb);
                if (gsv == 0.0) continue;
                for (std::size_t rb = 0; rb < rn; ++rb)
                    for (std::size_t ra = 0; ra < rn; ++ra)
                        q(ra + rn * qa, rb + rn * qb) += gsv * gl(ra, rb);
            }
    }
    return ((q + q.transpose()) * 0.5).eval();
}

namespace {

enum class CorrectionMode { Sensitivity, Intensity };

struct CorrectionContext {
    std::vector<MatrixXd> y_unfold;     // Y_(n)
    std::vector<MaskMatrix> mask_unfold; // mask_(n), empty when unmasked
    double y_norm = 0.0;
};

CorrectionContext build_context(const DenseTensor& y, const TCModel& m, const MaskTensor* mask) {
    if (y.dims() != m.mode_dims())
        throw std::invalid_argument("correction: tensor and model dimensions differ");
    if (mask && mask->dims != y.dims())
        throw std::invalid_argument("correction: mask dimensions differ from tensor");
    const std::size_t order = m.order();
    CorrectionContext ctx;
    ctx.y_unfold.reserve(order);
    for (std::size_t n = 0; n < order; ++n) {
        const Unfolding u = unfold(y, {n}, cyclic_others(order, n));
        ctx.y_unfold.emplace_back(u.matrix());
        if (mask) {
            DenseTensor md(mask->dims);
            for (std::size_t k = 0; k < md.size(); ++k) md[k] = mask->data[k];
            const Unfolding mu = unfold(md, {n}, cyclic_others(order, n));
            ctx.mask_unfold.emplace_back(mu.matrix().cast<std::uint8_t>());
        }
    }
    ctx.y_norm = frobenius_norm(y);
    return ctx;
}

double model_error(const DenseTensor& y, const TCModel& m, const MaskTensor* mask) {
    const DenseTensor yhat = reconstruct(m);
    if (!mask) return (y.vec() - yhat.vec()).norm();
    double e = 0.0;
    for (std::size_t k = 0; k < y.size(); ++k)
        if (mask->data[k]) {
            const double d = y[k] - yhat[k];
            e += d * d;
        }
    return std::sqrt(e);
}

TCModel correct_impl(const DenseTensor& y, const TCModel& m0, double delta,
                     const CorrectionConfig& cfg, CorrectionTrace* trace, const MaskTensor* mask,
                     CorrectionMode mode) {
    cfg.validate();
    if (!(delta >= 0.0)) throw std::invalid_argument("correction: delta must be >= 0");
    CorrectionContext ctx = build_context(y, m0, mask);

    const double err0 = model_error(y, m0, mask);
    const double feas_slack = 1e-9 * std::max(delta, 1e-12 * ctx.y_norm);
    if (err0 > delta + feas_slack)
        throw std::invalid_argument("correction: initial model violates the error bound");

    TCModel cur = m0;
    const std::size_t order = cur.order();
    auto measure = [&](const TCModel& m) { return sensitivity(m); };
    StabilityMeasures meas = measure(cur);
    double monitor_prev =
        mode == CorrectionMode::Sensitivity ? meas.sensitivity : meas.intensity;

    auto log_state = [&](const TCModel& m, const StabilityMeasures& s) {
        if (!trace) return;
        trace->error.push_back(model_error(y, m, mask));
        trace->ss.push_back(s.sensitivity);
        trace->intensity.push_back(s.intensity);
    };
    auto warn = [&](const std::string& msg) {
        if (trace) trace->warnings.push_back(msg);
    };
    log_state(cur, meas);

    int sweeps_done = 0;
    for (int sweep = 0; sweep < cfg.max_sweeps; ++sweep) {
        if (cfg.apply_balanced_norm_first) {
            try {
                cur = balanced_normalize(cur); // intensity-neutral re-scaling
            } catch (const degenerate_model_error&) {
                warn("balanced normalization skipped: degenerate subchain");
            }
        }
        {
            // The rotation pass always lowers ss; in intensity mode it is kept
            // only when it also lowers the intensity (it usually does, by
            // unwinding Q/Q^{-1} mixing), so the per-sweep monitor stays
            // monotone.
            TCModel rotated = cur;
            for (int pass = 0; pass < cfg.rotation_sweeps; ++pass)
                for (std::size_t n = 0; n < order; ++n) {
                    try {
                        rotated = rotate_pair(rotated, n, cfg);
                    } catch (const degenerate_rotation_error&) {
                        warn("rotation skipped at bond " + std::to_string(n));
                    }
                }
            auto norm_product = [](const TCModel& m) {
                double a = 1.0;
                for (std::size_t n = 0; n < m.order(); ++n) a *= frobenius_norm(m.core(n));
                return a;
            };
            if (mode == CorrectionMode::Sensitivity ||
                norm_product(rotated) <= norm_product(cur) * (1.0 + 1e-12))
                cur = std::move(rotated);
        }

        for (std::size_t n = 0; n < order; ++n) {
            const DenseTensor sub = subchain(cur, n);
            ScqpProblem prob;
            prob.Z = subchain_design(sub);
            prob.Yu = ctx.y_unfold[n];
            prob.delta = delta;
            if (mask) prob.mask = ctx.mask_unfold[n];
            const std::size_t kk = cur.bond_dim(n) * cur.bond_dim((n + 1) % order);
            prob.Q = mode == CorrectionMode::Sensitivity
                         ? ssc_quadratic_matrix(cur, n)
                         : MatrixXd(MatrixXd::Identity(kk, kk));

            const MatrixXd x0 = core_mode2(cur.core(n));
            const double obj0 = (x0 * prob.Q).cwiseProduct(x0).sum();
            try {
                const ScqpSolution sol = scqp_solve(prob, cfg.scqp_lambda_tol);
                const double delta_sq_slack =
                    delta * delta * (1.0 + 2e-9) + 1e-28 * ctx.y_norm * ctx.y_norm;
                if (sol.objective <= obj0 * (1.0 + 1e-12) + 1e-300 &&
                    sol.residual_sq <= delta_sq_slack) {
                    cur.set_core(n, core_from_mode2(sol.X, cur.bond_dim(n), cur.mode_dim(n),
                                                    cur.bond_dim((n + 1) % order)));
                } else {
                    warn("SCQP update rejected at core " + std::to_string(n));
                }
            } catch (const infeasible_bound_error&) {
                warn("SCQP infeasible at core " + std::to_string(n) + "; core kept");
            }
        }

        ++sweeps_done;
        meas = measure(cur);
        log_state(cur, meas);
        const double monitor =
            mode == CorrectionMode::Sensitivity ? meas.sensitivity : meas.intensity;
        if (monitor_prev - monitor <= cfg.sweep_ss_rel_tol * std::max(monitor_prev, 1e-300)) break;
        monitor_prev = monitor;
    }
    if (trace) trace->sweeps = sweeps_done;
    return cur;
}

} // namespace

TCModel ssc_correct(const DenseTensor& y, const TCModel& m0, double delta,
                    const CorrectionConfig& cfg, CorrectionTrace* trace, const MaskTensor* mask) {
    return correct_impl(y, m0, delta, cfg, trace, mask, CorrectionMode::Sensitivity);
}

TCModel intensity_correct(const DenseTensor& y, const TCModel& m0, double delta,
                          const CorrectionConfig& cfg, CorrectionTrace* trace,
                          const MaskTensor* mask) {
    return correct_impl(y, m0, delta, cfg, trace, mask, CorrectionMode::Intensity);
}

} // namespace tc
