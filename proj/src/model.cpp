#include "tc/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "tc/errors.hpp"

namespace tc {

TCModel::TCModel(std::vector<DenseTensor> cores) : cores_(std::move(cores)) {
    const std::size_t n = cores_.size();
    if (n < 3) throw std::invalid_argument("TCModel needs at least 3 cores");
    for (std::size_t k = 0; k < n; ++k) {
        if (cores_[k].order() != 3)
            throw std::invalid_argument("TCModel cores must be order-3");
        if (cores_[k].dim(2) != cores_[(k + 1) % n].dim(0))
            throw std::invalid_argument("TCModel bond dimensions do not close the ring");
    }
}

std::vector<std::size_t> TCModel::bond_dims() const {
    std::vector<std::size_t> r(order());
    for (std::size_t k = 0; k < order(); ++k) r[k] = cores_[k].dim(0);
    return r;
}

std::vector<std::size_t> TCModel::mode_dims() const {
    std::vector<std::size_t> d(order());
    for (std::size_t k = 0; k < order(); ++k) d[k] = cores_[k].dim(1);
    return d;
}

std::size_t TCModel::param_count() const {
    std::size_t p = 0;
    for (const auto& c : cores_) p += c.size();
    return p;
}

void TCModel::set_core(std::size_t n, DenseTensor t) {
    if (t.order() != 3 || t.dims() != cores_[n].dims())
        throw std::invalid_argument("set_core: shape mismatch");
    cores_[n] = std::move(t);
}

DenseTensor chain_section(const TCModel& m, std::size_t first, std::size_t count) {
    if (count == 0 || count > m.order())
        throw std::invalid_argument("chain_section: bad core count");
    DenseTensor acc = m.core(first % m.order());
    for (std::size_t k = 1; k < count; ++k)
        acc = train_contract(acc, m.core((first + k) % m.order()));
    return acc;
}

DenseTensor subchain(const TCModel& m, std::size_t n) {
    return chain_section(m, (n + 1) % m.order(), m.order() - 1);
}

DenseTensor reconstruct(const TCModel& m) {
    const DenseTensor chain = chain_section(m, 0, m.order()); // R1 x I1..IN x R1
    const std::size_t r1 = chain.dim(0);
    const std::size_t total = chain.size() / (r1 * r1);
    DenseTensor out(m.mode_dims());
    const double* src = chain.data().data();
    double* dst = out.data().data();
    const std::size_t boundary_step = 1 + r1 * total; // moves both boundary indices together
    for (std::size_t i = 0; i < total; ++i) {
        double s = 0.0;
        const double* p = src + r1 * i;
        for (std::size_t r = 0; r < r1; ++r) s += p[r * boundary_step];
        dst[i] = s;
    }
    return out;
}

Eigen::MatrixXd transfer_matrix(const DenseTensor& core) {
    const std::size_t r = core.dim(0), i = core.dim(1), q = core.dim(2);
    Eigen::MatrixXd b = Eigen::MatrixXd::Zero(r * r, q * q);
    // B[(a + r a'), (c + q c')] = sum_i A[a,i,c] A[a',i,c']
    const double* d = core.data().data();
    for (std::size_t c2 = 0; c2 < q; ++c2)
        for (std::size_t c1 = 0; c1 < q; ++c1)
            for (std::size_t k = 0; k < i; ++k) {
                const double* colA = d + r * (k + i * c1);
                const double* colB = d + r * (k + i * c2);
                for (std::size_t a2 = 0; a2 < r; ++a2) {
                    const double w = colB[a2];
                    if (w == 0.0) continue;
                    for (std::size_t a1 = 0; a1 < r; ++a1)
                        b(a1 + r * a2, c1 + q * c2) += colA[a1] * w;
                }
            }
    return b;
}

Eigen::VectorXd vec_identity(std::size_t r) {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(r * r);
    for (std::size_t k = 0; k < r; ++k) v(k + r * k) = 1.0;
    return v;
}

double subchain_norm_sq(const TCModel& m, std::size_t n, ChainNormMethod method) {
    if (method == ChainNormMethod::Auto)
        method = m.order() >= 4 ? ChainNormMethod::Gram : ChainNormMethod::Dense;
    if (method == ChainNormMethod::Dense) return frobenius_norm_sq(subchain(m, n));

    const std::size_t order = m.order();
    // ||A_{-n}||^2 = vec(I_{R_{n+1}})^T B_{n+1} ... B_{n-1} vec(I_{R_n});
    // accumulate right-to-left so each step is one mat-vec.
    Eigen::VectorXd w = vec_identity(m.bond_dim(n));
    for (std::size_t k = order - 1; k >= 1; --k)
        w = transfer_matrix(m.core((n + k) % order)) * w;
    return vec_identity(m.bond_dim((n + 1) % order)).dot(w);
}

double intensity(const TCModel& m) {
    double a = 1.0;
    for (std::size_t n = 0; n < m.order(); ++n) {
        const double nn = frobenius_norm(m.core(n));
        if (nn == 0.0)
            throw degenerate_model_error("intensity: core " + std::to_string(n) + " is zero");
        a *= nn;
    }
    return a;
}

StabilityMeasures sensitivity(const TCModel& m, ChainNormMethod method) {
    StabilityMeasures s;
    s.per_mode_terms.resize(m.order());
    double inten = 1.0;
    for (std::size_t n = 0; n < m.order(); ++n) {
        s.per_mode_terms[n] = static_cast<double>(m.mode_dim(n)) * subchain_norm_sq(m, n, method);
        s.sensitivity += s.per_mode_terms[n];
        inten *= frobenius_norm(m.core(n));
    }
    s.intensity = inten;
    return s;
}

TCModel balanced_normalize(const TCModel& m, ChainNormMethod method) {
    const std::size_t order = m.order();
    std::vector<double> beta(order);
    double log_geo = 0.0;
    for (std::size_t n = 0; n < order; ++n) {
        const double b2 = static_cast<double>(m.mode_dim(n)) * subchain_norm_sq(m, n, method);
        if (!(b2 > 0.0))
            throw degenerate_model_error("balanced_normalize: beta_" + std::to_string(n) +
                                         " vanishes (zero subchain)");
        beta[n] = std::sqrt(b2);
        log_geo += std::log(beta[n]);
    }
    const double log_beta = log_geo / static_cast<double>(order);
    std::vector<DenseTensor> cores;
    cores.reserve(order);
    for (std::size_t n = 0; n < order; ++n) {
        const double alpha = std::exp(std::log(beta[n]) - log_beta);
        DenseTensor c = m.core(n);
        c.vec() *= alpha;
        cores.push_back(std::move(c));
    }
    return TCModel(std::move(cores));
}

TCModel degeneracy_sequence(const TCModel& m, double x) {
    if (m.order() != 3)
        throw unsupported_order_error("degeneracy_sequence: order-3 models only");
    if (!(x >= 0.0) || x >= 1.0)
        throw std::invalid_argument("degeneracy_sequence: x must lie in [0, 1)");
    const std::size_t r2 = m.bond_dim(1);
    if (r2 < 2) throw unsupported_order_error("degeneracy_sequence: requires R_2 >= 2");

    const std::size_t r1 = m.bond_dim(0), i1 = m.mode_dim(0);
    const std::size_t i2 = m.mode_dim(1), r3 = m.bond_dim(2);

    // Thin SVD of the (R1 I1) x (I2 R3) unfolding of A.B; its rank is at most
    // R2, so keeping R2 terms is an exact re-parameterization.
    const DenseTensor ab = train_contract(m.core(0), m.core(1));
    Eigen::Map<const Eigen::MatrixXd> mat(ab.data().data(),
                                          static_cast<Eigen::Index>(r1 * i1),
                                          static_cast<Eigen::Index>(i2 * r3));
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(mat, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto thin = static_cast<Eigen::Index>(std::min<std::size_t>(r2, svd.singularValues().size()));

    Eigen::MatrixXd u = Eigen::MatrixXd::Zero(mat.rows(), static_cast<Eigen::Index>(r2));
    Eigen::MatrixXd sv = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(r2), mat.cols());
    u.leftCols(thin) = svd.matrixU().leftCols(thin);
    sv.topRows(thin) = svd.singularValues().head(thin).asDiagonal() *
                       svd.matrixV().leftCols(thin).transpose();

    Eigen::MatrixXd qmix = Eigen::MatrixXd::Identity(r2, r2);
    qmix(0, 1) = x;
    qmix(1, 0) = x;
    const Eigen::MatrixXd qinv = qmix.inverse();

    Eigen::MatrixXd left = u * qmix;        // (R1 I1) x R2
    Eigen::MatrixXd mid = qinv * sv;        // R2 x (I2 R3)

    DenseTensor core_a({r1, i1, r2},
                       std::vector<double>(left.data(), left.data() + left.size()));
    DenseTensor core_b({r2, i2, r3},
                       std::vector<double>(mid.data(), mid.data() + mid.size()));
    return TCModel({std::move(core_a), std::move(core_b), m.core(2)});
}

TCModel btd_to_tc(const BTDSharedModel& b) {
    const std::size_t t = b.A.size();
    if (t == 0 || b.C.size() != t)
        throw std::invalid_argument("btd_to_tc: need matching non-empty A/C factor lists");
    const std::size_t i1 = b.A[0].rows(), r2 = b.A[0].cols();
    const std::size_t i3 = b.C[0].rows(), r3 = b.C[0].cols();
    for (const auto& a : b.A)
        if (static_cast<std::size_t>(a.rows()) != i1 || static_cast<std::size_t>(a.cols()) != r2)
            throw std::invalid_argument("btd_to_tc: A factors must share shape");
    for (const auto& c : b.C)
        if (static_cast<std::size_t>(c.rows()) != i3 || static_cast<std::size_t>(c.cols()) != r3)
            throw std::invalid_argument("btd_to_tc: C factors must share shape");
    if (b.core.order() != 3 || b.core.dim(0) != r2 || b.core.dim(2) != r3)
        throw std::invalid_argument("btd_to_tc: shared core shape mismatch");

    // A(t,:,:) = A_t and C(s,:,t) = C_t(:,s), per the term-by-term expansion
    // of the shared-core sum.
    DenseTensor core_a({t, i1, r2});
    for (std::size_t k = 0; k < t; ++k)
        for (std::size_t c = 0; c < r2; ++c)
            for (std::size_t i = 0; i < i1; ++i)
                core_a(k, i, c) = b.A[k](i, c);
    DenseTensor core_c({r3, i3, t});
    for (std::size_t k = 0; k < t; ++k)
        for (std::size_t i = 0; i < i3; ++i)
            for (std::size_t s = 0; s < r3; ++s)
                core_c(s, i, k) = b.C[k](i, s);
    return TCModel({std::move(core_a), b.core, std::move(core_c)});
}

BTDSharedModel tc_to_btd(const TCModel& m) {
    if (m.order() != 3)
        throw unsupported_order_error("tc_to_btd: only order-3 models convert to a shared BTD");
    const std::size_t t = m.bond_dim(0);
    const std::size_t i1 = m.mode_dim(0), r2 = m.bond_dim(1);
    const std::size_t i3 = m.mode_dim(2), r3 = m.bond_dim(2);
    BTDSharedModel b{std::vector<Eigen::MatrixXd>(t, Eigen::MatrixXd(i1, r2)),
                     m.core(1),
                     std::vector<Eigen::MatrixXd>(t, Eigen::MatrixXd(i3, r3))};
    for (std::size_t k = 0; k < t; ++k) {
        for (std::size_t c = 0; c < r2; ++c)
            for (std::size_t i = 0; i < i1; ++i)
                b.A[k](i, c) = m.core(0)(k, i, c);
        for (std::size_t i = 0; i < i3; ++i)
            for (std::size_t s = 0; s < r3; ++s)
                b.C[k](i, s) = m.core(2)(s, i, k);
    }
    return b;
}

// --- TCM1 io ------------------------------------------------------------------

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int k = 0; k < 4; ++k) b[k] = static_cast<unsigned char>((v >> (8 * k)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int k = 0; k < 8; ++k) b[k] = static_cast<unsigned char>((v >> (8 * k)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("TCM1: truncated file");
    std::uint32_t v = 0;
    for (int k = 3; k >= 0; --k) v = (v << 8) | b[k];
    return v;
}

std::uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("TCM1: truncated file");
    std::uint64_t v = 0;
    for (int k = 7; k >= 0; --k) v = (v << 8) | b[k];
    return v;
}

} // namespace

void write_tcm(std::ostream& os, const TCModel& m) {
    os.write("TCM1", 4);
    put_u32(os, static_cast<std::uint32_t>(m.order()));
    for (std::size_t n = 0; n < m.order(); ++n) {
        put_u64(os, m.bond_dim(n));
        put_u64(os, m.mode_dim(n));
    }
    for (std::size_t n = 0; n < m.order(); ++n) write_tct(os, m.core(n));
    if (!os) throw std::runtime_error("TCM1: write failed");
}

void write_tcm(const std::string& path, const TCModel& m) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("TCM1: cannot open for writing: " + path);
    write_tcm(f, m);
}

TCModel read_tcm(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "TCM1", 4) != 0)
        throw std::runtime_error("TCM1: bad magic");
    const std::uint32_t n = get_u32(is);
    if (n < 3 || n > 64) throw std::runtime_error("TCM1: implausible core count");
    std::vector<std::pair<std::size_t, std::size_t>> shapes(n);
    for (auto& sh : shapes) {
        sh.first = static_cast<std::size_t>(get_u64(is));
        sh.second = static_cast<std::size_t>(get_u64(is));
    }
    std::vector<DenseTensor> cores;
    cores.reserve(n);
    for (std::uint32_t k = 0; k < n; ++k) {
        DenseTensor c = read_tct(is);
        if (c.order() != 3 || c.dim(0) != shapes[k].first || c.dim(1) != shapes[k].second)
            throw std::runtime_error("TCM1: core block does not match header shape");
        cores.push_back(std::move(c));
    }
    return TCModel(std::move(cores));
}

TCModel read_tcm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("TCM1: cannot open: " + path);
    TCModel m = read_tcm(f);
    f.peek();
    if (!f.eof()) throw std::runtime_error("TCM1: trailing bytes in " + path);
    return m;
}

} // namespace tc
