#include "tc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace tc {

namespace {

std::size_t checked_product(const std::vector<std::size_t>& dims) {
    if (dims.empty()) throw std::invalid_argument("tensor must have at least one mode");
    std::size_t n = 1;
    for (std::size_t d : dims) {
        if (d == 0) throw std::invalid_argument("tensor dimensions must be >= 1");
        if (d != 0 && n > std::numeric_limits<std::size_t>::max() / d)
            throw std::invalid_argument("tensor size overflows size_t");
        n *= d;
    }
    return n;
}

std::vector<std::size_t> strides_of(const std::vector<std::size_t>& dims) {
    std::vector<std::size_t> s(dims.size());
    std::size_t acc = 1;
    for (std::size_t k = 0; k < dims.size(); ++k) {
        s[k] = acc;
        acc *= dims[k];
    }
    return s;
}

} // namespace

DenseTensor::DenseTensor(std::vector<std::size_t> dims)
    : dims_(std::move(dims)), data_(checked_product(dims_), 0.0) {}

DenseTensor::DenseTensor(std::vector<std::size_t> dims, std::vector<double> data)
    : dims_(std::move(dims)), data_(std::move(data)) {
    if (checked_product(dims_) != data_.size())
        throw std::invalid_argument("data length does not match product of dims");
}

std::size_t DenseTensor::linear_index(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != dims_.size()) throw std::invalid_argument("index arity mismatch");
    std::size_t lin = 0, stride = 1, k = 0;
    for (std::size_t i : idx) {
        if (i >= dims_[k]) throw std::out_of_range("tensor index out of range");
        lin += i * stride;
        stride *= dims_[k];
        ++k;
    }
    return lin;
}

std::size_t DenseTensor::linear_index(const std::vector<std::size_t>& idx) const {
    if (idx.size() != dims_.size()) throw std::invalid_argument("index arity mismatch");
    std::size_t lin = 0, stride = 1;
    for (std::size_t k = 0; k < idx.size(); ++k) {
        if (idx[k] >= dims_[k]) throw std::out_of_range("tensor index out of range");
        lin += idx[k] * stride;
        stride *= dims_[k];
    }
    return lin;
}

std::vector<std::size_t> DenseTensor::multi_index(std::size_t linear) const {
    std::vector<std::size_t> idx(dims_.size());
    for (std::size_t k = 0; k < dims_.size(); ++k) {
        idx[k] = linear % dims_[k];
        linear /= dims_[k];
    }
    return idx;
}

std::size_t DenseTensor::stride(std::size_t mode) const {
    std::size_t s = 1;
    for (std::size_t k = 0; k < mode; ++k) s *= dims_[k];
    return s;
}

Eigen::Map<const Eigen::MatrixXd> DenseTensor::as_matrix(std::size_t split) const {
    if (split == 0 || split >= dims_.size())
        throw std::invalid_argument("as_matrix split must leave modes on both sides");
    std::size_t r = 1, c = 1;
    for (std::size_t k = 0; k < split; ++k) r *= dims_[k];
    for (std::size_t k = split; k < dims_.size(); ++k) c *= dims_[k];
    return {data_.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)};
}

MaskTensor::MaskTensor(std::vector<std::size_t> d, std::vector<std::uint8_t> v)
    : dims(std::move(d)), data(std::move(v)) {
    if (checked_product(dims) != data.size())
        throw std::invalid_argument("mask length does not match product of dims");
    for (std::uint8_t b : data)
        if (b != 0 && b != 1) throw std::invalid_argument("mask values must be 0 or 1");
}

std::size_t MaskTensor::observed_count() const {
    return static_cast<std::size_t>(std::count(data.begin(), data.end(), std::uint8_t{1}));
}

Unfolding unfold(const DenseTensor& t, const std::vector<std::size_t>& row_modes,
                 const std::vector<std::size_t>& col_modes) {
    const std::size_t order = t.order();
    std::vector<char> seen(order, 0);
    auto check = [&](const std::vector<std::size_t>& modes) {
        for (std::size_t m : modes) {
            if (m >= order) throw std::invalid_argument("unfold: mode index out of range");
            if (seen[m]) throw std::invalid_argument("unfold: mode listed twice");
            seen[m] = 1;
        }
    };
    check(row_modes);
    check(col_modes);
    if (row_modes.size() + col_modes.size() != order)
        throw std::invalid_argument("unfold: row and column modes must cover all modes");

    Unfolding u;
    u.row_modes = row_modes;
    u.col_modes = col_modes;
    u.src_dims = t.dims();
    u.rows = 1;
    u.cols = 1;
    for (std::size_t m : row_modes) u.rows *= t.dim(m);
    for (std::size_t m : col_modes) u.cols *= t.dim(m);
    u.data.resize(t.size());

    // Odometer over output digits (row modes first, each first-listed fastest),
    // tracking the source linear offset incrementally.
    std::vector<std::size_t> perm(row_modes);
    perm.insert(perm.end(), col_modes.begin(), col_modes.end());
    const auto strides = strides_of(t.dims());
    std::vector<std::size_t> digit(order, 0), dsize(order), dstride(order);
    for (std::size_t p = 0; p < order; ++p) {
        dsize[p] = t.dim(perm[p]);
        dstride[p] = strides[perm[p]];
    }
    std::size_t src = 0;
    const double* in = t.data().data();
    for (std::size_t out = 0; out < u.data.size(); ++out) {
        u.data[out] = in[src];
        for (std::size_t p = 0; p < order; ++p) {
            if (++digit[p] < dsize[p]) {
                src += dstride[p];
                break;
            }
            digit[p] = 0;
            src -= dstride[p] * (dsize[p] - 1);
        }
    }
    return u;
}

DenseTensor refold(const Unfolding& u) {
    DenseTensor t(u.src_dims);
    const std::size_t order = u.src_dims.size();
    std::vector<std::size_t> perm(u.row_modes);
    perm.insert(perm.end(), u.col_modes.begin(), u.col_modes.end());
    if (perm.size() != order) throw std::invalid_argument("refold: inconsistent unfolding");
    const auto strides = strides_of(u.src_dims);
    std::vector<std::size_t> digit(order, 0), dsize(order), dstride(order);
    for (std::size_t p = 0; p < order; ++p) {
        dsize[p] = u.src_dims[perm[p]];
        dstride[p] = strides[perm[p]];
    }
    if (u.data.size() != t.size() || u.rows * u.cols != t.size())
        throw std::invalid_argument("refold: data size mismatch");
    std::size_t dst = 0;
    double* out = t.data().data();
    for (std::size_t k = 0; k < u.data.size(); ++k) {
        out[dst] = u.data[k];
        for (std::size_t p = 0; p < order; ++p) {
            if (++digit[p] < dsize[p]) {
                dst += dstride[p];
                break;
            }
            digit[p] = 0;
            dst -= dstride[p] * (dsize[p] - 1);
        }
    }
    return t;
}

DenseTensor train_contract(const DenseTensor& a, const DenseTensor& b) {
    const std::size_t q = a.dim(a.order() - 1);
    if (q != b.dim(0))
        throw std::invalid_argument("train_contract: last dim of a must equal first dim of b");
    if (a.order() + b.order() < 3)
        throw std::invalid_argument("train_contract: result would have order zero");

    std::vector<std::size_t> out_dims;
    out_dims.reserve(a.order() + b.order() - 2);
    for (std::size_t k = 0; k + 1 < a.order(); ++k) out_dims.push_back(a.dim(k));
    for (std::size_t k = 1; k < b.order(); ++k) out_dims.push_back(b.dim(k));

    const std::size_t rows = a.size() / q;
    const std::size_t cols = b.size() / q;
    DenseTensor c(out_dims);
    // With first-index-fastest layout both reshapes are zero-copy column-major.
    Eigen::Map<const Eigen::MatrixXd> ma(a.data().data(), rows, q);
    Eigen::Map<const Eigen::MatrixXd> mb(b.data().data(), q, cols);
    Eigen::Map<Eigen::MatrixXd>(c.data().data(), rows, cols).noalias() = ma * mb;
    return c;
}

DenseTensor cyclic_shift(const DenseTensor& t) {
    if (t.order() == 1) return t;
    std::vector<std::size_t> out_dims(t.dims().begin() + 1, t.dims().end());
    out_dims.push_back(t.dim(0));
    DenseTensor out(out_dims);
    const std::size_t i1 = t.dim(0);
    const std::size_t rest = t.size() / i1;
    Eigen::Map<const Eigen::MatrixXd> src(t.data().data(), i1, rest);
    Eigen::Map<Eigen::MatrixXd>(out.data().data(), rest, i1) = src.transpose();
    return out;
}

double frobenius_norm_sq(const DenseTensor& t) { return t.vec().squaredNorm(); }

double frobenius_norm(const DenseTensor& t) { return t.vec().norm(); }

double relative_error(const DenseTensor& y, const DenseTensor& yhat) {
    if (y.dims() != yhat.dims())
        throw std::invalid_argument("relative_error: dimension mismatch");
    const double ny = frobenius_norm(y);
    if (ny == 0.0) throw std::invalid_argument("relative_error: reference tensor has zero norm");
    return (y.vec() - yhat.vec()).norm() / ny;
}

double masked_relative_error(const DenseTensor& y, const DenseTensor& yhat, const MaskTensor& mask) {
    if (y.dims() != yhat.dims() || y.dims() != mask.dims)
        throw std::invalid_argument("masked_relative_error: dimension mismatch");
    double num = 0.0, den = 0.0;
    for (std::size_t k = 0; k < y.size(); ++k) {
        if (!mask.data[k]) continue;
        const double d = y[k] - yhat[k];
        num += d * d;
        den += y[k] * y[k];
    }
    if (den == 0.0)
        throw std::invalid_argument("masked_relative_error: observed part of reference is zero");
    return std::sqrt(num / den);
}

// --- TCT1 io ----------------------------------------------------------------

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

void put_f64(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(os, bits);
}

std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("TCT1: truncated file");
    std::uint32_t v = 0;
    for (int k = 3; k >= 0; --k) v = (v << 8) | b[k];
    return v;
}

std::uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("TCT1: truncated file");
    std::uint64_t v = 0;
    for (int k = 7; k >= 0; --k) v = (v << 8) | b[k];
    return v;
}

double get_f64(std::istream& is) {
    std::uint64_t bits = get_u64(is);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

} // namespace

void write_tct(std::ostream& os, const DenseTensor& t) {
    os.write("TCT1", 4);
    put_u32(os, static_cast<std::uint32_t>(t.order()));
    for (std::size_t d : t.dims()) put_u64(os, d);
    for (double v : t.data()) put_f64(os, v);
    if (!os) throw std::runtime_error("TCT1: write failed");
}

void write_tct(const std::string& path, const DenseTensor& t) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("TCT1: cannot open for writing: " + path);
    write_tct(f, t);
}

DenseTensor read_tct(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "TCT1", 4) != 0)
        throw std::runtime_error("TCT1: bad magic");
    const std::uint32_t order = get_u32(is);
    if (order == 0 || order > 64) throw std::runtime_error("TCT1: implausible tensor order");
    std::vector<std::size_t> dims(order);
    std::size_t total = 1;
    for (auto& d : dims) {
        std::uint64_t v = get_u64(is);
        if (v == 0 || v > (std::uint64_t{1} << 40)) throw std::runtime_error("TCT1: implausible dim");
        d = static_cast<std::size_t>(v);
        total *= d;
    }
    std::vector<double> data(total);
    for (auto& v : data) v = get_f64(is);
    return DenseTensor(std::move(dims), std::move(data));
}

DenseTensor read_tct(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("TCT1: cannot open: " + path);
    DenseTensor t = read_tct(f);
    f.peek();
    if (!f.eof()) throw std::runtime_error("TCT1: trailing bytes in " + path);
    return t;
}

} // namespace tc
