#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <iosfwd>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "tc/errors.hpp"

namespace tc {

/// Dense order-N tensor of doubles. The linear layout is fixed globally:
/// the first index varies fastest, i.e. entry (i_1,...,i_N) lives at
/// i_1 + I_1*(i_2 + I_2*(i_3 + ...)). All unfolding conventions in the
/// library derive from this one rule.
class DenseTensor {
public:
    explicit DenseTensor(std::vector<std::size_t> dims);
    DenseTensor(std::vector<std::size_t> dims, std::vector<double> data);

    std::size_t order() const { return dims_.size(); }
    std::size_t dim(std::size_t n) const { return dims_[n]; }
    const std::vector<std::size_t>& dims() const { return dims_; }
    std::size_t size() const { return data_.size(); }

    const std::vector<double>& data() const { return data_; }
    std::vector<double>& data() { return data_; }
    double operator[](std::size_t linear) const { return data_[linear]; }
    double& operator[](std::size_t linear) { return data_[linear]; }

    /// Multi-index access, e.g. t(i, j, k) on an order-3 tensor.
    template <typename... Ix>
    double operator()(Ix... idx) const {
        return data_[linear_index({static_cast<std::size_t>(idx)...})];
    }
    template <typename... Ix>
    double& operator()(Ix... idx) {
        return data_[linear_index({static_cast<std::size_t>(idx)...})];
    }

    double at(const std::vector<std::size_t>& idx) const { return data_[linear_index(idx)]; }
    double& at(const std::vector<std::size_t>& idx) { return data_[linear_index(idx)]; }

    std::size_t linear_index(std::initializer_list<std::size_t> idx) const;
    std::size_t linear_index(const std::vector<std::size_t>& idx) const;
    std::vector<std::size_t> multi_index(std::size_t linear) const;
    std::size_t stride(std::size_t mode) const;

    /// Flat view as an Eigen column vector.
    Eigen::Map<const Eigen::VectorXd> vec() const {
        return {data_.data(), static_cast<Eigen::Index>(data_.size())};
    }
    Eigen::Map<Eigen::VectorXd> vec() {
        return {data_.data(), static_cast<Eigen::Index>(data_.size())};
    }

    /// Matrix view splitting the modes into (first `split` modes) x (rest).
    /// Zero-copy: the layout rule makes this exactly the column-major matrix.
    Eigen::Map<const Eigen::MatrixXd> as_matrix(std::size_t split) const;

private:
    std::vector<std::size_t> dims_;
    std::vector<double> data_;
};

/// Matricization of a tensor over a (row_modes | col_modes) mode split.
/// Row index r decodes over row_modes with the first listed mode fastest;
/// likewise c over col_modes. Keeps the source mode sizes so refold() is
/// self-contained.
struct Unfolding {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data; // column-major, entry (r,c) at r + rows*c
    std::vector<std::size_t> row_modes;
    std::vector<std::size_t> col_modes;
    std::vector<std::size_t> src_dims;

    Eigen::Map<const Eigen::MatrixXd> matrix() const {
        return {data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
    }
    Eigen::Map<Eigen::MatrixXd> matrix() {
        return {data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
    }
};

/// Binary observation indicator paired with a DenseTensor of equal dims.
struct MaskTensor {
    std::vector<std::size_t> dims;
    std::vector<std::uint8_t> data; // strictly {0,1}, same linear order as DenseTensor

    MaskTensor(std::vector<std::size_t> d, std::vector<std::uint8_t> v);
    std::size_t size() const { return data.size(); }
    std::size_t observed_count() const;
};

/// Mode indices are 0-based everywhere in this library.
Unfolding unfold(const DenseTensor& t, const std::vector<std::size_t>& row_modes,
                 const std::vector<std::size_t>& col_modes);
DenseTensor refold(const Unfolding& u);

/// Contraction of the last mode of `a` with the first mode of `b`:
/// c[i_1..i_{N-1}, j_2..j_K] = sum_q a[i_1..i_{N-1}, q] * b[q, j_2..j_K].
DenseTensor train_contract(const DenseTensor& a, const DenseTensor& b);

/// Mode order (1,2,..,N) -> (2,..,N,1). Order-1 tensors are returned unchanged.
DenseTensor cyclic_shift(const DenseTensor& t);

double frobenius_norm(const DenseTensor& t);
double frobenius_norm_sq(const DenseTensor& t);

/// ||y - yhat||_F / ||y||_F. Throws std::invalid_argument on dim mismatch or ||y|| == 0.
double relative_error(const DenseTensor& y, const DenseTensor& yhat);

/// Relative error restricted to mask==1 entries, normalized by the masked norm of y.
double masked_relative_error(const DenseTensor& y, const DenseTensor& yhat, const MaskTensor& mask);

// --- "TCT1" binary tensor format -------------------------------------------
// magic "TCT1" | u32 LE order N | N x u64 LE dims | prod(dims) f64 LE values
// in the fixed linear order. The file reader rejects trailing bytes.

void write_tct(std::ostream& os, const DenseTensor& t);
void write_tct(const std::string& path, const DenseTensor& t);
DenseTensor read_tct(std::istream& is);
DenseTensor read_tct(const std::string& path);

} // namespace tc
