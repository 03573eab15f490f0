#include "tc/conv.hpp"

#include "tc/rng.hpp"

#include <cmath>
#include <ostream>

#include <Eigen/Dense>

namespace tc {

using Eigen::MatrixXd;

ConvKernel::ConvKernel(DenseTensor w, int s, int p) : weights(std::move(w)), stride(s), padding(p) {
    if (weights.order() != 4) throw std::invalid_argument("ConvKernel: weights must be order-4");
    if (weights.dim(2) != weights.dim(3))
        throw std::invalid_argument("ConvKernel: spatial kernel must be square");
    if (s <= 0 || p < 0) throw std::invalid_argument("ConvKernel: bad stride/padding");
}

DenseTensor kernel_to_order3(const ConvKernel& k) {
    const std::size_t co = k.c_out(), ci = k.c_in(), d = k.d();
    DenseTensor out({co, ci, d * d});
    for (std::size_t kx = 0; kx < d; ++kx)
        for (std::size_t ky = 0; ky < d; ++ky)
            for (std::size_t c = 0; c < ci; ++c)
                for (std::size_t o = 0; o < co; ++o)
                    out(o, c, ky * d + kx) = k.weights(o, c, ky, kx);
    return out;
}

DenseTensor order3_to_kernel(const DenseTensor& t) {
    if (t.order() != 3) throw std::invalid_argument("order3_to_kernel: order-3 tensor expected");
    const std::size_t d = static_cast<std::size_t>(std::llround(std::sqrt(double(t.dim(2)))));
    if (d * d != t.dim(2))
        throw std::invalid_argument("order3_to_kernel: last mode must be a perfect square");
    DenseTensor out({t.dim(0), t.dim(1), d, d});
    for (std::size_t kx = 0; kx < d; ++kx)
        for (std::size_t ky = 0; ky < d; ++ky)
            for (std::size_t c = 0; c < t.dim(1); ++c)
                for (std::size_t o = 0; o < t.dim(0); ++o)
                    out(o, c, ky, kx) = t(o, c, ky * d + kx);
    return out;
}

TcBlockFactors build_tc_block(const TCModel& m) {
    if (m.order() != 3) throw std::invalid_argument("build_tc_block: order-3 model expected");
    const DenseTensor& co_core = m.core(0);  // (R3, C_out, R1)
    const DenseTensor& ci_core = m.core(1);  // (R1, C_in, R2)
    const DenseTensor& sp_core = m.core(2);  // (R2, D*D, R3)
    const std::size_t d2 = sp_core.dim(1);
    const std::size_t d = static_cast<std::size_t>(std::llround(std::sqrt(double(d2))));
    if (d * d != d2)
        throw std::invalid_argument("build_tc_block: spatial mode must be a perfect square");

    TcBlockFactors f;
    f.r1 = ci_core.dim(0);
    f.r2 = ci_core.dim(2);
    f.r3 = sp_core.dim(2);
    const std::size_t ci = ci_core.dim(1), co = co_core.dim(1);

    f.w1.resize(ci, f.r1 * f.r2);
    for (std::size_t a = 0; a < f.r1; ++a)
        for (std::size_t b = 0; b < f.r2; ++b)
            for (std::size_t c = 0; c < ci; ++c)
                f.w1(c, a * f.r2 + b) = ci_core(a, c, b);

    f.w2 = DenseTensor({f.r2, f.r3, d, d});
    for (std::size_t kx = 0; kx < d; ++kx)
        for (std::size_t ky = 0; ky < d; ++ky)
            for (std::size_t c = 0; c < f.r3; ++c)
                for (std::size_t b = 0; b < f.r2; ++b)
                    f.w2(b, c, ky, kx) = sp_core(b, ky * d + kx, c);

    f.w3.resize(f.r3 * f.r1, co);
    for (std::size_t a = 0; a < f.r1; ++a)
        for (std::size_t c = 0; c < f.r3; ++c)
            for (std::size_t o = 0; o < co; ++o)
                f.w3(a * f.r3 + c, o) = co_core(c, o, a);
    return f;
}

namespace {

std::size_t conv_out_size(std::size_t in, std::size_t d, int stride, int padding) {
    const long long span = static_cast<long long>(in) + 2LL * padding - static_cast<long long>(d);
    if (span < 0) throw std::invalid_argument("conv: kernel larger than padded input");
    if (span % stride != 0)
        throw std::invalid_argument("conv: output size is not integral for this stride/padding");
    return static_cast<std::size_t>(span / stride) + 1;
}

} // namespace

DenseTensor conv2d_reference(const DenseTensor& x, const ConvKernel& k) {
    if (x.order() != 3) throw std::invalid_argument("conv2d_reference: input must be (C, H, W)");
    if (x.dim(0) != k.c_in()) throw std::invalid_argument("conv2d_reference: channel mismatch");
    const std::size_t h = x.dim(1), w = x.dim(2), d = k.d();
    const std::size_t ho = conv_out_size(h, d, k.stride, k.padding);
    const std::size_t wo = conv_out_size(w, d, k.stride, k.padding);
    DenseTensor out({k.c_out(), ho, wo});
    for (std::size_t ww = 0; ww < wo; ++ww)
        for (std::size_t hh = 0; hh < ho; ++hh)
            for (std::size_t o = 0; o < k.c_out(); ++o) {
                double acc = 0.0;
                for (std::size_t c = 0; c < k.c_in(); ++c)
                    for (std::size_t ky = 0; ky < d; ++ky) {
                        const long long yy =
                            static_cast<long long>(hh) * k.stride + static_cast<long long>(ky) -
                            k.padding;
                        if (yy < 0 || yy >= static_cast<long long>(h)) continue;
                        for (std::size_t kx = 0; kx < d; ++kx) {
                            const long long xx =
                                static_cast<long long>(ww) * k.stride +
                                static_cast<long long>(kx) - k.padding;
                            if (xx < 0 || xx >= static_cast<long long>(w)) continue;
                            acc += x(c, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx)) *
                                   k.weights(o, c, ky, kx);
                        }
                    }
                out(o, hh, ww) = acc;
            }
    return out;
}

DenseTensor tc_block_forward(const DenseTensor& x, const TcBlockFactors& f, int stride,
                             int padding) {
    if (x.order() != 3) throw std::invalid_argument("tc_block_forward: input must be (C, H, W)");
    if (x.dim(0) != static_cast<std::size_t>(f.w1.rows()))
        throw std::invalid_argument("tc_block_forward: channel mismatch");
    const std::size_t h = x.dim(1), w = x.dim(2);
    const std::size_t d = f.w2.dim(2);
    const std::size_t ho = conv_out_size(h, d, stride, padding);
    const std::size_t wo = conv_out_size(w, d, stride, padding);
    const std::size_t r1 = f.r1, r2 = f.r2, r3 = f.r3;

    // W1: pointwise mixing; u1 has channels (r1, r2) with r2 fastest.
    MatrixXd u1 = f.w1.transpose() * x.as_matrix(1); // (R1 R2) x (H W)

    // W2: one shared D x D filter bank applied independently per r1 replica.
    MatrixXd u2(r3 * r1, ho * wo); // channels (r1, r3) with r3 fastest
    u2.setZero();
    for (std::size_t a = 0; a < r1; ++a)
        for (std::size_t ww = 0; ww < wo; ++ww)
            for (std::size_t hh = 0; hh < ho; ++hh) {
                const std::size_t opos = hh + ho * ww;
                for (std::size_t c = 0; c < r3; ++c) {
                    double acc = 0.0;
                    for (std::size_t b = 0; b < r2; ++b)
                        for (std::size_t ky = 0; ky < d; ++ky) {
                            const long long yy = static_cast<long long>(hh) * stride +
                                                 static_cast<long long>(ky) - padding;
                            if (yy < 0 || yy >= static_cast<long long>(h)) continue;
                            for (std::size_t kx = 0; kx < d; ++kx) {
                                const long long xx = static_cast<long long>(ww) * stride +
                                                     static_cast<long long>(kx) - padding;
                                if (xx < 0 || xx >= static_cast<long long>(w)) continue;
                                acc += u1(a * r2 + b, static_cast<std::size_t>(yy) +
                                                          h * static_cast<std::size_t>(xx)) *
                                       f.w2(b, c, ky, kx);
                            }
                        }
                    u2(a * r3 + c, opos) += acc;
                }
            }

    // W3: pointwise projection to C_out.
    DenseTensor out({static_cast<std::size_t>(f.w3.cols()), ho, wo});
    Eigen::Map<MatrixXd>(out.data().data(), f.w3.cols(), ho * wo).noalias() =
        f.w3.transpose() * u2;
    return out;
}

double tc_block_flops_per_position(std::size_t c_in, std::size_t c_out, std::size_t d,
                                   std::size_t r1, std::size_t r2, std::size_t r3) {
    const double w1 = double(c_in) * double(r1) * double(r2);
    const double w2 = double(r1) * double(r2) * double(r3) * double(d) * double(d);
    const double w3 = double(r1) * double(r3) * double(c_out);
    return w1 + w2 + w3;
}

std::size_t tc_block_param_count(std::size_t c_in, std::size_t c_out, std::size_t d,
                                 std::size_t r1, std::size_t r2, std::size_t r3) {
    return c_in * r1 * r2 + r2 * r3 * d * d + r3 * r1 * c_out;
}

std::vector<RankSearchEntry> rank_grid_search(const ConvKernel& k, double flops_budget,
                                              double err_threshold,
                                              const RankSearchOptions& opts) {
    if (!(flops_budget > 0)) throw std::invalid_argument("rank_grid_search: budget must be > 0");
    (void)err_threshold; // entries are sorted; callers pick the first below threshold
    const DenseTensor y = kernel_to_order3(k);
    const double ynorm = frobenius_norm(y);
    std::vector<RankSearchEntry> out;
    for (std::size_t r1 = 1; r1 <= opts.r1_max; ++r1)
        for (std::size_t r2 = 1; r2 <= opts.r2_max; ++r2)
            for (std::size_t r3 = 1; r3 <= opts.r3_max; ++r3) {
                const double fl =
                    tc_block_flops_per_position(k.c_in(), k.c_out(), k.d(), r1, r2, r3);
                if (fl > flops_budget) continue;
                // model bonds over (C_out, C_in, D^2) are (R3, R1, R2)
                const TCModel m0 = init_model(y.dims(), {r3, r1, r2},
                                              mix_seed(opts.seed, (r1 * 64 + r2) * 64 + r3),
                                              opts.fit.init_scheme, ynorm);
                const auto [m, rep] = fit_with_ss_control(y, m0, opts.fit, opts.correction);
                RankSearchEntry e;
                e.r1 = r1;
                e.r2 = r2;
                e.r3 = r3;
                e.rel_err = rep.final_error();
                e.flops = fl;
                e.params = tc_block_param_count(k.c_in(), k.c_out(), k.d(), r1, r2, r3);
                out.push_back(e);
            }
    std::sort(out.begin(), out.end(), [](const RankSearchEntry& a, const RankSearchEntry& b) {
        if (a.rel_err != b.rel_err) return a.rel_err < b.rel_err;
        return a.params < b.params;
    });
    return out;
}

void write_rank_search_csv(std::ostream& os, const std::vector<RankSearchEntry>& entries) {
    os << "R1,R2,R3,rel_err,flops,params\n";
    for (const auto& e : entries)
        os << e.r1 << ',' << e.r2 << ',' << e.r3 << ',' << e.rel_err << ',' << e.flops << ','
           << e.params << '\n';
}

} // namespace tc
