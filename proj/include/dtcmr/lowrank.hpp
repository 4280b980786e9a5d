#pragma once

#include <cmath>
#include <string>

#include <Eigen/Dense>

#include "dtcmr/common.hpp"
#include "dtcmr/image.hpp"
#include "dtcmr/stack.hpp"

namespace dtcmr {

/// Top-L singular triples of a Casorati matrix, A ~= U diag(s) V^T.
struct SvdFactors {
    Eigen::MatrixXd spatial_basis;    ///< rows x L, orthonormal columns
    Eigen::VectorXd singular_values;  ///< L, nonincreasing, >= 0
    Eigen::MatrixXd dynamic_factors;  ///< L x cols, orthonormal rows
    int rank = 0;

    Eigen::MatrixXd reconstruct() const {
        return spatial_basis * singular_values.asDiagonal() * dynamic_factors;
    }
};

namespace detail {

/// Truncated SVD of a "tall" matrix (rows >= cols) through the cols x cols
/// Gram matrix. Returns U (rows x L), s (L) and V (cols x L).
inline void gram_svd_tall(const Eigen::MatrixXd& a, int rank, Eigen::MatrixXd& u, Eigen::VectorXd& s,
                          Eigen::MatrixXd& v) {
    const Eigen::Index n = a.cols();
    const Eigen::MatrixXd gram = a.transpose() * a;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram);
    if (eig.info() != Eigen::Success) throw ComputeError("Gram eigen-decomposition failed");

    // Eigen returns ascending eigenvalues.
    v.resize(n, rank);
    s.resize(rank);
    for (int k = 0; k < rank; ++k) {
        v.col(k) = eig.eigenvectors().col(n - 1 - k);
        s(k) = std::sqrt(std::max(eig.eigenvalues()(n - 1 - k), 0.0));
    }

    u.resize(a.rows(), rank);
    const double sigma_max = s(0);
    const double zero_tol = 1e-9 * sigma_max;
    int completed = 0;
    for (int k = 0; k < rank; ++k) {
        Eigen::VectorXd w = a * v.col(k);
        for (int pass = 0; pass < 2; ++pass)
            for (int j = 0; j < k; ++j) w -= u.col(j).dot(w) * u.col(j);
        const double rho = w.norm();
        if (s(k) > zero_tol && rho > zero_tol) {
            u.col(k) = w / rho;
            continue;
        }
        // Null direction: complete the basis with the first canonical vector
        // that survives orthogonalization.
        s(k) = 0.0;
        ++completed;
        for (Eigen::Index e = 0; e < a.rows(); ++e) {
            Eigen::VectorXd c = Eigen::VectorXd::Unit(a.rows(), e);
            for (int pass = 0; pass < 2; ++pass)
                for (int j = 0; j < k; ++j) c -= u.col(j).dot(c) * u.col(j);
            if (c.norm() > 0.5) {
                u.col(k) = c.normalized();
                break;
            }
        }
    }
    if (completed > 0)
        log::info("truncated_svd: " + std::to_string(completed) + " zero singular value(s), basis completed");
}

}  // namespace detail

/// Top-L SVD. Sign convention: the largest-magnitude entry of each spatial
/// basis column is positive (first such entry on ties).
inline SvdFactors truncated_svd(const Eigen::MatrixXd& matrix, int rank) {
    const Eigen::Index min_dim = std::min(matrix.rows(), matrix.cols());
    if (rank < 1 || rank > min_dim)
        throw ValidationError("rank " + std::to_string(rank) + " out of range [1, " + std::to_string(min_dim) + "]");

    SvdFactors f;
    f.rank = rank;
    Eigen::MatrixXd u, v;
    Eigen::VectorXd s;
    if (matrix.rows() >= matrix.cols()) {
        detail::gram_svd_tall(matrix, rank, u, s, v);
    } else {
        detail::gram_svd_tall(matrix.transpose(), rank, v, s, u);
    }

    for (int k = 0; k < rank; ++k) {
        Eigen::Index imax = 0;
        u.col(k).cwiseAbs().maxCoeff(&imax);
        if (u(imax, k) < 0.0) {
            u.col(k) = -u.col(k);
            v.col(k) = -v.col(k);
        }
    }
    f.spatial_basis = std::move(u);
    f.singular_values = std::move(s);
    f.dynamic_factors = v.transpose();
    return f;
}

/// A^L: every frame replaced by its rank-L approximation. Values are not clamped.
inline ImageStack reconstruct_rank(const ImageStack& stack, int rank) {
    const auto f = truncated_svd(flatten_casorati(stack), rank);
    return unflatten_casorati(f.reconstruct(), stack);
}

/// Geometric average of the rank-1 frames phi * w_k, i.e. phi * geomean(w).
inline Image rank1_reference(const ImageStack& stack) {
    const auto f = truncated_svd(flatten_casorati(stack), 1);
    Eigen::VectorXd phi = f.spatial_basis.col(0);
    Eigen::VectorXd w = f.singular_values(0) * f.dynamic_factors.row(0).transpose();
    if (w.mean() < 0.0) {
        phi = -phi;
        w = -w;
    }
    double log_sum = 0.0;
    for (Eigen::Index k = 0; k < w.size(); ++k) {
        if (!(w(k) > 0.0))
            throw ComputeError("rank-1 weight of frame " + std::to_string(k) + " is not positive");
        log_sum += std::log(w(k));
    }
    const double gmean = std::exp(log_sum / double(w.size()));
    Image ref(stack.nx(), stack.ny());
    for (Eigen::Index i = 0; i < phi.size(); ++i) ref[std::size_t(i)] = std::max(0.0, phi(i) * gmean);
    return ref;
}

/// Reference image of the given rank. Rank 1 is rank1_reference; higher
/// ranks take the pixelwise geometric mean of the rank-L frames, floored at
/// a small fraction of the stack maximum.
inline Image lowrank_reference(const ImageStack& stack, int rank) {
    if (rank == 1) return rank1_reference(stack);
    const ImageStack approx = reconstruct_rank(stack, rank);
    double vmax = 0.0;
    for (double v : approx.data()) vmax = std::max(vmax, v);
    const double floor = std::max(1e-6 * vmax, std::numeric_limits<double>::min());
    Image ref(stack.nx(), stack.ny());
    for (std::size_t i = 0; i < ref.size(); ++i) {
        double acc = 0.0;
        for (int k = 0; k < stack.frames(); ++k) acc += std::log(std::max(approx.frame_span(k)[i], floor));
        ref[i] = std::exp(acc / stack.frames());
    }
    return ref;
}

}  // namespace dtcmr
