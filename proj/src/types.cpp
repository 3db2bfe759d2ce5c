#include "umoe/types.hpp"

#include <algorithm>
#include <cmath>

namespace umoe {

void vecmat_acc(std::span<const double> x, const Mat& m, std::span<double> y) {
    for (int r = 0; r < m.rows; ++r) {
        const double xr = x[r];
        if (xr == 0.0) continue;
        const double* mr = m.data.data() + static_cast<size_t>(r) * m.cols;
        for (int c = 0; c < m.cols; ++c) y[c] += xr * mr[c];
    }
}

Vec vecmat(std::span<const double> x, const Mat& m) {
    Vec y(m.cols, 0.0);
    vecmat_acc(x, m, y);
    return y;
}

void vecmat_t_acc(std::span<const double> x, const Mat& m, std::span<double> y) {
    for (int r = 0; r < m.rows; ++r) {
        const double* mr = m.data.data() + static_cast<size_t>(r) * m.cols;
        double acc = 0.0;
        for (int c = 0; c < m.cols; ++c) acc += x[c] * mr[c];
        y[r] += acc;
    }
}

void outer_acc(std::span<const double> u, std::span<const double> v, Mat& m) {
    for (int r = 0; r < m.rows; ++r) {
        const double ur = u[r];
        if (ur == 0.0) continue;
        double* mr = m.data.data() + static_cast<size_t>(r) * m.cols;
        for (int c = 0; c < m.cols; ++c) mr[c] += ur * v[c];
    }
}

double dot(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

void axpy(double a, std::span<const double> x, std::span<double> y) {
    for (size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

bool all_finite(std::span<const double> x) {
    return std::all_of(x.begin(), x.end(), [](double v) { return std::isfinite(v); });
}

void softmax_inplace(std::span<double> x) {
    if (x.empty()) return;
    double mx = *std::max_element(x.begin(), x.end());
    double sum = 0.0;
    for (double& v : x) {
        v = std::exp(v - mx);
        sum += v;
    }
    for (double& v : x) v /= sum;
}

}  // namespace umoe
