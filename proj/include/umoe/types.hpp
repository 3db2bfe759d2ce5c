#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace umoe {

using Vec = std::vector<double>;

// Row-major dense matrix of doubles. All model math runs in 64-bit;
// checkpoints round to f32 on disk.
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0) {}

    double& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    double at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

    std::span<double> row(int r) { return {data.data() + static_cast<size_t>(r) * cols, static_cast<size_t>(cols)}; }
    std::span<const double> row(int r) const {
        return {data.data() + static_cast<size_t>(r) * cols, static_cast<size_t>(cols)};
    }

    size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }
    void zero() { std::fill(data.begin(), data.end(), 0.0); }
};

// Error with a stable machine-readable code ("KTooLarge", "BadMagic", ...).
// The CLI maps these to JSON on stderr; tests match on code().
class Error : public std::runtime_error {
  public:
    Error(std::string code, const std::string& message)
        : std::runtime_error(code + ": " + message), code_(std::move(code)) {}
    const std::string& code() const { return code_; }

  private:
    std::string code_;
};

[[noreturn]] inline void fail(const std::string& code, const std::string& message) {
    throw Error(code, message);
}

// y += x * M, x: [rows], M: [rows x cols], y: [cols]
void vecmat_acc(std::span<const double> x, const Mat& m, std::span<double> y);
// y = x * M
Vec vecmat(std::span<const double> x, const Mat& m);
// y += x * M^T, x: [cols], y: [rows]
void vecmat_t_acc(std::span<const double> x, const Mat& m, std::span<double> y);
// M += outer(u, v), u: [rows], v: [cols]
void outer_acc(std::span<const double> u, std::span<const double> v, Mat& m);

double dot(std::span<const double> a, std::span<const double> b);
void axpy(double a, std::span<const double> x, std::span<double> y);  // y += a*x

bool all_finite(std::span<const double> x);

// Numerically safe softmax (max subtraction), in place over the first n entries.
void softmax_inplace(std::span<double> x);

}  // namespace umoe
