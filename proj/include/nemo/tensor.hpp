#pragma once

#include <Eigen/Dense>

#include <string>

#include "nemo/errors.hpp"

namespace nemo {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Image-shaped tensor stored channel-major: data(c, y * width + x).
struct LatentImage {
    int channels = 0;
    int height = 0;
    int width = 0;
    Matrix data;

    LatentImage() = default;
    LatentImage(int c, int h, int w) : channels(c), height(h), width(w), data(Matrix::Zero(c, h * w)) {}
    LatentImage(int c, int h, int w, Matrix values) : channels(c), height(h), width(w), data(std::move(values)) {
        if (data.rows() != c || data.cols() != h * w) throw ShapeError("LatentImage: data does not match shape");
    }

    static LatentImage constant(int c, int h, int w, double value) {
        return LatentImage(c, h, w, Matrix::Constant(c, h * w, value));
    }

    int pixels() const { return height * width; }
    Eigen::Index size() const { return data.size(); }
    bool same_shape(const LatentImage& other) const {
        return channels == other.channels && height == other.height && width == other.width;
    }
    double& at(int c, int y, int x) { return data(c, y * width + x); }
    double at(int c, int y, int x) const { return data(c, y * width + x); }

    bool operator==(const LatentImage& other) const { return same_shape(other) && data == other.data; }
};

inline void require_same_shape(const LatentImage& a, const LatentImage& b, const char* where) {
    if (!a.same_shape(b)) throw ShapeError(std::string(where) + ": shape mismatch");
}

}  // namespace nemo
