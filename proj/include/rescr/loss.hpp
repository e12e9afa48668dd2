#pragma once

#include <vector>

#include "rescr/autodiff.hpp"

namespace rescr {

struct LossConfig {
    double smooth = 1.0;                // s
    std::vector<double> class_weights;  // empty: all ones
    bool contour_weighting = false;
    double contour_sigma = 5.0;  // pixels
    double contour_w0 = 10.0;

    void validate(std::size_t num_classes) const;
};

// Soft overlap scores. The last axis indexes classes; for rank-4 inputs the
// first axis is the batch. A rank-1 input is one class of one item. Each
// score is computed per (item, class) over pixels and averaged unweighted.
// `weights`, when given, holds one factor per pixel (shape minus class axis).
template <typename T>
double dice_coefficient(const Tensor<T>& yhat, const Tensor<T>& y, double smooth,
                        const Tensor<T>* weights = nullptr);

template <typename T>
double tanimoto(const Tensor<T>& yhat, const Tensor<T>& y, double smooth, const Tensor<T>* weights = nullptr);

// Mean of the Tanimoto coefficient on (yhat, y) and on (1-yhat, 1-y).
template <typename T>
double tanimoto_with_complement(const Tensor<T>& yhat, const Tensor<T>& y, double smooth,
                                const Tensor<T>* weights = nullptr);

// 1 - complement Tanimoto, with each pixel term weighted by
// weight_map[pixel] * class_weights[class]. Differentiable in yhat.
template <typename T>
Var<T> tanimoto_loss(const Var<T>& yhat, const Tensor<T>& y, const LossConfig& cfg,
                     const Tensor<T>* weight_map = nullptr);

// Per-pixel class-balance weights N / (K * count(class of pixel)) for a
// one-hot mask; shape is the mask shape without the class axis.
template <typename T>
Tensor<T> class_balance_weights(const Tensor<T>& onehot);

// Class-balance weights plus, when cfg.contour_weighting is on, a border term
// w0 * exp(-(d1 + d2)^2 / (2 sigma^2)) where d1 and d2 are Euclidean
// distances to the nearest and second-nearest connected component of a class
// the pixel does not belong to (max over classes with >= 2 components).
// Accepts [H,W,K] or [B,H,W,K].
template <typename T>
Tensor<T> contour_weight_map(const Tensor<T>& onehot, const LossConfig& cfg);

}  // namespace rescr
