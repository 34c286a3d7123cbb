#pragma once

#include "cvos/autodiff.hpp"

namespace cvos {

struct LossConfig {
    double gamma = 1.0;       // IoU term weight
    double eps_clamp = 1e-6;  // predictions clamped to [eps, 1 - eps] inside the logs
    double eps_iou = 1e-6;    // added to both IoU sums

    void validate() const;
};

// (sum min(pred, gt) + eps) / (sum max(pred, gt) + eps)
template <typename T>
Var<T> soft_iou(Var<T> pred, Var<T> gt, T eps_iou);

// Binary cross-entropy (mean over pixels) minus gamma * soft IoU. A rank-3
// [N,H,W] input is treated as N objects and the per-object losses averaged.
template <typename T>
Var<T> seg_loss(Var<T> pred, Var<T> gt, const LossConfig& cfg);

// seg_loss(pred_t, gt_t) + seg_loss(pred_1, gt_1)
template <typename T>
Var<T> cycle_loss(Var<T> pred_t, Var<T> gt_t, Var<T> pred_1, Var<T> gt_1, const LossConfig& cfg);

}  // namespace cvos
