#include "cvos/losses.hpp"

#include <stdexcept>

namespace cvos {

void LossConfig::validate() const {
    if (!(gamma >= 0.0)) throw std::invalid_argument("LossConfig: gamma must be >= 0");
    if (!(eps_clamp > 0.0) || !(eps_iou > 0.0)) throw std::invalid_argument("LossConfig: epsilons must be > 0");
    if (!(eps_clamp < 0.5)) throw std::invalid_argument("LossConfig: eps_clamp must be < 0.5");
}

namespace {

template <typename T>
void require_match(const char* op, const Var<T>& pred, const Var<T>& gt) {
    if (pred.shape() != gt.shape()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + to_string(pred.shape()) + " vs " +
                                    to_string(gt.shape()));
    }
}

template <typename T>
Var<T> single_object_loss(Var<T> pred, Var<T> gt, const LossConfig& cfg) {
    const T eps = static_cast<T>(cfg.eps_clamp);
    auto p = ad::clamp(pred, eps, T{1} - eps);
    // gt*log(p) + (1-gt)*log(1-p)
    auto ll = gt * ad::log(p) + (T{1} - gt) * ad::log(T{1} - p);
    auto ce = ad::mul_scalar(ad::mean(ll), T{-1});
    if (cfg.gamma == 0.0) return ce;
    auto iou = soft_iou(pred, gt, static_cast<T>(cfg.eps_iou));
    return ad::sub(ce, ad::mul_scalar(iou, static_cast<T>(cfg.gamma)));
}

}  // namespace

template <typename T>
Var<T> soft_iou(Var<T> pred, Var<T> gt, T eps_iou) {
    require_match("soft_iou", pred, gt);
    auto inter = ad::add_scalar(ad::sum(ad::minimum(pred, gt)), eps_iou);
    auto uni = ad::add_scalar(ad::sum(ad::maximum(pred, gt)), eps_iou);
    return inter / uni;
}

template <typename T>
Var<T> seg_loss(Var<T> pred, Var<T> gt, const LossConfig& cfg) {
    cfg.validate();
    require_match("seg_loss", pred, gt);
    if (pred.shape().size() != 3) return single_object_loss(pred, gt, cfg);
    const std::size_t n = pred.shape()[0];
    if (n == 0) throw std::invalid_argument("seg_loss: no objects");
    if (n == 1) return single_object_loss(ad::select(pred, 0), ad::select(gt, 0), cfg);
    Var<T> total = single_object_loss(ad::select(pred, 0), ad::select(gt, 0), cfg);
    for (std::size_t i = 1; i < n; ++i) total = total + single_object_loss(ad::select(pred, i), ad::select(gt, i), cfg);
    return ad::mul_scalar(total, T{1} / static_cast<T>(n));
}

template <typename T>
Var<T> cycle_loss(Var<T> pred_t, Var<T> gt_t, Var<T> pred_1, Var<T> gt_1, const LossConfig& cfg) {
    return seg_loss(pred_t, gt_t, cfg) + seg_loss(pred_1, gt_1, cfg);
}

#define CVOS_INSTANTIATE_LOSSES(T)                                                       \
    template Var<T> soft_iou<T>(Var<T>, Var<T>, T);                                      \
    template Var<T> seg_loss<T>(Var<T>, Var<T>, const LossConfig&);                      \
    template Var<T> cycle_loss<T>(Var<T>, Var<T>, Var<T>, Var<T>, const LossConfig&);

CVOS_INSTANTIATE_LOSSES(float)
CVOS_INSTANTIATE_LOSSES(double)

#undef CVOS_INSTANTIATE_LOSSES

}  // namespace cvos
