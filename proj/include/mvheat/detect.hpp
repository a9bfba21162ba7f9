#pragma once

// Set-prediction detection: box overlap, bipartite matching, IoU-aware loss,
// top-K query selection, a small MLP head and a COCO-style evaluator.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "mvheat/events.hpp"
#include "mvheat/moe.hpp"
#include "mvheat/ops.hpp"

namespace mvheat {

// --------------------------------------------------------------------- boxes

struct BoxXYXY {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

    double area() const { return std::max(0.0, x2 - x1) * std::max(0.0, y2 - y1); }
    static BoxXYXY of(const Annotation& a) { return {a.x1, a.y1, a.x2, a.y2}; }
    static BoxXYXY from_cxcywh(double cx, double cy, double w, double h) {
        return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
    }
};

namespace detail {

inline void require_valid_box(const BoxXYXY& b, const char* op) {
    if (!(b.x1 < b.x2) || !(b.y1 < b.y2))
        throw ValidationError(std::string(op) + ": degenerate box (" + std::to_string(b.x1) + ", " +
                              std::to_string(b.y1) + ", " + std::to_string(b.x2) + ", " + std::to_string(b.y2) + ")");
}

inline double intersection(const BoxXYXY& a, const BoxXYXY& b) {
    const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    return iw > 0 && ih > 0 ? iw * ih : 0.0;
}

}  // namespace detail

inline double iou(const BoxXYXY& a, const BoxXYXY& b) {
    detail::require_valid_box(a, "iou");
    detail::require_valid_box(b, "iou");
    const double inter = detail::intersection(a, b);
    return inter / (a.area() + b.area() - inter);
}

inline double iou(const Annotation& a, const Annotation& b) { return iou(BoxXYXY::of(a), BoxXYXY::of(b)); }

/// IoU minus the fraction of the smallest enclosing box not covered by the union; in [-1, 1].
inline double giou(const BoxXYXY& a, const BoxXYXY& b) {
    detail::require_valid_box(a, "giou");
    detail::require_valid_box(b, "giou");
    const double inter = detail::intersection(a, b);
    const double uni = a.area() + b.area() - inter;
    const double enc = (std::max(a.x2, b.x2) - std::min(a.x1, b.x1)) * (std::max(a.y2, b.y2) - std::min(a.y1, b.y1));
    return inter / uni - (enc - uni) / enc;
}

// ------------------------------------------------------------------ matching

/// Minimum-cost assignment of min(P, G) pairs, returned as (row, col) sorted by row.
inline std::vector<std::pair<std::size_t, std::size_t>> hungarian_match(const std::vector<double>& cost,
                                                                        std::size_t rows, std::size_t cols) {
    if (cost.size() != rows * cols) throw DimensionError("hungarian_match: cost size does not match shape");
    for (std::size_t i = 0; i < cost.size(); ++i)
        if (!std::isfinite(cost[i]))
            throw ValidationError("hungarian_match: non-finite cost at (" + std::to_string(i / std::max<std::size_t>(cols, 1)) +
                                  ", " + std::to_string(i % std::max<std::size_t>(cols, 1)) + ")");
    if (rows == 0 || cols == 0) return {};
    // Shortest augmenting paths with potentials; needs n <= m, so work on the transpose when rows > cols.
    const bool transpose = rows > cols;
    const std::size_t n = transpose ? cols : rows, m = transpose ? rows : cols;
    auto a = [&](std::size_t i, std::size_t j) { return transpose ? cost[j * cols + i] : cost[i * cols + j]; };
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
    std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(m + 1, inf);
        std::vector<char> used(m + 1, 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = p[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= m; ++j)
                if (!used[j]) {
                    const double cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                    if (cur < minv[j]) {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if (minv[j] < delta) {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            for (std::size_t j = 0; j <= m; ++j)
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t j = 1; j <= m; ++j)
        if (p[j]) out.emplace_back(transpose ? j - 1 : p[j] - 1, transpose ? p[j] - 1 : j - 1);
    std::sort(out.begin(), out.end());
    return out;
}

// -------------------------------------------------------------------- losses

/// sum over elements of BCE(sigmoid(logit), target), fused for stability.
template <class T>
Tensor<T> bce_with_logits_sum(const Tensor<T>& logits, const std::vector<T>& targets) {
    if (targets.size() != logits.size()) throw DimensionError("bce_with_logits: target count does not match logits");
    T total = 0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const T x = logits[i];
        total += std::max(x, T(0)) - x * targets[i] + std::log1p(std::exp(-std::abs(x)));
    }
    return make_result<T>({1}, {total}, {logits}, "bce_with_logits", [targets](Node<T>& self) {
        if (T* g = detail::parent_grad(self, 0)) {
            const auto& x = self.parents[0]->value;
            for (std::size_t i = 0; i < x.size(); ++i)
                g[i] += self.grad[0] * (detail::sigmoid_scalar(x[i]) - targets[i]);
        }
    });
}

struct BoxLossWeights {
    double l1 = 5.0;
    double giou = 2.0;
    double cls_cost = 1.0;  ///< weight of the class term in the matching cost
};

namespace detail {

/// GIoU of box a (cx, cy, w, h) against fixed b and its gradient with respect to a.
inline double giou_with_grad(const double* a, const BoxXYXY& b, double* grad) {
    const double ax1 = a[0] - a[2] / 2, ax2 = a[0] + a[2] / 2, ay1 = a[1] - a[3] / 2, ay2 = a[1] + a[3] / 2;
    const double aw = ax2 - ax1, ah = ay2 - ay1;
    const double area_a = aw * ah, area_b = b.area();
    const double iw_raw = std::min(ax2, b.x2) - std::max(ax1, b.x1);
    const double ih_raw = std::min(ay2, b.y2) - std::max(ay1, b.y1);
    const bool overlap = iw_raw > 0 && ih_raw > 0;
    const double iw = overlap ? iw_raw : 0, ih = overlap ? ih_raw : 0;
    const double inter = iw * ih, uni = area_a + area_b - inter;
    const double cw = std::max(ax2, b.x2) - std::min(ax1, b.x1), ch = std::max(ay2, b.y2) - std::min(ay1, b.y1);
    const double enc = cw * ch;
    const double value = inter / uni - 1.0 + uni / enc;
    if (grad) {
        // derivatives with respect to (x1, y1, x2, y2) of a
        std::array<double, 4> d_inter{}, d_area{-ah, -aw, ah, aw}, d_enc{};
        if (overlap) {
            d_inter[0] = ax1 >= b.x1 ? -ih : 0.0;
            d_inter[2] = ax2 <= b.x2 ? ih : 0.0;
            d_inter[1] = ay1 >= b.y1 ? -iw : 0.0;
            d_inter[3] = ay2 <= b.y2 ? iw : 0.0;
        }
        d_enc[0] = ax1 <= b.x1 ? -ch : 0.0;
        d_enc[2] = ax2 >= b.x2 ? ch : 0.0;
        d_enc[1] = ay1 <= b.y1 ? -cw : 0.0;
        d_enc[3] = ay2 >= b.y2 ? cw : 0.0;
        std::array<double, 4> d{};
        for (int k = 0; k < 4; ++k) {
            const double d_uni = d_area[k] - d_inter[k];
            d[k] = (d_inter[k] * uni - inter * d_uni) / (uni * uni) + (d_uni * enc - uni * d_enc[k]) / (enc * enc);
        }
        grad[0] = d[0] + d[2];
        grad[1] = d[1] + d[3];
        grad[2] = (d[2] - d[0]) / 2;
        grad[3] = (d[3] - d[1]) / 2;
    }
    return value;
}

}  // namespace detail

/// sum over matched pairs of l1 * |b - b_gt|_1 + giou * (1 - GIoU(b, b_gt)); boxes are (cx, cy, w, h).
template <class T>
Tensor<T> matched_box_loss(const Tensor<T>& boxes, const std::vector<std::pair<std::size_t, std::size_t>>& pairs,
                           const std::vector<std::array<double, 4>>& gt, const BoxLossWeights& w) {
    if (boxes.rank() != 2 || boxes.dim(1) != 4) throw DimensionError("matched_box_loss: boxes must be [K, 4]");
    double total = 0;
    std::vector<T> grad(boxes.size(), T(0));
    for (const auto& [pi, gi] : pairs) {
        double a[4], g[4];
        for (int k = 0; k < 4; ++k) a[k] = double(boxes[pi * 4 + k]);
        const auto& b = gt[gi];
        for (int k = 0; k < 4; ++k) {
            total += w.l1 * std::abs(a[k] - b[k]);
            grad[pi * 4 + k] += T(w.l1 * (a[k] > b[k] ? 1.0 : a[k] < b[k] ? -1.0 : 0.0));
        }
        total += w.giou * (1.0 - detail::giou_with_grad(a, BoxXYXY::from_cxcywh(b[0], b[1], b[2], b[3]), g));
        for (int k = 0; k < 4; ++k) grad[pi * 4 + k] -= T(w.giou * g[k]);
    }
    return make_result<T>({1}, {T(total)}, {boxes}, "matched_box_loss", [grad = std::move(grad)](Node<T>& self) {
        if (T* g = detail::parent_grad(self, 0))
            for (std::size_t i = 0; i < grad.size(); ++i) g[i] += self.grad[0] * grad[i];
    });
}

/// Ground truth in normalized (cx, cy, w, h) with a class index.
struct TargetBox {
    std::array<double, 4> box{};
    int cls = 0;

    static TargetBox from(const Annotation& a, double width, double height) {
        return {{(a.x1 + a.x2) / (2 * width), (a.y1 + a.y2) / (2 * height), (a.x2 - a.x1) / width,
                 (a.y2 - a.y1) / height},
                a.cls};
    }
};

template <class T>
struct LossBreakdown {
    Tensor<T> total;
    double bbox = 0, cls = 0;
    std::vector<std::pair<std::size_t, std::size_t>> matches;
};

/// Non-differentiable half of the loss: the matching and the IoU class targets [K * C].
struct LossAssignment {
    std::vector<std::pair<std::size_t, std::size_t>> matches;
    std::vector<double> targets;
};

namespace detail {

template <class T>
void check_loss_inputs(const Tensor<T>& boxes, const Tensor<T>& logits, const std::vector<TargetBox>& gt) {
    if (boxes.rank() != 2 || boxes.dim(1) != 4 || logits.rank() != 2 || logits.dim(0) != boxes.dim(0))
        throw DimensionError("detection_loss: boxes " + shape_str(boxes.shape()) + " vs logits " +
                             shape_str(logits.shape()));
    for (const auto& t : gt)
        if (t.cls < 0 || std::size_t(t.cls) >= logits.dim(1))
            throw ValidationError("detection_loss: class index out of range");
}

}  // namespace detail

template <class T>
LossAssignment assign_targets(const Tensor<T>& boxes, const Tensor<T>& logits, const std::vector<TargetBox>& gt,
                              const BoxLossWeights& w = {}) {
    detail::check_loss_inputs(boxes, logits, gt);
    const std::size_t k = boxes.dim(0), c = logits.dim(1), g = gt.size();
    std::vector<double> cost(k * g);
    for (std::size_t i = 0; i < k; ++i) {
        double a[4];
        for (int q = 0; q < 4; ++q) a[q] = double(boxes[i * 4 + q]);
        for (std::size_t j = 0; j < g; ++j) {
            const auto& b = gt[j].box;
            double l1 = 0;
            for (int q = 0; q < 4; ++q) l1 += std::abs(a[q] - b[q]);
            const double gi = detail::giou_with_grad(a, BoxXYXY::from_cxcywh(b[0], b[1], b[2], b[3]), nullptr);
            const double p = detail::sigmoid_scalar(double(logits[i * c + gt[j].cls]));
            cost[i * g + j] = -w.cls_cost * p + w.l1 * l1 - w.giou * gi;
        }
    }
    LossAssignment out;
    out.matches = hungarian_match(cost, k, g);
    out.targets.assign(k * c, 0.0);
    for (const auto& [pi, gi] : out.matches) {
        const auto a = boxes.data().subspan(pi * 4, 4);
        const auto& b = gt[gi].box;
        const auto pa = BoxXYXY::from_cxcywh(a[0], a[1], a[2], a[3]);
        const auto pb = BoxXYXY::from_cxcywh(b[0], b[1], b[2], b[3]);
        out.targets[pi * c + gt[gi].cls] = pa.area() > 0 ? iou(pa, pb) : 0.0;
    }
    return out;
}

/// Differentiable half: box and class terms for a fixed assignment, both normalized by max(1, G).
template <class T>
LossBreakdown<T> detection_loss(const Tensor<T>& boxes, const Tensor<T>& logits, const std::vector<TargetBox>& gt,
                                const LossAssignment& assignment, const BoxLossWeights& w = {}) {
    detail::check_loss_inputs(boxes, logits, gt);
    if (assignment.targets.size() != logits.size()) throw DimensionError("detection_loss: assignment does not match logits");
    LossBreakdown<T> out;
    out.matches = assignment.matches;
    const T norm = T(1.0 / double(std::max<std::size_t>(gt.size(), 1)));
    const auto cls = scale(bce_with_logits_sum(logits, std::vector<T>(assignment.targets.begin(), assignment.targets.end())), norm);
    out.cls = double(cls[0]);
    if (gt.empty()) {
        out.total = cls;
        return out;
    }
    std::vector<std::array<double, 4>> gt_boxes;
    for (const auto& t : gt) gt_boxes.push_back(t.box);
    const auto bbox = scale(matched_box_loss(boxes, out.matches, gt_boxes, w), norm);
    out.bbox = double(bbox[0]);
    out.total = add(bbox, cls);
    return out;
}

/// IoU-aware set loss for one image. boxes [K, 4] in (0, 1) as (cx, cy, w, h); logits [K, C].
template <class T>
LossBreakdown<T> detection_loss(const Tensor<T>& boxes, const Tensor<T>& logits, const std::vector<TargetBox>& gt,
                                const BoxLossWeights& w = {}) {
    return detection_loss(boxes, logits, gt, assign_targets(boxes, logits, gt, w), w);
}

// ----------------------------------------------------------- query selection

/// Top-K token indices by max-over-classes score, ties to the lower index.
template <class T>
std::vector<std::size_t> iou_query_select(const Tensor<T>& scores, std::size_t k) {
    if (scores.rank() != 2) throw DimensionError("iou_query_select: scores must be [tokens, classes]");
    const std::size_t n = scores.dim(0), c = scores.dim(1);
    if (k > n)
        throw ConfigError("iou_query_select: K = " + std::to_string(k) + " exceeds " + std::to_string(n) + " tokens");
    std::vector<T> best(n, -std::numeric_limits<T>::infinity());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) best[i] = std::max(best[i], scores[i * c + j]);
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return best[a] > best[b]; });
    idx.resize(k);
    return idx;
}

// ---------------------------------------------------------------------- head

struct HeadConfig {
    std::size_t classes = 3;
    std::size_t hidden = 64;
    std::size_t queries = 30;            ///< K
    std::vector<std::size_t> levels{1, 2, 3};  ///< backbone stages (0-based) that contribute tokens
    double anchor_scale = 0.1;           ///< anchor side at the first stage; doubles per stage
    double class_prior = 0.01;           ///< initial foreground probability of the class logits
};

template <class T>
struct HeadOutput {
    Tensor<T> boxes;   ///< [K, 4] sigmoid (cx, cy, w, h)
    Tensor<T> logits;  ///< [K, C]
    std::vector<std::size_t> selected;  ///< token index of each query
};

/// Multi-level tokens -> per-token 3-layer MLP -> top-K by class score.
template <class T>
class DetectionHead {
public:
    DetectionHead() = default;
    DetectionHead(const HeadConfig& cfg, const BackboneConfig& backbone, std::mt19937_64& rng) : cfg_(cfg) {
        if (cfg.classes == 0 || cfg.hidden == 0 || cfg.queries == 0 || cfg.levels.empty())
            throw ConfigError("head: classes, hidden, queries and levels must be nonzero");
        std::size_t tokens = 0;
        for (std::size_t l : cfg.levels) {
            if (l > 3) throw ConfigError("head: level index must be 0..3");
            tokens += backbone.stage_height(l) * backbone.stage_width(l);
            const std::string name = "head.input" + std::to_string(l);
            inputs_.emplace_back(name, backbone.channels[l], cfg.hidden, rng);
            norms_.emplace_back(name + ".norm", cfg.hidden);
        }
        if (cfg.queries > tokens)
            throw ConfigError("head: K = " + std::to_string(cfg.queries) + " exceeds the " + std::to_string(tokens) +
                              " available tokens");
        fc1_ = LinearParams<T>("head.fc1", cfg.hidden, cfg.hidden, rng);
        fc2_ = LinearParams<T>("head.fc2", cfg.hidden, cfg.hidden, rng);
        out_ = LinearParams<T>("head.out", cfg.hidden, 4 + cfg.classes, rng, 0.01);
        const T prior = T(-std::log((1 - cfg.class_prior) / cfg.class_prior));
        for (std::size_t j = 0; j < cfg.classes; ++j) out_.bias.value()[4 + j] = prior;
        std::vector<T> refs;
        for (std::size_t l : cfg.levels) {
            const std::size_t h = backbone.stage_height(l), w = backbone.stage_width(l);
            const double side = std::min(0.95, cfg.anchor_scale * std::pow(2.0, double(l) - double(cfg.levels[0])));
            auto logit = [](double p) { return std::log(p / (1 - p)); };
            for (std::size_t i = 0; i < h; ++i)
                for (std::size_t j = 0; j < w; ++j)
                    for (double v : {(j + 0.5) / double(w), (i + 0.5) / double(h), side, side})
                        refs.push_back(T(logit(v)));
        }
        reference_ = Tensor<T>({tokens, 4}, std::move(refs));
    }

    /// Per-token MLP on [N, D] tokens; `reference` (logit space, [N, 4]) is added before the box sigmoid.
    std::pair<Tensor<T>, Tensor<T>> mlp(const Tensor<T>& tokens, const Tensor<T>* reference = nullptr) const {
        const auto raw = out_(gelu(fc2_(gelu(fc1_(tokens)))));
        auto box_logits = slice_cols(raw, 0, 4);
        if (reference) box_logits = add(box_logits, *reference);
        return {sigmoid(box_logits), slice_cols(raw, 4, 4 + cfg_.classes)};
    }

    /// One image's tokens from the backbone's stage outputs (batch index b).
    Tensor<T> tokens(const std::vector<Tensor<T>>& stages, std::size_t b) const {
        std::vector<Tensor<T>> parts;
        for (std::size_t i = 0; i < cfg_.levels.size(); ++i) {
            const auto& f = stages.at(cfg_.levels[i]);
            const std::size_t h = f.dim(1), w = f.dim(2), c = f.dim(3);
            const auto rows = reshape(f, {f.dim(0) * h * w, c});
            std::vector<std::size_t> pick(h * w);
            std::iota(pick.begin(), pick.end(), b * h * w);
            parts.push_back(norms_[i](inputs_[i](gather_rows(rows, pick))));
        }
        return parts.size() == 1 ? parts[0] : concat_rows(parts);
    }

    HeadOutput<T> forward(const std::vector<Tensor<T>>& stages, std::size_t b) const {
        const auto tok = tokens(stages, b);
        const auto [boxes, logits] = mlp(tok, &reference_);
        HeadOutput<T> out;
        out.selected = iou_query_select(logits, cfg_.queries);
        out.boxes = gather_rows(boxes, out.selected);
        out.logits = gather_rows(logits, out.selected);
        return out;
    }

    void visit(const ParamVisitor<T>& f) {
        for (std::size_t i = 0; i < inputs_.size(); ++i) {
            inputs_[i].visit(f);
            norms_[i].visit(f);
        }
        fc1_.visit(f);
        fc2_.visit(f);
        out_.visit(f);
    }

    const HeadConfig& config() const { return cfg_; }
    LinearParams<T>& fc1() { return fc1_; }
    LinearParams<T>& fc2() { return fc2_; }
    LinearParams<T>& out() { return out_; }

private:
    HeadConfig cfg_;
    std::vector<LinearParams<T>> inputs_;
    std::vector<LayerNormParams<T>> norms_;
    LinearParams<T> fc1_, fc2_, out_;
    Tensor<T> reference_;
};

// ---------------------------------------------------------------- evaluation

struct ScoredBox {
    BoxXYXY box;
    double score = 0;
    int cls = 0;
};

struct MapMetrics {
    double map_50_95 = 0, map_50 = 0, map_75 = 0, precision = 0, recall = 0;
    std::vector<double> per_class_50_95, per_class_50;  ///< NaN for classes without ground truth
    std::size_t images = 0, detections = 0, ground_truth = 0;

    nlohmann::json to_json() const {
        nlohmann::json pc = nlohmann::json::array();
        for (std::size_t c = 0; c < per_class_50_95.size(); ++c) {
            nlohmann::json e{{"class", c}};
            if (std::isnan(per_class_50_95[c])) {
                e["ap_50_95"] = nullptr;
                e["ap_50"] = nullptr;
            } else {
                e["ap_50_95"] = per_class_50_95[c];
                e["ap_50"] = per_class_50[c];
            }
            pc.push_back(e);
        }
        return {{"map_50_95", map_50_95}, {"map_50", map_50},     {"map_75", map_75},
                {"precision", precision}, {"recall", recall},     {"per_class", pc},
                {"images", images},       {"detections", detections}, {"ground_truth", ground_truth}};
    }
};

inline std::vector<double> coco_iou_thresholds() {
    std::vector<double> t;
    for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
    return t;
}

namespace detail {

/// 101-point interpolated AP of one class at one IoU threshold.
inline double average_precision(const std::vector<std::vector<ScoredBox>>& dets,
                                const std::vector<std::vector<Annotation>>& gts, int cls, double thr,
                                std::size_t* tp_out = nullptr, std::size_t* det_out = nullptr) {
    struct Entry {
        std::size_t image, index;
        const ScoredBox* d;
    };
    std::vector<Entry> order;
    std::size_t npos = 0;
    for (std::size_t im = 0; im < dets.size(); ++im) {
        for (std::size_t i = 0; i < dets[im].size(); ++i)
            if (dets[im][i].cls == cls) order.push_back({im, i, &dets[im][i]});
        for (const auto& g : gts[im]) npos += g.cls == cls;
    }
    // Descending score; equal scores fall back to image order then box geometry, never input position.
    std::sort(order.begin(), order.end(), [](const Entry& a, const Entry& b) {
        if (a.d->score != b.d->score) return a.d->score > b.d->score;
        if (a.image != b.image) return a.image < b.image;
        const auto& p = a.d->box;
        const auto& q = b.d->box;
        return std::tie(p.x1, p.y1, p.x2, p.y2) < std::tie(q.x1, q.y1, q.x2, q.y2);
    });
    std::vector<std::vector<char>> taken(gts.size());
    for (std::size_t im = 0; im < gts.size(); ++im) taken[im].assign(gts[im].size(), 0);
    std::vector<double> prec, rec;
    std::size_t tp = 0, fp = 0;
    for (const auto& e : order) {
        double best = -1;
        std::size_t best_j = 0;
        const auto& g = gts[e.image];
        for (std::size_t j = 0; j < g.size(); ++j) {
            if (g[j].cls != cls || taken[e.image][j]) continue;
            const double o = e.d->box.area() > 0 ? iou(e.d->box, BoxXYXY::of(g[j])) : 0.0;
            if (o > best) {
                best = o;
                best_j = j;
            }
        }
        if (best >= thr) {
            taken[e.image][best_j] = 1;
            ++tp;
        } else {
            ++fp;
        }
        prec.push_back(double(tp) / double(tp + fp));
        rec.push_back(npos ? double(tp) / double(npos) : 0.0);
    }
    if (tp_out) *tp_out = tp;
    if (det_out) *det_out = order.size();
    if (npos == 0) return std::numeric_limits<double>::quiet_NaN();
    for (std::size_t i = prec.size(); i-- > 1;) prec[i - 1] = std::max(prec[i - 1], prec[i]);
    double ap = 0;
    for (int r = 0; r <= 100; ++r) {
        const double level = r / 100.0;
        const auto it = std::lower_bound(rec.begin(), rec.end(), level - 1e-12);
        if (it != rec.end()) ap += prec[std::size_t(it - rec.begin())];
    }
    return ap / 101.0;
}

inline double nan_mean(const std::vector<double>& v) {
    double s = 0;
    std::size_t n = 0;
    for (double x : v)
        if (!std::isnan(x)) {
            s += x;
            ++n;
        }
    return n ? s / double(n) : 0.0;
}

}  // namespace detail

/// COCO-style evaluation. Precision and recall are reported at IoU 0.5 over
/// detections scoring at least `score_threshold`.
inline MapMetrics evaluate_map(const std::vector<std::vector<ScoredBox>>& dets,
                               const std::vector<std::vector<Annotation>>& gts, std::size_t classes,
                               const std::vector<double>& thresholds = coco_iou_thresholds(),
                               double score_threshold = 0.5) {
    if (dets.size() != gts.size()) throw DimensionError("evaluate_map: detection and ground-truth image counts differ");
    MapMetrics m;
    m.images = dets.size();
    for (const auto& d : dets) m.detections += d.size();
    for (const auto& g : gts) m.ground_truth += g.size();
    std::vector<double> per_thr(thresholds.size());
    m.per_class_50_95.assign(classes, std::numeric_limits<double>::quiet_NaN());
    m.per_class_50.assign(classes, std::numeric_limits<double>::quiet_NaN());
    std::vector<std::vector<double>> ap(thresholds.size(), std::vector<double>(classes));
    for (std::size_t t = 0; t < thresholds.size(); ++t)
        for (std::size_t c = 0; c < classes; ++c) ap[t][c] = detail::average_precision(dets, gts, int(c), thresholds[t]);
    for (std::size_t c = 0; c < classes; ++c) {
        std::vector<double> col;
        for (std::size_t t = 0; t < thresholds.size(); ++t) col.push_back(ap[t][c]);
        if (!std::isnan(col[0])) m.per_class_50_95[c] = detail::nan_mean(col);
        for (std::size_t t = 0; t < thresholds.size(); ++t)
            if (std::abs(thresholds[t] - 0.5) < 1e-9) m.per_class_50[c] = ap[t][c];
    }
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
        const double v = detail::nan_mean(ap[t]);
        per_thr[t] = v;
        if (std::abs(thresholds[t] - 0.5) < 1e-9) m.map_50 = v;
        if (std::abs(thresholds[t] - 0.75) < 1e-9) m.map_75 = v;
    }
    m.map_50_95 = detail::nan_mean(per_thr);

    std::vector<std::vector<ScoredBox>> kept(dets.size());
    for (std::size_t im = 0; im < dets.size(); ++im)
        for (const auto& d : dets[im])
            if (d.score >= score_threshold) kept[im].push_back(d);
    std::size_t tp = 0, nd = 0;
    for (std::size_t c = 0; c < classes; ++c) {
        std::size_t tpc = 0, ndc = 0;
        detail::average_precision(kept, gts, int(c), 0.5, &tpc, &ndc);
        tp += tpc;
        nd += ndc;
    }
    m.precision = nd ? double(tp) / double(nd) : 0.0;
    m.recall = m.ground_truth ? double(tp) / double(m.ground_truth) : 0.0;
    return m;
}

}  // namespace mvheat
