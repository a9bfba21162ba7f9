#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "mvheat/detect.hpp"
#include "mvheat/gradcheck.hpp"

using namespace mvheat;
using T64 = Tensor<double>;

namespace {

T64 leaf(const Shape& s, std::vector<double> v) { return T64(s, std::move(v), true); }

double brute_force_cost(const std::vector<double>& c, std::size_t rows, std::size_t cols) {
    // enumerate injections of the smaller side into the larger
    const bool t = rows > cols;
    const std::size_t n = t ? cols : rows, m = t ? rows : cols;
    std::vector<std::size_t> perm(m);
    std::iota(perm.begin(), perm.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    do {
        double s = 0;
        for (std::size_t i = 0; i < n; ++i) s += t ? c[perm[i] * cols + i] : c[i * cols + perm[i]];
        best = std::min(best, s);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
}

BackboneConfig toy_backbone() {
    BackboneConfig cfg;
    cfg.input_height = cfg.input_width = 64;
    cfg.depths = {1, 1, 1, 1};
    cfg.channels = {8, 8, 8, 8};
    cfg.mlp_ratio = 2;
    return cfg;
}

}  // namespace

// --------------------------------------------------------------------- boxes

TEST(Iou, GoldenOverlap) {
    EXPECT_NEAR(iou(BoxXYXY{0, 0, 2, 2}, BoxXYXY{1, 1, 3, 3}), 1.0 / 7.0, 1e-15);
    EXPECT_DOUBLE_EQ(iou(BoxXYXY{0, 0, 1, 1}, BoxXYXY{0, 0, 1, 1}), 1.0);
    EXPECT_DOUBLE_EQ(iou(BoxXYXY{0, 0, 1, 1}, BoxXYXY{2, 2, 3, 3}), 0.0);
}

TEST(Iou, SymmetricAndBounded) {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0, 10);
    for (int i = 0; i < 200; ++i) {
        BoxXYXY a{u(rng), u(rng), 0, 0}, b{u(rng), u(rng), 0, 0};
        a.x2 = a.x1 + 0.1 + u(rng);
        a.y2 = a.y1 + 0.1 + u(rng);
        b.x2 = b.x1 + 0.1 + u(rng);
        b.y2 = b.y1 + 0.1 + u(rng);
        const double o = iou(a, b);
        EXPECT_DOUBLE_EQ(o, iou(b, a));
        EXPECT_GE(o, 0.0);
        EXPECT_LE(o, 1.0);
        const double g = giou(a, b);
        EXPECT_LE(g, o + 1e-15);
        EXPECT_GE(g, -1.0);
    }
}

TEST(Iou, DegenerateBoxRejected) {
    EXPECT_THROW(iou(BoxXYXY{0, 0, 0, 1}, BoxXYXY{0, 0, 1, 1}), ValidationError);
    EXPECT_THROW(giou(BoxXYXY{0, 0, 1, 1}, BoxXYXY{2, 2, 1, 3}), ValidationError);
}

TEST(Giou, DisjointBoxesArePenalized) {
    EXPECT_NEAR(giou(BoxXYXY{0, 0, 1, 1}, BoxXYXY{2, 0, 3, 1}), -1.0 / 3.0, 1e-15);
    EXPECT_NEAR(giou(BoxXYXY{0, 0, 2, 2}, BoxXYXY{1, 1, 3, 3}), 1.0 / 7.0 - (9.0 - 7.0) / 9.0, 1e-15);
}

// ------------------------------------------------------------------ matching

TEST(Hungarian, MatchesBruteForce) {
    std::mt19937_64 rng(2);
    std::uniform_int_distribution<std::size_t> dim(1, 5);
    std::uniform_real_distribution<double> u(-3, 3);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t r = dim(rng), c = dim(rng);
        std::vector<double> cost(r * c);
        for (auto& v : cost) v = u(rng);
        const auto m = hungarian_match(cost, r, c);
        ASSERT_EQ(m.size(), std::min(r, c));
        std::vector<char> row_used(r, 0), col_used(c, 0);
        double total = 0;
        for (const auto& [i, j] : m) {
            ASSERT_FALSE(row_used[i]++);
            ASSERT_FALSE(col_used[j]++);
            total += cost[i * c + j];
        }
        EXPECT_NEAR(total, brute_force_cost(cost, r, c), 1e-12) << r << "x" << c;
    }
}

TEST(Hungarian, EmptyAndNonFinite) {
    EXPECT_TRUE(hungarian_match({}, 0, 3).empty());
    EXPECT_TRUE(hungarian_match({}, 4, 0).empty());
    EXPECT_THROW(hungarian_match({0, std::nan(""), 1, 2}, 2, 2), ValidationError);
    EXPECT_THROW(hungarian_match({0, 1, 2}, 2, 2), DimensionError);
}

// -------------------------------------------------------------------- losses

TEST(Loss, BceAtHalfIsLn2PerElement) {
    // one prediction with IoU 1/7 against its ground truth, class logits 0
    const auto a = BoxXYXY{0, 0, 0.2, 0.2}, b = BoxXYXY{0.1, 0.1, 0.3, 0.3};
    const auto boxes = leaf({1, 4}, {0.1, 0.1, 0.2, 0.2});
    const auto logits = leaf({1, 3}, {0, 0, 0});
    ASSERT_NEAR(iou(a, b), 1.0 / 7.0, 1e-12);
    const auto out = detection_loss(boxes, logits, {TargetBox{{0.2, 0.2, 0.2, 0.2}, 1}});
    EXPECT_NEAR(out.cls, 3 * std::log(2.0), 1e-12);
    ASSERT_EQ(out.matches.size(), 1u);
    const double expected_bbox = 5 * 0.2 + 2 * (1 - giou(a, b));
    EXPECT_NEAR(out.bbox, expected_bbox, 1e-12);
    EXPECT_NEAR(out.total[0], out.bbox + out.cls, 1e-12);
}

TEST(Loss, PerfectPredictionHasZeroBoxTerm) {
    const auto boxes = leaf({2, 4}, {0.5, 0.5, 0.2, 0.3, 0.1, 0.1, 0.1, 0.1});
    const auto logits = leaf({2, 2}, {-50, 50, -50, -50});
    const auto out = detection_loss(boxes, logits, {TargetBox{{0.5, 0.5, 0.2, 0.3}, 1}});
    EXPECT_NEAR(out.bbox, 0.0, 1e-12);
    EXPECT_LT(out.cls, 1e-12);
    EXPECT_EQ(out.matches[0], (std::pair<std::size_t, std::size_t>{0, 0}));
}

TEST(Loss, NoGroundTruthWithZeroScores) {
    const auto boxes = leaf({3, 4}, {0.5, 0.5, 0.1, 0.1, 0.2, 0.2, 0.1, 0.1, 0.7, 0.7, 0.1, 0.1});
    const auto logits = leaf({3, 2}, std::vector<double>(6, -60.0));
    const auto out = detection_loss(boxes, logits, {});
    EXPECT_LT(out.total[0], 1e-20);
    EXPECT_EQ(out.bbox, 0.0);
}

TEST(Loss, RejectsBadClassAndShapes) {
    const auto boxes = leaf({1, 4}, {0.5, 0.5, 0.1, 0.1});
    EXPECT_THROW(detection_loss(boxes, leaf({1, 2}, {0, 0}), {TargetBox{{0.5, 0.5, 0.1, 0.1}, 2}}), ValidationError);
    EXPECT_THROW(detection_loss(boxes, leaf({2, 2}, {0, 0, 0, 0}), {}), DimensionError);
}

TEST(Loss, MatchingPrefersTheCloserQuery) {
    const auto boxes = leaf({2, 4}, {0.2, 0.2, 0.1, 0.1, 0.8, 0.8, 0.1, 0.1});
    const auto logits = leaf({2, 1}, {0, 0});
    const auto out = detection_loss(boxes, logits,
                                    {TargetBox{{0.79, 0.8, 0.1, 0.1}, 0}, TargetBox{{0.21, 0.2, 0.1, 0.1}, 0}});
    ASSERT_EQ(out.matches.size(), 2u);
    EXPECT_EQ(out.matches[0].second, 1u);
    EXPECT_EQ(out.matches[1].second, 0u);
}

TEST(Loss, BceGradCheck) {
    const auto logits = leaf({2, 3}, {-2.0, 0.3, 1.5, 0.0, -0.7, 4.0});
    const std::vector<double> targets{0, 0.4, 1, 0.2, 0, 0.9};
    const auto rep = grad_check("bce_with_logits", [&] { return bce_with_logits_sum(logits, targets); }, {logits});
    EXPECT_TRUE(rep.passed()) << rep.max_rel_error;
}

TEST(Loss, BoxLossGradCheck) {
    // overlapping, disjoint and nested pairs; no coordinate ties
    const auto boxes = leaf({3, 4}, {0.31, 0.42, 0.23, 0.17, 0.12, 0.81, 0.09, 0.11, 0.55, 0.52, 0.41, 0.37});
    const std::vector<std::array<double, 4>> gt{{0.35, 0.4, 0.2, 0.25}, {0.6, 0.3, 0.1, 0.1}, {0.53, 0.51, 0.2, 0.19}};
    const std::vector<std::pair<std::size_t, std::size_t>> pairs{{0, 0}, {1, 1}, {2, 2}};
    const auto rep =
        grad_check("matched_box_loss", [&] { return matched_box_loss(boxes, pairs, gt, BoxLossWeights{}); }, {boxes});
    EXPECT_TRUE(rep.passed()) << rep.max_rel_error;
}

TEST(Loss, HeadAndLossGradCheck) {
    std::mt19937_64 rng(3);
    HeadConfig hc;
    hc.classes = 2;
    hc.hidden = 6;
    hc.queries = 2;
    hc.levels = {3};
    BackboneConfig bc = toy_backbone();
    DetectionHead<double> head(hc, bc, rng);
    std::vector<T64> leaves;
    head.visit([&](Parameter<double>& p) {
        if (p.name().rfind("head.input", 0) != 0) leaves.push_back(p.tensor());
    });
    std::normal_distribution<double> n(0, 1);
    std::vector<double> tv(2 * 6);
    for (auto& v : tv) v = n(rng);
    const auto tokens = leaf({2, 6}, tv);
    leaves.push_back(tokens);
    const std::vector<TargetBox> gt{{{0.4, 0.45, 0.3, 0.2}, 1}};
    const auto [b0, l0] = head.mlp(tokens);
    const auto assignment = assign_targets(b0, l0, gt);  // held fixed: the IoU target is detached
    auto forward = [&] {
        const auto [boxes, logits] = head.mlp(tokens);
        return detection_loss(boxes, logits, gt, assignment).total;
    };
    const auto rep = grad_check("head+loss", forward, leaves);
    EXPECT_TRUE(rep.passed()) << rep.max_rel_error << " " << rep.message;
}

// ----------------------------------------------------------- query selection

TEST(QuerySelect, TopKByMaxClassScore) {
    const T64 s({3, 1}, {0.9, 0.1, 0.5});
    EXPECT_EQ(iou_query_select(s, 2), (std::vector<std::size_t>{0, 2}));
    const T64 uniform({3, 2}, std::vector<double>(6, 0.3));
    EXPECT_EQ(iou_query_select(uniform, 3), (std::vector<std::size_t>{0, 1, 2}));
    const T64 multi({3, 2}, {0.1, 0.2, 0.7, 0.0, 0.3, 0.9});
    EXPECT_EQ(iou_query_select(multi, 1), (std::vector<std::size_t>{2}));
    EXPECT_THROW(iou_query_select(s, 4), ConfigError);
}

// ---------------------------------------------------------------------- head

TEST(Head, ZeroWeightsGiveHalf) {
    std::mt19937_64 rng(4);
    HeadConfig hc;
    hc.levels = {3};
    hc.queries = 4;
    DetectionHead<double> head(hc, toy_backbone(), rng);
    head.visit([](Parameter<double>& p) { std::fill(p.value().begin(), p.value().end(), 0.0); });
    const auto [boxes, logits] = head.mlp(T64({5, hc.hidden}, std::vector<double>(5 * hc.hidden, 1.3)));
    for (std::size_t i = 0; i < boxes.size(); ++i) EXPECT_DOUBLE_EQ(boxes[i], 0.5);
    for (std::size_t i = 0; i < logits.size(); ++i) EXPECT_DOUBLE_EQ(detail::sigmoid_scalar(logits[i]), 0.5);
}

TEST(Head, MultiLevelTokensAndSelection) {
    std::mt19937_64 rng(5);
    const auto bc = toy_backbone();
    HeadConfig hc;  // stages 1..3 give 8x8 + 4x4 + 2x2 = 84 tokens
    DetectionHead<double> head(hc, bc, rng);
    std::vector<T64> stages;
    for (std::size_t s = 0; s < 4; ++s) {
        const std::size_t h = bc.stage_height(s);
        std::vector<double> v(2 * h * h * 8);
        std::normal_distribution<double> n(0, 1);
        for (auto& x : v) x = n(rng);
        stages.emplace_back(Shape{2, h, h, 8}, v);
    }
    EXPECT_EQ(head.tokens(stages, 1).shape(), (Shape{84, hc.hidden}));
    const auto out = head.forward(stages, 0);
    EXPECT_EQ(out.boxes.shape(), (Shape{30, 4}));
    EXPECT_EQ(out.logits.shape(), (Shape{30, 3}));
    EXPECT_EQ(out.selected.size(), 30u);
    for (std::size_t i = 0; i < out.boxes.size(); ++i) {
        EXPECT_GT(out.boxes[i], 0.0);
        EXPECT_LT(out.boxes[i], 1.0);
    }
    hc.queries = 85;
    EXPECT_THROW(DetectionHead<double>(hc, bc, rng), ConfigError);
}

// ---------------------------------------------------------------- evaluation

TEST(Map, PerfectDetectionScoresOne) {
    const auto m = evaluate_map({{ScoredBox{{1, 1, 5, 5}, 0.9, 0}}}, {{Annotation{1, 1, 5, 5, 0}}}, 1);
    EXPECT_DOUBLE_EQ(m.map_50_95, 1.0);
    EXPECT_DOUBLE_EQ(m.map_50, 1.0);
    EXPECT_DOUBLE_EQ(m.map_75, 1.0);
    EXPECT_DOUBLE_EQ(m.precision, 1.0);
    EXPECT_DOUBLE_EQ(m.recall, 1.0);
}

TEST(Map, NoDetectionsScoresZero) {
    const auto m = evaluate_map({{}}, {{Annotation{1, 1, 5, 5, 0}}}, 1);
    EXPECT_EQ(m.map_50_95, 0.0);
    EXPECT_EQ(m.recall, 0.0);
    EXPECT_EQ(m.precision, 0.0);
}

TEST(Map, HandComputedPrecisionRecall) {
    // IoUs 0.6 / 0.3 / 0.55 in score order 0.9 / 0.8 / 0.7: TP, FP, TP over 2 ground truths
    const std::vector<Annotation> gt{{0, 0, 10, 10, 0}, {20, 20, 30, 30, 0}};
    const std::vector<ScoredBox> det{{{0, 0, 10, 6}, 0.9, 0}, {{0, 0, 10, 3}, 0.8, 0}, {{20, 20, 30, 25.5}, 0.7, 0}};
    ASSERT_NEAR(iou(det[2].box, BoxXYXY::of(gt[1])), 0.55, 1e-12);
    const auto m = evaluate_map({det}, {gt}, 1, {0.5});
    EXPECT_NEAR(m.map_50, (51.0 + 50.0 * 2.0 / 3.0) / 101.0, 1e-12);
    EXPECT_NEAR(m.recall, 1.0, 1e-12);
    EXPECT_NEAR(m.precision, 2.0 / 3.0, 1e-12);
}

TEST(Map, InvariantToOrderOfEqualScores) {
    const std::vector<Annotation> gt{{0, 0, 10, 10, 0}, {20, 20, 30, 30, 1}};
    std::vector<ScoredBox> det{{{0, 0, 10, 8}, 0.7, 0}, {{1, 0, 10, 10}, 0.7, 0}, {{20, 20, 29, 30}, 0.7, 1},
                               {{0, 0, 9, 10}, 0.5, 0}, {{22, 20, 30, 30}, 0.7, 1}};
    const auto ref = evaluate_map({det}, {gt}, 2);
    std::mt19937_64 rng(6);
    for (int i = 0; i < 20; ++i) {
        std::shuffle(det.begin(), det.end(), rng);
        const auto m = evaluate_map({det}, {gt}, 2);
        EXPECT_EQ(m.map_50_95, ref.map_50_95);
        EXPECT_EQ(m.map_75, ref.map_75);
    }
}

TEST(Map, ClassesWithoutGroundTruthAreExcluded) {
    const auto m = evaluate_map({{ScoredBox{{1, 1, 5, 5}, 0.9, 0}}}, {{Annotation{1, 1, 5, 5, 0}}}, 3);
    EXPECT_DOUBLE_EQ(m.map_50, 1.0);
    EXPECT_TRUE(std::isnan(m.per_class_50_95[2]));
    const auto j = m.to_json();
    for (const char* key : {"map_50_95", "map_50", "map_75", "precision", "recall", "per_class"})
        EXPECT_TRUE(j.contains(key)) << key;
    EXPECT_TRUE(j["per_class"][2]["ap_50_95"].is_null());
}

TEST(Map, ImageCountMismatch) { EXPECT_THROW(evaluate_map({{}, {}}, {{}}, 1), DimensionError); }
