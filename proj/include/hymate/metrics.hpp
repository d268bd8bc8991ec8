// Exact ranking metrics with tie handling.
#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

#include "hymate/common.hpp"

namespace hymate {

// AUROC as the Mann-Whitney statistic P(score+ > score-) + 0.5 P(tie),
// computed exactly via average ranks. Requires both classes present.
inline double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
    require(scores.size() == labels.size(), "auroc: size mismatch");
    std::size_t npos = 0, nneg = 0;
    for (int y : labels) (y ? npos : nneg)++;
    require(npos > 0 && nneg > 0, "auroc: needs both classes");

    std::vector<std::size_t> order(scores.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // Average ranks over tie groups; rank sum of positives gives the U statistic.
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // 1-based
        for (std::size_t k = i; k < j; ++k)
            if (labels[order[k]]) rank_sum_pos += avg_rank;
        i = j;
    }
    const double np = static_cast<double>(npos), nn = static_cast<double>(nneg);
    return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

// Average precision: sum over descending distinct thresholds of
// (recall step) * (precision at that threshold). Equal scores form one group.
inline double auprc(const std::vector<double>& scores, const std::vector<int>& labels) {
    require(scores.size() == labels.size(), "auprc: size mismatch");
    std::size_t npos = 0;
    for (int y : labels) npos += (y != 0);
    require(npos > 0, "auprc: no positive labels");

    std::vector<std::size_t> order(scores.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    double ap = 0.0;
    double tp = 0.0, fp = 0.0, prev_recall = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        for (std::size_t k = i; k < j; ++k) {
            if (labels[order[k]])
                tp += 1.0;
            else
                fp += 1.0;
        }
        const double recall = tp / static_cast<double>(npos);
        const double precision = tp / (tp + fp);
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    return ap;
}

}  // namespace hymate
