#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "rescr/tensor.hpp"

namespace rescr {

// Per-pixel argmax over the last axis; ties go to the lowest class index.
template <typename T>
std::vector<std::size_t> argmax_labels(const Tensor<T>& probs);

struct ConfusionCounts {
    std::vector<std::uint64_t> tp, fp, fn, tn;
    std::uint64_t pixels = 0;

    std::size_t num_classes() const noexcept { return tp.size(); }
};

struct ClassMetrics {
    double dice = 0, jaccard = 0, precision = 0, recall = 0, f1 = 0;
};

struct MetricReport {
    ConfusionCounts counts;
    std::vector<ClassMetrics> per_class;
    ClassMetrics macro;
    double soft_dice = 0;      // on probabilities, smooth s
    double soft_tanimoto = 0;  // complement Tanimoto on probabilities
};

// One-vs-rest counts after argmax-decoding both tensors.
template <typename T>
ConfusionCounts confusion_counts(const Tensor<T>& yhat, const Tensor<T>& y);

// Ratios with 0/0 defined as 1 when TP = FP = FN = 0 and as 0 otherwise.
ClassMetrics metrics_from_counts(std::uint64_t tp, std::uint64_t fp, std::uint64_t fn);

double f1_score(double precision, double recall);

// Per-class and macro metrics from (possibly summed) counts plus the
// separately averaged soft scores.
MetricReport make_report(ConfusionCounts counts, double soft_dice, double soft_tanimoto);

// Adds `more` into `into`; class counts must agree (an empty `into` adopts them).
void accumulate(ConfusionCounts& into, const ConfusionCounts& more);

template <typename T>
MetricReport confusion_and_metrics(const Tensor<T>& yhat, const Tensor<T>& y, double smooth = 1.0);

// CSV table: class,dice,jaccard,precision,recall,f1 then a "macro" row.
void write_metric_csv(std::ostream& os, const MetricReport& report, const std::vector<std::string>& class_names);

// Aligned text table in the same column order, for terminals.
void write_metric_table(std::ostream& os, const MetricReport& report, const std::vector<std::string>& class_names);

}  // namespace rescr
