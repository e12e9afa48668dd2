#include "rescr/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <ostream>

#include "rescr/loss.hpp"

namespace rescr {

template <typename T>
std::vector<std::size_t> argmax_labels(const Tensor<T>& probs) {
    const std::size_t K = probs.shape().back();
    const std::size_t N = probs.size() / K;
    std::vector<std::size_t> out(N);
    const T* p = probs.data().data();
    for (std::size_t n = 0; n < N; ++n) {
        const T* row = p + n * K;
        out[n] = static_cast<std::size_t>(std::max_element(row, row + K) - row);
    }
    return out;
}

template <typename T>
ConfusionCounts confusion_counts(const Tensor<T>& yhat, const Tensor<T>& y) {
    if (yhat.shape() != y.shape())
        throw ShapeError("prediction " + to_string(yhat.shape()) + " vs labels " + to_string(y.shape()));
    const std::size_t K = y.shape().back();
    const auto pred = argmax_labels(yhat);
    const auto truth = argmax_labels(y);
    ConfusionCounts c;
    c.tp.assign(K, 0);
    c.fp.assign(K, 0);
    c.fn.assign(K, 0);
    c.tn.assign(K, 0);
    c.pixels = pred.size();
    for (std::size_t n = 0; n < pred.size(); ++n) {
        if (pred[n] == truth[n]) {
            ++c.tp[pred[n]];
        } else {
            ++c.fp[pred[n]];
            ++c.fn[truth[n]];
        }
    }
    for (std::size_t k = 0; k < K; ++k) c.tn[k] = c.pixels - c.tp[k] - c.fp[k] - c.fn[k];
    return c;
}

namespace {

double safe_ratio(double num, double den, bool all_zero) {
    if (den == 0.0) return all_zero ? 1.0 : 0.0;
    return num / den;
}

}  // namespace

double f1_score(double precision, double recall) {
    if (precision + recall == 0.0) return 0.0;
    return 2.0 * precision * recall / (precision + recall);
}

ClassMetrics metrics_from_counts(std::uint64_t tp, std::uint64_t fp, std::uint64_t fn) {
    const bool empty = tp == 0 && fp == 0 && fn == 0;
    const double TP = double(tp), FP = double(fp), FN = double(fn);
    ClassMetrics m;
    m.jaccard = safe_ratio(TP, TP + FP + FN, empty);
    m.precision = safe_ratio(TP, TP + FP, empty);
    m.recall = safe_ratio(TP, TP + FN, empty);
    m.f1 = empty ? 1.0 : f1_score(m.precision, m.recall);
    m.dice = safe_ratio(2 * TP, 2 * TP + FP + FN, empty);
    return m;
}

MetricReport make_report(ConfusionCounts counts, double soft_dice, double soft_tanimoto) {
    MetricReport r;
    r.counts = std::move(counts);
    const std::size_t K = r.counts.num_classes();
    for (std::size_t k = 0; k < K; ++k) {
        auto m = metrics_from_counts(r.counts.tp[k], r.counts.fp[k], r.counts.fn[k]);
        r.per_class.push_back(m);
        r.macro.dice += m.dice / double(K);
        r.macro.jaccard += m.jaccard / double(K);
        r.macro.precision += m.precision / double(K);
        r.macro.recall += m.recall / double(K);
        r.macro.f1 += m.f1 / double(K);
    }
    r.soft_dice = soft_dice;
    r.soft_tanimoto = soft_tanimoto;
    return r;
}

void accumulate(ConfusionCounts& into, const ConfusionCounts& more) {
    if (into.num_classes() == 0) {
        into = more;
        return;
    }
    if (into.num_classes() != more.num_classes())
        throw ShapeError("cannot add counts over " + std::to_string(more.num_classes()) + " classes to counts over " +
                         std::to_string(into.num_classes()));
    for (std::size_t k = 0; k < into.num_classes(); ++k) {
        into.tp[k] += more.tp[k];
        into.fp[k] += more.fp[k];
        into.fn[k] += more.fn[k];
        into.tn[k] += more.tn[k];
    }
    into.pixels += more.pixels;
}

template <typename T>
MetricReport confusion_and_metrics(const Tensor<T>& yhat, const Tensor<T>& y, double smooth) {
    return make_report(confusion_counts(yhat, y), dice_coefficient(yhat, y, smooth),
                       tanimoto_with_complement(yhat, y, smooth));
}

namespace {

std::string name_of(const std::vector<std::string>& names, std::size_t k) {
    return k < names.size() ? names[k] : "class" + std::to_string(k);
}

void csv_row(std::ostream& os, const std::string& label, const ClassMetrics& m) {
    char buf[160];
    std::snprintf(buf, sizeof buf, ",%.6f,%.6f,%.6f,%.6f,%.6f\n", m.dice, m.jaccard, m.precision, m.recall, m.f1);
    os << label << buf;
}

}  // namespace

void write_metric_csv(std::ostream& os, const MetricReport& report, const std::vector<std::string>& class_names) {
    os << "class,dice,jaccard,precision,recall,f1\n";
    for (std::size_t k = 0; k < report.per_class.size(); ++k) csv_row(os, name_of(class_names, k), report.per_class[k]);
    csv_row(os, "macro", report.macro);
}

void write_metric_table(std::ostream& os, const MetricReport& report, const std::vector<std::string>& class_names) {
    std::size_t width = 5;
    for (std::size_t k = 0; k < report.per_class.size(); ++k) width = std::max(width, name_of(class_names, k).size());
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-*s %9s %9s %9s %9s %9s\n", int(width), "class", "Dice", "Jaccard", "Precision",
                  "Recall", "F1");
    os << buf;
    auto row = [&](const std::string& label, const ClassMetrics& m) {
        std::snprintf(buf, sizeof buf, "%-*s %9.4f %9.4f %9.4f %9.4f %9.4f\n", int(width), label.c_str(), m.dice,
                      m.jaccard, m.precision, m.recall, m.f1);
        os << buf;
    };
    for (std::size_t k = 0; k < report.per_class.size(); ++k) row(name_of(class_names, k), report.per_class[k]);
    row("macro", report.macro);
}

#define RESCR_INSTANTIATE_METRICS(T)                                                   \
    template std::vector<std::size_t> argmax_labels(const Tensor<T>&);                 \
    template ConfusionCounts confusion_counts(const Tensor<T>&, const Tensor<T>&);     \
    template MetricReport confusion_and_metrics(const Tensor<T>&, const Tensor<T>&, double);

RESCR_INSTANTIATE_METRICS(float)
RESCR_INSTANTIATE_METRICS(double)

}  // namespace rescr
