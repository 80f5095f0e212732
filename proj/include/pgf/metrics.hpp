#pragma once

// Evaluation suite: MAE, Pearson correlation, binary accuracy/F1 on the
// non-negative-vs-negative split, 7-class accuracy after clamp-and-round,
// and the trainable-parameter count.

#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "pgf/data.hpp"
#include "pgf/model.hpp"

namespace pgf {

struct MetricsReport {
    double mae = 0.0;
    double corr = 0.0;
    bool corr_degenerate = false;  // a side had (near-)zero variance; corr reported as 0
    double acc2 = 0.0;
    double acc7 = 0.0;
    double f1 = 0.0;
    std::size_t trainable_params = 0;
    std::size_t n_samples = 0;

    json to_json() const {
        return json{{"mae", mae},       {"corr", corr}, {"corr_degenerate", corr_degenerate},
                    {"acc2", acc2},     {"acc7", acc7}, {"f1", f1},
                    {"trainable_params", trainable_params}, {"n_samples", n_samples}};
    }
};

inline double mae(const std::vector<double>& pred, const std::vector<double>& labels) {
    if (pred.empty() || pred.size() != labels.size())
        throw value_error("mae: need equal non-empty vectors");
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) s += std::fabs(pred[i] - labels[i]);
    return s / double(pred.size());
}

struct CorrResult {
    double r = 0.0;
    bool degenerate = false;
};

inline CorrResult pearson_corr(const std::vector<double>& pred, const std::vector<double>& labels) {
    if (pred.size() < 2 || pred.size() != labels.size())
        throw value_error("pearson_corr: need >= 2 paired samples");
    std::size_t n = pred.size();
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += pred[i];
        my += labels[i];
    }
    mx /= double(n);
    my /= double(n);
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double dx = pred[i] - mx, dy = labels[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if (sxx / double(n) < 1e-12 || syy / double(n) < 1e-12) return {0.0, true};
    return {sxy / std::sqrt(sxx * syy), false};
}

struct BinaryResult {
    double acc2 = 0.0;
    double f1 = 0.0;
};

// Positive means non-negative, applied to predictions and labels alike.
inline BinaryResult binary_metrics(const std::vector<double>& pred,
                                   const std::vector<double>& labels) {
    if (pred.empty() || pred.size() != labels.size())
        throw value_error("binary_metrics: need equal non-empty vectors");
    std::size_t tp = 0, fp = 0, fn = 0, correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        bool p = pred[i] >= 0.0, y = labels[i] >= 0.0;
        if (p == y) ++correct;
        if (p && y) ++tp;
        if (p && !y) ++fp;
        if (!p && y) ++fn;
    }
    BinaryResult r;
    r.acc2 = double(correct) / double(pred.size());
    std::size_t pred_pos = tp + fp, label_pos = tp + fn;
    if (pred_pos == 0 && label_pos == 0)
        r.f1 = 1.0;
    else if (pred_pos == 0 || label_pos == 0)
        r.f1 = 0.0;
    else
        r.f1 = 2.0 * double(tp) / double(2 * tp + fp + fn);
    return r;
}

// Clamp to [-3, 3], round half away from zero, count exact class matches.
inline double acc7(const std::vector<double>& pred, const std::vector<double>& labels) {
    if (pred.empty() || pred.size() != labels.size())
        throw value_error("acc7: need equal non-empty vectors");
    auto cls = [](double x) {
        double c = std::min(3.0, std::max(-3.0, x));
        return int(std::round(c));  // std::round is half-away-from-zero
    };
    std::size_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i)
        if (cls(pred[i]) == cls(labels[i])) ++hits;
    return double(hits) / double(pred.size());
}

// Deterministic evaluation pass over one split part (dropout off, no tape).
inline std::vector<double> predict(const PgfNet& net, const std::vector<Sample>& part,
                                   const DatasetSplit& dims, std::size_t batch_size) {
    std::vector<double> preds;
    preds.reserve(part.size());
    auto order = identity_order(part.size());
    ForwardMode eval_mode;
    for (std::size_t first = 0; first < part.size(); first += batch_size) {
        std::size_t count = std::min(batch_size, part.size() - first);
        MultimodalBatch b = make_batch(part, order, first, count, dims);
        ModelOutput out = model_forward(net, b, eval_mode);
        const double* p = out.scores.data();
        preds.insert(preds.end(), p, p + count);
    }
    return preds;
}

inline MetricsReport compute_metrics(const std::vector<double>& pred,
                                     const std::vector<double>& labels) {
    MetricsReport r;
    r.n_samples = pred.size();
    r.mae = mae(pred, labels);
    CorrResult c = pearson_corr(pred, labels);
    r.corr = c.r;
    r.corr_degenerate = c.degenerate;
    BinaryResult b = binary_metrics(pred, labels);
    r.acc2 = b.acc2;
    r.f1 = b.f1;
    r.acc7 = acc7(pred, labels);
    return r;
}

inline MetricsReport evaluate(const PgfNet& net, const std::vector<Sample>& part,
                              const DatasetSplit& dims, std::size_t batch_size) {
    std::vector<double> preds = predict(net, part, dims, batch_size);
    std::vector<double> labels(part.size());
    for (std::size_t i = 0; i < part.size(); ++i) labels[i] = part[i].label;
    MetricsReport r = compute_metrics(preds, labels);
    r.trainable_params = count_trainable_params(net.cfg).total;
    return r;
}

}  // namespace pgf
