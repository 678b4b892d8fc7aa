#pragma once

#include <cmath>
#include <vector>

#include "pmts/dataio.hpp"
#include "pmts/peft.hpp"

namespace pmts {

struct MetricsReport {
    double mae = 0.0;
    double rmse = 0.0;
    double mape = 0.0;  // percent; targets equal to zero are skipped
    double smape = 0.0; // percent; a term is 0 when both y and y_hat are 0
    std::size_t n = 0;
    std::size_t mape_skipped = 0; // zero-target samples excluded from MAPE
};

inline MetricsReport compute_metrics(const std::vector<double>& y, const std::vector<double>& yhat) {
    if (y.empty() || y.size() != yhat.size()) throw DataError("metrics: empty or mismatched vectors");
    MetricsReport r;
    r.n = y.size();
    double abs_acc = 0.0, sq_acc = 0.0, mape_acc = 0.0, smape_acc = 0.0;
    std::size_t mape_n = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double d = y[i] - yhat[i];
        abs_acc += std::abs(d);
        sq_acc += d * d;
        if (y[i] != 0.0) {
            mape_acc += std::abs(d / y[i]);
            ++mape_n;
        } else {
            ++r.mape_skipped;
        }
        const double denom = (std::abs(y[i]) + std::abs(yhat[i])) / 2.0;
        if (denom != 0.0) smape_acc += std::abs(d) / denom;
    }
    const double n = static_cast<double>(y.size());
    r.mae = abs_acc / n;
    r.rmse = std::sqrt(sq_acc / n);
    r.mape = mape_n ? 100.0 * mape_acc / static_cast<double>(mape_n) : 0.0;
    r.smape = 100.0 * smape_acc / n;
    return r;
}

// Runs the model over a test set (no gradients) and scores it.
inline MetricsReport evaluate(PeftModel& model, const std::vector<WindowSample>& test) {
    if (test.empty()) throw DataError("evaluate: empty test set");
    std::vector<double> y, yhat;
    y.reserve(test.size());
    yhat.reserve(test.size());
    for (const auto& s : test) {
        y.push_back(s.y);
        yhat.push_back(model_forward(model, s.x).item());
    }
    return compute_metrics(y, yhat);
}

} // namespace pmts
