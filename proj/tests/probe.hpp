#pragma once

// Test-only linear probes: ridge regression from temporal-mean features to the
// six targets, and a textbook two-pass Pearson correlation.

#include <Eigen/Dense>

#include <cmath>
#include <vector>

#include "emi/corpus.hpp"

namespace emi::testing {

inline double textbook_pearson(const std::vector<double>& x, const std::vector<double>& y)
{
    const double n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    return sxy / std::sqrt(sxx * syy);
}

/// Row of temporal-mean features of the chosen modalities plus a trailing 1.
inline Eigen::RowVectorXd mean_features(const SampleBundle& s, bool visual = true, bool audio = true,
                                        bool text = true)
{
    std::vector<double> f;
    auto add_mean = [&](const FeatureSequence& seq) {
        const std::size_t T = seq.length(), D = seq.width();
        for (std::size_t d = 0; d < D; ++d) {
            double m = 0.0;
            for (std::size_t t = 0; t < T; ++t) {
                m += seq.frames.values()[t * D + d];
            }
            f.push_back(m / static_cast<double>(T));
        }
    };
    if (visual) {
        add_mean(s.visual);
    }
    if (audio) {
        add_mean(s.audio);
    }
    if (text) {
        add_mean(s.text);
    }
    f.push_back(1.0);
    return Eigen::Map<Eigen::RowVectorXd>(f.data(), static_cast<Eigen::Index>(f.size()));
}

inline Eigen::MatrixXd design(const std::vector<SampleBundle>& c, bool v = true, bool a = true, bool t = true)
{
    Eigen::MatrixXd X(static_cast<Eigen::Index>(c.size()), mean_features(c[0], v, a, t).size());
    for (std::size_t i = 0; i < c.size(); ++i) {
        X.row(static_cast<Eigen::Index>(i)) = mean_features(c[i], v, a, t);
    }
    return X;
}

inline Eigen::MatrixXd targets(const std::vector<SampleBundle>& c)
{
    Eigen::MatrixXd Y(static_cast<Eigen::Index>(c.size()), 6);
    for (std::size_t i = 0; i < c.size(); ++i) {
        for (int e = 0; e < 6; ++e) {
            Y(static_cast<Eigen::Index>(i), e) = c[i].target[static_cast<std::size_t>(e)];
        }
    }
    return Y;
}

inline Eigen::MatrixXd ridge_fit(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y, double lambda)
{
    Eigen::MatrixXd A = X.transpose() * X;
    A.diagonal().array() += lambda;
    return A.ldlt().solve(X.transpose() * Y);
}

/// Mean over emotions of held-out Pearson correlation for a ridge probe.
inline double ridge_probe_rho(const std::vector<SampleBundle>& train, const std::vector<SampleBundle>& test,
                              double lambda = 1e-2)
{
    Eigen::MatrixXd W = ridge_fit(design(train), targets(train), lambda);
    Eigen::MatrixXd P = design(test) * W;
    Eigen::MatrixXd Y = targets(test);
    double total = 0.0;
    for (int e = 0; e < 6; ++e) {
        std::vector<double> y(Y.rows()), p(Y.rows());
        for (Eigen::Index i = 0; i < Y.rows(); ++i) {
            y[static_cast<std::size_t>(i)] = Y(i, e);
            p[static_cast<std::size_t>(i)] = P(i, e);
        }
        total += textbook_pearson(y, p);
    }
    return total / 6.0;
}

} // namespace emi::testing
