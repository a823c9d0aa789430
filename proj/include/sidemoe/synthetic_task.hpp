#pragma once

#include <cstdint>
#include <vector>

#include "sidemoe/rng.hpp"
#include "sidemoe/training.hpp"

namespace sidemoe {

// Sequence classification with cluster-conditional linear rules. Every sample
// belongs to one of `clusters` clusters; its label is decided by that
// cluster's own linear rule applied to a low-dimensional content vector
// embedded in the tokens. Cluster centroids and the content subspace are
// family-level properties shared by source and target tasks (the
// transferable "general knowledge"); the per-cluster rules are per-task.
// Position 0 carries the cluster marker with no content, a stand-in for a
// [CLS] token, so the backbone's salient feature is cluster-informative.
//
// A single shared map cannot satisfy all clusters' conflicting rules at
// small width, which is what gives a sparse expert bank something to win.
struct TaskConfig {
    std::size_t tokens = 6;
    std::size_t dim = 24;
    std::size_t classes = 4;
    std::size_t clusters = 6;
    std::size_t content_dims = 6;
    std::size_t train_size = 192;
    std::size_t val_size = 96;
    std::size_t test_size = 96;
    std::size_t source_train_size = 256;
    double cluster_scale = 2.0;
    double token_noise = 0.1;
    double rule_margin = 1.0; // min gap between best and runner-up class score

    void validate() const {
        if (tokens < 2) throw ConfigError("task: tokens must be >= 2");
        if (dim < 2) throw ConfigError("task: dim must be >= 2");
        if (classes < 2) throw ConfigError("task: classes must be >= 2");
        if (clusters < 1) throw ConfigError("task: clusters must be >= 1");
        if (content_dims < 1 || content_dims > dim)
            throw ConfigError("task: content_dims must be in [1, dim]");
        if (train_size == 0 || val_size == 0 || test_size == 0)
            throw ConfigError("task: split sizes must be positive");
        if (cluster_scale <= 0.0 || token_noise < 0.0)
            throw ConfigError("task: cluster_scale must be > 0, token_noise >= 0");
        if (rule_margin < 0.0) throw ConfigError("task: rule_margin must be >= 0");
    }
};

struct TaskFamily {
    std::vector<Tensor> centroids; // clusters x (dim)
    Tensor content_basis;          // dim x content_dims, orthonormal columns
};

inline TaskFamily make_task_family(const TaskConfig& cfg, std::uint64_t family_seed) {
    cfg.validate();
    TaskFamily fam;
    Rng rng(derive_seed(family_seed, "task.centroids"));
    for (std::size_t g = 0; g < cfg.clusters; ++g) {
        Tensor c = Tensor::random_normal({cfg.dim}, rng);
        double norm = 0.0;
        for (const double v : c.data) norm += v * v;
        norm = std::sqrt(norm);
        for (double& v : c.data) v *= cfg.cluster_scale / norm;
        fam.centroids.push_back(std::move(c));
    }

    // Gram-Schmidt over random columns
    Rng basis_rng(derive_seed(family_seed, "task.content_basis"));
    fam.content_basis = Tensor({cfg.dim, cfg.content_dims});
    for (std::size_t c = 0; c < cfg.content_dims; ++c) {
        std::vector<double> col(cfg.dim);
        for (double& v : col) v = basis_rng.normal();
        for (std::size_t prev = 0; prev < c; ++prev) {
            double dot = 0.0;
            for (std::size_t i = 0; i < cfg.dim; ++i)
                dot += col[i] * fam.content_basis.at(i, prev);
            for (std::size_t i = 0; i < cfg.dim; ++i)
                col[i] -= dot * fam.content_basis.at(i, prev);
        }
        double norm = 0.0;
        for (const double v : col) norm += v * v;
        norm = std::sqrt(norm);
        for (std::size_t i = 0; i < cfg.dim; ++i) fam.content_basis.at(i, c) = col[i] / norm;
    }
    return fam;
}

struct SyntheticTask {
    std::vector<Sample> train, val, test;
};

// One task instance: per-cluster class rules drawn from task_seed, splits
// drawn disjointly from independent streams.
inline SyntheticTask make_task(const TaskConfig& cfg, const TaskFamily& family,
                               std::uint64_t task_seed, bool source = false) {
    cfg.validate();
    std::vector<Tensor> rules; // per cluster: classes x content_dims
    Rng rule_rng(derive_seed(task_seed, "task.rules"));
    for (std::size_t g = 0; g < cfg.clusters; ++g)
        rules.push_back(Tensor::random_normal({cfg.classes, cfg.content_dims}, rule_rng));

    auto draw = [&](std::size_t count, Rng& rng) {
        std::vector<Sample> out;
        out.reserve(count);
        for (std::size_t i = 0; i < count; ++i) {
            const std::size_t g = rng.index(cfg.clusters);
            // draw content until the cluster rule decides with a clear margin
            std::vector<double> content(cfg.content_dims);
            int best = 0;
            for (;;) {
                for (double& u : content) u = rng.normal();
                best = 0;
                double top = -1e300, second = -1e300;
                for (std::size_t cls = 0; cls < cfg.classes; ++cls) {
                    double score = 0.0;
                    for (std::size_t c = 0; c < cfg.content_dims; ++c)
                        score += rules[g].at(cls, c) * content[c];
                    if (score > top) {
                        second = top;
                        top = score;
                        best = static_cast<int>(cls);
                    } else if (score > second) {
                        second = score;
                    }
                }
                if (top - second >= cfg.rule_margin) break;
            }
            // embed the content into token space through the shared basis
            std::vector<double> embedded(cfg.dim, 0.0);
            for (std::size_t c = 0; c < cfg.content_dims; ++c)
                for (std::size_t i2 = 0; i2 < cfg.dim; ++i2)
                    embedded[i2] += family.content_basis.at(i2, c) * content[c];

            Sample s;
            s.tokens = Tensor({cfg.tokens, cfg.dim});
            for (std::size_t c = 0; c < cfg.dim; ++c)
                s.tokens.at(0, c) = family.centroids[g].data[c] +
                                    cfg.token_noise * rng.normal();
            for (std::size_t t = 1; t < cfg.tokens; ++t)
                for (std::size_t c = 0; c < cfg.dim; ++c)
                    s.tokens.at(t, c) = family.centroids[g].data[c] + embedded[c] +
                                        cfg.token_noise * rng.normal();
            s.label = best;
            s.cluster = static_cast<int>(g);
            out.push_back(std::move(s));
        }
        return out;
    };

    SyntheticTask task;
    Rng train_rng(derive_seed(task_seed, "task.split.train"));
    Rng val_rng(derive_seed(task_seed, "task.split.val"));
    Rng test_rng(derive_seed(task_seed, "task.split.test"));
    task.train = draw(source ? cfg.source_train_size : cfg.train_size, train_rng);
    task.val = draw(cfg.val_size, val_rng);
    task.test = draw(cfg.test_size, test_rng);
    return task;
}

} // namespace sidemoe
