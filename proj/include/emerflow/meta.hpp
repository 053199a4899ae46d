#ifndef EMERFLOW_META_HPP
#define EMERFLOW_META_HPP

#include <deque>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "emerflow/backbone.hpp"
#include "emerflow/common.hpp"
#include "emerflow/corpus.hpp"
#include "emerflow/encoder.hpp"

namespace emerflow {

// ----------------------------- alignment network -----------------------------

// Maps encoder representations into the backbone's item-embedding space:
// one tanh hidden layer, linear output.
struct AlignParams {
    int in_dim = 256;
    int hidden = 64;
    int out_dim = 16;
    std::vector<double> w1, b1;  // [hidden * in_dim], [hidden]
    std::vector<double> w2, b2;  // [out_dim * hidden], [out_dim]

    template <class F>
    void each_array(F&& f) const {
        f("align_w1", w1);
        f("align_b1", b1);
        f("align_w2", w2);
        f("align_b2", b2);
    }
    template <class F>
    void each_array_mut(F&& f) {
        f(w1);
        f(b1);
        f(w2);
        f(b2);
    }
};

struct AlignGradients {
    std::vector<double> w1, b1, w2, b2;

    static AlignGradients zeros_like(const AlignParams& p) {
        AlignGradients g;
        g.w1.assign(p.w1.size(), 0.0);
        g.b1.assign(p.b1.size(), 0.0);
        g.w2.assign(p.w2.size(), 0.0);
        g.b2.assign(p.b2.size(), 0.0);
        return g;
    }
    template <class F>
    void each_array_mut(F&& f) {
        f(w1);
        f(b1);
        f(w2);
        f(b2);
    }
    void zero() {
        each_array_mut([](std::vector<double>& a) { std::fill(a.begin(), a.end(), 0.0); });
    }
};

inline AlignParams init_align(int in_dim, int hidden, int out_dim, std::uint64_t seed) {
    AlignParams p;
    p.in_dim = in_dim;
    p.hidden = hidden;
    p.out_dim = out_dim;
    Rng rng{subseed(seed, "align:init")};
    auto layer = [&](int rows, int cols, std::vector<double>& w, std::vector<double>& b) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(cols));
        w.resize(static_cast<std::size_t>(rows) * cols);
        for (double& v : w) v = rng.uniform(-bound, bound);
        b.assign(rows, 0.0);
    };
    layer(hidden, in_dim, p.w1, p.b1);
    layer(out_dim, hidden, p.w2, p.b2);
    return p;
}

namespace detail {

struct AlignTrace {
    std::vector<double> r;   // input copy
    std::vector<double> h;   // tanh hidden
    std::vector<double> e;   // output
};

inline void align_forward(const AlignParams& p, std::span<const double> r, AlignTrace& t) {
    if (static_cast<int>(r.size()) != p.in_dim)
        fail("align: representation has dim " + std::to_string(r.size()) + ", expected " +
             std::to_string(p.in_dim));
    t.r.assign(r.begin(), r.end());
    t.h.assign(p.hidden, 0.0);
    for (int j = 0; j < p.hidden; ++j) {
        const double* w = p.w1.data() + static_cast<std::size_t>(j) * p.in_dim;
        double acc = p.b1[j];
        for (int i = 0; i < p.in_dim; ++i) acc += w[i] * r[i];
        t.h[j] = std::tanh(acc);
    }
    t.e.assign(p.out_dim, 0.0);
    for (int k = 0; k < p.out_dim; ++k) {
        const double* w = p.w2.data() + static_cast<std::size_t>(k) * p.hidden;
        double acc = p.b2[k];
        for (int j = 0; j < p.hidden; ++j) acc += w[j] * t.h[j];
        t.e[k] = acc;
    }
}

// Accumulates d(loss)/d(theta) for upstream de = dL/d(output).
inline void align_backward(const AlignParams& p, const AlignTrace& t, std::span<const double> de,
                           AlignGradients& g) {
    std::vector<double> dh(p.hidden, 0.0);
    for (int k = 0; k < p.out_dim; ++k) {
        const double* w = p.w2.data() + static_cast<std::size_t>(k) * p.hidden;
        double* gw = g.w2.data() + static_cast<std::size_t>(k) * p.hidden;
        for (int j = 0; j < p.hidden; ++j) {
            dh[j] += de[k] * w[j];
            gw[j] += de[k] * t.h[j];
        }
        g.b2[k] += de[k];
    }
    for (int j = 0; j < p.hidden; ++j) {
        const double dpre = dh[j] * (1.0 - t.h[j] * t.h[j]);
        double* gw = g.w1.data() + static_cast<std::size_t>(j) * p.in_dim;
        for (int i = 0; i < p.in_dim; ++i) gw[i] += dpre * t.r[i];
        g.b1[j] += dpre;
    }
}

}  // namespace detail

inline std::vector<double> align(const AlignParams& p, std::span<const double> r) {
    detail::AlignTrace t;
    detail::align_forward(p, r, t);
    return t.e;
}

inline std::vector<double> align(const AlignParams& p, const TextRepresentation& r) {
    return align(p, std::span<const double>{r.vector});
}

// ----------------------------- meta configuration -----------------------------

struct MetaConfig {
    double alpha = 1.0;         // query-term weight in the meta-objective
    double inner_step = 0.1;    // inner-loop learning rate
    int inner_steps = 1;
    double outer_step = 1e-3;
    int batch_tasks = 16;
    int epochs = 50;
    std::uint64_t seed = 0;
    bool first_order = true;
    int hidden = 64;            // alignment hidden width

    void validate() const {
        if (alpha < 0.0) fail("meta config: alpha must be nonnegative");
        if (inner_step < 0.0) fail("meta config: inner_step must be nonnegative");
        if (inner_steps < 1) fail("meta config: inner_steps must be >= 1");
        if (outer_step <= 0.0) fail("meta config: outer_step must be positive");
        if (batch_tasks < 1) fail("meta config: batch_tasks must be >= 1");
        if (epochs < 1) fail("meta config: epochs must be >= 1");
        if (hidden < 1) fail("meta config: hidden must be >= 1");
    }
};

// ----------------------------- inner loop -----------------------------

struct AdaptedEmbedding {
    std::string item_id;
    std::vector<double> initial;
    std::vector<double> current;
    int steps_taken = 0;
};

inline AdaptedEmbedding make_adapted(const std::string& item_id, std::vector<double> e) {
    AdaptedEmbedding a;
    a.item_id = item_id;
    a.initial = e;
    a.current = std::move(e);
    return a;
}

// Plain gradient descent on the item embedding only; the alignment and
// backbone parameters never move here.
inline AdaptedEmbedding inner_adapt(AdaptedEmbedding embedding,
                                    const std::vector<Interaction>& support,
                                    const Backbone& backbone, const Corpus& corpus,
                                    const MetaConfig& config) {
    if (support.empty()) fail("inner_adapt: empty support set");
    for (int step = 0; step < config.inner_steps; ++step) {
        const GradientBundle g =
            grad(backbone, embedding.current, support, corpus, GradScope::embedding_only);
        for (int i = 0; i < backbone.embed_dim; ++i)
            embedding.current[i] -= config.inner_step * g.wrt_embedding[i];
        embedding.steps_taken += 1;
    }
    return embedding;
}

// ----------------------------- meta objective -----------------------------

struct MetaLossTerms {
    double support_term = 0.0;  // L_S at e = align(r)
    double query_term = 0.0;    // L_Q at the inner-adapted embedding
};

inline MetaLossTerms meta_loss(const AlignParams& theta, const Task& task,
                               const Backbone& backbone, const Corpus& corpus,
                               const RepresentationMap& reps, const MetaConfig& config) {
    auto it = reps.find(task.item_id);
    if (it == reps.end()) fail("meta_loss: no representation for item " + task.item_id);
    const std::vector<double> e0 = align(theta, std::span<const double>{it->second});
    MetaLossTerms terms;
    terms.support_term = support_loss(backbone, e0, task.support, corpus);
    AdaptedEmbedding adapted =
        inner_adapt(make_adapted(task.item_id, e0), task.support, backbone, corpus, config);
    terms.query_term = support_loss(backbone, adapted.current, task.query, corpus);
    return terms;
}

namespace detail {

// Per-task first-order meta-gradient. The upstream gradients of both loss
// terms are taken with respect to the embedding and pushed through the
// alignment network at the original input; the dependence of the inner
// update on theta is dropped (first-order rule).
struct TaskGradResult {
    MetaLossTerms terms;
    bool support_in_theta_grad = true;
};

inline TaskGradResult accumulate_task_gradient(const AlignParams& theta, const Task& task,
                                               const Backbone& backbone, const Corpus& corpus,
                                               const RepresentationMap& reps,
                                               const MetaConfig& config, AlignGradients& grads,
                                               bool include_support_term = true,
                                               bool include_query_term = true) {
    auto it = reps.find(task.item_id);
    if (it == reps.end()) fail("meta gradient: no representation for item " + task.item_id);

    AlignTrace trace;
    align_forward(theta, std::span<const double>{it->second}, trace);

    TaskGradResult out;
    const GradientBundle support_g =
        grad(backbone, trace.e, task.support, corpus, GradScope::embedding_only);
    out.terms.support_term = support_g.loss;

    AdaptedEmbedding adapted = make_adapted(task.item_id, trace.e);
    GradientBundle step_g = support_g;
    for (int step = 0; step < config.inner_steps; ++step) {
        if (step > 0)
            step_g = grad(backbone, adapted.current, task.support, corpus,
                          GradScope::embedding_only);
        for (int i = 0; i < backbone.embed_dim; ++i)
            adapted.current[i] -= config.inner_step * step_g.wrt_embedding[i];
        adapted.steps_taken += 1;
    }
    const GradientBundle query_g =
        grad(backbone, adapted.current, task.query, corpus, GradScope::embedding_only);
    out.terms.query_term = query_g.loss;

    std::vector<double> upstream(backbone.embed_dim, 0.0);
    if (include_support_term)
        for (int i = 0; i < backbone.embed_dim; ++i) upstream[i] += support_g.wrt_embedding[i];
    if (include_query_term)
        for (int i = 0; i < backbone.embed_dim; ++i)
            upstream[i] += config.alpha * query_g.wrt_embedding[i];
    align_backward(theta, trace, upstream, grads);
    return out;
}

}  // namespace detail

// ----------------------------- meta training -----------------------------

struct MetaEpochStats {
    int epoch = 0;
    double objective = 0.0;     // mean over tasks of support + alpha * query
    double support_mean = 0.0;
    double query_mean = 0.0;
};

struct MetaTrainResult {
    AlignParams theta;
    std::vector<MetaEpochStats> log;
};

inline void write_meta_log(const std::string& path, const std::vector<MetaEpochStats>& log) {
    std::string out = "epoch,objective,support_mean,query_mean\n";
    for (const auto& row : log) {
        char buf[128];
        std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g\n", row.epoch, row.objective,
                      row.support_mean, row.query_mean);
        out += buf;
    }
    write_text_file(path, out);
}

// Algorithm: per epoch, visit every task once in a seeded shuffled order,
// in batches of batch_tasks; after each batch update theta by Adam on the
// summed first-order meta-gradient. Backbone parameters are read-only
// throughout.
inline MetaTrainResult meta_train(const std::vector<Task>& tasks, const RepresentationMap& reps,
                                  const Backbone& backbone, const Corpus& corpus,
                                  const MetaConfig& config) {
    config.validate();
    if (tasks.empty()) fail("meta_train: no tasks");
    if (!config.first_order)
        fail("meta_train: exact second-order meta-gradients are not implemented; "
             "set first_order=true");
    for (const auto& task : tasks) {
        if (task.support.empty() || task.query.empty())
            fail("meta_train: task for item " + task.item_id + " has an empty support or query set");
    }

    const int d_r = static_cast<int>(reps.begin()->second.size());
    MetaTrainResult result;
    result.theta = init_align(d_r, config.hidden, backbone.embed_dim, config.seed);
    AdamState adam = AdamState::zeros_like(result.theta);
    AlignGradients grads = AlignGradients::zeros_like(result.theta);

    std::vector<std::size_t> order(tasks.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    std::deque<double> window;  // 20-epoch moving average, plateau warning
    double prev_avg = 0.0;
    int flat_windows = 0;
    bool warned = false;

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        Rng rng{subseed(config.seed, "meta:epoch:" + std::to_string(epoch))};
        rng.shuffle(order);

        double obj_total = 0.0, support_total = 0.0, query_total = 0.0;
        std::size_t pos = 0;
        while (pos < order.size()) {
            const std::size_t batch_end =
                std::min(order.size(), pos + static_cast<std::size_t>(config.batch_tasks));
            grads.zero();
            for (std::size_t k = pos; k < batch_end; ++k) {
                const auto r = detail::accumulate_task_gradient(result.theta, tasks[order[k]],
                                                                backbone, corpus, reps, config,
                                                                grads);
                support_total += r.terms.support_term;
                query_total += r.terms.query_term;
                obj_total += r.terms.support_term + config.alpha * r.terms.query_term;
            }
            if (!is_finite(obj_total)) fail("meta_train: objective is not finite; aborting");
            adam_step(result.theta, grads, adam, config.outer_step);
            pos = batch_end;
        }

        MetaEpochStats stats;
        stats.epoch = epoch;
        const double n = static_cast<double>(tasks.size());
        stats.objective = obj_total / n;
        stats.support_mean = support_total / n;
        stats.query_mean = query_total / n;
        result.log.push_back(stats);
        log_info("meta epoch " + std::to_string(epoch) + " objective " +
                 format_sig9(stats.objective));

        window.push_back(stats.objective);
        if (window.size() > 20) window.pop_front();
        if (window.size() == 20 && (epoch + 1) % 20 == 0) {
            double avg = 0.0;
            for (double v : window) avg += v;
            avg /= 20.0;
            if (epoch + 1 > 20 && avg >= prev_avg) {
                if (++flat_windows >= 3 && !warned) {
                    log_warn("meta_train: objective moving average has not decreased for 3 "
                             "consecutive 20-epoch windows");
                    warned = true;
                }
            } else if (epoch + 1 > 20) {
                flat_windows = 0;
            }
            prev_avg = avg;
        }
    }
    return result;
}

// Exposed for verification: the theta-gradient of the query term alone
// (first-order), as meta_train would accumulate it.
inline AlignGradients query_term_theta_grad(const AlignParams& theta, const Task& task,
                                            const Backbone& backbone, const Corpus& corpus,
                                            const RepresentationMap& reps,
                                            const MetaConfig& config) {
    AlignGradients grads = AlignGradients::zeros_like(theta);
    detail::accumulate_task_gradient(theta, task, backbone, corpus, reps, config, grads,
                                     /*include_support_term=*/false, /*include_query_term=*/true);
    return grads;
}

// ----------------------------- test-time adaptation -----------------------------

// Cumulative adaptation across the phase schedule: snapshot 0 is the pure
// aligned embedding; snapshot p is the state after adapting on sets
// 0..p-1. The final remainder set is never adapted on.
inline std::vector<AdaptedEmbedding> adapt_across_phases(const PhaseSchedule& schedule,
                                                         const AlignParams& theta,
                                                         const Backbone& backbone,
                                                         const RepresentationMap& reps,
                                                         const Corpus& corpus,
                                                         const MetaConfig& config) {
    auto it = reps.find(schedule.item_id);
    if (it == reps.end())
        fail("adapt_across_phases: no representation for item " + schedule.item_id);
    std::vector<AdaptedEmbedding> snapshots;
    AdaptedEmbedding state =
        make_adapted(schedule.item_id, align(theta, std::span<const double>{it->second}));
    snapshots.push_back(state);
    for (std::size_t p = 0; p < 3; ++p) {
        state = inner_adapt(std::move(state), schedule.sets[p], backbone, corpus, config);
        snapshots.push_back(state);
    }
    return snapshots;
}

// ----------------------------- checkpoints -----------------------------

inline void save_align(const std::string& path, const AlignParams& p) {
    nlohmann::ordered_json meta;
    meta["in_dim"] = p.in_dim;
    meta["hidden"] = p.hidden;
    meta["out_dim"] = p.out_dim;
    std::vector<NamedTensor> tensors;
    p.each_array([&](const std::string& name, const std::vector<double>& arr) {
        tensors.push_back({name, {arr.size()}, arr});
    });
    write_checkpoint(path, "align", meta, tensors);
}

inline AlignParams load_align(const std::string& path) {
    const Checkpoint ckpt = read_checkpoint(path, "align");
    AlignParams p;
    p.in_dim = ckpt.header.at("in_dim").get<int>();
    p.hidden = ckpt.header.at("hidden").get<int>();
    p.out_dim = ckpt.header.at("out_dim").get<int>();
    p.w1.resize(static_cast<std::size_t>(p.hidden) * p.in_dim);
    p.b1.resize(p.hidden);
    p.w2.resize(static_cast<std::size_t>(p.out_dim) * p.hidden);
    p.b2.resize(p.out_dim);
    p.each_array_mut([&, k = std::size_t{0}](std::vector<double>& arr) mutable {
        const NamedTensor& t = ckpt.tensors.at(k++);
        if (t.data.size() != arr.size())
            fail(path + ": tensor " + t.name + " has wrong size");
        arr = t.data;
    });
    return p;
}

}  // namespace emerflow

#endif  // EMERFLOW_META_HPP
