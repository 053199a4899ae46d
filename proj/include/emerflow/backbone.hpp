#ifndef EMERFLOW_BACKBONE_HPP
#define EMERFLOW_BACKBONE_HPP

#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "emerflow/checkpoint.hpp"
#include "emerflow/common.hpp"
#include "emerflow/corpus.hpp"

namespace emerflow {

// Probabilities are clamped to [kProbClamp, 1 - kProbClamp] inside the loss
// so BCE stays finite for saturated scores.
inline constexpr double kProbClamp = 1e-7;

inline double sigmoid(double z) {
    if (z >= 0.0) {
        return 1.0 / (1.0 + std::exp(-z));
    }
    const double ez = std::exp(z);
    return ez / (1.0 + ez);
}

inline double bce(int y, double p) {
    const double pc = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
    return y == 1 ? -std::log(pc) : -std::log(1.0 - pc);
}

// ----------------------------- field vocabularies -----------------------------

// Dense categorical indices per field; index 0 is the reserved
// out-of-vocabulary row that every unseen value maps to.
struct FieldVocab {
    std::string field_name;
    std::vector<std::string> values;  // value at position i has index i+1
    std::map<std::string, int> index;

    static constexpr int kOov = 0;

    static FieldVocab build(std::string name, const std::set<std::string>& distinct) {
        FieldVocab v;
        v.field_name = std::move(name);
        v.values.assign(distinct.begin(), distinct.end());
        for (std::size_t i = 0; i < v.values.size(); ++i)
            v.index[v.values[i]] = static_cast<int>(i) + 1;
        return v;
    }

    int size() const { return static_cast<int>(values.size()) + 1; }
    int lookup(const std::string& value) const {
        auto it = index.find(value);
        return it == index.end() ? kOov : it->second;
    }
};

// ----------------------------- model -----------------------------

struct TrainConfig {
    int embed_dim = 16;
    int hidden1 = 64;
    int hidden2 = 32;
    int epochs = 10;
    int batch_size = 256;
    double step = 1e-3;
    std::uint64_t seed = 0;
};

// Field-embedding scorer: first-order weights per categorical value, a
// factorization-machine pairwise term over all field vectors, and a
// two-hidden-layer tanh MLP over their concatenation. The item-identity
// slot has no vocabulary: its vector is always supplied by the caller
// (the id-table row during pretraining, an aligned embedding afterwards).
struct Backbone {
    int embed_dim = 16;
    int hidden1 = 64;
    int hidden2 = 32;
    std::vector<FieldVocab> item_fields;    // one per item feature column
    std::vector<FieldVocab> target_fields;  // target id field first, then feature columns
    std::vector<std::string> item_ids;      // id-table row order
    std::map<std::string, int> item_rows;

    std::vector<std::vector<double>> item_field_embed;    // [field][vocab * d]
    std::vector<std::vector<double>> target_field_embed;  // [field][vocab * d]
    std::vector<std::vector<double>> item_field_w1;       // [field][vocab]
    std::vector<std::vector<double>> target_field_w1;     // [field][vocab]
    std::vector<double> item_id_embed;                    // [n_old * d]
    std::vector<double> mlp_w1, mlp_b1;                   // [h1 * in], [h1]
    std::vector<double> mlp_w2, mlp_b2;                   // [h2 * h1], [h2]
    std::vector<double> mlp_w3, mlp_b3;                   // [h2], [1]

    int n_fields() const {
        return 1 + static_cast<int>(item_fields.size()) + static_cast<int>(target_fields.size());
    }
    int mlp_in_dim() const { return n_fields() * embed_dim; }

    std::span<const double> id_row(const std::string& item_id) const {
        auto it = item_rows.find(item_id);
        if (it == item_rows.end()) fail("backbone: no id-table row for item " + item_id);
        return {item_id_embed.data() + static_cast<std::size_t>(it->second) * embed_dim,
                static_cast<std::size_t>(embed_dim)};
    }

    // Every parameter array in checkpoint/optimizer order.
    template <class F>
    void each_array(F&& f) const {
        for (std::size_t i = 0; i < item_fields.size(); ++i) {
            f("item_embed:" + item_fields[i].field_name, item_field_embed[i]);
            f("item_w1:" + item_fields[i].field_name, item_field_w1[i]);
        }
        for (std::size_t i = 0; i < target_fields.size(); ++i) {
            f("target_embed:" + target_fields[i].field_name, target_field_embed[i]);
            f("target_w1:" + target_fields[i].field_name, target_field_w1[i]);
        }
        f("item_id_embed", item_id_embed);
        f("mlp_w1", mlp_w1);
        f("mlp_b1", mlp_b1);
        f("mlp_w2", mlp_w2);
        f("mlp_b2", mlp_b2);
        f("mlp_w3", mlp_w3);
        f("mlp_b3", mlp_b3);
    }

    template <class F>
    void each_array_mut(F&& f) {
        for (std::size_t i = 0; i < item_fields.size(); ++i) {
            f(item_field_embed[i]);
            f(item_field_w1[i]);
        }
        for (std::size_t i = 0; i < target_fields.size(); ++i) {
            f(target_field_embed[i]);
            f(target_field_w1[i]);
        }
        f(item_id_embed);
        f(mlp_w1);
        f(mlp_b1);
        f(mlp_w2);
        f(mlp_b2);
        f(mlp_w3);
        f(mlp_b3);
    }

    double param_checksum() const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        each_array([&](const std::string&, const std::vector<double>& arr) {
            for (double v : arr)
                h = fnv1a64(std::string_view{reinterpret_cast<const char*>(&v), sizeof(v)}, h);
        });
        return static_cast<double>(h);
    }
};

// Gradients with the same shapes as the trainable arrays.
struct BackboneGradients {
    std::vector<std::vector<double>> item_field_embed, target_field_embed;
    std::vector<std::vector<double>> item_field_w1, target_field_w1;
    std::vector<double> item_id_embed;
    std::vector<double> mlp_w1, mlp_b1, mlp_w2, mlp_b2, mlp_w3, mlp_b3;

    static BackboneGradients zeros_like(const Backbone& b) {
        BackboneGradients g;
        for (const auto& a : b.item_field_embed) g.item_field_embed.emplace_back(a.size(), 0.0);
        for (const auto& a : b.target_field_embed) g.target_field_embed.emplace_back(a.size(), 0.0);
        for (const auto& a : b.item_field_w1) g.item_field_w1.emplace_back(a.size(), 0.0);
        for (const auto& a : b.target_field_w1) g.target_field_w1.emplace_back(a.size(), 0.0);
        g.item_id_embed.assign(b.item_id_embed.size(), 0.0);
        g.mlp_w1.assign(b.mlp_w1.size(), 0.0);
        g.mlp_b1.assign(b.mlp_b1.size(), 0.0);
        g.mlp_w2.assign(b.mlp_w2.size(), 0.0);
        g.mlp_b2.assign(b.mlp_b2.size(), 0.0);
        g.mlp_w3.assign(b.mlp_w3.size(), 0.0);
        g.mlp_b3.assign(b.mlp_b3.size(), 0.0);
        return g;
    }

    template <class F>
    void each_array_mut(F&& f) {
        for (std::size_t i = 0; i < item_field_embed.size(); ++i) {
            f(item_field_embed[i]);
            f(item_field_w1[i]);
        }
        for (std::size_t i = 0; i < target_field_embed.size(); ++i) {
            f(target_field_embed[i]);
            f(target_field_w1[i]);
        }
        f(item_id_embed);
        f(mlp_w1);
        f(mlp_b1);
        f(mlp_w2);
        f(mlp_b2);
        f(mlp_w3);
        f(mlp_b3);
    }
};

enum class GradScope { embedding_only, all };

struct GradientBundle {
    double loss = 0.0;                    // mean BCE over the batch
    std::vector<double> wrt_embedding;    // dL/de
    std::optional<BackboneGradients> wrt_params;
};

// ----------------------------- field index resolution -----------------------------

struct FieldIndices {
    std::vector<int> item;    // per item feature field
    std::vector<int> target;  // per target field, id field first
};

inline FieldIndices index_fields(const Backbone& b, const Item& item, const TargetEntity& target) {
    FieldIndices out;
    if (item.features.size() != b.item_fields.size())
        fail("item " + item.id + " has " + std::to_string(item.features.size()) +
             " features, backbone expects " + std::to_string(b.item_fields.size()));
    for (std::size_t f = 0; f < b.item_fields.size(); ++f) {
        if (item.features[f].name != b.item_fields[f].field_name)
            fail("item field mismatch: `" + item.features[f].name + "` vs `" +
                 b.item_fields[f].field_name + "`");
        out.item.push_back(b.item_fields[f].lookup(item.features[f].content));
    }
    out.target.push_back(b.target_fields[0].lookup(target.id));
    if (target.features.size() + 1 != b.target_fields.size())
        fail("target " + target.id + " has " + std::to_string(target.features.size()) +
             " features, backbone expects " + std::to_string(b.target_fields.size() - 1));
    for (std::size_t f = 0; f + 1 < b.target_fields.size(); ++f) {
        if (target.features[f].name != b.target_fields[f + 1].field_name)
            fail("target field mismatch: `" + target.features[f].name + "` vs `" +
                 b.target_fields[f + 1].field_name + "`");
        out.target.push_back(b.target_fields[f + 1].lookup(target.features[f].content));
    }
    return out;
}

inline FieldIndices index_interaction(const Backbone& b, const Corpus& corpus,
                                      const Interaction& rec) {
    return index_fields(b, corpus.item(rec.item_id), corpus.target(rec.target_id));
}

// ----------------------------- forward -----------------------------

struct ScoreBreakdown {
    double logit = 0.0;
    double probability = 0.5;
    double first_order = 0.0;
    double fm = 0.0;
    double mlp = 0.0;
};

namespace detail {

// Forward-pass cache reused by the backward pass.
struct BackboneTrace {
    std::vector<double> x;       // field vectors, concatenated (= MLP input)
    std::vector<double> sum_x;   // sum of field vectors
    std::vector<double> z1_pre, z1, z2_pre, z2;
    double sum_sq = 0.0;
    ScoreBreakdown score;
};

inline void check_index(int idx, int vocab_size, const std::string& field) {
    if (idx < 0 || idx >= vocab_size)
        fail("index " + std::to_string(idx) + " out of range for field " + field + " (vocab " +
             std::to_string(vocab_size) + ")");
}

inline void backbone_forward(const Backbone& b, std::span<const double> e, const FieldIndices& idx,
                             BackboneTrace& t) {
    const int d = b.embed_dim;
    if (static_cast<int>(e.size()) != d)
        fail("item embedding has dim " + std::to_string(e.size()) + ", backbone expects " +
             std::to_string(d));
    if (idx.item.size() != b.item_fields.size() || idx.target.size() != b.target_fields.size())
        fail("field index count does not match backbone fields");

    const int n_fields = b.n_fields();
    t.x.assign(static_cast<std::size_t>(n_fields) * d, 0.0);
    t.sum_x.assign(d, 0.0);
    t.sum_sq = 0.0;
    double first_order = 0.0;

    auto place = [&](int slot, const double* src) {
        double* dst = t.x.data() + static_cast<std::size_t>(slot) * d;
        for (int i = 0; i < d; ++i) {
            dst[i] = src[i];
            t.sum_x[i] += src[i];
            t.sum_sq += src[i] * src[i];
        }
    };

    place(0, e.data());
    int slot = 1;
    for (std::size_t f = 0; f < b.item_fields.size(); ++f, ++slot) {
        check_index(idx.item[f], b.item_fields[f].size(), b.item_fields[f].field_name);
        place(slot, b.item_field_embed[f].data() + static_cast<std::size_t>(idx.item[f]) * d);
        first_order += b.item_field_w1[f][static_cast<std::size_t>(idx.item[f])];
    }
    for (std::size_t f = 0; f < b.target_fields.size(); ++f, ++slot) {
        check_index(idx.target[f], b.target_fields[f].size(), b.target_fields[f].field_name);
        place(slot, b.target_field_embed[f].data() + static_cast<std::size_t>(idx.target[f]) * d);
        first_order += b.target_field_w1[f][static_cast<std::size_t>(idx.target[f])];
    }

    double norm_sq = 0.0;
    for (int i = 0; i < d; ++i) norm_sq += t.sum_x[i] * t.sum_x[i];
    const double fm = 0.5 * (norm_sq - t.sum_sq);

    // MLP
    const int in_dim = b.mlp_in_dim();
    t.z1_pre.assign(b.hidden1, 0.0);
    t.z1.assign(b.hidden1, 0.0);
    for (int h = 0; h < b.hidden1; ++h) {
        const double* w = b.mlp_w1.data() + static_cast<std::size_t>(h) * in_dim;
        double acc = b.mlp_b1[h];
        for (int i = 0; i < in_dim; ++i) acc += w[i] * t.x[i];
        t.z1_pre[h] = acc;
        t.z1[h] = std::tanh(acc);
    }
    t.z2_pre.assign(b.hidden2, 0.0);
    t.z2.assign(b.hidden2, 0.0);
    for (int h = 0; h < b.hidden2; ++h) {
        const double* w = b.mlp_w2.data() + static_cast<std::size_t>(h) * b.hidden1;
        double acc = b.mlp_b2[h];
        for (int i = 0; i < b.hidden1; ++i) acc += w[i] * t.z1[i];
        t.z2_pre[h] = acc;
        t.z2[h] = std::tanh(acc);
    }
    double mlp_out = b.mlp_b3[0];
    for (int h = 0; h < b.hidden2; ++h) mlp_out += b.mlp_w3[h] * t.z2[h];

    t.score.first_order = first_order;
    t.score.fm = fm;
    t.score.mlp = mlp_out;
    t.score.logit = first_order + fm + mlp_out;
    t.score.probability = sigmoid(t.score.logit);
    if (!is_finite(t.score.logit)) fail("backbone forward produced a non-finite logit");
}

// Accumulates d(loss_scale * BCE(y, clamped p)) into grad_e and, when
// grads != nullptr, into every parameter gradient. The clamp derivative is
// exact: saturated probabilities contribute zero gradient.
inline void backbone_backward(const Backbone& b, const FieldIndices& idx, const BackboneTrace& t,
                              int label, double loss_scale, std::span<double> grad_e,
                              BackboneGradients* grads) {
    const int d = b.embed_dim;
    const double p = t.score.probability;
    double dlogit = 0.0;
    if (p > kProbClamp && p < 1.0 - kProbClamp) dlogit = loss_scale * (p - static_cast<double>(label));
    if (dlogit == 0.0) return;

    const int n_fields = b.n_fields();
    const int in_dim = b.mlp_in_dim();

    // MLP backward to its input
    std::vector<double> dz2(b.hidden2);
    for (int h = 0; h < b.hidden2; ++h) {
        const double dz2_post = dlogit * b.mlp_w3[h];
        dz2[h] = dz2_post * (1.0 - t.z2[h] * t.z2[h]);
        if (grads != nullptr) {
            grads->mlp_w3[h] += dlogit * t.z2[h];
        }
    }
    if (grads != nullptr) grads->mlp_b3[0] += dlogit;

    std::vector<double> dz1(b.hidden1, 0.0);
    for (int h = 0; h < b.hidden2; ++h) {
        const double* w = b.mlp_w2.data() + static_cast<std::size_t>(h) * b.hidden1;
        for (int i = 0; i < b.hidden1; ++i) dz1[i] += dz2[h] * w[i];
        if (grads != nullptr) {
            double* gw = grads->mlp_w2.data() + static_cast<std::size_t>(h) * b.hidden1;
            for (int i = 0; i < b.hidden1; ++i) gw[i] += dz2[h] * t.z1[i];
            grads->mlp_b2[h] += dz2[h];
        }
    }

    std::vector<double> dx(static_cast<std::size_t>(in_dim), 0.0);
    for (int h = 0; h < b.hidden1; ++h) {
        const double dz1_pre = dz1[h] * (1.0 - t.z1[h] * t.z1[h]);
        const double* w = b.mlp_w1.data() + static_cast<std::size_t>(h) * in_dim;
        for (int i = 0; i < in_dim; ++i) dx[i] += dz1_pre * w[i];
        if (grads != nullptr) {
            double* gw = grads->mlp_w1.data() + static_cast<std::size_t>(h) * in_dim;
            for (int i = 0; i < in_dim; ++i) gw[i] += dz1_pre * t.x[i];
            grads->mlp_b1[h] += dz1_pre;
        }
    }

    // FM backward: d fm / d x_f = sum_x - x_f
    for (int f = 0; f < n_fields; ++f) {
        double* dxf = dx.data() + static_cast<std::size_t>(f) * d;
        const double* xf = t.x.data() + static_cast<std::size_t>(f) * d;
        for (int i = 0; i < d; ++i) dxf[i] += dlogit * (t.sum_x[i] - xf[i]);
    }

    // Route field-vector gradients
    for (int i = 0; i < d; ++i) grad_e[i] += dx[i];
    if (grads != nullptr) {
        int slot = 1;
        for (std::size_t f = 0; f < b.item_fields.size(); ++f, ++slot) {
            double* row =
                grads->item_field_embed[f].data() + static_cast<std::size_t>(idx.item[f]) * d;
            const double* dxf = dx.data() + static_cast<std::size_t>(slot) * d;
            for (int i = 0; i < d; ++i) row[i] += dxf[i];
            grads->item_field_w1[f][static_cast<std::size_t>(idx.item[f])] += dlogit;
        }
        for (std::size_t f = 0; f < b.target_fields.size(); ++f, ++slot) {
            double* row =
                grads->target_field_embed[f].data() + static_cast<std::size_t>(idx.target[f]) * d;
            const double* dxf = dx.data() + static_cast<std::size_t>(slot) * d;
            for (int i = 0; i < d; ++i) row[i] += dxf[i];
            grads->target_field_w1[f][static_cast<std::size_t>(idx.target[f])] += dlogit;
        }
    }
}

}  // namespace detail

inline ScoreBreakdown forward(const Backbone& b, std::span<const double> e,
                              const FieldIndices& idx) {
    detail::BackboneTrace t;
    detail::backbone_forward(b, e, idx, t);
    return t.score;
}

inline ScoreBreakdown forward(const Backbone& b, std::span<const double> e, const Corpus& corpus,
                              const Interaction& rec) {
    return forward(b, e, index_interaction(b, corpus, rec));
}

// ----------------------------- losses and gradients -----------------------------

inline double support_loss(const Backbone& b, std::span<const double> e,
                           const std::vector<Interaction>& support, const Corpus& corpus) {
    if (support.empty()) fail("support_loss: empty interaction set");
    double total = 0.0;
    for (const auto& rec : support)
        total += bce(rec.label, forward(b, e, corpus, rec).probability);
    return total / static_cast<double>(support.size());
}

// Exact reverse-mode gradient of the mean BCE over the batch, summed in
// batch order.
inline GradientBundle grad(const Backbone& b, std::span<const double> e,
                           const std::vector<Interaction>& batch, const Corpus& corpus,
                           GradScope scope) {
    if (batch.empty()) fail("grad: empty batch");
    GradientBundle out;
    out.wrt_embedding.assign(b.embed_dim, 0.0);
    if (scope == GradScope::all) out.wrt_params = BackboneGradients::zeros_like(b);

    const double scale = 1.0 / static_cast<double>(batch.size());
    detail::BackboneTrace t;
    for (const auto& rec : batch) {
        const auto idx = index_interaction(b, corpus, rec);
        detail::backbone_forward(b, e, idx, t);
        out.loss += scale * bce(rec.label, t.score.probability);
        detail::backbone_backward(b, idx, t, rec.label, scale, out.wrt_embedding,
                                  scope == GradScope::all ? &*out.wrt_params : nullptr);
    }
    for (double v : out.wrt_embedding)
        if (!is_finite(v)) fail("grad: non-finite embedding gradient");
    return out;
}

// ----------------------------- optimizer -----------------------------

struct AdamState {
    std::vector<std::vector<double>> m, v;
    std::int64_t t = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    template <class Model>
    static AdamState zeros_like(Model& model) {
        AdamState st;
        model.each_array_mut([&](std::vector<double>& arr) {
            st.m.emplace_back(arr.size(), 0.0);
            st.v.emplace_back(arr.size(), 0.0);
        });
        return st;
    }
};

// One Adam step; `params` and `grads` must enumerate arrays in the same
// order as when the state was created.
template <class Model, class Grads>
inline void adam_step(Model& model, Grads& grads, AdamState& st, double lr) {
    st.t += 1;
    const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.t));
    const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.t));
    std::size_t k = 0;
    std::vector<std::vector<double>*> grad_arrays;
    grads.each_array_mut([&](std::vector<double>& arr) { grad_arrays.push_back(&arr); });
    model.each_array_mut([&](std::vector<double>& arr) {
        std::vector<double>& g = *grad_arrays[k];
        std::vector<double>& m = st.m[k];
        std::vector<double>& v = st.v[k];
        for (std::size_t i = 0; i < arr.size(); ++i) {
            m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * g[i];
            v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * g[i] * g[i];
            arr[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + st.eps);
        }
        ++k;
    });
}

// ----------------------------- pretraining -----------------------------

struct PretrainResult {
    Backbone model;
    double initial_loss = 0.0;
    std::vector<double> epoch_loss;
};

namespace detail {

inline Backbone init_backbone(const Corpus& corpus, const std::set<std::string>& old_ids,
                              const TrainConfig& cfg) {
    if (corpus.items().empty()) fail("pretrain: corpus has no items");
    Backbone b;
    b.embed_dim = cfg.embed_dim;
    b.hidden1 = cfg.hidden1;
    b.hidden2 = cfg.hidden2;

    // Item feature vocabularies come from old items only: new items must
    // hit the OOV row exactly as they would in production.
    const auto& schema = corpus.items().front().features;
    std::vector<std::set<std::string>> item_values(schema.size());
    for (const auto& item : corpus.items()) {
        if (!old_ids.count(item.id)) continue;
        for (std::size_t f = 0; f < schema.size() && f < item.features.size(); ++f)
            item_values[f].insert(item.features[f].content);
    }
    for (std::size_t f = 0; f < schema.size(); ++f)
        b.item_fields.push_back(FieldVocab::build(schema[f].name, item_values[f]));

    // Target vocabularies come from the full target table.
    std::set<std::string> target_ids;
    for (const auto& t : corpus.targets()) target_ids.insert(t.id);
    b.target_fields.push_back(FieldVocab::build("__target_id__", target_ids));
    if (!corpus.targets().empty()) {
        const auto& tschema = corpus.targets().front().features;
        std::vector<std::set<std::string>> tvalues(tschema.size());
        for (const auto& t : corpus.targets())
            for (std::size_t f = 0; f < tschema.size() && f < t.features.size(); ++f)
                tvalues[f].insert(t.features[f].content);
        for (std::size_t f = 0; f < tschema.size(); ++f)
            b.target_fields.push_back(FieldVocab::build(tschema[f].name, tvalues[f]));
    }

    b.item_ids.assign(old_ids.begin(), old_ids.end());
    for (std::size_t i = 0; i < b.item_ids.size(); ++i)
        b.item_rows[b.item_ids[i]] = static_cast<int>(i);

    Rng rng{subseed(cfg.seed, "backbone:init")};
    const int d = b.embed_dim;
    auto embed_table = [&](int vocab) {
        std::vector<double> t(static_cast<std::size_t>(vocab) * d);
        for (double& v : t) v = rng.uniform(-0.01, 0.01);
        return t;
    };
    for (const auto& f : b.item_fields) {
        b.item_field_embed.push_back(embed_table(f.size()));
        std::vector<double> w(f.size());
        for (double& v : w) v = rng.uniform(-0.01, 0.01);
        b.item_field_w1.push_back(std::move(w));
    }
    for (const auto& f : b.target_fields) {
        b.target_field_embed.push_back(embed_table(f.size()));
        std::vector<double> w(f.size());
        for (double& v : w) v = rng.uniform(-0.01, 0.01);
        b.target_field_w1.push_back(std::move(w));
    }
    b.item_id_embed = embed_table(static_cast<int>(b.item_ids.size()));

    auto mlp_layer = [&](int rows, int cols, std::vector<double>& w, std::vector<double>& bias) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(cols));
        w.resize(static_cast<std::size_t>(rows) * cols);
        for (double& v : w) v = rng.uniform(-bound, bound);
        bias.assign(rows, 0.0);
    };
    mlp_layer(b.hidden1, b.mlp_in_dim(), b.mlp_w1, b.mlp_b1);
    mlp_layer(b.hidden2, b.hidden1, b.mlp_w2, b.mlp_b2);
    mlp_layer(1, b.hidden2, b.mlp_w3, b.mlp_b3);
    return b;
}

}  // namespace detail

// Minimizes mean BCE over all old-item interactions with mini-batch Adam.
// Old items score with their own id-table row, which is trained here;
// everything else about the gradient is the shared backward pass.
inline PretrainResult pretrain(const Corpus& corpus, const std::vector<Task>& tasks,
                               const TrainConfig& cfg) {
    std::set<std::string> old_ids;
    for (const auto& t : tasks) old_ids.insert(t.item_id);
    if (old_ids.empty()) fail("pretrain: no tasks given");

    PretrainResult result;
    result.model = detail::init_backbone(corpus, old_ids, cfg);
    Backbone& b = result.model;

    struct Example {
        FieldIndices idx;
        int row;
        int label;
    };
    std::vector<Example> examples;
    for (const auto& id : old_ids) {
        const int row = b.item_rows.at(id);
        for (const auto& rec : corpus.records(id))
            examples.push_back({index_interaction(b, corpus, rec), row, rec.label});
    }
    if (examples.empty()) fail("pretrain: old items have no interactions");

    const int d = b.embed_dim;
    auto row_span = [&](int row) {
        return std::span<const double>{b.item_id_embed.data() + static_cast<std::size_t>(row) * d,
                                       static_cast<std::size_t>(d)};
    };

    detail::BackboneTrace trace;
    auto full_loss = [&]() {
        double total = 0.0;
        for (const auto& ex : examples) {
            detail::backbone_forward(b, row_span(ex.row), ex.idx, trace);
            total += bce(ex.label, trace.score.probability);
        }
        return total / static_cast<double>(examples.size());
    };

    result.initial_loss = full_loss();
    AdamState adam = AdamState::zeros_like(b);
    BackboneGradients grads = BackboneGradients::zeros_like(b);
    std::vector<std::size_t> order(examples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    int bad_epochs = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng rng{subseed(cfg.seed, "pretrain:epoch:" + std::to_string(epoch))};
        rng.shuffle(order);
        double epoch_total = 0.0;
        std::size_t pos = 0;
        while (pos < order.size()) {
            const std::size_t batch_end =
                std::min(order.size(), pos + static_cast<std::size_t>(cfg.batch_size));
            const double scale = 1.0 / static_cast<double>(batch_end - pos);
            grads.each_array_mut([](std::vector<double>& a) { std::fill(a.begin(), a.end(), 0.0); });
            for (std::size_t k = pos; k < batch_end; ++k) {
                const Example& ex = examples[order[k]];
                detail::backbone_forward(b, row_span(ex.row), ex.idx, trace);
                epoch_total += bce(ex.label, trace.score.probability);
                std::span<double> grad_row{
                    grads.item_id_embed.data() + static_cast<std::size_t>(ex.row) * d,
                    static_cast<std::size_t>(d)};
                detail::backbone_backward(b, ex.idx, trace, ex.label, scale, grad_row, &grads);
            }
            adam_step(b, grads, adam, cfg.step);
            pos = batch_end;
        }
        const double epoch_mean = epoch_total / static_cast<double>(examples.size());
        if (!is_finite(epoch_mean)) fail("pretrain: non-finite loss at epoch " + std::to_string(epoch));
        result.epoch_loss.push_back(epoch_mean);
        log_info("pretrain epoch " + std::to_string(epoch) + " loss " + format_sig9(epoch_mean));

        if (epoch_mean > 10.0 * result.initial_loss) {
            if (++bad_epochs >= 3)
                fail("pretrain: diverged (loss " + format_sig9(epoch_mean) + " vs initial " +
                     format_sig9(result.initial_loss) + " for 3 consecutive epochs)");
        } else {
            bad_epochs = 0;
        }
    }
    return result;
}

// ----------------------------- checkpoints -----------------------------

inline void save_backbone(const std::string& path, const Backbone& b) {
    nlohmann::ordered_json meta;
    meta["embed_dim"] = b.embed_dim;
    meta["hidden"] = {b.hidden1, b.hidden2};
    auto field_json = [](const std::vector<FieldVocab>& fields) {
        nlohmann::ordered_json arr = nlohmann::ordered_json::array();
        for (const auto& f : fields)
            arr.push_back(nlohmann::ordered_json{{"name", f.field_name}, {"values", f.values}});
        return arr;
    };
    meta["item_fields"] = field_json(b.item_fields);
    meta["target_fields"] = field_json(b.target_fields);
    meta["item_ids"] = b.item_ids;

    std::vector<NamedTensor> tensors;
    b.each_array([&](const std::string& name, const std::vector<double>& arr) {
        tensors.push_back({name, {arr.size()}, arr});
    });
    write_checkpoint(path, "backbone", meta, tensors);
}

inline Backbone load_backbone(const std::string& path) {
    const Checkpoint ckpt = read_checkpoint(path, "backbone");
    Backbone b;
    b.embed_dim = ckpt.header.at("embed_dim").get<int>();
    b.hidden1 = ckpt.header.at("hidden")[0].get<int>();
    b.hidden2 = ckpt.header.at("hidden")[1].get<int>();
    auto load_fields = [](const nlohmann::json& arr) {
        std::vector<FieldVocab> fields;
        for (const auto& fj : arr) {
            FieldVocab f;
            f.field_name = fj.at("name").get<std::string>();
            for (const auto& v : fj.at("values")) f.values.push_back(v.get<std::string>());
            for (std::size_t i = 0; i < f.values.size(); ++i)
                f.index[f.values[i]] = static_cast<int>(i) + 1;
            fields.push_back(std::move(f));
        }
        return fields;
    };
    b.item_fields = load_fields(ckpt.header.at("item_fields"));
    b.target_fields = load_fields(ckpt.header.at("target_fields"));
    for (const auto& id : ckpt.header.at("item_ids")) b.item_ids.push_back(id.get<std::string>());
    for (std::size_t i = 0; i < b.item_ids.size(); ++i)
        b.item_rows[b.item_ids[i]] = static_cast<int>(i);

    // Pre-size arrays, then fill from tensors by name so the declared order
    // is the only coupling.
    for (const auto& f : b.item_fields) {
        b.item_field_embed.emplace_back(static_cast<std::size_t>(f.size()) * b.embed_dim);
        b.item_field_w1.emplace_back(static_cast<std::size_t>(f.size()));
    }
    for (const auto& f : b.target_fields) {
        b.target_field_embed.emplace_back(static_cast<std::size_t>(f.size()) * b.embed_dim);
        b.target_field_w1.emplace_back(static_cast<std::size_t>(f.size()));
    }
    b.item_id_embed.resize(b.item_ids.size() * static_cast<std::size_t>(b.embed_dim));
    b.mlp_w1.resize(static_cast<std::size_t>(b.hidden1) * b.mlp_in_dim());
    b.mlp_b1.resize(b.hidden1);
    b.mlp_w2.resize(static_cast<std::size_t>(b.hidden2) * b.hidden1);
    b.mlp_b2.resize(b.hidden2);
    b.mlp_w3.resize(b.hidden2);
    b.mlp_b3.resize(1);

    b.each_array_mut([&, k = std::size_t{0}](std::vector<double>& arr) mutable {
        const NamedTensor& t = ckpt.tensors.at(k++);
        if (t.data.size() != arr.size())
            fail(path + ": tensor " + t.name + " has " + std::to_string(t.data.size()) +
                 " values, expected " + std::to_string(arr.size()));
        arr = t.data;
    });
    return b;
}

}  // namespace emerflow

#endif  // EMERFLOW_BACKBONE_HPP
