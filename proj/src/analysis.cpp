#include "umoe/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "json.hpp"
#include "umoe/mixing.hpp"

namespace umoe {

static int64_t to_fixed(double v) {
    return static_cast<int64_t>(std::llround(v * 4294967296.0));
}

void ExpertTokenStats::add(int layer, int sublayer, int expert, int32_t token, double gate) {
    Cell& c = cells[{layer, sublayer, expert, token}];
    c.mass_fp += to_fixed(gate);
    c.count += 1;
}

void ExpertTokenStats::merge(const ExpertTokenStats& other) {
    for (const auto& [key, cell] : other.cells) {
        Cell& c = cells[key];
        c.mass_fp += cell.mass_fp;
        c.count += cell.count;
    }
}

bool ExpertTokenStats::operator==(const ExpertTokenStats& other) const {
    if (cells.size() != other.cells.size()) return false;
    auto it = other.cells.begin();
    for (const auto& [key, cell] : cells) {
        if (it->first != key || it->second.mass_fp != cell.mass_fp ||
            it->second.count != cell.count)
            return false;
        ++it;
    }
    return true;
}

void accumulate_routing(ExpertTokenStats& stats, const ForwardTrace& trace,
                        std::span<const int32_t> tokens) {
    for (size_t l = 0; l < trace.layers.size(); ++l) {
        const LayerTrace& lt = trace.layers[l];
        auto scan = [&](const std::vector<RoutingDecision>& routing, int sublayer) {
            for (size_t t = 0; t < routing.size(); ++t) {
                const RoutingDecision& d = routing[t];
                for (size_t j = 0; j < d.indices.size(); ++j)
                    stats.add(static_cast<int>(l), sublayer, d.indices[j], tokens[t], d.gates[j]);
            }
        };
        scan(lt.attn_routing, 0);
        scan(lt.ffn_routing, 1);
    }
}

static std::vector<RankedToken> ranked_slice(const ExpertTokenStats& stats, int layer,
                                             int sublayer, int expert, int k, bool by_count) {
    if (k < 1) fail("InvalidArgument", "k must be >= 1");
    std::vector<RankedToken> all;
    auto lo = stats.cells.lower_bound({layer, sublayer, expert, INT32_MIN});
    auto hi = stats.cells.upper_bound({layer, sublayer, expert, INT32_MAX});
    for (auto it = lo; it != hi; ++it)
        all.push_back({std::get<3>(it->first), it->second.mass(), it->second.count});
    if (all.empty())
        fail("UnknownExpert", "no routing events recorded for layer " + std::to_string(layer) +
                                  " sublayer " + std::to_string(sublayer) + " expert " +
                                  std::to_string(expert));
    std::sort(all.begin(), all.end(), [&](const RankedToken& a, const RankedToken& b) {
        if (by_count) {
            if (a.count != b.count) return a.count > b.count;
        } else {
            if (a.mass != b.mass) return a.mass > b.mass;
        }
        return a.token < b.token;
    });
    if (static_cast<int>(all.size()) > k) all.resize(k);
    return all;
}

std::vector<RankedToken> top_tokens(const ExpertTokenStats& stats, int layer, int sublayer,
                                    int expert, int k) {
    return ranked_slice(stats, layer, sublayer, expert, k, false);
}

std::vector<RankedToken> top_tokens_by_count(const ExpertTokenStats& stats, int layer,
                                             int sublayer, int expert, int k) {
    return ranked_slice(stats, layer, sublayer, expert, k, true);
}

std::string stats_to_json(const ExpertTokenStats& stats, int top_k) {
    nlohmann::json j;
    j["ranking"] = "mass";
    j["entries"] = nlohmann::json::array();
    // enumerate distinct (layer, sublayer, expert) slices in key order
    auto it = stats.cells.begin();
    while (it != stats.cells.end()) {
        const auto [layer, sublayer, expert, tok] = it->first;
        (void)tok;
        nlohmann::json entry;
        entry["layer"] = layer;
        entry["sublayer"] = sublayer == 0 ? "attention" : "ffn";
        entry["expert"] = expert;
        entry["top_by_mass"] = nlohmann::json::array();
        entry["top_by_count"] = nlohmann::json::array();
        for (const auto& r : top_tokens(stats, layer, sublayer, expert, top_k))
            entry["top_by_mass"].push_back(
                {{"token", r.token}, {"mass", r.mass}, {"count", r.count}});
        for (const auto& r : top_tokens_by_count(stats, layer, sublayer, expert, top_k))
            entry["top_by_count"].push_back(
                {{"token", r.token}, {"mass", r.mass}, {"count", r.count}});
        j["entries"].push_back(entry);
        it = stats.cells.upper_bound({layer, sublayer, expert, INT32_MAX});
    }
    return j.dump(2);
}

AttnMapDump dump_attention_maps(const Model& model, std::span<const int32_t> tokens, int position,
                                int top_m) {
    const ModelConfig& cfg = model.cfg;
    if (position < 0 || position >= static_cast<int>(tokens.size()))
        fail("IndexOutOfRange", "query position out of range");
    if (!cfg.attn_is_moe()) fail("InvalidArgument", "attention maps require MoE attention");
    if (top_m < 1) fail("InvalidArgument", "top_m must be >= 1");

    std::vector<Mat> inputs = collect_attn_inputs(model, tokens);
    const int n = static_cast<int>(tokens.size());
    AttnMapDump dump;
    dump.position = position;
    dump.layers.resize(cfg.n_layers);

    for (int l = 0; l < cfg.n_layers; ++l) {
        const LayerParams& lp = model.layers[l];
        const Mat& x_norm = inputs[l];
        if (!lp.attn.router) fail("InvalidArgument", "layer has no attention router");
        const int n_experts = lp.attn.router->w.rows;
        const int m = std::min(top_m, n_experts);
        // rank all experts by router score at the query position
        RoutingDecision dec = route(*lp.attn.router, x_norm.row(position), n_experts);

        Mat keys(n, cfg.key_dim);
        for (int s = 0; s < n; ++s) {
            Vec kp = vecmat(x_norm.row(s), lp.w_k);
            Vec kr = rope(kp, s, cfg.rope_base);
            std::copy(kr.begin(), kr.end(), keys.row(s).begin());
        }
        for (int rank = 0; rank < m; ++rank) {
            AttnMapEntry entry;
            entry.expert = dec.indices[rank];
            entry.router_score = dec.gates[rank];
            Vec qp = vecmat(x_norm.row(position), lp.w_q);
            if (lp.attn.lora) {
                const LoraQuery& lr = (*lp.attn.lora)[entry.expert];
                Vec u = vecmat(x_norm.row(position), lr.a);
                vecmat_acc(u, lr.b, qp);
            }
            Vec q = rope(qp, position, cfg.rope_base);
            Vec row = attn_weights(q, keys, cfg.key_dim, position);
            row.resize(n, 0.0);
            entry.row = std::move(row);
            dump.layers[l].push_back(std::move(entry));
        }
    }
    return dump;
}

LayerwiseAccumulation accumulate_layerwise(const Model& model, std::span<const int32_t> tokens,
                                           int position, int top_m) {
    AttnMapDump dump = dump_attention_maps(model, tokens, position, top_m);
    LayerwiseAccumulation acc;
    acc.position = position;
    const int ranks = dump.layers.empty() ? 0 : static_cast<int>(dump.layers[0].size());
    acc.summed_rows.assign(ranks, Vec(tokens.size(), 0.0));
    acc.score_sums.assign(ranks, 0.0);
    for (const auto& layer : dump.layers) {
        for (int r = 0; r < ranks; ++r) {
            axpy(1.0, layer[r].row, acc.summed_rows[r]);
            acc.score_sums[r] += layer[r].router_score;
        }
    }
    return acc;
}

std::string dump_to_json(const AttnMapDump& dump) {
    nlohmann::json j;
    j["position"] = dump.position;
    j["layers"] = nlohmann::json::array();
    for (const auto& layer : dump.layers) {
        nlohmann::json jl = nlohmann::json::array();
        for (const auto& e : layer)
            jl.push_back({{"expert", e.expert}, {"router_score", e.router_score}, {"row", e.row}});
        j["layers"].push_back(jl);
    }
    return j.dump(2);
}

std::string dump_to_csv(const AttnMapDump& dump) {
    std::ostringstream os;
    os << "layer,rank,expert,router_score";
    if (!dump.layers.empty() && !dump.layers[0].empty())
        for (size_t p = 0; p < dump.layers[0][0].row.size(); ++p) os << ",p" << p;
    os << "\n";
    for (size_t l = 0; l < dump.layers.size(); ++l)
        for (size_t r = 0; r < dump.layers[l].size(); ++r) {
            const AttnMapEntry& e = dump.layers[l][r];
            os << l << "," << r << "," << e.expert << "," << e.router_score;
            for (double v : e.row) os << "," << v;
            os << "\n";
        }
    return os.str();
}

std::string layerwise_to_json(const LayerwiseAccumulation& acc) {
    nlohmann::json j;
    j["position"] = acc.position;
    j["ranks"] = nlohmann::json::array();
    for (size_t r = 0; r < acc.summed_rows.size(); ++r)
        j["ranks"].push_back({{"rank", r},
                              {"score_sum", acc.score_sums[r]},
                              {"summed_row", acc.summed_rows[r]}});
    return j.dump(2);
}

}  // namespace umoe
