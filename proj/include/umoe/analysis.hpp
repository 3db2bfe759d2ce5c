#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "umoe/blocks.hpp"

namespace umoe {

// (layer, sublayer, expert, token id). sublayer: 0 = attention, 1 = ffn.
using StatsKey = std::tuple<int, int, int, int32_t>;

// Routed probability mass per (layer, sublayer, expert, token id). Mass is
// held in 2^-32 fixed point so partial accumulations merge exactly
// (double-precision sums are not partition invariant).
struct ExpertTokenStats {
    struct Cell {
        int64_t mass_fp = 0;
        int64_t count = 0;
        double mass() const { return static_cast<double>(mass_fp) * 0x1.0p-32; }
    };
    std::map<StatsKey, Cell> cells;

    void add(int layer, int sublayer, int expert, int32_t token, double gate);
    void merge(const ExpertTokenStats& other);
    bool operator==(const ExpertTokenStats& other) const;
};

// Adds every (token id -> expert) routing event of one forward trace.
void accumulate_routing(ExpertTokenStats& stats, const ForwardTrace& trace,
                        std::span<const int32_t> tokens);

struct RankedToken {
    int32_t token = 0;
    double mass = 0.0;
    int64_t count = 0;
};

// Token ids by accumulated mass, descending, ascending-id tie-break.
// Throws Error("UnknownExpert") when the (layer, sublayer, expert) triple
// has no recorded events.
std::vector<RankedToken> top_tokens(const ExpertTokenStats& stats, int layer, int sublayer,
                                    int expert, int k);
// Same slice ranked by hit count instead of mass.
std::vector<RankedToken> top_tokens_by_count(const ExpertTokenStats& stats, int layer,
                                             int sublayer, int expert, int k);

std::string stats_to_json(const ExpertTokenStats& stats, int top_k);

struct AttnMapEntry {
    int expert = -1;
    double router_score = 0.0;
    Vec row;  // length = tokens, causal (zeros beyond the query position)
};

// Per layer: the top_m experts at one query position ranked by router
// score, each with its attention row — computed regardless of whether the
// expert was activated.
struct AttnMapDump {
    int position = 0;
    std::vector<std::vector<AttnMapEntry>> layers;  // [layer][rank]
};

AttnMapDump dump_attention_maps(const Model& model, std::span<const int32_t> tokens, int position,
                                int top_m);

// Rank-aligned sums across layers: summed attention rows and summed router
// scores per rank.
struct LayerwiseAccumulation {
    int position = 0;
    std::vector<Vec> summed_rows;  // [rank][position]
    Vec score_sums;                // [rank]
};

LayerwiseAccumulation accumulate_layerwise(const Model& model, std::span<const int32_t> tokens,
                                           int position, int top_m);

std::string dump_to_json(const AttnMapDump& dump);
// Heat-map grid: one line per (layer, rank), one column per position.
std::string dump_to_csv(const AttnMapDump& dump);
std::string layerwise_to_json(const LayerwiseAccumulation& acc);

}  // namespace umoe
