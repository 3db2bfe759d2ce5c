#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "umoe/blocks.hpp"

namespace umoe {

// Flat token stream. File format: magic "UMOETOKS", u32 vocab, u64 count,
// count little-endian u32 ids.
struct TokenCorpus {
    uint32_t vocab_size = 0;
    std::vector<uint32_t> ids;
};

TokenCorpus load_corpus(const std::string& path);
void save_corpus(const TokenCorpus& corpus, const std::string& path);

// Seeded periodic fixture for overfit runs; no external data needed.
TokenCorpus synthetic_corpus(uint32_t vocab, size_t count, uint64_t seed);

// Checkpoint: magic "UMOECKPT", u32 version, embedded flat config, named
// tensor table, little-endian f32 payload (row-major).
void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

struct TrainOptions {
    int64_t steps = 200;
    uint64_t seed = 1;
    AdamOptions adam;
    int batch_windows = 1;
    int stride = 0;  // 0 = context_len
};

struct StepMetrics {
    int64_t step = 0;
    double ce = 0.0;
    double aux = 0.0;
    int64_t tokens = 0;
};

struct TrainResult {
    Model model;
    std::vector<StepMetrics> log;
};

// Deterministic in (seed, cfg, corpus). Windows are context_len tokens,
// sampled sequentially with the fixed stride, wrapping at the corpus end.
TrainResult train(const ModelConfig& cfg, const TokenCorpus& corpus, const TrainOptions& opt);

// Greedy argmax decode through the incremental caches.
std::vector<int32_t> generate(const Model& model, std::span<const int32_t> prompt, int n_new);

}  // namespace umoe
