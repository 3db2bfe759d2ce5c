#include "umoe/runtime.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <sstream>

#include "umoe/rng.hpp"

namespace umoe {

namespace {

constexpr char kCorpusMagic[8] = {'U', 'M', 'O', 'E', 'T', 'O', 'K', 'S'};
constexpr char kCkptMagic[8] = {'U', 'M', 'O', 'E', 'C', 'K', 'P', 'T'};
constexpr uint32_t kCkptVersion = 1;

void put_u32(std::string& buf, uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& buf, uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
    const std::string& buf;
    size_t pos = 0;
    std::string err_code;

    explicit Reader(const std::string& b, std::string code) : buf(b), err_code(std::move(code)) {}

    void need(size_t n) {
        if (pos + n > buf.size()) fail(err_code, "file truncated");
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    std::string bytes(size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

std::string read_file(const std::string& path, const std::string& err_code) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(err_code, "cannot open '" + path + "'");
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void write_file(const std::string& path, const std::string& data, const std::string& err_code) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(err_code, "cannot write '" + path + "'");
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) fail(err_code, "write failed for '" + path + "'");
}

uint32_t f32_bits(double v) {
    float f = static_cast<float>(v);
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    return bits;
}

double f32_from_bits(uint32_t bits) {
    float f;
    std::memcpy(&f, &bits, 4);
    return static_cast<double>(f);
}

}  // namespace

TokenCorpus load_corpus(const std::string& path) {
    const std::string data = read_file(path, "BadMagic");
    Reader r(data, "BadMagic");
    if (r.bytes(8) != std::string(kCorpusMagic, 8)) fail("BadMagic", "not a token corpus file");
    TokenCorpus c;
    c.vocab_size = r.u32();
    const uint64_t count = r.u64();
    c.ids.reserve(count);
    for (uint64_t i = 0; i < count; ++i) {
        const uint32_t id = r.u32();
        if (id >= c.vocab_size)
            fail("IdOutOfVocab", "token id " + std::to_string(id) + " >= vocab " +
                                     std::to_string(c.vocab_size));
        c.ids.push_back(id);
    }
    return c;
}

void save_corpus(const TokenCorpus& corpus, const std::string& path) {
    std::string buf(kCorpusMagic, 8);
    put_u32(buf, corpus.vocab_size);
    put_u64(buf, corpus.ids.size());
    for (uint32_t id : corpus.ids) put_u32(buf, id);
    write_file(path, buf, "IoError");
}

TokenCorpus synthetic_corpus(uint32_t vocab, size_t count, uint64_t seed) {
    // Seeded periodic motif; deterministic next-token structure a small
    // model can overfit within a few hundred steps.
    TokenCorpus c;
    c.vocab_size = vocab;
    c.ids.reserve(count);
    Rng rng(seed);
    const size_t period = 48;
    std::vector<uint32_t> motif(period);
    for (size_t i = 0; i < period; ++i) motif[i] = static_cast<uint32_t>(rng.next_below(vocab));
    for (size_t i = 0; i < count; ++i) c.ids.push_back(motif[i % period]);
    return c;
}

void save_checkpoint(const Model& model, const std::string& path) {
    std::ostringstream cfg_text;
    store_config(model.cfg, cfg_text);
    const std::string cfg_blob = cfg_text.str();

    auto params = param_list(model);
    std::string payload;
    std::string table;
    put_u32(table, static_cast<uint32_t>(params.size()));
    uint64_t offset = 0;
    for (const auto& [name, m] : params) {
        put_u32(table, static_cast<uint32_t>(name.size()));
        table += name;
        table.push_back(0);  // dtype f32
        table.push_back(2);  // ndim
        put_u64(table, static_cast<uint64_t>(m->rows));
        put_u64(table, static_cast<uint64_t>(m->cols));
        put_u64(table, offset);
        for (double v : m->data) put_u32(payload, f32_bits(v));
        offset += m->size() * 4;
    }

    std::string buf(kCkptMagic, 8);
    put_u32(buf, kCkptVersion);
    put_u32(buf, static_cast<uint32_t>(cfg_blob.size()));
    buf += cfg_blob;
    buf += table;
    put_u64(buf, payload.size());
    buf += payload;
    write_file(path, buf, "IoError");
}

Model load_checkpoint(const std::string& path) {
    const std::string data = read_file(path, "CorruptCheckpoint");
    Reader r(data, "CorruptCheckpoint");
    if (r.bytes(8) != std::string(kCkptMagic, 8))
        fail("CorruptCheckpoint", "not a checkpoint file");
    const uint32_t version = r.u32();
    if (version != kCkptVersion)
        fail("UnsupportedVersion", "checkpoint version " + std::to_string(version));
    const uint32_t cfg_len = r.u32();
    std::istringstream cfg_in(r.bytes(cfg_len));
    const ModelConfig cfg = load_config(cfg_in);

    Model model = init_model(cfg, 0);
    auto params = param_list(model);

    const uint32_t count = r.u32();
    if (count != params.size())
        fail("CorruptCheckpoint", "tensor count mismatch: file has " + std::to_string(count) +
                                      ", config implies " + std::to_string(params.size()));
    struct Entry {
        std::string name;
        uint64_t rows, cols, offset;
    };
    std::vector<Entry> entries(count);
    for (auto& e : entries) {
        const uint32_t name_len = r.u32();
        e.name = r.bytes(name_len);
        const std::string meta = r.bytes(2);
        if (meta[0] != 0 || meta[1] != 2) fail("CorruptCheckpoint", "unsupported tensor encoding");
        e.rows = r.u64();
        e.cols = r.u64();
        e.offset = r.u64();
    }
    const uint64_t payload_len = r.u64();
    const size_t payload_start = r.pos;
    r.need(payload_len);

    uint64_t expected_offset = 0;
    for (size_t i = 0; i < entries.size(); ++i) {
        const Entry& e = entries[i];
        const auto& [name, m] = params[i];
        if (e.name != name)
            fail("CorruptCheckpoint", "tensor '" + e.name + "' does not match expected '" +
                                          name + "'");
        if (e.rows != static_cast<uint64_t>(m->rows) || e.cols != static_cast<uint64_t>(m->cols))
            fail("CorruptCheckpoint", "tensor '" + e.name + "' has unexpected shape");
        if (e.offset != expected_offset)
            fail("CorruptCheckpoint", "tensor '" + e.name + "' has overlapping or gapped offset");
        const uint64_t bytes = e.rows * e.cols * 4;
        if (e.offset + bytes > payload_len) fail("CorruptCheckpoint", "payload truncated");
        Reader pr(data, "CorruptCheckpoint");
        pr.pos = payload_start + e.offset;
        for (double& v : m->data) v = f32_from_bits(pr.u32());
        expected_offset += bytes;
    }
    if (expected_offset != payload_len) fail("CorruptCheckpoint", "payload size mismatch");
    return model;
}

TrainResult train(const ModelConfig& cfg, const TokenCorpus& corpus, const TrainOptions& opt) {
    validate(cfg);
    if (static_cast<int64_t>(corpus.ids.size()) < cfg.context_len)
        fail("CorpusTooSmall", "corpus has " + std::to_string(corpus.ids.size()) +
                                   " tokens, context_len is " + std::to_string(cfg.context_len));
    if (corpus.vocab_size > cfg.vocab_size)
        fail("IdOutOfVocab", "corpus vocabulary exceeds model vocabulary");

    const int window = cfg.context_len;
    const int stride = opt.stride > 0 ? opt.stride : window;
    const size_t n_starts = corpus.ids.size() - window + 1;

    TrainResult result;
    result.model = init_model(cfg, opt.seed);
    AdamState adam = make_adam_state(result.model);

    size_t cursor = 0;
    for (int64_t step = 0; step < opt.steps; ++step) {
        GradientSet grads = zero_like(result.model);
        double ce = 0.0, aux = 0.0;
        int64_t tokens_seen = 0;
        for (int b = 0; b < opt.batch_windows; ++b) {
            const size_t start = cursor % n_starts;
            cursor += stride;
            std::vector<int32_t> inputs(window - 1), targets(window - 1);
            for (int i = 0; i < window - 1; ++i) {
                inputs[i] = static_cast<int32_t>(corpus.ids[start + i]);
                targets[i] = static_cast<int32_t>(corpus.ids[start + i + 1]);
            }
            LossBreakdown lb;
            GradientSet g = model_backward(result.model, inputs, targets, &lb);
            ce += lb.ce;
            aux += lb.aux;
            tokens_seen += static_cast<int64_t>(inputs.size());
            auto gall = param_list(grads);
            auto gone = param_list(g);
            for (size_t p = 0; p < gall.size(); ++p)
                for (size_t i = 0; i < gall[p].second->data.size(); ++i)
                    gall[p].second->data[i] += gone[p].second->data[i];
        }
        const double inv_b = 1.0 / opt.batch_windows;
        auto gall = param_list(grads);
        for (auto& [name, m] : gall)
            for (double& v : m->data) v *= inv_b;
        adam_step(result.model, grads, adam, opt.adam);
        result.log.push_back({step, ce * inv_b, aux * inv_b, tokens_seen});
    }
    return result;
}

std::vector<int32_t> generate(const Model& model, std::span<const int32_t> prompt, int n_new) {
    std::vector<int32_t> out(prompt.begin(), prompt.end());
    if (n_new == 0) return out;
    if (prompt.empty()) fail("InvalidArgument", "generate needs a non-empty prompt");
    if (static_cast<int>(prompt.size()) + n_new > model.cfg.context_len)
        fail("ContextOverflow", "prompt plus generated tokens exceed context_len");

    DecodeState state = make_decode_state(model);
    Vec logits;
    for (int32_t t : prompt) logits = decode_step(model, state, t);
    for (int i = 0; i < n_new; ++i) {
        const int32_t next = static_cast<int32_t>(
            std::max_element(logits.begin(), logits.end()) - logits.begin());
        out.push_back(next);
        if (i + 1 < n_new) logits = decode_step(model, state, next);
    }
    return out;
}

}  // namespace umoe
