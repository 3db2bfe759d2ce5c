// Command-line front end: training, generation, cost profiling, algebraic
// self-checks, and routing analysis. All reports are JSON (stdout or --out);
// failures exit nonzero with an error JSON on stderr.

#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "umoe/analysis.hpp"
#include "umoe/profiler.hpp"
#include "umoe/rng.hpp"
#include "umoe/runtime.hpp"

using namespace umoe;
using nlohmann::json;

namespace {

void emit(const std::string& text, const std::string& out_path) {
    if (out_path.empty()) {
        std::cout << text << "\n";
    } else {
        std::ofstream out(out_path);
        if (!out) fail("IoError", "cannot write '" + out_path + "'");
        out << text << "\n";
    }
}

ModelConfig config_from(const std::string& config_path, const std::string& preset_name) {
    if (!config_path.empty()) return load_config_file(config_path);
    if (!preset_name.empty()) return preset(preset_name);
    fail("InvalidArgument", "pass --config FILE or --preset NAME");
}

std::vector<int32_t> parse_ids(const std::string& csv) {
    std::vector<int32_t> ids;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) ids.push_back(std::stoi(item));
    }
    return ids;
}

double max_rel_err(const Vec& a, const Vec& b) {
    double worst = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double scale = std::max({std::abs(a[i]), std::abs(b[i]), 1e-12});
        worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
    }
    return worst;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"unified mixture-of-experts transformer toolkit"};
    app.require_subcommand(1);

    std::string config_path, preset_name, out_path, corpus_path, ckpt_path;
    uint64_t seed = 1;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "flat key=value config file");
        cmd->add_option("--preset", preset_name, "named preset");
        cmd->add_option("--seed", seed, "rng seed");
        cmd->add_option("--out", out_path, "write the JSON report here instead of stdout");
    };

    // train
    auto* train_cmd = app.add_subcommand("train", "train a model and save a checkpoint");
    add_common(train_cmd);
    int64_t steps = 200;
    int batch_windows = 1, stride = 0, synthetic_tokens = 0;
    double lr = 3e-3;
    std::string save_path = "model.ckpt";
    train_cmd->add_option("--corpus", corpus_path, "token corpus file");
    train_cmd->add_option("--synthetic-tokens", synthetic_tokens,
                          "use a seeded synthetic corpus of this many tokens");
    train_cmd->add_option("--steps", steps, "optimizer steps");
    train_cmd->add_option("--lr", lr, "adam learning rate");
    train_cmd->add_option("--batch-windows", batch_windows, "windows per step");
    train_cmd->add_option("--stride", stride, "window stride (default context_len)");
    train_cmd->add_option("--save", save_path, "checkpoint output path");

    // generate
    auto* gen_cmd = app.add_subcommand("generate", "greedy decode from a checkpoint");
    add_common(gen_cmd);
    std::string prompt_csv;
    int n_new = 16;
    gen_cmd->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
    gen_cmd->add_option("--prompt", prompt_csv, "comma-separated prompt token ids")->required();
    gen_cmd->add_option("--new-tokens", n_new, "tokens to generate");

    // check-equiv
    auto* equiv_cmd = app.add_subcommand(
        "check-equiv", "verify vanilla == pre-mixing == post-mixing attention");
    add_common(equiv_cmd);
    int equiv_trials = 100;
    equiv_cmd->add_option("--trials", equiv_trials, "random trials");

    // grad-check
    auto* grad_cmd = app.add_subcommand("grad-check", "finite-difference gradient check");
    add_common(grad_cmd);
    int grad_tokens = 6;
    grad_cmd->add_option("--tokens", grad_tokens, "sequence length for the check");

    // count-params
    auto* count_cmd = app.add_subcommand("count-params", "closed-form parameter accounting");
    add_common(count_cmd);

    // profile
    auto* prof_cmd = app.add_subcommand("profile", "analytical MAC cost report");
    add_common(prof_cmd);
    int64_t seq_len = 1024, batch = 1;
    bool halving = false, no_head = false, text_table = false;
    prof_cmd->add_option("--seq", seq_len, "sequence length");
    prof_cmd->add_option("--batch", batch, "batch size");
    prof_cmd->add_flag("--causal-halving", halving, "count QK/weighted-sum at N^2/2");
    prof_cmd->add_flag("--no-lm-head", no_head, "exclude the LM head row");
    prof_cmd->add_flag("--text", text_table, "emit the aligned text table instead of JSON");

    // compare-cost
    auto* cmp_cmd = app.add_subcommand("compare-cost", "MAC ratio between two architectures");
    std::string preset_a, preset_b, config_a, config_b;
    cmp_cmd->add_option("--preset-a", preset_a, "baseline preset");
    cmp_cmd->add_option("--preset-b", preset_b, "comparison preset");
    cmp_cmd->add_option("--config-a", config_a, "baseline config file");
    cmp_cmd->add_option("--config-b", config_b, "comparison config file");
    cmp_cmd->add_option("--seq", seq_len, "sequence length");
    cmp_cmd->add_option("--batch", batch, "batch size");
    cmp_cmd->add_flag("--causal-halving", halving, "count QK/weighted-sum at N^2/2");
    cmp_cmd->add_flag("--text", text_table, "emit text instead of JSON");
    cmp_cmd->add_option("--out", out_path, "write the report here");

    // analyze-routing
    auto* route_cmd = app.add_subcommand("analyze-routing", "expert/token routing statistics");
    add_common(route_cmd);
    int windows = 8, top_k = 10;
    route_cmd->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
    route_cmd->add_option("--corpus", corpus_path, "token corpus")->required();
    route_cmd->add_option("--windows", windows, "number of context windows to scan");
    route_cmd->add_option("--top", top_k, "tokens per expert in the report");

    // dump-attn
    auto* dump_cmd = app.add_subcommand("dump-attn", "per-expert attention maps at a position");
    add_common(dump_cmd);
    std::string tokens_csv, csv_path;
    int position = -1, top_m = 8;
    bool layerwise = false;
    dump_cmd->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
    dump_cmd->add_option("--tokens", tokens_csv, "comma-separated token ids")->required();
    dump_cmd->add_option("--position", position, "query position (default: last token)");
    dump_cmd->add_option("--top", top_m, "experts per layer, ranked by router score");
    dump_cmd->add_option("--csv", csv_path, "also write the heat-map grid CSV here");
    dump_cmd->add_flag("--layerwise", layerwise, "emit layer-accumulated rows instead");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train_cmd->parsed()) {
            ModelConfig cfg = config_from(config_path, preset_name);
            TokenCorpus corpus;
            if (!corpus_path.empty()) {
                corpus = load_corpus(corpus_path);
            } else if (synthetic_tokens > 0) {
                corpus = synthetic_corpus(static_cast<uint32_t>(cfg.vocab_size),
                                          static_cast<size_t>(synthetic_tokens), seed);
            } else {
                fail("InvalidArgument", "pass --corpus FILE or --synthetic-tokens N");
            }
            TrainOptions opt;
            opt.steps = steps;
            opt.seed = seed;
            opt.adam.lr = lr;
            opt.batch_windows = batch_windows;
            opt.stride = stride;
            TrainResult result = train(cfg, corpus, opt);
            save_checkpoint(result.model, save_path);
            json j;
            j["checkpoint"] = save_path;
            j["steps"] = json::array();
            for (const auto& s : result.log)
                j["steps"].push_back(
                    {{"step", s.step}, {"ce", s.ce}, {"aux", s.aux}, {"tokens", s.tokens}});
            if (!result.log.empty()) {
                j["final_ce"] = result.log.back().ce;
                j["final_aux"] = result.log.back().aux;
            }
            emit(j.dump(2), out_path);
        } else if (gen_cmd->parsed()) {
            Model model = load_checkpoint(ckpt_path);
            std::vector<int32_t> prompt = parse_ids(prompt_csv);
            std::vector<int32_t> out = generate(model, prompt, n_new);
            json j;
            j["prompt"] = prompt;
            j["tokens"] = out;
            emit(j.dump(2), out_path);
        } else if (equiv_cmd->parsed()) {
            // vanilla vs pre-mixing vs post-mixing over random dense params
            Rng rng(seed);
            double worst = 0.0;
            for (int trial = 0; trial < equiv_trials; ++trial) {
                const int n = 1 + static_cast<int>(rng.next_below(16));
                const int d = rng.next_below(2) == 0 ? 8 : 32;
                const int h = 1 << rng.next_below(3);
                const int dk = 4, dv = 6;
                DenseAttnParams p;
                p.n_heads = h;
                p.key_dim = dk;
                p.value_dim = dv;
                p.w_q = Mat(d, h * dk);
                p.w_k = Mat(d, h * dk);
                p.w_v = Mat(d, h * dv);
                p.w_o = Mat(h * dv, d);
                fill_gaussian(p.w_q, 0.5, rng.next_u64());
                fill_gaussian(p.w_k, 0.5, rng.next_u64());
                fill_gaussian(p.w_v, 0.5, rng.next_u64());
                fill_gaussian(p.w_o, 0.5, rng.next_u64());
                Mat x(n, d);
                fill_gaussian(x, 1.0, rng.next_u64());

                Mat ref = vanilla_mha(p, x);
                std::vector<Mat> rows = mha_attn_rows(p, x);
                for (int t = 0; t < n; ++t) {
                    Vec pre(d, 0.0), post(d, 0.0);
                    for (int i = 0; i < h; ++i) {
                        Mat w_vi(d, dv), w_oi(dv, d);
                        for (int r = 0; r < d; ++r)
                            for (int c = 0; c < dv; ++c) w_vi.at(r, c) = p.w_v.at(r, i * dv + c);
                        for (int r = 0; r < dv; ++r)
                            for (int c = 0; c < d; ++c) w_oi.at(r, c) = p.w_o.at(i * dv + r, c);
                        Vec mixed = premix(rows[i].row(t), x);
                        Vec e = vecmat(vecmat(mixed, w_vi), w_oi);
                        axpy(1.0, e, pre);
                        Mat y(n, d);
                        for (int s = 0; s < n; ++s) {
                            Vec ys = vecmat(vecmat(x.row(s), w_vi), w_oi);
                            std::copy(ys.begin(), ys.end(), y.row(s).begin());
                        }
                        Vec pm = postmix(rows[i].row(t), y);
                        axpy(1.0, pm, post);
                    }
                    Vec vref(ref.row(t).begin(), ref.row(t).end());
                    worst = std::max(worst, max_rel_err(vref, pre));
                    worst = std::max(worst, max_rel_err(vref, post));
                }
            }
            json j;
            j["trials"] = equiv_trials;
            j["max_rel_err"] = worst;
            j["pass"] = worst < 1e-12;
            emit(j.dump(2), out_path);
            return worst < 1e-12 ? 0 : 1;
        } else if (grad_cmd->parsed()) {
            ModelConfig cfg =
                preset_name.empty() && config_path.empty() ? preset(Preset::tiny_test)
                                                           : config_from(config_path, preset_name);
            Model model = init_model(cfg, seed);
            Rng rng(Rng::mix(seed, 7));
            std::vector<int32_t> tokens(grad_tokens), targets(grad_tokens);
            for (auto& t : tokens) t = static_cast<int32_t>(rng.next_below(cfg.vocab_size));
            for (auto& t : targets) t = static_cast<int32_t>(rng.next_below(cfg.vocab_size));
            GradientSet grads = model_backward(model, tokens, targets);

            auto params = param_list(model);
            auto gs = param_list(grads);
            double worst = 0.0;
            std::string worst_name;
            const double h_step = 1e-5;
            for (size_t p = 0; p < params.size(); ++p) {
                Mat& w = *params[p].second;
                // probe a few entries per tensor
                const size_t stride_n = std::max<size_t>(1, w.data.size() / 8);
                for (size_t i = 0; i < w.data.size(); i += stride_n) {
                    const double keep = w.data[i];
                    w.data[i] = keep + h_step;
                    LossBreakdown up, dn;
                    model_backward(model, tokens, targets, &up);
                    w.data[i] = keep - h_step;
                    model_backward(model, tokens, targets, &dn);
                    w.data[i] = keep;
                    const double fd = (up.total() - dn.total()) / (2 * h_step);
                    const double an = gs[p].second->data[i];
                    const double rel =
                        std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6});
                    if (rel > worst) {
                        worst = rel;
                        worst_name = params[p].first;
                    }
                }
            }
            json j;
            j["max_rel_err"] = worst;
            j["worst_tensor"] = worst_name;
            j["pass"] = worst < 1e-4;
            emit(j.dump(2), out_path);
            return worst < 1e-4 ? 0 : 1;
        } else if (count_cmd->parsed()) {
            ModelConfig cfg = config_from(config_path, preset_name);
            ParamCount pc = count_params(cfg);
            json j;
            j["embeddings"] = pc.embeddings;
            j["attention_shared"] = pc.attention_shared;
            j["expert_bank"] = pc.expert_bank;
            j["lora"] = pc.lora;
            j["routers"] = pc.routers;
            j["norms"] = pc.norms;
            j["lm_head"] = pc.lm_head;
            j["total"] = pc.total;
            emit(j.dump(2), out_path);
        } else if (prof_cmd->parsed()) {
            ModelConfig cfg = config_from(config_path, preset_name);
            ArchDescriptor desc = descriptor_from(
                cfg, preset_name.empty() ? "config" : preset_name, seq_len, batch);
            desc.causal_halving = halving;
            desc.include_lm_head = !no_head;
            CostReport report = macs(desc);
            emit(text_table ? report.to_text() : report.to_json(), out_path);
        } else if (cmp_cmd->parsed()) {
            ModelConfig ca = config_a.empty() ? preset(preset_a) : load_config_file(config_a);
            ModelConfig cb = config_b.empty() ? preset(preset_b) : load_config_file(config_b);
            ArchDescriptor da =
                descriptor_from(ca, preset_a.empty() ? "a" : preset_a, seq_len, batch);
            ArchDescriptor db =
                descriptor_from(cb, preset_b.empty() ? "b" : preset_b, seq_len, batch);
            da.causal_halving = halving;
            db.causal_halving = halving;
            CompareReport report = compare(da, db);
            emit(text_table ? report.to_text() : report.to_json(), out_path);
        } else if (route_cmd->parsed()) {
            Model model = load_checkpoint(ckpt_path);
            TokenCorpus corpus = load_corpus(corpus_path);
            const int window = model.cfg.context_len;
            if (static_cast<int>(corpus.ids.size()) < window)
                fail("CorpusTooSmall", "corpus shorter than one context window");
            ExpertTokenStats stats;
            const size_t n_starts = corpus.ids.size() - window + 1;
            for (int w = 0; w < windows; ++w) {
                const size_t start = (static_cast<size_t>(w) * window) % n_starts;
                std::vector<int32_t> ids(window);
                for (int i = 0; i < window; ++i)
                    ids[i] = static_cast<int32_t>(corpus.ids[start + i]);
                ForwardTrace trace = model_forward(model, ids);
                accumulate_routing(stats, trace, ids);
            }
            emit(stats_to_json(stats, top_k), out_path);
        } else if (dump_cmd->parsed()) {
            Model model = load_checkpoint(ckpt_path);
            std::vector<int32_t> ids = parse_ids(tokens_csv);
            const int pos = position >= 0 ? position : static_cast<int>(ids.size()) - 1;
            if (layerwise) {
                LayerwiseAccumulation acc = accumulate_layerwise(model, ids, pos, top_m);
                emit(layerwise_to_json(acc), out_path);
            } else {
                AttnMapDump dump = dump_attention_maps(model, ids, pos, top_m);
                if (!csv_path.empty()) {
                    std::ofstream csv(csv_path);
                    csv << dump_to_csv(dump);
                }
                emit(dump_to_json(dump), out_path);
            }
        }
    } catch (const Error& e) {
        json err;
        err["error"] = e.code();
        err["message"] = e.what();
        std::cerr << err.dump() << "\n";
        return 1;
    } catch (const std::exception& e) {
        json err;
        err["error"] = "Unhandled";
        err["message"] = e.what();
        std::cerr << err.dump() << "\n";
        return 1;
    }
    return 0;
}
