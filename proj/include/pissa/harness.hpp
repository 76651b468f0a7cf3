// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "json.hpp"
#include "pissa/adapter.hpp"
#include "pissa/data.hpp"
#include "pissa/io.hpp"
#include "pissa/quant.hpp"
#include "pissa/svd.hpp"
#include "pissa/train.hpp"

namespace pissa {

inline constexpr const char* kVersion = "0.1.0";

/// Echoed into every report row so a replay can detect a changed numeric stack.
inline std::string generator_version() { return std::string("pissa/") + kVersion + ";" + RandomSource::kAlgorithm; }

// ---------------------------------------------------------------------------
// Toy fine-tuning protocol: pretrain a dense MLP on the odd classes, then
// fine-tune injected adapters on the even classes.

struct ToyProtocol {
    std::size_t classes = 10;
    std::size_t dim = 64;
    std::size_t per_class = 100;
    Scalar noise_std = 1.0;
    Scalar centroid_scale = 3.0;
    std::size_t hidden = 64;
    std::size_t rank = 8;
    TrainConfig pretrain = [] {
        TrainConfig c;
        c.lr = 3e-2;
        c.steps = 300;
        return c;
    }();
    TrainConfig finetune = [] {
        TrainConfig c;
        c.lr = 3e-4;
        c.steps = 300;
        return c;
    }();

    nlohmann::ordered_json to_json() const {
        auto tc = [](const TrainConfig& c) {
            return nlohmann::ordered_json{{"lr", c.lr},
                                          {"batch_size", c.batch_size},
                                          {"steps", c.steps},
                                          {"warmup_ratio", c.warmup_ratio},
                                          {"weight_decay", c.weight_decay}};
        };
        return {{"classes", classes},     {"dim", dim},       {"per_class", per_class},
                {"noise_std", noise_std}, {"centroid_scale", centroid_scale},
                {"hidden", hidden},       {"rank", rank},     {"pretrain", tc(pretrain)},
                {"finetune", tc(finetune)}};
    }
};

struct ToyTask {
    Dataset pretrain_data;  // odd classes
    Dataset finetune_data;  // even classes
    MlpModel pretrained;
    TrainTrace pretrain_trace;
};

/// Builds the per-seed task. When `source` is given (e.g. MNIST) it replaces
/// the synthetic clusters and the protocol's data fields are ignored.
inline ToyTask prepare_toy(const ToyProtocol& p, std::uint64_t seed, const Dataset* source = nullptr) {
    const Dataset all = source ? *source
                               : generate_cluster_dataset(p.classes, p.dim, p.per_class, p.noise_std, seed,
                                                          p.centroid_scale);
    ToyTask task{all.subset(odd_classes(all.classes)), all.subset(even_classes(all.classes)), {}, {}};
    RandomSource rng(derive_seed(seed, static_cast<std::uint64_t>(Stream::model)));
    task.pretrained = make_mlp(all.dim(), p.hidden, all.classes, rng);
    TrainConfig cfg = p.pretrain;
    cfg.seed = seed;
    task.pretrain_trace = train(task.pretrained, task.pretrain_data, cfg);
    return task;
}

inline FinetuneResult toy_finetune(const ToyProtocol& p, const ToyTask& task, Origin method, std::uint64_t seed,
                                   std::optional<std::size_t> steps = std::nullopt) {
    TrainConfig cfg = p.finetune;
    cfg.seed = seed;
    if (steps) cfg.steps = *steps;
    AdapterSpec spec;
    spec.method = method;
    spec.rank = p.rank;
    return run_finetune(task.pretrained, task.finetune_data, cfg, spec);
}

// ---------------------------------------------------------------------------
// Experiments

/// Parses "0..9", "1,4,16" or mixes such as "0..3,8".
inline std::vector<std::uint64_t> parse_index_list(std::string_view text) {
    std::vector<std::uint64_t> out;
    auto parse_u64 = [&](std::string_view s) {
        if (s.empty()) throw std::invalid_argument("empty entry in list '" + std::string(text) + "'");
        std::uint64_t v = 0;
        for (char c : s) {
            if (c < '0' || c > '9') throw std::invalid_argument("bad number '" + std::string(s) + "' in list");
            if (v > (std::numeric_limits<std::uint64_t>::max() - 9) / 10)
                throw std::invalid_argument("number too large in list");
            v = v * 10 + static_cast<std::uint64_t>(c - '0');
        }
        return v;
    };
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const std::size_t comma = std::min(text.find(',', pos), text.size());
        const std::string_view item = text.substr(pos, comma - pos);
        if (const auto dots = item.find(".."); dots != std::string_view::npos) {
            const auto lo = parse_u64(item.substr(0, dots));
            const auto hi = parse_u64(item.substr(dots + 2));
            if (hi < lo) throw std::invalid_argument("descending range '" + std::string(item) + "'");
            if (hi - lo > 1000000) throw std::invalid_argument("range '" + std::string(item) + "' is too long");
            for (std::uint64_t v = lo; v <= hi; ++v) out.push_back(v);
        } else {
            out.push_back(parse_u64(item));
        }
        pos = comma + 1;
    }
    return out;
}

inline std::vector<std::size_t> parse_size_list(std::string_view text) {
    const auto v = parse_index_list(text);
    return {v.begin(), v.end()};
}

inline std::vector<Origin> parse_origin_list(std::string_view text) {
    std::vector<Origin> out;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const std::size_t comma = std::min(text.find(',', pos), text.size());
        out.push_back(parse_origin(text.substr(pos, comma - pos)));
        pos = comma + 1;
    }
    return out;
}

enum class ExperimentKind { decompose, quant_bench, converge, fastsvd_bench, gradcheck, ablation };

inline std::string_view to_string(ExperimentKind k) {
    switch (k) {
        case ExperimentKind::decompose: return "decompose";
        case ExperimentKind::quant_bench: return "quant-bench";
        case ExperimentKind::converge: return "converge";
        case ExperimentKind::fastsvd_bench: return "fastsvd-bench";
        case ExperimentKind::gradcheck: return "gradcheck";
        case ExperimentKind::ablation: return "ablation";
    }
    return "?";
}

enum class ReportFormat { csv, json };

struct ExperimentSpec {
    ExperimentKind kind = ExperimentKind::quant_bench;
    std::size_t m = 256;
    std::size_t n = 256;
    Scalar alpha = 1.0;
    std::vector<std::size_t> ranks{1, 2, 4, 8, 16, 32, 64, 128};
    std::vector<std::size_t> iters{1, 5};             // T list
    std::vector<std::size_t> niters{1, 2, 4, 8, 16};  // fast SVD subspace iterations
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    std::vector<Origin> methods;  // empty: the kind's default set
    std::size_t block_size = 64;
    std::optional<std::filesystem::path> input;  // stored matrix for decompose / quant-bench
    std::optional<std::filesystem::path> idx_images;
    std::optional<std::filesystem::path> idx_labels;
    ToyProtocol toy;

    // Output handling; not part of the config hash.
    std::filesystem::path output;
    std::optional<std::filesystem::path> trace_dir;  // converge traces; defaults to the report's directory
    std::optional<std::filesystem::path> save_adapters;  // converge: <dir>/<method>_seed<n>/{init,trained}
    ReportFormat format = ReportFormat::csv;
    bool timing = false;

    std::vector<Origin> effective_methods() const {
        if (!methods.empty()) return methods;
        switch (kind) {
            case ExperimentKind::decompose: return {Origin::pissa, Origin::medium, Origin::minor, Origin::lora};
            case ExperimentKind::quant_bench: return {Origin::qlora, Origin::loftq, Origin::qpissa};
            case ExperimentKind::converge: return {Origin::pissa, Origin::lora};
            case ExperimentKind::ablation: return {Origin::pissa, Origin::medium, Origin::minor};
            case ExperimentKind::gradcheck: return {Origin::pissa, Origin::lora};
            case ExperimentKind::fastsvd_bench: return {Origin::pissa};
        }
        return {};
    }

    bool uses_toy() const {
        return kind == ExperimentKind::converge || kind == ExperimentKind::ablation;
    }

    /// Throws std::invalid_argument naming the first problem.
    void validate() const {
        if (seeds.empty()) throw std::invalid_argument("at least one seed is required");
        if (!(alpha >= 0)) throw std::invalid_argument("alpha must be >= 0");
        if (block_size == 0) throw std::invalid_argument("block size must be >= 1");
        if (idx_images.has_value() != idx_labels.has_value())
            throw std::invalid_argument("IDX images and labels must be given together");
        if (uses_toy()) {
            // layer2 is hidden x classes; layer1 is dim x hidden (784 wide for IDX input)
            const std::size_t k = std::min({toy.hidden, toy.classes, idx_images ? toy.hidden : toy.dim});
            if (toy.rank == 0 || toy.rank > k)
                throw std::invalid_argument("toy rank " + std::to_string(toy.rank) + " outside [1, " +
                                            std::to_string(k) + "]");
            toy.pretrain.validate();
            toy.finetune.validate();
            return;
        }
        if (kind == ExperimentKind::gradcheck) return;
        if (!input && (m == 0 || n == 0)) throw std::invalid_argument("matrix sizes must be positive");
        if (ranks.empty()) throw std::invalid_argument("at least one rank is required");
        if (!input) {
            const std::size_t k = std::min(m, n);
            for (std::size_t r : ranks)
                if (r == 0 || r > k)
                    throw std::invalid_argument("rank " + std::to_string(r) + " outside [1, " + std::to_string(k) + "]");
        }
        if (kind == ExperimentKind::quant_bench)
            for (std::size_t t : iters)
                if (t == 0) throw std::invalid_argument("iteration counts T must be >= 1");
        if (kind == ExperimentKind::quant_bench && iters.empty()) throw std::invalid_argument("T list is empty");
        if (kind == ExperimentKind::fastsvd_bench && niters.empty()) throw std::invalid_argument("niter list is empty");
    }

    /// Canonical configuration: everything that determines the numeric columns.
    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["kind"] = std::string(to_string(kind));
        j["m"] = m;
        j["n"] = n;
        j["alpha"] = alpha;
        j["ranks"] = ranks;
        j["T"] = iters;
        j["niter"] = niters;
        j["seeds"] = seeds;
        std::vector<std::string> ms;
        for (Origin o : effective_methods()) ms.emplace_back(to_string(o));
        j["methods"] = ms;
        j["block_size"] = block_size;
        j["input"] = input ? input->string() : "";
        j["idx_images"] = idx_images ? idx_images->string() : "";
        j["idx_labels"] = idx_labels ? idx_labels->string() : "";
        if (uses_toy()) j["toy"] = toy.to_json();
        return j;
    }
};

/// FNV-1a 64-bit, hex encoded.
inline std::string fnv1a_hex(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline std::string config_hash(const ExperimentSpec& spec) { return fnv1a_hex(spec.to_json().dump()); }

using ReportRow = nlohmann::ordered_json;

struct Report {
    ExperimentKind kind;
    nlohmann::ordered_json config;
    std::string hash;
    std::vector<std::string> columns;
    std::vector<ReportRow> rows;

    std::size_t failures() const {
        return static_cast<std::size_t>(std::count_if(rows.begin(), rows.end(), [](const ReportRow& r) {
            return r.contains("error") && !r["error"].get<std::string>().empty();
        }));
    }
};

/// Worker count: hardware concurrency, capped by PISSA_WORKERS when set.
inline std::size_t worker_count(std::size_t tasks) {
    std::size_t w = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("PISSA_WORKERS")) {
        char* end = nullptr;
        const unsigned long cap = std::strtoul(env, &end, 10);
        if (end != env && *end == '\0' && cap > 0) w = std::min<std::size_t>(w, cap);
    }
    return std::max<std::size_t>(1, std::min(w, tasks));
}

/// Runs fn(i) for i in [0, count) on a small pool; results keep index order.
template <class T>
std::vector<T> parallel_map(std::size_t count, const std::function<T(std::size_t)>& fn) {
    std::vector<T> out(count);
    std::atomic<std::size_t> next{0};
    auto work = [&] {
        for (std::size_t i = next++; i < count; i = next++) out[i] = fn(i);
    };
    const std::size_t workers = worker_count(count);
    if (workers == 1) {
        work();
        return out;
    }
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
    return out;
}

namespace detail {

inline nlohmann::ordered_json num(Scalar v) {
    if (std::isfinite(v)) return v;
    return std::isnan(v) ? "nan" : (v > 0 ? "inf" : "-inf");
}

inline Matrix experiment_matrix(const ExperimentSpec& spec, std::uint64_t seed) {
    if (spec.input) return io::load_matrix(*spec.input);
    return generate_spectral_matrix(spec.m, spec.n, spec.alpha, seed);
}

inline std::vector<std::string> columns_for(ExperimentKind kind, bool with_tail = true) {
    std::vector<std::string> c;
    switch (kind) {
        case ExperimentKind::decompose:
            c = {"method", "rank", "seed", "rel_error", "std_w", "std_res", "dof_w", "dof_res"};
            break;
        case ExperimentKind::quant_bench:
            c = {"method", "rank", "T", "block_size", "nuclear_err", "frob_err", "ratio_percent", "seed"};
            break;
        case ExperimentKind::fastsvd_bench:
            c = {"rank", "niter", "seed", "init_error_l1", "recon_error_fro", "max_sv_rel_error", "svd_ms", "fast_ms"};
            break;
        case ExperimentKind::converge:
        case ExperimentKind::ablation:
            c = {"method", "rank", "seed", "loss_step1", "loss_step50", "loss_step150", "final_loss",
                 "grad_norm_step1", "trace_file"};
            break;
        case ExperimentKind::gradcheck:
            c = {"method", "seed", "in", "hidden", "classes", "rank", "batch", "max_rel_error", "checked", "skipped",
                 "near_kinks"};
            break;
    }
    if (with_tail) {
        c.emplace_back("generator");
        c.emplace_back("config_hash");
        c.emplace_back("error");
    }
    return c;
}

/// One unit of work: a seed crossed with one configuration index.
struct Task {
    std::uint64_t seed;
    std::size_t config;
};

inline std::vector<ReportRow> run_decompose_task(const ExperimentSpec& spec, const Task& t) {
    const Matrix w = experiment_matrix(spec, t.seed);
    const std::size_t r = spec.ranks[t.config];
    check_rank(w, r, "decompose");
    const SvdFactors f = exact_svd(w);
    const auto fit_w = distribution_diagnostics(w);
    std::vector<ReportRow> rows;
    for (Origin o : spec.effective_methods()) {
        RandomSource rng(derive_seed(t.seed, static_cast<std::uint64_t>(Stream::adapter)));
        DecomposedLayer layer = [&] {
            switch (o) {
                case Origin::pissa: return variant_init_from(w, f, r, InitStrategy::principal);
                case Origin::medium: return variant_init_from(w, f, r, InitStrategy::medium);
                case Origin::minor: return variant_init_from(w, f, r, InitStrategy::minor);
                case Origin::lora: return lora_init(w, r, rng);
                default: throw std::invalid_argument("decompose: unsupported method " + std::string(to_string(o)));
            }
        }();
        const auto fit_r = distribution_diagnostics(layer.dense_base());
        ReportRow row;
        row["method"] = std::string(to_string(o));
        row["rank"] = r;
        row["seed"] = t.seed;
        row["rel_error"] = num(reconstruction_error(w, layer));
        row["std_w"] = num(fit_w.gaussian_std);
        row["std_res"] = num(fit_r.gaussian_std);
        row["dof_w"] = num(fit_w.student_t_dof);
        row["dof_res"] = num(fit_r.student_t_dof);
        rows.push_back(std::move(row));
    }
    return rows;
}

inline std::vector<ReportRow> run_quant_task(const ExperimentSpec& spec, const Task& t) {
    const Matrix w = experiment_matrix(spec, t.seed);
    const std::size_t r = spec.ranks[t.config];
    check_rank(w, r, "quant-bench");
    QuantConfig cfg;
    cfg.block_size = spec.block_size;
    const Scalar baseline = qlora_error(w, cfg);
    const std::size_t max_t = *std::max_element(spec.iters.begin(), spec.iters.end());

    std::vector<ReportRow> rows;
    auto emit = [&](Origin o, std::size_t iters, const DecomposedLayer& layer) {
        const Scalar nuc = quantization_error_nuclear(w, layer);
        ReportRow row;
        row["method"] = std::string(to_string(o));
        row["rank"] = r;
        row["T"] = iters;
        row["block_size"] = spec.block_size;
        row["nuclear_err"] = num(nuc);
        row["frob_err"] = num(quantization_error_frobenius(w, layer));
        row["ratio_percent"] = baseline == 0 ? nlohmann::ordered_json("undefined") : num((1 - nuc / baseline) * 100);
        row["seed"] = t.seed;
        rows.push_back(std::move(row));
    };
    for (Origin o : spec.effective_methods()) {
        if (o == Origin::qlora) {
            RandomSource rng(derive_seed(t.seed, static_cast<std::uint64_t>(Stream::adapter)));
            emit(o, 0, qlora_init(w, r, rng, cfg));  // T = 0: no alternating rounds
            continue;
        }
        if (o != Origin::qpissa && o != Origin::loftq)
            throw std::invalid_argument("quant-bench: unsupported method " + std::string(to_string(o)));
        // one run to max T; the observer snapshots each requested T
        const IterationObserver observe = [&](std::size_t it, const DecomposedLayer& layer) {
            if (std::find(spec.iters.begin(), spec.iters.end(), it) != spec.iters.end()) emit(o, it, layer);
        };
        if (o == Origin::qpissa) qpissa_init(w, r, max_t, cfg, observe);
        else loftq_init(w, r, max_t, cfg, observe);
    }
    return rows;
}

inline std::vector<ReportRow> run_fastsvd_task(const ExperimentSpec& spec, const Task& t) {
    using clock = std::chrono::steady_clock;
    const Matrix w = experiment_matrix(spec, t.seed);
    const std::size_t r = spec.ranks[t.config];
    check_rank(w, r, "fastsvd-bench");
    const auto t0 = clock::now();
    const SvdFactors exact = truncate(exact_svd(w), r);
    const double svd_ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
    const Matrix exact_lowrank = exact.reconstruct();

    std::vector<ReportRow> rows;
    for (std::size_t niter : spec.niters) {
        // same sketch for every niter, so the column isolates the effect of niter
        RandomSource rng(derive_seed(t.seed, r));
        const auto t1 = clock::now();
        const SvdFactors fast = randomized_svd(w, r, niter, rng);
        const double fast_ms = std::chrono::duration<double, std::milli>(clock::now() - t1).count();
        const Matrix fast_lowrank = fast.reconstruct();
        Scalar sv_err = 0;
        for (std::size_t i = 0; i < r; ++i)
            sv_err = std::max(sv_err, std::abs(fast.s[i] - exact.s[i]) / std::max(exact.s[i], 1e-300));
        ReportRow row;
        row["rank"] = r;
        row["niter"] = niter;
        row["seed"] = t.seed;
        row["init_error_l1"] = num(l1_distance(exact_lowrank, fast_lowrank));
        row["recon_error_fro"] = num(frobenius_norm(exact_lowrank - fast_lowrank));
        row["max_sv_rel_error"] = num(sv_err);
        row["svd_ms"] = spec.timing ? num(svd_ms) : nlohmann::ordered_json("");
        row["fast_ms"] = spec.timing ? num(fast_ms) : nlohmann::ordered_json("");
        rows.push_back(std::move(row));
    }
    return rows;
}

inline std::vector<ReportRow> run_gradcheck_task(const ExperimentSpec& spec, const Task& t) {
    // random small architecture per seed
    RandomSource rng(derive_seed(t.seed, static_cast<std::uint64_t>(Stream::probe)));
    const std::size_t in = 2 + rng.below(10), hidden = 2 + rng.below(10), classes = 2 + rng.below(5);
    const std::size_t rank = 1 + rng.below(std::min({in, hidden, classes}));
    const std::size_t batch = 1 + rng.below(5);
    MlpModel model = make_mlp(in, hidden, classes, rng);
    model.layer1.bias = rng.normal_matrix(1, hidden, 0.1);
    model.layer2.bias = rng.normal_matrix(1, classes, 0.1);
    const Matrix x = rng.normal_matrix(batch, in);
    std::vector<int> labels(batch);
    for (int& y : labels) y = static_cast<int>(rng.below(classes));

    const Origin o = spec.effective_methods()[t.config];
    MlpModel tuned = inject_adapters(model, AdapterSpec{o, rank}, t.seed);
    // LoRA starts at B = 0; move it off the degenerate point so dA is exercised
    for (Linear* layer : {&tuned.layer1, &tuned.layer2}) {
        auto& ad = std::get<DecomposedLayer>(layer->weight).mutable_adapter();
        if (max_abs(ad.b) == 0) ad.b = rng.normal_matrix(ad.b.rows(), ad.b.cols(), 0.1);
    }
    const auto res = gradcheck(tuned, x, labels, 1e-5);
    ReportRow row;
    row["method"] = std::string(to_string(o));
    row["seed"] = t.seed;
    row["in"] = in;
    row["hidden"] = hidden;
    row["classes"] = classes;
    row["rank"] = rank;
    row["batch"] = batch;
    row["max_rel_error"] = num(res.max_rel_error);
    row["checked"] = res.checked;
    row["skipped"] = res.skipped;
    row["near_kinks"] = res.near_kinks;
    return {row};
}

inline std::filesystem::path trace_directory(const ExperimentSpec& spec) {
    if (spec.trace_dir) return *spec.trace_dir;
    return spec.output.has_parent_path() ? spec.output.parent_path() : std::filesystem::path(".");
}

inline std::vector<ReportRow> run_toy_task(const ExperimentSpec& spec, const Task& t, const Dataset* source) {
    const ToyTask task = prepare_toy(spec.toy, t.seed, source);
    std::vector<ReportRow> rows;
    for (Origin o : spec.effective_methods()) {
        const FinetuneResult fr = toy_finetune(spec.toy, task, o, t.seed);
        const auto& tr = fr.trace;
        auto at = [&](std::size_t step) { return step <= tr.size() ? num(tr[step - 1].loss) : nlohmann::ordered_json(""); };
        ReportRow row;
        row["method"] = std::string(to_string(o));
        row["rank"] = spec.toy.rank;
        row["seed"] = t.seed;
        row["loss_step1"] = at(1);
        row["loss_step50"] = at(50);
        row["loss_step150"] = at(150);
        row["final_loss"] = num(tr.back().loss);
        row["grad_norm_step1"] = num(tr.front().grad_norm);
        if (spec.kind == ExperimentKind::converge && !spec.output.empty()) {
            const auto file = trace_directory(spec) /
                              ("trace_" + std::string(to_string(o)) + "_seed" + std::to_string(t.seed) + ".csv");
            io::write_file_atomic(file, io::trace_csv(tr));
            row["trace_file"] = file.filename().string();
        } else {
            row["trace_file"] = "";
        }
        if (spec.save_adapters) {
            const auto dir = *spec.save_adapters / (std::string(to_string(o)) + "_seed" + std::to_string(t.seed));
            io::save_model(dir / "init", fr.initial, t.seed);
            io::save_model(dir / "trained", fr.model, t.seed);
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace detail

/// Runs every (seed x configuration) task, collecting rows in a fixed order.
/// A failing task contributes one row carrying its error message.
inline Report run_experiment(const ExperimentSpec& spec) {
    spec.validate();
    Report rep{spec.kind, spec.to_json(), config_hash(spec), detail::columns_for(spec.kind), {}};

    std::size_t configs = 1;
    switch (spec.kind) {
        case ExperimentKind::decompose:
        case ExperimentKind::quant_bench:
        case ExperimentKind::fastsvd_bench: configs = spec.ranks.size(); break;
        case ExperimentKind::gradcheck: configs = spec.effective_methods().size(); break;
        default: break;
    }
    std::vector<detail::Task> tasks;
    for (std::uint64_t s : spec.seeds)
        for (std::size_t c = 0; c < configs; ++c) tasks.push_back({s, c});

    std::optional<Dataset> source;
    if (spec.idx_images) source = io::load_idx(*spec.idx_images, *spec.idx_labels);

    const std::function<std::vector<ReportRow>(std::size_t)> run = [&](std::size_t i) -> std::vector<ReportRow> {
        const auto& t = tasks[i];
        try {
            switch (spec.kind) {
                case ExperimentKind::decompose: return detail::run_decompose_task(spec, t);
                case ExperimentKind::quant_bench: return detail::run_quant_task(spec, t);
                case ExperimentKind::fastsvd_bench: return detail::run_fastsvd_task(spec, t);
                case ExperimentKind::gradcheck: return detail::run_gradcheck_task(spec, t);
                case ExperimentKind::converge:
                case ExperimentKind::ablation: return detail::run_toy_task(spec, t, source ? &*source : nullptr);
            }
            throw std::logic_error("unknown experiment kind");
        } catch (const std::exception& e) {
            ReportRow row;
            row["seed"] = t.seed;
            if (configs > 1 && spec.kind != ExperimentKind::gradcheck) row["rank"] = spec.ranks[t.config];
            row["error"] = e.what();
            return {row};
        }
    };
    for (auto& rows : parallel_map(tasks.size(), run)) {
        for (auto& row : rows) {
            ReportRow full;
            for (const auto& col : rep.columns) {
                if (col == "generator") full[col] = generator_version();
                else if (col == "config_hash") full[col] = rep.hash;
                else if (col == "error") full[col] = row.contains("error") ? row["error"] : "";
                else full[col] = row.contains(col) ? row[col] : nlohmann::ordered_json("");
            }
            rep.rows.push_back(std::move(full));
        }
    }
    return rep;
}

inline std::string cell(const nlohmann::ordered_json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_number_float()) return io::format_scalar(v.get<double>());
    if (v.is_null()) return "";
    return v.dump();
}

/// CSV with the canonical config, hash and generator echoed as '#' header lines.
inline std::string report_csv(const Report& rep) {
    std::string out = "# kind: " + std::string(to_string(rep.kind)) + "\n";
    out += "# config: " + rep.config.dump() + "\n";
    out += "# config_hash: " + rep.hash + "\n";
    out += "# generator: " + generator_version() + "\n";
    out += io::csv_line(rep.columns);
    for (const auto& row : rep.rows) {
        std::vector<std::string> fields;
        for (const auto& col : rep.columns) fields.push_back(cell(row[col]));
        out += io::csv_line(fields);
    }
    return out;
}

inline std::string report_json(const Report& rep) {
    nlohmann::ordered_json j;
    j["kind"] = std::string(to_string(rep.kind));
    j["config"] = rep.config;
    j["config_hash"] = rep.hash;
    j["generator"] = generator_version();
    j["rows"] = rep.rows;
    return j.dump(2) + "\n";
}

inline void write_report(const Report& rep, const std::filesystem::path& path, ReportFormat fmt) {
    io::write_file_atomic(path, fmt == ReportFormat::csv ? report_csv(rep) : report_json(rep));
}

}  // namespace pissa
