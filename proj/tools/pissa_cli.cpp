// SPDX-License-Identifier: Apache-2.0
// pissa: command-line front end for decomposition, quantization benchmarks,
// toy fine-tuning runs and adapter conversion.
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "pissa/harness.hpp"

namespace fs = std::filesystem;
using namespace pissa;

namespace {

/// Flag validation failures that should exit with the usage code.
struct UsageError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

void print_error(const char* kind, const std::string& message) {
    std::cerr << nlohmann::json{{"error", kind}, {"message", message}}.dump() << std::endl;
}

void print_ok(nlohmann::ordered_json j) {
    j["status"] = "ok";
    std::cout << j.dump() << std::endl;
}

/// List-valued flags arrive as strings and are parsed after CLI11 is done.
struct ListFlags {
    std::string ranks, iters, niters, seeds, methods;
};

void add_matrix_flags(CLI::App* cmd, ExperimentSpec& spec) {
    cmd->add_option("--m", spec.m, "rows of the synthetic matrix")->check(CLI::PositiveNumber);
    cmd->add_option("--n", spec.n, "columns of the synthetic matrix")->check(CLI::PositiveNumber);
    cmd->add_option("--alpha", spec.alpha, "power-law exponent of the synthetic spectrum")->check(CLI::NonNegativeNumber);
}

void add_output_flags(CLI::App* cmd, ExperimentSpec& spec, std::string& format) {
    cmd->add_option("--out", spec.output, "report file (stdout when omitted)");
    cmd->add_option("--format", format, "report format")->check(CLI::IsMember({"csv", "json"}));
}

void add_toy_flags(CLI::App* cmd, ExperimentSpec& spec) {
    auto& t = spec.toy;
    cmd->add_option("--rank", t.rank, "adapter rank")->check(CLI::PositiveNumber);
    cmd->add_option("--hidden", t.hidden, "hidden width of the MLP")->check(CLI::PositiveNumber);
    cmd->add_option("--lr", t.finetune.lr, "fine-tuning learning rate");
    cmd->add_option("--steps", t.finetune.steps, "fine-tuning steps")->check(CLI::PositiveNumber);
    cmd->add_option("--batch-size", t.finetune.batch_size, "fine-tuning batch size")->check(CLI::PositiveNumber);
    cmd->add_option("--pretrain-lr", t.pretrain.lr, "pretraining learning rate");
    cmd->add_option("--pretrain-steps", t.pretrain.steps, "pretraining steps")->check(CLI::PositiveNumber);
    cmd->add_option("--per-class", t.per_class, "synthetic samples per class")->check(CLI::PositiveNumber);
    cmd->add_option("--idx-images", spec.idx_images, "IDX image file (MNIST) instead of synthetic clusters")
        ->check(CLI::ExistingFile);
    cmd->add_option("--idx-labels", spec.idx_labels, "IDX label file matching --idx-images")->check(CLI::ExistingFile);
}

void apply_lists(ExperimentSpec& spec, const ListFlags& l) {
    try {
        if (!l.ranks.empty()) spec.ranks = parse_size_list(l.ranks);
        if (!l.iters.empty()) spec.iters = parse_size_list(l.iters);
        if (!l.niters.empty()) spec.niters = parse_size_list(l.niters);
        if (!l.seeds.empty()) spec.seeds = parse_index_list(l.seeds);
        if (!l.methods.empty()) spec.methods = parse_origin_list(l.methods);
        spec.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
}

void emit(const ExperimentSpec& spec, const Report& rep, const std::string& format) {
    const ReportFormat fmt = format == "json" ? ReportFormat::json : ReportFormat::csv;
    if (spec.output.empty()) {
        std::cout << (fmt == ReportFormat::csv ? report_csv(rep) : report_json(rep));
        return;
    }
    write_report(rep, spec.output, fmt);
    print_ok({{"kind", std::string(to_string(spec.kind))},
              {"rows", rep.rows.size()},
              {"failed_rows", rep.failures()},
              {"config_hash", rep.hash},
              {"out", spec.output.string()}});
}

/// Reads either a single layer checkpoint or a model directory (layer1/, layer2/).
std::vector<std::pair<std::string, DecomposedLayer>> load_layers(const fs::path& dir) {
    if (fs::exists(dir / "meta.txt")) return {{"", io::load_layer(dir)}};
    std::vector<std::pair<std::string, DecomposedLayer>> out;
    for (const char* name : {"layer1", "layer2"})
        if (fs::exists(dir / name / "meta.txt")) out.emplace_back(name, io::load_layer(dir / name));
    if (out.empty()) throw UsageError(dir.string() + " holds no adapter checkpoint (meta.txt not found)");
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Principal-singular-component adapters: decomposition, quantization and fine-tuning tools"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string("pissa ") + kVersion);

    ExperimentSpec spec;
    ListFlags lists;
    std::string format = "csv";

    // decompose ------------------------------------------------------------
    fs::path in_path, out_dir;
    std::size_t rank = 0, iters = 1;
    std::optional<std::size_t> niter;
    std::uint64_t seed = 0;
    std::string method = "pissa";
    auto* decompose = app.add_subcommand(
        "decompose", "split a stored matrix into a frozen residual and an adapter; without --in, report on synthetic matrices");
    decompose->add_option("--in", in_path, "input matrix (.pssa)")->check(CLI::ExistingFile);
    decompose->add_option("--rank", rank, "adapter rank (with --in)")->check(CLI::PositiveNumber);
    decompose->add_option("--out", out_dir, "checkpoint directory with --in, report file otherwise");
    decompose->add_option("--method", method, "pissa | medium | minor | lora | qpissa | loftq | qlora");
    decompose->add_option("--T", iters, "alternating rounds for qpissa / loftq")->check(CLI::PositiveNumber);
    decompose->add_option("--niter", niter, "use the randomized SVD with this many subspace iterations (pissa)");
    decompose->add_option("--seed", seed, "seed for stochastic methods");
    decompose->add_option("--block-size", spec.block_size, "NF4 block size")->check(CLI::PositiveNumber);
    add_matrix_flags(decompose, spec);
    decompose->add_option("--ranks", lists.ranks, "ranks for the synthetic report");
    decompose->add_option("--seeds", lists.seeds, "seeds for the synthetic report");
    decompose->add_option("--methods", lists.methods, "subset of pissa,medium,minor,lora");
    decompose->add_option("--format", format, "report format")->check(CLI::IsMember({"csv", "json"}));
    decompose->callback([&] {
        if (in_path.empty()) return;
        if (rank == 0) throw CLI::RequiredError("--rank");
        if (out_dir.empty()) throw CLI::RequiredError("--out");
    });

    // quant-bench ----------------------------------------------------------
    auto* quant = app.add_subcommand("quant-bench", "quantization error of QLoRA, LoftQ and QPiSSA");
    add_matrix_flags(quant, spec);
    quant->add_option("--in", spec.input, "stored matrix instead of synthetic ones")->check(CLI::ExistingFile);
    quant->add_option("--ranks", lists.ranks, "ranks, e.g. 1,4,16,64");
    quant->add_option("--T", lists.iters, "alternating rounds, e.g. 1,5");
    quant->add_option("--seeds", lists.seeds, "seeds, e.g. 0..9");
    quant->add_option("--methods", lists.methods, "subset of qlora,loftq,qpissa");
    quant->add_option("--block-size", spec.block_size, "NF4 block size")->check(CLI::PositiveNumber);
    add_output_flags(quant, spec, format);

    // fastsvd-bench --------------------------------------------------------
    auto* fastsvd = app.add_subcommand("fastsvd-bench", "randomized SVD against the exact decomposition");
    add_matrix_flags(fastsvd, spec);
    fastsvd->add_option("--in", spec.input, "stored matrix instead of synthetic ones")->check(CLI::ExistingFile);
    fastsvd->add_option("--ranks", lists.ranks, "ranks");
    fastsvd->add_option("--niter", lists.niters, "subspace iteration counts, e.g. 1,2,4,8,16");
    fastsvd->add_option("--seeds", lists.seeds, "seeds");
    fastsvd->add_flag("--timing", spec.timing, "record wall-clock times (not replayable)");
    add_output_flags(fastsvd, spec, format);

    // converge / ablation --------------------------------------------------
    auto* converge = app.add_subcommand("converge", "toy fine-tuning traces per initialization");
    add_toy_flags(converge, spec);
    converge->add_option("--seeds", lists.seeds, "seeds");
    converge->add_option("--methods", lists.methods, "adapter initializations, default pissa,lora");
    converge->add_option("--trace-dir", spec.trace_dir, "directory for trace CSVs (default: next to --out)");
    converge->add_option("--save-adapters", spec.save_adapters, "write initial and trained checkpoints here");
    add_output_flags(converge, spec, format);

    auto* ablation = app.add_subcommand("ablation", "principal vs medium vs minor initialization on the toy task");
    add_toy_flags(ablation, spec);
    ablation->add_option("--seeds", lists.seeds, "seeds");
    ablation->add_option("--methods", lists.methods, "default pissa,medium,minor");
    add_output_flags(ablation, spec, format);

    // gradcheck ------------------------------------------------------------
    double tolerance = 1e-4;
    auto* grad = app.add_subcommand("gradcheck", "finite-difference check of adapter gradients on random MLPs");
    grad->add_option("--seeds", lists.seeds, "seeds");
    grad->add_option("--methods", lists.methods, "adapter initializations, default pissa,lora");
    grad->add_option("--tol", tolerance, "maximum accepted relative error")->check(CLI::PositiveNumber);
    add_output_flags(grad, spec, format);

    // convert-lora ---------------------------------------------------------
    fs::path init_dir, trained_dir, delta_dir;
    std::size_t probe_rows = 16;
    bool write_base = false;
    auto* convert = app.add_subcommand("convert-lora", "express a trained adapter as a LoRA delta on the original weight");
    convert->add_option("--init", init_dir, "checkpoint right after initialization")->required()->check(CLI::ExistingDirectory);
    convert->add_option("--trained", trained_dir, "checkpoint after training")->required()->check(CLI::ExistingDirectory);
    convert->add_option("--out", delta_dir, "output directory")->required();
    convert->add_option("--probe-rows", probe_rows, "rows of the random probe batch")->check(CLI::PositiveNumber);
    convert->add_option("--seed", seed, "probe seed");
    convert->add_flag("--write-base", write_base, "also write the original weight as W.pssa");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        print_error("usage", e.what());
        return 2;
    }

    try {
        if (*decompose && !in_path.empty()) {
            const Matrix w = io::load_matrix(in_path);
            const Origin origin = [&] {
                try {
                    return parse_origin(method);
                } catch (const std::invalid_argument& e) {
                    throw UsageError(e.what());
                }
            }();
            AdapterSpec as;
            as.method = origin;
            as.rank = rank;
            as.iters = iters;
            as.niter = niter;
            as.quant.block_size = spec.block_size;
            if (rank > std::min(w.rows(), w.cols()))
                throw UsageError("rank " + std::to_string(rank) + " exceeds min(" + std::to_string(w.rows()) + ", " +
                                 std::to_string(w.cols()) + ")");
            RandomSource rng(derive_seed(seed, static_cast<std::uint64_t>(Stream::adapter)));
            const DecomposedLayer layer = make_layer(w, as, rng);
            io::save_layer(out_dir, layer, seed);
            const Scalar err = reconstruction_error(w, layer);
            nlohmann::ordered_json j{{"command", "decompose"},
                                     {"method", method},
                                     {"rank", rank},
                                     {"reconstruction_error", err},
                                     {"out", out_dir.string()}};
            if (layer.quantized()) {
                const auto ratio = error_reduction_ratio(w, layer, as.quant);
                j["nuclear_error"] = quantization_error_nuclear(w, layer);
                j["ratio_percent"] = ratio ? nlohmann::ordered_json(*ratio) : nlohmann::ordered_json("undefined");
            } else if (!(err <= 1e-10)) {
                print_error("numerical", "reconstruction error " + io::format_scalar(err) + " exceeds 1e-10");
                return 1;
            }
            print_ok(j);
            return 0;
        }

        if (*decompose) {
            spec.kind = ExperimentKind::decompose;
            spec.output = out_dir;
            if (lists.ranks.empty()) spec.ranks = {16};
        } else if (*quant) spec.kind = ExperimentKind::quant_bench;
        else if (*fastsvd) spec.kind = ExperimentKind::fastsvd_bench;
        else if (*converge) spec.kind = ExperimentKind::converge;
        else if (*ablation) spec.kind = ExperimentKind::ablation;
        else if (*grad) spec.kind = ExperimentKind::gradcheck;

        if (*quant && lists.ranks.empty()) spec.ranks = {1, 4, 16, 64};
        if (*fastsvd && lists.ranks.empty()) spec.ranks = {16};

        if (*convert) {
            const auto init = load_layers(init_dir);
            const auto trained = load_layers(trained_dir);
            if (init.size() != trained.size()) throw UsageError("init and trained checkpoints hold different layers");
            nlohmann::ordered_json layers = nlohmann::ordered_json::array();
            Scalar worst = 0;
            RandomSource rng(derive_seed(seed, static_cast<std::uint64_t>(Stream::probe)));
            for (std::size_t i = 0; i < init.size(); ++i) {
                const auto& [name, l0] = init[i];
                const auto& l1 = trained[i].second;
                if (!(l0.dense_base() == l1.dense_base()))
                    throw UsageError("layer '" + name + "': init and trained bases differ, not the same run");
                // W = W^res + A·B at initialization
                const Matrix w = merge(l0);
                const AdapterPair delta = to_lora_delta(l0.adapter(), l1.adapter());
                const DecomposedLayer as_lora(w, delta, Origin::lora);
                const Matrix probe = rng.normal_matrix(probe_rows, w.rows());
                const Scalar diff = max_abs(forward(as_lora, probe) - forward(l1, probe));
                worst = std::max(worst, diff);
                const fs::path out = name.empty() ? delta_dir : delta_dir / name;
                io::save_adapter_pair(out, delta, Origin::lora, seed);
                if (write_base) io::save_matrix(out / "W.pssa", w);
                layers.push_back({{"layer", name.empty() ? "." : name}, {"rank", delta.rank()}, {"max_abs_diff", diff}});
            }
            if (!(worst <= 1e-10)) {
                print_error("numerical", "conversion identity violated: max |difference| " + io::format_scalar(worst));
                return 1;
            }
            print_ok({{"command", "convert-lora"}, {"layers", layers}, {"out", delta_dir.string()}});
            return 0;
        }

        apply_lists(spec, lists);
        const Report rep = run_experiment(spec);
        emit(spec, rep, format);
        if (rep.failures() != 0) {
            print_error("runtime", std::to_string(rep.failures()) + " of " + std::to_string(rep.rows.size()) +
                                       " rows failed, see the error column");
            return 1;
        }
        if (*grad) {
            for (const auto& row : rep.rows) {
                const auto& e = row["max_rel_error"];
                if (!e.is_number() || e.get<double>() > tolerance) {
                    print_error("numerical", "gradcheck " + row["method"].get<std::string>() + " seed " +
                                                 row["seed"].dump() + ": relative error " + cell(e) +
                                                 " above tolerance " + io::format_scalar(tolerance));
                    return 1;
                }
            }
        }
        return 0;
    } catch (const UsageError& e) {
        print_error("usage", e.what());
        return 2;
    } catch (const ShapeError& e) {
        print_error("usage", e.what());
        return 2;
    } catch (const FormatError& e) {
        print_error("format", e.what());
        return 1;
    } catch (const NumericalError& e) {
        print_error("numerical", e.what());
        return 1;
    } catch (const std::exception& e) {
        print_error("runtime", e.what());
        return 1;
    }
}
