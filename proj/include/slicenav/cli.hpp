#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "slicenav/attention.hpp"
#include "slicenav/bpr.hpp"
#include "slicenav/checkpoint.hpp"
#include "slicenav/config.hpp"
#include "slicenav/dataset.hpp"
#include "slicenav/errors.hpp"
#include "slicenav/evaluation.hpp"
#include "slicenav/synthetic.hpp"
#include "slicenav/training.hpp"

// Single entry point with subcommands:
//   synth | train | eval | insert | bpr-train | bpr-eval | export-attn
// Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numeric
// failure. All errors print one line to stderr with the prefix "error:".

namespace slicenav {

namespace cli_detail {

struct CommonOpts {
    std::string config_path;
    std::vector<std::string> overrides;
};

inline void add_common(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--config", opts.config_path, "JSON config file");
    cmd->add_option("--set", opts.overrides,
                    "override a config key, e.g. --set train.epochs=10 (repeatable)");
}

inline RunConfig make_config(const CommonOpts& opts) {
    RunConfig cfg =
        opts.config_path.empty() ? RunConfig() : RunConfig::from_file(opts.config_path);
    for (const auto& o : opts.overrides) cfg.set_override(o);
    return cfg;
}

inline InsertionModel<float> load_insertion_model(const RunConfig& cfg, const std::string& ckpt,
                                                  Checkpoint* out_ck = nullptr) {
    const Checkpoint ck = load_checkpoint(ckpt);
    if (ck.fingerprint != cfg.insertion_fingerprint())
        throw ValidationError("checkpoint '" + ckpt +
                              "' was trained with a different model/embedder/pe configuration");
    InsertionModel<float> model(cfg.model_config(), cfg.embedder_config(), cfg.pe_mode(), 0);
    ParamList<float> params = model.named_params();
    restore_params(params, ck);
    if (out_ck) *out_ck = ck;
    return model;
}

inline BprModel<float> load_bpr_model(const RunConfig& cfg, const std::string& ckpt) {
    const Checkpoint ck = load_checkpoint(ckpt);
    if (ck.fingerprint != cfg.bpr_fingerprint())
        throw ValidationError("checkpoint '" + ckpt +
                              "' was trained with a different BPR configuration");
    BprModel<float> model(cfg.embedder_config(), 0);
    ParamList<float> params = model.named_params();
    restore_params(params, ck);
    return model;
}

inline void print_summary(std::ostream& os, const AggregateStats& agg) {
    char buf[160];
    os << "key                 n     mean_mm  median_mm  std_mm\n";
    for (const auto& [key, ks] : agg.per_key) {
        if (ks.count > 0) {
            std::snprintf(buf, sizeof(buf), "%-18s %5zu %9.3f %10.3f %7.3f%s\n", key.c_str(),
                          ks.count, ks.mean, ks.median, ks.stddev,
                          ks.excluded ? "  (excluded: <min cases)" : "");
            os << buf;
        }
    }
    std::snprintf(buf, sizeof(buf), "%-18s %5zu %9.3f\n", "Average", agg.average_n, agg.average);
    os << buf;
    for (const auto& [key, ks] : agg.per_key)
        if (ks.boundary_count > 0) {
            std::snprintf(buf, sizeof(buf), "boundary %-18s %zu/%zu correct\n", key.c_str(),
                          ks.boundary_correct, ks.boundary_count);
            os << buf;
        }
    std::snprintf(buf, sizeof(buf), "mean effective spacing: %.3f mm\n", agg.mean_spacing_mm);
    os << buf;
}

template <class LocalizeFn>
std::vector<LocalizationResult> run_split_eval(const std::vector<LabeledVolume>& vols,
                                               std::size_t partners, std::uint64_t seed,
                                               LocalizeFn&& localize) {
    const auto pairs = make_eval_pairs(vols.size(), partners, seed);
    std::vector<LocalizationResult> results;
    for (const auto& [qi, ti] : pairs) {
        const auto rs = localize(vols[qi], vols[ti]);
        results.insert(results.end(), rs.begin(), rs.end());
    }
    return results;
}

}  // namespace cli_detail

inline int cli_main(int argc, const char* const* argv) {
    using cli_detail::CommonOpts;

    CLI::App app{"slicenav: sequence correspondence for slice-level content navigation"};
    app.require_subcommand(1);
    {
        std::string footer = "Config keys and defaults (override with --set key=value):\n";
        for (const auto& line : RunConfig::flat_default_listing()) footer += "  " + line + "\n";
        app.footer(footer);
    }

    // synth
    auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic dataset");
    CommonOpts synth_opts;
    std::string synth_out;
    cli_detail::add_common(synth_cmd, synth_opts);
    synth_cmd->add_option("--out", synth_out, "output dataset directory")->required();

    // train
    auto* train_cmd = app.add_subcommand("train", "train the insertion network");
    CommonOpts train_opts;
    std::string train_data, train_out;
    cli_detail::add_common(train_cmd, train_opts);
    train_cmd->add_option("--data", train_data, "dataset directory")->required();
    train_cmd->add_option("--out", train_out, "output directory for checkpoint + metrics")
        ->required();

    // bpr-train
    auto* bpr_train_cmd = app.add_subcommand("bpr-train", "train the BPR baseline");
    CommonOpts bpr_train_opts;
    std::string bpr_train_data, bpr_train_out;
    cli_detail::add_common(bpr_train_cmd, bpr_train_opts);
    bpr_train_cmd->add_option("--data", bpr_train_data, "dataset directory")->required();
    bpr_train_cmd->add_option("--out", bpr_train_out, "output directory")->required();

    // eval (also compares two results files when given --results twice)
    auto* eval_cmd = app.add_subcommand("eval", "evaluate an insertion checkpoint, or compare "
                                                "two results CSVs with a Wilcoxon test");
    CommonOpts eval_opts;
    std::string eval_data, eval_ckpt, eval_out, eval_split = "test";
    std::vector<std::string> eval_results;
    cli_detail::add_common(eval_cmd, eval_opts);
    eval_cmd->add_option("--data", eval_data, "dataset directory");
    eval_cmd->add_option("--ckpt", eval_ckpt, "checkpoint file");
    eval_cmd->add_option("--out", eval_out, "results CSV path");
    eval_cmd->add_option("--split", eval_split, "split to evaluate (default test)");
    eval_cmd->add_option("--results", eval_results,
                         "results CSV (give twice to compare two runs)");

    // bpr-eval
    auto* bpr_eval_cmd = app.add_subcommand("bpr-eval", "evaluate a BPR checkpoint");
    CommonOpts bpr_eval_opts;
    std::string bpr_eval_data, bpr_eval_ckpt, bpr_eval_out, bpr_eval_split = "test";
    cli_detail::add_common(bpr_eval_cmd, bpr_eval_opts);
    bpr_eval_cmd->add_option("--data", bpr_eval_data, "dataset directory")->required();
    bpr_eval_cmd->add_option("--ckpt", bpr_eval_ckpt, "checkpoint file")->required();
    bpr_eval_cmd->add_option("--out", bpr_eval_out, "results CSV path")->required();
    bpr_eval_cmd->add_option("--split", bpr_eval_split, "split to evaluate (default test)");

    // insert
    auto* insert_cmd = app.add_subcommand("insert", "insertion positions for one query/target pair");
    CommonOpts insert_opts;
    std::string insert_query, insert_target, insert_ckpt, insert_out;
    cli_detail::add_common(insert_cmd, insert_opts);
    insert_cmd->add_option("--query", insert_query, "query volume (.sqiv)")->required();
    insert_cmd->add_option("--target", insert_target, "target volume (.sqiv)")->required();
    insert_cmd->add_option("--ckpt", insert_ckpt, "checkpoint file")->required();
    insert_cmd->add_option("--out", insert_out, "output CSV (default stdout)");

    // export-attn
    auto* attn_cmd = app.add_subcommand("export-attn", "export the attention map as CSV + PGM");
    CommonOpts attn_opts;
    std::string attn_query, attn_target, attn_ckpt, attn_out;
    cli_detail::add_common(attn_cmd, attn_opts);
    attn_cmd->add_option("--query", attn_query, "query volume (.sqiv)")->required();
    attn_cmd->add_option("--target", attn_target, "target volume (.sqiv)")->required();
    attn_cmd->add_option("--ckpt", attn_ckpt, "checkpoint file")->required();
    attn_cmd->add_option("--out", attn_out, "output base path (writes .csv and .pgm)")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }

    try {
        if (synth_cmd->parsed()) {
            const RunConfig cfg = cli_detail::make_config(synth_opts);
            const SyntheticDataset ds = generate_dataset(cfg.synth_config());
            write_dataset(ds, synth_out);
            std::cout << "wrote " << (ds.train.size() + ds.val.size() + ds.test.size())
                      << " volumes to " << synth_out << " (train " << ds.train.size() << ", val "
                      << ds.val.size() << ", test " << ds.test.size() << ")\n";
            return 0;
        }

        if (train_cmd->parsed()) {
            const RunConfig cfg = cli_detail::make_config(train_opts);
            const EmbedderConfig ecfg = cfg.embedder_config();
            const auto train_vols = load_split(train_data, "train", default_key_scores(),
                                               default_key_names(), ecfg.input_h, ecfg.input_w);
            const auto val_vols = load_split(train_data, "val", default_key_scores(),
                                             default_key_names(), ecfg.input_h, ecfg.input_w);
            const TrainConfig tcfg = cfg.train_config();
            InsertionModel<float> model(cfg.model_config(), ecfg, cfg.pe_mode(), tcfg.seed);
            std::filesystem::create_directories(train_out);
            const std::string metrics_path =
                (std::filesystem::path(train_out) / "metrics.csv").string();
            const std::string ckpt_path =
                (std::filesystem::path(train_out) / "best.sqck").string();
            TrainResult result;
            try {
                result = train(model, train_vols, val_vols, tcfg, cfg.insertion_fingerprint(),
                               metrics_path);
            } catch (const NumericError&) {
                std::cerr << "note: aborted; last-good checkpoint (if any) kept at " << ckpt_path
                          << "\n";
                throw;
            }
            save_checkpoint(result.best_checkpoint, ckpt_path);
            std::cout << "best epoch " << result.best_epoch << " val_error_mm "
                      << result.best_val_error << " -> " << ckpt_path << "\n";
            return 0;
        }

        if (bpr_train_cmd->parsed()) {
            const RunConfig cfg = cli_detail::make_config(bpr_train_opts);
            const EmbedderConfig ecfg = cfg.embedder_config();
            const auto train_vols = load_split(bpr_train_data, "train", default_key_scores(),
                                               default_key_names(), ecfg.input_h, ecfg.input_w);
            const auto val_vols = load_split(bpr_train_data, "val", default_key_scores(),
                                             default_key_names(), ecfg.input_h, ecfg.input_w);
            const BprTrainConfig bcfg = cfg.bpr_config();
            BprModel<float> model(ecfg, bcfg.seed);
            std::filesystem::create_directories(bpr_train_out);
            const BprTrainResult result =
                bpr_train(model, train_vols, val_vols, bcfg, cfg.bpr_fingerprint());
            const std::string ckpt_path =
                (std::filesystem::path(bpr_train_out) / "best.sqck").string();
            write_metrics_csv(result.metrics,
                              (std::filesystem::path(bpr_train_out) / "metrics.csv").string());
            save_checkpoint(result.best_checkpoint, ckpt_path);
            std::cout << "best epoch " << result.best_epoch << " val_error_mm "
                      << result.best_val_error << " -> " << ckpt_path << "\n";
            return 0;
        }

        if (eval_cmd->parsed()) {
            if (eval_results.size() == 2) {
                std::size_t n_pairs = 0;
                const double p =
                    compare_results_wilcoxon(eval_results[0], eval_results[1], &n_pairs);
                char buf[96];
                std::snprintf(buf, sizeof(buf), "wilcoxon two-sided p = %.6g over %zu pairs\n", p,
                              n_pairs);
                std::cout << buf;
                return 0;
            }
            if (eval_data.empty() || eval_ckpt.empty() || eval_out.empty())
                throw ConfigError(
                    "eval needs --data, --ckpt and --out (or exactly two --results files)");
            const RunConfig cfg = cli_detail::make_config(eval_opts);
            const EmbedderConfig ecfg = cfg.embedder_config();
            const auto vols = load_split(eval_data, eval_split, default_key_scores(),
                                         default_key_names(), ecfg.input_h, ecfg.input_w);
            const InsertionModel<float> model = cli_detail::load_insertion_model(cfg, eval_ckpt);
            const std::size_t max_slices = cfg.get<std::size_t>("sampling.max_slices");
            const auto results = cli_detail::run_split_eval(
                vols, cfg.get<std::size_t>("eval.partners"), cfg.get<std::uint64_t>("eval.seed"),
                [&](const LabeledVolume& q, const LabeledVolume& t) {
                    return localize_keyslices(model, q, t, max_slices);
                });
            write_results_csv(results, eval_out);
            cli_detail::print_summary(
                std::cout, aggregate(results, cfg.get<std::size_t>("eval.min_cases_per_key")));
            return 0;
        }

        if (bpr_eval_cmd->parsed()) {
            const RunConfig cfg = cli_detail::make_config(bpr_eval_opts);
            const EmbedderConfig ecfg = cfg.embedder_config();
            const auto vols = load_split(bpr_eval_data, bpr_eval_split, default_key_scores(),
                                         default_key_names(), ecfg.input_h, ecfg.input_w);
            const BprModel<float> model = cli_detail::load_bpr_model(cfg, bpr_eval_ckpt);
            const std::size_t max_slices = cfg.get<std::size_t>("sampling.max_slices");
            const auto results = cli_detail::run_split_eval(
                vols, cfg.get<std::size_t>("eval.partners"), cfg.get<std::uint64_t>("eval.seed"),
                [&](const LabeledVolume& q, const LabeledVolume& t) {
                    return bpr_localize_keyslices(model, q, t, max_slices);
                });
            write_results_csv(results, bpr_eval_out);
            cli_detail::print_summary(
                std::cout, aggregate(results, cfg.get<std::size_t>("eval.min_cases_per_key")));
            return 0;
        }

        if (insert_cmd->parsed()) {
            const RunConfig cfg = cli_detail::make_config(insert_opts);
            const EmbedderConfig ecfg = cfg.embedder_config();
            const InsertionModel<float> model = cli_detail::load_insertion_model(cfg, insert_ckpt);
            const SliceSequence query = load_volume(insert_query, ecfg.input_h, ecfg.input_w);
            const SliceSequence target = load_volume(insert_target, ecfg.input_h, ecfg.input_w);
            const auto [map, positions] =
                predict_insertion(query, target, model, cfg.get<std::size_t>("sampling.max_slices"));
            std::ostringstream csv;
            csv << "query_index,grid_position,kind,target_index\n";
            for (std::size_t i = 0; i < positions.size(); ++i) {
                const auto& p = positions[i];
                csv << map.query_index_map[i] << "," << p.grid_position << "," << to_string(p.kind)
                    << "," << p.target_slice_index << "\n";
            }
            if (insert_out.empty()) {
                std::cout << csv.str();
            } else {
                std::ofstream os(insert_out);
                if (!os) throw IoError("cannot open '" + insert_out + "' for writing");
                os << csv.str();
            }
            return 0;
        }

        if (attn_cmd->parsed()) {
            const RunConfig cfg = cli_detail::make_config(attn_opts);
            const EmbedderConfig ecfg = cfg.embedder_config();
            const InsertionModel<float> model = cli_detail::load_insertion_model(cfg, attn_ckpt);
            const SliceSequence query = load_volume(attn_query, ecfg.input_h, ecfg.input_w);
            const SliceSequence target = load_volume(attn_target, ecfg.input_h, ecfg.input_w);
            const auto [map, positions] =
                predict_insertion(query, target, model, cfg.get<std::size_t>("sampling.max_slices"));
            export_attention(map, attn_out);
            std::cout << "wrote " << attn_out << ".csv and " << attn_out << ".pgm (" << map.n_query
                      << " x " << map.n_positions << ")\n";
            return 0;
        }
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    std::cerr << "error: no subcommand\n";
    return 1;
}

}  // namespace slicenav
