#include "fpad/cli.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "fpad/engine.hpp"
#include "fpad/error.hpp"
#include "fpad/gradcheck_paths.hpp"

namespace fpad {

namespace {

namespace fs = std::filesystem;

nlohmann::json load_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

void write_json(const std::string& path, const nlohmann::ordered_json& j) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << j.dump(2) << "\n";
    if (!out) throw IoError("failed writing " + path);
}

std::string ensure_out_dir(const std::string& out) {
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw IoError("cannot create output directory " + out + ": " + ec.message());
    return out;
}

std::string join(const std::string& dir, const std::string& name) {
    return (fs::path(dir) / name).string();
}

// Every command leaves an exact echo of its resolved inputs next to its
// outputs; reruns from the echo reproduce the artifacts.
void write_echo(const std::string& out, const std::string& command, nlohmann::ordered_json body) {
    nlohmann::ordered_json echo;
    echo["command"] = command;
    for (auto& [k, v] : body.items()) echo[k] = v;
    write_json(join(out, command + ".config.json"), echo);
}

std::vector<double> parse_double_list(const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        try {
            std::size_t used = 0;
            const double v = std::stod(item, &used);
            if (used != item.size()) throw std::invalid_argument(item);
            out.push_back(v);
        } catch (const std::exception&) {
            throw ConfigError("bad numeric list entry '" + item + "'");
        }
    }
    if (out.empty()) throw ConfigError("empty numeric list");
    return out;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
    std::vector<std::uint64_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        try {
            std::size_t used = 0;
            const unsigned long long v = std::stoull(item, &used);
            if (used != item.size()) throw std::invalid_argument(item);
            out.push_back(v);
        } catch (const std::exception&) {
            throw ConfigError("bad seed list entry '" + item + "'");
        }
    }
    if (out.empty()) throw ConfigError("empty seed list");
    return out;
}

struct CommonOpts {
    std::string out = ".";
    std::uint64_t seed = 0;
    bool seed_given = false;
    bool quiet = false;
};

void add_common(CLI::App* sub, CommonOpts& o) {
    sub->add_option("--out", o.out, "output directory")->capture_default_str();
    sub->add_option("--seed", o.seed, "master seed")->capture_default_str();
    sub->add_flag("--quiet", o.quiet, "suppress stdout summaries");
}

struct GenOpts {
    CommonOpts common;
    std::string config;
};

int cmd_gen(const GenOpts& o) {
    CorpusConfig cc = corpus_config_from_json(load_json(o.config), "corpus");
    if (o.common.seed_given) cc.seed = o.common.seed;
    validate(cc);
    const std::string out = ensure_out_dir(o.common.out);
    const Corpus corpus = generate_corpus(cc);
    const std::string corpus_path = join(out, "corpus.bin");
    save_corpus(corpus, corpus_path);
    nlohmann::ordered_json body;
    body["seed"] = cc.seed;
    body["paths"] = {{"corpus", corpus_path}};
    body["corpus_config"] = corpus_config_to_json(cc);
    write_echo(out, "gen", body);
    if (!o.common.quiet) {
        std::size_t visible = 0;
        for (const ClassInfo& c : corpus.catalog.classes) visible += c.pretrain_visible ? 1 : 0;
        std::size_t gts = 0;
        for (const UntrimmedSequence& s : corpus.sequences) gts += s.gts.size();
        std::cout << "corpus: " << corpus.catalog.size() << " classes (" << visible
                  << " in the pretraining set), " << corpus.sequences.size() << " sequences, "
                  << gts << " gt segments, " << cc.exemplars_per_class
                  << " exemplars/class, feat_dim " << cc.feat_dim << " -> " << corpus_path << "\n";
    }
    return 0;
}

struct SplitOpts {
    CommonOpts common;
    std::string corpus;
    std::string mode = "random";
    std::size_t n_novel = 5;
};

int cmd_split(const SplitOpts& o) {
    const Corpus corpus = load_corpus(o.corpus);
    const SplitMode mode = split_mode_from_name(o.mode);
    const ClassSplit split = make_split(corpus.catalog, mode, o.n_novel, o.common.seed);
    const std::string out = ensure_out_dir(o.common.out);
    const std::string split_path = join(out, "split.json");
    save_split(split, split_path);
    nlohmann::ordered_json body;
    body["seed"] = o.common.seed;
    body["paths"] = {{"corpus", o.corpus}, {"split", split_path}};
    body["mode"] = split_mode_name(mode);
    body["n_novel"] = o.n_novel;
    write_echo(out, "split", body);
    if (!o.common.quiet)
        std::cout << split_report_to_json(split_report(split, corpus.catalog)).dump() << "\n"
                  << "split -> " << split_path << "\n";
    return 0;
}

struct TrainOpts {
    CommonOpts common;
    std::string config;
    std::string corpus;
    std::string split;
};

int cmd_train(const TrainOpts& o) {
    TrainConfig tc = train_config_from_json(load_json(o.config), "train");
    if (o.common.seed_given) tc.seed = o.common.seed;
    const Corpus corpus = load_corpus(o.corpus);
    const ClassSplit split = load_split(o.split);
    const TrainConfig cfg = resolve(tc, corpus);
    const std::string out = ensure_out_dir(o.common.out);
    nlohmann::ordered_json body;
    body["seed"] = cfg.seed;
    body["paths"] = {{"corpus", o.corpus},
                     {"split", o.split},
                     {"params", join(out, "params.bin")},
                     {"loss_log", join(out, "loss_log.csv")}};
    body["train_config"] = train_config_to_json(cfg);
    write_echo(out, "train", body);

    const TrainResult result = train(cfg, corpus, split);
    save_params(result.params, cfg, join(out, "params.bin"));
    write_loss_log_csv(result.log, join(out, "loss_log.csv"));
    if (!o.common.quiet) {
        std::cout << "trained " << cfg.iterations << " iterations";
        if (!result.log.empty())
            std::cout << "; final loss " << format_double(result.log.back().total);
        std::cout << " -> " << join(out, "params.bin") << "\n";
    }
    return 0;
}

struct EvalOpts {
    CommonOpts common;
    std::string params;
    std::string corpus;
    std::string split;
    std::size_t count = 1000;
    double proposal_threshold = 0.3;
    double similarity_threshold = 0.0;
    bool thumos = false;
    std::size_t threads = 1;
};

EvalThresholds eval_thresholds(const EvalOpts& o) {
    if (o.thumos) return kThumosThresholds;
    return {o.proposal_threshold, o.similarity_threshold};
}

int cmd_eval(const EvalOpts& o) {
    const LoadedParams lp = load_params(o.params);
    const Corpus corpus = load_corpus(o.corpus);
    const ClassSplit split = load_split(o.split);
    const TrainConfig cfg = resolve(lp.config, corpus);
    const EvalThresholds thr = eval_thresholds(o);
    const EvalReport report = evaluate(lp.params, corpus, split, cfg, o.count, o.common.seed, thr,
                                       o.threads);
    const std::string out = ensure_out_dir(o.common.out);
    const std::string report_path = join(out, "eval_report.json");
    write_json(report_path, eval_report_to_json(report, train_config_to_json(cfg)));
    nlohmann::ordered_json body;
    body["seed"] = o.common.seed;
    body["paths"] = {{"params", o.params},
                     {"corpus", o.corpus},
                     {"split", o.split},
                     {"report", report_path}};
    body["count"] = o.count;
    body["threads"] = o.threads;
    body["thresholds"] = {{"proposal", thr.proposal}, {"similarity", thr.similarity}};
    body["train_config"] = train_config_to_json(cfg);
    write_echo(out, "eval", body);
    if (!o.common.quiet)
        std::cout << "mAP@0.5 " << format_double(report.mean_map50) << " +/- "
                  << format_double(report.std_map50) << " | average mAP "
                  << format_double(report.mean_avg_map) << " +/- "
                  << format_double(report.std_avg_map) << " (" << report.count << " episodes) -> "
                  << report_path << "\n";
    return 0;
}

struct SweepOpts {
    CommonOpts common;
    std::string kind;
    std::string params;
    std::string config;
    std::string corpus;
    std::string split;
    std::string grid;
    std::size_t count = 200;
    double proposal_threshold = 0.3;
    double similarity_threshold = 0.0;
    std::size_t threads = 1;
};

int cmd_sweep(const SweepOpts& o) {
    if (o.kind != "threshold" && o.kind != "lambda")
        throw ConfigError("unknown sweep kind '" + o.kind + "' (expected threshold or lambda)");
    const Corpus corpus = load_corpus(o.corpus);
    const ClassSplit split = load_split(o.split);
    const std::string out = ensure_out_dir(o.common.out);

    if (o.kind == "threshold") {
        if (o.params.empty()) throw ConfigError("sweep kind=threshold requires --params");
        std::vector<double> grid;
        if (o.grid.empty())
            for (int i = 0; i < 10; ++i) grid.push_back(0.1 * i);
        else
            grid = parse_double_list(o.grid);
        const LoadedParams lp = load_params(o.params);
        const TrainConfig cfg = resolve(lp.config, corpus);
        const std::vector<ThresholdRow> rows =
            sweep_proposal_threshold(lp.params, corpus, split, cfg, grid, o.count, o.common.seed,
                                     o.similarity_threshold, o.threads);
        std::vector<std::vector<std::string>> cells;
        for (const ThresholdRow& r : rows)
            cells.push_back(
                {format_double(r.threshold), format_double(r.map50), format_double(r.avg_map)});
        const std::string csv_path = join(out, "sweep_threshold.csv");
        write_csv(csv_path, {"threshold", "map_at_0.5", "average_map"}, cells);
        nlohmann::ordered_json body;
        body["seed"] = o.common.seed;
        body["kind"] = o.kind;
        body["paths"] = {{"params", o.params}, {"corpus", o.corpus}, {"split", o.split},
                         {"csv", csv_path}};
        body["grid"] = grid;
        body["count"] = o.count;
        body["similarity_threshold"] = o.similarity_threshold;
        body["train_config"] = train_config_to_json(cfg);
        write_echo(out, "sweep", body);
        if (!o.common.quiet) std::cout << rows.size() << " rows -> " << csv_path << "\n";
        return 0;
    }

    if (o.config.empty()) throw ConfigError("sweep kind=lambda requires --config");
    TrainConfig tc = train_config_from_json(load_json(o.config), "train");
    if (o.common.seed_given) tc.seed = o.common.seed;
    const TrainConfig cfg = resolve(tc, corpus);
    std::vector<double> grid = o.grid.empty() ? std::vector<double>{0.0, 0.1, 0.5, 1.0}
                                              : parse_double_list(o.grid);
    const EvalThresholds thr{o.proposal_threshold, o.similarity_threshold};
    const std::vector<LambdaRow> rows =
        sweep_lambda(cfg, corpus, split, grid, o.count, thr, o.threads);
    std::vector<std::vector<std::string>> cells;
    for (const LambdaRow& r : rows)
        cells.push_back({format_double(r.lambda), format_double(r.map50),
                         format_double(r.avg_map), format_double(r.final_adapt)});
    const std::string csv_path = join(out, "sweep_lambda.csv");
    write_csv(csv_path, {"lambda", "map_at_0.5", "average_map", "final_adaptation_loss"}, cells);
    nlohmann::ordered_json body;
    body["seed"] = cfg.seed;
    body["kind"] = o.kind;
    body["paths"] = {{"corpus", o.corpus}, {"split", o.split}, {"csv", csv_path}};
    body["grid"] = grid;
    body["count"] = o.count;
    body["thresholds"] = {{"proposal", thr.proposal}, {"similarity", thr.similarity}};
    body["train_config"] = train_config_to_json(cfg);
    write_echo(out, "sweep", body);
    if (!o.common.quiet) std::cout << rows.size() << " rows -> " << csv_path << "\n";
    return 0;
}

struct CompareOpts {
    CommonOpts common;
    std::string corpus;
    std::string config;
    std::size_t n_random = 3;
    std::size_t n_controlled = 3;
    std::size_t n_novel = 5;
    std::string seeds;
    std::size_t count = 200;
    double proposal_threshold = 0.3;
    double similarity_threshold = 0.0;
    std::size_t threads = 1;
};

int cmd_compare_splits(const CompareOpts& o) {
    const Corpus corpus = load_corpus(o.corpus);
    TrainConfig tc = train_config_from_json(load_json(o.config), "train");
    const TrainConfig cfg = resolve(tc, corpus);
    std::vector<std::uint64_t> seeds;
    if (!o.seeds.empty()) {
        seeds = parse_seed_list(o.seeds);
    } else {
        for (std::size_t i = 0; i < std::max(o.n_random, o.n_controlled); ++i)
            seeds.push_back(mix_seed(o.common.seed, i + 1));
    }
    if (seeds.size() < std::max(o.n_random, o.n_controlled))
        throw ConfigError("need at least max(n_random, n_controlled) seeds");
    const EvalThresholds thr{o.proposal_threshold, o.similarity_threshold};
    const SplitComparison cmp = compare_splits(cfg, corpus, o.n_random, o.n_controlled, o.n_novel,
                                               seeds, o.count, thr, o.threads);
    const std::string out = ensure_out_dir(o.common.out);

    std::vector<std::vector<std::string>> detail;
    for (const SplitComparison::Run& r : cmp.runs)
        detail.push_back({split_mode_name(r.mode), std::to_string(r.seed),
                          format_double(r.map50)});
    write_csv(join(out, "compare_splits_runs.csv"), {"mode", "seed", "map_at_0.5"}, detail);

    std::vector<std::vector<std::string>> table;
    auto add_row = [&](const char* mode, const SplitComparison::Aggregate& a) {
        if (a.runs == 0) return;
        table.push_back({mode, std::to_string(a.runs), format_double(a.mean),
                         format_double(a.stdev)});
    };
    add_row("random", cmp.random_agg);
    add_row("controlled", cmp.controlled_agg);
    const std::string csv_path = join(out, "compare_splits.csv");
    write_csv(csv_path, {"mode", "runs", "mean_map_at_0.5", "std_map_at_0.5"}, table);

    nlohmann::ordered_json body;
    body["seed"] = o.common.seed;
    body["paths"] = {{"corpus", o.corpus}, {"csv", csv_path}};
    body["n_random"] = o.n_random;
    body["n_controlled"] = o.n_controlled;
    body["n_novel"] = o.n_novel;
    body["seeds"] = seeds;
    body["count"] = o.count;
    body["thresholds"] = {{"proposal", thr.proposal}, {"similarity", thr.similarity}};
    body["train_config"] = train_config_to_json(cfg);
    write_echo(out, "compare-splits", body);

    if (!o.common.quiet) {
        auto print_row = [&](const char* mode, const SplitComparison::Aggregate& a) {
            if (a.runs == 0) return;
            std::cout << mode << ": mean mAP@0.5 " << format_double(a.mean) << " +/- "
                      << format_double(a.stdev) << " (n=" << a.runs << ")";
            if (a.runs == 1) std::cout << " [single run: stdev reported as 0]";
            std::cout << "\n";
        };
        print_row("random", cmp.random_agg);
        print_row("controlled", cmp.controlled_agg);
        std::cout << "table -> " << csv_path << "\n";
    }
    return 0;
}

struct GradcheckOpts {
    CommonOpts common;
    std::size_t instances = 20;
    double step = kGradCheckStep;
    double tolerance = 1e-5;
};

int cmd_gradcheck(const GradcheckOpts& o) {
    const std::vector<PathCheckResult> results =
        run_gradcheck(o.common.seed, o.instances, o.step, o.tolerance);
    bool all_passed = true;
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (const PathCheckResult& r : results) {
        all_passed = all_passed && r.passed;
        if (!o.common.quiet || !r.passed) {
            std::ostream& os = r.passed ? std::cout : std::cerr;
            os << (r.passed ? "pass" : "FAIL") << "  " << r.path << "  instances=" << r.instances
               << "  max_rel_err=" << format_double(r.max_rel_err) << "\n";
            for (const GradCheckRow& f : r.failures)
                os << "      " << f.param << " rel_err=" << format_double(f.max_rel_err)
                   << " analytic=" << format_double(f.analytic)
                   << " numeric=" << format_double(f.numeric)
                   << (f.loss_finite ? "" : " [non-finite loss]") << "\n";
        }
        nlohmann::ordered_json row;
        row["path"] = r.path;
        row["instances"] = r.instances;
        row["max_rel_err"] = r.max_rel_err;
        row["passed"] = r.passed;
        rows.push_back(row);
    }
    const std::string out = ensure_out_dir(o.common.out);
    nlohmann::ordered_json report;
    report["tolerance"] = o.tolerance;
    report["step"] = o.step;
    report["paths"] = rows;
    report["passed"] = all_passed;
    write_json(join(out, "gradcheck_report.json"), report);
    nlohmann::ordered_json body;
    body["seed"] = o.common.seed;
    body["instances"] = o.instances;
    body["step"] = o.step;
    body["tolerance"] = o.tolerance;
    write_echo(out, "gradcheck", body);
    return all_passed ? 0 : 6;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"feature-level few-shot temporal activity detection"};
    app.require_subcommand(1);

    GenOpts gen;
    CLI::App* sub_gen = app.add_subcommand("gen", "generate a synthetic corpus");
    sub_gen->add_option("--config", gen.config, "corpus config JSON")->required();
    add_common(sub_gen, gen.common);

    SplitOpts split;
    CLI::App* sub_split = app.add_subcommand("split", "partition classes into base/novel");
    sub_split->add_option("--corpus", split.corpus, "corpus file")->required();
    sub_split->add_option("--mode", split.mode, "random | controlled")->capture_default_str();
    sub_split->add_option("--n-novel", split.n_novel, "novel class count")->capture_default_str();
    add_common(sub_split, split.common);

    TrainOpts train;
    CLI::App* sub_train = app.add_subcommand("train", "episodic training");
    sub_train->add_option("--config", train.config, "train config JSON")->required();
    sub_train->add_option("--corpus", train.corpus, "corpus file")->required();
    sub_train->add_option("--split", train.split, "split JSON")->required();
    add_common(sub_train, train.common);

    EvalOpts eval;
    CLI::App* sub_eval = app.add_subcommand("eval", "episode evaluation");
    sub_eval->add_option("--params", eval.params, "parameter snapshot")->required();
    sub_eval->add_option("--corpus", eval.corpus, "corpus file")->required();
    sub_eval->add_option("--split", eval.split, "split JSON")->required();
    sub_eval->add_option("--count", eval.count, "episodes")->capture_default_str();
    sub_eval->add_option("--proposal-threshold", eval.proposal_threshold, "proposal score cut")
        ->capture_default_str();
    sub_eval->add_option("--similarity-threshold", eval.similarity_threshold,
                         "similarity score cut")
        ->capture_default_str();
    sub_eval->add_flag("--thumos", eval.thumos, "use the low-threshold preset (0.05, 0.02)");
    sub_eval->add_option("--threads", eval.threads, "episode parallelism")->capture_default_str();
    add_common(sub_eval, eval.common);

    SweepOpts sweep;
    CLI::App* sub_sweep = app.add_subcommand("sweep", "threshold / lambda study");
    sub_sweep->add_option("--kind", sweep.kind, "threshold | lambda")->required();
    sub_sweep->add_option("--corpus", sweep.corpus, "corpus file")->required();
    sub_sweep->add_option("--split", sweep.split, "split JSON")->required();
    sub_sweep->add_option("--params", sweep.params, "parameter snapshot (kind=threshold)");
    sub_sweep->add_option("--config", sweep.config, "train config JSON (kind=lambda)");
    sub_sweep->add_option("--grid", sweep.grid, "comma-separated grid values");
    sub_sweep->add_option("--count", sweep.count, "episodes per point")->capture_default_str();
    sub_sweep->add_option("--proposal-threshold", sweep.proposal_threshold,
                          "proposal score cut (kind=lambda)")
        ->capture_default_str();
    sub_sweep->add_option("--similarity-threshold", sweep.similarity_threshold,
                          "similarity score cut")
        ->capture_default_str();
    sub_sweep->add_option("--threads", sweep.threads, "episode parallelism")
        ->capture_default_str();
    add_common(sub_sweep, sweep.common);

    CompareOpts compare;
    CLI::App* sub_compare = app.add_subcommand("compare-splits", "random vs controlled splits");
    sub_compare->add_option("--corpus", compare.corpus, "corpus file")->required();
    sub_compare->add_option("--config", compare.config, "train config JSON")->required();
    sub_compare->add_option("--n-random", compare.n_random, "random-split runs")
        ->capture_default_str();
    sub_compare->add_option("--n-controlled", compare.n_controlled, "controlled-split runs")
        ->capture_default_str();
    sub_compare->add_option("--n-novel", compare.n_novel, "novel class count")
        ->capture_default_str();
    sub_compare->add_option("--seeds", compare.seeds,
                            "comma-separated per-run seeds (default: derived from --seed)");
    sub_compare->add_option("--count", compare.count, "episodes per run")->capture_default_str();
    sub_compare->add_option("--proposal-threshold", compare.proposal_threshold,
                            "proposal score cut")
        ->capture_default_str();
    sub_compare->add_option("--similarity-threshold", compare.similarity_threshold,
                            "similarity score cut")
        ->capture_default_str();
    sub_compare->add_option("--threads", compare.threads, "episode parallelism")
        ->capture_default_str();
    add_common(sub_compare, compare.common);

    GradcheckOpts gradcheck;
    CLI::App* sub_grad = app.add_subcommand("gradcheck", "finite-difference gradient gate");
    sub_grad->add_option("--instances", gradcheck.instances, "micro instances per loss path")
        ->capture_default_str();
    sub_grad->add_option("--step", gradcheck.step, "central-difference step")
        ->capture_default_str();
    sub_grad->add_option("--tolerance", gradcheck.tolerance, "max relative error allowed")
        ->capture_default_str();
    add_common(sub_grad, gradcheck.common);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    gen.common.seed_given = sub_gen->count("--seed") > 0;
    train.common.seed_given = sub_train->count("--seed") > 0;
    sweep.common.seed_given = sub_sweep->count("--seed") > 0;

    try {
        if (sub_gen->parsed()) return cmd_gen(gen);
        if (sub_split->parsed()) return cmd_split(split);
        if (sub_train->parsed()) return cmd_train(train);
        if (sub_eval->parsed()) return cmd_eval(eval);
        if (sub_sweep->parsed()) return cmd_sweep(sweep);
        if (sub_compare->parsed()) return cmd_compare_splits(compare);
        if (sub_grad->parsed()) return cmd_gradcheck(gradcheck);
        std::cerr << "no command given\n";
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const SplitError& e) {
        std::cerr << "split error: " << e.what() << "\n";
        return 4;
    } catch (const SamplingError& e) {
        std::cerr << "sampling error: " << e.what() << "\n";
        return 4;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 5;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return 3;
    } catch (const GenerationError& e) {
        std::cerr << "generation error: " << e.what() << "\n";
        return 5;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace fpad
