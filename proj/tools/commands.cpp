#include "commands.h"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "evop/baselines.h"
#include "evop/ccds.h"
#include "evop/epps.h"
#include "evop/error.h"
#include "evop/oracle_spec.h"
#include "evop/parallel.h"
#include "evop/remote_oracle.h"
#include "evop/report.h"
#include "evop/server.h"
#include "evop/transport.h"

namespace evop::cli {

namespace {

using nlohmann::json;

std::string fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

// Shortest decimal form that parses back to the same double.
std::string exact(double v) {
    char buf[64];
    for (int digits = 1; digits <= 17; ++digits) {
        std::snprintf(buf, sizeof buf, "%.*g", digits, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

std::string quote_arg(const std::string& s) {
    if (!s.empty() && s.find_first_of(" \t\"'\\$`;&|<>()") == std::string::npos) return s;
    std::string q = "'";
    for (char c : s) {
        if (c == '\'') {
            q += "'\\''";
        } else {
            q += c;
        }
    }
    return q + "'";
}

template <typename T>
std::string join(const std::vector<T>& items) {
    std::ostringstream ss;
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (i) ss << ',';
        if constexpr (std::is_floating_point_v<T>) {
            ss << exact(items[i]);
        } else {
            ss << items[i];
        }
    }
    return ss.str();
}

// ---------------------------------------------------------------------------

struct SampleArgs {
    std::string corpus;
    std::string out;
    CcdsConfig ccds;
    std::string embedder_oracle;
};

struct SearchArgs {
    std::string method = "epps";
    std::string dataset;
    std::string oracle;
    std::optional<double> theta;
    std::optional<std::size_t> k;
    GAConfig ga;
    std::optional<double> mutation_rate;
    std::size_t trials = 1000;
    std::uint64_t max_evals = kDefaultMaxEvals;
    std::string out;
    bool timing = false;
};

struct SweepArgs {
    std::string dataset;
    std::string oracle;
    std::vector<double> thetas;
    std::vector<std::string> methods{"greedy", "ideal", "epps"};
    std::vector<std::uint64_t> seeds{0};
    GAConfig ga;
    std::optional<double> mutation_rate;
    std::size_t trials = 1000;
    std::uint64_t max_evals = kDefaultMaxEvals;
    std::string csv;
    std::string json_out;
    bool parallel = false;
};

struct ServeArgs {
    std::string oracle;
    std::size_t echo_layers = 0;
    std::string tcp;
    int protocol_version = protocol::kVersion;
    std::size_t reorder = 1;
    bool hang = false;
    std::size_t embed_dim = 0;
};

struct InitModelArgs {
    ToyLMConfig model;
    std::string out;
};

std::size_t resolve_workers(std::optional<std::size_t> flag) {
    return flag ? *flag : workers_from_env(1);
}

void add_ga_options(CLI::App* cmd, GAConfig& ga, std::optional<double>& mutation_rate) {
    cmd->add_option("--generations,-G", ga.generations, "EPPS generations")->capture_default_str();
    cmd->add_option("--population,-S", ga.population, "EPPS population size")->capture_default_str();
    cmd->add_option("--mutation-rate", mutation_rate, "per-bit mutation probability (default 1/m)");
    cmd->add_option("--selection", ga.selection_fraction, "fraction of the population kept as parents")
        ->capture_default_str();
    cmd->add_option("--elitism", ga.elitism, "patterns copied unchanged into the next generation")
        ->capture_default_str();
    cmd->add_option("--patience", ga.patience, "stop after this many stale generations (0 = off)")
        ->capture_default_str();
}

// ---------------------------------------------------------------------------
// sample

int cmd_sample(const SampleArgs& a, std::ostream& out) {
    const std::string corpus = read_corpus(a.corpus);
    out << "# evop sample --corpus " << quote_arg(a.corpus) << " --out " << quote_arg(a.out)
        << " --clusters " << a.ccds.clusters << " --per-cluster " << a.ccds.per_cluster << " --len "
        << a.ccds.sample_len << " --sentences-per-chunk " << a.ccds.sentences_per_chunk
        << " --embed-dim " << a.ccds.embedding_dim << " --kmeans-iters " << a.ccds.kmeans_max_iters
        << " --seed " << a.ccds.seed;
    if (!a.embedder_oracle.empty()) out << " --embedder-oracle " << quote_arg(a.embedder_oracle);
    out << "\n";

    std::unique_ptr<FitnessOracle> embed_oracle;
    std::unique_ptr<Embedder> embedder;
    if (!a.embedder_oracle.empty()) {
        embed_oracle = make_oracle(a.embedder_oracle);
        if (!embed_oracle->can_embed()) {
            throw CapabilityError("oracle " + embed_oracle->describe() + " does not offer embed");
        }
        embedder = std::make_unique<OracleEmbedder>(*embed_oracle);
    }
    const CalibrationDataset ds =
        build_calibration_dataset(corpus, a.ccds, embedder.get(), fingerprint(corpus));
    write_dataset(ds, a.out);

    out << "chunks: " << ds.provenance.value("chunk_count", 0) << "\n";
    out << "cluster sizes: " << ds.provenance["cluster_sizes"].dump() << "\n";
    out << "samples: " << ds.sample_count() << " x " << a.ccds.sample_len << " tokens\n";
    out << "provenance: " << ds.provenance.dump() << "\n";
    out << "wrote " << a.out << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// search / sweep

struct RunSpec {
    std::string method;
    SparsityConfig sparsity;
    GAConfig ga;
    std::size_t trials = 0;
    std::uint64_t max_evals = kDefaultMaxEvals;
};

SearchReport run_method(const RunSpec& r, FitnessOracle& oracle,
                        std::span<const CalibrationSample> samples) {
    if (r.method == "epps") return epps_search(r.ga, r.sparsity, oracle, samples);
    if (r.method == "greedy") return greedy_layer_drop(oracle, samples, r.sparsity, r.ga.workers);
    if (r.method == "ideal") {
        return exhaustive_ideal(oracle, samples, r.sparsity, r.max_evals, r.ga.workers);
    }
    if (r.method == "random") {
        return random_search(oracle, samples, r.sparsity, r.trials, r.ga.seed, true, r.ga.workers);
    }
    throw ConfigError("unknown method '" + r.method + "' (expected epps, greedy, ideal or random)");
}

void check_method(const std::string& m) {
    if (m != "epps" && m != "greedy" && m != "ideal" && m != "random") {
        throw ConfigError("unknown method '" + m + "' (expected epps, greedy, ideal or random)");
    }
}

void check_sample_lengths(const FitnessOracle& oracle, const std::vector<CalibrationSample>& samples) {
    if (samples.empty()) throw DatasetError("dataset has no samples");
    if (const auto* toy = dynamic_cast<const ToyOracle*>(&oracle)) {
        const auto limit = static_cast<std::size_t>(toy->model().config().max_seq_len);
        for (const auto& s : samples) {
            if (s.token_ids.size() > limit) {
                throw ConfigError("sample of " + std::to_string(s.token_ids.size()) +
                                  " tokens exceeds the model's max_seq_len " + std::to_string(limit));
            }
        }
    }
}

int cmd_search(SearchArgs a, std::size_t workers, std::ostream& out) {
    check_method(a.method);
    if (a.theta.has_value() == a.k.has_value()) throw ConfigError("give exactly one of --theta or --k");
    a.ga.workers = workers;
    a.ga.mutation_rate = a.mutation_rate;

    const CalibrationDataset ds = read_dataset(a.dataset);
    const std::vector<CalibrationSample> samples = ds.flattened();
    std::unique_ptr<FitnessOracle> oracle = make_oracle(a.oracle);
    const std::size_t m = oracle->layer_count();
    const SparsityConfig sparsity =
        a.theta ? SparsityConfig::from_theta(*a.theta, m) : SparsityConfig::from_count(*a.k, m);
    a.ga.validate();
    check_sample_lengths(*oracle, samples);

    out << "# evop search --method " << a.method << " --dataset " << quote_arg(a.dataset)
        << " --oracle " << quote_arg(a.oracle);
    if (a.theta) {
        out << " --theta " << exact(*a.theta);
    } else {
        out << " --k " << *a.k;
    }
    out << " --seed " << a.ga.seed;
    if (a.method == "epps") {
        out << " --generations " << a.ga.generations << " --population " << a.ga.population
            << " --mutation-rate " << exact(a.ga.mutation_rate_for(m)) << " --selection "
            << exact(a.ga.selection_fraction) << " --elitism " << a.ga.elitism << " --patience "
            << a.ga.patience;
    } else if (a.method == "random") {
        out << " --trials " << a.trials;
    } else if (a.method == "ideal") {
        out << " --max-evals " << a.max_evals;
    }
    out << "\n";
    out << "oracle: " << oracle->describe() << ", m=" << m << ", k=" << sparsity.pruned;
    try {
        out << ", pattern space=" << pps_size(m, sparsity.pruned) << "\n";
    } catch (const OverflowError&) {
        out << ", pattern space > 2^64\n";
    }

    const RunSpec spec{a.method, sparsity, a.ga, a.trials, a.max_evals};
    const SearchReport report = run_method(spec, *oracle, samples);

    out << "best mask: " << report.best.pattern.to_string() << "\n";
    out << "pruned layers: " << join(report.best.pattern.pruned_layers()) << "\n";
    out << "loss: " << fixed(report.best.loss, 6) << "\n";
    out << "perplexity: " << fixed(report.best.perplexity(), 4) << "\n";
    out << "oracle calls: " << report.oracle_calls << "\n";
    if (!a.out.empty()) {
        write_report(report, a.out, a.timing);
        out << "wrote " << a.out << "\n";
    }
    return kExitOk;
}

struct SweepRow {
    std::string method;
    double theta = 0.0;
    std::size_t k = 0;
    std::uint64_t seed = 0;
    std::optional<SearchReport> report;
    std::string error;
};

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) {
        if (c == '"') q += '"';
        q += (c == '\n' || c == '\r') ? ' ' : c;
    }
    return q + "\"";
}

int cmd_sweep(SweepArgs a, std::size_t workers, std::ostream& out, std::ostream& err) {
    if (a.thetas.empty()) throw ConfigError("--thetas needs at least one value");
    if (a.methods.empty()) throw ConfigError("--methods needs at least one value");
    if (a.seeds.empty()) throw ConfigError("--seeds needs at least one value");
    for (const auto& m : a.methods) check_method(m);
    a.ga.mutation_rate = a.mutation_rate;
    a.ga.validate();

    const CalibrationDataset ds = read_dataset(a.dataset);
    const std::vector<CalibrationSample> samples = ds.flattened();
    std::unique_ptr<FitnessOracle> oracle = make_oracle(a.oracle);
    const std::size_t m = oracle->layer_count();
    check_sample_lengths(*oracle, samples);
    // Every sparsity must be valid before any run starts.
    std::vector<SparsityConfig> sparsities;
    for (double t : a.thetas) sparsities.push_back(SparsityConfig::from_theta(t, m));

    out << "# evop sweep --dataset " << quote_arg(a.dataset) << " --oracle " << quote_arg(a.oracle)
        << " --methods " << join(a.methods) << " --thetas " << join(a.thetas) << " --seeds "
        << join(a.seeds) << " --generations " << a.ga.generations << " --population "
        << a.ga.population << " --mutation-rate " << exact(a.ga.mutation_rate_for(m)) << " --selection "
        << exact(a.ga.selection_fraction) << " --elitism " << a.ga.elitism << " --patience "
        << a.ga.patience << " --trials " << a.trials << " --max-evals " << a.max_evals << "\n";

    std::vector<SweepRow> rows;
    for (const auto& method : a.methods) {
        for (std::size_t t = 0; t < a.thetas.size(); ++t) {
            for (auto seed : a.seeds) {
                rows.push_back({method, a.thetas[t], sparsities[t].pruned, seed, std::nullopt, {}});
            }
        }
    }

    auto run_row = [&](SweepRow& row, FitnessOracle& o, std::size_t row_workers) {
        RunSpec spec{row.method, SparsityConfig::from_theta(row.theta, m), a.ga, a.trials,
                     a.max_evals};
        spec.ga.seed = row.seed;
        spec.ga.workers = row_workers;
        try {
            row.report = run_method(spec, o, samples);
        } catch (const Error& e) {
            row.error = e.what();
        }
    };

    if (a.parallel) {
        // Rows run concurrently; a remote oracle is not shareable, so each row
        // opens its own connection.
        parallel_for(rows.size(), workers, [&](std::size_t i) {
            if (oracle->thread_safe()) {
                run_row(rows[i], *oracle, 1);
            } else {
                try {
                    auto own = make_oracle(a.oracle);
                    run_row(rows[i], *own, 1);
                } catch (const Error& e) {
                    rows[i].error = e.what();
                }
            }
        });
    } else {
        for (auto& row : rows) run_row(row, *oracle, workers);
    }

    std::ostringstream csv;
    csv << "method,theta,k,seed,loss,perplexity,evals,wall_ms,error\n";
    json j_rows = json::array();
    std::size_t failures = 0;
    for (const auto& row : rows) {
        csv << row.method << ',' << exact(row.theta) << ',' << row.k << ',' << row.seed << ',';
        json jr = {{"method", row.method}, {"theta", row.theta}, {"k", row.k}, {"seed", row.seed}};
        if (row.report) {
            const auto& r = *row.report;
            csv << exact(r.best.loss) << ',' << exact(r.best.perplexity()) << ',' << r.oracle_calls
                << ',' << fixed(r.wall_ms, 1) << ",\n";
            jr["report"] = report_to_json(r);
            out << row.method << " theta=" << exact(row.theta) << " k=" << row.k << " seed=" << row.seed
                << " loss=" << fixed(r.best.loss, 6) << " mask=" << r.best.pattern.to_string()
                << " evals=" << r.oracle_calls << "\n";
        } else {
            ++failures;
            csv << ",,,," << csv_field(row.error) << "\n";
            jr["error"] = row.error;
            err << row.method << " theta=" << exact(row.theta) << " seed=" << row.seed
                << " failed: " << row.error << "\n";
        }
        j_rows.push_back(std::move(jr));
    }

    if (!a.csv.empty()) {
        std::ofstream f(a.csv, std::ios::binary);
        if (!f) throw Error("cannot write " + a.csv);
        f << csv.str();
        out << "wrote " << a.csv << "\n";
    } else {
        out << csv.str();
    }
    if (!a.json_out.empty()) {
        json doc = {{"schema_version", kReportSchemaVersion},
                    {"kind", "evop.sweep"},
                    {"oracle", oracle->describe()},
                    {"layers", m},
                    {"rows", std::move(j_rows)}};
        std::ofstream f(a.json_out, std::ios::binary);
        if (!f) throw Error("cannot write " + a.json_out);
        f << doc.dump(2) << "\n";
        out << "wrote " << a.json_out << "\n";
    }
    if (failures > 0) out << failures << " of " << rows.size() << " runs failed\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// serve / init-model

int cmd_serve(const ServeArgs& a, std::ostream& err) {
    if (a.oracle.empty() == (a.echo_layers == 0)) {
        throw ConfigError("give exactly one of --oracle or --echo");
    }
    std::unique_ptr<FitnessOracle> oracle;
    if (a.echo_layers > 0) {
        oracle = std::make_unique<PopcountOracle>(a.echo_layers);
    } else {
        oracle = make_oracle(a.oracle);
    }
    ServeOptions opts;
    opts.protocol_version = a.protocol_version;
    opts.reorder_window = a.reorder;
    opts.hang = a.hang;
    opts.embed_dimension = a.embed_dim;
    ignore_sigpipe();

    if (a.tcp.empty()) {
        FdChannel stdio(0, 1, false, "stdio");
        serve(*oracle, stdio, opts);
        return kExitOk;
    }
    const auto colon = a.tcp.rfind(':');
    if (colon == std::string::npos) throw ConfigError("--tcp expects host:port");
    const std::string host = a.tcp.substr(0, colon);
    const int port = std::stoi(a.tcp.substr(colon + 1));
    if (port < 0 || port > 65535) throw ConfigError("--tcp port out of range");
    TcpListener listener(host, static_cast<std::uint16_t>(port));
    // The bound port goes to stdout so scripts can use port 0.
    std::cout << "listening " << host << ":" << listener.port() << std::endl;
    for (;;) {
        auto conn = listener.accept();
        try {
            serve(*oracle, *conn, opts);
        } catch (const TransportError& e) {
            err << "connection dropped: " << e.what() << "\n";
        }
    }
}

int cmd_init_model(const InitModelArgs& a, std::ostream& out) {
    const ToyLM model = ToyLM::init(a.model);
    save_checkpoint(model, a.out);
    const auto& c = a.model;
    out << "# evop init-model --seed " << c.weight_seed << " --layers " << c.n_layers << " --d-model "
        << c.d_model << " --heads " << c.n_heads << " --d-ff " << c.d_ff << " --max-seq-len "
        << c.max_seq_len << " --out " << quote_arg(a.out) << "\n";
    out << "wrote " << a.out << "\n";
    return kExitOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Layer-pruning pattern search over a fitness oracle"};
    app.name("evop");
    app.require_subcommand(1);
    std::optional<std::size_t> workers;
    app.add_option("--workers,-j", workers, "worker threads (default: EVOP_WORKERS or 1)");

    SampleArgs sample;
    auto* c_sample = app.add_subcommand("sample", "build a calibration dataset from a text corpus");
    c_sample->add_option("--corpus", sample.corpus, "text file or directory of *.txt")->required();
    c_sample->add_option("--out,-o", sample.out, "dataset JSON to write")->required();
    c_sample->add_option("--clusters", sample.ccds.clusters)->capture_default_str();
    c_sample->add_option("--per-cluster", sample.ccds.per_cluster)->capture_default_str();
    c_sample->add_option("--len", sample.ccds.sample_len, "tokens per sample")->capture_default_str();
    c_sample->add_option("--sentences-per-chunk", sample.ccds.sentences_per_chunk)
        ->capture_default_str();
    c_sample->add_option("--embed-dim", sample.ccds.embedding_dim)->capture_default_str();
    c_sample->add_option("--kmeans-iters", sample.ccds.kmeans_max_iters)->capture_default_str();
    c_sample->add_option("--seed", sample.ccds.seed)->capture_default_str();
    c_sample->add_option("--embedder-oracle", sample.embedder_oracle,
                         "embed chunks through an oracle with the embed capability");

    SearchArgs search;
    auto* c_search = app.add_subcommand("search", "run one pruning-pattern search");
    c_search->add_option("--method", search.method, "epps, greedy, ideal or random")
        ->capture_default_str();
    c_search->add_option("--dataset", search.dataset)->required();
    c_search->add_option("--oracle", search.oracle, "toy:..., exec:... or tcp:host:port")
        ->required();
    c_search->add_option("--theta", search.theta, "fraction of layers to prune");
    c_search->add_option("--k", search.k, "number of layers to prune");
    c_search->add_option("--seed", search.ga.seed)->capture_default_str();
    add_ga_options(c_search, search.ga, search.mutation_rate);
    c_search->add_option("--trials", search.trials, "random search draws")->capture_default_str();
    c_search->add_option("--max-evals", search.max_evals, "budget for the ideal method")
        ->capture_default_str();
    c_search->add_option("--out,-o", search.out, "SearchReport JSON to write");
    c_search->add_flag("--timing", search.timing, "include wall_ms in the report");

    SweepArgs sweep;
    auto* c_sweep = app.add_subcommand("sweep", "grid of methods x sparsities x seeds");
    c_sweep->add_option("--dataset", sweep.dataset)->required();
    c_sweep->add_option("--oracle", sweep.oracle)->required();
    c_sweep->add_option("--thetas", sweep.thetas, "comma-separated sparsities")
        ->delimiter(',')
        ->required();
    c_sweep->add_option("--methods", sweep.methods)->delimiter(',')->capture_default_str();
    c_sweep->add_option("--seeds", sweep.seeds)->delimiter(',')->capture_default_str();
    add_ga_options(c_sweep, sweep.ga, sweep.mutation_rate);
    c_sweep->add_option("--trials", sweep.trials)->capture_default_str();
    c_sweep->add_option("--max-evals", sweep.max_evals)->capture_default_str();
    c_sweep->add_option("--csv", sweep.csv, "CSV file (default: stdout)");
    c_sweep->add_option("--json", sweep.json_out, "JSON file with full reports");
    c_sweep->add_flag("--parallel", sweep.parallel, "run rows concurrently on the worker pool");

    ServeArgs serve_args;
    auto* c_serve = app.add_subcommand("serve", "answer the oracle protocol on stdio or TCP");
    c_serve->add_option("--oracle", serve_args.oracle, "oracle to serve");
    c_serve->add_option("--echo", serve_args.echo_layers,
                        "serve the popcount/m reference stub with this many layers");
    c_serve->add_option("--tcp", serve_args.tcp, "listen on host:port instead of stdio");
    c_serve->add_option("--protocol-version", serve_args.protocol_version)->capture_default_str();
    c_serve->add_option("--reorder", serve_args.reorder, "answer in reverse order within windows")
        ->capture_default_str();
    c_serve->add_flag("--hang", serve_args.hang, "never answer requests");
    c_serve->add_option("--embed-dim", serve_args.embed_dim,
                        "advertise embed with the trigram embedder of this dimension");

    InitModelArgs init;
    auto* c_init = app.add_subcommand("init-model", "write a random toy model checkpoint");
    c_init->add_option("--seed", init.model.weight_seed)->capture_default_str();
    c_init->add_option("--layers", init.model.n_layers)->capture_default_str();
    c_init->add_option("--d-model", init.model.d_model)->capture_default_str();
    c_init->add_option("--heads", init.model.n_heads)->capture_default_str();
    c_init->add_option("--d-ff", init.model.d_ff)->capture_default_str();
    c_init->add_option("--max-seq-len", init.model.max_seq_len)->capture_default_str();
    c_init->add_option("--out,-o", init.out)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    const std::size_t n_workers = resolve_workers(workers);
    sample.ccds.workers = n_workers;
    try {
        if (c_sample->parsed()) return cmd_sample(sample, out);
        if (c_search->parsed()) return cmd_search(search, n_workers, out);
        if (c_sweep->parsed()) return cmd_sweep(sweep, n_workers, out, err);
        if (c_serve->parsed()) return cmd_serve(serve_args, err);
        if (c_init->parsed()) return cmd_init_model(init, out);
    } catch (const BudgetExceeded& e) {
        err << "error: " << e.what() << "\n";
        return kExitBudget;
    } catch (const OracleError& e) {
        err << "oracle error: " << e.what() << "\n";
        return kExitOracle;
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitUsage;
}

}  // namespace evop::cli
