#include "evop/report.h"

#include <fstream>

#include "evop/error.h"

namespace evop {

namespace {

nlohmann::json record_to_json(const FitnessRecord& r) {
    return {{"mask", r.pattern.to_string()},
            {"pruned_layers", r.pattern.pruned_layers()},
            {"loss", r.loss},
            {"perplexity", r.perplexity()}};
}

}  // namespace

nlohmann::json report_to_json(const SearchReport& report, bool include_timing) {
    nlohmann::json trace = nlohmann::json::array();
    for (const auto& s : report.trace) {
        nlohmann::json step = {{"index", s.index},
                               {"best_mask", s.best.pattern.to_string()},
                               {"best_loss", s.best.loss},
                               {"best_ever_loss", s.best_ever_loss},
                               {"oracle_calls", s.oracle_calls}};
        if (s.mean_loss) step["mean_loss"] = *s.mean_loss;
        if (s.chosen_layer) step["chosen_layer"] = *s.chosen_layer;
        trace.push_back(std::move(step));
    }
    nlohmann::json j = {{"schema_version", kReportSchemaVersion},
                        {"kind", "evop.search_report"},
                        {"method", report.method},
                        {"config", report.config},
                        {"seeds", report.seeds},
                        {"best", record_to_json(report.best)},
                        {"oracle_calls", report.oracle_calls},
                        {"trace", std::move(trace)}};
    if (include_timing) j["wall_ms"] = report.wall_ms;
    return j;
}

void write_report(const SearchReport& report, const std::filesystem::path& path, bool include_timing) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write report " + path.string());
    out << report_to_json(report, include_timing).dump(2) << '\n';
    if (!out) throw Error("failed writing report " + path.string());
}

}  // namespace evop
