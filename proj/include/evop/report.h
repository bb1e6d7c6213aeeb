#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "evop/core.h"

namespace evop {

struct TraceStep {
    std::size_t index = 0;  // generation, greedy step, or enumeration batch
    FitnessRecord best;     // best pattern produced by this step
    double best_ever_loss = 0.0;
    std::optional<double> mean_loss;          // EPPS population mean
    std::optional<std::size_t> chosen_layer;  // greedy: layer committed at this step
    std::size_t oracle_calls = 0;             // cumulative
};

struct SearchReport {
    std::string method;
    nlohmann::json config = nlohmann::json::object();
    std::vector<std::uint64_t> seeds;
    std::vector<TraceStep> trace;
    FitnessRecord best;
    std::size_t oracle_calls = 0;
    double wall_ms = 0.0;
};

inline constexpr int kReportSchemaVersion = 1;

/// Wall-clock time is left out unless `include_timing`, so that equal
/// inputs serialize to identical bytes.
nlohmann::json report_to_json(const SearchReport& report, bool include_timing = false);
void write_report(const SearchReport& report, const std::filesystem::path& path,
                  bool include_timing = false);

}  // namespace evop
