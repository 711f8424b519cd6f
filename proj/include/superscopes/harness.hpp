#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "superscopes/interpretation.hpp"

namespace superscopes {

struct CorpusEntry {
    std::string id;
    std::string source_prompt;
    std::string subject;
    std::string reference;
    std::optional<int> position;  // 1-based; defaults to the subject's last token

    bool operator==(const CorpusEntry &) const = default;
};

/// JSON array of {id?, source_prompt, subject, reference, position?}. Missing
/// ids become "p<index>". Throws SchemaViolation on malformed input or
/// duplicate ids, InvalidArgument when the corpus is empty.
std::vector<CorpusEntry> parse_corpus(const nlohmann::json &doc);
std::vector<CorpusEntry> load_corpus(const std::filesystem::path &path);

struct EvalConfig {
    std::vector<int> layers{1, 2, 3, 4, 5, 6, 7};
    ReprKind kind = ReprKind::MlpOutput;
    AlphaGrid grid = AlphaGrid::standard();
    PatchSpec spec;
    double threshold = kDefaultThreshold;
    int workers = 1;

    nlohmann::json to_json() const;
};

struct EvalRow {
    std::string prompt_id;
    ReprSelector selector;  // position 0 when the entry failed before it was resolved
    double alpha = 1.0;
    std::string text;
    std::optional<double> score;
    bool success = false;
    std::optional<std::string> error;  // "<ErrorCode>: message"

    bool operator==(const EvalRow &) const = default;
};

struct LayerCounts {
    int superscopes_successes = 0;  // some grid alpha succeeded
    int patchscopes_successes = 0;  // alpha == 1 succeeded
    int total = 0;                  // corpus entries evaluated at this layer

    bool operator==(const LayerCounts &) const = default;
};

using LayerSuccessTable = std::map<int, LayerCounts>;

struct EvalReport {
    nlohmann::json config;
    std::vector<EvalRow> rows;
    LayerSuccessTable table;

    bool operator==(const EvalReport &) const = default;
};

/// Aggregates rows per layer. Every layer in `layers` gets an entry.
LayerSuccessTable aggregate(const std::vector<EvalRow> &rows, const std::vector<int> &layers);

/// One row per (entry, layer, alpha) in corpus, layer, alpha order. Failures
/// are recorded on the affected rows and never abort the batch. Entries run on
/// up to config.workers threads; the scorer must tolerate concurrent calls.
/// Throws InvalidArgument for an empty corpus, layers outside [1..L], or a grid
/// without 1.
EvalReport run_eval(const ModelBundle &bundle, const std::vector<CorpusEntry> &corpus, const EvalConfig &config,
                    const Scorer &scorer);

enum class ReportFormat { Json, Csv };

inline constexpr int kReportSchemaVersion = 1;

/// {schema_version, config, rows[], layer_table{}}
nlohmann::json report_to_json(const EvalReport &report);
EvalReport report_from_json(const nlohmann::json &doc);

/// prompt_id,kind,layer,position,alpha,text,score,success,error
std::string rows_to_csv(const std::vector<EvalRow> &rows);
std::vector<EvalRow> rows_from_csv(std::string_view csv);

/// Serialized report text; JSON output replaces invalid UTF-8 with U+FFFD.
std::string render_report(const EvalReport &report, ReportFormat format);
/// Throws IoError when the file cannot be written.
void emit_report(const EvalReport &report, ReportFormat format, const std::filesystem::path &path);

/// Shortest text that parses back to the same double.
std::string format_double(double v);

} // namespace superscopes
