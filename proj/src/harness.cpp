#include "superscopes/harness.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <fstream>
#include <set>
#include <thread>

#include "superscopes/error.hpp"

namespace superscopes {

using nlohmann::json;

namespace {

std::string error_marker(const Error &e) {
    return std::string(to_string(e.code())) + ": " + e.what();
}

const json &require(const json &obj, const char *key, json::value_t type, const std::string &where) {
    check(obj.contains(key), ErrorCode::SchemaViolation, where + ": missing \"" + key + "\"");
    const json &v = obj.at(key);
    const bool ok = type == json::value_t::number_integer ? v.is_number_integer() : v.type() == type;
    check(ok, ErrorCode::SchemaViolation, where + ": \"" + key + "\" has the wrong type");
    return v;
}

std::vector<EvalRow> evaluate_entry(const ModelBundle &bundle, const CorpusEntry &entry, const EvalConfig &config,
                                    const Scorer &scorer, const PreparedTarget &prepared) {
    std::vector<EvalRow> rows;
    auto fill_all = [&](int position, const std::string &error) {
        rows.clear();
        for (int layer : config.layers) {
            for (double alpha : config.grid.values()) {
                EvalRow row;
                row.prompt_id = entry.id;
                row.selector = {config.kind, layer, position};
                row.alpha = alpha;
                row.error = error;
                rows.push_back(std::move(row));
            }
        }
    };

    std::optional<ActivationTrace> trace;
    int position = 0;
    try {
        const TokenSequence prompt = encode(bundle, entry.source_prompt);
        position = entry.position ? *entry.position : last_subject_position(prompt, entry.subject);
        check(position >= 1 && position <= static_cast<int>(prompt.size()), ErrorCode::InvalidSelector,
              "position " + std::to_string(position) + " outside the prompt");
        trace = forward_with_trace(bundle, prompt);
    } catch (const Error &e) {
        fill_all(position, error_marker(e));
        return rows;
    }

    const ScoreRequest request{&scorer, entry.reference, config.threshold};
    for (int layer : config.layers) {
        const ReprSelector sel{config.kind, layer, position};
        for (double alpha : config.grid.values()) {
            EvalRow row;
            row.prompt_id = entry.id;
            row.selector = sel;
            row.alpha = alpha;
            try {
                const auto result = interpret(bundle, *trace, sel, Amplifier(alpha), config.spec, &request, &prepared);
                row.text = result.text;
                row.score = result.score;
                row.success = result.success.value_or(false);
            } catch (const Error &e) {
                row.error = error_marker(e);
            }
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

json row_to_json(const EvalRow &row) {
    return {
        {"prompt_id", row.prompt_id},
        {"kind", to_string(row.selector.kind)},
        {"layer", row.selector.layer},
        {"position", row.selector.position},
        {"alpha", row.alpha},
        {"text", row.text},
        {"score", row.score ? json(*row.score) : json(nullptr)},
        {"success", row.success},
        {"error", row.error ? json(*row.error) : json(nullptr)},
    };
}

EvalRow row_from_json(const json &j) {
    const std::string where = "report row";
    check(j.is_object(), ErrorCode::SchemaViolation, where + " is not an object");
    EvalRow row;
    row.prompt_id = require(j, "prompt_id", json::value_t::string, where).get<std::string>();
    row.selector.kind = parse_repr_kind(require(j, "kind", json::value_t::string, where).get<std::string>());
    row.selector.layer = require(j, "layer", json::value_t::number_integer, where).get<int>();
    row.selector.position = require(j, "position", json::value_t::number_integer, where).get<int>();
    check(j.contains("alpha") && j.at("alpha").is_number(), ErrorCode::SchemaViolation, where + ": bad alpha");
    row.alpha = j.at("alpha").get<double>();
    row.text = require(j, "text", json::value_t::string, where).get<std::string>();
    if (j.contains("score") && !j.at("score").is_null()) {
        check(j.at("score").is_number(), ErrorCode::SchemaViolation, where + ": bad score");
        row.score = j.at("score").get<double>();
    }
    row.success = require(j, "success", json::value_t::boolean, where).get<bool>();
    if (j.contains("error") && !j.at("error").is_null()) {
        row.error = require(j, "error", json::value_t::string, where).get<std::string>();
    }
    return row;
}

std::string csv_field(std::string_view s) {
    if (s.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(s);
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

std::vector<std::vector<std::string>> parse_csv_records(std::string_view text) {
    std::vector<std::vector<std::string>> records;
    std::vector<std::string> record;
    std::string field;
    bool quoted = false;
    bool any = false;
    for (size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                field += c;
            }
            continue;
        }
        any = true;
        if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            record.push_back(std::move(field));
            field.clear();
        } else if (c == '\n' || c == '\r') {
            if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
            record.push_back(std::move(field));
            field.clear();
            records.push_back(std::move(record));
            record.clear();
            any = false;
        } else {
            field += c;
        }
    }
    check(!quoted, ErrorCode::SchemaViolation, "unterminated quoted CSV field");
    if (any) {
        record.push_back(std::move(field));
        records.push_back(std::move(record));
    }
    return records;
}

template <typename T>
T parse_number(const std::string &s, const char *what) {
    T v{};
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    check(ec == std::errc() && ptr == s.data() + s.size(), ErrorCode::SchemaViolation,
          std::string("CSV: bad ") + what + " \"" + s + "\"");
    return v;
}

constexpr std::string_view kCsvHeader = "prompt_id,kind,layer,position,alpha,text,score,success,error";

} // namespace

std::vector<CorpusEntry> parse_corpus(const json &doc) {
    check(doc.is_array(), ErrorCode::SchemaViolation, "corpus must be a JSON array");
    check(!doc.empty(), ErrorCode::InvalidArgument, "corpus is empty");
    std::vector<CorpusEntry> corpus;
    std::set<std::string> ids;
    for (size_t i = 0; i < doc.size(); ++i) {
        const json &item = doc[i];
        const std::string where = "corpus entry " + std::to_string(i);
        check(item.is_object(), ErrorCode::SchemaViolation, where + " is not an object");
        CorpusEntry e;
        e.id = item.contains("id") ? require(item, "id", json::value_t::string, where).get<std::string>()
                                   : "p" + std::to_string(i);
        e.source_prompt = require(item, "source_prompt", json::value_t::string, where).get<std::string>();
        e.reference = require(item, "reference", json::value_t::string, where).get<std::string>();
        if (item.contains("position") && !item.at("position").is_null()) {
            e.position = require(item, "position", json::value_t::number_integer, where).get<int>();
            check(*e.position >= 1, ErrorCode::SchemaViolation, where + ": position must be >= 1");
        }
        if (item.contains("subject")) {
            e.subject = require(item, "subject", json::value_t::string, where).get<std::string>();
        }
        check(e.position || !e.subject.empty(), ErrorCode::SchemaViolation,
              where + ": needs a subject or an explicit position");
        check(e.position || e.source_prompt.find(e.subject) != std::string::npos, ErrorCode::SchemaViolation,
              where + ": subject does not occur in source_prompt");
        check(!e.reference.empty(), ErrorCode::SchemaViolation, where + ": empty reference");
        check(ids.insert(e.id).second, ErrorCode::SchemaViolation, where + ": duplicate id \"" + e.id + "\"");
        corpus.push_back(std::move(e));
    }
    return corpus;
}

std::vector<CorpusEntry> load_corpus(const std::filesystem::path &path) {
    std::ifstream in(path);
    check(in.good(), ErrorCode::MissingArtifact, "cannot open corpus " + path.string());
    json doc;
    try {
        in >> doc;
    } catch (const json::exception &e) {
        fail(ErrorCode::SchemaViolation, path.string() + ": " + e.what());
    }
    return parse_corpus(doc);
}

json EvalConfig::to_json() const {
    json target_layer = spec.target_layer.same_as_source ? json("same") : json(spec.target_layer.layer);
    return {
        {"layers", layers},
        {"kind", superscopes::to_string(kind)},
        {"alphas", grid.values()},
        {"target_prompt", spec.target_prompt},
        {"target_layer", target_layer},
        {"max_new_tokens", spec.max_new_tokens},
        {"threshold", threshold},
    };
}

LayerSuccessTable aggregate(const std::vector<EvalRow> &rows, const std::vector<int> &layers) {
    struct Flags {
        bool any = false;
        bool at_one = false;
    };
    std::map<int, std::map<std::string, Flags>> seen;
    for (int layer : layers) seen[layer];
    for (const auto &row : rows) {
        Flags &f = seen[row.selector.layer][row.prompt_id];
        f.any = f.any || row.success;
        f.at_one = f.at_one || (row.success && row.alpha == 1.0);
    }
    LayerSuccessTable table;
    for (const auto &[layer, entries] : seen) {
        LayerCounts &c = table[layer];
        for (const auto &[id, f] : entries) {
            ++c.total;
            c.superscopes_successes += f.any ? 1 : 0;
            c.patchscopes_successes += f.at_one ? 1 : 0;
        }
    }
    return table;
}

EvalReport run_eval(const ModelBundle &bundle, const std::vector<CorpusEntry> &corpus, const EvalConfig &config,
                    const Scorer &scorer) {
    check(!corpus.empty(), ErrorCode::InvalidArgument, "corpus is empty");
    check(!config.layers.empty(), ErrorCode::InvalidArgument, "no layers to evaluate");
    const int L = bundle.config().n_layers;
    for (int layer : config.layers) {
        check(layer >= 1 && layer <= L, ErrorCode::InvalidArgument,
              "layer " + std::to_string(layer) + " outside [1.." + std::to_string(L) + "]");
    }
    check(config.grid.contains_one(), ErrorCode::InvalidArgument, "the alpha grid must contain 1");
    check(config.threshold > 0.0 && config.threshold < 1.0, ErrorCode::InvalidArgument, "threshold must be in (0, 1)");
    check(config.workers >= 1, ErrorCode::InvalidArgument, "workers must be >= 1");

    const auto prepared = prepare_target(bundle, config.spec.target_prompt);
    std::vector<std::vector<EvalRow>> per_entry(corpus.size());
    std::atomic<size_t> next{0};
    auto work = [&] {
        for (size_t i = next++; i < corpus.size(); i = next++) {
            per_entry[i] = evaluate_entry(bundle, corpus[i], config, scorer, prepared);
        }
    };
    const size_t n_threads = std::min<size_t>(static_cast<size_t>(config.workers), corpus.size());
    if (n_threads <= 1) {
        work();
    } else {
        std::vector<std::jthread> pool;
        for (size_t t = 0; t < n_threads; ++t) pool.emplace_back(work);
    }

    EvalReport report;
    report.config = config.to_json();
    for (auto &rows : per_entry) {
        std::move(rows.begin(), rows.end(), std::back_inserter(report.rows));
    }
    report.table = aggregate(report.rows, config.layers);
    return report;
}

json report_to_json(const EvalReport &report) {
    json rows = json::array();
    for (const auto &row : report.rows) rows.push_back(row_to_json(row));
    json table = json::object();
    for (const auto &[layer, c] : report.table) {
        table[std::to_string(layer)] = {
            {"superscopes_successes", c.superscopes_successes},
            {"patchscopes_successes", c.patchscopes_successes},
            {"total", c.total},
        };
    }
    return {{"schema_version", kReportSchemaVersion}, {"config", report.config}, {"rows", rows}, {"layer_table", table}};
}

EvalReport report_from_json(const json &doc) {
    const std::string where = "report";
    check(doc.is_object(), ErrorCode::SchemaViolation, "report must be a JSON object");
    const int version = require(doc, "schema_version", json::value_t::number_integer, where).get<int>();
    check(version == kReportSchemaVersion, ErrorCode::SchemaViolation,
          "unsupported report schema_version " + std::to_string(version));
    EvalReport report;
    report.config = require(doc, "config", json::value_t::object, where);
    for (const auto &row : require(doc, "rows", json::value_t::array, where)) {
        report.rows.push_back(row_from_json(row));
    }
    for (const auto &[key, c] : require(doc, "layer_table", json::value_t::object, where).items()) {
        const std::string cw = "layer_table." + key;
        report.table[parse_number<int>(key, "layer")] = {
            require(c, "superscopes_successes", json::value_t::number_integer, cw).get<int>(),
            require(c, "patchscopes_successes", json::value_t::number_integer, cw).get<int>(),
            require(c, "total", json::value_t::number_integer, cw).get<int>(),
        };
    }
    return report;
}

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

std::string rows_to_csv(const std::vector<EvalRow> &rows) {
    std::string out(kCsvHeader);
    out += '\n';
    for (const auto &row : rows) {
        out += csv_field(row.prompt_id) + ',';
        out += std::string(to_string(row.selector.kind)) + ',';
        out += std::to_string(row.selector.layer) + ',';
        out += std::to_string(row.selector.position) + ',';
        out += format_double(row.alpha) + ',';
        out += csv_field(row.text) + ',';
        out += (row.score ? format_double(*row.score) : std::string()) + ',';
        out += row.success ? "true," : "false,";
        out += row.error ? csv_field(*row.error) : std::string();
        out += '\n';
    }
    return out;
}

std::vector<EvalRow> rows_from_csv(std::string_view csv) {
    const auto records = parse_csv_records(csv);
    check(!records.empty(), ErrorCode::SchemaViolation, "CSV has no header");
    std::string header;
    for (size_t i = 0; i < records[0].size(); ++i) header += (i ? "," : "") + records[0][i];
    check(header == kCsvHeader, ErrorCode::SchemaViolation, "unexpected CSV header \"" + header + "\"");
    std::vector<EvalRow> rows;
    for (size_t r = 1; r < records.size(); ++r) {
        const auto &f = records[r];
        check(f.size() == 9, ErrorCode::SchemaViolation, "CSV record " + std::to_string(r) + " needs 9 fields");
        EvalRow row;
        row.prompt_id = f[0];
        row.selector.kind = parse_repr_kind(f[1]);
        row.selector.layer = parse_number<int>(f[2], "layer");
        row.selector.position = parse_number<int>(f[3], "position");
        row.alpha = parse_number<double>(f[4], "alpha");
        row.text = f[5];
        if (!f[6].empty()) row.score = parse_number<double>(f[6], "score");
        check(f[7] == "true" || f[7] == "false", ErrorCode::SchemaViolation, "CSV: bad success \"" + f[7] + "\"");
        row.success = f[7] == "true";
        if (!f[8].empty()) row.error = f[8];
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string render_report(const EvalReport &report, ReportFormat format) {
    if (format == ReportFormat::Csv) return rows_to_csv(report.rows);
    return report_to_json(report).dump(2, ' ', false, json::error_handler_t::replace) + "\n";
}

void emit_report(const EvalReport &report, ReportFormat format, const std::filesystem::path &path) {
    check(!report.rows.empty(), ErrorCode::InvalidArgument, "no rows to report");
    const std::string text = render_report(report, format);
    std::ofstream out(path, std::ios::binary);
    check(out.good(), ErrorCode::IoError, "cannot write " + path.string());
    out << text;
    out.flush();
    check(out.good(), ErrorCode::IoError, "write failed for " + path.string());
}

} // namespace superscopes
