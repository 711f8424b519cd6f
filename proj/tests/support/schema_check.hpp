#pragma once

#include <regex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace superscopes::testing {

/// Validator for the JSON Schema subset used in docs/api-schema.json: type,
/// enum, required, properties, additionalProperties: false, items, minItems,
/// minimum/maximum (inclusive and exclusive), minLength, pattern, oneOf,
/// allOf and local $ref. Returns one message per violation.
class SchemaCheck {
public:
    explicit SchemaCheck(nlohmann::json document) : doc_(std::move(document)) {}

    std::vector<std::string> errors(const nlohmann::json &value, const std::string &schema_name) const {
        std::vector<std::string> out;
        check(value, doc_.at("components").at("schemas").at(schema_name), "$", out);
        return out;
    }

private:
    const nlohmann::json &resolve(const nlohmann::json &schema) const {
        if (!schema.contains("$ref")) return schema;
        const auto ref = schema.at("$ref").get<std::string>();
        return doc_.at(nlohmann::json::json_pointer(ref.substr(1)));
    }

    static bool has_type(const nlohmann::json &v, const std::string &t) {
        if (t == "object") return v.is_object();
        if (t == "array") return v.is_array();
        if (t == "string") return v.is_string();
        if (t == "integer") return v.is_number_integer();
        if (t == "number") return v.is_number();
        if (t == "boolean") return v.is_boolean();
        if (t == "null") return v.is_null();
        return false;
    }

    void check(const nlohmann::json &v, const nlohmann::json &raw, const std::string &at,
               std::vector<std::string> &out) const {
        const auto &s = resolve(raw);
        if (s.contains("allOf")) {
            for (const auto &sub : s.at("allOf")) check(v, sub, at, out);
        }
        if (s.contains("oneOf")) {
            int matches = 0;
            for (const auto &sub : s.at("oneOf")) {
                std::vector<std::string> tmp;
                check(v, sub, at, tmp);
                matches += tmp.empty() ? 1 : 0;
            }
            if (matches != 1) out.push_back(at + ": matches " + std::to_string(matches) + " oneOf branches");
        }
        if (s.contains("type")) {
            const auto &t = s.at("type");
            bool ok = false;
            if (t.is_string()) {
                ok = has_type(v, t.get<std::string>());
            } else {
                for (const auto &x : t) ok = ok || has_type(v, x.get<std::string>());
            }
            if (!ok) {
                out.push_back(at + ": expected type " + t.dump() + ", got " + v.dump());
                return;
            }
        }
        if (s.contains("enum")) {
            bool found = false;
            for (const auto &e : s.at("enum")) found = found || e == v;
            if (!found) out.push_back(at + ": " + v.dump() + " not in enum");
        }
        if (v.is_number()) {
            const double d = v.get<double>();
            if (s.contains("minimum") && d < s.at("minimum").get<double>()) out.push_back(at + ": below minimum");
            if (s.contains("maximum") && d > s.at("maximum").get<double>()) out.push_back(at + ": above maximum");
            if (s.contains("exclusiveMinimum") && d <= s.at("exclusiveMinimum").get<double>()) {
                out.push_back(at + ": not above exclusiveMinimum");
            }
            if (s.contains("exclusiveMaximum") && d >= s.at("exclusiveMaximum").get<double>()) {
                out.push_back(at + ": not below exclusiveMaximum");
            }
        }
        if (v.is_string()) {
            const auto str = v.get<std::string>();
            if (s.contains("minLength") && str.size() < s.at("minLength").get<size_t>()) {
                out.push_back(at + ": shorter than minLength");
            }
            if (s.contains("pattern") && !std::regex_search(str, std::regex(s.at("pattern").get<std::string>()))) {
                out.push_back(at + ": does not match pattern");
            }
        }
        if (v.is_array()) {
            if (s.contains("minItems") && v.size() < s.at("minItems").get<size_t>()) {
                out.push_back(at + ": fewer than minItems");
            }
            if (s.contains("items")) {
                for (size_t i = 0; i < v.size(); ++i) check(v[i], s.at("items"), at + "[" + std::to_string(i) + "]", out);
            }
        }
        if (v.is_object()) {
            if (s.contains("required")) {
                for (const auto &k : s.at("required")) {
                    if (!v.contains(k.get<std::string>())) out.push_back(at + ": missing " + k.get<std::string>());
                }
            }
            const bool closed = s.contains("additionalProperties") && s.at("additionalProperties") == false;
            for (const auto &[k, child] : v.items()) {
                if (s.contains("properties") && s.at("properties").contains(k)) {
                    check(child, s.at("properties").at(k), at + "." + k, out);
                } else if (closed) {
                    out.push_back(at + ": unexpected property " + k);
                }
            }
        }
    }

    nlohmann::json doc_;
};

} // namespace superscopes::testing
