#pragma once

#include <json.hpp>

#include <cmath>
#include <string>
#include <string_view>
#include <vector>

namespace hdmi::cli {

using Json = nlohmann::json;

inline constexpr std::string_view kConfigSchema = R"json({
  "$schema": "https://json-schema.org/draft/2020-12/schema",
  "title": "hdmi run configuration",
  "type": "object",
  "additionalProperties": false,
  "properties": {
    "command": {"type": "string", "enum": ["simulate", "impute", "resample", "diagnose", "report"]},
    "seed": {"type": "integer", "minimum": 0},
    "jobs": {"type": "integer", "minimum": 1},
    "out": {"type": "string", "minLength": 1},
    "input": {"type": "string", "minLength": 1},
    "methods": {"type": "array", "minItems": 1, "items": {"type": "string", "minLength": 1}},
    "condition": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "label": {"type": "string", "minLength": 1},
        "n": {"type": "integer", "minimum": 3},
        "p": {"type": "integer", "minimum": 10},
        "pm": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "S": {"type": "integer", "minimum": 1}
      }
    },
    "population": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "mean": {"type": "number"},
        "variance": {"type": "number", "exclusiveMinimum": 0},
        "block1_rho": {"type": "number", "minimum": -1, "maximum": 1},
        "block2_rho": {"type": "number", "minimum": -1, "maximum": 1},
        "block2_within": {"type": "boolean"},
        "mar_slope": {"type": "number"}
      }
    },
    "imputation": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "chains": {"type": "integer", "minimum": 1},
        "iterations": {"type": "integer", "minimum": 1},
        "targets": {"type": "array", "items": {"type": "string"}},
        "ridge_kappa": {"type": "number", "exclusiveMinimum": 0},
        "kappa_grid": {"type": "array", "minItems": 1, "items": {"type": "number", "exclusiveMinimum": 0}},
        "pilot_count": {"type": "integer", "minimum": 1},
        "cv_folds": {"type": "integer", "minimum": 2},
        "blasso_sweeps": {"type": "integer", "minimum": 1},
        "pca_var_target": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "cart_min_leaf": {"type": "integer", "minimum": 1},
        "cart_cp": {"type": "number", "minimum": 0},
        "forest_trees": {"type": "integer", "minimum": 1},
        "forest_min_leaf": {"type": "integer", "minimum": 1},
        "forest_mtry": {"type": "integer", "minimum": 0},
        "qp_threshold": {"type": "number", "minimum": 0, "maximum": 1},
        "qp_ridge": {"type": "number", "minimum": 0},
        "analysis_vars": {"type": "array", "items": {"type": "string"}},
        "oracle_vars": {"type": "array", "items": {"type": "string"}}
      }
    },
    "resample": {
      "type": "object",
      "additionalProperties": false,
      "required": ["targets", "predictors", "models"],
      "properties": {
        "label": {"type": "string", "minLength": 1},
        "n": {"type": "integer", "minimum": 3},
        "S": {"type": "integer", "minimum": 1},
        "pm": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "targets": {"type": "array", "minItems": 1, "items": {"type": "string"}},
        "predictors": {"type": "array", "minItems": 1, "items": {"type": "string"}},
        "slopes": {"type": "array", "minItems": 1, "items": {"type": "number"}},
        "models": {
          "type": "array",
          "minItems": 1,
          "items": {
            "type": "object",
            "additionalProperties": false,
            "required": ["name", "response", "predictors"],
            "properties": {
              "name": {"type": "string", "minLength": 1},
              "response": {"type": "string"},
              "predictors": {"type": "array", "minItems": 1, "items": {"type": "string"}}
            }
          }
        }
      }
    }
  }
})json";

inline const Json& config_schema() {
    static const Json schema = Json::parse(kConfigSchema);
    return schema;
}

namespace detail {

inline bool has_type(const Json& v, const std::string& type) {
    if (type == "object") return v.is_object();
    if (type == "array") return v.is_array();
    if (type == "string") return v.is_string();
    if (type == "boolean") return v.is_boolean();
    if (type == "number") return v.is_number();
    if (type == "integer") {
        if (v.is_number_integer()) return true;
        if (!v.is_number_float()) return false;
        const double d = v.get<double>();
        return std::isfinite(d) && d == std::floor(d);
    }
    return false;
}

inline void validate(const Json& v, const Json& schema, const std::string& path, std::vector<std::string>& errors) {
    const std::string where = path.empty() ? "/" : path;
    if (auto t = schema.find("type"); t != schema.end() && !has_type(v, t->get<std::string>())) {
        errors.push_back(where + ": expected " + t->get<std::string>());
        return;
    }
    if (auto e = schema.find("enum"); e != schema.end()) {
        bool found = false;
        for (const auto& option : *e) found = found || option == v;
        if (!found) errors.push_back(where + ": value " + v.dump() + " is not one of " + e->dump());
    }
    if (v.is_number()) {
        const double d = v.get<double>();
        auto bound = [&](const char* key, auto&& ok, const char* rel) {
            if (auto b = schema.find(key); b != schema.end() && !ok(d, b->template get<double>()))
                errors.push_back(where + ": " + v.dump() + " must be " + rel + " " + b->dump());
        };
        bound("minimum", [](double x, double b) { return x >= b; }, ">=");
        bound("maximum", [](double x, double b) { return x <= b; }, "<=");
        bound("exclusiveMinimum", [](double x, double b) { return x > b; }, ">");
        bound("exclusiveMaximum", [](double x, double b) { return x < b; }, "<");
    }
    if (v.is_string()) {
        if (auto m = schema.find("minLength"); m != schema.end() && v.get<std::string>().size() < m->get<std::size_t>())
            errors.push_back(where + ": string is too short");
    }
    if (v.is_array()) {
        if (auto m = schema.find("minItems"); m != schema.end() && v.size() < m->get<std::size_t>())
            errors.push_back(where + ": needs at least " + m->dump() + " item(s)");
        if (auto items = schema.find("items"); items != schema.end())
            for (std::size_t k = 0; k < v.size(); ++k) validate(v[k], *items, path + "/" + std::to_string(k), errors);
    }
    if (v.is_object()) {
        const auto props = schema.find("properties");
        if (auto req = schema.find("required"); req != schema.end())
            for (const auto& key : *req)
                if (!v.contains(key.get<std::string>()))
                    errors.push_back(where + ": missing required key '" + key.get<std::string>() + "'");
        const bool closed = schema.value("additionalProperties", true) == false;
        for (const auto& [key, value] : v.items()) {
            if (props != schema.end() && props->contains(key)) {
                validate(value, (*props)[key], path + "/" + key, errors);
            } else if (closed) {
                errors.push_back(where + ": unknown key '" + key + "'");
            }
        }
    }
}

} // namespace detail

/// Checks a document against the supported subset of JSON Schema (type,
/// enum, bounds, minLength, minItems, items, properties, required,
/// additionalProperties). Returns one message per violation.
inline std::vector<std::string> validate_config(const Json& doc, const Json& schema = config_schema()) {
    std::vector<std::string> errors;
    detail::validate(doc, schema, "", errors);
    return errors;
}

} // namespace hdmi::cli
