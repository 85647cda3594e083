#pragma once

// Checks a document against the subset of JSON Schema used by docs/schemas:
// type, required, properties, items, enum, minimum, maximum, minItems,
// maxItems and local "#/$defs/..." references.

#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

namespace testing_support {

class SchemaCheck {
 public:
  explicit SchemaCheck(nlohmann::json root) : root_(std::move(root)) {}

  std::vector<std::string> errors(const nlohmann::json& doc) {
    errors_.clear();
    check(doc, root_, "$");
    return errors_;
  }

 private:
  static bool has_type(const nlohmann::json& v, const std::string& t) {
    if (t == "object") return v.is_object();
    if (t == "array") return v.is_array();
    if (t == "string") return v.is_string();
    if (t == "boolean") return v.is_boolean();
    if (t == "null") return v.is_null();
    if (t == "integer") return v.is_number_integer() || (v.is_number_float() && v.get<double>() == std::floor(v.get<double>()));
    if (t == "number") return v.is_number();
    return false;
  }

  void fail(const std::string& where, const std::string& what) { errors_.push_back(where + ": " + what); }

  void check(const nlohmann::json& v, const nlohmann::json& s, const std::string& where) {
    if (s.contains("$ref")) {
      const std::string ref = s["$ref"];
      const std::string prefix = "#/$defs/";
      if (!ref.starts_with(prefix)) {
        fail(where, "unsupported reference " + ref);
        return;
      }
      check(v, root_["$defs"][ref.substr(prefix.size())], where);
      return;
    }
    if (s.contains("type")) {
      bool ok = false;
      if (s["type"].is_array()) {
        for (const auto& t : s["type"]) ok = ok || has_type(v, t);
      } else {
        ok = has_type(v, s["type"]);
      }
      if (!ok) {
        fail(where, "expected type " + s["type"].dump() + ", got " + v.dump());
        return;
      }
    }
    if (s.contains("enum")) {
      bool ok = false;
      for (const auto& e : s["enum"]) ok = ok || e == v;
      if (!ok) fail(where, v.dump() + " not in " + s["enum"].dump());
    }
    if (v.is_number()) {
      const double x = v.get<double>();
      if (s.contains("minimum") && x < s["minimum"].get<double>()) fail(where, v.dump() + " below minimum");
      if (s.contains("maximum") && x > s["maximum"].get<double>()) fail(where, v.dump() + " above maximum");
    }
    if (v.is_object()) {
      if (s.contains("required"))
        for (const auto& k : s["required"])
          if (!v.contains(k.get<std::string>())) fail(where, "missing " + k.dump());
      if (s.contains("properties"))
        for (const auto& [k, sub] : s["properties"].items())
          if (v.contains(k)) check(v[k], sub, where + "." + k);
    }
    if (v.is_array()) {
      if (s.contains("minItems") && v.size() < s["minItems"].get<std::size_t>()) fail(where, "too few items");
      if (s.contains("maxItems") && v.size() > s["maxItems"].get<std::size_t>()) fail(where, "too many items");
      if (s.contains("items"))
        for (std::size_t i = 0; i < v.size(); ++i) check(v[i], s["items"], where + "[" + std::to_string(i) + "]");
    }
  }

  nlohmann::json root_;
  std::vector<std::string> errors_;
};

}  // namespace testing_support
