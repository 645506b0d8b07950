#pragma once

#include <set>
#include <string>
#include <utility>

#include <nlohmann/json.hpp>

#include "fpad/error.hpp"

namespace fpad::jsonio {

// Wraps a JSON object and records which keys were read, so finish() can
// reject unknown fields with their full path ("train.lambda_adapt").
class ObjectReader {
public:
    ObjectReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(where("") + "expected a JSON object");
    }

    bool has(const std::string& key) const { return j_.contains(key); }

    template <class T>
    T require(const std::string& key) {
        if (!j_.contains(key)) throw ConfigError(key_path(key) + ": missing required field");
        return get<T>(key);
    }

    template <class T>
    T value_or(const std::string& key, T def) {
        if (!j_.contains(key)) return def;
        return get<T>(key);
    }

    // Marks the key consumed and hands back raw JSON (for nested objects).
    const nlohmann::json& raw(const std::string& key) {
        if (!j_.contains(key)) throw ConfigError(key_path(key) + ": missing required field");
        seen_.insert(key);
        return j_.at(key);
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) throw ConfigError(key_path(it.key()) + ": unknown field");
    }

    std::string key_path(const std::string& key) const {
        return path_.empty() ? key : path_ + "." + key;
    }

private:
    std::string where(const std::string& key) const {
        const std::string p = key_path(key);
        return p.empty() ? std::string() : p + ": ";
    }

    template <class T>
    T get(const std::string& key) {
        seen_.insert(key);
        try {
            return j_.at(key).get<T>();
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(key_path(key) + ": bad value (" + e.what() + ")");
        }
    }

    const nlohmann::json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

}  // namespace fpad::jsonio
