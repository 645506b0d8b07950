#pragma once

#include <algorithm>
#include <string>
#include <unordered_map>
#include <vector>

#include "fpad/tensor.hpp"

namespace fpad {

// Named parameter tensors with parallel gradient accumulators. Iteration is
// in insertion order so serialization and SGD sweeps are deterministic.
class ParamStore {
public:
    struct Entry {
        std::string name;
        Tensor value;
        Tensor grad;
    };

    void add(const std::string& name, Tensor init) {
        if (index_.count(name)) throw ContractViolation("ParamStore: duplicate parameter " + name);
        index_[name] = entries_.size();
        Tensor grad = Tensor::zeros(init.dims);
        entries_.push_back(Entry{name, std::move(init), std::move(grad)});
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    Tensor& value(const std::string& name) { return entry(name).value; }
    const Tensor& value(const std::string& name) const { return entry(name).value; }
    Tensor& grad(const std::string& name) { return entry(name).grad; }
    const Tensor& grad(const std::string& name) const { return entry(name).grad; }

    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }

    void zero_grads() {
        for (auto& e : entries_) std::fill(e.grad.v.begin(), e.grad.v.end(), 0.0);
    }

    std::size_t total_size() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.value.size();
        return n;
    }

private:
    Entry& entry(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractViolation("ParamStore: unknown parameter " + name);
        return entries_[it->second];
    }
    const Entry& entry(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractViolation("ParamStore: unknown parameter " + name);
        return entries_[it->second];
    }

    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace fpad
