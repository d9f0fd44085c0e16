#pragma once

#include <agem/ops.hpp>

#include <map>
#include <string>

namespace agem {

/// Learning-rate group; `buffer` entries (BN running stats) are never optimized.
enum class ParamGroup { base, p, attention, buffer };

inline const char* to_string(ParamGroup g) {
    switch (g) {
        case ParamGroup::base: return "base";
        case ParamGroup::p: return "p";
        case ParamGroup::attention: return "attention";
        case ParamGroup::buffer: return "buffer";
    }
    return "?";
}

inline ParamGroup parse_param_group(std::string_view s) {
    if (s == "base") return ParamGroup::base;
    if (s == "p") return ParamGroup::p;
    if (s == "attention") return ParamGroup::attention;
    if (s == "buffer") return ParamGroup::buffer;
    throw FormatError("unknown parameter group '" + std::string(s) + "'");
}

struct Parameter {
    std::string name;
    Tensor value;
    ParamGroup group = ParamGroup::base;
    bool weight_decay = true;
};

/// Ordered, named parameter collection.
class ParameterStore {
public:
    std::size_t add(std::string name, Tensor value, ParamGroup group, bool weight_decay) {
        if (by_name_.count(name)) throw ShapeError("duplicate parameter name " + name);
        by_name_[name] = params_.size();
        params_.push_back(Parameter{std::move(name), std::move(value), group, weight_decay});
        return params_.size() - 1;
    }

    std::size_t index_of(const std::string& name) const {
        auto it = by_name_.find(name);
        if (it == by_name_.end()) throw FormatError("missing parameter " + name);
        return it->second;
    }
    bool contains(const std::string& name) const { return by_name_.count(name) > 0; }

    Parameter& operator[](std::size_t i) { return params_.at(i); }
    const Parameter& operator[](std::size_t i) const { return params_.at(i); }
    std::size_t size() const { return params_.size(); }

    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    /// One tape leaf per parameter, same indexing as the store.
    std::vector<Var> bind(Tape& tape) const {
        std::vector<Var> vars;
        vars.reserve(params_.size());
        for (const auto& p : params_) vars.push_back(tape.leaf(p.value));
        return vars;
    }

private:
    std::vector<Parameter> params_;
    std::map<std::string, std::size_t> by_name_;
};

} // namespace agem
