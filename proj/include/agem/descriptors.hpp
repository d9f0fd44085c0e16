#pragma once

// DescriptorSet: id-labelled fixed-length descriptors, persisted as a JSON
// manifest (count, dim, ids, tensor file) plus one (count, dim) AGTF tensor.

#include <agem/ops.hpp>
#include <agem/tensor_io.hpp>

#include <nlohmann/json.hpp>

#include <filesystem>
#include <unordered_map>

namespace agem {

class DescriptorSet {
public:
    DescriptorSet() = default;
    explicit DescriptorSet(std::size_t dim) : dim_(dim) {}

    DescriptorSet(std::vector<std::string> ids, std::size_t dim, std::vector<real> data)
        : ids_(std::move(ids)), dim_(dim), data_(std::move(data)) {
        require_shape(data_.size() == ids_.size() * dim_, "descriptor data does not match count x dim");
        rebuild_lookup();
    }

    void add(std::string id, std::span<const real> descriptor) {
        if (ids_.empty() && dim_ == 0) dim_ = descriptor.size();
        require_shape(descriptor.size() == dim_, "descriptor " + id + " has dimension " +
                                                     std::to_string(descriptor.size()) + ", set has " +
                                                     std::to_string(dim_));
        if (lookup_.count(id)) throw DataError("duplicate descriptor id " + id);
        lookup_[id] = ids_.size();
        ids_.push_back(std::move(id));
        data_.insert(data_.end(), descriptor.begin(), descriptor.end());
    }

    std::size_t size() const { return ids_.size(); }
    std::size_t dim() const { return dim_; }
    bool empty() const { return ids_.empty(); }

    const std::vector<std::string>& ids() const { return ids_; }
    const std::string& id(std::size_t i) const { return ids_.at(i); }
    const std::vector<real>& data() const { return data_; }

    std::span<const real> row(std::size_t i) const {
        require_shape(i < ids_.size(), "descriptor row out of range");
        return std::span<const real>(data_).subspan(i * dim_, dim_);
    }
    std::span<real> row(std::size_t i) {
        require_shape(i < ids_.size(), "descriptor row out of range");
        return std::span<real>(data_).subspan(i * dim_, dim_);
    }

    std::optional<std::size_t> find(const std::string& id) const {
        auto it = lookup_.find(id);
        if (it == lookup_.end()) return std::nullopt;
        return it->second;
    }

    std::size_t index_of(const std::string& id) const {
        auto i = find(id);
        if (!i) throw DataError("unknown descriptor id " + id);
        return *i;
    }

    std::span<const real> row(const std::string& id) const { return row(index_of(id)); }

    friend bool operator==(const DescriptorSet& a, const DescriptorSet& b) {
        return a.ids_ == b.ids_ && a.dim_ == b.dim_ && a.data_ == b.data_;
    }

private:
    void rebuild_lookup() {
        lookup_.clear();
        for (std::size_t i = 0; i < ids_.size(); ++i) {
            if (!lookup_.emplace(ids_[i], i).second) throw DataError("duplicate descriptor id " + ids_[i]);
        }
    }

    std::vector<std::string> ids_;
    std::size_t dim_ = 0;
    std::vector<real> data_;
    std::unordered_map<std::string, std::size_t> lookup_;
};

/// Every row L2-normalized.
inline DescriptorSet normalized(const DescriptorSet& set) {
    DescriptorSet out(set.dim());
    for (std::size_t i = 0; i < set.size(); ++i) out.add(set.id(i), l2_normalize(set.row(i)));
    return out;
}

/// Writes `manifest_path` (JSON) and a sibling "<stem>.agtf" tensor.
inline void save_descriptor_set(const std::filesystem::path& manifest_path, const DescriptorSet& set,
                                const nlohmann::json& extra = nlohmann::json::object(), DType dtype = DType::f64) {
    auto tensor_path = manifest_path;
    tensor_path.replace_extension(".agtf");
    const Tensor t(Shape{set.size(), set.dim(), 1, 1}, set.data());
    save_tensor(tensor_path, t, {set.size(), set.dim()}, dtype);
    nlohmann::json manifest = extra;
    manifest["format"] = "agem-descriptors";
    manifest["version"] = 1;
    manifest["count"] = set.size();
    manifest["dim"] = set.dim();
    manifest["ids"] = set.ids();
    manifest["tensor"] = tensor_path.filename().string();
    write_file_atomic(manifest_path, manifest.dump(1) + "\n");
}

inline DescriptorSet load_descriptor_set(const std::filesystem::path& manifest_path) {
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(read_file(manifest_path));
        if (manifest.at("format") != "agem-descriptors") {
            throw FormatError(manifest_path.string() + " is not a descriptor set");
        }
        if (manifest.at("version") != 1) throw FormatError("unsupported descriptor set version in " + manifest_path.string());
        const auto count = manifest.at("count").get<std::size_t>();
        const auto dim = manifest.at("dim").get<std::size_t>();
        auto ids = manifest.at("ids").get<std::vector<std::string>>();
        const Tensor t = load_tensor(manifest_path.parent_path() / manifest.at("tensor").get<std::string>());
        if (ids.size() != count || t.shape().n != count || t.shape().per_item() != dim) {
            throw FormatError("descriptor set " + manifest_path.string() + " count/dim disagree with its tensor");
        }
        return DescriptorSet(std::move(ids), dim, t.values());
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("malformed descriptor manifest " + manifest_path.string() + ": " + e.what());
    }
}

} // namespace agem
