#pragma once
// Named parameter tensors split into a frozen base and trainable adapters.

#include <map>
#include <string>
#include <vector>

#include "idfuse/matrix.hpp"

namespace idfuse {

struct Parameter {
    std::string group;  // e.g. "unet", "clip_mapper", "face_mapper", "image_cross_attention"
    bool trainable = false;
    Matrix<float> value;
};

class ParamStore {
public:
    Parameter& add(const std::string& name, std::string group, bool trainable, Matrix<float> value);

    bool contains(const std::string& name) const { return params_.count(name) != 0; }
    Parameter& at(const std::string& name);
    const Parameter& at(const std::string& name) const;
    const Matrix<float>& value(const std::string& name) const { return at(name).value; }

    /// Sorted by name.
    const std::map<std::string, Parameter>& all() const { return params_; }
    std::map<std::string, Parameter>& all() { return params_; }

    std::vector<std::string> names(bool trainable) const;
    std::size_t count(bool trainable) const;

    /// SHA-256 over (name, shape, little-endian float bytes) of one partition, in name order.
    std::string digest(bool trainable) const;
    std::string frozen_digest() const { return digest(false); }

    bool operator==(const ParamStore&) const;

private:
    std::map<std::string, Parameter> params_;
};

/// Zero-initialized gradient buffers for a chosen set of parameters.
class GradStore {
public:
    GradStore() = default;
    /// Buffers for the trainable partition, or for every parameter when all = true.
    GradStore(const ParamStore& params, bool all);

    Matrix<float>* find(const std::string& name);
    const Matrix<float>* find(const std::string& name) const;
    std::map<std::string, Matrix<float>>& all() { return grads_; }
    const std::map<std::string, Matrix<float>>& all() const { return grads_; }
    void zero();

private:
    std::map<std::string, Matrix<float>> grads_;
};

}  // namespace idfuse
