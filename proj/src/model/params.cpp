#include "idfuse/params.hpp"

#include <bit>
#include <cstring>

#include "idfuse/errors.hpp"
#include "idfuse/io.hpp"

namespace idfuse {

static_assert(std::endian::native == std::endian::little, "digest and checkpoint layout assume little-endian");

Parameter& ParamStore::add(const std::string& name, std::string group, bool trainable, Matrix<float> value) {
    if (params_.count(name)) throw StateError("duplicate parameter '" + name + "'");
    return params_[name] = Parameter{std::move(group), trainable, std::move(value)};
}

Parameter& ParamStore::at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw StateError("unknown parameter '" + name + "'");
    return it->second;
}

const Parameter& ParamStore::at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw StateError("unknown parameter '" + name + "'");
    return it->second;
}

std::vector<std::string> ParamStore::names(bool trainable) const {
    std::vector<std::string> out;
    for (const auto& [n, p] : params_)
        if (p.trainable == trainable) out.push_back(n);
    return out;
}

std::size_t ParamStore::count(bool trainable) const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_)
        if (p.trainable == trainable) n += p.value.size();
    return n;
}

std::string ParamStore::digest(bool trainable) const {
    std::string buf;
    for (const auto& [name, p] : params_) {
        if (p.trainable != trainable) continue;
        buf += name;
        buf.push_back('\0');
        const std::uint64_t dims[2] = {p.value.rows(), p.value.cols()};
        buf.append(reinterpret_cast<const char*>(dims), sizeof dims);
        buf.append(reinterpret_cast<const char*>(p.value.data()), p.value.size() * sizeof(float));
    }
    return sha256_hex(buf);
}

bool ParamStore::operator==(const ParamStore& o) const {
    if (params_.size() != o.params_.size()) return false;
    for (const auto& [name, p] : params_) {
        auto it = o.params_.find(name);
        if (it == o.params_.end()) return false;
        const Parameter& q = it->second;
        if (p.group != q.group || p.trainable != q.trainable || !p.value.same_shape(q.value)) return false;
        if (std::memcmp(p.value.data(), q.value.data(), p.value.size() * sizeof(float)) != 0) return false;
    }
    return true;
}

GradStore::GradStore(const ParamStore& params, bool all) {
    for (const auto& [name, p] : params.all())
        if (all || p.trainable) grads_[name] = Matrix<float>(p.value.rows(), p.value.cols());
}

Matrix<float>* GradStore::find(const std::string& name) {
    auto it = grads_.find(name);
    return it == grads_.end() ? nullptr : &it->second;
}

const Matrix<float>* GradStore::find(const std::string& name) const {
    auto it = grads_.find(name);
    return it == grads_.end() ? nullptr : &it->second;
}

void GradStore::zero() {
    for (auto& [_, g] : grads_) std::fill(g.storage().begin(), g.storage().end(), 0.f);
}

}  // namespace idfuse
