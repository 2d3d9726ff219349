#pragma once

#include <cmath>
#include <cstring>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "flowseg/autograd.hpp"
#include "flowseg/frvs.hpp"
#include "flowseg/rng.hpp"

namespace flowseg::nn {

/// Named trainable tensors in insertion order. Copies share the underlying
/// leaves; use clone() for an independent copy.
template <typename T>
class ParamStore {
   public:
    Var<T> add(const std::string& name, Tensor<T> value) {
        if (index_.count(name)) throw ContractError("param store: duplicate name " + name);
        index_[name] = vars_.size();
        names_.push_back(name);
        vars_.push_back(parameter(std::move(value)));
        return vars_.back();
    }

    /// Registers an existing leaf under `name` without copying it.
    void adopt(const std::string& name, Var<T> var) {
        if (index_.count(name)) throw ContractError("param store: duplicate name " + name);
        index_[name] = vars_.size();
        names_.push_back(name);
        vars_.push_back(std::move(var));
    }

    bool contains(std::string_view name) const { return index_.count(std::string(name)) > 0; }

    Var<T> get(std::string_view name) const {
        auto it = index_.find(std::string(name));
        if (it == index_.end()) throw ContractError("param store: no parameter named " + std::string(name));
        return vars_[it->second];
    }

    const std::vector<std::string>& names() const { return names_; }

    std::vector<Var<T>> vars(std::string_view prefix = {}) const {
        std::vector<Var<T>> out;
        for (size_t i = 0; i < vars_.size(); ++i) {
            if (names_[i].rfind(prefix, 0) == 0) out.push_back(vars_[i]);
        }
        return out;
    }

    int64_t count(std::string_view prefix = {}) const {
        int64_t n = 0;
        for (const auto& v : vars(prefix)) n += v.numel();
        return n;
    }

    void set_value(std::string_view name, const Tensor<T>& value) {
        Var<T> v = get(name);
        if (v.dims() != value.dims()) {
            throw ShapeError("param store: " + std::string(name) + " has dims " + dims_str(v.dims()) + ", got " +
                             dims_str(value.dims()));
        }
        v.mutable_value() = value;
    }

    ParamStore clone() const { return cast<T>(); }

    template <typename U>
    ParamStore<U> cast() const {
        ParamStore<U> out;
        for (size_t i = 0; i < vars_.size(); ++i) out.add(names_[i], vars_[i].value().template cast<U>());
        return out;
    }

    /// Appends every parameter as a tensor named prefix + name.
    void save(io::FrvsFile& file, const std::string& prefix = {}) const {
        for (size_t i = 0; i < vars_.size(); ++i) {
            if constexpr (std::is_same_v<T, float>) {
                file.add(io::FrvsTensor::from_f32(prefix + names_[i], vars_[i].value()));
            } else {
                file.add(io::FrvsTensor::from_f64(prefix + names_[i], vars_[i].value()));
            }
        }
    }

    /// Every tensor of `file` whose name starts with `prefix`, prefix stripped.
    static ParamStore from_frvs(const io::FrvsFile& file, const std::string& prefix = {}) {
        ParamStore out;
        for (const auto& t : file.tensors()) {
            if (t.name.rfind(prefix, 0) != 0 || t.dtype == io::DType::u8) continue;
            out.add(t.name.substr(prefix.size()), t.to_tensor<T>());
        }
        return out;
    }

    /// FNV-1a over names, dims and value bytes of parameters under `prefix`.
    uint64_t digest(std::string_view prefix = {}) const {
        uint64_t h = fnv1a("");
        for (size_t i = 0; i < vars_.size(); ++i) {
            if (names_[i].rfind(prefix, 0) != 0) continue;
            h = fnv1a(names_[i], h);
            h = fnv1a(dims_str(vars_[i].dims()), h);
            const auto& v = vars_[i].value();
            h = fnv1a(std::string_view(reinterpret_cast<const char*>(v.data()), sizeof(T) * v.numel()), h);
        }
        return h;
    }

   private:
    std::vector<std::string> names_;
    std::vector<Var<T>> vars_;
    std::unordered_map<std::string, size_t> index_;
};

/// Normal(0, std) truncated at two standard deviations.
template <typename T>
Tensor<T> truncated_normal_tensor(const Dims& dims, double std, Rng& rng) {
    Tensor<T> t(dims);
    for (auto& v : t.values()) v = static_cast<T>(rng.truncated_normal(std));
    return t;
}

/// Conv weight [KH, KW, Cin, Cout] with fan-in scaled truncated normal.
template <typename T>
Tensor<T> conv_init(int64_t kh, int64_t kw, int64_t cin, int64_t cout, Rng& rng) {
    return truncated_normal_tensor<T>({kh, kw, cin, cout}, std::sqrt(2.0 / double(kh * kw * cin)), rng);
}

/// x (NHWC) convolved with `name.w` plus bias `name.b`.
template <typename T>
Var<T> conv_layer(const Var<T>& x, const ParamStore<T>& p, const std::string& name, int stride, int pad) {
    return add(conv2d(x, p.get(name + ".w"), stride, pad), p.get(name + ".b"));
}

template <typename T>
Var<T> conv_transpose_layer(const Var<T>& x, const ParamStore<T>& p, const std::string& name, int stride, int pad) {
    return add(conv_transpose2d(x, p.get(name + ".w"), stride, pad), p.get(name + ".b"));
}

/// x [N, in] times `name.w` [in, out] plus `name.b` [out].
template <typename T>
Var<T> linear_layer(const Var<T>& x, const ParamStore<T>& p, const std::string& name) {
    return add(matmul(x, p.get(name + ".w")), p.get(name + ".b"));
}

}  // namespace flowseg::nn
