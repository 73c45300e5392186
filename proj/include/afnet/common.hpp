#pragma once

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace afnet {

// Error taxonomy. Shape/Config/Input map to malformed tensors, model
// configurations and external data respectively; Contract covers misuse
// of an API that is not attributable to a single value.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};
struct InputError : std::runtime_error {
    explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

inline void check_shape_positive(const Shape& shape, const char* who) {
    if (shape.empty())
        throw ShapeError(std::string(who) + ": empty shape");
    for (auto d : shape)
        if (d <= 0)
            throw ShapeError(std::string(who) + ": non-positive dimension in " + shape_str(shape));
}

}  // namespace afnet
