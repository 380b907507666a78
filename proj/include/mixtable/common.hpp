#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mixtable {

// Error taxonomy. The CLI maps each class to a distinct exit code
// (config=2, data=3, provider=4, numeric=5).
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct DataError : Error {
    using Error::Error;
};
struct ProviderError : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};

template <typename... Parts>
std::string concat(const Parts&... parts) {
    std::ostringstream oss;
    (oss << ... << parts);
    return oss.str();
}

inline std::string shape_to_string(const std::vector<int>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i > 0) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

}  // namespace mixtable
