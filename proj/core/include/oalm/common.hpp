#pragma once

#include <stdexcept>
#include <string>

namespace oalm {

struct ShapeError : std::runtime_error { using std::runtime_error::runtime_error; };
struct ConfigError : std::runtime_error { using std::runtime_error::runtime_error; };
struct UsageError : std::runtime_error { using std::runtime_error::runtime_error; };
struct IndexError : std::runtime_error { using std::runtime_error::runtime_error; };
struct EncodingError : std::runtime_error { using std::runtime_error::runtime_error; };
struct IoError : std::runtime_error { using std::runtime_error::runtime_error; };
struct CheckpointError : std::runtime_error { using std::runtime_error::runtime_error; };
struct VersionError : std::runtime_error { using std::runtime_error::runtime_error; };
struct DivergenceError : std::runtime_error { using std::runtime_error::runtime_error; };

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw UsageError(msg);
}

inline void require_shape(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

inline void require_config(bool cond, const std::string& msg) {
    if (!cond) throw ConfigError(msg);
}

}  // namespace oalm
