#pragma once

#include <stdexcept>
#include <string>

namespace netrecon {

enum class ErrorCategory {
    validation,   // bad arguments / broken invariants
    schema,       // malformed input files
    infeasible,   // margins admit no solution
    solver,       // optimizer breakdown (distinct from a flagged non-converged result)
    io,           // filesystem / network
    usage,        // bad CLI invocation
};

inline const char* category_name(ErrorCategory c) {
    switch (c) {
        case ErrorCategory::validation: return "validation";
        case ErrorCategory::schema: return "schema";
        case ErrorCategory::infeasible: return "infeasible";
        case ErrorCategory::solver: return "solver";
        case ErrorCategory::io: return "io";
        case ErrorCategory::usage: return "usage";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorCategory category, const std::string& msg)
        : std::runtime_error(msg), category_(category) {}

    ErrorCategory category() const { return category_; }
    const char* category_name() const { return netrecon::category_name(category_); }

private:
    ErrorCategory category_;
};

[[noreturn]] inline void fail(ErrorCategory c, const std::string& msg) { throw Error(c, msg); }

inline void require(bool cond, ErrorCategory c, const std::string& msg) {
    if (!cond) fail(c, msg);
}

}  // namespace netrecon
