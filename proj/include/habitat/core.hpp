#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace habitat {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

enum class ErrorCode {
    invalid_argument,
    empty_input,
    zero_variance,
    malformed_manifest,
    missing_patient_file,
    modality_mismatch,
    parse_error,
    non_finite,
    divergence,
    degenerate,
    factorization,
    io,
};

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message) : std::runtime_error(message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

inline void require(bool condition, ErrorCode code, const std::string& message) {
    if (!condition) {
        throw Error(code, message);
    }
}

// Seed mixing so that (seed, stream) pairs map to decorrelated generator states.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    return splitmix64(splitmix64(seed) ^ splitmix64(stream + 0x632BE59BD9B4E019ULL));
}

/// 17 significant digits, enough to read back the identical double.
inline std::string format_real(double value) {
    char buffer[32];
    std::snprintf(buffer, sizeof(buffer), "%.17g", value);
    return buffer;
}

namespace detail {

inline std::size_t& thread_count_storage() {
    static std::size_t count = [] {
        if (const char* env = std::getenv("HABITAT_THREADS")) {
            const long parsed = std::strtol(env, nullptr, 10);
            if (parsed > 0) {
                return static_cast<std::size_t>(parsed);
            }
        }
        return std::max<std::size_t>(1, std::thread::hardware_concurrency());
    }();
    return count;
}

}  // namespace detail

/// Worker cap for internal parallel loops. Results never depend on it.
inline std::size_t thread_count() { return detail::thread_count_storage(); }

inline void set_thread_count(std::size_t count) { detail::thread_count_storage() = std::max<std::size_t>(1, count); }

/// Runs fn(i) for i in [0, n). Each index must write only its own output slot.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    const std::size_t workers = std::min(thread_count(), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < n; i += workers) {
                    fn(i);
                }
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) {
        t.join();
    }
    for (auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
}

}  // namespace habitat
