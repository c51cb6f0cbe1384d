#ifndef CORRDISTILL_LOG_HPP
#define CORRDISTILL_LOG_HPP

#include <cstdlib>
#include <iostream>
#include <string>
#include <string_view>

namespace corrdistill::log {

enum class Level { error = 0, info = 1, debug = 2 };

// Level from CORRDISTILL_LOG (error|info|debug); defaults to info.
inline Level threshold() {
    static const Level level = [] {
        const char* env = std::getenv("CORRDISTILL_LOG");
        if (!env) return Level::info;
        const std::string_view v(env);
        if (v == "error") return Level::error;
        if (v == "debug") return Level::debug;
        return Level::info;
    }();
    return level;
}

inline void write(Level level, std::string_view msg) {
    if (static_cast<int>(level) > static_cast<int>(threshold())) return;
    static constexpr std::string_view tags[] = {"error", "info", "debug"};
    std::cerr << "[corrdistill " << tags[static_cast<int>(level)] << "] " << msg << '\n';
}

inline void error(std::string_view msg) { write(Level::error, msg); }
inline void info(std::string_view msg) { write(Level::info, msg); }
inline void debug(std::string_view msg) { write(Level::debug, msg); }

}  // namespace corrdistill::log

#endif  // CORRDISTILL_LOG_HPP
