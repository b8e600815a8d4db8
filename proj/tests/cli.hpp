#pragma once

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

namespace cli {

inline std::string quote(const std::string& s) {
    std::string out = "'";
    for (char c : s) out += c == '\'' ? std::string("'\\''") : std::string(1, c);
    return out + "'";
}

/// Runs the cyclematch binary; output goes to `log` when given, else is discarded.
inline int run(const std::vector<std::string>& args, const std::filesystem::path& log = {}) {
    std::string cmd = quote(CYCLEMATCH_CLI);
    for (const auto& a : args) cmd += " " + quote(a);
    cmd += log.empty() ? " >/dev/null 2>&1" : " >>" + quote(log.string()) + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

inline std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Names of regular files whose bytes differ, or that exist on one side only.
inline std::vector<std::string> differing_files(const std::filesystem::path& a, const std::filesystem::path& b,
                                                const std::vector<std::string>& ignore = {}) {
    std::vector<std::string> out;
    auto skip = [&](const std::string& n) {
        for (const auto& i : ignore)
            if (n == i) return true;
        return false;
    };
    for (const auto& e : std::filesystem::directory_iterator(a)) {
        const std::string n = e.path().filename().string();
        if (!e.is_regular_file() || skip(n)) continue;
        if (!std::filesystem::exists(b / n) || slurp(e.path()) != slurp(b / n)) out.push_back(n);
    }
    for (const auto& e : std::filesystem::directory_iterator(b)) {
        const std::string n = e.path().filename().string();
        if (e.is_regular_file() && !skip(n) && !std::filesystem::exists(a / n)) out.push_back(n);
    }
    return out;
}

}  // namespace cli
