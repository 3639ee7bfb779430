#pragma once
// Small fixtures shared by the unit tests.

#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <unistd.h>
#include <algorithm>

#include "convmr/kg_data.hpp"

namespace convmr::testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("convmr_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline void write_file(const std::filesystem::path& p, const std::string& text) {
    std::ofstream os(p, std::ios::binary);
    os << text;
}

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline std::string to_lines(const std::vector<RawTriple>& triples) {
    std::string out;
    for (const auto& t : triples) out += t.subject + "\t" + t.relation + "\t" + t.object + "\n";
    return out;
}

// Random labelled KG; duplicates are allowed in the draw and removed.
inline std::vector<RawTriple> random_raw_triples(std::mt19937_64& rng, int entities, int relations, int count) {
    std::uniform_int_distribution<int> e(0, entities - 1), r(0, relations - 1);
    std::vector<RawTriple> out;
    for (int i = 0; i < count; ++i) {
        RawTriple t{"e" + std::to_string(e(rng)), "r" + std::to_string(r(rng)), "e" + std::to_string(e(rng))};
        if (std::find(out.begin(), out.end(), t) == out.end()) out.push_back(t);
    }
    return out;
}

inline void write_dataset(const std::filesystem::path& dir, const std::vector<RawTriple>& train,
                          const std::vector<RawTriple>& valid, const std::vector<RawTriple>& test) {
    std::filesystem::create_directories(dir);
    write_file(dir / "train.txt", to_lines(train));
    write_file(dir / "valid.txt", to_lines(valid));
    write_file(dir / "test.txt", to_lines(test));
}

}  // namespace convmr::testing
