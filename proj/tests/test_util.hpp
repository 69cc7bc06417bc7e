#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

namespace testutil {

// Unique scratch directory per test process, removed on destruction.
class TempDir {
  public:
    TempDir() {
        base_ = std::filesystem::temp_directory_path() /
                ("taskvec_test_" + std::to_string(static_cast<unsigned long>(::getpid())) + "_" +
                 std::to_string(counter_++));
        std::filesystem::create_directories(base_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(base_, ec);
    }

    std::string path(const std::string& name) const { return (base_ / name).string(); }

  private:
    std::filesystem::path base_;
    static inline int counter_ = 0;
};

inline void write_raw(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << bytes;
}

inline std::string read_raw(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace testutil
