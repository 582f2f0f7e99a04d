#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace dmd {

struct ScalarRecord {
    std::int64_t step = 0;
    std::string term;
    double value = 0.0;
};

/// Line-delimited {step, term, value} records.
class ScalarLog {
public:
    ScalarLog() = default;
    explicit ScalarLog(const std::filesystem::path& path, bool append = false);

    bool is_open() const { return out_.is_open(); }
    void write(std::int64_t step, const std::string& term, double value);
    void flush() { out_.flush(); }

private:
    std::ofstream out_;
};

std::string scalar_record_line(const ScalarRecord& rec);
std::vector<ScalarRecord> read_scalar_log(const std::filesystem::path& path);

}  // namespace dmd
