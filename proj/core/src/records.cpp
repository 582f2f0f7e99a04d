#include "dmd/records.hpp"

#include <json.hpp>

#include "dmd/errors.hpp"

namespace dmd {

ScalarLog::ScalarLog(const std::filesystem::path& path, bool append)
    : out_(path, append ? std::ios::app : std::ios::trunc) {
    if (!out_) {
        throw DataError("cannot open log " + path.string());
    }
}

std::string scalar_record_line(const ScalarRecord& rec) {
    nlohmann::ordered_json j;
    j["step"] = rec.step;
    j["term"] = rec.term;
    j["value"] = rec.value;
    return j.dump();
}

void ScalarLog::write(std::int64_t step, const std::string& term, double value) {
    out_ << scalar_record_line({step, term, value}) << '\n';
}

std::vector<ScalarRecord> read_scalar_log(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open log " + path.string());
    }
    std::vector<ScalarRecord> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            out.push_back({j.at("step").get<std::int64_t>(), j.at("term").get<std::string>(),
                           j.at("value").get<double>()});
        } catch (const nlohmann::json::exception& e) {
            throw DataError("bad log line in " + path.string() + ": " + e.what());
        }
    }
    return out;
}

}  // namespace dmd
