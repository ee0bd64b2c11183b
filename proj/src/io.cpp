#include "cpcanet/io.hpp"

#include <cctype>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "cpcanet/errors.hpp"

namespace cpcanet {

using nlohmann::json;

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void write_matrix_csv(const Matrix& m, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw SchemaMismatch("write_matrix_csv: cannot open " + path);
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = 0; j < m.cols(); ++j) {
            if (j > 0) out << ',';
            out << format_double(m(i, j));
        }
        out << '\n';
    }
}

Matrix read_matrix_csv(const std::string& path, bool skip_header) {
    std::ifstream in(path);
    if (!in) throw SchemaMismatch("read_matrix_csv: cannot open " + path);
    std::vector<std::vector<double>> rows;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (skip_header && lineno == 1) continue;
        if (line.empty()) continue;
        std::vector<double> cells;
        std::stringstream ss(line);
        std::string cell;
        std::size_t col = 0;
        while (std::getline(ss, cell, ',')) {
            ++col;
            try {
                std::size_t used = 0;
                const double v = std::stod(cell, &used);
                while (used < cell.size() && std::isspace(static_cast<unsigned char>(cell[used])))
                    ++used;
                if (used != cell.size()) throw std::invalid_argument(cell);
                cells.push_back(v);
            } catch (const std::exception&) {
                throw SchemaMismatch("read_matrix_csv: non-numeric cell at " + path + ":" +
                                     std::to_string(lineno) + " column " + std::to_string(col));
            }
        }
        if (!rows.empty() && cells.size() != rows.front().size()) {
            throw SchemaMismatch("read_matrix_csv: ragged row at " + path + ":" +
                                 std::to_string(lineno));
        }
        rows.push_back(std::move(cells));
    }
    if (rows.empty()) throw SchemaMismatch("read_matrix_csv: " + path + " is empty");
    Matrix m(rows.size(), rows.front().size());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) m(i, j) = rows[i][j];
    return m;
}

namespace {

json matrix_to_json(const Matrix& m) {
    json rows = json::array();
    for (std::size_t i = 0; i < m.rows(); ++i) {
        json row = json::array();
        for (std::size_t j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

Matrix matrix_from_json(const json& rows, const std::string& what) {
    if (!rows.is_array() || rows.empty()) throw SchemaMismatch(what + ": expected matrix rows");
    const std::size_t r = rows.size();
    if (!rows[0].is_array() || rows[0].empty()) throw SchemaMismatch(what + ": expected row arrays");
    const std::size_t c = rows[0].size();
    Matrix m(r, c);
    for (std::size_t i = 0; i < r; ++i) {
        if (!rows[i].is_array() || rows[i].size() != c) throw SchemaMismatch(what + ": ragged rows");
        for (std::size_t j = 0; j < c; ++j) {
            if (!rows[i][j].is_number()) throw SchemaMismatch(what + ": non-numeric entry");
            m(i, j) = rows[i][j].get<double>();
        }
    }
    return m;
}

}  // namespace

void write_covariance_set_json(const CovarianceSet& covs, const std::string& path) {
    json domains = json::array();
    for (std::size_t k = 0; k < covs.size(); ++k) {
        domains.push_back(
            json{{"n", covs.weight(k)}, {"S", matrix_to_json(covs.domain(k).matrix())}});
    }
    std::ofstream out(path);
    if (!out) throw SchemaMismatch("write_covariance_set_json: cannot open " + path);
    out << json{{"d", covs.dim()}, {"domains", domains}}.dump(2) << '\n';
}

CovarianceSet read_covariance_set_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw SchemaMismatch("read_covariance_set_json: cannot open " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw SchemaMismatch("read_covariance_set_json: " + path + ": " + e.what());
    }
    if (!j.contains("d") || !j.contains("domains") || !j["domains"].is_array() ||
        j["domains"].empty()) {
        throw SchemaMismatch("read_covariance_set_json: need {d, domains[]} in " + path);
    }
    const auto d = j["d"].get<std::size_t>();
    std::vector<CovarianceMatrix> domains;
    std::vector<double> weights;
    for (const auto& entry : j["domains"]) {
        if (!entry.contains("n") || !entry.contains("S")) {
            throw SchemaMismatch("read_covariance_set_json: domain needs {n, S}");
        }
        Matrix s = matrix_from_json(entry["S"], "covariance S");
        if (s.rows() != d) throw SchemaMismatch("read_covariance_set_json: S dim != d");
        try {
            domains.emplace_back(std::move(s));
        } catch (const std::exception& e) {
            throw SchemaMismatch(std::string("read_covariance_set_json: invalid S: ") + e.what());
        }
        weights.push_back(entry["n"].get<double>());
    }
    return CovarianceSet(std::move(domains), std::move(weights));
}

void write_fg_result_json(const FgResult& result, double residual, const std::string& path) {
    const json j{{"beta", matrix_to_json(result.basis.matrix())},
                 {"lambdas", matrix_to_json(result.lambdas)},
                 {"sweeps", result.sweeps_used},
                 {"residual", residual}};
    std::ofstream out(path);
    if (!out) throw SchemaMismatch("write_fg_result_json: cannot open " + path);
    out << j.dump(2) << '\n';
}

void write_trace_json(const UnfoldTrace& trace, std::size_t d, const std::string& path) {
    json stages = json::array();
    for (std::size_t t = 0; t < trace.stages.size(); ++t) {
        const UnfoldStage& s = trace.stages[t];
        stages.push_back(json{{"t", t + 1},
                              {"eta", s.eta},
                              {"objective", s.objective},
                              {"offdiag", s.offdiag},
                              {"grad_norm", s.grad_norm}});
    }
    const json j{{"d", d},
                 {"T", trace.stages.size()},
                 {"initial_objective", trace.initial_objective},
                 {"initial_offdiag", trace.initial_offdiag},
                 {"stages", stages}};
    std::ofstream out(path);
    if (!out) throw SchemaMismatch("write_trace_json: cannot open " + path);
    out << j.dump(2) << '\n';
}

}  // namespace cpcanet
