#pragma once

#include <string>
#include <vector>

#include "cpcanet/fg.hpp"
#include "cpcanet/linalg.hpp"
#include "cpcanet/matrix.hpp"
#include "cpcanet/unfold.hpp"

namespace cpcanet {

/// Comma-separated rows, '.' decimal point, 17 significant digits.
void write_matrix_csv(const Matrix& m, const std::string& path);
Matrix read_matrix_csv(const std::string& path, bool skip_header = false);

/// {"d": int, "domains": [{"n": float, "S": [[...]]}]}
void write_covariance_set_json(const CovarianceSet& covs, const std::string& path);
CovarianceSet read_covariance_set_json(const std::string& path);

/// {"beta": [[...]], "lambdas": [[...]], "sweeps": int, "residual": float}
void write_fg_result_json(const FgResult& result, double residual, const std::string& path);

void write_trace_json(const UnfoldTrace& trace, std::size_t d, const std::string& path);

std::string format_double(double v);  // %.17g

}  // namespace cpcanet
