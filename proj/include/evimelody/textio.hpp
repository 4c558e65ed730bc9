// Copyright 2026 The evimelody Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

namespace evimelody {

/// Shortest decimal text that round-trips to the same double.
std::string format_number(double value);

struct CsvRow {
  std::size_t line = 0;
  std::vector<double> values;
};

/// Numeric CSV reader. Blank lines and lines starting with '#' are skipped; a first
/// non-comment line whose leading field is not numeric is treated as a header.
/// Every other row must hold exactly `columns` numbers (ParseError otherwise).
std::vector<CsvRow> read_csv_rows(const std::filesystem::path& path, std::size_t columns);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace evimelody
