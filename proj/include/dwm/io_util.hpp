#pragma once

#include <string>
#include <vector>

namespace dwm {

/// Splits one CSV record. Double-quoted fields may contain commas and
/// doubled quotes; fields are returned unquoted.
std::vector<std::string> split_csv_line(const std::string& line);

/// Writes `content` to a temporary sibling of `path` and renames it into
/// place, so readers never see a partial file.
void write_file_atomic(const std::string& path, const std::string& content);

}  // namespace dwm
