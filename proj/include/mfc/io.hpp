#pragma once

#include <span>
#include <string>
#include <vector>

namespace mfc {

// %.17g rendering, the round-trip-exact form every CSV cell uses.
[[nodiscard]] std::string format_g17(double v);

// Writes a table as CSV: one schema header row, then %.17g numeric cells.
// Every row must match the header width. Throws std::runtime_error when the
// file cannot be written, std::invalid_argument on a width mismatch.
void write_csv(const std::string& path, std::span<const std::string> header,
               const std::vector<std::vector<double>>& rows);

// Writes plain text, creating or truncating the file.
void write_text(const std::string& path, const std::string& text);

}  // namespace mfc
