#pragma once

#include <filesystem>
#include <string>

namespace in2core {

// Shortest decimal form that round-trips the exact double.
std::string fmt_double(double v);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& content);

}  // namespace in2core
