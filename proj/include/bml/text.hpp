#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace bml {

// Shortest decimal that round-trips to the same double.
std::string format_double(double value);
double parse_double(std::string_view text);
long long parse_int(std::string_view text);

std::string_view trim(std::string_view text);
std::vector<std::string_view> split_whitespace(std::string_view text);
std::vector<std::string_view> split(std::string_view text, char sep);

}  // namespace bml
