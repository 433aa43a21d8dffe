#pragma once

#include <optional>
#include <string>
#include <string_view>

namespace deprl {

// Shortest decimal that parses back to the identical double.
std::string format_double(double value);

// Strict parse: the whole token must be consumed. Accepts "nan", "inf", "-inf".
std::optional<double> parse_double(std::string_view token);
std::optional<long long> parse_int(std::string_view token);

}  // namespace deprl
