#pragma once

#include <string>

#include "json.hpp"

namespace pcav {

using Json = nlohmann::ordered_json;

// Serializes with every floating-point number printed as %.17g, so values
// round-trip exactly and output bytes do not depend on the JSON library's
// shortest-representation algorithm.
std::string dump_json(const Json& j, int indent = 2);

}  // namespace pcav
