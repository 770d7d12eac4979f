#include "tlfault/fault_type.hpp"

#include <string>

#include "tlfault/error.hpp"

namespace tlfault {

namespace {
constexpr std::array<std::string_view, 12> kNames{
    "NONE", "AG", "BG", "CG", "AB", "AC", "BC", "ABG", "ACG", "BCG", "ABC", "ABCG",
};
}

std::string_view to_string(FaultType t) { return kNames[static_cast<std::size_t>(t)]; }

FaultType fault_type_from_string(std::string_view s) {
    for (std::size_t i = 0; i < kNames.size(); ++i)
        if (kNames[i] == s) return static_cast<FaultType>(i);
    throw ValidationError("unknown fault type '" + std::string(s) + "'");
}

} // namespace tlfault
