#pragma once

#include <array>
#include <cstdint>
#include <string_view>

namespace tlfault {

/// Fault topologies the simulator can close. ABCG is simulated but shares
/// the 1110 class code with ABC.
enum class FaultType : std::uint8_t {
    NoFault,
    AG, BG, CG,
    AB, AC, BC,
    ABG, ACG, BCG,
    ABC,
    ABCG,
};

/// Number of classification labels (1111 folds into 1110).
inline constexpr int kNumClasses = 11;

/// Phases involved (A, B, C) and whether the fault point is grounded.
struct FaultTopology {
    bool a = false, b = false, c = false, ground = false;
};

constexpr FaultTopology topology(FaultType t) {
    switch (t) {
    case FaultType::NoFault: return {};
    case FaultType::AG: return {true, false, false, true};
    case FaultType::BG: return {false, true, false, true};
    case FaultType::CG: return {false, false, true, true};
    case FaultType::AB: return {true, true, false, false};
    case FaultType::AC: return {true, false, true, false};
    case FaultType::BC: return {false, true, true, false};
    case FaultType::ABG: return {true, true, false, true};
    case FaultType::ACG: return {true, false, true, true};
    case FaultType::BCG: return {false, true, true, true};
    case FaultType::ABC: return {true, true, true, false};
    case FaultType::ABCG: return {true, true, true, true};
    }
    return {};
}

constexpr bool is_grounded(FaultType t) { return topology(t).ground; }

/// The ten faulted topologies generated for the dataset, in class order.
inline constexpr std::array<FaultType, 10> kFaultedTypes{
    FaultType::AG, FaultType::BG, FaultType::CG,
    FaultType::AB, FaultType::AC, FaultType::BC,
    FaultType::ABG, FaultType::ACG, FaultType::BCG,
    FaultType::ABC,
};

std::string_view to_string(FaultType t);
FaultType fault_type_from_string(std::string_view s);

} // namespace tlfault
