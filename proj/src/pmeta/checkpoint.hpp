#pragma once

// Binary plan checkpoints, little-endian throughout:
//
//   "PMETA1\0"                magic, 7 bytes
//   u32 version
//   u64 length, bytes         network text
//   u32 L, u32 K, L*K f64     step sizes
//   tensor list               attention parameters (flatten() order)
//   tensor list               weights
//   u64 length, bytes         plan settings (key=value lines)
//
// A tensor list is u32 count then, per tensor, u32 rank, rank u64 dims and
// the row-major f64 payload.

#include <cstdint>
#include <string>
#include <vector>

#include "pmeta/plan.hpp"

namespace pmeta {

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> serialize_plan(const AdaptPlan& plan);
AdaptPlan deserialize_plan(const std::vector<std::uint8_t>& bytes);

void save_plan(const AdaptPlan& plan, const std::string& path);
AdaptPlan load_plan(const std::string& path);

}  // namespace pmeta
