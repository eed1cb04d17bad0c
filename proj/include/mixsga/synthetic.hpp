#pragma once

#include <cstdint>
#include <string>

namespace mixsga {

/// Deterministic English-like text from a small phrase grammar. Plain ASCII,
/// so it is valid UTF-8 and tokenizes one byte per character.
std::string synthetic_text(std::size_t bytes, std::uint64_t seed);

}  // namespace mixsga
