#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace hmoe {

// Byte-level tokenizer: each byte maps to its value.
std::vector<std::int32_t> tokenize_bytes(std::span<const std::uint8_t> bytes);
std::vector<std::int32_t> tokenize_bytes(const std::string& text);
std::string detokenize(std::span<const std::int32_t> ids);

// Reads the whole file as bytes; IoError names the path.
std::vector<std::int32_t> load_corpus(const std::filesystem::path& path);

/// Deterministic English-like text: Zipf-distributed pseudo-words built from
/// syllables, sentence punctuation, occasional numbers and paragraph breaks.
/// Gives a byte stream with a mix of easy (frequent, repetitive) and hard
/// (numeric, rare) tokens.
std::string synthesize_corpus(std::uint64_t seed, std::size_t bytes);

} // namespace hmoe
