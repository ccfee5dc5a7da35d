#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "enprobe/model.hpp"
#include "enprobe/probing.hpp"

namespace enprobe::nano {

// Random nano-scale model. The unembedding (tied to the token embedding) has
// two weak directions orthogonal to the all-ones vector, and the final-layer
// neuron `kPlantedNeuron` writes almost entirely into them, so it behaves like
// an entropy neuron. Token rows for '.' and ',' are shrunk so greedy output
// rarely ends immediately.
inline constexpr std::size_t kPlantedNeuron = 7;

Model make_model(std::uint64_t seed, const ModelConfig& config = ModelConfig::nano());

// 64-token byte-level vocabulary: "Ġ", a-z, A-Z, '.', ',' and nine merges.
std::string vocab_json();
std::string merges_txt();

// Short synthetic facts whose prompts fit the nano context window.
std::vector<FactTriplet> make_triplets(std::uint64_t seed, std::size_t count);

struct FixturePaths {
    std::filesystem::path weights;
    std::filesystem::path vocab;
    std::filesystem::path merges;
    std::filesystem::path dataset;
};

// Writes model.safetensors, vocab.json, merges.txt and facts.jsonl into `dir`.
FixturePaths write_fixture(const std::filesystem::path& dir, std::uint64_t seed, std::size_t n_triplets = 40);

} // namespace enprobe::nano
