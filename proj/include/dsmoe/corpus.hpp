#pragma once

#include <span>
#include <string>
#include <vector>

namespace dsmoe {

// Byte-level token stream (vocab 256) with a deterministic train/validation
// split: validation is the final fraction of the stream, never overlapping
// the training prefix.
struct Corpus {
    std::vector<int> tokens;
    std::size_t train_count = 0;

    std::span<const int> train() const { return {tokens.data(), train_count}; }
    std::span<const int> val() const { return {tokens.data() + train_count, tokens.size() - train_count}; }
};

Corpus load_corpus(const std::string& path, double val_fraction, int seq_len);

}  // namespace dsmoe
