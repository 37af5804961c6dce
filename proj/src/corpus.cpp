#include "dsmoe/corpus.hpp"

#include <cmath>
#include <cstdint>
#include <fstream>

#include "dsmoe/error.hpp"
#include "dsmoe/log.hpp"

namespace dsmoe {

Corpus load_corpus(const std::string& path, double val_fraction, int seq_len) {
    if (!(val_fraction >= 0.0 && val_fraction < 1.0))
        throw ParamError("corpus: val_fraction must lie in [0,1), got " + std::to_string(val_fraction));
    if (seq_len < 1) throw ParamError("corpus: seq_len must be >= 1");

    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("corpus: cannot open '" + path + "'");
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("corpus: read failed for '" + path + "'");

    const std::size_t minimum = static_cast<std::size_t>(10) * static_cast<std::size_t>(seq_len);
    if (bytes.size() < minimum)
        throw InputError("corpus: '" + path + "' has " + std::to_string(bytes.size()) +
                         " bytes, need at least " + std::to_string(minimum) + " (10 x seq_len " +
                         std::to_string(seq_len) + ")");

    Corpus corpus;
    corpus.tokens.resize(bytes.size());
    for (std::size_t i = 0; i < bytes.size(); ++i)
        corpus.tokens[i] = static_cast<int>(static_cast<std::uint8_t>(bytes[i]));
    corpus.train_count =
        static_cast<std::size_t>(std::floor((1.0 - val_fraction) * static_cast<double>(bytes.size())));
    logging::info("corpus: %zu tokens from '%s' (%zu train, %zu val)", corpus.tokens.size(), path.c_str(),
                  corpus.train_count, corpus.tokens.size() - corpus.train_count);
    return corpus;
}

}  // namespace dsmoe
