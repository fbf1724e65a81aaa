#include "hmoe/corpus.hpp"

#include "hmoe/error.hpp"
#include "hmoe/rng.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>

namespace hmoe {

std::vector<std::int32_t> tokenize_bytes(std::span<const std::uint8_t> bytes)
{
    return {bytes.begin(), bytes.end()};
}

std::vector<std::int32_t> tokenize_bytes(const std::string& text)
{
    std::vector<std::int32_t> ids;
    ids.reserve(text.size());
    for (char c : text)
        ids.push_back(static_cast<std::uint8_t>(c));
    return ids;
}

std::string detokenize(std::span<const std::int32_t> ids)
{
    std::string out;
    out.reserve(ids.size());
    for (auto id : ids) {
        if (id < 0 || id > 255)
            throw IndexError("detokenize: id " + std::to_string(id) + " is not a byte");
        out.push_back(static_cast<char>(static_cast<std::uint8_t>(id)));
    }
    return out;
}

std::vector<std::int32_t> load_corpus(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot read corpus " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad())
        throw IoError("error reading corpus " + path.string());
    return tokenize_bytes(bytes);
}

std::string synthesize_corpus(std::uint64_t seed, std::size_t bytes)
{
    static constexpr std::array<const char*, 24> kOnsets{"b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s",
                                                         "t", "v", "w", "st", "th", "ch", "sh", "pr", "tr", "gr", "",
                                                         ""};
    static constexpr std::array<const char*, 10> kVowels{"a", "e", "i", "o", "u", "ea", "ou", "ai", "io", "y"};
    static constexpr std::array<const char*, 12> kCodas{"", "", "", "n", "r", "s", "t", "l", "nd", "st", "ng", "m"};
    static constexpr std::array<const char*, 12> kFunction{"the", "of", "and", "to", "a", "in",
                                                           "is", "that", "for", "it", "with", "as"};

    Rng rng(seed);
    std::vector<std::string> lexicon;
    constexpr std::size_t kWords = 3000;
    lexicon.reserve(kWords);
    for (std::size_t i = 0; i < kWords; ++i) {
        const std::size_t syllables = 1 + rng.below(3);
        std::string w;
        for (std::size_t s = 0; s < syllables; ++s) {
            w += kOnsets[rng.below(kOnsets.size())];
            w += kVowels[rng.below(kVowels.size())];
            w += kCodas[rng.below(kCodas.size())];
        }
        lexicon.push_back(std::move(w));
    }
    // Zipf(1) cumulative weights over the lexicon.
    std::vector<double> cdf(kWords);
    double acc = 0.0;
    for (std::size_t i = 0; i < kWords; ++i) {
        acc += 1.0 / static_cast<double>(i + 1);
        cdf[i] = acc;
    }
    auto zipf_word = [&]() -> const std::string& {
        const double u = rng.uniform() * acc;
        const auto it = std::lower_bound(cdf.begin(), cdf.end(), u);
        return lexicon[static_cast<std::size_t>(std::distance(cdf.begin(), it < cdf.end() ? it : cdf.end() - 1))];
    };

    std::string out;
    out.reserve(bytes + 256);
    std::size_t sentences_in_paragraph = 0;
    while (out.size() < bytes) {
        const std::size_t words = 4 + rng.below(12);
        std::string sentence;
        for (std::size_t w = 0; w < words; ++w) {
            std::string word;
            const double r = rng.uniform();
            if (r < 0.35)
                word = kFunction[rng.below(kFunction.size())];
            else if (r < 0.37)
                word = std::to_string(1000 + rng.below(9000));
            else
                word = zipf_word();
            if (w == 0 && !word.empty() && word[0] >= 'a' && word[0] <= 'z')
                word[0] = static_cast<char>(word[0] - 'a' + 'A');
            if (w > 0)
                sentence += (rng.uniform() < 0.06) ? ", " : " ";
            sentence += word;
        }
        const double end = rng.uniform();
        sentence += end < 0.85 ? ". " : (end < 0.95 ? "? " : "! ");
        out += sentence;
        if (++sentences_in_paragraph >= 3 + rng.below(6)) {
            out.back() = '\n';
            out += '\n';
            sentences_in_paragraph = 0;
        }
    }
    out.resize(bytes);
    return out;
}

} // namespace hmoe
