#include "ropeforge/synth.hpp"

#include <array>
#include <cstdio>
#include <string_view>

#include "byte_io.hpp"
#include "random.hpp"
#include "ropeforge/error.hpp"

namespace ropeforge::corpus {

namespace {

constexpr std::array<std::string_view, 24> kOnsets = {"b", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s",
                                                      "t", "v", "z", "br", "dr", "gr", "kl", "st", "th", "sh", "tr", "w"};
constexpr std::array<std::string_view, 10> kVowels = {"a", "e", "i", "o", "u", "ai", "ea", "ou", "ie", "oa"};
constexpr std::array<std::string_view, 10> kCodas = {"", "", "", "n", "r", "l", "s", "th", "m", "k"};

constexpr std::array<std::string_view, 48> kNouns = {
    "lantern", "bridge",  "letter", "garden",  "river",  "window", "basket", "ladder", "mirror", "compass",
    "journal", "kettle",  "blanket", "harbor", "orchard", "tower", "wagon",  "bell",   "map",    "key",
    "coat",    "candle",  "boat",   "field",   "market", "well",   "road",   "gate",   "stone",  "rope",
    "cup",     "book",    "door",   "table",   "chest",  "clock",  "hill",   "forest", "shore",  "barn",
    "fence",   "meadow",  "song",   "story",   "drum",   "flag",   "ring",   "shovel"};
constexpr std::array<std::string_view, 36> kAdjectives = {
    "old",    "quiet",  "bright", "heavy", "narrow", "golden", "broken", "small",  "wide",
    "cold",   "warm",   "strange", "green", "dusty", "silver", "tall",   "round",  "empty",
    "hidden", "wooden", "gentle", "sharp", "faded",  "sturdy", "simple", "curious", "distant",
    "red",    "blue",   "soft",   "long",  "early",  "late",   "clear",  "plain",  "rough"};
constexpr std::array<std::string_view, 30> kVerbs = {
    "carried", "opened", "found",   "painted", "repaired", "watched", "followed", "counted",  "cleaned", "moved",
    "lifted",  "closed", "carved",  "mended",  "measured", "studied", "borrowed", "returned", "checked", "held",
    "pulled",  "pushed", "dropped", "lost",    "kept",     "marked",  "wrapped",  "tied",     "sold",    "bought"};
constexpr std::array<std::string_view, 16> kPlaceKinds = {"village", "harbor", "valley", "town",  "farm",  "mill",
                                                          "station", "market", "bridge", "abbey", "inn",   "school",
                                                          "lighthouse", "orchard", "quarry", "ferry"};
constexpr std::array<std::string_view, 12> kTimes = {"In the morning", "That evening",  "At noon",
                                                     "Before dawn",    "After supper",  "The next day",
                                                     "Later",          "Soon after",    "By midday",
                                                     "At dusk",        "On the third day", "Meanwhile"};
constexpr std::array<std::string_view, 10> kWeather = {"rain fell softly", "the wind was sharp", "the sky was clear",
                                                       "fog covered the hills", "the sun was low",
                                                       "snow drifted down", "the air was still",
                                                       "clouds gathered", "the river was high",
                                                       "birds sang in the trees"};

struct Cast {
    std::vector<std::string> people;
    std::vector<std::string> places;
    std::vector<std::string> objects;
    std::vector<std::string> codes;  // parallel to places
};

class Writer {
public:
    explicit Writer(std::uint64_t seed) : g_(seed) {}

    template <std::size_t N>
    std::string_view pick(const std::array<std::string_view, N>& a) {
        return a[rnd::below(g_, N)];
    }
    const std::string& pick(const std::vector<std::string>& v) { return v[rnd::below(g_, v.size())]; }
    std::uint64_t below(std::uint64_t n) { return rnd::below(g_, n); }

    std::string name() {
        std::string s;
        const auto syllables = 2 + below(2);
        for (std::uint64_t i = 0; i < syllables; ++i) {
            s += pick(kOnsets);
            s += pick(kVowels);
            if (i + 1 == syllables) s += pick(kCodas);
        }
        s[0] = static_cast<char>(s[0] - 'a' + 'A');
        return s;
    }

    std::string code() {
        char buf[8];
        std::snprintf(buf, sizeof buf, "%04u", static_cast<unsigned>(below(10000)));
        return buf;
    }

    Cast cast() {
        Cast c;
        const auto n_people = 4 + below(5);
        for (std::uint64_t i = 0; i < n_people; ++i) c.people.push_back(name());
        const auto n_places = 3 + below(3);
        for (std::uint64_t i = 0; i < n_places; ++i) {
            const std::string kind(pick(kPlaceKinds));
            c.places.push_back("the " + kind + " of " + name());
            c.codes.push_back(code());
        }
        const auto n_objects = 4 + below(3);
        for (std::uint64_t i = 0; i < n_objects; ++i) {
            const std::string adj(pick(kAdjectives));
            const std::string noun(pick(kNouns));
            c.objects.push_back("the " + adj + " " + noun);
        }
        return c;
    }

    std::string sentence(const Cast& c) {
        // Draw everything up front: operand evaluation order inside one
        // expression is unspecified.
        const std::string a = pick(c.people);
        std::string b = pick(c.people);
        while (b == a) b = pick(c.people);
        const auto pi = below(c.places.size());
        const std::string& place = c.places[pi];
        const std::string obj = pick(c.objects);
        const std::string verb(pick(kVerbs));
        const std::string noun(pick(kNouns));
        const std::string adj1(pick(kAdjectives));
        const std::string adj2(pick(kAdjectives));
        const std::string when(pick(kTimes));
        const std::string weather(pick(kWeather));
        switch (below(12)) {
            case 0: return a + " went to " + place + " with " + b + ".";
            case 1: return "At " + place + ", " + a + " " + verb + " " + obj + ".";
            case 2: return a + " told " + b + " that " + obj + " was " + adj1 + ".";
            case 3: return when + ", " + weather + " over " + place + ".";
            case 4: return a + " remembered that the code for " + place + " was " + c.codes[pi] + ".";
            case 5: return "\"Have you seen " + obj + "?\" asked " + a + ". " + b + " did not answer.";
            case 6: return b + " " + verb + " the " + noun + " near " + place + ".";
            case 7: return "The " + noun + " was " + adj1 + " and " + adj2 + ".";
            case 8: return a + " wrote " + c.codes[pi] + " in the journal, the number that opened " + place + ".";
            case 9: return when + ", " + a + " and " + b + " " + verb + " " + obj + ".";
            case 10: return "Everyone in " + place + " knew " + a + ".";
            default: return a + " gave " + obj + " to " + b + " and walked back to " + place + ".";
        }
    }

private:
    rnd::Engine g_;
};

}  // namespace

std::vector<SynthDocument> synthesize_corpus(const SynthOptions& opts) {
    if (opts.min_doc_bytes == 0 || opts.max_doc_bytes < opts.min_doc_bytes) {
        throw InputError("synthetic corpus needs 0 < min_doc_bytes <= max_doc_bytes");
    }
    std::vector<SynthDocument> docs;
    std::size_t produced = 0;
    for (std::uint64_t index = 0; produced < opts.total_bytes; ++index) {
        Writer w(rnd::derive(opts.seed, {0xD0C, index}));
        const std::size_t target = opts.min_doc_bytes + w.below(opts.max_doc_bytes - opts.min_doc_bytes + 1);
        Cast cast = w.cast();
        std::string text;
        text.reserve(target + 512);
        int chapter = 1;
        text += "Chapter 1\n\n";
        while (text.size() < target) {
            const auto sentences = 3 + w.below(6);
            for (std::uint64_t i = 0; i < sentences; ++i) {
                if (i) text += ' ';
                text += w.sentence(cast);
            }
            text += "\n\n";
            if (w.below(12) == 0) {
                // A newcomer joins mid-document, so later text refers to a name
                // first seen far back.
                cast.people.push_back(w.name());
                text += "Chapter " + std::to_string(++chapter) + "\n\n";
            }
        }
        char name[32];
        std::snprintf(name, sizeof name, "doc_%05llu.txt", static_cast<unsigned long long>(index));
        produced += text.size();
        docs.push_back({name, std::move(text)});
    }
    return docs;
}

std::vector<std::filesystem::path> write_synth_corpus(const std::filesystem::path& dir, const SynthOptions& opts) {
    std::filesystem::create_directories(dir);
    std::vector<std::filesystem::path> paths;
    for (const auto& d : synthesize_corpus(opts)) {
        const auto p = dir / d.name;
        io::write_file(p.string(), d.text);
        paths.push_back(p);
    }
    return paths;
}

}  // namespace ropeforge::corpus
