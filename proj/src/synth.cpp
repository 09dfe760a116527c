#include "memecap/synth.hpp"

#include "memecap/error.hpp"
#include "memecap/image.hpp"

#include <algorithm>
#include <array>
#include <sstream>

namespace memecap {

namespace {

int uniform_int(std::mt19937_64 &rng, int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(rng);
}

template <class T> const T &pick(const std::vector<T> &v, std::mt19937_64 &rng) {
    return v[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(v.size()) - 1))];
}

void fill_panel(Image &img, const RoiBox &b, std::mt19937_64 &rng) {
    std::array<int, 3> base{};
    for (int &c : base) {
        c = uniform_int(rng, 40, 215);
    }
    for (int y = b.y0; y < b.y1; ++y) {
        for (int x = b.x0; x < b.x1; ++x) {
            for (int c = 0; c < 3; ++c) {
                img.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(base[c] + uniform_int(rng, -24, 24), 0, 255));
            }
        }
    }
}

struct Slots {
    std::vector<std::string> concepts, emotions, events, consequences, devices;
    std::vector<std::string> templates;
};

const Slots &slots_for(Sentiment s) {
    static const std::vector<std::string> concepts = {"cat", "dog", "coffee", "monday", "exam", "pizza",
                                                      "gym", "boss", "code", "weekend", "printer", "wifi"};
    static const std::vector<std::string> events = {"deadline", "meeting", "workout", "party",
                                                    "bug", "test", "commute", "launch"};
    static const std::vector<std::string> devices = {"irony", "exaggeration", "contrast", "pun", "absurdity"};
    static const std::array<Slots, 4> table = {{
        {concepts, {"proud", "smug", "confident"}, events, {"victory", "applause", "glory"}, devices,
         {"me after the {event} : {emotion} {concept} energy , pure {consequence}",
          "when my {concept} survives the {event} and i feel {emotion} , total {consequence}"}},
        {concepts, {"grateful", "amazed", "happy"}, events, {"victory", "applause", "peace"}, devices,
         {"shout out to the {concept} who turned the {event} into {consequence}",
          "my friend and the {concept} at the {event} : {emotion} and full of {consequence}"}},
        {concepts, {"tired", "awkward", "embarrassed"}, events, {"chaos", "regret", "nap"}, devices,
         {"me trying the {event} like a {emotion} {concept} , result : {consequence}",
          "my {concept} plan for the {event} ended in {consequence} , so {emotion}"}},
        {concepts, {"annoyed", "smug", "clueless"}, events, {"chaos", "silence", "regret"}, devices,
         {"that {concept} at the {event} thinking it is {emotion} , then {consequence}",
          "when they bring a {concept} to the {event} and act {emotion} , instant {consequence}"}},
    }};
    return table[static_cast<std::size_t>(s)];
}

std::string fill_template(std::string t, const ChainOfHumor &c) {
    auto replace = [&](const std::string &key, const std::string &value) {
        for (std::size_t pos = t.find(key); pos != std::string::npos; pos = t.find(key, pos + value.size())) {
            t.replace(pos, key.size(), value);
        }
    };
    replace("{concept}", c.concept_name);
    replace("{emotion}", c.emotion);
    replace("{event}", c.event);
    replace("{consequence}", c.consequence);
    return t;
}

} // namespace

SynthImage draw_meme_image(Structure s, std::mt19937_64 &rng) {
    SynthImage out;
    if (s == Structure::single) {
        const int w = uniform_int(rng, 48, 72), h = uniform_int(rng, 48, 72);
        out.image = Image(w, h, 0);
        out.rois.push_back({0, 0, w, h, 0});
        fill_panel(out.image, out.rois[0], rng);
        return out;
    }
    static const std::array<std::pair<int, int>, 4> layouts = {{{2, 1}, {1, 2}, {3, 1}, {2, 2}}}; // cols, rows
    const auto [cols, rows] = layouts[static_cast<std::size_t>(uniform_int(rng, 0, 3))];
    std::vector<int> widths, heights;
    for (int c = 0; c < cols; ++c) {
        widths.push_back(uniform_int(rng, 32, 48));
    }
    for (int r = 0; r < rows; ++r) {
        heights.push_back(uniform_int(rng, 32, 48));
    }
    int w = (cols - 1) * kSeparatorThickness, h = (rows - 1) * kSeparatorThickness;
    for (int v : widths) {
        w += v;
    }
    for (int v : heights) {
        h += v;
    }
    out.image = Image(w, h, 255);
    int y = 0;
    for (int r = 0; r < rows; ++r) {
        int x = 0;
        for (int c = 0; c < cols; ++c) {
            RoiBox b{x, y, x + widths[static_cast<std::size_t>(c)], y + heights[static_cast<std::size_t>(r)],
                     static_cast<int>(out.rois.size())};
            fill_panel(out.image, b, rng);
            out.rois.push_back(b);
            x = b.x1 + kSeparatorThickness;
        }
        y += heights[static_cast<std::size_t>(r)] + kSeparatorThickness;
    }
    return out;
}

std::vector<MemeRecord> generate_synthetic_corpus(const std::filesystem::path &dir, int size, std::uint64_t seed) {
    if (size < 2) {
        throw ValidationError("synthetic corpus needs at least two records");
    }
    std::mt19937_64 rng(seed);
    std::vector<MemeRecord> records;
    for (int i = 0; i < size; ++i) {
        MemeRecord r;
        std::ostringstream id;
        id << "syn" << (i < 10 ? "00" : i < 100 ? "0" : "") << i;
        r.id = id.str();
        r.structure = i % 2 == 0 ? Structure::single : Structure::multi;
        r.sentiment = kSentiments[static_cast<std::size_t>((i / 2) % 4)];
        r.split = i % 5 == 4 ? Split::test : Split::train;
        r.image_path = "images/" + r.id + ".ppm";
        SynthImage img = draw_meme_image(r.structure, rng);
        r.rois = img.rois;
        const Slots &s = slots_for(r.sentiment);
        for (std::size_t k = 0; k < r.rois.size(); ++k) {
            r.humor.push_back({pick(s.concepts, rng), pick(s.emotions, rng), pick(s.events, rng),
                               pick(s.consequences, rng), pick(s.devices, rng)});
        }
        r.caption = fill_template(pick(s.templates, rng), r.humor[0]);
        r.caption_tokens = basic_tokenize(r.caption);
        write_ppm(dir / r.image_path, img.image);
        records.push_back(std::move(r));
    }
    save_manifest(dir / "manifest.jsonl", records);
    return records;
}

} // namespace memecap
