#pragma once

// Tiny caption-decoder fixtures: random image features, a handful of
// templated captions, and the alignment priors the SFT loss expects.

#include "random_inputs.hpp"

#include "memecap/align.hpp"
#include "memecap/decoder.hpp"
#include "memecap/encode.hpp"
#include "memecap/sft.hpp"

#include <algorithm>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace toy {

inline const std::vector<std::vector<std::string>> &captions() {
    static const std::vector<std::vector<std::string>> c = {
        {"when", "the", "cat", "wins"},
        {"me", "after", "one", "coffee"},
        {"nobody", "expects", "the", "dog"},
        {"monday", "again", "really"},
        {"when", "the", "dog", "naps", "all", "day"},
        {"one", "more", "bug", "please"},
        {"me", "trying", "to", "relax"},
        {"the", "cat", "judges", "me"},
    };
    return c;
}

struct World {
    int d = 8;
    std::unique_ptr<memecap::EmbeddingTextEncoder> text;
    memecap::AlignParams align;
    std::unique_ptr<memecap::CaptionDecoder> dec;
    memecap::SftContext ctx;
    std::vector<memecap::SftExample> data;
};

inline std::unique_ptr<World> make_world(int records, std::uint64_t seed = 1, int width = 16, int layers = 1,
                                         int sub_images = 1) {
    using namespace memecap;
    auto w = std::make_unique<World>();
    std::mt19937_64 rng(seed);
    std::vector<std::vector<std::string>> caps, prefixes;
    for (int i = 0; i < records; ++i) {
        caps.push_back(captions()[static_cast<std::size_t>(i) % captions().size()]);
        prefixes.push_back({"topic", "t" + std::to_string(i % 4)});
    }
    std::vector<std::string> vocab;
    for (const auto &c : caps) {
        for (const std::string &t : c) {
            if (std::find(vocab.begin(), vocab.end(), t) == vocab.end()) {
                vocab.push_back(t);
            }
        }
    }
    EmbeddingTextEncoder::Options topt;
    topt.d = w->d;
    topt.seed = seed + 1;
    w->text = std::make_unique<EmbeddingTextEncoder>(vocab, topt);
    w->align = AlignParams::init(w->d, 4, 0.07, seed + 2);
    w->align.w_q.value = gen::randn(w->d, 4, rng, 0.5);
    w->align.w_k.value = gen::randn(w->d, 4, rng, 0.5);

    std::vector<std::vector<std::string>> lists = caps;
    lists.insert(lists.end(), prefixes.begin(), prefixes.end());
    const Vocabulary v = Vocabulary::build(lists);
    DecoderConfig dc;
    dc.vocab_size = v.size();
    dc.width = width;
    dc.layers = layers;
    dc.image_dim = w->d;
    dc.max_prefix = 4;
    dc.seed = seed + 3;
    w->dec = std::make_unique<CaptionDecoder>(v, dc);

    for (int i = 0; i < records; ++i) {
        SftExample ex;
        ex.id = "r" + std::to_string(i);
        for (int s = 0; s < sub_images; ++s) {
            ex.subimages.push_back({gen::randn(4, w->d, rng), s});
        }
        const TokenFeatures tf = w->text->encode(caps[static_cast<std::size_t>(i)]);
        const AlignView view = align_view(ex.subimages, tf, w->align);
        ex.cond.image = view.pooled;
        ex.cond.prefix = v.encode(prefixes[static_cast<std::size_t>(i)]);
        ex.caption = v.encode(caps[static_cast<std::size_t>(i)]);
        ex.prior_global = view.global;
        ex.prior_tokens = view.map.token_level;
        ex.reference_pooled = RowVec::Zero(w->d);
        for (const std::string &t : caps[static_cast<std::size_t>(i)]) {
            ex.reference_pooled += w->text->embed(t);
        }
        ex.reference_pooled /= static_cast<double>(caps[static_cast<std::size_t>(i)].size());
        w->data.push_back(std::move(ex));
    }
    w->ctx = make_sft_context(*w->dec, *w->text, w->align, false);
    return w;
}

} // namespace toy
