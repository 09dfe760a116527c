#include "doctest.h"

#include "memecap/corpus.hpp"
#include "memecap/error.hpp"
#include "memecap/image.hpp"
#include "memecap/io.hpp"
#include "memecap/synth.hpp"

#include <algorithm>
#include <filesystem>
#include <random>
#include <set>

using namespace memecap;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string &name) {
    fs::path p = fs::temp_directory_path() / ("memecap-corpus-" + name);
    fs::remove_all(p);
    fs::create_directories(p / "images");
    return p;
}

MemeRecord record(const std::string &id, Structure s, Sentiment m, int tokens, std::vector<RoiBox> rois) {
    MemeRecord r;
    r.id = id;
    r.image_path = "images/" + id + ".ppm";
    r.structure = s;
    r.sentiment = m;
    for (int i = 0; i < tokens; ++i) {
        r.caption += (i ? " w" : "w") + std::to_string(i);
    }
    r.caption_tokens = basic_tokenize(r.caption);
    r.rois = std::move(rois);
    return r;
}

// Three solid 100x100 panels stacked vertically with 5-pixel white bands.
Image stacked_panels() {
    Image img(100, 310, 255);
    const std::uint8_t colors[3][3] = {{200, 30, 30}, {30, 200, 30}, {30, 30, 200}};
    for (int p = 0; p < 3; ++p) {
        for (int y = p * 105; y < p * 105 + 100; ++y) {
            for (int x = 0; x < 100; ++x) {
                img.set(x, y, colors[p][0], colors[p][1], colors[p][2]);
            }
        }
    }
    return img;
}

} // namespace

TEST_CASE("tokenizer splits punctuation and lower-cases") {
    CHECK(basic_tokenize("Me, AFTER the exam!") == std::vector<std::string>{"me", ",", "after", "the", "exam", "!"});
    CHECK(basic_tokenize("  ").empty());
}

TEST_CASE("manifest round trip keeps order and is byte-stable") {
    const fs::path dir = scratch("roundtrip");
    std::vector<MemeRecord> recs;
    for (int i = 0; i < 3; ++i) {
        recs.push_back(record("m" + std::to_string(i), Structure::single, kSentiments[i], 5, {{0, 0, 8, 8, 0}}));
        write_ppm(dir / recs.back().image_path, Image(8, 8, 10));
    }
    recs[1].humor = {{"a dog", "surprise", "sharing a photo", "discussing", "anthropomorphism"}};
    save_manifest(dir / "m.jsonl", recs);
    const auto loaded = load_manifest(dir / "m.jsonl");
    REQUIRE(loaded.size() == 3);
    CHECK(loaded[0].id == "m0");
    CHECK(loaded[2].id == "m2");
    CHECK(loaded == recs);
    CHECK(manifest_text(loaded) == read_file(dir / "m.jsonl"));
}

TEST_CASE("manifest validation errors name the record") {
    const fs::path dir = scratch("invalid");
    write_ppm(dir / "images/a.ppm", Image(20, 20, 0));
    auto expect = [&](const std::string &line, const std::string &needle) {
        write_file(dir / "m.jsonl", line + "\n");
        try {
            load_manifest(dir / "m.jsonl");
            FAIL("expected a validation error for " << line);
        } catch (const ValidationError &e) {
            CHECK(std::string(e.what()).find(needle) != std::string::npos);
        }
    };
    expect(R"({"id":"a","image_path":"images/a.ppm","structure":"single","sentiment":"joy","caption":"x y","rois":[[0,0,5,5]],"split":"train"})",
           "joy");
    expect(R"({"id":"a","image_path":"images/a.ppm","structure":"multi","sentiment":"self_praise","caption":"x y","rois":[[0,0,10,10],[5,5,15,15]],"split":"train"})",
           "a");
    expect(R"({"id":"a","image_path":"images/a.ppm","structure":"multi","sentiment":"self_praise","caption":"x y","rois":[[0,0,10,10]],"split":"train"})",
           "a");
    expect(R"({"id":"a","image_path":"images/a.ppm","structure":"single","sentiment":"self_praise","caption":"x","rois":[[0,0,30,5]],"split":"train"})",
           "a");
    write_file(dir / "m.jsonl",
               R"({"id":"gone","image_path":"images/none.ppm","structure":"single","sentiment":"self_praise","caption":"x y","rois":[[0,0,5,5]],"split":"train"})"
               "\n");
    try {
        load_manifest(dir / "m.jsonl");
        FAIL("expected LoadError");
    } catch (const LoadError &e) {
        CHECK(e.record_id() == "gone");
    }
}

TEST_CASE("overlap and iou follow interval arithmetic") {
    CHECK(overlaps({0, 0, 10, 10, 0}, {5, 5, 15, 15, 1}));
    CHECK_FALSE(overlaps({0, 0, 10, 10, 0}, {10, 0, 20, 10, 1}));
    CHECK(iou({0, 0, 10, 10, 0}, {5, 0, 15, 10, 1}) == doctest::Approx(50.0 / 150.0));
    CHECK(iou({0, 0, 10, 10, 0}, {0, 0, 10, 10, 1}) == 1.0);
}

TEST_CASE("segmentation recovers three stacked panels") {
    const Image img = stacked_panels();
    const auto rois = segment_subimages(img, SegmentMode::automatic);
    REQUIRE(rois.size() == 3);
    CHECK(rois[0] == RoiBox{0, 0, 100, 100, 0});
    CHECK(rois[1] == RoiBox{0, 105, 100, 205, 1});
    CHECK(rois[2] == RoiBox{0, 210, 100, 310, 2});
    // Idempotence: each extracted panel segments to itself.
    for (const RoiBox &r : rois) {
        const auto again = segment_subimages(crop(img, r), SegmentMode::automatic);
        REQUIRE(again.size() == 1);
        CHECK(again[0] == RoiBox{0, 0, r.x1 - r.x0, r.y1 - r.y0, 0});
    }
}

TEST_CASE("segmentation degenerate and manual modes") {
    const Image solid(64, 64, 90);
    const auto one = segment_subimages(solid, SegmentMode::automatic);
    REQUIRE(one.size() == 1);
    CHECK(one[0] == RoiBox{0, 0, 64, 64, 0});
    const std::vector<RoiBox> manual = {{0, 0, 10, 10, 0}, {20, 0, 30, 10, 1}};
    CHECK(segment_subimages(solid, SegmentMode::manual, manual) == manual);
    CHECK_THROWS_AS(segment_subimages(solid, SegmentMode::manual), ValidationError);
    CHECK_THROWS_AS(segment_subimages(solid, SegmentMode::manual, std::vector<RoiBox>{{0, 0, 65, 10, 0}}),
                    ValidationError);
    CHECK_THROWS_AS(segment_subimages(Image(), SegmentMode::automatic), ValidationError);
}

TEST_CASE("synthetic panels: ROI plus separator area covers the image") {
    std::mt19937_64 rng(3);
    for (int i = 0; i < 20; ++i) {
        const SynthImage s = draw_meme_image(Structure::multi, rng);
        const auto rois = segment_subimages(s.image, SegmentMode::automatic);
        REQUIRE(rois.size() == s.rois.size());
        long roi_area = 0;
        for (std::size_t k = 0; k < rois.size(); ++k) {
            CHECK(rois[k].x0 == s.rois[k].x0);
            CHECK(rois[k].y1 == s.rois[k].y1);
            roi_area += rois[k].area();
        }
        long white = 0;
        for (int y = 0; y < s.image.height; ++y) {
            for (int x = 0; x < s.image.width; ++x) {
                const bool inside = std::any_of(rois.begin(), rois.end(), [&](const RoiBox &r) {
                    return x >= r.x0 && x < r.x1 && y >= r.y0 && y < r.y1;
                });
                if (!inside) {
                    white += s.image.at(x, y, 0) == 255 && s.image.at(x, y, 1) == 255 && s.image.at(x, y, 2) == 255;
                }
            }
        }
        CHECK(roi_area + white == static_cast<long>(s.image.width) * s.image.height);
    }
}

TEST_CASE("statistics: arithmetic, symmetry and permutation invariance") {
    std::vector<MemeRecord> recs = {record("a", Structure::single, Sentiment::self_praise, 5, {{0, 0, 1, 1, 0}}),
                                    record("b", Structure::single, Sentiment::praise_others, 10, {{0, 0, 1, 1, 0}}),
                                    record("c", Structure::multi, Sentiment::self_mockery, 15,
                                           {{0, 0, 1, 1, 0}, {1, 0, 2, 1, 1}}),
                                    record("d", Structure::multi, Sentiment::mock_others, 10,
                                           {{0, 0, 1, 1, 0}, {1, 0, 2, 1, 1}})};
    const CorpusStats st = compute_stats(recs);
    CHECK(st.tokens.avg == doctest::Approx(10.0));
    CHECK(st.tokens.max == 15);
    CHECK(st.tokens.min == 5);
    for (double f : st.fraction_per_sentiment) {
        CHECK(f == 0.25);
    }
    CHECK(st.fraction_single + st.fraction_multi == 1.0);
    std::reverse(recs.begin(), recs.end());
    const CorpusStats rev = compute_stats(recs);
    CHECK(rev.tokens.avg == st.tokens.avg);
    CHECK(rev.fraction_per_sentiment == st.fraction_per_sentiment);
    CHECK_THROWS(compute_stats({}));
}

TEST_CASE("balance_downsample hits the targets deterministically") {
    std::vector<MemeRecord> recs;
    for (int i = 0; i < 40; ++i) {
        const bool single = i % 5 != 0; // 80 / 20
        recs.push_back(record("r" + std::to_string(i), single ? Structure::single : Structure::multi,
                              kSentiments[static_cast<std::size_t>(i % 4)], 5,
                              single ? std::vector<RoiBox>{{0, 0, 1, 1, 0}}
                                     : std::vector<RoiBox>{{0, 0, 1, 1, 0}, {1, 0, 2, 1, 1}}));
    }
    BalanceTargets t;
    t.sentiment = {0.25, 0.25, 0.25, 0.25};
    // Any sentiment mix is acceptable for the structure check, so relax it to the input's own marginals.
    const auto out = balance_downsample(recs, t, 5);
    const auto again = balance_downsample(recs, t, 5);
    CHECK(out == again);
    const auto singles = std::count_if(out.begin(), out.end(), [](const MemeRecord &r) {
        return r.structure == Structure::single;
    });
    CHECK(singles * 2 == static_cast<long>(out.size()));
    std::set<std::string> ids;
    for (const MemeRecord &r : out) {
        CHECK(ids.insert(r.id).second);
        CHECK(std::find(recs.begin(), recs.end(), r) != recs.end());
    }
    // Fixed point: an already balanced input comes back unchanged.
    CHECK(balance_downsample(out, t, 9) == out);
    BalanceTargets missing;
    missing.structure = {0.0, 1.0};
    std::vector<MemeRecord> only_single;
    for (const MemeRecord &r : recs) {
        if (r.structure == Structure::single) {
            only_single.push_back(r);
        }
    }
    CHECK_THROWS_WITH_AS(balance_downsample(only_single, missing, 1), doctest::Contains("multi"), ValidationError);
}

TEST_CASE("synthetic corpus: balance, exact ROIs, determinism") {
    const fs::path a = scratch("synth-a"), b = scratch("synth-b");
    const auto ra = generate_synthetic_corpus(a, 32, 7);
    generate_synthetic_corpus(b, 32, 7);
    REQUIRE(ra.size() == 32);
    const CorpusStats st = compute_stats(ra);
    CHECK(st.fraction_single == 0.5);
    for (double f : st.fraction_per_sentiment) {
        CHECK(f == 0.25);
    }
    CHECK(st.tokens.min >= 5);
    CHECK(st.tokens.max <= 25);
    CHECK(read_file(a / "manifest.jsonl") == read_file(b / "manifest.jsonl"));
    for (const MemeRecord &r : ra) {
        CHECK(sha256_file(a / r.image_path) == sha256_file(b / r.image_path));
        if (r.structure == Structure::multi) {
            const auto rois = segment_subimages(read_ppm(a / r.image_path), SegmentMode::automatic);
            REQUIRE(rois.size() == r.rois.size());
            for (std::size_t k = 0; k < rois.size(); ++k) {
                CHECK(iou(rois[k], r.rois[k]) == 1.0);
            }
        }
    }
    CHECK(load_manifest(a / "manifest.jsonl") == ra);
    CHECK_THROWS_AS(generate_synthetic_corpus(a, 1, 7), ValidationError);
}
