#include "doctest.h"
#include "fd.hpp"
#include "alpha_oracle.hpp"
#include "planted.hpp"

#include "memecap/error.hpp"
#include "memecap/reward.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <map>

using namespace memecap;
namespace fs = std::filesystem;

namespace {

using oracle::Ratings;

const std::optional<double> na;

// Four coders, twelve units, ratings 1-5 with gaps.
Ratings reliability_fixture() {
    return {
        {1, 2, 3, 3, 2, 1, 4, 1, 2, na, na, na},
        {1, 2, 3, 3, 2, 2, 4, 1, 2, 5, na, 3},
        {na, 3, 3, 3, 2, 3, 4, 2, 2, 5, 1, na},
        {1, 2, 3, 3, 2, 4, 4, 1, 2, 5, 1, na},
    };
}

AttentionMap map_of(const Mat &token_level) {
    AttentionMap m;
    m.token_level = token_level;
    m.global = token_level.colwise().mean();
    m.energies = token_level;
    return m;
}

Mat column_distributions(Eigen::Index areas, Eigen::Index tokens, std::mt19937_64 &rng) {
    Mat m = gen::randn(areas, tokens, rng).cwiseAbs();
    for (Eigen::Index j = 0; j < tokens; ++j) {
        m.col(j) /= m.col(j).sum();
    }
    return m;
}

struct FixedScorer final : RewardScorer {
    std::map<std::vector<int>, double> table;
    double score(const Conditioning &, std::span<const int> c) const override {
        return table.at(std::vector<int>(c.begin(), c.end()));
    }
};

} // namespace

TEST_CASE("Jensen-Shannon divergence") {
    Vec p(2), q(2);
    p << 1, 0;
    q << 0.5, 0.5;
    const double want = 0.5 * std::log2(1.0 / 0.75) + 0.5 * (0.5 * std::log2(0.5 / 0.75) + 0.5 * std::log2(2.0));
    CHECK(jsd(p, q) == doctest::Approx(want).epsilon(1e-12));
    CHECK(jsd(p, p) == 0.0);
    Vec r(2);
    r << 0, 3; // normalized internally
    CHECK(jsd(p, r) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK_THROWS_AS(jsd(p, Vec::Zero(2)), NumericError);
    CHECK_THROWS_AS(jsd(p, Vec::Ones(3)), ShapeError);
}

TEST_CASE("attention ranking prefers the prior's own pattern") {
    std::mt19937_64 rng(2);
    const Mat prior = column_distributions(5, 4, rng);
    CandidateSet set;
    set.meme_id = "m";
    set.candidates.push_back({"c1", {"a"}, map_of(column_distributions(5, 4, rng))});
    set.candidates.push_back({"c2", {"b"}, map_of(prior)});
    set.candidates.push_back({"c3", {"c"}, map_of(column_distributions(5, 4, rng))});
    const PreferenceRecord r = attention_rank(set, map_of(prior));
    CHECK(r.ordering.back() == "c2");
    CHECK(r.source == PreferenceSource::attention);
    CHECK(attention_alignment(map_of(prior), map_of(prior)) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("ties break toward the smaller id") {
    const Mat flat = Mat::Constant(4, 3, 0.25);
    CandidateSet set;
    set.meme_id = "m";
    set.candidates.push_back({"c2", {"a"}, map_of(flat)});
    set.candidates.push_back({"c1", {"b"}, map_of(flat)});
    set.candidates.push_back({"c3", {"c"}, map_of(flat)});
    CHECK(attention_rank(set, map_of(flat)).ordering == std::vector<std::string>{"c3", "c2", "c1"});
}

TEST_CASE("candidate sets reject repeats") {
    CandidateSet set;
    set.meme_id = "m";
    set.candidates.push_back({"c1", {"a", "b"}, {}});
    set.candidates.push_back({"c1", {"b"}, {}});
    CHECK_THROWS_AS(set.validate(), ValidationError);
    set.candidates[1].id = "c2";
    set.candidates[1].tokens = {"a", "b"};
    CHECK_THROWS_AS(set.validate(), ValidationError);
    set.candidates[1].tokens = {"a"};
    CHECK_NOTHROW(set.validate());
    CHECK_THROWS_AS(set.at("c9"), NotFoundError);
}

TEST_CASE("Borda fusion by hand") {
    PreferenceRecord h{"m", {"a", "b", "c"}, PreferenceSource::human, 0.8, {"x"}, ""};
    PreferenceRecord at{"m", {"c", "b", "a"}, PreferenceSource::attention, std::nullopt, {}, ""};
    // points: a = 0.7*0 + 0.3*2 = 0.6, b = 1, c = 0.7*2 + 0 = 1.4
    const PreferenceRecord f = fuse_rankings(h, at, 0.7);
    CHECK(f.ordering == std::vector<std::string>{"a", "b", "c"});
    CHECK(f.source == PreferenceSource::fused);
    // weight 0.5 makes every candidate score 1: smaller id ranks higher
    CHECK(fuse_rankings(h, at, 0.5).ordering == std::vector<std::string>{"c", "b", "a"});
    CHECK(fuse_rankings(h, at, 0.0).ordering == at.ordering);
    PreferenceRecord other = at;
    other.ordering = {"a", "b", "d"};
    CHECK_THROWS_AS(fuse_rankings(h, other), ValidationError);
    CHECK_THROWS_AS(fuse_rankings(h, at, 1.5), ValidationError);
}

TEST_CASE("ranking pairs list every (winner, loser)") {
    const auto pairs = ranking_pairs({"w", "m", "b"});
    CHECK(pairs.size() == 3);
    CHECK(std::count(pairs.begin(), pairs.end(), std::make_pair(std::string("b"), std::string("w"))) == 1);
    CHECK(std::count(pairs.begin(), pairs.end(), std::make_pair(std::string("m"), std::string("w"))) == 1);
    CHECK(std::count(pairs.begin(), pairs.end(), std::make_pair(std::string("b"), std::string("m"))) == 1);
}

TEST_CASE("Krippendorff's alpha on the reference reliability data") {
    const Ratings r = reliability_fixture();
    CHECK(krippendorff_alpha(r, AlphaLevel::nominal) == doctest::Approx(0.743421).epsilon(1e-6));
    CHECK(krippendorff_alpha(r, AlphaLevel::ordinal) == doctest::Approx(0.8153875).epsilon(1e-6));
    CHECK(krippendorff_alpha(r, AlphaLevel::interval) == doctest::Approx(0.849107).epsilon(1e-6));
    for (AlphaLevel level : {AlphaLevel::nominal, AlphaLevel::ordinal, AlphaLevel::interval}) {
        CHECK(std::abs(krippendorff_alpha(r, level) - oracle::alpha_by_pairs(r, level)) < 1e-9);
        CHECK(std::abs(krippendorff_alpha(r, level) - oracle::alpha_by_coincidence(r, level)) < 1e-9);
    }
}

TEST_CASE("Krippendorff's alpha matches the pairwise form on random ratings") {
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 200; ++trial) {
        const int coders = gen::uniform(rng, 2, 5), units = gen::uniform(rng, 2, 10);
        Ratings r(static_cast<std::size_t>(coders), std::vector<std::optional<double>>(static_cast<std::size_t>(units)));
        for (auto &row : r) {
            for (auto &v : row) {
                if (gen::uniform(rng, 0, 5) > 0) {
                    v = gen::uniform(rng, 1, 4);
                }
            }
        }
        for (AlphaLevel level : {AlphaLevel::nominal, AlphaLevel::ordinal, AlphaLevel::interval}) {
            double got = 0.0;
            try {
                got = krippendorff_alpha(r, level);
            } catch (const ValidationError &) {
                continue; // nothing pairable
            }
            const double want = oracle::alpha_by_pairs(r, level);
            if (std::isfinite(want)) {
                CHECK(std::abs(got - want) < 1e-9);
                CHECK(std::abs(got - oracle::alpha_by_coincidence(r, level)) < 1e-9);
            } else {
                CHECK(got == 1.0); // a single observed value: no expected disagreement
            }
        }
    }
}

TEST_CASE("alpha edge cases") {
    CHECK(krippendorff_alpha({{1, 2, 3}, {1, 2, 3}}) == doctest::Approx(1.0));
    CHECK_THROWS_AS(krippendorff_alpha({{1, 2}}), ValidationError);
    CHECK_THROWS_AS(krippendorff_alpha({{1, na}, {na, 2}}), ValidationError);
    CHECK_THROWS_AS(krippendorff_alpha({{1, 2}, {1}}), ShapeError);
}

TEST_CASE("preference records: validation, gate and storage") {
    PreferenceRecord r{"m1", {"c2", "c1", "c3"}, PreferenceSource::human, 0.71, {"a1", "a2"}, "2024-01-01T00:00:00Z"};
    CHECK_NOTHROW(r.validate());
    PreferenceRecord gated = r;
    gated.agreement = 0.7;
    CHECK_THROWS_AS(gated.validate(), ValidationError);
    gated.agreement.reset();
    CHECK_THROWS_AS(gated.validate(), ValidationError);
    PreferenceRecord repeat = r;
    repeat.ordering = {"c1", "c1"};
    CHECK_THROWS_AS(repeat.validate(), ValidationError);

    const fs::path dir = fs::temp_directory_path() / "memecap_pref_test";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const fs::path store = dir / "prefs.jsonl";
    append_preference(store, r);
    PreferenceRecord a{"m2", {"x", "y"}, PreferenceSource::attention, std::nullopt, {}, ""};
    append_preference(store, a);
    CHECK_THROWS_AS(append_preference(store, gated), ValidationError);
    const auto back = load_preferences(store);
    REQUIRE(back.size() == 2);
    CHECK(back[0].ordering == r.ordering);
    CHECK(back[0].agreement == r.agreement);
    CHECK(back[0].annotator_ids == r.annotator_ids);
    CHECK(back[1].source == PreferenceSource::attention);
    CHECK(!back[1].agreement);
    CHECK_THROWS_AS(parse_preference_line("{\"meme_id\": 3}"), ValidationError);
    fs::remove_all(dir);
}

TEST_CASE("usable preferences drop low-agreement human records") {
    PreferenceRecord low{"m1", {"a", "b"}, PreferenceSource::human, 0.5, {}, ""};
    PreferenceRecord edge{"m2", {"a", "b"}, PreferenceSource::human, 0.7, {}, ""};
    PreferenceRecord ok{"m3", {"a", "b"}, PreferenceSource::human, 0.9, {}, ""};
    PreferenceRecord att{"m4", {"a", "b"}, PreferenceSource::attention, std::nullopt, {}, ""};
    const auto kept = usable_preferences({low, edge, ok, att});
    REQUIRE(kept.size() == 2);
    CHECK(kept[0].meme_id == "m3");
    CHECK(kept[1].meme_id == "m4");
    CHECK_THROWS_WITH_AS(usable_preferences({low, edge}), doctest::Contains("no usable preferences"), ValidationError);
}

TEST_CASE("ranking loss closed forms") {
    const std::vector<double> zero = {0.0, 0.0, 0.0};
    CHECK(std::abs(ranking_loss_from_margins(zero) - std::log(2.0)) < 1e-9);
    const std::vector<double> m = {1.0, -2.0};
    const double want = 0.5 * (std::log(1.0 + std::exp(-1.0)) + std::log(1.0 + std::exp(2.0)));
    CHECK(ranking_loss_from_margins(m) == doctest::Approx(want).epsilon(1e-12));
    const std::vector<double> big = {800.0, -800.0};
    CHECK(ranking_loss_from_margins(big) == doctest::Approx(400.0).epsilon(1e-12));
}

TEST_CASE("a reward model with a silent head gives ln 2") {
    auto w = toy::make_world(2, 5);
    RewardModel model(*w->dec, 1);
    for (ad::Parameter *p : model.params()) {
        if (p->name == "head_w") {
            p->value.setZero();
        }
    }
    const auto data = planted::ranking_data(*w->dec, w->data, 1, 3);
    for (const RankingExample &ex : data) {
        CHECK(std::abs(pairwise_ranking_loss(model, ex) - std::log(2.0)) < 1e-9);
    }
}

TEST_CASE("ranking loss gradients agree with finite differences") {
    auto w = toy::make_world(3, 6, 8, 1);
    RewardModel model(*w->dec, 2);
    for (ad::Parameter *p : model.params()) {
        if (p->name == "head_w") {
            p->value *= 30.0; // keep the margins away from zero so the check is not trivial
        }
    }
    const auto data = planted::ranking_data(*w->dec, w->data, 1, 4);
    for (std::size_t i = 0; i < data.size(); ++i) {
        auto value = [&] {
            ad::Tape tape;
            return pairwise_ranking_loss_var(tape, model, data[i]).scalar();
        };
        fd::Result r = fd::check(model.params(), value, [&] { pairwise_ranking_loss(model, data[i]); }, 300, i);
        CHECK(r.rel_error < 1e-4);
        CHECK(r.analytic_norm > 0.0);
    }
}

TEST_CASE("pairwise accuracy counts correctly ordered pairs") {
    FixedScorer s;
    s.table[{3}] = 0.0;
    s.table[{4}] = 2.0;
    s.table[{5}] = 1.0;
    RankingExample ex;
    ex.ordered = {{3}, {4}, {5}};
    // pairs (4>3) ok, (5>3) ok, (5>4) wrong
    CHECK(pairwise_accuracy(s, {ex}) == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("the reward model learns a planted preference") {
    auto w = toy::make_world(8, 7, 16, 1);
    const auto train = planted::ranking_data(*w->dec, w->data, 4, 1);
    const auto held_out = planted::ranking_data(*w->dec, w->data, 2, 2);
    RewardModel model(*w->dec, 3);
    const double before = pairwise_accuracy(model, held_out);
    RewardTrainConfig cfg;
    cfg.steps = 150;
    train_reward(train, model, cfg);
    const double after = pairwise_accuracy(model, held_out);
    MESSAGE("held-out accuracy " << before << " -> " << after);
    CHECK(after > 0.9);
    RewardModel copy = RewardModel::from_blob(model.to_blob());
    CHECK(copy.score(held_out[0].cond, held_out[0].ordered[1]) ==
          model.score(held_out[0].cond, held_out[0].ordered[1]));
    CHECK_THROWS_AS(train_reward({}, model, cfg), ValidationError);
}
