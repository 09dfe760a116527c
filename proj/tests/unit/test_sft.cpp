#include "doctest.h"
#include "fd.hpp"
#include "toy_sft.hpp"

#include "memecap/error.hpp"
#include "memecap/sft.hpp"

#include <cmath>

using namespace memecap;

namespace {

double kl2(double p, double q) { return p * std::log(p / q) + (1.0 - p) * std::log((1.0 - p) / (1.0 - q)); }

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// KL between softmax(a, b) and softmax(b, a), spelled out.
double pair_kl(double a, double b) { return kl2(sigmoid(a - b), sigmoid(b - a)); }

} // namespace

TEST_CASE("two-way softmax") {
    auto [p, q] = binary_softmax_pair(1.0, 0.0);
    CHECK(p == doctest::Approx(0.7310585786).epsilon(1e-9));
    CHECK(q == doctest::Approx(0.2689414214).epsilon(1e-9));
    auto [a, b] = binary_softmax_pair(800.0, -800.0);
    CHECK(a == 1.0);
    CHECK(b >= 0.0);
    CHECK(b < 1e-300);
}

TEST_CASE("two-point KL") {
    CHECK(two_point_kl(0.7, 0.4) == doctest::Approx(0.7 * std::log(7.0 / 4.0) + 0.3 * std::log(0.5)).epsilon(1e-12));
    CHECK(two_point_kl(0.3, 0.3) == 0.0);
    CHECK(two_point_kl(0.0, 0.5) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(two_point_kl(0.9, 0.2) > 0.0);
}

TEST_CASE("alignment KL terms against a spelled-out oracle") {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        SimilarityPrior s;
        s.global = std::uniform_real_distribution<double>(-1, 1)(rng);
        s.pred_global = std::uniform_real_distribution<double>(-1, 1)(rng);
        s.tokens = gen::randn(3, 4, rng).cwiseAbs();
        s.pred_tokens = gen::randn(3, 4, rng).cwiseAbs();
        const SftWeights w{0.4, 0.2, 0.4};
        auto [lg, lt] = kl_alignment_losses(s, w);
        double want_t = 0.0;
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 4; ++j) {
                want_t += pair_kl(s.tokens(i, j), s.pred_tokens(i, j));
            }
        }
        CHECK(lg == doctest::Approx(0.2 * pair_kl(s.global, s.pred_global)).epsilon(1e-10));
        CHECK(lt == doctest::Approx(0.4 * want_t).epsilon(1e-10));
    }
}

TEST_CASE("identical prior and prediction give zero KL") {
    std::mt19937_64 rng(6);
    SimilarityPrior s;
    s.global = s.pred_global = 0.37;
    s.tokens = gen::randn(4, 5, rng);
    s.pred_tokens = s.tokens;
    auto [lg, lt] = kl_alignment_losses(s, SftWeights{});
    CHECK(lg == 0.0);
    CHECK(lt == 0.0);
    s.pred_tokens = Mat::Zero(2, 2);
    CHECK_THROWS_AS(kl_alignment_losses(s, SftWeights{}), ShapeError);
}

TEST_CASE("weights are validated") {
    CHECK_THROWS_AS((SftWeights{-0.1, 0.2, 0.4}.validate()), ValidationError);
    CHECK_THROWS_AS((SftWeights{0.4, NAN, 0.4}.validate()), ValidationError);
    CHECK_NOTHROW((SftWeights{0.0, 0.0, 0.0}.validate()));
}

TEST_CASE("the loss is linear in its weights") {
    auto w = toy::make_world(6, 2);
    const SftWeights base{0.4, 0.2, 0.4}, twice{0.8, 0.4, 0.8};
    const SftLossValues a = sft_evaluate(w->data, *w->dec, w->ctx, base);
    const SftLossValues b = sft_evaluate(w->data, *w->dec, w->ctx, twice);
    CHECK(b.total == doctest::Approx(2.0 * a.total).epsilon(1e-12));
    CHECK(b.ori == doctest::Approx(a.ori).epsilon(1e-12));
    CHECK(a.total == doctest::Approx(0.4 * a.ori + a.l_g + a.l_t).epsilon(1e-12));
    CHECK(a.l_g > 0.0);
    CHECK(a.l_t > 0.0);
}

TEST_CASE("with the KL weights at zero the loss is the mean token NLL") {
    auto w = toy::make_world(5, 8);
    double nll = 0.0;
    int tokens = 0;
    for (const SftExample &ex : w->data) {
        nll -= w->dec->sequence_log_prob_cached(ex.cond, ex.caption);
        tokens += static_cast<int>(ex.caption.size()) + 1; // EOS
    }
    const SftLossValues v = sft_evaluate(w->data, *w->dec, w->ctx, SftWeights{1.0, 0.0, 0.0});
    CHECK(v.total == doctest::Approx(nll / tokens).epsilon(1e-10));
    CHECK(v.l_g == 0.0);
    CHECK(v.l_t == 0.0);
}

TEST_CASE("SFT gradients agree with finite differences") {
    SUBCASE("decoder parameters") {
        auto w = toy::make_world(3, 12, 8, 1);
        const SftWeights wt{0.4, 0.2, 0.4};
        fd::Result r = fd::check(
            w->dec->params(), [&] { return sft_evaluate(w->data, *w->dec, w->ctx, wt).total; },
            [&] { sft_loss(w->data, *w->dec, w->ctx, wt); }, 300, 3);
        CHECK(r.rel_error < 1e-4);
        CHECK(r.analytic_norm > 0.0);
    }
    SUBCASE("alignment parameters when they train jointly") {
        auto w = toy::make_world(3, 14, 8, 1, 2);
        w->ctx.train_align = true;
        const SftWeights wt{0.4, 0.2, 0.4};
        fd::Result r = fd::check(
            w->align.params(), [&] { return sft_evaluate(w->data, *w->dec, w->ctx, wt).total; },
            [&] { sft_loss(w->data, *w->dec, w->ctx, wt); }, 300, 4);
        CHECK(r.rel_error < 1e-4);
        CHECK(r.analytic_norm > 0.0);
    }
    SUBCASE("trainable weights") {
        auto w = toy::make_world(3, 16, 8, 1);
        ad::Parameter lambda("lambda", (Mat(1, 3) << 0.4, 0.2, 0.4).finished());
        auto value = [&] {
            const SftWeights cur{lambda.value(0, 0), lambda.value(0, 1), lambda.value(0, 2)};
            return sft_evaluate(w->data, *w->dec, w->ctx, cur).total;
        };
        fd::Result r = fd::check(
            {&lambda}, value, [&] { sft_loss(w->data, *w->dec, w->ctx, SftWeights{}, &lambda); }, 3, 5);
        CHECK(r.rel_error < 1e-4);
    }
}

TEST_CASE("a caption is perfectly similar to itself") {
    auto w = toy::make_world(2, 3);
    const std::vector<std::string> cap = toy::captions()[0];
    auto [scalar, tokens] = predicted_similarity(cap, cap, *w->text, w->data[0].subimages, w->align);
    CHECK(scalar == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(tokens.rows() == 4);
    CHECK(tokens.cols() == static_cast<Eigen::Index>(cap.size()));
    const std::vector<std::string> none;
    CHECK_THROWS_AS(predicted_similarity(none, cap, *w->text, w->data[0].subimages, w->align), ValidationError);
}

TEST_CASE("the align view pools areas with attention weights") {
    auto w = toy::make_world(2, 5, 16, 1, 2);
    const SftExample &ex = w->data[1];
    const TokenFeatures tf = w->text->encode(toy::captions()[1]);
    const AlignView v = align_view(ex.subimages, tf, w->align);
    CHECK(v.areas.rows() == 8);
    CHECK(v.sub_images == 2);
    CHECK(std::abs(v.global) <= 1.0 + 1e-12);
    // pooled must be a convex combination of projected areas
    const RowVec lo = v.areas.colwise().minCoeff(), hi = v.areas.colwise().maxCoeff();
    for (Eigen::Index c = 0; c < v.pooled.size(); ++c) {
        CHECK(v.pooled(c) >= lo(c) - 1e-12);
        CHECK(v.pooled(c) <= hi(c) + 1e-12);
    }
}

TEST_CASE("training over 20 epochs at least halves the loss") {
    auto w = toy::make_world(32, 31, 32, 2);
    SftTrainConfig cfg;
    cfg.epochs = 20;
    int calls = 0;
    const std::vector<SftLogEntry> log =
        train_sft(w->data, *w->dec, w->ctx, SftWeights{}, cfg, [&](const SftLogEntry &, const CaptionDecoder &) { ++calls; });
    REQUIRE(log.size() == 21);
    CHECK(calls == 20);
    CHECK(log.back().l_sft <= 0.5 * log.front().l_sft);
}

TEST_CASE("trainable weights stay non-negative") {
    auto w = toy::make_world(6, 33);
    SftTrainConfig cfg;
    cfg.epochs = 5;
    cfg.trainable_weights = true;
    const std::vector<SftLogEntry> log = train_sft(w->data, *w->dec, w->ctx, SftWeights{}, cfg);
    for (const SftLogEntry &e : log) {
        CHECK(e.weights.ori >= 0.0);
        CHECK(e.weights.g >= 0.0);
        CHECK(e.weights.t >= 0.0);
    }
}

TEST_CASE("training argument errors") {
    auto w = toy::make_world(2);
    SftTrainConfig cfg;
    cfg.epochs = 0;
    CHECK_THROWS_AS(train_sft(w->data, *w->dec, w->ctx, SftWeights{}, cfg), ValidationError);
    CHECK_THROWS_AS(train_sft({}, *w->dec, w->ctx, SftWeights{}, SftTrainConfig{}), ValidationError);
    const std::vector<SftExample> none;
    CHECK_THROWS_AS(sft_evaluate(none, *w->dec, w->ctx, SftWeights{}), ValidationError);
}
