#include "doctest.h"
#include "fd.hpp"
#include "toy_sft.hpp"

#include "memecap/decoder.hpp"
#include "memecap/error.hpp"

#include <cmath>
#include <set>

using namespace memecap;

namespace {

RowVec log_softmax_row(const RowVec &z) {
    const double m = z.maxCoeff();
    double s = 0.0;
    for (Eigen::Index i = 0; i < z.size(); ++i) {
        s += std::exp(z(i) - m);
    }
    return (z.array() - m - std::log(s)).matrix();
}

} // namespace

TEST_CASE("vocabulary specials and round trip") {
    Vocabulary v = Vocabulary::build({{"a", "b"}, {"b", "c"}});
    CHECK(v.size() == 6);
    CHECK(v.id("a") == 3);
    CHECK(v.id("zzz") == Vocabulary::unk);
    const std::vector<std::string> toks = {"c", "a"};
    CHECK(v.decode(v.encode(toks)) == toks);
    CHECK(Vocabulary::from_tokens(v.tokens()).tokens() == v.tokens());
}

TEST_CASE("cached logits equal the taped forward pass") {
    auto w = toy::make_world(4, 3, 16, 2);
    for (const SftExample &ex : w->data) {
        ad::Tape tape;
        const Mat taped = w->dec->logits(tape, ex.cond, ex.caption).value();
        const Mat cached = w->dec->logits_cached(ex.cond, ex.caption);
        REQUIRE(taped.rows() == static_cast<Eigen::Index>(ex.caption.size()) + 1);
        // masked entries are huge negatives; compare the live ones
        for (Eigen::Index t = 0; t < taped.rows(); ++t) {
            for (Eigen::Index v = Vocabulary::num_special; v < taped.cols(); ++v) {
                CHECK(std::abs(taped(t, v) - cached(t, v)) < 1e-9);
            }
        }
    }
}

TEST_CASE("sequence log-probability is the sum of picked log-softmax entries") {
    auto w = toy::make_world(3, 5);
    for (const SftExample &ex : w->data) {
        const Mat z = w->dec->logits_cached(ex.cond, ex.caption);
        double want = 0.0;
        for (std::size_t t = 0; t < ex.caption.size(); ++t) {
            want += log_softmax_row(z.row(static_cast<Eigen::Index>(t)))(ex.caption[t]);
        }
        want += log_softmax_row(z.row(static_cast<Eigen::Index>(ex.caption.size())))(Vocabulary::eos);
        ad::Tape tape;
        CHECK(w->dec->sequence_log_prob(tape, ex.cond, ex.caption).scalar() == doctest::Approx(want).epsilon(1e-10));
        CHECK(w->dec->sequence_log_prob_cached(ex.cond, ex.caption) == doctest::Approx(want).epsilon(1e-10));
    }
}

TEST_CASE("masks forbid specials and an immediate EOS") {
    auto w = toy::make_world(2);
    const RowVec m0 = w->dec->mask_row(0), m1 = w->dec->mask_row(1);
    CHECK(m0(Vocabulary::unk) < -1e6);
    CHECK(m0(Vocabulary::bos) < -1e6);
    CHECK(m0(Vocabulary::eos) < -1e6);
    CHECK(m1(Vocabulary::eos) == 0.0);
    CHECK(m1(Vocabulary::bos) < -1e6);
    CHECK(m1.tail(m1.size() - Vocabulary::num_special).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("generation is deterministic and well formed") {
    auto w = toy::make_world(4, 9);
    const Conditioning &cond = w->data[0].cond;
    const std::vector<int> g1 = w->dec->generate(cond, {0.0, 1});
    const std::vector<int> g2 = w->dec->generate(cond, {0.0, 99});
    CHECK(g1 == g2);
    CHECK(!g1.empty());
    std::set<std::vector<int>> samples;
    for (std::uint64_t s = 0; s < 20; ++s) {
        const std::vector<int> a = w->dec->generate(cond, {1.3, s});
        CHECK(a == w->dec->generate(cond, {1.3, s}));
        CHECK(!a.empty());
        CHECK(static_cast<int>(a.size()) <= w->dec->config().max_caption);
        for (int id : a) {
            CHECK(id >= Vocabulary::num_special);
        }
        samples.insert(a);
    }
    CHECK(samples.size() > 1);
    CHECK_THROWS_AS(w->dec->generate(cond, {-1.0, 0}), ValidationError);
}

TEST_CASE("greedy picks the arg-max of the cached logits") {
    auto w = toy::make_world(3, 13);
    const Conditioning &cond = w->data[1].cond;
    const std::vector<int> g = w->dec->generate(cond, {0.0, 0});
    const Mat z = w->dec->logits_cached(cond, g);
    for (std::size_t t = 0; t < g.size(); ++t) {
        Eigen::Index best = 0;
        z.row(static_cast<Eigen::Index>(t)).maxCoeff(&best);
        CHECK(best == g[t]);
    }
}

TEST_CASE("decoder gradients agree with finite differences") {
    auto w = toy::make_world(3, 17, 8, 2);
    for (std::size_t i = 0; i < w->data.size(); ++i) {
        const SftExample &ex = w->data[i];
        auto value = [&] {
            ad::Tape tape;
            return w->dec->sequence_log_prob(tape, ex.cond, ex.caption).scalar();
        };
        auto analytic = [&] {
            ad::Tape tape;
            ad::Var lp = w->dec->sequence_log_prob(tape, ex.cond, ex.caption);
            tape.backward(lp);
        };
        fd::Result r = fd::check(w->dec->params(), value, analytic, 300, i);
        CHECK(r.rel_error < 1e-4);
        CHECK(r.analytic_norm > 0.0);
    }
}

TEST_CASE("five records are reproduced after overfitting") {
    auto w = toy::make_world(5, 21, 32, 2);
    SftTrainConfig cfg;
    cfg.epochs = 120;
    cfg.batch_size = 5;
    train_sft(w->data, *w->dec, w->ctx, SftWeights{}, cfg);
    for (const SftExample &ex : w->data) {
        CHECK(w->dec->generate(ex.cond, {0.0, 0}) == ex.caption);
    }
}

TEST_CASE("decoder survives a blob round trip") {
    auto w = toy::make_world(2, 4);
    CaptionDecoder copy = CaptionDecoder::from_blob(w->dec->to_blob());
    const SftExample &ex = w->data[0];
    CHECK(copy.logits_cached(ex.cond, ex.caption) == w->dec->logits_cached(ex.cond, ex.caption));
    CHECK(copy.vocab().tokens() == w->dec->vocab().tokens());
}

TEST_CASE("caption and conditioning errors") {
    auto w = toy::make_world(2);
    const std::vector<int> empty;
    CHECK_THROWS_AS(check_caption(*w->dec, empty), ValidationError);
    const std::vector<int> special = {Vocabulary::bos};
    CHECK_THROWS_AS(check_caption(*w->dec, special), ValidationError);
    const std::vector<int> too_long(static_cast<std::size_t>(w->dec->config().max_caption + 1), 3);
    CHECK_THROWS_AS(check_caption(*w->dec, too_long), ValidationError);
    Conditioning bad = w->data[0].cond;
    bad.image = RowVec::Zero(3);
    CHECK_THROWS(w->dec->generate(bad, {}));
}
