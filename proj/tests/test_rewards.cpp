#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "taskvec/rewards.hpp"

using taskvec::RewardSpec;

namespace {

std::string random_short_string(oracles::TestRng& rng) {
    static const std::string alphabet = "abcdefgh ";
    std::string s;
    const std::size_t len = rng.integer(0, 10);
    for (std::size_t i = 0; i < len; ++i) s.push_back(alphabet[rng.integer(0, alphabet.size() - 1)]);
    return s;
}

}  // namespace

TEST_CASE("extract_boxed", "[rewards]") {
    CHECK(taskvec::extract_boxed("A = \\boxed{42}") == "42");
    CHECK_FALSE(taskvec::extract_boxed("no box here").has_value());
    CHECK(taskvec::extract_boxed("\\boxed{\\frac{1}{2}}") == "\\frac{1}{2}");

    // the last balanced occurrence wins
    CHECK(taskvec::extract_boxed("\\boxed{1} then \\boxed{2}") == "2");
    CHECK(taskvec::extract_boxed("\\boxed{1} then \\boxed{oops") == "1");
    CHECK_FALSE(taskvec::extract_boxed("\\boxed{unbalanced{").has_value());
    CHECK(taskvec::extract_boxed("\\boxed{}") == "");
    CHECK(taskvec::extract_boxed("x \\boxed{a \\boxed{b}} y") == "b");
}

TEST_CASE("exact match reward", "[rewards]") {
    CHECK(taskvec::exact_match_reward("8", "8") == 1.0);
    CHECK(taskvec::exact_match_reward("  8 ", "8") == 1.0);
    CHECK(taskvec::exact_match_reward("65", "40") == 0.0);
    CHECK(taskvec::exact_match_reward("Two  Words", "two words") == 1.0);

    RewardSpec raw;
    raw.normalize = false;
    CHECK(taskvec::exact_match_reward("  8 ", "8", raw) == 0.0);
    CHECK(taskvec::exact_match_reward("8", "8", raw) == 1.0);
}

TEST_CASE("levenshtein distance", "[rewards]") {
    CHECK(taskvec::levenshtein_distance("", "abc") == 3);
    CHECK(taskvec::levenshtein_distance("kitten", "sitting") == 3);
    CHECK(taskvec::levenshtein_distance("abc", "abc") == 0);
    // multi-byte characters count as single edits
    CHECK(taskvec::levenshtein_distance("h\xC3\xA9llo", "hello") == 1);
    CHECK(taskvec::levenshtein_distance("h\xC3\xA9llo", "h\xC3\xA9llo") == 0);
}

TEST_CASE("levenshtein metric laws against the DP oracle", "[rewards]") {
    oracles::TestRng rng(61);
    for (int trial = 0; trial < 300; ++trial) {
        const std::string a = random_short_string(rng);
        const std::string b = random_short_string(rng);
        const std::string c = random_short_string(rng);

        const std::size_t dab = taskvec::levenshtein_distance(a, b);
        REQUIRE(dab == oracles::dp_levenshtein(taskvec::detail::utf8_decode(a),
                                               taskvec::detail::utf8_decode(b)));
        REQUIRE(taskvec::levenshtein_distance(a, a) == 0);
        REQUIRE(dab == taskvec::levenshtein_distance(b, a));
        REQUIRE(dab <=
                taskvec::levenshtein_distance(a, c) + taskvec::levenshtein_distance(c, b));
    }
}

TEST_CASE("levenshtein reward", "[rewards]") {
    CHECK(taskvec::levenshtein_reward("same", "same") == 1.0);
    CHECK(taskvec::levenshtein_reward("kitten", "sitting") ==
          Catch::Approx(1.0 - 3.0 / 7.0).epsilon(1e-12));
    CHECK(taskvec::levenshtein_reward("abcd", "wxyz") == 0.0);
    CHECK(taskvec::levenshtein_reward("", "") == 1.0);
    CHECK(taskvec::levenshtein_reward("", "xy") == 0.0);

    oracles::TestRng rng(67);
    for (int trial = 0; trial < 300; ++trial) {
        const std::string a = random_short_string(rng);
        const std::string b = random_short_string(rng);
        const double r = taskvec::levenshtein_reward(a, b);
        REQUIRE(r >= 0.0);
        REQUIRE(r <= 1.0);
        if (taskvec::exact_match_reward(a, b) == 1.0) REQUIRE(r == 1.0);
        if (r == 1.0) REQUIRE(taskvec::exact_match_reward(a, b) == 1.0);
    }
}

TEST_CASE("normalize_answer", "[rewards]") {
    CHECK(taskvec::normalize_answer("  A  b\tC ") == "a b c");
    CHECK(taskvec::normalize_answer("") == "");
    CHECK(taskvec::normalize_answer(" \t\n ") == "");
    CHECK(taskvec::normalize_answer("one") == "one");
}
