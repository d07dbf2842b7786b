// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <set>

#include "ffprune/util.hpp"
#include "test_util.hpp"

using namespace ffprune;

TEST_CASE("sub_seed is deterministic and name-sensitive") {
    CHECK(sub_seed(1, "agent") == sub_seed(1, "agent"));
    CHECK(sub_seed(1, "agent") != sub_seed(2, "agent"));
    CHECK(sub_seed(1, "agent") != sub_seed(1, "episodes"));
    CHECK(sub_seed(1, "agent", 0) != sub_seed(1, "agent", 1));
}

TEST_CASE("sub_seed streams do not collide on a small sample") {
    std::set<std::uint64_t> seen;
    for (std::uint64_t master = 0; master < 8; ++master)
        for (std::uint64_t idx = 0; idx < 64; ++idx) {
            seen.insert(sub_seed(master, "a", idx));
            seen.insert(sub_seed(master, "b", idx));
        }
    CHECK(seen.size() == 8 * 64 * 2);
}

TEST_CASE("make_rng reproduces streams") {
    auto a = make_rng(7, "x");
    auto b = make_rng(7, "x");
    for (int i = 0; i < 10; ++i) CHECK(a() == b());
}

TEST_CASE("atomic_write_file writes exactly the payload") {
    const auto p = testutil::tmp_path("atomic.txt");
    atomic_write_file(p, "hello\nworld\n");
    std::ifstream in(p, std::ios::binary);
    std::string got((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    CHECK(got == "hello\nworld\n");
    atomic_write_file(p, "second");  // overwrite
    std::ifstream in2(p, std::ios::binary);
    std::string got2((std::istreambuf_iterator<char>(in2)), std::istreambuf_iterator<char>());
    CHECK(got2 == "second");
}

TEST_CASE("thread_budget is at least one") { CHECK(thread_budget() >= 1); }
