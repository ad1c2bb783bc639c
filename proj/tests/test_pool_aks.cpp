#include <algorithm>
#include <bit>
#include <set>

#include "adeid/pool_aks.hpp"
#include "doctest.h"

using namespace adeid;
using namespace adeid::aks;

namespace {

PoolEntry entry(const std::string& person, int sub, AspectBits bits, GradeClass c = GradeClass::B) {
  return {"d-" + person, person, sub, person + "#" + std::to_string(sub), {1.0f, 0.0f}, bits, c};
}

AspectPool random_pool(Rng& rng, int t, std::size_t n, int persons) {
  std::vector<PoolEntry> entries;
  std::map<std::string, int> next_sub;
  for (std::size_t i = 0; i < n; ++i) {
    const std::string p = "p" + std::to_string(rng.index(static_cast<std::size_t>(persons)));
    const AspectBits bits = rng.next() & ((AspectBits{1} << t) - 1);
    entries.push_back(entry(p, next_sub[p]++, bits, class_from_index(static_cast<int>(rng.index(4)))));
  }
  return AspectPool(t, 2, std::move(entries));
}

// Independent scan: minimal radius and its ball, straight from the entry list.
struct Scan {
  int radius = -1;
  std::set<std::string> persons;
  std::set<std::size_t> entries;
};

Scan brute_force(const AspectPool& pool, AspectBits bits, std::optional<GradeClass> cls, const std::string& owner, int k) {
  for (int r = 0; r <= pool.t(); ++r) {
    Scan s;
    for (std::size_t i = 0; i < pool.entries().size(); ++i) {
      const auto& e = pool.entries()[i];
      if (e.person_id == owner) continue;
      if (cls && e.predicted_class != *cls) continue;
      int d = 0;
      for (int b = 0; b < pool.t(); ++b) d += (((bits ^ e.bits) >> b) & 1) ? 1 : 0;
      if (d > r) continue;
      s.persons.insert(e.person_id);
      s.entries.insert(i);
    }
    if (static_cast<int>(s.persons.size()) >= k - 1) {
      s.radius = r;
      return s;
    }
  }
  return {};
}

extraction::ExtractionResult result_for(const std::string& person, std::vector<std::pair<int, AspectBits>> kept,
                                        GradeClass c = GradeClass::B) {
  extraction::ExtractionResult r;
  r.doc_id = "d-" + person;
  r.person_id = person;
  r.t = 4;
  r.k_len = 10;
  r.predicted_class = c;
  for (auto [id, bits] : kept) r.kept.push_back({id, bits, 0.5});
  return r;
}

}  // namespace

TEST_CASE("hamming distance") {
  CHECK(hamming(0b1010, 0b1010) == 0);
  CHECK(hamming(0b1010, 0b1001) == 2);
  CHECK(hamming(0, ~AspectBits{0}) == 64);
}

TEST_CASE("pool construction") {
  SensitiveDocument doc{"d0", "p0", {}};
  for (int i = 0; i < 5; ++i) doc.sub_sentences.push_back({i, "s" + std::to_string(i), {0.0f, 1.0f}, Source::Sensitive});
  EmbeddedCorpus corpus;
  corpus.dim = 2;
  corpus.documents = {doc};
  auto r = result_for("p0", {{0, 0b1}, {2, 0b11}, {4, 0b111}});
  r.doc_id = "d0";
  const auto pool = build_pool(corpus, {r});
  CHECK(pool.size() == 3);
  CHECK(pool.entries()[1].sub_id == 2);
  CHECK(pool.entries()[1].bits == 0b11);
  CHECK(pool.entries()[1].text == "s2");
  std::size_t indexed = 0;
  for (const auto& [key, ids] : pool.index()) indexed += ids.size();
  CHECK(indexed == 3);

  r.kept.clear();
  CHECK_THROWS_AS(build_pool(corpus, {r}), Error);
  CHECK_THROWS_AS(AspectPool(4, 2, {entry("a", 0, 1), entry("a", 0, 2)}), Error);
  CHECK_THROWS_AS(AspectPool(4, 2, {entry("a", 0, 0x10)}), Error);
}

TEST_CASE("gather_candidates examples") {
  const AspectPool pool(4, 2,
                        {entry("owner", 0, 0b1010), entry("a", 0, 0b1010), entry("b", 0, 0b1010), entry("c", 0, 0b1001),
                         entry("d", 0, 0b0101, GradeClass::A)});
  auto c = gather_candidates(pool, 0b1010, std::nullopt, "owner", 3);
  CHECK(c.radius == 0);
  CHECK(c.persons == std::vector<std::string>{"a", "b"});

  c = gather_candidates(pool, 0b1010, std::nullopt, "owner", 4);
  CHECK(c.radius == 2);  // 1001 is two flips away
  CHECK(c.persons.size() == 3);

  c = gather_candidates(pool, 0b1010, std::nullopt, "owner", 5);
  CHECK(c.radius == 4);
  CHECK_THROWS_AS(gather_candidates(pool, 0b1010, GradeClass::B, "owner", 5), Error);

  const AspectPool only_owner(4, 2, {entry("owner", 0, 1), entry("owner", 1, 2)});
  try {
    gather_candidates(only_owner, 1, std::nullopt, "owner", 2);
    FAIL("expected anonymity-infeasible");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::AnonymityInfeasible);
  }
  CHECK_THROWS_AS(gather_candidates(pool, 1, std::nullopt, "owner", 1), Error);
}

TEST_CASE("radius is minimal against a brute-force scan") {
  Rng rng(71);
  for (int trial = 0; trial < 60; ++trial) {
    const int t = 2 + static_cast<int>(rng.index(9));
    const auto pool = random_pool(rng, t, 20 + rng.index(400), 5 + static_cast<int>(rng.index(40)));
    const int k = 2 + static_cast<int>(rng.index(6));
    const AspectBits bits = rng.next() & ((AspectBits{1} << t) - 1);
    const std::string owner = "p" + std::to_string(rng.index(5));
    const std::optional<GradeClass> cls =
        rng.bernoulli(0.5) ? std::optional<GradeClass>(class_from_index(static_cast<int>(rng.index(4)))) : std::nullopt;
    const auto expect = brute_force(pool, bits, cls, owner, k);
    if (expect.radius < 0) {
      CHECK_THROWS_AS(gather_candidates(pool, bits, cls, owner, k), Error);
      continue;
    }
    const auto got = gather_candidates(pool, bits, cls, owner, k);
    CHECK(got.radius == expect.radius);
    CHECK(std::set<std::string>(got.persons.begin(), got.persons.end()) == expect.persons);
    CHECK(std::set<std::size_t>(got.entries.begin(), got.entries.end()) == expect.entries);
  }
}

TEST_CASE("substitution respects k-anonymity and never leaks the owner") {
  Rng rng(5);
  const auto pool = random_pool(rng, 6, 600, 40);
  for (int trial = 0; trial < 30; ++trial) {
    const std::string owner = "p" + std::to_string(rng.index(40));
    std::vector<std::pair<int, AspectBits>> kept;
    for (int i = 0; i < 4; ++i) kept.push_back({i * 3, rng.next() & 0x3f});
    const auto r = result_for(owner, kept, class_from_index(static_cast<int>(rng.index(4))));
    const int k = 5;
    const auto s = substitute_document(r, pool, k, ClassMode::Relax, 42);
    REQUIRE(s.replacements.size() == kept.size());
    for (std::size_t i = 0; i < kept.size(); ++i) {
      const auto& rep = s.replacements[i];
      CHECK(rep.original_id == kept[i].first);
      CHECK(rep.entry_person != owner);
      CHECK(pool.entries()[rep.entry].person_id == rep.entry_person);
      CHECK(rep.q_size >= static_cast<std::size_t>(k - 1));
      CHECK(std::count(rep.candidate_persons.begin(), rep.candidate_persons.end(), owner) == 0);
      CHECK(std::count(rep.candidate_persons.begin(), rep.candidate_persons.end(), rep.entry_person) == 1);
      CHECK(hamming(pool.entries()[rep.entry].bits, kept[i].second) <= rep.radius);
      const auto scan = brute_force(pool, kept[i].second, rep.relaxed ? std::nullopt : std::optional(r.predicted_class), owner, k);
      CHECK(scan.radius == rep.radius);
      CHECK(scan.persons == std::set<std::string>(rep.candidate_persons.begin(), rep.candidate_persons.end()));
    }
    CHECK(s == substitute_document(r, pool, k, ClassMode::Relax, 42));
  }
}

TEST_CASE("class modes") {
  const AspectPool pool(4, 2,
                        {entry("a", 0, 0b1, GradeClass::A), entry("b", 0, 0b1, GradeClass::B),
                         entry("c", 0, 0b1, GradeClass::B)});
  const auto r = result_for("z", {{0, 0b1}}, GradeClass::A);
  CHECK_THROWS_AS(substitute_document(r, pool, 3, ClassMode::On, 1), Error);
  const auto relaxed = substitute_document(r, pool, 3, ClassMode::Relax, 1);
  CHECK(relaxed.replacements[0].relaxed);
  const auto off = substitute_document(r, pool, 3, ClassMode::Off, 1);
  CHECK_FALSE(off.replacements[0].relaxed);
  CHECK(off.replacements[0].q_size == 3);

  const auto forced = substitute_document(r, pool, 2, ClassMode::On, 9);
  CHECK(forced.replacements[0].entry_person == "a");
  CHECK(forced.text == "a#0");
  CHECK(class_mode_from_string("relax") == ClassMode::Relax);
  CHECK_THROWS_AS(class_mode_from_string("maybe"), Error);
}

TEST_CASE("reuse of an entry is flagged") {
  const AspectPool pool(4, 2, {entry("a", 0, 0b1)});
  const auto s = substitute_document(result_for("z", {{0, 0b1}, {1, 0b1}}), pool, 2, ClassMode::On, 3);
  CHECK_FALSE(s.replacements[0].reused);
  CHECK(s.replacements[1].reused);
  CHECK(s.text == "a#0 a#0");
}

TEST_CASE("pool and summary files round trip") {
  Rng rng(9);
  const auto pool = random_pool(rng, 10, 50, 8);
  const auto bytes = serialize_pool(pool, R"({"seed":1})");
  const auto back = parse_pool(bytes);
  CHECK(back == pool);
  CHECK(back.index() == pool.index());
  CHECK(serialize_pool(back, R"({"seed":1})") == bytes);

  auto corrupted = bytes;
  corrupted[corrupted.size() - 3] ^= 0x40;
  CHECK_THROWS_AS(parse_pool(corrupted), Error);
  auto future = bytes;
  future[4] = 2;
  try {
    parse_pool(future);
    FAIL("expected version mismatch");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::VersionMismatch);
  }
  const auto sidecar = pool_sidecar_jsonl(pool);
  CHECK(std::count(sidecar.begin(), sidecar.end(), '\n') == 50);

  const auto r = result_for("p0", {{0, 0b1}, {1, 0b110}});
  const auto summaries = substitute_corpus({r}, pool, 2, ClassMode::Relax, 4);
  const std::string header = R"({"kind":"header","format":"summaries","version":1})";
  const auto text = serialize_summaries(summaries, pool, header);
  CHECK(parse_summaries(text) == summaries);
  CHECK_THROWS_AS(parse_summaries("{}\n"), Error);
}

TEST_CASE("pool size on the default synthetic corpus") {
  SynthConfig s;
  const auto corpus = synthesize_corpus(s);
  xalign::XAlignConfig c;
  const auto trained = xalign::train(corpus, c);
  const auto pool = build_pool(corpus, trained.params, c, {1.0, c.t / 2});
  const double reference = 0.06 * 6000;
  CHECK(static_cast<double>(pool.size()) >= 0.5 * reference);
  CHECK(static_cast<double>(pool.size()) <= 3.0 * reference);
  const auto results = extraction::extract_corpus(corpus, trained.params, c, {1.0, c.t / 2});
  std::size_t at = 0;
  for (const auto& r : results) {
    for (const auto& k : r.kept) {
      REQUIRE(at < pool.size());
      CHECK(pool.entries()[at].bits == k.bits);
      CHECK(pool.entries()[at].predicted_class == r.predicted_class);
      ++at;
    }
  }
}
