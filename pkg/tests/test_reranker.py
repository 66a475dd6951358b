import itertools
import math

import numpy as np
import pytest

from clirpipe.corpus import Document, Topic
from clirpipe.errors import ConfigError
from clirpipe.oracle_bridge import MockOracle, MockOracleSpec, Snippet
from clirpipe.reranker import (RerankConfig, _heapsort, heapsort_rerank, pointwise_prob,
                               rerank_listwise, rerank_listwise_once, rerank_pointwise,
                               rerank_tournament, select_best_passage, stitch_scores)
from clirpipe.runs import Run

from helpers import simulate_failed_heapsort, snippets

TOPIC = Topic("t1", "title", "description")


def truthful(scores, failure="never"):
    return MockOracle(MockOracleSpec(dict(scores), failure))


def ids(items):
    return [s.passage_id for s in items]


def true_order(items, hidden):
    return sorted(ids(items), key=lambda p: -hidden[p])


# ---------------------------------------------------------------------------
# pointwise probability and stitching
# ---------------------------------------------------------------------------

def test_pointwise_prob_cases():
    assert pointwise_prob(0.3, 0.3) == 0.5
    assert pointwise_prob(math.log(3), 0.0) == pytest.approx(0.75, abs=1e-12)
    assert pointwise_prob(1000.0, 0.0) == pytest.approx(1.0, abs=1e-12)
    assert pointwise_prob(0.0, 1000.0) == pytest.approx(0.0, abs=1e-12)


def test_pointwise_prob_monotone():
    xs = np.linspace(-30, 30, 201)
    ps = [pointwise_prob(x, 0.0) for x in xs]
    assert all(a <= b for a, b in zip(ps, ps[1:]))
    assert pointwise_prob(2.0, 1.0) == pytest.approx(pointwise_prob(1.0, 0.0), abs=1e-15)


def test_stitch_formula():
    out = stitch_scores(["b", "a"], [("a", 10.0), ("b", 7.0), ("c", 1.0)])
    assert out[0][0] == "b" and out[0][1] == pytest.approx(10.002)
    assert out[1][0] == "a" and out[1][1] == pytest.approx(10.001)
    assert out[2] == ("c", 1.0)


def test_stitch_empty_head():
    orig = [("a", 3.0), ("b", 1.0)]
    assert stitch_scores([], orig) == orig


@pytest.mark.parametrize("seed", range(20))
def test_stitch_strictly_descending(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 40))
    scores = np.sort(rng.standard_normal(n))[::-1]
    orig = [(f"d{i}", float(s)) for i, s in enumerate(scores)]
    h = int(rng.integers(0, n + 1))
    head = [d for d, _ in orig[:h]]
    rng.shuffle(head)
    out = stitch_scores(head, orig)
    assert [d for d, _ in out[:h]] == head
    assert out[h:] == orig[h:]
    vals = [s for _, s in out]
    assert all(a > b for a, b in zip(vals[:h + 1], vals[1:h + 1]))


def test_config_validation():
    with pytest.raises(ConfigError):
        RerankConfig(depth=10, top_sorted=20)
    with pytest.raises(ConfigError):
        RerankConfig(heap_arity=5)
    with pytest.raises(ConfigError):
        RerankConfig(heap_arity=0)
    assert RerankConfig() == RerankConfig(30, 20, 4, 450)


# ---------------------------------------------------------------------------
# passage selection
# ---------------------------------------------------------------------------

def doc_with_passages(n_passages, doc_id="D", tokens=450):
    body = " ".join(f"w{i}" for i in range(tokens * n_passages))
    return Document(doc_id, body)


def test_single_passage_no_calls():
    oracle = truthful({})
    p = select_best_passage(doc_with_passages(1, tokens=400), TOPIC, oracle)
    assert p.passage_id == "D#0" and p.length == 400
    assert oracle.calls == 0


@pytest.mark.parametrize("winner", range(7))
def test_seven_passages_argmax(winner):
    hidden = {f"D#{i}": (10.0 if i == winner else float(i)) for i in range(7)}
    oracle = truthful(hidden)
    p = select_best_passage(doc_with_passages(7), TOPIC, oracle)
    assert p.passage_id == f"D#{winner}"
    assert oracle.calls == 3  # groups of 5 and 2, then a final between the two winners


@pytest.mark.parametrize("n", [2, 5, 6, 11, 26])
def test_selection_random_matches_argmax(n):
    rng = np.random.default_rng(n)
    hidden = {f"D#{i}": float(v) for i, v in enumerate(rng.permutation(n))}
    p = select_best_passage(doc_with_passages(n, tokens=20), TOPIC, truthful(hidden), passage_tokens=20)
    assert p.passage_id == max(hidden, key=hidden.get)


def test_selection_always_fail_first_passage():
    hidden = {f"D#{i}": float(i) for i in range(12)}
    p = select_best_passage(doc_with_passages(12), TOPIC, truthful(hidden, "always"))
    assert p.passage_id == "D#0"


def test_selection_empty_doc():
    with pytest.raises(ValueError):
        select_best_passage(Document("E", ""), TOPIC, truthful({}))


# ---------------------------------------------------------------------------
# heapsort
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("n", range(1, 8))
def test_heapsort_exhaustive_small(n):
    for perm in itertools.permutations(range(n)):
        items, hidden = snippets(perm)
        want = true_order(items, hidden)
        for top in range(1, n + 1):
            out = heapsort_rerank(items, TOPIC, truthful(hidden), RerankConfig(max(n, top), top))
            assert ids(out)[:top] == want[:top]
            assert sorted(ids(out)) == sorted(ids(items))


def test_heapsort_small_head_fully_sorted():
    rng = np.random.default_rng(0)
    items, hidden = snippets(rng.permutation(12))
    out = heapsort_rerank(items, TOPIC, truthful(hidden), RerankConfig(30, 20))
    assert ids(out) == true_order(items, hidden)


@pytest.mark.parametrize("seed", range(25))
def test_heapsort_thirty(seed):
    rng = np.random.default_rng(seed)
    items, hidden = snippets(rng.standard_normal(30))
    oracle = truthful(hidden)
    out = heapsort_rerank(items, TOPIC, oracle, RerankConfig())
    assert ids(out)[:20] == true_order(items, hidden)[:20]
    assert sorted(ids(out)) == sorted(ids(items))
    assert oracle.calls <= 150


@pytest.mark.parametrize("arity", [1, 2, 3, 4])
def test_heapsort_any_arity(arity):
    rng = np.random.default_rng(arity)
    items, hidden = snippets(rng.standard_normal(17))
    out = heapsort_rerank(items, TOPIC, truthful(hidden), RerankConfig(17, 9, arity))
    assert ids(out)[:9] == true_order(items, hidden)[:9]


@pytest.mark.parametrize("n", [1, 2, 5, 13, 30])
def test_heapsort_always_fail_matches_simulator(n):
    items, hidden = snippets(range(n))
    for top in sorted({1, min(n, 20), n}):
        out = heapsort_rerank(items, TOPIC, truthful(hidden, "always"), RerankConfig(max(n, 20), top))
        assert out == simulate_failed_heapsort(items, top)


def test_heapsort_residual_is_permutation_of_input():
    items, hidden = snippets(range(30))
    out = heapsort_rerank(items, TOPIC, truthful(hidden, "always"), RerankConfig())
    assert sorted(ids(out[20:])) == sorted(set(ids(items)) - set(ids(out[:20])))


def test_heapsort_parent_listed_first():
    seen = []

    class Recorder:
        def best_of(self, title, description, passages):
            seen.append([p.passage_id for p in passages])
            return None

    items, _ = snippets(range(9))
    heapsort_rerank(items, TOPIC, Recorder(), RerankConfig(9, 1))
    # build phase: internal nodes 1 then 0, each listed with its children
    assert seen[0] == ["s001", "s005", "s006", "s007", "s008"]
    assert seen[1] == ["s000", "s001", "s002", "s003", "s004"]
    assert all(2 <= len(s) <= 5 for s in seen)


def test_heapsort_intermittent_failures_keep_items():
    rng = np.random.default_rng(3)
    items, hidden = snippets(rng.standard_normal(30))
    out = heapsort_rerank(items, TOPIC, truthful(hidden, "every:3"), RerankConfig())
    assert sorted(ids(out)) == sorted(ids(items))


def test_call_count_reported():
    rng = np.random.default_rng(4)
    items, hidden = snippets(rng.standard_normal(30))
    oracle = truthful(hidden)
    _, calls = _heapsort(items, TOPIC, oracle, RerankConfig())
    assert calls == oracle.calls > 0


# ---------------------------------------------------------------------------
# run-level rerankers
# ---------------------------------------------------------------------------

def make_corpus(n, tokens=30):
    return {f"d{i:02d}": Document(f"d{i:02d}", " ".join(f"x{i}_{j}" for j in range(tokens)))
            for i in range(n)}


def make_run(n, topic="t1"):
    return Run("base", {topic: [(f"d{i:02d}", 100.0 - i) for i in range(n)]})


def test_tournament_orders_head_by_hidden_truth():
    rng = np.random.default_rng(5)
    corpus = make_corpus(40)
    hidden = {d: float(v) for d, v in zip(corpus, rng.permutation(40))}
    run = make_run(40)
    out = rerank_tournament(run, {"t1": TOPIC}, corpus, truthful(hidden))
    head = [d for d, _ in run.topics["t1"][:30]]
    want = sorted(head, key=lambda d: -hidden[d])[:20]
    got = out.topics["t1"]
    assert [d for d, _ in got[:20]] == want
    assert got[30:] == run.topics["t1"][30:]
    assert sorted(d for d, _ in got) == sorted(d for d, _ in run.topics["t1"])
    scores = [s for _, s in got]
    assert all(a > b for a, b in zip(scores, scores[1:]))


def test_tournament_depth_one_is_identity_order():
    corpus = make_corpus(5)
    run = make_run(5)
    out = rerank_tournament(run, {"t1": TOPIC}, corpus, truthful({}),
                            RerankConfig(depth=1, top_sorted=1))
    assert [d for d, _ in out.topics["t1"]] == [d for d, _ in run.topics["t1"]]


def test_tournament_missing_doc_keeps_position():
    corpus = make_corpus(6)
    del corpus["d02"]
    hidden = {d: float(i) for i, d in enumerate(sorted(corpus))}
    out = rerank_tournament(make_run(6), {"t1": TOPIC}, corpus, truthful(hidden),
                            RerankConfig(depth=6, top_sorted=6))
    assert [d for d, _ in out.topics["t1"]] == ["d05", "d04", "d02", "d03", "d01", "d00"]


def test_tournament_unknown_topic_untouched():
    run = make_run(5, topic="zz")
    out = rerank_tournament(run, {"t1": TOPIC}, make_corpus(5), truthful({}))
    assert out.topics == run.topics


def test_pointwise_constant_scorer_keeps_order():
    class Constant:
        def score(self, query, passage):
            return 0.5

    run = make_run(10)
    out = rerank_pointwise(run, Constant(), 5, {"t1": TOPIC}, make_corpus(10))
    assert [d for d, _ in out.topics["t1"]] == [d for d, _ in run.topics["t1"]]


def test_pointwise_truth_and_monotone_invariance():
    rng = np.random.default_rng(6)
    corpus = make_corpus(12)
    hidden = {d: float(v) for d, v in zip(corpus, rng.standard_normal(12))}
    run = make_run(12)
    out = rerank_pointwise(run, MockOracle(MockOracleSpec(hidden)), 8, {"t1": TOPIC}, corpus)
    head = [d for d, _ in run.topics["t1"][:8]]
    assert [d for d, _ in out.topics["t1"][:8]] == sorted(head, key=lambda d: -hidden[d])
    assert out.topics["t1"][8:] == run.topics["t1"][8:]

    class Cubed:
        def score(self, query, passage):
            return hidden[passage.passage_id] ** 3 - 2

    again = rerank_pointwise(run, Cubed(), 8, {"t1": TOPIC}, corpus)
    assert [d for d, _ in again.topics["t1"]] == [d for d, _ in out.topics["t1"]]


def test_pointwise_whole_list_and_query_text():
    seen = []

    class Spy:
        def score(self, query, passage):
            seen.append((query, passage.passage_id, passage.text))
            return -float(len(seen))

    corpus = make_corpus(3)
    out = rerank_pointwise(make_run(3), Spy(), 50, {"t1": TOPIC}, corpus)
    assert len(out.topics["t1"]) == 3 and len(seen) == 3
    assert seen[0] == ("title description", "d00", corpus["d00"].body)


def test_pointwise_failure_pins_position():
    class Flaky:
        def score(self, query, passage):
            if passage.passage_id == "d01":
                raise RuntimeError("down")
            return {"d00": 0.1, "d02": 0.9, "d03": 0.5}[passage.passage_id]

    out = rerank_pointwise(make_run(4), Flaky(), 4, {"t1": TOPIC}, make_corpus(4))
    assert [d for d, _ in out.topics["t1"]] == ["d02", "d01", "d03", "d00"]


class ListStub:
    def __init__(self, perm):
        self.perm = perm

    def rank(self, title, description, passages):
        return self.perm


def test_listwise_once_cases():
    items = [Snippet(p, "") for p in "abc"]
    assert ids(rerank_listwise_once(items, TOPIC, ListStub([2, 1, 0]))) == ["c", "b", "a"]
    assert ids(rerank_listwise_once(items, TOPIC, ListStub([2, 2, 1]))) == ["a", "b", "c"]
    assert ids(rerank_listwise_once(items, TOPIC, ListStub(None))) == ["a", "b", "c"]


def test_listwise_truthful():
    rng = np.random.default_rng(7)
    corpus = make_corpus(15)
    hidden = {d: float(v) for d, v in zip(corpus, rng.standard_normal(15))}
    run = make_run(15)
    out = rerank_listwise(run, {"t1": TOPIC}, corpus, truthful(hidden), depth=10)
    head = [d for d, _ in run.topics["t1"][:10]]
    assert [d for d, _ in out.topics["t1"][:10]] == sorted(head, key=lambda d: -hidden[d])
    assert out.topics["t1"][10:] == run.topics["t1"][10:]
