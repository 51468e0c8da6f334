import math
from fractions import Fraction
from functools import cmp_to_key

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from e2esv import miner
from e2esv.miner import SpeakerVectorPool, build_impostor_table


def pool_of(vectors):
    return SpeakerVectorPool({k: np.asarray(v, dtype=float) for k, v in vectors.items()})


def exact_cos_key(a, b):
    """Sortable exact value of cos(a, b) for integer vectors: (sign, dot^2 / (|a|^2 |b|^2))."""
    dot = sum(int(x) * int(y) for x, y in zip(a, b))
    na = sum(int(x) * int(x) for x in a)
    nb = sum(int(x) * int(x) for x in b)
    r = Fraction(dot * dot, na * nb)
    return r if dot >= 0 else -r


def exhaustive_exact(vectors, k):
    ids = sorted(vectors)
    out = {}
    for s in ids:
        others = [t for t in ids if t != s]
        others.sort(key=lambda t: (-exact_cos_key(vectors[s], vectors[t]), t))
        out[s] = others[:min(k, len(ids) - 1)]
    return out


def exhaustive_float(vectors, k):
    ids = sorted(vectors)

    def cos(a, b):
        return math.fsum(x * y for x, y in zip(a, b)) / math.sqrt(
            math.fsum(x * x for x in a) * math.fsum(y * y for y in b))

    out = {}
    for s in ids:
        sims = {t: cos(vectors[s], vectors[t]) for t in ids if t != s}
        out[s] = sorted(sims, key=cmp_to_key(lambda x, y: (sims[y] > sims[x]) - (sims[y] < sims[x])
                                             or (x > y) - (x < y)))[:min(k, len(ids) - 1)]
    return out


class TestExamples:
    def test_three_point(self):
        t = build_impostor_table(pool_of({"A": [1, 0], "B": [0.9, 0.1], "C": [-1, 0]}), 1)
        assert t.impostors("A") == ["B"]

    def test_identical_vectors(self):
        t = build_impostor_table(pool_of({"x": [1.0, 2.0], "y": [1.0, 2.0], "z": [-3.0, 1.0]}), 1)
        assert t["x"][0][0] == "y" and t["x"][0][1] == pytest.approx(1.0, abs=1e-15)
        assert t["y"][0][0] == "x"

    def test_k_clipped(self):
        rng = np.random.default_rng(0)
        t = build_impostor_table(pool_of({f"s{i}": rng.standard_normal(4) for i in range(5)}), 10)
        assert all(len(t[s]) == 4 for s in t.neighbors)

    def test_errors(self):
        with pytest.raises(ValueError):
            build_impostor_table(pool_of({"a": [1.0], "b": [2.0]}), 0)
        with pytest.raises(ValueError):
            build_impostor_table(pool_of({"a": [1.0]}), 1)
        with pytest.raises(ValueError):
            pool_of({"a": [0.0, 0.0], "b": [1.0, 0.0]})
        with pytest.raises(ValueError):
            pool_of({"a": [1.0], "b": [1.0, 0.0]})

    def test_tie_broken_by_id(self):
        t = build_impostor_table(pool_of({"q": [1, 0], "c": [0, 1], "b": [0, -1], "a": [-1, 0]}), 2)
        # b and c are both orthogonal to q
        assert t.impostors("q") == ["b", "c"]


@pytest.mark.parametrize("n", [2, 3, 10, 57, 200])
def test_exhaustive_oracle_with_ties(n):
    rng = np.random.default_rng(n)
    ids = [f"spk{v:04d}" for v in rng.permutation(10 * n)[:n]]
    vectors = {}
    for s in ids:
        v = rng.integers(-2, 3, size=3)
        while not v.any():
            v = rng.integers(-2, 3, size=3)
        vectors[s] = v
    for k in (1, 3, n + 1):
        table = build_impostor_table(pool_of(vectors), k)
        assert {s: table.impostors(s) for s in ids} == exhaustive_exact(vectors, k)


@pytest.mark.parametrize("seed", range(5))
def test_exhaustive_oracle_continuous(seed):
    rng = np.random.default_rng(100 + seed)
    n = int(rng.integers(2, 201))
    vectors = {f"s{i:03d}": rng.standard_normal(16) for i in range(n)}
    table = build_impostor_table(pool_of(vectors), 3)
    assert {s: table.impostors(s) for s in vectors} == exhaustive_float(vectors, 3)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 30), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_table_invariants(n, k, seed):
    rng = np.random.default_rng(seed)
    vectors = {f"s{i:02d}": rng.standard_normal(5) for i in range(n)}
    table = build_impostor_table(pool_of(vectors), k)
    U = {s: v / np.linalg.norm(v) for s, v in vectors.items()}
    for s, row in table.neighbors.items():
        names = [t for t, _ in row]
        sims = [x for _, x in row]
        assert s not in names
        assert len(set(names)) == len(names) == min(k, n - 1)
        assert all(a >= b for a, b in zip(sims, sims[1:]))
        # no unlisted speaker is strictly closer than the last listed one
        worst = sims[-1]
        for u in vectors:
            if u != s and u not in names:
                assert float(U[s] @ U[u]) <= worst + 1e-12


class TestRefresh:
    def test_constant_extractor(self):
        utts = {"a": ["a1", "a2", "a3"], "b": ["b1", "b2"]}
        v = {"a": np.array([1.0, 2.0]), "b": np.array([-1.0, 0.5])}
        pool = miner.refresh_pool(lambda ids: np.stack([v[u[0]] for u in ids]), utts, 6,
                                  np.random.default_rng(0))
        for s in utts:
            np.testing.assert_array_equal(pool.vectors[s], v[s])
        assert pool.generation == 0

    def test_mean_of_sample(self):
        utts = {"a": [f"a{i}" for i in range(8)], "b": [f"b{i}" for i in range(8)]}
        emb = {u: np.random.default_rng(i).standard_normal(3) for i, u in enumerate(utts["a"] + utts["b"])}
        seen = []

        def embed(ids):
            seen.extend(ids)
            return np.stack([emb[u] for u in ids])

        pool = miner.refresh_pool(embed, utts, 3, np.random.default_rng(1))
        assert len(seen) == 6
        a_ids = [u for u in seen if u.startswith("a")]
        np.testing.assert_allclose(pool.vectors["a"], np.mean([emb[u] for u in a_ids], axis=0), rtol=1e-15)

    def test_determinism_and_generation(self):
        utts = {s: [f"{s}{i}" for i in range(10)] for s in "abcd"}
        emb = lambda ids: np.stack([np.arange(1.0, 4.0) * (1 + sum(map(ord, u)) % 7) for u in ids])
        p1 = miner.refresh_pool(emb, utts, 6, np.random.default_rng(5))
        p2 = miner.refresh_pool(emb, utts, 6, np.random.default_rng(5))
        for s in utts:
            assert p1.vectors[s].tobytes() == p2.vectors[s].tobytes()
        p = p1
        for _ in range(3):
            p = miner.refresh_pool(emb, utts, 6, np.random.default_rng(0), p)
        assert p.generation == 3
        assert set(p.vectors) == set(utts)

    def test_speaker_set_must_not_change(self):
        utts = {"a": ["a1"], "b": ["b1"]}
        emb = lambda ids: np.ones((len(ids), 2))
        p = miner.refresh_pool(emb, utts, 1, np.random.default_rng(0))
        with pytest.raises(ValueError):
            miner.refresh_pool(emb, {"a": ["a1"], "c": ["c1"]}, 1, np.random.default_rng(0), p)


class TestSampling:
    def test_exactly_five(self):
        utts = {"t": ["t1"], "i": [f"i{j}" for j in range(5)]}
        got, fallback = miner.sample_impostor_utterances(["i"], utts, 5, np.random.default_rng(0))
        assert sorted(got) == utts["i"] and not fallback

    def test_fallback_with_replacement(self):
        utts = {"i": ["i1", "i2"]}
        got, fallback = miner.sample_impostor_utterances(["i"], utts, 5, np.random.default_rng(0))
        assert fallback and len(got) == 5 and set(got) <= {"i1", "i2"}

    def test_from_table(self):
        rng = np.random.default_rng(3)
        vectors = {f"s{i}": rng.standard_normal(4) for i in range(8)}
        utts = {s: [f"{s}_u{j}" for j in range(4)] for s in vectors}
        table = build_impostor_table(pool_of(vectors), 3)
        for s in vectors:
            got, _ = miner.sample_from_table(table, s, utts, 5, np.random.default_rng(0))
            owners = {u.split("_")[0] for u in got}
            assert owners <= set(table.impostors(s)) and s not in owners
            again, _ = miner.sample_from_table(table, s, utts, 5, np.random.default_rng(0))
            assert got == again
        with pytest.raises(KeyError):
            miner.sample_from_table(table, "nobody", utts, 5, rng)


def test_pool_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    pool = SpeakerVectorPool({f"s{i}": rng.standard_normal(640) for i in range(4)}, generation=7)
    miner.save_pool(pool, tmp_path / "p.e2ev")
    raw = (tmp_path / "p.e2ev").read_bytes()
    assert raw[:4] == b"E2EV"
    back = miner.load_pool(tmp_path / "p.e2ev")
    assert back.generation == 7
    assert back.speakers == pool.speakers
    for s in pool.speakers:
        assert back.vectors[s].tobytes() == pool.vectors[s].tobytes()
