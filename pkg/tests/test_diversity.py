import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import make_label_space
from tracecoder.corpus import LabelSpace
from tracecoder.diversity import (
    KnowledgeMatrices, build_knowledge_matrix, cyclic_rows, dissimilarity, dissimilarity_matrix,
    embed_entries, objective, select, solve_mdp_exact, solve_mdp_greedy,
)
from tracecoder.errors import ConfigError, EncoderError, ValidationError
from tracecoder.knowledge import KnowledgeBase, KnowledgeEntry, _assemble


class HashEncoder:
    """Deterministic bag-of-characters embedding; no model involved."""

    id = "hash-test"

    def encode(self, texts):
        out = np.zeros((len(texts), 8))
        for i, t in enumerate(texts):
            for ch in t:
                out[i, ord(ch) % 8] += 1.0
            out[i, 7] += 0.5
        return out


class BrokenEncoder(HashEncoder):
    def encode(self, texts):
        if any("boom" in t for t in texts):
            raise RuntimeError("encoder crashed")
        return super().encode(texts)


def E(code, text):
    return KnowledgeEntry(code, "umls", text, "test")


def test_dissimilarity_examples():
    assert dissimilarity([1, 0], [1, 0]) == 0
    assert dissimilarity([1, 0], [0, 1]) == 1
    assert dissimilarity([1, 0], [-1, 0]) == 2
    with pytest.raises(ValueError):
        dissimilarity([0, 0], [1, 0])


def test_embed_entries_contract():
    es = [E("A", "one"), E("A", "two"), E("A", "one")]
    out = embed_entries(es, HashEncoder())
    assert len(out) == 3 and {v.vector.shape for v in out} == {(8,)}
    assert np.array_equal(out[0].vector, out[2].vector)
    assert embed_entries([], HashEncoder()) == []


def test_embed_entries_names_failure():
    with pytest.raises(EncoderError, match="boom"):
        embed_entries([E("A", "fine"), E("A", "boom here")], BrokenEncoder())


D3 = np.array([[0, 1.0, 0.02], [1.0, 0, 0.99], [0.02, 0.99, 0]])


def test_exact_examples():
    assert solve_mdp_exact(D3, 2) == (0, 1)
    assert solve_mdp_exact(D3, 5) == (0, 1, 2)
    assert solve_mdp_exact(D3, 1) == (0,)
    with pytest.raises(ConfigError, match="greedy"):
        solve_mdp_exact(np.zeros((17, 17)), 2)


def test_greedy_examples():
    assert solve_mdp_greedy(D3, 2) == (0, 1)
    assert solve_mdp_greedy(np.zeros((4, 4)), 2) == (0, 1)
    assert solve_mdp_greedy(np.zeros((1, 1)), 4) == (0,)


def test_exact_tie_break_lexicographic():
    D = np.ones((4, 4)) - np.eye(4)
    assert solve_mdp_exact(D, 2) == (0, 1)
    assert solve_mdp_exact(D, 3) == (0, 1, 2)


def _random_D(rng, N):
    X = rng.normal(size=(N, 5))
    return dissimilarity_matrix(X)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 10), st.integers(1, 6), st.integers(0, 2**31))
def test_exact_matches_brute_force(N, M, seed):
    D = _random_D(np.random.default_rng(seed), N)
    S = solve_mdp_exact(D, M)
    assert len(S) == min(M, N)
    assert objective(D, S) == pytest.approx(oracles.mdp_brute_force(D.tolist(), M), abs=1e-9)
    G = solve_mdp_greedy(D, M)
    assert len(G) == min(M, N) and objective(D, G) <= objective(D, S) + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 9), st.integers(1, 5), st.floats(0.01, 100), st.integers(0, 2**31))
def test_selection_scale_invariant(N, M, scale, seed):
    X = np.random.default_rng(seed).normal(size=(N, 4))
    assert select(X, M) == select(X * scale, M)


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 9), st.integers(2, 5), st.integers(0, 2**31))
def test_selection_permutation_equivariant(N, M, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(N, 6))
    perm = rng.permutation(N)
    a = {tuple(X[i]) for i in select(X, M)}
    b = {tuple(X[perm][i]) for i in select(X[perm], M)}
    assert a == b


def test_cyclic_rows():
    assert cyclic_rows((0, 1), 4) == [0, 1, 0, 1]


def _kb(entries, codes=("A", "B")):
    ls = LabelSpace(codes, {c: f"label {c}" for c in codes})
    return _assemble(ls, entries, ("umls",))


def test_build_matrix_cyclic_padding():
    kb = _kb([E("A", "xyz")])  # A: fallback + 1 entry = 2 candidates
    km = build_knowledge_matrix(kb, HashEncoder(), 4)
    assert km["A"].entry_ids == (0, 1, 0, 1)
    assert km["A"].matrix.shape == (4, 8)
    assert np.abs(km["A"].avg - km["A"].matrix.mean(0)).max() <= 1e-9
    assert set(km["A"].entries) <= set(kb.candidates("A"))


def test_build_matrix_identical_texts():
    ls = make_label_space(1)
    same = [KnowledgeEntry("C0", "wikipedia", "same text", f"p{i}") for i in range(10)]
    kb = KnowledgeBase(ls, {"C0": tuple(same)}, ("wikipedia",))
    km = build_knowledge_matrix(kb, HashEncoder(), 8)
    assert (km["C0"].matrix == km["C0"].matrix[0]).all()
    assert np.array_equal(km["C0"].avg, km["C0"].matrix[0])


def test_greedy_used_above_cap():
    kb = _kb([E("A", f"text number {i} " + "q" * i) for i in range(20)])
    km = build_knowledge_matrix(kb, HashEncoder(), 3, cap=16)
    assert len(set(km["A"].entry_ids)) == 3


def test_matrix_save_load_bit_exact(tmp_path):
    kb = _kb([E("A", "abc"), E("A", "defg"), E("B", "hij")])
    km = build_knowledge_matrix(kb, HashEncoder(), 2)
    km.save(tmp_path / "km.npz")
    back = KnowledgeMatrices.load(tmp_path / "km.npz", expected_hash=km.config_hash)
    for c in km.codes:
        assert np.array_equal(back[c].matrix, km[c].matrix)
        assert np.array_equal(back[c].avg, km[c].avg)
        assert back[c].entries == km[c].entries
    with pytest.raises(ValidationError, match="hash"):
        KnowledgeMatrices.load(tmp_path / "km.npz", expected_hash="something-else")


def test_stacked_order():
    kb = _kb([E("A", "abc"), E("B", "zzz")])
    km = build_knowledge_matrix(kb, HashEncoder(), 2)
    kbest, kavg = km.stacked(("B", "A"))
    assert np.array_equal(kbest[0], km["B"].matrix) and np.array_equal(kavg[1], km["A"].avg)
