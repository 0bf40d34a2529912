import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from countprompt import prompt as pm
from countprompt.prompt import PromptSpec, Vocabulary, assemble, init_tokens, semantic_target


@pytest.fixture(scope="module")
def vocab():
    return Vocabulary(0)


def _cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def test_vocabulary_contents(vocab):
    assert len(vocab.classes) == 19
    for w in ("A", "of", *pm.DOMAINS, *(pm.number_word(n) for n in range(1, 26)), *vocab.classes):
        assert vocab[w].shape == (32,) and np.all(np.isfinite(vocab[w]))
    cls = np.array([vocab[c] for c in vocab.classes])
    assert len({row.tobytes() for row in cls}) == 19


def test_vocabulary_frozen(vocab):
    with pytest.raises(ValueError):
        vocab["A"][0] = 1.0


def test_vocabulary_seeded():
    assert Vocabulary(3).checksum() == Vocabulary(3).checksum()
    assert Vocabulary(3).checksum() != Vocabulary(4).checksum()


def test_init_tokens():
    a, b = init_tokens(0), init_tokens(0)
    assert np.array_equal(a.flat(), b.flat())
    assert not np.array_equal(a.flat(), init_tokens(1).flat())
    assert np.linalg.norm(a.e_count) < 0.5 and np.linalg.norm(a.e_style) < 0.5


def test_token_order_with_tokens(vocab):
    emb = assemble(PromptSpec("cartoon", 6, "apples", True), init_tokens(0), vocab)
    assert emb.words == ("A", "cartoon", "e_style", "of", "six", "e_count", "apples")
    assert emb.sequence.shape == (7, 32)
    assert emb.learned == {"e_style": 2, "e_count": 5}


def test_plain_prompt_length(vocab):
    emb = assemble(PromptSpec("photo", 3, "birds"), None, vocab)
    assert emb.sequence.shape == (5, 32)
    np.testing.assert_array_equal(emb.pooled, emb.sequence.mean(axis=0))


def test_identical_tokens_pool_to_themselves(vocab):
    v = vocab["sketch"]
    toks = pm.LearnableTokens(e_count=v.copy(), e_style=v.copy())
    seq = np.vstack([v] * 7)
    np.testing.assert_allclose(seq.mean(axis=0), v)
    emb = assemble(PromptSpec("sketch", 1, "apples", True), toks, vocab)
    np.testing.assert_allclose(emb.pooled, emb.sequence.mean(axis=0))


def test_missing_tokens_rejected(vocab):
    with pytest.raises(ValueError, match="no tokens"):
        assemble(PromptSpec("photo", 3, "birds", True), None, vocab)


@pytest.mark.parametrize("spec", [PromptSpec("photo", 0, "birds"), PromptSpec("photo", 26, "birds"),
                                  PromptSpec("oil", 3, "birds"), PromptSpec("photo", 3, "dragons")])
def test_invalid_spec_rejected(vocab, spec):
    with pytest.raises(ValueError):
        assemble(spec, None, vocab)


def test_semantic_target(vocab):
    a = semantic_target(PromptSpec("photo", 3, "apples"), vocab)
    b = semantic_target(PromptSpec("photo", 17, "apples"), vocab)
    c = semantic_target(PromptSpec("sketch", 3, "apples"), vocab)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_semantic_target_regression(vocab):
    spec = PromptSpec("photo", 3, "apples")
    got = _cos(semantic_target(spec, vocab), assemble(spec, None, vocab).pooled)
    assert got == pytest.approx(0.7179059678257813, abs=1e-12)


def test_unseen_zero_sigma_is_base():
    v = Vocabulary(0)
    name = pm.make_unseen_class(v, "apples", 1, sigma=0.0)
    np.testing.assert_array_equal(v[name], v["apples"])
    assert name not in v.classes


def test_unseen_neighbours_closer_to_base():
    v = Vocabulary(0)
    rng = np.random.default_rng(0)
    hits = 0
    for seed in range(50):
        base = v.classes[seed % len(v.classes)]
        name = pm.make_unseen_class(v, base, seed)
        other = rng.choice([c for c in v.classes if c != base])
        hits += _cos(v[name], v[base]) > _cos(v[name], v[other])
    assert hits >= 48


def test_unseen_duplicate_rejected():
    v = Vocabulary(0)
    pm.make_unseen_class(v, "apples", 1, name="tomatoes")
    with pytest.raises(ValueError, match="already exists"):
        pm.make_unseen_class(v, "apples", 2, name="tomatoes")
    with pytest.raises(ValueError):
        pm.make_unseen_class(v, "birds", 2, name="apples")


def test_unseen_groups_three_per_base():
    v = Vocabulary(0)
    names = pm.register_unseen_groups(v)
    assert len(names) == 9
    for base, group in pm.UNSEEN_GROUPS.items():
        assert len(group) == 3
        assert all(v.unseen_base(n) == base for n in group)
    assert pm.register_unseen_groups(v) == names


def test_assemble_deterministic(vocab):
    spec = PromptSpec("painting", 9, "sheep", True)
    a = assemble(spec, init_tokens(2), vocab)
    b = assemble(spec, init_tokens(2), vocab)
    assert np.array_equal(a.sequence, b.sequence)


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(pm.DOMAINS), st.integers(1, 25), st.integers(0, 18),
       st.booleans(), st.booleans(), st.booleans())
def test_token_positions_recoverable(domain, n, ci, use, has_count, has_style):
    vocab = Vocabulary(0)
    cls = vocab.classes[ci]
    base = init_tokens(5)
    toks = pm.LearnableTokens(base.e_count if has_count else None, base.e_style if has_style else None)
    emb = assemble(PromptSpec(domain, n, cls, use), toks, vocab)
    rows = list(emb.sequence)
    expected = ["A", domain]
    if use and has_style:
        expected.append("e_style")
    expected += ["of", pm.number_word(n)]
    if use and has_count:
        expected.append("e_count")
    expected.append(cls)
    assert len(rows) == len(expected)
    for row, name in zip(rows, expected):
        ref = getattr(toks, name) if name.startswith("e_") else vocab[name]
        assert np.array_equal(row, ref)


def test_learnable_tokens_flat_round_trip():
    t = init_tokens(0)
    assert np.array_equal(t.with_flat(t.flat()).flat(), t.flat())
    only = t.only("e_count")
    assert only.names() == ("e_count",) and only.flat().shape == (32,)
    with pytest.raises(ValueError):
        t.with_flat(np.zeros(3))
