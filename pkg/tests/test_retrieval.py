import numpy as np
import pytest

from chainrft import retrieval as ret
from chainrft import taskenv as te


@pytest.fixture(scope="module")
def corpus():
    return te.generate_dataset(te.target_spec(), 60, seed=29)


@pytest.fixture(scope="module")
def index(corpus):
    return ret.build_index(corpus)


# ------------------------------------------------------------------ embed


def test_embed_deterministic_bit_exact():
    a = ret.embed("Start with 4. Then add 5.")
    b = ret.embed("Start with 4. Then add 5.")
    np.testing.assert_array_equal(a, b)


def test_embed_unit_norm_nonempty():
    v = ret.embed("multiply by 3 then subtract 8")
    assert np.linalg.norm(v) == pytest.approx(1.0)
    assert float(v @ v) == pytest.approx(1.0)


def test_embed_empty_text_zero_vector():
    np.testing.assert_array_equal(ret.embed(""), np.zeros(64))
    np.testing.assert_array_equal(ret.embed("?!,."), np.zeros(64))


def test_embed_case_and_punctuation_folding():
    np.testing.assert_array_equal(ret.embed("Add THREE, then stop!"),
                                  ret.embed("add three then stop"))


def test_embed_disjoint_bucket_tokens_orthogonal():
    # build two token sets whose hash buckets provably never overlap
    words = ["alpha", "bravo", "carton", "delta", "ember", "fjord",
             "gamma", "hollow", "indigo", "jolt", "kelp", "lumen"]
    buckets = {w: ret.token_bucket(w, 64) for w in words}
    left = [w for w in words if buckets[w] % 2 == 0]
    right = [w for w in words if buckets[w] % 2 == 1]
    assert left and right
    assert not {buckets[w] for w in left} & {buckets[w] for w in right}
    cos = float(ret.embed(" ".join(left)) @ ret.embed(" ".join(right)))
    assert cos == 0.0


def test_token_bucket_range():
    for w in ("a", "7", "zz9", "value"):
        assert 0 <= ret.token_bucket(w, 64) < 64


# --------------------------------------------------------------- retrieve


def test_retrieve_self_query_ranks_first(index, corpus):
    q = corpus[7]
    hits = ret.retrieve(index, q.text, k=3)
    assert hits[0][0] == q.id
    assert hits[0][1] == pytest.approx(1.0)


def test_retrieve_k_larger_than_index(corpus):
    idx = ret.build_index(corpus[:4])
    hits = ret.retrieve(idx, corpus[0].text, k=10)
    assert len(hits) == 4
    scores = [s for _, s in hits]
    assert scores == sorted(scores, reverse=True)


def test_retrieve_empty_index():
    idx = ret.RetrievalIndex(dim=64, entries=[])
    assert ret.retrieve(idx, "anything", k=3) == []


def test_retrieve_k_validation(index):
    with pytest.raises(ValueError):
        ret.retrieve(index, "x", k=0)


def test_retrieve_exclude_id(index, corpus):
    q = corpus[3]
    hits = ret.retrieve(index, q.text, k=5, exclude_id=q.id)
    assert q.id not in [i for i, _ in hits]


def test_retrieve_tie_break_ascending_id():
    base = te.generate_dataset(te.target_spec(), 1, seed=1)[0]
    # three entries sharing one text: cosine ties resolved by id order
    clones = [te.Question(id=i, text=base.text, v0=base.v0, ops=base.ops,
                          intermediates=base.intermediates,
                          options=base.options, gold_letter=base.gold_letter,
                          domain_tag=base.domain_tag)
              for i in (31, 5, 12)]
    idx = ret.build_index(clones)
    hits = ret.retrieve(idx, base.text, k=3)
    assert [i for i, _ in hits] == [5, 12, 31]


def brute_force_scan(idx, query_text, k, exclude_id=None):
    qv = ret.embed(query_text, idx.dim)
    rows = []
    for e in idx.entries:
        if e.sample_id == exclude_id:
            continue
        rows.append((e.sample_id, float(np.dot(e.vector, qv))))
    best = sorted(rows, key=lambda t: (-t[1], t[0]))
    return best[:k]


def test_retrieve_matches_brute_force_thousand_instances():
    rng = np.random.default_rng(41)
    pool = te.generate_dataset(te.target_spec(), 300, seed=31)
    checked = 0
    for trial in range(50):
        n = int(rng.integers(2, 40))
        picks = rng.choice(len(pool), size=n, replace=False)
        subset = [pool[int(i)] for i in picks]
        # duplicated texts under fresh ids make cosine ties routine
        dupes = [te.Question(id=900_000 + trial * 10 + j, text=subset[0].text,
                             v0=subset[0].v0, ops=subset[0].ops,
                             intermediates=subset[0].intermediates,
                             options=subset[0].options,
                             gold_letter=subset[0].gold_letter,
                             domain_tag=subset[0].domain_tag)
                 for j in range(2)]
        idx = ret.build_index(subset + dupes)
        for _ in range(20):
            query = pool[int(rng.integers(len(pool)))].text
            k = int(rng.integers(1, 8))
            assert ret.retrieve(idx, query, k) == brute_force_scan(idx, query, k)
            checked += 1
    assert checked == 1000


def test_build_index_rejects_duplicate_ids(corpus):
    with pytest.raises(ValueError):
        ret.build_index([corpus[0], corpus[0]])


# ------------------------------------------------------------ icl context


def test_icl_context_empty_is_zero_block():
    block = ret.icl_context([])
    np.testing.assert_array_equal(block.vector, np.zeros(64 + 3))


def test_icl_context_single_exemplar(index):
    e = index.entries[0]
    block = ret.icl_context([e])
    np.testing.assert_allclose(block.vector[:64], e.vector)
    assert block.vector[64] == pytest.approx(e.answer_value / 1000)
    assert block.vector[65] == 0.0 and block.vector[66] == 0.0


def test_icl_context_permutation_invariant(index):
    rng = np.random.default_rng(8)
    entries = index.entries[:5]
    base = ret.icl_context(entries, max_slots=5)
    for _ in range(10):
        perm = [entries[int(i)] for i in rng.permutation(5)]
        np.testing.assert_allclose(ret.icl_context(perm, max_slots=5).vector,
                                   base.vector, atol=1e-15)


def test_icl_context_answer_slots_sorted(index):
    entries = index.entries[:3]
    block = ret.icl_context(entries)
    answers = sorted(e.answer_value / 1000 for e in entries)
    np.testing.assert_allclose(block.vector[64:], answers)


def test_icl_context_respects_max_slots(index):
    block = ret.icl_context(index.entries[:5], max_slots=2)
    assert block.vector.shape == (66,)


# ------------------------------------------------------------ make_icl_fn


def test_make_icl_fn_excludes_own_entry(index, corpus):
    icl_fn = ret.make_icl_fn(index, k=3, exclude_self=True)
    q = corpus[11]
    hits = ret.retrieve(index, q.text, k=3, exclude_id=q.id)
    want = ret.icl_context(ret.entries_by_id(index, [i for i, _ in hits]))
    np.testing.assert_array_equal(icl_fn(q).vector, want.vector)


def test_make_icl_fn_includes_self_when_allowed(index, corpus):
    icl_fn = ret.make_icl_fn(index, k=3, exclude_self=False)
    q = corpus[11]
    hits = ret.retrieve(index, q.text, k=3)
    assert hits[0][0] == q.id
    want = ret.icl_context(ret.entries_by_id(index, [i for i, _ in hits]))
    np.testing.assert_array_equal(icl_fn(q).vector, want.vector)


def test_make_icl_fn_caches_by_id(index, corpus):
    icl_fn = ret.make_icl_fn(index, k=3)
    assert icl_fn(corpus[2]) is icl_fn(corpus[2])


def test_make_icl_fn_disjoint_query_ids(index):
    """Test-split questions are absent from the train index, so exclusion
    never removes anything."""
    test_qs = te.generate_dataset(te.target_spec(), 5, seed=77,
                                  id_base=500_000)
    with_excl = ret.make_icl_fn(index, k=3, exclude_self=True)
    without = ret.make_icl_fn(index, k=3, exclude_self=False)
    for q in test_qs:
        np.testing.assert_array_equal(with_excl(q).vector, without(q).vector)
