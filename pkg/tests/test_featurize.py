import itertools
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from uniret.datastore import build_store
from uniret.errors import EmptyContent, MediaReadError
from uniret.featurize import (
    FeatureVec,
    Featurizer,
    bucket_collision_rate,
    featurize_bytes,
    featurize_record,
    merge,
)
from uniret.records import CorpusRecord, QueryRecord
from uniret.synthetic import learnability_task


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def oracle_vector(data: bytes, width: int) -> dict[int, float]:
    framed = b"\x02" + data + b"\x03"
    counts = Counter(fnv1a64(framed[i:i + 3]) % width for i in range(len(framed) - 2))
    norm = math.sqrt(sum(c * c for c in counts.values()))
    return {k: c / norm for k, c in counts.items()}


def as_dict(fv: FeatureVec) -> dict[int, float]:
    return dict(zip(fv.indices.tolist(), fv.values.tolist()))


def test_fnv_reference_vectors():
    # published FNV-1a 64-bit test vectors
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a64(b"foobar") == 0x85944171F73967E8


def test_aaaa_trigrams():
    fv = featurize_bytes(b"aaaa", 4096)
    grams = [b"\x02aa", b"aaa", b"aaa", b"aa\x03"]
    expected = Counter(fnv1a64(g) % 4096 for g in grams)
    norm = math.sqrt(sum(c * c for c in expected.values()))
    assert len(fv.indices) <= 3
    assert as_dict(fv) == pytest.approx({k: c / norm for k, c in expected.items()}, abs=1e-15)
    assert fv.norm == pytest.approx(1.0, abs=1e-12)


def test_empty_input():
    with pytest.raises(EmptyContent):
        featurize_bytes(b"")


def test_deterministic():
    a, b = featurize_bytes(b"some payload"), featurize_bytes(b"some payload")
    assert a == b
    assert a.values.tobytes() == b.values.tobytes()


@pytest.mark.parametrize("data", [b"x", b"xy"])
def test_short_inputs_have_trigrams(data):
    fv = featurize_bytes(data)
    assert fv.indices.size >= 1
    assert fv.norm == pytest.approx(1.0, abs=1e-12)


@given(st.binary(min_size=1, max_size=200), st.sampled_from([7, 32, 4096]))
def test_matches_oracle(data, width):
    fv = featurize_bytes(data, width)
    assert as_dict(fv) == pytest.approx(oracle_vector(data, width), abs=1e-15)
    assert np.all((fv.indices >= 0) & (fv.indices < width))
    assert abs(fv.norm - 1.0) <= 1e-12


def test_text_record_equals_bytes():
    rec = CorpusRecord("d1", document_text="héllo wörld")
    assert featurize_record(rec) == featurize_bytes("héllo wörld".encode("utf-8"))


def test_title_is_part_of_text():
    rec = CorpusRecord("d1", document_text="body", title="Head")
    assert featurize_record(rec) == featurize_bytes(b"Head\nbody")


def test_identical_payloads_merge_to_same(tmp_path):
    (tmp_path / "img").mkdir()
    (tmp_path / "img" / "a.bin").write_bytes(b"same bytes")
    rec = CorpusRecord("d1", document_text="same bytes", document_image="img/a.bin")
    store = build_store([rec], tmp_path)
    merged, single = featurize_record(rec, store), featurize_bytes(b"same bytes")
    assert np.array_equal(merged.indices, single.indices)
    np.testing.assert_allclose(merged.values, single.values, rtol=0, atol=1e-15)


def _disjoint_pair(width=4096):
    """Search short strings until two have disjoint bucket sets."""
    base = featurize_bytes(b"alpha", width)
    for n in itertools.count():
        cand = f"z{n}".encode()
        fv = featurize_bytes(cand, width)
        if not set(fv.indices.tolist()) & set(base.indices.tolist()):
            return b"alpha", cand


def test_orthogonal_payloads_merge(tmp_path):
    t, m = _disjoint_pair()
    u, v = featurize_bytes(t), featurize_bytes(m)
    assert float(u.dense() @ v.dense()) == 0.0
    (tmp_path / "a.bin").write_bytes(m)
    rec = QueryRecord("q", query_text=t.decode(), query_audio="a.bin")
    merged = featurize_record(rec, build_store([], tmp_path))
    np.testing.assert_allclose(merged.dense(), (u.dense() + v.dense()) / math.sqrt(2), rtol=0, atol=1e-15)


@given(st.lists(st.binary(min_size=1, max_size=40), min_size=1, max_size=5), st.randoms())
def test_merge_permutation_invariant(payloads, rnd):
    vecs = [featurize_bytes(p, 64) for p in payloads]
    shuffled = list(vecs)
    rnd.shuffle(shuffled)
    a, b = merge(vecs), merge(shuffled)
    assert a == b
    assert abs(a.norm - 1.0) <= 1e-12


@given(st.binary(min_size=1, max_size=100))
def test_modality_blindness(tmp_path_factory, data):
    root = tmp_path_factory.mktemp("media")
    (root / "blob").write_bytes(data)
    store = build_store([], root)
    try:
        as_text = data.decode("utf-8")
    except UnicodeDecodeError:
        as_text = None
    media = featurize_record(QueryRecord("q", query_video="blob"), store)
    assert media == featurize_bytes(data)
    if as_text is not None:
        assert featurize_record(QueryRecord("q", query_text=as_text), store) == media


def test_missing_media(tmp_path):
    rec = CorpusRecord("d1", document_image="nope.png")
    with pytest.raises(MediaReadError):
        featurize_record(rec, build_store([rec], tmp_path))


def test_empty_text_payload():
    with pytest.raises(EmptyContent):
        featurize_record(CorpusRecord("d1", document_text=""))


def test_featurizer_matrix_threads_identical():
    task = learnability_task(n_docs=50)
    fz = Featurizer(4096)
    assert np.array_equal(fz.matrix(task.corpus, 1), fz.matrix(task.corpus, 4))


def test_collision_rate_on_synthetic_corpus():
    task = learnability_task(n_docs=500)
    rates = [bucket_collision_rate(c.document_text.encode(), 4096) for c in task.corpus]
    assert np.mean(rates) < 0.05


def test_collision_rate_counts_pairs():
    assert bucket_collision_rate(b"abc", 1) == 1.0
    assert bucket_collision_rate(b"a", 4096) == 0.0  # "\x02a\x03" is a single trigram
