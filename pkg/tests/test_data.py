import numpy as np
import pytest

from ssmax import data


def test_encode_decode_round_trip():
    text = "The special magic Tokyo number is: 8106422."
    ids = data.encode(text)
    assert max(ids) < data.VOCAB_SIZE and data.decode(ids) == text


def test_filler_exact_length_and_no_eos():
    rng = np.random.default_rng(0)
    for n in (1, 17, 300, 1000):
        seq = data.filler_sequence(rng, n)
        assert len(seq) == n and data.EOS not in seq


def test_language_is_fixed():
    a, b = data.MarkovLanguage.build(), data.MarkovLanguage.build()
    assert a.words == b.words and np.array_equal(a.successors, b.successors)
    np.testing.assert_allclose(a.probs.sum(1), 1.0)


@pytest.mark.parametrize("tail", [0, 40])
def test_record_layout(tail):
    rec = data.build_record(np.random.default_rng(5), 300, tail=tail)
    text = data.decode(rec.tokens)
    assert len(rec.tokens) == 300
    assert data.decode(rec.tokens[rec.span[0] : rec.span[1]]) == " " + rec.number + "."
    assert data.decode(rec.tokens[rec.answer_mask]) == rec.number
    assert text[: rec.answer_start].endswith(data.question_text(rec.city))
    assert len(text) - (rec.answer_start + data.ANSWER_DIGITS + 1) == tail


def test_record_explicit_needle_position():
    rec = data.build_record(np.random.default_rng(1), 400, needle_pos=100)
    assert data.decode(rec.tokens[100:]).startswith("The special magic")
    with pytest.raises(ValueError):
        data.build_record(np.random.default_rng(1), 400, needle_pos=390)


def test_record_too_short():
    with pytest.raises(ValueError):
        data.build_record(np.random.default_rng(0), 50)


def test_needle_span_offset():
    assert data.needle_span_offset("Tokyo") == len("The special magic Tokyo number is:")


def test_corpus_batch_shape_and_mixture():
    rng = np.random.default_rng(2)
    batch = data.corpus_batch(rng, 400, 257)
    assert batch.shape == (400, 257) and batch.dtype == np.int64
    texts = [data.decode(row) for row in batch]
    with_needle = sum("special magic" in t for t in texts)
    with_chunk = sum(any(c.isupper() and c != "T" or c.isdigit() for c in t) and "special" not in t for t in texts)
    assert 0.4 < with_needle / 400 < 0.6
    assert 0.2 < with_chunk / 400 < 0.4
    assert data.corpus_batch(np.random.default_rng(2), 3, 64, kv_fraction=0.0).shape == (3, 64)


def test_record_fits_at_minimum_length():
    n = data.min_record_length()
    rng = np.random.default_rng(0)
    for _ in range(50):
        assert len(data.corpus_sequence(rng, n, kv_fraction=1.0)) == n
    assert "special magic" in data.decode(data.corpus_sequence(rng, n, kv_fraction=1.0))


def test_repeat_sequence_chunks_recur():
    rng = np.random.default_rng(4)
    for length in (40, 128, 513):
        seq = data.repeat_sequence(rng, length)
        text = data.decode(seq)
        assert len(seq) == length and data.EOS not in seq
        chunks = [w for w in text.split(" ") if w and (w.isdigit() or w.isupper())]
        assert len(chunks) >= 2 and len(set(chunks)) == 1
