import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bdlm.data import (
    EOS,
    MASK,
    PAD,
    decode_bytes,
    encode,
    load_corpus,
    load_jsonl_pairs,
    pack_documents,
    pack_pairs,
    quantize_length,
    sft_row,
)


class TestQuantize:
    @pytest.mark.parametrize("n,b,want", [(33, 32, 64), (32, 32, 32), (1, 4096, 4096)])
    def test_values(self, n, b, want):
        assert quantize_length(n, b) == want

    @given(st.integers(1, 10_000), st.integers(1, 512))
    def test_properties(self, n, b):
        q = quantize_length(n, b)
        assert q % b == 0 and 0 <= q - n < b

    def test_rejects_zero(self):
        with pytest.raises(ValueError):
            quantize_length(0, 4)


class TestVocab:
    def test_round_trip_random_bytes(self, rng):
        for _ in range(10_000):
            raw = rng.integers(0, 256, rng.integers(0, 40)).astype(np.uint8).tobytes()
            assert decode_bytes(encode(raw)) == raw

    def test_specials_stripped(self):
        assert decode_bytes([104, MASK, 105, PAD, EOS]) == b"hi"


class TestPackDocuments:
    def test_two_docs_share_a_row(self):
        b = pack_documents([[1] * 8, [2] * 8], 16, 8)
        assert len(b) == 1
        assert b.layouts[0].doc_spans == ((0, 8), (8, 16))

    def test_long_doc_chunked(self):
        b = pack_documents([list(range(40))], 16, 8)
        spans = [lay.doc_spans for lay in b.layouts]
        assert len(b) == 3
        assert spans[0] == ((0, 16),) and spans[1] == ((0, 16),)
        assert spans[2] == ((0, 8), (8, 16))
        assert b.loss_mask[2].sum() == 8

    def test_short_doc_trailing_pad_span(self):
        b = pack_documents([[5, 6, 7]], 8, 2)
        assert b.layouts[0].doc_spans == ((0, 4), (4, 8))
        assert b.tokens[0].tolist() == [5, 6, 7, PAD, PAD, PAD, PAD, PAD]
        assert b.loss_mask[0].tolist() == [True] * 3 + [False] * 5

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.lists(st.integers(0, 255), min_size=1, max_size=50), min_size=1, max_size=12),
           st.sampled_from([(16, 4), (32, 8), (24, 3), (8, 1)]))
    def test_conserves_tokens(self, docs, shape):
        L, lb = shape
        b = pack_documents(docs, L, lb)
        assert b.loss_mask.sum() == sum(map(len, docs))
        kept = sorted(b.tokens[b.loss_mask].tolist())
        assert kept == sorted(t for d in docs for t in d)
        for lay in b.layouts:
            assert all((e - s) % lb == 0 for s, e in lay.doc_spans)

    def test_indivisible(self):
        with pytest.raises(ValueError):
            pack_documents([[1]], 10, 4)


class TestPairs:
    def test_sft_layout(self):
        toks, loss, prompt = sft_row([1, 2, 3], [7, EOS], 4)
        assert toks == [1, 2, 3, PAD, 7, EOS, EOS, EOS]
        assert loss == [False] * 4 + [True] * 4
        assert prompt == [True] * 4 + [False] * 4

    def test_pack_pairs_rejects_overlong(self):
        with pytest.raises(ValueError, match="exceeds"):
            pack_pairs([([1] * 9, [2])], 16, 8)

    def test_load_sft(self, tmp_path):
        p = tmp_path / "d.jsonl"
        p.write_text(json.dumps({"prompt": "2+2=", "response": "4"}) + "\n")
        (ex,) = load_jsonl_pairs(p)
        assert len(ex.prompt) == 4 and ex.response == [ord("4"), EOS]

    def test_empty_file_warns(self, tmp_path, caplog):
        p = tmp_path / "e.jsonl"
        p.write_text("")
        with caplog.at_level(logging.WARNING):
            assert load_jsonl_pairs(p) == []
        assert "no usable records" in caplog.text

    def test_dpo_missing_rejected_names_line(self, tmp_path, caplog):
        p = tmp_path / "d.jsonl"
        p.write_text("\n".join([
            json.dumps({"prompt": "a", "chosen": "b", "rejected": "c"}),
            json.dumps({"prompt": "a", "chosen": "b"}),
            "{not json",
        ]))
        with caplog.at_level(logging.WARNING):
            recs = load_jsonl_pairs(p, "dpo")
        assert len(recs) == 1
        assert "line 2" in caplog.text and "rejected" in caplog.text
        assert "line 3" in caplog.text and "skipped 2" in caplog.text


class TestCorpus:
    def test_blank_line_separated(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("ab\ncd\n\nef\n\n\n")
        docs = load_corpus(p)
        assert docs == [encode("ab\ncd") + [EOS], encode("ef") + [EOS]]


def test_empty_prompt_lays_out_response_only():
    from bdlm.data import pack_pairs

    b = pack_pairs([([], [5, 6, EOS])], 8, 4)
    assert b.tokens[0, :4].tolist() == [5, 6, EOS, EOS]
    assert not b.prompt_mask.any()
