"""Codec tests: embedding definition, injectivity, exact decode round-trips."""

import numpy as np
import pytest

from wenlex.codec import TextCodec
from wenlex.domain import DomainSchema


@pytest.fixture(scope="module")
def codec():
    return TextCodec(DomainSchema(), dim=64, seed=20240)


class TestEmbed:
    def test_single_token_is_table_row(self, codec):
        vec = codec.embed(("shadowing",))
        assert np.array_equal(vec, codec.token_vector("shadowing"))

    def test_position_weighting(self, codec):
        a = codec.token_vector("upper")
        b = codec.token_vector("left")
        got = codec.embed(("upper", "left"))
        assert np.allclose(got, a + 1.1 * b)

    def test_empty_rejected(self, codec):
        with pytest.raises(ValueError):
            codec.embed(())

    def test_unknown_token_rejected(self, codec):
        with pytest.raises(KeyError):
            codec.embed(("nonexistent",))

    def test_determinism(self, codec):
        s = codec.sentences("medical")[10]
        assert np.array_equal(codec.embed(s.tokens), codec.embed(s.tokens))

    def test_same_seed_same_table(self):
        schema = DomainSchema()
        a = TextCodec(schema, dim=32, seed=7)
        b = TextCodec(schema, dim=32, seed=7)
        assert np.array_equal(a.sentence_matrix("medical"), b.sentence_matrix("medical"))

    def test_injective_over_grammars(self, codec):
        assert codec.min_pairwise_gap() > 0.0

    def test_dimension(self, codec):
        assert codec.embed(("fog",)).shape == (64,)


class TestDecode:
    def test_roundtrip_both_grammars(self, codec):
        for name in ("medical", "layman"):
            for s in codec.sentences(name):
                assert codec.decode(codec.embed(s.tokens)) == s

    def test_zero_vector_decodes_to_min_norm_sentence(self, codec):
        all_sentences = []
        all_norms = []
        for g in codec.schema.grammars:
            for s in codec.sentences(g.name):
                all_sentences.append(s)
                all_norms.append(np.linalg.norm(codec.embed(s.tokens)))
        expect = all_sentences[int(np.argmin(all_norms))]
        assert codec.decode(np.zeros(64)) == expect

    def test_noise_below_half_gap_preserved(self, codec):
        gap = codec.min_pairwise_gap()
        rng = np.random.default_rng(3)
        for s in codec.sentences("medical")[::17]:
            noise = rng.standard_normal(64)
            noise *= 0.49 * gap / np.linalg.norm(noise)
            assert codec.decode(codec.embed(s.tokens) + noise) == s

    def test_restricted_grammar_pool(self, codec):
        s = codec.sentences("layman")[5]
        got = codec.decode(codec.embed(s.tokens), grammar_names=["medical"])
        assert got.grammar == "medical"


class TestDiagnosisEmbedding:
    def test_distinct_per_diagnosis(self, codec):
        vecs = [codec.diagnosis_embedding(lb) for lb in codec.schema.diagnosis_labels]
        for i in range(len(vecs)):
            for j in range(i + 1, len(vecs)):
                assert np.linalg.norm(vecs[i] - vecs[j]) > 0.0

    def test_matches_noun_embedding(self, codec):
        g = codec.schema.grammar("medical")
        assert np.array_equal(codec.diagnosis_embedding("alpha"),
                              codec.embed((g.diagnosis_nouns["alpha"],)))

    def test_unknown_label_rejected(self, codec):
        with pytest.raises(KeyError):
            codec.diagnosis_embedding("nosuch")
