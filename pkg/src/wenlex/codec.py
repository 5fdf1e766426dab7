"""Frozen sentence embedder with exact nearest-neighbour decoding.

Token vectors are drawn once from a seeded normal and never trained. A
position-weighted sum keeps the map injective on the finite grammars, so
decoding is an exact argmin over the enumerated sentences and
``decode(embed(s)) == s`` everywhere. All latent-space supervision happens
on these vectors; text only reappears at inference time.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NleEmbedding:
    vector: np.ndarray
    provenance: str  # ground_truth | generated | interpolated

    def __post_init__(self):
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("non-finite embedding")


class TextCodec:
    """Immutable after construction; safe for concurrent reads."""

    def __init__(self, schema, dim=64, seed=20240):
        self.schema = schema
        self.dim = int(dim)
        self.seed = int(seed)
        vocab = set()
        for g in schema.grammars:
            vocab |= g.vocabulary()
        self._vocab = tuple(sorted(vocab))
        rng = np.random.default_rng(np.uint64(seed))
        table = rng.normal(0.0, 1.0 / np.sqrt(self.dim), size=(len(self._vocab), self.dim))
        self._table = {tok: table[i] for i, tok in enumerate(self._vocab)}
        self._sentences = {}
        self._matrices = {}
        for g in schema.grammars:
            sents = g.enumerate_sentences()
            self._sentences[g.name] = sents
            self._matrices[g.name] = np.stack([self._embed_tokens(s.tokens) for s in sents])

    def token_vector(self, token):
        try:
            return self._table[token]
        except KeyError:
            raise KeyError(f"token '{token}' not in codec vocabulary") from None

    def _embed_tokens(self, tokens):
        if not tokens:
            raise ValueError("cannot embed an empty sentence")
        out = np.zeros(self.dim)
        for i, tok in enumerate(tokens):
            out += (1.0 + i / 10.0) * self.token_vector(tok)
        return out

    def embed(self, tokens):
        """Position-weighted sum of frozen token vectors."""
        return self._embed_tokens(tuple(tokens))

    def decode(self, vector, grammar_names=None):
        """Nearest grammar sentence by Euclidean distance; ties break in enumeration order."""
        vector = np.asarray(vector, dtype=np.float64)
        names = grammar_names or [g.name for g in self.schema.grammars]
        best, best_d = None, np.inf
        for name in names:
            mat = self._matrices[name]
            d = np.sum((mat - vector) ** 2, axis=1)
            i = int(np.argmin(d))
            if d[i] < best_d:
                best, best_d = self._sentences[name][i], float(d[i])
        return best

    def diagnosis_embedding(self, label, grammar_name=None):
        """Embedding of the diagnosis noun as a single-token sentence."""
        grammar_name = grammar_name or self.schema.grammars[0].name
        g = self.schema.grammar(grammar_name)
        if label not in g.diagnosis_nouns:
            raise KeyError(f"unknown diagnosis label '{label}'")
        return self.embed((g.diagnosis_nouns[label],))

    def sentences(self, grammar_name):
        return self._sentences[grammar_name]

    def sentence_matrix(self, grammar_name):
        return self._matrices[grammar_name]

    def min_pairwise_gap(self, grammar_names=None):
        """Smallest distance between any two distinct sentence embeddings."""
        names = grammar_names or [g.name for g in self.schema.grammars]
        mat = np.concatenate([self._matrices[n] for n in names])
        d2 = (
            np.sum(mat * mat, axis=1)[:, None]
            + np.sum(mat * mat, axis=1)[None, :]
            - 2.0 * (mat @ mat.T)
        )
        np.fill_diagonal(d2, np.inf)
        return float(np.sqrt(max(np.min(d2), 0.0)))
