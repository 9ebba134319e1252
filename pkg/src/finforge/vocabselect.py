"""Vocabulary-size selection: minimize total encoded corpus size at
log2(vocab) bits per token, then round up to a power of two."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .tokenizer import TokenizerModel, UnigramVocab, encode, finalize, prune_to_size


@dataclass(frozen=True)
class VocabCandidate:
    size: int
    encoded_tokens: int
    encoded_bits: float


def encoded_token_count(model: TokenizerModel, corpus: list[bytes]) -> int:
    return sum(len(encode(model, doc)) for doc in corpus)


def encoded_size_bits(model: TokenizerModel, corpus: list[bytes]) -> float:
    """Total corpus cost in bits when each token costs log2(|V|) bits."""
    if not corpus or all(len(d) == 0 for d in corpus):
        raise ValueError("corpus is empty")
    return encoded_token_count(model, corpus) * math.log2(model.vocab_size)


def tokenizer_at_size(base: UnigramVocab, size: int) -> TokenizerModel:
    """Prune the base vocabulary so that the finalized tokenizer (with byte
    coverage and the separator token) has exactly ``size`` entries."""
    singles = {t for t in base.probs if len(t) == 1}
    missing = 256 - len(singles)
    keep = size - missing - 1
    if keep < len(singles):
        raise ValueError(f"candidate size {size} too small for byte coverage")
    pruned = prune_to_size(base, keep, protected=singles) if len(base) > keep else base
    return finalize(pruned)


def sweep(
    base: UnigramVocab, corpus: list[bytes], candidates: list[int]
) -> list[VocabCandidate]:
    if not candidates:
        raise ValueError("no candidate sizes given")
    if sorted(candidates) != list(candidates):
        raise ValueError("candidate sizes must be sorted ascending")
    out = []
    for size in candidates:
        model = tokenizer_at_size(base, size)
        n_tok = encoded_token_count(model, corpus)
        out.append(VocabCandidate(size, n_tok, n_tok * math.log2(size)))
    return out


def round_up_pow2(n: int) -> int:
    if n <= 0:
        raise ValueError("need a positive size")
    return 1 << (n - 1).bit_length()


def select_vocab_size(
    corpus: list[bytes], candidates: list[int], base: UnigramVocab
) -> tuple[int, int]:
    """argmin of encoded bits over candidate sizes (ties to the smaller
    size), and that size rounded up to the nearest power of two."""
    swept = sweep(base, corpus, candidates)
    best = min(swept, key=lambda c: (c.encoded_bits, c.size))
    return best.size, round_up_pow2(best.size)
