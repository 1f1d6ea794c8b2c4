"""Synthetic Markov token source with exact sequence likelihoods.

A small banded Markov chain stands in for a text corpus: it is cheap to
sample, has a closed-form entropy rate, and admits an exact per-sequence
log-likelihood, which makes it usable as a generative-perplexity oracle for
generated samples.  Plain-file corpus ingestion is included for offline data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numcore import Array, InvalidInputError

_STOCHASTIC_TOL = 1e-12


class CorpusFormatError(ValueError):
    """A corpus or source file failed to parse; message names the line."""


@dataclass(frozen=True)
class MarkovSource:
    """First-order Markov chain over a clean vocabulary (mask symbol excluded)."""

    vocab_size: int
    initial: Array
    transition: Array
    seed: int = 0

    def __post_init__(self):
        initial = np.asarray(self.initial, dtype=np.float64)
        transition = np.asarray(self.transition, dtype=np.float64)
        object.__setattr__(self, "initial", initial)
        object.__setattr__(self, "transition", transition)
        k = self.vocab_size
        if k < 1:
            raise InvalidInputError("vocab_size must be positive")
        if initial.shape != (k,) or transition.shape != (k, k):
            raise InvalidInputError("initial/transition shapes inconsistent with vocab_size")
        if np.any(initial < 0.0) or np.any(transition < 0.0):
            raise InvalidInputError("probabilities must be nonnegative")
        if abs(initial.sum() - 1.0) > _STOCHASTIC_TOL:
            raise InvalidInputError("initial distribution must sum to 1")
        row_err = np.abs(transition.sum(axis=1) - 1.0).max()
        if row_err > _STOCHASTIC_TOL:
            raise InvalidInputError("every transition row must sum to 1")


def banded_source(
    vocab_size: int = 31,
    band: tuple[float, ...] = (0.4, 0.3, 0.2, 0.1),
    seed: int = 0,
) -> MarkovSource:
    """Cyclic banded chain: state i steps to i+1..i+len(band) with the band weights.

    Doubly stochastic, so the stationary distribution is uniform and the
    entropy rate is the entropy of the band itself.
    """
    if vocab_size <= len(band):
        raise InvalidInputError("vocab_size must exceed the band width")
    transition = np.zeros((vocab_size, vocab_size), dtype=np.float64)
    for i in range(vocab_size):
        for j, p in enumerate(band, start=1):
            transition[i, (i + j) % vocab_size] = p
    initial = np.full(vocab_size, 1.0 / vocab_size, dtype=np.float64)
    return MarkovSource(vocab_size=vocab_size, initial=initial, transition=transition, seed=seed)


# ---------------------------------------------------------------------------
# sampling and scoring


def sample_sequences(source: MarkovSource, n: int, length: int, rng: np.random.Generator) -> Array:
    """Draw ``n`` sequences of ``length`` tokens; deterministic given the generator."""
    if length < 1:
        raise InvalidInputError("length must be at least 1")
    if n < 1:
        raise InvalidInputError("n must be at least 1")
    out = np.empty((n, length), dtype=np.int64)
    init_cdf = np.cumsum(source.initial)
    trans_cdf = np.cumsum(source.transition, axis=1)
    u = rng.random(n)
    cur = np.searchsorted(init_cdf, u, side="right").clip(max=source.vocab_size - 1)
    out[:, 0] = cur
    for t in range(1, length):
        u = rng.random(n)
        rows = trans_cdf[cur]
        cur = (u[:, None] < rows).argmax(axis=1)
        out[:, t] = cur
    return out


def sample_sequence(source: MarkovSource, length: int, rng: np.random.Generator) -> Array:
    return sample_sequences(source, 1, length, rng)[0]


def _check_clean(source: MarkovSource, seq: Array) -> Array:
    s = np.asarray(seq, dtype=np.int64)
    if s.ndim != 1 or s.size == 0:
        raise InvalidInputError("sequence must be a nonempty 1-D token array")
    if np.any(s < 0) or np.any(s >= source.vocab_size):
        raise InvalidInputError(
            "sequence contains indices outside the clean vocabulary (mask symbol?)"
        )
    return s


def oracle_log_prob(source: MarkovSource, seq: Array) -> float:
    """Exact log-likelihood in nats; -inf sentinel when any factor is zero."""
    s = _check_clean(source, seq)
    factors = np.empty(s.size, dtype=np.float64)
    factors[0] = source.initial[s[0]]
    if s.size > 1:
        factors[1:] = source.transition[s[:-1], s[1:]]
    if np.any(factors == 0.0):
        return -math.inf
    return float(np.log(factors).sum())


def _floored_log_prob(source: MarkovSource, seq: Array, floor: float) -> float:
    s = _check_clean(source, seq)
    factors = np.empty(s.size, dtype=np.float64)
    factors[0] = source.initial[s[0]]
    if s.size > 1:
        factors[1:] = source.transition[s[:-1], s[1:]]
    # only genuinely impossible factors are floored
    factors = np.where(factors == 0.0, floor, factors)
    return float(np.log(factors).sum())


def oracle_gen_ppl(source: MarkovSource, seqs, floor: float = 1e-12) -> float:
    """exp of the mean per-token NLL over all sequences, zero factors floored."""
    seqs = list(seqs)
    if not seqs:
        raise InvalidInputError("oracle_gen_ppl: empty sequence list")
    total_lp = 0.0
    total_tokens = 0
    for seq in seqs:
        s = np.asarray(seq, dtype=np.int64)
        total_lp += _floored_log_prob(source, s, floor)
        total_tokens += s.size
    return float(math.exp(-total_lp / total_tokens))


def mean_token_nll(source: MarkovSource, length: int) -> float:
    """Analytic E[-log p(x)] / L: initial entropy plus marginal-weighted row entropies."""
    if length < 1:
        raise InvalidInputError("length must be at least 1")

    def _entropy(p: Array) -> float:
        nz = p[p > 0.0]
        return float(-(nz * np.log(nz)).sum())

    total = _entropy(source.initial)
    marginal = source.initial
    for _ in range(length - 1):
        total += float(sum(marginal[s] * _entropy(source.transition[s]) for s in range(source.vocab_size)))
        marginal = marginal @ source.transition
    return total / length


# ---------------------------------------------------------------------------
# file formats


def load_corpus(path, length: int, vocab_size: int) -> list[Array]:
    """One sequence per line, whitespace-separated decimal token indices.

    Lines shorter than ``length`` are rejected; longer lines are truncated.
    """
    sequences: list[Array] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            try:
                tokens = [int(p) for p in parts]
            except ValueError as exc:
                raise CorpusFormatError(f"line {lineno}: non-integer token") from exc
            if len(tokens) < length:
                raise CorpusFormatError(
                    f"line {lineno}: {len(tokens)} tokens, need at least {length}"
                )
            tokens = tokens[:length]
            bad = [t for t in tokens if t < 0 or t >= vocab_size]
            if bad:
                raise CorpusFormatError(
                    f"line {lineno}: token index {bad[0]} outside [0, {vocab_size})"
                )
            sequences.append(np.asarray(tokens, dtype=np.int64))
    return sequences


def save_source(source: MarkovSource, path) -> None:
    """Plain-text key-value source file; floats stored with full precision."""
    lines = [
        f"vocab_size: {source.vocab_size}",
        f"seed: {source.seed}",
        "initial: " + " ".join(repr(float(v)) for v in source.initial),
        "transition:",
    ]
    for row in source.transition:
        lines.append(" ".join(repr(float(v)) for v in row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_source(path) -> MarkovSource:
    with open(path, "r", encoding="utf-8") as fh:
        raw = [line.rstrip("\n") for line in fh]
    fields: dict[str, str] = {}
    rows: list[list[float]] = []
    in_matrix = False
    for lineno, line in enumerate(raw, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if in_matrix:
            try:
                rows.append([float(v) for v in stripped.split()])
            except ValueError as exc:
                raise CorpusFormatError(f"line {lineno}: bad transition row") from exc
            continue
        if stripped == "transition:":
            in_matrix = True
            continue
        if ":" not in stripped:
            raise CorpusFormatError(f"line {lineno}: expected 'key: value'")
        key, value = stripped.split(":", 1)
        fields[key.strip()] = value.strip()
    try:
        vocab_size = int(fields["vocab_size"])
        seed = int(fields.get("seed", "0"))
        initial = np.asarray([float(v) for v in fields["initial"].split()], dtype=np.float64)
    except KeyError as exc:
        raise CorpusFormatError(f"missing field {exc.args[0]!r}") from exc
    except ValueError as exc:
        raise CorpusFormatError("bad numeric value in source file") from exc
    if len(rows) != vocab_size:
        raise CorpusFormatError(f"expected {vocab_size} transition rows, got {len(rows)}")
    transition = np.asarray(rows, dtype=np.float64)
    return MarkovSource(vocab_size=vocab_size, initial=initial, transition=transition, seed=seed)
