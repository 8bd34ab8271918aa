"""Semantically irrelevant text generation and the posterior audit.

Replacement text is sampled one token at a time from the low-probability
tail of a reference language model: at each step only tokens whose posterior
falls below a threshold are eligible, and the threshold relaxes upward when
the tail is empty. The audit replays a generated sequence through the model
and reports every conditional probability, which is how the "no sequence
prior" claim is checked.
"""

from __future__ import annotations

import json
import logging
import urllib.request
from abc import ABC, abstractmethod
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import LanguageClass, ZerodocError, detect_language, stable_seed

logger = logging.getLogger(__name__)

DEFAULT_TAU_INIT = 1e-6
DEFAULT_MAX_RELAXATIONS = 10
DEFAULT_RELAX_FACTOR = 10.0


class OracleError(ZerodocError):
    """A probability oracle failed or returned an unusable distribution."""


class ProbabilityOracle(ABC):
    """Next-token distribution source over a fixed vocabulary."""

    @property
    @abstractmethod
    def vocab(self) -> tuple[str, ...]:
        """The vocabulary, in the index order used by distributions."""

    @abstractmethod
    def next_distribution(self, context: Sequence[str]) -> np.ndarray:
        """Full next-token distribution given the preceding tokens.

        Returns a vector aligned with ``vocab``; entries are non-negative
        and sum to 1 within 1e-6.
        """

    def token_index(self, token: str) -> int:
        try:
            return self._index[token]  # type: ignore[attr-defined]
        except AttributeError:
            index = {tok: i for i, tok in enumerate(self.vocab)}
            self._index = index  # type: ignore[attr-defined]
            return index[token]

    def token_probability(self, context: Sequence[str], token: str) -> float:
        """Posterior of one token; subclasses may avoid the full vector."""
        try:
            idx = self.token_index(token)
        except KeyError:
            raise OracleError(f"token {token!r} not in oracle vocabulary") from None
        return float(self.next_distribution(context)[idx])


class NGramOracle(ProbabilityOracle):
    """Interpolated n-gram model trained on a plain-text corpus.

    Each order's maximum-likelihood estimate is blended into the estimate
    one order lower: P_k = lam * MLE_k + (1 - lam) * P_{k-1}, bottoming out
    at the unigram relative frequency. Orders whose context was never seen
    contribute nothing, so an unseen context falls straight through to the
    unigram floor. Every vocabulary token therefore always has positive
    probability and the distribution sums to one at every order.
    """

    def __init__(self, order: int = 3, interpolation: float = 0.9, mode: str = "word"):
        if order < 1:
            raise ValueError(f"order must be >= 1, got {order}")
        if not 0.0 < interpolation < 1.0:
            raise ValueError(f"interpolation must be in (0, 1), got {interpolation}")
        if mode not in ("word", "char"):
            raise ValueError(f"mode must be 'word' or 'char', got {mode!r}")
        self.order = order
        self.interpolation = interpolation
        self.mode = mode
        self._vocab: tuple[str, ...] = ()
        self._unigram = np.zeros(0)
        # order k -> context tuple (k-1 tokens) -> (successor indices, probs)
        self._contexts: list[dict[tuple[str, ...], tuple[np.ndarray, np.ndarray]]] = []

    @property
    def vocab(self) -> tuple[str, ...]:
        return self._vocab

    def tokenize(self, text: str) -> list[str]:
        if self.mode == "word":
            return text.split()
        return [ch for ch in text if not ch.isspace()]

    @classmethod
    def train(cls, text: str, order: int = 3, interpolation: float = 0.9,
              mode: str = "word") -> NGramOracle:
        """Fit counts on a training text and return the ready oracle."""
        model = cls(order=order, interpolation=interpolation, mode=mode)
        model.fit(text)
        return model

    def fit(self, text: str) -> None:
        tokens = self.tokenize(text)
        if not tokens:
            raise OracleError("training text contains no tokens")
        vocab = tuple(sorted(set(tokens)))
        index = {tok: i for i, tok in enumerate(vocab)}
        counts = np.zeros(len(vocab), dtype=np.int64)
        for tok in tokens:
            counts[index[tok]] += 1
        self._vocab = vocab
        self._index = index
        self._unigram = counts / counts.sum()
        self._contexts = []
        for k in range(2, self.order + 1):
            successor: dict[tuple[str, ...], Counter] = {}
            for i in range(len(tokens) - k + 1):
                ctx = tuple(tokens[i:i + k - 1])
                successor.setdefault(ctx, Counter())[index[tokens[i + k - 1]]] += 1
            table: dict[tuple[str, ...], tuple[np.ndarray, np.ndarray]] = {}
            for ctx, ctr in successor.items():
                idx = np.fromiter(ctr.keys(), dtype=np.int64, count=len(ctr))
                cnt = np.fromiter(ctr.values(), dtype=np.float64, count=len(ctr))
                table[ctx] = (idx, cnt / cnt.sum())
            self._contexts.append(table)
        logger.info("n-gram oracle fitted: %d tokens, %d types, order %d",
                    len(tokens), len(vocab), self.order)

    def _require_fitted(self) -> None:
        if not self._vocab:
            raise OracleError("oracle is not fitted; call fit() or train()")

    def next_distribution(self, context: Sequence[str]) -> np.ndarray:
        self._require_fitted()
        probs = self._unigram.copy()
        lam = self.interpolation
        for k in range(2, self.order + 1):
            need = k - 1
            if len(context) < need:
                break
            entry = self._contexts[k - 2].get(tuple(context[-need:]))
            if entry is None:
                continue
            idx, mle = entry
            probs *= 1.0 - lam
            probs[idx] += lam * mle
        return probs

    def token_probability(self, context: Sequence[str], token: str) -> float:
        self._require_fitted()
        try:
            target = self._index[token]
        except KeyError:
            raise OracleError(f"token {token!r} not in oracle vocabulary") from None
        prob = float(self._unigram[target])
        lam = self.interpolation
        for k in range(2, self.order + 1):
            need = k - 1
            if len(context) < need:
                break
            entry = self._contexts[k - 2].get(tuple(context[-need:]))
            if entry is None:
                continue
            idx, mle = entry
            hit = np.nonzero(idx == target)[0]
            mle_p = float(mle[hit[0]]) if hit.size else 0.0
            prob = lam * mle_p + (1.0 - lam) * prob
        return prob


class RemoteOracle(ProbabilityOracle):
    """Client for a log-probability endpoint.

    The endpoint accepts POSTed JSON ``{"context": [...], "top_k": k}`` or
    ``{"context": [...], "full": true}`` and answers ``{"tokens": [...],
    "logprobs": [...]}``. The vocabulary is discovered with one full query
    against the empty context.
    """

    def __init__(self, endpoint: str, timeout: float = 30.0):
        self.endpoint = endpoint
        self.timeout = timeout
        tokens, _ = self._query({"context": [], "full": True})
        self._vocab = tuple(tokens)
        self._index = {tok: i for i, tok in enumerate(self._vocab)}

    @property
    def vocab(self) -> tuple[str, ...]:
        return self._vocab

    def _query(self, payload: dict) -> tuple[list[str], np.ndarray]:
        body = json.dumps(payload).encode("utf-8")
        request = urllib.request.Request(
            self.endpoint, data=body,
            headers={"Content-Type": "application/json"},
        )
        try:
            with urllib.request.urlopen(request, timeout=self.timeout) as resp:
                reply = json.loads(resp.read().decode("utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise OracleError(f"oracle endpoint {self.endpoint} failed: {exc}") from exc
        try:
            tokens = list(reply["tokens"])
            logprobs = np.asarray(reply["logprobs"], dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise OracleError(f"malformed oracle reply: {exc}") from exc
        if len(tokens) != len(logprobs):
            raise OracleError("oracle reply tokens/logprobs length mismatch")
        return tokens, logprobs

    def next_distribution(self, context: Sequence[str]) -> np.ndarray:
        tokens, logprobs = self._query({"context": list(context), "full": True})
        probs = np.zeros(len(self._vocab))
        for tok, lp in zip(tokens, logprobs):
            idx = self._index.get(tok)
            if idx is None:
                raise OracleError(f"oracle returned unknown token {tok!r}")
            probs[idx] = np.exp(lp)
        total = probs.sum()
        if abs(total - 1.0) > 1e-3:
            raise OracleError(f"oracle distribution sums to {total:.6f}, not 1")
        return probs / total

    def top_k(self, context: Sequence[str], k: int) -> list[tuple[str, float]]:
        """The k most likely next tokens with their probabilities."""
        tokens, logprobs = self._query({"context": list(context), "top_k": k})
        return [(tok, float(np.exp(lp))) for tok, lp in zip(tokens, logprobs)]


@dataclass(frozen=True)
class ValidVocab:
    """Sampleable subset of an oracle vocabulary, as sorted indices."""

    indices: tuple[int, ...]

    def __post_init__(self) -> None:
        normalized = tuple(sorted(set(int(i) for i in self.indices)))
        if not normalized:
            raise OracleError("valid vocabulary is empty")
        if normalized[0] < 0:
            raise OracleError("valid vocabulary index out of range")
        object.__setattr__(self, "indices", normalized)

    def __len__(self) -> int:
        return len(self.indices)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.indices, dtype=np.int64)


def build_valid_vocab(
    oracle: ProbabilityOracle,
    language: LanguageClass = LanguageClass.LATIN,
    ascii_threshold: float | None = None,
) -> ValidVocab:
    """Select the sampleable vocabulary entries of an oracle.

    Drops empty and unprintable tokens, tokens with surrounding whitespace,
    special-token wrappers like ``<pad>`` or ``[CLS]``, and tokens whose
    script does not match ``language``.
    """
    keep: list[int] = []
    for i, token in enumerate(oracle.vocab):
        if not token or not token.isprintable():
            continue
        if token != token.strip():
            continue
        if (token[0] == "<" and token[-1] == ">") or (token[0] == "[" and token[-1] == "]"):
            continue
        if ascii_threshold is None:
            token_lang = detect_language(token)
        else:
            token_lang = detect_language(token, ascii_threshold)
        if token_lang is not language:
            continue
        keep.append(i)
    if not keep:
        raise OracleError(f"no valid {language.value} tokens in oracle vocabulary")
    return ValidVocab(indices=tuple(keep))


@dataclass(frozen=True)
class GenSpec:
    """Parameters of one low-probability sampling run."""

    target_capacity: int
    seed: int
    tau_init: float = DEFAULT_TAU_INIT
    max_relaxations: int = DEFAULT_MAX_RELAXATIONS
    relax_factor: float = DEFAULT_RELAX_FACTOR

    def __post_init__(self) -> None:
        if self.target_capacity < 1:
            raise ValueError(f"target_capacity must be >= 1, got {self.target_capacity}")
        if not 0.0 < self.tau_init < 1.0:
            raise ValueError(f"tau_init must be in (0, 1), got {self.tau_init}")
        if self.max_relaxations < 0:
            raise ValueError(f"max_relaxations must be >= 0, got {self.max_relaxations}")
        if self.relax_factor <= 1.0:
            raise ValueError(f"relax_factor must exceed 1, got {self.relax_factor}")


@dataclass(frozen=True)
class ZeroTextResult:
    """Sampled token sequence plus the per-step threshold log."""

    tokens: tuple[str, ...]
    taus: tuple[float, ...]
    fallback_steps: tuple[int, ...]

    @property
    def max_tau(self) -> float:
        return max(self.taus) if self.taus else 0.0

    def stayed_within(self, tau_ceiling: float) -> bool:
        """True when every step sampled below the ceiling with no fallback."""
        return not self.fallback_steps and self.max_tau <= tau_ceiling

    def text(self, language: LanguageClass = LanguageClass.LATIN) -> str:
        return tokens_to_block_text(self.tokens, language)


def tokens_to_block_text(tokens: Sequence[str], language: LanguageClass) -> str:
    """Join tokens into block text: spaced for Latin, fused otherwise."""
    sep = " " if language is LanguageClass.LATIN else ""
    return sep.join(tokens)


def generate_zero_text(
    spec: GenSpec,
    oracle: ProbabilityOracle,
    valid: ValidVocab | Sequence[int],
) -> ZeroTextResult:
    """Sample ``spec.target_capacity`` tokens from the posterior tail.

    At each position the candidate set is the valid-vocabulary tokens whose
    posterior given the sampled prefix falls below the threshold. An empty
    set relaxes the threshold by ``relax_factor`` up to ``max_relaxations``
    times; if it is still empty the step falls back to a uniform draw over
    the whole valid vocabulary (and is recorded as such). Each step draws
    uniformly using an independent stream keyed by (seed, position), so a
    sequence is reproducible per position regardless of candidate-set
    contents at other positions.
    """
    if not isinstance(valid, ValidVocab):
        valid = ValidVocab(indices=tuple(valid))
    vocab = oracle.vocab
    if valid.indices[-1] >= len(vocab):
        raise OracleError("valid vocabulary index out of range")
    valid = valid.as_array()

    tokens: list[str] = []
    taus: list[float] = []
    fallbacks: list[int] = []
    for position in range(spec.target_capacity):
        probs = oracle.next_distribution(tokens)
        tail = probs[valid]
        tau = spec.tau_init
        attempts = 0
        candidates = np.empty(0, dtype=np.int64)
        while candidates.size == 0 and attempts < spec.max_relaxations:
            candidates = valid[tail < tau]
            if candidates.size == 0:
                tau *= spec.relax_factor
                attempts += 1
        rng = np.random.default_rng(stable_seed(spec.seed, position))
        if candidates.size == 0:
            logger.warning("position %d: tail empty after %d relaxations; "
                           "uniform fallback over valid vocabulary",
                           position, attempts)
            fallbacks.append(position)
            candidates = valid
        choice = int(candidates[rng.integers(candidates.size)])
        tokens.append(vocab[choice])
        taus.append(tau)
    return ZeroTextResult(tokens=tuple(tokens), taus=tuple(taus),
                          fallback_steps=tuple(fallbacks))


@dataclass(frozen=True)
class VacuumAudit:
    """Replay of a token sequence through an oracle."""

    posteriors: tuple[float, ...]

    @property
    def max_posterior(self) -> float:
        return max(self.posteriors) if self.posteriors else 0.0

    def fraction_below(self, threshold: float) -> float:
        if not self.posteriors:
            return 0.0
        return sum(1 for p in self.posteriors if p < threshold) / len(self.posteriors)


def audit_vacuum(tokens: Sequence[str], oracle: ProbabilityOracle) -> VacuumAudit:
    """Compute P(token_t | tokens_<t) for every position of a sequence.

    The first position is conditioned on the empty context, matching the
    convention used during generation.
    """
    posteriors: list[float] = []
    for t, token in enumerate(tokens):
        posteriors.append(oracle.token_probability(tokens[:t], token))
    return VacuumAudit(posteriors=tuple(posteriors))
