"""Autoregressive token models with exact conditional probabilities.

All models answer two questions: what is the next-token distribution
given a context, and what log probability does a continuation carry.
Toy implementations (uniform, explicit table, n-gram) are exact and
enumerable so inference algorithms can be checked against brute force;
a remote adapter delegates to an HTTP backend with the same contract.

Models may condition on a ``prompt_tag`` (named conditioning variant,
e.g. "proposal" vs "prior") and on hint strings carried by a query.
Hints enter the conditioning context as extra tokens behind a reserved
delimiter token when the vocabulary declares one; models without a
delimiter ignore hints.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import requests

from .errors import (
    EmptyCorpus,
    InvalidContext,
    ParseError,
    ProtocolError,
    RemoteUnavailable,
    RowNotNormalized,
    SchemaViolation,
)

NEG_INF = float("-inf")

# Stored rows may be off by this much before load fails; rows are then
# renormalized exactly so query-time sums hold to 1e-9.
ROW_SUM_TOLERANCE = 1e-6


@dataclass(frozen=True)
class Vocabulary:
    """Dense token-id space with an end-of-sequence id and display text.

    ``token_text[eos_id]`` must be the empty string so decoded text never
    contains an artificial terminator. ``hint_delimiter_id`` optionally
    names the token used to splice hint strings into model contexts.
    """

    token_text: tuple[str, ...]
    eos_id: int
    hint_delimiter_id: int | None = None

    def __post_init__(self):
        if not self.token_text:
            raise SchemaViolation("vocabulary must contain at least one token")
        if not 0 <= self.eos_id < len(self.token_text):
            raise SchemaViolation("eos_id out of range")
        if self.token_text[self.eos_id] != "":
            raise SchemaViolation("eos token must have empty display text")
        if self.hint_delimiter_id is not None and not 0 <= self.hint_delimiter_id < len(self.token_text):
            raise SchemaViolation("hint_delimiter_id out of range")

    @property
    def size(self) -> int:
        return len(self.token_text)

    @classmethod
    def from_tokens(cls, tokens: list[str] | tuple[str, ...],
                    hint_delimiter: str | None = None) -> "Vocabulary":
        """Build a vocabulary from token strings; the last entry is EOS.

        The EOS entry may be written as any placeholder text (for file
        readability); it is stored as the empty string.
        """
        if not tokens:
            raise SchemaViolation("vocab list is empty")
        texts = tuple(tokens[:-1]) + ("",)
        delim_id = None
        if hint_delimiter is not None:
            try:
                delim_id = texts.index(hint_delimiter)
            except ValueError:
                raise SchemaViolation(
                    f"hint_delimiter {hint_delimiter!r} not present in vocab") from None
        return cls(token_text=texts, eos_id=len(texts) - 1,
                   hint_delimiter_id=delim_id)

    def decode(self, tokens) -> str:
        return "".join(self.token_text[t] for t in tokens)

    def encode(self, text: str) -> tuple[int, ...]:
        """Greedy longest-match tokenization of ``text``.

        Raises SchemaViolation when some position cannot be matched by
        any token; toy vocabularies are expected to cover their tasks.
        """
        by_text = self._by_text()
        max_len = max((len(t) for t in self.token_text if t), default=0)
        out: list[int] = []
        i = 0
        while i < len(text):
            for span in range(min(max_len, len(text) - i), 0, -1):
                tok = by_text.get(text[i:i + span])
                if tok is not None:
                    out.append(tok)
                    i += span
                    break
            else:
                raise SchemaViolation(
                    f"text not encodable at position {i}: {text[i:i + 8]!r}")
        return tuple(out)

    def _by_text(self) -> dict[str, int]:
        cached = getattr(self, "_text_index", None)
        if cached is None:
            # keep first id on duplicate texts; EOS ("") never matches
            cached = {}
            for i, t in enumerate(self.token_text):
                if t and t not in cached:
                    cached[t] = i
            object.__setattr__(self, "_text_index", cached)
        return cached


@dataclass(frozen=True)
class ModelQuery:
    """A conditioning request: context ids, prompt variant, pending hints."""

    context: tuple[int, ...]
    prompt_tag: str = "proposal"
    hints: tuple[str, ...] = ()


class TokenModel:
    """Base class: a pure conditional next-token distribution.

    Subclasses implement ``_distribution(context, prompt_tag)`` over an
    already hint-serialized context. Queries are read-only and safe
    under concurrent callers. Returned vectors are shared read-only
    arrays; callers must not mutate them.
    """

    kind = "abstract"

    def __init__(self, vocabulary: Vocabulary):
        self.vocabulary = vocabulary

    def next_distribution(self, query: ModelQuery) -> np.ndarray:
        """Probability vector over the vocabulary for ``query``."""
        size = self.vocabulary.size
        for t in query.context:
            if not 0 <= t < size:
                raise InvalidContext(f"token id {t} out of range [0, {size})")
        ctx = self._conditioning_context(query)
        return self._distribution(ctx, query.prompt_tag)

    def sequence_logprob(self, prefix, continuation, prompt_tag: str = "proposal",
                         hints: tuple[str, ...] = ()) -> float:
        """Sum of log next-token probabilities along ``continuation``.

        Returns -inf as soon as any factor is zero; an empty continuation
        scores 0.0 (empty product).
        """
        ctx = tuple(prefix)
        total = 0.0
        for tok in continuation:
            p = self.next_distribution(ModelQuery(ctx, prompt_tag, hints))[tok]
            if p <= 0.0:
                return NEG_INF
            total += math.log(p)
            ctx = ctx + (tok,)
        return total

    def _conditioning_context(self, query: ModelQuery) -> tuple[int, ...]:
        """Serialize hints into the context behind the delimiter token.

        Hint characters that the vocabulary cannot encode are dropped;
        without a declared delimiter the context is returned untouched
        and hints do not affect conditioning.
        """
        delim = self.vocabulary.hint_delimiter_id
        if delim is None or not query.hints:
            return query.context
        ctx = list(query.context)
        for hint in query.hints:
            ctx.append(delim)
            ctx.extend(self._encode_lenient(hint))
        return tuple(ctx)

    def _encode_lenient(self, text: str):
        # greedy longest-match, skipping characters no token covers
        by_text = self.vocabulary._by_text()
        max_len = max((len(t) for t in self.vocabulary.token_text if t), default=0)
        out: list[int] = []
        i = 0
        while i < len(text):
            for span in range(min(max_len, len(text) - i), 0, -1):
                tok = by_text.get(text[i:i + span])
                if tok is not None:
                    out.append(tok)
                    i += span
                    break
            else:
                i += 1
        return out

    def _distribution(self, context: tuple[int, ...], prompt_tag: str) -> np.ndarray:
        raise NotImplementedError


class UniformModel(TokenModel):
    """Every token equally likely in every context."""

    kind = "uniform"

    def __init__(self, vocabulary: Vocabulary):
        super().__init__(vocabulary)
        self._vec = np.full(vocabulary.size, 1.0 / vocabulary.size)
        self._vec.setflags(write=False)

    def _distribution(self, context, prompt_tag):
        return self._vec


class TableModel(TokenModel):
    """Explicit conditional rows keyed by (prompt_tag, context).

    Lookup falls back from the tagged row to the untagged row to the
    declared default ("uniform" or an explicit distribution).
    """

    kind = "table"

    def __init__(self, vocabulary: Vocabulary,
                 rows: dict[tuple[str | None, tuple[int, ...]], np.ndarray],
                 default: np.ndarray):
        super().__init__(vocabulary)
        self._rows = rows
        self._default = default

    def _distribution(self, context, prompt_tag):
        row = self._rows.get((prompt_tag, context))
        if row is None:
            row = self._rows.get((None, context))
        if row is None:
            row = self._default
        return row


class NgramModel(TokenModel):
    """Add-k smoothed n-gram counts over a training token stream.

    P(tok | window) = (count(window, tok) + s) / (count(window) + s * |V|)
    where ``window`` is the last (order - 1) tokens of the context. A
    window never seen in training backs off to its longest seen suffix
    when smoothing is zero (with positive smoothing the formula already
    yields the smoothed-uniform answer).
    """

    kind = "ngram"

    def __init__(self, vocabulary: Vocabulary, order: int, smoothing: float,
                 counts: dict[tuple[int, ...], np.ndarray]):
        super().__init__(vocabulary)
        self.order = order
        self.smoothing = smoothing
        self._counts = counts
        self._cache: dict[tuple[int, ...], np.ndarray] = {}
        self._lock = threading.Lock()

    def _distribution(self, context, prompt_tag):
        window = tuple(context[-(self.order - 1):]) if self.order > 1 else ()
        while window not in self._counts:
            if self.smoothing > 0.0:
                break
            window = window[1:]  # () is always present for nonempty corpora
        cached = self._cache.get(window)
        if cached is not None:
            return cached
        size = self.vocabulary.size
        counts = self._counts.get(window)
        if counts is None:
            counts = np.zeros(size)
        vec = (counts + self.smoothing) / (counts.sum() + self.smoothing * size)
        vec.setflags(write=False)
        with self._lock:
            if len(self._cache) < 65536:
                self._cache[window] = vec
        return vec


def tokenize_corpus(corpus: str, tokenizer: str = "char") -> list[str]:
    """Split corpus text into token strings ("char" or "whitespace")."""
    if tokenizer == "char":
        return list(corpus)
    if tokenizer == "whitespace":
        return corpus.split()
    raise SchemaViolation(f"unknown tokenizer {tokenizer!r}")


def train_ngram(corpus: str | list[str], order: int, smoothing: float,
                tokenizer: str = "char", eos_text: str | None = None,
                separator: str | None = None) -> NgramModel:
    """Count n-grams of every length up to ``order`` and build a model.

    ``corpus`` may be one document or a list of documents; counting never
    crosses document boundaries, so training on pre-split documents
    equals training on their concatenation with ``separator`` tokens.
    ``eos_text``, when given, maps that token string to the EOS id so
    corpora can mark terminations explicitly; otherwise EOS receives
    only smoothing mass.
    """
    if order < 1:
        raise SchemaViolation("ngram order must be >= 1")
    if smoothing < 0:
        raise SchemaViolation("smoothing must be nonnegative")
    docs = [corpus] if isinstance(corpus, str) else list(corpus)
    token_docs = []
    for doc in docs:
        toks = tokenize_corpus(doc, tokenizer)
        if separator is not None:
            split: list[list[str]] = [[]]
            for t in toks:
                if t == separator:
                    split.append([])
                else:
                    split[-1].append(t)
            token_docs.extend(s for s in split if s)
        elif toks:
            token_docs.append(toks)
    if not token_docs:
        raise EmptyCorpus("corpus contains no tokens")

    texts = sorted({t for doc in token_docs for t in doc} - {eos_text})
    vocab = Vocabulary.from_tokens(texts + ["<eos>"])
    by_text = {t: i for i, t in enumerate(texts)}
    eos = vocab.eos_id

    counts: dict[tuple[int, ...], np.ndarray] = {}
    for doc in token_docs:
        ids = [eos if t == eos_text else by_text[t] for t in doc]
        for pos in range(len(ids)):
            for width in range(0, order):
                if pos - width < 0:
                    break
                window = tuple(ids[pos - width:pos])
                vec = counts.get(window)
                if vec is None:
                    vec = counts[window] = np.zeros(vocab.size)
                vec[ids[pos]] += 1.0
    return NgramModel(vocab, order, float(smoothing), counts)


def load_table_model(source: str | bytes | dict | Path) -> TableModel:
    """Parse a serialized table model.

    Document shape: ``{"vocab": [token strings, last is EOS],
    "rows": [{"context": [...], "dist": [...], "tag"?: str}],
    "default": "uniform" | [dist], "hint_delimiter"?: token string}``.
    Row distributions must sum to 1 within 1e-6 and are renormalized
    exactly on load.
    """
    if isinstance(source, Path):
        source = source.read_text(encoding="utf-8")
    if isinstance(source, (str, bytes)):
        try:
            doc = json.loads(source)
        except json.JSONDecodeError as exc:
            raise ParseError(f"table model is not valid JSON: line {exc.lineno} "
                             f"column {exc.colno}: {exc.msg}") from exc
    else:
        doc = source
    if not isinstance(doc, dict):
        raise SchemaViolation("table model document must be an object")
    known = {"vocab", "rows", "default", "hint_delimiter"}
    for key in doc:
        if key not in known:
            raise SchemaViolation(f"unknown table-model field {key!r}")
    vocab_list = doc.get("vocab")
    if not isinstance(vocab_list, list) or not all(isinstance(t, str) for t in vocab_list):
        raise SchemaViolation("vocab must be a list of token strings")
    vocab = Vocabulary.from_tokens(vocab_list, doc.get("hint_delimiter"))

    def as_row(dist, where: str) -> np.ndarray:
        if not isinstance(dist, list) or len(dist) != vocab.size:
            raise SchemaViolation(f"{where}: dist must list {vocab.size} probabilities")
        row = np.asarray(dist, dtype=np.float64)
        if np.any(row < 0):
            raise SchemaViolation(f"{where}: negative probability")
        total = row.sum()
        if abs(total - 1.0) > ROW_SUM_TOLERANCE:
            raise RowNotNormalized(f"{where}: row sums to {total:.9f}")
        row = row / total
        row.setflags(write=False)
        return row

    rows: dict[tuple[str | None, tuple[int, ...]], np.ndarray] = {}
    for i, entry in enumerate(doc.get("rows", [])):
        if not isinstance(entry, dict):
            raise SchemaViolation(f"rows[{i}] must be an object")
        ctx_texts = entry.get("context")
        if not isinstance(ctx_texts, list):
            raise SchemaViolation(f"rows[{i}].context must be a list")
        try:
            ctx = tuple(vocab.encode("".join(ctx_texts))) if ctx_texts else ()
        except SchemaViolation:
            raise SchemaViolation(f"rows[{i}].context uses unknown tokens") from None
        tag = entry.get("tag")
        if tag is not None and not isinstance(tag, str):
            raise SchemaViolation(f"rows[{i}].tag must be a string")
        rows[(tag, ctx)] = as_row(entry.get("dist"), f"rows[{i}]")

    default_spec = doc.get("default", "uniform")
    if default_spec == "uniform":
        default = np.full(vocab.size, 1.0 / vocab.size)
        default.setflags(write=False)
    else:
        default = as_row(default_spec, "default")
    return TableModel(vocab, rows, default)


class RemoteModel(TokenModel):
    """HTTP-backed model speaking the next-logprobs wire protocol.

    POST ``{endpoint}/v1/next_logprobs`` with ``{"context": [int],
    "prompt_tag": str}``; the response carries ``{"logprobs": [float]}``
    of vocabulary size. Responses are renormalized defensively and
    cached per (context, prompt_tag) for the lifetime of the adapter
    (one run); the cache is thread-safe.
    """

    kind = "remote"

    def __init__(self, endpoint: str, vocabulary: Vocabulary,
                 http_timeout: float = 10.0):
        super().__init__(vocabulary)
        self.endpoint = endpoint.rstrip("/")
        self.http_timeout = http_timeout
        self._session = requests.Session()
        self._cache: dict[tuple[tuple[int, ...], str], np.ndarray] = {}
        self._lock = threading.Lock()
        # Construction-time health check: one real (cached) query.
        self._fetch((), "health")

    def _distribution(self, context, prompt_tag):
        key = (context, prompt_tag)
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        return self._fetch(context, prompt_tag)

    def _fetch(self, context: tuple[int, ...], prompt_tag: str) -> np.ndarray:
        body = {"context": list(context), "prompt_tag": prompt_tag}
        try:
            resp = self._session.post(self.endpoint + "/v1/next_logprobs",
                                      json=body, timeout=self.http_timeout)
        except requests.RequestException as exc:
            raise RemoteUnavailable(f"model endpoint unreachable: {exc}") from exc
        if 400 <= resp.status_code < 500:
            # the backend rejected the request itself (e.g. context too
            # long for its window) rather than being unavailable
            raise ProtocolError(
                f"model endpoint rejected the query: HTTP {resp.status_code}")
        if resp.status_code != 200:
            raise RemoteUnavailable(
                f"model endpoint returned HTTP {resp.status_code}")
        try:
            payload = resp.json()
            logprobs = payload["logprobs"]
            vec = np.asarray(logprobs, dtype=np.float64)
        except (ValueError, KeyError, TypeError) as exc:
            raise ProtocolError(f"malformed logprobs response: {exc}") from exc
        if vec.shape != (self.vocabulary.size,):
            raise ProtocolError(
                f"logprobs length {vec.shape} does not match vocab size "
                f"{self.vocabulary.size}")
        if np.any(np.isnan(vec)):
            raise ProtocolError("logprobs contain NaN")
        # Defensive renormalization in log space.
        m = np.max(vec)
        if m == NEG_INF:
            raise ProtocolError("logprobs are all -inf")
        probs = np.exp(vec - m)
        probs /= probs.sum()
        probs.setflags(write=False)
        with self._lock:
            self._cache[(context, prompt_tag)] = probs
        return probs


def remote_model_adapter(endpoint: str, vocabulary: Vocabulary,
                         http_timeout: float = 10.0) -> RemoteModel:
    """Connect to a remote next-logprobs backend (health-checked)."""
    return RemoteModel(endpoint, vocabulary, http_timeout=http_timeout)
