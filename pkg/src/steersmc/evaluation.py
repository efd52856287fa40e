"""Metrics and the exact target-distribution oracle.

``brute_force_target`` enumerates every sampling path a plan can take
(all token choices at each stochastic point), accumulating path
probability times the accumulated score per finished sequence. It is
written as its own recursion over plan clauses, independent of the
particle stepping code, so Monte Carlo output can be checked against
it. Paths that would error (budget overruns, empty masks) or fail the
plan check contribute zero mass, matching the weight semantics of the
engine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .constraints import verify
from .errors import EnumerationTooLarge
from .models import ModelQuery, TokenModel
from .steering import (
    HINT_PREFIX,
    SteeringPlan,
    StepClause,
    as_model_set,
    hint_bindings_for,
)

NEG_INF = float("-inf")

ENUMERATION_LIMIT = 10 ** 7


def weighted_pass_at_1(entries) -> float:
    """Fraction of total weight carried by passing candidates.

    ``entries`` are (log_weight, passed) pairs; a ``None`` log weight
    marks a null output and contributes zero weight. Callers without
    weights should pass ``0.0`` for every entry, which reduces the
    metric to the plain pass fraction. Adding a constant to all finite
    log weights leaves the result unchanged.
    """
    entries = list(entries)
    if not entries:
        raise ValueError("weighted_pass_at_1 requires at least one candidate")
    finite = [w for w, _ in entries if w is not None and w != NEG_INF]
    if not finite:
        return 0.0
    m = max(finite)
    total = 0.0
    passing = 0.0
    for log_w, passed in entries:
        if log_w is None:
            continue
        w = math.exp(log_w - m) if log_w != NEG_INF else 0.0
        total += w
        if passed:
            passing += w
    if total == 0.0:
        return 0.0
    return passing / total


def total_variation(p, q, n: int | None = None) -> float:
    """Total variation distance between a probability table and an
    empirical law (counts when ``n`` is given, else probabilities)."""
    keys = set(p) | set(q)
    scale = 1.0 / n if n else 1.0
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0) * scale) for k in keys)


def coherency_proxy(tokens, prior_model: TokenModel,
                    prompt_tag: str = "prior") -> float:
    """Mean per-token log probability under the prior; higher is more
    fluent. An empty sequence scores 0.0."""
    if not tokens:
        return 0.0
    logprob = prior_model.sequence_logprob((), tokens, prompt_tag)
    return logprob / len(tokens)


@dataclass(frozen=True)
class TargetTable:
    """Exact target law over finished token sequences."""

    probs: dict[tuple[int, ...], float]
    z: float
    raw: dict[tuple[int, ...], float]

    def text_probs(self, vocabulary) -> dict[str, float]:
        out: dict[str, float] = {}
        for tokens, p in self.probs.items():
            text = vocabulary.decode(tokens)
            out[text] = out.get(text, 0.0) + p
        return out


def _unroll(steps) -> tuple:
    """Expand fixed-iteration loops into a flat frame list."""
    frames: list[tuple] = []
    for clause in steps:
        if clause.kind == "loop" and clause.iterations is not None:
            body = _unroll(clause.body)
            frames.extend(body * clause.iterations)
        else:
            frames.append(("clause", clause))
    return tuple(frames)


def brute_force_target(plan: SteeringPlan, models, max_len: int) -> TargetTable:
    """Enumerate the plan's exact target distribution.

    ``max_len`` bounds the enumerated sequence length and must cover the
    longest finishable path (the plan's max_tokens is a natural choice).
    """
    models = as_model_set(models)
    vocab = models.vocabulary
    cap = min(max_len, plan.max_tokens)
    if vocab.size ** cap > ENUMERATION_LIMIT:
        raise EnumerationTooLarge(
            f"{vocab.size}^{cap} sequences exceed the enumeration limit")
    raw: dict[tuple[int, ...], float] = {}

    def finish(tokens: tuple[int, ...], text: str, log_qw: float) -> None:
        if log_qw == NEG_INF:
            return
        if plan.check and not verify(plan.check, text).passed:
            return
        raw[tokens] = raw.get(tokens, 0.0) + math.exp(log_qw)

    def proposal_dist(tokens, hints):
        return models.proposal.next_distribution(
            ModelQuery(tokens, plan.proposal_tag, hints))

    def prior_dist(tokens):
        return models.prior.next_distribution(
            ModelQuery(tokens, plan.prior_tag, ()))

    def branch_token(clause: StepClause, tokens, text, hints, log_qw, continue_fn):
        """Branch over every sampleable token at one stochastic point."""
        probs = proposal_dist(tokens, hints)
        if clause.mask is not None:
            mask = clause.mask.build(vocab, text)
            ids = sorted(mask.allowed)
            z = float(sum(probs[i] for i in ids))
            if not ids or z <= 0.0:
                return  # engine would abort; the path carries no mass
        else:
            ids = range(vocab.size)
            z = 1.0
        prior = prior_dist(tokens) if clause.score_with_prior else None
        for tok in ids:
            p = float(probs[tok])
            if p <= 0.0:
                continue
            log_q = math.log(p / z)
            if clause.score_with_prior:
                pr = float(prior[tok])
                if pr <= 0.0:
                    continue  # zero-weight path
                delta = math.log(pr) - log_q
            else:
                delta = math.log(z)
            new_tokens = tokens + (tok,)
            new_text = text + vocab.token_text[tok]
            new_log_qw = log_qw + log_q + delta
            if tok == vocab.eos_id:
                finish(new_tokens, new_text, new_log_qw)
            else:
                continue_fn(new_tokens, new_text, new_log_qw)

    def rec(tokens, text, hints, frames, log_qw):
        if log_qw == NEG_INF:
            return
        if not frames:
            finish(tokens, text, log_qw)
            return
        frame, rest = frames[0], frames[1:]

        if frame[0] == "clause":
            clause: StepClause = frame[1]
            if clause.kind == "sample_until":
                rec(tokens, text, hints, (("sampling", clause, 0),) + rest, log_qw)
            elif clause.kind == "force_string":
                forced = (clause.tokens if clause.tokens is not None
                          else vocab.encode(clause.text))
                if not forced:
                    rec(tokens, text, hints, rest, log_qw)
                    return
                if len(tokens) + len(forced) > plan.max_tokens:
                    return  # budget error path
                delta = models.proposal.sequence_logprob(
                    tokens, forced, plan.proposal_tag, hints=hints)
                new_tokens = tokens + tuple(forced)
                new_text = text + vocab.decode(forced)
                if forced[-1] == vocab.eos_id:
                    finish(new_tokens, new_text, log_qw + delta)
                else:
                    rec(new_tokens, new_text, hints, rest, log_qw + delta)
            elif clause.kind == "masked_sample":
                rec(tokens, text, hints,
                    (("masked", clause, clause.count),) + rest, log_qw)
            elif clause.kind == "hint":
                bindings = hint_bindings_for(plan, text, len(tokens))
                rendered = HINT_PREFIX + clause.template.format(**bindings)
                rec(tokens, text, hints + (rendered,), rest, log_qw)
            elif clause.kind == "loop":
                rec(tokens, text, hints,
                    (("loop_until", clause, 0),) + rest, log_qw)
            else:
                raise ValueError(f"unknown clause kind {clause.kind!r}")

        elif frame[0] == "sampling":
            clause, drawn = frame[1], frame[2]
            if clause.stop.kind == "token_count" and drawn >= clause.stop.value:
                rec(tokens, text, hints, rest, log_qw)
                return
            if clause.stop.kind == "substring" and clause.stop.value in text:
                rec(tokens, text, hints, rest, log_qw)
                return
            if clause.max_new_tokens is not None and drawn >= clause.max_new_tokens:
                return  # budget error path
            if len(tokens) >= plan.max_tokens or len(tokens) >= cap:
                return
            branch_token(
                clause, tokens, text, hints, log_qw,
                lambda tk, tx, lw: rec(
                    tk, tx, hints, (("sampling", clause, drawn + 1),) + rest, lw))

        elif frame[0] == "masked":
            clause, remaining = frame[1], frame[2]
            if remaining == 0:
                rec(tokens, text, hints, rest, log_qw)
                return
            if len(tokens) >= plan.max_tokens or len(tokens) >= cap:
                return
            branch_token(
                clause, tokens, text, hints, log_qw,
                lambda tk, tx, lw: rec(
                    tk, tx, hints, (("masked", clause, remaining - 1),) + rest, lw))

        elif frame[0] == "loop_until":
            clause, done = frame[1], frame[2]
            if _until(clause.stop, tokens, text, vocab):
                rec(tokens, text, hints, rest, log_qw)
                return
            if done >= clause.max_iterations:
                return  # budget error path
            body = tuple(("clause", sub) for sub in clause.body)
            rec(tokens, text, hints,
                body + (("loop_until", clause, done + 1),) + rest, log_qw)

        else:
            raise ValueError(f"unknown frame {frame[0]!r}")

    def _until(stop, tokens, text, vocab):
        if stop.kind == "token_count":
            return len(tokens) >= stop.value
        if stop.kind == "substring":
            return stop.value in text
        if stop.kind == "eos":
            return bool(tokens) and tokens[-1] == vocab.eos_id
        return False

    rec((), "", (), _unroll(plan.steps), 0.0)
    z = sum(raw.values())
    probs = {seq: mass / z for seq, mass in raw.items()} if z > 0 else {}
    return TargetTable(probs=probs, z=z, raw=dict(raw))
