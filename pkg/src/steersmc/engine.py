"""Monte Carlo inference over steering plans.

Three strategies share one lockstep driver: importance sampling (all
particles advance independently to completion), sequential Monte Carlo
(same loop plus ESS-triggered resampling after each step), and
rejection sampling (no weight accounting; completions filtered by the
plan check). All randomness flows through counter-based streams keyed
on (seed, particle slot, particle step), so outcomes are bit-identical
for a given seed regardless of how many worker threads step particles,
and importance sampling coincides exactly with SMC at a zero resample
threshold.

Error discipline: an empty token mask aborts the run (it is a plan bug
every particle would hit); a particle exceeding a step budget fails
alone and only escalates to a run error when no particle finishes; a
run whose weights all vanish is AllParticlesDead; wall-clock expiry is
Timeout with diagnostics populated up to the interruption point.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AllParticlesDead,
    SteeringError,
    StepBudgetExceeded,
    Timeout,
)
from .rng import RandomStream, _mix, derive_key
from .steering import (
    ACTIVE,
    DONE,
    FAILED,
    ModelSet,
    Particle,
    SteeringPlan,
    as_model_set,
    execute_step,
    run_check,
)

NEG_INF = float("-inf")

METHODS = ("smc", "importance", "rejection")
RESAMPLE_SCHEMES = ("multinomial", "systematic")


@dataclass
class InferenceConfig:
    """Inference strategy and budgets.

    ``ess_threshold`` defaults to half the particle count; zero disables
    resampling entirely. ``jobs`` controls worker threads used to step
    particles; it never affects results.
    """

    method: str = "smc"
    n_particles: int = 16
    ess_threshold: float | None = None
    max_steps: int = 1000
    timeout: float | None = None
    seed: int = 0
    resample_scheme: str = "multinomial"
    jobs: int = 1
    record_weights: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.n_particles < 1:
            raise ValueError("n_particles must be >= 1")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.resample_scheme not in RESAMPLE_SCHEMES:
            raise ValueError(f"unknown resample scheme {self.resample_scheme!r}")
        if self.ess_threshold is not None and not 0 <= self.ess_threshold <= self.n_particles:
            raise ValueError("ess_threshold must lie in [0, n_particles]")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")

    def resolved_ess_threshold(self) -> float:
        return self.n_particles / 2 if self.ess_threshold is None else self.ess_threshold


@dataclass
class Diagnostics:
    """Per-run instrumentation for debugging and trace emission."""

    ess_trace: list[float] = field(default_factory=list)
    resample_events: list[int] = field(default_factory=list)
    per_step_weights: list[list[float]] | None = None
    per_step_texts: list[list[str]] | None = None
    steps_executed: int = 0
    wall_time: float = 0.0


@dataclass(frozen=True)
class WeightedCandidate:
    """One finished (or failed) completion with its normalized weight."""

    tokens: tuple[int, ...]
    normalized_weight: float
    passed_check: bool
    raw_log_weight: float
    text: str


@dataclass
class InferenceOutcome:
    """Candidates plus a selected answer, or a typed error."""

    candidates: list[WeightedCandidate]
    selected: tuple[int, ...] | None
    selected_text: str | None
    diagnostics: Diagnostics
    error: SteeringError | None = None

    @property
    def error_code(self) -> str | None:
        return None if self.error is None else self.error.code

    @property
    def succeeded(self) -> bool:
        return self.error is None


def log_sum_exp(values: np.ndarray) -> float:
    m = float(np.max(values))
    if m == NEG_INF:
        return NEG_INF
    return m + math.log(float(np.sum(np.exp(values - m))))


def normalize_weights(raw_log_weights) -> np.ndarray:
    """Stable softmax of log weights; -inf maps to exactly 0."""
    raw = np.asarray(raw_log_weights, dtype=np.float64)
    m = float(np.max(raw))
    if m == NEG_INF:
        raise AllParticlesDead("no particle carries finite weight")
    w = np.exp(raw - m)
    return w / w.sum()


def effective_sample_size(normalized_weights) -> float:
    """Inverse sum of squared normalized weights, in [1, N]."""
    w = np.asarray(normalized_weights, dtype=np.float64)
    return 1.0 / float(np.sum(w * w))


def resample(particles: list[Particle], normalized_weights, scheme: str,
             rng: RandomStream) -> list[Particle]:
    """Draw an ancestor population proportional to the weights.

    Multinomial draws ancestors i.i.d.; systematic uses one uniform
    offset on a stratified grid (under uniform weights every particle is
    copied exactly once). Every survivor's log weight is reset to the
    log-mean of the pre-resample unnormalized weights, which preserves
    the running normalizing-constant estimate.
    """
    n = len(particles)
    raw = np.array([p.log_weight for p in particles])
    log_mean = log_sum_exp(raw) - math.log(n)
    cum = np.cumsum(np.asarray(normalized_weights, dtype=np.float64))
    cum[-1] = max(cum[-1], 1.0)  # guard rounding at the top of the range
    if scheme == "multinomial":
        points = rng.uniforms(n)
    elif scheme == "systematic":
        points = (np.arange(n) + rng.uniform()) / n
    else:
        raise ValueError(f"unknown resample scheme {scheme!r}")
    ancestors = np.searchsorted(cum, points, side="right")
    np.clip(ancestors, 0, n - 1, out=ancestors)
    out = []
    for a in ancestors:
        child = particles[int(a)].clone()
        child.log_weight = log_mean
        out.append(child)
    return out


def select_answer(candidates: list[WeightedCandidate], rng: RandomStream,
                  mode: str = "sample") -> tuple[int, ...]:
    """Pick a final answer proportional to weight (or argmax)."""
    if not candidates:
        raise AllParticlesDead("no candidates to select from")
    weights = np.array([c.normalized_weight for c in candidates])
    if float(weights.sum()) <= 0.0:
        raise AllParticlesDead("candidate weights are all zero")
    if mode == "sample":
        return candidates[rng.choice(weights)].tokens
    if mode == "argmax":
        return candidates[int(np.argmax(weights))].tokens
    raise ValueError(f"unknown selection mode {mode!r}")


class _Abort(Exception):
    """Internal: wraps a typed error that ends the run."""

    def __init__(self, error: SteeringError):
        super().__init__(error.code)
        self.error = error


def _step_one(plan: SteeringPlan, particle: Particle, models: ModelSet,
              stream: RandomStream, deadline: float | None, weighted: bool):
    update = execute_step(plan, particle, models, stream, deadline=deadline)
    if update.finished:
        ok = run_check(plan, particle.tokens, models.vocabulary)
        particle.passed_check = ok
        if weighted and not ok:
            particle.log_weight = NEG_INF


def _run_lockstep(plan: SteeringPlan, models, config: InferenceConfig,
                  *, resample_enabled: bool, weighted: bool) -> tuple:
    """Shared driver: returns (particles, diagnostics, error|None)."""
    models = as_model_set(models)
    start = time.monotonic()
    deadline = start + config.timeout if config.timeout is not None else None
    n = config.n_particles
    tau = config.resolved_ess_threshold()
    particles = [Particle() for _ in range(n)]
    slot_keys = [derive_key(config.seed, "particle", slot) for slot in range(n)]
    diag = Diagnostics()
    if config.record_weights:
        diag.per_step_weights = []
        diag.per_step_texts = []
    pool = ThreadPoolExecutor(max_workers=config.jobs) if config.jobs > 1 else None
    error: SteeringError | None = None

    def step_slot(slot: int):
        particle = particles[slot]
        stream = RandomStream.from_key(
            _mix(slot_keys[slot] + (particle.steps_taken + 1) * 0x9E3779B97F4A7C15))
        try:
            _step_one(plan, particle, models, stream, deadline, weighted)
            return None
        except SteeringError as exc:
            # StepBudgetExceeded fails one particle; anything else
            # (MaskEmpty, Timeout, remote or schema trouble) is a plan-
            # or backend-level fault that aborts the whole run.
            return exc

    try:
        for t in range(1, config.max_steps + 1):
            if deadline is not None and time.monotonic() > deadline:
                raise _Abort(Timeout("wall-clock budget exhausted",
                                     step_index=t))
            active = [i for i, p in enumerate(particles) if p.status == ACTIVE]
            if pool is not None:
                results = list(pool.map(step_slot, active))
            else:
                results = [step_slot(i) for i in active]
            diag.steps_executed = t
            # Apply per-slot results in slot order so outcomes do not
            # depend on scheduling.
            for slot, exc in zip(active, results):
                if exc is None:
                    continue
                exc.step_index = t
                if isinstance(exc, StepBudgetExceeded):
                    p = particles[slot]
                    p.status = FAILED
                    p.error = exc
                    p.log_weight = NEG_INF
                else:
                    raise _Abort(exc)
            if weighted:
                raw = np.array([p.log_weight for p in particles])
                if float(np.max(raw)) == NEG_INF:
                    raise _Abort(_dead_population_error(particles, t))
                norm = normalize_weights(raw)
                ess = effective_sample_size(norm)
                diag.ess_trace.append(ess)
                if config.record_weights:
                    diag.per_step_weights.append([float(w) for w in norm])
                    diag.per_step_texts.append([p.text for p in particles])
                if resample_enabled and ess < tau:
                    stream = RandomStream(config.seed, "resample", t)
                    particles = resample(particles, norm,
                                         config.resample_scheme, stream)
                    diag.resample_events.append(t)
            if all(p.status != ACTIVE for p in particles):
                break
        else:
            limit_error = StepBudgetExceeded(
                f"engine step limit max_steps={config.max_steps} reached")
            limit_error.step_index = config.max_steps
            for p in particles:
                if p.status == ACTIVE:
                    p.status = FAILED
                    p.error = limit_error
                    p.log_weight = NEG_INF
            if not any(p.status == DONE for p in particles):
                raise _Abort(_dead_population_error(particles, config.max_steps))
    except _Abort as abort:
        error = abort.error
    finally:
        if pool is not None:
            pool.shutdown(wait=False)
    diag.wall_time = time.monotonic() - start
    return particles, diag, error


def _dead_population_error(particles: list[Particle], step: int) -> SteeringError:
    """Escalate a fully dead population to its most specific error."""
    if (all(p.status == FAILED for p in particles)
            and all(isinstance(p.error, StepBudgetExceeded) for p in particles)):
        err: SteeringError = StepBudgetExceeded(
            "every particle exceeded its step budget")
    else:
        err = AllParticlesDead("no particle carries finite weight")
    err.step_index = step
    return err


def _weighted_outcome(particles, diag, error, models, config) -> InferenceOutcome:
    vocab = as_model_set(models).vocabulary
    if error is not None:
        return InferenceOutcome([], None, None, diag, error=error)
    raw = np.array([p.log_weight for p in particles])
    if float(np.max(raw)) == NEG_INF:
        return InferenceOutcome([], None, None, diag,
                                error=_dead_population_error(particles,
                                                             diag.steps_executed))
    norm = normalize_weights(raw)
    candidates = [
        WeightedCandidate(
            tokens=tuple(p.tokens),
            normalized_weight=float(norm[i]),
            passed_check=bool(p.passed_check),
            raw_log_weight=float(raw[i]),
            text=p.text,
        )
        for i, p in enumerate(particles)
    ]
    selected = select_answer(candidates, RandomStream(config.seed, "select"))
    return InferenceOutcome(candidates, selected, vocab.decode(selected), diag)


def run_importance(plan: SteeringPlan, models, config: InferenceConfig) -> InferenceOutcome:
    """Importance sampling: independent completions, softmax reweighting."""
    if config.method != "importance":
        raise ValueError("config.method must be 'importance'")
    particles, diag, error = _run_lockstep(plan, models, config,
                                           resample_enabled=False, weighted=True)
    return _weighted_outcome(particles, diag, error, models, config)


def run_smc(plan: SteeringPlan, models, config: InferenceConfig) -> InferenceOutcome:
    """Sequential Monte Carlo with ESS-triggered resampling."""
    if config.method != "smc":
        raise ValueError("config.method must be 'smc'")
    particles, diag, error = _run_lockstep(plan, models, config,
                                           resample_enabled=True, weighted=True)
    return _weighted_outcome(particles, diag, error, models, config)


def run_rejection(plan: SteeringPlan, models, config: InferenceConfig) -> InferenceOutcome:
    """Best-of-N: unweighted completions filtered by the plan check."""
    if config.method != "rejection":
        raise ValueError("config.method must be 'rejection'")
    particles, diag, error = _run_lockstep(plan, models, config,
                                           resample_enabled=False, weighted=False)
    vocab = as_model_set(models).vocabulary
    if error is not None:
        return InferenceOutcome([], None, None, diag, error=error)
    done = [p for p in particles if p.status == DONE]
    if not done:
        return InferenceOutcome([], None, None, diag,
                                error=_dead_population_error(particles,
                                                             diag.steps_executed))
    passers = sum(1 for p in done if p.passed_check)
    candidates = []
    for p in particles:
        finished = p.status == DONE
        passed = bool(p.passed_check) if finished else False
        candidates.append(WeightedCandidate(
            tokens=tuple(p.tokens),
            normalized_weight=(1.0 / passers) if passed else 0.0,
            passed_check=passed,
            raw_log_weight=0.0 if finished else NEG_INF,
            text=p.text,
        ))
    if passers == 0:
        err = AllParticlesDead("no completion passed the check")
        err.step_index = diag.steps_executed
        return InferenceOutcome(candidates, None, None, diag, error=err)
    selected = select_answer(candidates, RandomStream(config.seed, "select"))
    return InferenceOutcome(candidates, selected, vocab.decode(selected), diag)


def run_inference(plan: SteeringPlan, models, config: InferenceConfig) -> InferenceOutcome:
    """Dispatch on ``config.method``."""
    if config.method == "importance":
        return run_importance(plan, models, config)
    if config.method == "smc":
        return run_smc(plan, models, config)
    return run_rejection(plan, models, config)
