"""Reconstruction attacks and regret instrumentation.

Attackers consume only the observed (protected) prompt and public tables.
The calibrated attacker is the exception: it is a measurement fixture that
chases a given target with per-iteration encoded-space error exactly
scale * i**(p-1), so its cumulative regret provably sits between
(scale*p/2) * I**p and (scale/p) * I**p for every prefix. Real optimizers
on strongly convex objectives converge too fast for a sublinear-regret
regime, which is why bound certification uses the fixture.
"""

from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .embedding import EmbeddingTable, EncoderG, Prompt, nearest_tokens, token_embeddings
from .errors import (
    DegenerateTraceError,
    EmptyCorpusError,
    InvalidExponentError,
)
from .protection import ProtectedPrompt


class AttackerKind(str, enum.Enum):
    NEAREST_NEIGHBOR = "nearest_neighbor"
    CONTEXTUAL_BIGRAM = "bigram"
    ITERATIVE_GRADIENT = "gradient"
    CALIBRATED = "calibrated"


@dataclass(frozen=True)
class AttackerSpec:
    kind: AttackerKind
    iterations: int = 1
    step_initial: float = 1.0
    step_decay: float = 1.0
    p: float = 0.5
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", AttackerKind(self.kind))
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.kind is AttackerKind.CALIBRATED:
            if not (0.0 < self.p < 1.0):
                raise InvalidExponentError(f"p={self.p} must lie in (0, 1)")
            if self.scale <= 0:
                raise ValueError("scale must be positive")

    def to_dict(self) -> dict:
        d = {"kind": self.kind.value, "iterations": self.iterations}
        if self.kind is AttackerKind.CALIBRATED:
            d.update(p=self.p, scale=self.scale)
        if self.kind is AttackerKind.ITERATIVE_GRADIENT:
            d.update(step_initial=self.step_initial, step_decay=self.step_decay)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "AttackerSpec":
        return cls(
            kind=AttackerKind(d["kind"]),
            iterations=int(d.get("iterations", 1)),
            step_initial=float(d.get("step_initial", 1.0)),
            step_decay=float(d.get("step_decay", 1.0)),
            p=float(d.get("p", 0.5)),
            scale=float(d.get("scale", 1.0)),
        )

    @classmethod
    def from_json(cls, s: str) -> "AttackerSpec":
        return cls.from_dict(json.loads(s))


@dataclass(frozen=True)
class AttackTrace:
    """Per-iteration reconstructions.

    recovered_ids:       (I, L) nearest-token snap of each iterate
    recovered_canonical: (I, L, M) iterates in canonical space (token rows
                         for token-valued attackers, continuous points for
                         the gradient/calibrated attackers)
    recovered_encoded:   (I, L, M) the same iterates under the encoder
    regret_series:       (I,) per-iteration encoded-space distance to the
                         attack's own target, averaged over positions
    """

    recovered_ids: np.ndarray
    recovered_canonical: np.ndarray
    recovered_encoded: np.ndarray
    regret_series: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.recovered_ids, dtype=int)
        canon = np.asarray(self.recovered_canonical, dtype=float)
        enc = np.asarray(self.recovered_encoded, dtype=float)
        reg = np.asarray(self.regret_series, dtype=float)
        if ids.ndim != 2 or canon.shape[:2] != ids.shape or enc.shape != canon.shape:
            raise ValueError("inconsistent trace shapes")
        if reg.shape != (ids.shape[0],):
            raise ValueError("regret series length must equal the iteration count")
        if np.any(reg < 0):
            raise ValueError("regret entries must be >= 0")
        for arr, name in ((ids, "recovered_ids"), (canon, "recovered_canonical"),
                          (enc, "recovered_encoded"), (reg, "regret_series")):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def iterations(self) -> int:
        return self.recovered_ids.shape[0]

    @property
    def prompt_length(self) -> int:
        return self.recovered_ids.shape[1]

    def cumulative_regret(self) -> np.ndarray:
        return np.cumsum(self.regret_series)

    def to_csv(self, path) -> None:
        cum = self.cumulative_regret()
        with open(Path(path), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iter", "mean_regret", "cumulative"])
            for i, (r, c) in enumerate(zip(self.regret_series, cum), start=1):
                writer.writerow([i, f"{r:.9g}", f"{c:.9g}"])


Observed = Union[ProtectedPrompt, np.ndarray]


def _observed_embeddings(observed: Observed, dim: int) -> np.ndarray:
    if isinstance(observed, ProtectedPrompt):
        return observed.perturbed_embeddings
    arr = np.asarray(observed, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ValueError(f"observed embeddings must be (L, {dim})")
    return arr


def invert_nearest_neighbor(observed: Observed, table: EmbeddingTable) -> Prompt:
    """Map each observed embedding to its nearest vocabulary token."""
    ws = _observed_embeddings(observed, table.dim)
    return Prompt(tuple(int(i) for i in nearest_tokens(ws, table)))


def single_shot_trace(
    recovered: Prompt, table: EmbeddingTable, enc: EncoderG, target_encoded: np.ndarray
) -> AttackTrace:
    """Wrap a one-shot reconstruction as an I=1 trace."""
    canon = token_embeddings(recovered, table)[None, :, :]
    encd = enc.encode(canon)
    regret = float(np.linalg.norm(encd[0] - target_encoded, axis=1).mean())
    return AttackTrace(
        recovered_ids=np.asarray(recovered.token_ids, dtype=int)[None, :],
        recovered_canonical=canon,
        recovered_encoded=encd,
        regret_series=np.array([regret]),
    )


def nearest_neighbor_trace(
    observed: Observed, table: EmbeddingTable, enc: EncoderG
) -> AttackTrace:
    ws = _observed_embeddings(observed, table.dim)
    return single_shot_trace(invert_nearest_neighbor(ws, table), table, enc, enc.encode(ws))


class BigramModel:
    """Left-neighbor co-occurrence counts over a declared corpus."""

    def __init__(self, vocab_size: int):
        if vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        self.vocab_size = vocab_size
        self.counts = np.zeros((vocab_size, vocab_size), dtype=np.int64)

    def fit(self, corpus: list[Prompt]) -> "BigramModel":
        for prompt in corpus:
            ids = prompt.token_ids
            for a, b in zip(ids[:-1], ids[1:]):
                self.counts[a, b] += 1
        if self.counts.sum() == 0:
            raise EmptyCorpusError("corpus has no adjacent token pairs")
        return self

    def predict(self, prev_id: int | None) -> int:
        """Most likely next token; uniform prior (hence id 0) when there is
        no left neighbor or the neighbor was never seen."""
        if self.counts.sum() == 0:
            raise EmptyCorpusError("model has zero counts")
        if prev_id is None:
            return 0
        row = self.counts[prev_id]
        if row.sum() == 0:
            return 0
        return int(np.argmax(row))  # argmax breaks ties toward the lowest id


def invert_contextual(protected: Prompt, model: BigramModel, position: int) -> int:
    """Predict the token at `position` from its left neighbor in the
    observed prompt."""
    if not 0 <= position < len(protected):
        raise ValueError("position out of range")
    prev = protected.token_ids[position - 1] if position > 0 else None
    return model.predict(prev)


def run_iterative_attacker(
    observed: Observed,
    table: EmbeddingTable,
    enc: EncoderG,
    spec: AttackerSpec,
) -> AttackTrace:
    """Gradient descent on 0.5*|x - g(w~)|^2 per position, cold-started at
    zero, with step s0/(i+1)**decay at iteration i. Each iterate snaps to
    the nearest token; the regret series records the raw iterate's
    encoded-space distance to its target."""
    if spec.kind is not AttackerKind.ITERATIVE_GRADIENT:
        raise ValueError("spec.kind must be 'gradient'")
    ws = _observed_embeddings(observed, table.dim)
    targets = enc.encode(ws)  # (L, M)
    encoded_rows = enc.encode(table.matrix)
    encoded_table = EmbeddingTable(encoded_rows, role="encoded")
    length, dim = targets.shape
    x = np.zeros((length, dim))
    ids = np.empty((spec.iterations, length), dtype=int)
    regret = np.empty(spec.iterations)
    for i in range(1, spec.iterations + 1):
        step = spec.step_initial / (i + 1) ** spec.step_decay
        x = x - step * (x - targets)
        ids[i - 1] = nearest_tokens(x, encoded_table)
        regret[i - 1] = float(np.linalg.norm(x - targets, axis=1).mean())
    canon = table.matrix[ids]
    return AttackTrace(
        recovered_ids=ids,
        recovered_canonical=canon,
        recovered_encoded=enc.encode(canon.reshape(-1, dim)).reshape(canon.shape),
        regret_series=regret,
    )


def calibrated_radii(spec: AttackerSpec) -> np.ndarray:
    """Exact per-iteration regret radii scale * i**(p-1), i = 1..I."""
    i = np.arange(1, spec.iterations + 1, dtype=float)
    return spec.scale * i ** (spec.p - 1.0)


def calibrated_constants(spec: AttackerSpec) -> tuple[float, float]:
    """(c0, c2) with c0*I**p <= sum_{i<=I} scale*i**(p-1) <= c2*I**p for
    every prefix I (integral bounds on the partial sums)."""
    return spec.scale * spec.p / 2.0, spec.scale / spec.p


def run_calibrated_attacker(
    target: Prompt,
    table: EmbeddingTable,
    enc: EncoderG,
    spec: AttackerSpec,
    rng: np.random.Generator,
) -> AttackTrace:
    """Synthesize iterates at exact encoded-space distance scale*i**(p-1)
    from the target prompt's encoded token embeddings.

    Iterates are continuous points (one random unit direction per
    position), so the recorded regret is exact rather than quantized to
    the token lattice; recovered_ids are the nearest-token snaps.
    """
    if spec.kind is not AttackerKind.CALIBRATED:
        raise ValueError("spec.kind must be 'calibrated'")
    target_canon = token_embeddings(target, table)  # (L, M)
    target_enc = enc.encode(target_canon)
    length, dim = target_enc.shape
    directions = rng.standard_normal((length, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    radii = calibrated_radii(spec)  # (I,)
    encoded = target_enc[None, :, :] + radii[:, None, None] * directions[None, :, :]
    canon = enc.decode(encoded.reshape(-1, dim)).reshape(encoded.shape)
    ids = nearest_tokens(canon, table)
    return AttackTrace(
        recovered_ids=ids,
        recovered_canonical=canon,
        recovered_encoded=encoded,
        regret_series=radii.copy(),
    )


def estimate_regret_exponent(trace: AttackTrace) -> tuple[float, float, float]:
    """(p_hat, c0_hat, c2_hat) from the trace's cumulative regret.

    p_hat is the least-squares slope of log(cumulative) vs log(i) over the
    window i in [I/4, I]; c0_hat/c2_hat are the min/max over all prefixes
    of cumulative(i) / i**p_hat, so the two-sided prefix bound holds for
    every prefix by construction.
    """
    total = trace.iterations
    if total < 16:
        raise ValueError("need at least 16 iterations to fit an exponent")
    cum = trace.cumulative_regret()
    if cum[-1] == 0.0:
        raise DegenerateTraceError("all regrets are zero; exponent undefined")
    i = np.arange(1, total + 1, dtype=float)
    window = i >= total / 4
    usable = window & (cum > 0)
    if usable.sum() < 2:
        raise DegenerateTraceError("not enough positive cumulative regret in the fit window")
    slope, _ = np.polyfit(np.log(i[usable]), np.log(cum[usable]), 1)
    positive = cum > 0
    ratios = cum[positive] / i[positive] ** slope
    return float(slope), float(ratios.min()), float(ratios.max())
