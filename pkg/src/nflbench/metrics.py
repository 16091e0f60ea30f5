"""Recovery extent, privacy leakage, utility loss, bound constants, and
the lemma / no-free-lunch slack checks.

Conventions baked in here:

* Token distance is Euclidean distance between canonical embedding rows;
  per-iteration reconstruction error is the norm of the mean token error,
  clamped at omega so the recovery extent stays in [0, 1] (clamp events
  are counted, not hidden).
* Privacy leakage defaults to R(protected) - R(baseline); the opposite
  sign convention is available via `orientation="baseline_minus_protected"`.
* C1 uses the /c form, which is the weaker (safer) constant since the
  estimated c is always >= 1; the variant without /c is kept alongside.
* Bound checks carry a 3-standard-error statistical tolerance on every
  Monte-Carlo term and ~1e-9 on exact-by-construction terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .attack import AttackTrace
from .distributions import (
    DistributionSpec,
    Estimate,
    sample_distribution,
    tv_discrete,
    tv_gaussian_diag,
)
from .embedding import EmbeddingTable, EncoderG, Prompt, embed_prompt, token_embeddings
from .errors import (
    AssumptionViolatedError,
    ConstantsUnavailableError,
    InsufficientSamplesError,
    LengthMismatchError,
    NonpositiveC1Error,
    SideConditionViolatedError,
    ZeroIterationsError,
)

EXACT_TOL = 1e-9


@dataclass(frozen=True)
class UtilityFunctionSpec:
    """U(w, s) = max(0, 1 - |w - e(s)| / omega), averaged over the test
    targets; always in [0, 1]."""

    target_embeddings: np.ndarray  # (T, M)
    omega: float
    kind: str = "similarity_to_target"

    def __post_init__(self):
        t = np.asarray(self.target_embeddings, dtype=float)
        if t.ndim == 1:
            t = t[:, None]
        if t.ndim != 2 or t.shape[0] < 1:
            raise ValueError("need at least one target embedding")
        if not self.omega > 0:
            raise ValueError("omega must be positive")
        t = np.array(t)
        t.setflags(write=False)
        object.__setattr__(self, "target_embeddings", t)

    @classmethod
    def from_points(cls, points, omega: float) -> "UtilityFunctionSpec":
        return cls(np.asarray(points, dtype=float), omega)

    @classmethod
    def from_prompts(
        cls, prompts: Sequence[Prompt], table: EmbeddingTable, omega: float
    ) -> "UtilityFunctionSpec":
        return cls(np.stack([embed_prompt(p, table) for p in prompts]), omega)

    def utility_batch(self, ws: np.ndarray) -> np.ndarray:
        ws = np.asarray(ws, dtype=float)
        if ws.ndim == 1:
            ws = ws[:, None]
        d = np.linalg.norm(ws[:, None, :] - self.target_embeddings[None, :, :], axis=2)
        return np.maximum(0.0, 1.0 - d / self.omega).mean(axis=1)

    def utility(self, w) -> float:
        return float(self.utility_batch(np.atleast_2d(np.asarray(w, dtype=float)))[0])


@dataclass(frozen=True)
class BoundConstants:
    """Estimated instance constants plus the derived bound coefficients.

    C1 = (1 - (c_b + c2*c_b*I**(p-1)) / omega) / c and C2 = alpha / 2.
    C1_nodivc is the same numerator without the /c division.
    """

    omega: float
    c: float
    alpha: float
    c_a: float
    c_b: float
    c0: float
    c2: float
    p: float
    iterations: int
    C1: float = field(init=False)
    C2: float = field(init=False)
    C1_nodivc: float = field(init=False)

    def __post_init__(self):
        if not self.omega > 0:
            raise ValueError("omega must be positive")
        decay = float(self.iterations) ** (self.p - 1.0)
        numerator = 1.0 - (self.c_b + self.c2 * self.c_b * decay) / self.omega
        if numerator <= 0:
            raise NonpositiveC1Error(
                f"1 - (c_b + c2*c_b*I^(p-1))/omega = {numerator:.6g} <= 0"
            )
        object.__setattr__(self, "C1_nodivc", numerator)
        object.__setattr__(self, "C1", numerator / self.c)
        object.__setattr__(self, "C2", self.alpha / 2.0)

    def to_dict(self) -> dict:
        return {
            "omega": self.omega, "c": self.c, "alpha": self.alpha,
            "c_a": self.c_a, "c_b": self.c_b, "c0": self.c0, "c2": self.c2,
            "p": self.p, "iterations": self.iterations,
            "C1": self.C1, "C2": self.C2, "C1_nodivc": self.C1_nodivc,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BoundConstants":
        return cls(
            omega=d["omega"], c=d["c"], alpha=d["alpha"], c_a=d["c_a"], c_b=d["c_b"],
            c0=d["c0"], c2=d["c2"], p=d["p"], iterations=int(d["iterations"]),
        )


def recovery_errors(trace: AttackTrace, original: Prompt, table: EmbeddingTable) -> np.ndarray:
    """Per-iteration norm of the mean token-reconstruction error, before
    clamping."""
    if trace.iterations == 0:
        raise ZeroIterationsError("attack trace has no iterations")
    if trace.prompt_length != len(original):
        raise LengthMismatchError(
            f"trace length {trace.prompt_length} != prompt length {len(original)}"
        )
    orig = token_embeddings(original, table)  # (L, M)
    mean_diff = (trace.recovered_canonical - orig[None, :, :]).mean(axis=1)  # (I, M)
    return np.linalg.norm(mean_diff, axis=1)


def recovery_extent_report(
    trace: AttackTrace, original: Prompt, table: EmbeddingTable, omega: float
) -> tuple[float, int]:
    """(R, clamp_count): R = 1 - mean_i min(err_i, omega) / omega."""
    if not omega > 0:
        raise ValueError("omega must be positive")
    errs = recovery_errors(trace, original, table)
    clamped = int(np.count_nonzero(errs > omega))
    return 1.0 - float(np.minimum(errs, omega).mean()) / omega, clamped


def recovery_extent(
    trace: AttackTrace, original: Prompt, table: EmbeddingTable, omega: float
) -> float:
    return recovery_extent_report(trace, original, table, omega)[0]


def privacy_leakage(
    r_protected: np.ndarray,
    r_baseline: np.ndarray,
    *,
    orientation: str = "protected_minus_baseline",
    min_samples: int = 100,
) -> Estimate:
    """Monte-Carlo gap between mean recovery under the protected and the
    prompt-independent baseline distributions."""
    rp = np.asarray(r_protected, dtype=float)
    rb = np.asarray(r_baseline, dtype=float)
    if rp.size < min_samples or rb.size < min_samples:
        raise InsufficientSamplesError(
            f"need >= {min_samples} samples per side, got {rp.size} / {rb.size}"
        )
    gap = rp.mean() - rb.mean()
    if orientation == "baseline_minus_protected":
        gap = -gap
    elif orientation != "protected_minus_baseline":
        raise ValueError(f"unknown orientation {orientation!r}")
    se = math.sqrt(rp.var(ddof=1) / rp.size + rb.var(ddof=1) / rb.size)
    return Estimate(float(gap), se)


def utility_loss(
    p: DistributionSpec,
    p_tilde: DistributionSpec,
    util: UtilityFunctionSpec,
    n: int,
    rng: np.random.Generator,
    *,
    min_samples: int = 100,
) -> Estimate:
    """Expected-utility gap E_P[U] - E_P~[U] from n independent draws per
    distribution."""
    if n < min_samples:
        raise InsufficientSamplesError(f"need n >= {min_samples}, got {n}")
    u_orig = util.utility_batch(sample_distribution(p, n, rng))
    u_prot = util.utility_batch(sample_distribution(p_tilde, n, rng))
    se = math.sqrt(u_orig.var(ddof=1) / n + u_prot.var(ddof=1) / n)
    return Estimate(float(u_orig.mean() - u_prot.mean()), se)


def distortion_extent(
    original: Prompt, protected: Prompt, enc: EncoderG, table: EmbeddingTable
) -> float:
    """Distance between the mean encoded embeddings of the two prompts."""
    if len(original) != len(protected):
        raise LengthMismatchError(
            f"prompt lengths differ: {len(original)} vs {len(protected)}"
        )
    g_orig = enc.encode(token_embeddings(original, table)).mean(axis=0)
    g_prot = enc.encode(token_embeddings(protected, table)).mean(axis=0)
    return float(np.linalg.norm(g_orig - g_prot))


def _alpha_from_gaps(gaps: np.ndarray, weights: np.ndarray, cap: float) -> float:
    order = np.argsort(gaps, kind="stable")
    gaps, weights = gaps[order], weights[order]
    levels, starts = np.unique(gaps, return_index=True)
    level_mass = np.add.reduceat(weights, starts)
    cum = np.cumsum(level_mass)
    violating = np.flatnonzero(cum > cap + 1e-15)
    if violating.size == 0:
        return float(levels[-1])  # cap is never exceeded (cap >= total mass)
    g_v = float(levels[violating[0]])
    alpha = math.nextafter(g_v, -math.inf)
    if alpha <= 0.0:
        raise AssumptionViolatedError(
            f"near-optimal mass {cum[violating[0]]:.6g} exceeds cap {cap:.6g} "
            "already as alpha -> 0+"
        )
    return alpha


def estimate_alpha(
    p: DistributionSpec,
    p_tilde: DistributionSpec,
    util: UtilityFunctionSpec,
    *,
    cap: float | None = None,
    tv_p_ptilde: float | None = None,
    n_samples: int = 4096,
    rng: np.random.Generator | None = None,
    u_star: float | None = None,
) -> float:
    """Largest alpha whose near-optimal set carries protected mass at most
    TV(P||P~)/2.

    Discrete distributions are enumerated exactly; otherwise the masses are
    estimated on n_samples draws and the optimum utility u* is the maximum
    over the sampled union of supports (pass u_star to override).
    """
    if cap is None:
        if tv_p_ptilde is None:
            if p.kind == "gaussian" and p_tilde.kind == "gaussian":
                tv_p_ptilde = tv_gaussian_diag(p, p_tilde).value
            elif p.kind == "discrete" and p_tilde.kind == "discrete":
                tv_p_ptilde = tv_discrete(p, p_tilde)
            else:
                raise ValueError("pass cap or tv_p_ptilde for mixed-kind inputs")
        cap = tv_p_ptilde / 2.0
    if cap < 0:
        raise ValueError("cap must be >= 0")

    if p_tilde.kind == "discrete":
        if p_tilde.support is None:
            raise ValueError("discrete protected distribution needs a support")
        u_prot = util.utility_batch(p_tilde.support)
        weights = p_tilde.probs.copy()
        if u_star is None:
            candidates = [u_prot]
            if p.kind == "discrete" and p.support is not None:
                candidates.append(util.utility_batch(p.support))
            elif p.kind == "empirical":
                candidates.append(util.utility_batch(p.samples))
            u_star = float(max(c.max() for c in candidates))
    else:
        if rng is None:
            raise ValueError("sampling path needs an rng")
        prot_samples = sample_distribution(p_tilde, n_samples, rng)
        orig_samples = sample_distribution(p, n_samples, rng)
        u_prot = util.utility_batch(prot_samples)
        weights = np.full(n_samples, 1.0 / n_samples)
        if u_star is None:
            u_star = float(max(u_prot.max(), util.utility_batch(orig_samples).max()))

    gaps = u_star - u_prot
    if np.any(gaps < -1e-12):
        raise ValueError("u_star is below an observed utility")
    return _alpha_from_gaps(np.maximum(gaps, 0.0), weights, float(cap))


def estimate_c(
    r_protected: np.ndarray, r_baseline: np.ndarray, *, min_pairs: int = 1
) -> float:
    """Smallest constant c with R(w~) - R(w) >= R(w~)/c on every supplied
    pair: the max of R(w~) / (R(w~) - R(w))."""
    rp = np.asarray(r_protected, dtype=float)
    rb = np.asarray(r_baseline, dtype=float)
    if rp.shape != rb.shape or rp.ndim != 1:
        raise ValueError("expected two equal-length 1-D arrays of paired R values")
    if rp.size < min_pairs:
        raise InsufficientSamplesError(f"need >= {min_pairs} pairs, got {rp.size}")
    if np.any(rp <= rb):
        worst = int(np.argmax(rb - rp))
        raise AssumptionViolatedError(
            f"pair with R(protected)={rp[worst]:.6g} <= R(baseline)={rb[worst]:.6g}"
        )
    return float(np.max(rp / (rp - rb)))


def worst_case_pairs(
    r_protected: np.ndarray, r_baseline: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Sort protected R ascending against baseline R descending, so the
    elementwise pair set dominates every cross pair (the first pair is
    (min protected, max baseline))."""
    return np.sort(np.asarray(r_protected, float)), np.sort(np.asarray(r_baseline, float))[::-1]


@dataclass(frozen=True)
class LemmaSlacks:
    """Signed slack of each lemma bound with its acceptance tolerance;
    a slack below -tolerance is a violation."""

    slack_l1: float
    slack_l2: float
    slack_l3: float
    tol_l1: float
    tol_l2: float
    tol_l3: float

    @property
    def l1_ok(self) -> bool:
        return self.slack_l1 >= -self.tol_l1

    @property
    def l2_ok(self) -> bool:
        return self.slack_l2 >= -self.tol_l2

    @property
    def l3_ok(self) -> bool:
        return self.slack_l3 >= -self.tol_l3

    @property
    def all_ok(self) -> bool:
        return self.l1_ok and self.l2_ok and self.l3_ok


def check_lemma_bounds(
    constants: BoundConstants,
    *,
    r_protected: np.ndarray,
    delta_per_sample: np.ndarray,
    eps_p: float,
    eps_p_se: float,
    eps_u: float,
    eps_u_se: float,
    tv_ptilde_pbreve: float,
    tv_p_ptilde: float,
) -> LemmaSlacks:
    """Slack of the three lower bounds.

    L1: min over samples of R(w~) - [1 - (c_b*Delta + c2*c_b*I^(p-1))/omega]
        (exact by construction under the calibrated attacker).
    L2: eps_p - C1 * TV(P~||Pbreve).
    L3: eps_u - C2 * TV(P||P~).
    """
    needed = (constants.omega, constants.c_b, constants.c2, constants.p)
    if any(v is None or not np.isfinite(v) for v in needed):
        raise ConstantsUnavailableError("omega/c_b/c2/p must be finite")
    if constants.c_b + constants.c_b * constants.c2 > constants.omega * (1 + 1e-12):
        raise SideConditionViolatedError(
            f"c_b + c_b*c2 = {constants.c_b * (1 + constants.c2):.6g} "
            f"exceeds omega = {constants.omega:.6g}"
        )
    rp = np.asarray(r_protected, dtype=float)
    deltas = np.asarray(delta_per_sample, dtype=float)
    if rp.shape != deltas.shape:
        raise ValueError("r_protected and delta_per_sample must align")
    decay = float(constants.iterations) ** (constants.p - 1.0)
    lower = 1.0 - (constants.c_b * deltas + constants.c2 * constants.c_b * decay) / constants.omega
    slack_l1 = float(np.min(rp - lower))
    # A zero TV makes the corresponding bound vacuously 0 even when the
    # constant behind it could not be estimated.
    bound_l2 = 0.0 if tv_ptilde_pbreve == 0.0 else constants.C1 * tv_ptilde_pbreve
    bound_l3 = 0.0 if tv_p_ptilde == 0.0 else constants.C2 * tv_p_ptilde
    return LemmaSlacks(
        slack_l1=slack_l1,
        slack_l2=float(eps_p - bound_l2),
        slack_l3=float(eps_u - bound_l3),
        tol_l1=EXACT_TOL,
        tol_l2=3.0 * eps_p_se,
        tol_l3=3.0 * eps_u_se,
    )


class NflParts(NamedTuple):
    """Decomposition of the no-free-lunch slack into its proof pieces."""

    lemma_privacy: float  # (C2/C1) * (eps_p - C1 * TV(P~||Pbreve))
    lemma_utility: float  # eps_u - C2 * TV(P||P~)
    triangle: float  # C2 * (TV(P||P~) + TV(P~||Pbreve) - TV(P||Pbreve))

    @property
    def total(self) -> float:
        return self.lemma_privacy + self.lemma_utility + self.triangle


@dataclass
class TradeoffRecord:
    """One sweep grid point: mechanism, measured quantities, constants,
    and bound slacks. `error` holds a per-point failure instead of
    aborting the sweep."""

    mech: str
    param: float
    eps_p: float = math.nan
    eps_p_se: float = math.nan
    eps_u: float = math.nan
    eps_u_se: float = math.nan
    delta: float = math.nan
    tv_p_pt: float = math.nan
    tv_pt_pb: float = math.nan
    tv_p_pb: float = math.nan
    constants: Optional[BoundConstants] = None
    nfl_slack: float = math.nan
    nfl_se: float = math.nan
    slack_l1: float = math.nan
    slack_l2: float = math.nan
    slack_l3: float = math.nan
    clamp_events: int = 0
    error: Optional[str] = None

    CSV_HEADER = (
        "mech,param,eps_p,eps_p_se,eps_u,eps_u_se,delta,"
        "tv_p_pt,tv_pt_pb,tv_p_pb,C1,C2,nfl_slack"
    )

    def csv_row(self) -> str:
        c1 = self.constants.C1 if self.constants else math.nan
        c2 = self.constants.C2 if self.constants else math.nan
        vals = [
            self.param, self.eps_p, self.eps_p_se, self.eps_u, self.eps_u_se,
            self.delta, self.tv_p_pt, self.tv_pt_pb, self.tv_p_pb, c1, c2,
            self.nfl_slack,
        ]
        return ",".join([self.mech] + [f"{v:.9g}" for v in vals])

    def to_dict(self) -> dict:
        def clean(x):
            return None if (isinstance(x, float) and not math.isfinite(x)) else x

        d = {
            "mech": self.mech, "param": self.param,
            "eps_p": clean(self.eps_p), "eps_p_se": clean(self.eps_p_se),
            "eps_u": clean(self.eps_u), "eps_u_se": clean(self.eps_u_se),
            "delta": clean(self.delta),
            "tv_p_pt": clean(self.tv_p_pt), "tv_pt_pb": clean(self.tv_pt_pb),
            "tv_p_pb": clean(self.tv_p_pb),
            "nfl_slack": clean(self.nfl_slack), "nfl_se": clean(self.nfl_se),
            "slack_l1": clean(self.slack_l1), "slack_l2": clean(self.slack_l2),
            "slack_l3": clean(self.slack_l3),
            "clamp_events": self.clamp_events, "error": self.error,
            "constants": (
                {k: clean(v) for k, v in self.constants.to_dict().items()}
                if self.constants else None
            ),
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TradeoffRecord":
        def num(x):
            return math.nan if x is None else float(x)

        constants = None
        if d.get("constants"):
            constants = BoundConstants.from_dict(d["constants"])
        return cls(
            mech=d["mech"], param=float(d["param"]),
            eps_p=num(d.get("eps_p")), eps_p_se=num(d.get("eps_p_se")),
            eps_u=num(d.get("eps_u")), eps_u_se=num(d.get("eps_u_se")),
            delta=num(d.get("delta")),
            tv_p_pt=num(d.get("tv_p_pt")), tv_pt_pb=num(d.get("tv_pt_pb")),
            tv_p_pb=num(d.get("tv_p_pb")),
            nfl_slack=num(d.get("nfl_slack")), nfl_se=num(d.get("nfl_se")),
            slack_l1=num(d.get("slack_l1")), slack_l2=num(d.get("slack_l2")),
            slack_l3=num(d.get("slack_l3")),
            clamp_events=int(d.get("clamp_events", 0)), error=d.get("error"),
            constants=constants,
        )


def check_nfl(record: TradeoffRecord) -> float:
    """Slack of (C2/C1) * eps_p + eps_u >= C2 * TV(P||Pbreve)."""
    if record.constants is None:
        raise ConstantsUnavailableError("record has no bound constants")
    c1, c2 = record.constants.C1, record.constants.C2
    if not c1 > 0:
        raise NonpositiveC1Error(f"C1 = {c1!r} is not positive")
    if not np.isfinite(c2):
        raise ConstantsUnavailableError("C2 (alpha/2) is not available")
    return float((c2 / c1) * record.eps_p + record.eps_u - c2 * record.tv_p_pb)


def nfl_decomposition(record: TradeoffRecord) -> NflParts:
    """The slack as the sum of the two lemma slacks plus the TV triangle
    slack; the parts recombine to check_nfl exactly (algebraic identity)."""
    if record.constants is None:
        raise ConstantsUnavailableError("record has no bound constants")
    c1, c2 = record.constants.C1, record.constants.C2
    if not c1 > 0:
        raise NonpositiveC1Error(f"C1 = {c1!r} is not positive")
    return NflParts(
        lemma_privacy=(c2 / c1) * (record.eps_p - c1 * record.tv_pt_pb),
        lemma_utility=record.eps_u - c2 * record.tv_p_pt,
        triangle=c2 * (record.tv_p_pt + record.tv_pt_pb - record.tv_p_pb),
    )


def select_optimum(records: Sequence[TradeoffRecord], xi: float) -> Optional[TradeoffRecord]:
    """Among grid points with eps_p <= xi, the one with minimal eps_u
    (first such point on ties); None when nothing is feasible. A failed
    constants stage does not disqualify a point whose trade-off
    measurements are valid."""
    best = None
    for rec in records:
        if not math.isfinite(rec.eps_p) or not math.isfinite(rec.eps_u):
            continue
        if rec.eps_p <= xi and (best is None or rec.eps_u < best.eps_u):
            best = rec
    return best
