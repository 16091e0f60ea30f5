"""Experiment configuration, the four-step inference protocol with a mock
server, sweep execution over mechanism grids, and the no-free-lunch
verification command.

Two experiment sources are supported:

* gaussian  -- the embedding distribution is an analytic diagonal
  Gaussian; mechanisms are restricted to gaussian/identity noise so the
  protected distribution stays analytic, and all TV terms are computed by
  quadrature. The calibrated attacker runs as a vectorized batch.
* prompts   -- a token-level pipeline over a closed vocabulary: protect,
  attack, and measure, with token-frequency distributions and exact
  discrete TV.

Every grid point derives its randomness from (master seed, grid index),
so sweeps are bit-identical regardless of worker count.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .attack import (
    AttackerKind,
    AttackerSpec,
    calibrated_constants,
    calibrated_radii,
    invert_contextual,
    nearest_neighbor_trace,
    run_calibrated_attacker,
    run_iterative_attacker,
    single_shot_trace,
    BigramModel,
)
from .distributions import (
    DistributionSpec,
    Estimate,
    histogram_over_vocab,
    sample_distribution,
    tv_discrete,
    tv_gaussian_diag,
)
from .embedding import (
    EmbeddingTable,
    EncoderG,
    Prompt,
    Vocabulary,
    embed_prompt,
    load_embedding_file,
    token_embeddings,
    tokenize,
    vocab_diameter,
)
from .errors import (
    AssumptionViolatedError,
    ConfigError,
    ConstantsUnavailableError,
    NflbenchError,
    NonpositiveC1Error,
    SideConditionViolatedError,
)
from .metrics import (
    BoundConstants,
    TradeoffRecord,
    UtilityFunctionSpec,
    check_lemma_bounds,
    check_nfl,
    distortion_extent,
    estimate_alpha,
    estimate_c,
    nfl_decomposition,
    privacy_leakage,
    recovery_extent_report,
    select_optimum,
    utility_loss,
    worst_case_pairs,
)
from .protection import Mechanism, ProtectedPrompt, ProtectionConfig, protect_prompt
from .rng import substream

SCHEMA_VERSION = 1
MIN_SAMPLES = 100


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    seed: int
    n_samples: int
    xi: float
    attacker: AttackerSpec
    mechanisms: list[ProtectionConfig]
    source_kind: str  # "gaussian" | "prompts"
    # gaussian source
    source_mean: Optional[np.ndarray] = None
    source_var: Optional[np.ndarray] = None
    omega: Optional[float] = None
    # prompts source
    embedding_file: Optional[Path] = None
    prompts: Optional[list[str]] = None
    normalize_diameter: bool = False
    # shared
    baseline: Optional[dict] = None
    target_points: Optional[np.ndarray] = None
    target_prompts: Optional[list[str]] = None
    eps_p_orientation: str = "protected_minus_baseline"
    encoder_spec: dict = field(default_factory=lambda: {"kind": "identity"})
    output: Optional[str] = None
    mock_llm: Optional[dict] = None
    debug_corrupt_c1: Optional[float] = None

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "ExperimentConfig":
        base_dir = Path(base_dir) if base_dir else Path.cwd()
        try:
            if int(d.get("schema", -1)) != SCHEMA_VERSION:
                raise ConfigError(f"unsupported schema {d.get('schema')!r}, expected {SCHEMA_VERSION}")
            source = d["source"]
            kind = source["kind"]
            attacker = AttackerSpec.from_dict(d["attacker"])
            mechanisms = [ProtectionConfig.from_dict(m) for m in d["mechanisms"]]
            if not mechanisms:
                raise ConfigError("mechanism grid must be non-empty")
            n_samples = int(d["n_samples"])
            if n_samples < MIN_SAMPLES:
                raise ConfigError(f"n_samples must be >= {MIN_SAMPLES}")
            xi = float(d.get("xi", 1.0))
            if not 0.0 <= xi <= 1.0:
                raise ConfigError("xi must lie in [0, 1]")
            targets = d.get("utility_targets", {})
            cfg = cls(
                seed=int(d["seed"]),
                n_samples=n_samples,
                xi=xi,
                attacker=attacker,
                mechanisms=mechanisms,
                source_kind=kind,
                eps_p_orientation=d.get("eps_p_orientation", "protected_minus_baseline"),
                output=d.get("output"),
                mock_llm=d.get("mock_llm"),
                debug_corrupt_c1=d.get("debug_corrupt_c1"),
                baseline=d.get("baseline"),
                target_points=(
                    np.asarray(targets["points"], dtype=float) if "points" in targets else None
                ),
                target_prompts=targets.get("prompts"),
            )
            if kind == "gaussian":
                cfg.source_mean = np.atleast_1d(np.asarray(source["mean"], dtype=float))
                cfg.source_var = np.atleast_1d(np.asarray(source["var"], dtype=float))
                cfg.omega = float(d["omega"])
                if cfg.target_points is None:
                    raise ConfigError("gaussian source needs utility_targets.points")
            elif kind == "prompts":
                cfg.embedding_file = base_dir / source["embedding_file"]
                cfg.prompts = list(source["prompts"])
                cfg.normalize_diameter = bool(source.get("normalize_diameter", False))
                if not cfg.prompts:
                    raise ConfigError("prompts source needs a non-empty prompt list")
                if cfg.target_prompts is None:
                    raise ConfigError("prompts source needs utility_targets.prompts")
            else:
                raise ConfigError(f"unknown source kind {kind!r}")
            cfg.encoder_spec = d.get("encoder", {"kind": "identity"})
            return cfg
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad experiment config: {exc}") from exc

    @classmethod
    def from_json_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data, base_dir=path.parent)


def _build_encoder(spec: dict, dim: int) -> EncoderG:
    kind = spec.get("kind", "identity")
    if kind == "identity":
        return EncoderG.identity(dim)
    if kind == "scale":
        return EncoderG.scaled(dim, float(spec["factor"]))
    if kind == "matrix":
        return EncoderG(np.asarray(spec["rows"], dtype=float))
    raise ConfigError(f"unknown encoder kind {kind!r}")


@dataclass
class _Context:
    """Everything a grid-point evaluation needs, resolved once per sweep."""

    mode: str
    enc: EncoderG
    util: UtilityFunctionSpec
    omega: float
    # gaussian mode
    p_spec: Optional[DistributionSpec] = None
    pb_spec: Optional[DistributionSpec] = None
    # prompt mode
    table: Optional[EmbeddingTable] = None
    vocab: Optional[Vocabulary] = None
    prompt_pool: Optional[list[Prompt]] = None
    p_probs: Optional[np.ndarray] = None
    pb_probs: Optional[np.ndarray] = None


def prepare_context(config: ExperimentConfig) -> _Context:
    if config.source_kind == "gaussian":
        dim = config.source_mean.size
        p_spec = DistributionSpec.gaussian(config.source_mean, config.source_var)
        if not config.baseline or config.baseline.get("kind") != "gaussian":
            raise ConfigError("gaussian source needs a gaussian baseline distribution")
        pb_spec = DistributionSpec.from_dict(config.baseline)
        if pb_spec.mean.size != dim:
            raise ConfigError("baseline dimension differs from the source")
        enc = _build_encoder(config.encoder_spec, dim)
        util = UtilityFunctionSpec.from_points(config.target_points, config.omega)
        if util.target_embeddings.shape[1] != dim:
            raise ConfigError("utility target dimension differs from the source")
        return _Context(
            mode="gaussian", enc=enc, util=util, omega=config.omega,
            p_spec=p_spec, pb_spec=pb_spec,
        )
    # prompts mode
    try:
        vocab, table = load_embedding_file(
            config.embedding_file, normalize_diameter=config.normalize_diameter
        )
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load embeddings: {exc}") from exc
    enc = _build_encoder(config.encoder_spec, table.dim)
    omega = vocab_diameter(table)
    pool = [tokenize(t, vocab) for t in config.prompts]
    targets = [tokenize(t, vocab) for t in config.target_prompts]
    util = UtilityFunctionSpec.from_prompts(targets, table, omega)
    baseline = config.baseline or {"kind": "uniform"}
    if baseline.get("kind") == "uniform":
        pb_probs = np.full(table.vocab_size, 1.0 / table.vocab_size)
    elif baseline.get("kind") == "discrete":
        pb_probs = np.asarray(baseline["probs"], dtype=float)
        if pb_probs.size != table.vocab_size:
            raise ConfigError("baseline probs length differs from the vocabulary")
    else:
        raise ConfigError("prompts source supports uniform or discrete baselines")
    pool_ids = np.concatenate([np.asarray(p.token_ids) for p in pool])
    return _Context(
        mode="prompts", enc=enc, util=util, omega=omega,
        table=table, vocab=vocab, prompt_pool=pool,
        p_probs=histogram_over_vocab(pool_ids, table.vocab_size),
        pb_probs=pb_probs,
    )


# ---------------------------------------------------------------------------
# mock server + protocol


class MockLLM:
    """Prefix-lookup response table with a nearest-prefix fallback in
    canonical embedding space, so every prompt gets a response."""

    def __init__(self, completions: dict[tuple, tuple], table: EmbeddingTable):
        if not completions:
            raise ValueError("mock LLM needs at least one completion")
        self.table = table
        self._prefixes = [tuple(k) for k in completions]
        self._responses = [tuple(v) for v in completions.values()]
        self._prefix_means = np.stack(
            [table.rows(p).mean(axis=0) for p in self._prefixes]
        )

    @classmethod
    def from_text(
        cls, mapping: dict, vocab: Vocabulary, table: EmbeddingTable
    ) -> "MockLLM":
        completions = {
            tuple(tokenize(k, vocab).token_ids): tuple(tokenize(v, vocab).token_ids)
            for k, v in mapping.items()
        }
        return cls(completions, table)

    def respond(self, prompt: Prompt) -> Prompt:
        ids = prompt.token_ids
        # longest stored prefix the prompt starts with, if any
        best = None
        for i, prefix in enumerate(self._prefixes):
            if len(prefix) <= len(ids) and ids[: len(prefix)] == prefix:
                if best is None or len(prefix) > len(self._prefixes[best]):
                    best = i
        if best is None:
            query = self.table.rows(ids).mean(axis=0)
            d = np.linalg.norm(self._prefix_means - query, axis=1)
            best = int(np.argmin(d))
        return Prompt(self._responses[best])


@dataclass(frozen=True)
class ProtocolResult:
    original: Prompt
    protected: ProtectedPrompt
    response: Prompt
    steps: tuple[str, ...]


def run_protocol(
    prompt: Prompt,
    cfg: ProtectionConfig,
    table: EmbeddingTable,
    llm: MockLLM,
    root: np.random.SeedSequence | None = None,
) -> ProtocolResult:
    """Design -> protect -> submit -> respond, with a step log."""
    steps = [f"design: prompt of {len(prompt)} tokens"]
    protected = protect_prompt(prompt, cfg, table, root=root)
    noise_norms = np.linalg.norm(protected.noise_draws, axis=1)
    steps.append(
        f"protect[{cfg.mechanism.value}]: max noise norm {noise_norms.max():.6g}, "
        f"{sum(a != b for a, b in zip(prompt.token_ids, protected.token_ids))} tokens replaced"
    )
    submitted = protected.prompt()
    steps.append(f"submit: {len(submitted)} protected tokens")
    response = llm.respond(submitted)
    steps.append(f"respond: {len(response)} tokens")
    return ProtocolResult(prompt, protected, response, tuple(steps))


# ---------------------------------------------------------------------------
# sweep evaluation


def _unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def calibrated_recovery_batch(
    originals: np.ndarray,
    observed: np.ndarray,
    radii: np.ndarray,
    omega: float,
    directions: np.ndarray,
    chunk: int = 1024,
) -> tuple[np.ndarray, int]:
    """Recovery extents for the calibrated fixture chasing each observed
    row, measured against the paired original row.

    `directions` are the canonical-space displacement directions (already
    mapped through the encoder inverse when the encoder is not the
    identity). Returns (R values, count of per-iteration errors clamped
    at omega).
    """
    eps = np.asarray(observed, float) - np.asarray(originals, float)
    n = eps.shape[0]
    out = np.empty(n)
    clamped = 0
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        disp = eps[lo:hi, None, :] + radii[None, :, None] * directions[lo:hi, None, :]
        errs = np.linalg.norm(disp, axis=2)
        clamped += int(np.count_nonzero(errs > omega))
        out[lo:hi] = 1.0 - np.minimum(errs, omega).mean(axis=1) / omega
    return out, clamped


def _finish_record(
    record: TradeoffRecord,
    config: ExperimentConfig,
    ctx: _Context,
    *,
    r_protected: np.ndarray,
    r_baseline: np.ndarray,
    delta_per_sample: np.ndarray,
    alpha_inputs: dict,
    tv_errors: float,
) -> None:
    """Estimate the constants and fill in the bound slacks; estimation
    failures are recorded on the point instead of raised."""
    spec = config.attacker
    c0, c2 = calibrated_constants(spec)
    try:
        if record.tv_p_pt <= 1e-15:
            alpha = 0.0  # protected distribution equals the source: the
            # utility bound is vacuously zero and alpha plays no role
        else:
            alpha = estimate_alpha(cap=record.tv_p_pt / 2.0, **alpha_inputs)
        rp_sorted, rb_sorted = worst_case_pairs(r_protected, r_baseline)
        c_hat = estimate_c(rp_sorted, rb_sorted, min_pairs=MIN_SAMPLES)
        if config.debug_corrupt_c1:
            # fault-injection hook: scales C1 by the given factor so the
            # verification path can be shown to fail loudly
            c_hat = c_hat / float(config.debug_corrupt_c1)
        constants = BoundConstants(
            omega=ctx.omega, c=c_hat, alpha=alpha, c_a=ctx.enc.c_a, c_b=ctx.enc.c_b,
            c0=c0, c2=c2, p=spec.p, iterations=spec.iterations,
        )
        record.constants = constants
        slacks = check_lemma_bounds(
            constants,
            r_protected=r_protected,
            delta_per_sample=delta_per_sample,
            eps_p=record.eps_p, eps_p_se=record.eps_p_se,
            eps_u=record.eps_u, eps_u_se=record.eps_u_se,
            tv_ptilde_pbreve=record.tv_pt_pb, tv_p_ptilde=record.tv_p_pt,
        )
        record.slack_l1 = slacks.slack_l1
        record.slack_l2 = slacks.slack_l2
        record.slack_l3 = slacks.slack_l3
        record.nfl_slack = check_nfl(record)
        ratio = constants.C2 / constants.C1
        record.nfl_se = math.sqrt(
            (ratio * record.eps_p_se) ** 2
            + record.eps_u_se**2
            + (constants.C2 * tv_errors) ** 2
        )
    except (
        AssumptionViolatedError,
        SideConditionViolatedError,
        NonpositiveC1Error,
        ConstantsUnavailableError,
    ) as exc:
        record.error = f"{type(exc).__name__}: {exc}"


def _evaluate_gaussian_point(
    config: ExperimentConfig, ctx: _Context, idx: int, pcfg: ProtectionConfig
) -> TradeoffRecord:
    from .protection import gaussian_protected_distribution

    if pcfg.mechanism not in (Mechanism.GAUSSIAN, Mechanism.IDENTITY):
        raise ConfigError(
            "gaussian source supports gaussian/identity mechanisms only "
            f"(got {pcfg.mechanism.value})"
        )
    if config.attacker.kind is not AttackerKind.CALIBRATED:
        raise ConfigError("gaussian source requires the calibrated attacker")
    sigma = pcfg.sigma_eps if pcfg.mechanism is Mechanism.GAUSSIAN else 0.0
    record = TradeoffRecord(mech=pcfg.mechanism.value, param=pcfg.grid_param)
    n, dim = config.n_samples, ctx.p_spec.mean.size
    pt_spec = gaussian_protected_distribution(ctx.p_spec.mean, ctx.p_spec.var, sigma)

    w = sample_distribution(ctx.p_spec, n, substream(config.seed, idx, 0))
    noise = (
        substream(config.seed, idx, 1).normal(0.0, sigma, size=(n, dim))
        if sigma > 0 else np.zeros((n, dim))
    )
    w_tilde = w + noise
    w_breve = sample_distribution(ctx.pb_spec, n, substream(config.seed, idx, 2))

    radii = calibrated_radii(config.attacker)
    dirs_prot = ctx.enc.decode(_unit_rows(substream(config.seed, idx, 3), n, dim))
    dirs_base = ctx.enc.decode(_unit_rows(substream(config.seed, idx, 4), n, dim))
    r_prot, clamp_p = calibrated_recovery_batch(w, w_tilde, radii, ctx.omega, dirs_prot)
    r_base, clamp_b = calibrated_recovery_batch(w, w_breve, radii, ctx.omega, dirs_base)
    record.clamp_events = clamp_p + clamp_b

    eps_p = privacy_leakage(r_prot, r_base, orientation=config.eps_p_orientation)
    record.eps_p, record.eps_p_se = eps_p
    eps_u = utility_loss(ctx.p_spec, pt_spec, ctx.util, n, substream(config.seed, idx, 5))
    record.eps_u, record.eps_u_se = eps_u

    tv_rng = substream(config.seed, idx, 6)
    tv_p_pt = tv_gaussian_diag(ctx.p_spec, pt_spec, rng=tv_rng)
    tv_pt_pb = tv_gaussian_diag(pt_spec, ctx.pb_spec, rng=tv_rng)
    tv_p_pb = tv_gaussian_diag(ctx.p_spec, ctx.pb_spec, rng=tv_rng)
    record.tv_p_pt, record.tv_pt_pb, record.tv_p_pb = (
        tv_p_pt.value, tv_pt_pb.value, tv_p_pb.value,
    )

    delta_samples = np.linalg.norm(ctx.enc.encode(noise), axis=1)
    record.delta = float(delta_samples.mean())

    _finish_record(
        record, config, ctx,
        r_protected=r_prot, r_baseline=r_base, delta_per_sample=delta_samples,
        alpha_inputs=dict(
            p=ctx.p_spec, p_tilde=pt_spec, util=ctx.util,
            n_samples=min(n, 8192), rng=substream(config.seed, idx, 7),
        ),
        tv_errors=tv_p_pt.std_error + tv_pt_pb.std_error + tv_p_pb.std_error,
    )
    return record


def _attack_trace(
    ctx: _Context,
    config: ExperimentConfig,
    protected: ProtectedPrompt,
    target_prompt: Prompt,
    rng: np.random.Generator,
    bigram: Optional[BigramModel],
):
    spec = config.attacker
    if spec.kind is AttackerKind.CALIBRATED:
        return run_calibrated_attacker(target_prompt, ctx.table, ctx.enc, spec, rng)
    if spec.kind is AttackerKind.NEAREST_NEIGHBOR:
        return nearest_neighbor_trace(protected, ctx.table, ctx.enc)
    if spec.kind is AttackerKind.ITERATIVE_GRADIENT:
        return run_iterative_attacker(protected, ctx.table, ctx.enc, spec)
    guesses = [
        invert_contextual(protected.prompt(), bigram, m) for m in range(len(protected))
    ]
    target_enc = ctx.enc.encode(token_embeddings(target_prompt, ctx.table))
    return single_shot_trace(Prompt(tuple(guesses)), ctx.table, ctx.enc, target_enc)


def _evaluate_prompt_point(
    config: ExperimentConfig, ctx: _Context, idx: int, pcfg: ProtectionConfig
) -> TradeoffRecord:
    record = TradeoffRecord(mech=pcfg.mechanism.value, param=pcfg.grid_param)
    n = config.n_samples
    table, pool = ctx.table, ctx.prompt_pool
    calibrated = config.attacker.kind is AttackerKind.CALIBRATED
    bigram = None
    if config.attacker.kind is AttackerKind.CONTEXTUAL_BIGRAM:
        bigram = BigramModel(table.vocab_size).fit(pool)

    pick_rng = substream(config.seed, idx, 0)
    base_rng = substream(config.seed, idx, 1)
    picks = pick_rng.integers(len(pool), size=n)
    r_prot = np.empty(n)
    r_base = np.empty(n)
    deltas = np.empty(n)
    clamps = 0
    orig_embeds = np.empty((n, table.dim))
    prot_embeds = np.empty((n, table.dim))
    protected_ids: list[int] = []
    original_ids: list[int] = []
    for j in range(n):
        original = pool[int(picks[j])]
        protected = protect_prompt(
            original, pcfg, table,
            root=np.random.SeedSequence((config.seed, idx, j, 2)),
        )
        trace = _attack_trace(
            ctx, config, protected, protected.prompt(),
            substream(config.seed, idx, j, 3), bigram,
        )
        r_prot[j], clamp_p = recovery_extent_report(trace, original, table, ctx.omega)
        deltas[j] = distortion_extent(original, protected.prompt(), ctx.enc, table)
        baseline_prompt = Prompt(tuple(
            int(t) for t in base_rng.choice(
                table.vocab_size, size=len(original), p=ctx.pb_probs
            )
        ))
        base_observed = ProtectedPrompt(
            token_ids=baseline_prompt.token_ids,
            perturbed_embeddings=token_embeddings(baseline_prompt, table),
            noise_draws=np.zeros((len(baseline_prompt), table.dim)),
        )
        trace_b = _attack_trace(
            ctx, config, base_observed, baseline_prompt,
            substream(config.seed, idx, j, 4), bigram,
        )
        r_base[j], clamp_b = recovery_extent_report(trace_b, original, table, ctx.omega)
        clamps += clamp_p + clamp_b
        orig_embeds[j] = embed_prompt(original, table)
        prot_embeds[j] = embed_prompt(protected.prompt(), table)
        protected_ids.extend(protected.token_ids)
        original_ids.extend(original.token_ids)
    record.clamp_events = clamps

    eps_p = privacy_leakage(r_prot, r_base, orientation=config.eps_p_orientation)
    record.eps_p, record.eps_p_se = eps_p
    p_emp = DistributionSpec.empirical(orig_embeds)
    pt_emp = DistributionSpec.empirical(prot_embeds)
    eps_u = utility_loss(p_emp, pt_emp, ctx.util, n, substream(config.seed, idx, 5))
    record.eps_u, record.eps_u_se = eps_u

    # token-frequency distributions from the same sampled originals, so an
    # identity mechanism yields TV(P||P~) = 0 exactly
    p_tok = DistributionSpec.discrete(
        histogram_over_vocab(original_ids, table.vocab_size), support=table.matrix
    )
    pt_tok = DistributionSpec.discrete(
        histogram_over_vocab(protected_ids, table.vocab_size), support=table.matrix
    )
    pb_tok = DistributionSpec.discrete(ctx.pb_probs, support=table.matrix)
    record.tv_p_pt = tv_discrete(p_tok, pt_tok)
    record.tv_pt_pb = tv_discrete(pt_tok, pb_tok)
    record.tv_p_pb = tv_discrete(p_tok, pb_tok)
    record.delta = float(deltas.mean())

    if not calibrated:
        return record  # bound certification needs the calibrated fixture
    _finish_record(
        record, config, ctx,
        r_protected=r_prot, r_baseline=r_base, delta_per_sample=deltas,
        alpha_inputs=dict(
            p=p_emp, p_tilde=pt_emp, util=ctx.util,
            n_samples=min(n, 8192), rng=substream(config.seed, idx, 6),
        ),
        tv_errors=0.0,
    )
    return record


def _evaluate_point(
    config: ExperimentConfig, ctx: _Context, idx: int, pcfg: ProtectionConfig
) -> TradeoffRecord:
    try:
        if ctx.mode == "gaussian":
            return _evaluate_gaussian_point(config, ctx, idx, pcfg)
        return _evaluate_prompt_point(config, ctx, idx, pcfg)
    except ConfigError:
        raise
    except NflbenchError as exc:
        return TradeoffRecord(
            mech=pcfg.mechanism.value, param=pcfg.grid_param,
            error=f"{type(exc).__name__}: {exc}",
        )


def sweep(config: ExperimentConfig, *, workers: int = 1) -> list[TradeoffRecord]:
    """Evaluate every grid point; deterministic under (config, seed)
    regardless of worker count, assembled in grid order."""
    ctx = prepare_context(config)
    points = list(enumerate(config.mechanisms))
    if workers <= 1:
        return [_evaluate_point(config, ctx, i, m) for i, m in points]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_evaluate_point, config, ctx, i, m) for i, m in points]
        return [f.result() for f in futures]


# ---------------------------------------------------------------------------
# verification + export


def verify_nfl(
    config: ExperimentConfig, *, workers: int = 1
) -> tuple[int, list[str], list[TradeoffRecord]]:
    """Run the sweep and check every bound slack.

    Exit status 0 when all points pass (assumption-violated points are
    reported separately and do not fail the run), 1 on a genuine bound
    violation.
    """
    if config.attacker.kind is not AttackerKind.CALIBRATED:
        raise ConfigError("verify-nfl requires the calibrated attacker")
    records = sweep(config, workers=workers)
    lines = []
    violations = 0
    skipped = 0
    for i, rec in enumerate(records):
        tag = f"point {i} mech={rec.mech} param={rec.param:.6g}"
        if rec.error is not None:
            skipped += 1
            lines.append(f"{tag}: SKIPPED ({rec.error})")
            continue
        problems = []
        if not rec.nfl_slack >= -3.0 * rec.nfl_se:
            problems.append(f"nfl_slack={rec.nfl_slack:.6g} < -3se={-3 * rec.nfl_se:.6g}")
        parts = nfl_decomposition(rec)
        if not abs(parts.total - rec.nfl_slack) <= 1e-9:
            problems.append(
                f"decomposition drift {abs(parts.total - rec.nfl_slack):.3e} > 1e-9"
            )
        if not rec.slack_l1 >= -1e-9:
            problems.append(f"lemma-1 slack {rec.slack_l1:.6g} < -1e-9")
        if not rec.slack_l2 >= -3.0 * rec.eps_p_se:
            problems.append(f"lemma-2 slack {rec.slack_l2:.6g} < -3se")
        if not rec.slack_l3 >= -3.0 * rec.eps_u_se:
            problems.append(f"lemma-3 slack {rec.slack_l3:.6g} < -3se")
        if problems:
            violations += 1
            lines.append(f"{tag}: VIOLATION {'; '.join(problems)}")
        else:
            lines.append(
                f"{tag}: ok nfl_slack={rec.nfl_slack:.6g} (3se={3 * rec.nfl_se:.3g}) "
                f"l1={rec.slack_l1:.3g} l2={rec.slack_l2:.3g} l3={rec.slack_l3:.3g}"
            )
    lines.append(
        f"summary: {len(records) - violations - skipped} ok, "
        f"{skipped} assumption-violated, {violations} bound violations"
    )
    return (1 if violations else 0), lines, records


def export_results(records: Sequence[TradeoffRecord], fmt: str, path) -> None:
    """Write records as the pinned CSV schema or as a JSON array."""
    if not records:
        raise ValueError("no records to export")
    path = Path(path)
    if fmt == "csv":
        rows = [TradeoffRecord.CSV_HEADER] + [r.csv_row() for r in records]
        path.write_text("\n".join(rows) + "\n")
    elif fmt == "json":
        path.write_text(json.dumps([r.to_dict() for r in records], indent=2) + "\n")
    else:
        raise ValueError(f"unknown export format {fmt!r}")


def load_results_json(path) -> list[TradeoffRecord]:
    data = json.loads(Path(path).read_text())
    return [TradeoffRecord.from_dict(d) for d in data]
