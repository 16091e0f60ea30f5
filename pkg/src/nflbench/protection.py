"""Randomization mechanisms that map a prompt to a protected prompt.

Each mechanism perturbs per-token embeddings with noise and converts the
distorted embeddings back to tokens:

* dchi        -- noise = l*v with l ~ Gamma(pi, 1/eta) and v uniform on the
                 unit ball; the token is replaced by the vocabulary token
                 nearest to the distorted embedding.
* adjacency   -- same noise draw; the token is replaced by a uniform pick
                 from the set of tokens strictly closer to the original
                 than the noise displacement (kept unchanged if empty).
* gaussian    -- i.i.d. N(0, sigma_eps^2) per coordinate, then nearest
                 token.
* identity    -- no-op passthrough.

All draws come from one independent stream per token position, derived
from the config seed, so results are bit-reproducible and independent of
evaluation order.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from . import distributions
from .embedding import EmbeddingTable, Prompt, nearest_token
from .rng import substream


class Mechanism(str, enum.Enum):
    DCHI = "dchi"
    ADJACENCY = "adjacency"
    GAUSSIAN = "gaussian"
    IDENTITY = "identity"


@dataclass(frozen=True)
class ProtectionConfig:
    mechanism: Mechanism
    eta: float = 1.0
    pi_dim: int = 1
    sigma_eps: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mechanism", Mechanism(self.mechanism))
        if self.mechanism in (Mechanism.DCHI, Mechanism.ADJACENCY):
            if self.eta <= 0:
                raise ValueError("eta must be positive")
            if self.pi_dim < 1:
                raise ValueError("pi_dim must be >= 1")
        if self.sigma_eps < 0:
            raise ValueError("sigma_eps must be >= 0")

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def to_dict(self) -> dict:
        return {
            "mechanism": self.mechanism.value,
            "eta": self.eta,
            "pi": self.pi_dim,
            "sigma_eps": self.sigma_eps,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProtectionConfig":
        return cls(
            mechanism=Mechanism(d["mechanism"]),
            eta=float(d.get("eta", 1.0)),
            pi_dim=int(d.get("pi", d.get("pi_dim", 1))),
            sigma_eps=float(d.get("sigma_eps", 0.0)),
            seed=int(d.get("seed", 0)),
        )

    @classmethod
    def from_json(cls, s: str) -> "ProtectionConfig":
        return cls.from_dict(json.loads(s))

    @property
    def grid_param(self) -> float:
        """The parameter a sweep varies for this mechanism."""
        if self.mechanism in (Mechanism.DCHI, Mechanism.ADJACENCY):
            return self.eta
        if self.mechanism is Mechanism.GAUSSIAN:
            return self.sigma_eps
        return 0.0


@dataclass(frozen=True)
class ProtectedPrompt:
    """Protected token ids plus the distorted embeddings and noise draws
    that produced them. unprotected_positions lists adjacency-list tokens
    whose candidate set came up empty and were passed through unchanged."""

    token_ids: tuple[int, ...]
    perturbed_embeddings: np.ndarray  # (L, M)
    noise_draws: np.ndarray  # (L, M)
    unprotected_positions: tuple[int, ...] = field(default=())

    def __post_init__(self):
        pe = np.asarray(self.perturbed_embeddings, dtype=float)
        nd = np.asarray(self.noise_draws, dtype=float)
        if pe.shape != nd.shape or pe.ndim != 2 or pe.shape[0] != len(self.token_ids):
            raise ValueError("inconsistent protected-prompt shapes")
        pe.setflags(write=False)
        nd.setflags(write=False)
        object.__setattr__(self, "perturbed_embeddings", pe)
        object.__setattr__(self, "noise_draws", nd)

    def __len__(self) -> int:
        return len(self.token_ids)

    def prompt(self) -> Prompt:
        return Prompt(self.token_ids)


def sample_unit_ball(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform point in the closed unit ball: normalized Gaussian direction
    scaled by U^(1/dim)."""
    direction = rng.standard_normal(dim)
    norm = np.linalg.norm(direction)
    while norm == 0.0:  # measure-zero, but keep the draw well-defined
        direction = rng.standard_normal(dim)
        norm = np.linalg.norm(direction)
    radius = rng.uniform() ** (1.0 / dim)
    return direction * (radius / norm)


def sample_dchi_components(
    pi_dim: int, eta: float, rng: np.random.Generator
) -> tuple[float, np.ndarray]:
    """(l, v) with l ~ Gamma(shape=pi_dim, scale=1/eta), v uniform on the
    unit ball. E[l] = pi_dim / eta."""
    if pi_dim < 1:
        raise ValueError("pi_dim must be >= 1")
    if eta <= 0:
        raise ValueError("eta must be positive")
    magnitude = float(rng.gamma(shape=pi_dim, scale=1.0 / eta))
    direction = sample_unit_ball(pi_dim, rng)
    return magnitude, direction


def sample_dchi_noise(pi_dim: int, eta: float, rng: np.random.Generator) -> np.ndarray:
    """Noise vector delta = l * v; |delta| <= l."""
    magnitude, direction = sample_dchi_components(pi_dim, eta, rng)
    return magnitude * direction


def perturb_embedding(
    w: np.ndarray, cfg: ProtectionConfig, rng: np.random.Generator
) -> np.ndarray:
    """Distorted embedding w + delta, with delta drawn per the mechanism."""
    w = np.asarray(w, dtype=float)
    if w.ndim != 1:
        raise ValueError("perturb_embedding operates on a single embedding vector")
    mech = cfg.mechanism
    if mech is Mechanism.IDENTITY:
        return w.copy()
    if mech is Mechanism.GAUSSIAN:
        if cfg.sigma_eps == 0.0:
            return w.copy()
        return w + rng.normal(0.0, cfg.sigma_eps, size=w.shape)
    # dchi and adjacency share the Gamma-magnitude, ball-direction draw
    if cfg.pi_dim != w.shape[-1]:
        raise ValueError(
            f"pi_dim={cfg.pi_dim} does not match embedding dimension {w.shape[-1]}"
        )
    return w + sample_dchi_noise(cfg.pi_dim, cfg.eta, rng)


def random_adjacency_list(
    token_id: int, w_tilde: np.ndarray, table: EmbeddingTable
) -> np.ndarray:
    """Ids of tokens strictly closer to token_id's embedding than the noise
    displacement |w - w_tilde|. May be empty."""
    w = table.row(token_id)
    threshold = float(np.linalg.norm(np.asarray(w_tilde, dtype=float) - w))
    dists = np.linalg.norm(table.matrix - w, axis=1)
    mask = dists < threshold
    mask[token_id] = False
    return np.flatnonzero(mask)


def protect_prompt(
    prompt: Prompt,
    cfg: ProtectionConfig,
    table: EmbeddingTable,
    root: np.random.SeedSequence | None = None,
) -> ProtectedPrompt:
    """Apply the configured mechanism token by token.

    Randomness for position m comes from the stream (seed, m); pass `root`
    to rebase the streams (e.g. one root per Monte-Carlo repetition).
    """
    if max(prompt.token_ids) >= table.vocab_size:
        raise ValueError("prompt contains ids outside the table")
    length, dim = len(prompt), table.dim
    out_ids: list[int] = []
    perturbed = np.empty((length, dim))
    noises = np.empty((length, dim))
    unprotected: list[int] = []
    for m, token_id in enumerate(prompt.token_ids):
        rng = substream(cfg.seed, m) if root is None else _rebased(root, m)
        w = table.row(token_id)
        w_tilde = perturb_embedding(w, cfg, rng)
        perturbed[m] = w_tilde
        noises[m] = w_tilde - w
        mech = cfg.mechanism
        if mech is Mechanism.IDENTITY:
            out_ids.append(token_id)
        elif mech in (Mechanism.DCHI, Mechanism.GAUSSIAN):
            out_ids.append(nearest_token(w_tilde, table))
        else:  # adjacency
            candidates = random_adjacency_list(token_id, w_tilde, table)
            if candidates.size == 0:
                out_ids.append(token_id)
                unprotected.append(m)
            else:
                out_ids.append(int(candidates[rng.integers(candidates.size)]))
    return ProtectedPrompt(
        token_ids=tuple(out_ids),
        perturbed_embeddings=perturbed,
        noise_draws=noises,
        unprotected_positions=tuple(unprotected),
    )


def _rebased(root: np.random.SeedSequence, position: int) -> np.random.Generator:
    # Deterministic per-position stream under an explicit root sequence.
    ss = np.random.SeedSequence(
        entropy=root.entropy, spawn_key=tuple(root.spawn_key) + (position,)
    )
    return np.random.Generator(np.random.Philox(ss))


def gaussian_protected_distribution(
    mu0: np.ndarray, sigma0_var: np.ndarray, sigma_eps: float
) -> "distributions.DistributionSpec":
    """Analytic protected distribution for Gaussian-on-Gaussian noise:
    N(mu0, diag(var) + sigma_eps^2 I)."""
    mu0 = np.atleast_1d(np.asarray(mu0, dtype=float))
    var = np.atleast_1d(np.asarray(sigma0_var, dtype=float))
    if np.any(var < 0) or sigma_eps < 0:
        raise ValueError("variances must be >= 0")
    return distributions.DistributionSpec.gaussian(mu0, var + float(sigma_eps) ** 2)
