"""Toy rectified-flow transformer over sparse voxel latents.

Two stand-ins live here: a seeded structure generator that produces
initial voxel positions from global-image tokens, and a cross-attention
flow transformer whose per-head pre-softmax logits are captured for
alignment. Convention: data at t=0, noise at t=1, linear path, uniform
Euler steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .encoder import TokenSequence, _sincos, softmax_rows
from .errors import GeometryError, NumericError, ParameterError
from .voxels import SparseVoxelLatent


@dataclass(frozen=True)
class FlowModelConfig:
    latent_dim: int = 32
    token_dim: int = 32
    head_count: int = 4
    block_count: int = 2
    structure_grid: int = 4  # coarse logit resolution D
    grid_size: int = 16  # output lattice resolution N
    seed: int = 0
    max_active: int | None = None  # cap on initial voxel count

    def __post_init__(self):
        if self.latent_dim % self.head_count:
            raise ParameterError(
                f"latent_dim {self.latent_dim} not divisible by head_count {self.head_count}"
            )
        if self.structure_grid > self.grid_size:
            raise ParameterError("structure_grid must not exceed grid_size")
        if min(self.latent_dim, self.token_dim, self.head_count, self.block_count,
               self.structure_grid, self.grid_size) < 1:
            raise ParameterError(f"invalid flow config {self}")


@dataclass(frozen=True)
class SamplerConfig:
    step_count: int = 25
    noise_seed: int = 0
    capture_step: int = 0  # sampling step whose attention is recorded

    def __post_init__(self):
        if self.step_count < 1:
            raise ParameterError("step_count must be >= 1")
        if not 0 <= self.capture_step < self.step_count:
            raise ParameterError("capture_step outside [0, step_count)")


@dataclass(frozen=True)
class CrossAttentionRecord:
    """Raw (pre-softmax, pre-enhancement) logits, shape (B, h, L, T),
    scaled by 1/sqrt(head_dim), plus the capture timestep."""

    logits: np.ndarray
    timestep: float

    @property
    def block_count(self) -> int:
        return self.logits.shape[0]

    @property
    def head_count(self) -> int:
        return self.logits.shape[1]


def positional_embedding_3d(positions: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer lattice coordinates; channels are
    split into three groups encoding x, y, z."""
    d0 = dim // 3
    d1 = dim // 3
    d2 = dim - 2 * (dim // 3)
    parts = [
        _sincos(positions[:, 0].astype(np.float64), d0),
        _sincos(positions[:, 1].astype(np.float64), d1),
        _sincos(positions[:, 2].astype(np.float64), d2),
    ]
    return np.concatenate(parts, axis=1)


def time_embedding(t: float, dim: int) -> np.ndarray:
    return _sincos(np.asarray([t * 100.0], dtype=np.float64), dim)[0]


def noise_to(z0: np.ndarray, t: float, noise_seed: int) -> np.ndarray:
    """Linear forward-noising path: (1-t) * z0 + t * eps with seeded
    standard-normal eps. Endpoints are exact (t=0 returns z0 bit-equal,
    t=1 returns eps)."""
    if not 0.0 <= t <= 1.0:
        raise ParameterError(f"t={t} outside [0,1]")
    if t == 0.0:
        return np.array(z0, copy=True)
    eps = rng.normal_matrix(noise_seed, z0.shape)
    if t == 1.0:
        return eps
    return (1.0 - t) * z0 + t * eps


class FlowTransformer:
    """Immutable toy flow model; all methods are pure and reentrant."""

    def __init__(self, cfg: FlowModelConfig):
        self.cfg = cfg
        c, dt = cfg.latent_dim, cfg.token_dim
        self._blocks = []
        for b in range(cfg.block_count):
            key = lambda name, b=b: rng.derive_seed(cfg.seed, f"flow.block{b}.{name}")
            self._blocks.append(
                {
                    "wq": rng.xavier_matrix(key("wq"), c, c, (c, c)),
                    "wk": rng.xavier_matrix(key("wk"), dt, c, (dt, c)),
                    "wv": rng.xavier_matrix(key("wv"), dt, c, (dt, c)),
                    "wo": rng.xavier_matrix(key("wo"), c, c, (c, c)),
                    "w1": rng.xavier_matrix(key("w1"), c, 2 * c, (c, 2 * c)),
                    "w2": rng.xavier_matrix(key("w2"), 2 * c, c, (2 * c, c)),
                }
            )
        self._w_out = rng.xavier_matrix(
            rng.derive_seed(cfg.seed, "flow.out"), c, c, (c, c)
        )

    # ----- structure path -----

    def init_voxels_from_global(self, global_tokens: TokenSequence) -> np.ndarray:
        """Initial active voxel positions from pooled global patch tokens.

        Pooled tokens go through a seeded linear layer to D^3 logits,
        nearest-neighbor upsampled to N^3, thresholded at 0. If no cell
        is non-negative the single argmax cell is activated. When
        max_active is set, only the top cells by logit are kept (ties by
        lexicographic position).
        """
        cfg = self.cfg
        pooled = global_tokens.patch_tokens.mean(axis=0)
        d3 = cfg.structure_grid**3
        w = rng.xavier_matrix(
            rng.derive_seed(cfg.seed, "flow.structure"),
            cfg.token_dim,
            d3,
            (cfg.token_dim, d3),
        )
        logits = (pooled @ w).reshape((cfg.structure_grid,) * 3)
        m = (np.arange(cfg.grid_size) * cfg.structure_grid) // cfg.grid_size
        ups = logits[np.ix_(m, m, m)]
        flat = ups.ravel()
        active = flat >= 0.0
        if not active.any():
            active = np.zeros_like(active)
            active[np.argmax(flat)] = True
        elif cfg.max_active is not None and active.sum() > cfg.max_active:
            order = np.lexsort((np.arange(flat.size), -flat))
            active = np.zeros_like(active)
            active[order[: cfg.max_active]] = True
        n = cfg.grid_size
        idx = np.flatnonzero(active)
        positions = np.stack(np.unravel_index(idx, (n, n, n)), axis=1)
        return positions.astype(np.int64)

    # ----- latent path -----

    def velocity(
        self,
        positions: np.ndarray,
        latents: np.ndarray,
        t: float,
        tokens: np.ndarray,
        enhancement: np.ndarray | None = None,
    ) -> tuple[np.ndarray, CrossAttentionRecord]:
        """Predicted velocity plus captured per-block/head raw logits.

        When an enhancement matrix is given, logits are multiplied by it
        elementwise before the softmax in every block; the captured
        record always holds the unenhanced logits.
        """
        cfg = self.cfg
        ell, c = latents.shape
        tcount = tokens.shape[0]
        if c != cfg.latent_dim or tokens.shape[1] != cfg.token_dim:
            raise GeometryError("latent or token dimension mismatch")
        if enhancement is not None and enhancement.shape != (ell, tcount):
            raise GeometryError(
                f"enhancement shape {enhancement.shape} != ({ell}, {tcount})"
            )
        h = cfg.head_count
        dh = c // h
        scale = 1.0 / np.sqrt(dh)
        captured = np.empty((cfg.block_count, h, ell, tcount))
        x = latents.astype(np.float64)
        posemb = positional_embedding_3d(positions, c)
        temb = time_embedding(t, c)
        for b, w in enumerate(self._blocks):
            x = x + posemb + temb
            q = (x @ w["wq"]).reshape(ell, h, dh)
            k = (tokens @ w["wk"]).reshape(tcount, h, dh)
            v = (tokens @ w["wv"]).reshape(tcount, h, dh)
            attn_out = np.empty((ell, h, dh))
            for head in range(h):
                logits = q[:, head] @ k[:, head].T * scale
                captured[b, head] = logits
                if enhancement is not None:
                    logits = logits * enhancement
                attn_out[:, head] = softmax_rows(logits) @ v[:, head]
            x = x + attn_out.reshape(ell, c) @ w["wo"]
            x = x + np.maximum(x @ w["w1"], 0.0) @ w["w2"]
        vel = x @ self._w_out
        if not np.isfinite(vel).all():
            raise NumericError("velocity produced non-finite values")
        return vel, CrossAttentionRecord(logits=captured, timestep=t)

    def sample(
        self,
        positions: np.ndarray,
        tokens: np.ndarray,
        scfg: SamplerConfig,
        enhancement: np.ndarray | None = None,
    ) -> tuple[SparseVoxelLatent, CrossAttentionRecord]:
        """Euler integration of the flow from t=1 (noise) to t=0 (data)."""
        positions = np.asarray(positions, dtype=np.int64)
        if positions.shape[0] < 1:
            raise GeometryError("positions must be non-empty")
        steps = scfg.step_count
        z = rng.normal_matrix(
            rng.derive_seed(scfg.noise_seed, "flow.init_noise"),
            (positions.shape[0], self.cfg.latent_dim),
        )
        record = None
        for s in range(steps):
            t = (steps - s) / steps
            vel, rec = self.velocity(positions, z, t, tokens, enhancement)
            if s == scfg.capture_step:
                record = rec
            z = z - vel / steps
            if not np.isfinite(z).all():
                raise NumericError(f"sampling diverged at step {s}")
        slat = SparseVoxelLatent(
            grid_size=self.cfg.grid_size, positions=positions, latents=z
        )
        return slat, record

    def sample_inpaint(
        self,
        initial: SparseVoxelLatent,
        tokens: np.ndarray,
        unaligned: np.ndarray,
        scfg: SamplerConfig,
    ) -> tuple[SparseVoxelLatent, CrossAttentionRecord]:
        """Sampling with latent replacement: after every Euler step at
        time t, rows in `unaligned` are overwritten with the forward-
        noised initial latents at that time. At t=0 those rows equal the
        initial latents exactly."""
        unaligned = np.asarray(unaligned, dtype=np.int64)
        if unaligned.size and (unaligned.min() < 0 or unaligned.max() >= initial.count):
            raise GeometryError("unaligned index out of range")
        steps = scfg.step_count
        positions = initial.positions
        z0 = initial.latents.astype(np.float64)
        inpaint_seed = rng.derive_seed(scfg.noise_seed, "flow.inpaint_noise")
        z = rng.normal_matrix(
            rng.derive_seed(scfg.noise_seed, "flow.init_noise"),
            (positions.shape[0], self.cfg.latent_dim),
        )
        record = None
        for s in range(steps):
            t = (steps - s) / steps
            vel, rec = self.velocity(positions, z, t, tokens)
            if s == scfg.capture_step:
                record = rec
            z = z - vel / steps
            if not np.isfinite(z).all():
                raise NumericError(f"sampling diverged at step {s}")
            if unaligned.size:
                t_next = (steps - s - 1) / steps
                z[unaligned] = noise_to(z0, t_next, inpaint_seed)[unaligned]
        slat = SparseVoxelLatent(
            grid_size=self.cfg.grid_size, positions=positions, latents=z
        )
        return slat, record
