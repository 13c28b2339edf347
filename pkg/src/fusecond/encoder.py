"""Deterministic ViT-style image encoder.

Maps a pixel grid to a (CLS, REG..., patch...) token sequence with 2D
sinusoidal positional encoding and global self-attention, so the
context sensitivity of full-image encoding (vs. cropped regions) can be
exercised without any pretrained weights. All weights are derived from
the config seed via the splitmix64 stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .errors import EmptyRegionError, GeometryError, NumericError, ParameterError
from .patch_grid import ImageGeometry, TokenLayout, token_layout


@dataclass(frozen=True)
class EncoderConfig:
    token_dim: int = 32
    depth: int = 2
    head_count: int = 4
    register_count: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.depth < 0 or self.head_count < 1 or self.token_dim < 1:
            raise ParameterError(f"invalid encoder config {self}")
        if self.token_dim % self.head_count:
            raise ParameterError(
                f"token_dim {self.token_dim} not divisible by head_count {self.head_count}"
            )


@dataclass(frozen=True)
class TokenSequence:
    layout: TokenLayout
    tokens: np.ndarray  # total_count x token_dim

    def __post_init__(self):
        if self.tokens.shape[0] != self.layout.total_count:
            raise GeometryError(
                f"token row count {self.tokens.shape[0]} != layout total "
                f"{self.layout.total_count}"
            )

    @property
    def patch_tokens(self) -> np.ndarray:
        return self.tokens[self.layout.patch_offset :]


def sinusoidal_2d(rows: int, cols: int, dim: int) -> np.ndarray:
    """2D positional encoding: first half of channels encode the row,
    second half the column, each as interleaved sin/cos pairs."""
    half = dim // 2
    out = np.zeros((rows * cols, dim))
    rr, cc = np.divmod(np.arange(rows * cols), cols)
    out[:, :half] = _sincos(rr, half)
    out[:, half : 2 * (dim // 2)] = _sincos(cc, dim - half)
    return out


def _sincos(pos: np.ndarray, dim: int) -> np.ndarray:
    pairs = (dim + 1) // 2
    freqs = 1.0 / (10000.0 ** (np.arange(pairs) / max(pairs, 1)))
    angles = pos[:, None] * freqs[None, :]
    out = np.zeros((pos.shape[0], 2 * pairs))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out[:, :dim]


def softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def multi_head_self_attention(x: np.ndarray, wq, wk, wv, wo, head_count: int) -> np.ndarray:
    n, d = x.shape
    dh = d // head_count
    q = (x @ wq).reshape(n, head_count, dh)
    k = (x @ wk).reshape(n, head_count, dh)
    v = (x @ wv).reshape(n, head_count, dh)
    out = np.zeros((n, head_count, dh))
    for h in range(head_count):
        logits = q[:, h] @ k[:, h].T / np.sqrt(dh)
        out[:, h] = softmax_rows(logits) @ v[:, h]
    return out.reshape(n, d) @ wo


class ToyEncoder:
    """Immutable encoder; encode calls are pure and thread-safe."""

    def __init__(self, cfg: EncoderConfig):
        self.cfg = cfg
        self._block_weights = []
        d = cfg.token_dim
        for b in range(cfg.depth):
            key = lambda name, b=b: rng.derive_seed(cfg.seed, f"enc.block{b}.{name}")
            self._block_weights.append(
                {
                    "wq": rng.xavier_matrix(key("wq"), d, d, (d, d)),
                    "wk": rng.xavier_matrix(key("wk"), d, d, (d, d)),
                    "wv": rng.xavier_matrix(key("wv"), d, d, (d, d)),
                    "wo": rng.xavier_matrix(key("wo"), d, d, (d, d)),
                    "w1": rng.xavier_matrix(key("w1"), d, 2 * d, (d, 2 * d)),
                    "w2": rng.xavier_matrix(key("w2"), 2 * d, d, (2 * d, d)),
                }
            )

    def _special_tokens(self) -> np.ndarray:
        cfg = self.cfg
        return rng.xavier_matrix(
            rng.derive_seed(cfg.seed, "enc.special"),
            cfg.token_dim,
            cfg.token_dim,
            (1 + cfg.register_count, cfg.token_dim),
        )

    def _patch_embed_weights(self, patch_len: int) -> np.ndarray:
        return rng.xavier_matrix(
            rng.derive_seed(self.cfg.seed, f"enc.patch_embed.{patch_len}"),
            patch_len,
            self.cfg.token_dim,
            (patch_len, self.cfg.token_dim),
        )

    def encode_image(self, pixels: np.ndarray, geom: ImageGeometry) -> TokenSequence:
        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.ndim != 3 or pixels.shape[:2] != (geom.height_px, geom.width_px):
            raise GeometryError(
                f"pixel grid shape {pixels.shape} does not match geometry "
                f"{geom.height_px}x{geom.width_px}"
            )
        if not np.isfinite(pixels).all():
            raise NumericError("pixel grid contains non-finite values")
        cfg = self.cfg
        p, ch = geom.patch_size_px, pixels.shape[2]
        # (rows*cols) x (p*p*ch), patches in row-major order
        patches = (
            pixels.reshape(geom.rows, p, geom.cols, p, ch)
            .transpose(0, 2, 1, 3, 4)
            .reshape(geom.patch_count, p * p * ch)
        )
        embedded = patches @ self._patch_embed_weights(p * p * ch)
        embedded = embedded + sinusoidal_2d(geom.rows, geom.cols, cfg.token_dim)
        x = np.concatenate([self._special_tokens(), embedded], axis=0)
        for w in self._block_weights:
            x = x + multi_head_self_attention(
                x, w["wq"], w["wk"], w["wv"], w["wo"], cfg.head_count
            )
            x = x + np.maximum(x @ w["w1"], 0.0) @ w["w2"]
        if not np.isfinite(x).all():
            raise NumericError("encoder produced non-finite tokens")
        return TokenSequence(layout=token_layout(geom, cfg.register_count), tokens=x)

    def encode_cropped(
        self, pixels: np.ndarray, mask: np.ndarray, geom: ImageGeometry
    ) -> TokenSequence:
        """Encodes only the masked region: pixels outside the mask are
        zeroed and the geometry is renormalized to the mask's bounding
        box grown to patch multiples (anchored toward the origin)."""
        pixels = np.asarray(pixels, dtype=np.float64)
        mask = np.asarray(mask)
        if mask.shape != (geom.height_px, geom.width_px):
            raise GeometryError("mask shape does not match geometry")
        set_rows = np.flatnonzero(mask.any(axis=1))
        set_cols = np.flatnonzero(mask.any(axis=0))
        if set_rows.size == 0:
            raise EmptyRegionError("mask selects no pixels")
        p = geom.patch_size_px
        r0, r1 = int(set_rows[0]), int(set_rows[-1]) + 1
        c0, c1 = int(set_cols[0]), int(set_cols[-1]) + 1
        h = -(-(r1 - r0) // p) * p
        w = -(-(c1 - c0) // p) * p
        r0 = min(r0, geom.height_px - h)
        c0 = min(c0, geom.width_px - w)
        sub = pixels[r0 : r0 + h, c0 : c0 + w] * mask[r0 : r0 + h, c0 : c0 + w, None]
        return self.encode_image(sub, ImageGeometry(h, w, p))


def encode_image(pixels, geom: ImageGeometry, cfg: EncoderConfig) -> TokenSequence:
    return ToyEncoder(cfg).encode_image(pixels, geom)


def encode_cropped(pixels, mask, geom: ImageGeometry, cfg: EncoderConfig) -> TokenSequence:
    return ToyEncoder(cfg).encode_cropped(pixels, mask, geom)
