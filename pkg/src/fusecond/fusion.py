"""Unified condition tokens: selection + concatenation with provenance.

Each source contributes its CLS token, all register tokens, and the
patch tokens named by its selection, in ascending patch-index order.
Rows are copied verbatim; nothing is re-encoded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import TokenSequence
from .errors import FusionError, SourceLookupError

KIND_CLS = "CLS"
KIND_REG = "REG"
KIND_PATCH = "PATCH"


@dataclass(frozen=True)
class ConditionSource:
    source_id: str
    tokens: TokenSequence
    selection: np.ndarray  # sorted patch indices

    def __post_init__(self):
        sel = np.asarray(self.selection, dtype=np.int64)
        if sel.size:
            if (np.diff(sel) <= 0).any():
                raise FusionError(f"{self.source_id}: selection must be strictly increasing")
            if sel[0] < 0 or sel[-1] >= self.tokens.layout.patch_count:
                raise FusionError(f"{self.source_id}: selection index out of range")
        object.__setattr__(self, "selection", sel)


@dataclass(frozen=True)
class ProvenanceRow:
    source_id: str
    kind: str  # CLS | REG | PATCH
    patch_index: int | None


@dataclass(frozen=True)
class UnifiedConditionTokens:
    matrix: np.ndarray  # T x token_dim
    provenance: tuple[ProvenanceRow, ...]

    @property
    def token_count(self) -> int:
        return self.matrix.shape[0]


def fuse_conditions(sources: list[ConditionSource]) -> UnifiedConditionTokens:
    if not sources:
        raise FusionError("at least one condition source is required")
    dim = sources[0].tokens.tokens.shape[1]
    reg = sources[0].tokens.layout.register_count
    seen = set()
    rows = []
    provenance: list[ProvenanceRow] = []
    for src in sources:
        if src.source_id in seen:
            raise FusionError(f"duplicate source id {src.source_id!r}")
        seen.add(src.source_id)
        layout = src.tokens.layout
        if src.tokens.tokens.shape[1] != dim or layout.register_count != reg:
            raise FusionError(
                f"{src.source_id}: token_dim/register_count mismatch with first source"
            )
        rows.append(src.tokens.tokens[0])
        provenance.append(ProvenanceRow(src.source_id, KIND_CLS, None))
        for r in range(reg):
            rows.append(src.tokens.tokens[1 + r])
            provenance.append(ProvenanceRow(src.source_id, KIND_REG, None))
        for i in src.selection:
            rows.append(src.tokens.tokens[layout.patch_position(int(i))])
            provenance.append(ProvenanceRow(src.source_id, KIND_PATCH, int(i)))
    return UnifiedConditionTokens(
        matrix=np.vstack(rows), provenance=tuple(provenance)
    )


def columns_of(unified: UnifiedConditionTokens, source_id: str) -> np.ndarray:
    """Row indices of the PATCH rows of one source (CLS/REG excluded)."""
    if not any(p.source_id == source_id for p in unified.provenance):
        raise SourceLookupError(f"unknown source {source_id!r}")
    return np.asarray(
        [
            i
            for i, p in enumerate(unified.provenance)
            if p.source_id == source_id and p.kind == KIND_PATCH
        ],
        dtype=np.int64,
    )


def save_provenance(path, unified: UnifiedConditionTokens) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"PROVENANCE {unified.token_count}\n")
        for p in unified.provenance:
            patch = "-" if p.patch_index is None else str(p.patch_index)
            fh.write(f"{p.source_id} {p.kind} {patch}\n")


def load_provenance(path) -> tuple[ProvenanceRow, ...]:
    from .errors import FormatError

    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("PROVENANCE "):
        raise FormatError(f"{path}: bad provenance header")
    count = int(lines[0].split()[1])
    if len(lines) != count + 1:
        raise FormatError(f"{path}: expected {count} rows")
    out = []
    for line in lines[1:]:
        source_id, kind, patch = line.split()
        if kind not in (KIND_CLS, KIND_REG, KIND_PATCH):
            raise FormatError(f"{path}: bad kind {kind!r}")
        out.append(ProvenanceRow(source_id, kind, None if patch == "-" else int(patch)))
    return tuple(out)
