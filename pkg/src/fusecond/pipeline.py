"""End-to-end orchestration and run artifacts.

Stage order: encode global image and initialize voxels; encode each
local image and select its patch tokens; align each local region to
voxels through captured cross-attention; take the unaligned complement
and reverse-align it to global tokens; fuse all retained tokens; build
the enhancement matrix; sample the final voxel latents.

Per-image encode+align work may run on a thread pool; results are
combined in source order so output never depends on schedule. The
FUSECOND_THREADS environment variable caps the pool size.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import rng, tensor_io
from .alignment import forward_align, reverse_align
from .config import PipelineConfig, manifest_entries
from .encoder import TokenSequence, ToyEncoder
from .enhancement import EnhancementSource, build_enhancement, default_lambda
from .errors import ConfigError, FormatError, GeometryError
from .flow import CrossAttentionRecord, FlowTransformer, SamplerConfig
from .fusion import ConditionSource, UnifiedConditionTokens, columns_of, fuse_conditions, save_provenance
from .patch_grid import ImageGeometry, downsample_mask, patch_indices
from .voxels import SparseVoxelLatent, unaligned_complement

GLOBAL_SOURCE = "global"


@dataclass
class LocalResult:
    name: str
    tokens: TokenSequence
    patch_selection: np.ndarray  # D_k in the token sequence's own grid
    patch_total: int
    aligned_pre: np.ndarray
    aligned_post: np.ndarray
    scores: np.ndarray


@dataclass
class RunArtifacts:
    config: PipelineConfig
    positions: np.ndarray
    locals: list[LocalResult]
    unaligned: np.ndarray
    global_token_selection: np.ndarray  # D_g patch indices, empty in inpaint mode
    global_scores: np.ndarray | None
    unified: UnifiedConditionTokens | None
    enhancement: np.ndarray | None
    resolved_lambdas: dict
    final: SparseVoxelLatent
    timings: dict


def effective_threads(requested: int) -> int:
    cap = os.environ.get("FUSECOND_THREADS")
    if cap is not None:
        try:
            cap_value = int(cap)
        except ValueError as exc:
            raise ConfigError(f"FUSECOND_THREADS must be an integer, got {cap!r}") from exc
        if cap_value < 1:
            raise ConfigError("FUSECOND_THREADS must be >= 1")
        return min(requested, cap_value)
    return requested


def _load_image(path: Path, patch_size: int) -> tuple[np.ndarray, ImageGeometry]:
    pixels = tensor_io.load_tensor(path)
    if pixels.ndim != 3:
        raise FormatError(f"{path}: image tensor must be H x W x Ch")
    geom = ImageGeometry(pixels.shape[0], pixels.shape[1], patch_size)
    return pixels.astype(np.float64), geom


def capture_attention(
    model: FlowTransformer,
    positions: np.ndarray,
    tokens: np.ndarray,
    scfg: SamplerConfig,
) -> CrossAttentionRecord:
    """Runs the sampler just far enough to record attention at the
    configured capture step."""
    z = rng.normal_matrix(
        rng.derive_seed(scfg.noise_seed, "flow.init_noise"),
        (positions.shape[0], model.cfg.latent_dim),
    )
    steps = scfg.step_count
    for s in range(scfg.capture_step + 1):
        t = (steps - s) / steps
        vel, rec = model.velocity(positions, z, t, tokens)
        if s == scfg.capture_step:
            return rec
        z = z - vel / steps
    raise AssertionError("unreachable")


def _process_local(
    loc,
    cfg: PipelineConfig,
    encoder: ToyEncoder,
    model: FlowTransformer,
    positions: np.ndarray,
) -> LocalResult:
    pixels, geom = _load_image(loc.image_path, cfg.patch_size)
    mask = tensor_io.load_mask(loc.mask_path)
    if mask.shape != (geom.height_px, geom.width_px):
        raise GeometryError(
            f"{loc.name}: mask shape {mask.shape} does not match image "
            f"{geom.height_px}x{geom.width_px}"
        )
    if cfg.mode == "no_mcfm_ablation":
        # ablation path: encode the cropped region alone; every patch of
        # the crop is the selection
        tokens = encoder.encode_cropped(pixels, mask, geom)
        selection = np.arange(tokens.layout.patch_count, dtype=np.int64)
        patch_total = tokens.layout.patch_count
    else:
        tokens = encoder.encode_image(pixels, geom)
        pmask = downsample_mask(mask, geom, cfg.coverage_threshold)
        selection = patch_indices(pmask)
        patch_total = geom.patch_count
    record = capture_attention(model, positions, tokens.tokens, cfg.sampler)
    columns = tokens.layout.patch_offset + selection
    pre, post, scores = forward_align(record, columns, cfg.alignment, positions)
    return LocalResult(
        name=loc.name,
        tokens=tokens,
        patch_selection=selection,
        patch_total=patch_total,
        aligned_pre=pre,
        aligned_post=post,
        scores=scores,
    )


def _resolve_lambda(cfg: PipelineConfig, name: str, selected: int, total: int) -> float:
    if name in cfg.lambda_overrides:
        return cfg.lambda_overrides[name]
    return default_lambda(selected, total, cfg.beta)


@dataclass
class AlignmentStages:
    """Output of pipeline stages 1-4 (everything before fusion)."""

    encoder: ToyEncoder
    model: FlowTransformer
    g_tokens: TokenSequence
    g_geom: ImageGeometry
    positions: np.ndarray
    locals: list[LocalResult]
    unaligned: np.ndarray
    global_token_selection: np.ndarray
    global_scores: np.ndarray
    timings: dict


def run_alignment_stages(cfg: PipelineConfig) -> AlignmentStages:
    timings: dict[str, float] = {}
    t_start = time.perf_counter()

    encoder = ToyEncoder(cfg.encoder)
    model = FlowTransformer(cfg.flow)

    # stage 1: global encoding and voxel initialization
    g_pixels, g_geom = _load_image(cfg.global_image_path, cfg.patch_size)
    g_tokens = encoder.encode_image(g_pixels, g_geom)
    positions = model.init_voxels_from_global(g_tokens)
    voxel_count = positions.shape[0]
    timings["init"] = time.perf_counter() - t_start

    # stages 2-3: per-local encode + forward alignment (parallelizable)
    t_stage = time.perf_counter()
    workers = effective_threads(cfg.threads)
    if workers > 1 and len(cfg.locals) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            local_results = list(
                pool.map(
                    lambda loc: _process_local(loc, cfg, encoder, model, positions),
                    cfg.locals,
                )
            )
    else:
        local_results = [
            _process_local(loc, cfg, encoder, model, positions) for loc in cfg.locals
        ]
    timings["locals"] = time.perf_counter() - t_stage

    # stage 4: complement + reverse alignment on the global image
    t_stage = time.perf_counter()
    unaligned = unaligned_complement(
        [res.aligned_post for res in local_results], voxel_count
    )
    record_g = capture_attention(model, positions, g_tokens.tokens, cfg.sampler)
    kept_cols, global_scores = reverse_align(record_g, unaligned, cfg.alignment)
    offset = g_tokens.layout.patch_offset
    d_g = kept_cols[kept_cols >= offset] - offset  # PATCH rows only
    timings["alignment"] = time.perf_counter() - t_stage

    return AlignmentStages(
        encoder=encoder,
        model=model,
        g_tokens=g_tokens,
        g_geom=g_geom,
        positions=positions,
        locals=local_results,
        unaligned=unaligned,
        global_token_selection=d_g,
        global_scores=global_scores,
        timings=timings,
    )


def run_pipeline(cfg: PipelineConfig, out_dir: str | os.PathLike | None = None) -> RunArtifacts:
    t_start = time.perf_counter()
    stages = run_alignment_stages(cfg)
    timings = stages.timings
    model = stages.model
    g_tokens = stages.g_tokens
    g_geom = stages.g_geom
    positions = stages.positions
    local_results = stages.locals
    unaligned = stages.unaligned
    d_g = stages.global_token_selection
    global_scores = stages.global_scores
    voxel_count = positions.shape[0]

    # stages 5-7
    t_stage = time.perf_counter()
    resolved_lambdas: dict[str, float] = {}
    if cfg.mode == "inpaint":
        initial, _ = model.sample(positions, g_tokens.tokens, cfg.sampler)
        local_sources = [
            ConditionSource(res.name, res.tokens, res.patch_selection)
            for res in local_results
        ]
        unified = fuse_conditions(local_sources)
        final, _ = model.sample_inpaint(initial, unified.matrix, unaligned, cfg.sampler)
        enhancement = None
        d_g = np.empty(0, dtype=np.int64)
        global_scores = None
    else:
        sources = [
            ConditionSource(res.name, res.tokens, res.patch_selection)
            for res in local_results
        ]
        sources.append(ConditionSource(GLOBAL_SOURCE, g_tokens, d_g))
        unified = fuse_conditions(sources)
        if cfg.enhancement_enabled:
            enh_sources = []
            for res in local_results:
                lam = _resolve_lambda(
                    cfg, res.name, res.patch_selection.size, res.patch_total
                )
                resolved_lambdas[res.name] = lam
                enh_sources.append(
                    EnhancementSource(
                        rows=res.aligned_post,
                        cols=columns_of(unified, res.name),
                        strength=lam,
                    )
                )
            lam_g = _resolve_lambda(cfg, GLOBAL_SOURCE, d_g.size, g_geom.patch_count)
            resolved_lambdas[GLOBAL_SOURCE] = lam_g
            enh_sources.append(
                EnhancementSource(
                    rows=unaligned,
                    cols=columns_of(unified, GLOBAL_SOURCE),
                    strength=lam_g,
                )
            )
            enhancement = build_enhancement(
                enh_sources, voxel_count, unified.token_count
            )
        else:
            enhancement = None
        final, _ = model.sample(positions, unified.matrix, cfg.sampler, enhancement)
    timings["generation"] = time.perf_counter() - t_stage
    timings["total"] = time.perf_counter() - t_start

    artifacts = RunArtifacts(
        config=cfg,
        positions=positions,
        locals=local_results,
        unaligned=unaligned,
        global_token_selection=d_g,
        global_scores=global_scores,
        unified=unified,
        enhancement=enhancement,
        resolved_lambdas=resolved_lambdas,
        final=final,
        timings=timings,
    )
    if out_dir is not None:
        write_artifacts(artifacts, Path(out_dir))
    return artifacts


def write_artifacts(artifacts: RunArtifacts, out_dir: Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = manifest_entries(artifacts.config)
    entries["voxel.count"] = str(artifacts.positions.shape[0])
    for name, lam in sorted(artifacts.resolved_lambdas.items()):
        entries[f"resolved.lambda.{name}"] = repr(lam)
    with open(out_dir / "manifest.txt", "w", encoding="utf-8") as fh:
        for key in sorted(entries):
            fh.write(f"{key} = {entries[key]}\n")
    with open(out_dir / "timings.txt", "w", encoding="utf-8") as fh:
        for key, value in artifacts.timings.items():
            fh.write(f"{key} = {value:.6f}\n")

    for res in artifacts.locals:
        tensor_io.save_indices(out_dir / f"{res.name}.patch_selection.txt", res.patch_selection)
        tensor_io.save_indices(out_dir / f"{res.name}.aligned_pre.txt", res.aligned_pre)
        tensor_io.save_indices(out_dir / f"{res.name}.aligned_post.txt", res.aligned_post)
        tensor_io.save_tensor(out_dir / f"{res.name}.scores.fus3", res.scores)
    tensor_io.save_indices(out_dir / "unaligned.txt", artifacts.unaligned)
    tensor_io.save_indices(
        out_dir / "global.token_selection.txt", artifacts.global_token_selection
    )
    if artifacts.global_scores is not None:
        tensor_io.save_tensor(out_dir / "global.scores.fus3", artifacts.global_scores)
    if artifacts.unified is not None:
        tensor_io.save_tensor(out_dir / "unified_tokens.fus3", artifacts.unified.matrix)
        save_provenance(out_dir / "provenance.txt", artifacts.unified)
    if artifacts.enhancement is not None:
        tensor_io.save_tensor(out_dir / "enhancement.fus3", artifacts.enhancement)
    tensor_io.save_slat(
        out_dir / "final.slat",
        artifacts.final.grid_size,
        artifacts.final.positions,
        artifacts.final.latents,
    )


def write_alignment_artifacts(stages: AlignmentStages, cfg: PipelineConfig, out_dir: Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = manifest_entries(cfg)
    entries["voxel.count"] = str(stages.positions.shape[0])
    with open(out_dir / "manifest.txt", "w", encoding="utf-8") as fh:
        for key in sorted(entries):
            fh.write(f"{key} = {entries[key]}\n")
    for res in stages.locals:
        tensor_io.save_indices(out_dir / f"{res.name}.patch_selection.txt", res.patch_selection)
        tensor_io.save_indices(out_dir / f"{res.name}.aligned_pre.txt", res.aligned_pre)
        tensor_io.save_indices(out_dir / f"{res.name}.aligned_post.txt", res.aligned_post)
        tensor_io.save_tensor(out_dir / f"{res.name}.scores.fus3", res.scores)
    tensor_io.save_indices(out_dir / "unaligned.txt", stages.unaligned)
    tensor_io.save_indices(
        out_dir / "global.token_selection.txt", stages.global_token_selection
    )
    tensor_io.save_tensor(out_dir / "global.scores.fus3", stages.global_scores)


def render_alignment_summary(stages: AlignmentStages) -> str:
    """Structured text: per source voxel counts before/after refinement,
    a 16-bin score histogram over [0,1], and selected token counts."""
    lines = []
    for res in stages.locals:
        lines.append(f"[{res.name}]")
        lines.append(f"  selected_tokens: {res.patch_selection.size}")
        lines.append(f"  aligned_voxels_pre_refine: {res.aligned_pre.size}")
        lines.append(f"  aligned_voxels_post_refine: {res.aligned_post.size}")
        hist = score_histogram(res.scores)
        lines.append("  score_histogram: " + " ".join(str(int(v)) for v in hist))
    lines.append("[global]")
    lines.append(f"  unaligned_voxels: {stages.unaligned.size}")
    lines.append(f"  selected_tokens: {stages.global_token_selection.size}")
    hist = score_histogram(stages.global_scores)
    lines.append("  score_histogram: " + " ".join(str(int(v)) for v in hist))
    return "\n".join(lines)


def load_manifest(path: Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def score_histogram(scores: np.ndarray, bins: int = 16) -> np.ndarray:
    """Counts over `bins` uniform bins covering [0, 1]."""
    hist, _ = np.histogram(np.clip(scores, 0.0, 1.0), bins=bins, range=(0.0, 1.0))
    return hist


def inspect_run(artifacts_dir: str | os.PathLike) -> dict:
    """Structured report over a run directory: counts, histograms,
    resolved strengths, enhancement sparsity, and invariant spot-checks."""
    d = Path(artifacts_dir)
    report: dict = {"dir": str(d), "sections": {}, "checks": {}, "missing": []}

    manifest_path = d / "manifest.txt"
    if not manifest_path.is_file():
        report["missing"].append("manifest.txt")
        manifest = {}
    else:
        manifest = load_manifest(manifest_path)
    report["sections"]["manifest"] = manifest

    slat_path = d / "final.slat"
    voxel_count = None
    if slat_path.is_file():
        grid_size, positions, latents = tensor_io.load_slat(slat_path)
        voxel_count = positions.shape[0]
        report["sections"]["final"] = {
            "grid_size": grid_size,
            "voxel_count": voxel_count,
            "channels": latents.shape[1],
            "latents_finite": bool(np.isfinite(latents).all()),
        }
    else:
        report["missing"].append("final.slat")

    local_names = sorted(
        {key[: -len(".mask")] for key in manifest if key.endswith(".mask")}
    )
    locals_section = {}
    selections = []
    for name in local_names:
        entry = {}
        sel_path = d / f"{name}.patch_selection.txt"
        if sel_path.is_file():
            entry["token_count"] = int(tensor_io.load_indices(sel_path).size)
        pre_path = d / f"{name}.aligned_pre.txt"
        post_path = d / f"{name}.aligned_post.txt"
        if pre_path.is_file() and post_path.is_file():
            pre = tensor_io.load_indices(pre_path)
            post = tensor_io.load_indices(post_path)
            entry["aligned_pre"] = int(pre.size)
            entry["aligned_post"] = int(post.size)
            selections.append(post)
        scores_path = d / f"{name}.scores.fus3"
        if scores_path.is_file():
            scores = tensor_io.load_tensor(scores_path)
            entry["score_histogram"] = score_histogram(scores).tolist()
            entry["scores_in_unit_interval"] = bool(
                (scores >= -1e-6).all() and (scores <= 1.0 + 1e-6).all()
            )
        lam_key = f"resolved.lambda.{name}"
        if lam_key in manifest:
            entry["lambda"] = float(manifest[lam_key])
        locals_section[name] = entry
    report["sections"]["locals"] = locals_section

    dg_path = d / "global.token_selection.txt"
    if dg_path.is_file():
        report["sections"]["global"] = {
            "token_count": int(tensor_io.load_indices(dg_path).size)
        }
        if "resolved.lambda.global" in manifest:
            report["sections"]["global"]["lambda"] = float(
                manifest["resolved.lambda.global"]
            )
    else:
        report["missing"].append("global.token_selection.txt")

    enh_path = d / "enhancement.fus3"
    if enh_path.is_file():
        e = tensor_io.load_tensor(enh_path)
        report["sections"]["enhancement"] = {
            "shape": list(e.shape),
            "scaled_fraction": float((e != 1.0).mean()),
            "uniform_identity": bool((e == 1.0).all()),
        }

    unaligned_path = d / "unaligned.txt"
    if unaligned_path.is_file() and voxel_count is not None and selections is not None:
        unaligned = tensor_io.load_indices(unaligned_path)
        union = np.zeros(voxel_count, dtype=bool)
        for sel in selections:
            union[sel] = True
        covered = union.copy()
        covered[unaligned] = True
        disjoint = not union[unaligned].any() if unaligned.size else True
        report["checks"]["complement_law"] = bool(covered.all() and disjoint)
    else:
        report["missing"].append("unaligned.txt")

    score_checks = [
        entry.get("scores_in_unit_interval")
        for entry in locals_section.values()
        if "scores_in_unit_interval" in entry
    ]
    if score_checks:
        report["checks"]["scores_in_unit_interval"] = all(score_checks)
    return report


def render_report(report: dict) -> str:
    lines = [f"run directory: {report['dir']}"]
    final = report["sections"].get("final")
    if final:
        lines.append(
            f"final: {final['voxel_count']} voxels, {final['channels']} channels, "
            f"grid {final['grid_size']}"
        )
    for name, entry in report["sections"].get("locals", {}).items():
        lines.append(f"[{name}]")
        for key, value in entry.items():
            lines.append(f"  {key}: {value}")
    if "global" in report["sections"]:
        lines.append("[global]")
        for key, value in report["sections"]["global"].items():
            lines.append(f"  {key}: {value}")
    if "enhancement" in report["sections"]:
        lines.append("[enhancement]")
        for key, value in report["sections"]["enhancement"].items():
            lines.append(f"  {key}: {value}")
    for name, ok in report["checks"].items():
        lines.append(f"check {name}: {'PASS' if ok else 'FAIL'}")
    for missing in report["missing"]:
        lines.append(f"missing artifact: {missing}")
    return "\n".join(lines)
