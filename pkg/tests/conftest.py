import numpy as np
import pytest

from fusecond import tensor_io


def random_lattice_positions(gen, n, grid=12):
    """n unique lexicographically sorted integer positions in [0,grid)^3."""
    flat = gen.choice(grid**3, size=n, replace=False)
    flat.sort()
    return np.stack(np.unravel_index(flat, (grid,) * 3), axis=1).astype(np.int64)


def write_run_inputs(tmp_path, *, size=28, channels=1, locals_count=1, seed=0,
                     mask_builder=None):
    """Writes image tensors + pixel masks for a tiny pipeline run and
    returns the lines of a matching config file (paths only)."""
    gen = np.random.default_rng(seed)
    gpath = tmp_path / "global.fus3"
    tensor_io.save_tensor(gpath, gen.normal(size=(size, size, channels)).astype(np.float32))
    lines = [f"global.image = {gpath.name}"]
    for k in range(1, locals_count + 1):
        ipath = tmp_path / f"local{k}.fus3"
        mpath = tmp_path / f"local{k}.mask"
        tensor_io.save_tensor(ipath, gen.normal(size=(size, size, channels)).astype(np.float32))
        if mask_builder is not None:
            mask = mask_builder(k, size)
        else:
            mask = np.zeros((size, size), dtype=np.uint8)
            mask[: size // 2, : size // 2] = 1
        tensor_io.save_mask(mpath, mask)
        lines.append(f"local.{k}.image = {ipath.name}")
        lines.append(f"local.{k}.mask = {mpath.name}")
    return lines


@pytest.fixture
def tiny_config_lines():
    """Small-model settings that keep pipeline tests fast."""
    return [
        "encoder.token_dim = 16",
        "encoder.depth = 1",
        "encoder.heads = 2",
        "encoder.registers = 2",
        "flow.latent_dim = 16",
        "flow.heads = 4",
        "flow.blocks = 2",
        "flow.structure_grid = 2",
        "flow.grid_size = 4",
        "sampler.steps = 4",
        "refine.k = 4",
    ]


def write_config(tmp_path, lines, name="run.cfg"):
    path = tmp_path / name
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
