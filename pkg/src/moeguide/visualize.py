"""Dispatch-map export: grayscale PGM heat maps plus exact-value CSV grids.

For each sample and moe layer this writes the slot-averaged dispatch map, one
map per expert (mean over that expert's slot columns), the mean-thresholded
binary attention mask, and the resampled foreground prior.  PGM gray levels
are round(255 * value / max); the CSV carries the raw float64 values with
full round-trip precision, so thresholding the CSV at 1/m reproduces the
binary mask exactly.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .guidance import binarize_by_mean, grid_side, resample_mask
from .netpbm import write_pgm


def heat_pgm(values: np.ndarray) -> np.ndarray:
    """Scale a nonnegative grid to 0..255 gray (max maps to 255)."""
    peak = float(values.max())
    if peak <= 0:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.round(255.0 * values / peak).astype(np.uint8)


def write_grid_csv(path, grid: np.ndarray):
    lines = [",".join(repr(float(v)) for v in row) for row in grid]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_grid_csv(path) -> np.ndarray:
    rows = [
        [float(cell) for cell in line.split(",")]
        for line in Path(path).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    return np.array(rows, dtype=np.float64)


def export_dispatch_maps(out_dir, sample_index: int, layer: int,
                         dispatch: np.ndarray, num_experts: int,
                         pixel_mask: np.ndarray = None) -> list:
    """Write the map set for one sample at one layer.

    ``dispatch`` is the (m, S) dispatch matrix (values, not a Tensor).
    Returns the list of files written, relative to ``out_dir``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    m, total_slots = dispatch.shape
    side = grid_side(m)
    if total_slots % num_experts != 0:
        raise ValueError(f"{total_slots} slots do not split over {num_experts} experts")
    per = total_slots // num_experts
    base = f"sample{sample_index:04d}_layer{layer}"
    written = []

    def emit(stem, vector):
        grid = vector.reshape(side, side)
        write_pgm(out / f"{stem}.pgm", heat_pgm(grid))
        write_grid_csv(out / f"{stem}.csv", grid)
        written.extend([f"{stem}.pgm", f"{stem}.csv"])

    avg = dispatch.astype(np.float64).mean(axis=-1)
    emit(f"{base}_wavg", avg)

    for e in range(num_experts):
        cols = dispatch[:, e * per:(e + 1) * per].astype(np.float64).mean(axis=-1)
        emit(f"{base}_expert{e:02d}", cols)

    bmask = binarize_by_mean(avg)
    write_pgm(out / f"{base}_bmask.pgm", bmask.reshape(side, side) * 255)
    written.append(f"{base}_bmask.pgm")

    if pixel_mask is not None:
        grid_mask = resample_mask(pixel_mask, side)
        write_pgm(out / f"{base}_prior.pgm", grid_mask.reshape(side, side) * 255)
        written.append(f"{base}_prior.pgm")
    return written
