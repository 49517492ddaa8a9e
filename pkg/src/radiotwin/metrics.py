"""Propagation-consistency metrics and gain-map rendering.

MALE is a plain mean absolute error on dB gains. SSIM runs on jointly
min-max-normalized gain maps with a 7x7 uniform window and is averaged over
windows fully inside the validity mask. MCS is the mean magnitude of the
normalized conjugate inner product between CSI vectors, which makes it
invariant to one global complex scale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2
_SSIM_WIN = 7

RENDER_CLIP_DB = (-160.0, -30.0)


@dataclass
class GainMap:
    """Gain values on a regular grid with a validity mask (True = usable)."""

    values: np.ndarray  # (nx, ny) dB
    mask: np.ndarray  # (nx, ny) bool
    origin: tuple[float, float] = (0.0, 0.0)
    spacing: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != self.mask.shape or self.values.ndim != 2:
            raise ValueError("values and mask must be matching 2-D arrays")
        if min(self.values.shape) < 1:
            raise ValueError("empty gain map")


def male(pred, truth) -> float:
    """Mean absolute error between aligned dB gain lists."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.size == 0:
        raise ValueError("inputs must be equally sized and non-empty")
    return float(np.mean(np.abs(pred - truth)))


def ssim(map_a: GainMap, map_b: GainMap) -> float:
    """Structural similarity between two masked gain maps.

    Both maps are normalized together to [0, 1] over valid cells. A joint
    dynamic range of zero is degenerate: the result is 1.0 iff the maps are
    identical on the mask, else 0.0.
    """
    if map_a.values.shape != map_b.values.shape:
        raise ValueError("gain maps must share dimensions")
    if not np.array_equal(map_a.mask, map_b.mask):
        raise ValueError("gain maps must share masks")
    mask = map_a.mask
    if not mask.any():
        raise ValueError("empty mask")
    a = map_a.values
    b = map_b.values
    lo = min(a[mask].min(), b[mask].min())
    hi = max(a[mask].max(), b[mask].max())
    if hi - lo < 1e-12:
        return 1.0 if np.array_equal(a[mask], b[mask]) else 0.0
    an = (a - lo) / (hi - lo)
    bn = (b - lo) / (hi - lo)

    w = _SSIM_WIN
    nx, ny = an.shape
    if nx < w or ny < w:
        raise ValueError(f"need at least one full {w}x{w} window")
    total = 0.0
    count = 0
    for i in range(nx - w + 1):
        for j in range(ny - w + 1):
            mwin = mask[i : i + w, j : j + w]
            if not mwin.all():
                continue
            x = an[i : i + w, j : j + w].ravel()
            y = bn[i : i + w, j : j + w].ravel()
            mx, my = x.mean(), y.mean()
            vx, vy = x.var(), y.var()
            cxy = float(np.mean((x - mx) * (y - my)))
            num = (2 * mx * my + _SSIM_C1) * (2 * cxy + _SSIM_C2)
            den = (mx * mx + my * my + _SSIM_C1) * (vx + vy + _SSIM_C2)
            total += num / den
            count += 1
    if count == 0:
        raise ValueError("mask admits no full window")
    return total / count


def mcs(pred, truth) -> float:
    """Mean |<pred, truth>| / (||pred|| ||truth||) over receivers.

    Zero-norm rows on either side are skipped; raises if nothing remains.
    """
    pred = np.atleast_2d(np.asarray(pred, dtype=np.complex128))
    truth = np.atleast_2d(np.asarray(truth, dtype=np.complex128))
    if pred.shape != truth.shape:
        raise ValueError("CSI matrices must share shape")
    np_norm = np.linalg.norm(pred, axis=1)
    nt_norm = np.linalg.norm(truth, axis=1)
    ok = (np_norm > 0) & (nt_norm > 0)
    if not ok.any():
        raise ValueError("all CSI rows have zero norm")
    inner = np.abs(np.einsum("ij,ij->i", pred[ok], truth[ok].conj()))
    return float(np.mean(inner / (np_norm[ok] * nt_norm[ok])))


def mcs_skipped(pred, truth) -> int:
    """Number of receiver rows mcs() would skip for zero norm."""
    pred = np.atleast_2d(np.asarray(pred, dtype=np.complex128))
    truth = np.atleast_2d(np.asarray(truth, dtype=np.complex128))
    return int(
        ((np.linalg.norm(pred, axis=1) == 0) | (np.linalg.norm(truth, axis=1) == 0)).sum()
    )


def render_gain_map(gain_map: GainMap, out_prefix) -> dict:
    """Write <prefix>.pgm, <prefix>.csv and a JSON sidecar; returns the sidecar.

    dB values are clipped to RENDER_CLIP_DB for display only, then linearly
    mapped so the minimum clipped cell is pixel 0 and the maximum 255.
    Masked cells render as pixel 0. The CSV keeps raw (unclipped) values.
    """
    vals = gain_map.values
    mask = gain_map.mask
    clipped = np.clip(vals, *RENDER_CLIP_DB)
    if mask.any():
        lo = float(clipped[mask].min())
        hi = float(clipped[mask].max())
    else:
        lo, hi = RENDER_CLIP_DB
    span = hi - lo if hi > lo else 1.0
    pix = np.zeros(vals.shape, dtype=np.int64)
    pix[mask] = np.rint((clipped[mask] - lo) / span * 255.0).astype(np.int64)

    pgm_path = f"{out_prefix}.pgm"
    with open(pgm_path, "w", encoding="utf-8") as fh:
        fh.write(f"P2\n{vals.shape[1]} {vals.shape[0]}\n255\n")
        for i in range(vals.shape[0]):
            fh.write(" ".join(str(int(v)) for v in pix[i]) + "\n")

    csv_path = f"{out_prefix}.csv"
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("i,j,x,y,valid,p_db\n")
        for i in range(vals.shape[0]):
            for j in range(vals.shape[1]):
                x = gain_map.origin[0] + i * gain_map.spacing
                y = gain_map.origin[1] + j * gain_map.spacing
                fh.write(
                    f"{i},{j},{x!r},{y!r},{int(mask[i, j])},{float(vals[i, j])!r}\n"
                )

    sidecar = {
        "clip_db": list(RENDER_CLIP_DB),
        "lo_db": lo,
        "hi_db": hi,
        "shape": list(vals.shape),
        "origin": list(gain_map.origin),
        "spacing": gain_map.spacing,
    }
    with open(f"{out_prefix}.json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return sidecar


def read_gain_map_csv(path) -> GainMap:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "i,j,x,y,valid,p_db":
            raise ValueError(f"not a gain map CSV: {path}")
        for line in fh:
            i, j, x, y, valid, p = line.strip().split(",")
            rows.append((int(i), int(j), float(x), float(y), int(valid), float(p)))
    nx = max(r[0] for r in rows) + 1
    ny = max(r[1] for r in rows) + 1
    values = np.zeros((nx, ny))
    mask = np.zeros((nx, ny), dtype=bool)
    x0 = min(r[2] for r in rows)
    y0 = min(r[3] for r in rows)
    spacing = 1.0
    for i, j, x, y, valid, p in rows:
        values[i, j] = p
        mask[i, j] = bool(valid)
        if i == 1 and j == 0:
            spacing = x - x0
    return GainMap(values=values, mask=mask, origin=(x0, y0), spacing=spacing)
