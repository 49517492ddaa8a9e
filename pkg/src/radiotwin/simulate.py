"""Forward channel simulation over receiver sets.

One code path serves truth generation (static material table), neutral-field
baselines, and calibrated-field prediction; only the EM property source and
the gain bias differ. CSI rows are left unscaled by the bias, which is a
link-budget offset applied to the logarithmic gain only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import channel as ch
from .geometry import SceneGeometry
from .tracing import TraceConfig, trace_paths


@dataclass
class SimRow:
    r: np.ndarray
    csi: np.ndarray | None  # complex (N,) or None when unreachable
    p_db: float
    tau_s: float
    reachable: bool


def simulate_rows(
    scene: SceneGeometry,
    tx,
    rxs: np.ndarray,
    field_source,
    ofdm: ch.OfdmConfig,
    tx_pattern: ch.AntennaPattern,
    rx_pattern: ch.AntennaPattern,
    trace_config: TraceConfig,
    beta_db: float = 0.0,
) -> list[SimRow]:
    """Trace and compute the channel at each receiver (NaN when unreachable)."""
    tx = np.asarray(tx, dtype=np.float64)
    rows: list[SimRow] = []
    for r in np.atleast_2d(np.asarray(rxs, dtype=np.float64)):
        ps = trace_paths(scene, tx, r, trace_config)
        if len(ps) == 0:
            rows.append(SimRow(r=r, csi=None, p_db=np.nan, tau_s=np.nan, reachable=False))
            continue
        csi = ch.compute_csi(ps, field_source, tx_pattern, rx_pattern, ofdm)
        try:
            params = ch.extract_params(csi, ofdm)
        except ch.ZeroEnergyCsiError:
            rows.append(SimRow(r=r, csi=None, p_db=np.nan, tau_s=np.nan, reachable=False))
            continue
        p, tau = params.values()
        rows.append(
            SimRow(r=r, csi=csi.as_complex(), p_db=p + beta_db, tau_s=tau, reachable=True)
        )
    return rows
