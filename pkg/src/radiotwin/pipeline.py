"""File-based pipeline stages: truth simulation through evaluation.

Every stage is a pure function of (config, input files, root seed): reruns
produce byte-identical outputs. A per-run manifest records the config hash
and content hashes of inputs/outputs; evaluation refuses inputs whose
propagation lineage (scene/OFDM/antenna/trace/grid settings) disagrees.

Stage randomness derives from the root seed through stable labels, so the
sampling stage, map fitting, and training draw independent, reproducible
streams.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import channel as ch
from . import metrics as mx
from .calibration import TrainConfig, train, write_train_log
from .channel_map import BcmConfig, MeasurementSample, build_bcm, read_bcm_csv, write_bcm_csv
from .em_field import (
    FourierEncoder,
    MaterialTable,
    init_net,
    load_checkpoint,
    save_checkpoint,
)
from .geometry import SceneGeometry, load_scene_file, point_scene_distance
from .simulate import simulate_rows
from .tracing import TraceConfig


# ---------------------------------------------------------------------------
# Configuration.

@dataclass(frozen=True)
class AntennaConfig:
    phi_3db_deg: float = 360.0
    theta_3db_deg: float = 17.0
    g_max_db: float = 8.0
    a_max_db: float = 30.0
    slant_tx_deg: float = 0.0
    slant_rx_deg: float = 0.0

    def tx_pattern(self) -> ch.AntennaPattern:
        return ch.AntennaPattern(
            math.radians(self.phi_3db_deg), math.radians(self.theta_3db_deg),
            self.g_max_db, self.a_max_db, math.radians(self.slant_tx_deg),
        )

    def rx_pattern(self) -> ch.AntennaPattern:
        return ch.AntennaPattern(
            math.radians(self.phi_3db_deg), math.radians(self.theta_3db_deg),
            self.g_max_db, self.a_max_db, math.radians(self.slant_rx_deg),
        )


@dataclass(frozen=True)
class GridConfig:
    spacing_m: float = 0.25
    height_m: float = 1.0
    facet_margin_m: float = 0.05


@dataclass(frozen=True)
class SamplingConfig:
    mode: str = "online"  # online | offline | synchronous
    m: int = 30


@dataclass(frozen=True)
class FieldConfig:
    hidden_sizes: tuple[int, ...] = (128, 128, 128)
    num_freqs: int = 8
    use_categories: bool = False


@dataclass(frozen=True)
class RunConfig:
    scene_path: str
    tx: tuple[float, float, float]
    root_seed: int = 0
    fc_hz: float = 3.5e9
    w_hz: float = 2.0e8
    n_subcarriers: int = 256
    antenna: AntennaConfig = AntennaConfig()
    trace: TraceConfig = TraceConfig()
    grid: GridConfig = GridConfig()
    sampling: SamplingConfig = SamplingConfig()
    bcm: BcmConfig = BcmConfig()
    train: TrainConfig = TrainConfig()
    field: FieldConfig = FieldConfig()

    def ofdm(self) -> ch.OfdmConfig:
        return ch.OfdmConfig(self.fc_hz, self.w_hz, self.n_subcarriers)


def _update_dataclass(cls, base, data: dict):
    kwargs = {}
    for key, value in data.items():
        if not hasattr(base, key):
            raise KeyError(f"unknown config key `{key}` for {cls.__name__}")
        current = getattr(base, key)
        if hasattr(current, "__dataclass_fields__") and isinstance(value, dict):
            kwargs[key] = _update_dataclass(type(current), current, value)
        elif isinstance(current, tuple) and isinstance(value, (list, tuple)):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    merged = {f: getattr(base, f) for f in base.__dataclass_fields__}
    merged.update(kwargs)
    return cls(**merged)


def load_run_config(path, seed_override: int | None = None) -> RunConfig:
    """Read a TOML or JSON run config; relative scene paths resolve beside it."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".toml":
        try:
            import tomllib as toml
        except ModuleNotFoundError:
            import tomli as toml
        data = toml.loads(text)
    else:
        data = json.loads(text)
    if "scene_path" not in data or "tx" not in data:
        raise KeyError("run config needs `scene_path` and `tx`")
    scene_path = Path(data["scene_path"])
    if not scene_path.is_absolute():
        scene_path = path.parent / scene_path
    base = RunConfig(scene_path=str(scene_path), tx=tuple(data["tx"]))
    data = {k: v for k, v in data.items() if k not in ("scene_path", "tx")}
    cfg = _update_dataclass(RunConfig, base, data)
    if seed_override is not None:
        cfg = _update_dataclass(RunConfig, cfg, {"root_seed": int(seed_override)})
    return cfg


def stage_seed(root_seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{root_seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big") % (2**63)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in sorted(obj.items(), key=lambda kv: str(kv[0]))}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    return obj


def canonical_json(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":"))


def config_hash(cfg: RunConfig, scene: SceneGeometry) -> str:
    payload = {"config": asdict(cfg), "scene": scene.content_hash()}
    return hashlib.sha256(canonical_json(payload).encode()).hexdigest()


def lineage_hash(cfg: RunConfig, scene: SceneGeometry) -> str:
    """Hash of everything two datasets must share to be comparable."""
    payload = {
        "scene": scene.content_hash(),
        "ofdm": [cfg.fc_hz, cfg.w_hz, cfg.n_subcarriers],
        "antenna": asdict(cfg.antenna),
        "trace": asdict(cfg.trace),
        "grid": asdict(cfg.grid),
    }
    return hashlib.sha256(canonical_json(payload).encode()).hexdigest()


# ---------------------------------------------------------------------------
# Evaluation grid.

@dataclass(frozen=True)
class Grid:
    origin: tuple[float, float]
    spacing: float
    nx: int
    ny: int
    z: float

    def positions(self) -> np.ndarray:
        xs = self.origin[0] + self.spacing * np.arange(self.nx)
        ys = self.origin[1] + self.spacing * np.arange(self.ny)
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        out = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, self.z)], axis=1)
        return out

    def cell_of(self, position) -> tuple[int, int]:
        i = int(round((position[0] - self.origin[0]) / self.spacing))
        j = int(round((position[1] - self.origin[1]) / self.spacing))
        if not (0 <= i < self.nx and 0 <= j < self.ny):
            raise ValueError(f"position {position} outside the grid")
        return i, j


def make_grid(scene: SceneGeometry, grid_cfg: GridConfig) -> Grid:
    lo, hi = scene.bounds_min, scene.bounds_max
    s = grid_cfg.spacing_m
    nx = max(1, int(math.floor((hi[0] - lo[0]) / s)))
    ny = max(1, int(math.floor((hi[1] - lo[1]) / s)))
    return Grid(
        origin=(float(lo[0]) + s / 2, float(lo[1]) + s / 2),
        spacing=s,
        nx=nx,
        ny=ny,
        z=grid_cfg.height_m,
    )


def grid_validity(scene: SceneGeometry, grid: Grid, margin: float) -> np.ndarray:
    """Mask of cells at least `margin` away from every facet."""
    pos = grid.positions()
    ok = np.array([point_scene_distance(scene, p) >= margin for p in pos])
    return ok.reshape(grid.nx, grid.ny)


# ---------------------------------------------------------------------------
# CSI dataset files: rx_x, rx_y, rx_z, then 2N interleaved re/im values.

def write_csi_csv(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            if not row.reachable:
                continue
            vals = [row.r[0], row.r[1], row.r[2]]
            inter = np.empty(2 * len(row.csi))
            inter[0::2] = row.csi.real
            inter[1::2] = row.csi.imag
            vals.extend(inter)
            fh.write(",".join(repr(float(v)) for v in vals) + "\n")


def read_csi_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Returns (positions (M, 3), csi (M, N) complex)."""
    positions = []
    csi = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            vals = np.array([float(v) for v in line.strip().split(",")])
            positions.append(vals[:3])
            csi.append(vals[3::2] + 1j * vals[4::2])
    if not positions:
        raise ValueError(f"empty CSI dataset: {path}")
    return np.stack(positions), np.stack(csi)


# ---------------------------------------------------------------------------
# Manifest.

def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def record_stage(out_dir, stage: str, cfg_hash: str, lineage: str,
                 inputs: list, outputs: list, unhashed_outputs: list = ()) -> None:
    out_dir = Path(out_dir)
    manifest_path = out_dir / "manifest.json"
    manifest = {}
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    manifest.setdefault("stages", {})[stage] = {
        "config_hash": cfg_hash,
        "lineage": lineage,
        "inputs": {str(Path(p).name): _file_hash(p) for p in inputs},
        "outputs": {str(Path(p).name): _file_hash(p) for p in outputs},
        # Files whose bytes legitimately vary between reruns (wall times).
        "unhashed_outputs": sorted(str(Path(p).name) for p in unhashed_outputs),
    }
    manifest_path.write_text(
        json.dumps(_jsonable(manifest), indent=1, sort_keys=True) + "\n",
        encoding="utf-8",
    )


# ---------------------------------------------------------------------------
# Sampling modes.

def sample_indices(mode: str, positions: np.ndarray, grid: Grid, m: int, seed: int,
                   scene_center: np.ndarray) -> np.ndarray:
    if m > len(positions):
        raise ValueError(f"requested {m} samples but only {len(positions)} cells")
    if mode == "online":
        rng = np.random.default_rng(seed)
        return np.sort(rng.choice(len(positions), size=m, replace=False))
    if mode == "offline":
        return _farthest_point_indices(positions, m, scene_center)
    if mode == "synchronous":
        return _scan_track_indices(positions, grid, m, seed)
    raise ValueError(f"unknown sampling mode: {mode}")


def _farthest_point_indices(positions: np.ndarray, m: int, center: np.ndarray) -> np.ndarray:
    """Greedy max-min coverage starting nearest the scene centroid."""
    d0 = np.linalg.norm(positions - center, axis=1)
    chosen = [int(np.argmin(d0))]
    dmin = np.linalg.norm(positions - positions[chosen[0]], axis=1)
    while len(chosen) < m:
        nxt = int(np.argmax(dmin))
        chosen.append(nxt)
        dmin = np.minimum(dmin, np.linalg.norm(positions - positions[nxt], axis=1))
    return np.sort(np.array(chosen))


def _scan_track_indices(positions: np.ndarray, grid: Grid, m: int, seed: int) -> np.ndarray:
    """One contiguous random scan track over the grid graph (4-neighborhood).

    Depth-first with seeded neighbor order; backtracks when stuck, so the
    track stays connected and visits m distinct cells.
    """
    rng = np.random.default_rng(seed)
    cell_to_row = {}
    for row, p in enumerate(positions):
        cell_to_row[grid.cell_of(p)] = row
    start_cell = list(cell_to_row.keys())[int(rng.integers(len(cell_to_row)))]
    visited = {start_cell}
    order = [start_cell]
    stack = [start_cell]
    while len(order) < m and stack:
        i, j = stack[-1]
        neighbors = [
            c
            for c in ((i + 1, j), (i - 1, j), (i, j + 1), (i, j - 1))
            if c in cell_to_row and c not in visited
        ]
        if not neighbors:
            stack.pop()
            continue
        nxt = neighbors[int(rng.integers(len(neighbors)))]
        visited.add(nxt)
        order.append(nxt)
        stack.append(nxt)
    if len(order) < m:
        raise ValueError("scan track exhausted its grid component before m samples")
    return np.sort(np.array([cell_to_row[c] for c in order]))


# ---------------------------------------------------------------------------
# Stages.

def _load_context(cfg: RunConfig):
    scene = load_scene_file(cfg.scene_path)
    return scene, cfg.ofdm(), cfg.antenna.tx_pattern(), cfg.antenna.rx_pattern()


def _gain_map_from_rows(grid: Grid, rows) -> mx.GainMap:
    values = np.full((grid.nx, grid.ny), -300.0)
    mask = np.zeros((grid.nx, grid.ny), dtype=bool)
    for row in rows:
        i, j = grid.cell_of(row.r)
        if row.reachable and math.isfinite(row.p_db):
            values[i, j] = row.p_db
            mask[i, j] = True
    return mx.GainMap(values=values, mask=mask, origin=grid.origin, spacing=grid.spacing)


def stage_simulate_truth(cfg: RunConfig, out_dir, tx=None, tag: str = "truth"):
    """Full-grid reference dataset from the scene's hidden truth materials."""
    scene, ofdm, tx_pat, rx_pat = _load_context(cfg)
    if scene.truth_materials is None:
        raise ValueError("scene carries no truth_materials; cannot simulate truth")
    table = MaterialTable.from_scene_truth(scene.truth_materials)
    grid = make_grid(scene, cfg.grid)
    valid = grid_validity(scene, grid, cfg.grid.facet_margin_m)
    positions = grid.positions()[valid.ravel()]
    rows = simulate_rows(
        scene, tx if tx is not None else cfg.tx, positions, table, ofdm,
        tx_pat, rx_pat, cfg.trace,
    )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csi_path = out_dir / f"{tag}_csi.csv"
    write_csi_csv(csi_path, rows)
    gm = _gain_map_from_rows(grid, rows)
    mx.render_gain_map(gm, out_dir / f"{tag}_gain")
    record_stage(
        out_dir, f"simulate-{tag}", config_hash(cfg, scene), lineage_hash(cfg, scene),
        inputs=[cfg.scene_path],
        outputs=[csi_path, out_dir / f"{tag}_gain.csv", out_dir / f"{tag}_gain.pgm",
                 out_dir / f"{tag}_gain.json"],
    )
    return rows, grid


def stage_sample(cfg: RunConfig, out_dir, tag: str = "truth"):
    """Draw the sparse measurement subset from the truth dataset."""
    scene, ofdm, *_ = _load_context(cfg)
    out_dir = Path(out_dir)
    positions, csi = read_csi_csv(out_dir / f"{tag}_csi.csv")
    grid = make_grid(scene, cfg.grid)
    center = (scene.bounds_min + scene.bounds_max) / 2.0
    center[2] = cfg.grid.height_m
    idx = sample_indices(
        cfg.sampling.mode, positions, grid, cfg.sampling.m,
        stage_seed(cfg.root_seed, "sample"), center,
    )
    sample_path = out_dir / "samples.csv"
    with open(sample_path, "w", encoding="utf-8") as fh:
        for i in idx:
            vals = [positions[i, 0], positions[i, 1], positions[i, 2]]
            inter = np.empty(2 * csi.shape[1])
            inter[0::2] = csi[i].real
            inter[1::2] = csi[i].imag
            vals.extend(inter)
            fh.write(",".join(repr(float(v)) for v in vals) + "\n")
    record_stage(
        out_dir, "sample", config_hash(cfg, scene), lineage_hash(cfg, scene),
        inputs=[out_dir / f"{tag}_csi.csv"], outputs=[sample_path],
    )
    return idx


def stage_build_bcm(cfg: RunConfig, out_dir):
    """Dense probabilistic supervision from the sparse samples."""
    scene, ofdm, tx_pat, rx_pat = _load_context(cfg)
    out_dir = Path(out_dir)
    positions, csi = read_csi_csv(out_dir / "samples.csv")
    samples = [MeasurementSample(r=positions[i], csi=csi[i]) for i in range(len(positions))]
    grid = make_grid(scene, cfg.grid)
    valid = grid_validity(scene, grid, cfg.grid.facet_margin_m)
    targets = grid.positions()[valid.ravel()]
    bcm_cfg = _update_dataclass(
        BcmConfig, cfg.bcm, {"seed": stage_seed(cfg.root_seed, "bcm")}
    )
    result = build_bcm(
        scene, cfg.tx, samples, targets, ofdm, tx_pat, rx_pat, cfg.trace, bcm_cfg
    )
    bcm_path = out_dir / "bcm.csv"
    write_bcm_csv(bcm_path, result, seed=bcm_cfg.seed, lineage=lineage_hash(cfg, scene))
    record_stage(
        out_dir, "build-bcm", config_hash(cfg, scene), lineage_hash(cfg, scene),
        inputs=[out_dir / "samples.csv"],
        outputs=[bcm_path, Path(str(bcm_path) + ".meta.json")],
    )
    return result


def stage_calibrate(cfg: RunConfig, out_dir):
    """Train the field net against the stored channel map."""
    scene, ofdm, tx_pat, rx_pat = _load_context(cfg)
    out_dir = Path(out_dir)
    entries = read_bcm_csv(out_dir / "bcm.csv")
    encoder = FourierEncoder.from_bounds(
        scene.bounds_min, scene.bounds_max, cfg.field.num_freqs
    )
    labels = sorted({f.category for f in scene.facets}) if cfg.field.use_categories else ()
    net = init_net(
        stage_seed(cfg.root_seed, "init"), encoder, cfg.field.hidden_sizes,
        use_categories=cfg.field.use_categories, category_labels=labels,
    )
    train_cfg = _update_dataclass(
        TrainConfig,
        cfg.train,
        {
            "seed": stage_seed(cfg.root_seed, "train"),
            "max_order": cfg.trace.max_order,
            "enable_scatter": cfg.trace.enable_scatter,
        },
    )
    result = train(scene, entries, net, train_cfg, ofdm, tx_pat, rx_pat, cfg.tx)
    ckpt_path = out_dir / "checkpoint.json"
    save_checkpoint(
        ckpt_path, result.net, beta=result.bias.beta, seed=train_cfg.seed,
        lineage=lineage_hash(cfg, scene),
    )
    log_path = out_dir / "train_log.csv"
    write_train_log(log_path, result.history)
    record_stage(
        out_dir, "calibrate", config_hash(cfg, scene), lineage_hash(cfg, scene),
        inputs=[out_dir / "bcm.csv"], outputs=[ckpt_path],
        unhashed_outputs=[log_path],
    )
    return result


def stage_predict(cfg: RunConfig, out_dir, tx=None, tag: str = "pred",
                  neutral: bool = False):
    """Gain/CSI prediction over the grid with the calibrated (or neutral) field."""
    scene, ofdm, tx_pat, rx_pat = _load_context(cfg)
    out_dir = Path(out_dir)
    if neutral:
        encoder = FourierEncoder.from_bounds(
            scene.bounds_min, scene.bounds_max, cfg.field.num_freqs
        )
        labels = sorted({f.category for f in scene.facets}) if cfg.field.use_categories else ()
        net = init_net(
            stage_seed(cfg.root_seed, "init"), encoder, cfg.field.hidden_sizes,
            use_categories=cfg.field.use_categories, category_labels=labels,
        )
        beta = 0.0
        ckpt_inputs = []
    else:
        ckpt = load_checkpoint(out_dir / "checkpoint.json")
        if ckpt.lineage != lineage_hash(cfg, scene):
            raise ValueError("checkpoint lineage does not match this configuration")
        net = ckpt.net
        beta = ckpt.beta
        ckpt_inputs = [out_dir / "checkpoint.json"]
    grid = make_grid(scene, cfg.grid)
    valid = grid_validity(scene, grid, cfg.grid.facet_margin_m)
    positions = grid.positions()[valid.ravel()]
    rows = simulate_rows(
        scene, tx if tx is not None else cfg.tx, positions, net, ofdm,
        tx_pat, rx_pat, cfg.trace, beta_db=beta,
    )
    csi_path = out_dir / f"{tag}_csi.csv"
    write_csi_csv(csi_path, rows)
    gm = _gain_map_from_rows(grid, rows)
    mx.render_gain_map(gm, out_dir / f"{tag}_gain")
    record_stage(
        out_dir, f"predict-{tag}", config_hash(cfg, scene), lineage_hash(cfg, scene),
        inputs=ckpt_inputs,
        outputs=[csi_path, out_dir / f"{tag}_gain.csv", out_dir / f"{tag}_gain.pgm",
                 out_dir / f"{tag}_gain.json"],
    )
    return rows, grid


def stage_evaluate(cfg: RunConfig, out_dir, pred_tag: str = "pred",
                   truth_tag: str = "truth", out_name: str | None = None):
    """MALE / SSIM / MCS of a prediction against a truth dataset."""
    scene, *_ = _load_context(cfg)
    out_dir = Path(out_dir)
    manifest = json.loads((out_dir / "manifest.json").read_text(encoding="utf-8"))
    stages = manifest.get("stages", {})
    lineage = lineage_hash(cfg, scene)
    for stage in (f"simulate-{truth_tag}", f"predict-{pred_tag}"):
        if stage in stages and stages[stage]["lineage"] != lineage:
            raise ValueError(f"lineage mismatch for stage {stage}")

    pred_pos, pred_csi = read_csi_csv(out_dir / f"{pred_tag}_csi.csv")
    truth_pos, truth_csi = read_csi_csv(out_dir / f"{truth_tag}_csi.csv")
    pred_by_key = {tuple(np.round(p, 6)): i for i, p in enumerate(pred_pos)}
    pairs = []
    for j, p in enumerate(truth_pos):
        key = tuple(np.round(p, 6))
        if key in pred_by_key:
            pairs.append((pred_by_key[key], j))
    if not pairs:
        raise ValueError("prediction and truth datasets share no positions")
    pi = [a for a, _ in pairs]
    ti = [b for _, b in pairs]

    gm_pred = mx.read_gain_map_csv(out_dir / f"{pred_tag}_gain.csv")
    gm_truth = mx.read_gain_map_csv(out_dir / f"{truth_tag}_gain.csv")
    shared = gm_pred.mask & gm_truth.mask
    gm_pred.mask = shared
    gm_truth.mask = shared

    report = {
        "male_db": mx.male(
            gm_pred.values[shared], gm_truth.values[shared]
        ),
        "ssim": mx.ssim(gm_pred, gm_truth),
        "mcs": mx.mcs(pred_csi[pi], truth_csi[ti]),
        "n_points": len(pairs),
        "config_hash": config_hash(cfg, scene),
    }
    name = out_name or (
        "metrics.json" if (pred_tag, truth_tag) == ("pred", "truth")
        else f"metrics_{pred_tag}_vs_{truth_tag}.json"
    )
    metrics_path = out_dir / name
    metrics_path.write_text(
        json.dumps(_jsonable(report), indent=1, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    record_stage(
        out_dir, f"evaluate-{pred_tag}-vs-{truth_tag}", config_hash(cfg, scene), lineage,
        inputs=[out_dir / f"{pred_tag}_csi.csv", out_dir / f"{truth_tag}_csi.csv"],
        outputs=[metrics_path],
    )
    return report


def stage_export_map(csv_path, out_prefix):
    gm = mx.read_gain_map_csv(csv_path)
    return mx.render_gain_map(gm, out_prefix)
