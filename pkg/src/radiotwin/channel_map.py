"""Probabilistic channel map from sparse measurements and geometric priors.

Sparse position-labeled CSI is reduced to two stable channel parameters
(log gain in dB, RMS delay spread), decomposed into a distance-trend
physical model plus a Gaussian-process residual over fused geometric
features, and densified over a target grid with posterior variances. The
resulting entries act as uncertainty-weighted supervision for field
calibration.

Fused features per position (9 dims): the position itself, a 4-dim path
structure block [LOS flag, log(1+path count), mean order, max order], and a
2-dim fading block [std of per-subcarrier gain in dB, strongest-path
dominance in dB] computed from a probe simulation with the neutral
material, never the trainable field.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import channel as ch
from .em_field import MaterialTable
from .geometry import SceneGeometry
from .tracing import PathSet, TraceConfig, trace_paths

EPS_POWER = 1e-15  # linear floor for the dominance ratio denominator
_FADE_SENTINEL = (0.0, -60.0)
_MAG_FLOOR = 1e-20  # keeps 20*log10|H| finite at interference nulls


@dataclass(frozen=True)
class FusedFeature:
    """Position + path-structure + fading feature with a reachability flag."""

    r: np.ndarray
    phi_path: np.ndarray
    phi_fade: np.ndarray
    reachable: bool

    def vector(self) -> np.ndarray:
        return np.concatenate([self.r, self.phi_path, self.phi_fade])


@dataclass(frozen=True)
class MeasurementSample:
    r: np.ndarray
    csi: np.ndarray  # complex (N,)


@dataclass(frozen=True)
class BcmEntry:
    r_star: np.ndarray
    p_hat_db: float
    tau_hat_s: float
    kappa_p_db2: float
    kappa_tau_s2: float


def extract_features(
    scene: SceneGeometry,
    tx,
    r,
    probe_materials: MaterialTable,
    ofdm: ch.OfdmConfig,
    tx_pattern: ch.AntennaPattern,
    rx_pattern: ch.AntennaPattern,
    trace_config: TraceConfig,
    pathset: PathSet | None = None,
) -> FusedFeature:
    """Geometry-derived features for one receiver position."""
    r = np.asarray(r, dtype=np.float64)
    if pathset is None:
        pathset = trace_paths(scene, tx, r, trace_config)
    if len(pathset) == 0:
        return FusedFeature(
            r=r,
            phi_path=np.zeros(4),
            phi_fade=np.array(_FADE_SENTINEL),
            reachable=False,
        )
    orders = np.array([p.order for p in pathset.paths], dtype=np.float64)
    los = 1.0 if any(p.order == 0 for p in pathset.paths) else 0.0
    phi_path = np.array(
        [los, math.log1p(len(pathset)), float(orders.mean()), float(orders.max())]
    )
    csi = ch.compute_csi(pathset, probe_materials, tx_pattern, rx_pattern, ofdm)
    mag = np.maximum(np.abs(csi.as_complex()), _MAG_FLOOR)
    fade_std = float(np.std(20.0 * np.log10(mag)))
    powers = np.array(
        [
            ch.path_coefficient(p, probe_materials, tx_pattern, rx_pattern, ofdm.fc).abs2()
            for p in pathset.paths
        ]
    )
    strongest = float(powers.max())
    rest = float(powers.sum() - strongest)
    dominance = 10.0 * math.log10(strongest / (rest + EPS_POWER)) if strongest > 0 else _FADE_SENTINEL[1]
    return FusedFeature(
        r=r, phi_path=phi_path, phi_fade=np.array([fade_std, dominance]), reachable=True
    )


@dataclass(frozen=True)
class PhysicalModel:
    """Distance-trend anchors: log-distance gain and power-law delay spread."""

    g0_db: float
    n0: float
    a0_s: float
    b0: float

    def g_p(self, d) -> np.ndarray:
        return self.g0_db - 10.0 * self.n0 * np.log10(d)

    def g_tau(self, d) -> np.ndarray:
        return self.a0_s * np.asarray(d, dtype=np.float64) ** self.b0


def fit_physical(
    p_db: np.ndarray,
    tau_s: np.ndarray,
    dist: np.ndarray,
    los_mask: np.ndarray,
    tau_floor_s: float = 1e-10,
    min_los: int = 4,
) -> PhysicalModel:
    """Least-squares trend fits on the LOS subset (all samples as fallback)."""
    p_db = np.asarray(p_db, dtype=np.float64)
    tau_s = np.asarray(tau_s, dtype=np.float64)
    dist = np.asarray(dist, dtype=np.float64)
    los_mask = np.asarray(los_mask, dtype=bool)
    if los_mask.sum() < min_los:
        los_mask = np.ones(len(p_db), dtype=bool)
    if los_mask.sum() < 2:
        raise ValueError("need at least 2 samples to fit the physical model")

    ld = np.log10(dist[los_mask])
    if np.ptp(ld) < 1e-12:
        n0 = 2.0
        g0 = float(np.mean(p_db[los_mask] + 20.0 * ld))
    else:
        a = np.stack([np.ones(los_mask.sum()), -10.0 * ld], axis=1)
        sol, *_ = np.linalg.lstsq(a, p_db[los_mask], rcond=None)
        g0, n0 = float(sol[0]), float(sol[1])

    tsel = los_mask & (tau_s >= tau_floor_s)
    if tsel.sum() >= 2 and np.ptp(np.log(dist[tsel])) >= 1e-12:
        a = np.stack([np.ones(tsel.sum()), np.log(dist[tsel])], axis=1)
        sol, *_ = np.linalg.lstsq(a, np.log(tau_s[tsel]), rcond=None)
        a0, b0 = float(np.exp(sol[0])), float(sol[1])
    elif tsel.sum() >= 1:
        a0, b0 = float(np.exp(np.mean(np.log(tau_s[tsel])))), 0.0
    else:
        # All-LOS data carries no dispersion trend; anchor at the floor.
        a0, b0 = tau_floor_s, 0.0
    return PhysicalModel(g0_db=g0, n0=n0, a0_s=a0, b0=b0)


# ---------------------------------------------------------------------------
# Matern-3/2 ARD Gaussian process with marginal-likelihood fitting.

LOG_BOUNDS_LS = (math.log(1e-2), math.log(1e3))
LOG_BOUNDS_SF2 = (math.log(1e-6), math.log(1e4))
LOG_BOUNDS_SN2 = (math.log(1e-8), math.log(1e2))
_JITTER = 1e-8
_SQRT3 = math.sqrt(3.0)


def matern_ard(w1, w2, length_scales, sigma_f2: float) -> float:
    """Matern nu=3/2 kernel with per-dimension length scales.

    The white-noise term is not part of this function; it enters only on the
    diagonal of the training Gram matrix.
    """
    d = (np.asarray(w1, dtype=np.float64) - np.asarray(w2)) / np.asarray(length_scales)
    r = math.sqrt(float(d @ d))
    return sigma_f2 * (1.0 + _SQRT3 * r) * math.exp(-_SQRT3 * r)


def _matern_cross(x1: np.ndarray, x2: np.ndarray, ls: np.ndarray, sf2: float) -> np.ndarray:
    d = (x1[:, None, :] - x2[None, :, :]) / ls
    r = np.sqrt(np.einsum("ijk,ijk->ij", d, d))
    return sf2 * (1.0 + _SQRT3 * r) * np.exp(-_SQRT3 * r)


@dataclass
class GprModel:
    length_scales: np.ndarray
    sigma_f2: float
    sigma_n2: float
    x_train: np.ndarray  # normalized features
    y: np.ndarray
    chol: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    norm_mean: np.ndarray
    norm_std: np.ndarray
    lml: float

    def normalize(self, features: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(features) - self.norm_mean) / self.norm_std


def _normalize_features(features: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mu = features.mean(axis=0)
    sd = features.std(axis=0)
    sd = np.where(sd < 1e-12, 1.0, sd)
    return (features - mu) / sd, mu, sd


def _lml_and_grad(theta: np.ndarray, xn: np.ndarray, y: np.ndarray, sq_diffs: np.ndarray):
    """Log marginal likelihood and its gradient in log-hyperparameter space."""
    m, dim = xn.shape
    ls = np.exp(theta[:dim])
    sf2 = math.exp(theta[dim])
    sn2 = math.exp(theta[dim + 1])
    r2 = sq_diffs @ (1.0 / ls**2)
    r = np.sqrt(np.maximum(r2, 0.0))
    decay = np.exp(-_SQRT3 * r)
    kf = sf2 * (1.0 + _SQRT3 * r) * decay
    k = kf + (sn2 + _JITTER) * np.eye(m)
    try:
        low = cholesky(k, lower=True)
    except np.linalg.LinAlgError:
        return -np.inf, np.zeros_like(theta)
    alpha = cho_solve((low, True), y)
    lml = (
        -0.5 * float(y @ alpha)
        - float(np.log(np.diag(low)).sum())
        - 0.5 * m * math.log(2.0 * math.pi)
    )
    w = np.outer(alpha, alpha) - cho_solve((low, True), np.eye(m))
    grad = np.empty_like(theta)
    # d k / d log(ls_d) = 3 sf2 exp(-sqrt3 r) * D_d / ls_d^2  (r cancels exactly)
    base = 3.0 * sf2 * decay
    for d in range(dim):
        dk = base * (sq_diffs[:, :, d] / ls[d] ** 2)
        grad[d] = 0.5 * float(np.sum(w * dk))
    grad[dim] = 0.5 * float(np.sum(w * kf))  # d k / d log sf2 = kf
    grad[dim + 1] = 0.5 * float(np.trace(w)) * sn2
    return lml, grad


def fit_gpr(residuals: np.ndarray, features: np.ndarray, seed: int,
            restarts: int = 5, steps: int = 200) -> GprModel:
    """Maximize the log marginal likelihood with Adam in log-space.

    One heuristic start (unit length scales, variance-scaled amplitudes)
    plus `restarts` log-uniform seeded starts; the best parameters seen
    anywhere during optimization are kept.
    """
    y = np.asarray(residuals, dtype=np.float64)
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if len(y) < 2:
        raise ValueError("need at least 2 samples to fit a GP")
    xn, mu, sd = _normalize_features(features)
    m, dim = xn.shape
    sq_diffs = (xn[:, None, :] - xn[None, :, :]) ** 2

    lo = np.array([LOG_BOUNDS_LS[0]] * dim + [LOG_BOUNDS_SF2[0], LOG_BOUNDS_SN2[0]])
    hi = np.array([LOG_BOUNDS_LS[1]] * dim + [LOG_BOUNDS_SF2[1], LOG_BOUNDS_SN2[1]])

    var_y = max(float(y.var()), 1e-6)
    starts = [
        np.clip(
            np.array([0.0] * dim + [math.log(var_y), math.log(0.1 * var_y)]), lo, hi
        )
    ]
    rng = np.random.default_rng(seed)
    for _ in range(restarts):
        starts.append(rng.uniform(lo, hi))

    best_theta = None
    best_lml = -np.inf
    for theta0 in starts:
        theta = theta0.copy()
        mom = np.zeros_like(theta)
        vel = np.zeros_like(theta)
        for t in range(1, steps + 1):
            lml, grad = _lml_and_grad(theta, xn, y, sq_diffs)
            if lml > best_lml:
                best_lml, best_theta = lml, theta.copy()
            if not np.isfinite(lml):
                break
            mom = 0.9 * mom + 0.1 * grad
            vel = 0.999 * vel + 0.001 * grad**2
            m_hat = mom / (1.0 - 0.9**t)
            v_hat = vel / (1.0 - 0.999**t)
            theta = np.clip(theta + 0.05 * m_hat / (np.sqrt(v_hat) + 1e-8), lo, hi)
        lml, _ = _lml_and_grad(theta, xn, y, sq_diffs)
        if lml > best_lml:
            best_lml, best_theta = lml, theta.copy()
    if best_theta is None or not np.isfinite(best_lml):
        raise RuntimeError("GP hyperparameter optimization failed")

    ls = np.exp(best_theta[:dim])
    sf2 = math.exp(best_theta[dim])
    sn2 = math.exp(best_theta[dim + 1])
    k = _matern_cross(xn, xn, ls, sf2) + (sn2 + _JITTER) * np.eye(m)
    jitter = _JITTER
    low = None
    while low is None:
        try:
            low = cholesky(k, lower=True)
        except np.linalg.LinAlgError:
            jitter *= 10.0
            if jitter > 1e-4:
                raise RuntimeError("Gram matrix not positive definite") from None
            k[np.diag_indices_from(k)] += jitter
    alpha = cho_solve((low, True), y)
    return GprModel(
        length_scales=ls,
        sigma_f2=sf2,
        sigma_n2=sn2,
        x_train=xn,
        y=y,
        chol=low,
        alpha=alpha,
        norm_mean=mu,
        norm_std=sd,
        lml=best_lml,
    )


def gpr_predict(model: GprModel, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and noise-free latent variance at raw feature rows."""
    xq = model.normalize(features)
    ks = _matern_cross(xq, model.x_train, model.length_scales, model.sigma_f2)
    mean = ks @ model.alpha
    v = solve_triangular(model.chol, ks.T, lower=True)
    var = np.maximum(model.sigma_f2 - np.einsum("ij,ij->j", v, v), 0.0)
    return mean, var


# ---------------------------------------------------------------------------
# Dense map construction.

@dataclass(frozen=True)
class BcmConfig:
    kappa_p_floor_db2: float = 0.25
    kappa_tau_floor_ns2: float = 1.0
    tau_floor_s: float = 1e-10
    min_los: int = 4
    seed: int = 0
    restarts: int = 5
    opt_steps: int = 200


@dataclass
class BcmResult:
    entries: list[BcmEntry]
    physical_p: PhysicalModel
    gpr_p: GprModel
    gpr_tau: GprModel
    dropped_targets: int


def build_bcm(
    scene: SceneGeometry,
    tx,
    samples: list[MeasurementSample],
    targets: np.ndarray,
    ofdm: ch.OfdmConfig,
    tx_pattern: ch.AntennaPattern,
    rx_pattern: ch.AntennaPattern,
    trace_config: TraceConfig,
    config: BcmConfig = BcmConfig(),
) -> BcmResult:
    """Fit the hybrid physical+GP model on samples and infer at targets.

    Delay-spread residuals are regressed in nanoseconds so their scale sits
    near the dB-scale gain residuals.
    """
    if len(samples) < 2:
        raise ValueError("need at least 2 measurement samples")
    tx = np.asarray(tx, dtype=np.float64)
    probe = MaterialTable.neutral()

    feats = []
    p_db = []
    tau_s = []
    for s in samples:
        f = extract_features(
            scene, tx, s.r, probe, ofdm, tx_pattern, rx_pattern, trace_config
        )
        if not f.reachable:
            raise ValueError(f"measurement at {s.r} has no traced paths")
        params = ch.extract_params(ch.Csi.from_complex(s.csi, ofdm), ofdm)
        feats.append(f)
        p, t = params.values()
        p_db.append(p)
        tau_s.append(t)
    p_db = np.asarray(p_db)
    tau_s = np.asarray(tau_s)
    positions = np.stack([s.r for s in samples]).astype(np.float64)
    dist = np.linalg.norm(positions - tx, axis=1)
    los_mask = np.array([f.phi_path[0] > 0.5 for f in feats])

    physical = fit_physical(
        p_db, tau_s, dist, los_mask, config.tau_floor_s, config.min_los
    )
    res_p = p_db - physical.g_p(dist)
    res_tau_ns = (tau_s - physical.g_tau(dist)) * 1e9

    fmat = np.stack([f.vector() for f in feats])
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    gpr_p = fit_gpr(res_p, fmat, seeds[0].generate_state(1)[0],
                    config.restarts, config.opt_steps)
    gpr_tau = fit_gpr(res_tau_ns, fmat, seeds[1].generate_state(1)[0],
                      config.restarts, config.opt_steps)

    entries: list[BcmEntry] = []
    dropped = 0
    target_feats = []
    kept_targets = []
    for r_star in np.atleast_2d(targets):
        f = extract_features(
            scene, tx, r_star, probe, ofdm, tx_pattern, rx_pattern, trace_config
        )
        if not f.reachable:
            dropped += 1
            continue
        target_feats.append(f.vector())
        kept_targets.append(np.asarray(r_star, dtype=np.float64))
    if target_feats:
        tf = np.stack(target_feats)
        td = np.linalg.norm(np.stack(kept_targets) - tx, axis=1)
        mean_p, var_p = gpr_predict(gpr_p, tf)
        mean_t, var_t = gpr_predict(gpr_tau, tf)
        p_hat = physical.g_p(td) + mean_p
        tau_hat = physical.g_tau(td) + mean_t * 1e-9
        kappa_p = np.maximum(var_p, config.kappa_p_floor_db2)
        kappa_tau = np.maximum(var_t, config.kappa_tau_floor_ns2) * 1e-18
        for i, r_star in enumerate(kept_targets):
            entries.append(
                BcmEntry(
                    r_star=r_star,
                    p_hat_db=float(p_hat[i]),
                    tau_hat_s=float(tau_hat[i]),
                    kappa_p_db2=float(kappa_p[i]),
                    kappa_tau_s2=float(kappa_tau[i]),
                )
            )
    return BcmResult(entries, physical, gpr_p, gpr_tau, dropped)


# ---------------------------------------------------------------------------
# File formats: CSV of entries plus a JSON sidecar with the fitted models.

def write_bcm_csv(path, result: BcmResult, seed: int | None = None,
                  lineage: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("x,y,z,p_hat_db,tau_hat_ns,kappa_p_db2,kappa_tau_ns2\n")
        for e in result.entries:
            row = [
                e.r_star[0], e.r_star[1], e.r_star[2],
                e.p_hat_db, e.tau_hat_s * 1e9, e.kappa_p_db2, e.kappa_tau_s2 * 1e18,
            ]
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    sidecar = {
        "physical": {
            "g0_db": result.physical_p.g0_db,
            "n0": result.physical_p.n0,
            "a0_s": result.physical_p.a0_s,
            "b0": result.physical_p.b0,
        },
        "gpr": {
            name: {
                "length_scales": [float(v) for v in g.length_scales],
                "sigma_f2": g.sigma_f2,
                "sigma_n2": g.sigma_n2,
                "lml": g.lml,
                "norm_mean": [float(v) for v in g.norm_mean],
                "norm_std": [float(v) for v in g.norm_std],
            }
            for name, g in (("p", result.gpr_p), ("tau_ns", result.gpr_tau))
        },
        "dropped_targets": result.dropped_targets,
        "seed": seed,
        "lineage": lineage,
    }
    with open(str(path) + ".meta.json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_bcm_csv(path) -> list[BcmEntry]:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("x,y,z"):
            raise ValueError(f"not a channel-map CSV: {path}")
        for line in fh:
            vals = [float(v) for v in line.strip().split(",")]
            entries.append(
                BcmEntry(
                    r_star=np.array(vals[0:3]),
                    p_hat_db=vals[3],
                    tau_hat_s=vals[4] * 1e-9,
                    kappa_p_db2=vals[5],
                    kappa_tau_s2=vals[6] * 1e-18,
                )
            )
    return entries


# ---------------------------------------------------------------------------
# Estimator facade.

class BayesianChannelMap(BaseEstimator):
    """Estimator view of the map builder: fit on sparse CSI, predict densely.

    Parameters mirror the functional API; `fit` expects X as (M, 3) receiver
    positions and Y as (M, N) complex CSI rows measured at those positions.
    """

    def __init__(self, scene=None, tx=None, ofdm=None, tx_pattern=None,
                 rx_pattern=None, trace_config=None, config=None):
        self.scene = scene
        self.tx = tx
        self.ofdm = ofdm
        self.tx_pattern = tx_pattern
        self.rx_pattern = rx_pattern
        self.trace_config = trace_config
        self.config = config

    def _require(self):
        for name in ("scene", "tx", "ofdm", "tx_pattern", "rx_pattern", "trace_config"):
            if getattr(self, name) is None:
                raise ValueError(f"BayesianChannelMap needs `{name}` to be set")

    def fit(self, X, Y):
        self._require()
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        Y = np.atleast_2d(np.asarray(Y))
        if X.shape[0] != Y.shape[0]:
            raise ValueError("X and Y must have matching first dimensions")
        samples = [MeasurementSample(r=X[i], csi=Y[i]) for i in range(X.shape[0])]
        cfg = self.config or BcmConfig()
        result = build_bcm(
            self.scene, self.tx, samples, np.zeros((0, 3)), self.ofdm,
            self.tx_pattern, self.rx_pattern, self.trace_config, cfg,
        )
        self.physical_ = result.physical_p
        self.gpr_p_ = result.gpr_p
        self.gpr_tau_ = result.gpr_tau
        self._probe = MaterialTable.neutral()
        return self

    def _check_fitted(self):
        if not hasattr(self, "physical_"):
            raise NotFittedError("BayesianChannelMap is not fitted yet")

    def predict(self, X, return_var: bool = False):
        """Inferred (p dB, tau s) rows; optionally posterior variances.

        Unreachable positions return NaN rows (and infinite variance).
        """
        self._check_fitted()
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        mean = np.full((X.shape[0], 2), np.nan)
        var = np.full((X.shape[0], 2), np.inf)
        feats = []
        rows = []
        for i in range(X.shape[0]):
            f = extract_features(
                self.scene, self.tx, X[i], self._probe, self.ofdm,
                self.tx_pattern, self.rx_pattern, self.trace_config,
            )
            if f.reachable:
                feats.append(f.vector())
                rows.append(i)
        if rows:
            fmat = np.stack(feats)
            d = np.linalg.norm(X[rows] - np.asarray(self.tx), axis=1)
            mp, vp = gpr_predict(self.gpr_p_, fmat)
            mt, vt = gpr_predict(self.gpr_tau_, fmat)
            mean[rows, 0] = self.physical_.g_p(d) + mp
            mean[rows, 1] = self.physical_.g_tau(d) + mt * 1e-9
            var[rows, 0] = vp
            var[rows, 1] = vt * 1e-18
        if return_var:
            return mean, var
        return mean

    def entries(self, X) -> list[BcmEntry]:
        """Dense supervision entries at target positions (unreachable dropped)."""
        cfg = self.config or BcmConfig()
        mean, var = self.predict(X, return_var=True)
        out = []
        for i, r_star in enumerate(np.atleast_2d(X)):
            if not np.isfinite(mean[i]).all():
                continue
            out.append(
                BcmEntry(
                    r_star=np.asarray(r_star, dtype=np.float64),
                    p_hat_db=float(mean[i, 0]),
                    tau_hat_s=float(mean[i, 1]),
                    kappa_p_db2=float(max(var[i, 0], cfg.kappa_p_floor_db2)),
                    kappa_tau_s2=float(
                        max(var[i, 1] * 1e18, cfg.kappa_tau_floor_ns2) * 1e-18
                    ),
                )
            )
        return out
