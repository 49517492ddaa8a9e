"""Uncertainty-weighted calibration of the EM property field.

Each iteration draws a batch of channel-map entries, runs the differentiable
channel chain through the field net on a fresh tape, re-estimates the global
gain bias from the batch (exponential moving average, no gradient), evaluates
the Gaussian negative log-likelihood weighted by the map's posterior
variances, and applies one Adam step to the net weights.

Delay-spread terms are evaluated in nanoseconds so both parameters
contribute at comparable scale with unit loss weights.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import autodiff as ad
from . import channel as ch
from .channel_map import BcmEntry
from .em_field import EmFieldNet, FourierEncoder, init_net
from .geometry import SceneGeometry
from .tracing import PathSet, TraceConfig, trace_paths


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-3
    iterations: int = 10_000
    ema_lambda: float = 0.99
    eta_p: float = 1.0
    eta_tau: float = 1.0
    kappa_p_floor_db2: float = 0.25
    kappa_tau_floor_ns2: float = 1.0
    seed: int = 0
    max_order: int = 2
    enable_scatter: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or not 0.0 <= self.ema_lambda < 1.0:
            raise ValueError("need batch_size >= 1 and ema_lambda in [0, 1)")
        if self.eta_p < 0 or self.eta_tau < 0:
            raise ValueError("loss weights must be non-negative")

    def trace_config(self) -> TraceConfig:
        return TraceConfig(max_order=self.max_order, enable_scatter=self.enable_scatter)


@dataclass(frozen=True)
class BiasState:
    beta: float = 0.0


@dataclass
class PathCache:
    """Traced paths per retained entry; empty path sets are excluded up front."""

    pathsets: dict[int, PathSet]
    kept: list[int]
    dropped: list[int]


def precompute_cache(
    scene: SceneGeometry, tx, entries: list[BcmEntry], trace_config: TraceConfig
) -> PathCache:
    pathsets: dict[int, PathSet] = {}
    kept: list[int] = []
    dropped: list[int] = []
    for i, e in enumerate(entries):
        ps = trace_paths(scene, tx, e.r_star, trace_config)
        if len(ps) == 0:
            dropped.append(i)
        else:
            pathsets[i] = ps
            kept.append(i)
    return PathCache(pathsets=pathsets, kept=kept, dropped=dropped)


def nll_loss(batch, beta: float, config: TrainConfig):
    """Batch NLL under the map's Gaussian supervision; beta is a constant.

    batch rows are (ChannelParams, BcmEntry) with the parameters typically
    on-tape. Variances are floored here so collapsed posteriors cannot blow
    up the quadratic term.
    """
    if not batch:
        raise ValueError("empty batch")
    total = 0.0
    for params, entry in batch:
        kp = max(entry.kappa_p_db2, config.kappa_p_floor_db2)
        kt = max(entry.kappa_tau_s2 * 1e18, config.kappa_tau_floor_ns2)
        res_p = params.p_db + (beta - entry.p_hat_db)
        res_t = params.tau * 1e9 - entry.tau_hat_s * 1e9
        term_p = res_p * res_p * (0.5 / kp) + 0.5 * math.log(2.0 * math.pi * kp)
        term_t = res_t * res_t * (0.5 / kt) + 0.5 * math.log(2.0 * math.pi * kt)
        total = total + config.eta_p * term_p + config.eta_tau * term_t
    return total / len(batch)


def estimate_bias(batch) -> float:
    """Closed-form least-squares gain offset for the current batch."""
    if not batch:
        raise ValueError("empty batch")
    return float(
        np.mean([e.p_hat_db - float(ad.value_of(p.p_db)) for p, e in batch])
    )


def update_bias(state: BiasState, beta_hat: float, ema_lambda: float) -> BiasState:
    if not 0.0 <= ema_lambda < 1.0:
        raise ValueError("ema factor must lie in [0, 1)")
    return BiasState(beta=ema_lambda * state.beta + (1.0 - ema_lambda) * beta_hat)


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def like(cls, params: dict) -> "AdamState":
        return cls(
            m={k: np.zeros_like(w) for k, w in params.items()},
            v={k: np.zeros_like(w) for k, w in params.items()},
            t=0,
        )

    def to_jsonable(self) -> dict:
        return {
            "t": self.t,
            "m": {k: [float(x) for x in w.ravel()] for k, w in sorted(self.m.items())},
            "v": {k: [float(x) for x in w.ravel()] for k, w in sorted(self.v.items())},
        }


_B1, _B2, _EPS = 0.9, 0.999, 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float):
    """One bias-corrected Adam update; returns new (params, state)."""
    t = state.t + 1
    new_p, new_m, new_v = {}, {}, {}
    for k, w in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        m = _B1 * state.m[k] + (1 - _B1) * g
        v = _B2 * state.v[k] + (1 - _B2) * g * g
        m_hat = m / (1 - _B1**t)
        v_hat = v / (1 - _B2**t)
        new_p[k] = w - lr * m_hat / (np.sqrt(v_hat) + _EPS)
        new_m[k] = m
        new_v[k] = v
    return new_p, AdamState(m=new_m, v=new_v, t=t)


@dataclass
class TrainResult:
    net: EmFieldNet
    bias: BiasState
    history: list[tuple[int, float, float, float]]  # iteration, loss, beta, wall_ms
    cache: PathCache


def train(
    scene: SceneGeometry,
    entries: list[BcmEntry],
    net: EmFieldNet,
    config: TrainConfig,
    ofdm: ch.OfdmConfig,
    tx_pattern: ch.AntennaPattern,
    rx_pattern: ch.AntennaPattern,
    tx,
    cache: PathCache | None = None,
) -> TrainResult:
    """Calibrate `net` in place against the channel-map supervision.

    The bias update runs before the loss of the same batch, so the loss sees
    the freshest offset estimate. Entries whose trace is empty never enter
    a batch. Category embeddings (when enabled) key off each interaction's
    facet category.
    """
    if not entries:
        raise ValueError("no supervision entries")
    if cache is None:
        cache = precompute_cache(scene, tx, entries, config.trace_config())
    if not cache.kept:
        raise CalibrationError("every supervision entry traced to an empty path set")

    weights = dict(net.weights)
    opt = AdamState.like(weights)
    bias = BiasState()
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(cache.kept)
    cursor = 0
    history: list[tuple[int, float, float, float]] = []

    for it in range(config.iterations):
        t0 = time.perf_counter()
        if cursor + config.batch_size > len(order):
            order = rng.permutation(cache.kept)
            cursor = 0
        idx = order[cursor : cursor + config.batch_size]
        if len(idx) == 0:
            idx = order
        cursor += config.batch_size

        tape = ad.Tape()
        net.weights = weights
        evaluator = net.evaluator(tape)
        batch = []
        for i in idx:
            ps = cache.pathsets[int(i)]
            csi = ch.compute_csi(ps, evaluator, tx_pattern, rx_pattern, ofdm)
            params = ch.extract_params(csi, ofdm)
            batch.append((params, entries[int(i)]))

        bias = update_bias(bias, estimate_bias(batch), config.ema_lambda)
        loss = nll_loss(batch, bias.beta, config)
        loss_val = float(ad.value_of(loss))
        if not math.isfinite(loss_val):
            bad = [
                int(i)
                for (params, _), i in zip(batch, idx)
                if not all(math.isfinite(v) for v in params.values())
            ]
            raise CalibrationError(
                f"non-finite loss at iteration {it}; offending entries: {bad}"
            )
        grads = ad.backward(loss)
        leaf_grads = {
            k: grads.wrt(leaf) for k, leaf in evaluator.weight_leaves().items()
        }
        weights, opt = adam_step(weights, leaf_grads, opt, config.learning_rate)
        history.append(
            (it, loss_val, bias.beta, (time.perf_counter() - t0) * 1e3)
        )

    net.weights = weights
    return TrainResult(net=net, bias=bias, history=history, cache=cache)


def write_train_log(path, history) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("iteration,loss,beta,wall_ms\n")
        for it, loss, beta, ms in history:
            fh.write(f"{it},{loss!r},{beta!r},{ms!r}\n")


class EmFieldCalibrator(BaseEstimator):
    """Estimator facade: fit a field net to dense probabilistic supervision.

    fit(X, y, y_var) takes target positions (K, 3), supervision rows
    (K, 2) = [gain dB, delay spread s], and matching variances (dB^2, s^2).
    predict returns [gain + bias, delay spread] rows under the calibrated
    field, optionally for a transmitter the field was never trained with.
    """

    def __init__(self, scene=None, tx=None, ofdm=None, tx_pattern=None,
                 rx_pattern=None, hidden_sizes=(128, 128, 128), num_freqs=8,
                 use_categories=False, init_seed=0, train_config=None):
        self.scene = scene
        self.tx = tx
        self.ofdm = ofdm
        self.tx_pattern = tx_pattern
        self.rx_pattern = rx_pattern
        self.hidden_sizes = hidden_sizes
        self.num_freqs = num_freqs
        self.use_categories = use_categories
        self.init_seed = init_seed
        self.train_config = train_config

    def make_net(self) -> EmFieldNet:
        encoder = FourierEncoder.from_bounds(
            self.scene.bounds_min, self.scene.bounds_max, self.num_freqs
        )
        labels = sorted({f.category for f in self.scene.facets}) if self.use_categories else ()
        return init_net(
            self.init_seed,
            encoder,
            tuple(self.hidden_sizes),
            use_categories=self.use_categories,
            category_labels=labels,
        )

    def fit(self, X, y, y_var):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        y_var = np.atleast_2d(np.asarray(y_var, dtype=np.float64))
        if not (X.shape[0] == y.shape[0] == y_var.shape[0]):
            raise ValueError("X, y, y_var must have matching first dimensions")
        entries = [
            BcmEntry(
                r_star=X[i],
                p_hat_db=float(y[i, 0]),
                tau_hat_s=float(y[i, 1]),
                kappa_p_db2=float(y_var[i, 0]),
                kappa_tau_s2=float(y_var[i, 1]),
            )
            for i in range(X.shape[0])
        ]
        cfg = self.train_config or TrainConfig()
        result = train(
            self.scene, entries, self.make_net(), cfg, self.ofdm,
            self.tx_pattern, self.rx_pattern, self.tx,
        )
        self.net_ = result.net
        self.bias_ = result.bias
        self.history_ = result.history
        return self

    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise NotFittedError("EmFieldCalibrator is not fitted yet")

    def predict(self, X, tx=None):
        self._check_fitted()
        from .simulate import simulate_rows

        cfg = self.train_config or TrainConfig()
        rows = simulate_rows(
            self.scene, self.tx if tx is None else tx, np.atleast_2d(X),
            self.net_, self.ofdm, self.tx_pattern, self.rx_pattern,
            cfg.trace_config(), beta_db=self.bias_.beta,
        )
        return np.array([[r.p_db, r.tau_s] for r in rows])

    def predict_csi(self, X, tx=None):
        self._check_fitted()
        from .simulate import simulate_rows

        cfg = self.train_config or TrainConfig()
        rows = simulate_rows(
            self.scene, self.tx if tx is None else tx, np.atleast_2d(X),
            self.net_, self.ofdm, self.tx_pattern, self.rx_pattern,
            cfg.trace_config(), beta_db=self.bias_.beta,
        )
        return np.stack([r.csi for r in rows])
