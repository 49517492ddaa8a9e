"""Learnable surface EM-property field and the static material table.

The field maps a surface point (and optionally a category label) to four
physical quantities: relative permittivity, conductivity, scattering
coefficient, and cross-polarization factor. A Fourier coordinate encoding
feeds a small ReLU MLP whose 4 raw outputs pass through range-constrained
activations, so any parameter setting yields physically valid properties.

The zero-initialized output layer makes a fresh net predict the neutral
material (2, 1, 0.5, 0.5) everywhere, which doubles as the probe material
for geometric feature extraction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

NEUTRAL_RAW = (0.0, 0.0, 0.0, 0.0)


@dataclass
class EmProperties:
    """Surface material parameters; fields may be floats or tape values."""

    eps_r: object
    sigma: object
    s: object
    k_chi: object

    def values(self) -> tuple[float, float, float, float]:
        return (
            float(ad.value_of(self.eps_r)),
            float(ad.value_of(self.sigma)),
            float(ad.value_of(self.s)),
            float(ad.value_of(self.k_chi)),
        )

    def validate(self) -> "EmProperties":
        eps_r, sigma, s, k_chi = self.values()
        if not (eps_r >= 1.0 and sigma >= 0.0 and 0.0 <= s <= 1.0 and 0.0 <= k_chi <= 1.0):
            raise ValueError(f"invalid EM properties: {self.values()}")
        return self


NEUTRAL_PROPERTIES = EmProperties(2.0, 1.0, 0.5, 0.5)


@dataclass
class MaterialTable:
    """Static category -> properties lookup (truth tables, ITU-style baseline)."""

    entries: dict[int, EmProperties] = field(default_factory=dict)
    default: EmProperties | None = None

    def lookup(self, category: int) -> EmProperties:
        if category in self.entries:
            return self.entries[category]
        if self.default is not None:
            return self.default
        raise KeyError(f"no material for category {category} and no default entry")

    def em_columns(self, points, categories):
        """Per-interaction property columns (constants) for channel math."""
        props = [self.lookup(int(c)) for c in categories]
        cols = np.array([p.values() for p in props], dtype=np.float64)
        if cols.size == 0:
            cols = np.zeros((0, 4))
        return cols[:, 0], cols[:, 1], cols[:, 2], cols[:, 3]

    @classmethod
    def neutral(cls) -> "MaterialTable":
        return cls(entries={}, default=NEUTRAL_PROPERTIES)

    @classmethod
    def from_scene_truth(cls, truth_materials: dict) -> "MaterialTable":
        entries = {}
        default = None
        for key, spec in truth_materials.items():
            props = EmProperties(
                float(spec["eps_r"]), float(spec["sigma"]),
                float(spec["s"]), float(spec["k_chi"]),
            ).validate()
            if str(key) == "default":
                default = props
            else:
                entries[int(key)] = props
        return cls(entries=entries, default=default)


@dataclass(frozen=True)
class FourierEncoder:
    """Octave sin/cos encoding of scene-normalized coordinates."""

    num_freqs: int
    bounds_min: np.ndarray
    bounds_max: np.ndarray

    @property
    def dim(self) -> int:
        return 3 + 6 * self.num_freqs

    @classmethod
    def from_bounds(cls, bounds_min, bounds_max, num_freqs: int = 8) -> "FourierEncoder":
        if num_freqs < 1:
            raise ValueError("num_freqs must be >= 1")
        lo = np.asarray(bounds_min, dtype=np.float64).copy()
        hi = np.asarray(bounds_max, dtype=np.float64).copy()
        flat = hi - lo < 1e-9
        lo[flat] -= 0.5
        hi[flat] += 0.5
        return cls(num_freqs, lo, hi)

    def encode_batch(self, points) -> np.ndarray:
        q = np.atleast_2d(np.asarray(points, dtype=np.float64))
        u = 2.0 * (q - self.bounds_min) / (self.bounds_max - self.bounds_min) - 1.0
        u = np.clip(u, -1.0, 1.0)
        feats = [u]
        for k in range(self.num_freqs):
            w = (2.0 ** k) * np.pi * u
            octave = np.empty((u.shape[0], 6))
            octave[:, 0::2] = np.sin(w)
            octave[:, 1::2] = np.cos(w)
            feats.append(octave)
        return np.concatenate(feats, axis=1)

    def encode(self, q) -> np.ndarray:
        return self.encode_batch(np.asarray(q).reshape(1, 3))[0]


def activation_map(raw) -> EmProperties:
    """Map 4 unconstrained reals onto the physical property ranges."""
    r0, r1, r2, r3 = raw
    return EmProperties(
        1.0 + ad.exp(r0), ad.exp(r1), ad.sigmoid(r2), ad.sigmoid(r3)
    )


@dataclass
class EmFieldNet:
    """MLP-backed EM property field; `weights` is the trainable set."""

    encoder: FourierEncoder
    hidden_sizes: tuple[int, ...]
    weights: dict[str, np.ndarray]
    use_categories: bool = False
    category_labels: tuple[int, ...] = ()
    embed_dim: int = 8

    def weight_names(self) -> list[str]:
        return sorted(self.weights.keys())

    def n_params(self) -> int:
        return sum(w.size for w in self.weights.values())

    def evaluator(self, tape: ad.Tape | None = None) -> "FieldEvaluator":
        return FieldEvaluator(self, tape)

    def _embed_row(self, category: int) -> int:
        try:
            return self.category_labels.index(int(category))
        except ValueError:
            raise KeyError(f"category {category} not known to the field net") from None


def init_net(
    seed: int,
    encoder: FourierEncoder,
    hidden_sizes: tuple[int, ...] = (128, 128, 128),
    use_categories: bool = False,
    category_labels: tuple[int, ...] = (),
    embed_dim: int = 8,
) -> EmFieldNet:
    """He-uniform hidden layers, zero output layer (neutral initial field)."""
    rng = np.random.default_rng(seed)
    weights: dict[str, np.ndarray] = {}
    in_dim = encoder.dim + (embed_dim if use_categories else 0)
    fan_in = in_dim
    for i, width in enumerate(hidden_sizes):
        limit = np.sqrt(6.0 / fan_in)
        if i == 0 and use_categories:
            # First layer is split between encoding and embedding inputs,
            # equivalent to one matrix over the concatenated input.
            weights["w0"] = rng.uniform(-limit, limit, size=(encoder.dim, width))
            weights["w0_emb"] = rng.uniform(-limit, limit, size=(embed_dim, width))
        else:
            weights[f"w{i}"] = rng.uniform(-limit, limit, size=(fan_in, width))
        weights[f"b{i}"] = np.zeros(width)
        fan_in = width
    weights["w_out"] = np.zeros((fan_in, 4))
    weights["b_out"] = np.zeros(4)
    if use_categories:
        # Same scale as one encoding octave so embeddings start comparable.
        weights["embed"] = rng.uniform(-0.5, 0.5, size=(len(category_labels), embed_dim))
    return EmFieldNet(
        encoder=encoder,
        hidden_sizes=tuple(hidden_sizes),
        weights=weights,
        use_categories=use_categories,
        category_labels=tuple(int(c) for c in category_labels),
        embed_dim=embed_dim,
    )


class FieldEvaluator:
    """Binds net weights to one tape (or none) and answers property queries."""

    def __init__(self, net: EmFieldNet, tape: ad.Tape | None = None):
        self.net = net
        self.tape = tape
        if tape is None:
            self._w = dict(net.weights)
        else:
            self._w = {k: tape.leaf(v) for k, v in net.weights.items()}

    def weight_leaves(self) -> dict[str, object]:
        return self._w

    def raw_batch(self, points, categories=None):
        """Pre-activation (P, 4) outputs for a batch of surface points."""
        net = self.net
        enc = net.encoder.encode_batch(points)
        h = ad.matmul(enc, self._w["w0"])
        if net.use_categories:
            if categories is None:
                raise ValueError("field net was built with category embeddings")
            rows = [net._embed_row(c) for c in categories]
            emb = ad.gather_rows(self._w["embed"], rows)
            h = h + ad.matmul_vv(emb, self._w["w0_emb"])
        h = ad.relu(h + self._w["b0"])
        for i in range(1, len(net.hidden_sizes)):
            h = ad.relu(ad.matmul_vv(h, self._w[f"w{i}"]) + self._w[f"b{i}"])
        return ad.matmul_vv(h, self._w["w_out"]) + self._w["b_out"]

    def em_columns(self, points, categories=None):
        """Activated per-point property columns (eps_r, sigma, s, k_chi)."""
        raw = self.raw_batch(points, categories)
        return (
            1.0 + ad.exp(ad.take_col(raw, 0)),
            ad.exp(ad.take_col(raw, 1)),
            ad.sigmoid(ad.take_col(raw, 2)),
            ad.sigmoid(ad.take_col(raw, 3)),
        )

    def properties(self, q, category=None) -> EmProperties:
        cats = None if category is None else [category]
        cols = self.em_columns(np.asarray(q).reshape(1, 3), cats)
        return EmProperties(*(ad.take(c, 0) for c in cols))


def query(net: EmFieldNet, q, category=None, tape: ad.Tape | None = None) -> EmProperties:
    """One-off field query; for batches create an evaluator once."""
    return net.evaluator(tape).properties(q, category)


def save_checkpoint(path, net: EmFieldNet, beta: float = 0.0, optimizer=None,
                    seed=None, lineage=None) -> None:
    payload = {
        "format": "radiotwin-field-1",
        "hidden_sizes": list(net.hidden_sizes),
        "num_freqs": net.encoder.num_freqs,
        "bounds_min": [float(v) for v in net.encoder.bounds_min],
        "bounds_max": [float(v) for v in net.encoder.bounds_max],
        "use_categories": net.use_categories,
        "category_labels": list(net.category_labels),
        "embed_dim": net.embed_dim,
        "weights": {
            k: {"shape": list(w.shape), "data": [float(x) for x in w.ravel()]}
            for k, w in sorted(net.weights.items())
        },
        "beta": float(beta),
        "optimizer": optimizer,
        "seed": seed,
        "lineage": lineage,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


@dataclass
class Checkpoint:
    net: EmFieldNet
    beta: float
    optimizer: dict | None
    seed: int | None
    lineage: str | None


def load_checkpoint(path) -> Checkpoint:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != "radiotwin-field-1":
        raise ValueError(f"not a field checkpoint: {path}")
    encoder = FourierEncoder(
        payload["num_freqs"],
        np.asarray(payload["bounds_min"], dtype=np.float64),
        np.asarray(payload["bounds_max"], dtype=np.float64),
    )
    weights = {
        k: np.asarray(spec["data"], dtype=np.float64).reshape(spec["shape"])
        for k, spec in payload["weights"].items()
    }
    net = EmFieldNet(
        encoder=encoder,
        hidden_sizes=tuple(payload["hidden_sizes"]),
        weights=weights,
        use_categories=payload["use_categories"],
        category_labels=tuple(payload["category_labels"]),
        embed_dim=payload["embed_dim"],
    )
    return Checkpoint(
        net=net,
        beta=float(payload["beta"]),
        optimizer=payload.get("optimizer"),
        seed=payload.get("seed"),
        lineage=payload.get("lineage"),
    )
