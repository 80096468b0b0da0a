"""FLoRA (Tucker) and LoRA adapters: construction, reconstruction, merging, budgets.

Weight layouts
--------------
* linear: ``(d1, d2)`` with ``h = W x`` for ``x`` of length ``d2``.
* conv: ``(d_in, d_out, k, k)``.

A Tucker adapter for an order-N weight holds a core of shape ``(J_0..J_{N-1})``
and one factor per mode of shape ``(I_n, J_n)``; the update it represents is
``core x_0 F_0 x_1 F_1 ... x_{N-1} F_{N-1}``. The scale ``s`` is stored on the
adapter but is only applied when merging or running a forward pass.

LoRA on a conv weight works on a ``(k*d_in, k*d_out)`` matrix. Entry
``W[i, o, a, b]`` lives at row ``i*k + a`` and column ``o*k + b`` of that
matrix (see :func:`conv_weight_to_matrix`).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from . import io as fio
from .tensor import as_matrix, as_tensor, multi_mode_product

BUNDLE_FORMAT = "flora-adapter/1"

LayerKind = Literal["linear", "conv"]
LoraKind = Literal["linear", "conv_reshape"]


@dataclass(frozen=True)
class FrozenLayer:
    """A frozen pre-trained weight. The array is made read-only on construction."""

    weight: np.ndarray
    kind: LayerKind

    def __post_init__(self):
        w = as_tensor(self.weight, "weight").copy()
        if self.kind == "linear":
            if w.ndim != 2:
                raise ValueError(f"linear weight must be 2-D, got {w.shape}")
        elif self.kind == "conv":
            if w.ndim != 4 or w.shape[2] != w.shape[3]:
                raise ValueError(f"conv weight must be (d_in, d_out, k, k), got {w.shape}")
        else:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        w.flags.writeable = False
        object.__setattr__(self, "weight", w)

    @classmethod
    def from_weight(cls, weight) -> "FrozenLayer":
        w = np.asarray(weight)
        return cls(w, "linear" if w.ndim == 2 else "conv")

    @property
    def shape(self) -> tuple:
        return self.weight.shape

    @property
    def kernel_size(self) -> int:
        if self.kind != "conv":
            raise AttributeError("linear layers have no kernel")
        return self.weight.shape[2]


@dataclass
class TuckerAdapter:
    core: np.ndarray
    factors: list
    scale: float = 1.0
    seed: int | None = None

    def __post_init__(self):
        self.core = as_tensor(self.core, "core")
        self.factors = [as_matrix(f, f"factor {n}") for n, f in enumerate(self.factors)]
        if len(self.factors) != self.core.ndim:
            raise ValueError(f"core has {self.core.ndim} modes but {len(self.factors)} factors given")
        for n, f in enumerate(self.factors):
            if f.shape[1] != self.core.shape[n]:
                raise ValueError(
                    f"factor {n} has {f.shape[1]} columns, core extent is {self.core.shape[n]}"
                )
            if f.shape[1] > f.shape[0]:
                raise ValueError(f"rank {f.shape[1]} exceeds extent {f.shape[0]} on mode {n}")
        if not np.isfinite(self.scale):
            raise ValueError("scale must be finite")
        self.scale = float(self.scale)

    @property
    def ranks(self) -> tuple:
        return self.core.shape

    @property
    def shape(self) -> tuple:
        return tuple(f.shape[0] for f in self.factors)

    def parameters(self) -> list:
        return [self.core, *self.factors]

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())


@dataclass
class LoraAdapter:
    """``delta = b @ a.T`` (reshaped for conv). ``a`` is Gaussian-initialised, ``b`` zero."""

    a: np.ndarray
    b: np.ndarray
    kind: LoraKind = "linear"
    scale: float = 1.0
    seed: int | None = None

    def __post_init__(self):
        self.a = as_matrix(self.a, "a")
        self.b = as_matrix(self.b, "b")
        if self.kind not in ("linear", "conv_reshape"):
            raise ValueError(f"unknown LoRA kind {self.kind!r}")
        if self.a.shape[1] != self.b.shape[1]:
            raise ValueError(f"rank mismatch: a has {self.a.shape[1]}, b has {self.b.shape[1]}")
        if not np.isfinite(self.scale):
            raise ValueError("scale must be finite")
        self.scale = float(self.scale)

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    def parameters(self) -> list:
        return [self.a, self.b]

    @property
    def num_params(self) -> int:
        return self.a.size + self.b.size


def _rng(seed):
    return np.random.default_rng(seed)


def tucker_ranks(shape: Sequence[int], r: int, r3: int | None = None) -> tuple:
    """Expand ``r`` (and ``r3`` for conv) to one rank per mode: ``(r, r)`` or ``(r, r, r3, r3)``."""
    if len(shape) == 2:
        return (r, r)
    if len(shape) == 4:
        if r3 is None:
            raise ValueError("conv adapters need a kernel rank r3")
        return (r, r, r3, r3)
    return (r,) * len(shape)


def init_tucker(shape: Sequence[int], ranks: Sequence[int], scale: float = 1.0,
                seed: int | None = None) -> TuckerAdapter:
    """Zero core, Gaussian factors with std ``1/sqrt(J_n)``; the initial update is zero."""
    shape = tuple(int(s) for s in shape)
    ranks = tuple(int(r) for r in ranks)
    if len(shape) != len(ranks):
        raise ValueError(f"{len(ranks)} ranks given for an order-{len(shape)} weight")
    for n, (i, j) in enumerate(zip(shape, ranks)):
        if j < 1 or j > i:
            raise ValueError(f"rank {j} on mode {n} must lie in [1, {i}]")
    rng = _rng(seed)
    factors = [rng.standard_normal((i, j)) / np.sqrt(j) for i, j in zip(shape, ranks)]
    return TuckerAdapter(core=np.zeros(ranks), factors=factors, scale=scale, seed=seed)


def lora_shapes(shape: Sequence[int], r: int) -> tuple:
    """Shapes of ``(a, b)`` for a LoRA adapter of rank ``r`` on a weight of ``shape``."""
    if len(shape) == 2:
        d1, d2 = shape
        return (d2, r), (d1, r)
    d_in, d_out, k, _ = shape
    return (k * d_out, r), (k * d_in, r)


def init_lora(shape: Sequence[int], r: int, scale: float = 1.0,
              seed: int | None = None) -> LoraAdapter:
    shape = tuple(int(s) for s in shape)
    if len(shape) not in (2, 4):
        raise ValueError(f"LoRA supports linear or conv weights, got shape {shape}")
    a_shape, b_shape = lora_shapes(shape, r)
    if r < 1 or r > min(a_shape[0], b_shape[0]):
        raise ValueError(f"LoRA rank {r} out of range for weight {shape}")
    rng = _rng(seed)
    a = rng.standard_normal(a_shape) / np.sqrt(r)
    kind = "linear" if len(shape) == 2 else "conv_reshape"
    return LoraAdapter(a=a, b=np.zeros(b_shape), kind=kind, scale=scale, seed=seed)


def reconstruct(adapter: TuckerAdapter) -> np.ndarray:
    """Full update tensor of a Tucker adapter, without the scale."""
    return multi_mode_product(adapter.core, adapter.factors)


def conv_weight_to_matrix(w) -> np.ndarray:
    """``(d_in, d_out, k, k)`` -> ``(k*d_in, k*d_out)`` under the fixed reshape map."""
    w = np.asarray(w, dtype=np.float64)
    d_in, d_out, k, _ = w.shape
    return np.ascontiguousarray(w.transpose(0, 2, 1, 3).reshape(d_in * k, d_out * k))


def conv_matrix_to_weight(m, d_in: int, d_out: int, k: int) -> np.ndarray:
    """Inverse of :func:`conv_weight_to_matrix`."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (d_in * k, d_out * k):
        raise ValueError(f"matrix {m.shape} does not match conv weight ({d_in}, {d_out}, {k}, {k})")
    return np.ascontiguousarray(m.reshape(d_in, k, d_out, k).transpose(0, 2, 1, 3))


def _check_lora_layer(adapter: LoraAdapter, layer: FrozenLayer):
    a_shape, b_shape = lora_shapes(layer.shape, adapter.rank)
    expected = "linear" if layer.kind == "linear" else "conv_reshape"
    if adapter.kind != expected:
        raise ValueError(f"{adapter.kind} LoRA adapter cannot adapt a {layer.kind} layer")
    if adapter.a.shape != a_shape or adapter.b.shape != b_shape:
        raise ValueError(
            f"LoRA factors {adapter.a.shape}, {adapter.b.shape} do not fit layer {layer.shape}"
        )


def lora_delta(adapter: LoraAdapter, layer: FrozenLayer) -> np.ndarray:
    """Unscaled LoRA update in the layer's own weight layout."""
    _check_lora_layer(adapter, layer)
    m = adapter.b @ adapter.a.T
    if adapter.kind == "linear":
        return m
    d_in, d_out, k, _ = layer.shape
    return conv_matrix_to_weight(m, d_in, d_out, k)


def adapter_delta(adapter, layer: FrozenLayer) -> np.ndarray:
    """Unscaled update for either adapter type."""
    if isinstance(adapter, TuckerAdapter):
        if adapter.shape != layer.shape:
            raise ValueError(f"adapter shape {adapter.shape} does not match layer {layer.shape}")
        return reconstruct(adapter)
    return lora_delta(adapter, layer)


def merge(layer: FrozenLayer, delta, scale: float) -> np.ndarray:
    """``W0 + scale * delta`` as a fresh array."""
    delta = as_tensor(delta, "delta")
    if delta.shape != layer.shape:
        raise ValueError(f"delta shape {delta.shape} does not match layer {layer.shape}")
    if not np.isfinite(scale):
        raise ValueError("scale must be finite")
    if scale == 0:
        return layer.weight.copy()
    return layer.weight + scale * delta


def param_count(shape: Sequence[int], ranks, method: Literal["flora", "lora"]) -> int:
    """Exact number of trainable adapter entries.

    Parameters
    ----------
    shape : sequence of int
        Weight shape, ``(d1, d2)`` or ``(d_in, d_out, k, k)``.
    ranks : int or sequence of int
        For ``"lora"`` the rank ``r``. For ``"flora"`` either one rank per mode,
        or ``(r1, r2, r3)`` for conv (expanded to ``(r1, r2, r3, r3)``).
    method : {"flora", "lora"}
    """
    shape = tuple(int(s) for s in shape)
    if method == "lora":
        r = int(ranks if np.isscalar(ranks) else ranks[0])
        if len(shape) == 2:
            return r * (shape[0] + shape[1])
        d_in, d_out, k, _ = shape
        return r * k * (d_in + d_out)
    if method != "flora":
        raise ValueError(f"unknown method {method!r}")
    ranks = (int(ranks),) * len(shape) if np.isscalar(ranks) else tuple(int(r) for r in ranks)
    if len(shape) == 4 and len(ranks) == 3:
        ranks = ranks + (ranks[2],)
    if len(ranks) != len(shape):
        raise ValueError(f"{len(ranks)} ranks given for an order-{len(shape)} weight")
    return int(np.prod(ranks)) + sum(i * j for i, j in zip(shape, ranks))


# -- bundles ---------------------------------------------------------------

def save_bundle(path, adapter) -> None:
    """Write ``adapter`` as a directory of FLT1 files plus ``manifest.json``.

    The directory is assembled under a temporary name and renamed into place.
    """
    import os
    import shutil
    import tempfile

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        if isinstance(adapter, TuckerAdapter):
            arrays = {"core": adapter.core}
            arrays.update({f"factor_{n + 1}": f for n, f in enumerate(adapter.factors)})
            manifest = {"format": BUNDLE_FORMAT, "kind": "flora",
                        "ranks": list(adapter.ranks)}
        else:
            arrays = {"lora_a": adapter.a, "lora_b": adapter.b}
            manifest = {"format": BUNDLE_FORMAT, "kind": "lora",
                        "lora_kind": adapter.kind, "ranks": [adapter.rank]}
        manifest.update(scale=adapter.scale, seed=adapter.seed,
                        files={name: f"{name}.flt" for name in arrays})
        for name, arr in arrays.items():
            (tmp / f"{name}.flt").write_bytes(fio.encode_tensor(arr))
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def load_bundle(path):
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise fio.FormatError(f"{path}: unreadable adapter manifest ({exc})") from exc
    if manifest.get("format") != BUNDLE_FORMAT:
        raise fio.FormatError(f"{path}: unsupported bundle format {manifest.get('format')!r}")
    files = manifest["files"]
    load = lambda name: fio.load_tensor(path / files[name])  # noqa: E731
    if manifest["kind"] == "flora":
        n = len(manifest["ranks"])
        return TuckerAdapter(core=load("core"),
                             factors=[load(f"factor_{i + 1}") for i in range(n)],
                             scale=manifest["scale"], seed=manifest.get("seed"))
    if manifest["kind"] == "lora":
        return LoraAdapter(a=load("lora_a"), b=load("lora_b"), kind=manifest["lora_kind"],
                           scale=manifest["scale"], seed=manifest.get("seed"))
    raise fio.FormatError(f"{path}: unknown adapter kind {manifest['kind']!r}")
