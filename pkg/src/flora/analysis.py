"""Diagnostics: feature amplification, optimal cores, reshape locality, budgets."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np

from .adapters import param_count
from .numerics import pseudo_inverse, top_r_singular_subspaces
from .tensor import as_matrix

ZERO_DELTA_TOL = 1e-12


@dataclass(frozen=True)
class AmpReport:
    delta_frob: float
    projection_frob: float
    factor: float
    rank_used: int

    @property
    def infinite(self) -> bool:
        return np.isinf(self.factor)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["infinite"] = bool(self.infinite)
        if self.infinite:
            d["factor"] = None
        return d


def amplification_factor(delta, frozen, r: int) -> AmpReport:
    """``||delta||_F / ||U^T W V||_F`` with ``U, V`` the top-``r`` singular vectors of ``delta``.

    A zero ``delta`` (norm below 1e-12) reports a factor of 0. A zero
    projection with a nonzero ``delta`` reports ``inf``.
    """
    delta = as_matrix(delta, "delta")
    frozen = as_matrix(frozen, "frozen")
    if delta.shape != frozen.shape:
        raise ValueError(f"delta {delta.shape} and frozen {frozen.shape} differ in shape")
    delta_frob = float(np.linalg.norm(delta))
    if delta_frob < ZERO_DELTA_TOL:
        if not 1 <= r <= min(delta.shape):
            raise ValueError(f"rank {r!r} out of range for a {delta.shape} matrix")
        return AmpReport(delta_frob, 0.0, 0.0, int(r))
    u, v = top_r_singular_subspaces(delta, r)
    proj = float(np.linalg.norm(u.T @ frozen @ v))
    factor = delta_frob / proj if proj > 0 else float("inf")
    return AmpReport(delta_frob, proj, factor, int(r))


def optimal_core(a, b, target) -> np.ndarray:
    """Least-squares core ``G`` for ``A G B^T ~ target``, i.e. ``pinv(A) target pinv(B^T)``."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    target = as_matrix(target, "target")
    if target.shape != (a.shape[0], b.shape[0]):
        raise ValueError(f"target {target.shape} does not match A {a.shape} and B {b.shape}")
    return pseudo_inverse(a) @ target @ pseudo_inverse(b.T)


@dataclass(frozen=True)
class LocalityReport:
    d_in: int
    d_out: int
    k: int
    pairs: list = field(default_factory=list)

    @property
    def max_separation(self) -> int:
        return max((p["manhattan"] for p in self.pairs), default=0)

    @property
    def mean_separation(self) -> float:
        return float(np.mean([p["manhattan"] for p in self.pairs])) if self.pairs else 0.0

    @property
    def max_flat_separation(self) -> int:
        return max((p["flat"] for p in self.pairs), default=0)

    @property
    def mean_flat_separation(self) -> float:
        return float(np.mean([p["flat"] for p in self.pairs])) if self.pairs else 0.0

    def to_dict(self, include_pairs: bool = True) -> dict:
        d = {
            "d_in": self.d_in, "d_out": self.d_out, "k": self.k,
            "num_pairs": len(self.pairs),
            "max_separation": self.max_separation,
            "mean_separation": self.mean_separation,
            "max_flat_separation": self.max_flat_separation,
            "mean_flat_separation": self.mean_flat_separation,
        }
        if include_pairs:
            d["pairs"] = list(self.pairs)
        return d


def locality_dispersion(d_in: int, d_out: int, k: int) -> LocalityReport:
    """Where kernel-adjacent weights land in LoRA's ``(k*d_in, k*d_out)`` matrix.

    For each channel pair and each pair of kernel positions one step apart
    (along the kernel row or column axis), reports the row and column offsets,
    their sum, and the distance in the row-major flattening of the matrix.
    """
    if min(d_in, d_out, k) < 1:
        raise ValueError("extents must be positive")
    ncols = k * d_out

    def pos(i, o, a, b):
        return i * k + a, o * k + b

    pairs = []
    for i in range(d_in):
        for o in range(d_out):
            for a in range(k):
                for b in range(k):
                    for axis, (a2, b2) in (("row", (a + 1, b)), ("col", (a, b + 1))):
                        if a2 >= k or b2 >= k:
                            continue
                        r1, c1 = pos(i, o, a, b)
                        r2, c2 = pos(i, o, a2, b2)
                        dr, dc = abs(r2 - r1), abs(c2 - c1)
                        pairs.append({
                            "in": i, "out": o, "axis": axis,
                            "kernel": [a, b], "neighbor": [a2, b2],
                            "drow": dr, "dcol": dc, "manhattan": dr + dc,
                            "flat": abs((r2 * ncols + c2) - (r1 * ncols + c1)),
                        })
    return LocalityReport(d_in, d_out, k, pairs)


@dataclass(frozen=True)
class BudgetRow:
    layer: str
    shape: tuple
    ranks: tuple
    method: str
    count: int
    ratio_vs_lora: float


def budget_table(specs) -> list:
    """Parameter counts for FLoRA and LoRA side by side.

    ``specs`` is an iterable of dicts with keys ``shape`` and ``r`` (and
    ``r3`` for conv shapes). LoRA rows use ``r``; FLoRA rows use ``r1 = r2 = r``
    and ``r3``. ``ratio_vs_lora`` divides each count by the LoRA count.
    """
    rows = []
    for spec in specs:
        shape = tuple(int(s) for s in spec["shape"])
        r = int(spec["r"])
        layer = "linear" if len(shape) == 2 else "conv"
        franks = (r, r) if layer == "linear" else (r, r, int(spec["r3"]))
        lora = param_count(shape, r, "lora")
        flora = param_count(shape, franks, "flora")
        rows.append(BudgetRow(layer, shape, franks, "flora", flora, flora / lora))
        rows.append(BudgetRow(layer, shape, (r,), "lora", lora, 1.0))
    return rows


def budget_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "shape", "ranks", "method", "count", "ratio_vs_lora"])
    for row in rows:
        w.writerow([row.layer, "x".join(map(str, row.shape)), "x".join(map(str, row.ranks)),
                    row.method, row.count, repr(row.ratio_vs_lora)])
    return buf.getvalue()


def matched_lora_rank(shape, flora_count: int) -> int:
    """LoRA rank whose parameter count is closest to ``flora_count`` (smaller rank on ties)."""
    per_rank = param_count(shape, 1, "lora")
    lo = max(1, flora_count // per_rank)
    cands = [lo, lo + 1]
    return min(cands, key=lambda r: (abs(param_count(shape, r, "lora") - flora_count), r))
