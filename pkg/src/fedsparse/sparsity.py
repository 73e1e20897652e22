"""Mask machinery: ERK allocation, magnitude pruning, gradient growth.

All selection is deterministic: candidates are ranked by magnitude with ties
broken by lowest flat index, so identical inputs produce identical masks on
any platform or thread count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class ReadjustmentSchedule:
    """When and how much mask mass is reallocated during training.

    interval: rounds between readjustments (dR), last_round: final round with
    a nonzero ratio (R_end), base_ratio: first-round reallocation fraction,
    epoch_in_round: local epoch after which clients readjust (E_p).
    """

    interval: int
    last_round: int
    base_ratio: float
    epoch_in_round: int

    def __post_init__(self):
        if self.interval < 1:
            raise ConfigurationError("readjustment interval must be >= 1")
        if self.last_round < 1:
            raise ConfigurationError("last readjustment round must be >= 1")
        if not 0.0 <= self.base_ratio <= 1.0:
            raise ConfigurationError("readjustment ratio must lie in [0, 1]")
        if self.epoch_in_round < 1:
            raise ConfigurationError("readjustment epoch must be >= 1")


def cosine_alpha(round_no: int, schedule: ReadjustmentSchedule) -> float:
    """Cosine-decayed reallocation ratio for a 1-based round number.

    Returns base_ratio at round 1, half of it at the midpoint, and exactly 0
    for every round past last_round.
    """
    if round_no < 1:
        raise ValueError("rounds are numbered from 1")
    if round_no - 1 > schedule.last_round:
        return 0.0
    frac = (round_no - 1) / schedule.last_round
    return 0.5 * schedule.base_ratio * (1.0 + math.cos(math.pi * frac))


class Mask:
    """Per-layer boolean arrays aligned with prunable weight tensors.

    Bias vectors and non-parametric layers carry no mask and are treated as
    always-on.
    """

    def __init__(self, arrays: dict[int, np.ndarray]):
        self.arrays = {i: np.asarray(a, dtype=bool) for i, a in arrays.items()}

    @classmethod
    def all_ones(cls, net) -> "Mask":
        return cls({i: np.ones(net.params[i]["weight"].shape, dtype=bool) for i in net.prunable_layers()})

    def copy(self) -> "Mask":
        return Mask({i: a.copy() for i, a in self.arrays.items()})

    def nnz_by_layer(self) -> dict[int, int]:
        return {i: int(a.sum()) for i, a in self.arrays.items()}

    @property
    def total_nnz(self) -> int:
        return sum(int(a.sum()) for a in self.arrays.values())

    @property
    def total_size(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def density(self) -> float:
        return self.total_nnz / self.total_size

    def hamming(self, other: "Mask") -> int:
        return sum(int((a ^ other.arrays[i]).sum()) for i, a in self.arrays.items())

    def __eq__(self, other):
        if not isinstance(other, Mask) or self.arrays.keys() != other.arrays.keys():
            return NotImplemented
        return all(np.array_equal(a, other.arrays[i]) for i, a in self.arrays.items())

    def apply(self, net) -> None:
        """Zero every masked-out weight in place."""
        for i, a in self.arrays.items():
            np.multiply(net.params[i]["weight"], a, out=net.params[i]["weight"])


@dataclass(frozen=True)
class SparsityDistribution:
    """Integer keep counts per prunable layer, plus the shapes they refer to.

    Counts are the source of truth; the fractional per-layer sparsities are
    derived as (n_l - keep_l) / n_l, so a single-layer distribution at target
    S reports sparsity S exactly.
    """

    layer_shapes: tuple[tuple[int, ...], ...]
    keep_counts: tuple[int, ...]

    def __post_init__(self):
        for shape, keep in zip(self.layer_shapes, self.keep_counts):
            n = int(np.prod(shape))
            if not 0 <= keep <= n:
                raise ConfigurationError(f"keep count {keep} out of range for layer of size {n}")

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return tuple(int(np.prod(s)) for s in self.layer_shapes)

    @property
    def sparsities(self) -> tuple[float, ...]:
        return tuple((n - k) / n for n, k in zip(self.layer_sizes, self.keep_counts))

    @property
    def densities(self) -> tuple[float, ...]:
        return tuple(k / n for n, k in zip(self.layer_sizes, self.keep_counts))

    @property
    def total_params(self) -> int:
        return sum(self.layer_sizes)

    @property
    def total_keep(self) -> int:
        return sum(self.keep_counts)


def erk_distribution(layer_shapes, target_sparsity: float) -> SparsityDistribution:
    """Allocate per-layer densities so small layers stay denser than large ones.

    Layer density scales with sum(shape)/prod(shape) (fan-in + fan-out +
    kernel dims over parameter count), normalized by a global factor so the
    total retained count hits (1 - S) * n. Layers whose scaled density would
    exceed 1 are clamped dense and the factor is re-solved over the rest.
    """
    shapes = tuple(tuple(int(d) for d in s) for s in layer_shapes)
    if not shapes:
        raise ConfigurationError("at least one prunable layer is required")
    if not 0.0 <= target_sparsity < 1.0:
        raise ConfigurationError(f"target sparsity {target_sparsity} must lie in [0, 1)")
    sizes = [int(np.prod(s)) for s in shapes]
    total = sum(sizes)
    target_keep = round((1.0 - target_sparsity) * total)
    if target_keep > total:
        raise ConfigurationError("requested density exceeds the available parameters")

    raw = [sum(s) / np.prod(s) for s in shapes]
    dense = set()
    while True:
        budget = target_keep - sum(sizes[i] for i in dense)
        open_mass = sum(raw[i] * sizes[i] for i in range(len(shapes)) if i not in dense)
        if budget < 0 or (open_mass == 0 and budget > 0):
            raise ConfigurationError(
                f"cannot reach sparsity {target_sparsity}: {target_keep} weights do not fit"
            )
        eps = budget / open_mass if open_mass > 0 else 0.0
        over = [i for i in range(len(shapes)) if i not in dense and eps * raw[i] > 1.0]
        if not over:
            break
        # clamp the most over-allocated layer dense and re-solve
        dense.add(max(over, key=lambda i: raw[i]))

    keep = [0] * len(shapes)
    for i in range(len(shapes)):
        keep[i] = sizes[i] if i in dense else round(eps * raw[i] * sizes[i])
    # push the rounding residual into the largest non-dense layer
    residual = target_keep - sum(keep)
    if residual != 0:
        adjustable = [i for i in range(len(shapes)) if i not in dense] or list(range(len(shapes)))
        i = max(adjustable, key=lambda j: sizes[j])
        keep[i] = min(sizes[i], max(0, keep[i] + residual))
    return SparsityDistribution(shapes, tuple(keep))


def uniform_distribution(layer_shapes, target_sparsity: float) -> SparsityDistribution:
    """Every layer at the same sparsity; used by tests and ablations."""
    shapes = tuple(tuple(int(d) for d in s) for s in layer_shapes)
    keep = tuple(round((1.0 - target_sparsity) * int(np.prod(s))) for s in shapes)
    return SparsityDistribution(shapes, keep)


def _keep_topk(scores: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k largest scores, ties to the lowest flat index."""
    order = np.argsort(-scores, kind="stable")
    out = np.zeros(scores.size, dtype=bool)
    out[order[:k]] = True
    return out


def prune_layerwise(net, mask: Mask, target: SparsityDistribution) -> Mask:
    """Mask out the smallest-magnitude retained weights, layer by layer.

    Pruned weights are set to 0.0. The target may not be denser than the
    current mask.
    """
    layers = net.prunable_layers()
    if len(layers) != len(target.keep_counts):
        raise ValueError("distribution does not match the network's prunable layers")
    new_arrays = {}
    for li, keep in zip(layers, target.keep_counts):
        w = net.params[li]["weight"].reshape(-1)
        m = mask.arrays[li].reshape(-1)
        current = int(m.sum())
        if keep > current:
            raise ValueError(
                f"layer {li}: target keeps {keep} weights but only {current} are retained"
            )
        # retained weights compete by |w| >= 0; masked-out ones sit below at -1
        scores = np.where(m, np.abs(w), -1.0)
        flat = _keep_topk(scores, keep)
        w[~flat] = 0.0
        new_arrays[li] = flat.reshape(mask.arrays[li].shape)
    return Mask(new_arrays)


def grow_gradient_magnitude(net, mask: Mask, grads: dict[int, np.ndarray],
                            target: SparsityDistribution) -> Mask:
    """Re-enable masked-out positions with the largest gradient magnitude.

    Newly grown weights start at exactly 0.0 so growth never injects
    magnitude into the network.
    """
    layers = net.prunable_layers()
    if len(layers) != len(target.keep_counts):
        raise ValueError("distribution does not match the network's prunable layers")
    new_arrays = {}
    for li, keep in zip(layers, target.keep_counts):
        w = net.params[li]["weight"].reshape(-1)
        m = mask.arrays[li].reshape(-1)
        deficit = keep - int(m.sum())
        if deficit < 0:
            raise ValueError(f"layer {li}: mask already denser than the growth target")
        if deficit == 0:
            new_arrays[li] = m.reshape(mask.arrays[li].shape).copy()
            continue
        candidates = int((~m).sum())
        if deficit > candidates:
            raise ValueError(f"layer {li}: cannot grow {deficit} weights, only {candidates} masked out")
        g = np.abs(grads[li].reshape(-1))
        scores = np.where(m, -1.0, g)
        grown = _keep_topk(scores, deficit)
        w[grown] = 0.0
        new_arrays[li] = (m | grown).reshape(mask.arrays[li].shape)
    return Mask(new_arrays)


def readjust(net, mask: Mask, grads: dict[int, np.ndarray], round_no: int,
             schedule: ReadjustmentSchedule, base: SparsityDistribution) -> Mask:
    """Prune a cosine-decayed fraction of retained mass, then grow it back.

    Per layer, floor(alpha_r * keep) weights are pruned by magnitude and the
    same number regrown at the largest-gradient masked positions, so the
    per-layer counts after a readjustment equal the base distribution's
    exactly. Positions pruned here are immediately eligible for regrowth.
    """
    alpha = cosine_alpha(round_no, schedule)
    if alpha == 0.0:
        return mask.copy()
    inflated = SparsityDistribution(
        base.layer_shapes,
        tuple(k - math.floor(alpha * k) for k in base.keep_counts),
    )
    pruned = prune_layerwise(net, mask, inflated)
    return grow_gradient_magnitude(net, pruned, grads, base)
