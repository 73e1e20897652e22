"""Bit-exact transfer metering, upload quantization, and FLOP counting.

Masks travel as raw 1-bit-per-parameter bitmaps with no entropy coding, and
value payloads count only retained weights, so the ledger reproduces the
closed-form per-round cost expressions exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Conv2d, Flatten, Linear, MaxPool, Network


def bf16_truncate(x):
    """Map float32 values to the nearest bfloat16-representable float32.

    The result's low 16 mantissa bits are zero and the mapping is idempotent;
    relative error is at most 2**-8 for normal floats. Rounds to nearest
    (ties to even) rather than chopping, which keeps that bound tight.
    Accepts scalars or arrays and preserves the input's shape.
    """
    arr = np.asarray(x, dtype=np.float32)
    bits = arr.view(np.uint32)
    rounded = (bits + 0x7FFF + ((bits >> 16) & 1)).astype(np.uint32) & np.uint32(0xFFFF0000)
    # NaN payloads must stay NaN: rounding could carry into the exponent
    nan = np.isnan(arr)
    out = rounded.view(np.float32)
    if nan.any():
        out = np.where(nan, arr, out)
    if np.isscalar(x) or np.ndim(x) == 0:
        return np.float32(out)
    return out


@dataclass(frozen=True)
class Quantizer:
    """Upload value encoding: full float32 or bfloat16 truncation."""

    name: str

    def __post_init__(self):
        if self.name not in ("float32", "bfloat16"):
            raise ValueError(f"unknown quantizer {self.name!r}")

    @property
    def bits_per_value(self) -> int:
        return 32 if self.name == "float32" else 16

    def quantize(self, arr: np.ndarray) -> np.ndarray:
        if self.name == "float32":
            return arr
        return bf16_truncate(arr)


FLOAT32 = Quantizer("float32")
BFLOAT16 = Quantizer("bfloat16")


def meter_sparse_transfer(n_params: int, n_retained: int, mask_included: bool,
                          quantizer: Quantizer = FLOAT32) -> int:
    """Bits for one sparse model transfer: retained values plus an optional bitmap."""
    if n_retained > n_params:
        raise ValueError(f"retained count {n_retained} exceeds parameter count {n_params}")
    bits = quantizer.bits_per_value * n_retained
    if mask_included:
        bits += n_params
    return bits


def meter_dense_transfer(n_params: int, quantizer: Quantizer = FLOAT32) -> int:
    """Bits for one dense tensor transfer (full model or full gradient)."""
    return quantizer.bits_per_value * n_params


def closed_form_average(sparsity: float, interval: int, n_params: int, algorithm: str) -> float:
    """Average per-client per-round transfer cost in bits.

    'feddst' covers rounds before the readjustment horizon (values plus a
    bitmap every `interval` rounds), 'feddst_post' the rounds after it,
    'prunefl' adds a full dense gradient every `interval` rounds, and 'dense'
    is the unmasked baseline.
    """
    keep = 32.0 * (1.0 - sparsity) * n_params
    if algorithm == "feddst":
        return keep + n_params / interval
    if algorithm == "feddst_post":
        return keep
    if algorithm == "prunefl":
        return keep + 32.0 * n_params / interval
    if algorithm == "dense":
        return 32.0 * n_params
    raise ValueError(f"no closed-form cost for algorithm {algorithm!r}")


def flops_forward(net: Network, mask=None) -> int:
    """Multiply-add FLOPs (counted as 2 each) of one forward pass per sample.

    Convolution cost scales with the output spatial size; with a mask, each
    prunable layer's cost is scaled by that layer's retained-weight density.
    Bias adds, pooling, and activations are not counted.
    """
    shape = net.input_shape
    total = 0.0
    for i, spec in enumerate(net.layers):
        if isinstance(spec, Conv2d):
            h = shape[1] - spec.kernel_size + 1
            w = shape[2] - spec.kernel_size + 1
            dense = 2 * spec.in_channels * spec.kernel_size ** 2 * spec.out_channels * h * w
            if mask is not None and i in mask.arrays:
                a = mask.arrays[i]
                dense *= a.sum() / a.size
            total += dense
            shape = (spec.out_channels, h, w)
        elif isinstance(spec, Linear):
            dense = 2 * spec.in_features * spec.out_features
            if mask is not None and i in mask.arrays:
                a = mask.arrays[i]
                dense *= a.sum() / a.size
            total += dense
            shape = (spec.out_features,)
        elif isinstance(spec, MaxPool):
            h = (shape[1] - spec.window) // spec.stride + 1
            w = (shape[2] - spec.window) // spec.stride + 1
            shape = (shape[0], h, w)
        elif isinstance(spec, Flatten):
            shape = (int(np.prod(shape)),)
    return int(round(total))


@dataclass
class TransferRecord:
    round_no: int
    client_id: int
    upload_bits: int
    download_bits: int
    mask_transmitted: bool


@dataclass
class CommLedger:
    """Append-only record of every client-round transfer, plus running totals."""

    records: list[TransferRecord] = field(default_factory=list)
    total_upload_bits: int = 0
    total_download_bits: int = 0

    def record(self, round_no: int, client_id: int, upload_bits: int,
               download_bits: int, mask_transmitted: bool) -> None:
        if upload_bits < 0 or download_bits < 0:
            raise ValueError("transfer sizes cannot be negative")
        self.records.append(TransferRecord(round_no, client_id, upload_bits,
                                           download_bits, mask_transmitted))
        self.total_upload_bits += upload_bits
        self.total_download_bits += download_bits

    def round_upload_bits(self, round_no: int) -> int:
        return sum(r.upload_bits for r in self.records if r.round_no == round_no)

    def export(self, path) -> None:
        """Write one row per client-round transfer.

        Columns, comma-separated: round, client_id, upload_bits,
        download_bits, mask_transmitted (0 or 1).
        """
        with open(path, "w") as fh:
            fh.write("round,client_id,upload_bits,download_bits,mask_transmitted\n")
            for r in self.records:
                fh.write(f"{r.round_no},{r.client_id},{r.upload_bits},"
                         f"{r.download_bits},{int(r.mask_transmitted)}\n")
