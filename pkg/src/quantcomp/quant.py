"""Range estimation and quantization kernels.

Uniform affine quantization maps f32 values to unsigned b-bit codes via
``q = clip(round(x/s) + z, 0, 2^b - 1)`` with ``s = (max - min)/(2^b - 1)``
and ``z = clip(round(-min/s), 0, 2^b - 1)``.  Rounding is half-to-even
everywhere in this module (the integer engine's requantization uses its own
documented rounding).  Codes are unsigned; symmetric signed weights are the
special case z = 2^(b-1), not a separate path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# scale floor when a tensor has zero range (max == min)
DEGENERATE_SCALE = 2.0**-20


class QuantError(ValueError):
    pass


def code_dtype(bitwidth: int):
    """Narrowest unsigned dtype holding 2^b - 1."""
    if bitwidth <= 8:
        return np.dtype("u1")
    if bitwidth <= 16:
        return np.dtype("<u2")
    if bitwidth <= 32:
        return np.dtype("<u4")
    raise QuantError(f"bitwidth {bitwidth} not supported")


@dataclass(frozen=True)
class RangeEstimator:
    """minmax, or percentile clipping at fraction p in (0.5, 1]."""

    kind: str = "minmax"
    percentile: float | None = None

    def __post_init__(self):
        if self.kind not in ("minmax", "percentile"):
            raise QuantError(f"unknown estimator {self.kind!r}")
        if self.kind == "percentile":
            p = self.percentile
            if p is None or not (0.5 < p <= 1.0):
                raise QuantError("percentile estimator needs p in (0.5, 1]")

    def bounds(self, x):
        x = np.asarray(x, dtype=np.float64).ravel()
        if self.kind == "minmax":
            return float(x.min()), float(x.max())
        p = self.percentile
        lo, hi = np.quantile(x, [1.0 - p, p])
        return float(lo), float(hi)


@dataclass
class QuantParams:
    """Scale(s) and zero-point(s) for one tensor; length 1 or C arrays (scales f64)."""

    bitwidth: int
    scheme: str  # per_tensor | per_channel
    scales: np.ndarray
    zero_points: np.ndarray

    def __post_init__(self):
        if self.bitwidth < 2:
            raise QuantError("bitwidth must be >= 2")
        if self.scheme not in ("per_tensor", "per_channel"):
            raise QuantError(f"unknown scheme {self.scheme!r}")
        self.scales = np.atleast_1d(np.asarray(self.scales, dtype=np.float64))
        self.zero_points = np.atleast_1d(np.asarray(self.zero_points, dtype=np.int64))
        if self.scheme == "per_tensor" and len(self.scales) != 1:
            raise QuantError("per_tensor params must have exactly one scale")
        if len(self.scales) != len(self.zero_points):
            raise QuantError("scales and zero_points length mismatch")
        if not np.all(self.scales > 0):
            raise QuantError("scales must be positive")
        qmax = 2**self.bitwidth - 1
        if np.any(self.zero_points < 0) or np.any(self.zero_points > qmax):
            raise QuantError(f"zero_points outside [0, {qmax}]")

    @property
    def qmax(self):
        return 2**self.bitwidth - 1

    def scalar(self):
        """(s, z) for per_tensor params."""
        if self.scheme != "per_tensor":
            raise QuantError("scalar() only valid for per_tensor params")
        return float(self.scales[0]), int(self.zero_points[0])


def _affine_from_bounds(lo, hi, bitwidth):
    qmax = 2**bitwidth - 1
    if hi <= lo:
        s = DEGENERATE_SCALE
    else:
        s = (hi - lo) / qmax
    z = int(np.clip(np.round(-lo / s), 0, qmax))
    return float(s), z


def compute_affine_params(x, bitwidth, estimator=RangeEstimator()):
    """Scalar (s, z) over the whole tensor under the chosen range estimator."""
    x = np.asarray(x)
    if x.size == 0:
        raise QuantError("empty tensor")
    if bitwidth < 2:
        raise QuantError("bitwidth must be >= 2")
    lo, hi = estimator.bounds(x)
    return _affine_from_bounds(lo, hi, bitwidth)


def tensor_params(x, bitwidth, estimator=RangeEstimator()) -> QuantParams:
    s, z = compute_affine_params(x, bitwidth, estimator)
    return QuantParams(bitwidth, "per_tensor", np.array([s]), np.array([z]))


def _broadcast_params(params: QuantParams, x):
    """Scales/zero-points broadcast against x's leading channel axis."""
    if params.scheme == "per_tensor":
        return params.scales[0].astype(np.float64), np.int64(params.zero_points[0])
    if x.shape[0] != len(params.scales):
        raise QuantError(f"per_channel params (C={len(params.scales)}) do not match leading dim of {x.shape}")
    extra = (1,) * (x.ndim - 1)
    return (
        params.scales.astype(np.float64).reshape(-1, *extra),
        params.zero_points.reshape(-1, *extra),
    )


def quantize_uniform(x, params: QuantParams):
    """Elementwise q = clip(round(x/s) + z, 0, 2^b - 1), half-to-even rounding."""
    x = np.asarray(x, dtype=np.float64)
    s, z = _broadcast_params(params, x)
    q = np.round(x / s) + z
    return np.clip(q, 0, params.qmax).astype(code_dtype(params.bitwidth))


def dequantize(codes, params: QuantParams):
    """x_hat = s * (q - z), as f32."""
    codes = np.asarray(codes)
    s, z = _broadcast_params(params, codes)
    return ((codes.astype(np.float64) - z) * s).astype(np.float32)


def quantize_weights_per_channel(w, bitwidth):
    """Per-output-channel minmax quantization of a (C_out, ...) weight tensor."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim < 2:
        raise QuantError("per-channel weight quantization needs a leading output-channel dim")
    if w.shape[1:] and int(np.prod(w.shape[1:])) == 0:
        raise QuantError("empty channel")
    flat = w.reshape(w.shape[0], -1)
    scales = np.empty(w.shape[0], dtype=np.float64)
    zps = np.empty(w.shape[0], dtype=np.int64)
    for c in range(w.shape[0]):
        scales[c], zps[c] = _affine_from_bounds(float(flat[c].min()), float(flat[c].max()), bitwidth)
    params = QuantParams(bitwidth, "per_channel", scales, zps)
    return quantize_uniform(w, params), params


@dataclass
class Log2Params:
    """Log-domain codes: x_hat = sign * max_abs * 2^(-code); sign 0 encodes exact zeros."""

    bitwidth: int
    max_abs: float
    signs: np.ndarray = field(repr=False)


def quantize_log2(x, bitwidth):
    """code = clip(round(-log2(|x| / max|x|)), 0, 2^b - 1), sign tracked separately."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise QuantError("empty tensor")
    max_abs = float(np.abs(x).max())
    if max_abs == 0.0:
        raise QuantError("all-zero tensor has no log2 representation")
    qmax = 2**bitwidth - 1
    with np.errstate(divide="ignore"):
        mag = -np.log2(np.abs(x) / max_abs)
    codes = np.clip(np.round(mag), 0, qmax)
    codes = np.where(np.isfinite(mag), codes, qmax)
    signs = np.sign(x).astype(np.int8)
    return codes.astype(code_dtype(bitwidth)), Log2Params(bitwidth, max_abs, signs)


def dequantize_log2(codes, params: Log2Params):
    codes = np.asarray(codes, dtype=np.float64)
    return (params.signs * params.max_abs * np.exp2(-codes)).astype(np.float32)


# ---------------------------------------------------------------------------
# manifest (de)serialization helpers


def params_to_manifest(params: QuantParams) -> dict:
    return {
        "bitwidth": params.bitwidth,
        "scheme": params.scheme,
        "scales": [float(s) for s in params.scales],
        "zero_points": [int(z) for z in params.zero_points],
    }


def params_from_manifest(entry: dict) -> QuantParams:
    return QuantParams(
        entry["bitwidth"],
        entry["scheme"],
        np.array(entry["scales"], dtype=np.float32),
        np.array(entry["zero_points"], dtype=np.int64),
    )
