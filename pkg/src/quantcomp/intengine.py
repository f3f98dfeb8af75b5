"""Integer-only inference: accumulator decomposition, fixed-point requantization, fusion.

A quantized layer computes, per output channel c,

    acc_c = sum_j W_q[c,j] x_q[j] - Z_W[c] sum_j x_q[j] - Z_x sum_j W_q[c,j]
            + C_in Z_x Z_W[c] + bias_acc[c]
    r_q_c = clip(Z_r + M'_c * acc_c, 0, 2^b - 1)

entirely in integer arithmetic.  The real multiplier M'_c = alpha_c S_x S_W[c] / S_r
carries the channel-affine gain; the offset round(beta_c / (alpha_c S_x S_W[c]))
is folded into bias_acc, so compensation costs nothing at inference.  M' is
realized as an i32 mantissa in [2^30, 2^31) and a right shift, with
round-half-away-from-zero on the shifted-out bits (a documented constant of
this engine; quantization elsewhere rounds half-to-even).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .compensate import ChannelAffineParams, identity_compensation
from .quant import QuantParams, code_dtype, quantize_uniform
from .refnet import gelu, im2col

INT32_MIN = -(2**31)
INT32_MAX = 2**31 - 1


class EngineError(Exception):
    """Integer-engine contract violation (overflow risk, bad multiplier, ...)."""


@dataclass(frozen=True)
class IntActivationParams:
    """Per-tensor activation quantization parameters on the integer side."""

    s: float
    z: int
    bitwidth: int

    def __post_init__(self):
        if not (self.s > 0):
            raise EngineError("activation scale must be positive")
        if not (0 <= self.z <= 2**self.bitwidth - 1):
            raise EngineError("activation zero-point outside code range")

    def to_quant_params(self) -> QuantParams:
        return QuantParams(self.bitwidth, "per_tensor", np.array([self.s]), np.array([self.z]))


def round_half_away(x):
    """Nearest integer, ties away from zero (the engine's requantization rounding)."""
    x = np.asarray(x, dtype=np.float64)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def accumulator_scale(s_x, s_w):
    """Canonical f64 product S_x * S_W used by fit, fuse, and simulation alike."""
    return np.float64(s_x) * np.asarray(s_w, dtype=np.float64)


def encode_multiplier(m: float):
    """Real multiplier -> (M0, shift) with M0 in [2^30, 2^31), m ~= M0 * 2^-shift."""
    m = float(m)
    if not (m > 0) or not math.isfinite(m):
        raise EngineError(f"multiplier must be positive and finite, got {m}")
    if m >= 2**30:
        raise EngineError(f"multiplier {m} too large to encode")
    frac, exp = math.frexp(m)  # m = frac * 2^exp, frac in [0.5, 1)
    m0 = round(frac * (1 << 31))
    if m0 == 1 << 31:
        m0 >>= 1
        exp += 1
    shift = 31 - exp
    if shift > 63:
        raise EngineError(f"multiplier {m} too small to encode")
    return m0, shift


def decode_multiplier(m0: int, shift: int) -> float:
    return m0 * 2.0**-shift


def fixed_point_multiply(v, m0, shift):
    """round(v * M0 * 2^-shift) in pure i64 arithmetic, ties away from zero.

    ``m0``/``shift`` may be scalars or per-channel arrays broadcasting against
    the last axis of ``v``.
    """
    v = np.asarray(v, dtype=np.int64)
    m0 = np.asarray(m0, dtype=np.int64)
    shift = np.asarray(shift, dtype=np.int64)
    p = v * m0
    nudge = np.int64(1) << (shift - 1)
    mag = (np.abs(p) + nudge) >> shift
    return np.where(p < 0, -mag, mag)


@dataclass
class FusedLayerParams:
    """Everything one linear/conv layer needs on the integer-only path."""

    op_kind: str
    w_q: np.ndarray  # codes, (C_out, C_in) or (C_out, C_in, k, k)
    z_w: np.ndarray  # i64 per channel
    z_x: int
    z_r: int
    m0: np.ndarray  # i64 per channel
    shift: np.ndarray  # i64 per channel
    m_real: np.ndarray  # f64 per channel, exact multiplier for test mode
    bias_acc: np.ndarray  # i64 per channel (quantized bias [+ beta offset])
    const_acc: np.ndarray  # i64 per channel (-Z_x * sum W_q + C_eff * Z_x * Z_W)
    bitwidth: int
    s_x: float
    s_w: np.ndarray
    s_r: float
    alpha: np.ndarray
    beta_real: np.ndarray | None = None  # set when beta_rounding is off
    beta_rounding: bool = True
    kernel: int = 0
    stride: int = 1
    pad: int = 0

    @property
    def out_channels(self):
        return self.w_q.shape[0]

    @property
    def fan_in(self):
        return int(np.prod(self.w_q.shape[1:]))

    def w_matrix(self):
        """Weight codes flattened to (C_out, C_eff) as i64."""
        return self.w_q.reshape(self.out_channels, -1).astype(np.int64)


@dataclass
class InferenceTrace:
    """Instrumentation for the no-float-in-kernels contract."""

    float_mul_count: int = 0
    kernel_invocations: int = 0
    layers_run: int = 0

    def require_integer(self, *arrays):
        self.kernel_invocations += 1
        for a in arrays:
            if not np.issubdtype(np.asarray(a).dtype, np.integer):
                self.float_mul_count += np.asarray(a).size


def integer_accumulate(x_q, layer: FusedLayerParams, trace: InferenceTrace | None = None, debug=True):
    """i32 accumulators for a (N, C_eff) code matrix; no floating point anywhere.

    The input-independent terms (-Z_x * sum W_q + C_eff * Z_x * Z_W) come
    precomputed in ``const_acc``; only -Z_W * sum(x_q) depends on the input.
    """
    x_q = np.asarray(x_q)
    if trace is not None:
        trace.require_integer(x_q, layer.w_q, layer.bias_acc, layer.const_acc)
    if not np.issubdtype(x_q.dtype, np.integer):
        raise EngineError(f"{layer.op_kind}: integer kernel fed {x_q.dtype} input")
    w = layer.w_matrix()
    if x_q.ndim != 2 or x_q.shape[1] != w.shape[1]:
        raise EngineError(f"{layer.op_kind}: accumulate expects (N, {w.shape[1]}), got {x_q.shape}")
    xi = x_q.astype(np.int64)
    acc = xi @ w.T
    acc -= xi.sum(axis=1, keepdims=True) * layer.z_w[None, :]
    acc += layer.const_acc[None, :] + layer.bias_acc[None, :]
    if debug and (acc.max(initial=0) > INT32_MAX or acc.min(initial=0) < INT32_MIN):
        raise EngineError(f"{layer.op_kind}: accumulator overflows i32")
    return acc.astype(np.int32)


def requantize(acc, layer: FusedLayerParams, mode="fixedpoint", trace: InferenceTrace | None = None):
    """i32 accumulators -> b-bit output codes.

    ``mode="fixedpoint"`` is the deployable integer path; ``mode="exact"``
    multiplies by the exact real M' (test mode isolating the fixed-point
    encoding).  A layer fused with ``beta_rounding=False`` keeps beta in f32
    and adds beta / S_r before the final rounding; that reference mode is not
    integer-only and shows up in the trace's float counter.
    """
    acc = np.asarray(acc, dtype=np.int64)
    qmax = 2**layer.bitwidth - 1
    if not layer.beta_rounding:
        if trace is not None:
            trace.float_mul_count += acc.size + layer.out_channels
        scaled = layer.m_real[None, :] * acc + (layer.beta_real / layer.s_r)[None, :]
        r = layer.z_r + round_half_away(scaled)
    elif mode == "exact":
        r = layer.z_r + round_half_away(layer.m_real[None, :] * acc)
    elif mode == "fixedpoint":
        if trace is not None:
            trace.require_integer(acc)
        r = layer.z_r + fixed_point_multiply(acc, layer.m0[None, :], layer.shift[None, :])
    else:
        raise EngineError(f"unknown requantize mode {mode!r}")
    return np.clip(r, 0, qmax).astype(code_dtype(layer.bitwidth))


def _check_i32(name, values):
    values = np.asarray(values)
    if values.size and (values.max() > INT32_MAX or values.min() < INT32_MIN):
        raise EngineError(f"{name} exceeds i32 range at fuse time")
    return values.astype(np.int64)


def fuse_layer(
    w_q,
    bias,
    act_in: IntActivationParams,
    w_params: QuantParams,
    out: IntActivationParams,
    comp: ChannelAffineParams | None = None,
    beta_rounding=True,
    op_kind="linear",
    kernel=0,
    stride=1,
    pad=0,
) -> FusedLayerParams:
    """Fold quantization params + channel-affine compensation into one layer.

    Identity compensation reproduces the plain multiplier S_x S_W / S_r and a
    zero offset exactly; a fitted one rescales the multiplier by alpha and
    adds round(beta / (alpha S_x S_W)) into the bias accumulator.
    """
    w_q = np.asarray(w_q)
    c_out = w_q.shape[0]
    if comp is None:
        comp = identity_compensation(c_out)
    if comp.channels != c_out:
        raise EngineError(f"compensation has {comp.channels} channels, layer has {c_out}")
    alpha = comp.alpha.astype(np.float64)
    beta = comp.beta.astype(np.float64)
    if np.any(alpha <= 0):
        raise EngineError("fuse_layer needs positive per-channel gains (clamp negatives at fit time)")
    s_w = w_params.scales.astype(np.float64)
    z_w = w_params.zero_points.astype(np.int64)
    if len(s_w) != c_out:
        raise EngineError("weight params must be per-channel over the output dim")
    acc_scale = accumulator_scale(act_in.s, s_w)  # S_x * S_W per channel
    m_real = alpha * acc_scale / np.float64(out.s)
    pairs = [encode_multiplier(m) for m in m_real]
    m0 = np.array([p[0] for p in pairs], dtype=np.int64)
    shift = np.array([p[1] for p in pairs], dtype=np.int64)

    bias_int = _check_i32("quantized bias", np.round(np.asarray(bias, dtype=np.float64) / acc_scale))
    if beta_rounding:
        beta_off = _check_i32("beta offset", np.round(beta / (alpha * acc_scale)))
        bias_acc = _check_i32("bias accumulator", bias_int + beta_off)
        beta_real = None
    else:
        bias_acc = bias_int
        beta_real = beta
    w_mat = w_q.reshape(c_out, -1).astype(np.int64)
    c_eff = w_mat.shape[1]
    const_acc = _check_i32(
        "const accumulator", -np.int64(act_in.z) * w_mat.sum(axis=1) + np.int64(c_eff) * act_in.z * z_w
    )
    # worst-case accumulator magnitude over any admissible input
    reach = np.abs(w_mat - z_w[:, None]).sum(axis=1) * max(act_in.z, 2**act_in.bitwidth - 1 - act_in.z)
    if np.any(reach + np.abs(bias_acc) > INT32_MAX):
        raise EngineError("worst-case accumulator would overflow i32; reduce fan-in or bitwidth")
    return FusedLayerParams(
        op_kind=op_kind,
        w_q=w_q,
        z_w=z_w,
        z_x=act_in.z,
        z_r=out.z,
        m0=m0,
        shift=shift,
        m_real=m_real,
        bias_acc=bias_acc,
        const_acc=const_acc,
        bitwidth=out.bitwidth,
        s_x=act_in.s,
        s_w=s_w,
        s_r=out.s,
        alpha=comp.alpha,
        beta_real=beta_real,
        beta_rounding=beta_rounding,
        kernel=kernel,
        stride=stride,
        pad=pad,
    )


def beta_rounding_bound(layer: FusedLayerParams) -> np.ndarray:
    """Per-channel bound 0.5 * |alpha| * S_x * S_W on the beta-rounding deviation."""
    return 0.5 * np.abs(layer.alpha.astype(np.float64)) * accumulator_scale(layer.s_x, layer.s_w)


def beta_rounding_deviation(layer: FusedLayerParams, beta) -> np.ndarray:
    """Actual per-channel real-output deviation introduced by rounding beta."""
    alpha = layer.alpha.astype(np.float64)
    acc_scale = accumulator_scale(layer.s_x, layer.s_w)
    beta = np.asarray(beta, dtype=np.float64)
    off = np.round(beta / (alpha * acc_scale))
    return np.abs(alpha * acc_scale * off - beta)


def build_gelu_table(s, z, bitwidth, s_out=None, z_out=None):
    """2^b-entry code->code gelu lookup, built with float math at fuse time.

    Input codes live on the (s, z) grid; output codes land on (s_out, z_out),
    which defaults to the input grid.  A dedicated output grid spends the full
    code range on the activation's actual output span.
    """
    if s_out is None:
        s_out, z_out = s, z
    qmax = 2**bitwidth - 1
    codes = np.arange(qmax + 1)
    y = gelu((codes - z) * np.float64(s))
    table = np.clip(np.round(y / np.float64(s_out)) + z_out, 0, qmax)
    return table.astype(code_dtype(bitwidth))


# ---------------------------------------------------------------------------
# fused whole-model runtime


@dataclass
class FusedEntry:
    """One step of the integer forward: a fused layer or a code-domain op."""

    kind: str  # param | relu | gelu | avgpool | flatten
    layer: FusedLayerParams | None = None
    z: int = 0  # grid zero-point for relu
    lut: np.ndarray | None = None  # gelu table
    kernel: int = 0
    stride: int = 1
    pool_m0: int = 0
    pool_shift: int = 0


@dataclass
class FusedModel:
    input_params: IntActivationParams
    entries: list[FusedEntry]
    output_params: IntActivationParams
    input_shape: tuple
    metadata: dict = field(default_factory=dict)


def _run_param_entry(entry, x_q, mode, trace, debug):
    layer = entry.layer
    if layer.op_kind == "linear":
        acc = integer_accumulate(x_q, layer, trace=trace, debug=debug)
        return requantize(acc, layer, mode=mode, trace=trace)
    # conv2d: im2col on codes, pad with the input zero-point, one GEMM per position
    if trace is not None:
        trace.require_integer(x_q)
    cols, h_out, w_out = im2col(x_q.astype(np.int64), layer.kernel, layer.stride, layer.pad, pad_value=layer.z_x)
    n = x_q.shape[0]
    acc = integer_accumulate(cols.reshape(n * h_out * w_out, -1), layer, trace=trace, debug=debug)
    r = requantize(acc, layer, mode=mode, trace=trace)
    return np.moveaxis(r.reshape(n, h_out, w_out, layer.out_channels), 3, 1)


def run_int_model(model: FusedModel, x, mode="fixedpoint", trace: InferenceTrace | None = None, debug=True):
    """Quantize the input once, run all layers in integer arithmetic, dequantize logits.

    Returns (logits_f32, trace).  The input quantization and final dequantization
    are the only floating-point steps and sit outside the traced kernels.
    """
    if trace is None:
        trace = InferenceTrace()
    x = np.asarray(x, dtype=np.float32)
    x_q = quantize_uniform(x, model.input_params.to_quant_params())
    for entry in model.entries:
        trace.layers_run += 1
        if entry.kind == "param":
            x_q = _run_param_entry(entry, x_q, mode, trace, debug)
        elif entry.kind == "relu":
            trace.require_integer(x_q)
            x_q = np.maximum(x_q, np.asarray(entry.z, dtype=x_q.dtype))
        elif entry.kind == "gelu":
            trace.require_integer(x_q, entry.lut)
            x_q = entry.lut[x_q]
        elif entry.kind == "avgpool":
            trace.require_integer(x_q)
            cols, h_out, w_out = im2col(x_q.astype(np.int64), entry.kernel, entry.stride, 0)
            n, c = x_q.shape[0], x_q.shape[1]
            sums = cols.reshape(n, h_out * w_out, c, entry.kernel * entry.kernel).sum(axis=3)
            pooled = fixed_point_multiply(sums, entry.pool_m0, entry.pool_shift)
            x_q = np.moveaxis(pooled.reshape(n, h_out, w_out, c), 3, 1).astype(x_q.dtype)
        elif entry.kind == "flatten":
            x_q = x_q.reshape(x_q.shape[0], -1)
        else:
            raise EngineError(f"unknown fused entry kind {entry.kind!r}")
    p = model.output_params
    logits = ((x_q.astype(np.float64) - p.z) * p.s).astype(np.float32)
    return logits, trace


# ---------------------------------------------------------------------------
# bundle <-> runtime

# The fused bundle stores, per param layer: the weight-code blob, i32 bias/const
# accumulator blobs, (M0, shift) arrays, zero-points, scales, and the fitted
# alpha/beta; activations store their grid constants.  fused_runtime() is the
# inverse of calibrate.fuse_model()'s serialization.


def fused_runtime(bundle) -> FusedModel:
    fusion = bundle.manifest.get("fusion")
    if fusion is None:
        raise EngineError("bundle has no fusion section; run fuse first")
    beta_rounding = bool(fusion["beta_rounding"])
    inp = fusion["input"]
    input_params = IntActivationParams(float(inp["scale"]), int(inp["zero_point"]), int(inp["bitwidth"]))
    entries = []
    for e in fusion["entries"]:
        kind = e["kind"]
        if kind == "param":
            alpha = np.array(e["alpha"], dtype=np.float32)
            beta = np.array(e["beta"], dtype=np.float64)
            s_w = np.array(e["w_scales"], dtype=np.float64)
            m_real = alpha.astype(np.float64) * accumulator_scale(e["s_x"], s_w) / np.float64(e["s_r"])
            layer = FusedLayerParams(
                op_kind=e["op_kind"],
                w_q=bundle.tensor(e["weight_codes"]),
                z_w=np.array(e["w_zero_points"], dtype=np.int64),
                z_x=int(e["z_x"]),
                z_r=int(e["z_r"]),
                m0=np.array(e["m0"], dtype=np.int64),
                shift=np.array(e["shift"], dtype=np.int64),
                m_real=m_real,
                bias_acc=bundle.tensor(e["bias_acc"]).astype(np.int64),
                const_acc=bundle.tensor(e["const_acc"]).astype(np.int64),
                bitwidth=int(e["out_bits"]),
                s_x=float(e["s_x"]),
                s_w=s_w,
                s_r=float(e["s_r"]),
                alpha=alpha,
                beta_real=None if beta_rounding else beta,
                beta_rounding=beta_rounding,
                kernel=int(e.get("kernel", 0)),
                stride=int(e.get("stride", 1)),
                pad=int(e.get("pad", 0)),
            )
            entries.append(FusedEntry("param", layer=layer))
        elif kind == "relu":
            entries.append(FusedEntry("relu", z=int(e["z"])))
        elif kind == "gelu":
            entries.append(FusedEntry("gelu", lut=bundle.tensor(e["table"])))
        elif kind == "avgpool":
            entries.append(
                FusedEntry(
                    "avgpool",
                    kernel=int(e["kernel"]),
                    stride=int(e["stride"]),
                    pool_m0=int(e["m0"]),
                    pool_shift=int(e["shift"]),
                )
            )
        elif kind == "flatten":
            entries.append(FusedEntry("flatten"))
        else:
            raise EngineError(f"unknown fused entry kind {kind!r} in manifest")
    outp = fusion["output"]
    output_params = IntActivationParams(float(outp["scale"]), int(outp["zero_point"]), int(outp["bitwidth"]))
    return FusedModel(
        input_params=input_params,
        entries=entries,
        output_params=output_params,
        input_shape=tuple(bundle.manifest["input_shape"]),
        metadata=bundle.manifest.get("metadata", {}),
    )
