"""Small quantized networks with a hand-written backward pass.

Layers are dense, conv2d, or depthwise conv2d, each optionally wrapped with
an input activation quantizer, a weight quantizer, batch norm after the
linear op, and a nonlinearity.  The forward pass runs in one of four modes:

  latent         full precision, all quantizers bypassed
  quantized      h = q(W) . q(a) + b, the training-time simulated path
  soft_round     Eq.-style diagnostic rounding with threshold k
  ema_quantized  same math as quantized; pass a net whose parameters were
                 materialized from EMA shadows

The backward pass mirrors the forward exactly, invoking the straight-through
quantizer backward at every quantizer.  Convolutions use im2col with
slice-accumulate col2im, so gradients are deterministic.
"""

from dataclasses import dataclass, field as dc_field

import numpy as np

from .quantizer import (
    QuantizerState,
    SoftRoundConfig,
    quantize,
    quantize_backward,
    round_half_away,
    soft_round,
)

DENSE = "dense"
CONV2D = "conv2d"
DEPTHWISE = "depthwise_conv2d"

FORWARD_MODES = ("latent", "quantized", "soft_round", "ema_quantized")


@dataclass
class BNParams:
    gain: np.ndarray
    bias: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    mode: str = "train"

    def __post_init__(self):
        for name in ("gain", "bias", "running_mean", "running_var"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.gain.ndim != 1:
            raise ValueError("BN parameters must be per-channel vectors")
        if not (self.running_var >= 0).all():
            raise ValueError("running_var must be non-negative")
        if self.mode not in ("train", "eval"):
            raise ValueError(f"unknown BN mode {self.mode!r}")

    @property
    def channels(self) -> int:
        return self.gain.shape[0]

    def copy(self) -> "BNParams":
        return BNParams(
            gain=self.gain.copy(),
            bias=self.bias.copy(),
            running_mean=self.running_mean.copy(),
            running_var=self.running_var.copy(),
            momentum=self.momentum,
            eps=self.eps,
            mode=self.mode,
        )


def make_bn(channels: int, momentum: float = 0.1, eps: float = 1e-5) -> BNParams:
    return BNParams(
        gain=np.ones(channels),
        bias=np.zeros(channels),
        running_mean=np.zeros(channels),
        running_var=np.ones(channels),
        momentum=momentum,
        eps=eps,
    )


@dataclass
class LayerSpec:
    kind: str
    weight: np.ndarray
    bias: np.ndarray
    w_quant: QuantizerState = None
    a_quant: QuantizerState = None
    bn: BNParams = None
    nonlinearity: str = "none"
    stride: int = 1
    pad: int = 0
    # Per-channel affine correction applied between the linear op and BN.
    qc_gamma: np.ndarray = None
    qc_beta: np.ndarray = None

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.qc_gamma is not None:
            self.qc_gamma = np.asarray(self.qc_gamma, dtype=np.float64)
        if self.qc_beta is not None:
            self.qc_beta = np.asarray(self.qc_beta, dtype=np.float64)
        if self.kind == DENSE:
            if self.weight.ndim != 2:
                raise ValueError("dense weight must be (out, in)")
        elif self.kind in (CONV2D, DEPTHWISE):
            if self.weight.ndim != 4:
                raise ValueError("conv weight must be (out, in, kh, kw)")
            if self.kind == DEPTHWISE and self.weight.shape[1] != 1:
                raise ValueError("depthwise weight must have a singleton in-channel")
        else:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.bias.shape != (self.out_channels,):
            raise ValueError("bias shape must match output channels")
        if self.nonlinearity not in ("relu", "silu", "none"):
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.bn is not None and self.bn.channels != self.out_channels:
            raise ValueError("BN channel count must match output channels")
        if self.w_quant is not None and self.w_quant.axis not in (None, 0):
            raise ValueError("weight quantizer channel axis must be 0")
        if (self.qc_gamma is None) != (self.qc_beta is None):
            raise ValueError("qc_gamma and qc_beta must be set together")
        if self.qc_gamma is not None:
            if self.qc_gamma.shape != self.qc_beta.shape:
                raise ValueError("qc_gamma and qc_beta shapes must match")
            if self.qc_gamma.size not in (1, self.out_channels):
                raise ValueError("correction must be per-tensor or per-channel")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def copy(self) -> "LayerSpec":
        return LayerSpec(
            kind=self.kind,
            weight=self.weight.copy(),
            bias=self.bias.copy(),
            w_quant=self.w_quant.copy() if self.w_quant is not None else None,
            a_quant=self.a_quant.copy() if self.a_quant is not None else None,
            bn=self.bn.copy() if self.bn is not None else None,
            nonlinearity=self.nonlinearity,
            stride=self.stride,
            pad=self.pad,
            qc_gamma=None if self.qc_gamma is None else self.qc_gamma.copy(),
            qc_beta=None if self.qc_beta is None else self.qc_beta.copy(),
        )


@dataclass
class NetworkSpec:
    layers: list
    input_shape: tuple
    loss: str = "softmax_ce"

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        if self.loss not in ("mse", "softmax_ce"):
            raise ValueError(f"unknown loss {self.loss!r}")

    def copy(self) -> "NetworkSpec":
        return NetworkSpec(
            layers=[l.copy() for l in self.layers],
            input_shape=self.input_shape,
            loss=self.loss,
        )

    def parameters(self) -> dict:
        """Live views of every trainable array, keyed layerN.name.

        BN running statistics are excluded; they are tracked, not trained.
        """
        out = {}
        for i, layer in enumerate(self.layers):
            p = f"layer{i}"
            out[f"{p}.weight"] = layer.weight
            out[f"{p}.bias"] = layer.bias
            if layer.w_quant is not None:
                out[f"{p}.w_scale"] = layer.w_quant.s
            if layer.a_quant is not None:
                out[f"{p}.a_scale"] = layer.a_quant.s
            if layer.bn is not None:
                out[f"{p}.bn.gain"] = layer.bn.gain
                out[f"{p}.bn.bias"] = layer.bn.bias
            if layer.qc_gamma is not None:
                out[f"{p}.qc_gamma"] = layer.qc_gamma
                out[f"{p}.qc_beta"] = layer.qc_beta
        return out

    def state_arrays(self) -> dict:
        """parameters() plus BN running statistics, for serialization."""
        out = self.parameters()
        for i, layer in enumerate(self.layers):
            if layer.bn is not None:
                out[f"layer{i}.bn.running_mean"] = layer.bn.running_mean
                out[f"layer{i}.bn.running_var"] = layer.bn.running_var
        return out


def silu(h):
    sig = 1.0 / (1.0 + np.exp(-h))
    return h * sig


def _nonlin(h, kind):
    if kind == "relu":
        return np.maximum(h, 0.0)
    if kind == "silu":
        return silu(h)
    return h


def _nonlin_grad(h, kind):
    if kind == "relu":
        return (h > 0.0).astype(np.float64)
    if kind == "silu":
        sig = 1.0 / (1.0 + np.exp(-h))
        return sig * (1.0 + h * (1.0 - sig))
    return np.ones_like(h)


def im2col(x, kh, kw, stride, pad):
    """Unfold (B, C, H, W) into patches (B, C, KH, KW, OH, OW)."""
    b, c, h, w = x.shape
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    xp[:, :, pad : pad + h, pad : pad + w] = x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"kernel {kh}x{kw} does not fit input {h}x{w} (pad {pad})")
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[
                :, :, i : i + stride * oh : stride, j : j + stride * ow : stride
            ]
    return cols


def col2im(dcols, x_shape, stride, pad):
    """Fold patch gradients back, accumulating overlaps slice by slice."""
    b, c, h, w = x_shape
    _, _, kh, kw, oh, ow = dcols.shape
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                dcols[:, :, i, j]
            )
    return xp[:, :, pad : pad + h, pad : pad + w]


def _effective_weight(layer, mode, k):
    if layer.w_quant is None or mode == "latent":
        return layer.weight
    if mode == "soft_round":
        return soft_round(layer.weight, layer.w_quant, SoftRoundConfig(k=k))
    return quantize(layer.weight, layer.w_quant)


def _effective_input(layer, a, mode, k):
    if layer.a_quant is None or mode == "latent":
        return a
    if mode == "soft_round":
        return soft_round(a, layer.a_quant, SoftRoundConfig(k=k))
    return quantize(a, layer.a_quant)


def _linear(layer, a, w):
    if layer.kind == DENSE:
        return a @ w.T + layer.bias, None
    cols = im2col(a, w.shape[2], w.shape[3], layer.stride, layer.pad)
    if layer.kind == CONV2D:
        out = np.einsum("ocij,bcijyx->boyx", w, cols)
    else:
        out = np.einsum("cij,bcijyx->bcyx", w[:, 0], cols)
    return out + layer.bias[None, :, None, None], cols


def _bn_forward(bn: BNParams, h, update_running: bool):
    axes = (0,) if h.ndim == 2 else (0, 2, 3)
    shape = [1] * h.ndim
    shape[1] = bn.channels
    if bn.mode == "train":
        mean = h.mean(axis=axes)
        var = h.var(axis=axes)
        if update_running:
            n = h.size // bn.channels
            unbiased = var * (n / (n - 1)) if n > 1 else var
            bn.running_mean[...] = (
                1.0 - bn.momentum
            ) * bn.running_mean + bn.momentum * mean
            bn.running_var[...] = (
                1.0 - bn.momentum
            ) * bn.running_var + bn.momentum * unbiased
    else:
        mean = bn.running_mean
        var = bn.running_var
    std = np.sqrt(var + bn.eps)
    x_hat = (h - mean.reshape(shape)) / std.reshape(shape)
    out = bn.gain.reshape(shape) * x_hat + bn.bias.reshape(shape)
    return out, {"x_hat": x_hat, "std": std, "axes": axes, "shape": shape}


def _bn_backward(bn: BNParams, ctx, dout):
    x_hat, std, axes, shape = ctx["x_hat"], ctx["std"], ctx["axes"], ctx["shape"]
    dgain = (dout * x_hat).sum(axis=axes)
    dbias = dout.sum(axis=axes)
    g_over_std = (bn.gain / std).reshape(shape)
    if bn.mode == "eval":
        return dout * g_over_std, dgain, dbias
    n = dout.size // bn.channels
    dx = (
        g_over_std
        / n
        * (
            n * dout
            - dbias.reshape(shape)
            - x_hat * dgain.reshape(shape)
        )
    )
    return dx, dgain, dbias


def forward(net: NetworkSpec, x, mode: str = "quantized", k: float = 0.45,
            cache: bool = False, update_running: bool = False):
    """Run the network; returns output, or (output, cache) with cache=True.

    update_running refreshes BN running statistics (training only).  The
    ema_quantized mode is numerically the quantized mode; pass a network
    whose parameters came from materialized shadows.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != net.input_shape:
        raise ValueError(f"input shape {x.shape[1:]} != expected {net.input_shape}")
    if mode not in FORWARD_MODES:
        raise ValueError(f"unknown forward mode {mode!r}")
    eff_mode = "quantized" if mode == "ema_quantized" else mode
    a = x
    caches = []
    for layer in net.layers:
        orig_shape = a.shape
        if layer.kind == DENSE and a.ndim > 2:
            a = a.reshape(a.shape[0], -1)
        a_in = a
        a_used = _effective_input(layer, a_in, eff_mode, k)
        w_used = _effective_weight(layer, eff_mode, k)
        h, cols = _linear(layer, a_used, w_used)
        h_lin = h
        if layer.qc_gamma is not None:
            # Size C for per-channel correction, size 1 for per-tensor.
            cshape = [1] * h.ndim
            cshape[1] = layer.qc_gamma.size
            h = layer.qc_gamma.reshape(cshape) * h + layer.qc_beta.reshape(cshape)
        bn_ctx = None
        if layer.bn is not None:
            h, bn_ctx = _bn_forward(layer.bn, h, update_running)
        out = _nonlin(h, layer.nonlinearity)
        if cache:
            caches.append(
                {
                    "orig_shape": orig_shape,
                    "a_in": a_in,
                    "a_used": a_used,
                    "w_used": w_used,
                    "cols": cols,
                    "h_lin": h_lin,
                    "phi_in": h,
                    "bn_ctx": bn_ctx,
                }
            )
        a = out
    if cache:
        return a, {"mode": eff_mode, "layers": caches, "batch": x.shape[0]}
    return a


def backward(net: NetworkSpec, cache, loss_grad):
    """Gradients for every entry of net.parameters(), chained through all layers.

    Requires a cache from forward(..., cache=True) in latent or quantized
    mode; the soft-round diagnostic has no training path.
    """
    if cache is None:
        raise RuntimeError("backward needs the cache from forward(cache=True)")
    if cache["mode"] == "soft_round":
        raise RuntimeError("no backward path for the soft_round diagnostic")
    grads = {name: np.zeros_like(p) for name, p in net.parameters().items()}
    d = np.asarray(loss_grad, dtype=np.float64)
    for i in reversed(range(len(net.layers))):
        layer = net.layers[i]
        ctx = cache["layers"][i]
        p = f"layer{i}"
        d = d * _nonlin_grad(ctx["phi_in"], layer.nonlinearity)
        if layer.bn is not None:
            d, dgain, dbias = _bn_backward(layer.bn, ctx["bn_ctx"], d)
            grads[f"{p}.bn.gain"] += dgain
            grads[f"{p}.bn.bias"] += dbias
        if layer.qc_gamma is not None:
            cshape = [1] * d.ndim
            cshape[1] = layer.qc_gamma.size
            caxes = tuple(j for j in range(d.ndim) if j != 1)
            dgam = (d * ctx["h_lin"]).sum(axis=caxes)
            dbet = d.sum(axis=caxes)
            if layer.qc_gamma.size == 1:
                dgam = dgam.sum().reshape(layer.qc_gamma.shape)
                dbet = dbet.sum().reshape(layer.qc_beta.shape)
            grads[f"{p}.qc_gamma"] += dgam
            grads[f"{p}.qc_beta"] += dbet
            d = d * layer.qc_gamma.reshape(cshape)
        if layer.kind == DENSE:
            grads[f"{p}.bias"] += d.sum(axis=0)
            d_w_used = d.T @ ctx["a_used"]
            d_a_used = d @ ctx["w_used"]
        else:
            grads[f"{p}.bias"] += d.sum(axis=(0, 2, 3))
            w_used = ctx["w_used"]
            if layer.kind == CONV2D:
                d_w_used = np.einsum("boyx,bcijyx->ocij", d, ctx["cols"])
                dcols = np.einsum("boyx,ocij->bcijyx", d, w_used)
            else:
                d_w_used = np.einsum("bcyx,bcijyx->cij", d, ctx["cols"])[:, None]
                dcols = np.einsum("bcyx,cij->bcijyx", d, w_used[:, 0])
            d_a_used = col2im(dcols, ctx["a_used"].shape, layer.stride, layer.pad)
        if layer.w_quant is not None and cache["mode"] == "quantized":
            g_w, g_s = quantize_backward(layer.weight, layer.w_quant, d_w_used)
            grads[f"{p}.weight"] += g_w
            grads[f"{p}.w_scale"] += g_s
        else:
            grads[f"{p}.weight"] += d_w_used
        if layer.a_quant is not None and cache["mode"] == "quantized":
            d_a_in, g_s = quantize_backward(ctx["a_in"], layer.a_quant, d_a_used)
            grads[f"{p}.a_scale"] += g_s
        else:
            d_a_in = d_a_used
        d = d_a_in.reshape(ctx["orig_shape"])
    return grads


def dampening_penalty(net: NetworkSpec, lam: float):
    """Pull latent weights toward their quantized values.

    Returns (penalty, grads-on-weights).  Only in-clip-range elements count;
    the quantized value is treated as a constant target, so the gradient is
    2*lam*(W - q(W)) and nothing flows to the step sizes.
    """
    penalty = 0.0
    grads = {}
    for i, layer in enumerate(net.layers):
        if layer.w_quant is None:
            continue
        q = layer.w_quant
        z = layer.weight / q.broadcast_scale(layer.weight)
        r = round_half_away(z)
        in_range = (r >= q.u) & (r <= q.v)
        diff = (quantize(layer.weight, q) - layer.weight) * in_range
        penalty += lam * float((diff * diff).sum())
        grads[f"layer{i}.weight"] = 2.0 * lam * -diff
    return penalty, grads


def loss_and_grad(kind: str, y, target):
    """Scalar loss (mean over the batch) and its gradient w.r.t. y."""
    y = np.asarray(y, dtype=np.float64)
    if kind == "mse":
        t = np.asarray(target, dtype=np.float64)
        if t.shape != y.shape:
            raise ValueError(f"target shape {t.shape} != output {y.shape}")
        diff = y - t
        return float(np.mean(diff * diff)), 2.0 * diff / diff.size
    if kind == "softmax_ce":
        t = np.asarray(target)
        if t.shape != (y.shape[0],):
            raise ValueError("softmax_ce wants integer class targets of shape (B,)")
        shifted = y - y.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_p = shifted - log_z
        b = y.shape[0]
        loss = -float(log_p[np.arange(b), t].mean())
        grad = np.exp(log_p)
        grad[np.arange(b), t] -= 1.0
        return loss, grad / b
    raise ValueError(f"unknown loss {kind!r}")


def build_mlp(in_dim: int, out_dim: int, hidden=(32, 64, 32), loss: str = "softmax_ce",
              nonlinearity: str = "silu", rng=None, batch_norm: bool = True):
    """Latent-precision MLP; attach quantizers separately."""
    if rng is None:
        raise ValueError("build_mlp needs an rng")
    dims = [in_dim, *hidden, out_dim]
    layers = []
    for i in range(len(dims) - 1):
        fan_in = dims[i]
        w = rng.normal((dims[i + 1], fan_in)) * np.sqrt(2.0 / fan_in)
        last = i == len(dims) - 2
        layers.append(
            LayerSpec(
                kind=DENSE,
                weight=w,
                bias=np.zeros(dims[i + 1]),
                bn=None if (last or not batch_norm) else make_bn(dims[i + 1]),
                nonlinearity="none" if last else nonlinearity,
            )
        )
    return NetworkSpec(layers=layers, input_shape=(in_dim,), loss=loss)


def build_cnn(in_shape=(1, 4, 4), out_dim: int = 3, channels=(8, 16, 16, 32),
              loss: str = "softmax_ce", nonlinearity: str = "silu", rng=None):
    """Four conv blocks, the third depthwise, then a dense head."""
    if rng is None:
        raise ValueError("build_cnn needs an rng")
    c_in = in_shape[0]
    layers = []
    spatial = in_shape[1:]
    for i, c_out in enumerate(channels):
        if i == 2:
            w = rng.normal((c_in, 1, 3, 3)) * np.sqrt(2.0 / 9.0)
            kind = DEPTHWISE
            c_out = c_in
        else:
            w = rng.normal((c_out, c_in, 3, 3)) * np.sqrt(2.0 / (9.0 * c_in))
            kind = CONV2D
        layers.append(
            LayerSpec(
                kind=kind,
                weight=w,
                bias=np.zeros(c_out),
                bn=make_bn(c_out),
                nonlinearity=nonlinearity,
                stride=1,
                pad=1,
            )
        )
        c_in = c_out
    head_in = c_in * spatial[0] * spatial[1]
    w = rng.normal((out_dim, head_in)) * np.sqrt(2.0 / head_in)
    layers.append(
        LayerSpec(kind=DENSE, weight=w, bias=np.zeros(out_dim), nonlinearity="none")
    )
    return NetworkSpec(layers=layers, input_shape=in_shape, loss=loss)
