"""Training loops: Adam, quantizer attachment, evaluation, QAT."""

from dataclasses import dataclass, field

import numpy as np

from .datasets import batches
from .ema import EMAState, ema_update, materialize_ema
from .network import backward, dampening_penalty, forward, loss_and_grad
from .numeric import Rng
from .oscillation import DIVERGENCE_LIMIT, OscillationTracker, record_step
from .quantizer import SCALE_FLOOR, init_scale, integer_code


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ValueError("betas must be in [0, 1)")
        if self.lr <= 0.0 or self.eps <= 0.0:
            raise ValueError("lr and eps must be positive")


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """One Adam update, in place on the arrays in ``params``.

    Only the names present in ``params`` are touched, so passing a subset
    trains that subset and freezes everything else.  Parameters whose name
    ends in ``_scale`` are clamped to the positive scale floor after the
    update.
    """
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if not np.isfinite(g).all():
            raise RuntimeError(f"non-finite gradient for {name}")
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.shape} for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        if name.endswith("_scale"):
            np.maximum(p, SCALE_FLOOR, out=p)
    return params


def shape_inputs(x, input_shape):
    """Reshape flat (n, features) rows to the network's input layout."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2 and len(input_shape) > 1:
        if x.shape[1] != int(np.prod(input_shape)):
            raise ValueError(
                f"rows of size {x.shape[1]} cannot fill input shape {input_shape}"
            )
        return x.reshape(x.shape[0], *input_shape)
    return x


def attach_quantizers(
    net,
    x_sample,
    bits_w: int = 4,
    bits_a: int = 4,
    first_last_bits: int = 8,
    granularity: str = "per_tensor",
):
    """Return a copy of ``net`` with weight and activation quantizers.

    Weight scales come from the max-abs rule; activation scales from the
    clipped-percentile rule over a latent-mode pass on ``x_sample``.
    Activation signedness is read off the calibration batch: a layer whose
    input never goes negative (e.g. after relu) gets an unsigned quantizer.
    First and last layers run at ``first_last_bits``.
    """
    net = net.copy()
    x_sample = shape_inputs(x_sample, net.input_shape)
    _, cache = forward(net, x_sample, mode="latent", cache=True)
    last = len(net.layers) - 1
    axis = 0 if granularity == "per_channel" else None
    for i, layer in enumerate(net.layers):
        wb = first_last_bits if i in (0, last) else bits_w
        ab = first_last_bits if i in (0, last) else bits_a
        layer.w_quant = init_scale(
            layer.weight, bits=wb, signed=True, granularity=granularity, axis=axis
        )
        a_in = cache["layers"][i]["a_in"]
        signed = bool(a_in.min() < 0.0)
        layer.a_quant = init_scale(a_in, bits=ab, signed=signed, kind="activation")
    return net


def evaluate(net, x, y, mode: str = "quantized", batch: int = 256, k: float = 0.45) -> dict:
    """Average loss (and accuracy for classifiers) over ``x`` with
    batch-norm in eval mode.  Short final batches are kept."""
    net = net.copy()
    for layer in net.layers:
        if layer.bn is not None:
            layer.bn.mode = "eval"
    x = shape_inputs(x, net.input_shape)
    total, correct, seen = 0.0, 0, 0
    for idx in batches(len(x), batch, drop_last=False):
        out = forward(net, x[idx], mode=mode, k=k)
        loss, _ = loss_and_grad(net.loss, out, y[idx])
        total += loss * len(idx)
        seen += len(idx)
        if net.loss == "softmax_ce":
            correct += int((out.argmax(axis=1) == y[idx]).sum())
    result = {"loss": total / seen}
    if net.loss == "softmax_ce":
        result["accuracy"] = correct / seen
    return result


@dataclass
class TrainConfig:
    epochs: int = 10
    batch: int = 32
    lr: float = 1e-3
    ema_enabled: bool = True
    ema_alpha: float = 0.999
    ema_warmup_frac: float = 0.01
    dampening_lambda: float = 0.0
    seed: int = 0
    flip_window: int = 2000
    divergence_limit: float = DIVERGENCE_LIMIT

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.dampening_lambda < 0.0:
            raise ValueError("dampening_lambda must be >= 0")


def _weight_codes(net, qlayers):
    return np.concatenate(
        [integer_code(net.layers[i].weight, net.layers[i].w_quant).ravel() for i in qlayers]
    )


def _scale_summary(net, qlayers):
    return {
        f"layer{i}.w_scale": float(np.mean(net.layers[i].w_quant.s)) for i in qlayers
    }


def train_latent(net, dataset, epochs: int, batch: int = 32, lr: float = 1e-3, seed: int = 0):
    """Plain full-precision pretraining, in place.  Returns the net."""
    rng = Rng(seed).child("pretrain")
    opt = AdamState(lr=lr)
    x_all = shape_inputs(dataset.train_x, net.input_shape)
    y_all = dataset.train_y
    for _ in range(epochs):
        for idx in batches(len(x_all), batch, drop_last=True, rng=rng):
            out, cache = forward(net, x_all[idx], mode="latent", cache=True, update_running=True)
            loss, g = loss_and_grad(net.loss, out, y_all[idx])
            if not np.isfinite(loss):
                raise RuntimeError("pretraining diverged")
            grads = backward(net, cache, g)
            adam_step(opt, net.parameters(), grads)
    return net


def train_qat(net, dataset, cfg: TrainConfig):
    """Quantization-aware training, in place on ``net``.

    Returns ``(net, ema_state, tracker, history)``.  The EMA shadows every
    trainable parameter after each optimizer step; the tracker records the
    concatenated integer weight codes so flip statistics can be read off
    afterwards.  ``cfg.epochs == 0`` leaves the net untouched and the
    history empty.
    """
    rng = Rng(cfg.seed).child("qat")
    opt = AdamState(lr=cfg.lr)
    qlayers = [i for i, l in enumerate(net.layers) if l.w_quant is not None]
    tracker = OscillationTracker(window=cfg.flip_window)

    x_all = shape_inputs(dataset.train_x, net.input_shape)
    y_all = dataset.train_y
    iters_per_epoch = len(x_all) // cfg.batch
    total_iters = cfg.epochs * iters_per_epoch
    ema = None
    if cfg.ema_enabled:
        ema = EMAState(
            alpha=cfg.ema_alpha,
            warmup_iters=int(round(cfg.ema_warmup_frac * total_iters)),
        )

    history = []
    for epoch in range(cfg.epochs):
        epoch_loss, epoch_batches = 0.0, 0
        for idx in batches(len(x_all), cfg.batch, drop_last=True, rng=rng):
            out, cache = forward(
                net, x_all[idx], mode="quantized", cache=True, update_running=True
            )
            loss, g = loss_and_grad(net.loss, out, y_all[idx])
            grads = backward(net, cache, g)
            if cfg.dampening_lambda > 0.0:
                penalty, pgrads = dampening_penalty(net, cfg.dampening_lambda)
                loss += penalty
                for name, pg in pgrads.items():
                    grads[name] = grads[name] + pg
            if not np.isfinite(loss) or loss > cfg.divergence_limit:
                raise RuntimeError(f"training diverged at epoch {epoch} (loss={loss})")
            epoch_loss += loss
            epoch_batches += 1
            adam_step(opt, net.parameters(), grads)
            if ema is not None:
                ema_update(ema, net.parameters())
            if qlayers:
                record_step(tracker, _weight_codes(net, qlayers), _scale_summary(net, qlayers))

        row = {
            "epoch": epoch,
            "train_loss": epoch_loss / max(epoch_batches, 1),
        }
        ev = evaluate(net, dataset.eval_x, dataset.eval_y, mode="quantized")
        row["eval_loss"] = ev["loss"]
        if "accuracy" in ev:
            row["eval_accuracy"] = ev["accuracy"]
        if ema is not None and ema.shadows:
            shadow = materialize_ema(net, ema)
            sev = evaluate(shadow, dataset.eval_x, dataset.eval_y, mode="quantized")
            row["ema_eval_loss"] = sev["loss"]
            if "accuracy" in sev:
                row["ema_eval_accuracy"] = sev["accuracy"]
        history.append(row)
    return net, ema, tracker, history
