"""A small residual convolutional super-resolution network in plain numpy.

The network maps an LR normalized image (3 PNCC channels, or the depth
channel alone) to an HR prediction of either all three PNCC channels or only
the normalized depth. A stack of 3x3 conv + ReLU layers ends in a conv that
emits ``out_ch * r**2`` channels, rearranged to full resolution by pixel
shuffle and added to a bicubic upsample of the input. The last conv starts at
zero, so an untrained model reproduces bicubic interpolation exactly.

The backbone sees its input standardized per sample, and the residual it
emits is multiplied back by that sample's spread (and by ``RES_SCALE``).
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import EmptyInputError, NumericError, StateError
from .geometry import DepthMap, Intrinsics
from .pncc import NormalizationParams, PnccImage, channels_from_depth, fill_invalid
from .resample import resize_axis

log = logging.getLogger(__name__)

HEAD_MODES = ("xyz", "z")
INPUT_MODES = ("pncc", "depth")
BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
# residual branch gain; keeps Adam's first sign-sized steps below the
# typical correction so training does not overshoot the bicubic start
RES_SCALE = 0.02


# ---------------------------------------------------------------- layers


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ValueError(f"expected (C, H, W) or (N, C, H, W), got shape {x.shape}")
    return x, False


def _check_conv_shapes(x: np.ndarray, w: np.ndarray) -> int:
    if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ValueError(f"kernel must be (out, in, k, k) with odd k, got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    return w.shape[2] // 2


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    n, c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # n, c, h, w, k, k
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * k * k)


def _conv_forward_cols(cols, w, b, shape):
    n, _, h, wd = shape
    out = cols @ w.reshape(w.shape[0], -1).T + b
    return np.ascontiguousarray(out.reshape(n, h, wd, w.shape[0]).transpose(0, 3, 1, 2))


def _conv_backward_cols(cols, w, grad_out, x_shape, need_grad_x=True):
    n, c, h, wd = x_shape
    o, _, k, _ = w.shape
    p = k // 2
    g = grad_out.transpose(0, 2, 3, 1).reshape(n * h * wd, o)
    grad_w = (g.T @ cols).reshape(w.shape)
    grad_b = g.sum(axis=0)
    if not need_grad_x:
        return None, grad_w, grad_b
    gcols = (g @ w.reshape(o, -1)).reshape(n, h, wd, c, k, k)
    gxp = np.zeros((n, c, h + 2 * p, wd + 2 * p))
    for i in range(k):
        for j in range(k):
            gxp[:, :, i:i + h, j:j + wd] += gcols[..., i, j].transpose(0, 3, 1, 2)
    return gxp[:, :, p:p + h, p:p + wd], grad_w, grad_b


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Zero-padded 'same' cross-correlation; x is (C, H, W) or (N, C, H, W)."""
    xb, single = _as_batch(x)
    _check_conv_shapes(xb, w)
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (w.shape[0],):
        raise ValueError(f"bias shape {b.shape} does not match {w.shape[0]} output channels")
    y = _conv_forward_cols(_im2col(xb, w.shape[2]), w, b, xb.shape)
    return y[0] if single else y


def conv2d_backward(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray):
    """Gradients of :func:`conv2d_forward` w.r.t. input, kernel and bias."""
    xb, single = _as_batch(x)
    _check_conv_shapes(xb, w)
    gb, _ = _as_batch(grad_out)
    n, _, h, wd = xb.shape
    if gb.shape != (n, w.shape[0], h, wd):
        raise ValueError(f"grad_out shape {gb.shape} inconsistent with forward output")
    gx, gw, gbias = _conv_backward_cols(_im2col(xb, w.shape[2]), w, gb, xb.shape)
    return (gx[0] if single else gx), gw, gbias


def pixel_shuffle(x: np.ndarray, r: int) -> np.ndarray:
    """(c*r*r + dy*r + dx, y, x) -> (c, y*r + dy, x*r + dx)."""
    xb, single = _as_batch(x)
    n, c, h, w = xb.shape
    if c % (r * r):
        raise ValueError(f"{c} channels not divisible by r^2 = {r * r}")
    out = xb.reshape(n, c // (r * r), r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
    out = np.ascontiguousarray(out.reshape(n, c // (r * r), h * r, w * r))
    return out[0] if single else out


def pixel_unshuffle(y: np.ndarray, r: int) -> np.ndarray:
    """Inverse of :func:`pixel_shuffle`; also its exact adjoint."""
    yb, single = _as_batch(y)
    n, c, hr, wr = yb.shape
    if hr % r or wr % r:
        raise ValueError(f"spatial size {hr}x{wr} not divisible by {r}")
    out = yb.reshape(n, c, hr // r, r, wr // r, r).transpose(0, 1, 3, 5, 2, 4)
    out = np.ascontiguousarray(out.reshape(n, c * r * r, hr // r, wr // r))
    return out[0] if single else out


def upsample_bicubic(x: np.ndarray, r: int) -> np.ndarray:
    """Bicubic x r enlargement of the two trailing axes."""
    if r == 1:
        return np.array(x, dtype=np.float64)
    f = Fraction(r)
    out = resize_axis(np.asarray(x, dtype=np.float64), -2, x.shape[-2] * r, f, -0.5)
    return resize_axis(out, -1, x.shape[-1] * r, f, -0.5)


def charbonnier_loss(pred, target, valid, eps: float = 1e-3):
    """Mean of sqrt(diff^2 + eps^2) over valid pixels and all channels.

    ``valid`` has the shape of ``pred`` without its channel axis. Returns the
    loss and its gradient w.r.t. ``pred``, which is zero at invalid pixels.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"pred {pred.shape} and target {target.shape} differ")
    valid = np.asarray(valid, dtype=bool)
    m = np.expand_dims(valid, -3)
    if np.broadcast_shapes(m.shape, pred.shape) != pred.shape:
        raise ValueError(f"mask {valid.shape} does not fit prediction {pred.shape}")
    count = int(valid.sum()) * pred.shape[-3]
    if count == 0:
        raise EmptyInputError("Charbonnier loss needs at least one valid pixel")
    diff = np.where(m, pred - target, 0.0)
    root = np.sqrt(diff * diff + eps * eps)
    loss = float(np.where(m, root, 0.0).sum() / count)
    grad = np.where(m, diff / root, 0.0) / count
    return loss, grad


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state: AdamState, lr: float):
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state have different lengths")
    state.t += 1
    c1 = 1 - BETA1 ** state.t
    c2 = 1 - BETA2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= BETA1
        m += (1 - BETA1) * g
        v *= BETA2
        v += (1 - BETA2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return params, state


# ----------------------------------------------------------------- model


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    charbonnier_eps: float = 1e-3
    r: int = 4
    head_mode: str = "z"
    input_mode: str = "pncc"
    patch: int = 64

    def __post_init__(self):
        if self.head_mode not in HEAD_MODES:
            raise ValueError(f"head_mode must be one of {HEAD_MODES}")
        if self.input_mode not in INPUT_MODES:
            raise ValueError(f"input_mode must be one of {INPUT_MODES}")
        if self.lr < 0 or self.charbonnier_eps <= 0:
            raise ValueError("learning rate must be >= 0 and charbonnier_eps > 0")
        if min(self.epochs, self.batch_size, self.r, self.patch) < 1 or self.seed < 0:
            raise ValueError("epochs, batch_size, r and patch must be positive; seed >= 0")


@dataclass
class SrModel:
    head_mode: str = "z"
    input_mode: str = "pncc"
    r: int = 4
    channels: int = 32
    n_layers: int = 6
    kernel: int = 3
    params: list[np.ndarray] = field(default_factory=list, repr=False)
    adam: AdamState | None = field(default=None, repr=False)

    @property
    def in_ch(self) -> int:
        return 3 if self.input_mode == "pncc" else 1

    @property
    def out_ch(self) -> int:
        return 3 if self.head_mode == "xyz" else 1

    def layer_shapes(self) -> list[tuple[int, ...]]:
        """Weight and bias shapes in declaration order."""
        k = self.kernel
        widths = [self.in_ch] + [self.channels] * (self.n_layers - 1) + [self.out_ch * self.r**2]
        shapes = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            shapes += [(cout, cin, k, k), (cout,)]
        return shapes

    def architecture(self) -> dict:
        return {
            "head_mode": self.head_mode,
            "input_mode": self.input_mode,
            "r": self.r,
            "channels": self.channels,
            "n_layers": self.n_layers,
            "kernel": self.kernel,
        }


def init_model(
    head_mode="z", input_mode="pncc", r=4, channels=32, n_layers=6, kernel=3, seed=0
) -> SrModel:
    """He-normal hidden layers from a seeded generator; the final conv is zero."""
    if head_mode not in HEAD_MODES or input_mode not in INPUT_MODES:
        raise ValueError(f"unknown mode ({head_mode}, {input_mode})")
    if n_layers < 1 or channels < 1 or r < 1:
        raise ValueError("n_layers, channels and r must be positive")
    model = SrModel(head_mode, input_mode, r, channels, n_layers, kernel)
    rng = np.random.default_rng(seed)
    shapes = model.layer_shapes()
    params = []
    for i in range(0, len(shapes), 2):
        wshape, bshape = shapes[i], shapes[i + 1]
        if i == len(shapes) - 2:
            params.append(np.zeros(wshape))
        else:
            fan_in = wshape[1] * wshape[2] * wshape[3]
            params.append(rng.standard_normal(wshape) * np.sqrt(2.0 / fan_in))
        params.append(np.zeros(bshape))
    model.params = params
    model.adam = AdamState.zeros_like(params)
    return model


def param_count(model: SrModel) -> int:
    return int(sum(int(np.prod(s)) for s in model.layer_shapes()))


def skip_channels(model: SrModel, x: np.ndarray) -> np.ndarray:
    """LR channels that the residual path upsamples, matching the head layout."""
    z = x[:, -1:]
    if model.head_mode == "z":
        return z
    if model.input_mode == "pncc":
        return x
    # depth input has no X/Y to carry; those channels start from zero
    return np.concatenate([np.zeros_like(z), np.zeros_like(z), z], axis=1)


def input_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample mean and spread used to standardize the backbone input.

    The residual is scaled back by the same spread, so the prediction moves
    with any affine change of the input's units.
    """
    mu = x.mean(axis=(1, 2, 3), keepdims=True)
    sigma = x.std(axis=(1, 2, 3), keepdims=True)
    return mu, np.where(sigma > 0, sigma, 1.0)


def forward_batch(model: SrModel, x: np.ndarray, keep_cache: bool = False):
    """Run the network on an (N, in_ch, h, w) batch -> (N, out_ch, r*h, r*w)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != model.in_ch:
        raise ValueError(f"expected (N, {model.in_ch}, h, w) input, got {x.shape}")
    cache = []
    mu, sigma = input_stats(x)
    h = (x - mu) / sigma
    n_conv = len(model.params) // 2
    for i in range(n_conv):
        w, b = model.params[2 * i], model.params[2 * i + 1]
        cols = _im2col(h, w.shape[2])
        y = _conv_forward_cols(cols, w, b, h.shape)
        if keep_cache:
            cache.append((cols, h.shape))
        h = np.maximum(y, 0.0) if i < n_conv - 1 else y
        if keep_cache and i < n_conv - 1:
            cache.append(y > 0)
    if keep_cache:
        cache.append(sigma)
    out = RES_SCALE * sigma * pixel_shuffle(h, model.r) + upsample_bicubic(skip_channels(model, x), model.r)
    return (out, cache) if keep_cache else out


def backward_batch(model: SrModel, cache, grad_out: np.ndarray) -> list[np.ndarray]:
    """Parameter gradients given d(loss)/d(output) from :func:`forward_batch`."""
    g = pixel_unshuffle(grad_out * (RES_SCALE * cache[-1]), model.r)
    n_conv = len(model.params) // 2
    grads: list[np.ndarray] = [None] * len(model.params)
    for i in reversed(range(n_conv)):
        if i < n_conv - 1:
            g = g * cache[2 * i + 1]
        cols, shape = cache[2 * i]
        g, gw, gb = _conv_backward_cols(cols, model.params[2 * i], g, shape, need_grad_x=i > 0)
        grads[2 * i], grads[2 * i + 1] = gw, gb
    return grads


# ------------------------------------------------------- image-level API


def model_input(model: SrModel, lr: PnccImage | DepthMap, norm: NormalizationParams | None = None):
    """Network input (in_ch, h, w) for one LR image."""
    if isinstance(lr, PnccImage):
        if model.input_mode == "pncc":
            return lr.channels.transpose(2, 0, 1).copy()
        return lr.channels[..., 2][None].copy()
    if isinstance(lr, DepthMap):
        if model.input_mode != "depth":
            raise StateError("this model takes PNCC input, got a DepthMap")
        if norm is None:
            raise StateError("depth input needs NormalizationParams to scale it")
        z = (lr.data / norm.s - norm.offset[2]) / norm.scale
        return fill_invalid(z, lr.valid)[None]
    raise TypeError(f"unsupported input type {type(lr).__name__}")


def forward(model: SrModel, lr_input: PnccImage | DepthMap, norm: NormalizationParams | None = None):
    """HR prediction (out_ch, r*h, r*w) in normalized units for one LR image.

    PNCC-input models take a PnccImage. Depth-input models take either a
    PnccImage (only its Z channel is read) or a DepthMap plus the
    NormalizationParams that scale it.
    """
    x = model_input(model, lr_input, norm)
    return forward_batch(model, x[None])[0]


def upsample_mask(valid: np.ndarray, r: int) -> np.ndarray:
    return np.repeat(np.repeat(valid, r, axis=0), r, axis=1)


def assemble_prediction(
    model_head: str, pred: np.ndarray, lr_valid: np.ndarray, norm: NormalizationParams,
    hr_intr: Intrinsics, r: int,
) -> PnccImage:
    """Wrap a raw HR prediction as a PnccImage.

    A Z-only prediction keeps its depth channel and rebuilds X and Y by
    projecting the implied depth along the HR camera rays.
    """
    valid = upsample_mask(lr_valid, r)
    if model_head == "xyz":
        channels = pred.transpose(1, 2, 0)
    else:
        z = pred[0]
        depth = (z * norm.scale + norm.offset[2]) * norm.s
        channels = channels_from_depth(depth, hr_intr, norm)
        channels[..., 2] = z
    if not np.isfinite(channels).all():
        raise NumericError("prediction contains non-finite values")
    return PnccImage(channels, valid, norm)


def super_resolve(model: SrModel, lr: PnccImage, hr_intr: Intrinsics) -> PnccImage:
    """LR PNCC image -> HR PNCC image in the same normalization."""
    if lr.norm is None:
        raise StateError("LR image carries no normalization parameters")
    pred = forward(model, lr)
    return assemble_prediction(model.head_mode, pred, lr.valid, lr.norm, hr_intr, model.r)


def bicubic_baseline(lr: PnccImage, hr_intr: Intrinsics, r: int) -> PnccImage:
    """The reference the residual path starts from: every channel upsampled."""
    if lr.norm is None:
        raise StateError("LR image carries no normalization parameters")
    up = upsample_bicubic(lr.channels.transpose(2, 0, 1), r)
    return PnccImage(up.transpose(1, 2, 0), upsample_mask(lr.valid, r), lr.norm)


# -------------------------------------------------------------- training


def _target(model: SrModel, hr: PnccImage) -> np.ndarray:
    ch = hr.channels.transpose(2, 0, 1)
    return ch if model.head_mode == "xyz" else ch[2:3]


def _crop(rng, lr_x, hr_y, mask, patch, r):
    h, w = lr_x.shape[1:]
    ph, pw = min(patch, h), min(patch, w)
    y0 = int(rng.integers(0, h - ph + 1))
    x0 = int(rng.integers(0, w - pw + 1))
    return (
        lr_x[:, y0:y0 + ph, x0:x0 + pw],
        hr_y[:, y0 * r:(y0 + ph) * r, x0 * r:(x0 + pw) * r],
        mask[y0 * r:(y0 + ph) * r, x0 * r:(x0 + pw) * r],
    )


def train(model: SrModel, dataset, cfg: TrainConfig):
    """Minibatch Adam on the masked Charbonnier loss.

    ``dataset`` is a sequence of (LR PnccImage, HR PnccImage, HR mask). Each
    epoch visits every sample once in a seeded order, taking one seeded crop
    per visit. Returns a trained copy of ``model`` and the per-epoch mean loss.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if (cfg.head_mode, cfg.input_mode, cfg.r) != (model.head_mode, model.input_mode, model.r):
        raise StateError("TrainConfig modes/scale do not match the model")
    for lr, hr, _ in dataset:
        if (hr.height, hr.width) != (lr.height * model.r, lr.width * model.r):
            raise ValueError("dataset scale is not consistent with the model's r")
    model = copy.deepcopy(model)
    if model.adam is None:
        model.adam = AdamState.zeros_like(model.params)
    rng = np.random.default_rng(cfg.seed)
    samples = [(model_input(model, lr), _target(model, hr), np.asarray(mask, bool)) for lr, hr, mask in dataset]
    losses = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        total, weight = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            crops = [_crop(rng, *samples[i], cfg.patch, model.r) for i in order[start:start + cfg.batch_size]]
            xb = np.stack([c[0] for c in crops])
            yb = np.stack([c[1] for c in crops])
            mb = np.stack([c[2] for c in crops])
            if not mb.any():
                continue
            # overflow is reported through the guard below, not as warnings
            with np.errstate(over="ignore", invalid="ignore"):
                out, cache = forward_batch(model, xb, keep_cache=True)
                loss, grad = charbonnier_loss(out, yb, mb, cfg.charbonnier_eps)
            if not np.isfinite(loss):
                raise NumericError(f"loss became non-finite in epoch {epoch}")
            grads = backward_batch(model, cache, grad)
            adam_step(model.params, grads, model.adam, cfg.lr)
            total += loss * len(crops)
            weight += len(crops)
        losses.append(total / max(weight, 1))
        log.info("epoch %d loss %.6g", epoch, losses[-1])
    for p in model.params:
        if not np.isfinite(p).all():
            raise NumericError("parameters became non-finite during training")
    return model, losses


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
