"""Shallow 3D CNN written directly in numpy.

Architecture::

    conv(1->8, 3^3, pad 1) -> ReLU -> maxpool 2
    conv(8->16, 3^3, pad 1) -> ReLU -> maxpool 2 -> flatten -> fc(->2)

Public layer functions take batches as ``(N, C, D, H, W)``. Internally the
network keeps activations channel-major, ``(C, N, D, H, W)``, so that the
im2col matrices come out as ``(27*C, N*D*H*W)`` and each convolution is a
single matmul with no transposes.

Training runs in float32; pass ``dtype=np.float64`` (as ``gradcheck`` does)
for finite-difference work.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "fc_w", "fc_b")
CONV1_CHANNELS = 8
CONV2_CHANNELS = 16
N_CLASSES = 2

_OFFSETS = tuple(itertools.product(range(3), repeat=3))


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 8
    max_epochs: int = 10
    learning_rate: float = 0.1
    seed: int = 0
    input_dims: tuple[int, int, int] = (32, 32, 32)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        self.input_dims = tuple(int(d) for d in self.input_dims)
        if len(self.input_dims) != 3 or any(d < 4 or d % 4 for d in self.input_dims):
            raise ValueError(f"input dims must be three multiples of 4, got {self.input_dims}")


@dataclass
class ShallowCNNParams:
    conv1_w: np.ndarray  # (8, 1, 3, 3, 3)
    conv1_b: np.ndarray  # (8,)
    conv2_w: np.ndarray  # (16, 8, 3, 3, 3)
    conv2_b: np.ndarray  # (16,)
    fc_w: np.ndarray  # (2, 16 * D/4 * H/4 * W/4)
    fc_b: np.ndarray  # (2,)

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def astype(self, dtype) -> "ShallowCNNParams":
        return ShallowCNNParams(**{k: v.astype(dtype) for k, v in self.arrays().items()})

    def copy(self) -> "ShallowCNNParams":
        return ShallowCNNParams(**{k: v.copy() for k, v in self.arrays().items()})

    @property
    def dtype(self):
        return self.conv1_w.dtype

    @property
    def n_features(self) -> int:
        return self.fc_w.shape[1]

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays().values())

    def check_input_dims(self, dims) -> None:
        d, h, w = dims
        expected = CONV2_CHANNELS * (d // 4) * (h // 4) * (w // 4)
        if any(x % 4 for x in dims) or expected != self.n_features:
            raise ValueError(
                f"input dims {tuple(dims)} incompatible with fc input size {self.n_features}"
            )


@dataclass
class TrainHistory:
    losses: list[float] = field(default_factory=list)
    params: ShallowCNNParams | None = None


def fc_input_size(input_dims) -> int:
    d, h, w = input_dims
    return CONV2_CHANNELS * (d // 4) * (h // 4) * (w // 4)


def init_params(input_dims, seed: int, dtype=np.float32) -> ShallowCNNParams:
    """Fan-in scaled uniform weights in +-sqrt(6/fan_in), zero biases."""
    return _init_from_rng(input_dims, np.random.default_rng(seed), dtype)


def _init_from_rng(input_dims, rng: np.random.Generator, dtype) -> ShallowCNNParams:
    def uniform(shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    n_feat = fc_input_size(input_dims)
    return ShallowCNNParams(
        conv1_w=uniform((CONV1_CHANNELS, 1, 3, 3, 3), 27),
        conv1_b=np.zeros(CONV1_CHANNELS, dtype=dtype),
        conv2_w=uniform((CONV2_CHANNELS, CONV1_CHANNELS, 3, 3, 3), 27 * CONV1_CHANNELS),
        conv2_b=np.zeros(CONV2_CHANNELS, dtype=dtype),
        fc_w=uniform((N_CLASSES, n_feat), n_feat),
        fc_b=np.zeros(N_CLASSES, dtype=dtype),
    )


# ---------------------------------------------------------------------------
# layers, channel-major internals


def _im2col(x: np.ndarray) -> np.ndarray:
    c, n, d, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    col = np.empty((27, c, n, d, h, w), dtype=x.dtype)
    for o, (i, j, k) in enumerate(_OFFSETS):
        col[o] = xp[:, :, i : i + d, j : j + h, k : k + w]
    return col.reshape(27 * c, n * d * h * w)


def _col2im(dcol: np.ndarray, shape) -> np.ndarray:
    c, n, d, h, w = shape
    dc = dcol.reshape(27, c, n, d, h, w)
    dxp = np.zeros((c, n, d + 2, h + 2, w + 2), dtype=dcol.dtype)
    for o, (i, j, k) in enumerate(_OFFSETS):
        dxp[:, :, i : i + d, j : j + h, k : k + w] += dc[o]
    return dxp[:, :, 1:-1, 1:-1, 1:-1]


def _kernel_matrix(kernel: np.ndarray) -> np.ndarray:
    # (Cout, Cin, 3, 3, 3) -> (Cout, 27*Cin), rows matching _im2col ordering
    cout, cin = kernel.shape[:2]
    return kernel.transpose(0, 2, 3, 4, 1).reshape(cout, 27 * cin)


def _conv_cm(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray):
    if kernel.shape[1] != x.shape[0]:
        raise ValueError(f"kernel expects {kernel.shape[1]} input channels, got {x.shape[0]}")
    col = _im2col(x)
    out = _kernel_matrix(kernel) @ col
    out += bias[:, None]
    return out.reshape((kernel.shape[0],) + x.shape[1:]), col


def _conv_backward_cm(dout, col, kernel, x_shape, need_dx=True):
    cout = kernel.shape[0]
    dflat = dout.reshape(cout, -1)
    dkernel = (dflat @ col.T).reshape(cout, 3, 3, 3, kernel.shape[1]).transpose(0, 4, 1, 2, 3)
    dx = _col2im(_kernel_matrix(kernel).T @ dflat, x_shape) if need_dx else None
    return dx, dkernel, dflat.sum(axis=1)


def _pool_views(x: np.ndarray):
    return [x[..., i::2, j::2, k::2] for i, j, k in itertools.product(range(2), repeat=3)]


def maxpool3d_forward(x: np.ndarray):
    """2x2x2 max pooling with stride 2 over the last three axes.

    Returns ``(pooled, argmax)`` where ``argmax`` holds the window position
    (0..7, first maximum wins) of each selected voxel.
    """
    if any(s % 2 for s in x.shape[-3:]):
        raise ValueError(f"max pooling needs even spatial dims, got {x.shape[-3:]}")
    # reduce W, then H, then D; strict ">" keeps the lower window position on ties
    a, b = x[..., 0::2], x[..., 1::2]
    idx = (b > a).astype(np.uint8)
    best = np.maximum(a, b)
    a, b = best[..., 0::2, :], best[..., 1::2, :]
    idx = np.where(b > a, idx[..., 1::2, :] + np.uint8(2), idx[..., 0::2, :])
    best = np.maximum(a, b)
    a, b = best[..., 0::2, :, :], best[..., 1::2, :, :]
    idx = np.where(b > a, idx[..., 1::2, :, :] + np.uint8(4), idx[..., 0::2, :, :])
    best = np.maximum(a, b)
    return best, idx


def maxpool3d_backward(dout: np.ndarray, idx: np.ndarray, input_shape) -> np.ndarray:
    dx = np.zeros(input_shape, dtype=dout.dtype)
    for pos, view in enumerate(_pool_views(dx)):
        np.copyto(view, dout, where=idx == pos)
    return dx


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def conv3d_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, padding: int = 1) -> np.ndarray:
    """3^3 cross-correlation with zero padding 1.

    ``x`` is ``(Cin, D, H, W)`` or a batch ``(N, Cin, D, H, W)``; the output
    has the same layout with ``Cout`` channels.
    """
    if padding != 1 or kernel.shape[2:] != (3, 3, 3):
        raise ValueError("only 3x3x3 kernels with padding 1 are supported")
    single = x.ndim == 4
    xb = x[None] if single else x
    out, _ = _conv_cm(np.ascontiguousarray(xb.transpose(1, 0, 2, 3, 4)), kernel, bias)
    out = out.transpose(1, 0, 2, 3, 4)
    return out[0] if single else out


def fc_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"fc expects {weight.shape[1]} features, got {x.shape[-1]}")
    return x @ weight.T + bias


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_ce_loss(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits``."""
    logits = np.atleast_2d(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n = logits.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if labels.shape[0] != n or np.any((labels < 0) | (labels >= logits.shape[1])):
        raise ValueError("labels must hold one valid class index per batch item")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    log_probs = z - lse[:, None]
    loss = float(-log_probs[np.arange(n), labels].mean())
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1
    return loss, grad / n


# ---------------------------------------------------------------------------
# whole network


def _as_batch(x: np.ndarray, dtype) -> np.ndarray:
    """Accept (D,H,W), (1,D,H,W) or (N,1,D,H,W); return channel-major (1,N,D,H,W)."""
    x = np.asarray(x, dtype=dtype)
    if x.ndim == 3:
        x = x[None, None]
    elif x.ndim == 4:
        x = x[None] if x.shape[0] == 1 else x[:, None]
    if x.ndim != 5 or x.shape[1] != 1:
        raise ValueError(f"expected single-channel volume(s), got shape {x.shape}")
    return x.reshape((1, x.shape[0]) + x.shape[2:])


def _block_forward(x, kernel, bias):
    # conv -> relu -> pool, evaluated as conv -> pool -> (+bias) -> relu: adding a
    # per-channel constant and relu are both monotone, so they commute with the
    # window max and only need to touch the pooled (8x smaller) tensor
    cout = kernel.shape[0]
    col = _im2col(x)
    z = (_kernel_matrix(kernel) @ col).reshape((cout,) + x.shape[1:])
    pooled, idx = maxpool3d_forward(z)
    pre = pooled + bias.reshape(cout, 1, 1, 1, 1)
    return np.maximum(pre, 0), dict(col=col, idx=idx, pre=pre, z_shape=z.shape, x_shape=x.shape)


def _block_backward(dout, cache, kernel, need_dx=True):
    dpre = dout * (cache["pre"] > 0)
    dbias = dpre.sum(axis=(1, 2, 3, 4))
    dz = maxpool3d_backward(dpre, cache["idx"], cache["z_shape"])
    dx, dkernel, _ = _conv_backward_cm(dz, cache["col"], kernel, cache["x_shape"], need_dx)
    return dx, dkernel, dbias


def forward(params: ShallowCNNParams, x: np.ndarray, return_cache: bool = False):
    """Logits ``(N, 2)`` for a volume or batch of volumes."""
    xb = _as_batch(x, params.dtype)
    params.check_input_dims(xb.shape[2:])
    a1, cache1 = _block_forward(xb, params.conv1_w, params.conv1_b)
    a2, cache2 = _block_forward(a1, params.conv2_w, params.conv2_b)
    n = xb.shape[1]
    feats = a2.transpose(1, 0, 2, 3, 4).reshape(n, -1)
    logits = fc_forward(feats, params.fc_w, params.fc_b)
    if not return_cache:
        return logits
    return logits, dict(block1=cache1, block2=cache2, a2_shape=a2.shape, feats=feats)


def backward(params: ShallowCNNParams, cache: dict, dlogits: np.ndarray) -> ShallowCNNParams:
    """Parameter gradients given the upstream gradient w.r.t. the logits."""
    dlogits = dlogits.astype(params.dtype, copy=False)
    d_fc_w = dlogits.T @ cache["feats"]
    d_fc_b = dlogits.sum(axis=0)
    dfeats = dlogits @ params.fc_w
    c2, n, d4, h4, w4 = cache["a2_shape"]
    da2 = dfeats.reshape(n, c2, d4, h4, w4).transpose(1, 0, 2, 3, 4)
    da1, d_conv2_w, d_conv2_b = _block_backward(da2, cache["block2"], params.conv2_w)
    _, d_conv1_w, d_conv1_b = _block_backward(da1, cache["block1"], params.conv1_w, need_dx=False)
    return ShallowCNNParams(d_conv1_w, d_conv1_b, d_conv2_w, d_conv2_b, d_fc_w, d_fc_b)


def loss_and_grads(params: ShallowCNNParams, x: np.ndarray, labels) -> tuple[float, ShallowCNNParams]:
    logits, cache = forward(params, x, return_cache=True)
    loss, dlogits = softmax_ce_loss(logits, labels)
    return loss, backward(params, cache, dlogits)


def sgd_step(params: ShallowCNNParams, grads: ShallowCNNParams, lr: float) -> ShallowCNNParams:
    """Plain SGD, no momentum or weight decay."""
    new = {}
    for name in PARAM_NAMES:
        p, g = getattr(params, name), getattr(grads, name)
        if p.shape != g.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        new[name] = (p - p.dtype.type(lr) * g).astype(p.dtype, copy=False)
    return ShallowCNNParams(**new)


def train(
    inputs: Sequence[np.ndarray],
    labels: Sequence[int],
    cfg: TrainConfig,
    dtype=np.float32,
) -> TrainHistory:
    """Minibatch SGD for exactly ``cfg.max_epochs`` epochs.

    Initialization and per-epoch shuffling both draw from one generator seeded
    with ``cfg.seed``. The last partial batch of an epoch is kept. Returns the
    per-epoch mean training loss and the final parameters.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(inputs) == 0:
        raise ValueError("empty training set")
    if len(inputs) != len(labels):
        raise ValueError("inputs and labels differ in length")
    if np.unique(labels).size < 2:
        raise ValueError("training set must contain both classes")
    data = np.stack([np.asarray(v, dtype=dtype).reshape(cfg.input_dims) for v in inputs])
    rng = np.random.default_rng(cfg.seed)
    params = _init_from_rng(cfg.input_dims, rng, dtype)
    history = TrainHistory(params=params)
    n = len(data)
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            loss, grads = loss_and_grads(params, data[batch], labels[batch])
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch starting {start} "
                    f"(lr={cfg.learning_rate}); try a smaller learning rate"
                )
            params = sgd_step(params, grads, cfg.learning_rate)
            total += loss * len(batch)
        history.losses.append(total / n)
        log.debug("epoch %d mean loss %.6f", epoch, history.losses[-1])
    if not params.is_finite():
        raise TrainingDivergedError("parameters became non-finite during training")
    history.params = params
    return history


def predict(params: ShallowCNNParams, x: np.ndarray) -> float:
    """Mutation-class probability (softmax of logit 1) for one volume."""
    x = np.asarray(x)
    if not (x.ndim == 3 or (x.ndim == 4 and x.shape[0] == 1)):
        raise ValueError(f"predict takes one (D,H,W) or (1,D,H,W) volume, got {x.shape}")
    return float(softmax(forward(params, x))[0, 1])


def predict_batch(params: ShallowCNNParams, xs, batch_size: int = 16) -> np.ndarray:
    xs = np.asarray(xs, dtype=params.dtype)
    out = [softmax(forward(params, xs[i : i + batch_size]))[:, 1] for i in range(0, len(xs), batch_size)]
    return np.concatenate(out).astype(np.float64)


@dataclass
class GradcheckReport:
    max_rel_error: float
    checked: int
    shrunk: int  # entries re-checked with a smaller step after crossing a kink
    skipped: int  # entries whose every step crossed a kink
    worst_param: str | None = None


def _activation_pattern(params, x):
    logits, cache = forward(params, x, return_cache=True)
    pattern = [cache[b][k] for b in ("block1", "block2") for k in ("idx",)]
    pattern += [cache[b]["pre"] > 0 for b in ("block1", "block2")]
    return logits, pattern


def gradcheck_report(
    params: ShallowCNNParams,
    x: np.ndarray,
    label,
    epsilon: float = 1e-4,
    analytic: ShallowCNNParams | None = None,
    max_shrink: int = 3,
) -> GradcheckReport:
    """Compare analytic gradients to central differences, entry by entry.

    Everything runs in float64. The relative error of one entry is
    ``|a - n| / max(|a|, |n|, 1e-8)``. The network is piecewise smooth
    (ReLU, max pooling); when a +-step changes which side of a kink any unit
    sits on, the difference quotient is meaningless, so the step is divided
    by 10 (up to ``max_shrink`` times) until the activation pattern at both
    ends matches the unperturbed one.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    p64 = params.astype(np.float64)
    x64 = np.asarray(x, dtype=np.float64)
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    if analytic is None:
        _, analytic = loss_and_grads(p64, x64, labels)
    _, base = _activation_pattern(p64, x64)

    def probe(flat, i, step):
        orig = flat[i]
        flat[i] = orig + step
        up_logits, up_pat = _activation_pattern(p64, x64)
        flat[i] = orig - step
        down_logits, down_pat = _activation_pattern(p64, x64)
        flat[i] = orig
        smooth = all(np.array_equal(b, u) and np.array_equal(b, d) for b, u, d in zip(base, up_pat, down_pat))
        up = softmax_ce_loss(up_logits, labels)[0]
        down = softmax_ce_loss(down_logits, labels)[0]
        return (up - down) / (2 * step), smooth

    report = GradcheckReport(0.0, 0, 0, 0)
    for name in PARAM_NAMES:
        flat = getattr(p64, name).reshape(-1)
        gflat = np.asarray(getattr(analytic, name), dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            step = epsilon
            numeric, smooth = probe(flat, i, step)
            tries = 0
            while not smooth and tries < max_shrink:
                step /= 10
                tries += 1
                numeric, smooth = probe(flat, i, step)
            if not smooth:
                report.skipped += 1
                continue
            report.shrunk += tries > 0
            report.checked += 1
            a = gflat[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if rel > report.max_rel_error:
                report.max_rel_error = rel
                report.worst_param = f"{name}[{i}]"
    return report


def gradcheck(
    params: ShallowCNNParams,
    x: np.ndarray,
    label,
    epsilon: float = 1e-4,
    analytic: ShallowCNNParams | None = None,
) -> float:
    """Max relative gradient error; see ``gradcheck_report``."""
    return gradcheck_report(params, x, label, epsilon, analytic).max_rel_error


# ---------------------------------------------------------------------------
# serialization

_PARAMS_MAGIC = "tumorloc-cnn-params v1"


def save_params(params: ShallowCNNParams, path, cfg: TrainConfig | None = None) -> None:
    """Text header line (JSON) followed by little-endian float32 values."""
    header = {
        "format": _PARAMS_MAGIC,
        "shapes": {name: list(getattr(params, name).shape) for name in PARAM_NAMES},
        "config": asdict(cfg) if cfg is not None else None,
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        for name in PARAM_NAMES:
            fh.write(np.ascontiguousarray(getattr(params, name), dtype="<f4").tobytes())


def load_params(path) -> tuple[ShallowCNNParams, dict]:
    raw = Path(path).read_bytes()
    newline = raw.index(b"\n")
    header = json.loads(raw[:newline].decode("utf-8"))
    if header.get("format") != _PARAMS_MAGIC:
        raise ValueError(f"{path}: not a parameter file")
    offset = newline + 1
    arrays = {}
    for name in PARAM_NAMES:
        shape = tuple(header["shapes"][name])
        count = int(np.prod(shape))
        if offset + 4 * count > len(raw):
            raise ValueError(f"{path}: truncated parameter payload")
        arrays[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
        offset += 4 * count
    return ShallowCNNParams(**arrays), header
