"""Miniature encoder-decoder segmentation network trained from scratch.

Architecture per level width list (w_0, ..., w_{L-1}): encoder blocks of
3x3 conv (stride 1, zero pad 1) + ReLU followed by 2x2 max-pool; a 3x3
bottleneck conv; a mirrored decoder of nearest-neighbor 2x upsampling, skip
concatenation with the matching encoder block and 3x3 conv + ReLU; and a
final 1x1 conv to the class logits.  An empty width list degenerates to a
single 1x1 conv, i.e. per-pixel logistic regression.

The final activation is either a plain softmax or the TV-regularized
softmax: its cheap one-step form inside training steps, the full dual
iteration at prediction time.  Everything is float64 and the training loop
is deterministic for a fixed seed.

Activations carry a batch axis (B, C, H, W); single (C, H, W) inputs are
accepted and returned without the batch axis.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .activations import (RegActConfig, reg_softmax_iterative,
                          reg_softmax_onestep, softmax)
from .backward import (lambda_gradient, reg_softmax_onestep_backward,
                       update_lambda)

CHECKPOINT_MAGIC = b"TVSEGNET"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetSpec:
    """Shape of the network and its final activation."""

    in_channels: int = 3
    num_classes: int = 3
    widths: tuple = (16, 32)
    activation: str = "plain"  # "plain" | "regularized"
    reg: RegActConfig = RegActConfig()

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if self.in_channels < 1:
            raise ValueError(f"need at least 1 input channel, got {self.in_channels}")
        if any(w < 1 for w in self.widths):
            raise ValueError(f"channel widths must be positive, got {self.widths}")
        if self.activation not in ("plain", "regularized"):
            raise ValueError(f"activation must be 'plain' or 'regularized', "
                             f"got {self.activation!r}")

    @property
    def levels(self) -> int:
        return len(self.widths)


@dataclass
class ParamSet:
    """Conv kernels/biases in declaration order plus momentum state."""

    weights: list
    biases: list
    vel_w: list
    vel_b: list
    lr: float = 0.01
    momentum: float = 0.9


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)
    lambdas: list = field(default_factory=list)  # lam after each iteration
    lambda_per_epoch: list = field(default_factory=list)
    iterations: int = 0
    seed: int = 0

    def to_csv(self) -> str:
        lines = ["iteration,loss,lambda"]
        for i, (loss, lam) in enumerate(zip(self.losses, self.lambdas)):
            lines.append(f"{i},{loss:.12g},{lam:.12g}")
        return "\n".join(lines) + "\n"


@dataclass
class ForwardTape:
    """Everything backward() needs from one forward pass."""

    records: list
    logits: np.ndarray
    probs: np.ndarray
    act_tapes: list  # per-image one-step tapes in regularized training mode
    version: int
    single: bool


class MiniUnet:
    def __init__(self, spec: NetSpec, params: ParamSet, lam: float):
        self.spec = spec
        self.params = params
        self.lam = lam
        self.version = 0  # bumped by every parameter update; guards stale tapes


def _conv_shapes(spec: NetSpec):
    """(Cout, Cin, k) per conv in declaration order: encoder levels,
    bottleneck, decoder levels (deepest first), final 1x1."""
    shapes = []
    cin = spec.in_channels
    for w in spec.widths:
        shapes.append((w, cin, 3))
        cin = w
    if spec.levels:
        shapes.append((spec.widths[-1], spec.widths[-1], 3))
        cin = spec.widths[-1]
        for lvl in range(spec.levels - 1, -1, -1):
            shapes.append((spec.widths[lvl], cin + spec.widths[lvl], 3))
            cin = spec.widths[lvl]
    shapes.append((spec.num_classes, cin, 1))
    return shapes


def build(spec: NetSpec, seed: int) -> MiniUnet:
    """He-initialized network, bit-identical for a fixed seed."""
    rng = np.random.default_rng(seed)
    weights, biases, vel_w, vel_b = [], [], [], []
    for cout, cin, k in _conv_shapes(spec):
        fan_in = cin * k * k
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in),
                                  size=(cout, cin, k, k)))
        biases.append(np.zeros(cout))
        vel_w.append(np.zeros((cout, cin, k, k)))
        vel_b.append(np.zeros(cout))
    params = ParamSet(weights=weights, biases=biases, vel_w=vel_w, vel_b=vel_b)
    lam = spec.reg.lam if spec.activation == "regularized" else 0.0
    return MiniUnet(spec, params, lam)


# ---------------------------------------------------------------------------
# layer primitives

def _im2col(x, k, pad):
    b, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, c, k, k, h, w), dtype=np.float64)
    for di in range(k):
        for dj in range(k):
            cols[:, :, di, dj] = x[:, :, di:di + h, dj:dj + w]
    return cols.reshape(b, c * k * k, h * w)


def _col2im(cols, shape, k, pad):
    b, c, h, w = shape
    cols = cols.reshape(b, c, k, k, h, w)
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    for di in range(k):
        for dj in range(k):
            out[:, :, di:di + h, dj:dj + w] += cols[:, :, di, dj]
    return out[:, :, pad:pad + h, pad:pad + w] if pad else out


def _conv_forward(x, w, b):
    """Returns the output and the column matrix reused by the backward pass."""
    cout, _, k, _ = w.shape
    bsz, _, h, wd = x.shape
    cols = _im2col(x, k, k // 2)
    out = np.matmul(w.reshape(cout, -1)[None], cols).reshape(bsz, cout, h, wd)
    return out + b[None, :, None, None], cols


def _conv_backward(d_out, cols, in_shape, w):
    cout, _, k, _ = w.shape
    bsz, _, h, wd = in_shape
    d2 = d_out.reshape(bsz, cout, h * wd)
    d_w = np.matmul(d2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    d_b = d_out.sum(axis=(0, 2, 3))
    d_cols = np.matmul(w.reshape(cout, -1).T[None], d2)
    return _col2im(d_cols, in_shape, k, k // 2), d_w, d_b


def _pool_forward(x):
    b, c, h, w = x.shape
    blocks = (x.reshape(b, c, h // 2, 2, w // 2, 2)
              .transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4))
    idx = blocks.argmax(axis=-1)  # first max wins: deterministic tie-break
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_backward(d_out, idx, in_shape):
    b, c, h, w = in_shape
    blocks = np.zeros((b, c, h // 2, w // 2, 4))
    np.put_along_axis(blocks, idx[..., None], d_out[..., None], axis=-1)
    return (blocks.reshape(b, c, h // 2, w // 2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w))


def _upsample_forward(x):
    return x.repeat(2, axis=2).repeat(2, axis=3)


def _upsample_backward(d_out):
    b, c, h2, w2 = d_out.shape
    return d_out.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))


def _softmax_batch(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_vjp_batch(probs, vec):
    dot = (probs * vec).sum(axis=1, keepdims=True)
    return probs * (vec - dot)


# ---------------------------------------------------------------------------
# network forward / backward

def check_input_shape(spec: NetSpec, shape) -> None:
    c, h, w = shape[-3:]
    if c != spec.in_channels:
        raise ValueError(f"expected {spec.in_channels} input channels, got {c}")
    down = 2 ** spec.levels
    if h % down or w % down:
        raise ValueError(f"input size {h}x{w} not divisible by the "
                         f"{spec.levels}-level pooling factor {down}")


def forward(net: MiniUnet, image: np.ndarray, train: bool = False,
            test_iterations: int | None = None):
    """Run the network; returns (logits, probs, tape).

    In regularized mode the final activation is the one-step scheme while
    training and the full dual iteration otherwise.
    """
    image = np.asarray(image, dtype=np.float64)
    single = image.ndim == 3
    x = image[None] if single else image
    check_input_shape(net.spec, x.shape)
    spec = net.spec
    wts, bss = net.params.weights, net.params.biases

    records = []
    cursor = 0

    def conv_relu(h):
        nonlocal cursor
        li = cursor
        cursor += 1
        pre, cols = _conv_forward(h, wts[li], bss[li])
        records.append(("conv", li, cols, h.shape))
        mask = pre > 0
        records.append(("relu", mask))
        return pre * mask

    h = x
    skip_values = []
    for lvl in range(spec.levels):
        h = conv_relu(h)
        skip_values.append(h)
        records.append(("skip_out", lvl))
        out, idx = _pool_forward(h)
        records.append(("pool", idx, h.shape))
        h = out
    if spec.levels:
        h = conv_relu(h)
        for lvl in range(spec.levels - 1, -1, -1):
            h = _upsample_forward(h)
            records.append(("up",))
            main_ch = h.shape[1]
            h = np.concatenate([h, skip_values[lvl]], axis=1)
            records.append(("concat", lvl, main_ch))
            h = conv_relu(h)
    li = cursor
    logits, cols = _conv_forward(h, wts[li], bss[li])
    records.append(("conv", li, cols, h.shape))

    act_tapes = []
    if spec.activation == "regularized":
        if train:
            cfg = RegActConfig(lam=net.lam, kappa=spec.reg.kappa,
                               tau=spec.reg.tau, iterations=1, mode="one_step")
            probs = np.empty_like(logits)
            for bi in range(logits.shape[0]):
                probs[bi], tape_b = reg_softmax_onestep(logits[bi], cfg)
                act_tapes.append(tape_b)
        else:
            iters = test_iterations or spec.reg.iterations
            cfg = RegActConfig(lam=net.lam, kappa=spec.reg.kappa,
                               tau=spec.reg.tau, iterations=iters,
                               mode="iterative")
            probs = np.empty_like(logits)
            for bi in range(logits.shape[0]):
                probs[bi], _, _ = reg_softmax_iterative(logits[bi], cfg)
    else:
        probs = _softmax_batch(logits)

    tape = ForwardTape(records=records, logits=logits, probs=probs,
                       act_tapes=act_tapes, version=net.version, single=single)
    if single:
        return logits[0], probs[0], tape
    return logits, probs, tape


def backward(net: MiniUnet, tape: ForwardTape, d_probs: np.ndarray):
    """Parameter gradients (and the lam gradient in regularized training
    mode) from d(loss)/d(probs)."""
    if tape.version != net.version:
        raise RuntimeError("stale tape: parameters changed since the forward pass")
    d_probs = np.asarray(d_probs, dtype=np.float64)
    if tape.single:
        d_probs = d_probs[None]
    if d_probs.shape != tape.probs.shape:
        raise ValueError(f"d_probs shape {d_probs.shape} != probs shape "
                         f"{tape.probs.shape}")

    lam_grad = None
    if tape.act_tapes:
        d = np.empty_like(d_probs)
        lam_grad = 0.0
        for bi, act_tape in enumerate(tape.act_tapes):
            d[bi] = reg_softmax_onestep_backward(act_tape, d_probs[bi])
            lam_grad += lambda_gradient(act_tape, d_probs[bi])
    else:
        d = _softmax_vjp_batch(tape.probs, d_probs)

    grads_w = [np.zeros_like(w) for w in net.params.weights]
    grads_b = [np.zeros_like(b) for b in net.params.biases]
    skip_grads = {}
    for rec in reversed(tape.records):
        kind = rec[0]
        if kind == "conv":
            _, li, cols, in_shape = rec
            d, grads_w[li], grads_b[li] = _conv_backward(d, cols, in_shape,
                                                         net.params.weights[li])
        elif kind == "relu":
            d = d * rec[1]
        elif kind == "pool":
            d = _pool_backward(d, rec[1], rec[2])
        elif kind == "skip_out":
            d = d + skip_grads.pop(rec[1])
        elif kind == "up":
            d = _upsample_backward(d)
        elif kind == "concat":
            _, lvl, main_ch = rec
            skip_grads[lvl] = d[:, main_ch:]
            d = d[:, :main_ch]
    return grads_w, grads_b, lam_grad


def cross_entropy(probs: np.ndarray, target: np.ndarray):
    """Pixel-averaged cross entropy; returns (loss, d(loss)/d(probs))."""
    single = probs.ndim == 3
    p = probs[None] if single else probs
    t = np.asarray(target)
    t = t[None] if single else t
    if t.shape != (p.shape[0],) + p.shape[2:]:
        raise ValueError(f"target shape {target.shape} does not match probs "
                         f"{probs.shape}")
    m = t.size
    picked = np.take_along_axis(p, t[:, None], axis=1)[:, 0]
    loss = float(-np.log(picked).sum() / m)
    d = np.zeros_like(p)
    np.put_along_axis(d, t[:, None], (-1.0 / (m * picked))[:, None], axis=1)
    return loss, (d[0] if single else d)


def sgd_momentum_step(net: MiniUnet, grads_w, grads_b, lam_grad=None,
                      tau_lambda: float = 0.1):
    """v <- mu*v + g; theta <- theta - lr*v; lam updated and clamped in the
    same step when its gradient is given."""
    p = net.params
    for i in range(len(p.weights)):
        p.vel_w[i] = p.momentum * p.vel_w[i] + grads_w[i]
        p.vel_b[i] = p.momentum * p.vel_b[i] + grads_b[i]
        p.weights[i] -= p.lr * p.vel_w[i]
        p.biases[i] -= p.lr * p.vel_b[i]
    if lam_grad is not None:
        net.lam = update_lambda(net.lam, lam_grad, tau_lambda)
    net.version += 1


def _dataset_arrays(dataset):
    images, labels = [], []
    for item in dataset:
        if hasattr(item, "image"):
            images.append(item.image)
            labels.append(item.label)
        else:
            img, lab = item
            images.append(img)
            labels.append(lab)
    return np.asarray(images, dtype=np.float64), np.asarray(labels)


def train(net: MiniUnet, dataset, epochs: int, batch_size: int, seed: int,
          tau_lambda: float = 0.1) -> TrainLog:
    """Seeded shuffled mini-batch SGD; aborts on a non-finite loss.

    A regularized network built with lam = 0 keeps lam frozen at 0, so it is
    observationally identical to the plain network through all of training
    (the exact-reduction contract); any positive initial lam trains freely.
    """
    if not len(dataset):
        raise ValueError("empty training dataset")
    images, labels = _dataset_arrays(dataset)
    train_lam = (net.spec.activation == "regularized"
                 and net.spec.reg.lam > 0.0)
    rng = np.random.default_rng(seed)
    log = TrainLog(seed=seed)
    n = len(images)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            _, probs, tape = forward(net, images[idx], train=True)
            loss, d_probs = cross_entropy(probs, labels[idx])
            if not np.isfinite(loss):
                raise RuntimeError(f"non-finite loss {loss!r} at iteration "
                                   f"{log.iterations}")
            grads_w, grads_b, lam_grad = backward(net, tape, d_probs)
            sgd_momentum_step(net, grads_w, grads_b,
                              lam_grad if train_lam else None, tau_lambda)
            log.losses.append(loss)
            log.lambdas.append(net.lam)
            log.iterations += 1
        log.lambda_per_epoch.append(net.lam)
    return log


def predict(net: MiniUnet, image: np.ndarray, test_mode_iterations: int = 100):
    """Class probabilities and argmax label map for one image.  Ties break
    toward the lowest class index."""
    _, probs, _ = forward(net, image, train=False,
                          test_iterations=test_mode_iterations)
    return probs, np.argmax(probs, axis=0)


# ---------------------------------------------------------------------------
# checkpoint file format: magic, version, NetSpec fields and lam in a fixed
# little-endian header, then every kernel and bias as raw float64 in
# declaration order.

def save_checkpoint(net: MiniUnet, path):
    spec = net.spec
    act_flag = 1 if spec.activation == "regularized" else 0
    header = CHECKPOINT_MAGIC + struct.pack(
        "<IIII", CHECKPOINT_VERSION, spec.in_channels, spec.num_classes,
        spec.levels)
    header += struct.pack(f"<{spec.levels}I", *spec.widths)
    header += struct.pack("<IdddI", act_flag, net.lam, spec.reg.kappa,
                          spec.reg.tau, spec.reg.iterations)
    with open(path, "wb") as fh:
        fh.write(header)
        for w, b in zip(net.params.weights, net.params.biases):
            fh.write(w.astype("<f8").tobytes())
            fh.write(b.astype("<f8").tobytes())


def load_checkpoint(path) -> MiniUnet:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"not a checkpoint file: bad magic in {path}")
    off = 8
    version, in_ch, n_cls, levels = struct.unpack_from("<IIII", blob, off)
    off += 16
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    widths = struct.unpack_from(f"<{levels}I", blob, off)
    off += 4 * levels
    act_flag, lam, kappa, tau, iters = struct.unpack_from("<IdddI", blob, off)
    off += struct.calcsize("<IdddI")
    spec = NetSpec(in_channels=in_ch, num_classes=n_cls, widths=tuple(widths),
                   activation="regularized" if act_flag else "plain",
                   reg=RegActConfig(lam=lam, kappa=kappa, tau=tau,
                                    iterations=iters, mode="iterative"))
    net = build(spec, seed=0)
    for i, (cout, cin, k) in enumerate(_conv_shapes(spec)):
        n_w = cout * cin * k * k
        w = np.frombuffer(blob, dtype="<f8", count=n_w, offset=off)
        off += 8 * n_w
        b = np.frombuffer(blob, dtype="<f8", count=cout, offset=off)
        off += 8 * cout
        net.params.weights[i] = w.reshape(cout, cin, k, k).astype(np.float64)
        net.params.biases[i] = b.astype(np.float64)
        net.params.vel_w[i][:] = 0.0
        net.params.vel_b[i][:] = 0.0
    if off != len(blob):
        raise ValueError(f"checkpoint {path} has {len(blob) - off} trailing bytes")
    net.lam = lam
    return net
