"""Convolutional autoencoder with tied-weight transposed-convolution decoder.

Everything here is plain numpy: strided "same"-padded convolutions, their
exact adjoints, hand-written backpropagation and a minibatch SGD trainer.
Tensors are channels-last; batched tensors are (N, H, W, C) and filters are
(filter, filter, in_channels, out_channels).
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from seaterra.errors import ConfigError, DataError, DivergedTrainingError

# ---------------------------------------------------------------------------
# Architecture
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ArchSpec:
    input: tuple = (400, 400, 3)
    layers: tuple = ((10, 2, 3), (10, 2, 3), (3, 2, 5), (3, 2, 5))
    weight_decay: float = 1e-4
    learning_rate: float = 1e-3
    batch_size: int = 8
    epochs: int = 400
    seed: int = 0

    def __post_init__(self):
        inp = tuple(int(v) for v in self.input)
        layers = tuple(tuple(int(v) for v in layer) for layer in self.layers)
        if len(inp) != 3 or min(inp) <= 0:
            raise ConfigError(f"input must be (height, width, channels) > 0, got {self.input}")
        if not layers:
            raise ConfigError("architecture needs at least one layer")
        for layer in layers:
            if len(layer) != 3 or min(layer) <= 0:
                raise ConfigError(f"layer must be (filter, stride, out_channels) > 0, got {layer}")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be >= 0")
        if self.learning_rate < 0:
            raise ConfigError("learning rate must be >= 0")
        if self.batch_size <= 0 or self.epochs <= 0:
            raise ConfigError("batch size and epochs must be positive")
        object.__setattr__(self, "input", inp)
        object.__setattr__(self, "layers", layers)

    @classmethod
    def full_scale(cls, **overrides):
        return replace(cls(), **overrides)

    @classmethod
    def test_scale(cls, **overrides):
        base = cls(input=(64, 64, 3), layers=((5, 2, 3), (5, 2, 3), (3, 2, 5), (3, 2, 5)))
        return replace(base, **overrides)

    def shapes(self):
        """Activation shapes from the input through every encoder layer."""
        h, w, c = self.input
        out = [(h, w, c)]
        for _, stride, ch in self.layers:
            h, w, c = -(-h // stride), -(-w // stride), ch
            out.append((h, w, c))
        return out

    @property
    def latent_shape(self):
        return self.shapes()[-1]


# ---------------------------------------------------------------------------
# Convolution primitives
# ---------------------------------------------------------------------------


def _same_padding(n_in, filt, stride):
    n_out = -(-n_in // stride)
    total = max((n_out - 1) * stride + filt - n_in, 0)
    return n_out, total // 2, total - total // 2


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise DataError(f"expected a (H, W, C) or (N, H, W, C) tensor, got shape {x.shape}")
    return x, False


def conv_linear(x, filters, stride):
    """Pre-activation strided convolution with "same" zero padding (batched)."""
    n, h, w, c = x.shape
    f, _, cin, cout = filters.shape
    if c != cin:
        raise DataError(f"input has {c} channels, filters expect {cin}")
    ho, pt, pb = _same_padding(h, f, stride)
    wo, pl, pr = _same_padding(w, f, stride)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    y = np.zeros((n, ho, wo, cout))
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for a in range(f):
        for b in range(f):
            y += xp[:, a : a + hs : stride, b : b + ws : stride, :] @ filters[a, b]
    return y


def conv_transpose_linear(y, filters, stride, out_hw):
    """Exact adjoint of :func:`conv_linear` mapping back to spatial size ``out_hw``."""
    n, ho, wo, cout = y.shape
    f, _, cin, fout = filters.shape
    if cout != fout:
        raise DataError(f"latent has {cout} channels, filters produce {fout}")
    h, w = out_hw
    eh, pt, pb = _same_padding(h, f, stride)
    ew, pl, pr = _same_padding(w, f, stride)
    if (eh, ew) != (ho, wo):
        raise DataError(f"latent spatial size {(ho, wo)} does not mirror output size {(h, w)}")
    xp = np.zeros((n, h + pt + pb, w + pl + pr, cin))
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for a in range(f):
        for b in range(f):
            xp[:, a : a + hs : stride, b : b + ws : stride, :] += y @ filters[a, b].T
    return xp[:, pt : pt + h, pl : pl + w, :]


def conv_filter_grad(x, dy, filter_size, stride):
    """Gradient of ``<conv_linear(x, W), dy>`` with respect to ``W``."""
    n, h, w, c = x.shape
    _, ho, wo, cout = dy.shape
    f = filter_size
    _, pt, pb = _same_padding(h, f, stride)
    _, pl, pr = _same_padding(w, f, stride)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    dy2 = dy.reshape(-1, cout)
    grad = np.empty((f, f, c, cout))
    for a in range(f):
        for b in range(f):
            grad[a, b] = xp[:, a : a + hs : stride, b : b + ws : stride, :].reshape(-1, c).T @ dy2
    return grad


def relu(x):
    return np.maximum(x, 0.0)


def conv_forward(x, filters, biases, stride):
    """ReLU(conv(x) + b). Accepts a single (H, W, C) tensor or a batch."""
    xb, single = _as_batch(x)
    out = relu(conv_linear(xb, np.asarray(filters, dtype=np.float64), stride) + biases)
    return out[0] if single else out


def deconv_forward(latent, filters, biases, stride, out_hw=None, activation=True):
    """Tied-weight transposed convolution; ReLU unless ``activation`` is False.

    ``out_hw`` is the spatial size of the mirrored encoder layer's input. It
    defaults to ``latent`` size times ``stride``.
    """
    yb, single = _as_batch(latent)
    if out_hw is None:
        out_hw = (yb.shape[1] * stride, yb.shape[2] * stride)
    out = conv_transpose_linear(yb, np.asarray(filters, dtype=np.float64), stride, out_hw) + biases
    if activation:
        out = relu(out)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


@dataclass
class CaeNetwork:
    arch: ArchSpec
    weights: list
    enc_biases: list
    dec_biases: list

    @classmethod
    def initialize(cls, arch, seed=None):
        """Glorot-uniform filters, zero biases."""
        rng = np.random.default_rng(arch.seed if seed is None else seed)
        weights, enc_b, dec_b = [], [], []
        cin = arch.input[2]
        for f, _, cout in arch.layers:
            limit = math.sqrt(6.0 / (f * f * cin + f * f * cout))
            weights.append(rng.uniform(-limit, limit, size=(f, f, cin, cout)))
            enc_b.append(np.zeros(cout))
            dec_b.append(np.zeros(cin))
            cin = cout
        return cls(arch, weights, enc_b, dec_b)

    @classmethod
    def zeros(cls, arch):
        net = cls.initialize(arch)
        for p in net.parameters():
            p[...] = 0.0
        return net

    def parameters(self):
        """Trainable tensors in declaration order: W_l, b_l per layer, then decoder biases."""
        out = []
        for w, b in zip(self.weights, self.enc_biases):
            out.extend((w, b))
        out.extend(self.dec_biases)
        return out

    def parameter_names(self):
        names = []
        for i in range(len(self.weights)):
            names.extend((f"W{i}", f"b{i}"))
        names.extend(f"b'{i}" for i in range(len(self.dec_biases)))
        return names

    def copy(self):
        return CaeNetwork(
            self.arch,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.enc_biases],
            [b.copy() for b in self.dec_biases],
        )

    # -- passes -------------------------------------------------------------

    def _check_input(self, x):
        xb, single = _as_batch(x)
        if xb.shape[1:] != self.arch.input:
            raise DataError(f"input shape {xb.shape[1:]} does not match architecture input {self.arch.input}")
        return xb, single

    def _encode(self, xb):
        acts, pres = [xb], []
        for (f, s, _), w, b in zip(self.arch.layers, self.weights, self.enc_biases):
            pre = conv_linear(acts[-1], w, s) + b
            pres.append(pre)
            acts.append(relu(pre))
        return acts, pres

    def _decode(self, latent):
        shapes = self.arch.shapes()
        outs, pres = [latent], []
        for l in reversed(range(len(self.weights))):
            s = self.arch.layers[l][1]
            pre = conv_transpose_linear(outs[-1], self.weights[l], s, shapes[l][:2]) + self.dec_biases[l]
            pres.append(pre)
            outs.append(pre if l == 0 else relu(pre))
        return outs, pres

    def encode(self, x):
        xb, single = self._check_input(x)
        lca = self._encode(xb)[0][-1]
        return lca[0] if single else lca

    def forward(self, x):
        """Return ``(lca, reconstruction)`` for one image or a batch."""
        xb, single = self._check_input(x)
        acts, _ = self._encode(xb)
        outs, _ = self._decode(acts[-1])
        lca, recon = acts[-1], outs[-1]
        return (lca[0], recon[0]) if single else (lca, recon)

    def decay_term(self):
        return self.arch.weight_decay * sum(float(np.sum(w * w)) for w in self.weights)

    def loss(self, batch):
        xb = _batch_of(batch, self)
        _, recon = self.forward(xb)
        return float(np.mean((recon - xb) ** 2)) + self.decay_term()

    def gradients(self, batch, return_loss=False):
        """Analytic gradient of :meth:`loss`, ordered like :meth:`parameters`.

        Each filter's gradient sums its encoder use, its transposed decoder
        use and the weight-decay term.
        """
        xb = _batch_of(batch, self)
        arch = self.arch
        n_layers = len(self.weights)
        acts, enc_pres = self._encode(xb)
        outs, dec_pres = self._decode(acts[-1])
        recon = outs[-1]
        diff = recon - xb
        loss = float(np.mean(diff**2)) + self.decay_term()

        g_w = [2.0 * arch.weight_decay * w for w in self.weights]
        g_b = [None] * n_layers
        g_db = [None] * n_layers

        grad = 2.0 * diff / diff.size
        # decoder, from the output layer back up to the latent
        for step, l in enumerate(range(n_layers)):
            pre = dec_pres[n_layers - 1 - step]
            if l != 0:
                grad = grad * (pre > 0)
            s = arch.layers[l][1]
            f = arch.layers[l][0]
            g_db[l] = grad.sum(axis=(0, 1, 2))
            latent_in = outs[n_layers - 1 - step]
            # decoder output = conv^T_W(latent_in): d/dW <grad, conv^T(latent_in)> = d/dW <conv_W(grad), latent_in>
            g_w[l] += conv_filter_grad(grad, latent_in, f, s)
            grad = conv_linear(grad, self.weights[l], s)
        # encoder, from the latent back down to the input
        for l in reversed(range(n_layers)):
            f, s, _ = arch.layers[l]
            grad = grad * (enc_pres[l] > 0)
            g_b[l] = grad.sum(axis=(0, 1, 2))
            g_w[l] += conv_filter_grad(acts[l], grad, f, s)
            if l:
                grad = conv_transpose_linear(grad, self.weights[l], s, arch.shapes()[l][:2])

        grads = []
        for w, b in zip(g_w, g_b):
            grads.extend((w, b))
        grads.extend(g_db)
        return (grads, loss) if return_loss else grads


def _batch_of(batch, net):
    if isinstance(batch, np.ndarray):
        xb = batch if batch.ndim == 4 else batch[None]
    else:
        items = [getattr(f, "pixels", f) for f in batch]
        if not items:
            raise DataError("loss needs a non-empty batch")
        xb = np.stack([np.asarray(p, dtype=np.float64) for p in items])
    if xb.shape[0] == 0:
        raise DataError("loss needs a non-empty batch")
    xb = np.asarray(xb, dtype=np.float64)
    if xb.shape[1:] != net.arch.input:
        raise DataError(f"batch shape {xb.shape[1:]} does not match architecture input {net.arch.input}")
    return xb


def forward(net, frame):
    return net.forward(getattr(frame, "pixels", frame))


def loss(net, batch):
    return net.loss(batch)


def gradients(net, batch):
    return net.gradients(batch)


# ---------------------------------------------------------------------------
# Training and inference
# ---------------------------------------------------------------------------


def train(net, frames, epochs=None, learning_rate=None, batch_size=None, seed=None, log=None):
    """Plain minibatch SGD, updating ``net`` in place.

    Returns ``(net, history)`` where ``history[e]`` is the mean loss over the
    minibatches of epoch ``e`` (each evaluated before its update).
    """
    arch = net.arch
    epochs = arch.epochs if epochs is None else int(epochs)
    lr = arch.learning_rate if learning_rate is None else float(learning_rate)
    bs = arch.batch_size if batch_size is None else int(batch_size)
    data = _batch_of(list(frames), net)
    rng = np.random.default_rng(arch.seed if seed is None else seed)
    n = data.shape[0]
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            grads, batch_loss = net.gradients(data[idx], return_loss=True)
            if not math.isfinite(batch_loss):
                raise DivergedTrainingError(epoch, batch_loss)
            total += batch_loss * len(idx)
            if lr:
                for p, g in zip(net.parameters(), grads):
                    p -= lr * g
        mean_loss = total / n
        if not math.isfinite(mean_loss):
            raise DivergedTrainingError(epoch, mean_loss)
        history.append(mean_loss)
        if log is not None:
            log(epoch, mean_loss)
    return net, history


def extract_lca(net, frame):
    """Encoder-only pass: the (h, w, channels) latent channel activations."""
    return net.encode(getattr(frame, "pixels", frame))


def reconstruction_error(net, frame):
    x = np.asarray(getattr(frame, "pixels", frame), dtype=np.float64)
    _, recon = net.forward(x)
    return float(np.mean((recon - x) ** 2))


@dataclass(frozen=True)
class DominanceMap:
    argmax_channel: np.ndarray
    magnitudes: np.ndarray
    normalized: np.ndarray = field(repr=False)


def channel_dominance(lca):
    """Per-pixel winning channel, win counts per channel and min-max scaled channels."""
    lca = np.asarray(lca, dtype=np.float64)
    winner = np.argmax(lca, axis=2)  # first maximum wins ties
    counts = np.bincount(winner.ravel(), minlength=lca.shape[2])
    lo = lca.min(axis=(0, 1), keepdims=True)
    span = lca.max(axis=(0, 1), keepdims=True) - lo
    safe = np.where(span > 0, span, 1.0)
    normalized = np.where(span > 0, (lca - lo) / safe, 0.0)
    return DominanceMap(argmax_channel=winner, magnitudes=counts, normalized=normalized)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

_MAGIC = b"CAE1"
_VERSION = 1


def save_network(net, path):
    arch = net.arch
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<3I", *arch.input))
        fh.write(struct.pack("<I", len(arch.layers)))
        for layer in arch.layers:
            fh.write(struct.pack("<3I", *layer))
        fh.write(struct.pack("<2d", arch.weight_decay, arch.learning_rate))
        fh.write(struct.pack("<2I", arch.batch_size, arch.epochs))
        fh.write(struct.pack("<q", arch.seed))
        for p in net.parameters():
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_network(path):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"{path}: cannot read model ({exc})") from exc
    if blob[:4] != _MAGIC:
        raise DataError(f"{path}: not a CAE1 model file")
    try:
        off = 4
        (version,) = struct.unpack_from("<I", blob, off)
        off += 4
        if version != _VERSION:
            raise DataError(f"{path}: unsupported model version {version}")
        inp = struct.unpack_from("<3I", blob, off)
        off += 12
        (n_layers,) = struct.unpack_from("<I", blob, off)
        off += 4
        layers = []
        for _ in range(n_layers):
            layers.append(struct.unpack_from("<3I", blob, off))
            off += 12
        wd, lr = struct.unpack_from("<2d", blob, off)
        off += 16
        bs, epochs = struct.unpack_from("<2I", blob, off)
        off += 8
        (seed,) = struct.unpack_from("<q", blob, off)
        off += 8
        arch = ArchSpec(input=inp, layers=tuple(layers), weight_decay=wd, learning_rate=lr,
                        batch_size=bs, epochs=epochs, seed=seed)
        net = CaeNetwork.zeros(arch)
        for p in net.parameters():
            count = p.size
            vals = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
            p[...] = vals.reshape(p.shape)
            off += 4 * count
    except (struct.error, ValueError, ConfigError) as exc:
        raise DataError(f"{path}: truncated or corrupt model file ({exc})") from exc
    if off != len(blob):
        raise DataError(f"{path}: {len(blob) - off} trailing bytes in model file")
    return net


def save_loss_history(history, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "loss"])
        for epoch, value in enumerate(history):
            writer.writerow([epoch, repr(float(value))])
