"""
Multi-scale edge network with deep supervision.

Five convolutional stages (two 3x3 conv + ReLU each, 2x2 max-pool between
stages). Each stage feeds a 1x1 side projection that is upsampled back to
input resolution and squashed by a sigmoid. The fusion map is
``sigmoid(sum_m h_m * side_m)`` taken over the *post-sigmoid* side maps, and
the final prediction is the plain mean of the five side maps and the fusion.
"""

from dataclasses import dataclass, field

import numpy as np

from edgestorm import checkpoint
from edgestorm import tensor as T
from edgestorm.errors import NonFinite, RejectedInput, TrainingFailure

WIDTHS = (8, 16, 16, 32, 32)
N_SIDE = 5
PROB_EPS = 1e-7
BINARIZE_AT = 0.5
# intensities are mapped to [-0.5, 0.5] before the first convolution
INPUT_CENTER = 127.5
# side logits start near the edge-pixel base rate (sigmoid(-3) ~ 0.05)
SIDE_BIAS_INIT = -3.0


@dataclass
class ModelOutputs:
    """Edge maps; each is (N, H, W) for batched input or (H, W) for a single image."""

    side: list
    fuse: np.ndarray
    final: np.ndarray


@dataclass
class EdgeModel:
    params: dict
    widths: tuple = WIDTHS
    in_channels: int = 3
    side_weights: tuple = (1.0,) * N_SIDE  # alpha_m in the overall loss

    @classmethod
    def init(cls, seed=0, in_channels=3, widths=WIDTHS):
        rng = np.random.default_rng(seed)
        params = {}
        c_in = in_channels
        for s, c in enumerate(widths, start=1):
            for j, fan_in in ((1, c_in), (2, c)):
                params[f"stage{s}.conv{j}.weight"] = rng.normal(0.0, np.sqrt(2.0 / (9 * fan_in)), (c, fan_in, 3, 3))
                params[f"stage{s}.conv{j}.bias"] = np.zeros(c)
            c_in = c
        for m, c in enumerate(widths, start=1):
            params[f"side{m}.weight"] = rng.normal(0.0, np.sqrt(1.0 / c), (1, c, 1, 1))
            params[f"side{m}.bias"] = np.full(1, SIDE_BIAS_INIT)
        params["fuse.weight"] = np.full(N_SIDE, 0.2)
        return cls(params, tuple(widths), in_channels)

    @classmethod
    def zeros(cls, in_channels=3, widths=WIDTHS):
        model = cls.init(0, in_channels, widths)
        for name, value in model.params.items():
            if name != "fuse.weight":
                model.params[name] = np.zeros_like(value)
        return model

    def copy(self):
        return EdgeModel({k: v.copy() for k, v in self.params.items()}, self.widths, self.in_channels, self.side_weights)

    # -- graph construction --------------------------------------------------

    def build(self, x, params=None):
        """Build the forward graph for an NCHW intensity tensor ``x``.

        Returns ``(side_maps, fuse, final)`` as (N, 1, H, W) tensors.
        """
        p = params if params is not None else {k: T.Tensor(v) for k, v in self.params.items()}
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise RejectedInput(f"model expects {self.in_channels} channels, got {c}")
        if h % 16 or w % 16:
            raise RejectedInput(f"image extents {h}x{w} must be divisible by 16")
        a = T.mul(T.add(x, -INPUT_CENTER), 1.0 / 255.0)
        side = []
        for s in range(1, len(self.widths) + 1):
            if s > 1:
                a = T.max_pool(a)
            for j in (1, 2):
                a = T.relu(T.conv2d(a, p[f"stage{s}.conv{j}.weight"], p[f"stage{s}.conv{j}.bias"], pad=1))
            logit = T.conv2d(a, p[f"side{s}.weight"], p[f"side{s}.bias"])
            side.append(T.sigmoid(T.bilinear_upsample(logit, 2 ** (s - 1))))
        stacked = T.concat(side, axis=1)
        fuse = T.sigmoid(T.conv2d(stacked, T.reshape(p["fuse.weight"], (1, N_SIDE, 1, 1))))
        final = T.mean(T.concat(side + [fuse], axis=1), axis=1)
        final = T.reshape(final, (n, 1, h, w))
        return side, fuse, final

    def forward(self, images):
        x, single = to_nchw(images)
        side, fuse, final = self.build(T.Tensor(x))
        return ModelOutputs(
            side=[_squeeze(s.data, single) for s in side],
            fuse=_squeeze(fuse.data, single),
            final=_squeeze(final.data, single),
        )

    def predict(self, images, batch_size=25):
        """Final edge probability maps, evaluated in fixed-size chunks."""
        images = np.asarray(images)
        if images.ndim == 3:
            return self.forward(images).final
        return np.concatenate([self.forward(images[i : i + batch_size]).final for i in range(0, len(images), batch_size)])

    def save(self, path):
        checkpoint.save(path, "edge", self.params, {"widths": list(self.widths), "in_channels": self.in_channels})

    @classmethod
    def load(cls, path):
        kind, params, meta = checkpoint.load(path)
        if kind != "edge":
            raise RejectedInput(f"{path} holds a {kind!r} model, not an edge model")
        return cls(params, tuple(meta["widths"]), meta["in_channels"])


def to_nchw(images):
    """(H, W, C) or (N, H, W, C) array -> (N, C, H, W) float64, plus a single-image flag."""
    a = np.asarray(images, dtype=np.float64)
    single = a.ndim == 3
    if single:
        a = a[None]
    if a.ndim != 4:
        raise RejectedInput(f"expected an HxWxC image or a batch of them, got shape {a.shape}")
    return np.ascontiguousarray(a.transpose(0, 3, 1, 2)), single


def from_nchw(x, single):
    out = np.asarray(x).transpose(0, 2, 3, 1)
    return out[0] if single else out


def _squeeze(a, single):
    a = a[:, 0]
    return a[0] if single else a


def _as_map(y, shape):
    y = np.asarray(y, dtype=np.float64)
    return y.reshape(shape) if y.size == np.prod(shape) else np.broadcast_to(y.reshape((-1, 1) + y.shape[-2:]), shape)


# -- losses -------------------------------------------------------------------


def side_loss(pred, y, per_image=False):
    """Cross-entropy with equal weight on edge and non-edge pixels (each term halved).

    ``pred`` is a probability map (tensor or array, any of (H,W), (N,H,W),
    (N,1,H,W)); ``y`` a binary map broadcastable to it.
    """
    pred = T.as_tensor(pred)
    y = _as_map(y, pred.shape)
    p = T.clip(pred, PROB_EPS, 1.0 - PROB_EPS)
    term = T.mul(y, T.log(p)) + T.mul(1.0 - y, T.log(1.0 - p))
    if per_image and pred.data.ndim >= 3:
        flat = T.reshape(term, (pred.shape[0], -1))
        return T.mul(T.sum(flat, axis=1), -0.5)
    return T.mul(T.sum(term), -0.5)


def total_loss(outputs, y, side_weights=(1.0,) * N_SIDE, per_image=False):
    """Weighted side losses plus the fusion loss."""
    side, fuse = _unpack(outputs)
    loss = side_loss(fuse, y, per_image)
    for a, s in zip(side_weights, side):
        if a:
            loss = loss + T.mul(side_loss(s, y, per_image), a)
    return loss


def parse_selector(selector):
    if selector in (None, "all"):
        return "all"
    if isinstance(selector, str):
        selector = selector.removeprefix("side-").removeprefix("side")
    try:
        m = int(selector)
    except (TypeError, ValueError):
        raise RejectedInput(f"unknown loss selector {selector!r}") from None
    if not 1 <= m <= N_SIDE:
        raise RejectedInput(f"side output index {m} outside 1..{N_SIDE}")
    return m


def loss_for_selector(outputs, y, selector="all", per_image=False):
    sel = parse_selector(selector)
    if sel == "all":
        return total_loss(outputs, y, per_image=per_image)
    side, _ = _unpack(outputs)
    return side_loss(side[sel - 1], y, per_image)


def _unpack(outputs):
    if isinstance(outputs, ModelOutputs):
        return outputs.side, outputs.fuse
    side, fuse = outputs[0], outputs[1]
    return side, fuse


def loss_and_input_gradient(model, images, y, selector="all"):
    """Per-image loss values and the loss gradient w.r.t. pixel intensities.

    Works on a single HxWxC image or a batch; the gradient has the input's
    shape and is expressed per unit of 0-255 intensity.
    """
    xs, single = to_nchw(images)
    x = T.Tensor(xs, requires_grad=True)
    side, fuse, _ = model.build(x)
    losses = loss_for_selector((side, fuse), y, selector, per_image=True)
    (gx,) = T.grad(T.sum(losses), [x])
    per_image = losses.data.copy()
    return (per_image[0] if single else per_image), from_nchw(gx, single)


def input_gradient(model, image, y, selector="all"):
    return loss_and_input_gradient(model, image, y, selector)[1]


def loss_value(model, images, y, selector="all"):
    xs, single = to_nchw(images)
    side, fuse, _ = model.build(T.Tensor(xs))
    losses = loss_for_selector((side, fuse), y, selector, per_image=True).data.copy()
    return losses[0] if single else losses


# -- training -----------------------------------------------------------------


@dataclass
class TrainResult:
    model: EdgeModel
    loss_trace: list = field(default_factory=list)


def train(model, images, edges, epochs=30, lr=1.0, seed=0, batch_size=10, momentum=0.9, log=None):
    """Mini-batch SGD with momentum on the overall loss.

    The optimised objective is the overall loss divided by the number of
    pixels in the batch; the returned trace holds that per-pixel value
    averaged over each epoch.
    """
    images = np.asarray(images)
    edges = np.asarray(edges, dtype=np.float64)
    if len(images) == 0:
        raise RejectedInput("training set is empty")
    if images.shape[1:3] != edges.shape[1:3] or len(images) != len(edges):
        raise RejectedInput("image and edge map extents disagree")
    model = model.copy()
    rng = np.random.default_rng(seed)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    trace = []
    n, h, w = edges.shape
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = np.sort(order[start : start + batch_size])
            xs, _ = to_nchw(images[idx])
            try:
                p = {k: T.Tensor(v, requires_grad=True) for k, v in model.params.items()}
                side, fuse, _ = model.build(T.Tensor(xs), p)
                scale = 1.0 / (len(idx) * h * w)
                loss = T.mul(total_loss((side, fuse), edges[idx][:, None], model.side_weights), scale)
                grads = T.backward(loss)
            except NonFinite:
                raise TrainingFailure(epoch) from None
            for k, t in p.items():
                g = grads.get(t)
                if g is None:
                    continue
                velocity[k] = momentum * velocity[k] - lr * g
                model.params[k] = model.params[k] + velocity[k]
            total += float(loss.data) * len(idx)
        mean_loss = total / n
        if not np.isfinite(mean_loss) or not all(np.all(np.isfinite(v)) for v in model.params.values()):
            raise TrainingFailure(epoch)
        trace.append(mean_loss)
        if log is not None:
            log(epoch, mean_loss)
    return TrainResult(model, trace)


def pseudo_ground_truth(model, images, threshold=BINARIZE_AT):
    """Binarised final prediction, used as a stand-in for annotated edges."""
    return (model.predict(images) >= threshold).astype(np.uint8)
