"""
Gradient-sign attacks against the edge network.

Variants pick the objective: ``U`` ascends the loss on the (thickened) true
edges, while ``S``, ``A`` and ``I`` descend the loss towards an all-zero,
all-one or inverted edge map. Optimizers are single-step FGSM, momentum
iterative FGSM, and momentum iterative FGSM with random resize-and-pad input
diversity. All intensities are on the 0-255 scale.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from edgestorm import edgenet
from edgestorm import tensor as T
from edgestorm.errors import DegenerateGradient, RejectedInput
from edgestorm.evaluation import thicken

VARIANTS = ("U", "S", "A", "I")
OPTIMIZERS = ("fgsm", "mi", "mdi2")
_OPT_ALIASES = {
    "fgsm": "fgsm",
    "mi": "mi",
    "mi-fgsm": "mi",
    "mdi2": "mdi2",
    "m-di2-fgsm": "mdi2",
    "m-di²-fgsm": "mdi2",
}
THICKEN_RADIUS = 3
DEFAULT_DIVERSITY = 0.5


@dataclass(frozen=True)
class AttackConfig:
    variant: str = "U"
    optimizer: str = "mi"
    epsilon: float = 16.0
    alpha: float = 2.0
    mu: float = 0.5
    iterations: int = 10
    diversity_prob: float = None
    selector: object = "all"
    seed: int = 0

    def __post_init__(self):
        opt = _OPT_ALIASES.get(str(self.optimizer).lower())
        if opt is None:
            raise RejectedInput(f"unknown optimizer {self.optimizer!r}")
        object.__setattr__(self, "optimizer", opt)
        variant = str(self.variant).upper()
        if variant not in VARIANTS:
            raise RejectedInput(f"unknown attack variant {self.variant!r}")
        object.__setattr__(self, "variant", variant)
        if self.diversity_prob is None:
            object.__setattr__(self, "diversity_prob", DEFAULT_DIVERSITY if opt == "mdi2" else 0.0)
        if not 0 <= self.epsilon <= 255:
            raise RejectedInput("epsilon must lie in [0, 255]")
        if not self.alpha > 0:
            raise RejectedInput("alpha must be positive")
        if not 0 <= self.mu <= 1:
            raise RejectedInput("mu must lie in [0, 1]")
        if int(self.iterations) != self.iterations or self.iterations < 1:
            raise RejectedInput("iterations must be a positive integer")
        if not 0 <= self.diversity_prob <= 1:
            raise RejectedInput("diversity_prob must lie in [0, 1]")
        if opt != "mdi2" and self.diversity_prob != 0:
            raise RejectedInput("diversity_prob is only meaningful for the mdi2 optimizer")
        object.__setattr__(self, "selector", edgenet.parse_selector(self.selector))

    @property
    def targeted(self):
        return self.variant != "U"

    @property
    def name(self):
        base = {"fgsm": "FGSM", "mi": "MI-FGSM", "mdi2": "M-DI2-FGSM"}[self.optimizer]
        return base if self.variant == "U" else f"{self.variant}-{base}"

    def with_(self, **changes):
        return replace(self, **changes)

    def as_dict(self):
        return {
            "variant": self.variant,
            "optimizer": self.optimizer,
            "epsilon": self.epsilon,
            "alpha": self.alpha,
            "mu": self.mu,
            "iterations": self.iterations,
            "diversity_prob": self.diversity_prob,
            "selector": self.selector,
            "seed": self.seed,
        }


@dataclass
class AttackResult:
    adversarial: np.ndarray
    perturbation: np.ndarray
    loss_trace: np.ndarray  # (iterations + 1,) per image
    target_used: np.ndarray = None
    stopped_early: np.ndarray = field(default=None)


# -- building blocks -----------------------------------------------------------


def make_target(variant, y_true):
    y = np.asarray(y_true)
    variant = variant.upper()
    if variant == "U":
        return None
    if variant == "S":
        return np.zeros_like(y, dtype=np.uint8)
    if variant == "A":
        return np.ones_like(y, dtype=np.uint8)
    if variant == "I":
        return (1 - (y > 0)).astype(np.uint8)
    raise RejectedInput(f"unknown attack variant {variant!r}")


def clip_pixels(x):
    return np.clip(x, 0.0, 255.0)


def fgsm_step(x, grad, epsilon):
    x = np.asarray(x, dtype=np.float64)
    grad = np.asarray(grad)
    if x.shape != grad.shape:
        raise RejectedInput("image and gradient shapes differ")
    return clip_pixels(x + epsilon * np.sign(grad))


def momentum_update(g_prev, grad, mu):
    """``mu * g_prev + grad / ||grad||_1`` with the L1 norm over every element."""
    grad = np.asarray(grad, dtype=np.float64)
    l1 = np.abs(grad).sum()
    if l1 == 0:
        raise DegenerateGradient("gradient is identically zero")
    return mu * np.asarray(g_prev, dtype=np.float64) + grad / l1


def clip_ball(candidate, original, epsilon):
    """Project onto the L-inf ball around ``original``, then onto [0, 255]."""
    candidate = np.asarray(candidate, dtype=np.float64)
    original = np.asarray(original, dtype=np.float64)
    if candidate.shape != original.shape:
        raise RejectedInput("candidate and original shapes differ")
    lo, hi = original - epsilon, original + epsilon
    # rounding in original +/- epsilon may overshoot the budget by an ulp
    for _ in range(4):
        over = hi - original > epsilon
        under = original - lo > epsilon
        if not (over.any() or under.any()):
            break
        hi = np.where(over, np.nextafter(hi, -np.inf), hi)
        lo = np.where(under, np.nextafter(lo, np.inf), lo)
    return clip_pixels(np.clip(candidate, lo, hi))


def sample_diversity(height, width, prob, rng):
    """Draw a resize-and-pad transform, or None for identity.

    Returns ``(new_h, new_w, top, left)``; sizes are uniform over
    [ceil(extent / 2), extent].
    """
    if prob <= 0 or rng.random() >= prob:
        return None
    nh = int(rng.integers(-(-height // 2), height + 1))
    nw = int(rng.integers(-(-width // 2), width + 1))
    top = int(rng.integers(0, height - nh + 1))
    left = int(rng.integers(0, width - nw + 1))
    return nh, nw, top, left


def _apply_diversity(x, params, height, width):
    """Differentiable resize-and-pad of an NCHW tensor."""
    if params is None:
        return x
    nh, nw, top, left = params
    return T.pad_into(T.resize_bilinear(x, nh, nw), height, width, top, left)


def diversity_transform(x, diversity_prob, rng):
    """Apply one random resize-and-pad draw to an HxWxC image."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[:2]
    params = sample_diversity(h, w, diversity_prob, rng)
    if params is None:
        return x.copy()
    xs, single = edgenet.to_nchw(x)
    return edgenet.from_nchw(_apply_diversity(T.Tensor(xs), params, h, w).data, single)


def permute_perturbation(perturbation, rng):
    """Shuffle spatial positions; every pixel's channel values move together."""
    p = np.asarray(perturbation)
    h, w = p.shape[:2]
    flat = p.reshape(h * w, -1)
    return flat[rng.permutation(h * w)].reshape(p.shape)


def image_rng(seed, index):
    return np.random.default_rng(int(seed) ^ int(index))


# -- the iterative driver ------------------------------------------------------------


def sign_attack(x0, epsilon, config, direction, loss_grad, loss_only=None, transforms=None):
    """Shared momentum sign loop.

    ``loss_grad(adv, n)`` returns per-image losses and input gradients for
    the iterate ``adv`` (N, H, W, C) at iteration ``n``; ``loss_only(adv)``
    returns losses without any input transform. ``direction`` is +1 to
    ascend and -1 to descend. Returns ``(adv, trace, stopped)``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    n_img = len(x0)
    stopped = np.zeros(n_img, dtype=bool)
    if config.optimizer == "fgsm":
        loss0, grad = loss_grad(x0, 0)
        adv = clip_ball(fgsm_step(x0, direction * grad, epsilon), x0, epsilon)
        trace = np.stack([loss0, loss_only(adv)], axis=1)
        return adv, trace, stopped
    g = np.zeros_like(x0)
    adv = x0.copy()
    trace = []
    for n in range(config.iterations):
        loss, grad = loss_grad(adv, n)
        trace.append(loss if transforms is None or transforms[n] is None else loss_only(adv))
        step = np.zeros_like(adv)
        for i in range(n_img):
            if stopped[i]:
                continue
            try:
                g[i] = momentum_update(g[i], grad[i], config.mu)
            except DegenerateGradient:
                stopped[i] = True
                continue
            step[i] = direction * config.alpha * np.sign(g[i])
        adv = clip_ball(adv + step, x0, epsilon)
    trace.append(loss_only(adv))
    return adv, np.stack(trace, axis=1), stopped


def run_attack(model, x, y_true, config, indices=None):
    """Attack one HxWxC image or a batch (N, H, W, C) with matching edge maps."""
    x0 = np.asarray(x, dtype=np.float64)
    single = x0.ndim == 3
    xb = x0[None] if single else x0
    yb = np.asarray(y_true)
    yb = yb[None] if yb.ndim == 2 else yb
    if xb.ndim != 4 or yb.shape != xb.shape[:3]:
        raise RejectedInput(f"edge maps {yb.shape} do not match images {xb.shape}")
    if not np.all((yb == 0) | (yb == 1)):
        raise RejectedInput("y_true must be binary")
    if np.any(xb < 0) or np.any(xb > 255):
        raise RejectedInput("pixel intensities must lie in [0, 255]")
    indices = np.arange(len(xb)) if indices is None else np.atleast_1d(indices)
    if config.variant == "U":
        y, direction = thicken(yb, THICKEN_RADIUS), 1.0
    else:
        y, direction = make_target(config.variant, yb), -1.0
    h, w = xb.shape[1:3]

    def loss_only(adv):
        return np.atleast_1d(edgenet.loss_value(model, adv, y, config.selector))

    rngs = [image_rng(config.seed, i) for i in indices]
    draws = {}

    def loss_grad(adv, n):
        if config.optimizer != "mdi2":
            loss, g = edgenet.loss_and_input_gradient(model, adv, y, config.selector)
            return np.atleast_1d(loss), g
        losses, grads = np.zeros(len(adv)), np.zeros_like(adv)
        any_draw = False
        for i in range(len(adv)):
            params = sample_diversity(h, w, config.diversity_prob, rngs[i])
            any_draw |= params is not None
            xs, _ = edgenet.to_nchw(adv[i])
            leaf = T.Tensor(xs, requires_grad=True)
            side, fuse, _ = model.build(_apply_diversity(leaf, params, h, w))
            loss = edgenet.loss_for_selector((side, fuse), y[i], config.selector)
            (gx,) = T.grad(loss, [leaf])
            losses[i], grads[i] = float(loss.data), edgenet.from_nchw(gx, True)
        draws[n] = True if any_draw else None
        return losses, grads

    if config.epsilon == 0:
        loss0 = loss_only(xb)
        n_trace = 2 if config.optimizer == "fgsm" else config.iterations + 1
        adv, trace, stopped = xb.copy(), np.repeat(loss0[:, None], n_trace, axis=1), np.zeros(len(xb), bool)
    else:
        transforms = draws if config.optimizer == "mdi2" else None
        adv, trace, stopped = sign_attack(xb, config.epsilon, config, direction, loss_grad, loss_only, transforms)
    target = None if config.variant == "U" else y
    if single:
        return AttackResult(adv[0], adv[0] - xb[0], trace[0], None if target is None else target[0], stopped[0])
    return AttackResult(adv, adv - xb, trace, target, stopped)


def run_attack_batched(model, images, edges, config, batch_size=10, offset=0):
    """Run :func:`run_attack` over a dataset in fixed-size chunks.

    Chunking is independent of any worker count, so results do not depend
    on how the work is scheduled.
    """
    images = np.asarray(images)
    parts = []
    for start in range(0, len(images), batch_size):
        idx = np.arange(start, min(start + batch_size, len(images))) + offset
        parts.append(run_attack(model, images[idx - offset], edges[idx - offset], config, indices=idx))
    return AttackResult(
        np.concatenate([p.adversarial for p in parts]),
        np.concatenate([p.perturbation for p in parts]),
        np.concatenate([p.loss_trace for p in parts]),
        None if parts[0].target_used is None else np.concatenate([p.target_used for p in parts]),
        np.concatenate([p.stopped_early for p in parts]),
    )
