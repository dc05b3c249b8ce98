"""
Transfer of edge attacks to an independently trained shape classifier.

The classifier never shares parameters with the edge model and is never
queried while crafting edge attacks: :func:`transfer_experiment` hands only
the edge model to the attack routine.
"""

from dataclasses import dataclass, field

import numpy as np

from edgestorm import attacks, checkpoint, edgenet, evaluation
from edgestorm import tensor as T
from edgestorm.errors import NonFinite, RejectedInput, TrainingFailure
from edgestorm.synth import CLASSES

CLS_WIDTHS = (32, 64, 64)
# contrast floor (intensity units) of the per-image standardisation
STD_FLOOR = 8.0


@dataclass
class Classifier:
    params: dict
    n_classes: int = len(CLASSES)
    widths: tuple = CLS_WIDTHS
    in_channels: int = 3

    @classmethod
    def init(cls, seed=0, n_classes=len(CLASSES), widths=CLS_WIDTHS, in_channels=3):
        rng = np.random.default_rng(seed)
        params = {}
        c_in = in_channels
        for s, c in enumerate(widths, start=1):
            params[f"conv{s}.weight"] = rng.normal(0.0, np.sqrt(2.0 / (9 * c_in)), (c, c_in, 3, 3))
            params[f"conv{s}.bias"] = np.zeros(c)
            c_in = c
        params["fc.weight"] = rng.normal(0.0, np.sqrt(1.0 / c_in), (c_in, n_classes))
        params["fc.bias"] = np.zeros(n_classes)
        return cls(params, n_classes, tuple(widths), in_channels)

    def copy(self):
        return Classifier({k: v.copy() for k, v in self.params.items()}, self.n_classes, self.widths, self.in_channels)

    def build(self, x, params=None):
        """Logits (N, K) for an NCHW intensity tensor."""
        p = params if params is not None else {k: T.Tensor(v) for k, v in self.params.items()}
        if x.shape[1] != self.in_channels:
            raise RejectedInput(f"classifier expects {self.in_channels} channels, got {x.shape[1]}")
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise RejectedInput(f"classifier needs even extents, got {x.shape[2]}x{x.shape[3]}")
        # the first stage runs at full resolution and pools twice, so the later
        # 3x3 stages still see whole shapes
        a = T.standardize(x, STD_FLOOR)
        for s in range(1, len(self.widths) + 1):
            a = T.max_pool(T.relu(T.conv2d(a, p[f"conv{s}.weight"], p[f"conv{s}.bias"], pad=1)))
            if s == 1:
                a = T.max_pool(a)
        return T.add(T.matmul(T.global_avg_pool(a), p["fc.weight"]), p["fc.bias"])

    def probabilities(self, images, batch_size=50):
        images = np.asarray(images, dtype=np.float64)
        single = images.ndim == 3
        images = images[None] if single else images
        out = []
        for i in range(0, len(images), batch_size):
            xs, _ = edgenet.to_nchw(images[i : i + batch_size])
            out.append(T.softmax(self.build(T.Tensor(xs)).data))
        probs = np.concatenate(out)
        return probs[0] if single else probs

    def predict(self, images):
        return np.argmax(self.probabilities(images), axis=-1)

    def save(self, path):
        checkpoint.save(
            path,
            "cls",
            self.params,
            {"n_classes": self.n_classes, "widths": list(self.widths), "in_channels": self.in_channels},
        )

    @classmethod
    def load(cls, path):
        kind, params, meta = checkpoint.load(path)
        if kind != "cls":
            raise RejectedInput(f"{path} holds a {kind!r} model, not a classifier")
        return cls(params, meta["n_classes"], tuple(meta["widths"]), meta["in_channels"])


def classifier_loss_and_gradient(model, images, labels):
    """Per-image cross-entropy and its gradient w.r.t. pixel intensities."""
    xs, single = edgenet.to_nchw(images)
    x = T.Tensor(xs, requires_grad=True)
    logits = model.build(x)
    labels = np.atleast_1d(labels)
    loss = T.softmax_cross_entropy(logits, labels)
    (gx,) = T.grad(loss, [x])
    p = T.softmax(logits.data)
    per_image = -np.log(np.maximum(p[np.arange(len(labels)), labels], 1e-300))
    return per_image, edgenet.from_nchw(gx, single)


@dataclass
class ClassifierTrainResult:
    model: Classifier
    loss_trace: list = field(default_factory=list)
    accuracy_trace: list = field(default_factory=list)


def augment(images, rng):
    """Random flips and quarter turns; every shape class is closed under both."""
    out = []
    for im in images:
        if rng.random() < 0.5:
            im = im[:, ::-1]
        out.append(np.rot90(im, int(rng.integers(4))))
    return np.stack(out)


def train_classifier(
    model, images, labels, epochs=80, lr=0.003, seed=0, batch_size=10, betas=(0.9, 0.999), augmented=True, log=None
):
    """Mini-batch Adam on mean softmax cross-entropy with a cosine learning-rate decay."""
    images = np.asarray(images)
    labels = np.asarray(labels, dtype=int)
    if len(images) == 0 or len(images) != len(labels):
        raise RejectedInput("need a non-empty, labelled training set")
    if labels.min() < 0 or labels.max() >= model.n_classes:
        raise RejectedInput("labels fall outside the classifier's classes")
    model = model.copy()
    rng = np.random.default_rng(seed)
    b1, b2 = betas
    m1 = {k: np.zeros_like(v) for k, v in model.params.items()}
    m2 = {k: np.zeros_like(v) for k, v in model.params.items()}
    total_steps = epochs * -(-len(images) // batch_size)
    step = 0
    losses, accs = [], []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(images))
        total, correct = 0.0, 0
        for start in range(0, len(images), batch_size):
            idx = np.sort(order[start : start + batch_size])
            batch = augment(images[idx], rng) if augmented else images[idx]
            p = {k: T.Tensor(v, requires_grad=True) for k, v in model.params.items()}
            xs, _ = edgenet.to_nchw(batch)
            try:
                logits = model.build(T.Tensor(xs), p)
                loss = T.mul(T.softmax_cross_entropy(logits, labels[idx]), 1.0 / len(idx))
                grads = T.backward(loss)
            except NonFinite:
                raise TrainingFailure(epoch) from None
            step += 1
            rate = lr * 0.5 * (1 + np.cos(np.pi * (step - 1) / total_steps))
            for k, t in p.items():
                g = grads[t]
                m1[k] = b1 * m1[k] + (1 - b1) * g
                m2[k] = b2 * m2[k] + (1 - b2) * g * g
                update = (m1[k] / (1 - b1**step)) / (np.sqrt(m2[k] / (1 - b2**step)) + 1e-8)
                model.params[k] = model.params[k] - rate * update
            total += float(loss.data) * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == labels[idx]))
        losses.append(total / len(images))
        accs.append(correct / len(images))
        if not all(np.all(np.isfinite(v)) for v in model.params.values()) or not np.isfinite(losses[-1]):
            raise TrainingFailure(epoch)
        if log is not None:
            log(epoch, losses[-1], accs[-1])
    return ClassifierTrainResult(model, losses, accs)


# -- experiments ------------------------------------------------------------------


@dataclass
class TransferReport:
    variant: str
    epsilon: float
    n_images: int
    clean: float
    attacked: float
    permuted: float
    correct_clean: np.ndarray = field(repr=False, default=None)
    correct_attacked: np.ndarray = field(repr=False, default=None)
    correct_permuted: np.ndarray = field(repr=False, default=None)
    per_variant: dict = field(default_factory=dict)
    attack: dict = field(default_factory=dict)

    def as_dict(self):
        out = {
            "variant": self.variant,
            "epsilon": self.epsilon,
            "n_images": self.n_images,
            "clean": round(self.clean, 4),
            "attacked": round(self.attacked, 4),
            "permuted": round(self.permuted, 4),
        }
        if self.per_variant:
            out["per_variant"] = {k: v.as_dict() for k, v in self.per_variant.items()}
        return out


def permutation_rng(seed, index):
    return np.random.default_rng([int(seed), int(index), 1])


def transfer_experiment(edge_model, classifier, images, labels, config, batch_size=10, adversarial=None):
    """Classifier accuracy on clean, edge-attacked and permuted-perturbation images."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if len(images) != len(labels):
        raise RejectedInput("images and labels are not aligned")
    if labels.max() >= classifier.n_classes:
        raise RejectedInput(
            f"dataset has class index {labels.max()} but the classifier knows {classifier.n_classes} classes"
        )
    if adversarial is None:
        adversarial = craft_edge_attacks(edge_model, images, config, batch_size)
    perturbation = adversarial - images
    permuted = np.stack(
        [
            attacks.clip_pixels(images[i] + attacks.permute_perturbation(perturbation[i], permutation_rng(config.seed, i)))
            for i in range(len(images))
        ]
    )
    c = classifier.predict(images) == labels
    a = classifier.predict(adversarial) == labels
    p = classifier.predict(permuted) == labels
    return TransferReport(
        config.variant,
        float(config.epsilon),
        len(images),
        float(c.mean()),
        float(a.mean()),
        float(p.mean()),
        c,
        a,
        p,
        attack=config.as_dict(),
    )


def craft_edge_attacks(edge_model, images, config, batch_size=10, offset=0):
    """Attack only the edge model; pseudo ground truth stands in for annotations.

    ``offset`` is the dataset index of ``images[0]`` (per-image randomness is keyed on it).
    """
    if config.variant in ("U", "I"):
        y = edgenet.pseudo_ground_truth(edge_model, images)
    else:
        y = np.zeros(np.shape(images)[:3], dtype=np.uint8)
    return attacks.run_attack_batched(edge_model, images, y, config, batch_size, offset).adversarial


def transfer_sweep(edge_model, classifier, images, labels, configs, batch_size=10):
    reports = {cfg.name: transfer_experiment(edge_model, classifier, images, labels, cfg, batch_size) for cfg in configs}
    first = next(iter(reports.values()))
    first.per_variant = dict(reports)
    return first


def attack_classifier(classifier, images, config, batch_size=10):
    """Untargeted momentum sign attack on the classifier's own clean predictions."""
    images = np.asarray(images, dtype=np.float64)
    labels = classifier.predict(images)
    out = []
    for start in range(0, len(images), batch_size):
        xb, yb = images[start : start + batch_size], labels[start : start + batch_size]
        if config.epsilon == 0:
            out.append(xb.copy())
            continue
        adv, _, _ = attacks.sign_attack(
            xb,
            config.epsilon,
            config,
            1.0,
            lambda adv, n, yb=yb: classifier_loss_and_gradient(classifier, adv, yb),
            lambda adv, yb=yb: classifier_loss_and_gradient(classifier, adv, yb)[0],
        )
        out.append(adv)
    return np.concatenate(out), labels


@dataclass
class ReverseReport:
    epsilon: float
    n_images: int
    f_clean: float
    f_attacked: float
    threshold_clean: float
    threshold_attacked: float

    @property
    def delta(self):
        return self.f_clean - self.f_attacked

    def as_dict(self):
        return {
            "epsilon": self.epsilon,
            "n_images": self.n_images,
            "f_clean": round(self.f_clean, 4),
            "f_attacked": round(self.f_attacked, 4),
            "delta": round(self.delta, 4),
        }


def reverse_transfer_check(classifier, edge_model, images, edges, config, batch_size=10):
    """Attack the classifier, then measure the edge model's ODS on the result."""
    adv, _ = attack_classifier(classifier, images, config.with_(variant="U", optimizer="mi", diversity_prob=0.0), batch_size)
    clean = evaluation.evaluate(edge_model.predict(images), edges).ods()
    attacked = evaluation.evaluate(edge_model.predict(adv), edges).ods()
    return ReverseReport(float(config.epsilon), len(images), clean.f, attacked.f, clean.threshold, attacked.threshold)
