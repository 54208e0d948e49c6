"""Synthetic task demonstrating that the block carries cross-RoI information.

Each scene holds N RoIs. A RoI's label is 1 exactly when some other RoI in
the same scene has the same hidden class. The class is readable from the
RoI's own channels (one-hot plus noise), but whether a *duplicate* exists
is not: a per-RoI classifier cannot beat the base rate, while a model that
attends across RoIs can.

Channel layout of a scene's features (N, channels, height, width):
  [0, classes)   one-hot of the hidden class, plus Gaussian noise
  classes        the nonce: a per-RoI identifier, noise-free
  the rest       pure Gaussian noise

The nonce matters because attention puts mass on the RoI itself (it always
matches its own class). Mixing nonces across attention reveals whether the
attended set is {self} or {self, duplicate}: the mixed value drifts away
from the RoI's own nonce exactly when a duplicate exists.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .autodiff import backward, forward_traced
from .block import PARAM_NAMES, NlRoiParams, init_params
from .ops import global_avg_pool
from .validation import check_rank, owned_copy

HEAD_NAMES = ("head_w1", "head_b1", "head_w2", "head_b2")


@dataclass(frozen=True)
class TrainConfig:
    """Task and optimizer settings; defaults are the reference setup."""

    scenes_per_epoch: int = 300
    epochs: int = 200
    rois: int = 6
    classes: int = 8
    channels: int = 12
    embed_channels: int = 6
    nl_channels: int = 6
    height: int = 3
    width: int = 3
    noise: float = 0.1
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0001
    seed: int = 0

    def __post_init__(self):
        positive = (
            "scenes_per_epoch", "epochs", "rois", "classes", "channels",
            "embed_channels", "nl_channels", "height", "width",
        )
        for name in positive:
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.rois < 2:
            raise ValueError(f"rois must be >= 2, got {self.rois}")
        if self.classes < 2:
            raise ValueError(f"classes must be >= 2, got {self.classes}")
        if self.channels < self.classes + 1:
            raise ValueError(
                f"channels must be >= classes + 1 to fit the one-hot and the "
                f"nonce, got channels={self.channels} classes={self.classes}"
            )
        for name, low, high in (
            ("noise", 0.0, math.inf),
            ("learning_rate", 0.0, math.inf),
            ("momentum", 0.0, 1.0),
            ("weight_decay", 0.0, math.inf),
        ):
            v = getattr(self, name)
            if not (math.isfinite(v) and low <= v < high):
                raise ValueError(f"{name} must be in [{low}, {high}), got {v!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ValueError(f"seed must be a nonnegative integer, got {self.seed!r}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.channels, self.embed_channels, self.nl_channels)


@dataclass(frozen=True)
class Scene:
    """One generated scene; latent fields are kept for diagnostics only."""

    features: np.ndarray
    labels: np.ndarray
    latent_classes: np.ndarray
    nonces: np.ndarray


@dataclass(frozen=True)
class Head:
    """Per-RoI two-layer classifier: relu(x @ w1.T + b1) @ w2 + b2."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        for name in ("w1", "b1", "w2", "b2"):
            object.__setattr__(self, name, owned_copy(getattr(self, name), name=name))
        check_rank(self.w1, 2, "w1")
        hidden = self.w1.shape[0]
        if self.b1.shape != (hidden,) or self.w2.shape != (hidden,):
            raise ValueError(
                f"b1 {self.b1.shape} and w2 {self.w2.shape} must both be ({hidden},)"
            )
        if self.b2.shape != (1,):
            raise ValueError(f"b2 must have shape (1,), got {self.b2.shape}")

    @property
    def in_width(self) -> int:
        return self.w1.shape[1]

    def to_dict(self) -> dict[str, np.ndarray]:
        return {
            "head_w1": self.w1, "head_b1": self.b1,
            "head_w2": self.w2, "head_b2": self.b2,
        }

    @classmethod
    def from_dict(cls, d) -> "Head":
        return cls(w1=d["head_w1"], b1=d["head_b1"], w2=d["head_w2"], b2=d["head_b2"])


def init_head(width: int, seed: int, hidden: int | None = None, dtype=np.float64) -> Head:
    """Seeded head: uniform(+-1/sqrt(fan_in)) weights, zero biases."""
    if hidden is None:
        hidden = 2 * width
    rng = np.random.default_rng(seed)
    return Head(
        w1=rng.uniform(-1, 1, size=(hidden, width)).astype(dtype) / math.sqrt(width),
        b1=np.zeros(hidden, dtype=dtype),
        w2=rng.uniform(-1, 1, size=hidden).astype(dtype) / math.sqrt(hidden),
        b2=np.zeros(1, dtype=dtype),
    )


def analytic_positive_rate(classes: int, rois: int) -> float:
    """P(some other RoI shares my class) with uniform independent classes."""
    return 1.0 - (1.0 - 1.0 / classes) ** (rois - 1)


def constant_prediction_rate(config: TrainConfig) -> float:
    """Accuracy of the best constant guess (the base rate)."""
    p = analytic_positive_rate(config.classes, config.rois)
    return max(p, 1.0 - p)


def gen_scene(config: TrainConfig, seed: int, classes=None) -> Scene:
    """Deterministic scene for (config.seed, seed).

    ``classes`` overrides the class draw (testing hook); labels always
    follow the duplicate rule. Nonces are uniform(-1, 1), pairwise
    distinct, and noise-free in the feature blob.
    """
    n, c_cls, d = config.rois, config.classes, config.channels
    if n < 2 or c_cls < 2:
        raise ValueError(f"need rois >= 2 and classes >= 2, got {n}, {c_cls}")
    rng = np.random.default_rng((config.seed, seed))
    if classes is None:
        latent = rng.integers(0, c_cls, size=n)
    else:
        latent = np.asarray(classes, dtype=np.int64)
        if latent.shape != (n,) or latent.min() < 0 or latent.max() >= c_cls:
            raise ValueError(f"classes override must be {n} values in [0, {c_cls})")
    nonces = rng.uniform(-1.0, 1.0, size=n)
    while np.unique(nonces).size < n:  # pragma: no cover - measure-zero redraw
        nonces = rng.uniform(-1.0, 1.0, size=n)
    labels = np.zeros(n, dtype=np.float64)
    for i in range(n):
        labels[i] = 1.0 if np.any(np.delete(latent, i) == latent[i]) else 0.0
    h, w = config.height, config.width
    feats = np.zeros((n, d, h, w), dtype=np.float64)
    onehot = np.zeros((n, c_cls), dtype=np.float64)
    onehot[np.arange(n), latent] = 1.0
    feats[:, :c_cls] = onehot[:, :, None, None] + config.noise * rng.standard_normal(
        (n, c_cls, h, w)
    )
    feats[:, c_cls] = nonces[:, None, None]
    rest = d - c_cls - 1
    if rest:
        feats[:, c_cls + 1 :] = config.noise * rng.standard_normal((n, rest, h, w))
    return Scene(features=feats, labels=labels, latent_classes=latent, nonces=nonces)


def _head_forward(pooled: np.ndarray, head: Head) -> dict:
    if pooled.shape[1] != head.in_width:
        raise ValueError(
            f"head expects width {head.in_width} but pooled features have "
            f"width {pooled.shape[1]}"
        )
    pre = np.einsum("nk,hk->nh", pooled, head.w1) + head.b1
    hid = np.maximum(pre, 0.0)
    logits = np.einsum("nh,h->n", hid, head.w2) + head.b2[0]
    return {"pooled": pooled, "pre": pre, "hid": hid, "logits": logits}


def forward_model(scene: Scene, params: NlRoiParams | None, head: Head) -> np.ndarray:
    """Per-RoI logits; ``params=None`` is the baseline without the block."""
    if params is None:
        pooled = global_avg_pool(scene.features)
        return _head_forward(np.asarray(pooled), head)["logits"]
    out, _ = forward_traced(scene.features, params)
    pooled = global_avg_pool(out.augmented)
    return _head_forward(np.asarray(pooled), head)["logits"]


def bce_with_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean binary cross-entropy in the overflow-safe log-sum-exp form."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return float(per.mean())


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _loss_and_grads(scene: Scene, params: NlRoiParams | None, head: Head):
    """One scene's loss, gradient dict (head and, if present, block), and
    the number of correctly classified RoIs."""
    x = scene.features
    n = x.shape[0]
    if params is not None:
        out, tape = forward_traced(x, params)
        feats = np.asarray(out.augmented)
    else:
        tape = None
        feats = x
    h_ext, w_ext = feats.shape[2], feats.shape[3]
    pooled = np.asarray(global_avg_pool(feats))
    hf = _head_forward(pooled, head)
    z, y = hf["logits"], scene.labels
    loss = bce_with_logits(z, y)
    correct = int(np.sum((z > 0).astype(np.float64) == y))

    d_z = (_sigmoid(z) - y) / n
    grads = {
        "head_w2": np.einsum("n,nh->h", d_z, hf["hid"]),
        "head_b2": np.array([d_z.sum()]),
    }
    d_hid = np.einsum("n,h->nh", d_z, head.w2)
    d_pre = d_hid * (hf["pre"] > 0)
    grads["head_w1"] = np.einsum("nh,nk->hk", d_pre, pooled)
    grads["head_b1"] = d_pre.sum(axis=0)
    d_pooled = np.einsum("nh,hk->nk", d_pre, head.w1)
    if params is not None:
        d_feats = np.ascontiguousarray(
            np.broadcast_to(
                (d_pooled / (h_ext * w_ext))[:, :, None, None], feats.shape
            )
        )
        block_grads = backward(tape, d_feats)
        for name in PARAM_NAMES:
            grads[name] = np.asarray(block_grads[name])
    return loss, grads, correct


def sgd_step(theta: dict, grads: dict, state: dict, lr: float, momentum: float,
             weight_decay: float) -> tuple[dict, dict]:
    """v <- momentum*v + (grad + weight_decay*theta); theta <- theta - lr*v."""
    if set(theta) != set(grads):
        raise ValueError(
            f"gradient keys {sorted(grads)} do not match parameter keys "
            f"{sorted(theta)}"
        )
    new_theta, new_state = {}, {}
    for name, value in theta.items():
        g = np.asarray(grads[name])
        if g.shape != value.shape:
            raise ValueError(
                f"{name}: gradient shape {g.shape} does not match parameter "
                f"shape {value.shape}"
            )
        v = momentum * state.get(name, np.zeros_like(value)) + (
            g + weight_decay * value
        )
        new_state[name] = v
        new_theta[name] = value - lr * v
    return new_theta, new_state


def _theta_of(params: NlRoiParams | None, head: Head) -> dict:
    theta = {k: np.array(v) for k, v in head.to_dict().items()}
    if params is not None:
        theta.update({k: np.array(v) for k, v in params.to_dict().items()})
    return theta


def _model_of(theta: dict, with_block: bool):
    head = Head.from_dict({k: theta[k] for k in HEAD_NAMES})
    if not with_block:
        return None, head
    return NlRoiParams.from_dict({k: theta[k] for k in PARAM_NAMES}), head


def evaluate(config: TrainConfig, params: NlRoiParams | None, head: Head,
             scenes: int = 1000, threads: int | None = None) -> float:
    """Held-out per-RoI accuracy over ``scenes`` scenes with odd seeds
    (training uses even ones). Thread count never changes the result:
    per-scene counts are reduced in index order."""

    def one(m: int) -> int:
        scene = gen_scene(config, 2 * m + 1)
        z = forward_model(scene, params, head)
        return int(np.sum((z > 0).astype(np.float64) == scene.labels))

    if threads is None or threads <= 1:
        counts = [one(m) for m in range(scenes)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            counts = list(pool.map(one, range(scenes)))
    return sum(counts) / (scenes * config.rois)


@dataclass(frozen=True)
class TrainResult:
    """Per-epoch metrics plus the trained model; ``diverged`` flags a run
    whose loss left the finite range (reported, never raised)."""

    metrics: tuple
    final_accuracy: float
    diverged: bool
    params: NlRoiParams | None
    head: Head
    with_block: bool


def train(config: TrainConfig, with_block: bool = True,
          eval_scenes: int = 1000, log=None) -> TrainResult:
    """SGD over streaming scenes; one scene per step, even seeds only.

    Metrics rows are (epoch, mean train loss, held-out accuracy). The run
    is bit-reproducible for a given config.
    """
    width = config.channels + (config.nl_channels if with_block else 0)
    params = init_params(config.dims, seed=config.seed, dtype=np.float64) \
        if with_block else None
    head = init_head(width, seed=config.seed + 1)
    theta = _theta_of(params, head)
    state: dict = {}
    metrics = []
    diverged = False
    step = 0
    for epoch in range(1, config.epochs + 1):
        total = 0.0
        for _ in range(config.scenes_per_epoch):
            scene = gen_scene(config, 2 * step)
            step += 1
            if not all(np.all(np.isfinite(v)) for v in theta.values()):
                diverged = True
                break
            params, head = _model_of(theta, with_block)
            try:
                loss, grads, _ = _loss_and_grads(scene, params, head)
            except ValueError as exc:
                # overflow inside the pipeline (e.g. non-finite similarity
                # logits) is a failed run, not a crash
                if "non-finite" in str(exc):
                    diverged = True
                    break
                raise
            if not math.isfinite(loss):
                diverged = True
                break
            total += loss
            theta, state = sgd_step(
                theta, grads, state,
                lr=config.learning_rate,
                momentum=config.momentum,
                weight_decay=config.weight_decay,
            )
        if diverged:
            break
        params, head = _model_of(theta, with_block)
        accuracy = evaluate(config, params, head, scenes=eval_scenes)
        row = (epoch, total / config.scenes_per_epoch, accuracy)
        metrics.append(row)
        if log is not None:
            log(f"epoch {row[0]}\tloss {row[1]:.4f}\taccuracy {row[2]:.4f}")
    params, head = _model_of(theta, with_block)
    final = metrics[-1][2] if metrics and not diverged else float("nan")
    return TrainResult(
        metrics=tuple(metrics),
        final_accuracy=final,
        diverged=diverged,
        params=params,
        head=head,
        with_block=with_block,
    )
