"""Synthetic four-class scenes and a small C2F-DS classifier trained with momentum SGD.

Classes follow the decision-space regions: background (faint noise), small
(a few bright 2x2 blobs), large (one broad soft disk) and mixed (a disk plus
a blob). Everything is driven by explicit seeds, so datasets, initial
weights, noise draws and metrics reproduce bit for bit.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .c2f import C2fConfig, c2f_backward, c2f_forward, init_params as init_block
from .dso import Region
from .gating import NoiseSource
from .io import load_tensor, save_tensor

IMAGE_SIZE = 32
NUM_CLASSES = 4
CLASS_NAMES = tuple(r.label for r in sorted(Region))
# Gaussian skirt width of the large-object disk, as a fraction of its radius
DISK_SOFTNESS = 0.75


class SceneSample(NamedTuple):
    image: np.ndarray  # (1, 1, 32, 32) in [0, 1]
    label: int


# ------------------------------------------------------------------ data


def _blob(img, rng):
    r, c = rng.integers(0, IMAGE_SIZE - 1, size=2)
    amp = rng.uniform(0.9, 1.0)
    np.maximum(img[r : r + 2, c : c + 2], amp, out=img[r : r + 2, c : c + 2])


def _disk(rng):
    radius = rng.uniform(8.0, 12.0)
    amp = rng.uniform(0.4, 0.6)
    cy, cx = IMAGE_SIZE / 2 + rng.uniform(-3.0, 3.0, size=2)
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE] + 0.5
    outside = np.maximum(np.hypot(yy - cy, xx - cx) - radius, 0.0)
    return amp * np.exp(-(outside**2) / (2.0 * (DISK_SOFTNESS * radius) ** 2))


def render_scene(label: int, rng: np.random.Generator) -> np.ndarray:
    img = rng.uniform(0.0, 0.1, size=(IMAGE_SIZE, IMAGE_SIZE))
    if label in (Region.LARGE, Region.MIXED):
        img += _disk(rng)
    if label == Region.SMALL:
        for _ in range(rng.integers(1, 4)):
            _blob(img, rng)
    elif label == Region.MIXED:
        _blob(img, rng)
    return np.clip(img, 0.0, 1.0).reshape(1, 1, IMAGE_SIZE, IMAGE_SIZE)


def gen_dataset(seed: int, count: int) -> list[SceneSample]:
    """``count`` scenes with class counts differing by at most one."""
    if count < 4:
        raise ValueError(f"need at least 4 samples, got {count}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(count) % NUM_CLASSES)
    return [SceneSample(render_scene(int(lab), rng), int(lab)) for lab in labels]


def stack(data: Sequence[SceneSample]) -> tuple[np.ndarray, np.ndarray]:
    return np.concatenate([s.image for s in data]), np.array([s.label for s in data])


def save_dataset(data: Sequence[SceneSample], directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    rows = ["index,label"]
    for i, s in enumerate(data):
        save_tensor(s.image, d / f"{i:06d}.dst")
        rows.append(f"{i},{s.label}")
    (d / "labels.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")


def load_dataset(directory) -> list[SceneSample]:
    d = Path(directory)
    with open(d / "labels.csv", newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [SceneSample(load_tensor(d / f"{int(r['index']):06d}.dst"), int(r["label"])) for r in rows]


# ----------------------------------------------------------------- model


@dataclass(frozen=True)
class ToyConfig:
    """Stem (3x3, 1->8) -> C2F-DS block (8->8, n=2) -> global mean pool -> linear 8->4."""

    use_dsg: bool = True
    use_msg: bool = True
    groups: int = 3
    alpha: float = 1.9
    beta: float = 0.1
    operator: str = "dso"
    logit_source: str = "noise"
    width: int = 8
    n: int = 2

    def block(self) -> C2fConfig:
        return C2fConfig(
            c_in=self.width, c_out=self.width, n=self.n,
            use_dsg=self.use_dsg, use_msg=self.use_msg, groups=self.groups,
            alpha=self.alpha, beta=self.beta, operator=self.operator,
            logit_source=self.logit_source,
        )

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def init_model(cfg: ToyConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Uniform(-k, k) with k = 1/sqrt(fan_in), in manifest order."""
    w = cfg.width
    params = {}
    k = 1.0 / math.sqrt(9)
    params["stem.w"] = rng.uniform(-k, k, size=(w, 1, 3, 3))
    params["stem.b"] = rng.uniform(-k, k, size=w)
    for name, v in init_block(cfg.block(), rng).items():
        params[f"block.{name}"] = v
    k = 1.0 / math.sqrt(w)
    params["fc.w"] = rng.uniform(-k, k, size=(NUM_CLASSES, w))
    params["fc.b"] = rng.uniform(-k, k, size=NUM_CLASSES)
    return params


def _block_params(params):
    return {k[6:]: v for k, v in params.items() if k.startswith("block.")}


def model_forward(params, x, cfg: ToyConfig, noise: NoiseSource | None = None):
    a0 = T.conv3x3(x, params["stem.w"], params["stem.b"])
    s = T.activation("silu", a0)
    h, bcache = c2f_forward(s, _block_params(params), cfg.block(), noise)
    feat = T.reduce_spatial("mean", h)[:, :, 0, 0]
    logits = feat @ params["fc.w"].T + params["fc.b"]
    return logits, (x, a0, s, h, bcache, feat)


def model_backward(dlogits, params, cfg: ToyConfig, cache):
    x, a0, s, h, bcache, feat = cache
    grads = {"fc.w": dlogits.T @ feat, "fc.b": dlogits.sum(axis=0)}
    dfeat = dlogits @ params["fc.w"]
    dh = T.reduce_spatial_backward("mean", h, dfeat[:, :, None, None])
    ds, bgrads = c2f_backward(dh, _block_params(params), cfg.block(), bcache)
    da0 = T.activation_backward("silu", a0, ds)
    _, grads["stem.w"], grads["stem.b"] = T.conv3x3_backward(da0, x, params["stem.w"])
    for k, v in bgrads.items():
        grads[f"block.{k}"] = v
    return {k: grads[k] for k in params}


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    return float(loss), d / n


# ------------------------------------------------------------- training


class DivergenceError(FloatingPointError):
    pass


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_acc: float
    val_acc: float


@dataclass
class TrainMetrics:
    seed: int
    config_digest: str
    records: list[EpochRecord] = field(default_factory=list)
    # max |grad| of each gate weight on the first optimisation step
    first_step_gate_grad: dict[str, float] = field(default_factory=dict)
    temperature_range: tuple[float, float] | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "train_acc", "val_acc"])
        for r in self.records:
            w.writerow([r.epoch, repr(r.loss), repr(r.train_acc), repr(r.val_acc)])
        return buf.getvalue()


class TrainResult(NamedTuple):
    params: dict
    metrics: TrainMetrics


class EvalResult(NamedTuple):
    accuracy: float
    confusion: np.ndarray  # rows: true class, cols: predicted
    loss: float


def evaluate(params, data, cfg: ToyConfig = ToyConfig(), batch_size: int = 256) -> EvalResult:
    """Noise-free accuracy; argmax ties go to the lowest class index."""
    if len(data) == 0:
        raise ValueError("evaluate needs at least one sample")
    x, labels = stack(data) if not isinstance(data, tuple) else data
    preds, total = [], 0.0
    noise = NoiseSource(mode="eval")
    for i in range(0, len(labels), batch_size):
        logits, _ = model_forward(params, x[i : i + batch_size], cfg, noise)
        loss, _ = cross_entropy(logits, labels[i : i + batch_size])
        total += loss * len(logits)
        preds.append(logits.argmax(axis=1))
    pred = np.concatenate(preds)
    conf = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    np.add.at(conf, (labels, pred), 1)
    return EvalResult(float((pred == labels).mean()), conf, total / len(labels))


def temperature_range(params, data, cfg: ToyConfig) -> tuple[float, float] | None:
    if not cfg.use_msg:
        return None
    x, _ = stack(data) if not isinstance(data, tuple) else data
    _, cache = model_forward(params, x, cfg, NoiseSource(mode="eval"))
    temps = cache[4].msg.T
    return float(temps.min()), float(temps.max())


def train(
    cfg: ToyConfig,
    data,
    epochs: int = 20,
    lr: float = 0.05,
    seed: int = 7,
    val=None,
    batch_size: int = 32,
    momentum: float = 0.9,
    clip_norm: float | None = 1.0,
    progress=None,
) -> TrainResult:
    """Minibatch SGD with momentum on softmax cross-entropy.

    Epoch 0 in the metrics is the untrained model evaluated noise-free on
    the full training split. Later epochs report the mean minibatch loss and
    accuracy seen during that epoch (MSG noise active) and a noise-free
    validation accuracy.

    ``clip_norm`` rescales each step's full gradient to at most that global
    L2 norm (None disables it). Without it the quadratic gate statistic
    occasionally kicks the gate logits into saturation and training stalls.
    """
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if lr <= 0:
        raise ValueError("lr must be positive")
    if len(data) == 0:
        raise ValueError("training data is empty")
    init_seq, shuffle_seq, noise_seq = np.random.SeedSequence(seed).spawn(3)
    params = init_model(cfg, np.random.default_rng(init_seq))
    shuffler = np.random.default_rng(shuffle_seq)
    noise = NoiseSource(np.random.default_rng(noise_seq), mode="train")
    x, labels = stack(data)
    val = (x, labels) if val is None else stack(val)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    metrics = TrainMetrics(seed, cfg.digest())

    def record(epoch, loss, acc):
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss after epoch {epoch}")
        rec = EpochRecord(epoch, loss, acc, evaluate(params, val, cfg).accuracy)
        metrics.records.append(rec)
        if progress:
            progress(rec)

    init = evaluate(params, (x, labels), cfg)
    record(0, init.loss, init.accuracy)
    for epoch in range(1, epochs + 1):
        order = shuffler.permutation(len(labels))
        loss_sum, hits = 0.0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            where = f"epoch {epoch}, batch starting at sample {start}"
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    logits, cache = model_forward(params, x[idx], cfg, noise)
                    loss, dlogits = cross_entropy(logits, labels[idx])
            except T.DomainError as exc:
                raise DivergenceError(f"non-finite activations at {where}: {exc}") from exc
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at {where}")
            loss_sum += loss * len(idx)
            hits += int((logits.argmax(axis=1) == labels[idx]).sum())
            grads = model_backward(dlogits, params, cfg, cache)
            if not metrics.first_step_gate_grad:
                metrics.first_step_gate_grad = {
                    k: float(np.abs(grads[k]).max()) for k in ("block.dsg.w", "block.msg.w_msg") if k in grads
                } or {"none": 0.0}
            if clip_norm is not None:
                norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
                if norm > clip_norm:
                    grads = {k: g * (clip_norm / norm) for k, g in grads.items()}
            for k in params:
                velocity[k] = momentum * velocity[k] - lr * grads[k]
                params[k] = params[k] + velocity[k]
        record(epoch, loss_sum / len(labels), hits / len(labels))
    metrics.temperature_range = temperature_range(params, val, cfg)
    return TrainResult(params, metrics)


# -------------------------------------------------------------- ablation

ABLATION_AXES = ("groups", "alpha", "operator")


class AblationRow(NamedTuple):
    axis: str
    value: str
    val_acc: float
    final_loss: float
    t_min: float | None
    t_max: float | None


def ablate(
    axis: str,
    values: Sequence,
    base: ToyConfig,
    data,
    val,
    epochs: int = 20,
    lr: float = 0.05,
    seed: int = 7,
    **train_kw,
) -> list[AblationRow]:
    """One training run per value, same data and seed, varying one knob."""
    if axis not in ABLATION_AXES:
        raise ValueError(f"axis must be one of {ABLATION_AXES}, got {axis!r}")
    if not values:
        raise ValueError("no ablation values given")
    rows = []
    for v in values:
        if axis == "groups":
            cfg = replace(base, groups=int(v))
        elif axis == "alpha":
            cfg = replace(base, alpha=float(v))
        else:
            cfg = replace(base, operator=str(v))
        res = train(cfg, data, epochs=epochs, lr=lr, seed=seed, val=val, **train_kw)
        last = res.metrics.records[-1]
        tr = res.metrics.temperature_range or (None, None)
        rows.append(AblationRow(axis, str(v), last.val_acc, last.loss, *tr))
    return rows


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["axis", "value", "val_acc", "final_loss", "t_min", "t_max"])
    for r in rows:
        w.writerow([r.axis, r.value, repr(r.val_acc), repr(r.final_loss),
                    "" if r.t_min is None else repr(r.t_min), "" if r.t_max is None else repr(r.t_max)])
    return buf.getvalue()
