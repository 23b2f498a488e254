"""Training and inference orchestration.

Step 1 trains the base network on image+copy inputs. Step 2 computes each
sample's Grad-CAM map with that frozen network. Step 3 trains again, feeding
image+saliency for samples older than the retest threshold; at test time
the retest policy decides the second channel from a first-pass prediction.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import engine as E
from .backbone import ConfigError, Network, read_checkpoint, write_checkpoint
from .data.imaging import apply_augment, pad_and_resize, read_pgm, sample_augment_params
from .data.manifest import Manifest
from .engine import ShapeError, Tensor
from .saliency import image_saliency, normalize_map

log = logging.getLogger(__name__)


class Mode(str, enum.Enum):
    BASE_COPY_ONLY = "BaseCopyOnly"
    SALIENCY_AUGMENTED = "SaliencyAugmented"
    AGE_AND_GENDER = "AgeAndGender"


@dataclass(frozen=True)
class RetestPolicy:
    age_threshold: float = 25.0

    def __post_init__(self):
        if not self.age_threshold > 0:
            raise ConfigError("retest age_threshold must be positive")


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 1e-4
    decay_factor: float = 0.8
    decay_period: int = 4
    weight_decay: float = 1e-4
    batch_size: int = 8
    max_epoch: int = 100
    patience: int = 3
    loss_alpha: float = 0.026
    seed: int = 0
    augment: bool = True
    age_bias_init: str = "mean"  # mean | min | zero: starting value of the age output bias

    def __post_init__(self):
        if not 0 < self.decay_factor < 1:
            raise ConfigError("decay_factor must lie in (0, 1)")
        if not 0 < self.loss_alpha < 1:
            raise ConfigError("loss_alpha must lie in (0, 1)")
        if self.initial_lr <= 0 or self.weight_decay < 0:
            raise ConfigError("initial_lr must be positive and weight_decay non-negative")
        if min(self.batch_size, self.max_epoch, self.decay_period, self.patience) < 1:
            raise ConfigError("batch_size, max_epoch, decay_period and patience must be positive")
        if self.age_bias_init not in ("min", "mean", "zero"):
            raise ConfigError(f"age_bias_init must be mean, min or zero, got {self.age_bias_init!r}")


# ---------------------------------------------------------------------------
# Schedule, losses, optimizer
# ---------------------------------------------------------------------------


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    """Step decay: initial_lr * decay_factor ** floor(epoch / decay_period), epoch counted from 0."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return cfg.initial_lr * cfg.decay_factor ** (epoch // cfg.decay_period)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=E.get_dtype()))


def loss_age(pred, label) -> Tensor:
    """Mean absolute error."""
    pred, label = _as_tensor(pred), _as_tensor(label)
    return E.mean(E.absolute(E.sub(pred, label)))


def loss_gender(pred, label) -> Tensor:
    """Root-mean-square error of post-sigmoid gender predictions against 0/1 labels."""
    pred, label = _as_tensor(pred), _as_tensor(label)
    return E.sqrt(E.mean(E.square(E.sub(pred, label))))


def combined_loss(l_age, l_gender, alpha: float) -> Tensor:
    return E.add(E.scale(_as_tensor(l_age), alpha), E.scale(_as_tensor(l_gender), 1.0 - alpha))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float, weight_decay: float) -> AdamState:
    """In-place Adam update with bias correction and decoupled weight decay."""
    if set(grads) != set(params):
        raise ShapeError("gradients and parameters name different tensors")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        elif m.shape != p.shape:
            raise ShapeError(f"{name}: optimizer state shape {m.shape} != parameter shape {p.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        update = (m / c1) / (np.sqrt(v / c2) + state.eps) + weight_decay * p.data
        p.data = (p.data - lr * update).astype(p.data.dtype)
    return state


# ---------------------------------------------------------------------------
# Input composition and inference
# ---------------------------------------------------------------------------


def compose_input_train(image, saliency, age_label: float, policy: RetestPolicy = RetestPolicy()) -> np.ndarray:
    """[2, R, R] input: image+copy up to the threshold age, image+saliency above it."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[0] != 1:
            raise ShapeError(f"expected a single-channel image, got {img.shape}")
        img = img[0]
    if age_label <= policy.age_threshold:
        return np.stack([img, img])
    sal = np.asarray(saliency, dtype=np.float64)
    if sal.shape != img.shape:
        raise ShapeError(f"saliency {sal.shape} does not match image {img.shape}")
    return np.stack([img, sal])


@dataclass(frozen=True)
class RetestTrace:
    first_pass_age: float
    retested: bool
    second_pass_age: float | None = None

    @property
    def final_age(self) -> float:
        return self.second_pass_age if self.retested else self.first_pass_age


def _predict_stack(net: Network, stack: np.ndarray, batch_size: int = 64):
    ages, logits = [], []
    for start in range(0, len(stack), batch_size):
        pred = net.forward(Tensor(stack[start : start + batch_size]))
        ages.append(pred.age.data.astype(np.float64))
        if pred.gender_logit is not None:
            logits.append(pred.gender_logit.data.astype(np.float64))
    age = np.concatenate(ages) if ages else np.zeros(0)
    gender = np.concatenate(logits) if logits else None
    return age, gender


def infer_with_retest(net: Network, image, saliency_provider: Callable, policy: RetestPolicy = RetestPolicy()) -> tuple[float, RetestTrace]:
    """Two-pass inference for one [R, R] image.

    ``saliency_provider(image)`` must return the normalized saliency map; it is
    called only when the first-pass age exceeds the threshold, and any error it
    raises propagates.
    """
    img = np.asarray(image, dtype=np.float64)
    first, _ = _predict_stack(net, np.stack([img, img])[None])
    first_age = float(first[0])
    if not first_age > policy.age_threshold:
        trace = RetestTrace(first_age, False)
        return trace.final_age, trace
    sal = np.asarray(saliency_provider(img), dtype=np.float64)
    second, _ = _predict_stack(net, compose_input_train(img, sal, math.inf, policy)[None])
    trace = RetestTrace(first_age, True, float(second[0]))
    return trace.final_age, trace


def infer_with_retest_batch(net: Network, images: np.ndarray, saliency_provider: Callable, policy: RetestPolicy = RetestPolicy()) -> list[RetestTrace]:
    """Batched equivalent of :func:`infer_with_retest`.

    ``saliency_provider`` receives an [M, R, R] stack and returns M maps.
    """
    images = np.asarray(images, dtype=np.float64)
    first, _ = _predict_stack(net, np.stack([images, images], axis=1))
    need = np.flatnonzero(first > policy.age_threshold)
    second = {}
    if need.size:
        sal = np.asarray(saliency_provider(images[need]), dtype=np.float64)
        ages, _ = _predict_stack(net, np.stack([images[need], sal], axis=1))
        second = dict(zip(need.tolist(), ages.tolist()))
    return [
        RetestTrace(float(a), i in second, second.get(i))
        for i, a in enumerate(first.tolist())
    ]


def classify_gender(logit: float) -> tuple[int, float]:
    """(label, probability): probability below 0.5 is male (0), otherwise female (1)."""
    p = float(E.sigmoid(Tensor(np.array([logit], dtype=np.float64))).data[0])
    return (0 if p < 0.5 else 1), p


# ---------------------------------------------------------------------------
# Datasets and saliency cache
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    """In-memory samples at network resolution."""

    images: np.ndarray  # [N, R, R] in [0, 1]
    ages: np.ndarray
    genders: np.ndarray
    ids: list[str]
    saliency: np.ndarray | None = None  # [N, R, R] normalized maps

    def __len__(self):
        return len(self.ids)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(
            self.images[idx],
            self.ages[idx],
            self.genders[idx],
            [self.ids[i] for i in idx],
            None if self.saliency is None else self.saliency[idx],
        )


def load_dataset(manifest: Manifest, resolution: int, transform: Callable | None = None) -> Dataset:
    """Read, pad-to-square and resize every image of a manifest.

    ``transform(record, ImageBuffer) -> ImageBuffer`` runs before resizing
    (region ablation hooks in here).
    """
    images = []
    for rec in manifest:
        buf = read_pgm(manifest.resolve(rec))
        if transform is not None:
            buf = transform(rec, buf)
        images.append(pad_and_resize(buf, resolution).pixels)
    n = len(images)
    return Dataset(
        images=np.stack(images) if n else np.zeros((0, resolution, resolution)),
        ages=np.array([r.age for r in manifest], dtype=np.float64),
        genders=np.array([int(r.gender) for r in manifest], dtype=np.float64),
        ids=[r.sample_id for r in manifest],
    )


class SaliencyCache:
    """On-disk store of normalized maps keyed by (checkpoint hash, sample id)."""

    def __init__(self, root, checkpoint_hash: str):
        self.dir = Path(root) / checkpoint_hash
        self.hits = 0
        self.misses = 0

    def _path(self, sample_id: str) -> Path:
        return self.dir / f"{sample_id}.npy"

    def get(self, sample_id: str):
        p = self._path(sample_id)
        if p.exists():
            self.hits += 1
            return np.load(p)
        self.misses += 1
        return None

    def put(self, sample_id: str, m: np.ndarray) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        np.save(self._path(sample_id), m)


def precompute_saliency(net: Network, data: Dataset, cache: SaliencyCache | None = None) -> np.ndarray:
    """Normalized Step-2 saliency for every sample, reusing cached maps."""
    maps: list = [None] * len(data)
    todo = []
    for i, sid in enumerate(data.ids):
        hit = cache.get(sid) if cache is not None else None
        if hit is None:
            todo.append(i)
        else:
            maps[i] = hit
    if todo:
        computed = image_saliency(net, data.images[todo])
        for i, sm in zip(todo, computed):
            m = normalize_map(sm.upsampled)
            maps[i] = m
            if cache is not None:
                cache.put(data.ids[i], m)
    if cache is not None:
        log.info("saliency cache: %d hits, %d computed", cache.hits, len(todo))
    if not maps:
        return np.zeros((0,) + data.images.shape[1:])
    return np.stack(maps)


def saliency_provider_for(net: Network) -> Callable:
    """Provider for retest: normalized maps from ``net`` on image+copy inputs.

    Accepts one [R, R] image or an [M, R, R] stack.
    """

    def provide(images):
        arr = np.asarray(images, dtype=np.float64)
        single = arr.ndim == 2
        stack = arr[None] if single else arr
        maps = np.stack([normalize_map(m.upsampled) for m in image_saliency(net, stack)])
        return maps[0] if single else maps

    return provide


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class EarlyStopping:
    """Tracks the best validation MAE and counts non-improving epochs."""

    patience: int
    best: float = math.inf
    best_epoch: int = -1
    bad_epochs: int = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record one epoch; returns True when training should stop."""
        if value < self.best:
            self.best = value
            self.best_epoch = epoch
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_mae: float
    wall_time: float


@dataclass
class TrainResult:
    net: Network  # parameters of the best validation epoch
    history: list[EpochRecord]
    best_epoch: int
    best_val_mae: float
    stopped_early: bool


def _compose_batch(data: Dataset, idx, mode: Mode, policy: RetestPolicy, augment_rngs=None) -> np.ndarray:
    out = []
    for k, i in enumerate(idx):
        if mode is Mode.SALIENCY_AUGMENTED:
            x = compose_input_train(data.images[i], data.saliency[i], data.ages[i], policy)
        else:
            x = np.stack([data.images[i], data.images[i]])
        if augment_rngs is not None:
            x = apply_augment(x, sample_augment_params(augment_rngs[k]))
        out.append(x)
    return np.stack(out)


def _loss(net: Network, batch: np.ndarray, ages, genders, mode: Mode, cfg: TrainConfig) -> Tensor:
    pred = net.forward(Tensor(batch))
    la = loss_age(pred.age, ages)
    if mode is Mode.AGE_AND_GENDER:
        lg = loss_gender(E.sigmoid(pred.gender_logit), genders)
        return combined_loss(la, lg, cfg.loss_alpha)
    return la


def validation_mae(net: Network, data: Dataset, mode: Mode, policy: RetestPolicy, batch_size: int = 64) -> float:
    total = 0.0
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        pred = net.forward(Tensor(_compose_batch(data, idx, mode, policy)))
        total += float(np.abs(pred.age.data.astype(np.float64) - data.ages[idx]).sum())
    return total / len(data)


def _write_state(path, net: Network, best: dict, opt: AdamState, stopper: EarlyStopping, history, epoch: int, meta: dict) -> None:
    tensors = {}
    for k, v in net.state_arrays().items():
        tensors[f"param/{k}"] = v
    for k, v in best.items():
        tensors[f"best/{k}"] = v
    for k in opt.m:
        tensors[f"adam_m/{k}"] = opt.m[k]
        tensors[f"adam_v/{k}"] = opt.v[k]
    state_meta = dict(meta)
    state_meta.update(
        kind="train_state",
        epoch=epoch,
        adam_step=opt.step,
        stopper=asdict(stopper),
        history=[asdict(h) for h in history],
    )
    write_checkpoint(path, net.config, tensors, state_meta)


def train(
    net: Network,
    train_set: Dataset,
    val_set: Dataset,
    cfg: TrainConfig = TrainConfig(),
    policy: RetestPolicy = RetestPolicy(),
    mode: Mode | str = Mode.BASE_COPY_ONLY,
    run_dir=None,
    resume: bool = False,
    meta: dict | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Mini-batch Adam training with step-decayed LR and early stopping on val MAE.

    With ``run_dir`` set, writes ``history.jsonl``, ``best.ckpt`` (best
    parameters) and ``last.ckpt`` (full resumable state) after every epoch.
    ``resume=True`` continues from ``run_dir/last.ckpt``.
    """
    mode = Mode(mode)
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be non-empty")
    if set(train_set.ids) & set(val_set.ids):
        raise ValueError("training and validation sets overlap")
    if mode is Mode.AGE_AND_GENDER and not net.has_gender:
        raise ConfigError("AgeAndGender mode needs a network with the AgeAndGender head")
    if mode is Mode.SALIENCY_AUGMENTED and (train_set.saliency is None or val_set.saliency is None):
        raise ValueError("SaliencyAugmented mode needs precomputed saliency maps")
    meta = dict(meta or {}, mode=mode.value)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)

    opt = AdamState()
    stopper = EarlyStopping(cfg.patience)
    history: list[EpochRecord] = []
    best = {k: v.copy() for k, v in net.state_arrays().items()}
    start_epoch = 0

    if resume:
        if run_dir is None or not (run_dir / "last.ckpt").exists():
            raise FileNotFoundError("no last.ckpt to resume from")
        _, tensors, state = read_checkpoint(run_dir / "last.ckpt")
        net.load_arrays({k: tensors[f"param/{k}"] for k in net.params})
        best = {k: tensors[f"best/{k}"].astype(E.get_dtype()) for k in net.params}
        for k in net.params:
            if f"adam_m/{k}" in tensors:
                opt.m[k] = tensors[f"adam_m/{k}"].astype(E.get_dtype())
                opt.v[k] = tensors[f"adam_v/{k}"].astype(E.get_dtype())
        opt.step = state["adam_step"]
        stopper = EarlyStopping(**state["stopper"])
        history = [EpochRecord(**h) for h in state["history"]]
        start_epoch = state["epoch"] + 1
        log.info("resumed from epoch %d", state["epoch"])
        if stopper.bad_epochs >= cfg.patience:
            start_epoch = cfg.max_epoch
    elif cfg.age_bias_init != "zero":
        pick = np.min if cfg.age_bias_init == "min" else np.mean
        net.head_bias.data[0] = float(pick(train_set.ages))
        best = {k: v.copy() for k, v in net.state_arrays().items()}

    n = len(train_set)
    stopped_early = stopper.bad_epochs >= cfg.patience
    for epoch in range(start_epoch, cfg.max_epoch):
        t0 = time.perf_counter()
        lr = lr_schedule(cfg, epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        losses, weights = [], []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            rngs = [np.random.default_rng([cfg.seed, epoch, int(i)]) for i in idx] if cfg.augment else None
            batch = _compose_batch(train_set, idx, mode, policy, rngs)
            with E.Tape() as tape:
                loss = _loss(net, batch, train_set.ages[idx], train_set.genders[idx], mode, cfg)
            net.zero_grad()
            tape.backward(loss)
            adam_step(net.params, {k: p.grad for k, p in net.params.items()}, opt, lr, cfg.weight_decay)
            losses.append(loss.item())
            weights.append(len(idx))
        val = validation_mae(net, val_set, mode, policy)
        rec = EpochRecord(
            epoch=epoch,
            lr=lr,
            train_loss=float(np.average(losses, weights=weights)),
            val_mae=val,
            wall_time=time.perf_counter() - t0,
        )
        history.append(rec)
        stop = stopper.update(epoch, val)
        if stopper.best_epoch == epoch:
            best = {k: v.copy() for k, v in net.state_arrays().items()}
        log.info("epoch %d lr %.3g loss %.4f val_mae %.4f", epoch, lr, rec.train_loss, val)
        if run_dir is not None:
            with open(run_dir / "history.jsonl", "a") as fh:
                fh.write(json.dumps(asdict(rec)) + "\n")
            if stopper.best_epoch == epoch:
                write_checkpoint(run_dir / "best.ckpt", net.config, best, dict(meta, epoch=epoch, val_mae=val))
            _write_state(run_dir / "last.ckpt", net, best, opt, stopper, history, epoch, meta)
        if on_epoch is not None:
            on_epoch(rec)
        if stop:
            stopped_early = True
            break

    best_net = Network(net.config)
    best_net.load_arrays({k: v.copy() for k, v in best.items()})
    return TrainResult(best_net, history, stopper.best_epoch, stopper.best, stopped_early)


def predict(net: Network, data: Dataset, mode: Mode | str = Mode.BASE_COPY_ONLY, policy: RetestPolicy = RetestPolicy()):
    """Label-driven composition (validation view): (ages, gender_logits or None)."""
    mode = Mode(mode)
    stack = _compose_batch(data, np.arange(len(data)), mode, policy)
    return _predict_stack(net, stack)


def load_history(path) -> list[EpochRecord]:
    with open(path) as fh:
        return [EpochRecord(**json.loads(line)) for line in fh if line.strip()]
