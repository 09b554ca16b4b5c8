"""Classifier backends, the SGD step schedule, checkpointing and inference.

Backends are registered by architecture id. The reference backend,
``motion_cnn``, encodes each sampled frame together with its two neighbours
(edges replicated), max-pools the feature map, aggregates the per-frame
embeddings with a temporal convolution, and averages over time before a
linear head. Group normalisation keeps train and eval behaviour identical
even though training views are augmented and evaluation views are not.

Training always consumes the randomised view (stratified sampling plus strong
augmentation); inference always consumes the uniform view.
"""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from dist_ssl.errors import ParameterError, TrainingError, ValidationError
from dist_ssl.fileio import atomic_write_bytes
from dist_ssl.sampling import AugmentParams, SamplingParams, training_view_batch, uniform_view_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelSpec:
    architecture: str = "motion_cnn"
    num_classes: int = 4
    input_shape: tuple[int, int, int] = (8, 32, 32)
    init_seed: int = 0
    width: int = 16
    zero_head: bool = False

    def __post_init__(self):
        if self.num_classes < 1:
            raise ParameterError("num_classes", "must be positive")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ParameterError("input_shape", f"expected (T, H, W), got {self.input_shape}")
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 40
    batch_size: int = 16
    base_lr: float = 0.005
    lr_gamma: float = 0.9
    lr_step_every: int = 2
    momentum: float = 0.9
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epochs < 3:
            raise ParameterError("epochs", f"need at least 3 epochs for three checkpoints, got {self.epochs}")
        if self.batch_size < 1:
            raise ParameterError("batch_size", "must be positive")
        if self.lr_step_every < 1:
            raise ParameterError("lr_step_every", "must be positive")
        for name in ("base_lr", "lr_gamma"):
            if getattr(self, name) <= 0:
                raise ParameterError(name, "must be positive")
        if not 0 <= self.momentum < 1:
            raise ParameterError("momentum", "must lie in [0, 1)")


def lr_at_epoch(schedule: TrainSchedule, epoch: int) -> float:
    """Learning rate for 0-based ``epoch``: a step decay every ``lr_step_every`` epochs."""
    if not 0 <= epoch < schedule.epochs:
        raise ParameterError("epoch", f"must lie in [0, {schedule.epochs}), got {epoch}")
    return schedule.base_lr * schedule.lr_gamma ** (epoch // schedule.lr_step_every)


def checkpoint_epochs(n: int) -> tuple[int, int, int]:
    """1-based epochs after which the three teacher snapshots are taken."""
    if n < 3:
        raise ParameterError("epochs", f"need n >= 3, got {n}")
    return (-(-n // 3), -(-2 * n // 3), n)


class MotionCNN(nn.Module):
    def __init__(self, num_classes: int, width: int = 16):
        super().__init__()
        # each frame is encoded together with its two neighbours as channels
        self.frame_encoder = nn.Sequential(
            nn.Conv2d(3, width, 5, stride=2, padding=2, bias=False),
            nn.GroupNorm(4, width),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1, bias=False),
            nn.GroupNorm(4, 2 * width),
            nn.ReLU(inplace=True),
            # the moving object is small; averaging over the frame drowns it
            nn.AdaptiveMaxPool2d(1),
        )
        self.temporal = nn.Sequential(
            nn.Conv1d(2 * width, 2 * width, 3, padding=1, bias=False),
            nn.GroupNorm(4, 2 * width),
            nn.ReLU(inplace=True),
        )
        self.head = nn.Linear(2 * width, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, h, w = x.shape
        padded = torch.cat([x[:, :1], x, x[:, -1:]], dim=1)
        windows = torch.stack([padded[:, :-2], padded[:, 1:-1], padded[:, 2:]], dim=2)
        feats = self.frame_encoder(windows.reshape(b * t, 3, h, w)).reshape(b, t, -1)
        return self.head(self.temporal(feats.transpose(1, 2)).mean(dim=2))


BACKENDS: dict[str, Callable[[ModelSpec], nn.Module]] = {
    "motion_cnn": lambda spec: MotionCNN(spec.num_classes, spec.width),
}


def register_backend(name: str, factory: Callable[[ModelSpec], nn.Module]) -> None:
    BACKENDS[name] = factory


def build_module(spec: ModelSpec, init_state: dict | None = None) -> nn.Module:
    try:
        factory = BACKENDS[spec.architecture]
    except KeyError:
        raise ParameterError("architecture", f"unknown backend {spec.architecture!r}") from None
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(spec.init_seed)
        module = factory(spec)
    if spec.zero_head:
        head = getattr(module, "head", None)
        if isinstance(head, nn.Linear):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)
    if init_state is not None:
        # warm start, e.g. from a pretrained backbone or a previous student
        module.load_state_dict(init_state)
    return module


@dataclass
class TrainedModel:
    spec: ModelSpec
    module: nn.Module

    def __post_init__(self):
        self.module.eval()

    @torch.no_grad()
    def logits(self, views: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
        self.module.eval()
        out = [self.module(views[i : i + batch_size]) for i in range(0, len(views), batch_size)]
        return torch.cat(out) if out else torch.zeros((0, self.spec.num_classes))

    def probs_from_views(self, views: torch.Tensor) -> np.ndarray:
        expected = self.spec.input_shape
        if views.ndim != 4 or tuple(views.shape[1:]) != expected:
            raise ValidationError(f"expected views of shape (N, {expected}), got {tuple(views.shape)}")
        logits = self.logits(views).double()
        return torch.softmax(logits, dim=1).numpy()

    def predict_clips(self, clips: np.ndarray, sampling: SamplingParams) -> np.ndarray:
        """Class probabilities for a (N, L, H, W) stack, uniform view only."""
        if len(clips) == 0:
            return np.zeros((0, self.spec.num_classes))
        return self.probs_from_views(uniform_view_batch(clips, sampling))

    def state_dict(self) -> dict:
        return {k: v.detach().clone() for k, v in self.module.state_dict().items()}


def predict_probs(model: TrainedModel, seq: np.ndarray) -> np.ndarray:
    """Softmax output for one already-sampled (T, H, W) sequence."""
    seq = np.asarray(seq, dtype=np.float32)
    if seq.shape != model.spec.input_shape:
        raise ValidationError(f"sequence shape {seq.shape} does not match model input {model.spec.input_shape}")
    return model.probs_from_views(torch.from_numpy(np.ascontiguousarray(seq))[None])[0]


def serialize_state(spec: ModelSpec, state: dict) -> bytes:
    buf = io.BytesIO()
    torch.save({"spec": spec.__dict__, "state": state}, buf)
    return buf.getvalue()


def save_model(model: TrainedModel | tuple[ModelSpec, dict], path: str | Path) -> Path:
    spec, state = (model.spec, model.state_dict()) if isinstance(model, TrainedModel) else model
    return atomic_write_bytes(path, serialize_state(spec, state))


def load_model(path: str | Path) -> TrainedModel:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    raw = dict(payload["spec"])
    raw["input_shape"] = tuple(raw["input_shape"])
    spec = ModelSpec(**raw)
    return TrainedModel(spec, build_module(spec, payload["state"]))


@dataclass
class CheckpointSet:
    epochs: tuple[int, int, int]
    states: tuple[dict, dict, dict] = field(repr=False)
    spec: ModelSpec
    paths: tuple[Path, ...] = ()

    def __post_init__(self):
        if len(self.epochs) != 3 or len(self.states) != 3:
            raise ValidationError("a checkpoint set holds exactly three snapshots")
        if not self.epochs[0] < self.epochs[1] < self.epochs[2]:
            raise ValidationError(f"checkpoint epochs must increase, got {self.epochs}")

    def models(self) -> list[TrainedModel]:
        return [TrainedModel(self.spec, build_module(self.spec, s)) for s in self.states]

    @classmethod
    def load(cls, paths: list[str | Path], epochs: tuple[int, int, int]) -> "CheckpointSet":
        models = [load_model(p) for p in paths]
        return cls(tuple(epochs), tuple(m.state_dict() for m in models), models[0].spec,
                   tuple(Path(p) for p in paths))


@dataclass
class TrainResult:
    model: TrainedModel
    checkpoints: CheckpointSet | None
    epoch_loss: list[float]
    epoch_lr: list[float]


def train(
    spec: ModelSpec,
    frames: np.ndarray,
    labels: np.ndarray,
    schedule: TrainSchedule,
    sampling: SamplingParams,
    aug: AugmentParams,
    seed: int,
    save_checkpoints: bool = False,
    checkpoint_dir: str | Path | None = None,
    checkpoint_prefix: str = "teacher",
    init_state: dict | None = None,
) -> TrainResult:
    """Cross-entropy training with SGD + momentum and a stepped learning rate.

    ``labels`` may mix true and pseudo labels; they are treated identically.
    Epoch order and every clip's randomised view come from ``seed`` alone, so
    a rerun with the same arguments reproduces the same parameters on the
    same platform.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(frames) == 0:
        raise TrainingError("no training examples")
    if len(frames) != len(labels):
        raise TrainingError(f"{len(frames)} clips but {len(labels)} labels")
    if labels.min() < 0 or labels.max() >= spec.num_classes:
        raise TrainingError(
            f"labels must lie in [0, {spec.num_classes}); got range [{labels.min()}, {labels.max()}]"
        )

    module = build_module(spec, init_state)
    optimizer = torch.optim.SGD(
        module.parameters(), lr=schedule.base_lr, momentum=schedule.momentum,
        weight_decay=schedule.weight_decay,
    )
    targets = torch.from_numpy(labels)
    wanted = set(checkpoint_epochs(schedule.epochs)) if save_checkpoints else set()
    snapshots: dict[int, dict] = {}
    paths: list[Path] = []
    epoch_loss, epoch_lr = [], []

    for epoch in range(schedule.epochs):
        lr = lr_at_epoch(schedule, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(len(frames))
        view_seeds = rng.integers(0, 2**63 - 1, size=len(frames))
        module.train()
        total, count = 0.0, 0
        for start in range(0, len(order), schedule.batch_size):
            idx = order[start : start + schedule.batch_size]
            views = training_view_batch(frames[idx], sampling, aug, view_seeds[idx].tolist())
            loss = F.cross_entropy(module(views), targets[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss.item()} at epoch {epoch + 1}, batch {start // schedule.batch_size}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(idx)
            count += len(idx)
        epoch_loss.append(total / max(count, 1))
        epoch_lr.append(lr)
        log.debug("epoch %d lr %.6f loss %.4f", epoch + 1, lr, epoch_loss[-1])
        if epoch + 1 in wanted:
            state = {k: v.detach().clone() for k, v in module.state_dict().items()}
            snapshots[epoch + 1] = state
            if checkpoint_dir is not None:
                path = Path(checkpoint_dir) / f"{checkpoint_prefix}_e{epoch + 1}.bin"
                save_model((spec, state), path)
                paths.append(path)

    if not math.isfinite(epoch_loss[-1]):
        raise TrainingError("final epoch loss is not finite")
    model = TrainedModel(spec, module)
    checkpoints = None
    if save_checkpoints:
        e = checkpoint_epochs(schedule.epochs)
        checkpoints = CheckpointSet(e, tuple(snapshots[k] for k in e), spec, tuple(paths))
    return TrainResult(model, checkpoints, epoch_loss, epoch_lr)
