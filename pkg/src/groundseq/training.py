"""Training stages (pretrain, multi-task, task-specific) under the LM objective."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch

from groundseq.builder import MarkerStyle, apply_task_prefix, build_task_sample
from groundseq.model import GroundedSeq2Seq, ModelConfig, lm_loss, pad_batch, teacher_forcing_batch
from groundseq.vocab import UnifiedVocab

logger = logging.getLogger(__name__)

STAGES = ("pretrain", "multitask", "task_specific")
CHECKPOINT_FORMAT = "groundseq-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    stage: str = "multitask"
    tasks: tuple[str, ...] = ("grounded_captioning", "phrase_grounding", "refexp", "captioning", "vqa")
    lr: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 20
    # learning rate is multiplied by 0.1 for the final `decay_epochs` epochs
    decay_epochs: int = 5
    warmup_steps: int = 100
    batch_size: int = 64
    seed: int = 0
    grad_clip: float = 1.0
    p_empty: float = 0.5
    use_obj_close: bool = True
    use_obj_markers: bool = True
    type_embedding: str = "none"
    task_prefix: bool = False
    n_bins: int = 200
    max_steps: Optional[int] = None

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        if self.stage == "pretrain":
            self.tasks = ("pretrain",)
        if self.stage == "task_specific" and len(self.tasks) != 1:
            raise ValueError("task_specific training takes exactly one task")
        for name in ("lr", "epochs", "batch_size", "n_bins"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.decay_epochs <= self.epochs:
            raise ValueError("decay_epochs must be within [0, epochs]")

    @property
    def marker_style(self) -> MarkerStyle:
        if not self.use_obj_markers:
            return MarkerStyle.NONE
        if not self.use_obj_close:
            return MarkerStyle.OPEN_ONLY
        return MarkerStyle.BOTH

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = list(self.tasks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Example:
    """One (task, annotation) pair with the precomputed image features."""

    task: str
    annotation: object
    features: np.ndarray


@dataclass
class History:
    losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    seconds: float = 0.0


def _batches(examples: Sequence[Example], cfg: TrainConfig, vocab: UnifiedVocab, rng: np.random.Generator):
    """One epoch of single-task batches in shuffled order."""
    by_task: dict[str, list] = {}
    for ex in examples:
        if ex.task not in cfg.tasks:
            continue
        task = ex.task
        s = build_task_sample(task, ex.annotation, vocab, cfg.marker_style, rng=rng, p_empty=cfg.p_empty)
        s = apply_task_prefix(s, cfg.task_prefix, vocab)
        s.image = ex.features
        by_task.setdefault(task, []).append(s)
    batches = []
    for task in sorted(by_task):
        items = by_task[task]
        order = rng.permutation(len(items))
        for i in range(0, len(items), cfg.batch_size):
            batches.append([items[j] for j in order[i : i + cfg.batch_size]])
    rng.shuffle(batches)
    return batches


def collate(samples, dtype=torch.float32):
    feats = torch.as_tensor(np.stack([s.image for s in samples]), dtype=dtype)
    text = pad_batch([s.input_text for s in samples])
    inp, tgt, mask = teacher_forcing_batch([s.target for s in samples])
    return feats, text, inp, tgt, mask


def train(
    cfg: TrainConfig,
    examples: Sequence[Example],
    vocab: UnifiedVocab,
    model_cfg: Optional[ModelConfig] = None,
    init: Optional[GroundedSeq2Seq] = None,
    on_step: Optional[Callable[[int, float], None]] = None,
) -> tuple[GroundedSeq2Seq, History]:
    """Minimize the LM loss; ``init`` continues from an earlier stage's model."""
    if vocab.n_bins != cfg.n_bins:
        raise ValueError(f"vocab has {vocab.n_bins} bins but config asks for {cfg.n_bins}")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    if init is not None:
        model = init
        if model.vocab.manifest() != vocab.manifest():
            raise ValueError("initial model was trained with a different vocabulary")
    else:
        model_cfg = replace(model_cfg or ModelConfig(), type_embedding=cfg.type_embedding)
        model = GroundedSeq2Seq(model_cfg, vocab)
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    hist = History()
    t0 = time.time()
    step = 0
    for epoch in range(cfg.epochs):
        base_lr = cfg.lr * (0.1 if epoch >= cfg.epochs - cfg.decay_epochs else 1.0)
        total, count = 0.0, 0
        for batch in _batches(examples, cfg, vocab, rng):
            lr = base_lr * min(1.0, (step + 1) / cfg.warmup_steps) if cfg.warmup_steps else base_lr
            for g in opt.param_groups:
                g["lr"] = lr
            feats, text, inp, tgt, mask = collate(batch)
            loss = lm_loss(model(feats, text, inp), tgt, mask)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss.item()} at epoch {epoch} step {step} (lr {lr:g}, task {batch[0].task})"
                )
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            val = loss.item()
            hist.losses.append(val)
            total += val * len(batch)
            count += len(batch)
            if on_step:
                on_step(step, val)
            step += 1
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
        if count:
            hist.epoch_losses.append(total / count)
            logger.info("epoch %d loss %.4f (%.0fs)", epoch, total / count, time.time() - t0)
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    hist.seconds = time.time() - t0
    model.eval()
    return model, hist


def overfit(model: GroundedSeq2Seq, samples, steps: int = 500, lr: float = 3e-3, target: float = 0.01):
    """Fit a single fixed batch; returns the per-step losses (stops once below ``target``)."""
    feats, text, inp, tgt, mask = collate(samples, dtype=model.head.weight.dtype)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    losses = []
    model.train()
    for _ in range(steps):
        loss = lm_loss(model(feats, text, inp), tgt, mask)
        losses.append(loss.item())
        if losses[-1] < target:
            break
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()
    return losses


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str
    n_checked: int
    abs_errors: np.ndarray


def grad_check(
    model: GroundedSeq2Seq,
    samples,
    eps: float = 1e-5,
    floor: float = 1e-6,
    max_per_param: Optional[int] = None,
    seed: int = 0,
) -> GradCheckResult:
    """Compare autograd gradients of ``lm_loss`` with central finite differences.

    The relative error of one coordinate is ``|a - n| / max(|a| + |n|, floor)``;
    the floor keeps coordinates whose true gradient is zero (unused position
    rows, for instance) from dividing roundoff by zero. ``max_per_param``
    subsamples coordinates when the model is too large to sweep exhaustively.
    Run on a float64 model.
    """
    if model.head.weight.dtype != torch.float64:
        raise ValueError("grad_check needs a float64 model (call model.double())")
    feats, text, inp, tgt, mask = collate(samples, dtype=torch.float64)
    was_training = model.training
    model.eval()

    def loss_value() -> torch.Tensor:
        return lm_loss(model(feats, text, inp), tgt, mask)

    model.zero_grad()
    loss_value().backward()
    rng = np.random.default_rng(seed)
    worst, worst_name, errors = 0.0, "", []
    with torch.no_grad():
        for name, p in model.named_parameters():
            analytic = p.grad.detach().clone().reshape(-1)
            flat = p.data.view(-1)
            idx = np.arange(flat.numel())
            if max_per_param is not None and len(idx) > max_per_param:
                idx = np.sort(rng.choice(len(idx), size=max_per_param, replace=False))
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_value().item()
                flat[i] = orig - eps
                down = loss_value().item()
                flat[i] = orig
                numeric = (up - down) / (2 * eps)
                a = analytic[i].item()
                err = abs(a - numeric)
                errors.append(err)
                rel = err / max(abs(a) + abs(numeric), floor)
                if rel > worst:
                    worst, worst_name = rel, f"{name}[{i}]"
    model.train(was_training)
    return GradCheckResult(worst, worst_name, len(errors), np.asarray(errors))


def save_checkpoint(path: Union[str, Path], model: GroundedSeq2Seq, train_cfg: Optional[TrainConfig] = None) -> None:
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "model_config": model.cfg.to_dict(),
            "train_config": train_cfg.to_dict() if train_cfg else None,
            "vocab": model.vocab.manifest(),
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_checkpoint(path: Union[str, Path]) -> tuple[GroundedSeq2Seq, Optional[TrainConfig]]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT or blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version {CHECKPOINT_VERSION} checkpoint")
    vocab = UnifiedVocab.from_manifest(blob["vocab"])
    model = GroundedSeq2Seq(ModelConfig(**blob["model_config"]), vocab)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    tc = TrainConfig.from_dict(blob["train_config"]) if blob["train_config"] else None
    return model, tc


def examples_from_corpus(scenes, annotations, tasks: Sequence[str], grid: int = 8) -> list[Example]:
    """Pair each scene's per-task annotations with the scene's grid features."""
    from groundseq.scenes import scene_to_features

    out = []
    for scene, anns in zip(scenes, annotations):
        feats = scene_to_features(scene, grid)
        for task in tasks:
            out.append(Example(task, anns[task], feats))
    return out
