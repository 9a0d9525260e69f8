"""Teacher pretraining, the two transfer stages, and decoder fine-tuning."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np
import torch

from .checkpoint import ModelCheckpoint, restore_optimizer
from .degradation import DegradationConfig, degrade_pair, sample_seed
from .encoders import EncoderConfig
from .losses import AlignmentConfig, SiLogConfig, SkippedTokens, align_loss, silog_loss
from .metrics import MetricReport, evaluate
from .models import FuseModel, prepare_images, prepare_voxels
from .synthdata import Dataset

log = logging.getLogger(__name__)

# seeds the fixed degradation used when measuring a fusion stage before/after training
EVAL_STEP = 2**31

STAGES = ("teacher", "stage1", "stage2", "finetune", "scratch", "onestage")

TRAINABLE = {
    "teacher": ("image_encoder", "depth_head"),
    "stage1": ("event_lora", "event_patch_embed"),
    "stage2": ("fredfuse",),
    "finetune": ("depth_head",),
    "scratch": ("image_encoder", "event_encoder_base", "event_patch_embed", "fredfuse", "depth_head"),
    "onestage": ("event_lora", "event_patch_embed", "fredfuse"),
}


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "teacher"
    learning_rate: float = 5e-5
    batch_size: int = 8
    steps: int = 500
    seed: int = 0
    lora_rank: int = 4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    silog_lambda: float = 0.5
    align_alpha: float = 0.2
    align_beta: float = 0.85
    threads: int = 1
    check_frozen: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")

    @property
    def align(self) -> AlignmentConfig:
        return AlignmentConfig(self.align_alpha, self.align_beta)

    @property
    def silog(self) -> SiLogConfig:
        return SiLogConfig(self.silog_lambda)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class TrainResult:
    checkpoint: ModelCheckpoint
    model: FuseModel
    losses: list[float]
    initial_loss: float
    final_loss: float
    frozen_hashes_before: dict = field(default_factory=dict)
    frozen_hashes_after: dict = field(default_factory=dict)

    @property
    def reduction(self) -> float:
        return 1.0 - self.final_loss / self.initial_loss


class TrainingDiverged(RuntimeError):
    pass


class FrozenParameterChanged(RuntimeError):
    pass


def deterministic(seed: int, threads: int = 1) -> None:
    torch.manual_seed(seed)
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


def batch_indices(seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    """Batch for ``step``; a pure function of (seed, step) so runs can resume mid-way."""
    rng = np.random.default_rng([seed, step])
    return np.sort(rng.choice(n, size=min(batch_size, n), replace=False))


def step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step, 7]).generate_state(1)[0])


def degraded_batch(data: Dataset, idx, cfg: DegradationConfig | None, base_seed: int):
    if cfg is None:
        return data.images[idx], data.voxels[idx]
    imgs, voxs = [], []
    for i in idx:
        im, vx, _ = degrade_pair(data.images[i], data.voxels[i], cfg, sample_seed(base_seed, int(i)))
        imgs.append(im)
        voxs.append(vx)
    return np.stack(imgs), np.stack(voxs)


@torch.no_grad()
def teacher_targets(model: FuseModel, images: np.ndarray, chunk: int = 64):
    """Depth and tokens of the frozen image branch on clean images, computed once."""
    model.eval()
    depths, tokens = [], []
    for s in range(0, len(images), chunk):
        d, t = model.image_depth(prepare_images(images[s : s + chunk]))
        depths.append(d)
        tokens.append(t)
    return torch.cat(depths), torch.cat(tokens)


def _train(
    model: FuseModel,
    stage_groups,
    loss_fn: Callable[[int, np.ndarray], torch.Tensor],
    n: int,
    cfg: TrainConfig,
    resume: ModelCheckpoint | None = None,
):
    params = model.set_trainable(stage_groups)
    frozen = [g for g in model.group_hashes() if g not in stage_groups]
    before = {g: h for g, h in model.group_hashes().items() if g in frozen}
    opt = torch.optim.Adam(params, lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.eps)
    start = 0
    if resume is not None:
        restore_optimizer(resume, model, opt)
        start = int(resume.meta.get("optimizer_step", 0))
    losses = []
    model.train()
    for step in range(start, cfg.steps):
        idx = batch_indices(cfg.seed, step, n, cfg.batch_size)
        opt.zero_grad(set_to_none=True)
        loss = loss_fn(step, idx)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"{cfg.stage}: loss became {loss.item()} at step {step} (batch {idx.tolist()})")
        loss.backward()
        opt.step()
        losses.append(float(loss.item()))
        if cfg.check_frozen:
            _assert_frozen(model, before)
    _assert_frozen(model, before)
    return opt, losses, before


def _assert_frozen(model: FuseModel, before: dict) -> None:
    now = model.group_hashes()
    changed = [g for g, h in before.items() if now[g] != h]
    if changed:
        raise FrozenParameterChanged(f"frozen groups changed during training: {changed}")


def _checkpoint(model, cfg, stage_groups, opt, extra=None) -> ModelCheckpoint:
    meta = {"stage": cfg.stage, "train": cfg.to_dict(), **(extra or {})}
    return ModelCheckpoint.from_model(model, meta, stage_groups, opt)


# -- image-only teacher -------------------------------------------------


@torch.no_grad()
def dataset_silog(model: FuseModel, data: Dataset, cfg: SiLogConfig, mode: str = "image",
                  degradation: DegradationConfig | None = None, seed: int = 0) -> float:
    pred = predict(model, data, mode, degradation, seed)
    return float(silog_loss(pred, torch.as_tensor(data.depths, dtype=pred.dtype), cfg=cfg))


def pretrain_teacher(data: Dataset, cfg: TrainConfig, encoder_config: EncoderConfig = EncoderConfig()) -> TrainResult:
    """Train an image-only encoder + head with SiLog; it stands in for a depth foundation model."""
    if len(data) == 0:
        raise ValueError("pretrain_teacher: empty dataset")
    cfg = replace(cfg, stage="teacher")
    deterministic(cfg.seed, cfg.threads)
    model = FuseModel(encoder_config, fusion=None, event_encoder=False)
    images = prepare_images(data.images)
    depths = torch.as_tensor(data.depths, dtype=images.dtype)

    def loss_fn(step, idx):
        pred, _ = model.image_depth(images[idx])
        return silog_loss(pred, depths[idx], cfg=cfg.silog)

    initial = dataset_silog(model, data, cfg.silog)
    opt, losses, before = _train(model, TRAINABLE["teacher"], loss_fn, len(data), cfg)
    final = dataset_silog(model, data, cfg.silog)
    ckpt = _checkpoint(model, cfg, TRAINABLE["teacher"], opt)
    return TrainResult(ckpt, model, losses, initial, final, before, _hashes(model, before))


def _hashes(model, before):
    now = model.group_hashes()
    return {g: now[g] for g in before}


# -- transfer stage I -----------------------------------------------------


def student_from_teacher(teacher: ModelCheckpoint, lora_rank: int = 4, seed: int = 0) -> FuseModel:
    """Teacher image branch plus an event encoder copied from it, with fresh LoRA adapters."""
    base = teacher.build_model()
    model = FuseModel(base.config, fusion=None, event_encoder=False)
    model.image_encoder.load_state_dict(base.image_encoder.state_dict())
    model.head.load_state_dict(base.head.state_dict())
    model.init_event_from_image()
    model.event_encoder.attach_lora(lora_rank, seed=seed)
    return model


@torch.no_grad()
def dataset_align(model: FuseModel, data: Dataset, targets, cfg: AlignmentConfig, mode: str,
                  degradation: DegradationConfig | None = None, seed: int = 0) -> float:
    t_depth, t_tokens = targets
    images, voxels = degraded_batch(data, np.arange(len(data)), degradation, seed)
    model.eval()
    if mode == "event":
        d, f = model.event_depth(prepare_voxels(voxels))
    else:
        d, f = model(prepare_images(images), prepare_voxels(voxels))
    return float(align_loss(t_depth, d, t_tokens, f, cfg).total)


def run_stage1(data: Dataset, teacher: ModelCheckpoint, cfg: TrainConfig) -> TrainResult:
    """Align the LoRA-adapted event encoder with the frozen teacher on clean pairs."""
    cfg = replace(cfg, stage="stage1")
    deterministic(cfg.seed, cfg.threads)
    model = student_from_teacher(teacher, cfg.lora_rank, cfg.seed)
    targets = teacher_targets(model, data.images)
    voxels = prepare_voxels(data.voxels)
    counter = SkippedTokens()

    def loss_fn(step, idx):
        d, f = model.event_depth(voxels[idx])
        return align_loss(targets[0][idx], d, targets[1][idx], f, cfg.align, counter=counter).total

    initial = dataset_align(model, data, targets, cfg.align, "event")
    opt, losses, before = _train(model, TRAINABLE["stage1"], loss_fn, len(data), cfg)
    counter.check()
    final = dataset_align(model, data, targets, cfg.align, "event")
    ckpt = _checkpoint(model, cfg, TRAINABLE["stage1"], opt)
    return TrainResult(ckpt, model, losses, initial, final, before, _hashes(model, before))


# -- transfer stage II ----------------------------------------------------


def attach_fusion(stage1: ModelCheckpoint, seed: int, fusion: str = "fredfuse") -> FuseModel:
    src = stage1.build_model()
    torch.manual_seed(seed)
    model = FuseModel(src.config, fusion=fusion, event_encoder=True)
    model.event_encoder.attach_lora(src.event_encoder.blocks[0].attn.q.lora_A.shape[0])
    state = {k: v for k, v in src.state_dict().items()}
    missing, unexpected = model.load_state_dict(state, strict=False)
    assert not unexpected and all(k.startswith("fusion.") for k in missing), (missing, unexpected)
    return model


def _fusion_loss(model, data, targets, cfg, degradation, counter):
    def loss_fn(step, idx):
        images, voxels = degraded_batch(data, idx, degradation, step_seed(cfg.seed, step))
        with torch.no_grad():
            f_img = model.image_encoder(prepare_images(images))
        f_evt = model.event_encoder(prepare_voxels(voxels))
        fused = model.fusion(f_img, f_evt)
        d = model.head(fused)
        return align_loss(targets[0][idx], d, targets[1][idx], fused, cfg.align, counter=counter).total

    return loss_fn


def run_stage2(
    data: Dataset,
    stage1: ModelCheckpoint,
    cfg: TrainConfig,
    degradation: DegradationConfig | None = DegradationConfig(),
    teacher: ModelCheckpoint | None = None,
    fusion: str = "fredfuse",
) -> TrainResult:
    """Train only the fusion module on degraded pairs against clean-image teacher targets.

    The stage-I checkpoint already carries the frozen teacher image branch;
    ``teacher`` may be given to supply it explicitly.
    """
    cfg = replace(cfg, stage="stage2")
    deterministic(cfg.seed, cfg.threads)
    model = attach_fusion(stage1, cfg.seed, fusion)
    if teacher is not None:
        t = teacher.build_model()
        model.image_encoder.load_state_dict(t.image_encoder.state_dict())
        model.head.load_state_dict(t.head.state_dict())
    targets = teacher_targets(model, data.images)
    counter = SkippedTokens()
    loss_fn = _fusion_loss(model, data, targets, cfg, degradation, counter)
    eval_seed = step_seed(cfg.seed, EVAL_STEP)
    initial = dataset_align(model, data, targets, cfg.align, "fused", degradation, eval_seed)
    opt, losses, before = _train(model, TRAINABLE["stage2"], loss_fn, len(data), cfg)
    counter.check()
    final = dataset_align(model, data, targets, cfg.align, "fused", degradation, eval_seed)
    ckpt = _checkpoint(model, cfg, TRAINABLE["stage2"], opt)
    return TrainResult(ckpt, model, losses, initial, final, before, _hashes(model, before))


def run_onestage(
    data: Dataset,
    teacher: ModelCheckpoint,
    cfg: TrainConfig,
    degradation: DegradationConfig | None = DegradationConfig(),
) -> TrainResult:
    """Single-stage transfer: adapters, patch embedding and fusion trained together."""
    cfg = replace(cfg, stage="onestage")
    deterministic(cfg.seed, cfg.threads)
    student = student_from_teacher(teacher, cfg.lora_rank, cfg.seed)
    model = attach_fusion(ModelCheckpoint.from_model(student), cfg.seed)
    targets = teacher_targets(model, data.images)
    counter = SkippedTokens()
    loss_fn = _fusion_loss(model, data, targets, cfg, degradation, counter)
    eval_seed = step_seed(cfg.seed, EVAL_STEP)
    initial = dataset_align(model, data, targets, cfg.align, "fused", degradation, eval_seed)
    opt, losses, before = _train(model, TRAINABLE["onestage"], loss_fn, len(data), cfg)
    counter.check()
    final = dataset_align(model, data, targets, cfg.align, "fused", degradation, eval_seed)
    ckpt = _checkpoint(model, cfg, TRAINABLE["onestage"], opt)
    return TrainResult(ckpt, model, losses, initial, final, before, _hashes(model, before))


# -- supervised training on labelled target data --------------------------


def _supervised(model, data, cfg, groups, mode, degradation, resume=None):
    depths = torch.as_tensor(data.depths, dtype=torch.get_default_dtype())

    def loss_fn(step, idx):
        images, voxels = degraded_batch(data, idx, degradation, step_seed(cfg.seed, step))
        if mode == "image":
            pred, _ = model.image_depth(prepare_images(images))
        else:
            pred, _ = model(prepare_images(images), prepare_voxels(voxels))
        return silog_loss(pred, depths[idx], cfg=cfg.silog)

    initial = dataset_silog(model, data, cfg.silog, mode)
    opt, losses, before = _train(model, groups, loss_fn, len(data), cfg, resume)
    final = dataset_silog(model, data, cfg.silog, mode)
    return opt, losses, before, initial, final


def finetune(
    data: Dataset,
    joint: ModelCheckpoint,
    cfg: TrainConfig,
    degradation: DegradationConfig | None = None,
    mode: str = "fused",
    resume: bool = False,
) -> TrainResult:
    """Train only the depth head with SiLog on labelled data; encoders and fusion stay frozen.

    ``mode="image"`` fine-tunes the image-only branch (the single-modality
    baseline). With ``resume=True`` the optimizer state stored in ``joint``
    is restored and training continues from its recorded step.
    """
    cfg = replace(cfg, stage="finetune")
    deterministic(cfg.seed, cfg.threads)
    model = joint.build_model()
    if mode not in ("fused", "image"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "fused" and model.fusion is None:
        raise ValueError("finetune: fused mode needs a checkpoint with a fusion module")
    opt, losses, before, initial, final = _supervised(
        model, data, cfg, TRAINABLE["finetune"], mode, degradation, joint if resume else None
    )
    ckpt = _checkpoint(model, cfg, TRAINABLE["finetune"], opt, {"mode": mode})
    return TrainResult(ckpt, model, losses, initial, final, before, _hashes(model, before))


def train_from_scratch(
    data: Dataset,
    cfg: TrainConfig,
    fusion: str = "fredfuse",
    encoder_config: EncoderConfig = EncoderConfig(),
    degradation: DegradationConfig | None = DegradationConfig(),
) -> TrainResult:
    """Fully supervised dual-encoder baseline with no transferred knowledge."""
    cfg = replace(cfg, stage="scratch")
    deterministic(cfg.seed, cfg.threads)
    model = FuseModel(encoder_config, fusion=fusion, event_encoder=True)
    opt, losses, before, initial, final = _supervised(
        model, data, cfg, TRAINABLE["scratch"], "fused", degradation
    )
    ckpt = _checkpoint(model, cfg, TRAINABLE["scratch"], opt)
    return TrainResult(ckpt, model, losses, initial, final, before, _hashes(model, before))


# -- inference and evaluation ---------------------------------------------


@torch.no_grad()
def predict(
    model: FuseModel,
    data: Dataset,
    mode: str = "fused",
    degradation: DegradationConfig | None = None,
    seed: int = 0,
    images: np.ndarray | None = None,
    chunk: int = 64,
) -> torch.Tensor:
    model.eval()
    if images is None:
        images, voxels = degraded_batch(data, np.arange(len(data)), degradation, seed)
    else:
        voxels = data.voxels
    out = []
    for s in range(0, len(images), chunk):
        im = prepare_images(images[s : s + chunk])
        if mode == "event":
            d, _ = model.event_depth(prepare_voxels(voxels[s : s + chunk]))
        elif mode == "image" or model.fusion is None:
            d, _ = model.image_depth(im)
        else:
            d, _ = model(im, prepare_voxels(voxels[s : s + chunk]))
        out.append(d)
    return torch.cat(out)


def evaluate_model(model: FuseModel, data: Dataset, mode: str = "fused", **kw) -> MetricReport:
    pred = predict(model, data, mode, **kw).double().numpy()
    return evaluate(pred, data.depths)
