"""Teacher and student training loops with deterministic data streams.

Every stochastic choice draws from its own seeded stream (see
:mod:`ugss.seeding`): parameter init, per-epoch record order, one
(epoch, record) stream for augmentation + patch cropping, and a dedicated
stream for per-step head selection. Training is therefore a pure function
of (seed, config, data) on a given device class, and a k=1 K-head run is
bit-identical to a plain U-Net run fed the same streams.

Per step exactly one head is selected uniformly at random and only the
trunk plus that head enter the autograd graph; the optimizer skips
parameters without gradients, so non-selected heads are bit-identical
before and after the step. One "epoch" is one randomly cropped patch from
every training record. The best checkpoint is the one with the highest
mean validation Dice over the four organs (earliest epoch wins ties).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import core_data, impute, model as model_mod, seeding
from .augment import AugmentConfig, sample_augmentation
from .core_data import DatasetManifest, OrganId, ORGANS, ScanRecord, to_class_map
from .errors import ConfigError, ValidationError
from .losses import cross_entropy, uce_loss
from .metrics import dice
from .model import KHeadUNet3d, ModelConfig, PlainUNet3d, build_model, build_plain_model

ROLE_TEACHER = "teacher"
ROLE_STUDENT = "student"


def ensure_determinism():
    torch.use_deterministic_algorithms(True)


@dataclass
class TrainConfig:
    role: str = ROLE_TEACHER
    epochs: int = 30
    patch_depth: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-4
    lr_decay_gamma: float = 0.1
    augment: AugmentConfig | None = None
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.role not in (ROLE_TEACHER, ROLE_STUDENT):
            raise ConfigError(f"unknown role {self.role!r}")
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if self.patch_depth % 2 ** self.model.levels != 0:
            raise ConfigError(
                f"patch_depth {self.patch_depth} must be divisible by "
                f"2^levels = {2 ** self.model.levels}")


def teacher_config(**kw) -> TrainConfig:
    kw.setdefault("epochs", 30)
    return TrainConfig(role=ROLE_TEACHER, **kw)


def student_config(**kw) -> TrainConfig:
    kw.setdefault("epochs", 15)
    return TrainConfig(role=ROLE_STUDENT, **kw)


def lr_at(step: int, total_steps: int, base_lr: float = 1e-3,
          gamma: float = 0.1) -> float:
    """Step-decay schedule: decays by ``gamma`` every ``total_steps // 3`` steps."""
    if not 0 <= step < max(total_steps, 1):
        raise ConfigError(f"step {step} outside [0, {total_steps})")
    interval = max(1, total_steps // 3)
    return base_lr * gamma ** (step // interval)


def sample_patch(record: ScanRecord, patch_depth: int, rng: np.random.Generator
                 ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Crop a random z-window; returns (image, class targets, uncertainty).

    Records thinner than ``patch_depth`` are symmetrically zero-padded with
    background targets and zero uncertainty (padding is trivially known
    background).
    """
    image = record.image.data
    target = to_class_map(record.labels)
    u = record.uncertainty if record.uncertainty is not None \
        else np.zeros(image.shape, dtype=np.float32)
    depth = image.shape[0]
    if depth >= patch_depth:
        offset = int(rng.integers(0, depth - patch_depth + 1))
        sl = slice(offset, offset + patch_depth)
        return (np.ascontiguousarray(image[sl]),
                np.ascontiguousarray(target[sl]),
                np.ascontiguousarray(u[sl]))
    pad_lo = (patch_depth - depth) // 2
    pad_hi = patch_depth - depth - pad_lo
    pad = ((pad_lo, pad_hi), (0, 0), (0, 0))
    return (np.pad(image, pad), np.pad(target, pad), np.pad(u, pad))


# ---------------------------------------------------------------------------
# cross-validation folds


@dataclass
class Fold:
    index: int
    train_ids: list[str]
    val_ids: list[str]


@dataclass
class FoldPlan:
    k: int
    seed: int
    folds: list[Fold]


def make_folds(ids: list[str], k: int = 5, seed: int = 0) -> FoldPlan:
    """Seeded shuffle + contiguous partition; fold i validates on part i."""
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    if len(ids) < k:
        raise ConfigError(f"need at least {k} records for {k} folds, got {len(ids)}")
    order = seeding.rng(seed, seeding.TAG_FOLDS).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    parts = [list(p) for p in np.array_split(shuffled, k)]
    folds = [Fold(index=i,
                  train_ids=[x for j, p in enumerate(parts) if j != i for x in p],
                  val_ids=parts[i])
             for i in range(k)]
    return FoldPlan(k=k, seed=seed, folds=folds)


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainResult:
    config: TrainConfig
    final_state: dict
    best_state: dict
    best_val_dice: float
    best_epoch: int
    steps: int
    curves: list[dict]
    val_history: list[dict]
    plain: bool = False

    def best_model(self):
        model = (build_plain_model(self.config.model, self.config.seed)
                 if self.plain else build_model(self.config.model, self.config.seed))
        model.load_state_dict(self.best_state)
        return model

    def save_checkpoint(self, path: str | Path) -> Path:
        model = self.best_model()
        return model_mod.save_checkpoint(
            path, model, step=self.steps,
            extra={"best_val_dice": self.best_val_dice, "best_epoch": self.best_epoch,
                   "role": self.config.role})

    def curves_to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = ["step", "lr", "loss"] + [f"val_dice_{o.key}" for o in ORGANS]
        lines = [",".join(header)]
        for row in self.curves:
            cells = [str(row["step"]), f"{row['lr']:.8f}", f"{row['loss']:.8f}"]
            cells += [f"{row[f'val_dice_{o.key}']:.6f}" if f"val_dice_{o.key}" in row else ""
                      for o in ORGANS]
            lines.append(",".join(cells))
        path.write_text("\n".join(lines) + "\n")
        return path


def validate_model(model, records: list[ScanRecord], patch_depth: int,
                   overlap: float = 0.5) -> dict[OrganId, float]:
    """Mean per-organ Dice of argmax predictions over the given records."""
    sums = {o: 0.0 for o in ORGANS}
    for record in records:
        mean_probs, _ = impute.predict_full_volume(model, record, patch_depth, overlap)
        pred = core_data.masks_from_class_map(np.argmax(mean_probs, axis=0))
        for organ in ORGANS:
            sums[organ] += dice(pred[organ], record.labels.masks[organ])
    n = max(len(records), 1)
    return {o: s / n for o, s in sums.items()}


def _snapshot(model) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def _train_loop(model, train: list[ScanRecord], val: list[ScanRecord],
                cfg: TrainConfig, use_uce: bool, select_heads: bool,
                on_step=None) -> TrainResult:
    ensure_determinism()
    if not train:
        raise ConfigError("empty training set")
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr,
                                 weight_decay=cfg.weight_decay)
    total_steps = cfg.epochs * len(train)
    head_rng = seeding.rng(cfg.seed, seeding.TAG_HEADS)
    curves: list[dict] = []
    val_history: list[dict] = []
    best_state = _snapshot(model)
    best_dice = float("-inf")
    best_epoch = -1
    step = 0

    for epoch in range(cfg.epochs):
        order = seeding.rng(cfg.seed, seeding.TAG_ORDER, epoch).permutation(len(train))
        for ridx in order:
            rng = seeding.rng(cfg.seed, seeding.TAG_SAMPLE, epoch, int(ridx))
            record = train[int(ridx)]
            if cfg.augment is not None:
                record = sample_augmentation(record, cfg.augment, rng)
            img, target, u = sample_patch(record, cfg.patch_depth, rng)

            lr = lr_at(step, total_steps, cfg.lr, cfg.lr_decay_gamma)
            for group in optimizer.param_groups:
                group["lr"] = lr

            x = torch.from_numpy(img).unsqueeze(0).unsqueeze(0)
            tgt = torch.from_numpy(target)
            if select_heads:
                head = int(head_rng.integers(model.k))
                logits = model.forward_head(x, head)[0]
            else:
                head = None
                logits = model(x)[0]
            probs = torch.softmax(logits, dim=0)
            if use_uce:
                loss = uce_loss(probs, tgt, torch.from_numpy(u))
            else:
                loss = cross_entropy(probs, tgt)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()

            curves.append({"step": step, "lr": lr, "loss": float(loss.item())})
            if on_step is not None:
                on_step(model, step, head, float(loss.item()))
            step += 1

        if val:
            per_organ = validate_model(model, val, cfg.patch_depth)
            mean_dice = float(np.mean([per_organ[o] for o in ORGANS]))
            for organ in ORGANS:
                curves[-1][f"val_dice_{organ.key}"] = per_organ[organ]
            val_history.append({"epoch": epoch, "mean_dice": mean_dice,
                                **{o.key: per_organ[o] for o in ORGANS}})
            if mean_dice > best_dice:
                best_dice = mean_dice
                best_state = _snapshot(model)
                best_epoch = epoch

    if not val:  # no selection signal: the final parameters are the result
        best_state = _snapshot(model)
        best_dice = float("nan")
        best_epoch = cfg.epochs - 1

    return TrainResult(config=cfg, final_state=_snapshot(model), best_state=best_state,
                       best_val_dice=best_dice, best_epoch=best_epoch, steps=step,
                       curves=curves, val_history=val_history,
                       plain=isinstance(model, PlainUNet3d))


def train_teacher(train: list[ScanRecord], val: list[ScanRecord],
                  cfg: TrainConfig, on_step=None) -> TrainResult:
    """K-head teacher training with plain cross-entropy on fully annotated data."""
    for record in train:
        if not record.labels.fully_annotated():
            raise ValidationError(
                f"teacher training requires fully annotated records; {record.id!r} is not")
    model = build_model(cfg.model, cfg.seed)
    return _train_loop(model, train, val, cfg, use_uce=False, select_heads=True,
                       on_step=on_step)


def train_student(train: list[ScanRecord], val: list[ScanRecord],
                  cfg: TrainConfig, on_step=None) -> TrainResult:
    """Freshly initialized K-head student trained with the uncertainty-weighted loss.

    Every training record must be fully labeled (clinical + imputed) and
    carry an uncertainty array.
    """
    for record in train:
        if not record.labels.fully_annotated():
            raise ValidationError(
                f"student training requires fully labeled records; {record.id!r} is not")
        if record.uncertainty is None:
            raise ValidationError(f"record {record.id!r} is missing its uncertainty array")
    model = build_model(cfg.model, cfg.seed)
    return _train_loop(model, train, val, cfg, use_uce=True, select_heads=True,
                       on_step=on_step)


def train_plain_unet(train: list[ScanRecord], val: list[ScanRecord],
                     cfg: TrainConfig, on_step=None) -> TrainResult:
    """Baseline: single-head U-Net with cross-entropy, same data streams."""
    if cfg.model.k != 1:
        raise ConfigError("plain U-Net training requires a k=1 model config")
    for record in train:
        if not record.labels.fully_annotated():
            raise ValidationError(
                f"baseline training requires fully annotated records; {record.id!r} is not")
    model = build_plain_model(cfg.model, cfg.seed)
    return _train_loop(model, train, val, cfg, use_uce=False, select_heads=False,
                       on_step=on_step)


# ---------------------------------------------------------------------------
# iterated teacher-student self-training


@dataclass
class IterationResult:
    iteration: int
    train_result: TrainResult
    checkpoint: Path
    imputed_manifest: DatasetManifest | None


def iterate_teacher_student(full_manifest: DatasetManifest,
                            partial_manifest: DatasetManifest,
                            val_records: list[ScanRecord],
                            teacher_cfg: TrainConfig,
                            student_cfg: TrainConfig,
                            n_iters: int,
                            work_dir: str | Path) -> list[IterationResult]:
    """Run teacher -> impute -> student, then re-impute with each new student.

    Iteration 1 trains the teacher on the fully annotated records and a
    student on fully annotated + imputed data; every later iteration uses
    the previous student as the imputer and trains a fresh student. All
    checkpoints and imputation snapshots are kept under ``work_dir``.
    """
    if n_iters < 1:
        raise ConfigError("n_iters must be >= 1")
    work_dir = Path(work_dir)
    results: list[IterationResult] = []

    full_records = core_data.load_records(full_manifest)
    teacher = train_teacher(full_records, val_records, teacher_cfg)
    teacher_ckpt = teacher.save_checkpoint(work_dir / "teacher" / "checkpoint.pt")
    teacher.curves_to_csv(work_dir / "teacher" / "curves.csv")
    results.append(IterationResult(0, teacher, teacher_ckpt, None))

    imputer = teacher
    combined = DatasetManifest(records=list(full_manifest.records)
                               + list(partial_manifest.records))
    for iteration in range(1, n_iters + 1):
        iter_dir = work_dir / f"iter_{iteration:02d}"
        imputed_manifest, _ = impute.impute_dataset(
            imputer.best_model(), combined, iter_dir / "imputed",
            patch_depth=student_cfg.patch_depth)
        student_train = core_data.load_records(imputed_manifest)
        student = train_student(student_train, val_records, student_cfg)
        ckpt = student.save_checkpoint(iter_dir / "student_checkpoint.pt")
        student.curves_to_csv(iter_dir / "student_curves.csv")
        results.append(IterationResult(iteration, student, ckpt, imputed_manifest))
        imputer = student

    return results
