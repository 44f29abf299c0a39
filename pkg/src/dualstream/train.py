"""Training and evaluation procedure, checkpointing, ablation harness.

Per epoch: train over shuffled batches (one optimizer step each), step the
cosine schedule, evaluate on the held-out split, and checkpoint iff the
correlation strictly improves (pc_best starts at -1.0, so the first valid
epoch always checkpoints). The returned weights are the best epoch's, and
the report history keeps the last epoch too, since both are worth
reporting.

Checkpoint container (MDCK, little-endian): magic ``MDCK``, version u32=1,
u32-length-prefixed UTF-8 JSON header {config, epoch, pc_best, opt_step},
u32 tensor count, then per tensor: u16 name length, name bytes, u8 dtype
(0=f32, 1=f64), u8 rank, u32 dims, raw data. Model parameters are stored
under ``param.<name>``, optimizer moments under ``opt.{m,v}.<name>``.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import struct
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import (
    Batch,
    ManifestRecord,
    PreprocessConfig,
    batch_iterator,
    load_manifest,
)
from .errors import (
    CompatibilityError,
    ContractError,
    CorruptionError,
    FormatError,
    NumericError,
)
from .fusion import FUSION_MODES, Model, ModelConfig
from .metrics import EvalResult, evaluate_scores
from .optim import AdamW, CosineSchedule, SmoothL1Config, cosine_lr, smooth_l1
from .prior import PriorEncoderConfig
from .ssm import VimConfig
from .tensor import backward

MDCK_MAGIC = b"MDCK"
MDCK_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 16
    lr: float = 1e-5
    weight_decay: float = 0.01
    beta: float = 1.0
    seed: int = 0
    fusion_mode: str = "cross_attention"
    image_size: int = 224
    eta_min: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    num_heads: int = 4
    d_hidden: int = 256
    flip_probability: float = 0.5
    vim: VimConfig = field(default_factory=VimConfig)
    prior: PriorEncoderConfig = field(default_factory=PriorEncoderConfig)

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be >= 1")
        if self.lr < 0 or self.weight_decay < 0:
            raise ContractError("lr and weight_decay must be >= 0")
        self.model_config().validate()
        self.preprocess_config().validate()
        SmoothL1Config(self.beta).validate()

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            image_size=self.image_size,
            vim=self.vim,
            prior=self.prior,
            num_heads=self.num_heads,
            d_hidden=self.d_hidden,
            fusion_mode=self.fusion_mode,
        )

    def preprocess_config(self) -> PreprocessConfig:
        return PreprocessConfig(
            target_size=self.image_size, flip_probability=self.flip_probability
        )

    def schedule(self) -> CosineSchedule:
        return CosineSchedule(eta_max=self.lr, eta_min=self.eta_min, total_epochs=self.epochs)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        data = dict(raw)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        if "vim" in data and isinstance(data["vim"], dict):
            data["vim"] = VimConfig(**data["vim"])
        if "prior" in data and isinstance(data["prior"], dict):
            prior = dict(data["prior"])
            if "stage_channels" in prior:
                prior["stage_channels"] = tuple(prior["stage_channels"])
            data["prior"] = PriorEncoderConfig(**prior)
        return cls(**data)


@dataclass
class EpochReport:
    epoch: int
    train_loss: float
    pc: float
    mae: float
    rmse: float
    lr: float
    seconds: float

    CSV_HEADER = "epoch,loss,pc,mae,rmse,lr,seconds"

    def csv_row(self) -> str:
        return (
            f"{self.epoch},{self.train_loss:.8f},{self.pc:.8f},{self.mae:.8f},"
            f"{self.rmse:.8f},{self.lr:.3e},{self.seconds:.3f}"
        )


def write_reports_csv(path: str, reports: Sequence[EpochReport]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(EpochReport.CSV_HEADER + "\n")
        for r in reports:
            f.write(r.csv_row() + "\n")


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict
    epoch: int
    pc_best: float
    opt_step: int


# ---------------------------------------------------------------------------
# MDCK container

def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    header = json.dumps(
        {
            "config": ckpt.config,
            "epoch": ckpt.epoch,
            "pc_best": ckpt.pc_best,
            "opt_step": ckpt.opt_step,
        }
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MDCK_MAGIC)
        f.write(struct.pack("<I", MDCK_VERSION))
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(struct.pack("<I", len(ckpt.tensors)))
        for name, arr in ckpt.tensors.items():
            code = _DTYPE_CODES.get(arr.dtype)
            if code is None:
                raise ContractError(f"tensor {name}: unsupported dtype {arr.dtype}")
            name_bytes = name.encode("utf-8")
            f.write(struct.pack("<H", len(name_bytes)))
            f.write(name_bytes)
            f.write(struct.pack("<BB", code, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()

    def need(n: int, offset: int, what: str) -> None:
        if offset + n > len(blob):
            raise CorruptionError(f"{path}: truncated in {what}")

    if blob[:4] != MDCK_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    need(8, 4, "header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != MDCK_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    (header_len,) = struct.unpack_from("<I", blob, 8)
    need(header_len, 12, "json header")
    try:
        meta = json.loads(blob[12:12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptionError(f"{path}: bad json header ({e})") from None
    offset = 12 + header_len
    need(4, offset, "tensor count")
    (count,) = struct.unpack_from("<I", blob, offset)
    offset += 4

    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        need(2, offset, "name length")
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        need(name_len, offset, "name")
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        need(2, offset, "dtype/rank")
        code, rank = struct.unpack_from("<BB", blob, offset)
        offset += 2
        if code not in _CODE_DTYPES:
            raise CorruptionError(f"{path}: tensor {name}: bad dtype code {code}")
        need(4 * rank, offset, "dims")
        dims = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        need(nbytes, offset, f"tensor {name} data")
        arr = np.frombuffer(blob, dtype=dtype, count=int(np.prod(dims, dtype=np.int64)), offset=offset)
        tensors[name] = arr.reshape(dims).copy()
        offset += nbytes
    if offset != len(blob):
        raise CorruptionError(f"{path}: {len(blob) - offset} trailing bytes")
    return Checkpoint(
        tensors=tensors,
        config=meta["config"],
        epoch=int(meta["epoch"]),
        pc_best=float(meta["pc_best"]),
        opt_step=int(meta["opt_step"]),
    )


def make_checkpoint(model: Model, opt: AdamW, cfg: TrainConfig, epoch: int, pc_best: float) -> Checkpoint:
    tensors = {f"param.{name}": p.data.copy() for name, p in model.params().items()}
    for name, arr in opt.state_tensors().items():
        tensors[name] = arr.copy()
    return Checkpoint(
        tensors=tensors,
        config=cfg.to_dict(),
        epoch=epoch,
        pc_best=pc_best,
        opt_step=opt.step_count,
    )


def restore_model(ckpt: Checkpoint, dtype=np.float32) -> tuple[Model, TrainConfig]:
    """Rebuild the model from the stored config and overwrite every
    parameter from the checkpoint, bitwise."""
    cfg = TrainConfig.from_dict(ckpt.config)
    model = Model(cfg.model_config(), seed=cfg.seed, dtype=dtype)
    for name, p in model.params().items():
        key = f"param.{name}"
        if key not in ckpt.tensors:
            raise CorruptionError(f"checkpoint missing tensor {key}")
        arr = ckpt.tensors[key]
        if arr.shape != p.shape:
            raise CorruptionError(
                f"checkpoint tensor {key} has shape {arr.shape}, config implies {p.shape}"
            )
        p.data = arr.astype(dtype, copy=True)
    return model, cfg


def ensure_compatible(ckpt: Checkpoint, cfg: TrainConfig) -> None:
    """Reject checkpoints whose model geometry differs from the runtime
    config (e.g. a different d_model)."""
    stored = TrainConfig.from_dict(ckpt.config)
    mismatches = []
    for attr in ("image_size", "fusion_mode", "num_heads", "d_hidden"):
        if getattr(stored, attr) != getattr(cfg, attr):
            mismatches.append(attr)
    if dataclasses.asdict(stored.vim) != dataclasses.asdict(cfg.vim):
        mismatches.append("vim")
    if dataclasses.asdict(stored.prior) != dataclasses.asdict(cfg.prior):
        mismatches.append("prior")
    if mismatches:
        raise CompatibilityError(f"checkpoint/config mismatch in: {', '.join(mismatches)}")


# ---------------------------------------------------------------------------
# training loop

def train_epoch(
    model: Model,
    data: Iterable[Batch],
    optimizer: AdamW,
    loss_cfg: SmoothL1Config,
    lr: float | None = None,
) -> float:
    """One optimizer step per batch; gradients zeroed before each step."""
    losses = []
    for i, batch in enumerate(data):
        optimizer.zero_grad()
        pred = model.forward(batch.images)
        loss = smooth_l1(batch.scores, pred, beta=loss_cfg.beta)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss {value} at batch {i}; epoch aborted")
        backward(loss)
        optimizer.step(lr=lr)
        losses.append(value)
    if not losses:
        raise ContractError("empty dataloader: no batches to train on")
    return float(np.mean(losses))


def evaluate(model: Model, data: Iterable[Batch]) -> EvalResult:
    """Accumulate predictions over all batches (no graph recorded) and
    score them. Degenerate predictions surface as an error."""
    ys, preds = [], []
    for batch in data:
        preds.append(model.predict(batch.images))
        ys.append(batch.scores.data)
    if not preds:
        raise ContractError("empty evaluation set")
    return evaluate_scores(np.concatenate(ys), np.concatenate(preds))


def evaluate_manifest(
    model: Model,
    records: Sequence[ManifestRecord],
    pre_cfg: PreprocessConfig,
    batch_size: int,
    root_dir: str | None = None,
) -> EvalResult:
    return evaluate(
        model,
        batch_iterator(records, pre_cfg, batch_size, shuffle=False, seed=0, root_dir=root_dir),
    )


EvalFn = Callable[[Model, Sequence[ManifestRecord], "TrainConfig"], EvalResult]


def run_training(
    cfg: TrainConfig,
    train_records: Sequence[ManifestRecord],
    test_records: Sequence[ManifestRecord],
    root_dir: str | None = None,
    out_dir: str | None = None,
    evaluate_fn: EvalFn | None = None,
    deterministic: bool = False,
    log: Callable[[str], None] | None = None,
) -> tuple[Checkpoint, list[EpochReport]]:
    """Full protocol: returns the best-correlation checkpoint and one
    report per epoch. ``evaluate_fn`` is a seam for protocol tests.

    With ``deterministic`` the wall-time column is zeroed so two identical
    runs produce byte-identical report CSVs.
    """
    cfg.validate()
    say = log if log is not None else (lambda s: None)
    pre_cfg = cfg.preprocess_config()
    model = Model(cfg.model_config(), seed=cfg.seed)
    opt = AdamW(
        model.trainable(),
        lr=cfg.lr,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
    )
    sched = cfg.schedule()
    loss_cfg = SmoothL1Config(cfg.beta)

    if evaluate_fn is None:
        evaluate_fn = lambda m, recs, c: evaluate_manifest(
            m, recs, pre_cfg, c.batch_size, root_dir=root_dir
        )

    pc_best = -1.0
    best: Checkpoint | None = None
    reports: list[EpochReport] = []
    ckpt_path = os.path.join(out_dir, "best.mdck") if out_dir else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    for epoch in range(1, cfg.epochs + 1):
        lr = cosine_lr(epoch - 1, sched)
        started = time.perf_counter()
        batches = batch_iterator(
            train_records,
            pre_cfg,
            cfg.batch_size,
            shuffle=True,
            seed=cfg.seed,
            epoch=epoch,
            train=True,
            root_dir=root_dir,
        )
        mean_loss = train_epoch(model, batches, opt, loss_cfg, lr=lr)
        result = evaluate_fn(model, test_records, cfg)
        seconds = 0.0 if deterministic else time.perf_counter() - started

        if result.pc > pc_best:
            pc_best = result.pc
            best = make_checkpoint(model, opt, cfg, epoch=epoch, pc_best=pc_best)
            if ckpt_path:
                save_checkpoint(ckpt_path, best)
            marker = " *"
        else:
            marker = ""
        reports.append(
            EpochReport(
                epoch=epoch,
                train_loss=mean_loss,
                pc=result.pc,
                mae=result.mae,
                rmse=result.rmse,
                lr=lr,
                seconds=seconds,
            )
        )
        say(
            f"epoch {epoch:3d}/{cfg.epochs}  loss {mean_loss:.5f}  {result.line()}  "
            f"lr {lr:.3e}{marker}"
        )
        if out_dir:
            write_reports_csv(os.path.join(out_dir, "reports.csv"), reports)

    assert best is not None  # epochs >= 1 and pc > -1 on the first epoch
    final = reports[-1]
    say(f"best epoch {best.epoch}: PC={best.pc_best:.6f}; final epoch PC={final.pc:.6f}")
    return best, reports


# ---------------------------------------------------------------------------
# ablation harness

ABLATION_ROWS = (
    ("A", "cross_attention", "full model"),
    ("B", "prior_only", "prior stream only"),
    ("C", "mamba_only", "sequence stream only"),
    ("D", "concat", "concatenation fusion"),
)


@dataclass
class AblationRow:
    label: str
    fusion_mode: str
    description: str
    pc: float
    mae: float
    n_params: int
    best_epoch: int


def run_ablation(
    cfg: TrainConfig,
    train_records: Sequence[ManifestRecord],
    test_records: Sequence[ManifestRecord],
    root_dir: str | None = None,
    deterministic: bool = False,
    log: Callable[[str], None] | None = None,
) -> list[AblationRow]:
    """Train the four fusion configurations under an identical config
    (same seed, same data) and report best-epoch PC/MAE per row."""
    rows = []
    for label, mode, description in ABLATION_ROWS:
        run_cfg = dataclasses.replace(cfg, fusion_mode=mode)
        n_params = Model(run_cfg.model_config(), seed=run_cfg.seed).num_trainable()
        best, reports = run_training(
            run_cfg,
            train_records,
            test_records,
            root_dir=root_dir,
            deterministic=deterministic,
            log=log,
        )
        best_report = max(reports, key=lambda r: r.pc)
        rows.append(
            AblationRow(
                label=label,
                fusion_mode=mode,
                description=description,
                pc=best_report.pc,
                mae=best_report.mae,
                n_params=n_params,
                best_epoch=best.epoch,
            )
        )
    return rows


def format_ablation_table(rows: Sequence[AblationRow]) -> str:
    lines = ["label  configuration        params      PC        MAE"]
    for r in rows:
        lines.append(
            f"({r.label})    {r.description:<20} {r.n_params:>7}  {r.pc:+.4f}   {r.mae:.4f}"
        )
    return "\n".join(lines)
