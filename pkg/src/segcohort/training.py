"""Joint optimization of the cohort: poly LR, single-loss AdamW updates, checkpointing.

One iteration draws one labeled and one unlabeled batch, evaluates the full
objective, and updates both students from a single backward pass.  All
per-iteration randomness (batch order, CutMix boxes) is a pure function of
(seed, iteration), which is what makes interrupted runs resume exactly.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from segcohort import data as data_mod
from segcohort import losses as losses_mod
from segcohort.config import RunConfig
from segcohort.data import BatchStream, LabeledBatch, UnlabeledBatch, derive_seed
from segcohort.evaluation import evaluate_pair
from segcohort.models import (
    AttentionStudent,
    ConfigError,
    ConvStudent,
    StudentConfig,
    build_student,
)
from segcohort.prototypes import cross_feature_consistency

logger = logging.getLogger(__name__)

METRICS_HEADER = "iter,lr,g,loss_sup,loss_ccd,loss_cfcd,loss_total,miou_cnn,miou_vit"

CHECKPOINT_MAGIC = b"SGCK"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {"float32": 0, "float64": 1, "int64": 2, "uint8": 3}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(RuntimeError):
    """Unreadable, corrupt, or incompatible checkpoint file."""


def poly_lr(t: int, total: int, base_lr: float, power: float = 0.9) -> float:
    """base_lr * (1 - t/total)^power, the classic poly decay."""
    if total <= 0:
        raise ValueError(f"total iterations must be positive, got {total}")
    if not 0 <= t <= total:
        raise ValueError(f"iteration {t} outside [0, {total}]")
    return base_lr * (1.0 - t / total) ** power


@dataclass
class TrainState:
    cnn: ConvStudent
    vit: AttentionStudent
    optimizer: torch.optim.AdamW
    iteration: int
    config: RunConfig
    labeled_set_size: int

    @property
    def ramp_iterations(self) -> int:
        return int(round(self.config.losses.ramp_fraction * self.config.training.iterations))


def build_train_state(config: RunConfig, height: int, width: int, labeled_set_size: int) -> TrainState:
    config.validate()
    conv_cfg, attn_cfg = config.model.student_configs(height, width)
    seed = config.training.seed
    cnn = build_student(conv_cfg, seed=derive_seed(seed, "init/cnn"))
    vit = build_student(attn_cfg, seed=derive_seed(seed, "init/vit"))
    optimizer = torch.optim.AdamW(
        list(cnn.parameters()) + list(vit.parameters()),
        lr=config.training.learning_rate,
        weight_decay=config.training.weight_decay,
        foreach=True,
    )
    return TrainState(
        cnn=cnn,
        vit=vit,
        optimizer=optimizer,
        iteration=0,
        config=config,
        labeled_set_size=labeled_set_size,
    )


def _to_tensor(array: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(array))


def _unsupervised_terms(
    state: TrainState, unlabeled: UnlabeledBatch, step: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Cross-distillation and feature-consistency terms on the unlabeled batch."""
    cfg = state.config
    zero = torch.zeros(())
    if unlabeled is None or not cfg.semi_supervised:
        return zero, zero
    images = _to_tensor(unlabeled.images)
    num_classes = cfg.model.num_classes

    if cfg.data.cutmix:
        # predictions on the clean images become box-mixed targets for the
        # students' predictions on the mixed images (same boxes throughout)
        with torch.no_grad():
            clean_cnn = state.cnn(images)
            clean_vit = state.vit(images)
        pseudo_cnn = clean_cnn.pseudo_labels.numpy()
        mixed_images, mixed_pseudo_cnn, boxes = data_mod.cutmix(
            unlabeled.images,
            pseudo_cnn,
            np.roll(unlabeled.images, 1, axis=0),
            np.roll(pseudo_cnn, 1, axis=0),
            derive_seed(cfg.training.seed, f"cutmix/{step}"),
        )
        out_cnn = state.cnn(_to_tensor(mixed_images))
        out_vit = state.vit(_to_tensor(mixed_images))

        def mix(tensor: torch.Tensor) -> torch.Tensor:
            arr = tensor.numpy()
            return _to_tensor(data_mod.apply_boxes(arr, np.roll(arr, 1, axis=0), boxes))

        cross = zero
        if cfg.losses.cross_distill:
            cross = losses_mod.kl_divergence(mix(clean_cnn.logits), out_vit.logits) + losses_mod.kl_divergence(
                mix(clean_vit.logits), out_cnn.logits
            )
            if cfg.losses.distill_normalizer == "labeled_set":
                cross = cross * (images.shape[0] / state.labeled_set_size)
        feature = zero
        if cfg.losses.feature_distill:
            feature = cross_feature_consistency(
                out_cnn,
                out_vit,
                num_classes,
                scope=cfg.losses.prototype_scope,
                labels_for_a=mix(clean_vit.pseudo_labels),
                labels_for_b=_to_tensor(mixed_pseudo_cnn),
            )
        return cross, feature

    out_cnn = state.cnn(images)
    out_vit = state.vit(images)
    cross = zero
    if cfg.losses.cross_distill:
        cross = losses_mod.cross_distillation_loss(
            out_cnn, out_vit, cfg.losses.distill_normalizer, state.labeled_set_size
        )
    feature = zero
    if cfg.losses.feature_distill:
        feature = cross_feature_consistency(out_cnn, out_vit, num_classes, scope=cfg.losses.prototype_scope)
    return cross, feature


def train_step(state: TrainState, labeled: LabeledBatch, unlabeled: UnlabeledBatch | None) -> dict:
    """One optimization step over both students; returns the metrics record."""
    cfg = state.config
    t = state.iteration
    lr = poly_lr(t, cfg.training.iterations, cfg.training.learning_rate)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    ramp = losses_mod.rampup(t, state.ramp_iterations) if cfg.semi_supervised else 0.0

    images = _to_tensor(labeled.images)
    masks = torch.from_numpy(labeled.masks)
    out_cnn = state.cnn(images)
    out_vit = state.vit(images)
    sup = losses_mod.supervised_loss(out_cnn, out_vit, masks)

    cross, feature = _unsupervised_terms(state, unlabeled, t)
    if cfg.losses.cross_distill:
        cross = cross + losses_mod.cross_distillation_loss(
            out_cnn, out_vit, cfg.losses.distill_normalizer, state.labeled_set_size
        )

    try:
        total, bundle = losses_mod.total_loss(sup, cross, feature, ramp, cfg.losses.lambda_feature)
    except FloatingPointError as err:
        raise FloatingPointError(f"iteration {t}: {err}") from err

    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    state.iteration = t + 1
    return {
        "iter": state.iteration,
        "lr": lr,
        "g": bundle.ramp,
        "loss_sup": bundle.sup,
        "loss_ccd": bundle.cross_distill,
        "loss_cfcd": bundle.feature_consistency,
        "loss_total": bundle.total,
    }


# --- checkpoint serialization -------------------------------------------------


def _named_tensors(state: TrainState) -> dict[str, torch.Tensor]:
    named: dict[str, torch.Tensor] = {}
    params: list[tuple[str, torch.nn.Parameter]] = []
    for prefix, model in (("cnn", state.cnn), ("vit", state.vit)):
        for name, param in model.named_parameters():
            params.append((f"{prefix}.{name}", param))
    for name, param in params:
        named[f"param/{name}"] = param.detach()
        opt_state = state.optimizer.state.get(param)
        if opt_state:
            named[f"adam/{name}/step"] = torch.as_tensor(opt_state["step"], dtype=torch.float64)
            named[f"adam/{name}/exp_avg"] = opt_state["exp_avg"]
            named[f"adam/{name}/exp_avg_sq"] = opt_state["exp_avg_sq"]
    return named


def save_checkpoint(state: TrainState, path: str | Path, extra: dict[str, np.ndarray] | None = None) -> None:
    """Binary checkpoint: 4-byte magic, version, then length-prefixed named blocks."""
    blocks = {name: tensor.detach().cpu().contiguous().numpy() for name, tensor in _named_tensors(state).items()}
    blocks["meta/iteration"] = np.array(state.iteration, dtype=np.int64)
    blocks["meta/seed"] = np.array(state.config.training.seed, dtype=np.int64)
    model_meta = json.dumps(
        {
            "num_classes": state.config.model.num_classes,
            "conv_widths": state.config.model.conv_widths,
            "patch_size": state.config.model.patch_size,
            "embed_dim": state.config.model.embed_dim,
            "num_heads": state.config.model.num_heads,
            "num_blocks": state.config.model.num_blocks,
            "mlp_ratio": state.config.model.mlp_ratio,
            "pos_embed": state.config.model.pos_embed,
            "max_tokens": state.vit.config.max_tokens,
        }
    ).encode()
    blocks["meta/model_config"] = np.frombuffer(model_meta, dtype=np.uint8).copy()
    if extra:
        blocks.update(extra)
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_blocks(out, blocks)


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    """Parse the named blocks of a checkpoint file."""
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    blocks: dict[str, np.ndarray] = {}
    offset = 12
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset : offset + name_len].decode()
            offset += name_len
            dtype_code, ndim = struct.unpack_from("<BB", blob, offset)
            offset += 2
            shape = struct.unpack_from(f"<{ndim}q", blob, offset)
            offset += 8 * ndim
            (nbytes,) = struct.unpack_from("<q", blob, offset)
            offset += 8
            raw = blob[offset : offset + nbytes]
            if len(raw) != nbytes:
                raise CheckpointError(f"{path}: truncated block {name!r}")
            offset += nbytes
            array = np.frombuffer(raw, dtype=_CODE_DTYPES[dtype_code]).reshape(shape).copy()
            blocks[name] = array
    except (struct.error, KeyError, ValueError) as err:
        raise CheckpointError(f"{path}: corrupt checkpoint ({err})") from err
    if offset != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after the last block")
    return blocks


def load_checkpoint(path: str | Path, config: RunConfig | None = None) -> TrainState:
    """Rebuild a TrainState from a checkpoint; optimizer hyperparameters come from the config."""
    blocks = read_checkpoint(path)
    meta = json.loads(bytes(blocks["meta/model_config"]).decode())
    config = config if config is not None else RunConfig()
    for key, value in meta.items():
        if key != "max_tokens":
            setattr(config.model, key, value)

    conv_cfg = StudentConfig(
        kind="conv",
        num_classes=config.model.num_classes,
        conv_widths=tuple(int(w) for w in str(config.model.conv_widths).split(",")),
    )
    attn_cfg = StudentConfig(
        kind="attention",
        num_classes=config.model.num_classes,
        patch_size=config.model.patch_size,
        embed_dim=config.model.embed_dim,
        num_heads=config.model.num_heads,
        num_blocks=config.model.num_blocks,
        mlp_ratio=config.model.mlp_ratio,
        pos_embed=config.model.pos_embed,
        max_tokens=int(meta["max_tokens"]),
    )
    cnn = ConvStudent(conv_cfg)
    vit = AttentionStudent(attn_cfg)

    named_params: dict[str, torch.nn.Parameter] = {}
    for prefix, model in (("cnn", cnn), ("vit", vit)):
        for name, param in model.named_parameters():
            named_params[f"{prefix}.{name}"] = param
    with torch.no_grad():
        for name, param in named_params.items():
            key = f"param/{name}"
            if key not in blocks:
                raise CheckpointError(f"{path}: missing parameter block {key!r}")
            value = torch.from_numpy(blocks[key])
            if value.shape != param.shape:
                raise CheckpointError(f"{path}: shape mismatch for {name}")
            param.copy_(value)

    optimizer = torch.optim.AdamW(
        list(cnn.parameters()) + list(vit.parameters()),
        lr=config.training.learning_rate,
        weight_decay=config.training.weight_decay,
        foreach=True,
    )
    for name, param in named_params.items():
        step_key = f"adam/{name}/step"
        if step_key in blocks:
            optimizer.state[param] = {
                "step": torch.tensor(float(blocks[step_key])),
                "exp_avg": torch.from_numpy(blocks[f"adam/{name}/exp_avg"]),
                "exp_avg_sq": torch.from_numpy(blocks[f"adam/{name}/exp_avg_sq"]),
            }

    state = TrainState(
        cnn=cnn,
        vit=vit,
        optimizer=optimizer,
        iteration=int(blocks["meta/iteration"]),
        config=config,
        labeled_set_size=1,
    )
    return state


# --- the full training loop ---------------------------------------------------


def _format_float(value: float) -> str:
    return repr(float(value))


def _metrics_row(record: dict, miou_cnn: float | None, miou_vit: float | None) -> str:
    cells = [
        str(record["iter"]),
        _format_float(record["lr"]),
        _format_float(record["g"]),
        _format_float(record["loss_sup"]),
        _format_float(record["loss_ccd"]),
        _format_float(record["loss_cfcd"]),
        _format_float(record["loss_total"]),
        "" if miou_cnn is None else _format_float(miou_cnn),
        "" if miou_vit is None else _format_float(miou_vit),
    ]
    return ",".join(cells)


def write_report(path: Path, entries: dict) -> None:
    lines = [f"{key}: {value}" for key, value in entries.items()]
    path.write_text("\n".join(lines) + "\n")


def parse_report(path: str | Path) -> dict[str, str]:
    entries = {}
    for line in Path(path).read_text().splitlines():
        if ": " in line:
            key, value = line.split(": ", 1)
            entries[key] = value
    return entries


def train(config: RunConfig, run_dir: str | Path, resume: bool = False, stop_after: int | None = None) -> dict:
    """Run the full loop; returns the final report entries.

    The run directory is self-describing: resolved config, partition file,
    append-only metrics CSV, checkpoints (last + best by the attention
    student's val mIoU), figures, and the final report.  ``stop_after``
    interrupts the loop at the given iteration (the schedules still follow
    ``training.iterations``), leaving a run that can be resumed.
    """
    from segcohort.config import dump_config  # deferred: config imports models

    config.validate()
    torch.set_num_threads(max(1, config.training.threads))
    run = Path(run_dir)
    run.mkdir(parents=True, exist_ok=True)
    (run / "checkpoints").mkdir(exist_ok=True)

    train_samples, manifest = data_mod.load_dataset(config.data.train_dir)
    val_samples, _ = data_mod.load_dataset(config.data.val_dir)
    if manifest["num_classes"] != config.model.num_classes:
        raise ConfigError(
            f"dataset has {manifest['num_classes']} classes but the model expects {config.model.num_classes}"
        )
    height, width = manifest["height"], manifest["width"]
    by_id = {s.id: s for s in train_samples}
    val_images = np.stack([s.image for s in val_samples])
    val_masks = np.stack([s.mask for s in val_samples])

    seed = config.training.seed
    partition = data_mod.partition_dataset(
        [s.id for s in train_samples], config.data.ratio(), derive_seed(seed, "partition")
    )
    data_mod.save_partition(partition, run / "partition.txt")
    if config.semi_supervised and not partition.unlabeled_ids:
        raise ConfigError("semi-supervised training requires a non-empty unlabeled set")

    (run / "config.resolved").write_text(dump_config(config))

    batch_size = config.training.batch_size
    labeled_stream = BatchStream(partition.labeled_ids, batch_size, derive_seed(seed, "labeled"), "labeled")
    unlabeled_stream = None
    if config.semi_supervised:
        unlabeled_stream = BatchStream(
            partition.unlabeled_ids, batch_size, derive_seed(seed, "unlabeled"), "unlabeled"
        )

    metrics_path = run / "metrics.csv"
    last_path = run / "checkpoints" / "last.ckpt"
    best_path = run / "checkpoints" / "best.ckpt"

    if resume:
        if not last_path.is_file():
            raise CheckpointError(f"cannot resume: no checkpoint at {last_path}")
        state = load_checkpoint(last_path, config)
        state.labeled_set_size = len(partition.labeled_ids)
        logger.info("resumed %s at iteration %d", run, state.iteration)
    else:
        state = build_train_state(config, height, width, len(partition.labeled_ids))
        metrics_path.write_text(METRICS_HEADER + "\n")

    total_iterations = config.training.iterations
    eval_interval = config.training.eval_interval
    best_miou = -1.0
    if resume and best_path.is_file():
        best_blocks = read_checkpoint(best_path)
        best_miou = float(best_blocks.get("meta/best_miou", np.array(-1.0)))

    report: dict = {}
    with open(metrics_path, "a") as metrics_file:
        while state.iteration < total_iterations:
            if stop_after is not None and state.iteration >= stop_after:
                save_checkpoint(state, last_path)
                logger.info("stopping early at iteration %d as requested", state.iteration)
                return {"iteration": state.iteration, "stopped": True}
            step = state.iteration
            labeled = data_mod.assemble_labeled(by_id, labeled_stream.batch_ids(step))
            unlabeled = None
            if unlabeled_stream is not None:
                unlabeled = data_mod.assemble_unlabeled(by_id, unlabeled_stream.batch_ids(step))
            record = train_step(state, labeled, unlabeled)

            miou_cnn = miou_vit = None
            if record["iter"] % eval_interval == 0 or record["iter"] == total_iterations:
                result = evaluate_pair(state.cnn, state.vit, val_images, val_masks)
                miou_cnn, miou_vit = result["miou_cnn"], result["miou_vit"]
                logger.info(
                    "iter %d/%d loss %.4f val mIoU cnn %.4f vit %.4f",
                    record["iter"], total_iterations, record["loss_total"], miou_cnn, miou_vit,
                )
                save_checkpoint(state, last_path)
                if miou_vit > best_miou:
                    best_miou = miou_vit
                    save_checkpoint(state, best_path, extra={"meta/best_miou": np.array(best_miou)})
                report = {
                    "iteration": record["iter"],
                    "miou_cnn": miou_cnn,
                    "miou_vit": miou_vit,
                    "pixel_acc_cnn": result["pixel_acc_cnn"],
                    "pixel_acc_vit": result["pixel_acc_vit"],
                    "per_class_iou_cnn": ",".join(f"{v:.6f}" for v in result["per_class_cnn"]),
                    "per_class_iou_vit": ",".join(f"{v:.6f}" for v in result["per_class_vit"]),
                }
            metrics_file.write(_metrics_row(record, miou_cnn, miou_vit) + "\n")
            metrics_file.flush()

    if "miou_vit" not in report:  # e.g. resuming an already finished run
        result = evaluate_pair(state.cnn, state.vit, val_images, val_masks)
        report = {
            "iteration": state.iteration,
            "miou_cnn": result["miou_cnn"],
            "miou_vit": result["miou_vit"],
            "pixel_acc_cnn": result["pixel_acc_cnn"],
            "pixel_acc_vit": result["pixel_acc_vit"],
            "per_class_iou_cnn": ",".join(f"{v:.6f}" for v in result["per_class_cnn"]),
            "per_class_iou_vit": ",".join(f"{v:.6f}" for v in result["per_class_vit"]),
        }
        save_checkpoint(state, last_path)
    report["best_miou_vit"] = best_miou
    report["labeled"] = len(partition.labeled_ids)
    report["unlabeled"] = len(partition.unlabeled_ids)
    report["note"] = "classes with zero union are excluded from miou"
    write_report(run / "report.txt", report)

    try:
        from segcohort.plotting import render_run_figures

        render_run_figures(metrics_path, run / "figures")
    except Exception as err:  # pragma: no cover - figures are best-effort
        logger.warning("figure rendering failed: %s", err)
    return report


def _write_blocks(path: Path, blocks: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blocks)))
        for name in sorted(blocks):
            array = np.ascontiguousarray(blocks[name])
            name_bytes = name.encode()
            fh.write(struct.pack("<H", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<BB", _DTYPE_CODES[str(array.dtype)], array.ndim))
            fh.write(struct.pack(f"<{array.ndim}q", *array.shape))
            raw = array.tobytes()
            fh.write(struct.pack("<q", len(raw)))
            fh.write(raw)
