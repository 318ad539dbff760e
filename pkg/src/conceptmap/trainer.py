"""Training loop, metrics, mask-ratio sweep, and checkpoint persistence.

Determinism contract: all per-step randomness (epoch shuffles, mask plans,
swap masks) is derived from the configured seeds plus the step or epoch
index, never from shared mutable generators. A run can therefore be
resumed bitwise from any step given the checkpointed seeds and counter,
as long as execution is single-threaded.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
import time
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor, backward
from .data import ConceptBank, DatasetRecord, prototypes_for
from .errors import (CheckpointIntegrityError, CheckpointVersionError,
                     ConfigError, ContractError, NumericError)
from .layers import AdamW
from .losses import (LossWeights, disentangle_from_forward, masked_recon_loss,
                     sample_single_hot, total_loss, weighted_concept_loss)
from .model import ConceptMapModel, ModelConfig, make_mask_plan

PSNR_CEILING = 99.0
CHECKPOINT_MAGIC = b"MCMCKPT1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    mask_ratio: float = 0.25
    mask_shape: str = "random"
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-3
    weight_decay: float = 0.01
    seed_init: int = 0
    seed_data: int = 1
    seed_mask: int = 2
    eval_interval: int = 0          # 0: never evaluate mid-run
    preset: str = "tiny"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError(f"mask ratio must be in [0, 1], got {self.mask_ratio}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        for name in ("seed_init", "seed_data", "seed_mask"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    masked_mse: float
    masked_psnr: float
    loss_recon: float
    loss_disentangle: float
    loss_concept: float
    wall_seconds: float
    per_concept_recall: list = field(default_factory=list)


@dataclass
class TrainingRun:
    records: list
    step: int
    seconds: float

    def log_lines(self):
        yield "step,l_re,l_dis,l_concept,total,wall_ms"
        for r in self.records:
            yield (f"{r['step']},{r['l_re']!r},{r['l_dis']!r},"
                   f"{r['l_concept']!r},{r['total']!r},{r['wall_ms']:.3f}")


def _derived_int_seed(*parts) -> int:
    return int(np.random.default_rng(list(parts)).integers(0, 2 ** 62))


def _stack_batch(records, dtype):
    images = np.stack([r.image for r in records]).astype(dtype)
    attrs = np.stack([r.attributes for r in records])
    return images, attrs


def _batch_prototypes(records, bank: ConceptBank) -> np.ndarray:
    return np.stack([prototypes_for(r, bank) for r in records])


def compose_visible(recon_patches: np.ndarray, target_patches: np.ndarray,
                    visible_idx: np.ndarray) -> np.ndarray:
    """Paste ground-truth visible patches into the reconstruction."""
    out = recon_patches.copy()
    out[..., visible_idx, :] = target_patches[..., visible_idx, :]
    return out


# ---------------------------------------------------------------------------
# loss assembly shared by train and evaluate


def compute_loss_parts(model: ConceptMapModel, images, prototypes_bankspace,
                       ratio: float, plan_seed: int, hot, bank: ConceptBank,
                       lw: LossWeights, mask_shape: str = "random"):
    """One forward pass plus all requested loss parts.

    Returns (parts dict, forward output). Parts whose coefficient is zero
    are skipped entirely.
    """
    cfg = model.cfg
    proto_arg = prototypes_bankspace if cfg.variant == "fixed_concepts" else None
    fwd = model.forward(images, ratio, plan_seed, prototypes=proto_arg,
                        mask_shape=mask_shape)
    parts = {"recon": masked_recon_loss(fwd.recon_patches, fwd.target_patches,
                                        fwd.plan.masked)}
    if lw.beta > 0:
        proto_t = model.project_prototypes(
            Tensor(np.asarray(prototypes_bankspace, dtype=cfg.np_dtype)))
        parts["concept"] = weighted_concept_loss(fwd.concepts_final, proto_t, lw)
    if lw.alpha > 0:
        parts["disentangle"] = disentangle_from_forward(model, fwd, hot, bank)
    return parts, fwd


def train(model: ConceptMapModel, dataset, bank: ConceptBank, cfg: TrainConfig,
          optimizer: AdamW | None = None, start_step: int = 0,
          log_path=None) -> TrainingRun:
    """Seeded training; one fresh mask plan per step, shared across the batch.

    ``start_step`` continues a resumed run: the step counter alone decides
    which epoch permutation, mask plan, and swap mask each step sees.
    """
    if not dataset:
        raise ContractError("empty dataset")
    if optimizer is None:
        optimizer = AdamW(model.registry, lr=cfg.lr, weight_decay=cfg.weight_decay)
    lw = cfg.weights
    n = len(dataset)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    target_steps = cfg.epochs * steps_per_epoch
    records = []
    run_start = time.perf_counter()
    step = start_step
    perm = None
    current_epoch = -1
    while step < target_steps:
        epoch = step // steps_per_epoch
        if epoch != current_epoch:
            perm = np.random.default_rng([cfg.seed_data, epoch]).permutation(n)
            current_epoch = epoch
        lo = (step % steps_per_epoch) * cfg.batch_size
        batch = [dataset[i] for i in perm[lo:lo + cfg.batch_size]]
        images, _ = _stack_batch(batch, model.cfg.np_dtype)
        protos = _batch_prototypes(batch, bank)
        plan_seed = _derived_int_seed(cfg.seed_mask, step, 0)
        hot = sample_single_hot(model.cfg.num_concepts,
                                np.random.default_rng([cfg.seed_mask, step, 1]))
        t0 = time.perf_counter()
        try:
            parts, _ = compute_loss_parts(model, images, protos, cfg.mask_ratio,
                                          plan_seed, hot, bank, lw, cfg.mask_shape)
            loss = total_loss(parts, lw)
        except NumericError as exc:
            detail = {k: float(v.data) for k, v in locals().get("parts", {}).items()
                      if v is not None}
            raise NumericError(
                f"aborting at step {step}: {exc} (components {detail})") from exc
        backward(loss)
        # parameters a variant legitimately never touches (e.g. the mask token
        # at ratio 0) still take the decoupled-decay step, with zero gradient
        for _, p in model.registry.items():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        optimizer.step()
        optimizer.zero_grads()
        wall_ms = (time.perf_counter() - t0) * 1e3
        step += 1
        records.append({
            "step": step,
            "l_re": float(parts["recon"].data),
            "l_dis": float(parts["disentangle"].data) if "disentangle" in parts else 0.0,
            "l_concept": float(parts["concept"].data) if "concept" in parts else 0.0,
            "total": float(loss.data),
            "wall_ms": wall_ms,
        })
    run = TrainingRun(records=records, step=step,
                      seconds=time.perf_counter() - run_start)
    if log_path is not None:
        Path(log_path).write_text("\n".join(run.log_lines()) + "\n")
    return run


# ---------------------------------------------------------------------------
# prediction and metrics


def predict_concepts(concepts: np.ndarray, bank: ConceptBank,
                     model: ConceptMapModel | None = None) -> np.ndarray:
    """Per-position nearest-prototype decision: true iff the positive
    prototype is at least as close (cosine) as the antonym. Zero-norm rows
    fall back to a raw dot-product comparison with a warning."""
    concepts = np.asarray(concepts)
    if concepts.ndim == 2:
        concepts = concepts[None]
    pos, ant = bank.positive, bank.antonym
    if model is not None:
        pos = model.project_prototypes_data(pos)
        ant = model.project_prototypes_data(ant)
    pos_n = pos / np.linalg.norm(pos, axis=-1, keepdims=True)
    ant_n = ant / np.linalg.norm(ant, axis=-1, keepdims=True)
    norms = np.linalg.norm(concepts, axis=-1)
    if np.any(norms == 0.0):
        warnings.warn("zero-norm concept row; deciding by raw dot product")
    safe = np.where(norms == 0.0, 1.0, norms)[..., None]
    rows = concepts / safe
    score_pos = np.einsum("bme,me->bm", rows, pos_n)
    score_ant = np.einsum("bme,me->bm", rows, ant_n)
    return score_pos >= score_ant


def confusion_counts(pred: np.ndarray, true: np.ndarray) -> np.ndarray:
    """[M, 4] per-concept (tp, fp, fn, tn)."""
    pred = np.asarray(pred, dtype=bool)
    true = np.asarray(true, dtype=bool)
    tp = (pred & true).sum(axis=0)
    fp = (pred & ~true).sum(axis=0)
    fn = (~pred & true).sum(axis=0)
    tn = (~pred & ~true).sum(axis=0)
    return np.stack([tp, fp, fn, tn], axis=-1)


def macro_metrics(counts: np.ndarray):
    """Macro accuracy / precision / recall / F1 with zero-division -> 0."""
    tp, fp, fn, tn = (counts[:, i].astype(np.float64) for i in range(4))
    total = tp + fp + fn + tn
    acc = float(((tp + tn) / total).mean())
    prec = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1), 0.0)
    rec = np.where(tp + fn > 0, tp / np.maximum(tp + fn, 1), 0.0)
    f1 = np.where(prec + rec > 0, 2 * prec * rec / np.maximum(prec + rec, 1e-300), 0.0)
    return acc, float(prec.mean()), float(rec.mean()), float(f1.mean()), rec


def psnr_from_mse(mse: float, ceiling: float = PSNR_CEILING) -> float:
    if mse <= 0.0:
        return ceiling
    return min(ceiling, -10.0 * math.log10(mse))


def evaluate(model: ConceptMapModel, dataset, bank: ConceptBank,
             test_ratio: float, seed: int, batch_size: int = 32,
             lw: LossWeights | None = None, mask_shape: str = "random") -> MetricsReport:
    """Deterministic metrics pass at a fixed test-time mask ratio.

    The reconstruction metric pastes visible patches through, so only
    genuinely reconstructed (masked) pixels are scored; with nothing masked
    the score saturates at the PSNR ceiling.
    """
    if not dataset:
        raise ContractError("empty dataset")
    lw = lw or LossWeights()
    t0 = time.perf_counter()
    counts = np.zeros((model.cfg.num_concepts, 4), dtype=np.int64)
    sq_sum, px_count = 0.0, 0
    part_sums = {"recon": 0.0, "disentangle": 0.0, "concept": 0.0}
    batches = 0
    for bi, lo in enumerate(range(0, len(dataset), batch_size)):
        batch = dataset[lo:lo + batch_size]
        images, attrs = _stack_batch(batch, model.cfg.np_dtype)
        protos = _batch_prototypes(batch, bank)
        plan_seed = _derived_int_seed(seed, bi, 0)
        hot = sample_single_hot(model.cfg.num_concepts,
                                np.random.default_rng([seed, bi, 1]))
        parts, fwd = compute_loss_parts(model, images, protos, test_ratio,
                                        plan_seed, hot, bank, lw, mask_shape)
        for k, v in parts.items():
            part_sums[k] += float(v.data)
        batches += 1
        pred = predict_concepts(fwd.concepts_final.data, bank, model)
        counts += confusion_counts(pred, attrs)
        composite = compose_visible(fwd.recon_patches.data, fwd.target_patches,
                                    fwd.plan.visible)
        idx = fwd.plan.masked if fwd.plan.num_masked else np.arange(model.cfg.num_patches)
        diff = composite[:, idx, :] - fwd.target_patches[:, idx, :]
        sq_sum += float((diff * diff).sum())
        px_count += diff.size
    mse = sq_sum / px_count
    acc, prec, rec, f1, rec_per = macro_metrics(counts)
    return MetricsReport(
        accuracy=acc, precision=prec, recall=rec, f1=f1,
        masked_mse=mse, masked_psnr=psnr_from_mse(mse),
        loss_recon=part_sums["recon"] / batches,
        loss_disentangle=part_sums["disentangle"] / batches,
        loss_concept=part_sums["concept"] / batches,
        wall_seconds=time.perf_counter() - t0,
        per_concept_recall=[float(r) for r in rec_per],
    )


# ---------------------------------------------------------------------------
# mask-ratio sweep

SWEEP_HEADER = "ratio,accuracy,precision,recall,f1,masked_mse,masked_psnr,train_seconds"


def mask_ratio_sweep(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset,
                     bank: ConceptBank, ratios, csv_path=None, test_seed: int = 0,
                     test_ratio: float | None = None):
    """Train one model per ratio from the same init seed; report metrics and
    wall-clock training time. ``test_ratio`` defaults to each training ratio."""
    rows = []
    for ratio in ratios:
        if not 0.0 <= ratio <= 1.0:
            raise ConfigError(f"sweep ratio {ratio} outside [0, 1]")
        run_cfg = dataclasses.replace(train_cfg, mask_ratio=ratio)
        model = ConceptMapModel(model_cfg)
        model.init_params(run_cfg.seed_init)
        run = train(model, dataset, bank, run_cfg)
        report = evaluate(model, dataset, bank,
                          ratio if test_ratio is None else test_ratio, test_seed)
        rows.append((ratio, report, run.seconds))
    if csv_path is not None:
        lines = [SWEEP_HEADER]
        for ratio, report, seconds in rows:
            lines.append(f"{ratio},{report.accuracy:.6f},{report.precision:.6f},"
                         f"{report.recall:.6f},{report.f1:.6f},{report.masked_mse:.8f},"
                         f"{report.masked_psnr:.4f},{seconds:.3f}")
        Path(csv_path).write_text("\n".join(lines) + "\n")
    return rows


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict
    opt_arrays: dict
    opt_hyper: dict
    rng_states: dict
    step: int
    extra: dict = field(default_factory=dict)

    def ensure_matches(self, expected: ModelConfig) -> None:
        mine = self.config.to_dict()
        theirs = expected.to_dict()
        diff = [k for k in mine if mine[k] != theirs.get(k)]
        if diff:
            detail = {k: (mine[k], theirs.get(k)) for k in diff}
            raise ConfigError(f"checkpoint/model config mismatch in fields {detail}")


_DTYPE_TAGS = {"float32": "<f4", "float64": "<f8"}


def save_checkpoint(path, model: ConceptMapModel, optimizer: AdamW,
                    rng_states: dict, step: int, extra: dict | None = None) -> None:
    """Binary layout: magic, version, canonical JSON meta, name-sorted raw
    little-endian blobs (params then optimizer moments), trailing CRC32."""
    params = dict(model.registry.items())
    opt_arrays = optimizer.state_arrays()
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.cfg.to_dict(),
        "step": int(step),
        "extra": extra or {},
        "rng_states": rng_states,
        "optimizer": {
            "lr": optimizer.lr, "weight_decay": optimizer.weight_decay,
            "beta1": optimizer.beta1, "beta2": optimizer.beta2,
            "eps": optimizer.eps, "step_count": optimizer.step_count,
        },
        "params": [{"name": k, "shape": list(params[k].shape),
                    "dtype": str(params[k].dtype)} for k in sorted(params)],
        "opt_arrays": [{"name": k, "shape": list(opt_arrays[k].shape),
                        "dtype": str(opt_arrays[k].dtype)} for k in sorted(opt_arrays)],
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = bytearray()
    payload += CHECKPOINT_MAGIC
    payload += struct.pack("<I", CHECKPOINT_VERSION)
    payload += struct.pack("<Q", len(meta_bytes))
    payload += meta_bytes
    for name in sorted(params):
        payload += params[name].data.astype(_DTYPE_TAGS[str(params[name].dtype)]).tobytes()
    for name in sorted(opt_arrays):
        payload += opt_arrays[name].astype(_DTYPE_TAGS[str(opt_arrays[name].dtype)]).tobytes()
    payload += struct.pack("<I", zlib.crc32(bytes(payload)))
    Path(path).write_bytes(bytes(payload))


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < len(CHECKPOINT_MAGIC) + 16:
        raise CheckpointIntegrityError(f"{path}: file too short")
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointVersionError(f"{path}: bad magic, not a checkpoint")
    crc_stored = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) != crc_stored:
        raise CheckpointIntegrityError(f"{path}: checksum mismatch (truncated or corrupt)")
    off = len(CHECKPOINT_MAGIC)
    version = struct.unpack_from("<I", blob, off)[0]
    off += 4
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    meta_len = struct.unpack_from("<Q", blob, off)[0]
    off += 8
    meta = json.loads(blob[off:off + meta_len].decode("utf-8"))
    off += meta_len

    def take(entries):
        nonlocal off
        out = {}
        for e in entries:
            count = int(np.prod(e["shape"])) if e["shape"] else 1
            tag = _DTYPE_TAGS[e["dtype"]]
            nbytes = count * int(tag[-1])
            arr = np.frombuffer(blob, dtype=tag, count=count, offset=off)
            out[e["name"]] = arr.reshape(e["shape"]).astype(e["dtype"])
            off += nbytes
        return out

    params = take(meta["params"])
    opt_arrays = take(meta["opt_arrays"])
    return Checkpoint(config=ModelConfig.from_dict(meta["model_config"]),
                      params=params, opt_arrays=opt_arrays,
                      opt_hyper=meta["optimizer"], rng_states=meta["rng_states"],
                      step=meta["step"], extra=meta.get("extra", {}))


def restore_model(ckpt: Checkpoint):
    """Rebuild the model and optimizer exactly as checkpointed."""
    model = ConceptMapModel(ckpt.config)
    for name, p in model.registry.items():
        if name not in ckpt.params:
            raise CheckpointIntegrityError(f"checkpoint is missing parameter {name}")
        p.data[...] = ckpt.params[name]
    optimizer = AdamW(model.registry, lr=ckpt.opt_hyper["lr"],
                      weight_decay=ckpt.opt_hyper["weight_decay"],
                      beta1=ckpt.opt_hyper["beta1"], beta2=ckpt.opt_hyper["beta2"],
                      eps=ckpt.opt_hyper["eps"])
    optimizer.load_state(ckpt.opt_arrays, ckpt.opt_hyper["step_count"])
    return model, optimizer
