"""Training loop, loss assembly, checkpointing, and the evaluation driver.

Training is single-threaded and fully deterministic for a given config:
model init, batch sampling, and every arithmetic step depend only on
the seeds in TrainConfig. Divergence (non-finite loss) aborts with the
previous step's parameters saved so the run is inspectable.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from . import tensor as tt
from .attention import attraction_loss, normal_grid, repulsion_loss
from .dataio import load_checkpoint, save_checkpoint
from .errors import (
    CheckpointLoadError,
    ConfigError,
    DegenerateMaskError,
    TrainingDivergedError,
    UndefinedMetricError,
)
from .metrics import MetricsRecord, aepe_partitioned, aggregate, downsample_occ_gt, moa, mma, mrd, write_metrics_csv
from .pipeline import FlowModel, ForwardResult, ModelConfig
from .refiner import upsample_flow_8x
from .scenegen import SceneSample
from .tensor import Tensor

log = logging.getLogger("tsaflow")

LOG_COLUMNS = ["step", "lr", "loss", "seq_loss", "repulsion", "attraction", "grad_norm"]


@dataclass
class TrainConfig:
    # schedule
    steps: int = 2000
    batch_size: int = 2
    lr: float = 2e-4
    warmup_steps: int = 200
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    # loss; the shared constraint weight scales the weighted sum of both
    # direct terms, whose per-term multipliers default equal
    constraint_weight: float = 0.6
    repulsion_weight: float = 1.0
    attraction_weight: float = 1.0
    seq_decay: float = 0.8
    # ablation flags, all independent
    use_ext_features: bool = True
    use_repulsion: bool = True
    use_attraction: bool = True
    use_gma_baseline: bool = False
    # model widths
    feat_channels: int = 48
    om_channels: int = 16
    attn_dim: int = 64
    hidden_channels: int = 64
    context_channels: int = 48
    motion_channels: int = 48
    premix_channels: int = 64
    head_channels: int = 48
    lookup_radius: int = 3
    iters: int = 6
    match_temperature: float = 1.0
    attn_temperature: float = 1.0
    dtype: str = "float32"
    # paths (optional; the API also accepts in-memory samples)
    train_dataset: Optional[str] = None
    eval_dataset: Optional[str] = None

    def validate(self) -> None:
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.warmup_steps < 0:
            raise ConfigError(f"warmup_steps must be >= 0, got {self.warmup_steps}")
        if self.constraint_weight < 0:
            raise ConfigError(f"constraint_weight must be >= 0, got {self.constraint_weight}")
        if self.repulsion_weight < 0:
            raise ConfigError(f"repulsion_weight must be >= 0, got {self.repulsion_weight}")
        if self.attraction_weight < 0:
            raise ConfigError(f"attraction_weight must be >= 0, got {self.attraction_weight}")
        if not (0.0 < self.seq_decay <= 1.0):
            raise ConfigError(f"seq_decay must be in (0, 1], got {self.seq_decay}")
        if self.grad_clip <= 0:
            raise ConfigError(f"grad_clip must be positive, got {self.grad_clip}")
        self.to_model_config().validate()

    def to_model_config(self) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def to_dict(self) -> dict:
        return asdict(self)


def train_config_from_dict(d: dict) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return TrainConfig(**d)


def downsample_flow_gt(flow_gt: np.ndarray) -> np.ndarray:
    """Average-pool full-res flow over 8x8 blocks, rescaled from pixels to cells."""
    c, h, w = flow_gt.shape
    pooled = flow_gt.reshape(c, h // 8, 8, w // 8, 8).mean(axis=(2, 4))
    return (pooled / 8.0).astype(np.float64)


def total_loss(
    flow_seq: list[Tensor],
    rect: Tensor,
    m: Tensor,
    om_n: Optional[np.ndarray],
    grid: np.ndarray,
    flow_gt: np.ndarray,
    cfg: TrainConfig,
) -> tuple[Tensor, dict]:
    """Decayed sequence loss plus flag-gated direct constraint terms.

    The propagated-flow term uses the same L1-to-GT form for both the
    masked (repulsion) and unmasked (propagation-baseline) variants; which
    flow arrived in `rect` is the caller's flag-driven choice. With every
    flag off this is exactly the sequence loss.
    """
    if not flow_seq:
        raise ConfigError("flow_seq must be nonempty")
    dtype = flow_seq[0].data.dtype
    gt = Tensor(np.asarray(flow_gt, dtype=dtype))
    n = len(flow_seq)
    seq: Optional[Tensor] = None
    for k, fl in enumerate(flow_seq):
        term = tt.l1_loss(fl, gt) * float(cfg.seq_decay ** (n - 1 - k))
        seq = term if seq is None else seq + term
    parts = {"seq_loss": float(seq.data), "repulsion": None, "attraction": None}
    constraints: Optional[Tensor] = None

    if cfg.use_repulsion or cfg.use_gma_baseline:
        rep = repulsion_loss(rect, gt) * float(cfg.repulsion_weight)
        parts["repulsion"] = float(rep.data)
        constraints = rep

    if cfg.use_attraction:
        mask = om_n if om_n is not None else np.ones(grid.shape[0], np.uint8)
        try:
            attr = attraction_loss(m, mask, grid) * float(cfg.attraction_weight)
            parts["attraction"] = float(attr.data)
            constraints = attr if constraints is None else constraints + attr
        except DegenerateMaskError:
            # every skip is logged, but only the first at warning level so a
            # cold-start run (occlusion scores high everywhere) stays readable
            level = logging.WARNING if not total_loss._skip_seen else logging.DEBUG
            total_loss._skip_seen = True
            log.log(level, "attraction term skipped: no non-occluded cells in this sample")

    total = seq if constraints is None else seq + constraints * float(cfg.constraint_weight)
    parts["loss"] = float(total.data)
    return total, parts


total_loss._skip_seen = False


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay."""

    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def clip_gradients(self) -> float:
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float((p.grad.astype(np.float64) ** 2).sum())
        norm = float(np.sqrt(total))
        limit = self.cfg.grad_clip
        if norm > limit:
            scale = limit / (norm + 1e-12)
            for p in self.params.values():
                if p.grad is not None:
                    p.grad *= scale
        return norm

    def apply(self, lr: float) -> None:
        c = self.cfg
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - c.beta1**t
        bc2 = 1.0 - c.beta2**t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + c.adam_eps)
            p.data -= (lr * (update + c.weight_decay * p.data)).astype(p.data.dtype)


def _lr_at(cfg: TrainConfig, step: int) -> float:
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    return cfg.lr


@dataclass
class TrainResult:
    model: FlowModel
    config: TrainConfig
    step: int
    log_rows: list[dict]
    checkpoint_path: Optional[str] = None


def write_train_log(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(LOG_COLUMNS)
        for r in rows:
            wr.writerow(["" if r.get(c) is None else r.get(c) for c in LOG_COLUMNS])


def train(
    cfg: TrainConfig,
    samples: list[SceneSample],
    checkpoint_path=None,
    log_path=None,
    progress: bool = False,
) -> TrainResult:
    cfg.validate()
    if not samples:
        raise ConfigError("training needs at least one sample")
    model = FlowModel(cfg.to_model_config(), seed=cfg.seed)
    params = model.params()
    log.info("training %d parameters for %d steps on %d scenes", model.param_count(), cfg.steps, len(samples))
    opt = AdamW(params, cfg)
    batch_rng = np.random.default_rng(cfg.seed + 1)
    gt_ds = [downsample_flow_gt(s.flow_gt) for s in samples]

    rows: list[dict] = []
    prev_params = {k: p.data.copy() for k, p in params.items()}
    started = time.time()
    for step in range(cfg.steps):
        lr = _lr_at(cfg, step)
        idx = batch_rng.integers(0, len(samples), size=cfg.batch_size)
        tt.clear_graph()
        opt.zero_grad()
        batch_total: Optional[Tensor] = None
        parts_sum = {"seq_loss": 0.0, "repulsion": 0.0, "attraction": 0.0}
        parts_n = {"repulsion": 0, "attraction": 0}
        for i in idx:
            res = model.forward(samples[i].frame0, samples[i].frame1)
            li, parts = total_loss(res.flows, res.rect, res.m, res.om_n, res.grid, gt_ds[i], cfg)
            batch_total = li if batch_total is None else batch_total + li
            parts_sum["seq_loss"] += parts["seq_loss"]
            for key in ("repulsion", "attraction"):
                if parts[key] is not None:
                    parts_sum[key] += parts[key]
                    parts_n[key] += 1
        batch_total = batch_total * (1.0 / cfg.batch_size)
        loss_val = float(batch_total.data)
        if not np.isfinite(loss_val):
            tt.clear_graph()
            diag = f"non-finite loss {loss_val} at step {step}"
            saved = None
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, {k: v for k, v in prev_params.items()}, cfg.to_dict(), step)
                saved = str(checkpoint_path)
            if log_path is not None:
                write_train_log(log_path, rows)
            raise TrainingDivergedError(diag, checkpoint_path=saved)
        prev_params = {k: p.data.copy() for k, p in params.items()}
        tt.backward(batch_total)
        gnorm = opt.clip_gradients()
        opt.apply(lr)
        rows.append({
            "step": step,
            "lr": lr,
            "loss": loss_val,
            "seq_loss": parts_sum["seq_loss"] / cfg.batch_size,
            "repulsion": parts_sum["repulsion"] / parts_n["repulsion"] if parts_n["repulsion"] else None,
            "attraction": parts_sum["attraction"] / parts_n["attraction"] if parts_n["attraction"] else None,
            "grad_norm": gnorm,
        })
        if progress and (step % 100 == 0 or step == cfg.steps - 1):
            print(f"  step {step:5d}  loss {loss_val:.4f}  ({time.time() - started:.0f}s)", flush=True)

    path = None
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, {k: p.data for k, p in params.items()}, cfg.to_dict(), cfg.steps)
        path = str(checkpoint_path)
    if log_path is not None:
        write_train_log(log_path, rows)
    return TrainResult(model=model, config=cfg, step=cfg.steps, log_rows=rows, checkpoint_path=path)


def load_model(path) -> tuple[FlowModel, TrainConfig, int]:
    arrays, config, step = load_checkpoint(path)
    cfg = train_config_from_dict(config)
    model = FlowModel(cfg.to_model_config(), seed=cfg.seed)
    params = model.params()
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if missing or extra:
        raise CheckpointLoadError(f"parameter keys differ: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for k, p in params.items():
        arr = arrays[k]
        if arr.shape != p.data.shape or arr.dtype != p.data.dtype:
            raise CheckpointLoadError(
                f"parameter {k!r}: checkpoint has {arr.shape} {arr.dtype}, model wants {p.data.shape} {p.data.dtype}"
            )
        p.data = arr
    return model, cfg, step


def evaluate_sample(model: FlowModel, sample: SceneSample, index: int = 0) -> tuple[dict, ForwardResult]:
    """All metric columns for one image: attention quality, then endpoint error
    of the raw match, the rectified flow, and the final refined flow."""
    with tt.no_grad():
        res = model.forward(sample.frame0, sample.frame1)
    cells = downsample_occ_gt(sample.occ_gt)
    m = res.m.data
    grid = res.grid
    row: dict = {"index": index}

    attention_metrics = {
        "moa_noc": lambda: moa(m, cells.occ, cells.non_occ),
        "moa_occ": lambda: moa(m, cells.occ, cells.occ),
        "mrd_noc": lambda: mrd(m, cells.non_occ, grid),
        "mma_noc": lambda: mma(m, cells.non_occ),
        "mma_occ": lambda: mma(m, cells.occ),
    }
    for key, fn in attention_metrics.items():
        try:
            row[key] = fn()
        except UndefinedMetricError as exc:
            row[key] = None
            log.debug("image %d: %s undefined (%s)", index, key, exc)

    variants = {
        "match": res.match.flow.data,
        "rect": res.rect.data,
        "": res.final_flow.data,
    }
    for prefix, cell_flow in variants.items():
        full = upsample_flow_8x(cell_flow)
        part = aepe_partitioned(full, sample.flow_gt, sample.occ_gt, sample.occ_in, sample.occ_out)
        for k, v in part.items():
            row[f"{prefix}_{k}" if prefix else k] = v
    return row, res


def evaluate(model: FlowModel, samples: list[SceneSample], out_dir=None, tag: str = "eval") -> tuple[list[dict], dict]:
    """Per-image metric rows and their lower-median summary; optionally writes
    per-image CSV, summary CSV, and report figures under out_dir."""
    rows = []
    for i, s in enumerate(samples):
        row, _ = evaluate_sample(model, s, index=i)
        rows.append(row)
    summary = aggregate(rows)
    if out_dir is not None:
        import os

        os.makedirs(out_dir, exist_ok=True)
        write_metrics_csv(os.path.join(out_dir, f"{tag}_per_image.csv"), rows)
        write_metrics_csv(os.path.join(out_dir, f"{tag}_summary.csv"), [{"metric": k, "median": v} for k, v in summary.items()])
        from .report import render_metric_scatter

        render_metric_scatter(os.path.join(out_dir, f"{tag}_metrics.png"), rows)
    return rows, summary


ABLATION_GRID = [
    ("baseline", dict(use_ext_features=False, use_repulsion=False, use_attraction=False, use_gma_baseline=True)),
    ("ext", dict(use_ext_features=True, use_repulsion=False, use_attraction=False, use_gma_baseline=True)),
    ("ext_rep", dict(use_ext_features=True, use_repulsion=True, use_attraction=False, use_gma_baseline=False)),
    ("ext_rep_attr", dict(use_ext_features=True, use_repulsion=True, use_attraction=True, use_gma_baseline=False)),
]


def ablate(
    base_cfg: TrainConfig,
    train_samples: list[SceneSample],
    eval_samples: list[SceneSample],
    out_dir=None,
    progress: bool = False,
) -> dict[str, dict]:
    """Trains the four-row flag grid on identical data and returns each row's
    evaluation summary keyed by row name."""
    import os

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    results: dict[str, dict] = {}
    for name, flags in ABLATION_GRID:
        cfg = train_config_from_dict({**base_cfg.to_dict(), **flags})
        if progress:
            print(f"[{name}] training {cfg.steps} steps", flush=True)
        ckpt = os.path.join(out_dir, f"{name}.tsac") if out_dir else None
        logp = os.path.join(out_dir, f"{name}_train_log.csv") if out_dir else None
        tr = train(cfg, train_samples, checkpoint_path=ckpt, log_path=logp, progress=progress)
        _, summary = evaluate(tr.model, eval_samples, out_dir=out_dir, tag=name)
        results[name] = summary
    if out_dir is not None:
        rows = [{"model": name, **summary} for name, summary in results.items()]
        cols = list(rows[0].keys())
        with open(os.path.join(out_dir, "ablation_summary.csv"), "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(cols)
            for r in rows:
                wr.writerow(["" if r.get(c) is None else r.get(c) for c in cols])
        from .report import render_ablation_bars

        render_ablation_bars(os.path.join(out_dir, "ablation_summary.png"), results)
    return results
