"""Training loop, evaluation and multi-seed suites."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import tensor as T
from .data import (DataError, Manifest, SynthConfig, apply_cap, augment, balanced_batches,
                   compute_stats, generate_synthetic, load_arrays, read_manifest)
from .layers import GrlConfig
from .losses import BatchLabels, LossConfig, batch_losses
from .model import DannConfig, DannModel, load_checkpoint, save_checkpoint
from .optim import Adam, OneCycleSchedule

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step
        self.value = value


@dataclass
class ScheduleConfig:
    max_lr: float = 1e-3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    pct_ramp_up: float = 0.3
    domain_lr_mult: float = 1.0          # step-size multiplier for domain-head parameters


@dataclass
class DataConfig:
    """Either a manifest CSV or the synthetic generator (when ``manifest`` is None)."""

    manifest: str | None = None
    synth: SynthConfig = field(default_factory=SynthConfig)
    cap: int = 1600
    augment: bool = False
    workers: int = 1

    def __post_init__(self):
        if isinstance(self.synth, dict):
            self.synth = SynthConfig(**self.synth)


@dataclass
class RunConfig:
    model: DannConfig = field(default_factory=DannConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    data: DataConfig = field(default_factory=DataConfig)
    epochs_per_cycle: int = 5
    cycles: int = 3
    batch_size: int = 32
    seed: int = 0
    mode: str = "dann"
    dtype: str = "float32"
    reset_moments_per_cycle: bool = False
    output_dir: str | None = None
    eval_every_epoch: bool = True

    def __post_init__(self):
        for name, typ in (("model", DannConfig), ("loss", LossConfig), ("schedule", ScheduleConfig),
                          ("data", DataConfig)):
            val = getattr(self, name)
            if isinstance(val, dict):
                setattr(self, name, typ(**val))
        if self.mode not in ("dann", "baseline"):
            raise ValueError(f"mode must be 'dann' or 'baseline', got {self.mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.epochs_per_cycle < 1 or self.cycles < 1:
            raise ValueError("epochs_per_cycle and cycles must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def resolved_model_config(self) -> DannConfig:
        """Model config with the seed tied to the run and λ forced to 0 in baseline mode."""
        grl = self.model.grl
        if self.mode == "baseline":
            grl = GrlConfig(lam=0.0)
        return dataclasses.replace(self.model, grl=grl, seed=self.seed)


@dataclass
class EpochRecord:
    epoch: int
    cycle: int
    total_loss: float
    cell_loss: float
    domain_loss: float
    source_cell_acc: float
    target_cell_acc: float | None
    domain_acc: float
    lr: float
    wall_time: float


@dataclass
class MetricLog:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch != self.records[-1].epoch + 1:
            raise ValueError("epoch indices must be consecutive")
        self.records.append(rec)

    def rows(self) -> list[dict[str, Any]]:
        return [dataclasses.asdict(r) for r in self.records]

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for row in self.rows():
                fh.write(json.dumps(row) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> MetricLog:
        out = cls()
        for line in Path(path).read_text().splitlines():
            if line.strip():
                out.records.append(EpochRecord(**json.loads(line)))
        return out


@dataclass
class DataBundle:
    """Preprocessed arrays for the train and test splits."""

    train_x: np.ndarray
    train_y_cell: np.ndarray
    train_y_domain: np.ndarray
    test_x: np.ndarray
    test_y_cell: np.ndarray
    test_y_domain: np.ndarray
    manifest: Manifest


_SYNTH_CACHE: dict[str, DataBundle] = {}


def prepare_data(cfg: RunConfig) -> DataBundle:
    """Load or generate the manifest, cap it, fit normalization on the train split, load arrays."""
    dtype = np.dtype(cfg.dtype)
    key = None
    if cfg.data.manifest is None:
        key = json.dumps([dataclasses.asdict(cfg.data.synth), cfg.data.cap, cfg.model.patch_size, cfg.dtype],
                         sort_keys=True)
        if key in _SYNTH_CACHE:
            return _SYNTH_CACHE[key]
        manifest = apply_cap(generate_synthetic(cfg.data.synth), cfg.data.cap, cfg.data.synth.seed)
    else:
        manifest = read_manifest(cfg.data.manifest, cfg.data.cap, cfg.seed)
    if manifest.mean is None:
        compute_stats(manifest, "train")
    train, test = manifest.subset("train"), manifest.subset("test")
    if not train.records:
        raise DataError("manifest has no training records")
    s = cfg.model.patch_size
    tr_c, tr_d = train.labels()
    te_c, te_d = test.labels()
    bundle = DataBundle(load_arrays(train, s, dtype, cfg.data.workers), tr_c, tr_d,
                        load_arrays(test, s, dtype, cfg.data.workers), te_c, te_d, manifest)
    if key is not None:
        _SYNTH_CACHE[key] = bundle
    return bundle


def trainable_parameters(model: DannModel, mode: str) -> list[T.Tensor]:
    if mode == "baseline":
        return [p for name, p in model.named_parameters() if not name.startswith("domain_head.")]
    return model.parameters()


def predict(model: DannModel, images: np.ndarray, batch_size: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode (p_cell, p_domain) for every image."""
    was = model.training
    model.eval()
    pc, pd = [], []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            out = model(T.Tensor(images[i:i + batch_size]))
            pc.append(out.p_cell.data)
            pd.append(out.p_domain.data)
    model.train(was)
    if not pc:
        return np.zeros(0), np.zeros(0)
    return np.concatenate(pc), np.concatenate(pd)


def _threshold(p: np.ndarray) -> np.ndarray:
    # ties at exactly 0.5 go to class 0
    return (p > 0.5).astype(np.int64)


def score(p_cell, p_domain, y_cell, y_domain) -> dict[str, Any]:
    pred_c = _threshold(p_cell)
    pred_d = _threshold(p_domain)
    out: dict[str, Any] = {"n": int(len(y_cell))}
    for d, name in ((0, "source"), (1, "target")):
        sel = y_domain == d
        out[f"{name}_n"] = int(sel.sum())
        out[f"{name}_cell_acc"] = float((pred_c[sel] == y_cell[sel]).mean()) if sel.any() else None
        out[f"{name}_confusion"] = {
            "tp": int(((pred_c == 1) & (y_cell == 1) & sel).sum()),
            "fp": int(((pred_c == 1) & (y_cell == 0) & sel).sum()),
            "tn": int(((pred_c == 0) & (y_cell == 0) & sel).sum()),
            "fn": int(((pred_c == 0) & (y_cell == 1) & sel).sum()),
        }
    out["cell_acc"] = float((pred_c == y_cell).mean())
    out["domain_acc"] = float((pred_d == y_domain).mean())
    return out


def evaluate_model(model: DannModel, images: np.ndarray, y_cell, y_domain) -> dict[str, Any]:
    if len(images) == 0:
        raise DataError("cannot evaluate an empty split")
    pc, pd = predict(model, images)
    return score(pc, pd, np.asarray(y_cell), np.asarray(y_domain))


def evaluate(checkpoint, split: str = "test", manifest_path: str | None = None) -> dict[str, Any]:
    """Reload a checkpoint and its run config, then score ``split`` with target labels visible."""
    model, header, _ = load_checkpoint(checkpoint)
    run = RunConfig(**header["extra"]["run_config"])
    if manifest_path is not None:
        run.data.manifest = manifest_path
    bundle = prepare_data(run)
    if split == "train":
        x, yc, yd = bundle.train_x, bundle.train_y_cell, bundle.train_y_domain
    else:
        x, yc, yd = bundle.test_x, bundle.test_y_cell, bundle.test_y_domain
    return evaluate_model(model, x.astype(model.parameters()[0].dtype, copy=False), yc, yd)


@dataclass
class TrainResult:
    model: DannModel
    log: MetricLog
    checkpoint: Path | None
    final_eval: dict[str, Any]
    optimizer: Adam
    steps: int


def train(cfg: RunConfig, data: DataBundle | None = None, step_hook=None, epoch_hook=None) -> TrainResult:
    """Run ``cycles`` one-cycle schedules of ``epochs_per_cycle`` epochs each.

    ``step_hook(step, model)`` is called after each optimizer update and
    ``epoch_hook(epoch, model, record)`` after each epoch's metrics are logged.
    """
    dtype = np.dtype(cfg.dtype)
    data = data or prepare_data(cfg)
    out_dir = Path(cfg.output_dir) if cfg.output_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "resolved_config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")

    with T.precision(dtype):
        model = DannModel(cfg.resolved_model_config())
    params = trainable_parameters(model, cfg.mode)
    head_ids = {id(p) for p in model.domain_head.parameters()}
    opt = Adam(params, lr_scales=[cfg.schedule.domain_lr_mult if id(p) in head_ids else 1.0 for p in params])
    probe = balanced_batches(data.train_x, data.train_y_cell, data.train_y_domain, cfg.batch_size, cfg.seed)
    steps_per_epoch = sum(1 for _ in probe)
    sched = OneCycleSchedule(cfg.schedule.max_lr, cfg.schedule.div_factor, cfg.schedule.final_div_factor,
                             cfg.schedule.pct_ramp_up, steps_per_epoch * cfg.epochs_per_cycle, cfg.cycles)
    aug_rng = np.random.default_rng([cfg.seed, 1])
    mlog = MetricLog()
    step = 0
    epoch = 0
    checkpoint = None
    t0 = time.perf_counter()
    model.train()
    for cycle in range(cfg.cycles):
        if cycle > 0 and cfg.reset_moments_per_cycle:
            opt.reset_moments()
        for _ in range(cfg.epochs_per_cycle):
            sums = np.zeros(3)
            n_batches = 0
            src_hit = src_n = dom_hit = dom_n = 0
            for batch in balanced_batches(data.train_x, data.train_y_cell, data.train_y_domain,
                                          cfg.batch_size, cfg.seed, epoch):
                labels = batch.labels
                n_source = int((1 - labels.y_domain).sum())
                if n_source == 0:
                    raise AssertionError(f"batch at step {step} has no source sample")
                images = batch.images
                if cfg.data.augment:
                    src = labels.y_domain == 0
                    images = images.copy()
                    images[src] = augment(images[src], aug_rng)
                lr = sched.lr_at(step)
                model.set_step(step)
                opt.zero_grad()
                out = model(T.Tensor(images, dtype=dtype))
                total, cell_sum, dom_sum = batch_losses(out.p_cell, out.p_domain, labels, cfg.loss)
                value = float(total.data)
                if not np.isfinite(value):
                    raise NumericError(step, value)
                total.backward()
                opt.step(lr)
                step += 1
                if step_hook is not None:
                    step_hook(step, model)
                sums += (value, float(cell_sum.data) / n_source, float(dom_sum.data) / len(labels.y_domain))
                n_batches += 1
                src = labels.label_visible
                src_hit += int((_threshold(out.p_cell.data[src]) == labels.y_cell[src]).sum())
                src_n += int(src.sum())
                dom_hit += int((_threshold(out.p_domain.data) == labels.y_domain).sum())
                dom_n += len(labels.y_domain)
            target_acc = None
            if cfg.eval_every_epoch and len(data.test_x):
                target_acc = evaluate_model(model, data.test_x, data.test_y_cell,
                                            data.test_y_domain)["target_cell_acc"]
            means = sums / max(n_batches, 1)
            mlog.append(EpochRecord(epoch, cycle, float(means[0]), float(means[1]), float(means[2]),
                                    src_hit / max(src_n, 1), target_acc, dom_hit / max(dom_n, 1),
                                    sched.lr_at(max(step - 1, 0)), time.perf_counter() - t0))
            log.info("epoch %d cycle %d loss %.4f target acc %s", epoch, cycle, means[0], target_acc)
            if epoch_hook is not None:
                epoch_hook(epoch, model, mlog.records[-1])
            epoch += 1
        if out_dir:
            checkpoint = out_dir / f"cycle{cycle + 1}.ckpt"
            _save(checkpoint, model, opt, cfg, step, epoch, cycle + 1)
    final_eval = evaluate_model(model, data.test_x, data.test_y_cell, data.test_y_domain) \
        if len(data.test_x) else {}
    if out_dir:
        checkpoint = out_dir / "final.ckpt"
        _save(checkpoint, model, opt, cfg, step, epoch, cfg.cycles)
        mlog.write_jsonl(out_dir / "metrics.jsonl")
        (out_dir / "summary.json").write_text(json.dumps(
            {"final_eval": final_eval, "steps": step, "epochs": epoch}, indent=2) + "\n")
    return TrainResult(model, mlog, checkpoint, final_eval, opt, step)


def _save(path, model, opt, cfg, step, epoch, cycle):
    save_checkpoint(path, model, opt.state_dict(), {"step": step, "epoch": epoch, "cycle": cycle},
                    {"run_config": cfg.to_dict()})


def run_suite(cfg: RunConfig, n_runs: int = 5, with_gap: bool = False) -> dict[str, Any]:
    """Train ``n_runs`` models on seeds seed, seed+1, ... and aggregate target-domain cell accuracy."""
    from .analysis import domain_gap

    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    data = prepare_data(cfg)
    runs = []
    base = Path(cfg.output_dir) if cfg.output_dir else None
    for i in range(n_runs):
        run_cfg = dataclasses.replace(cfg, seed=cfg.seed + i,
                                      output_dir=str(base / f"run{i}") if base else None)
        res = train(run_cfg, data)
        entry = {"seed": run_cfg.seed, "target_cell_acc": res.final_eval["target_cell_acc"],
                 "source_cell_acc": res.final_eval["source_cell_acc"],
                 "domain_acc": res.final_eval["domain_acc"]}
        if with_gap:
            feats = res.model.extract(data.test_x)
            entry["domain_gap"] = domain_gap(feats, data.test_y_domain, data.test_y_cell)["accuracy"]
        runs.append(entry)
    accs = np.array([r["target_cell_acc"] for r in runs])
    summary = {"mode": cfg.mode, "n_runs": n_runs, "runs": runs,
               "target_cell_acc": {"mean": float(accs.mean()), "median": float(np.median(accs)),
                                   "min": float(accs.min()), "max": float(accs.max()),
                                   "per_run": accs.tolist()}}
    if with_gap:
        gaps = np.array([r["domain_gap"] for r in runs])
        summary["domain_gap"] = {"mean": float(gaps.mean()), "median": float(np.median(gaps)),
                                 "min": float(gaps.min()), "max": float(gaps.max()), "per_run": gaps.tolist()}
    if base:
        base.mkdir(parents=True, exist_ok=True)
        (base / f"suite_{cfg.mode}.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary
