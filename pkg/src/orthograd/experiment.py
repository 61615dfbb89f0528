"""Seeded training runs, metrics files, and cross-seed summaries."""
from __future__ import annotations

import csv
import dataclasses
import datetime as _dt
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .data import BatchPlan, Dataset, batches, load_cifar10, synthetic_splits
from .diagnostics import dead_parameters, representation_cosines
from .nn import Model, build_model, model_spec, softmax_cross_entropy
from .optim import GradTransform, HyperParams, NonFiniteUpdateError, OPTIMISERS, Optimiser
from .rng import PRNG_NAME

log = logging.getLogger(__name__)

__all__ = [
    "METRICS_COLUMNS",
    "TIMING_COLUMNS",
    "MetricsRecord",
    "MixedConfigError",
    "RunConfig",
    "RunResult",
    "evaluate",
    "load_config",
    "read_metrics",
    "run_experiment",
    "summarise",
    "train_run",
]

TRANSFORM_ALIASES = {
    "none": None,
    "identity": "identity",
    "orth": "orthogonalise",
    "orthogonalise": "orthogonalise",
    "norm": "normalise_layer",
    "normalise_layer": "normalise_layer",
    "colnorm": "normalise_columns",
    "normalise_columns": "normalise_columns",
}
_SHORT = {None: "none", "identity": "identity", "orthogonalise": "orth",
          "normalise_layer": "norm", "normalise_columns": "colnorm"}

METRICS_COLUMNS = ("run_id", "seed", "epoch", "split", "loss", "accuracy", "r_mean", "dead_params")
TIMING_COLUMNS = ("run_id", "seed", "epoch", "split", "epoch_wall_time", "svd_time")
VALIDATION_NOTE = "test split used for per-epoch validation and final test"
PREPROCESSING_NOTE = "pixels/255, per-channel standardisation on train statistics, no augmentation"


class MixedConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    name: str = "run"
    model: str = "basic_cnn"
    dataset: str = "synthetic"
    data_dir: Optional[str] = None
    train_subset: Optional[int] = None
    optimiser: str = "sgdm"
    transform: str = "identity"
    skip_dense: bool = False
    decay_before_transform: bool = False
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    lars_trust: float = 1e-3
    batch_size: int = 1024
    epochs: int = 100
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str = "runs"
    precision: str = "float32"
    eval_batch_size: int = 1000
    # synthetic dataset shape
    classes: int = 10
    image_size: int = 32
    synthetic_train_per_class: int = 100
    synthetic_test_per_class: int = 20
    synthetic_separation: float = 3.0
    synthetic_seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.transform not in TRANSFORM_ALIASES:
            raise ValueError(f"unknown transform {self.transform!r}")
        self.transform = _SHORT[TRANSFORM_ALIASES[self.transform]]
        if self.optimiser not in OPTIMISERS:
            raise ValueError(f"unknown optimiser {self.optimiser!r}")
        if self.dataset not in ("synthetic", "cifar10"):
            raise ValueError(f"unknown dataset {self.dataset!r}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.batch_size < 1 or self.epochs < 1 or self.eval_batch_size < 1:
            raise ValueError("batch_size, eval_batch_size and epochs must be >= 1")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        self.seeds = [int(s) for s in self.seeds]
        self.hyper_params()
        self.grad_transform()
        model_spec(self.model)

    def hyper_params(self) -> HyperParams:
        return HyperParams(
            lr=self.lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            betas=(self.beta1, self.beta2),
            eps=self.eps,
            lars_trust=self.lars_trust,
        )

    def grad_transform(self) -> Optional[GradTransform]:
        kind = TRANSFORM_ALIASES[self.transform]
        return None if kind is None else GradTransform(kind, self.skip_dense)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def identity_key(self) -> str:
        """Canonical JSON of everything that defines the configuration except seeds and output."""
        d = self.to_dict()
        d.pop("seeds")
        d.pop("out")
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


def load_config(path) -> RunConfig:
    """Read a JSON config, or recover the config from a metrics CSV header."""
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        return RunConfig.from_dict(json.loads(text))
    header, _ = _split_header(text)
    if "config" not in header:
        raise ValueError(f"{path}: neither JSON nor a metrics file with a config header")
    cfg = json.loads(header["config"])
    if "seed" in header:
        cfg["seeds"] = [int(header["seed"])]
    return RunConfig.from_dict(cfg)


@dataclass
class MetricsRecord:
    run_id: str
    seed: int
    epoch: int
    split: str  # train | test | diverged
    loss: float
    accuracy: float
    r_mean: Optional[list[float]] = None
    dead_params: Optional[int] = None
    epoch_wall_time: float = 0.0
    svd_time: float = 0.0

    def metrics_row(self) -> list[str]:
        r = "" if self.r_mean is None else ";".join(_fmt(v) for v in self.r_mean)
        dead = "" if self.dead_params is None else str(self.dead_params)
        return [self.run_id, str(self.seed), str(self.epoch), self.split,
                _fmt(self.loss), _fmt(self.accuracy), r, dead]

    def timing_row(self) -> list[str]:
        return [self.run_id, str(self.seed), str(self.epoch), self.split,
                f"{self.epoch_wall_time:.6f}", f"{self.svd_time:.6f}"]


def _fmt(x: float) -> str:
    return format(float(x), ".10g")


@dataclass
class RunResult:
    config: RunConfig
    seed: int
    records: list[MetricsRecord]
    status: str  # completed | diverged
    metrics_path: Optional[Path] = None
    timing_path: Optional[Path] = None

    def final(self, split: str = "test") -> Optional[MetricsRecord]:
        rows = [r for r in self.records if r.split == split]
        return rows[-1] if rows else None


def evaluate(model: Model, data: Dataset, batch_size: int) -> tuple[float, float]:
    """Inference-mode mean loss and accuracy (percent) over a dataset in natural order."""
    loss_sum = 0.0
    correct = 0
    for start in range(0, len(data), batch_size):
        x = data.images[start : start + batch_size]
        y = data.labels[start : start + batch_size]
        logits = model.forward(x, train=False)
        loss, _ = softmax_cross_entropy(logits, y)
        loss_sum += loss * len(y)
        correct += int((logits.argmax(axis=1) == y).sum())
    return loss_sum / len(data), 100.0 * correct / len(data)


def load_datasets(config: RunConfig) -> tuple[Dataset, Dataset]:
    dtype = np.dtype(config.precision)
    if config.dataset == "cifar10":
        if not config.data_dir:
            raise ValueError("dataset cifar10 needs data_dir")
        train, test = load_cifar10(config.data_dir, dtype=dtype)
    else:
        s = config.image_size
        train, test = synthetic_splits(
            config.classes,
            config.synthetic_train_per_class,
            config.synthetic_test_per_class,
            config.synthetic_seed,
            shape=(3, s, s),
            separation=config.synthetic_separation,
            dtype=dtype,
        )
    if config.train_subset is not None:
        train = train.subset(config.train_subset)
    return train, test


def train_run(config: RunConfig, seed: int, train: Dataset, test: Dataset) -> RunResult:
    """One deterministic training run; per-epoch train and test records."""
    run_id = f"{config.name}-s{seed}"
    spec = model_spec(config.model, classes=train.classes, input_shape=train.images.shape[1:])
    model = build_model(spec, seed, dtype=np.dtype(config.precision))
    opt = Optimiser(
        model.params,
        kind=config.optimiser,
        hp=config.hyper_params(),
        transform=config.grad_transform(),
        decay_before_transform=config.decay_before_transform,
    )
    plan = BatchPlan(seed, config.batch_size)
    probe = test.images[: config.batch_size]
    records: list[MetricsRecord] = []

    def diverged(epoch: int, why: str) -> RunResult:
        log.warning("%s diverged at epoch %d: %s", run_id, epoch, why)
        records.append(MetricsRecord(run_id, seed, epoch, "diverged", math.nan, 0.0,
                                     svd_time=opt.timer.seconds))
        return RunResult(config, seed, records, "diverged")

    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        loss_sum = 0.0
        correct = 0
        dead = 0
        for xb, yb in batches(train, plan, epoch - 1):
            loss, logits = model.loss_and_grad(xb, yb)
            if not math.isfinite(loss):
                return diverged(epoch, "non-finite training loss")
            dead = dead_parameters(model.params).total
            try:
                opt.step()
            except NonFiniteUpdateError as exc:
                return diverged(epoch, str(exc))
            loss_sum += loss * len(yb)
            correct += int((logits.argmax(axis=1) == yb).sum())
        train_time = time.perf_counter() - start
        records.append(MetricsRecord(run_id, seed, epoch, "train", loss_sum / len(train),
                                     100.0 * correct / len(train), None, dead,
                                     train_time, opt.timer.seconds))
        eval_start = time.perf_counter()
        test_loss, test_acc = evaluate(model, test, config.eval_batch_size)
        if not math.isfinite(test_loss):
            return diverged(epoch, "non-finite test loss")
        model.forward(probe, train=False)
        r_means = [representation_cosines(a).mean for a in model.activations]
        records.append(MetricsRecord(run_id, seed, epoch, "test", test_loss, test_acc, r_means, None,
                                     time.perf_counter() - eval_start, opt.timer.seconds))
        log.info("%s epoch %d train %.4f/%.2f%% test %.4f/%.2f%% svd %.2fs", run_id, epoch,
                 records[-2].loss, records[-2].accuracy, test_loss, test_acc, opt.timer.seconds)
    return RunResult(config, seed, records, "completed")


# ---------------------------------------------------------------- files


def _header(config: RunConfig, seed: int, status: str, kind: str) -> str:
    cfg = config.to_dict()
    lines = [
        f"orthograd {kind}",
        f"artifact_version: {__version__}",
        f"prng: {PRNG_NAME}",
        f"seed: {seed}",
        f"precision: {config.precision}",
        f"status: {status}",
        f"validation: {VALIDATION_NOTE}",
        f"preprocessing: {PREPROCESSING_NOTE}",
        f"created: {_dt.datetime.now(_dt.timezone.utc).isoformat(timespec='seconds')}",
        f"config: {json.dumps(cfg, sort_keys=True)}",
    ]
    return "".join(f"# {line}\n" for line in lines)


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    return buf.getvalue()


def write_run(result: RunResult, out_dir) -> RunResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{result.config.name}_seed{result.seed}"
    result.metrics_path = out / f"{stem}.metrics.csv"
    result.timing_path = out / f"{stem}.timing.csv"
    result.metrics_path.write_text(
        _header(result.config, result.seed, result.status, "metrics")
        + _csv_text(METRICS_COLUMNS, [r.metrics_row() for r in result.records])
    )
    result.timing_path.write_text(
        _header(result.config, result.seed, result.status, "timing")
        + _csv_text(TIMING_COLUMNS, [r.timing_row() for r in result.records])
    )
    return result


def _split_header(text: str) -> tuple[dict, str]:
    header = {}
    body = []
    for line in text.splitlines(keepends=True):
        if line.startswith("#") and not body:
            key, _, value = line[1:].strip().partition(": ")
            if value:
                header[key] = value
        else:
            body.append(line)
    return header, "".join(body)


def read_metrics(path) -> tuple[dict, list[dict]]:
    """Header fields and body rows (as dicts) of a metrics or timing CSV."""
    header, body = _split_header(Path(path).read_text())
    return header, list(csv.DictReader(io.StringIO(body)))


def metrics_body(path) -> str:
    return _split_header(Path(path).read_text())[1]


def run_experiment(config: RunConfig, datasets: Optional[tuple[Dataset, Dataset]] = None) -> list[RunResult]:
    """Train every seed, write per-seed metrics/timing files and the summary table."""
    train, test = datasets if datasets is not None else load_datasets(config)
    results = []
    for seed in config.seeds:
        log.info("run %s seed %d: %s/%s", config.name, seed, config.optimiser, config.transform)
        results.append(write_run(train_run(config, seed, train, test), config.out))
    table = summarise(config.out)
    (Path(config.out) / "summary.csv").write_text(format_summary_csv(table))
    return results


# ---------------------------------------------------------------- summaries


def mean_stderr(values) -> tuple[float, Optional[float]]:
    """Mean and standard error (sample std / sqrt(n)); error is None for one value."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return math.nan, None
    if arr.size == 1:
        return float(arr[0]), None
    return float(arr.mean()), float(arr.std(ddof=1) / math.sqrt(arr.size))


def summarise(run_dir) -> dict:
    """Final test loss/accuracy across the seeds in one directory: mean ± standard error.

    Diverged runs are excluded from the means and counted. Raises MixedConfigError when
    the directory holds runs of different configurations.
    """
    paths = sorted(Path(run_dir).glob("*.metrics.csv"))
    if not paths:
        raise FileNotFoundError(f"no metrics files in {run_dir}")
    key = None
    config = None
    losses, accs, seeds, walls, svds = [], [], [], [], []
    n_diverged = 0
    for path in paths:
        header, rows = read_metrics(path)
        cfg = RunConfig.from_dict(json.loads(header["config"]))
        if key is None:
            key, config = cfg.identity_key(), cfg
        elif cfg.identity_key() != key:
            raise MixedConfigError(f"{path.name} has a different configuration from {paths[0].name}")
        seeds.append(int(header["seed"]))
        if header.get("status") == "diverged" or any(r["split"] == "diverged" for r in rows):
            n_diverged += 1
            continue
        tests = [r for r in rows if r["split"] == "test"]
        if not tests:
            continue
        final = max(tests, key=lambda r: int(r["epoch"]))
        losses.append(float(final["loss"]))
        accs.append(float(final["accuracy"]))
        timing = path.with_name(path.name.replace(".metrics.csv", ".timing.csv"))
        if timing.exists():
            _, trows = read_metrics(timing)
            walls.append(sum(float(r["epoch_wall_time"]) for r in trows))
            svds.append(max((float(r["svd_time"]) for r in trows), default=0.0))
    loss_m, loss_se = mean_stderr(losses)
    acc_m, acc_se = mean_stderr(accs)
    return {
        "name": config.name,
        "optimiser": config.optimiser,
        "transform": config.transform,
        "skip_dense": config.skip_dense,
        "runs": len(losses),
        "diverged": n_diverged,
        "seeds": sorted(seeds),
        "test_loss": loss_m,
        "test_loss_se": loss_se,
        "test_accuracy": acc_m,
        "test_accuracy_se": acc_se,
        "wall_time": mean_stderr(walls)[0] if walls else None,
        "svd_time": mean_stderr(svds)[0] if svds else None,
    }


def format_pm(mean: float, se: Optional[float], digits: int = 2) -> str:
    if mean is None or (isinstance(mean, float) and math.isnan(mean)):
        return "nan"
    if se is None:
        return f"{mean:.{digits}f}"
    return f"{mean:.{digits}f} ± {se:.{digits}f}"


SUMMARY_COLUMNS = ("name", "optimiser", "transform", "skip_dense", "runs", "diverged",
                   "test_loss", "test_loss_se", "test_accuracy", "test_accuracy_se",
                   "wall_time", "svd_time")


def format_summary_csv(table: dict) -> str:
    def cell(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return _fmt(v)
        return str(v)

    return _csv_text(SUMMARY_COLUMNS, [[cell(table[c]) for c in SUMMARY_COLUMNS]])


def format_summary(table: dict) -> str:
    lines = [
        f"{table['name']}: {table['optimiser']}/{table['transform']}"
        + (" (dense layers skipped)" if table["skip_dense"] else ""),
        f"  runs {table['runs']}, diverged {table['diverged']}",
        f"  test loss      {format_pm(table['test_loss'], table['test_loss_se'], 4)}",
        f"  test accuracy  {format_pm(table['test_accuracy'], table['test_accuracy_se'], 2)}",
    ]
    if table.get("wall_time") is not None:
        lines.append(f"  wall time {table['wall_time']:.1f}s, svd time {table['svd_time']:.1f}s")
    return "\n".join(lines)
