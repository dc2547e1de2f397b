"""Training loops, evaluation and pmf reports for both model families."""

from __future__ import annotations

import csv
import dataclasses
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt_io
from . import data as datamod
from .density import POSTERIOR_KINDS, ArgmaxFlow
from .diffusion import DiffusionModel, nats_to_bpd
from .schedule import schedule_from_arrays

MODEL_KINDS = ("argmax-flow", "multinomial-diffusion")
POSTERIOR_ALIASES = {"softplus-threshold": "softplus"}
EVAL_SEED = 20210203
SMOOTH_WINDOW = 10


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    model: str = "multinomial-diffusion"
    dataset: str = "eight_gaussians"
    dataset_path: str = ""
    K: int = 8
    D: int = 2
    n_train: int = 20000
    n_val: int = 5000
    data_seed: int = 0
    patterns: str = ",".join(datamod.DEFAULT_PATTERNS)
    shuffle_patterns: bool = True
    epochs: int = 40
    batch_size: int = 256
    lr: float = 1e-3
    lr_decay: float = 0.995
    seed: int = 0
    dtype: str = "float64"
    T: int = 100
    s: float = 0.008
    importance_sampling: bool = True
    posterior: str = "softplus"
    cartesian_base: int = 0
    flow_layers: int = 4
    hidden: int = 64
    depth: int = 2
    iwbo_samples: int = 1000
    max_seconds: float = 0.0
    smooth_tol: float = 0.05

    def __post_init__(self):
        self.posterior = POSTERIOR_ALIASES.get(self.posterior, self.posterior)
        self.validate()

    def validate(self):
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.posterior not in POSTERIOR_KINDS:
            raise ConfigError(f"posterior must be one of {POSTERIOR_KINDS}, got {self.posterior!r}")
        if self.dataset not in ("eight_gaussians", "char_corpus"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")
        for name in ("K", "D", "n_train", "epochs", "batch_size", "T", "flow_layers", "hidden", "depth", "iwbo_samples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.K < 2:
            raise ConfigError("K must be at least 2")
        if self.n_val < 0 or self.seed < 0 or self.data_seed < 0 or self.max_seconds < 0 or self.cartesian_base < 0:
            raise ConfigError("counts, seeds and limits must be non-negative")
        if not (self.lr > 0 and 0 < self.lr_decay <= 1 and self.s > 0):
            raise ConfigError("need lr > 0, 0 < lr_decay <= 1 and s > 0")
        if self.cartesian_base == 1:
            raise ConfigError("cartesian_base must be 0 (off) or at least 2")

    # -- text form ---------------------------------------------------------

    def to_text(self) -> str:
        """Canonical ``key = value`` lines in field order."""
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, val = (p.strip() for p in line.split("=", 1))
            if key not in kinds:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _parse_value(key, val, kinds[key])
        values.update({k: v for k, v in overrides.items() if v is not None})
        unknown = set(values) - set(kinds)
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}")
        return cls(**values)

    @classmethod
    def load(cls, path, **overrides) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(), **overrides)

    def dataset_spec(self) -> datamod.ToyDatasetSpec:
        return datamod.ToyDatasetSpec(
            kind=self.dataset, K=self.K, D=self.D, n_train=self.n_train, n_val=self.n_val,
            seed=self.data_seed, patterns=tuple(p for p in self.patterns.split(",") if p),
            shuffle_patterns=self.shuffle_patterns,
        )


def _parse_value(key, val, kind):
    try:
        if kind in ("int", int):
            return int(val)
        if kind in ("float", float):
            return float(val)
        if kind in ("bool", bool):
            if val.lower() not in ("true", "false", "1", "0"):
                raise ValueError(val)
            return val.lower() in ("true", "1")
        return val
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {val!r} as {kind}") from None


# ---------------------------------------------------------------------------
# Models


def build_model(config: TrainConfig):
    if config.model == "multinomial-diffusion":
        model = DiffusionModel(config.D, config.K, T=config.T, s=config.s,
                               hidden=config.hidden, depth=config.depth, seed=config.seed)
        model.denoiser.astype(config.dtype)
    else:
        model = ArgmaxFlow(config.D, config.K, config.posterior, base=config.cartesian_base,
                           n_layers=config.flow_layers, hidden=config.hidden, depth=config.depth, seed=config.seed)
        model.astype(config.dtype)
    return model


def model_params(model) -> dict[str, np.ndarray]:
    if isinstance(model, DiffusionModel):
        return model.denoiser.state_dict()
    return model.state_dict()


def load_model_params(model, params: dict[str, np.ndarray]):
    target = model.denoiser if isinstance(model, DiffusionModel) else model
    target.load_state_dict(params)


@dataclass
class Checkpoint:
    config: TrainConfig
    model: object
    losses: list[float] = field(default_factory=list)
    flagged: bool = False
    rng_state: dict | None = None

    def to_data(self) -> ckpt_io.CheckpointData:
        schedule, history = {}, {"losses": np.asarray(self.losses, dtype=np.float64),
                                  "flagged": np.asarray([int(self.flagged)], dtype=np.int64)}
        if isinstance(self.model, DiffusionModel):
            schedule = dict(self.model.schedule.arrays())
            history["loss_buffer"] = self.model.history.buffer
            history["loss_counts"] = self.model.history.counts
        return ckpt_io.CheckpointData(self.config.to_text(), model_params(self.model), schedule, history, self.rng_state)

    @classmethod
    def from_data(cls, blob: ckpt_io.CheckpointData) -> "Checkpoint":
        config = TrainConfig.from_text(blob.config_text)
        model = build_model(config)
        if isinstance(model, DiffusionModel):
            if blob.schedule:
                model.schedule = schedule_from_arrays(config.T, config.s, blob.schedule)
            if "loss_buffer" in blob.history:
                model.history.buffer = blob.history["loss_buffer"]
                model.history.counts = blob.history["loss_counts"]
        load_model_params(model, blob.params)
        losses = blob.history.get("losses", np.zeros(0)).tolist()
        flagged = bool(blob.history.get("flagged", np.zeros(1))[0])
        return cls(config, model, losses, flagged, blob.rng_state)

    def save(self, path):
        ckpt_io.save(path, self.to_data())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_data(ckpt_io.load(path))


# ---------------------------------------------------------------------------
# Training


def load_data(config: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    if config.dataset_path:
        x, K, _ = datamod.load_dataset(config.dataset_path)
        if K != config.K or x.shape[1] != config.D:
            raise ConfigError(f"dataset has K={K}, D={x.shape[1]}; config expects K={config.K}, D={config.D}")
        n_val = min(config.n_val, len(x) // 5)
        return x[: len(x) - n_val], x[len(x) - n_val :]
    return config.dataset_spec().generate()


def _batch_loss(model, batch, rng, importance: bool = True):
    """Mean negative bound over the batch; for diffusion also the sampled steps and per-step terms."""
    if isinstance(model, DiffusionModel):
        loss, t, lt = model.training_loss(batch, rng, importance=importance)
        return ad.mean(loss), (t, lt)
    return -ad.mean(model.elbo(batch, rng)), None


def smoothed(losses, window: int = SMOOTH_WINDOW) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    x = np.asarray(losses, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def is_flagged(losses, tol: float, window: int = SMOOTH_WINDOW) -> bool:
    """True if the smoothed loss ever rises by more than ``tol`` nats epoch to epoch."""
    s = smoothed(losses, window)
    return bool(np.any(np.diff(s) > tol))


def train(config: TrainConfig, data=None, metrics_path=None, log=None, model=None) -> Checkpoint:
    """Minimise the negative bound with Adam and per-epoch multiplicative lr decay.

    Deterministic for a fixed config. Raises :class:`TrainingDiverged` naming
    the first operation that produced a NaN if the loss stops being finite.
    """
    train_x, val_x = data if data is not None else load_data(config)
    if train_x.shape[1] != config.D or (len(train_x) and train_x.max() >= config.K):
        raise ConfigError("training data does not match config K/D")
    rng = np.random.default_rng(config.seed)
    model = model if model is not None else build_model(config)
    if isinstance(model, ArgmaxFlow):
        model.initialize(train_x[: config.batch_size])
    opt = ad.Adam(model.parameters(), lr=config.lr)
    losses = []
    rows = []
    start = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(len(train_x))
        total = 0.0
        for i in range(0, len(train_x), config.batch_size):
            batch = train_x[perm[i : i + config.batch_size]]
            with ad.Tape() as tape:
                loss, extra = _batch_loss(model, batch, rng, config.importance_sampling)
                value = float(ad.value(loss))
                if not math.isfinite(value):
                    node = tape.first_nonfinite()
                    where = node.op.__name__ if node is not None else "the loss itself"
                    raise TrainingDiverged(f"epoch {epoch}: loss became {value}; first NaN produced by op {where}")
                ad.backward(loss)
            if extra is not None:
                model.history.record(*extra)
            opt.step()
            opt.zero_grad()
            total += value * len(batch)
        losses.append(total / len(train_x))
        rows.append((epoch, "train", "nll_nats", losses[-1]))
        if log is not None:
            log(f"epoch {epoch:4d}  train nll {losses[-1]:.4f} nats  lr {opt.lr:.3g}")
        opt.lr *= config.lr_decay
        if config.max_seconds and time.perf_counter() - start > config.max_seconds:
            break
    flagged = is_flagged(losses, config.smooth_tol)
    if metrics_path is not None:
        write_metrics(metrics_path, rows)
    return Checkpoint(config, model, losses, flagged, rng.bit_generator.state)


def write_metrics(path, rows, append: bool = False):
    """CSV with columns epoch, split, metric, value."""
    path = Path(path)
    new = not append or not path.exists()
    with path.open("a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(["epoch", "split", "metric", "value"])
        for epoch, split, metric, value in rows:
            w.writerow([epoch, split, metric, repr(float(value))])


# ---------------------------------------------------------------------------
# Evaluation


class UniformCategorical:
    """Reference model assigning probability 1/K to every symbol."""

    def __init__(self, D: int, K: int):
        self.D, self.K = D, K

    def log_prob(self, x) -> np.ndarray:
        return np.full(len(x), -self.D * math.log(self.K))


@dataclass
class EvalReport:
    metric: str
    n: int
    nll_nats: float
    se_nats: float
    D: int

    @property
    def bpd(self) -> float:
        return float(nats_to_bpd(self.nll_nats, self.D))

    @property
    def se_bpd(self) -> float:
        return float(nats_to_bpd(self.se_nats, self.D))

    def __str__(self):
        return (f"{self.metric}: {self.nll_nats:.4f} +/- {self.se_nats:.4f} nats "
                f"({self.bpd:.4f} +/- {self.se_bpd:.4f} bpd) over {self.n} samples")


def log_likelihood_bound(model, x, metric: str, rng: np.random.Generator, S: int = 1000,
                         batch: int = 1000) -> np.ndarray:
    """Per-sample lower bound on log P(x) in nats."""
    if metric not in ("elbo", "iwbo", "bpd"):
        raise ValueError(f"metric must be elbo, iwbo or bpd, got {metric!r}")
    if isinstance(model, UniformCategorical):
        return model.log_prob(x)
    out = []
    for i in range(0, len(x), batch):
        b = x[i : i + batch]
        if isinstance(model, DiffusionModel):
            if metric == "iwbo":
                raise ValueError("iwbo is only defined for argmax flows")
            out.append(model.elbo(b, mode="full", rng=rng))
        elif metric == "iwbo":
            out.append(model.iwbo(b, S, rng))
        else:
            out.append(np.asarray(ad.value(model.elbo(b, rng)), dtype=np.float64))
    return np.concatenate(out) if out else np.zeros(0)


def evaluate(checkpoint, x, metric: str = "elbo", S: int | None = None, seed: int = EVAL_SEED) -> EvalReport:
    """Mean negative bound and its standard error, in nats and bits per dimension.

    ``seed`` drives the Monte-Carlo draws and is independent of the training seed.
    """
    model = checkpoint.model if isinstance(checkpoint, Checkpoint) else checkpoint
    if S is None:
        S = checkpoint.config.iwbo_samples if isinstance(checkpoint, Checkpoint) else 1000
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != model.D:
        raise ValueError(f"data has D={x.shape[1] if x.ndim == 2 else '?'}, model expects D={model.D}")
    if len(x) and (x.min() < 0 or x.max() >= model.K):
        raise ValueError(f"data has symbols outside [0, {model.K})")
    bound = log_likelihood_bound(model, x, metric, np.random.default_rng(seed), S)
    nll = -bound
    se = float(nll.std(ddof=1) / math.sqrt(len(nll))) if len(nll) > 1 else 0.0
    return EvalReport(metric, len(nll), float(nll.mean()), se, model.D)


# ---------------------------------------------------------------------------
# pmf grids


def pmf_report(source, K: int | None = None, n_samples: int = 100000, S: int = 100,
               seed: int = EVAL_SEED) -> np.ndarray:
    """(K, K) probability grid for two-dimensional data or models.

    Arrays give their empirical pmf, diffusion models the histogram of
    ancestral samples, and argmax flows an importance-weighted estimate of
    P(x) for every cell.
    """
    model = source.model if isinstance(source, Checkpoint) else source
    rng = np.random.default_rng(seed)
    if isinstance(model, np.ndarray):
        if K is None:
            raise ValueError("K is required for a data pmf")
        return datamod.empirical_pmf(model, K)
    if model.D != 2:
        raise ValueError("pmf reports need D = 2")
    K = model.K
    if K * K > 10000:
        raise ValueError("pmf grid limited to K^2 <= 10000 cells")
    if isinstance(model, DiffusionModel):
        return datamod.empirical_pmf(model.sample(n_samples, rng), K)
    cells = np.stack(np.meshgrid(np.arange(K), np.arange(K), indexing="ij"), axis=-1).reshape(-1, 2)
    return np.exp(model.iwbo(cells, S, rng)).reshape(K, K)


def write_pmf_csv(path, pmf):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in np.asarray(pmf):
            w.writerow([repr(float(v)) for v in row])


def pgm_bytes(pmf, scale: int = 16) -> bytes:
    """Binary greyscale image (P5), brightest cell = 255, each cell ``scale`` pixels wide."""
    pmf = np.asarray(pmf, dtype=np.float64)
    top = pmf.max()
    img = np.zeros(pmf.shape, dtype=np.uint8) if top <= 0 else np.round(255 * pmf / top).astype(np.uint8)
    img = np.kron(img, np.ones((scale, scale), dtype=np.uint8))
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def write_pgm(path, pmf, scale: int = 16):
    Path(path).write_bytes(pgm_bytes(pmf, scale))
