"""Noise2Noise / Noise2Clean training: losses, optimizer, loop, loss curves."""
from __future__ import annotations

import csv
import enum
import io
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .datagen import ChannelNormalizer, DatasetManifest, NormalizationMode
from .exceptions import ConfigurationError, NonFiniteLossError
from .imageio import read_rgb
from .model import REFLECT, TrainedModel, forward, load_checkpoint, save_checkpoint

# --------------------------------------------------------------------------
# Losses

LOSS_TERMS = ("l1", "mse", "huber", "smooth_l1")
_LOSS_ALIASES = {"l2": "mse", "smoothl1": "smooth_l1", "smooth-l1": "smooth_l1"}


@dataclass(frozen=True)
class LossSpec:
    terms: tuple[str, ...] = ("l1",)
    weights: tuple[float, ...] | None = None
    huber_delta: float = 1.0
    smooth_l1_beta: float = 1.0
    value_scale: float = 1.0  # 255 measures errors in 8-bit grey levels

    def __post_init__(self):
        terms = tuple(_LOSS_ALIASES.get(t.lower(), t.lower()) for t in self.terms)
        if not terms:
            raise ConfigurationError("a loss needs at least one term")
        unknown = [t for t in terms if t not in LOSS_TERMS]
        if unknown:
            raise ConfigurationError(f"unknown loss term {unknown[0]!r}; expected one of {LOSS_TERMS}")
        weights = tuple(float(w) for w in self.weights) if self.weights is not None else (1.0,) * len(terms)
        if len(weights) != len(terms):
            raise ConfigurationError("need exactly one weight per loss term")
        if self.value_scale <= 0:
            raise ConfigurationError("value_scale must be positive")
        object.__setattr__(self, "terms", terms)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def parse(cls, value) -> "LossSpec":
        """``'l1'``, ``'l1+mse'``, ``'all'`` (every term, unit weights) or a LossSpec."""
        if isinstance(value, LossSpec):
            return value
        text = str(value).strip().lower()
        if text in ("all", "all_loss_sum", "sum"):
            return cls(("l1", "huber", "smooth_l1", "mse"))
        return cls(tuple(t.strip() for t in text.split("+") if t.strip()))

    @property
    def name(self) -> str:
        return "+".join(self.terms)

    @property
    def family(self) -> str:
        return "mse" if "mse" in self.terms else "l1"


def _term(name: str, spec: LossSpec) -> Callable:
    if name == "l1":
        return F.l1_loss
    if name == "mse":
        return F.mse_loss
    if name == "huber":
        return lambda p, t: F.huber_loss(p, t, delta=spec.huber_delta)
    return lambda p, t: F.smooth_l1_loss(p, t, beta=spec.smooth_l1_beta)


def make_loss(spec) -> Callable[[torch.Tensor, torch.Tensor], torch.Tensor]:
    """Weighted sum of mean-reduced loss terms."""
    spec = LossSpec.parse(spec)
    parts = [(w, _term(t, spec)) for t, w in zip(spec.terms, spec.weights)]
    scale = spec.value_scale

    def loss(prediction, target):
        if scale != 1.0:
            prediction, target = prediction * scale, target * scale
        return sum(w * fn(prediction, target) for w, fn in parts)

    loss.spec = spec
    return loss


# --------------------------------------------------------------------------
# Config / curve


class Scheme(str, enum.Enum):
    N2N = "n2n"
    N2C = "n2c"

    @classmethod
    def parse(cls, value) -> "Scheme":
        try:
            return cls(str(getattr(value, "value", value)).lower())
        except ValueError:
            raise ConfigurationError(f"unknown training scheme {value!r}; expected 'n2n' or 'n2c'") from None


@dataclass
class TrainConfig:
    scheme: str
    batch_size: int
    epochs: int
    loss: str = "l1"
    huber_delta: float = 1.0
    smooth_l1_beta: float = 1.0
    loss_scale: float = 1.0
    learning_rate: float = 1e-5
    momentum: float = 0.9
    weight_decay: float = 1e-8
    alpha: float = 0.99
    eps: float = 1e-8
    normalization: str = "linear"
    seed: int = 0
    padding_policy: str = REFLECT
    max_steps: int | None = None

    def __post_init__(self):
        self.scheme = Scheme.parse(self.scheme).value
        self.normalization = NormalizationMode.parse(self.normalization).value
        self.loss = LossSpec.parse(self.loss).name
        if int(self.batch_size) < 1 or int(self.epochs) < 1:
            raise ConfigurationError("batch_size and epochs must be >= 1")
        if self.huber_delta <= 0 or self.smooth_l1_beta <= 0 or self.loss_scale <= 0:
            raise ConfigurationError("huber_delta, smooth_l1_beta and loss_scale must be positive")

    @property
    def loss_spec(self) -> LossSpec:
        terms = LossSpec.parse(self.loss).terms
        return LossSpec(terms, huber_delta=float(self.huber_delta), smooth_l1_beta=float(self.smooth_l1_beta),
                        value_scale=float(self.loss_scale))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossCurve:
    steps: list = field(default_factory=list)  # (global_step, loss)
    wall_clock: float = 0.0

    def append(self, step: int, value: float) -> None:
        if self.steps and step <= self.steps[-1][0]:
            raise ValueError(f"loss curve steps must increase: {step} after {self.steps[-1][0]}")
        self.steps.append((int(step), float(value)))

    @property
    def values(self) -> np.ndarray:
        return np.array([v for _, v in self.steps], dtype=np.float64)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss"])
        for s, v in self.steps:
            w.writerow([s, repr(v)])
        return buf.getvalue()

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_csv())
        return path

    @classmethod
    def load(cls, path) -> "LossCurve":
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"loss curve not found: {path}")
        with path.open() as f:
            rows = list(csv.DictReader(f))
        curve = cls()
        for r in rows:
            curve.append(int(r["step"]), float(r["loss"]))
        return curve


def convergence_step(curve, window: int = 50, rel_eps: float = 0.05) -> int:
    """First step whose trailing ``window``-step average is within ``rel_eps`` of the final one.

    The moving average starting at index i covers values[i:i+window]. The
    return value is the global step at the start of the first qualifying
    window (the index itself when given a bare sequence).
    """
    if isinstance(curve, LossCurve):
        steps = [s for s, _ in curve.steps]
        values = curve.values
    else:
        values = np.asarray(curve, dtype=np.float64)
        steps = list(range(values.size))
    if values.size <= window:
        raise ConfigurationError(f"curve of length {values.size} is too short for window {window}")
    csum = np.concatenate([[0.0], np.cumsum(values)])
    ma = (csum[window:] - csum[:-window]) / window
    final = ma[-1]
    hit = np.flatnonzero(np.abs(ma - final) <= rel_eps * abs(final))
    return steps[int(hit[0])]


def is_degenerate(curve, window: int = 50, rel_eps: float = 0.05) -> bool:
    """True when convergence is only reached at the final window (the curve never settled)."""
    n = len(curve.steps) if isinstance(curve, LossCurve) else len(curve)
    steps = [s for s, _ in curve.steps] if isinstance(curve, LossCurve) else list(range(n))
    return convergence_step(curve, window, rel_eps) == steps[n - window]


# --------------------------------------------------------------------------
# Data feeding


class ArraySource:
    """In-memory training pairs, N×H×W×3 float arrays in linear [0, 1]."""

    def __init__(self, inputs: np.ndarray, targets: np.ndarray, clean: np.ndarray | None = None):
        self.inputs = np.asarray(inputs, dtype=np.float32)
        self.targets = np.asarray(targets, dtype=np.float32)
        self.clean = clean
        if self.inputs.shape != self.targets.shape:
            raise ConfigurationError(f"inputs {self.inputs.shape} and targets {self.targets.shape} differ")

    def __len__(self):
        return len(self.inputs)

    def batch(self, idx):
        return self.inputs[idx], self.targets[idx]


class ManifestSource:
    """Train-split records of a dataset, cached as uint8, paired by scheme."""

    def __init__(self, manifest: DatasetManifest, scheme: str, split: str = "train"):
        records = manifest.split_records(split)
        if not records:
            raise ConfigurationError(f"split {split!r} is empty")
        root = Path(manifest.root or ".")
        target_key = "noisy_b_path" if Scheme.parse(scheme) is Scheme.N2N else "clean_path"

        def load(rel):
            return np.rint(read_rgb(root / rel) * 255.0).astype(np.uint8)

        self.record_ids = [r.record_id for r in records]
        self.inputs = np.stack([load(r.noisy_a_path) for r in records])
        self.targets = np.stack([load(getattr(r, target_key)) for r in records])

    def __len__(self):
        return len(self.inputs)

    def batch(self, idx):
        return self.inputs[idx].astype(np.float32) / 255.0, self.targets[idx].astype(np.float32) / 255.0


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([int(seed), int(epoch)]).permutation(n)


def iter_batches(source, batch_size: int, seed: int, epoch: int):
    order = epoch_order(len(source), seed, epoch)
    for start in range(0, len(order), batch_size):
        yield source.batch(order[start:start + batch_size])


# --------------------------------------------------------------------------
# Optimizer state (de)serialisation for resumable checkpoints


def optimizer_state_arrays(opt: torch.optim.Optimizer, model: TrainedModel, meta: dict) -> dict:
    names = {id(p): n for n, p in model.network.named_parameters()}
    arrays = {}
    for group in opt.param_groups:
        for p in group["params"]:
            for key, val in opt.state.get(p, {}).items():
                if torch.is_tensor(val):
                    arrays[f"{names[id(p)]}/{key}"] = val.detach().numpy().copy()
    return {"meta": meta, "arrays": arrays}


def restore_optimizer_state(opt: torch.optim.Optimizer, model: TrainedModel, arrays: dict) -> None:
    params = dict(model.network.named_parameters())
    for key, val in arrays.items():
        pname, _, field_name = key.rpartition("/")
        opt.state[params[pname]][field_name] = torch.from_numpy(np.array(val))


def make_optimizer(model: TrainedModel, config: TrainConfig) -> torch.optim.RMSprop:
    return torch.optim.RMSprop(model.network.parameters(), lr=config.learning_rate, alpha=config.alpha,
                               eps=config.eps, weight_decay=config.weight_decay, momentum=config.momentum)


# --------------------------------------------------------------------------
# Loop


def fit_source(model: TrainedModel, source, config: TrainConfig, *, normalizer: ChannelNormalizer | None = None,
               run_dir=None, resume_from=None, on_batch: Callable | None = None,
               log: Callable[[str], None] | None = None) -> tuple[TrainedModel, LossCurve]:
    """Core loop shared by :func:`train` and the estimator API."""
    torch.manual_seed(int(config.seed))
    normalizer = normalizer or ChannelNormalizer("linear").fit(None)
    loss_fn = make_loss(config.loss_spec)
    opt = make_optimizer(model, config)
    curve = LossCurve()
    start_epoch, step = 0, 0
    elapsed = 0.0
    if resume_from is not None:
        resumed, optim = load_checkpoint(resume_from, return_optimizer=True)
        model.network.load_state_dict(resumed.network.state_dict())
        restore_optimizer_state(opt, model, optim["arrays"])
        start_epoch = int(optim["meta"]["epoch"])
        step = int(optim["meta"]["global_step"])
        if run_dir is not None and (Path(run_dir) / "loss.csv").is_file():
            prior = LossCurve.load(Path(run_dir) / "loss.csv")
            curve.steps = [s for s in prior.steps if s[0] < step]
            elapsed = prior.wall_clock

    model.network.train()
    meta = {"scheme": config.scheme, "loss": config.loss, "normalization": config.normalization,
            "epochs": config.epochs, "seed": config.seed, "init_seed": model.training_meta.get("init_seed")}
    t0 = time.perf_counter()
    for epoch in range(start_epoch, config.epochs):
        for inputs, targets in iter_batches(source, config.batch_size, config.seed, epoch):
            if config.max_steps is not None and step >= config.max_steps:
                break
            x = torch.from_numpy(np.ascontiguousarray(normalizer.transform(inputs).transpose(0, 3, 1, 2)))
            y = torch.from_numpy(np.ascontiguousarray(normalizer.transform(targets).transpose(0, 3, 1, 2)))
            if on_batch is not None:
                on_batch(step, x, y)
            pred = forward(model, x, config.padding_policy, clamp=False)
            loss = loss_fn(pred, y)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise NonFiniteLossError(step, value)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            curve.append(step, value)
            step += 1
        curve.wall_clock = elapsed + time.perf_counter() - t0
        model.training_meta = {**model.training_meta, **meta, "epochs_completed": epoch + 1, "global_step": step}
        if log is not None:
            tail = curve.values[-50:]
            log(f"epoch {epoch + 1}/{config.epochs} step {step} loss {tail.mean() if tail.size else float('nan'):.6f}")
        if run_dir is not None:
            run = Path(run_dir)
            run.mkdir(parents=True, exist_ok=True)
            save_checkpoint(model, run / f"epoch_{epoch + 1}.ckpt",
                            optimizer_state_arrays(opt, model, {"epoch": epoch + 1, "global_step": step}))
            curve.save(run / "loss.csv")
        if config.max_steps is not None and step >= config.max_steps:
            break
    model.network.eval()
    return model, curve


def train(model: TrainedModel, manifest: DatasetManifest, config: TrainConfig, *, run_dir=None,
          resume_from=None, on_batch=None, log=None, split: str = "train") -> tuple[TrainedModel, LossCurve]:
    """Train on ``manifest``'s train split: noisy_a → noisy_b (N2N) or noisy_a → clean (N2C)."""
    source = ManifestSource(manifest, config.scheme, split)
    normalizer = ChannelNormalizer(config.normalization, stats=manifest.channel_stats).fit(None)
    return fit_source(model, source, config, normalizer=normalizer, run_dir=run_dir,
                      resume_from=resume_from, on_batch=on_batch, log=log)


def last_checkpoint(run_dir) -> Path | None:
    ckpts = sorted(Path(run_dir).glob("epoch_*.ckpt"), key=lambda p: int(p.stem.split("_")[1]))
    return ckpts[-1] if ckpts else None
