"""Three-stage training: TC-encoder pretrain, pressure-branch pretrain, joint fine-tune.

The joint objective is ``L_loc + alpha * L_GPH + beta * L2`` where L2 is the
sum of squared weights (biases excluded). All stages use RMSprop with norm
clipping and a seeded per-epoch shuffle, so a run is reproducible given its
seed on one platform.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import tensor as T
from .evaluation import mde
from .fusion import ModelConfig, TrackForecaster, loc_loss
from .pressure import gph_loss
from .samples import NormStats, SampleArrays

log = logging.getLogger(__name__)

ABLATIONS = ("none", "tc_only", "pressure_only", "no_gph_decoder")
METRICS_HEADER = "stage\tepoch\ttrain_loss\tval_mde_24h\n"


class TrainingDiverged(FloatingPointError):
    """Raised on a non-finite loss; ``checkpoint`` holds the last finite state."""

    def __init__(self, message: str, checkpoint: "Checkpoint"):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    lr_decay: float = 1.0  # per-epoch multiplicative factor; 1.0 keeps the rate constant
    batch_size: int = 64
    alpha: float = 1.2
    beta: float = 1e-5
    rmsprop_decay: float = 0.99  # squared-gradient moving average
    rmsprop_eps: float = 1e-8
    epochs_stage1: int = 50
    epochs_stage2: int = 50
    epochs_stage3: int = 100
    patience: int = 10
    clip_norm: float = 5.0  # <= 0 disables clipping
    seed: int = 0
    dtype: str = "float64"
    ablation: str = "none"
    hidden_size: int = 128
    d_gph: int = 128
    fc_size: int = 64

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"alpha and beta must be >= 0, got {self.alpha}, {self.beta}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    @property
    def use_tc(self) -> bool:
        return self.ablation != "pressure_only"

    @property
    def use_gph(self) -> bool:
        return self.ablation != "tc_only"

    @property
    def with_gph_decoder(self) -> bool:
        return self.use_gph and self.ablation != "no_gph_decoder"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        """Build from string or typed values; unknown keys raise ``KeyError``."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - set(types))
        if unknown:
            raise KeyError(f"unknown config keys {unknown}")
        kwargs = {}
        for key, raw in values.items():
            kind = types[key]
            kwargs[key] = raw if not isinstance(raw, str) else {"int": int, "float": float}.get(kind, str)(raw)
        return cls(**kwargs)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_dict().items())

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; blank lines and ``#`` comments ignored."""
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def load_config_file(path) -> dict:
    return parse_config_text(Path(path).read_text())


def model_config_for(arrays: SampleArrays, config: TrainConfig) -> ModelConfig:
    q = arrays.gph.shape[-1] if arrays.gph is not None else 51
    if config.use_gph and arrays.gph is None:
        raise ValueError("dataset has no GPH stacks; use the tc_only ablation")
    return ModelConfig(
        q=q, time_steps=arrays.x.shape[1], tau=arrays.y.shape[1], n_features=arrays.x.shape[2],
        hidden_size=config.hidden_size, d_gph=config.d_gph, fc_size=config.fc_size,
        use_tc=config.use_tc, use_gph=config.use_gph, with_gph_decoder=config.with_gph_decoder,
    )


@dataclass
class Checkpoint:
    stage: str
    params: "OrderedDict[str, np.ndarray]"
    norm: NormStats
    model_config: dict
    train_config: dict
    data_hash: str = ""
    history: list = field(default_factory=list)

    @property
    def config_hash(self) -> str:
        blob = json.dumps({"model": self.model_config, "train": self.train_config, "data": self.data_hash},
                          sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def build_model(self) -> TrackForecaster:
        cfg = ModelConfig(**{**self.model_config, "channels": tuple(self.model_config["channels"])})
        dtype = TrainConfig(**self.train_config).torch_dtype
        model = TrackForecaster(cfg, dtype=dtype)
        T.ParamStore(model).load_arrays(self.params)
        return model

    def save(self, path) -> Path:
        meta = {
            "stage": self.stage, "norm": self.norm.to_dict(), "model_config": self.model_config,
            "train_config": self.train_config, "data_hash": self.data_hash,
            "config_hash": self.config_hash, "history": self.history,
        }
        return T.write_container(path, self.params, meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        arrays, meta = T.read_container(path)
        if "stage" not in meta:
            raise ValueError(f"{path} is not a checkpoint container")
        ckpt = cls(meta["stage"], OrderedDict(arrays), NormStats.from_dict(meta["norm"]),
                   meta["model_config"], meta["train_config"], meta["data_hash"], meta["history"])
        if ckpt.config_hash != meta["config_hash"]:
            raise ValueError(f"{path}: stored config hash does not match its contents")
        return ckpt


def _snapshot(model, stage, norm, mcfg, config, data_hash, history) -> Checkpoint:
    return Checkpoint(stage, T.ParamStore(model).to_arrays(), norm, dataclasses.asdict(mcfg),
                      config.to_dict(), data_hash, [dict(h) for h in history])


def init_checkpoint(train: SampleArrays, config: TrainConfig, norm: NormStats | None = None,
                    data_hash: str = "") -> Checkpoint:
    """Freshly initialized model (seeded) wrapped as a checkpoint."""
    norm = norm or NormStats.fit(train)
    mcfg = model_config_for(train, config)
    torch.manual_seed(config.seed)
    model = TrackForecaster(mcfg, dtype=config.torch_dtype)
    return _snapshot(model, "init", norm, mcfg, config, data_hash, [])


@dataclass
class Tensors:
    """Normalized training tensors in the run's dtype."""

    x: torch.Tensor
    y: torch.Tensor
    gph: torch.Tensor | None
    tgph: torch.Tensor | None

    @classmethod
    def from_arrays(cls, arrays: SampleArrays, norm: NormStats, dtype) -> "Tensors":
        conv = lambda a: torch.as_tensor(np.asarray(a), dtype=dtype)  # noqa: E731
        gph = None if arrays.gph is None else conv(norm.gph.normalize(arrays.gph))
        tgph = None if arrays.tgph is None else conv(norm.gph.normalize(arrays.tgph))
        return cls(conv(norm.features.normalize(arrays.x)), conv(norm.deltas.normalize(arrays.y)), gph, tgph)

    def __len__(self) -> int:
        return len(self.x)

    def batch(self, idx) -> "Tensors":
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return Tensors(self.x[idx], self.y[idx], pick(self.gph), pick(self.tgph))


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, size):
        yield torch.as_tensor(order[start : start + size])


def weight_penalty(model: nn.Module) -> torch.Tensor:
    """Sum of squared weights; parameters whose name contains ``bias`` are excluded."""
    return T.l2_penalty(p for n, p in model.named_parameters() if "bias" not in n)


def composite_loss(model: TrackForecaster, batch: Tensors, alpha: float, beta: float):
    """``L_loc + alpha * L_GPH + beta * L2``; returns ``(total, parts)``."""
    want_gph = alpha > 0 and model.gph_decoder is not None
    deltas, gph_pred = model(batch.x, batch.gph, with_gph_prediction=want_gph)
    l_loc = loc_loss(deltas, batch.y)
    total = l_loc
    parts = {"loc": l_loc.item()}
    if want_gph:
        l_gph = gph_loss(gph_pred, batch.tgph)
        total = total + alpha * l_gph
        parts["gph"] = l_gph.item()
    if beta > 0:
        l2 = weight_penalty(model)
        total = total + beta * l2
        parts["l2"] = l2.item()
    return total, parts


def _optimizer(params, config: TrainConfig):
    return torch.optim.RMSprop(params, lr=config.learning_rate, alpha=config.rmsprop_decay,
                               eps=config.rmsprop_eps)


def _run_epochs(stage, params, loss_fn, data: Tensors, epochs, config: TrainConfig, on_epoch, snapshot):
    """Shared loop. ``on_epoch(epoch, train_loss)`` returns False to stop early."""
    opt = _optimizer(params, config)
    schedule = torch.optim.lr_scheduler.ExponentialLR(opt, gamma=config.lr_decay)
    rng = np.random.default_rng([config.seed, {"stage1": 1, "stage2": 2, "stage3": 3}[stage]])
    last_good = snapshot()
    for epoch in range(1, epochs + 1):
        total, count = 0.0, 0
        for idx in _batches(len(data), config.batch_size, rng):
            opt.zero_grad()
            loss = loss_fn(data.batch(idx))
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"{stage}: non-finite loss at epoch {epoch}; kept checkpoint from epoch {epoch - 1}",
                    last_good)
            loss.backward()
            if config.clip_norm > 0:
                torch.nn.utils.clip_grad_norm_(params, config.clip_norm)
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        schedule.step()
        last_good = None
        if on_epoch(epoch, total / count) is False:
            break
        last_good = snapshot()
    return last_good


def _append_metrics(path, stage, epoch, loss, val):
    if path is None:
        return
    path = Path(path)
    if not path.exists():
        path.write_text(METRICS_HEADER)
    with path.open("a") as fh:
        fh.write(f"{stage}\t{epoch}\t{loss:.10g}\t{'' if val is None else f'{val:.6f}'}\n")


def _full_loss(loss_fn, data: Tensors, batch_size: int) -> float:
    with torch.no_grad():
        total = 0.0
        for start in range(0, len(data), batch_size):
            idx = torch.arange(start, min(start + batch_size, len(data)))
            total += float(loss_fn(data.batch(idx))) * len(idx)
    return total / len(data)


def stage1_pretrain_tc(train: SampleArrays, config: TrainConfig, checkpoint: Checkpoint | None = None,
                       metrics_path=None) -> Checkpoint:
    """Train the TC encoder through a temporary FC head on the L1 delta loss.

    The head maps E_TC straight to all ``tau`` deltas and is discarded
    afterwards. Skipped when the TC branch is ablated.
    """
    ckpt = checkpoint or init_checkpoint(train, config)
    model = ckpt.build_model()
    if model.encoder is None:
        return dataclasses.replace(ckpt, stage="stage1-skipped")
    tau = model.config.tau
    torch.manual_seed(config.seed + 1)
    head = nn.Linear(model.config.hidden_size, tau * 2, dtype=config.torch_dtype)
    data = Tensors.from_arrays(train, ckpt.norm, config.torch_dtype)
    history = list(ckpt.history)

    def loss_fn(b: Tensors):
        pred = head(model.encoder(b.x).e_tc).view(-1, tau, 2)
        return loc_loss(pred, b.y)

    history.append({"stage": "stage1", "epoch": 0, "train_loss": _full_loss(loss_fn, data, config.batch_size)})
    snap = lambda: _snapshot(model, "stage1", ckpt.norm, model.config, config, ckpt.data_hash, history)  # noqa: E731

    def on_epoch(epoch, loss):
        history.append({"stage": "stage1", "epoch": epoch, "train_loss": loss})
        _append_metrics(metrics_path, "stage1", epoch, loss, None)

    params = list(model.encoder.parameters()) + list(head.parameters())
    _run_epochs("stage1", params, loss_fn, data, config.epochs_stage1, config, on_epoch, snap)
    return snap()


def stage2_pretrain_pressure(train: SampleArrays, config: TrainConfig, checkpoint: Checkpoint | None = None,
                             metrics_path=None) -> Checkpoint:
    """Train the pressure encoder and GPH decoder on L_GPH alone.

    Skipped when the pressure branch or its decoder is ablated.
    """
    ckpt = checkpoint or init_checkpoint(train, config)
    model = ckpt.build_model()
    if model.pressure is None or model.gph_decoder is None:
        return dataclasses.replace(ckpt, stage="stage2-skipped")
    data = Tensors.from_arrays(train, ckpt.norm, config.torch_dtype)
    history = list(ckpt.history)

    def loss_fn(b: Tensors):
        return gph_loss(model.gph_decoder(model.pressure(b.gph).f_gph), b.tgph)

    history.append({"stage": "stage2", "epoch": 0, "train_loss": _full_loss(loss_fn, data, config.batch_size)})
    snap = lambda: _snapshot(model, "stage2", ckpt.norm, model.config, config, ckpt.data_hash, history)  # noqa: E731

    def on_epoch(epoch, loss):
        history.append({"stage": "stage2", "epoch": epoch, "train_loss": loss})
        _append_metrics(metrics_path, "stage2", epoch, loss, None)

    params = list(model.pressure.parameters()) + list(model.gph_decoder.parameters())
    _run_epochs("stage2", params, loss_fn, data, config.epochs_stage2, config, on_epoch, snap)
    return snap()


def predict_deltas(model: TrackForecaster, arrays: SampleArrays, norm: NormStats,
                   batch_size: int = 256) -> np.ndarray:
    """Forecast displacements in degrees, (N, tau, 2)."""
    dtype = next(model.parameters()).dtype
    data = Tensors.from_arrays(arrays, norm, dtype)
    out = []
    model.eval()
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            b = data.batch(torch.arange(start, min(start + batch_size, len(data))))
            z, _ = model(b.x if model.encoder is not None else None, b.gph)
            out.append(z.double().numpy())
    model.train()
    return norm.deltas.denormalize(np.concatenate(out))


def horizon_mde(model, arrays: SampleArrays, norm: NormStats, step: int = 3) -> float:
    """Mean distance error (km) at lead index ``step`` (3 = 24 h)."""
    pred = predict_deltas(model, arrays, norm)
    step = min(step, pred.shape[1] - 1)
    return float(mde(arrays.origin + pred[:, step], arrays.truth[:, step]).mean())


def stage3_end_to_end(train: SampleArrays, val: SampleArrays | None, config: TrainConfig,
                      checkpoint: Checkpoint | None = None, metrics_path=None) -> Checkpoint:
    """Joint training on the composite loss, keeping the best-on-validation state.

    Validation 24 h MDE is evaluated after every epoch; training stops after
    ``patience`` epochs without improvement. Without a validation set the
    final state is returned.
    """
    ckpt = checkpoint or init_checkpoint(train, config)
    model = ckpt.build_model()
    data = Tensors.from_arrays(train, ckpt.norm, config.torch_dtype)
    history = list(ckpt.history)
    has_val = val is not None and len(val) > 0
    alpha = config.alpha if model.gph_decoder is not None else 0.0

    def loss_fn(b: Tensors):
        return composite_loss(model, b, alpha, config.beta)[0]

    history.append({"stage": "stage3", "epoch": 0, "train_loss": _full_loss(loss_fn, data, config.batch_size),
                    "val_mde_24h": horizon_mde(model, val, ckpt.norm) if has_val else None})
    snap = lambda: _snapshot(model, "stage3", ckpt.norm, model.config, config, ckpt.data_hash, history)  # noqa: E731
    best = {"score": history[-1]["val_mde_24h"] if has_val else math.inf, "ckpt": snap(), "wait": 0}

    def on_epoch(epoch, loss):
        score = horizon_mde(model, val, ckpt.norm) if has_val else None
        history.append({"stage": "stage3", "epoch": epoch, "train_loss": loss, "val_mde_24h": score})
        _append_metrics(metrics_path, "stage3", epoch, loss, score)
        if not has_val:
            best["ckpt"] = snap()
            return True
        if score < best["score"]:
            best.update(score=score, ckpt=snap(), wait=0)
        else:
            best["wait"] += 1
            if best["wait"] >= config.patience:
                log.info("stage3: early stop at epoch %d (best val MDE %.2f km)", epoch, best["score"])
                return False
        return True

    _run_epochs("stage3", list(model.parameters()), loss_fn, data, config.epochs_stage3, config, on_epoch, snap)
    result = best["ckpt"]
    result.history = [dict(h) for h in history]
    return result


def train_all(train: SampleArrays, val: SampleArrays | None, config: TrainConfig, norm: NormStats | None = None,
              data_hash: str = "", stages=(1, 2, 3), checkpoint: Checkpoint | None = None,
              metrics_path=None) -> Checkpoint:
    """Run the requested stages in order, each starting from the previous checkpoint."""
    ckpt = checkpoint or init_checkpoint(train, config, norm, data_hash)
    if 1 in stages:
        ckpt = stage1_pretrain_tc(train, config, ckpt, metrics_path)
    if 2 in stages:
        ckpt = stage2_pretrain_pressure(train, config, ckpt, metrics_path)
    if 3 in stages:
        ckpt = stage3_end_to_end(train, val, config, ckpt, metrics_path)
    return ckpt
