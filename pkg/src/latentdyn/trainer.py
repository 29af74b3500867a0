"""Pre-training loop: pair batching, optimization, EMA updates, checkpoints.

Checkpoint layout (little-endian):
  magic "AFCK" | u32 version=1 | u64 step | u32 tensor_count
  per tensor: u16 name_len | name utf-8 | u32 ndim | u64 dims[] | f32 data[]
  u64 rng[4] (shuffle key/counter, noise key/counter)
  u32 config_len | config JSON utf-8

Metrics are JSONL: one header line, then one record per training step.
"""

from __future__ import annotations

import dataclasses
import json
import struct
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data.geometry import DataError
from .data.synthetic import Trajectory
from .dynamics import ModelConfig, Models, init_models
from .encoder import ema_update, momentum_schedule
from .numerics import NumericsError, OptState, ParamStore, RandomStream, adamw_step
from .objective import VicregWeights, bidirectional_loss

CKPT_MAGIC = b"AFCK"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    # data / sampling
    k: int = 4
    epochs: int = 300
    batch_size: int = 128
    pairs_per_traj: int = 4
    seed: int = 0
    # optimizer
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    # teacher
    ema_m0: float = 0.996
    # model dims
    feat_dim: int = 64
    tokens: int = 8
    group_size: int = 32
    action_dim: int = 16
    idm_hidden: int = 64
    cond_width: int = 64
    ffn_mult: int = 4
    diffusion_steps: int = 100
    # objective
    lambda_inv: float = 25.0
    lambda_var: float = 25.0
    lambda_cov: float = 1.0
    var_threshold: float = 1.0
    token_level_inv: bool = False
    # ablation switches
    idm_input: str = "diff"
    no_history: bool = False
    objective: str = "vicreg"
    # bookkeeping
    checkpoint_every: int = 10

    def validate(self) -> None:
        if self.k < 1:
            raise DataError("frame interval k must be >= 1")
        if self.epochs < 1:
            raise DataError("epochs must be >= 1")
        if self.batch_size < 2:
            raise DataError("batch_size must be >= 2 (batch statistics)")
        if self.pairs_per_traj < 1:
            raise DataError("pairs_per_traj must be >= 1")
        if self.objective not in ("vicreg", "mse"):
            raise DataError(f"objective must be vicreg or mse, got {self.objective!r}")
        self.model_config().validate()

    @classmethod
    def desk_preset(cls, **overrides) -> "TrainConfig":
        base = dict(epochs=50, batch_size=32)
        base.update(overrides)
        return cls(**base)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            feat_dim=self.feat_dim, tokens=self.tokens, group_size=self.group_size,
            action_dim=self.action_dim, idm_hidden=self.idm_hidden,
            idm_input=self.idm_input, cond_width=self.cond_width,
            ffn_mult=self.ffn_mult, diffusion_steps=self.diffusion_steps,
        )

    def vicreg_weights(self) -> VicregWeights:
        return VicregWeights(invariance=self.lambda_inv, variance=self.lambda_var,
                             covariance=self.lambda_cov, var_threshold=self.var_threshold)


@dataclass
class MetricsRecord:
    epoch: int
    step: int
    inv: float
    var: float
    cov: float
    total_future: float
    total_history: float
    total: float
    ema_m: float
    wall_ms: float

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


@dataclass
class TrainState:
    config: TrainConfig
    models: Models
    trainable: ParamStore
    opt: OptState
    shuffle_stream: RandomStream
    noise_stream: RandomStream
    step: int = 0
    total_steps: int = 0


def _combined_trainables(models: Models) -> ParamStore:
    """One store of shared references so backward/optimizer see every
    trainable parameter in a fixed global order (never the target)."""
    combined = ParamStore()
    for prefix, store in (("enc", models.online), ("idm", models.idm), ("fdm", models.fdm)):
        for name, tensor in store.items():
            combined.add(f"{prefix}.{name}", tensor)
    return combined


def init_train_state(cfg: TrainConfig, total_steps: int = 0) -> TrainState:
    cfg.validate()
    models = init_models(cfg.model_config(), cfg.seed)
    trainable = _combined_trainables(models)
    opt = OptState.for_params(trainable, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                              weight_decay=cfg.weight_decay)
    return TrainState(
        config=cfg, models=models, trainable=trainable, opt=opt,
        shuffle_stream=RandomStream.derive(cfg.seed, "shuffle"),
        noise_stream=RandomStream.derive(cfg.seed, "noise"),
        total_steps=total_steps,
    )


def training_step(state: TrainState, clouds_t, clouds_tk, epoch: int = 0) -> MetricsRecord:
    """One optimization step on a batch of (t, t+k) cloud pairs."""
    cfg = state.config
    b = len(clouds_t)
    if b < 2:
        raise DataError("training batch must have >= 2 pairs")
    t0 = time.perf_counter()
    m_cfg = state.models.config
    shape = (b, m_cfg.tokens, m_cfg.feat_dim)
    taus = state.noise_stream.integers(1, m_cfg.diffusion_steps + 1, b)
    eps_future = state.noise_stream.normal(shape, dtype=np.float32)
    eps_history = None if cfg.no_history else state.noise_stream.normal(shape, dtype=np.float32)

    state.trainable.zero_grad()
    total, breakdown = bidirectional_loss(
        state.models, clouds_t, clouds_tk, taus, eps_future, eps_history,
        cfg.vicreg_weights(), objective=cfg.objective, no_history=cfg.no_history,
        token_level_inv=cfg.token_level_inv,
    )
    total.backward()
    adamw_step(state.trainable, state.opt)
    ema_m = momentum_schedule(state.step, max(state.total_steps, 1), cfg.ema_m0)
    ema_update(state.models.target, state.models.online, ema_m)
    state.step += 1
    return MetricsRecord(
        epoch=epoch, step=state.step, inv=breakdown.inv, var=breakdown.var,
        cov=breakdown.cov, total_future=breakdown.total_future,
        total_history=breakdown.total_history, total=breakdown.total,
        ema_m=ema_m, wall_ms=(time.perf_counter() - t0) * 1e3,
    )


def _epoch_batches(state: TrainState, dataset: list[Trajectory]) -> list[list[tuple[int, int]]]:
    """Deterministic per-epoch batches of (trajectory index, start frame)."""
    cfg = state.config
    samples: list[tuple[int, int]] = []
    for i, traj in enumerate(dataset):
        ts = state.shuffle_stream.integers(0, traj.length - cfg.k, cfg.pairs_per_traj)
        samples.extend((i, int(t)) for t in ts)
    samples = [samples[j] for j in state.shuffle_stream.permutation(len(samples))]
    batches = [samples[i:i + cfg.batch_size] for i in range(0, len(samples), cfg.batch_size)]
    if batches and len(batches[-1]) < 2:
        batches.pop()
    return batches


def steps_per_epoch(cfg: TrainConfig, n_traj: int) -> int:
    n_samples = n_traj * cfg.pairs_per_traj
    full, rem = divmod(n_samples, cfg.batch_size)
    return full + (1 if rem >= 2 else 0)


class _TokenCache:
    """Grouped point features per (trajectory, frame); frames never change
    across epochs, so tokenization is computed once per frame."""

    def __init__(self, dataset: list[Trajectory], tokens: int, group_size: int):
        self._dataset = dataset
        self._tokens = tokens
        self._group_size = group_size
        self._feats: dict[tuple[int, int], np.ndarray] = {}

    def batch(self, indices: list[tuple[int, int]]) -> np.ndarray:
        from .encoder import group_features

        rows = []
        for key in indices:
            feats = self._feats.get(key)
            if feats is None:
                i, t = key
                feats = group_features(self._dataset[i].frames[t], self._tokens,
                                       self._group_size)
                self._feats[key] = feats
            rows.append(feats)
        return np.stack(rows)


def train(cfg: TrainConfig, dataset: list[Trajectory], out_dir,
          resume_from=None) -> Path:
    """Full pre-training run; returns the final checkpoint path.

    Checkpoints land in out_dir every `checkpoint_every` epochs and at the
    end; metrics stream to out_dir/metrics.jsonl (header + one line per
    step). Resuming from an epoch-boundary checkpoint reproduces the
    uninterrupted run bit-for-bit.
    """
    cfg.validate()
    if not dataset:
        raise DataError("training dataset is empty")
    for i, traj in enumerate(dataset):
        if traj.length < cfg.k + 1:
            raise DataError(f"trajectory {i} has length {traj.length} < k+1 = {cfg.k + 1}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    spe = steps_per_epoch(cfg, len(dataset))
    if spe == 0:
        raise DataError("dataset too small to form a single batch of >= 2 pairs")
    total_steps = cfg.epochs * spe

    if resume_from is not None:
        state = load_checkpoint(resume_from)
        if dataclasses.asdict(state.config) != dataclasses.asdict(cfg):
            raise DataError("resume config does not match checkpoint config")
        state.total_steps = total_steps
        if state.step % spe != 0:
            raise DataError("can only resume from an epoch-boundary checkpoint")
        start_epoch = state.step // spe
    else:
        state = init_train_state(cfg, total_steps)
        start_epoch = 0

    metrics_path = out_dir / "metrics.jsonl"
    mode = "a" if resume_from is not None and metrics_path.exists() else "w"
    with open(metrics_path, mode, encoding="utf-8") as metrics:
        if mode == "w":
            header = {"type": "header", "total_steps": total_steps,
                      "steps_per_epoch": spe, "n_trajectories": len(dataset),
                      "config": dataclasses.asdict(cfg)}
            metrics.write(json.dumps(header, sort_keys=True) + "\n")
        cache = _TokenCache(dataset, cfg.tokens, cfg.group_size)
        for epoch in range(start_epoch, cfg.epochs):
            for batch in _epoch_batches(state, dataset):
                feats_t = cache.batch(batch)
                feats_tk = cache.batch([(i, t + cfg.k) for i, t in batch])
                try:
                    record = training_step(state, feats_t, feats_tk, epoch=epoch)
                except NumericsError as err:
                    _dump_diagnostics(state, out_dir, epoch, err)
                    raise
                metrics.write(record.to_json() + "\n")
            if (epoch + 1) % cfg.checkpoint_every == 0 and (epoch + 1) < cfg.epochs:
                save_checkpoint(state, out_dir / f"epoch_{epoch + 1:04d}.afck")
    final_path = out_dir / "final.afck"
    save_checkpoint(state, final_path)
    return final_path


def _dump_diagnostics(state: TrainState, out_dir: Path, epoch: int, err: Exception) -> None:
    diag = {
        "error": str(err),
        "epoch": epoch,
        "step": state.step,
        "param_norms": {name: float(np.linalg.norm(t.data))
                        for name, t in state.trainable.items()},
    }
    with open(out_dir / "diagnostics.json", "w", encoding="utf-8") as f:
        json.dump(diag, f, indent=2, sort_keys=True)


# -- checkpoint serialization ----------------------------------------------

def _checkpoint_tensors(state: TrainState) -> list[tuple[str, np.ndarray]]:
    tensors: list[tuple[str, np.ndarray]] = []
    for name, t in state.trainable.items():
        tensors.append((name, t.data))
    for name, t in state.models.target.items():
        tensors.append((f"tgt.{name}", t.data))
    for name in state.trainable.names():
        tensors.append((f"opt.m.{name}", state.opt.m[name]))
    for name in state.trainable.names():
        tensors.append((f"opt.v.{name}", state.opt.v[name]))
    return tensors


def save_checkpoint(state: TrainState, path) -> None:
    path = Path(path)
    tensors = _checkpoint_tensors(state)
    config_json = json.dumps(dataclasses.asdict(state.config), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(struct.pack("<Q", state.step))
        f.write(struct.pack("<I", len(tensors)))
        for name, data in tensors:
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}Q", *data.shape))
            f.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
        rng = (*state.shuffle_stream.state(), *state.noise_stream.state())
        f.write(struct.pack("<4Q", *rng))
        f.write(struct.pack("<I", len(config_json)))
        f.write(config_json)


class CheckpointFormatError(DataError):
    """Bad magic, unsupported version, or truncated checkpoint."""


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != CKPT_MAGIC:
            raise CheckpointFormatError(f"bad checkpoint magic in {path}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CKPT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        (step,) = struct.unpack("<Q", _read_exact(f, 8, "step"))
        (tensor_count,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
        tensors: dict[str, np.ndarray] = {}
        order: list[str] = []
        for i in range(tensor_count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, f"tensor {i} name length"))
            name = _read_exact(f, name_len, f"tensor {i} name").decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(f, 4, f"{name} ndim"))
            dims = struct.unpack(f"<{ndim}Q", _read_exact(f, 8 * ndim, f"{name} dims"))
            count = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(_read_exact(f, 4 * count, f"{name} data"), dtype="<f4")
            tensors[name] = data.reshape(dims).copy()
            order.append(name)
        rng = struct.unpack("<4Q", _read_exact(f, 32, "rng state"))
        (config_len,) = struct.unpack("<I", _read_exact(f, 4, "config length"))
        config_json = _read_exact(f, config_len, "config echo").decode("utf-8")
        if f.read(1):
            raise CheckpointFormatError("trailing bytes after checkpoint payload")

    cfg_dict = json.loads(config_json)
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(cfg_dict) - known
    if unknown:
        raise CheckpointFormatError(f"unknown config keys in checkpoint: {sorted(unknown)}")
    cfg = TrainConfig(**cfg_dict)

    state = init_train_state(cfg)
    state.step = step
    expected = [name for name, _ in _checkpoint_tensors(state)]
    if order != expected:
        raise CheckpointFormatError("checkpoint tensor names do not match the config's model")
    for name, t in state.trainable.items():
        t.data[...] = tensors[name].reshape(t.shape)
    for name, t in state.models.target.items():
        t.data[...] = tensors[f"tgt.{name}"].reshape(t.shape)
    for name in state.trainable.names():
        state.opt.m[name][...] = tensors[f"opt.m.{name}"].reshape(state.opt.m[name].shape)
        state.opt.v[name][...] = tensors[f"opt.v.{name}"].reshape(state.opt.v[name].shape)
    state.opt.step = step
    state.shuffle_stream = RandomStream(rng[0], rng[1])
    state.noise_stream = RandomStream(rng[2], rng[3])
    return state
