"""Training loops, prediction, and checkpoints for the three networks.

UNet and ViTAE minimize mean-squared reconstruction error; the CWGAN
alternates five critic updates (Wasserstein loss with weight clipping) per
generator update (adversarial term plus a 100x-weighted L1 term). All
variants use an 80/20 validation split (random state 42), early stopping
that restores the best-validation parameters, and halve-on-plateau learning
rate reduction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from ..errors import ConfigError, DataError, TrainingDiverged
from ..fields import GridSpec, Realization, VelocityField
from ..placement import SensorLayout
from . import engine as en
from .engine import Adam, Tensor
from .models import ArchitectureSpec, CWGAN, build_model, encode_input_batch

__all__ = [
    "TrainConfig",
    "TrainedModel",
    "build_training_set",
    "train",
    "predict",
    "predict_batch",
    "ensemble_predict",
    "save_checkpoint",
    "load_checkpoint",
]

DEFAULT_LR = 1e-3
CWGAN_LR = 1e-4
WEIGHT_CLIP = 0.01


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; lr defaults to 1e-4 for CWGAN, 1e-3 otherwise."""

    max_epochs: int = 500
    batch_size: int = 64
    lr: float | None = None
    val_fraction: float = 0.2
    split_seed: int = 42
    early_stop_patience: int = 20
    lr_plateau_patience: int = 10
    lr_plateau_factor: float = 0.5
    critic_steps: int = 5
    l1_weight: float = 100.0
    weight_clip: float = WEIGHT_CLIP
    max_train_samples: int | None = None
    max_steps_per_epoch: int | None = None

    def __post_init__(self) -> None:
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in (0, 1)")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigError("max_epochs and batch_size must be >= 1")

    def resolve_lr(self, variant: str) -> float:
        if self.lr is not None:
            return self.lr
        return CWGAN_LR if variant == "cwgan" else DEFAULT_LR


@dataclass
class TrainedModel:
    """A built network plus its training history."""

    spec: ArchitectureSpec
    model: object
    seed: int
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1

    @property
    def param_count(self) -> int:
        return self.model.param_count

    @property
    def parameters(self) -> np.ndarray:
        return self.model.get_flat()


def build_training_set(
    realizations: list[Realization], layout: SensorLayout
) -> tuple[np.ndarray, np.ndarray]:
    """Stack (inputs, targets) = ((n,3,ny,nx), (n,2,ny,nx)) over realizations."""
    ins, outs = [], []
    for r in realizations:
        ins.append(encode_input_batch(layout, r.values))
        outs.append(np.moveaxis(r.values, -1, 1))
    return np.concatenate(ins), np.concatenate(outs)


def _split_indices(n: int, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(cfg.split_seed).permutation(n)
    n_val = max(1, int(round(n * cfg.val_fraction)))
    if n_val >= n:
        raise DataError(f"validation split leaves no training data (n={n})")
    return perm[n_val:], perm[:n_val]


def _noise_like(rng: np.random.Generator, x: np.ndarray, channels: int, std: float) -> np.ndarray:
    return std * rng.standard_normal((x.shape[0], channels, x.shape[2], x.shape[3]))


def train(
    spec: ArchitectureSpec,
    inputs: np.ndarray,
    targets: np.ndarray,
    cfg: TrainConfig,
    seed: int = 0,
) -> TrainedModel:
    """Train one network on encoded (input, target) pairs.

    Deterministic per seed. Raises TrainingDiverged on non-finite losses.
    """
    inputs = np.asarray(inputs)
    targets = np.asarray(targets)
    if inputs.shape[0] != targets.shape[0]:
        raise ConfigError("inputs and targets disagree on sample count")
    if inputs.shape[0] < 10:
        raise ConfigError(f"need at least 10 training snapshots, got {inputs.shape[0]}")
    if cfg.max_train_samples is not None and inputs.shape[0] > cfg.max_train_samples:
        step = inputs.shape[0] / cfg.max_train_samples
        keep = (np.arange(cfg.max_train_samples) * step).astype(np.int64)
        inputs, targets = inputs[keep], targets[keep]

    train_idx, val_idx = _split_indices(inputs.shape[0], cfg)
    model = build_model(spec, seed)
    if spec.variant == "cwgan":
        return _train_cwgan(model, inputs, targets, train_idx, val_idx, cfg, seed)
    return _train_regression(model, inputs, targets, train_idx, val_idx, cfg, seed)


def _train_regression(model, inputs, targets, train_idx, val_idx, cfg: TrainConfig, seed: int) -> TrainedModel:
    lr = cfg.resolve_lr(model.spec.variant)
    opt = Adam(model.params(), lr=lr)
    rng = np.random.default_rng([seed, 1])
    x_val = Tensor(inputs[val_idx])
    y_val = targets[val_idx]

    tm = TrainedModel(spec=model.spec, model=model, seed=seed)
    best_val = np.inf
    best_flat = model.get_flat()
    since_improve = 0
    since_plateau = 0
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(train_idx)
        if cfg.max_steps_per_epoch is not None:
            order = order[: cfg.max_steps_per_epoch * cfg.batch_size]
        losses = []
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            pred = model.forward(Tensor(inputs[idx]), training=True)
            loss = en.mean_squared_error(pred, Tensor(targets[idx]))
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"non-finite train loss at epoch {epoch}")
            model.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        val_pred = model.forward(x_val)
        val_loss = float(np.mean((val_pred.data - y_val) ** 2))
        if not np.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        tm.history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val_loss, "lr": opt.lr})
        if val_loss < best_val:
            best_val = val_loss
            best_flat = model.get_flat()
            tm.best_epoch = epoch
            since_improve = 0
            since_plateau = 0
        else:
            since_improve += 1
            since_plateau += 1
            if since_plateau >= cfg.lr_plateau_patience:
                opt.lr *= cfg.lr_plateau_factor
                since_plateau = 0
            if since_improve >= cfg.early_stop_patience:
                break
    model.set_flat(best_flat)
    return tm


def cwgan_critic_step(
    model: CWGAN,
    opt_c: Adam,
    cond: np.ndarray,
    real: np.ndarray,
    noise: np.ndarray,
    clip: float,
) -> float:
    """One Wasserstein critic update followed by weight clipping.

    The generated sample is detached, so generator parameters are untouched.
    """
    cond_t = Tensor(cond)
    fake = model.forward(cond_t, noise)
    fake = Tensor(fake.data.copy())  # detach
    loss = model.criticize(cond_t, fake).mean() - model.criticize(cond_t, Tensor(real)).mean()
    if not np.isfinite(loss.data):
        raise TrainingDiverged("non-finite critic loss")
    model.zero_grad()
    loss.backward()
    opt_c.step()
    model.clip_critic(clip)
    return float(loss.data)


def cwgan_generator_step(
    model: CWGAN,
    opt_g: Adam,
    cond: np.ndarray,
    real: np.ndarray,
    noise: np.ndarray,
    l1_weight: float,
) -> float:
    """One generator update: adversarial score plus weighted L1."""
    cond_t = Tensor(cond)
    fake = model.forward(cond_t, noise)
    loss = -model.criticize(cond_t, fake).mean() + l1_weight * en.mean_absolute_error(fake, Tensor(real))
    if not np.isfinite(loss.data):
        raise TrainingDiverged("non-finite generator loss")
    model.zero_grad()
    loss.backward()
    opt_g.step()
    return float(loss.data)


def _train_cwgan(model: CWGAN, inputs, targets, train_idx, val_idx, cfg: TrainConfig, seed: int) -> TrainedModel:
    lr = cfg.resolve_lr("cwgan")
    opt_g = Adam(model.generator_params(), lr=lr)
    opt_c = Adam(model.critic_params(), lr=lr)
    rng = np.random.default_rng([seed, 1])
    noise_rng = np.random.default_rng([seed, 2])
    nc = model.spec.cwgan_noise_channels
    std = model.spec.cwgan_noise_std
    x_val = inputs[val_idx]
    y_val = targets[val_idx]
    # Fixed validation noise keeps epoch-to-epoch val losses comparable.
    val_noise = std * np.random.default_rng([seed, 3]).standard_normal(
        (x_val.shape[0], nc, x_val.shape[2], x_val.shape[3])
    )

    tm = TrainedModel(spec=model.spec, model=model, seed=seed)
    best_val = np.inf
    best_flat = model.get_flat()
    since_improve = 0
    since_plateau = 0

    def batches():
        while True:
            for lo in range(0, len(order), cfg.batch_size):
                yield order[lo : lo + cfg.batch_size]

    for epoch in range(cfg.max_epochs):
        order = rng.permutation(train_idx)
        batch_iter = batches()
        n_gen_steps = max(1, len(order) // cfg.batch_size)
        if cfg.max_steps_per_epoch is not None:
            n_gen_steps = min(n_gen_steps, cfg.max_steps_per_epoch)
        g_losses = []
        for _ in range(n_gen_steps):
            for _ in range(cfg.critic_steps):
                idx = next(batch_iter)
                cwgan_critic_step(
                    model, opt_c, inputs[idx], targets[idx],
                    _noise_like(noise_rng, inputs[idx], nc, std), cfg.weight_clip,
                )
            idx = next(batch_iter)
            g_losses.append(
                cwgan_generator_step(
                    model, opt_g, inputs[idx], targets[idx],
                    _noise_like(noise_rng, inputs[idx], nc, std), cfg.l1_weight,
                )
            )
        # Validation monitors the reconstruction (L1) term only: the
        # adversarial score moves with the critic and is not comparable
        # across epochs.
        val_pred = model.forward(Tensor(x_val), val_noise)
        val_loss = float(np.mean(np.abs(val_pred.data - y_val)))
        if not np.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        tm.history.append({"epoch": epoch, "train_loss": float(np.mean(g_losses)), "val_loss": val_loss, "lr": opt_g.lr})
        if val_loss < best_val:
            best_val = val_loss
            best_flat = model.get_flat()
            tm.best_epoch = epoch
            since_improve = 0
            since_plateau = 0
        else:
            since_improve += 1
            since_plateau += 1
            if since_plateau >= cfg.lr_plateau_patience:
                opt_g.lr *= cfg.lr_plateau_factor
                opt_c.lr *= cfg.lr_plateau_factor
                since_plateau = 0
            if since_improve >= cfg.early_stop_patience:
                break
    model.set_flat(best_flat)
    return tm


# --- prediction ---------------------------------------------------------------


def _cwgan_noise(seed: int, draw: int, n: int, channels: int, ny: int, nx: int, std: float) -> np.ndarray:
    return std * np.random.default_rng([seed, draw]).standard_normal((n, channels, ny, nx))


def predict(tm: TrainedModel, model_input: np.ndarray, noise_seed: int = 0) -> VelocityField:
    """Reconstruct one field from a (3, ny, nx) encoded input.

    Deterministic for UNet/ViTAE; the CWGAN draws one seeded noise tensor.
    """
    out = predict_batch(tm, np.asarray(model_input)[None], noise_seed=noise_seed)[0]
    grid = GridSpec(nx=out.shape[1], ny=out.shape[0])
    return VelocityField(grid, out)


def predict_batch(tm: TrainedModel, inputs: np.ndarray, noise_seed: int = 0, chunk: int = 256) -> np.ndarray:
    """Batched prediction: (n, 3, ny, nx) -> (n, ny, nx, 2)."""
    inputs = np.asarray(inputs)
    n, _, ny, nx = inputs.shape
    model = tm.model
    noise = None
    if tm.spec.variant == "cwgan":
        noise = _cwgan_noise(noise_seed, 0, n, tm.spec.cwgan_noise_channels, ny, nx, tm.spec.cwgan_noise_std)
    outs = []
    for lo in range(0, n, chunk):
        x = Tensor(inputs[lo : lo + chunk])
        if noise is None:
            y = model.forward(x)
        else:
            y = model.forward(x, noise[lo : lo + chunk])
        outs.append(y.data)
    return np.moveaxis(np.concatenate(outs), 1, -1)


def ensemble_predict(tm: TrainedModel, model_input: np.ndarray, m: int, seed: int = 0) -> VelocityField:
    """Average m independent-noise CWGAN predictions elementwise.

    ``ensemble_predict(m=1, seed)`` equals ``predict(..., noise_seed=seed)``.
    For deterministic models every draw is identical.
    """
    if m < 1:
        raise ConfigError("ensemble size m must be >= 1")
    out = ensemble_predict_batch(tm, np.asarray(model_input)[None], m, seed)[0]
    grid = GridSpec(nx=out.shape[1], ny=out.shape[0])
    return VelocityField(grid, out)


def ensemble_predict_batch(tm: TrainedModel, inputs: np.ndarray, m: int, seed: int = 0, chunk: int = 256) -> np.ndarray:
    inputs = np.asarray(inputs)
    n, _, ny, nx = inputs.shape
    if tm.spec.variant != "cwgan":
        return predict_batch(tm, inputs, chunk=chunk)
    acc = np.zeros((n, ny, nx, 2))
    for draw in range(m):
        noise = _cwgan_noise(seed, draw, n, tm.spec.cwgan_noise_channels, ny, nx, tm.spec.cwgan_noise_std)
        outs = []
        for lo in range(0, n, chunk):
            y = tm.model.forward(Tensor(inputs[lo : lo + chunk]), noise[lo : lo + chunk])
            outs.append(y.data)
        acc += np.moveaxis(np.concatenate(outs), 1, -1)
    return acc / m


# --- checkpoints ----------------------------------------------------------------


def save_checkpoint(tm: TrainedModel, path: str | Path) -> Path:
    """JSON header next to a flat little-endian f32 parameter payload."""
    path = Path(path)
    payload_name = path.stem + ".bin"
    model = tm.model
    params = model.get_flat().astype("<f4")
    buffers = model.get_buffers().astype("<f4")
    header = {
        "spec": asdict(tm.spec),
        "seed": tm.seed,
        "best_epoch": tm.best_epoch,
        "epochs_run": len(tm.history),
        "final_val_loss": tm.history[-1]["val_loss"] if tm.history else None,
        "param_count": model.param_count,
        "n_buffers": int(buffers.size),
        "payload": payload_name,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    np.concatenate([params, buffers]).tofile(path.parent / payload_name)
    return path


def load_checkpoint(path: str | Path) -> TrainedModel:
    path = Path(path)
    try:
        header = json.loads(path.read_text())
        spec_doc = dict(header["spec"])
        for key, val in spec_doc.items():
            if isinstance(val, list):
                spec_doc[key] = tuple(val)
        spec = ArchitectureSpec(**spec_doc)
        seed = int(header["seed"])
        raw = np.fromfile(path.parent / header["payload"], dtype="<f4").astype(np.float64)
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    model = build_model(spec, seed)
    n_params = model.param_count
    n_buffers = int(header.get("n_buffers", 0))
    if raw.size != n_params + n_buffers:
        raise DataError(f"checkpoint payload has {raw.size} values, expected {n_params + n_buffers}")
    model.set_flat(raw[:n_params])
    if n_buffers:
        model.set_buffers(raw[n_params:])
    tm = TrainedModel(spec=spec, model=model, seed=seed)
    tm.best_epoch = int(header.get("best_epoch", -1))
    return tm
