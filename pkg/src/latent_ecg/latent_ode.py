"""Path-regularised latent ODE for single-lead beats.

An ODE-RNN encoder reads a beat backwards in time and emits a Gaussian over
the initial latent state ``z0``. The decoder integrates the latent drift from
``z0`` and maps each latent state to a signal value. Training minimises
reconstruction error plus a penalty on squared distances between consecutive
latent states; there is no KL term.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .autodiff import NumericError, Tensor, exp, grad, maximum, square
from .beats import WINDOW_AFTER, WINDOW_BEFORE, Beat
from .nn import (
    GruParams,
    MlpParams,
    MlpVectorField,
    gru_step,
    init_gru,
    init_linear,
    init_mlp,
    load_arrays,
    mlp_forward,
    save_arrays,
)
from .ode import SolverConfig, SolverTrace, odeint

logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "LatentOdeModel",
    "LatentVector",
    "init_model",
    "encode_dist",
    "encode_dist_batch",
    "encode_sample",
    "decode",
    "decode_batch",
    "path_penalty",
    "loss",
    "train",
    "LatentOdeEncoder",
    "write_latents_csv",
    "read_latents_csv",
    "beat_window_times",
]

SIGMA_FLOOR = 1e-3


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 50_000
    batch_size: int = 256
    learning_rate: float = 1e-3
    path_weight: float = 1e-3
    solver: SolverConfig = SolverConfig()
    seed: int = 0
    eval_every: int = 500
    checkpoint_every: int = 0
    # encoder input strides drawn per step; (1,) trains on full-rate beats only
    encoder_strides: tuple[int, ...] = (1,)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.path_weight < 0:
            raise ValueError("path_weight must be non-negative")
        if self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("batch_size and learning_rate must be positive")
        object.__setattr__(self, "encoder_strides", tuple(int(k) for k in self.encoder_strides))
        if not self.encoder_strides or min(self.encoder_strides) < 1:
            raise ValueError("encoder_strides must be a non-empty list of positive integers")


@dataclass
class LatentOdeModel:
    gru: GruParams
    encoder_dynamics: MlpParams
    head_w: Tensor
    head_b: Tensor
    dynamics: MlpParams
    readout: MlpParams
    solver: SolverConfig = SolverConfig()
    config: dict = field(default_factory=dict)
    # the beat window spans [0, time_scale] in solver time
    time_scale: float = 1.0

    @property
    def latent_dim(self) -> int:
        return self.dynamics.in_size

    @property
    def hidden_dim(self) -> int:
        return self.gru.hidden_size

    def parameters(self) -> list[Tensor]:
        return self.gru.parameters() + self.encoder_dynamics.parameters() + [self.head_w, self.head_b] + self.dynamics.parameters() + self.readout.parameters()

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_n", "u_n", "b_n"):
            out[f"gru.{name}"] = getattr(self.gru, name).data
        for prefix, mlp in (("encoder_dynamics", self.encoder_dynamics), ("dynamics", self.dynamics), ("readout", self.readout)):
            for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
                out[f"{prefix}.w{i}"] = w.data
                out[f"{prefix}.b{i}"] = b.data
        out["head.w"] = self.head_w.data
        out["head.b"] = self.head_b.data
        return out

    def copy(self) -> LatentOdeModel:
        return _model_from_arrays({k: v.copy() for k, v in self.named_arrays().items()}, self._metadata())

    def _metadata(self) -> dict:
        return {
            "kind": "latent_ode",
            "latent_dim": self.latent_dim,
            "hidden_dim": self.hidden_dim,
            "dynamics_final_activation": self.dynamics.final_activation,
            "solver": asdict(self.solver),
            "config": self.config,
            "time_scale": self.time_scale,
        }

    def save(self, path: str | os.PathLike) -> None:
        save_arrays(path, self.named_arrays(), self._metadata())

    @classmethod
    def load(cls, path: str | os.PathLike) -> LatentOdeModel:
        arrays, meta = load_arrays(path)
        if meta.get("kind") != "latent_ode":
            raise ValueError(f"{path} is not a latent ODE checkpoint")
        return _model_from_arrays(arrays, meta)


def _mlp_from_arrays(arrays, prefix, final_activation="identity") -> MlpParams:
    n = sum(1 for k in arrays if k.startswith(prefix + ".w"))
    return MlpParams(
        weights=[Tensor(arrays[f"{prefix}.w{i}"], requires_grad=True) for i in range(n)],
        biases=[Tensor(arrays[f"{prefix}.b{i}"], requires_grad=True) for i in range(n)],
        final_activation=final_activation,
    )


def _model_from_arrays(arrays: dict, meta: dict) -> LatentOdeModel:
    gru = GruParams(**{n: Tensor(arrays[f"gru.{n}"], requires_grad=True) for n in ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_n", "u_n", "b_n")})
    return LatentOdeModel(
        gru=gru,
        encoder_dynamics=_mlp_from_arrays(arrays, "encoder_dynamics"),
        head_w=Tensor(arrays["head.w"], requires_grad=True),
        head_b=Tensor(arrays["head.b"], requires_grad=True),
        dynamics=_mlp_from_arrays(arrays, "dynamics", meta.get("dynamics_final_activation", "identity")),
        readout=_mlp_from_arrays(arrays, "readout"),
        solver=SolverConfig(**meta.get("solver", {})),
        config=dict(meta.get("config", {})),
        time_scale=float(meta.get("time_scale", 1.0)),
    )


def init_model(
    latent_dim: int = 45,
    hidden_dim: int = 45,
    width: int = 50,
    depth: int = 2,
    readout_width: int = 50,
    readout_depth: int = 1,
    seed: int = 0,
    solver: SolverConfig = SolverConfig(),
    time_scale: float = 10.0,
    initial_sigma: float = 1e-2,
) -> LatentOdeModel:
    """Fresh parameters. The log-sigma half of the encoder head starts at
    ``log(initial_sigma)`` so early samples stay close to the mean."""
    if time_scale <= 0 or not initial_sigma >= SIGMA_FLOOR:
        raise ValueError("time_scale must be positive and initial_sigma at least the sigma floor")
    rng = np.random.default_rng(seed)
    gru = init_gru(rng, 1, hidden_dim)
    enc_dyn = init_mlp(rng, hidden_dim, hidden_dim, width, depth)
    head_w, head_b = init_linear(rng, hidden_dim, 2 * latent_dim)
    head_b.data[latent_dim:] = math.log(initial_sigma)
    dyn = init_mlp(rng, latent_dim, latent_dim, width, depth)
    readout = init_mlp(rng, latent_dim, 1, readout_width, readout_depth)
    config = {"width": width, "depth": depth, "readout_width": readout_width, "readout_depth": readout_depth, "seed": seed}
    return LatentOdeModel(gru, enc_dyn, head_w, head_b, dyn, readout, solver, config, float(time_scale))


@dataclass(frozen=True)
class LatentVector:
    z0: np.ndarray
    seed: int
    beat_id: str
    effective_frequency: float
    label: str = ""


def beat_window_times(n_obs: int, window: int = WINDOW_BEFORE + WINDOW_AFTER + 1) -> np.ndarray:
    """Observation times of a window decimated down to ``n_obs`` samples."""
    for factor in range(1, window):
        if len(range(0, window, factor)) == n_obs:
            return np.arange(0, window, factor, dtype=np.float64) / (window - 1)
    raise ValueError(f"{n_obs} observations do not correspond to a decimated {window}-sample window")


# ---------------------------------------------------------------------------
# encoder / decoder
# ---------------------------------------------------------------------------


def encode_dist_batch(
    model: LatentOdeModel,
    values: np.ndarray,
    times: np.ndarray,
    trace: SolverTrace | None = None,
) -> tuple[Tensor, Tensor]:
    """ODE-RNN over a batch of beats sharing ``times``; returns ``(mu, log_sigma)``."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] != len(times) or len(times) < 2:
        raise ValueError("values must have shape (batch, len(times)) with at least two observations")
    field = MlpVectorField(model.encoder_dynamics)
    times = np.asarray(times, dtype=np.float64) * model.time_scale
    h = Tensor(np.zeros((values.shape[0], model.hidden_dim)))
    dt = None
    for idx in range(len(times) - 1, -1, -1):
        if idx < len(times) - 1:
            states, dt = odeint(field, h, [times[idx]], times[idx + 1], model.solver, trace, first_dt=dt)
            h = states[0]
        h = gru_step(model.gru, h, Tensor(values[:, idx : idx + 1]))
    out = h @ model.head_w + model.head_b
    latent = model.latent_dim
    mu = out[:, :latent]
    log_sigma = maximum(out[:, latent:], math.log(SIGMA_FLOOR))
    return mu, log_sigma


def _beat_arrays(beat) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(beat, Beat):
        return np.asarray(beat.times), np.asarray(beat.values)
    times, values = beat
    return np.asarray(times, dtype=np.float64), np.asarray(values, dtype=np.float64)


def encode_dist(model: LatentOdeModel, beat) -> tuple[np.ndarray, np.ndarray]:
    """Encoder mean and standard deviation for one beat (``Beat`` or ``(times, values)``)."""
    times, values = _beat_arrays(beat)
    try:
        mu, log_sigma = encode_dist_batch(model, values[None, :], times)
    except (NumericError, RuntimeError) as exc:
        beat_id = getattr(beat, "beat_id", "<array>")
        raise type(exc)(f"encoding beat {beat_id} failed: {exc}") from exc
    return mu.data[0].copy(), np.exp(log_sigma.data[0])


def encode_sample(model: LatentOdeModel, beat, seed: int, dist=None) -> LatentVector:
    """Reparameterised draw ``z0 = mu + sigma * eps`` with ``eps`` from ``seed``.

    ``dist`` lets callers reuse an already computed ``(mu, sigma)`` pair.
    """
    mu, sigma = dist if dist is not None else encode_dist(model, beat)
    eps = np.random.default_rng(seed).standard_normal(mu.shape)
    return LatentVector(
        z0=mu + sigma * eps,
        seed=int(seed),
        beat_id=getattr(beat, "beat_id", ""),
        effective_frequency=float(getattr(beat, "effective_frequency", 0.0)),
        label=beat.label.name if isinstance(beat, Beat) else "",
    )


def decode_batch(
    model: LatentOdeModel,
    z0: Tensor,
    eval_times: Sequence[float],
    trace: SolverTrace | None = None,
) -> tuple[Tensor, Tensor]:
    """Latent trajectory ``(T, B, L)`` from ``t = 0`` and the signal ``(T, B)``."""
    scaled = np.asarray(eval_times, dtype=np.float64) * model.time_scale
    traj, _ = odeint(MlpVectorField(model.dynamics), z0, scaled, 0.0, model.solver, trace)
    signal = mlp_forward(model.readout, traj)
    return traj, signal.reshape(traj.shape[0], traj.shape[1])


def decode(model: LatentOdeModel, z0: np.ndarray, eval_times: Sequence[float]) -> np.ndarray:
    """Reconstructed signal at ``eval_times`` (a subset of [0, 1], increasing)."""
    times = np.asarray(eval_times, dtype=np.float64)
    if times.size and (times[0] < 0 or times[-1] > 1):
        raise ValueError("eval_times must lie in [0, 1]")
    _, signal = decode_batch(model, Tensor(np.asarray(z0, dtype=np.float64)[None, :]), times)
    return signal.data[:, 0].copy()


def path_penalty(trajectory) -> Tensor | float:
    """Sum of squared distances between consecutive rows of a latent trajectory.

    Accepts a ``(T, L)`` array (returns a float) or a ``(T, B, L)`` tensor
    (returns a ``(B,)`` tensor, one penalty per trajectory).
    """
    if isinstance(trajectory, Tensor):
        diffs = trajectory[1:] - trajectory[:-1]
        return square(diffs).sum(axis=-1).sum(axis=0)
    z = np.asarray(trajectory, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 1:
        raise ValueError("trajectory must be a (T, L) array with T >= 1")
    return float(np.sum(np.diff(z, axis=0) ** 2))


def loss(
    model: LatentOdeModel,
    values: np.ndarray,
    times: np.ndarray,
    path_weight: float,
    eps: np.ndarray | None = None,
    trace: SolverTrace | None = None,
    encoder_stride: int = 1,
) -> Tensor:
    """Batch-mean of reconstruction MSE plus ``path_weight`` times the path penalty.

    ``eps`` supplies the standard-normal noise of the reparameterised sample;
    without it the encoder mean is decoded. ``encoder_stride`` feeds the
    encoder every k-th observation while the reconstruction still covers all.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] == 0:
        raise ValueError("empty batch")
    k = int(encoder_stride)
    mu, log_sigma = encode_dist_batch(model, values[:, ::k], np.asarray(times)[::k], trace)
    z0 = mu if eps is None else mu + exp(log_sigma) * Tensor(eps)
    traj, signal = decode_batch(model, z0, times, trace)
    mse = square(signal - Tensor(values.T)).mean(axis=0)  # (B,)
    per_beat = mse + path_weight * path_penalty(traj) if path_weight else mse
    return per_beat.mean()


def reconstruction_mse(model: LatentOdeModel, values: np.ndarray, times: np.ndarray, batch_size: int = 256) -> float:
    """Mean squared reconstruction error of decoding the encoder mean."""
    values = np.asarray(values, dtype=np.float64)
    total = 0.0
    for start in range(0, values.shape[0], batch_size):
        chunk = values[start : start + batch_size]
        total += float(loss(model, chunk, times, 0.0).data) * chunk.shape[0]
    return total / values.shape[0]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


class _Adam:
    def __init__(self, params: list[Tensor], config: TrainConfig):
        self.params = params
        self.cfg = config
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        cfg = self.cfg
        self.t += 1
        c1 = 1 - cfg.beta1**self.t
        c2 = 1 - cfg.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1 - cfg.beta2) * g * g
            p.data = p.data - cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


def _load_into(model: LatentOdeModel, arrays: dict[str, np.ndarray]) -> None:
    fresh = _model_from_arrays(arrays, model._metadata())
    for dst, src in zip(model.parameters(), fresh.parameters()):
        dst.data = src.data


def train(
    values: np.ndarray,
    times: np.ndarray,
    config: TrainConfig,
    model: LatentOdeModel | None = None,
    val_values: np.ndarray | None = None,
    log_path: str | os.PathLike | None = None,
    checkpoint_dir: str | os.PathLike | None = None,
    **model_kwargs,
) -> tuple[LatentOdeModel, list[dict]]:
    """Fit a latent ODE with Adam on minibatches of equally-sampled beats.

    Returns the parameters with the best validation reconstruction MSE (the
    first 256 training beats stand in when no validation set is given) and
    the log rows; row ``step == 0`` holds the MSE before any update. A
    non-finite loss aborts training and keeps the best parameters seen.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] == 0:
        raise ValueError("training set is empty")
    if model is None:
        model = init_model(seed=config.seed, solver=config.solver, **model_kwargs)
    model.config = {**model.config, "train": {k: v for k, v in asdict(config).items() if k != "solver"}}
    params = model.parameters()
    optimiser = _Adam(params, config)
    rng = np.random.default_rng(config.seed)
    n = values.shape[0]
    batch = min(config.batch_size, n)
    order = rng.permutation(n)
    cursor = 0

    def validation_mse() -> float:
        target = val_values if val_values is not None else values[: min(n, 256)]
        return reconstruction_mse(model, target, times)

    best = (math.inf, model.named_arrays())
    log: list[dict] = []
    writer = None
    log_file = None
    if log_path is not None:
        log_file = open(log_path, "w", newline="", encoding="utf-8")
        writer = csv.writer(log_file)
        writer.writerow(["step", "train_loss", "val_mse"])
    try:
        if config.steps > 0:
            initial = validation_mse()
            best = (initial, model.named_arrays())
            log.append({"step": 0, "train_loss": "", "val_mse": initial})
            if writer is not None:
                writer.writerow([0, "", repr(initial)])
        for step in range(1, config.steps + 1):
            if cursor + batch > n:
                order = rng.permutation(n)
                cursor = 0
            idx = order[cursor : cursor + batch]
            cursor += batch
            eps = rng.standard_normal((batch, model.latent_dim))
            strides = config.encoder_strides
            stride = strides[0] if len(strides) == 1 else int(rng.choice(strides))
            try:
                value = loss(model, values[idx], times, config.path_weight, eps=eps, encoder_stride=stride)
                grads = grad(value, params)
            except NumericError as exc:
                logger.error("training diverged at step %d: %s", step, exc)
                break
            optimiser.step(grads)
            row = {"step": step, "train_loss": float(value.data), "val_mse": ""}
            if step % config.eval_every == 0 or step == config.steps:
                try:
                    val = validation_mse()
                except NumericError as exc:
                    logger.error("validation diverged at step %d: %s", step, exc)
                    break
                row["val_mse"] = val
                if val < best[0]:
                    best = (val, model.named_arrays())
            log.append(row)
            if writer is not None:
                writer.writerow([row["step"], repr(row["train_loss"]), "" if row["val_mse"] == "" else repr(row["val_mse"])])
            if checkpoint_dir is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
                Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
                model.save(Path(checkpoint_dir) / f"latent_ode_step{step:06d}.json")
    finally:
        if log_file is not None:
            log_file.close()
    if config.steps > 0 and math.isfinite(best[0]):
        _load_into(model, best[1])
    return model, log


# ---------------------------------------------------------------------------
# estimator wrapper
# ---------------------------------------------------------------------------


class LatentOdeEncoder(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` trains the latent ODE, ``transform`` returns encoder means.

    ``X`` holds one beat per row, all sampled on the same grid. The grid is
    passed as ``times`` or inferred from the row length as a decimated beat
    window.
    """

    def __init__(
        self,
        latent_dim: int = 45,
        hidden_dim: int = 45,
        width: int = 50,
        depth: int = 2,
        steps: int = 50_000,
        batch_size: int = 256,
        learning_rate: float = 1e-3,
        path_weight: float = 1e-3,
        rtol: float = 1e-5,
        atol: float = 1e-6,
        initial_dt: float = 1e-3,
        eval_every: int = 500,
        time_scale: float = 10.0,
        random_state: int = 0,
    ):
        self.latent_dim = latent_dim
        self.hidden_dim = hidden_dim
        self.width = width
        self.depth = depth
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.path_weight = path_weight
        self.rtol = rtol
        self.atol = atol
        self.initial_dt = initial_dt
        self.eval_every = eval_every
        self.time_scale = time_scale
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.steps,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            path_weight=self.path_weight,
            solver=SolverConfig(rtol=self.rtol, atol=self.atol, initial_dt=self.initial_dt),
            seed=self.random_state,
            eval_every=self.eval_every,
        )

    def fit(self, X, y=None, times=None, X_val=None, log_path=None):
        X = check_array(X, dtype=np.float64)
        times = beat_window_times(X.shape[1]) if times is None else np.asarray(times, dtype=np.float64)
        cfg = self._train_config()
        model = init_model(self.latent_dim, self.hidden_dim, self.width, self.depth, seed=self.random_state, solver=cfg.solver, time_scale=self.time_scale)
        X_val = None if X_val is None else check_array(X_val, dtype=np.float64)
        self.model_, self.training_log_ = train(X, times, cfg, model=model, val_values=X_val, log_path=log_path)
        self.n_features_in_ = X.shape[1]
        return self

    def _rows(self, X, times):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        times = beat_window_times(X.shape[1]) if times is None else np.asarray(times, dtype=np.float64)
        return X, times

    def encode_distribution(self, X, times=None) -> tuple[np.ndarray, np.ndarray]:
        """Per-row encoder ``(mu, sigma)``; each beat is encoded on its own."""
        X, times = self._rows(X, times)
        pairs = [encode_dist(self.model_, (times, row)) for row in X]
        return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])

    def transform(self, X, times=None):
        return self.encode_distribution(X, times)[0]

    def sample(self, X, seed: int, times=None) -> np.ndarray:
        """One conditional draw per row; row ``i`` uses RNG seed ``seed``."""
        mu, sigma = self.encode_distribution(X, times)
        return np.stack([encode_sample(self.model_, None, seed, dist=(m, s)).z0 for m, s in zip(mu, sigma)])


# ---------------------------------------------------------------------------
# latent export
# ---------------------------------------------------------------------------


def write_latents_csv(path: str | os.PathLike, latents: Iterable[LatentVector]) -> None:
    """One row per beat: ``beat_id, label, effective_frequency, seed, z0..z{L-1}``."""
    latents = list(latents)
    dim = latents[0].z0.size if latents else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["beat_id", "label", "effective_frequency", "seed"] + [f"z{i}" for i in range(dim)])
        for lv in latents:
            writer.writerow([lv.beat_id, lv.label, repr(float(lv.effective_frequency)), lv.seed] + [repr(float(v)) for v in lv.z0])


def read_latents_csv(path: str | os.PathLike) -> list[LatentVector]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n_meta = 4
        if header[:n_meta] != ["beat_id", "label", "effective_frequency", "seed"]:
            raise ValueError(f"{path} is not a latent export")
        for row in reader:
            out.append(
                LatentVector(
                    z0=np.asarray([float(v) for v in row[n_meta:]]),
                    seed=int(row[3]),
                    beat_id=row[0],
                    effective_frequency=float(row[2]),
                    label=row[1],
                )
            )
    return out
