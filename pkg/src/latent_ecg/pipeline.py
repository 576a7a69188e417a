"""Experiment orchestration: splits, latent encoding, ensemble voting and the
multi-frequency evaluation.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import warnings
import zlib
from collections import Counter
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .beats import Beat, BeatClass, downsample
from .gbdt import GbdtConfig, GbdtModel
from .gbdt import fit as fit_gbdt
from .gbdt import predict_proba as gbdt_proba
from .latent_ode import LatentOdeModel, LatentVector, encode_dist, encode_sample
from .metrics import EvalReport, evaluate
from .smote import smote

logger = logging.getLogger(__name__)

__all__ = [
    "PipelineConfig",
    "DESK_PRESET",
    "ExperimentManifest",
    "Prediction",
    "split_dataset",
    "class_capped_subset",
    "beat_seed",
    "encode_beats",
    "latent_matrix",
    "mode_vote",
    "predict_ensemble",
    "frequency_factor",
    "run_frequency_experiment",
    "sha256_file",
]

BASE_FREQUENCY = 360


@dataclass(frozen=True)
class PipelineConfig:
    """Every tunable of the experiment; the CLI config file uses these keys."""

    seed: int = 0
    ratios: tuple[float, float, float] = (0.70, 0.15, 0.15)
    split_by_patient: bool = False
    subset_per_class: int | None = None
    # latent ODE
    latent_dim: int = 45
    hidden_dim: int = 45
    width: int = 50
    depth: int = 2
    steps: int = 50_000
    batch_size: int = 256
    learning_rate: float = 1e-3
    path_weight: float = 1e-3
    rtol: float = 1e-5
    atol: float = 1e-6
    initial_dt: float = 1e-3
    time_scale: float = 10.0
    eval_every: int = 500
    encoder_strides: tuple[int, ...] = (1,)
    # SMOTE
    smote_k: int = 5
    # GBDT
    gbdt_rounds: int = 1000
    gbdt_depth: int = 8
    gbdt_learning_rate: float = 0.1
    gbdt_min_leaf: int = 20
    gbdt_lambda: float = 1.0
    gbdt_feature_fraction: float = 1.0
    gbdt_patience: int | None = 50
    gbdt_tree_budget: str = "rounds"
    # evaluation
    frequencies: tuple[int, ...] = (360, 90, 45)
    ensemble: int = 9
    retrain_gbdt_per_frequency: bool = False

    def __post_init__(self):
        ratios = tuple(float(r) for r in self.ratios)
        object.__setattr__(self, "ratios", ratios)
        object.__setattr__(self, "frequencies", tuple(int(f) for f in self.frequencies))
        object.__setattr__(self, "encoder_strides", tuple(int(k) for k in self.encoder_strides))
        if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
            raise ValueError("ratios must be three positive numbers summing to 1")
        for f in self.frequencies:
            frequency_factor(f)
        if self.ensemble < 1:
            raise ValueError("ensemble size must be at least 1")

    @classmethod
    def from_dict(cls, d: dict) -> PipelineConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratios"] = list(self.ratios)
        d["frequencies"] = list(self.frequencies)
        d["encoder_strides"] = list(self.encoder_strides)
        return d

    def gbdt_config(self) -> GbdtConfig:
        return GbdtConfig(
            n_rounds=self.gbdt_rounds,
            max_depth=self.gbdt_depth,
            learning_rate=self.gbdt_learning_rate,
            min_samples_leaf=self.gbdt_min_leaf,
            reg_lambda=self.gbdt_lambda,
            feature_fraction=self.gbdt_feature_fraction,
            early_stopping_rounds=self.gbdt_patience,
            tree_budget=self.gbdt_tree_budget,
            seed=self.seed,
        )


# Scaled-down settings that run on a laptop CPU in well under an hour.
DESK_PRESET = {
    "subset_per_class": 400,
    "latent_dim": 16,
    "hidden_dim": 16,
    "steps": 2000,
    "batch_size": 32,
    "eval_every": 250,
    "learning_rate": 3e-3,
    "gbdt_rounds": 100,
}


def frequency_factor(frequency: int) -> int:
    """Decimation factor that takes a 360 Hz beat to ``frequency``."""
    if frequency <= 0 or BASE_FREQUENCY % frequency:
        raise ValueError(f"{frequency} Hz is not an integer fraction of {BASE_FREQUENCY} Hz")
    return BASE_FREQUENCY // frequency


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class ExperimentManifest:
    """Record of one pipeline stage: configuration, inputs and outputs with content hashes."""

    stage: str
    config: dict
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def split_seed(self) -> int:
        return int(self.config.get("seed", 0))

    @property
    def ratios(self) -> tuple[float, ...]:
        return tuple(self.config.get("ratios", (0.70, 0.15, 0.15)))

    @property
    def frequencies(self) -> tuple[int, ...]:
        return tuple(self.config.get("frequencies", (360, 90, 45)))

    @property
    def ensemble_size(self) -> int:
        return int(self.config.get("ensemble", 9))

    @staticmethod
    def _hashes(paths: dict[str, str | os.PathLike], base: Path) -> dict[str, str]:
        out = {}
        for key, p in sorted(paths.items()):
            p = Path(p)
            rel = os.path.relpath(p, base)
            out[key] = f"{rel}#sha256:{sha256_file(p)}"
        return out

    @classmethod
    def build(cls, stage: str, config: dict, inputs: dict, outputs: dict, base: str | os.PathLike, extra: dict | None = None):
        base = Path(base)
        return cls(stage, config, cls._hashes(inputs, base), cls._hashes(outputs, base), extra or {})

    def write(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path: str | os.PathLike) -> ExperimentManifest:
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


def _bin_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def split_dataset(
    beats: Sequence[Beat],
    ratios: Sequence[float] = (0.70, 0.15, 0.15),
    seed: int = 0,
    by_patient: bool = False,
) -> tuple[list[Beat], list[Beat], list[Beat]]:
    """Disjoint train/validation/test split, stratified by class.

    Each split keeps the corpus order. With ``by_patient`` whole records are
    assigned to one split (records are shuffled, then filled into the splits
    by cumulative beat count), which is not class-stratified.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1) > 1e-9:
        raise ValueError("ratios must be three positive numbers summing to 1")
    rng = np.random.default_rng(seed)
    assign = np.zeros(len(beats), dtype=np.int64)
    if by_patient:
        records = sorted({b.record_name for b in beats})
        per_record = Counter(b.record_name for b in beats)
        order = [records[i] for i in rng.permutation(len(records))]
        total = len(beats)
        bounds = (ratios[0] * total, (ratios[0] + ratios[1]) * total)
        where, cum = {}, 0
        for rec in order:
            where[rec] = 0 if cum < bounds[0] else (1 if cum < bounds[1] else 2)
            cum += per_record[rec]
        assign = np.array([where[b.record_name] for b in beats], dtype=np.int64)
    else:
        labels = np.array([int(b.label) for b in beats])
        for cls in BeatClass:
            idx = np.flatnonzero(labels == int(cls))
            if idx.size == 0:
                continue
            if idx.size < 3:
                warnings.warn(f"class {cls.name} has {idx.size} beats; all placed in the training split", stacklevel=2)
                continue
            idx = idx[rng.permutation(idx.size)]
            n_train, n_val, _ = _bin_sizes(idx.size, ratios)
            assign[idx[n_train : n_train + n_val]] = 1
            assign[idx[n_train + n_val :]] = 2
    parts = ([], [], [])
    for beat, a in zip(beats, assign):
        parts[a].append(beat)
    return parts


def class_capped_subset(beats: Sequence[Beat], per_class: int, seed: int = 0) -> list[Beat]:
    """At most ``per_class`` beats of each class, drawn uniformly; corpus order kept."""
    rng = np.random.default_rng(seed)
    labels = np.array([int(b.label) for b in beats])
    keep = []
    for cls in BeatClass:
        idx = np.flatnonzero(labels == int(cls))
        if idx.size > per_class:
            idx = np.sort(rng.choice(idx, size=per_class, replace=False))
        keep.append(idx)
    chosen = np.sort(np.concatenate(keep))
    return [beats[i] for i in chosen]


# ---------------------------------------------------------------------------
# encoding and ensemble prediction
# ---------------------------------------------------------------------------


def beat_seed(seed: int, beat_id: str) -> int:
    """Per-beat RNG seed derived from a run seed and the beat id."""
    return zlib.crc32(f"{seed}:{beat_id}".encode()) & 0x7FFFFFFF


def encode_beats(model: LatentOdeModel, beats: Sequence[Beat], seed: int, n_jobs: int = 1) -> list[LatentVector]:
    """One reparameterised latent draw per beat, seeded by :func:`beat_seed`."""

    def one(beat: Beat) -> LatentVector:
        return encode_sample(model, beat, beat_seed(seed, beat.beat_id))

    if n_jobs == 1:
        return [one(b) for b in beats]
    from joblib import Parallel, delayed

    return Parallel(n_jobs=n_jobs)(delayed(one)(b) for b in beats)


def latent_matrix(latents: Sequence[LatentVector]) -> tuple[np.ndarray, np.ndarray]:
    X = np.stack([lv.z0 for lv in latents])
    y = np.array([int(BeatClass[lv.label]) for lv in latents])
    return X, y


@dataclass
class Prediction:
    beat_id: str
    votes: list[BeatClass]
    final: BeatClass
    probabilities: np.ndarray  # (n_votes, 5)
    label: BeatClass | None = None

    @property
    def mean_probability(self) -> np.ndarray:
        return self.probabilities.mean(axis=0)


def mode_vote(votes: Sequence[int], probabilities: np.ndarray) -> BeatClass:
    """Most frequent vote; ties go to the larger summed probability, then the lower class index."""
    counts = np.bincount(np.asarray(votes, dtype=np.int64), minlength=len(BeatClass))
    top = np.flatnonzero(counts == counts.max())
    if top.size == 1:
        return BeatClass(int(top[0]))
    mass = np.asarray(probabilities).sum(axis=0)[top]
    return BeatClass(int(top[np.flatnonzero(mass == mass.max())[0]]))


def _proba(gbdt, X: np.ndarray) -> np.ndarray:
    if isinstance(gbdt, GbdtModel):
        return gbdt_proba(gbdt, X)
    return gbdt.predict_proba(X)


def predict_ensemble(model: LatentOdeModel, gbdt, beat: Beat, n: int = 9, seed_base: int = 0, dist=None) -> Prediction:
    """Majority vote over ``n`` classifications of independent latent draws.

    Draw ``i`` (1-based) uses seed ``seed_base + i``. The beat is encoded
    once; only the reparameterisation noise differs between draws.
    """
    if n < 1:
        raise ValueError("ensemble size must be at least 1")
    if dist is None:
        dist = encode_dist(model, beat)
    Z = np.stack([encode_sample(model, beat, seed_base + i, dist=dist).z0 for i in range(1, n + 1)])
    P = _proba(gbdt, Z)
    votes = [BeatClass(int(v)) for v in np.argmax(P, axis=1)]
    return Prediction(beat.beat_id, votes, mode_vote(votes, P), P, beat.label)


def predictions_to_report(predictions: Sequence[Prediction], frequency: int) -> EvalReport:
    y_true = [int(p.label) for p in predictions]
    y_pred = [int(p.final) for p in predictions]
    scores = np.stack([p.mean_probability for p in predictions])
    return evaluate(y_true, y_pred, scores, frequency)


def run_frequency_experiment(
    model: LatentOdeModel,
    gbdt,
    test_beats: Sequence[Beat],
    frequencies: Sequence[int] = (360, 90, 45),
    ensemble: int = 9,
    seed_base: int = 0,
    retrain: dict | None = None,
) -> tuple[list[EvalReport], dict[int, list[Prediction]]]:
    """Downsample the 360 Hz test beats to each frequency and evaluate the ensemble.

    The same latent ODE and GBDT serve every frequency. ``retrain`` (keys
    ``train_beats``, ``gbdt_config``, ``seed``, ``smote_k``) refits the GBDT on train beats
    encoded at each frequency instead, for comparison.
    """
    reports, all_preds = [], {}
    for f in frequencies:
        factor = frequency_factor(f)
        beats = [downsample(b, factor) for b in test_beats]
        clf = gbdt
        if retrain is not None and factor != 1:
            train = [downsample(b, factor) for b in retrain["train_beats"]]
            X, y = latent_matrix(encode_beats(model, train, retrain["seed"]))
            X, y = smote(X, y, k=retrain.get("smote_k", 5), seed=retrain["seed"])
            clf = fit_gbdt(X, y, retrain["gbdt_config"])
        preds = []
        for beat in beats:
            preds.append(predict_ensemble(model, clf, beat, ensemble, seed_base))
        logger.info("evaluated %d beats at %d Hz", len(preds), f)
        reports.append(predictions_to_report(preds, f))
        all_preds[f] = preds
    return reports, all_preds
