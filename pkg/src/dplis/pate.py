"""Teacher ensembles with Confident-GNMax aggregation and smoothed student training."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .accountant import DEFAULT_DELTA, PrivacySpend, compose_and_convert, gaussian_rdp_curve
from .dpsgd import plain_sgd
from .nn import Batch, MlpSpec, ParamVector, predict_logits
from .rng import Purpose, stream

ABSTAIN = -1

# one teacher changing its vote moves one count down and another up
VOTE_SENSITIVITY = math.sqrt(2.0)


@dataclass(frozen=True)
class VoteHistogram:
    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 1 or c.size == 0:
            raise ValueError("vote histogram must be a nonempty vector")
        if np.any(c < 0) or not np.all(c == np.round(c)):
            raise ValueError("vote counts must be non-negative integers")
        object.__setattr__(self, "counts", c.astype(np.int64))

    @property
    def n_teachers(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class GnMaxConfig:
    threshold: float = 300.0
    sigma1: float = 200.0
    sigma2: float = 40.0
    max_queries: int = 4000

    def __post_init__(self):
        if not (self.sigma1 > 0 and self.sigma2 > 0):
            raise ValueError("noise scales must be positive")
        if self.max_queries < 0:
            raise ValueError("max_queries must be >= 0")


@dataclass(frozen=True)
class TeacherSgd:
    lr: float = 0.1
    batch_size: int = 32
    epochs: int = 10


def teacher_seed(seed: int, teacher: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(int(Purpose.PATE_TEACHER), teacher)).generate_state(1)[0])


def shard_indices(n: int, n_teachers: int, seed: int) -> list[np.ndarray]:
    """Random disjoint near-equal shards; the first ``n % n_teachers`` get one extra."""
    if n_teachers < 1:
        raise ValueError("need at least one teacher")
    if n_teachers > n:
        raise ValueError(f"{n_teachers} teachers but only {n} samples: some shard would be empty")
    perm = stream(seed, Purpose.PATE_SPLIT).permutation(n)
    base, extra = divmod(n, n_teachers)
    sizes = [base + (1 if t < extra else 0) for t in range(n_teachers)]
    bounds = np.cumsum([0] + sizes)
    return [np.sort(perm[bounds[t] : bounds[t + 1]]) for t in range(n_teachers)]


def partition_and_train_teachers(
    data: Batch, n_teachers: int, spec: MlpSpec, sgd: TeacherSgd = TeacherSgd(), seed: int = 0
) -> list[ParamVector]:
    """Train one non-private model per disjoint shard."""
    teachers = []
    for t, idx in enumerate(shard_indices(len(data), n_teachers, seed)):
        teachers.append(
            plain_sgd(spec, data.subset(idx), lr=sgd.lr, batch_size=sgd.batch_size,
                      epochs=sgd.epochs, seed=teacher_seed(seed, t))
        )
    return teachers


def teacher_votes(teachers: list[ParamVector], spec: MlpSpec, inputs: np.ndarray) -> np.ndarray:
    """Vote counts, one row per input."""
    counts = np.zeros((len(inputs), spec.output_dim), dtype=np.int64)
    rows = np.arange(len(inputs))
    for p in teachers:
        np.add.at(counts, (rows, np.argmax(predict_logits(p, spec, inputs), axis=1)), 1)
    return counts


def confident_gnmax(votes: VoteHistogram, cfg: GnMaxConfig, rng: np.random.Generator) -> int:
    """Noisy threshold test on the plurality count, then a noisy argmax.

    Both noise draws are always taken so that runs sharing a stream stay
    aligned whatever the test outcome.
    """
    c = votes.counts
    test = rng.standard_normal() * cfg.sigma1
    noisy = c + rng.standard_normal(c.size) * cfg.sigma2
    if c.max() + test < cfg.threshold:
        return ABSTAIN
    return int(np.argmax(noisy))


def gnmax_spend(cfg: GnMaxConfig, delta: float = DEFAULT_DELTA) -> PrivacySpend:
    """Data-independent spend: every query pays both Gaussian mechanisms."""
    if cfg.max_queries == 0:
        return PrivacySpend(0.0, delta, cfg.sigma2, 1.0, 0)
    per_query = gaussian_rdp_curve(cfg.sigma1, 1.0) + gaussian_rdp_curve(cfg.sigma2, VOTE_SENSITIVITY)
    eps, order = compose_and_convert(per_query, cfg.max_queries, delta)
    return PrivacySpend(eps, delta, cfg.sigma2, 1.0, cfg.max_queries, order)


@dataclass
class LabelingResult:
    data: Batch
    indices: np.ndarray  # positions in the public set that received labels
    spend: PrivacySpend
    n_queries: int
    p_correct: float | None


def label_public_data(
    teachers: list[ParamVector],
    spec: MlpSpec,
    public: np.ndarray,
    cfg: GnMaxConfig,
    seed: int,
    true_labels: np.ndarray | None = None,
    delta: float = DEFAULT_DELTA,
) -> LabelingResult:
    """Answer the first ``max_queries`` public inputs; keep the non-abstained ones."""
    if cfg.max_queries > len(public):
        raise ValueError("max_queries exceeds the public set size")
    public = np.asarray(public, dtype=np.float64)
    q = cfg.max_queries
    counts = teacher_votes(teachers, spec, public[:q]) if q else np.zeros((0, spec.output_dim), np.int64)
    answers = np.array(
        [confident_gnmax(VoteHistogram(counts[i]), cfg, stream(seed, Purpose.PATE_AGGREGATE, i)) for i in range(q)],
        dtype=np.int64,
    )
    keep = np.flatnonzero(answers != ABSTAIN)
    p_correct = None
    if true_labels is not None and keep.size:
        p_correct = float(np.mean(answers[keep] == np.asarray(true_labels)[keep]))
    data = Batch(public[keep].reshape(len(keep), public.shape[1]), answers[keep])
    return LabelingResult(data, keep, gnmax_spend(cfg, delta), q, p_correct)


def train_student_smoothed(
    labeled: Batch,
    spec: MlpSpec,
    sigma_smooth: float,
    K: int,
    sgd: TeacherSgd = TeacherSgd(),
    seed: int = 0,
    callback=None,
) -> ParamVector:
    """Plain SGD on the K-sample Gaussian-smoothed loss; sigma_smooth = 0 is ordinary SGD."""
    if len(labeled) == 0:
        raise ValueError("student needs at least one labeled sample")
    if K < 1:
        raise ValueError("K must be >= 1")
    return plain_sgd(spec, labeled, lr=sgd.lr, batch_size=sgd.batch_size, epochs=sgd.epochs,
                     seed=seed, purpose=Purpose.PATE_STUDENT, sigma_smooth=sigma_smooth,
                     smoothing_samples=K, callback=callback)


def flip_labels(labels: np.ndarray, rate: float, classes: int, seed: int) -> np.ndarray:
    """Replace a ``rate`` fraction of labels (chosen at random) by a different uniform class."""
    labels = np.asarray(labels, dtype=np.int64)
    rng = stream(seed, Purpose.DATA, 2)
    n_flip = int(round(rate * labels.size))
    idx = rng.permutation(labels.size)[:n_flip]
    out = labels.copy()
    out[idx] = (labels[idx] + rng.integers(1, classes, size=n_flip)) % classes
    return out
