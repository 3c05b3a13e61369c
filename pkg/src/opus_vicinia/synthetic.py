"""Seeded synthetic cities with known ground truth.

Construction of one city:

1. a smooth latent informality field `u` (bilinear interpolation of a coarse
   standard-normal grid, correlation length `correlation_length` cells);
2. the `favela_count` cells with the largest 3x3 mean of `u` are labeled favela;
3. each cell gets a class prototype `s = offset[zone] + (label - 0.5) * FAVELA_DIRECTION`
   (favela: less vegetation, higher entropy and slope, denser streets with fewer
   connections per node);
4. latent features `x = (1 - lambda) * s + lambda * mean3x3(s) + noise * eps`, then a
   per-feature affine map to realistic units.

Zones are vertical bands of equal width with their own prototype offset.
"""
import math
import zlib
from dataclasses import asdict, dataclass
from itertools import product
from typing import Dict

import numpy as np
from scipy import ndimage
from scipy.special import logsumexp

from magnum_opus.operarius import LoggerWrapper
from opus_vicinia.experiment import ConfusionMatrix, FoldMetrics, compute_metrics
from opus_vicinia.grid_core import CellRecord, FeatureTable, GridSpec, N_FEATURES


FAVELA_DIRECTION = np.array([-1.0, 1.0, 1.0, 0.5, 1.0, 1.0, -0.5, -0.5, -0.5])
FEATURE_CENTER = np.array([0.30, 0.60, 8.0, 0.0, 6.0, 900.0, 3.0, 1.8, 4.2])
FEATURE_SCALE = np.array([0.10, 0.08, 3.0, 0.002, 2.0, 250.0, 0.4, 0.4, 0.6])
DEFAULT_ORACLE_SAMPLES = 100000
ORACLE_CHUNK = 512


class SynthConfigException(Exception):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_rows: int = 200
    n_cols: int = 200
    n_zones: int = 5
    imbalance_target: float = 30.0
    context_strength: float = 0.6
    noise: float = 1.5
    correlation_length: float = 10.0
    zone_shift: float = 0.3
    cell_size: float = 150.0
    seed: int = 1

    def __post_init__(self):
        if int(self.n_rows) < 1 or int(self.n_cols) < 1:
            raise SynthConfigException('grid needs at least one row and one column, got {}x{}'.format(self.n_rows, self.n_cols))
        if not 0.0 <= self.context_strength <= 1.0:
            raise SynthConfigException('context strength must lie in [0,1], got {}'.format(self.context_strength))
        if not self.noise > 0:
            raise SynthConfigException('noise must be positive, got {}'.format(self.noise))
        if int(self.n_zones) < 1 or int(self.n_zones) > int(self.n_cols):
            raise SynthConfigException('need between 1 and {} zones, got {}'.format(self.n_cols, self.n_zones))
        if not self.correlation_length > 0:
            raise SynthConfigException('correlation length must be positive, got {}'.format(self.correlation_length))
        if self.zone_shift < 0:
            raise SynthConfigException('zone shift must not be negative, got {}'.format(self.zone_shift))
        if int(self.seed) < 0:
            raise SynthConfigException('seed must not be negative, got {}'.format(self.seed))
        if not self.imbalance_target >= 1.0:
            raise SynthConfigException('imbalance target must be at least 1, got {}'.format(self.imbalance_target))
        n_cells = self.n_rows * self.n_cols
        n_favela = self.favela_count
        if n_favela < 1 or n_favela > n_cells // 2:
            raise SynthConfigException(
                'imbalance target {} is not achievable on a {}x{} grid ({} favela cells)'.format(self.imbalance_target, self.n_rows, self.n_cols, n_favela)
            )

    @property
    def favela_count(self)->int:
        return int(round(self.n_rows * self.n_cols / (self.imbalance_target + 1.0)))

    def to_dict(self)->dict:
        return asdict(self)


def _rng(config: SynthConfig, stream: str)->np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=int(config.seed), spawn_key=(zlib.crc32(stream.encode('utf-8')),)))


def window_mean(values: np.ndarray)->np.ndarray:
    """3x3 mean over the in-grid cells of every window (first two axes)."""
    ones = np.ones(values.shape[:2], dtype=np.float64)
    counts = ndimage.correlate(ones, np.ones((3, 3)), mode='constant', cval=0.0)
    if values.ndim == 2:
        return ndimage.correlate(values, np.ones((3, 3)), mode='constant', cval=0.0) / counts
    sums = np.stack([ndimage.correlate(values[:, :, f], np.ones((3, 3)), mode='constant', cval=0.0) for f in range(values.shape[2])], axis=2)
    return sums / counts[:, :, None]


@dataclass(frozen=True, eq=False)
class CityLayout:
    latent: np.ndarray
    labels: np.ndarray
    zones: np.ndarray
    offsets: np.ndarray

    def signals(self)->np.ndarray:
        return self.offsets[self.zones - 1] + (self.labels[:, :, None] - 0.5) * FAVELA_DIRECTION


def latent_field(config: SynthConfig)->np.ndarray:
    length = float(config.correlation_length)
    coarse_shape = (int(math.ceil(config.n_rows / length)) + 2, int(math.ceil(config.n_cols / length)) + 2)
    coarse = _rng(config, 'latent').standard_normal(coarse_shape)
    rows, cols = np.meshgrid(np.arange(config.n_rows) / length, np.arange(config.n_cols) / length, indexing='ij')
    u = ndimage.map_coordinates(coarse, [rows, cols], order=1, mode='nearest')
    std = u.std()
    if std > 0:
        u = (u - u.mean()) / std
    return u


def layout_city(config: SynthConfig)->CityLayout:
    u = latent_field(config=config)
    smoothed = window_mean(values=u)
    order = np.argsort(-smoothed.ravel(), kind='stable')
    labels = np.zeros(config.n_rows * config.n_cols, dtype=np.int64)
    labels[order[:config.favela_count]] = 1
    labels = labels.reshape((config.n_rows, config.n_cols))
    zones = 1 + (np.arange(config.n_cols) * config.n_zones) // config.n_cols
    zones = np.broadcast_to(zones[None, :], (config.n_rows, config.n_cols)).astype(np.int64)
    offsets = config.zone_shift * _rng(config, 'zones').standard_normal((config.n_zones, N_FEATURES))
    return CityLayout(latent=u, labels=labels, zones=zones, offsets=offsets)


def latent_features(config: SynthConfig, layout: CityLayout, eps: np.ndarray)->np.ndarray:
    s = layout.signals()
    lam = config.context_strength
    return (1.0 - lam) * s + lam * window_mean(values=s) + config.noise * eps


def generate_city(config: SynthConfig, logger: LoggerWrapper=LoggerWrapper())->FeatureTable:
    layout = layout_city(config=config)
    eps = _rng(config, 'noise').standard_normal((config.n_rows, config.n_cols, N_FEATURES))
    features = FEATURE_CENTER + FEATURE_SCALE * latent_features(config=config, layout=layout, eps=eps)
    records = list()
    for row in range(config.n_rows):
        for col in range(config.n_cols):
            records.append(
                CellRecord(
                    row=row,
                    col=col,
                    features=tuple(float(v) for v in features[row, col, :]),
                    label=int(layout.labels[row, col]),
                    zone=int(layout.zones[row, col]),
                )
            )
    grid = GridSpec(n_rows=config.n_rows, n_cols=config.n_cols, cell_size=config.cell_size)
    n_favela = int(layout.labels.sum())
    logger.info('Generated {}x{} synthetic city: {} favela / {} non-favela cells in {} zones (lambda={}, noise={})'.format(
        config.n_rows, config.n_cols, n_favela, layout.labels.size - n_favela, config.n_zones, config.context_strength, config.noise
    ))
    return FeatureTable.from_records(grid=grid, records=records)


@dataclass(frozen=True)
class OracleResult:
    metrics: FoldMetrics
    confusion: ConfusionMatrix
    n_samples: int
    n_draws: int


_SLOT_OFFSETS = tuple((dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1))
_CENTER_SLOT = _SLOT_OFFSETS.index((0, 0))


def _slot_overlap()->np.ndarray:
    """overlap[j, k] = 1 when window slot k lies in the 3x3 window of slot j."""
    overlap = np.zeros((9, 9), dtype=np.float64)
    for j, a in enumerate(_SLOT_OFFSETS):
        for k, b in enumerate(_SLOT_OFFSETS):
            if max(abs(a[0] - b[0]), abs(a[1] - b[1])) <= 1:
                overlap[j, k] = 1.0
    return overlap


def oracle_metrics(config: SynthConfig, n_samples: int=DEFAULT_ORACLE_SAMPLES, logger: LoggerWrapper=LoggerWrapper())->OracleResult:
    """Monte-Carlo kappa of the Bayes rule that sees the 3x3 window features of a cell.

    The posterior enumerates all 512 label configurations of the window with their
    empirical frequency as prior; labels outside the window are known to the rule.
    Evaluation uses balanced samples of cells whose 5x5 neighborhood lies inside the
    grid, with fresh feature noise for every draw, until `n_samples` cells are scored.
    """
    layout = layout_city(config=config)
    labels = layout.labels
    if config.n_rows < 5 or config.n_cols < 5:
        raise SynthConfigException('the oracle needs at least a 5x5 grid')
    lam = config.context_strength
    d_norm_sq = float(FAVELA_DIRECTION @ FAVELA_DIRECTION)
    overlap = _slot_overlap()
    configs = np.array(list(product((0.0, 1.0), repeat=9)), dtype=np.float64)
    config_t = (1.0 - lam) * configs + (lam / 9.0) * (configs @ overlap.T)

    # empirical prior over interior 3x3 label configurations
    offsets = np.array(_SLOT_OFFSETS, dtype=np.int64)
    weights = (2 ** np.arange(8, -1, -1)).astype(np.int64)
    inner_rows, inner_cols = np.meshgrid(np.arange(1, config.n_rows - 1), np.arange(1, config.n_cols - 1), indexing='ij')
    inner_windows = labels[inner_rows.ravel()[:, None] + offsets[None, :, 0], inner_cols.ravel()[:, None] + offsets[None, :, 1]]
    counts = np.bincount(inner_windows @ weights, minlength=512).astype(np.float64)
    log_prior = np.log((counts + 1.0) / (counts.sum() + 512.0))

    box_labels = ndimage.correlate(labels.astype(np.float64), np.ones((3, 3)), mode='constant', cval=0.0)
    true_t = (1.0 - lam) * labels + (lam / 9.0) * box_labels

    candidates_rows, candidates_cols = np.meshgrid(np.arange(2, config.n_rows - 2), np.arange(2, config.n_cols - 2), indexing='ij')
    candidates_rows = candidates_rows.ravel()
    candidates_cols = candidates_cols.ravel()
    candidate_labels = labels[candidates_rows, candidates_cols]
    favela_index = np.flatnonzero(candidate_labels == 1)
    other_index = np.flatnonzero(candidate_labels == 0)
    if len(favela_index) == 0 or len(other_index) == 0:
        raise SynthConfigException('the oracle needs both classes among the interior cells')
    per_class = min(len(favela_index), len(other_index))

    rng = _rng(config, 'oracle')
    center_is_favela = configs[:, _CENTER_SLOT] == 1.0
    truth_all = list()
    predicted_all = list()
    draws = 0
    while len(truth_all) < n_samples:
        draws += 1
        e = rng.standard_normal(labels.shape) * math.sqrt(d_norm_sq)
        q = config.noise * e + true_t * d_norm_sq
        chosen = np.concatenate([rng.choice(favela_index, size=per_class, replace=False), rng.choice(other_index, size=per_class, replace=False)])
        for start in range(0, len(chosen), ORACLE_CHUNK):
            part = chosen[start:start + ORACLE_CHUNK]
            rows = candidates_rows[part][:, None] + offsets[None, :, 0]
            cols = candidates_cols[part][:, None] + offsets[None, :, 1]
            window_labels = labels[rows, cols].astype(np.float64)
            known = (lam / 9.0) * (box_labels[rows, cols] - window_labels @ overlap.T)
            q_window = q[rows, cols]
            t = config_t[None, :, :] + known[:, None, :]
            log_lik = np.sum(2.0 * t * q_window[:, None, :] - t * t * d_norm_sq, axis=2) / (2.0 * config.noise ** 2)
            joint = log_lik + log_prior[None, :]
            log_odds = logsumexp(joint[:, center_is_favela], axis=1) - logsumexp(joint[:, ~center_is_favela], axis=1)
            prior_odds = logsumexp(log_prior[center_is_favela]) - logsumexp(log_prior[~center_is_favela])
            predicted_all.extend((log_odds - prior_odds > 0).astype(np.int64).tolist())
            truth_all.extend(candidate_labels[part].tolist())
    truth = np.array(truth_all, dtype=np.int64)
    predicted = np.array(predicted_all, dtype=np.int64)
    confusion = ConfusionMatrix(
        tp=int(np.sum((truth == 1) & (predicted == 1))),
        fp=int(np.sum((truth == 0) & (predicted == 1))),
        fn=int(np.sum((truth == 1) & (predicted == 0))),
        tn=int(np.sum((truth == 0) & (predicted == 0))),
    )
    metrics = compute_metrics(cm=confusion)
    logger.info('Oracle kappa {:.4f} over {} cells ({} noise draws)'.format(metrics.kappa, len(truth), draws))
    return OracleResult(metrics=metrics, confusion=confusion, n_samples=int(len(truth)), n_draws=draws)


def city_summary(config: SynthConfig, table: FeatureTable)->Dict:
    n_favela = sum(1 for record in table.records.values() if record.label == 1)
    n_nonfavela = sum(1 for record in table.records.values() if record.label == 0)
    return {
        'n_favela': n_favela,
        'n_nonfavela': n_nonfavela,
        'achieved_ratio': (n_nonfavela / n_favela) if n_favela > 0 else None,
        'imbalance_target': config.imbalance_target,
        'zones': table.zones(),
    }
