"""Balancing, training, zone-holdout cross-validation and metrics.

Fold protocol: for every repetition and held-out zone the model is trained from a
fresh initialization on a class-balanced sample of the labeled cells of all other
zones, then evaluated on a class-balanced sample of the held-out zone (or on all of
its labeled cells when `balance_test` is off). Every random draw of a fold comes
from its own named stream derived from `(seed, repetition, zone)`.
"""
import os
import zlib
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from imblearn.under_sampling import RandomUnderSampler
from joblib import Parallel, delayed
from sklearn.metrics import confusion_matrix

from magnum_opus.operarius import LoggerWrapper
from opus_vicinia.grid_core import FAVELA, NON_FAVELA, FeatureTable, KING_OFFSETS
from opus_vicinia.models import MODEL_KINDS, UnknownModelException, build_model, predict_labels, prepare_batch, save_checkpoint
from opus_vicinia.neural_core import AdamState, adam_step


METRIC_NAMES = ('precision', 'recall', 'f1', 'kappa',)
DEFAULT_REPETITIONS = 10
STD_FLOOR = 1e-12


class BalancingException(Exception):
    pass


class EmptyConfusionMatrixException(Exception):
    pass


class SplitException(Exception):
    pass


class TrainConfigException(Exception):
    pass


class ComparisonException(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 400
    batch_size: int = 32
    learning_rate: float = 0.001
    seed: int = 0
    standardize: bool = True
    balance_test: bool = True

    def __post_init__(self):
        if int(self.epochs) < 0:
            raise TrainConfigException('epochs must not be negative, got {}'.format(self.epochs))
        if int(self.batch_size) < 1:
            raise TrainConfigException('batch_size must be positive, got {}'.format(self.batch_size))
        if not self.learning_rate > 0:
            raise TrainConfigException('learning_rate must be positive, got {}'.format(self.learning_rate))
        if int(self.seed) < 0:
            raise TrainConfigException('seed must not be negative, got {}'.format(self.seed))

    def to_dict(self)->dict:
        return asdict(self)


@dataclass(frozen=True)
class SplitSpec:
    test_zone: int
    train_zones: Tuple[int, ...]

    def __post_init__(self):
        if len(self.train_zones) == 0:
            raise SplitException('a split needs at least one training zone')
        if self.test_zone in self.train_zones:
            raise SplitException('test zone {} is also a training zone'.format(self.test_zone))

    @classmethod
    def holdout(cls, zones: Sequence[int], test_zone: int)->'SplitSpec':
        if test_zone not in zones:
            raise SplitException('zone {} is not one of {}'.format(test_zone, list(zones)))
        return cls(test_zone=test_zone, train_zones=tuple(z for z in zones if z != test_zone))


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self)->int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class FoldMetrics:
    precision: float
    recall: float
    f1: float
    kappa: float
    degenerate: bool = False

    def as_dict(self)->Dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_NAMES}


@dataclass(frozen=True, eq=False)
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray
    scaled: np.ndarray

    def apply(self, features: np.ndarray, presence: np.ndarray)->np.ndarray:
        divisor = np.where(self.scaled, self.std, 1.0)
        transformed = (features - self.mean) / divisor
        # absent cells stay zero so that padding is applied after standardization
        return transformed * presence[:, :, None]


@dataclass(eq=False)
class TrainResult:
    model: object
    loss_trace: List[float]
    train_cells: List[Tuple[int, int]]
    train_labels: List[int]
    features: np.ndarray
    stats: Optional[FeatureStats] = None


@dataclass(eq=False)
class FoldResult:
    zone: int
    repetition: int
    model: str
    metrics: Optional[FoldMetrics] = None
    confusion: Optional[ConfusionMatrix] = None
    n_train: int = 0
    n_test: int = 0
    cross_zone_neighbors: int = 0
    error: Optional[str] = None
    train_cells: Tuple[Tuple[int, int], ...] = tuple()
    test_cells: Tuple[Tuple[int, int], ...] = tuple()
    predictions: Dict[Tuple[int, int], int] = field(default_factory=dict)

    @property
    def succeeded(self)->bool:
        return self.metrics is not None


@dataclass(eq=False)
class MetricsReport:
    """Per-fold metrics with per-zone (over repetitions) and global (over zone means) mean and std."""
    model: str
    config: TrainConfig
    repetitions: int
    zones: Tuple[int, ...]
    folds: List[FoldResult]
    zone_summary: Dict[int, Dict[str, Tuple[float, float]]]
    global_summary: Dict[str, Tuple[float, float]]

    @property
    def evaluation(self)->str:
        if self.config.balance_test is True:
            return 'balanced'
        return 'natural-prevalence (unbalanced test cells)'

    def successful_folds(self)->List[FoldResult]:
        return [fold for fold in self.folds if fold.succeeded]

    def failed_folds(self)->List[FoldResult]:
        return [fold for fold in self.folds if not fold.succeeded]

    def metric_values(self, metric: str='kappa')->List[float]:
        return [getattr(fold.metrics, metric) for fold in self.successful_folds()]


def stream_rng(seed: int, repetition: int, zone: int, stream: str)->np.random.Generator:
    """Independent generator for one named purpose of one fold."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(int(repetition), int(zone), zlib.crc32(stream.encode('utf-8')))))


def undersample(cells: Sequence[Tuple[int, int]], labels: Sequence[int], rng: np.random.Generator)->Tuple[List[Tuple[int, int]], List[int]]:
    """Keep the minority class whole and draw as many majority cells without replacement."""
    labels = np.asarray(labels, dtype=np.int64)
    n_favela = int(np.count_nonzero(labels == FAVELA))
    n_nonfavela = int(np.count_nonzero(labels == NON_FAVELA))
    if n_favela == 0 or n_nonfavela == 0:
        raise BalancingException('cannot balance {} favela and {} non-favela cells'.format(n_favela, n_nonfavela))
    sampler = RandomUnderSampler(sampling_strategy='auto', random_state=int(rng.integers(0, 2 ** 31 - 1)))
    index = np.arange(len(cells), dtype=np.int64).reshape((-1, 1))
    selected, selected_labels = sampler.fit_resample(index, labels)
    return [tuple(cells[i]) for i in selected[:, 0]], [int(label) for label in selected_labels]


def fit_feature_stats(table: FeatureTable, cells: Sequence[Tuple[int, int]])->FeatureStats:
    if len(cells) == 0:
        raise BalancingException('cannot fit feature statistics on an empty training set')
    values = np.array([table.records[cell].features for cell in cells], dtype=np.float64)
    mean = values.mean(axis=0)
    std = values.std(axis=0)
    return FeatureStats(mean=mean, std=std, scaled=std >= STD_FLOOR)


def standardize_features(table: FeatureTable, train_cells: Sequence[Tuple[int, int]])->Tuple[np.ndarray, FeatureStats]:
    """z-score every present cell with statistics of `train_cells`; degenerate features are only centered."""
    stats = fit_feature_stats(table=table, cells=train_cells)
    return stats.apply(features=table.dense_features, presence=table.presence), stats


def _labeled_zone_cells(table: FeatureTable, zones: Sequence[int])->Tuple[List[Tuple[int, int]], List[int]]:
    cells = list()
    labels = list()
    for zone in zones:
        for cell in table.labeled_cells(zone=zone):
            cells.append(cell)
            labels.append(table.records[cell].label)
    return cells, labels


def train_model(
    model_kind: str,
    table: FeatureTable,
    split: SplitSpec,
    config: TrainConfig,
    repetition: int=0,
    logger: LoggerWrapper=LoggerWrapper()
)->TrainResult:
    if model_kind not in MODEL_KINDS:
        raise UnknownModelException('unknown model "{}" (valid: {})'.format(model_kind, ', '.join(MODEL_KINDS)))
    zone = split.test_zone
    candidates, candidate_labels = _labeled_zone_cells(table=table, zones=split.train_zones)
    cells, labels = undersample(cells=candidates, labels=candidate_labels, rng=stream_rng(config.seed, repetition, zone, 'balance-train'))
    stats = None
    features = table.dense_features
    if config.standardize is True:
        features, stats = standardize_features(table=table, train_cells=cells)
    model = build_model(kind=model_kind, rng=stream_rng(config.seed, repetition, zone, 'init'))
    batch = prepare_batch(kind=model_kind, table=table, cells=cells, labels=labels, features=features)
    shuffle_rng = stream_rng(config.seed, repetition, zone, 'shuffle')
    state = AdamState()
    loss_trace = list()
    n = len(batch)
    logger.debug('Training {} on {} balanced cells from zones {} for {} epochs'.format(model_kind, n, list(split.train_zones), config.epochs))
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            part = batch.take(order[start:start + config.batch_size])
            loss, grads = model.loss_and_grads(part)
            adam_step(params=model.parameters(), grads=grads, state=state, lr=config.learning_rate)
            total += loss * len(part)
        loss_trace.append(total / n)
    if len(loss_trace) > 0:
        logger.debug('Training {} finished, loss {:.6f} -> {:.6f}'.format(model_kind, loss_trace[0], loss_trace[-1]))
    return TrainResult(model=model, loss_trace=loss_trace, train_cells=cells, train_labels=labels, features=features, stats=stats)


def select_test_cells(table: FeatureTable, split: SplitSpec, rng: np.random.Generator, balance: bool=True)->Tuple[List[Tuple[int, int]], List[int]]:
    cells, labels = _labeled_zone_cells(table=table, zones=(split.test_zone,))
    if balance is True:
        return undersample(cells=cells, labels=labels, rng=rng)
    if len(cells) == 0:
        raise BalancingException('zone {} has no labeled cell'.format(split.test_zone))
    return cells, labels


def tally_confusion(truth: Sequence[int], predicted: Sequence[int])->ConfusionMatrix:
    tn, fp, fn, tp = confusion_matrix(list(truth), list(predicted), labels=[NON_FAVELA, FAVELA]).ravel()
    return ConfusionMatrix(tp=int(tp), fp=int(fp), fn=int(fn), tn=int(tn))


def predict_cells(model, table: FeatureTable, cells: Sequence[Tuple[int, int]], features: Optional[np.ndarray]=None)->List[int]:
    if len(cells) == 0:
        return list()
    batch = prepare_batch(kind=model.kind, table=table, cells=cells, features=features)
    return [int(label) for label in predict_labels(model=model, batch=batch)]


def evaluate(model, table: FeatureTable, split: SplitSpec, rng: np.random.Generator, features: Optional[np.ndarray]=None, balance: bool=True)->ConfusionMatrix:
    """Confusion counts of `model` on the (balanced) labeled cells of the test zone, favela positive."""
    cells, labels = select_test_cells(table=table, split=split, rng=rng, balance=balance)
    return tally_confusion(truth=labels, predicted=predict_cells(model=model, table=table, cells=cells, features=features))


def compute_metrics(cm: ConfusionMatrix)->FoldMetrics:
    n = cm.total
    if n <= 0:
        raise EmptyConfusionMatrixException('confusion matrix is empty')
    degenerate = False
    if cm.tp + cm.fp > 0:
        precision = cm.tp / (cm.tp + cm.fp)
    else:
        precision = 0.0
        degenerate = True
    if cm.tp + cm.fn > 0:
        recall = cm.tp / (cm.tp + cm.fn)
    else:
        recall = 0.0
        degenerate = True
    if precision + recall > 0:
        f1 = 2.0 * precision * recall / (precision + recall)
    else:
        f1 = 0.0
        degenerate = True
    p_o = (cm.tp + cm.tn) / n
    p_e = ((cm.tp + cm.fp) * (cm.tp + cm.fn) + (cm.fn + cm.tn) * (cm.fp + cm.tn)) / (n * n)
    if p_e < 1.0:
        kappa = (p_o - p_e) / (1.0 - p_e)
    else:
        kappa = 0.0
        degenerate = True
    return FoldMetrics(precision=float(precision), recall=float(recall), f1=float(f1), kappa=float(kappa), degenerate=degenerate)


def count_cross_zone_windows(table: FeatureTable, cells: Sequence[Tuple[int, int]])->int:
    """Cells whose 3x3 window contains a present neighbor from another zone."""
    count = 0
    for row, col in cells:
        zone = table.records[(row, col)].zone
        for d_row, d_col in KING_OFFSETS:
            neighbor = table.get(row + d_row, col + d_col)
            if neighbor is not None and neighbor.zone != zone:
                count += 1
                break
    return count


def run_fold(
    table: FeatureTable,
    zones: Sequence[int],
    zone: int,
    repetition: int,
    model_kind: str,
    config: TrainConfig,
    keep_predictions: bool=False,
    checkpoint_dir: Optional[str]=None,
    logger: LoggerWrapper=LoggerWrapper()
)->FoldResult:
    """Train and evaluate one (repetition, zone) fold; data problems are captured in `error`.

    With `checkpoint_dir` the trained model is saved as `<model>-zone<zone>-rep<repetition>.json`.
    """
    result = FoldResult(zone=zone, repetition=repetition, model=model_kind)
    try:
        split = SplitSpec.holdout(zones=zones, test_zone=zone)
        trained = train_model(model_kind=model_kind, table=table, split=split, config=config, repetition=repetition, logger=logger)
        if checkpoint_dir is not None:
            save_checkpoint(
                model=trained.model,
                path=os.path.join(checkpoint_dir, checkpoint_name(model_kind=model_kind, zone=zone, repetition=repetition)),
                seed=config.seed,
                config=dict(config.to_dict(), zone=zone, repetition=repetition),
            )
        # evaluate draws from the same stream, so it sees exactly these cells
        test_cells, _ = select_test_cells(
            table=table,
            split=split,
            rng=stream_rng(config.seed, repetition, zone, 'balance-test'),
            balance=config.balance_test,
        )
        leaked = set(trained.train_cells) & set(test_cells)
        if len(leaked) > 0:
            raise SplitException('{} labeled cells are used for both training and testing'.format(len(leaked)))
        result.confusion = evaluate(
            model=trained.model,
            table=table,
            split=split,
            rng=stream_rng(config.seed, repetition, zone, 'balance-test'),
            features=trained.features,
            balance=config.balance_test,
        )
        result.metrics = compute_metrics(cm=result.confusion)
        result.n_train = len(trained.train_cells)
        result.n_test = len(test_cells)
        result.cross_zone_neighbors = count_cross_zone_windows(table=table, cells=test_cells)
        result.train_cells = tuple(trained.train_cells)
        result.test_cells = tuple(test_cells)
        if keep_predictions is True:
            zone_cells = table.labeled_cells(zone=zone)
            result.predictions = dict(zip(zone_cells, predict_cells(model=trained.model, table=table, cells=zone_cells, features=trained.features)))
    except (BalancingException, SplitException, EmptyConfusionMatrixException) as e:
        result.error = '{}: {}'.format(type(e).__name__, e)
    log_fold(fold=result, logger=logger)
    return result


def checkpoint_name(model_kind: str, zone: int, repetition: int)->str:
    return '{}-zone{}-rep{}.json'.format(model_kind, zone, repetition)


def log_fold(fold: FoldResult, logger: LoggerWrapper):
    if fold.error is not None:
        logger.warning('Fold zone={} repetition={} ({}) skipped: {}'.format(fold.zone, fold.repetition, fold.model, fold.error))
        return
    if fold.metrics.degenerate is True:
        logger.warning('Fold zone={} repetition={} ({}): degenerate metrics {}'.format(fold.zone, fold.repetition, fold.model, fold.confusion))
    logger.info('Fold zone={} repetition={} ({}): kappa={:.4f} f1={:.4f}'.format(fold.zone, fold.repetition, fold.model, fold.metrics.kappa, fold.metrics.f1))


def _mean_std(values: Sequence[float])->Tuple[float, float]:
    values = np.asarray(values, dtype=np.float64)
    return float(np.mean(values)), float(np.std(values))


def aggregate(folds: Sequence[FoldResult], zones: Sequence[int])->Tuple[Dict[int, Dict[str, Tuple[float, float]]], Dict[str, Tuple[float, float]]]:
    zone_summary = dict()
    for zone in zones:
        zone_folds = [fold for fold in folds if fold.zone == zone and fold.succeeded]
        if len(zone_folds) == 0:
            continue
        zone_summary[zone] = {name: _mean_std([getattr(fold.metrics, name) for fold in zone_folds]) for name in METRIC_NAMES}
    global_summary = dict()
    if len(zone_summary) > 0:
        for name in METRIC_NAMES:
            global_summary[name] = _mean_std([zone_summary[zone][name][0] for zone in sorted(zone_summary)])
    return zone_summary, global_summary


def spatial_crossval(
    table: FeatureTable,
    zones: Optional[Sequence[int]]=None,
    model_kind: str='gcn',
    config: TrainConfig=TrainConfig(),
    repetitions: int=DEFAULT_REPETITIONS,
    jobs: int=1,
    keep_predictions: bool=False,
    checkpoint_dir: Optional[str]=None,
    logger: LoggerWrapper=LoggerWrapper()
)->MetricsReport:
    """Zone-holdout cross-validation repeated `repetitions` times.

    Results are keyed by (zone, repetition), so the report does not depend on `jobs`.
    Only repetition 0 keeps per-cell predictions when `keep_predictions` is set.
    """
    if model_kind not in MODEL_KINDS:
        raise UnknownModelException('unknown model "{}" (valid: {})'.format(model_kind, ', '.join(MODEL_KINDS)))
    if zones is None:
        zones = table.zones()
    zones = tuple(sorted(int(z) for z in zones))
    if len(zones) < 2:
        raise SplitException('spatial cross-validation needs at least 2 zones, got {}'.format(list(zones)))
    if repetitions < 1:
        raise SplitException('repetitions must be positive, got {}'.format(repetitions))
    if checkpoint_dir is not None:
        os.makedirs(checkpoint_dir, exist_ok=True)
    logger.info('Cross-validating {} over zones {} with {} repetitions ({} jobs)'.format(model_kind, list(zones), repetitions, jobs))
    folds_to_run = [(repetition, zone) for repetition in range(repetitions) for zone in zones]
    if jobs == 1:
        folds = [
            run_fold(
                table=table, zones=zones, zone=zone, repetition=repetition, model_kind=model_kind, config=config,
                keep_predictions=keep_predictions and repetition == 0, checkpoint_dir=checkpoint_dir, logger=logger
            )
            for repetition, zone in folds_to_run
        ]
    else:
        # worker processes do not share the logger; fold lines are written once all folds returned
        folds = Parallel(n_jobs=jobs, batch_size=1)(
            delayed(run_fold)(
                table=table, zones=zones, zone=zone, repetition=repetition, model_kind=model_kind, config=config,
                keep_predictions=keep_predictions and repetition == 0, checkpoint_dir=checkpoint_dir
            )
            for repetition, zone in folds_to_run
        )
        for fold in folds:
            log_fold(fold=fold, logger=logger)
    folds = sorted(folds, key=lambda fold: (fold.zone, fold.repetition))
    zone_summary, global_summary = aggregate(folds=folds, zones=zones)
    report = MetricsReport(
        model=model_kind,
        config=config,
        repetitions=repetitions,
        zones=zones,
        folds=folds,
        zone_summary=zone_summary,
        global_summary=global_summary,
    )
    if 'kappa' in global_summary:
        logger.info('{}: global kappa {:.4f} +- {:.4f} over {} zones'.format(model_kind, global_summary['kappa'][0], global_summary['kappa'][1], len(zone_summary)))
    return report


@dataclass(frozen=True)
class ModelComparison:
    """Kappa in percent per zone and globally, and the models ordered by global kappa."""
    zones: Tuple[int, ...]
    rows: Dict[str, Dict[str, Tuple[float, float]]]
    ordering: Tuple[str, ...]


def compare_reports(reports: Sequence[MetricsReport], metric: str='kappa')->ModelComparison:
    """Reports may come straight from `spatial_crossval` or be rebuilt from their JSON summaries."""
    if len(reports) == 0:
        raise ComparisonException('nothing to compare')
    zones = sorted({zone for report in reports for zone in report.zones})
    rows = dict()
    for report in reports:
        row = dict()
        for zone in zones:
            if zone in report.zone_summary:
                mean, std = report.zone_summary[zone][metric]
                row[str(zone)] = (100.0 * mean, 100.0 * std)
        if metric in report.global_summary:
            mean, std = report.global_summary[metric]
            row['global'] = (100.0 * mean, 100.0 * std)
        if report.model in rows:
            raise ComparisonException('model "{}" appears in more than one report'.format(report.model))
        rows[report.model] = row
    ordering = sorted(rows.keys(), key=lambda model: (-rows[model].get('global', (float('-inf'), 0.0))[0], model))
    return ModelComparison(zones=tuple(zones), rows=rows, ordering=tuple(ordering))
