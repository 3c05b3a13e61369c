"""Cross-validation reports, model comparison tables, prediction maps and synthetic-city sidecars.

Primary outputs are written deterministically: fixed column order, fixed float
formatting and folds ordered by (zone, repetition), so that identical runs produce
byte-identical files.
"""
import csv
import json
from typing import Dict, Optional

import numpy as np

from magnum_opus.operarius import LoggerWrapper
from opus_vicinia import REPORT_FORMAT_VERSION, __version__
from opus_vicinia.experiment import METRIC_NAMES, MetricsReport, ModelComparison, TrainConfig, TrainConfigException
from opus_vicinia.grid_core import FAVELA, FeatureTable, GridSpec
from opus_vicinia.synthetic import OracleResult, SynthConfig


REPORT_CSV_HEADER = ('zone', 'repetition', 'model',) + METRIC_NAMES
PGM_NON_FAVELA = 0
PGM_FAVELA = 255
PGM_NO_PREDICTION = 128


class ReportException(Exception):
    pass


def _format_float(value: float)->str:
    return '{:.9g}'.format(value)


def write_json(path: str, data: dict):
    with open(path, 'w', encoding='utf-8') as f:
        f.write(json.dumps(data, ensure_ascii=False, indent=2))
        f.write('\n')


def read_json(path: str)->dict:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ReportException('{}: line {} column {}: {}'.format(path, e.lineno, e.colno, e.msg))
    if isinstance(data, dict) is False:
        raise ReportException('{}: expected a JSON object'.format(path))
    return data


def write_report_csv(report: MetricsReport, path: str):
    """One row per successful fold in (zone, repetition) order."""
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(REPORT_CSV_HEADER)
        for fold in report.successful_folds():
            writer.writerow(
                [fold.zone, fold.repetition, fold.model] + [_format_float(getattr(fold.metrics, name)) for name in METRIC_NAMES]
            )


def _mean_std_dict(summary: Dict[str, tuple])->Dict[str, Dict[str, float]]:
    return {name: {'mean': summary[name][0], 'std': summary[name][1]} for name in METRIC_NAMES if name in summary}


def report_summary(report: MetricsReport, manifest_name: Optional[str]=None)->dict:
    folds = list()
    for fold in report.folds:
        entry = {
            'zone': fold.zone,
            'repetition': fold.repetition,
            'n_train': fold.n_train,
            'n_test': fold.n_test,
            'cross_zone_neighbors': fold.cross_zone_neighbors,
            'degenerate': fold.metrics.degenerate if fold.succeeded else None,
            'error': fold.error,
        }
        if fold.succeeded:
            entry['metrics'] = fold.metrics.as_dict()
            entry['confusion'] = {'tp': fold.confusion.tp, 'fp': fold.confusion.fp, 'fn': fold.confusion.fn, 'tn': fold.confusion.tn}
        folds.append(entry)
    return {
        'format': 'opus-vicinia-report/{}'.format(REPORT_FORMAT_VERSION),
        'tool_version': __version__,
        'model': report.model,
        'evaluation': report.evaluation,
        'config': report.config.to_dict(),
        'repetitions': report.repetitions,
        'zones': list(report.zones),
        'successful_folds': len(report.successful_folds()),
        'failed_folds': len(report.failed_folds()),
        'per_zone': {str(zone): _mean_std_dict(summary) for zone, summary in sorted(report.zone_summary.items())},
        'global': _mean_std_dict(report.global_summary),
        'folds': folds,
        'manifest': manifest_name,
    }


def write_report_summary(report: MetricsReport, path: str, manifest_name: Optional[str]=None)->dict:
    summary = report_summary(report=report, manifest_name=manifest_name)
    write_json(path=path, data=summary)
    return summary


def load_report_summary(path: str)->dict:
    summary = read_json(path=path)
    expected = 'opus-vicinia-report/{}'.format(REPORT_FORMAT_VERSION)
    if summary.get('format') != expected:
        raise ReportException('{}: unsupported report format "{}" (expected "{}")'.format(path, summary.get('format'), expected))
    for key in ('model', 'zones', 'per_zone', 'global'):
        if key not in summary:
            raise ReportException('{}: missing field "{}"'.format(path, key))
    return summary


def prediction_image(grid: GridSpec, predictions: Dict[tuple, int])->np.ndarray:
    """Grey levels with row 0 of the grid as the bottom line of the image; cells without a prediction are 128."""
    image = np.full((grid.n_rows, grid.n_cols), PGM_NO_PREDICTION, dtype=np.uint8)
    for (row, col), label in predictions.items():
        grid.check_bounds(row=row, col=col)
        image[row, col] = PGM_FAVELA if label == FAVELA else PGM_NON_FAVELA
    return np.flipud(image)


def write_prediction_map(grid: GridSpec, predictions: Dict[tuple, int], path: str):
    image = prediction_image(grid=grid, predictions=predictions)
    with open(path, 'wb') as f:
        f.write('P5\n{} {}\n255\n'.format(grid.n_cols, grid.n_rows).encode('ascii'))
        f.write(np.ascontiguousarray(image).tobytes())


def merged_predictions(report: MetricsReport)->Dict[tuple, int]:
    """Predictions of the repetition-0 model of every held-out zone, merged into one map."""
    merged = dict()
    for fold in report.folds:
        if fold.repetition == 0:
            merged.update(fold.predictions)
    return merged


def comparison_summary(comparison: ModelComparison)->dict:
    rows = dict()
    for model, row in comparison.rows.items():
        rows[model] = {column: {'mean': value[0], 'std': value[1]} for column, value in row.items()}
    return {
        'format': 'opus-vicinia-comparison/{}'.format(REPORT_FORMAT_VERSION),
        'metric': 'kappa',
        'unit': 'percent',
        'zones': list(comparison.zones),
        'rows': rows,
        'ordering': list(comparison.ordering),
    }


def comparison_markdown(comparison: ModelComparison)->str:
    """Kappa (%) per zone and globally, one row per model in `ordering`."""
    columns = [str(zone) for zone in comparison.zones] + ['global']
    lines = list()
    lines.append('| model | ' + ' | '.join('zone {}'.format(c) if c != 'global' else 'global' for c in columns) + ' |')
    lines.append('|---|' + '---|' * len(columns))
    for model in comparison.ordering:
        row = comparison.rows[model]
        cells = list()
        for column in columns:
            if column in row:
                cells.append('{:.1f} ± {:.1f}'.format(row[column][0], row[column][1]))
            else:
                cells.append('n/a')
        lines.append('| {} | {} |'.format(model, ' | '.join(cells)))
    return '\n'.join(lines) + '\n'


def _summary_pairs(stats: Dict[str, dict], path: str)->Dict[str, tuple]:
    try:
        return {name: (float(value['mean']), float(value['std'])) for name, value in stats.items()}
    except (AttributeError, KeyError, TypeError, ValueError):
        raise ReportException('{}: malformed mean/std entry in {}'.format(path, stats))


def report_from_summary(summary: dict, path: str='<summary>')->MetricsReport:
    """A fold-less `MetricsReport` carrying the per-zone and global statistics of a loaded summary."""
    try:
        config = TrainConfig(**summary.get('config', dict()))
    except (TypeError, TrainConfigException) as e:
        raise ReportException('{}: bad training config ({})'.format(path, e))
    try:
        zone_summary = {int(zone): _summary_pairs(stats=stats, path=path) for zone, stats in summary['per_zone'].items()}
        zones = tuple(sorted(int(zone) for zone in summary['zones']))
    except (AttributeError, TypeError, ValueError):
        raise ReportException('{}: zones must be integer ids'.format(path))
    return MetricsReport(
        model=summary['model'],
        config=config,
        repetitions=int(summary.get('repetitions', 0)),
        zones=zones,
        folds=list(),
        zone_summary=zone_summary,
        global_summary=_summary_pairs(stats=summary['global'], path=path),
    )


def synth_sidecar(config: SynthConfig, table: FeatureTable, summary: dict, oracle: Optional[OracleResult]=None, manifest_name: Optional[str]=None)->dict:
    sidecar = {
        'format': 'opus-vicinia-synth/{}'.format(REPORT_FORMAT_VERSION),
        'tool_version': __version__,
        'config': config.to_dict(),
        'cells': len(table),
        'city': summary,
        'oracle': None,
        'manifest': manifest_name,
    }
    if oracle is not None:
        sidecar['oracle'] = {
            'metrics': oracle.metrics.as_dict(),
            'confusion': {'tp': oracle.confusion.tp, 'fp': oracle.confusion.fp, 'fn': oracle.confusion.fn, 'tn': oracle.confusion.tn},
            'n_samples': oracle.n_samples,
            'n_draws': oracle.n_draws,
        }
    return sidecar


def log_report(report: MetricsReport, logger: LoggerWrapper=LoggerWrapper()):
    for zone, summary in sorted(report.zone_summary.items()):
        logger.info('{} zone {}: kappa {:.4f} +- {:.4f}'.format(report.model, zone, summary['kappa'][0], summary['kappa'][1]))
    for fold in report.failed_folds():
        logger.warning('{} zone {} repetition {} failed: {}'.format(report.model, fold.zone, fold.repetition, fold.error))
