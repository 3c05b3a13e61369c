import json
import os
import sys
import traceback
from typing import List, Tuple

import click

from magnum_opus.operarius import KeyValueStore, LoggerWrapper, Task
from opus_vicinia import CHECKPOINT_FORMAT_VERSION, FEATURE_TABLE_FORMAT_VERSION, REPORT_FORMAT_VERSION, __version__
from opus_vicinia.grid_core import CellRecordException, FeatureTableParseException, InvalidGridException, load_feature_table
from opus_vicinia.local_graphs import LocalGraphException, build_local_graph, local_graph_to_json
from opus_vicinia.models import MODEL_KINDS
from opus_vicinia.molitor import build_pipeline_task, run_pipeline, task_result
from opus_vicinia.task_processors.base import EXIT_FAILURE, EXIT_SUCCESS, EXIT_USAGE
from opus_vicinia.task_processors.gradient_check_v1 import GRADCHECK_KINDS


class ConsoleLogger(LoggerWrapper):
    """Log lines on stderr; debug lines only when verbose."""

    def __init__(self, verbose: bool=False):
        super().__init__()
        self.verbose = verbose

    def _emit(self, level: str, message: str):
        click.echo('[{}] {}'.format(level, message), err=True)

    def info(self, message: str):
        self._emit(level='INFO', message=message)

    def warn(self, message: str):
        self._emit(level='WARNING', message=message)

    def warning(self, message: str):
        self._emit(level='WARNING', message=message)

    def debug(self, message: str):
        if self.verbose is True:
            self._emit(level='DEBUG', message=message)

    def critical(self, message: str):
        self._emit(level='CRITICAL', message=message)

    def error(self, message: str):
        self._emit(level='ERROR', message=message)


def read_config_file(path: str)->dict:
    """`key = value` lines; `#` starts a comment and `-` in keys is read as `_`."""
    values = dict()
    with open(path, 'r') as f:
        for line_number, line in enumerate(f, start=1):
            line = line.split('#', 1)[0].strip()
            if line == '':
                continue
            if '=' not in line:
                raise click.BadParameter('{}: line {}: expected "key = value"'.format(path, line_number), param_hint='--config')
            key, value = [part.strip() for part in line.split('=', 1)]
            if key == '':
                raise click.BadParameter('{}: line {}: empty key'.format(path, line_number), param_hint='--config')
            if len(value) >= 2 and value[0] == value[-1] and value[0] in ('"', "'"):
                value = value[1:-1]
            values[key.replace('-', '_').lower()] = value
    return values


def _load_config(ctx: click.Context, param: click.Parameter, value: str):
    if value is None or ctx.resilient_parsing:
        return
    values = read_config_file(path=value)
    default_map = dict(ctx.default_map or dict())
    for command_name in ctx.command.commands:
        merged = dict(default_map.get(command_name, dict()))
        merged.update(values)
        default_map[command_name] = merged
    ctx.default_map = default_map


def _print_version(ctx: click.Context, param: click.Parameter, value: bool):
    if not value or ctx.resilient_parsing:
        return
    click.echo('opus-vicinia {} (feature table {}, checkpoint {}, report {})'.format(
        __version__, FEATURE_TABLE_FORMAT_VERSION, CHECKPOINT_FORMAT_VERSION, REPORT_FORMAT_VERSION
    ))
    ctx.exit(0)


def parse_zones(value: str)->Tuple[List[int], int]:
    """`N` keeps the first N zones, `a,b,...` names zone ids. Returns (ids, count); one of them is None."""
    if value is None:
        return None, None
    try:
        if ',' in value:
            return [int(part) for part in value.split(',') if part.strip() != ''], None
        return None, int(value)
    except ValueError:
        raise click.BadParameter('expected a zone count or a comma separated list of zone ids, got "{}"'.format(value), param_hint='--zones')


def execute(ctx: click.Context, tasks_to_process: List[Task])->KeyValueStore:
    logger = ctx.obj['logger']
    try:
        return run_pipeline(tasks_to_process=tasks_to_process, logger=logger)
    except Exception:
        logger.error('EXCEPTION: {}'.format(traceback.format_exc()))
        click.echo('error: pipeline processing failed', err=True)
        ctx.exit(EXIT_FAILURE)


def finish(ctx: click.Context, key_value_store: KeyValueStore, tasks_processed: List[Task]):
    """Exit with the worst task exit code: usage problems first, then runtime failures."""
    exit_codes = list()
    for task in tasks_processed:
        exit_code = task_result(key_value_store=key_value_store, kind=task.kind, task_id=task.task_id, name='EXIT_CODE')
        error = task_result(key_value_store=key_value_store, kind=task.kind, task_id=task.task_id, name='ERROR')
        if exit_code is None:
            exit_code = EXIT_FAILURE
            error = 'task was not processed'
        if error is not None:
            click.echo('error: {}: {}'.format(task.task_id, error), err=True)
        exit_codes.append(int(exit_code))
    if EXIT_USAGE in exit_codes:
        ctx.exit(EXIT_USAGE)
    if any(code != EXIT_SUCCESS for code in exit_codes):
        ctx.exit(EXIT_FAILURE)
    ctx.exit(EXIT_SUCCESS)


@click.group()
@click.option('--version', is_flag=True, callback=_print_version, expose_value=False, is_eager=True, help='Print the tool and file format versions.')
@click.option('--config', 'config_file', type=click.Path(exists=True, dir_okay=False), callback=_load_config, expose_value=False, help='key = value file with option defaults; flags override it.')
@click.option('--verbose', '-v', is_flag=True, help='Also log debug lines.')
@click.pass_context
def cli(ctx, verbose):
    """Neighbor-aware favela classification on a regular grid."""
    ctx.ensure_object(dict)
    ctx.obj['logger'] = ConsoleLogger(verbose=verbose)


@cli.command('features', help='Extract the 9 per-cell features into a feature table CSV.')
@click.option('--image-manifest', required=True, type=click.Path(exists=True, dir_okay=False), help='Band manifest (`name = band.asc` lines).')
@click.option('--dem', required=True, type=click.Path(exists=True, dir_okay=False), help='ESRI ASCII elevation grid.')
@click.option('--street-nodes', required=True, type=click.Path(exists=True, dir_okay=False), help='Street nodes CSV.')
@click.option('--street-segments', required=True, type=click.Path(exists=True, dir_okay=False), help='Street segments CSV.')
@click.option('--rows', required=True, type=int, help='Grid rows.')
@click.option('--cols', required=True, type=int, help='Grid columns.')
@click.option('--origin-x', type=float, default=0.0, show_default=True, help='Western edge of the grid.')
@click.option('--origin-y', type=float, default=0.0, show_default=True, help='Southern edge of the grid.')
@click.option('--cell-size', type=float, default=150.0, show_default=True, help='Cell edge length in metres.')
@click.option('--red-band', type=str, default='B4', show_default=True)
@click.option('--nir-band', type=str, default='B8', show_default=True)
@click.option('--labels', type=click.Path(exists=True, dir_okay=False), default=None, help='row,col,zone,label CSV (or row,col,zone,coverage with coverage fractions).')
@click.option('--mask', type=click.Path(exists=True, dir_okay=False), default=None, help='ESRI ASCII cell mask, non-zero cells are extracted.')
@click.option('--out', '-o', required=True, type=click.Path(dir_okay=False), help='Feature table CSV to write.')
@click.pass_context
def features(ctx, image_manifest, dem, street_nodes, street_segments, rows, cols, origin_x, origin_y, cell_size, red_band, nir_band, labels, mask, out):
    spec = {
        'imageManifest': image_manifest,
        'dem': dem,
        'streetNodes': street_nodes,
        'streetSegments': street_segments,
        'gridRows': rows,
        'gridCols': cols,
        'originX': origin_x,
        'originY': origin_y,
        'cellSize': cell_size,
        'redBand': red_band,
        'nirBand': nir_band,
        'outputFile': out,
    }
    if labels is not None:
        spec['labels'] = labels
    if mask is not None:
        spec['mask'] = mask
    task = build_pipeline_task(kind='FeatureExtraction', task_id='features', spec=spec, logger=ctx.obj['logger'])
    key_value_store = execute(ctx=ctx, tasks_to_process=[task])
    cells = task_result(key_value_store=key_value_store, kind=task.kind, task_id=task.task_id, name='CELL_COUNT')
    if cells is not None:
        click.echo('{}: {} cells'.format(out, cells))
    finish(ctx=ctx, key_value_store=key_value_store, tasks_processed=[task])


def _synth_spec(rows, cols, n_zones, imbalance, context_strength, noise, correlation_length, zone_shift, cell_size, seed, oracle, oracle_samples, out)->dict:
    return {
        'nRows': rows,
        'nCols': cols,
        'nZones': n_zones,
        'imbalanceTarget': imbalance,
        'contextStrength': context_strength,
        'noise': noise,
        'correlationLength': correlation_length,
        'zoneShift': zone_shift,
        'cellSize': cell_size,
        'seed': seed,
        'oracle': oracle,
        'oracleSamples': oracle_samples,
        'outputFile': out,
    }


def synth_options(function):
    options = [
        click.option('--rows', type=int, default=200, show_default=True, help='Grid rows.'),
        click.option('--cols', type=int, default=200, show_default=True, help='Grid columns.'),
        click.option('--n-zones', type=int, default=5, show_default=True, help='Number of vertical zone bands.'),
        click.option('--imbalance', type=float, default=30.0, show_default=True, help='Target non-favela cells per favela cell.'),
        click.option('--context-strength', type=float, default=0.6, show_default=True, help='Weight of the neighborhood signal, in [0,1].'),
        click.option('--noise', type=float, default=1.5, show_default=True, help='Feature noise standard deviation.'),
        click.option('--correlation-length', type=float, default=10.0, show_default=True, help='Latent field correlation length in cells.'),
        click.option('--zone-shift', type=float, default=0.3, show_default=True, help='Scale of the per-zone prototype offsets.'),
        click.option('--cell-size', type=float, default=150.0, show_default=True),
        click.option('--oracle/--no-oracle', default=True, show_default=True, help='Estimate the Bayes oracle kappa.'),
        click.option('--oracle-samples', type=int, default=100000, show_default=True),
    ]
    for option in reversed(options):
        function = option(function)
    return function


@cli.command('synth', help='Generate a seeded synthetic city feature table with a JSON sidecar.')
@synth_options
@click.option('--seed', type=int, default=1, show_default=True)
@click.option('--out', '-o', required=True, type=click.Path(dir_okay=False), help='Feature table CSV to write.')
@click.pass_context
def synth(ctx, rows, cols, n_zones, imbalance, context_strength, noise, correlation_length, zone_shift, cell_size, oracle, oracle_samples, seed, out):
    task = build_pipeline_task(
        kind='SyntheticCity',
        task_id='city',
        spec=_synth_spec(rows, cols, n_zones, imbalance, context_strength, noise, correlation_length, zone_shift, cell_size, seed, oracle, oracle_samples, out),
        logger=ctx.obj['logger']
    )
    key_value_store = execute(ctx=ctx, tasks_to_process=[task])
    ratio = task_result(key_value_store=key_value_store, kind=task.kind, task_id=task.task_id, name='ACHIEVED_RATIO')
    if ratio is not None:
        click.echo('{}: achieved ratio {:.2f}'.format(out, ratio))
    kappa = task_result(key_value_store=key_value_store, kind=task.kind, task_id=task.task_id, name='ORACLE_KAPPA')
    if kappa is not None:
        click.echo('oracle kappa {:.4f}'.format(kappa))
    finish(ctx=ctx, key_value_store=key_value_store, tasks_processed=[task])


def training_options(function):
    options = [
        click.option('--repetitions', type=int, default=10, show_default=True, help='Repetitions of the zone-holdout protocol.'),
        click.option('--epochs', type=int, default=400, show_default=True),
        click.option('--batch-size', type=int, default=32, show_default=True),
        click.option('--learning-rate', type=float, default=0.001, show_default=True),
        click.option('--standardize/--no-standardize', default=True, show_default=True, help='z-score features with training statistics.'),
        click.option('--natural-prevalence', is_flag=True, help='Evaluate on every labeled test cell (not the balanced protocol).'),
        click.option('--jobs', '-j', type=int, default=1, show_default=True, help='Folds run concurrently.'),
    ]
    for option in reversed(options):
        function = option(function)
    return function


def _crossval_spec(table, model, out, repetitions, epochs, batch_size, learning_rate, standardize, natural_prevalence, jobs, seed)->dict:
    return {
        'featureTable': table,
        'model': model,
        'outputFile': out,
        'repetitions': repetitions,
        'epochs': epochs,
        'batchSize': batch_size,
        'learningRate': learning_rate,
        'standardize': standardize,
        'naturalPrevalence': natural_prevalence,
        'jobs': jobs,
        'seed': seed,
    }


@cli.command('crossval', help='Zone-holdout cross-validation of one model over TABLE.')
@click.argument('table', type=click.Path(exists=True, dir_okay=False))
@click.option('--model', '-m', type=click.Choice(MODEL_KINDS), default='gcn', show_default=True)
@training_options
@click.option('--zones', type=str, default=None, help='Zone count N (first N zones) or comma separated zone ids.')
@click.option('--seed', type=int, default=0, show_default=True)
@click.option('--maps', type=click.Path(dir_okay=False), default=None, help='PGM map of the repetition-0 predictions.')
@click.option('--summary', type=click.Path(dir_okay=False), default=None, help='JSON summary (default <out>.summary.json).')
@click.option('--checkpoint-dir', type=click.Path(file_okay=False), default=None, help='Save every fold model as a JSON checkpoint here.')
@click.option('--out', '-o', required=True, type=click.Path(dir_okay=False), help='Per-fold report CSV.')
@click.pass_context
def crossval(ctx, table, model, repetitions, epochs, batch_size, learning_rate, standardize, natural_prevalence, jobs, zones, seed, maps, summary, checkpoint_dir, out):
    zone_ids, zone_count = parse_zones(value=zones)
    spec = _crossval_spec(table, model, out, repetitions, epochs, batch_size, learning_rate, standardize, natural_prevalence, jobs, seed)
    if zone_ids is not None:
        spec['zones'] = zone_ids
    if zone_count is not None:
        spec['zoneCount'] = zone_count
    if maps is not None:
        spec['mapFile'] = maps
    if summary is not None:
        spec['summaryFile'] = summary
    if checkpoint_dir is not None:
        spec['checkpointDirectory'] = checkpoint_dir
    task = build_pipeline_task(kind='SpatialCrossValidation', task_id='crossval-{}'.format(model), spec=spec, logger=ctx.obj['logger'])
    key_value_store = execute(ctx=ctx, tasks_to_process=[task])
    kappa = task_result(key_value_store=key_value_store, kind=task.kind, task_id=task.task_id, name='GLOBAL_KAPPA')
    if kappa is not None:
        std = task_result(key_value_store=key_value_store, kind=task.kind, task_id=task.task_id, name='GLOBAL_KAPPA_STD')
        click.echo('{}: global kappa {:.4f} +- {:.4f}'.format(model, kappa, std))
    finish(ctx=ctx, key_value_store=key_value_store, tasks_processed=[task])


@cli.command('gradcheck', help='Finite-difference gradient check of MODEL on a random instance.')
@click.argument('model', type=click.Choice(GRADCHECK_KINDS))
@click.option('--seed', type=int, default=0, show_default=True)
@click.option('--instances', type=int, default=1, show_default=True, help='Instances checked, seeded seed, seed+1, ...')
@click.option('--corrupt-gradient', is_flag=True, hidden=True)
@click.pass_context
def gradcheck(ctx, model, seed, instances, corrupt_gradient):
    task = build_pipeline_task(
        kind='GradientCheck',
        task_id='gradcheck-{}'.format(model),
        spec={'model': model, 'seed': seed, 'instances': instances, 'corruptGradient': corrupt_gradient},
        logger=ctx.obj['logger']
    )
    key_value_store = execute(ctx=ctx, tasks_to_process=[task])
    error = task_result(key_value_store=key_value_store, kind=task.kind, task_id=task.task_id, name='MAX_RELATIVE_ERROR')
    if error is not None:
        click.echo('{} max relative error {:.3e}'.format(model, error))
    finish(ctx=ctx, key_value_store=key_value_store, tasks_processed=[task])


def parse_cell(value: str)->Tuple[int, int]:
    try:
        row, col = (int(part) for part in value.split(','))
    except ValueError:
        raise click.BadParameter('expected ROW,COL, got "{}"'.format(value), param_hint='--cell')
    return row, col


@cli.command('graph', help='Dump the local graph around one cell of TABLE as JSON (debugging aid).')
@click.argument('table', type=click.Path(exists=True, dir_okay=False))
@click.option('--cell', required=True, type=str, help='Target cell as ROW,COL.')
@click.option('--out', '-o', type=click.Path(dir_okay=False), default=None, help='JSON file to write instead of stdout.')
@click.pass_context
def graph(ctx, table, cell, out):
    row, col = parse_cell(value=cell)
    try:
        g = build_local_graph(table=load_feature_table(path=table, logger=ctx.obj['logger']), row=row, col=col)
    except (FeatureTableParseException, CellRecordException, InvalidGridException, LocalGraphException) as e:
        click.echo('error: {}: {}'.format(type(e).__name__, e), err=True)
        ctx.exit(EXIT_USAGE)
    text = json.dumps(local_graph_to_json(g), indent=2)
    if out is None:
        click.echo(text)
    else:
        with open(out, 'w', encoding='utf-8') as f:
            f.write(text + '\n')
        click.echo('{}: {} nodes, {} edges'.format(out, g.node_count, len(g.edges)))


@cli.command('reproduce',help='Synthetic city, all three models and the comparison table in one run.')
@synth_options
@training_options
@click.option('--seed', type=int, default=1, show_default=True, help='Seed of the city and of every training stream.')
@click.option('--out-dir', '-o', required=True, type=click.Path(file_okay=False), help='Directory for every output.')
@click.pass_context
def reproduce(ctx, rows, cols, n_zones, imbalance, context_strength, noise, correlation_length, zone_shift, cell_size, oracle, oracle_samples, repetitions, epochs, batch_size, learning_rate, standardize, natural_prevalence, jobs, seed, out_dir):
    logger = ctx.obj['logger']
    os.makedirs(out_dir, exist_ok=True)
    city_file = os.path.join(out_dir, 'city.csv')
    tasks_to_process = [
        build_pipeline_task(
            kind='SyntheticCity',
            task_id='city',
            spec=_synth_spec(rows, cols, n_zones, imbalance, context_strength, noise, correlation_length, zone_shift, cell_size, seed, oracle, oracle_samples, city_file),
            logger=logger
        ),
    ]
    crossval_ids = list()
    for model in MODEL_KINDS:
        task_id = 'crossval-{}'.format(model)
        crossval_ids.append(task_id)
        tasks_to_process.append(
            build_pipeline_task(
                kind='SpatialCrossValidation',
                task_id=task_id,
                spec=_crossval_spec('${KVS:city:OUTPUT_FILE}', model, os.path.join(out_dir, 'report-{}.csv'.format(model)), repetitions, epochs, batch_size, learning_rate, standardize, natural_prevalence, jobs, seed),
                depends_on=['city'],
                logger=logger
            )
        )
    comparison_file = os.path.join(out_dir, 'comparison.md')
    tasks_to_process.append(
        build_pipeline_task(
            kind='ModelComparison',
            task_id='comparison',
            spec={
                'summaries': ['${{KVS:{}:SUMMARY_FILE}}'.format(task_id) for task_id in crossval_ids],
                'outputFile': comparison_file,
            },
            depends_on=crossval_ids,
            logger=logger
        )
    )
    key_value_store = execute(ctx=ctx, tasks_to_process=tasks_to_process)
    if task_result(key_value_store=key_value_store, kind='ModelComparison', task_id='comparison', name='EXIT_CODE') == EXIT_SUCCESS:
        with open(comparison_file, 'r', encoding='utf-8') as f:
            click.echo(f.read(), nl=False)
    finish(ctx=ctx, key_value_store=key_value_store, tasks_processed=tasks_to_process)


def main():
    cli(prog_name='opus-vicinia')


if __name__ == '__main__':
    sys.exit(main())
