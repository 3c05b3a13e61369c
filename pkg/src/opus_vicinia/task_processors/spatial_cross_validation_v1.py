from typing import List, Optional

from magnum_opus.operarius import LoggerWrapper, Task

from opus_vicinia.experiment import DEFAULT_REPETITIONS, TrainConfig, spatial_crossval
from opus_vicinia.grid_core import load_feature_table
from opus_vicinia.manifest import RunManifest, manifest_path, write_manifest
from opus_vicinia.models import MODEL_KINDS, UnknownModelException
from opus_vicinia.reporting import log_report, merged_predictions, write_prediction_map, write_report_csv, write_report_summary
from opus_vicinia.task_processors.base import EXIT_FAILURE, EXIT_SUCCESS, PipelineTaskProcessor, SpecFieldException


SUMMARY_SUFFIX = '.summary.json'


class SpatialCrossValidation(PipelineTaskProcessor):

    def __init__(self, kind: str='SpatialCrossValidation', kind_versions: list=['v1',], supported_commands: list=list(), logger: LoggerWrapper=LoggerWrapper()):
        super().__init__(kind, kind_versions, supported_commands, logger)

    def build_train_config(self)->TrainConfig:
        defaults = TrainConfig.__dataclass_fields__
        return TrainConfig(
            epochs=self.spec_int('epochs', default=defaults['epochs'].default),
            batch_size=self.spec_int('batchSize', default=defaults['batch_size'].default),
            learning_rate=self.spec_float('learningRate', default=defaults['learning_rate'].default),
            seed=self.spec_int('seed', default=defaults['seed'].default),
            standardize=self.spec_bool('standardize', default=defaults['standardize'].default),
            balance_test=not self.spec_bool('naturalPrevalence', default=False),
        )

    def select_zones(self, available: List[int])->Optional[List[int]]:
        """Explicit `zones` ids win over `zoneCount`, which keeps the first N zones."""
        zones = self.spec_value('zones')
        if zones is not None:
            if isinstance(zones, str):
                zones = [part for part in zones.split(',') if part.strip() != '']
            if isinstance(zones, (list, tuple)) is False:
                raise SpecFieldException('spec field "zones" must be a list of zone ids, got {}'.format(zones))
            try:
                selected = sorted({int(zone) for zone in zones})
            except (TypeError, ValueError):
                raise SpecFieldException('spec field "zones" must list integer zone ids, got {}'.format(zones))
            missing = [zone for zone in selected if zone not in available]
            if len(missing) > 0:
                raise SpecFieldException('zones {} are not present in the feature table (available: {})'.format(missing, available))
            return selected
        zone_count = self.spec_int('zoneCount')
        if zone_count is not None:
            if zone_count < 1 or zone_count > len(available):
                raise SpecFieldException('zoneCount must lie between 1 and {}, got {}'.format(len(available), zone_count))
            return available[:zone_count]
        return None

    def run(self, task: Task, command: str, context: str, log_header: str)->dict:
        """Zone-holdout cross-validation of one model over a feature table.

        # Spec fields

        | Field                   | Type      | Required | In Versions | Description                                                                              |
        |-------------------------|:---------:|:--------:|:-----------:|------------------------------------------------------------------------------------------|
        | `featureTable`          | str       | Yes      | v1          | Feature table CSV with zones and labels                                                  |
        | `model`                 | str       | Yes      | v1          | One of `gcn`, `mlp-neighbors`, `mlp-local`                                               |
        | `outputFile`            | str       | Yes      | v1          | Per-fold report CSV                                                                      |
        | `summaryFile`           | str       | No       | v1          | JSON summary (default `<outputFile>.summary.json`)                                       |
        | `repetitions`           | int       | No       | v1          | Repetitions of the whole protocol (default 10)                                           |
        | `zones`                 | list[int] | No       | v1          | Zone ids to use (default: every zone of the table)                                       |
        | `zoneCount`             | int       | No       | v1          | Use only the first N zones (ignored when `zones` is set)                                 |
        | `epochs`                | int       | No       | v1          | Training epochs (default 400)                                                            |
        | `batchSize`             | int       | No       | v1          | Mini-batch size (default 32)                                                             |
        | `learningRate`          | float     | No       | v1          | Adam learning rate (default 0.001)                                                       |
        | `seed`                  | int       | No       | v1          | Base seed of every random stream (default 0)                                             |
        | `standardize`           | bool      | No       | v1          | z-score features with training statistics (default `True`)                               |
        | `naturalPrevalence`     | bool      | No       | v1          | Evaluate on all labeled test cells instead of a balanced sample (default `False`)        |
        | `jobs`                  | int       | No       | v1          | Folds run concurrently (default 1); results do not depend on it                          |
        | `mapFile`               | str       | No       | v1          | Write a PGM map of the repetition-0 predictions of every held-out zone                   |
        | `checkpointDirectory`   | str       | No       | v1          | Save every fold model as `<model>-zone<Z>-rep<R>.json` in this directory                 |
        | `writeManifest`         | bool      | No       | v1          | Write `<outputFile>.manifest.json` (default `True`)                                      |
        | `raiseExceptionOnError` | bool      | No       | v1          | Default value is `False`. If set to `True`, any failure raises an exception              |

        Returns:
            Results stored in the `KeyValueStore`:

            * `OUTPUT_FILE` - The per-fold report CSV
            * `SUMMARY_FILE` - The JSON summary
            * `MAP_FILE` - The prediction map (or `None`)
            * `CHECKPOINT_DIRECTORY` - Where the fold checkpoints were written (or `None`)
            * `MANIFEST_FILE` - The run manifest path (or `None`)
            * `MODEL` - The model kind
            * `SUCCESSFUL_FOLDS` / `FAILED_FOLDS` - Fold counts
            * `GLOBAL_KAPPA` / `GLOBAL_KAPPA_STD` - Global kappa mean and std (or `None`)
            * `EXIT_CODE` - 1 when no fold succeeded
        """
        model_kind = self.spec_value('model', required=True)
        if model_kind not in MODEL_KINDS:
            raise UnknownModelException('unknown model "{}" (valid: {})'.format(model_kind, ', '.join(MODEL_KINDS)))
        table_path = self.spec_value('featureTable', required=True)
        output_file = self.spec_value('outputFile', required=True)
        summary_file = self.spec_value('summaryFile', default='{}{}'.format(output_file, SUMMARY_SUFFIX))
        map_file = self.spec_value('mapFile')
        checkpoint_dir = self.spec_value('checkpointDirectory')
        repetitions = self.spec_int('repetitions', default=DEFAULT_REPETITIONS)
        jobs = self.spec_int('jobs', default=1)
        if jobs == 0:
            raise SpecFieldException('spec field "jobs" must not be 0')
        write_manifest_file = self.spec_bool('writeManifest', default=True)
        config = self.build_train_config()

        table = load_feature_table(path=table_path, logger=self.logger)
        zones = self.select_zones(available=table.zones())
        report = spatial_crossval(
            table=table,
            zones=zones,
            model_kind=model_kind,
            config=config,
            repetitions=repetitions,
            jobs=jobs,
            keep_predictions=map_file is not None,
            checkpoint_dir=checkpoint_dir,
            logger=self.logger,
        )
        log_report(report=report, logger=self.logger)

        manifest_name = manifest_path(primary_output=output_file) if write_manifest_file is True else None
        write_report_csv(report=report, path=output_file)
        write_report_summary(report=report, path=summary_file, manifest_name=manifest_name)
        if map_file is not None:
            write_prediction_map(grid=table.grid, predictions=merged_predictions(report=report), path=map_file)

        manifest_file = None
        if write_manifest_file is True:
            manifest = RunManifest(
                command='crossval',
                config=dict(config.to_dict(), model=model_kind, repetitions=repetitions, zones=list(report.zones), jobs=jobs, checkpoint_directory=checkpoint_dir),
                seeds={'seed': config.seed},
            )
            manifest.add_input(path=table_path)
            manifest.add_output(path=summary_file)
            if map_file is not None:
                manifest.add_output(path=map_file)
            manifest_file = write_manifest(manifest=manifest, primary_output=output_file, logger=self.logger)

        successful = len(report.successful_folds())
        exit_code = EXIT_SUCCESS
        error = None
        if successful == 0:
            exit_code = EXIT_FAILURE
            error = 'no fold succeeded ({} failed)'.format(len(report.failed_folds()))
            self.log(message=error, build_log_message_header=False, level='error', header=log_header)
        global_kappa = report.global_summary.get('kappa')
        return {
            'OUTPUT_FILE': output_file,
            'SUMMARY_FILE': summary_file,
            'MAP_FILE': map_file,
            'CHECKPOINT_DIRECTORY': checkpoint_dir,
            'MANIFEST_FILE': manifest_file,
            'MODEL': model_kind,
            'SUCCESSFUL_FOLDS': successful,
            'FAILED_FOLDS': len(report.failed_folds()),
            'GLOBAL_KAPPA': global_kappa[0] if global_kappa is not None else None,
            'GLOBAL_KAPPA_STD': global_kappa[1] if global_kappa is not None else None,
            'EXIT_CODE': exit_code,
            'ERROR': error,
        }
