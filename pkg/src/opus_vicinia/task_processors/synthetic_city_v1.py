from magnum_opus.operarius import LoggerWrapper, Task

from opus_vicinia.grid_core import grid_sidecar_path, save_feature_table
from opus_vicinia.manifest import RunManifest, manifest_path, write_manifest
from opus_vicinia.reporting import synth_sidecar, write_json
from opus_vicinia.synthetic import DEFAULT_ORACLE_SAMPLES, SynthConfig, city_summary, generate_city, oracle_metrics
from opus_vicinia.task_processors.base import PipelineTaskProcessor


SIDECAR_SUFFIX = '.synth.json'


class SyntheticCity(PipelineTaskProcessor):

    def __init__(self, kind: str='SyntheticCity', kind_versions: list=['v1',], supported_commands: list=list(), logger: LoggerWrapper=LoggerWrapper()):
        super().__init__(kind, kind_versions, supported_commands, logger)

    def build_config(self)->SynthConfig:
        defaults = SynthConfig.__dataclass_fields__
        return SynthConfig(
            n_rows=self.spec_int('nRows', default=defaults['n_rows'].default),
            n_cols=self.spec_int('nCols', default=defaults['n_cols'].default),
            n_zones=self.spec_int('nZones', default=defaults['n_zones'].default),
            imbalance_target=self.spec_float('imbalanceTarget', default=defaults['imbalance_target'].default),
            context_strength=self.spec_float('contextStrength', default=defaults['context_strength'].default),
            noise=self.spec_float('noise', default=defaults['noise'].default),
            correlation_length=self.spec_float('correlationLength', default=defaults['correlation_length'].default),
            zone_shift=self.spec_float('zoneShift', default=defaults['zone_shift'].default),
            cell_size=self.spec_float('cellSize', default=defaults['cell_size'].default),
            seed=self.spec_int('seed', default=defaults['seed'].default),
        )

    def run(self, task: Task, command: str, context: str, log_header: str)->dict:
        """Generate a seeded synthetic city and write its feature table and JSON sidecar.

        # Spec fields

        | Field                   | Type  | Required | In Versions | Description                                                                  |
        |-------------------------|:-----:|:--------:|:-----------:|------------------------------------------------------------------------------|
        | `outputFile`            | str   | Yes      | v1          | Feature table CSV to write                                                   |
        | `nRows` / `nCols`       | int   | No       | v1          | Grid size (default 200 x 200)                                                |
        | `nZones`                | int   | No       | v1          | Number of vertical zone bands (default 5)                                    |
        | `imbalanceTarget`       | float | No       | v1          | Non-favela cells per favela cell (default 30)                                |
        | `contextStrength`       | float | No       | v1          | Weight of the neighborhood mean signal, in [0,1] (default 0.6)               |
        | `noise`                 | float | No       | v1          | Standard deviation of the feature noise, > 0 (default 1.5)                   |
        | `correlationLength`     | float | No       | v1          | Correlation length of the latent field in cells (default 10)                 |
        | `zoneShift`             | float | No       | v1          | Scale of the per-zone prototype offsets (default 0.3)                        |
        | `cellSize`              | float | No       | v1          | Cell edge length in metres (default 150)                                     |
        | `seed`                  | int   | No       | v1          | Generator seed (default 1)                                                   |
        | `oracle`                | bool  | No       | v1          | Estimate the Bayes oracle kappa for the sidecar (default `True`)             |
        | `oracleSamples`         | int   | No       | v1          | Number of scored cells for the oracle estimate (default 100000)              |
        | `sidecarFile`           | str   | No       | v1          | Sidecar path (default `<outputFile>.synth.json`)                             |
        | `writeManifest`         | bool  | No       | v1          | Write `<outputFile>.manifest.json` (default `True`)                          |
        | `raiseExceptionOnError` | bool  | No       | v1          | Default value is `False`. If set to `True`, any failure raises an exception  |

        Returns:
            Results stored in the `KeyValueStore`:

            * `OUTPUT_FILE` - The feature table path
            * `SIDECAR_FILE` - The JSON sidecar path
            * `MANIFEST_FILE` - The run manifest path (or `None`)
            * `FAVELA_CELLS` / `NON_FAVELA_CELLS` - Labeled cell counts
            * `ACHIEVED_RATIO` - Non-favela cells per favela cell
            * `ORACLE_KAPPA` - Estimated Bayes oracle kappa (or `None`)
        """
        config = self.build_config()
        output_file = self.spec_value('outputFile', required=True)
        sidecar_file = self.spec_value('sidecarFile', default='{}{}'.format(output_file, SIDECAR_SUFFIX))
        write_manifest_file = self.spec_bool('writeManifest', default=True)

        table = generate_city(config=config, logger=self.logger)
        save_feature_table(table=table, path=output_file)
        summary = city_summary(config=config, table=table)

        oracle = None
        if self.spec_bool('oracle', default=True) is True:
            oracle = oracle_metrics(config=config, n_samples=self.spec_int('oracleSamples', default=DEFAULT_ORACLE_SAMPLES), logger=self.logger)

        manifest_name = manifest_path(primary_output=output_file) if write_manifest_file is True else None
        write_json(path=sidecar_file, data=synth_sidecar(config=config, table=table, summary=summary, oracle=oracle, manifest_name=manifest_name))
        self.log(message='Wrote synthetic city {} and sidecar {}'.format(output_file, sidecar_file), build_log_message_header=False, level='info', header=log_header)

        manifest_file = None
        if write_manifest_file is True:
            manifest = RunManifest(command='synth', config=config.to_dict(), seeds={'seed': config.seed})
            manifest.add_output(path=sidecar_file)
            manifest.add_output(path=grid_sidecar_path(path=output_file))
            manifest_file = write_manifest(manifest=manifest, primary_output=output_file, logger=self.logger)

        return {
            'OUTPUT_FILE': output_file,
            'SIDECAR_FILE': sidecar_file,
            'MANIFEST_FILE': manifest_file,
            'FAVELA_CELLS': summary['n_favela'],
            'NON_FAVELA_CELLS': summary['n_nonfavela'],
            'ACHIEVED_RATIO': summary['achieved_ratio'],
            'ORACLE_KAPPA': oracle.metrics.kappa if oracle is not None else None,
        }
