from magnum_opus.operarius import LoggerWrapper, Task

from opus_vicinia.experiment import compare_reports
from opus_vicinia.manifest import RunManifest, write_manifest
from opus_vicinia.reporting import comparison_markdown, comparison_summary, load_report_summary, report_from_summary, write_json
from opus_vicinia.task_processors.base import PipelineTaskProcessor, SpecFieldException


class ModelComparison(PipelineTaskProcessor):

    def __init__(self, kind: str='ModelComparison', kind_versions: list=['v1',], supported_commands: list=list(), logger: LoggerWrapper=LoggerWrapper()):
        super().__init__(kind, kind_versions, supported_commands, logger)

    def run(self, task: Task, command: str, context: str, log_header: str)->dict:
        """Tabulate kappa (%) per zone and globally for several cross-validation summaries.

        # Spec fields

        | Field                   | Type      | Required | In Versions | Description                                                                  |
        |-------------------------|:---------:|:--------:|:-----------:|------------------------------------------------------------------------------|
        | `summaries`             | list[str] | Yes      | v1          | JSON summaries written by `SpatialCrossValidation`, one per model            |
        | `outputFile`            | str       | Yes      | v1          | Markdown table to write                                                      |
        | `jsonFile`              | str       | No       | v1          | Machine readable comparison (default `<outputFile>.json`)                    |
        | `writeManifest`         | bool      | No       | v1          | Write `<outputFile>.manifest.json` (default `True`)                          |
        | `raiseExceptionOnError` | bool      | No       | v1          | Default value is `False`. If set to `True`, any failure raises an exception  |

        Returns:
            Results stored in the `KeyValueStore`:

            * `OUTPUT_FILE` - The markdown table
            * `JSON_FILE` - The JSON comparison
            * `MANIFEST_FILE` - The run manifest path (or `None`)
            * `ORDERING` - Models ordered by global kappa, best first
        """
        summaries = self.spec_value('summaries', required=True)
        if isinstance(summaries, str):
            summaries = [summaries]
        if isinstance(summaries, (list, tuple)) is False or len(summaries) == 0:
            raise SpecFieldException('spec field "summaries" must be a non-empty list of files')
        output_file = self.spec_value('outputFile', required=True)
        json_file = self.spec_value('jsonFile', default='{}.json'.format(output_file))

        reports = [report_from_summary(summary=load_report_summary(path=path), path=path) for path in summaries]
        comparison = compare_reports(reports=reports)
        with open(output_file, 'w', encoding='utf-8') as f:
            f.write(comparison_markdown(comparison=comparison))
        write_json(path=json_file, data=comparison_summary(comparison=comparison))
        self.log(message='Model ordering by global kappa: {}'.format(' > '.join(comparison.ordering)), build_log_message_header=False, level='info', header=log_header)

        manifest_file = None
        if self.spec_bool('writeManifest', default=True) is True:
            manifest = RunManifest(command='compare', config={'metric': 'kappa', 'summaries': list(summaries)})
            for path in summaries:
                manifest.add_input(path=path)
            manifest.add_output(path=json_file)
            manifest_file = write_manifest(manifest=manifest, primary_output=output_file, logger=self.logger)

        return {
            'OUTPUT_FILE': output_file,
            'JSON_FILE': json_file,
            'MANIFEST_FILE': manifest_file,
            'ORDERING': list(comparison.ordering),
        }
