import numpy as np

from magnum_opus.operarius import LoggerWrapper, Task

from opus_vicinia.feature_extraction import build_feature_table, read_labels
from opus_vicinia.grid_core import GridSpec, class_counts, grid_sidecar_path, save_feature_table
from opus_vicinia.manifest import RunManifest, write_manifest
from opus_vicinia.rasters import RasterGeometryException, band_manifest_entries, read_band_manifest, read_esri_ascii
from opus_vicinia.streets import load_street_network
from opus_vicinia.task_processors.base import PipelineTaskProcessor


class FeatureExtraction(PipelineTaskProcessor):
    """Turns a multiband image, a DEM and a street network into the canonical feature table CSV.

    Attributes:
        logger: An implementation of the `LoggerWrapper` class
        kind: The kind. Any `Task` with the same kind (and matching version) may be processed with this task processor.
        versions: A list of supported versions that this task processor can process
        supported_commands: A list of supported commands that this task processor can process on matching tasks.
    """

    def __init__(self, kind: str='FeatureExtraction', kind_versions: list=['v1',], supported_commands: list=list(), logger: LoggerWrapper=LoggerWrapper()):
        super().__init__(kind, kind_versions, supported_commands, logger)

    def _load_mask(self, path: str, grid: GridSpec)->np.ndarray:
        raster = read_esri_ascii(path=path, logger=self.logger)
        if raster.values.shape != (grid.n_rows, grid.n_cols):
            raise RasterGeometryException('mask "{}" has shape {}, the grid is {}x{}'.format(path, raster.values.shape, grid.n_rows, grid.n_cols))
        return raster.valid_mask() & (raster.values != 0)

    def run(self, task: Task, command: str, context: str, log_header: str)->dict:
        """Extract the 9 features of every cell of the grid.

        # Spec fields

        | Field                   | Type  | Required | In Versions | Description                                                                                 |
        |-------------------------|:-----:|:--------:|:-----------:|---------------------------------------------------------------------------------------------|
        | `imageManifest`         | str   | Yes      | v1          | Band manifest file, one `name = path.asc` per band                                          |
        | `dem`                   | str   | Yes      | v1          | ESRI ASCII elevation grid in metres                                                         |
        | `streetNodes`           | str   | Yes      | v1          | Street node CSV (`id,x,y`)                                                                  |
        | `streetSegments`        | str   | Yes      | v1          | Street segment CSV (`node_a,node_b,wkt_linestring`)                                         |
        | `gridRows`              | int   | Yes      | v1          | Number of grid rows                                                                         |
        | `gridCols`              | int   | Yes      | v1          | Number of grid columns                                                                      |
        | `originX`               | float | No       | v1          | Western edge of the grid (default 0)                                                        |
        | `originY`               | float | No       | v1          | Southern edge of the grid (default 0)                                                       |
        | `cellSize`              | float | No       | v1          | Cell edge length in metres (default 150)                                                    |
        | `redBand`               | str   | No       | v1          | Band name of the red band (default `B4`)                                                    |
        | `nirBand`               | str   | No       | v1          | Band name of the near infrared band (default `B8`)                                          |
        | `labels`                | str   | No       | v1          | `row,col,zone,label` or `row,col,zone,coverage` CSV with labels (or coverage) and zones     |
        | `mask`                  | str   | No       | v1          | ESRI ASCII grid with one pixel per cell, non-zero marks cells to extract                    |
        | `outputFile`            | str   | Yes      | v1          | Feature table CSV to write                                                                  |
        | `writeManifest`         | bool  | No       | v1          | Write `<outputFile>.manifest.json` (default `True`)                                         |
        | `raiseExceptionOnError` | bool  | No       | v1          | Default value is `False`. If set to `True`, any failure raises instead of storing EXIT_CODE |

        Returns:
            Results stored in the `KeyValueStore`:

            * `OUTPUT_FILE` - The feature table path
            * `MANIFEST_FILE` - The run manifest path (or `None`)
            * `CELL_COUNT` - Number of cells written
            * `OMITTED_CELL_COUNT` - Cells dropped because a feature is undefined
            * `FAVELA_CELLS` / `NON_FAVELA_CELLS` - Labeled cell counts
        """
        grid = GridSpec(
            n_rows=self.spec_int('gridRows', required=True),
            n_cols=self.spec_int('gridCols', required=True),
            origin_x=self.spec_float('originX', default=0.0),
            origin_y=self.spec_float('originY', default=0.0),
            cell_size=self.spec_float('cellSize', default=150.0),
        )
        image_manifest = self.spec_value('imageManifest', required=True)
        dem_path = self.spec_value('dem', required=True)
        nodes_path = self.spec_value('streetNodes', required=True)
        segments_path = self.spec_value('streetSegments', required=True)
        labels_path = self.spec_value('labels')
        mask_path = self.spec_value('mask')
        output_file = self.spec_value('outputFile', required=True)

        image = read_band_manifest(path=image_manifest, logger=self.logger)
        dem = read_esri_ascii(path=dem_path, logger=self.logger)
        net = load_street_network(nodes_path=nodes_path, segments_path=segments_path, logger=self.logger)
        labels = None
        if labels_path is not None:
            labels = read_labels(path=labels_path)
        mask = None
        if mask_path is not None:
            mask = self._load_mask(path=mask_path, grid=grid)

        omitted = list()
        table = build_feature_table(
            image=image,
            dem=dem,
            net=net,
            grid=grid,
            mask=mask,
            red_band=self.spec_value('redBand', default='B4'),
            nir_band=self.spec_value('nirBand', default='B8'),
            labels=labels,
            omitted_cells=omitted,
            logger=self.logger,
        )
        save_feature_table(table=table, path=output_file)
        n_favela, n_nonfavela, _ = class_counts(table=table)
        self.log(message='Wrote {} cells to {} ({} omitted)'.format(len(table), output_file, len(omitted)), build_log_message_header=False, level='info', header=log_header)

        manifest_file = None
        if self.spec_bool('writeManifest', default=True) is True:
            manifest = RunManifest(
                command='features',
                config={
                    'grid': {'n_rows': grid.n_rows, 'n_cols': grid.n_cols, 'origin_x': grid.origin_x, 'origin_y': grid.origin_y, 'cell_size': grid.cell_size},
                    'red_band': self.spec_value('redBand', default='B4'),
                    'nir_band': self.spec_value('nirBand', default='B8'),
                },
            )
            manifest.add_input(path=image_manifest)
            for _, band_path in band_manifest_entries(path=image_manifest):
                manifest.add_input(path=band_path)
            for path in (dem_path, nodes_path, segments_path, labels_path, mask_path):
                if path is not None:
                    manifest.add_input(path=path)
            manifest.add_output(path=grid_sidecar_path(path=output_file))
            manifest_file = write_manifest(manifest=manifest, primary_output=output_file, logger=self.logger)

        return {
            'OUTPUT_FILE': output_file,
            'MANIFEST_FILE': manifest_file,
            'CELL_COUNT': len(table),
            'OMITTED_CELL_COUNT': len(omitted),
            'FAVELA_CELLS': n_favela,
            'NON_FAVELA_CELLS': n_nonfavela,
        }
