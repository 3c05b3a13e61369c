import csv
import json
import math
import os
from dataclasses import asdict, dataclass
from functools import cached_property
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from magnum_opus.operarius import LoggerWrapper


FEATURE_NAMES = (
    'veg_prop',
    'entropy',
    'slope',
    'profile_convexity',
    'street_nodes',
    'street_length',
    'deg_mean',
    'deg_min',
    'deg_max',
)
N_FEATURES = len(FEATURE_NAMES)
CSV_HEADER = ('row', 'col', 'zone', 'label',) + FEATURE_NAMES
GRID_SIDECAR_SUFFIX = '.grid.json'

# Row-major window order, center excluded. Row 0 is the southernmost grid row.
KING_OFFSETS = (
    (-1, -1), (-1, 0), (-1, 1),
    (0, -1),           (0, 1),
    (1, -1),  (1, 0),  (1, 1),
)

FAVELA = 1
NON_FAVELA = 0


class InvalidGridException(Exception):
    pass


class GridBoundsException(Exception):
    pass


class CellRecordException(Exception):
    pass


class FeatureTableParseException(Exception):
    pass


@dataclass(frozen=True)
class CellRect:
    """Half-open cell extent: [xmin, xmax) x [ymin, ymax)."""
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def contains(self, x: float, y: float)->bool:
        return self.xmin <= x < self.xmax and self.ymin <= y < self.ymax

    @property
    def width(self)->float:
        return self.xmax - self.xmin

    @property
    def height(self)->float:
        return self.ymax - self.ymin


@dataclass(frozen=True)
class GridSpec:
    n_rows: int
    n_cols: int
    origin_x: float = 0.0
    origin_y: float = 0.0
    cell_size: float = 150.0

    def __post_init__(self):
        if not self.cell_size > 0:
            raise InvalidGridException('cell_size must be positive, got {}'.format(self.cell_size))
        if int(self.n_rows) < 1 or int(self.n_cols) < 1:
            raise InvalidGridException('grid needs at least one row and one column, got {}x{}'.format(self.n_rows, self.n_cols))

    def in_bounds(self, row: int, col: int)->bool:
        return 0 <= row < self.n_rows and 0 <= col < self.n_cols

    def check_bounds(self, row: int, col: int):
        if self.in_bounds(row=row, col=col) is False:
            raise GridBoundsException('cell ({},{}) is outside the {}x{} grid'.format(row, col, self.n_rows, self.n_cols))

    def cell_rect(self, row: int, col: int)->CellRect:
        self.check_bounds(row=row, col=col)
        s = self.cell_size
        return CellRect(
            xmin=self.origin_x + col * s,
            ymin=self.origin_y + row * s,
            xmax=self.origin_x + (col + 1) * s,
            ymax=self.origin_y + (row + 1) * s,
        )

    def extent(self)->CellRect:
        return CellRect(
            xmin=self.origin_x,
            ymin=self.origin_y,
            xmax=self.origin_x + self.n_cols * self.cell_size,
            ymax=self.origin_y + self.n_rows * self.cell_size,
        )

    def locate(self, x: float, y: float)->Optional[Tuple[int, int]]:
        col = math.floor((x - self.origin_x) / self.cell_size)
        row = math.floor((y - self.origin_y) / self.cell_size)
        if self.in_bounds(row=row, col=col) is False:
            return None
        # floor() on the quotient can land one cell off at an exact boundary
        rect = self.cell_rect(row=row, col=col)
        if x >= rect.xmax:
            col += 1
        elif x < rect.xmin:
            col -= 1
        if y >= rect.ymax:
            row += 1
        elif y < rect.ymin:
            row -= 1
        if self.in_bounds(row=row, col=col) is False:
            return None
        return (row, col)


def neighbors_king(row: int, col: int, grid: GridSpec)->List[Tuple[int, int]]:
    grid.check_bounds(row=row, col=col)
    neighbors = list()
    for d_row, d_col in KING_OFFSETS:
        if grid.in_bounds(row=row + d_row, col=col + d_col):
            neighbors.append((row + d_row, col + d_col))
    return neighbors


@dataclass(frozen=True)
class CellRecord:
    row: int
    col: int
    features: Tuple[float, ...]
    label: Optional[int] = None
    zone: Optional[int] = None

    def __post_init__(self):
        if len(self.features) != N_FEATURES:
            raise CellRecordException('cell ({},{}) has {} features, expected {}'.format(self.row, self.col, len(self.features), N_FEATURES))
        for name, value in zip(FEATURE_NAMES, self.features):
            if not math.isfinite(value):
                raise CellRecordException('cell ({},{}) feature "{}" is not finite: {}'.format(self.row, self.col, name, value))
        if self.label is not None and self.label not in (FAVELA, NON_FAVELA):
            raise CellRecordException('cell ({},{}) label must be 0 or 1, got {}'.format(self.row, self.col, self.label))


@dataclass(frozen=True)
class FeatureTable:
    """Cells of a grid with their 9 features, optional label and optional zone.

    Absent cells (outside the urban mask) simply have no record. The table is
    treated as immutable once built.
    """
    grid: GridSpec
    records: Dict[Tuple[int, int], CellRecord]

    @classmethod
    def from_records(cls, grid: GridSpec, records: Iterable[CellRecord])->'FeatureTable':
        indexed = dict()
        for record in records:
            grid.check_bounds(row=record.row, col=record.col)
            key = (record.row, record.col)
            if key in indexed:
                raise CellRecordException('duplicate cell ({},{})'.format(record.row, record.col))
            indexed[key] = record
        return cls(grid=grid, records=indexed)

    def __len__(self)->int:
        return len(self.records)

    def __contains__(self, cell: Tuple[int, int])->bool:
        return cell in self.records

    def get(self, row: int, col: int)->Optional[CellRecord]:
        return self.records.get((row, col))

    def cells(self)->List[Tuple[int, int]]:
        return sorted(self.records.keys())

    def zones(self)->List[int]:
        return sorted({record.zone for record in self.records.values() if record.zone is not None})

    def labeled_cells(self, zone: Optional[int]=None)->List[Tuple[int, int]]:
        selected = list()
        for cell in self.cells():
            record = self.records[cell]
            if record.label is None:
                continue
            if zone is not None and record.zone != zone:
                continue
            selected.append(cell)
        return selected

    @cached_property
    def dense_features(self)->np.ndarray:
        dense = np.zeros((self.grid.n_rows, self.grid.n_cols, N_FEATURES), dtype=np.float64)
        for (row, col), record in self.records.items():
            dense[row, col, :] = record.features
        return dense

    @cached_property
    def presence(self)->np.ndarray:
        present = np.zeros((self.grid.n_rows, self.grid.n_cols), dtype=bool)
        for (row, col) in self.records.keys():
            present[row, col] = True
        return present


def class_counts(table: FeatureTable)->Tuple[int, int, int]:
    n_favela = 0
    n_nonfavela = 0
    n_unlabeled = 0
    for record in table.records.values():
        if record.label is None:
            n_unlabeled += 1
        elif record.label == FAVELA:
            n_favela += 1
        else:
            n_nonfavela += 1
    return (n_favela, n_nonfavela, n_unlabeled)


def label_from_coverage(fraction: float, threshold: float=0.9)->int:
    """A cell is favela when more than `threshold` of its area lies inside a reference polygon."""
    if fraction > threshold:
        return FAVELA
    return NON_FAVELA


def _format_value(value: float)->str:
    return '{:.9g}'.format(value)


def _parse_optional_int(raw: str, column: str, line_number: int)->Optional[int]:
    raw = raw.strip()
    if raw == '':
        return None
    try:
        return int(raw)
    except ValueError:
        raise FeatureTableParseException('line {}: column "{}" is not an integer: "{}"'.format(line_number, column, raw))


def grid_sidecar_path(path: str)->str:
    return '{}{}'.format(path, GRID_SIDECAR_SUFFIX)


def write_grid_sidecar(grid: GridSpec, path: str):
    with open(grid_sidecar_path(path=path), 'w', encoding='utf-8') as f:
        json.dump(asdict(grid), f, indent=2, sort_keys=True)
        f.write('\n')


def read_grid_sidecar(path: str)->Optional[GridSpec]:
    sidecar = grid_sidecar_path(path=path)
    if os.path.isfile(sidecar) is False:
        return None
    try:
        with open(sidecar, 'r', encoding='utf-8') as f:
            return GridSpec(**json.load(f))
    except (json.JSONDecodeError, TypeError) as e:
        raise FeatureTableParseException('"{}": not a grid description ({})'.format(sidecar, e))


def save_feature_table(table: FeatureTable, path: str):
    """Write the CSV and the `<path>.grid.json` sidecar holding the grid geometry."""
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(CSV_HEADER)
        for cell in table.cells():
            record = table.records[cell]
            writer.writerow(
                [
                    record.row,
                    record.col,
                    '' if record.zone is None else record.zone,
                    '' if record.label is None else record.label,
                ] + [_format_value(value) for value in record.features]
            )
    write_grid_sidecar(grid=table.grid, path=path)


def load_feature_table(path: str, grid: Optional[GridSpec]=None, logger: LoggerWrapper=LoggerWrapper())->FeatureTable:
    """Read the canonical feature table CSV.

    The CSV carries cell indices only. When `grid` is not given it is read from the
    `.grid.json` sidecar; without a sidecar a grid with origin (0,0) and 150 m cells
    just large enough for the indices is assumed, so trailing empty rows or columns
    of the original grid are lost.
    """
    records = list()
    seen = dict()
    with open(path, 'r', newline='') as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise FeatureTableParseException('line 1: missing header in "{}"'.format(path))
        header = tuple(column.strip() for column in header)
        if header != CSV_HEADER:
            raise FeatureTableParseException('line 1: unexpected header {}, expected {}'.format(','.join(header), ','.join(CSV_HEADER)))
        for line_number, row_values in enumerate(reader, start=2):
            if len(row_values) == 0:
                continue
            if len(row_values) != len(CSV_HEADER):
                raise FeatureTableParseException('line {}: expected {} columns, found {}'.format(line_number, len(CSV_HEADER), len(row_values)))
            row = _parse_optional_int(raw=row_values[0], column='row', line_number=line_number)
            col = _parse_optional_int(raw=row_values[1], column='col', line_number=line_number)
            if row is None or col is None or row < 0 or col < 0:
                raise FeatureTableParseException('line {}: row and col must be non-negative integers'.format(line_number))
            zone = _parse_optional_int(raw=row_values[2], column='zone', line_number=line_number)
            label = _parse_optional_int(raw=row_values[3], column='label', line_number=line_number)
            if label is not None and label not in (FAVELA, NON_FAVELA):
                raise FeatureTableParseException('line {}: column "label" must be 0, 1 or empty, got {}'.format(line_number, label))
            features = list()
            for name, raw in zip(FEATURE_NAMES, row_values[4:]):
                try:
                    value = float(raw)
                except ValueError:
                    raise FeatureTableParseException('line {}: column "{}" is not a number: "{}"'.format(line_number, name, raw))
                if not math.isfinite(value):
                    raise FeatureTableParseException('line {}: column "{}" is not finite: "{}"'.format(line_number, name, raw))
                features.append(value)
            if (row, col) in seen:
                raise FeatureTableParseException('line {}: duplicate cell ({},{}) already defined on line {}'.format(line_number, row, col, seen[(row, col)]))
            seen[(row, col)] = line_number
            records.append(CellRecord(row=row, col=col, features=tuple(features), label=label, zone=zone))
    if grid is None:
        grid = read_grid_sidecar(path=path)
    if grid is None:
        n_rows = max([record.row for record in records], default=0) + 1
        n_cols = max([record.col for record in records], default=0) + 1
        grid = GridSpec(n_rows=n_rows, n_cols=n_cols)
    for record in records:
        if grid.in_bounds(row=record.row, col=record.col) is False:
            raise FeatureTableParseException('line {}: cell ({},{}) is outside the {}x{} grid'.format(seen[(record.row, record.col)], record.row, record.col, grid.n_rows, grid.n_cols))
    logger.debug('Loaded {} cells from "{}"'.format(len(records), path))
    return FeatureTable.from_records(grid=grid, records=records)
