"""The nine handcrafted cell features.

Feature order (see `grid_core.FEATURE_NAMES`):

| Index | Name                | Source        | Definition                                                       |
|:-----:|---------------------|---------------|------------------------------------------------------------------|
| 0     | `veg_prop`          | image         | share of valid in-cell pixels with NDVI >= 0.6                   |
| 1     | `entropy`           | image         | mean over bands of the 256-bin Shannon entropy / log2(256)       |
| 2     | `slope`             | DEM           | mean Horn slope in degrees                                       |
| 3     | `profile_convexity` | DEM           | mean Zevenbergen-Thorne profile curvature                        |
| 4     | `street_nodes`      | street graph  | street nodes inside the cell                                     |
| 5     | `street_length`     | street graph  | length of all street polylines clipped to the cell               |
| 6-8   | `deg_mean/min/max`  | street graph  | incident segment counts of the in-cell nodes (full network)      |

Pixels belong to the cell that contains their center. Cells are half-open.
"""
import csv
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from magnum_opus.operarius import LoggerWrapper
from opus_vicinia.grid_core import CellRect, CellRecord, FeatureTable, GridSpec, FAVELA, NON_FAVELA, label_from_coverage
from opus_vicinia.rasters import DEFAULT_NODATA, MultibandRaster, Raster, RasterGeometryException, band_roles
from opus_vicinia.streets import StreetNetwork


NDVI_VEGETATION_THRESHOLD = 0.6
ENTROPY_BINS = 256


class FeatureUndefinedException(Exception):
    pass


class RasterExtentException(Exception):
    pass


class LabelFileException(Exception):
    pass


def ndvi(red: Raster, nir: Raster)->Raster:
    if red.same_geometry(nir) is False:
        raise RasterGeometryException('red ({}x{}) and nir ({}x{}) rasters do not share geometry'.format(red.height, red.width, nir.height, nir.width))
    valid = red.valid_mask() & nir.valid_mask()
    total = nir.values + red.values
    valid &= total != 0
    result = np.full(red.values.shape, DEFAULT_NODATA, dtype=np.float64)
    result[valid] = (nir.values[valid] - red.values[valid]) / total[valid]
    return Raster(values=result, pixel_size=red.pixel_size, origin_x=red.origin_x, origin_y=red.origin_y, nodata=DEFAULT_NODATA)


def _cell_values(cell: CellRect, raster: Raster)->np.ndarray:
    rows, cols = raster.pixel_window(cell)
    values = raster.values[rows, cols]
    return values[raster.valid_mask()[rows, cols]]


def _cell_mean(cell: CellRect, raster: Raster, feature: str)->float:
    values = _cell_values(cell=cell, raster=raster)
    if values.size == 0:
        raise FeatureUndefinedException('{}: no valid pixel inside cell {}'.format(feature, cell))
    return float(np.mean(values))


def vegetation_proportion(cell: CellRect, ndvi: Raster)->float:
    values = _cell_values(cell=cell, raster=ndvi)
    if values.size == 0:
        raise FeatureUndefinedException('veg_prop: no valid NDVI pixel inside cell {}'.format(cell))
    return float(np.count_nonzero(values >= NDVI_VEGETATION_THRESHOLD)) / float(values.size)


def band_value_ranges(image: MultibandRaster)->List[Tuple[float, float]]:
    ranges = list()
    for band in image.bands:
        values = band.values[band.valid_mask()]
        if values.size == 0:
            ranges.append((0.0, 0.0))
        else:
            ranges.append((float(values.min()), float(values.max())))
    return ranges


def cell_entropy(cell: CellRect, image: MultibandRaster, band_ranges: Optional[Sequence[Tuple[float, float]]]=None)->float:
    if band_ranges is None:
        band_ranges = band_value_ranges(image=image)
    entropies = list()
    for name, band, (low, high) in zip(image.names, image.bands, band_ranges):
        values = _cell_values(cell=cell, raster=band)
        if values.size == 0:
            raise FeatureUndefinedException('entropy: band "{}" has no valid pixel inside cell {}'.format(name, cell))
        if high <= low:
            entropies.append(0.0)
            continue
        counts, _ = np.histogram(values, bins=ENTROPY_BINS, range=(low, high))
        p = counts[counts > 0] / float(values.size)
        entropies.append(float(-np.sum(p * np.log2(p))) / math.log2(ENTROPY_BINS))
    return float(np.mean(entropies))


def _window_valid(dem: Raster)->np.ndarray:
    """Pixels whose full 3x3 window (edge-replicated) holds data."""
    valid = dem.valid_mask().astype(np.uint8)
    return ndimage.minimum_filter(valid, size=3, mode='nearest').astype(bool)


def _filled(dem: Raster)->np.ndarray:
    values = dem.values.astype(np.float64, copy=True)
    values[~dem.valid_mask()] = 0.0
    return values


def horn_gradients(dem: Raster)->Tuple[np.ndarray, np.ndarray]:
    """dz/dx (east) and dz/dy (north) with Horn's 8-neighbor weights and replicated borders."""
    values = _filled(dem=dem)
    dz_dx = ndimage.sobel(values, axis=1, mode='nearest') / (8.0 * dem.pixel_size)
    dz_dy = ndimage.sobel(values, axis=0, mode='nearest') / (8.0 * dem.pixel_size)
    return dz_dx, dz_dy


def slope_raster(dem: Raster)->Raster:
    dz_dx, dz_dy = horn_gradients(dem=dem)
    degrees = np.degrees(np.arctan(np.sqrt(dz_dx ** 2 + dz_dy ** 2)))
    degrees[~_window_valid(dem=dem)] = DEFAULT_NODATA
    return Raster(values=degrees, pixel_size=dem.pixel_size, origin_x=dem.origin_x, origin_y=dem.origin_y, nodata=DEFAULT_NODATA)


def profile_convexity_raster(dem: Raster)->Raster:
    p = dem.pixel_size
    z = np.pad(_filled(dem=dem), 1, mode='edge')
    center = z[1:-1, 1:-1]
    north = z[2:, 1:-1]
    south = z[:-2, 1:-1]
    east = z[1:-1, 2:]
    west = z[1:-1, :-2]
    north_east = z[2:, 2:]
    north_west = z[2:, :-2]
    south_east = z[:-2, 2:]
    south_west = z[:-2, :-2]
    d = (east - west) / (2.0 * p)
    e = (north - south) / (2.0 * p)
    r = (east - 2.0 * center + west) / (p * p)
    t = (north - 2.0 * center + south) / (p * p)
    s = (north_east - north_west - south_east + south_west) / (4.0 * p * p)
    gradient_sq = d * d + e * e
    curvature = np.zeros(center.shape, dtype=np.float64)
    sloped = gradient_sq > 0
    curvature[sloped] = (
        -2.0 * (r[sloped] * d[sloped] ** 2 + t[sloped] * e[sloped] ** 2 + 2.0 * s[sloped] * d[sloped] * e[sloped])
        / (gradient_sq[sloped] * (1.0 + gradient_sq[sloped]))
    )
    curvature[~_window_valid(dem=dem)] = DEFAULT_NODATA
    return Raster(values=curvature, pixel_size=p, origin_x=dem.origin_x, origin_y=dem.origin_y, nodata=DEFAULT_NODATA)


def slope(cell: CellRect, dem: Raster)->float:
    return _cell_mean(cell=cell, raster=slope_raster(dem=dem), feature='slope')


def profile_convexity(cell: CellRect, dem: Raster)->float:
    return _cell_mean(cell=cell, raster=profile_convexity_raster(dem=dem), feature='profile_convexity')


def clip_segment_length(p1: Tuple[float, float], p2: Tuple[float, float], cell_rect: CellRect)->float:
    """Length of segment p1-p2 inside the half-open rectangle (Liang-Barsky clipping)."""
    x0, y0 = p1
    x1, y1 = p2
    dx = x1 - x0
    dy = y1 - y0
    # p[i] * u <= q[i]; the max edges are exclusive
    p = (-dx, dx, -dy, dy)
    q = (x0 - cell_rect.xmin, cell_rect.xmax - x0, y0 - cell_rect.ymin, cell_rect.ymax - y0)
    exclusive = (False, True, False, True)
    u0, u1 = 0.0, 1.0
    for pi, qi, is_exclusive in zip(p, q, exclusive):
        if pi == 0:
            if qi < 0 or (is_exclusive and qi <= 0):
                return 0.0
            continue
        r = qi / pi
        if pi < 0:
            if r > u1:
                return 0.0
            if r > u0:
                u0 = r
        else:
            if r < u0:
                return 0.0
            if r < u1:
                u1 = r
    if u1 <= u0:
        return 0.0
    return (u1 - u0) * math.hypot(dx, dy)


def _degree_stats(degrees: List[int])->Tuple[float, float, float]:
    if len(degrees) == 0:
        return (0.0, 0.0, 0.0)
    return (float(sum(degrees)) / len(degrees), float(min(degrees)), float(max(degrees)))


def street_features(cell: CellRect, net: StreetNetwork, degrees: Optional[Dict[str, int]]=None)->Tuple[int, float, float, float, float]:
    if degrees is None:
        degrees = net.degrees()
    in_cell = [degrees[node.node_id] for node in net.nodes if cell.contains(node.x, node.y)]
    total_length = 0.0
    for segment in net.segments:
        for start, end in zip(segment.points[:-1], segment.points[1:]):
            total_length += clip_segment_length(p1=start, p2=end, cell_rect=cell)
    deg_mean, deg_min, deg_max = _degree_stats(degrees=in_cell)
    return (len(in_cell), total_length, deg_mean, deg_min, deg_max)


def _street_buckets(net: StreetNetwork, grid: GridSpec)->Tuple[Dict[Tuple[int, int], List[int]], Dict[Tuple[int, int], float]]:
    """Per-cell node degrees and clipped street lengths, accumulated in network order."""
    degrees = net.degrees()
    node_degrees: Dict[Tuple[int, int], List[int]] = dict()
    for node in net.nodes:
        cell = grid.locate(node.x, node.y)
        if cell is not None:
            node_degrees.setdefault(cell, list()).append(degrees[node.node_id])
    lengths: Dict[Tuple[int, int], float] = dict()
    s = grid.cell_size
    for segment in net.segments:
        for start, end in zip(segment.points[:-1], segment.points[1:]):
            col_low = max(math.floor((min(start[0], end[0]) - grid.origin_x) / s) - 1, 0)
            col_high = min(math.floor((max(start[0], end[0]) - grid.origin_x) / s) + 1, grid.n_cols - 1)
            row_low = max(math.floor((min(start[1], end[1]) - grid.origin_y) / s) - 1, 0)
            row_high = min(math.floor((max(start[1], end[1]) - grid.origin_y) / s) + 1, grid.n_rows - 1)
            for row in range(row_low, row_high + 1):
                for col in range(col_low, col_high + 1):
                    length = clip_segment_length(p1=start, p2=end, cell_rect=grid.cell_rect(row=row, col=col))
                    if length > 0.0:
                        lengths[(row, col)] = lengths.get((row, col), 0.0) + length
    return node_degrees, lengths


def _coverage_label(raw: str, path: str, line_number: int)->int:
    try:
        fraction = float(raw)
    except ValueError:
        raise LabelFileException('{}: line {}: coverage is not a number: "{}"'.format(path, line_number, raw.strip()))
    if not 0.0 <= fraction <= 1.0:
        raise LabelFileException('{}: line {}: coverage must lie in [0,1], got {}'.format(path, line_number, fraction))
    return label_from_coverage(fraction=fraction)


def read_labels(path: str)->Dict[Tuple[int, int], Tuple[Optional[int], Optional[int]]]:
    """Precomputed labels as `row,col,zone,label`; empty zone or label means unknown.

    A `row,col,zone,coverage` file gives the fraction of every cell covered by the
    reference favela polygons instead, turned into labels by `label_from_coverage`.
    """
    labels = dict()
    with open(path, 'r', newline='') as f:
        reader = csv.reader(f)
        header = next(reader, None)
        header = [column.strip() for column in header] if header is not None else None
        if header not in (['row', 'col', 'zone', 'label'], ['row', 'col', 'zone', 'coverage']):
            raise LabelFileException('{}: line 1: expected header "row,col,zone,label" or "row,col,zone,coverage"'.format(path))
        from_coverage = header[3] == 'coverage'
        for line_number, values in enumerate(reader, start=2):
            if len(values) == 0:
                continue
            if len(values) != 4:
                raise LabelFileException('{}: line {}: expected 4 columns, found {}'.format(path, line_number, len(values)))
            try:
                row = int(values[0])
                col = int(values[1])
                zone = None if values[2].strip() == '' else int(values[2])
                if from_coverage is True:
                    label = None if values[3].strip() == '' else _coverage_label(raw=values[3], path=path, line_number=line_number)
                else:
                    label = None if values[3].strip() == '' else int(values[3])
            except ValueError:
                raise LabelFileException('{}: line {}: non-integer value'.format(path, line_number))
            if label is not None and label not in (FAVELA, NON_FAVELA):
                raise LabelFileException('{}: line {}: label must be 0 or 1, got {}'.format(path, line_number, label))
            if (row, col) in labels:
                raise LabelFileException('{}: line {}: duplicate cell ({},{})'.format(path, line_number, row, col))
            labels[(row, col)] = (zone, label)
    return labels


def build_feature_table(
    image: MultibandRaster,
    dem: Raster,
    net: StreetNetwork,
    grid: GridSpec,
    mask: Optional[np.ndarray]=None,
    red_band: str='B4',
    nir_band: str='B8',
    labels: Optional[Dict[Tuple[int, int], Tuple[Optional[int], Optional[int]]]]=None,
    omitted_cells: Optional[list]=None,
    logger: LoggerWrapper=LoggerWrapper()
)->FeatureTable:
    """Compute the 9 features of every masked cell.

    Cells where a feature is undefined (no valid pixel) are left out, logged as a
    warning and appended to `omitted_cells` when a list is given.
    """
    extent = grid.extent()
    if image.bands[0].covers(extent) is False:
        raise RasterExtentException('image extent {} does not cover the grid extent {}'.format(image.bands[0].extent(), extent))
    if dem.covers(extent) is False:
        raise RasterExtentException('DEM extent {} does not cover the grid extent {}'.format(dem.extent(), extent))
    if mask is not None and mask.shape != (grid.n_rows, grid.n_cols):
        raise RasterExtentException('mask shape {} does not match the {}x{} grid'.format(mask.shape, grid.n_rows, grid.n_cols))
    roles = band_roles(image=image, roles={'red': red_band, 'nir': nir_band})
    ndvi_raster = ndvi(red=roles['red'], nir=roles['nir'])
    ranges = band_value_ranges(image=image)
    slopes = slope_raster(dem=dem)
    convexities = profile_convexity_raster(dem=dem)
    node_degrees, lengths = _street_buckets(net=net, grid=grid)
    logger.info('Extracting features for a {}x{} grid ({} bands, red={}, nir={})'.format(grid.n_rows, grid.n_cols, image.band_count, red_band, nir_band))

    records = list()
    for row in range(grid.n_rows):
        for col in range(grid.n_cols):
            if mask is not None and bool(mask[row, col]) is False:
                continue
            cell = grid.cell_rect(row=row, col=col)
            try:
                veg_prop = vegetation_proportion(cell=cell, ndvi=ndvi_raster)
                entropy = cell_entropy(cell=cell, image=image, band_ranges=ranges)
                cell_slope = _cell_mean(cell=cell, raster=slopes, feature='slope')
                convexity = _cell_mean(cell=cell, raster=convexities, feature='profile_convexity')
            except FeatureUndefinedException as e:
                logger.warning('Cell ({},{}) omitted: {}'.format(row, col, e))
                if omitted_cells is not None:
                    omitted_cells.append((row, col))
                continue
            degrees = node_degrees.get((row, col), list())
            deg_mean, deg_min, deg_max = _degree_stats(degrees=degrees)
            zone, label = (None, None)
            if labels is not None:
                zone, label = labels.get((row, col), (None, None))
            records.append(
                CellRecord(
                    row=row,
                    col=col,
                    features=(
                        veg_prop,
                        entropy,
                        cell_slope,
                        convexity,
                        float(len(degrees)),
                        lengths.get((row, col), 0.0),
                        deg_mean,
                        deg_min,
                        deg_max,
                    ),
                    label=label,
                    zone=zone,
                )
            )
    logger.info('Extracted {} cells'.format(len(records)))
    return FeatureTable.from_records(grid=grid, records=records)
