import math
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from magnum_opus.operarius import LoggerWrapper
from opus_vicinia.grid_core import CellRect


DEFAULT_NODATA = -9999.0


class RasterFormatException(Exception):
    pass


class RasterGeometryException(Exception):
    pass


class BandManifestException(Exception):
    pass


@dataclass(frozen=True, eq=False)
class Raster:
    """A single-band grid of pixels.

    `values[i, j]` is the pixel whose center sits at
    (origin_x + (j + 0.5) * pixel_size, origin_y + (i + 0.5) * pixel_size), so row 0 is
    the southernmost row.
    """
    values: np.ndarray
    pixel_size: float
    origin_x: float = 0.0
    origin_y: float = 0.0
    nodata: Optional[float] = DEFAULT_NODATA

    def __post_init__(self):
        if not self.pixel_size > 0:
            raise RasterGeometryException('pixel_size must be positive, got {}'.format(self.pixel_size))
        if self.values.ndim != 2:
            raise RasterGeometryException('raster values must be 2-dimensional, got shape {}'.format(self.values.shape))

    @property
    def height(self)->int:
        return int(self.values.shape[0])

    @property
    def width(self)->int:
        return int(self.values.shape[1])

    def valid_mask(self)->np.ndarray:
        valid = np.isfinite(self.values)
        if self.nodata is not None:
            valid &= self.values != self.nodata
        return valid

    def same_geometry(self, other: 'Raster')->bool:
        return (
            self.values.shape == other.values.shape
            and math.isclose(self.pixel_size, other.pixel_size, rel_tol=1e-12)
            and math.isclose(self.origin_x, other.origin_x, rel_tol=0.0, abs_tol=1e-9)
            and math.isclose(self.origin_y, other.origin_y, rel_tol=0.0, abs_tol=1e-9)
        )

    def extent(self)->CellRect:
        return CellRect(
            xmin=self.origin_x,
            ymin=self.origin_y,
            xmax=self.origin_x + self.width * self.pixel_size,
            ymax=self.origin_y + self.height * self.pixel_size,
        )

    def covers(self, rect: CellRect, tolerance: float=1e-9)->bool:
        extent = self.extent()
        return (
            extent.xmin <= rect.xmin + tolerance
            and extent.ymin <= rect.ymin + tolerance
            and extent.xmax >= rect.xmax - tolerance
            and extent.ymax >= rect.ymax - tolerance
        )

    def pixel_window(self, rect: CellRect)->Tuple[slice, slice]:
        """Rows and columns of the pixels whose centers fall inside the half-open `rect`."""
        p = self.pixel_size
        col_start = math.ceil((rect.xmin - self.origin_x) / p - 0.5)
        col_end = math.ceil((rect.xmax - self.origin_x) / p - 0.5)
        row_start = math.ceil((rect.ymin - self.origin_y) / p - 0.5)
        row_end = math.ceil((rect.ymax - self.origin_y) / p - 0.5)
        col_start = min(max(col_start, 0), self.width)
        col_end = min(max(col_end, 0), self.width)
        row_start = min(max(row_start, 0), self.height)
        row_end = min(max(row_end, 0), self.height)
        return (slice(row_start, row_end), slice(col_start, col_end))


@dataclass(frozen=True, eq=False)
class MultibandRaster:
    bands: Tuple[Raster, ...]
    names: Tuple[str, ...]

    def __post_init__(self):
        if len(self.bands) == 0:
            raise RasterGeometryException('a multiband raster needs at least one band')
        if len(self.bands) != len(self.names):
            raise RasterGeometryException('{} bands but {} band names'.format(len(self.bands), len(self.names)))
        if len(set(self.names)) != len(self.names):
            raise RasterGeometryException('band names must be unique: {}'.format(list(self.names)))
        for name, band in zip(self.names, self.bands):
            if band.same_geometry(self.bands[0]) is False:
                raise RasterGeometryException('band "{}" does not share the geometry of band "{}"'.format(name, self.names[0]))

    @property
    def band_count(self)->int:
        return len(self.bands)

    def band(self, name: str)->Raster:
        if name not in self.names:
            raise BandManifestException('band "{}" is not part of the image (available: {})'.format(name, ', '.join(self.names)))
        return self.bands[self.names.index(name)]


def read_esri_ascii(path: str, logger: LoggerWrapper=LoggerWrapper())->Raster:
    header = dict()
    with open(path, 'r') as f:
        lines = f.readlines()
    line_index = 0
    while line_index < len(lines):
        parts = lines[line_index].split()
        if len(parts) == 0:
            line_index += 1
            continue
        try:
            float(parts[0])
            break
        except ValueError:
            pass
        if len(parts) != 2:
            raise RasterFormatException('{}: line {}: malformed header entry "{}"'.format(path, line_index + 1, lines[line_index].strip()))
        try:
            header[parts[0].lower()] = float(parts[1])
        except ValueError:
            raise RasterFormatException('{}: line {}: header value for "{}" is not a number'.format(path, line_index + 1, parts[0]))
        line_index += 1
    for required in ('ncols', 'nrows', 'cellsize'):
        if required not in header:
            raise RasterFormatException('{}: missing "{}" header entry'.format(path, required))
    n_cols = int(header['ncols'])
    n_rows = int(header['nrows'])
    cell_size = header['cellsize']
    if 'xllcorner' in header:
        origin_x = header['xllcorner']
    elif 'xllcenter' in header:
        origin_x = header['xllcenter'] - cell_size / 2.0
    else:
        raise RasterFormatException('{}: missing "xllcorner" header entry'.format(path))
    if 'yllcorner' in header:
        origin_y = header['yllcorner']
    elif 'yllcenter' in header:
        origin_y = header['yllcenter'] - cell_size / 2.0
    else:
        raise RasterFormatException('{}: missing "yllcorner" header entry'.format(path))
    nodata = header.get('nodata_value', None)
    # rows may wrap over several lines, so the data block is read as one flat sequence
    try:
        values = np.array(''.join(lines[line_index:]).split(), dtype=np.float64)
    except ValueError as e:
        raise RasterFormatException('{}: non-numeric pixel value ({})'.format(path, e))
    if values.size != n_rows * n_cols:
        raise RasterFormatException('{}: expected {}x{}={} values, found {}'.format(path, n_rows, n_cols, n_rows * n_cols, values.size))
    values = values.reshape((n_rows, n_cols))
    logger.debug('Read {}x{} raster from "{}" (pixel size {})'.format(n_rows, n_cols, path, cell_size))
    # ESRI ASCII lists the northernmost row first
    return Raster(values=np.flipud(values).copy(), pixel_size=cell_size, origin_x=origin_x, origin_y=origin_y, nodata=nodata)


def write_esri_ascii(raster: Raster, path: str):
    with open(path, 'w') as f:
        f.write('ncols {}\n'.format(raster.width))
        f.write('nrows {}\n'.format(raster.height))
        f.write('xllcorner {!r}\n'.format(float(raster.origin_x)))
        f.write('yllcorner {!r}\n'.format(float(raster.origin_y)))
        f.write('cellsize {!r}\n'.format(float(raster.pixel_size)))
        if raster.nodata is not None:
            f.write('NODATA_value {!r}\n'.format(float(raster.nodata)))
        for row in np.flipud(raster.values):
            f.write(' '.join(repr(float(value)) for value in row))
            f.write('\n')


def band_manifest_entries(path: str)->List[Tuple[str, str]]:
    """(band name, band file) pairs of a manifest; relative files resolve against the manifest directory."""
    base_dir = os.path.dirname(os.path.abspath(path))
    entries: List[Tuple[str, str]] = list()
    with open(path, 'r') as f:
        for line_number, line in enumerate(f, start=1):
            line = line.split('#', 1)[0].strip()
            if line == '':
                continue
            if '=' not in line:
                raise BandManifestException('{}: line {}: expected "name = file"'.format(path, line_number))
            name, file_name = [part.strip() for part in line.split('=', 1)]
            if name == '' or file_name == '':
                raise BandManifestException('{}: line {}: expected "name = file"'.format(path, line_number))
            if name in [entry[0] for entry in entries]:
                raise BandManifestException('{}: line {}: band "{}" is listed twice'.format(path, line_number, name))
            entries.append((name, file_name if os.path.isabs(file_name) else os.path.join(base_dir, file_name)))
    if len(entries) == 0:
        raise BandManifestException('{}: no bands listed'.format(path))
    return entries


def read_band_manifest(path: str, logger: LoggerWrapper=LoggerWrapper())->MultibandRaster:
    """Load a multiband image from a manifest of `name = file` lines (band order = line order)."""
    bands = list()
    names = list()
    for name, band_path in band_manifest_entries(path=path):
        if os.path.isfile(band_path) is False:
            raise BandManifestException('band "{}": file "{}" does not exist'.format(name, band_path))
        bands.append(read_esri_ascii(path=band_path, logger=logger))
        names.append(name)
    for name, band in zip(names, bands):
        if band.same_geometry(bands[0]) is False:
            raise BandManifestException('band "{}" does not share the geometry of band "{}"'.format(name, names[0]))
    logger.info('Loaded {} bands from manifest "{}": {}'.format(len(bands), path, ', '.join(names)))
    return MultibandRaster(bands=tuple(bands), names=tuple(names))


def band_roles(image: MultibandRaster, roles: Dict[str, str])->Dict[str, Raster]:
    """Map role names (e.g. red, nir) to bands, failing with the name of any missing band."""
    resolved = dict()
    for role, band_name in roles.items():
        if band_name not in image.names:
            raise BandManifestException('band "{}" ({} role) is not listed in the band manifest'.format(band_name, role))
        resolved[role] = image.band(name=band_name)
    return resolved
