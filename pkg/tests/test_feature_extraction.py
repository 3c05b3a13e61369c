import sys
import os

sys.path.append(os.path.dirname(os.path.realpath(__file__)) + "/../src")
print('sys.path={}'.format(sys.path))

import math
import unittest

import numpy as np

from opus_vicinia.feature_extraction import (
    FeatureUndefinedException,
    LabelFileException,
    RasterExtentException,
    build_feature_table,
    cell_entropy,
    clip_segment_length,
    ndvi,
    profile_convexity,
    profile_convexity_raster,
    read_labels,
    slope,
    slope_raster,
    street_features,
    vegetation_proportion,
)
from opus_vicinia.grid_core import CellRect, GridSpec
from opus_vicinia.rasters import BandManifestException, DEFAULT_NODATA, MultibandRaster, Raster
from opus_vicinia.streets import StreetNetwork, StreetNode, StreetSegment
from logging_support import TestLogger, WorkDir, print_logger_lines

running_path = os.getcwd()
print('Current Working Path: {}'.format(running_path))


SAMPLER_POINTS = 1000000


def sampled_length(p1, p2, rect: CellRect, n: int=SAMPLER_POINTS)->float:
    """Midpoint-rule estimate of the length of p1-p2 inside the half-open rectangle."""
    t = (np.arange(n, dtype=np.float64) + 0.5) / n
    x = p1[0] + t * (p2[0] - p1[0])
    y = p1[1] + t * (p2[1] - p1[1])
    inside = (x >= rect.xmin) & (x < rect.xmax) & (y >= rect.ymin) & (y < rect.ymax)
    return float(np.count_nonzero(inside)) * math.hypot(p2[0] - p1[0], p2[1] - p1[1]) / n


def plane_dem(size: int=20, pixel_size: float=10.0, degrees: float=30.0)->Raster:
    x = (np.arange(size, dtype=np.float64) + 0.5) * pixel_size
    values = np.tile(x * math.tan(math.radians(degrees)), (size, 1))
    return Raster(values=values, pixel_size=pixel_size)


def single_band(values: np.ndarray, name: str='B1')->MultibandRaster:
    return MultibandRaster(bands=(Raster(values=values.astype(np.float64), pixel_size=1.0),), names=(name,))


class TestSpectralFeatures(unittest.TestCase):    # pragma: no cover

    def setUp(self) -> None:
        print()
        print('-'*80)
        self.logger = TestLogger()
        self.cell = CellRect(xmin=0.0, ymin=0.0, xmax=16.0, ymax=16.0)
        return super().setUp()

    def tearDown(self):
        print_logger_lines(logger=self.logger)
        self.logger = None
        return super().tearDown()

    def test_ndvi_cases(self):
        red = Raster(values=np.array([[0.2, 0.0, 0.0]]), pixel_size=1.0)
        nir = Raster(values=np.array([[0.2, 1.0, 0.0]]), pixel_size=1.0)
        result = ndvi(red=red, nir=nir)
        self.assertEqual(result.values[0, 0], 0.0)
        self.assertEqual(result.values[0, 1], 1.0)
        self.assertEqual(result.values[0, 2], DEFAULT_NODATA)
        self.assertFalse(result.valid_mask()[0, 2])

    def test_vegetation_proportion(self):
        values = np.full((16, 16), 0.8)
        self.assertEqual(vegetation_proportion(cell=self.cell, ndvi=Raster(values=values, pixel_size=1.0)), 1.0)
        values[:8, :] = 0.3
        values[8:, :] = 0.7
        self.assertEqual(vegetation_proportion(cell=self.cell, ndvi=Raster(values=values, pixel_size=1.0)), 0.5)
        values[:, :] = 0.6
        self.assertEqual(vegetation_proportion(cell=self.cell, ndvi=Raster(values=values, pixel_size=1.0)), 1.0)

    def test_vegetation_proportion_ignores_nodata(self):
        values = np.full((16, 16), DEFAULT_NODATA)
        with self.assertRaises(FeatureUndefinedException):
            vegetation_proportion(cell=self.cell, ndvi=Raster(values=values, pixel_size=1.0))
        values[0, 0] = 0.9
        values[0, 1] = 0.1
        self.assertEqual(vegetation_proportion(cell=self.cell, ndvi=Raster(values=values, pixel_size=1.0)), 0.5)

    def test_entropy_trivial_cases(self):
        constant = np.zeros((16, 16))
        constant[0, 0] = 255.0
        constant_cell = CellRect(xmin=1.0, ymin=1.0, xmax=16.0, ymax=16.0)
        self.assertEqual(cell_entropy(cell=constant_cell, image=single_band(constant)), 0.0)

        all_bins = np.arange(256, dtype=np.float64).reshape((16, 16))
        self.assertAlmostEqual(cell_entropy(cell=self.cell, image=single_band(all_bins)), 1.0, places=12)

        two_bins = np.zeros((16, 16))
        two_bins[8:, :] = 255.0
        self.assertAlmostEqual(cell_entropy(cell=self.cell, image=single_band(two_bins)), 0.125, places=12)

    def test_entropy_is_a_mean_over_bands(self):
        flat = Raster(values=np.full((16, 16), 3.0), pixel_size=1.0)
        spread = Raster(values=np.arange(256, dtype=np.float64).reshape((16, 16)), pixel_size=1.0)
        image = MultibandRaster(bands=(flat, spread), names=('flat', 'spread'))
        self.assertAlmostEqual(cell_entropy(cell=self.cell, image=image), 0.5, places=12)


class TestTerrainFeatures(unittest.TestCase):    # pragma: no cover

    def setUp(self) -> None:
        print()
        print('-'*80)
        self.logger = TestLogger()
        self.interior = CellRect(xmin=50.0, ymin=50.0, xmax=150.0, ymax=150.0)
        return super().setUp()

    def tearDown(self):
        print_logger_lines(logger=self.logger)
        self.logger = None
        return super().tearDown()

    def test_flat_dem(self):
        dem = Raster(values=np.full((20, 20), 42.0), pixel_size=10.0)
        self.assertEqual(slope(cell=self.interior, dem=dem), 0.0)
        self.assertEqual(profile_convexity(cell=self.interior, dem=dem), 0.0)

    def test_plane_slope_is_exact(self):
        dem = plane_dem(degrees=30.0)
        self.assertAlmostEqual(slope(cell=self.interior, dem=dem), 30.0, delta=1e-9)
        interior = slope_raster(dem=dem).values[1:-1, 1:-1]
        self.assertTrue(np.all(np.abs(interior - 30.0) < 1e-9))

    def test_plane_has_no_curvature(self):
        dem = plane_dem(degrees=17.0)
        self.assertAlmostEqual(profile_convexity(cell=self.interior, dem=dem), 0.0, delta=1e-9)

    def test_horn_window_by_hand(self):
        values = np.array([
            [3.0, 7.0, 2.0],
            [1.0, 5.0, 9.0],
            [4.0, 6.0, 8.0],
        ])
        p = 2.0
        dem = Raster(values=values, pixel_size=p)
        # row 0 is the south row, so the northern row of the window is values[2]
        north, middle, south = values[2], values[1], values[0]
        a, b, c = north
        d, _, f = middle
        g, h, i = south
        dz_dx = ((c + 2 * f + i) - (a + 2 * d + g)) / (8 * p)
        dz_dy = ((a + 2 * b + c) - (g + 2 * h + i)) / (8 * p)
        expected = math.degrees(math.atan(math.sqrt(dz_dx ** 2 + dz_dy ** 2)))
        self.assertAlmostEqual(slope_raster(dem=dem).values[1, 1], expected, places=12)

    def test_paraboloid_profile_curvature(self):
        size = 12
        centers = np.arange(size, dtype=np.float64) + 0.5
        xx, yy = np.meshgrid(centers, centers)
        dem = Raster(values=xx ** 2 + yy ** 2, pixel_size=1.0)
        row, col = 5, 7
        x, y = centers[col], centers[row]
        # D = 2x, E = 2y, r = t = 2, s = 0
        expected = -4.0 / (1.0 + 4.0 * (x * x + y * y))
        self.assertAlmostEqual(profile_convexity_raster(dem=dem).values[row, col], expected, places=12)

    def test_nodata_window(self):
        values = np.full((20, 20), DEFAULT_NODATA)
        dem = Raster(values=values, pixel_size=10.0)
        with self.assertRaises(FeatureUndefinedException):
            slope(cell=self.interior, dem=dem)
        with self.assertRaises(FeatureUndefinedException):
            profile_convexity(cell=self.interior, dem=dem)


class TestStreetFeatures(unittest.TestCase):    # pragma: no cover

    def setUp(self) -> None:
        print()
        print('-'*80)
        self.logger = TestLogger()
        self.cell = CellRect(xmin=0.0, ymin=0.0, xmax=150.0, ymax=150.0)
        return super().setUp()

    def tearDown(self):
        print_logger_lines(logger=self.logger)
        self.logger = None
        return super().tearDown()

    def test_clip_examples(self):
        self.assertAlmostEqual(clip_segment_length(p1=(10.0, 10.0), p2=(40.0, 50.0), cell_rect=self.cell), 50.0, places=12)
        self.assertAlmostEqual(clip_segment_length(p1=(-10.0, 75.0), p2=(160.0, 75.0), cell_rect=self.cell), 150.0, places=12)
        self.assertEqual(clip_segment_length(p1=(200.0, 0.0), p2=(300.0, 100.0), cell_rect=self.cell), 0.0)

    def test_clip_on_excluded_edges(self):
        self.assertEqual(clip_segment_length(p1=(150.0, 0.0), p2=(150.0, 150.0), cell_rect=self.cell), 0.0)
        self.assertEqual(clip_segment_length(p1=(0.0, 150.0), p2=(150.0, 150.0), cell_rect=self.cell), 0.0)
        self.assertAlmostEqual(clip_segment_length(p1=(0.0, 0.0), p2=(0.0, 150.0), cell_rect=self.cell), 150.0, places=12)

    def test_clip_matches_sampler(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            p1 = tuple(rng.uniform(-100.0, 250.0, size=2))
            p2 = tuple(rng.uniform(-100.0, 250.0, size=2))
            exact = clip_segment_length(p1=p1, p2=p2, cell_rect=self.cell)
            estimate = sampled_length(p1=p1, p2=p2, rect=self.cell)
            full = math.hypot(p2[0] - p1[0], p2[1] - p1[1])
            self.assertLessEqual(abs(exact - estimate), 1e-4 * full)
            self.assertAlmostEqual(exact, clip_segment_length(p1=p2, p2=p1, cell_rect=self.cell), places=9)
            self.assertLessEqual(exact, full + 1e-12)

    def test_clipped_lengths_sum_to_full_length(self):
        grid = GridSpec(n_rows=4, n_cols=4)
        p1, p2 = (12.5, 3.0), (590.0, 480.25)
        total = sum(
            clip_segment_length(p1=p1, p2=p2, cell_rect=grid.cell_rect(row=row, col=col))
            for row in range(grid.n_rows) for col in range(grid.n_cols)
        )
        full = math.hypot(p2[0] - p1[0], p2[1] - p1[1])
        self.assertLessEqual(abs(total - full), 1e-9 * full)

    def test_empty_cell(self):
        net = StreetNetwork.build(nodes=[], segments=[])
        self.assertEqual(street_features(cell=self.cell, net=net), (0, 0.0, 0.0, 0.0, 0.0))

    def test_one_node_with_three_streets(self):
        nodes = [
            StreetNode(node_id='a', x=10.0, y=10.0),
            StreetNode(node_id='b', x=200.0, y=10.0),
            StreetNode(node_id='c', x=10.0, y=200.0),
            StreetNode(node_id='d', x=200.0, y=200.0),
        ]
        segments = [
            StreetSegment(node_a='a', node_b='b', points=((10.0, 10.0), (200.0, 10.0))),
            StreetSegment(node_a='a', node_b='c', points=((10.0, 10.0), (10.0, 200.0))),
            StreetSegment(node_a='a', node_b='d', points=((10.0, 10.0), (200.0, 200.0))),
        ]
        count, length, deg_mean, deg_min, deg_max = street_features(cell=self.cell, net=StreetNetwork.build(nodes=nodes, segments=segments))
        self.assertEqual(count, 1)
        self.assertAlmostEqual(length, 280.0 + 140.0 * math.sqrt(2.0), places=9)
        self.assertEqual((deg_mean, deg_min, deg_max), (3.0, 3.0, 3.0))

    def test_degree_statistics(self):
        nodes = [
            StreetNode(node_id='a', x=10.0, y=10.0),
            StreetNode(node_id='b', x=100.0, y=100.0),
            StreetNode(node_id='out1', x=300.0, y=10.0),
            StreetNode(node_id='out2', x=300.0, y=300.0),
            StreetNode(node_id='out3', x=10.0, y=300.0),
        ]
        segments = [
            StreetSegment(node_a='a', node_b='b', points=((10.0, 10.0), (100.0, 100.0))),
            StreetSegment(node_a='a', node_b='out1', points=((10.0, 10.0), (300.0, 10.0))),
            StreetSegment(node_a='b', node_b='out2', points=((100.0, 100.0), (300.0, 300.0))),
            StreetSegment(node_a='b', node_b='out3', points=((100.0, 100.0), (10.0, 300.0))),
            StreetSegment(node_a='b', node_b='out1', points=((100.0, 100.0), (300.0, 10.0))),
        ]
        count, _, deg_mean, deg_min, deg_max = street_features(cell=self.cell, net=StreetNetwork.build(nodes=nodes, segments=segments))
        self.assertEqual(count, 2)
        self.assertEqual((deg_mean, deg_min, deg_max), (3.0, 2.0, 4.0))


class TestBuildFeatureTable(unittest.TestCase):    # pragma: no cover

    def setUp(self) -> None:
        print()
        print('-'*80)
        self.logger = TestLogger()
        self.work_dir = WorkDir()
        rng = np.random.default_rng(3)
        self.grid = GridSpec(n_rows=2, n_cols=2, cell_size=10.0)
        self.image = MultibandRaster(
            bands=tuple(Raster(values=rng.uniform(0.05, 0.9, size=(20, 20)), pixel_size=1.0) for _ in range(3)),
            names=('B2', 'B4', 'B8'),
        )
        self.dem = Raster(values=rng.uniform(0.0, 30.0, size=(20, 20)), pixel_size=1.0)
        nodes = [
            StreetNode(node_id='a', x=2.0, y=3.0),
            StreetNode(node_id='b', x=14.0, y=4.0),
            StreetNode(node_id='c', x=13.0, y=17.0),
            StreetNode(node_id='d', x=4.5, y=12.0),
        ]
        segments = [
            StreetSegment(node_a='a', node_b='b', points=((2.0, 3.0), (14.0, 4.0))),
            StreetSegment(node_a='b', node_b='c', points=((14.0, 4.0), (18.0, 9.0), (13.0, 17.0))),
            StreetSegment(node_a='a', node_b='d', points=((2.0, 3.0), (4.5, 12.0))),
            StreetSegment(node_a='a', node_b='c', points=((2.0, 3.0), (13.0, 17.0))),
        ]
        self.net = StreetNetwork.build(nodes=nodes, segments=segments)
        return super().setUp()

    def tearDown(self):
        print_logger_lines(logger=self.logger)
        self.logger = None
        self.work_dir.cleanup()
        return super().tearDown()

    def test_records_match_the_single_feature_operations(self):
        table = build_feature_table(image=self.image, dem=self.dem, net=self.net, grid=self.grid, logger=self.logger)
        self.assertEqual(len(table), 4)
        ndvi_raster = ndvi(red=self.image.band('B4'), nir=self.image.band('B8'))
        for row, col in table.cells():
            cell = self.grid.cell_rect(row=row, col=col)
            expected = (
                vegetation_proportion(cell=cell, ndvi=ndvi_raster),
                cell_entropy(cell=cell, image=self.image),
                slope(cell=cell, dem=self.dem),
                profile_convexity(cell=cell, dem=self.dem),
            ) + tuple(float(value) for value in street_features(cell=cell, net=self.net))
            for name_index, (actual, wanted) in enumerate(zip(table.get(row, col).features, expected)):
                self.assertAlmostEqual(actual, wanted, places=9, msg='cell ({},{}) feature {}'.format(row, col, name_index))

    def test_mask_excludes_cells(self):
        mask = np.ones((2, 2), dtype=bool)
        mask[1, 0] = False
        table = build_feature_table(image=self.image, dem=self.dem, net=self.net, grid=self.grid, mask=mask, logger=self.logger)
        self.assertEqual(len(table), 3)
        self.assertNotIn((1, 0), table)

    def test_nodata_cell_is_omitted_with_warning(self):
        values = self.dem.values.copy()
        values[10:, 10:] = DEFAULT_NODATA
        omitted = list()
        table = build_feature_table(image=self.image, dem=Raster(values=values, pixel_size=self.dem.pixel_size), net=self.net, grid=self.grid, omitted_cells=omitted, logger=self.logger)
        self.assertEqual(len(table), 3)
        self.assertEqual(omitted, [(1, 1)])
        self.assertTrue(any('(1,1)' in line for line in self.logger.warn_lines))

    def test_extent_and_band_errors(self):
        small_dem = Raster(values=np.zeros((10, 10)), pixel_size=1.0)
        with self.assertRaises(RasterExtentException):
            build_feature_table(image=self.image, dem=small_dem, net=self.net, grid=self.grid, logger=self.logger)
        with self.assertRaises(BandManifestException):
            build_feature_table(image=self.image, dem=self.dem, net=self.net, grid=self.grid, nir_band='B8A', logger=self.logger)

    def test_translation_keeps_feature_values(self):
        shift = 10.0
        moved_image = MultibandRaster(
            bands=tuple(Raster(values=band.values, pixel_size=1.0, origin_x=shift, origin_y=shift) for band in self.image.bands),
            names=self.image.names,
        )
        moved_dem = Raster(values=self.dem.values, pixel_size=1.0, origin_x=shift, origin_y=shift)
        moved_net = StreetNetwork.build(
            nodes=[StreetNode(node_id=n.node_id, x=n.x + shift, y=n.y + shift) for n in self.net.nodes],
            segments=[StreetSegment(node_a=s.node_a, node_b=s.node_b, points=tuple((x + shift, y + shift) for x, y in s.points)) for s in self.net.segments],
        )
        moved_grid = GridSpec(n_rows=2, n_cols=2, origin_x=shift, origin_y=shift, cell_size=10.0)
        table = build_feature_table(image=self.image, dem=self.dem, net=self.net, grid=self.grid, logger=self.logger)
        moved = build_feature_table(image=moved_image, dem=moved_dem, net=moved_net, grid=moved_grid, logger=self.logger)
        for cell in table.cells():
            np.testing.assert_allclose(moved.get(*cell).features, table.get(*cell).features, rtol=1e-9, atol=1e-9)

    def test_labels_are_attached(self):
        path = self.work_dir.write('labels.csv', 'row,col,zone,label\n0,0,1,1\n0,1,1,0\n1,1,2,\n')
        labels = read_labels(path=path)
        table = build_feature_table(image=self.image, dem=self.dem, net=self.net, grid=self.grid, labels=labels, logger=self.logger)
        self.assertEqual((table.get(0, 0).zone, table.get(0, 0).label), (1, 1))
        self.assertEqual((table.get(1, 1).zone, table.get(1, 1).label), (2, None))
        self.assertEqual((table.get(1, 0).zone, table.get(1, 0).label), (None, None))

    def test_coverage_fractions_become_labels(self):
        path = self.work_dir.write('coverage.csv', 'row,col,zone,coverage\n0,0,1,0.95\n0,1,1,0.9\n1,0,2,0.0\n1,1,2,\n')
        self.assertEqual(read_labels(path=path), {(0, 0): (1, 1), (0, 1): (1, 0), (1, 0): (2, 0), (1, 1): (2, None)})

    def test_label_file_errors(self):
        cases = {
            'header': 'r,c,z,l\n',
            'label': 'row,col,zone,label\n0,0,1,3\n',
            'duplicate': 'row,col,zone,label\n0,0,1,1\n0,0,1,0\n',
            'coverage range': 'row,col,zone,coverage\n0,0,1,1.5\n',
            'coverage number': 'row,col,zone,coverage\n0,0,1,most\n',
        }
        for name, content in cases.items():
            with self.assertRaises(LabelFileException, msg=name):
                read_labels(path=self.work_dir.write('{}.csv'.format(name), content))


if __name__ == '__main__':
    unittest.main()
