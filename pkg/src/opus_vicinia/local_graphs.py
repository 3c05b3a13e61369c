"""3x3 neighborhood graphs around single cells.

Two equivalent representations are provided:

* `LocalGraph` - the compact graph over the target cell and the neighbors that
  exist in the table (node 0 is the target cell, neighbors follow in row-major
  window order).
* padded windows - 9 fixed slots (`WINDOW_OFFSETS`) per cell with a presence
  mask, used for batched training. Absent slots carry zero features and zero
  adjacency, so the target cell sees exactly what the compact graph gives it.
"""
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from opus_vicinia.grid_core import FeatureTable, KING_OFFSETS, N_FEATURES


WINDOW_OFFSETS = ((0, 0),) + KING_OFFSETS
WINDOW_SIZE = len(WINDOW_OFFSETS)


class LocalGraphException(Exception):
    pass


def king_adjacent(a: Tuple[int, int], b: Tuple[int, int])->bool:
    return a != b and max(abs(a[0] - b[0]), abs(a[1] - b[1])) == 1


def _slot_adjacency()->np.ndarray:
    adjacency = np.zeros((WINDOW_SIZE, WINDOW_SIZE), dtype=np.float64)
    for i, a in enumerate(WINDOW_OFFSETS):
        for j, b in enumerate(WINDOW_OFFSETS):
            if king_adjacent(a, b):
                adjacency[i, j] = 1.0
    return adjacency


SLOT_ADJACENCY = _slot_adjacency()


@dataclass(frozen=True, eq=False)
class LocalGraph:
    node_features: np.ndarray
    edges: Tuple[Tuple[int, int], ...]
    central_index: int
    node_coords: Tuple[Tuple[int, int], ...]

    def __post_init__(self):
        k = len(self.node_coords)
        if k < 1 or k > WINDOW_SIZE:
            raise LocalGraphException('a local graph holds 1 to {} nodes, got {}'.format(WINDOW_SIZE, k))
        if self.node_features.shape != (k, N_FEATURES):
            raise LocalGraphException('node features must have shape ({},{}), got {}'.format(k, N_FEATURES, self.node_features.shape))
        if not 0 <= self.central_index < k:
            raise LocalGraphException('central index {} out of range for {} nodes'.format(self.central_index, k))
        seen = set()
        for i, j in self.edges:
            if i == j or not (0 <= i < k and 0 <= j < k):
                raise LocalGraphException('invalid edge ({},{}) for {} nodes'.format(i, j, k))
            key = (min(i, j), max(i, j))
            if key in seen:
                raise LocalGraphException('duplicate edge ({},{})'.format(i, j))
            seen.add(key)

    @property
    def node_count(self)->int:
        return len(self.node_coords)

    def adjacency(self)->np.ndarray:
        a = np.zeros((self.node_count, self.node_count), dtype=np.float64)
        for i, j in self.edges:
            a[i, j] = 1.0
            a[j, i] = 1.0
        return a


def build_local_graph(table: FeatureTable, row: int, col: int, features: Optional[np.ndarray]=None)->LocalGraph:
    """Graph over (row, col) and its existing king neighbors.

    `features` optionally replaces the table features with a transformed dense
    (n_rows, n_cols, 9) array, e.g. standardized values.
    """
    if (row, col) not in table:
        raise LocalGraphException('cell ({},{}) has no record in the feature table'.format(row, col))
    if features is None:
        features = table.dense_features
    coords: List[Tuple[int, int]] = [(row, col)]
    for d_row, d_col in KING_OFFSETS:
        neighbor = (row + d_row, col + d_col)
        if neighbor in table:
            coords.append(neighbor)
    edges = list()
    for i in range(len(coords)):
        for j in range(i + 1, len(coords)):
            if king_adjacent(coords[i], coords[j]):
                edges.append((i, j))
    node_features = np.array([features[r, c, :] for r, c in coords], dtype=np.float64)
    return LocalGraph(node_features=node_features, edges=tuple(edges), central_index=0, node_coords=tuple(coords))


def normalized_adjacency(g: LocalGraph)->np.ndarray:
    """D^-1/2 (A + I) D^-1/2 with D the degree matrix of A + I."""
    a_hat = g.adjacency() + np.eye(g.node_count)
    d = 1.0 / np.sqrt(a_hat.sum(axis=1))
    return a_hat * np.outer(d, d)


def local_graph_to_json(g: LocalGraph)->Dict:
    return {
        'nodes': [
            {'row': int(r), 'col': int(c), 'features': [float(v) for v in g.node_features[i]]}
            for i, (r, c) in enumerate(g.node_coords)
        ],
        'edges': [[int(i), int(j)] for i, j in g.edges],
        'central_index': int(g.central_index),
    }


def padded_window(table: FeatureTable, cells: Sequence[Tuple[int, int]], features: Optional[np.ndarray]=None)->Tuple[np.ndarray, np.ndarray]:
    """Features (B, 9, 9) and presence (B, 9) of the window slots around every cell."""
    if features is None:
        features = table.dense_features
    padded_features = np.pad(features, ((1, 1), (1, 1), (0, 0)))
    padded_presence = np.pad(table.presence, ((1, 1), (1, 1)))
    rows = np.array([cell[0] for cell in cells], dtype=np.int64) + 1
    cols = np.array([cell[1] for cell in cells], dtype=np.int64) + 1
    offsets = np.array(WINDOW_OFFSETS, dtype=np.int64)
    slot_rows = rows[:, None] + offsets[None, :, 0]
    slot_cols = cols[:, None] + offsets[None, :, 1]
    present = padded_presence[slot_rows, slot_cols]
    window = padded_features[slot_rows, slot_cols, :] * present[:, :, None]
    return window, present


def batch_normalized_adjacency(present: np.ndarray)->np.ndarray:
    """Per-window normalized adjacency (B, 9, 9); rows and columns of absent slots are zero."""
    mask = present.astype(np.float64)
    a_hat = SLOT_ADJACENCY[None, :, :] * (mask[:, :, None] * mask[:, None, :])
    a_hat = a_hat + mask[:, :, None] * np.eye(WINDOW_SIZE)[None, :, :]
    degree = a_hat.sum(axis=2)
    d = np.zeros(degree.shape, dtype=np.float64)
    d[degree > 0] = 1.0 / np.sqrt(degree[degree > 0])
    return a_hat * (d[:, :, None] * d[:, None, :])


def graph_to_window(g: LocalGraph)->Tuple[np.ndarray, np.ndarray]:
    """Place a compact graph (central node first) into the 9 window slots."""
    center_row, center_col = g.node_coords[g.central_index]
    window = np.zeros((WINDOW_SIZE, N_FEATURES), dtype=np.float64)
    present = np.zeros(WINDOW_SIZE, dtype=bool)
    for i, (r, c) in enumerate(g.node_coords):
        offset = (r - center_row, c - center_col)
        if offset not in WINDOW_OFFSETS:
            raise LocalGraphException('node ({},{}) is not inside the window of ({},{})'.format(r, c, center_row, center_col))
        slot = WINDOW_OFFSETS.index(offset)
        window[slot] = g.node_features[i]
        present[slot] = True
    return window, present
