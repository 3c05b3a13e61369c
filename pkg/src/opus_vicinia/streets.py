import csv
import math
from collections import Counter
from dataclasses import dataclass
from typing import Dict, Iterable, List, Tuple

from shapely import wkt
from shapely.errors import ShapelyError
from shapely.geometry import LineString

from magnum_opus.operarius import LoggerWrapper


ENDPOINT_TOLERANCE = 1e-6


class StreetNetworkException(Exception):
    pass


@dataclass(frozen=True)
class StreetNode:
    node_id: str
    x: float
    y: float


@dataclass(frozen=True)
class StreetSegment:
    node_a: str
    node_b: str
    points: Tuple[Tuple[float, float], ...]


@dataclass(frozen=True)
class StreetNetwork:
    nodes: Tuple[StreetNode, ...]
    segments: Tuple[StreetSegment, ...]

    @classmethod
    def build(cls, nodes: Iterable[StreetNode], segments: Iterable[StreetSegment])->'StreetNetwork':
        nodes = tuple(nodes)
        segments = tuple(segments)
        positions = dict()
        for node in nodes:
            if node.node_id in positions:
                raise StreetNetworkException('duplicate street node id "{}"'.format(node.node_id))
            positions[node.node_id] = (node.x, node.y)
        for index, segment in enumerate(segments):
            if len(segment.points) < 2:
                raise StreetNetworkException('segment {} ({}-{}) needs at least 2 points'.format(index, segment.node_a, segment.node_b))
            for node_id, point in ((segment.node_a, segment.points[0]), (segment.node_b, segment.points[-1])):
                if node_id not in positions:
                    raise StreetNetworkException('segment {} references unknown node "{}"'.format(index, node_id))
                node_x, node_y = positions[node_id]
                if math.hypot(point[0] - node_x, point[1] - node_y) > ENDPOINT_TOLERANCE:
                    raise StreetNetworkException('segment {} endpoint {} does not coincide with node "{}" at {}'.format(index, point, node_id, (node_x, node_y)))
        return cls(nodes=nodes, segments=segments)

    def degrees(self)->Dict[str, int]:
        """Number of segments incident to every node; a loop segment counts twice."""
        counts = Counter()
        for segment in self.segments:
            counts[segment.node_a] += 1
            counts[segment.node_b] += 1
        return {node.node_id: counts.get(node.node_id, 0) for node in self.nodes}


def parse_linestring(text: str)->Tuple[Tuple[float, float], ...]:
    geometry = wkt.loads(text)
    if not isinstance(geometry, LineString):
        raise StreetNetworkException('expected a LINESTRING, got {}'.format(geometry.geom_type))
    return tuple((float(x), float(y)) for x, y, *_ in geometry.coords)


def load_street_network(nodes_path: str, segments_path: str, logger: LoggerWrapper=LoggerWrapper())->StreetNetwork:
    nodes: List[StreetNode] = list()
    segments: List[StreetSegment] = list()
    with open(nodes_path, 'r', newline='') as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or [name.strip() for name in reader.fieldnames] != ['id', 'x', 'y']:
            raise StreetNetworkException('{}: line 1: expected header "id,x,y"'.format(nodes_path))
        for line_number, row in enumerate(reader, start=2):
            try:
                nodes.append(StreetNode(node_id=row['id'].strip(), x=float(row['x']), y=float(row['y'])))
            except (TypeError, ValueError):
                raise StreetNetworkException('{}: line {}: malformed node row'.format(nodes_path, line_number))
    with open(segments_path, 'r', newline='') as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or [name.strip() for name in reader.fieldnames] != ['node_a', 'node_b', 'wkt_linestring']:
            raise StreetNetworkException('{}: line 1: expected header "node_a,node_b,wkt_linestring"'.format(segments_path))
        for line_number, row in enumerate(reader, start=2):
            try:
                points = parse_linestring(text=row['wkt_linestring'])
            except (ShapelyError, TypeError, AttributeError, StreetNetworkException) as e:
                raise StreetNetworkException('{}: line {}: bad linestring ({})'.format(segments_path, line_number, e))
            segments.append(StreetSegment(node_a=row['node_a'].strip(), node_b=row['node_b'].strip(), points=points))
    logger.info('Loaded street network with {} nodes and {} segments'.format(len(nodes), len(segments)))
    return StreetNetwork.build(nodes=nodes, segments=segments)
