"""The three compared classifiers.

| Kind            | Input                                  | Layers                    | Parameters |
|-----------------|----------------------------------------|---------------------------|-----------:|
| `gcn`           | local 3x3 graph                        | GCN 9->64, GCN 64->64, 64->2 | 4930    |
| `mlp-neighbors` | center + 8 neighbor feature vectors    | 81->64, 64->2             | 5378       |
| `mlp-local`     | center feature vector                  | 9->64, 64->2              | 770        |
"""
import json
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from opus_vicinia import CHECKPOINT_FORMAT_VERSION
from opus_vicinia.grid_core import FeatureTable, KING_OFFSETS, N_FEATURES
from opus_vicinia.local_graphs import (
    LocalGraph,
    WINDOW_SIZE,
    batch_normalized_adjacency,
    graph_to_window,
    normalized_adjacency,
    padded_window,
)
from opus_vicinia.neural_core import (
    DenseBatch,
    DenseParams,
    GCNLayerParams,
    ShapeException,
    SoftmaxRegression,
    batch_softmax_cross_entropy,
    dense_forward,
    gcn_layer_forward,
    init_dense,
    relu,
    softmax,
)


GCN = 'gcn'
MLP_LOCAL = 'mlp-local'
MLP_NEIGHBORS = 'mlp-neighbors'
MODEL_KINDS = (GCN, MLP_NEIGHBORS, MLP_LOCAL,)
HIDDEN_SIZE = 64
N_CLASSES = 2

RELU_MARGIN = 1e-4
MIN_GRADIENT_MAGNITUDE = 1e-5
MAX_INSTANCE_DRAWS = 1000


class UnknownModelException(Exception):
    pass


class CheckpointException(Exception):
    pass


@dataclass(eq=False)
class GraphBatch:
    """Padded 3x3 windows: features (B, 9, 9), normalized adjacency (B, 9, 9), labels (B,)."""
    features: np.ndarray
    a_norm: np.ndarray
    labels: np.ndarray

    def __len__(self)->int:
        return int(self.labels.shape[0])

    def take(self, index: np.ndarray)->'GraphBatch':
        return GraphBatch(features=self.features[index], a_norm=self.a_norm[index], labels=self.labels[index])

    @classmethod
    def from_windows(cls, features: np.ndarray, present: np.ndarray, labels: Optional[np.ndarray]=None)->'GraphBatch':
        if labels is None:
            labels = np.zeros(features.shape[0], dtype=np.int64)
        return cls(features=features, a_norm=batch_normalized_adjacency(present=present), labels=np.asarray(labels, dtype=np.int64))

    @classmethod
    def from_local_graphs(cls, graphs: Sequence[LocalGraph], labels: Optional[Sequence[int]]=None)->'GraphBatch':
        windows = [graph_to_window(g=g) for g in graphs]
        features = np.array([w for w, _ in windows], dtype=np.float64)
        present = np.array([p for _, p in windows], dtype=bool)
        return cls.from_windows(features=features, present=present, labels=None if labels is None else np.asarray(labels))


class GCNClassifier:

    kind = GCN

    def __init__(self, gcn1: GCNLayerParams, gcn2: GCNLayerParams, head: DenseParams):
        if gcn1.in_dim != N_FEATURES or gcn1.out_dim != gcn2.in_dim or gcn2.out_dim != head.in_dim or head.out_dim != N_CLASSES:
            raise ShapeException('inconsistent GCN dimensions {}->{}->{}->{}'.format(gcn1.in_dim, gcn1.out_dim, gcn2.out_dim, head.out_dim))
        self.gcn1 = gcn1
        self.gcn2 = gcn2
        self.head = head

    @classmethod
    def initialize(cls, rng: np.random.Generator, hidden: int=HIDDEN_SIZE)->'GCNClassifier':
        return cls(
            gcn1=init_dense(fan_in=N_FEATURES, fan_out=hidden, rng=rng, params_class=GCNLayerParams),
            gcn2=init_dense(fan_in=hidden, fan_out=hidden, rng=rng, params_class=GCNLayerParams),
            head=init_dense(fan_in=hidden, fan_out=N_CLASSES, rng=rng),
        )

    def layers(self)->Dict[str, DenseParams]:
        return OrderedDict([('gcn1', self.gcn1), ('gcn2', self.gcn2), ('head', self.head)])

    def parameters(self)->Dict[str, np.ndarray]:
        return _flatten_layers(layers=self.layers())

    def _forward(self, batch: GraphBatch):
        ax = batch.a_norm @ batch.features
        z1 = ax @ self.gcn1.W + self.gcn1.b
        h1 = relu(z1)
        ah1 = batch.a_norm @ h1
        z2 = ah1 @ self.gcn2.W + self.gcn2.b
        h2 = relu(z2)
        center = h2[:, 0, :]
        logits = center @ self.head.W + self.head.b
        return logits, (ax, z1, ah1, z2, center)

    def logits(self, batch: GraphBatch)->np.ndarray:
        logits, _ = self._forward(batch=batch)
        return logits

    def pre_activations(self, batch: GraphBatch)->Tuple[np.ndarray, ...]:
        _, (_, z1, _, z2, _) = self._forward(batch=batch)
        return (z1, z2)

    def loss_and_grads(self, batch: GraphBatch)->Tuple[float, Dict[str, np.ndarray]]:
        logits, (ax, z1, ah1, z2, center) = self._forward(batch=batch)
        loss, d_logits = batch_softmax_cross_entropy(logits=logits, labels=batch.labels)
        d_head_w = center.T @ d_logits
        d_head_b = d_logits.sum(axis=0)
        d_h2 = np.zeros(z2.shape, dtype=np.float64)
        d_h2[:, 0, :] = d_logits @ self.head.W.T
        d_z2 = d_h2 * (z2 > 0)
        d_gcn2_w = np.einsum('bni,bnj->ij', ah1, d_z2)
        d_gcn2_b = d_z2.sum(axis=(0, 1))
        d_h1 = np.transpose(batch.a_norm, (0, 2, 1)) @ (d_z2 @ self.gcn2.W.T)
        d_z1 = d_h1 * (z1 > 0)
        d_gcn1_w = np.einsum('bni,bnj->ij', ax, d_z1)
        d_gcn1_b = d_z1.sum(axis=(0, 1))
        return loss, OrderedDict([
            ('gcn1.W', d_gcn1_w), ('gcn1.b', d_gcn1_b),
            ('gcn2.W', d_gcn2_w), ('gcn2.b', d_gcn2_b),
            ('head.W', d_head_w), ('head.b', d_head_b),
        ])


class MLPBaseline:

    def __init__(self, variant: str, hidden: DenseParams, head: DenseParams):
        if variant not in (MLP_LOCAL, MLP_NEIGHBORS):
            raise UnknownModelException('unknown MLP variant "{}"'.format(variant))
        expected = N_FEATURES if variant == MLP_LOCAL else N_FEATURES * WINDOW_SIZE
        if hidden.in_dim != expected or hidden.out_dim != head.in_dim or head.out_dim != N_CLASSES:
            raise ShapeException('{} expects {}->{}->{}, got {}->{}->{}'.format(variant, expected, hidden.out_dim, N_CLASSES, hidden.in_dim, head.in_dim, head.out_dim))
        self.variant = variant
        self.hidden = hidden
        self.head = head

    @property
    def kind(self)->str:
        return self.variant

    @property
    def input_dim(self)->int:
        return self.hidden.in_dim

    @classmethod
    def initialize(cls, variant: str, rng: np.random.Generator, hidden: int=HIDDEN_SIZE)->'MLPBaseline':
        input_dim = N_FEATURES if variant == MLP_LOCAL else N_FEATURES * WINDOW_SIZE
        return cls(
            variant=variant,
            hidden=init_dense(fan_in=input_dim, fan_out=hidden, rng=rng),
            head=init_dense(fan_in=hidden, fan_out=N_CLASSES, rng=rng),
        )

    def layers(self)->Dict[str, DenseParams]:
        return OrderedDict([('hidden', self.hidden), ('head', self.head)])

    def parameters(self)->Dict[str, np.ndarray]:
        return _flatten_layers(layers=self.layers())

    def _forward(self, batch: DenseBatch):
        z = dense_forward(x=batch.inputs, params=self.hidden)
        h = relu(z)
        return h @ self.head.W + self.head.b, (z, h)

    def logits(self, batch: DenseBatch)->np.ndarray:
        logits, _ = self._forward(batch=batch)
        return logits

    def pre_activations(self, batch: DenseBatch)->Tuple[np.ndarray, ...]:
        _, (z, _) = self._forward(batch=batch)
        return (z,)

    def loss_and_grads(self, batch: DenseBatch)->Tuple[float, Dict[str, np.ndarray]]:
        logits, (z, h) = self._forward(batch=batch)
        loss, d_logits = batch_softmax_cross_entropy(logits=logits, labels=batch.labels)
        d_z = (d_logits @ self.head.W.T) * (z > 0)
        return loss, OrderedDict([
            ('hidden.W', batch.inputs.T @ d_z), ('hidden.b', d_z.sum(axis=0)),
            ('head.W', h.T @ d_logits), ('head.b', d_logits.sum(axis=0)),
        ])


def _flatten_layers(layers: Dict[str, DenseParams])->Dict[str, np.ndarray]:
    params = OrderedDict()
    for name, layer in layers.items():
        params['{}.W'.format(name)] = layer.W
        params['{}.b'.format(name)] = layer.b
    return params


def parameter_count(model)->int:
    return int(sum(p.size for p in model.parameters().values()))


def build_model(kind: str, rng: np.random.Generator):
    if kind == GCN:
        return GCNClassifier.initialize(rng=rng)
    if kind in (MLP_LOCAL, MLP_NEIGHBORS):
        return MLPBaseline.initialize(variant=kind, rng=rng)
    raise UnknownModelException('unknown model "{}" (valid: {})'.format(kind, ', '.join(MODEL_KINDS)))


def prepare_batch(kind: str, table: FeatureTable, cells: Sequence[Tuple[int, int]], labels: Optional[Sequence[int]]=None, features: Optional[np.ndarray]=None):
    """Model inputs for `cells`, read from `features` (defaults to the table's own values)."""
    label_array = np.zeros(len(cells), dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
    window, present = padded_window(table=table, cells=cells, features=features)
    if kind == GCN:
        return GraphBatch.from_windows(features=window, present=present, labels=label_array)
    if kind == MLP_NEIGHBORS:
        return DenseBatch(inputs=window.reshape((len(cells), N_FEATURES * WINDOW_SIZE)), labels=label_array)
    if kind == MLP_LOCAL:
        return DenseBatch(inputs=window[:, 0, :].copy(), labels=label_array)
    raise UnknownModelException('unknown model "{}" (valid: {})'.format(kind, ', '.join(MODEL_KINDS)))


def predict_labels(model, batch)->np.ndarray:
    """argmax of the logits; ties go to non-favela."""
    return np.argmax(model.logits(batch), axis=1).astype(np.int64)


def gcn_predict(model: GCNClassifier, g: LocalGraph)->Tuple[np.ndarray, np.ndarray]:
    if g.node_features.shape[1] != model.gcn1.in_dim:
        raise ShapeException('graph nodes carry {} features, model expects {}'.format(g.node_features.shape[1], model.gcn1.in_dim))
    a_norm = normalized_adjacency(g=g)
    h1 = relu(gcn_layer_forward(a_norm=a_norm, h=g.node_features, params=model.gcn1))
    h2 = relu(gcn_layer_forward(a_norm=a_norm, h=h1, params=model.gcn2))
    logits = dense_forward(x=h2[g.central_index], params=model.head)
    return logits, softmax(logits)


def assemble_neighbor_input(table: FeatureTable, row: int, col: int, features: Optional[np.ndarray]=None)->np.ndarray:
    """Center features followed by the 8 neighbors in row-major window order; absent neighbors are zeros."""
    if (row, col) not in table:
        raise ShapeException('cell ({},{}) has no record in the feature table'.format(row, col))
    if features is None:
        features = table.dense_features
    x = np.zeros(N_FEATURES * WINDOW_SIZE, dtype=np.float64)
    x[:N_FEATURES] = features[row, col, :]
    for slot, (d_row, d_col) in enumerate(KING_OFFSETS, start=1):
        neighbor = (row + d_row, col + d_col)
        if neighbor in table:
            x[slot * N_FEATURES:(slot + 1) * N_FEATURES] = features[neighbor[0], neighbor[1], :]
    return x


def mlp_predict(model: MLPBaseline, x: np.ndarray)->Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != model.input_dim:
        raise ShapeException('{} expects a {}-vector, got shape {}'.format(model.variant, model.input_dim, x.shape))
    logits = dense_forward(x=relu(dense_forward(x=x, params=model.hidden)), params=model.head)
    return logits, softmax(logits)


def save_checkpoint(model, path: str, seed: Optional[int]=None, config: Optional[dict]=None):
    layers = list()
    for name, layer in model.layers().items():
        layers.append({
            'name': name,
            'shape': [layer.in_dim, layer.out_dim],
            'W': [float(v) for v in layer.W.ravel(order='C')],
            'b': [float(v) for v in layer.b],
        })
    document = {
        'format': CHECKPOINT_FORMAT_VERSION,
        'variant': model.kind,
        'seed': seed,
        'config': config if config is not None else dict(),
        'layers': layers,
    }
    with open(path, 'w') as f:
        json.dump(document, f, indent=2, sort_keys=True)
        f.write('\n')


def load_checkpoint(path: str)->Tuple[object, dict]:
    """Returns the model and the checkpoint metadata (`variant`, `seed`, `config`)."""
    with open(path, 'r') as f:
        try:
            document = json.load(f)
        except json.JSONDecodeError as e:
            raise CheckpointException('{}: not a JSON document ({})'.format(path, e))
    if document.get('format') != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointException('{}: unsupported checkpoint format "{}"'.format(path, document.get('format')))
    layers = dict()
    for entry in document.get('layers', list()):
        rows, cols = entry['shape']
        layer_class = GCNLayerParams if entry['name'].startswith('gcn') else DenseParams
        layers[entry['name']] = layer_class(
            W=np.array(entry['W'], dtype=np.float64).reshape((rows, cols)),
            b=np.array(entry['b'], dtype=np.float64),
        )
    variant = document.get('variant')
    try:
        if variant == GCN:
            model = GCNClassifier(gcn1=layers['gcn1'], gcn2=layers['gcn2'], head=layers['head'])
        elif variant in (MLP_LOCAL, MLP_NEIGHBORS):
            model = MLPBaseline(variant=variant, hidden=layers['hidden'], head=layers['head'])
        elif variant == SoftmaxRegression.kind:
            model = SoftmaxRegression(linear=layers['linear'])
        else:
            raise CheckpointException('{}: unknown model variant "{}"'.format(path, variant))
    except KeyError as e:
        raise CheckpointException('{}: missing layer {}'.format(path, e))
    metadata = {'variant': variant, 'seed': document.get('seed'), 'config': document.get('config', dict())}
    return model, metadata


def _random_signed(rng: np.random.Generator, shape, low: float, high: float)->np.ndarray:
    return rng.uniform(low, high, size=shape) * rng.choice((-1.0, 1.0), size=shape)


def random_gradcheck_instance(model_kind: str, rng: np.random.Generator):
    """A model with non-zero biases and a one-sample batch that is safe to finite-difference.

    Draws are repeated until every ReLU pre-activation is at least `RELU_MARGIN` away
    from the kink and every non-zero analytic gradient entry is at least
    `MIN_GRADIENT_MAGNITUDE` in size.
    """
    for _ in range(MAX_INSTANCE_DRAWS):
        label = np.array([int(rng.integers(0, 2))], dtype=np.int64)
        if model_kind == SoftmaxRegression.kind:
            model = SoftmaxRegression.initialize(rng=rng)
            batch = DenseBatch(inputs=_random_signed(rng, (1, N_FEATURES), 0.5, 1.0), labels=label)
        else:
            model = build_model(kind=model_kind, rng=rng)
            window = _random_signed(rng, (1, WINDOW_SIZE, N_FEATURES), 0.5, 1.0)
            present = rng.random((1, WINDOW_SIZE)) < 0.75
            present[0, 0] = True
            window = window * present[:, :, None]
            if model_kind == GCN:
                batch = GraphBatch.from_windows(features=window, present=present, labels=label)
            elif model_kind == MLP_NEIGHBORS:
                batch = DenseBatch(inputs=window.reshape((1, N_FEATURES * WINDOW_SIZE)), labels=label)
            else:
                batch = DenseBatch(inputs=window[:, 0, :].copy(), labels=label)
        for layer in model.layers().values():
            layer.b[:] = _random_signed(rng, layer.b.shape, 0.05, 0.5)
        if hasattr(model, 'pre_activations'):
            if any(np.min(np.abs(z)) < RELU_MARGIN for z in model.pre_activations(batch)):
                continue
        _, grads = model.loss_and_grads(batch)
        magnitudes = np.concatenate([np.abs(g).ravel() for g in grads.values()])
        if np.any((magnitudes > 0.0) & (magnitudes < MIN_GRADIENT_MAGNITUDE)):
            continue
        return model, batch
    raise ShapeException('no well-conditioned {} instance found in {} draws'.format(model_kind, MAX_INSTANCE_DRAWS))
