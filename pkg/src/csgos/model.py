"""CSG-TL link prediction: network, training loop, accuracy and the statistical baseline.

The network runs two additive-attention GAT layers over the structural
edges, then an edge-aware attention layer whose scores are
``ReLU(Q_i . (K_j + W_E e_ij) / sqrt(d_k))`` normalised over each
neighbourhood. Each node ends up with ``[v*, v'']`` and every
(target, node) pair is scored by an MLP + sigmoid on the concatenation.
Candidate target edges never carry messages; the target only enters
through its own projections and the head.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from .errors import CheckpointError, EmptyCorpus, LabelMismatch
from .graph import CSG, LinkLabels
from .io_utils import atomic_write_text
from .knowledge import D_FEAT
from .tensor import Tensor
from .validation import LinkSample, check_labels, check_link_corpus, check_probability, check_single_target

LINK_THRESHOLD = 0.5
BATCH_GRAPHS = 32
P_CLAMP = 1e-7
ATTN_EPS = 1e-8


@dataclass
class TrainConfig:
    batch_graphs: int = BATCH_GRAPHS
    epochs: int = 40
    learning_rate: float = 1e-3
    seed: int = 0
    d_hid: int = 64
    d_k: int = 32
    d_mlp: int = 64
    link_threshold: float = LINK_THRESHOLD
    optimizer: str = "adam"

    def __post_init__(self):
        if self.batch_graphs < 1:
            raise ValueError("batch_graphs must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        check_probability(self.link_threshold, "link_threshold")


class ModelParams:
    """Named learnable tensors of the network, in a fixed order."""

    NAMES = ("gat1.W", "gat1.a", "gat2.W", "gat2.a", "attn.W_Q", "attn.W_K", "attn.W_V", "attn.W_E",
             "head.W1", "head.b1", "head.W2", "head.b2")

    def __init__(self, tensors: dict[str, Tensor]):
        missing = [n for n in self.NAMES if n not in tensors]
        if missing:
            raise CheckpointError(f"missing parameters: {missing}")
        self.tensors = {n: tensors[n] for n in self.NAMES}
        self._check_shapes()

    def _check_shapes(self):
        t = self.tensors
        d_in, d_hid = t["gat1.W"].shape
        d_k = t["attn.W_Q"].shape[1]
        d_edge = t["attn.W_E"].shape[0]
        d_mlp = t["head.W1"].shape[1]
        expect = {
            "gat1.a": (2 * d_hid, 1), "gat2.W": (d_hid, d_hid), "gat2.a": (2 * d_hid, 1),
            "attn.W_Q": (d_hid, d_k), "attn.W_K": (d_hid, d_k), "attn.W_V": (d_hid, d_k),
            "attn.W_E": (d_edge, d_k), "head.W1": (2 * (d_k + d_hid), d_mlp), "head.b1": (1, d_mlp),
            "head.W2": (d_mlp, 1), "head.b2": (1, 1),
        }
        for name, shape in expect.items():
            if t[name].shape != shape:
                raise CheckpointError(f"{name} has shape {t[name].shape}, expected {shape}")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    @property
    def dims(self) -> dict[str, int]:
        d_in, d_hid = self["gat1.W"].shape
        return {"d_in": d_in, "d_hid": d_hid, "d_k": self["attn.W_Q"].shape[1],
                "d_edge": self["attn.W_E"].shape[0], "d_mlp": self["head.W1"].shape[1]}

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.tensors.items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "ModelParams":
        return cls({n: Tensor(a, requires_grad=True, name=n) for n, a in arrays.items()})

    def copy(self) -> "ModelParams":
        return ModelParams.from_arrays(self.arrays())

    def save(self, path, config: dict | None = None) -> None:
        T.save_checkpoint(path, self.arrays())
        if config is not None:
            atomic_write_text(sidecar_path(path), json.dumps(config, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ModelParams":
        return cls.from_arrays(T.load_checkpoint(path))


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def init_params(d_hid: int = 64, d_k: int = 32, d_mlp: int = 64, seed: int = 0,
                d_in: int = 3 * D_FEAT, d_edge: int = 2 * D_FEAT, zero_head: bool = False) -> ModelParams:
    rng = np.random.default_rng(seed)

    def glorot(shape):
        lim = math.sqrt(6.0 / (shape[0] + shape[1]))
        return rng.uniform(-lim, lim, size=shape)

    d_final = d_k + d_hid
    arrays = {
        "gat1.W": glorot((d_in, d_hid)),
        "gat1.a": glorot((2 * d_hid, 1)),
        "gat2.W": glorot((d_hid, d_hid)),
        "gat2.a": glorot((2 * d_hid, 1)),
        "attn.W_Q": glorot((d_hid, d_k)),
        "attn.W_K": glorot((d_hid, d_k)),
        "attn.W_V": glorot((d_hid, d_k)),
        "attn.W_E": glorot((d_edge, d_k)),
        "head.W1": glorot((2 * d_final, d_mlp)),
        "head.b1": np.zeros((1, d_mlp)),
        "head.W2": glorot((d_mlp, 1)),
        "head.b2": np.zeros((1, 1)),
    }
    if zero_head:
        for n in ("head.W1", "head.b1", "head.W2", "head.b2"):
            arrays[n] = np.zeros_like(arrays[n])
    return ModelParams.from_arrays(arrays)


# -- batching --------------------------------------------------------------

@dataclass(eq=False)
class GraphArrays:
    """Dense arrays for one graph with one target."""

    x: np.ndarray
    src: np.ndarray          # structural edges, both directions
    dst: np.ndarray
    edge_x: np.ndarray
    target: int
    nodes: np.ndarray        # non-target node indices, scoring order
    pairs: list
    y: np.ndarray | None = None


def graph_arrays(g: CSG, labels: LinkLabels | None = None) -> GraphArrays:
    t = check_single_target(g)
    x = np.stack([n.feature for n in g.nodes])
    src, dst, feats = [], [], []
    for e in g.edges:
        src += [e.i, e.j]
        dst += [e.j, e.i]
        feats += [e.feature, e.feature]
    d_edge = g.edges[0].feature.shape[0] if g.edges else 2 * (x.shape[1] // 3)
    edge_x = np.stack(feats) if feats else np.zeros((0, d_edge))
    nodes = np.array(g.non_target_indices, dtype=np.intp)
    tid = g.nodes[t].node_id
    pairs = [(tid, g.nodes[k].node_id) for k in nodes]
    y = None
    if labels is not None:
        check_labels(g, labels)
        y = np.array([labels[p] for p in pairs], dtype=np.float64)
    return GraphArrays(x, np.array(src, dtype=np.intp), np.array(dst, dtype=np.intp), edge_x, t, nodes, pairs, y)


@dataclass(eq=False)
class Batch:
    x: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    edge_x: np.ndarray
    pair_t: np.ndarray
    pair_i: np.ndarray
    pair_graph: np.ndarray
    n_graphs: int
    y: np.ndarray | None
    offsets: list = field(default_factory=list)


def make_batch(items: Sequence[GraphArrays]) -> Batch:
    xs, srcs, dsts, exs, pt, pi, pg, ys, offsets = [], [], [], [], [], [], [], [], []
    off = poff = 0
    for gi, a in enumerate(items):
        xs.append(a.x)
        srcs.append(a.src + off)
        dsts.append(a.dst + off)
        exs.append(a.edge_x)
        pt.append(np.full(len(a.nodes), a.target + off, dtype=np.intp))
        pi.append(a.nodes + off)
        pg.append(np.full(len(a.nodes), gi, dtype=np.intp))
        if a.y is not None:
            ys.append(a.y)
        offsets.append((poff, poff + len(a.nodes)))
        off += a.x.shape[0]
        poff += len(a.nodes)
    y = np.concatenate(ys) if len(ys) == len(items) else None
    return Batch(np.concatenate(xs), np.concatenate(srcs), np.concatenate(dsts), np.concatenate(exs),
                 np.concatenate(pt), np.concatenate(pi), np.concatenate(pg), len(items), y, offsets)


# -- network ---------------------------------------------------------------

def _segment_softmax(scores: Tensor, seg: np.ndarray, n: int) -> Tensor:
    shift = np.full(n, -np.inf)
    np.maximum.at(shift, seg, scores.data[:, 0])
    ex = T.exp(T.sub(scores, shift[seg][:, None]))
    denom = T.segment_sum(ex, seg, n)
    return T.div(ex, T.take(denom, seg))


def _gat_layer(h_in: Tensor, W: Tensor, a: Tensor, src: np.ndarray, dst: np.ndarray, n: int) -> Tensor:
    h = T.matmul(h_in, W)
    scores = T.leaky_relu(T.matmul(T.concat([T.take(h, dst), T.take(h, src)], axis=1), a), 0.2)
    alpha = _segment_softmax(scores, dst, n)
    # residual term: the softmax average alone washes out a node's own category
    return T.add(T.segment_sum(T.mul(alpha, T.take(h, src)), dst, n), h)


def _edge_attention(v: Tensor, edge_x: np.ndarray, src: np.ndarray, dst: np.ndarray, n: int,
                    params: ModelParams) -> Tensor:
    d_k = params["attn.W_Q"].shape[1]
    q = T.matmul(v, params["attn.W_Q"])
    k = T.matmul(v, params["attn.W_K"])
    val = T.matmul(v, params["attn.W_V"])
    if len(src) == 0:
        return T.Tensor(np.zeros((n, d_k)))
    e = T.matmul(T.Tensor(edge_x), params["attn.W_E"])
    raw = T.sum(T.mul(T.take(q, dst), T.add(T.take(k, src), e)), axis=1, keepdims=True)
    alpha = T.relu(T.scale(raw, 1.0 / math.sqrt(d_k)))
    denom = T.segment_sum(alpha, dst, n)
    deg = np.bincount(dst, minlength=n).astype(np.float64)
    empty = (denom.data[:, 0] <= ATTN_EPS).astype(np.float64)
    # all-zero rows fall back to uniform weights over the neighbourhood
    safe = T.add(denom, empty[:, None])
    weight = T.mul(T.div(alpha, T.take(safe, dst)), (1.0 - empty[dst])[:, None])
    uniform = (empty[dst] / np.maximum(deg[dst], 1.0))[:, None]
    weight = T.add(weight, uniform)
    return T.segment_sum(T.mul(weight, T.take(val, src)), dst, n)


def forward_batch(batch: Batch, params: ModelParams) -> Tensor:
    """Link probabilities for every (target, node) pair in ``batch``, shape (P, 1)."""
    n = batch.x.shape[0]
    loops = np.arange(n, dtype=np.intp)
    gsrc = np.concatenate([batch.src, loops])
    gdst = np.concatenate([batch.dst, loops])
    x = T.Tensor(batch.x)
    h = T.relu(_gat_layer(x, params["gat1.W"], params["gat1.a"], gsrc, gdst, n))
    v2 = _gat_layer(h, params["gat2.W"], params["gat2.a"], gsrc, gdst, n)
    vstar = _edge_attention(v2, batch.edge_x, batch.src, batch.dst, n, params)
    vhat = T.concat([vstar, v2], axis=1)
    pair = T.concat([T.take(vhat, batch.pair_t), T.take(vhat, batch.pair_i)], axis=1)
    hidden = T.relu(T.add(T.matmul(pair, params["head.W1"]), params["head.b1"]))
    logit = T.add(T.matmul(hidden, params["head.W2"]), params["head.b2"])
    return T.sigmoid(logit)


@dataclass(eq=False)
class Prediction:
    pairs: list
    p: np.ndarray
    tensor: Tensor | None = None

    def as_dict(self) -> dict:
        return dict(zip(self.pairs, self.p.tolist()))


def forward(g: CSG, params: ModelParams) -> Prediction:
    a = graph_arrays(g)
    out = forward_batch(make_batch([a]), params)
    return Prediction(a.pairs, out.data[:, 0].copy(), out)


def _weighted_bce(p: Tensor, y: np.ndarray, weights: np.ndarray) -> Tensor:
    pc = T.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    y = y[:, None]
    w = weights[:, None]
    ll = T.add(T.mul(y * w, T.log(pc)), T.mul((1.0 - y) * w, T.log(T.sub(1.0, pc))))
    return T.scale(T.sum(ll), -1.0)


def bce_loss(pred: Prediction, labels: LinkLabels) -> Tensor:
    missing = [pr for pr in pred.pairs if pr not in labels]
    if missing:
        raise LabelMismatch(f"labels missing for pairs {missing[:3]}")
    if not pred.pairs:
        raise LabelMismatch("prediction has no pairs")
    y = np.array([labels[pr] for pr in pred.pairs], dtype=np.float64)
    p = pred.tensor if pred.tensor is not None else T.Tensor(pred.p[:, None])
    return _weighted_bce(p, y, np.full(len(y), 1.0 / len(y)))


def batch_loss(batch: Batch, params: ModelParams) -> Tensor:
    """Mean over graphs of each graph's mean BCE."""
    p = forward_batch(batch, params)
    counts = np.bincount(batch.pair_graph, minlength=batch.n_graphs).astype(np.float64)
    weights = 1.0 / (counts[batch.pair_graph] * batch.n_graphs)
    return _weighted_bce(p, batch.y, weights)


# -- training / evaluation -------------------------------------------------

@dataclass
class TrainResult:
    params: ModelParams
    log: list[dict]
    steps: int
    initial_loss: float


def _arrays_for(corpus: Sequence[LinkSample]) -> list[GraphArrays]:
    return [graph_arrays(s.graph, s.labels) for s in corpus]


def predict_arrays(arrays: Sequence[GraphArrays], params: ModelParams, chunk: int = 256) -> list[np.ndarray]:
    out = []
    for start in range(0, len(arrays), chunk):
        batch = make_batch(arrays[start:start + chunk])
        p = forward_batch(batch, params).data[:, 0]
        out.extend(p[a:b].copy() for a, b in batch.offsets)
    return out


def mean_corpus_loss(arrays: Sequence[GraphArrays], params: ModelParams) -> float:
    probs = predict_arrays(arrays, params)
    losses = []
    for a, p in zip(arrays, probs):
        pc = np.clip(p, P_CLAMP, 1 - P_CLAMP)
        losses.append(-np.mean(a.y * np.log(pc) + (1 - a.y) * np.log(1 - pc)))
    return float(np.mean(losses))


def train(corpus: Sequence[LinkSample], cfg: TrainConfig | None = None, params: ModelParams | None = None,
          start_epoch: int = 0, eval_accuracy: bool = True) -> TrainResult:
    """Minibatch training on all (target, node) pairs of every graph."""
    cfg = cfg or TrainConfig()
    corpus = check_link_corpus(corpus)
    arrays = _arrays_for(corpus)
    if params is None:
        params = init_params(cfg.d_hid, cfg.d_k, cfg.d_mlp, cfg.seed,
                             d_in=arrays[0].x.shape[1], d_edge=arrays[0].edge_x.shape[1] or 2 * D_FEAT)
    opt = T.make_optimizer(cfg.optimizer, list(params), cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    initial = mean_corpus_loss(arrays, params)
    log = []
    for epoch in range(start_epoch + 1, start_epoch + cfg.epochs + 1):
        order = rng.permutation(len(arrays))
        total = 0.0
        for start in range(0, len(order), cfg.batch_graphs):
            idx = order[start:start + cfg.batch_graphs]
            batch = make_batch([arrays[k] for k in idx])
            opt.zero_grad()
            loss = batch_loss(batch, params)
            T.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
        record = {"epoch": epoch, "mean_loss": total / len(arrays)}
        if eval_accuracy:
            record["train_acc"] = accuracy_from_probs(corpus, predict_arrays(arrays, params), cfg.link_threshold)
        log.append(record)
    return TrainResult(params, log, opt.steps, initial)


def accuracy_from_probs(corpus: Sequence[LinkSample], probs: Sequence[np.ndarray],
                        threshold: float = LINK_THRESHOLD) -> float:
    """Per-scene share of pairs where ``p >= threshold`` matches the label, averaged over scenes."""
    if not corpus:
        raise EmptyCorpus("corpus is empty")
    hits: dict[str, list[int]] = {}
    for sample, p in zip(corpus, probs):
        pairs = [(sample.graph.nodes[sample.graph.target_indices[0]].node_id, sample.graph.nodes[k].node_id)
                 for k in sample.graph.non_target_indices]
        y = np.array([sample.labels[pr] for pr in pairs])
        h = (np.asarray(p) >= threshold).astype(int)
        acc = hits.setdefault(sample.scene_id, [0, 0])
        acc[0] += int(np.sum(h == y))
        acc[1] += len(y)
    scores = [c / n for c, n in hits.values() if n > 0]
    if not scores:
        raise EmptyCorpus("no scored pairs in corpus")
    return float(np.mean(scores))


def evaluate_accuracy(corpus, params, threshold: float = LINK_THRESHOLD) -> float:
    """Accuracy of ``params`` (ModelParams or a fitted estimator) on ``corpus``."""
    corpus = check_link_corpus(corpus)
    if isinstance(params, ModelParams):
        probs = predict_arrays([graph_arrays(s.graph) for s in corpus], params)
    else:
        probs = params.predict_proba(corpus)
    return accuracy_from_probs(corpus, probs, threshold)


# -- estimators ------------------------------------------------------------

class CSGTLClassifier(ClassifierMixin, BaseEstimator):
    """Target-to-node link predictor with a scikit-learn style interface.

    ``X`` is a sequence of graphs (each with one target node) or
    :class:`LinkSample` objects; ``y`` is the matching sequence of link
    label dicts, or omitted when samples carry labels.
    """

    def __init__(self, d_hid=64, d_k=32, d_mlp=64, batch_graphs=BATCH_GRAPHS, epochs=40, learning_rate=1e-3,
                 optimizer="adam", seed=0, link_threshold=LINK_THRESHOLD):
        self.d_hid = d_hid
        self.d_k = d_k
        self.d_mlp = d_mlp
        self.batch_graphs = batch_graphs
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.seed = seed
        self.link_threshold = link_threshold

    def train_config(self) -> TrainConfig:
        return TrainConfig(batch_graphs=self.batch_graphs, epochs=self.epochs, learning_rate=self.learning_rate,
                           seed=self.seed, d_hid=self.d_hid, d_k=self.d_k, d_mlp=self.d_mlp,
                           link_threshold=self.link_threshold, optimizer=self.optimizer)

    def fit(self, X, y=None, warm_start_params: ModelParams | None = None, start_epoch: int = 0):
        corpus = check_link_corpus(X, y)
        result = train(corpus, self.train_config(), params=warm_start_params, start_epoch=start_epoch)
        self.params_ = result.params
        self.loss_curve_ = result.log
        self.n_steps_ = result.steps
        self.initial_loss_ = result.initial_loss
        self.epochs_completed_ = start_epoch + self.epochs
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X) -> list[np.ndarray]:
        """Per graph, link probabilities for its non-target nodes in node order."""
        check_is_fitted(self, "params_")
        corpus = check_link_corpus(X, require_labels=False)
        return predict_arrays([graph_arrays(s.graph) for s in corpus], self.params_)

    def predict(self, X) -> list[np.ndarray]:
        return [(p >= self.link_threshold).astype(int) for p in self.predict_proba(X)]

    def score(self, X, y=None, sample_weight=None) -> float:
        corpus = check_link_corpus(X, y)
        return accuracy_from_probs(corpus, self.predict_proba(corpus), self.link_threshold)

    def save(self, path, provenance: dict | None = None) -> None:
        check_is_fitted(self, "params_")
        cfg = asdict(self.train_config())
        cfg["epochs_completed"] = self.epochs_completed_
        if provenance:
            cfg["provenance"] = provenance
        self.params_.save(path, cfg)

    @classmethod
    def load(cls, path) -> "CSGTLClassifier":
        params = ModelParams.load(path)
        side = sidecar_path(path)
        cfg = {}
        if side.exists():
            try:
                cfg = json.loads(side.read_text())
            except json.JSONDecodeError as exc:
                raise CheckpointError(f"{side}: {exc}") from exc
        dims = params.dims
        est = cls(d_hid=dims["d_hid"], d_k=dims["d_k"], d_mlp=dims["d_mlp"],
                  **{k: cfg[k] for k in ("batch_graphs", "epochs", "learning_rate", "optimizer", "seed",
                                         "link_threshold") if k in cfg})
        est.params_ = params
        est.epochs_completed_ = int(cfg.get("epochs_completed", cfg.get("epochs", 0)))
        est.classes_ = np.array([0, 1])
        est.loss_curve_ = []
        return est


class StatisticalBaseline(ClassifierMixin, BaseEstimator):
    """Category co-occurrence table: link iff the training link rate exceeds ``cutoff``.

    Unseen (target category, node category) pairs predict 0.
    """

    def __init__(self, cutoff=LINK_THRESHOLD):
        self.cutoff = cutoff

    def fit(self, X, y=None):
        corpus = check_link_corpus(X, y)
        counts: dict[tuple[str, str], list[int]] = {}
        for s in corpus:
            g = s.graph
            t = g.nodes[g.target_indices[0]]
            for k in g.non_target_indices:
                c = counts.setdefault((t.category, g.nodes[k].category), [0, 0])
                c[0] += int(s.labels[(t.node_id, g.nodes[k].node_id)])
                c[1] += 1
        self.counts_ = counts
        self.frequencies_ = {k: v[0] / v[1] for k, v in counts.items()}
        self.classes_ = np.array([0, 1])
        return self

    def frequency(self, target_category: str, node_category: str) -> float:
        check_is_fitted(self, "frequencies_")
        return self.frequencies_.get((target_category, node_category), 0.0)

    def predict_proba(self, X) -> list[np.ndarray]:
        """0/1 link decisions as probabilities, so ``H(p)`` reproduces the table."""
        return [p.astype(float) for p in self.predict(X)]

    def predict(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "frequencies_")
        corpus = check_link_corpus(X, require_labels=False)
        out = []
        for s in corpus:
            g = s.graph
            tcat = g.nodes[g.target_indices[0]].category
            out.append(np.array([int(self.frequency(tcat, g.nodes[k].category) > self.cutoff)
                                 for k in g.non_target_indices], dtype=int))
        return out

    def score(self, X, y=None, sample_weight=None) -> float:
        corpus = check_link_corpus(X, y)
        return accuracy_from_probs(corpus, self.predict_proba(corpus), LINK_THRESHOLD)


def statistical_baseline(train_corpus) -> StatisticalBaseline:
    return StatisticalBaseline().fit(train_corpus)


DEFAULT_CHECKPOINT = Path(__file__).parent / "data" / "csgtl_default.csgt"


def load_default_params() -> ModelParams:
    """Parameters of the bundled checkpoint trained on the default synthetic corpus."""
    if not DEFAULT_CHECKPOINT.exists():
        raise CheckpointError(f"bundled checkpoint missing at {DEFAULT_CHECKPOINT}")
    return ModelParams.load(DEFAULT_CHECKPOINT)
