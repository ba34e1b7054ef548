"""Downstream evaluation over frozen embeddings.

Embeddings are encoder features (the projection head plays no part here),
l2-normalized per view; shape-level rows are the renormalized mean of one
object's views. Classification runs a linear probe and a cosine k-NN;
retrieval ranks a corpus by cosine similarity and scores mean average
precision.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import data as datamod
from . import losses as lossmod
from . import model as modelmod
from . import rng
from . import renderer
from . import train as trainmod
from .errors import (
    CorpusTooSmall,
    DimensionMismatch,
    EmptyCorpus,
    NoRelevantItems,
)


@dataclass
class RetrievalRanking:
    query_id: str
    corpus_ids: list
    similarities: np.ndarray


@dataclass
class MetricsReport:
    top1: float = None
    top5: float = None
    knn_accuracy: float = None
    map: float = None
    map_at_k: float = None
    k: int = None
    map_k: int = None
    per_class: dict = field(default_factory=dict)

    def to_dict(self):
        out = {}
        for key in ("top1", "top5", "knn_accuracy", "map", "map_at_k", "k", "map_k"):
            val = getattr(self, key)
            if val is not None:
                out[key] = val
        if self.per_class:
            out["per_class"] = self.per_class
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def to_kv_block(self) -> str:
        lines = [f"{k}={v}" for k, v in self.to_dict().items() if k != "per_class"]
        for cls, vals in sorted(self.per_class.items()):
            for name, v in sorted(vals.items()):
                lines.append(f"class.{cls}.{name}={v}")
        return "\n".join(lines) + "\n"


def _l2_rows(rows: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return rows / norms


def compute_embeddings(params, encoder_cfg, manifest: datamod.DatasetManifest,
                       split: str, level: str = "shape",
                       batch_size: int = 256) -> datamod.EmbeddingMatrix:
    """Deterministic features for one split; no augmentation, eval transform only."""
    if level not in ("view", "shape"):
        raise ValueError(f"level must be 'view' or 'shape', got {level!r}")
    items = manifest.split_items(split)
    mean = manifest.pixel_mean if manifest.pixel_mean is not None else 0.0
    std = manifest.pixel_std if manifest.pixel_std is not None else 1.0

    tensors = []
    for item in items:
        for v in range(manifest.n_views):
            px = renderer.read_ppm(manifest.view_path(item, v)).pixels
            tensors.append(datamod.eval_transform(px, encoder_cfg.height, mean, std))
    stackv = np.stack(tensors)

    feats = []
    with ad.no_grad():
        for lo in range(0, len(stackv), batch_size):
            out = modelmod.encoder_forward(params, encoder_cfg,
                                           ad.Tensor(stackv[lo:lo + batch_size]))
            feats.append(out.data)
    view_rows = _l2_rows(np.concatenate(feats, axis=0).astype(np.float64))

    if level == "view":
        rows = view_rows
        ids = [f"{item.shape_id}#view{v:02d}" for item in items for v in range(manifest.n_views)]
        labels = [item.class_id for item in items for _ in range(manifest.n_views)]
    else:
        nv = manifest.n_views
        rows = _l2_rows(view_rows.reshape(len(items), nv, -1).mean(axis=1))
        ids = [item.shape_id for item in items]
        labels = [item.class_id for item in items]
    return datamod.EmbeddingMatrix(rows=rows.astype(np.float32), ids=ids,
                                   labels=np.asarray(labels, dtype=np.int64),
                                   level=level, normalized=True,
                                   class_names=manifest.classes)


# ---------------------------------------------------------------------------
# linear probe

def linear_probe(train_emb: datamod.EmbeddingMatrix, test_emb: datamod.EmbeddingMatrix,
                 optim_cfg: trainmod.OptimConfig = None, n_classes: int = None) -> MetricsReport:
    """Single linear layer on frozen embeddings, cross-entropy objective."""
    if train_emb.rows.shape[1] != test_emb.rows.shape[1]:
        raise DimensionMismatch(
            f"train dim {train_emb.rows.shape[1]} != test dim {test_emb.rows.shape[1]}")
    if optim_cfg is None:
        # frozen unit-norm inputs need a much larger step than pretraining:
        # logits must grow from ~0 to confident scale through w alone
        optim_cfg = trainmod.OptimConfig(learning_rate=0.5, weight_decay=1e-4,
                                         schedule_gamma=0.95, epochs=100, batch_size=64, seed=0)
    if n_classes is None:
        n_classes = len(train_emb.class_names) or int(train_emb.labels.max()) + 1

    x = train_emb.rows.astype(np.float32)
    y = train_emb.labels
    params = modelmod.init_classifier_params(x.shape[1], n_classes, optim_cfg.seed)
    n = x.shape[0]
    bs = min(optim_cfg.batch_size, n)
    for epoch in range(optim_cfg.epochs):
        lr = trainmod.lr_at(epoch, optim_cfg)
        perm = rng.stream(optim_cfg.seed, "probe-perm", epoch).permutation(n)
        for lo in range(0, n - bs + 1, bs):
            idx = perm[lo:lo + bs]
            logits = modelmod.classifier_forward(params, ad.Tensor(x[idx]))
            loss = lossmod.cross_entropy(logits, y[idx])
            ad.backward(loss)
            trainmod.sgd_step(params, trainmod._collect_grads(params), lr,
                              optim_cfg.weight_decay)

    with ad.no_grad():
        logits = modelmod.classifier_forward(params, ad.Tensor(test_emb.rows.astype(np.float32)))
    return _classification_report(logits.data, test_emb.labels, n_classes,
                                  test_emb.class_names)


def _classification_report(logits, labels, n_classes, class_names) -> MetricsReport:
    order = np.argsort(-logits, axis=1, kind="stable")
    top1 = order[:, 0] == labels
    k5 = min(5, n_classes)
    top5 = (order[:, :k5] == labels[:, None]).any(axis=1)
    per_class = {}
    for c in range(n_classes):
        m = labels == c
        if m.any():
            name = class_names[c] if c < len(class_names) else str(c)
            per_class[name] = {"top1": float(top1[m].mean()), "count": int(m.sum())}
    return MetricsReport(top1=float(top1.mean()), top5=float(top5.mean()),
                         per_class=per_class)


# ---------------------------------------------------------------------------
# k-NN

def knn_classify(corpus: datamod.EmbeddingMatrix, queries: datamod.EmbeddingMatrix,
                 k: int = 10) -> np.ndarray:
    """Cosine-similarity majority vote; ties resolved by summed similarity,
    then by lowest class id."""
    n = corpus.rows.shape[0]
    if n < k:
        raise CorpusTooSmall(f"corpus has {n} rows, need at least k={k}")
    c_rows = _l2_rows(corpus.rows.astype(np.float64))
    q_rows = _l2_rows(queries.rows.astype(np.float64))
    sims = q_rows @ c_rows.T
    preds = np.empty(q_rows.shape[0], dtype=np.int64)
    for qi in range(q_rows.shape[0]):
        order = np.lexsort((np.arange(n), -sims[qi]))[:k]
        votes = {}
        for ci in order:
            lab = int(corpus.labels[ci])
            cnt, tot = votes.get(lab, (0, 0.0))
            votes[lab] = (cnt + 1, tot + sims[qi, ci])
        preds[qi] = min(votes, key=lambda lab: (-votes[lab][0], -votes[lab][1], lab))
    return preds


def knn_report(corpus, queries, k: int = 10) -> MetricsReport:
    preds = knn_classify(corpus, queries, k)
    correct = preds == queries.labels
    per_class = {}
    for c in sorted(set(int(x) for x in queries.labels)):
        m = queries.labels == c
        name = queries.class_names[c] if c < len(queries.class_names) else str(c)
        per_class[name] = {"knn_accuracy": float(correct[m].mean()), "count": int(m.sum())}
    return MetricsReport(knn_accuracy=float(correct.mean()), k=k, per_class=per_class)


# ---------------------------------------------------------------------------
# retrieval

def retrieve(corpus: datamod.EmbeddingMatrix, query_row: np.ndarray,
             query_id: str = "") -> RetrievalRanking:
    """Full descending-similarity ranking; ties broken by corpus position."""
    n = corpus.rows.shape[0]
    if n == 0:
        raise EmptyCorpus("retrieval corpus is empty")
    c_rows = _l2_rows(corpus.rows.astype(np.float64))
    q = np.asarray(query_row, dtype=np.float64).reshape(-1)
    qn = np.linalg.norm(q)
    q = q / qn if qn else q
    sims = c_rows @ q
    order = np.lexsort((np.arange(n), -sims))
    return RetrievalRanking(query_id=query_id,
                            corpus_ids=[corpus.ids[i] for i in order],
                            similarities=sims[order])


def average_precision(relevance, truncate: int = None) -> float:
    """AP over a ranked 0/1 relevance list; AP@k divides by min(R, k)."""
    rel = np.asarray(relevance, dtype=bool)
    total = int(rel.sum())
    if total == 0:
        raise NoRelevantItems("query class is absent from the corpus")
    if truncate is not None:
        rel_t = rel[:truncate]
        denom = min(total, truncate)
    else:
        rel_t = rel
        denom = total
    hits = 0
    score = 0.0
    for rank, flag in enumerate(rel_t, start=1):
        if flag:
            hits += 1
            score += hits / rank
    return score / denom


def retrieval_report(corpus: datamod.EmbeddingMatrix, queries: datamod.EmbeddingMatrix,
                     map_at: int = 10, dump=None) -> MetricsReport:
    """mAP and mAP@k over all queries; relevance is same-class membership."""
    label_by_pos = corpus.labels
    pos_of = {cid: i for i, cid in enumerate(corpus.ids)}
    aps, aps_k = [], []
    for qi in range(queries.rows.shape[0]):
        ranking = retrieve(corpus, queries.rows[qi], queries.ids[qi])
        rel = np.array([label_by_pos[pos_of[cid]] == queries.labels[qi]
                        for cid in ranking.corpus_ids])
        if not rel.any():
            raise NoRelevantItems(f"no corpus items share the class of query {queries.ids[qi]!r}")
        aps.append(average_precision(rel))
        aps_k.append(average_precision(rel, truncate=map_at))
        if dump is not None:
            for rank, (cid, sim, r) in enumerate(zip(ranking.corpus_ids,
                                                     ranking.similarities, rel), start=1):
                dump.write(f"{queries.ids[qi]},{rank},{cid},{sim:.6f},{int(r)}\n")
    return MetricsReport(map=float(np.mean(aps)), map_at_k=float(np.mean(aps_k)),
                         map_k=map_at)
