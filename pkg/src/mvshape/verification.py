"""Self-check suite: gradient checks and invariant verification.

Oracles here are deliberately naive (per-anchor Python loops, exhaustive
scans) so they share no code path with the vectorized implementations they
cross-check. The CLI `gradcheck` and `verify` subcommands drive these.
"""

import math

import numpy as np

from . import autodiff as ad
from . import data as datamod
from . import evaluate as evalmod
from . import geometry
from . import losses as lossmod
from . import model as modelmod
from . import renderer
from . import rng

GRADCHECK_TOL = 1e-3


# ---------------------------------------------------------------------------
# naive loss oracles

def _unit(rows):
    out = np.asarray(rows, dtype=np.float64).copy()
    for i in range(out.shape[0]):
        out[i] /= np.linalg.norm(out[i])
    return out


def oracle_info_nce(z_a, z_b, tau):
    za, zb = _unit(z_a), _unit(z_b)
    n = za.shape[0]
    total = 0.0
    for i in range(n):
        denom = sum(math.exp(float(za[i] @ zb[k]) / tau) for k in range(n))
        total += -math.log(math.exp(float(za[i] @ zb[i]) / tau) / denom)
    return total / n


def oracle_simclr(z, tau):
    zn = _unit(z)
    rows = zn.shape[0]
    n = rows // 2
    total = 0.0
    for i in range(rows):
        pair = (i + n) % rows
        denom = sum(math.exp(float(zn[i] @ zn[k]) / tau) for k in range(rows) if k != i)
        total += -math.log(math.exp(float(zn[i] @ zn[pair]) / tau) / denom)
    return total / rows


def oracle_supcon(z, labels, tau):
    zn = _unit(z)
    rows = zn.shape[0]
    total = 0.0
    for i in range(rows):
        pos = [p for p in range(rows) if p != i and labels[p] == labels[i]]
        denom = sum(math.exp(float(zn[i] @ zn[k]) / tau) for k in range(rows) if k != i)
        inner = sum(-math.log(math.exp(float(zn[i] @ zn[p]) / tau) / denom) for p in pos)
        total += inner / len(pos)
    return total / rows


def oracle_margin_sup(z, labels, tau, eps):
    zn = _unit(z)
    rows = zn.shape[0]
    total = 0.0
    for i in range(rows):
        pos = [p for p in range(rows) if p != i and labels[p] == labels[i]]
        neg = [k for k in range(rows) if labels[k] != labels[i]]
        neg_mass = sum(math.exp((float(zn[i] @ zn[k]) + eps) / tau) for k in neg)
        inner = 0.0
        for p in pos:
            e_pos = math.exp(float(zn[i] @ zn[p]) / tau)
            inner += -math.log(e_pos / (e_pos + neg_mass))
        total += inner / len(pos)
    return total / rows


def oracle_cross_entropy(logits, labels):
    total = 0.0
    for i, row in enumerate(np.asarray(logits, dtype=np.float64)):
        m = row.max()
        lse = m + math.log(np.exp(row - m).sum())
        total += lse - row[labels[i]]
    return total / len(labels)


# ---------------------------------------------------------------------------
# naive retrieval oracles

def oracle_knn(corpus_rows, corpus_labels, query_rows, k):
    c = _unit(corpus_rows)
    preds = []
    for q in _unit(query_rows):
        sims = [(float(c[i] @ q), i) for i in range(len(c))]
        sims.sort(key=lambda t: (-t[0], t[1]))
        top = sims[:k]
        tally = {}
        for s, i in top:
            lab = int(corpus_labels[i])
            cnt, tot = tally.get(lab, (0, 0.0))
            tally[lab] = (cnt + 1, tot + s)
        preds.append(min(tally, key=lambda lab: (-tally[lab][0], -tally[lab][1], lab)))
    return np.array(preds)


def oracle_ranking(corpus_rows, q_row):
    c = _unit(corpus_rows)
    q = np.asarray(q_row, dtype=np.float64)
    q = q / np.linalg.norm(q)
    sims = [(float(c[i] @ q), i) for i in range(len(c))]
    sims.sort(key=lambda t: (-t[0], t[1]))
    return [i for _, i in sims], [s for s, _ in sims]


def oracle_average_precision(relevance, truncate=None):
    rel = list(relevance)
    total = sum(rel)
    cut = rel if truncate is None else rel[:truncate]
    denom = total if truncate is None else min(total, truncate)
    hits, score = 0, 0.0
    for rank, flag in enumerate(cut, start=1):
        if flag:
            hits += 1
            score += hits / rank
    return score / denom


# ---------------------------------------------------------------------------
# gradient checks

_TINY_VIT = modelmod.EncoderConfig(kind="vit", channels=1, height=16, width=16,
                                   feature_dim=12, patch_size=8, depth=2, heads=2,
                                   token_dim=16)
_TINY_MLP = modelmod.EncoderConfig(kind="mlp", channels=1, height=16, width=16,
                                   feature_dim=12, mlp_hidden=(24,))
_TINY_PROJ = modelmod.ProjectionConfig(hidden=16, out_dim=8)


def _flatten_params(params):
    names = list(params.keys())
    sizes = [params[n].data.size for n in names]
    flat = np.concatenate([params[n].data.reshape(-1) for n in names])
    return names, sizes, flat


def _rebuild(names, sizes, shapes, flat, requires_grad):
    out = {}
    offset = 0
    for name, size in zip(names, sizes):
        out[name] = ad.Tensor(flat[offset:offset + size].reshape(shapes[name]),
                              requires_grad=requires_grad, dtype=np.float64)
        offset += size
    return out


def gradcheck_loss(loss_name: str, encoder_kind: str, seed: int,
                   samples_per_tensor: int = 4, h: float = 1e-5):
    """Compare backward() against central differences for one loss/encoder pair.

    Runs in float64 on tiny dimensions; finite differences are sampled at a
    few coordinates of every parameter tensor. Returns the max relative error.
    """
    enc_cfg = _TINY_VIT if encoder_kind == "vit" else _TINY_MLP
    g = rng.stream(seed, "gradcheck", loss_name, encoder_kind)
    batch = 4
    x = g.normal(0.0, 1.0, size=(batch, 1, enc_cfg.height, enc_cfg.width))
    labels = np.array([0, 1, 0, 1])

    params = modelmod.init_encoder_params(enc_cfg, seed, dtype=np.float64)
    if loss_name == "ce":
        params.update(modelmod.init_classifier_params(enc_cfg.feature_dim, 2, seed,
                                                      dtype=np.float64))
    else:
        params.update(modelmod.init_projection_params(_TINY_PROJ, enc_cfg.feature_dim,
                                                      seed, dtype=np.float64))
    names, sizes, flat = _flatten_params(params)
    shapes = {n: params[n].data.shape for n in names}
    spec = lossmod.LossSpec(loss_name)

    def loss_of(p):
        xa = ad.Tensor(x, dtype=np.float64)
        if loss_name == "ce":
            feats = modelmod.encoder_forward(p, enc_cfg, xa)
            return lossmod.cross_entropy(modelmod.classifier_forward(p, feats), labels)
        xb = ad.Tensor(np.roll(x, 1, axis=2), dtype=np.float64)
        fa = modelmod.encoder_forward(p, enc_cfg, xa)
        fb = modelmod.encoder_forward(p, enc_cfg, xb)
        return lossmod.apply_contrastive(spec, modelmod.projection_forward(p, fa),
                                         modelmod.projection_forward(p, fb), labels)

    live = _rebuild(names, sizes, shapes, flat, requires_grad=True)
    ad.backward(loss_of(live))
    analytic = np.concatenate([live[n].grad.reshape(-1) for n in names])

    pick = []
    offset = 0
    for size in sizes:
        k = min(samples_per_tensor, size)
        pick.extend(int(i) for i in offset + g.choice(size, size=k, replace=False))
        offset += size

    def f(flat_tensor):
        return loss_of(_rebuild(names, sizes, shapes, flat_tensor.data, requires_grad=False))

    numeric = ad.finite_diff_grad_at(f, ad.Tensor(flat, dtype=np.float64), pick, h=h)
    picked_analytic = analytic[pick]
    denom = np.maximum(np.maximum(np.abs(numeric), np.abs(picked_analytic)), 1e-6)
    return float(np.max(np.abs(numeric - picked_analytic) / denom))


def gradcheck_table(loss_names=None, seeds=(0,), encoder_kinds=("mlp", "vit")):
    """Pass/fail rows: (loss, encoder, seed, max_rel_err, ok)."""
    rows = []
    for name in loss_names or lossmod.LOSS_NAMES:
        for kind in encoder_kinds:
            for seed in seeds:
                err = gradcheck_loss(name, kind, seed)
                rows.append((name, kind, seed, err, err < GRADCHECK_TOL))
    return rows


# ---------------------------------------------------------------------------
# invariant suite

def _check(name, ok, detail=""):
    return (name, bool(ok), detail)


def run_invariant_suite(seed: int = 0):
    """Loss identities, oracle equivalences, and renderer symmetry checks."""
    checks = []
    g = rng.stream(seed, "verify")

    # closed forms on all-identical embeddings
    ones4 = ad.Tensor(np.tile([1.0, 0.0, 0.0], (4, 1)), dtype=np.float64)
    ones8 = ad.Tensor(np.tile([1.0, 0.0, 0.0], (8, 1)), dtype=np.float64)
    v = lossmod.simclr_ntxent(ones4, 0.07).item()
    checks.append(_check("simclr identical (2N=4) = ln 3", abs(v - math.log(3)) < 1e-6, f"{v:.8f}"))
    v = lossmod.info_nce(ones4, ones4, 0.07).item()
    checks.append(_check("infonce identical (N=4) = ln 4", abs(v - math.log(4)) < 1e-6, f"{v:.8f}"))
    v = lossmod.supcon(ones4, [0, 1, 0, 1], 0.07).item()
    checks.append(_check("supcon identical 2 classes = ln 3", abs(v - math.log(3)) < 1e-6, f"{v:.8f}"))
    v = lossmod.sincere(ones4, [0, 1, 0, 1], 0.07).item()
    checks.append(_check("sincere identical 2 classes = ln 3", abs(v - math.log(3)) < 1e-6, f"{v:.8f}"))
    eps, tau = 0.25, 0.07
    v = lossmod.eps_sup_infonce(ones4, [0, 1, 0, 1], tau, eps).item()
    want = math.log(1.0 + 2.0 * math.exp(eps / tau))
    checks.append(_check("eps_supinfonce identical = log(1+2e^(eps/tau))",
                         abs(v - want) < 1e-6, f"{v:.8f} vs {want:.8f}"))
    v = lossmod.cross_entropy(ad.Tensor(np.zeros((3, 10)), dtype=np.float64), [0, 1, 2]).item()
    checks.append(_check("cross-entropy uniform C=10 = ln 10", abs(v - math.log(10)) < 1e-6, f"{v:.8f}"))

    # oracle equivalence on random batches
    worst = 0.0
    for trial in range(5):
        n = int(g.integers(2, 8))
        d = int(g.integers(3, 10))
        z = g.normal(size=(2 * n, d))
        labels = np.concatenate([g.integers(0, 2, size=n)] * 2)
        if len(set(labels.tolist())) < 2:
            labels[0] = 1 - labels[0]
            labels[n] = labels[0]
        zt = ad.Tensor(z, dtype=np.float64)
        worst = max(worst, abs(lossmod.simclr_ntxent(zt, tau).item() - oracle_simclr(z, tau)))
        worst = max(worst, abs(lossmod.supcon(zt, labels, tau).item() - oracle_supcon(z, labels, tau)))
        worst = max(worst, abs(lossmod.sincere(zt, labels, tau).item()
                               - oracle_margin_sup(z, labels, tau, 0.0)))
        worst = max(worst, abs(lossmod.eps_sup_infonce(zt, labels, tau, eps).item()
                               - oracle_margin_sup(z, labels, tau, eps)))
        za, zb = g.normal(size=(n + 2, d)), g.normal(size=(n + 2, d))
        worst = max(worst, abs(lossmod.info_nce(ad.Tensor(za, dtype=np.float64),
                                                ad.Tensor(zb, dtype=np.float64), tau).item()
                               - oracle_info_nce(za, zb, tau)))
    checks.append(_check("contrastive losses match naive oracles", worst < 1e-6, f"max |diff| {worst:.2e}"))

    # eps = 0 reduces to sincere
    z = g.normal(size=(12, 6))
    labels = np.concatenate([g.integers(0, 3, size=6)] * 2)
    labels[0], labels[6] = 0, 0
    labels[1], labels[7] = 1, 1
    a = lossmod.eps_sup_infonce(ad.Tensor(z, dtype=np.float64), labels, tau, 0.0).item()
    b = lossmod.sincere(ad.Tensor(z, dtype=np.float64), labels, tau).item()
    checks.append(_check("eps_supinfonce(eps=0) == sincere", abs(a - b) < 1e-9, f"|diff| {abs(a - b):.2e}"))

    # rotation invariance
    q, _ = np.linalg.qr(g.normal(size=(6, 6)))
    zq = z @ q
    a = lossmod.supcon(ad.Tensor(z, dtype=np.float64), labels, tau).item()
    b = lossmod.supcon(ad.Tensor(zq, dtype=np.float64), labels, tau).item()
    checks.append(_check("supcon invariant to orthogonal rotation", abs(a - b) < 1e-5, f"|diff| {abs(a - b):.2e}"))

    # renderer symmetry at a small size
    rp = renderer.RenderParams(image_size=48, n_views=12, elevation=30.0,
                               distance=2.5, background=0.0, supersample=1)
    cube = geometry.normalize_mesh(geometry.Mesh(*geometry._cube(), name="cube"))
    imgs = [renderer.quantize(renderer.render_view(cube, renderer.make_camera(i, rp), rp))
            for i in (0, 3)]
    dmax = int(np.abs(imgs[0].astype(int) - imgs[1].astype(int)).max())
    checks.append(_check("cube views 90 deg apart match within 1 level", dmax <= 1, f"max diff {dmax}"))

    sphere = geometry.normalize_mesh(
        geometry.generate_shape(geometry.ShapeClassSpec(0, "sphere", "sphere", (1.0, 1.0)), 7))
    ref = renderer.quantize(renderer.render_view(sphere, renderer.make_camera(0, rp), rp))
    dmax = 0
    for i in range(1, 12):
        img = renderer.quantize(renderer.render_view(sphere, renderer.make_camera(i, rp), rp))
        dmax = max(dmax, int(np.abs(ref.astype(int) - img.astype(int)).max()))
    checks.append(_check("sphere views all match within 1 level", dmax <= 1, f"max diff {dmax}"))

    # occlusion: a small back triangle leaves no trace behind a big front one
    front = geometry.Mesh(np.array([[-0.4, -0.4, 0.2], [0.4, -0.4, 0.2], [0.0, 0.45, 0.2]]),
                          np.array([[0, 1, 2]]), name="front")
    both = geometry.Mesh(np.vstack([front.vertices,
                                    [[-0.1, -0.1, -0.2], [0.1, -0.1, -0.2], [0.0, 0.12, -0.2]]]),
                         np.array([[0, 1, 2], [3, 4, 5]]), name="both")
    cam = renderer.make_camera(0, rp)
    img_front = renderer.render_view(front, cam, rp)
    img_both = renderer.render_view(both, cam, rp)
    same = np.array_equal(img_front.pixels, img_both.pixels)
    checks.append(_check("occluded triangle contributes zero pixels", same))

    # retrieval stack vs exhaustive oracles
    rows = g.normal(size=(24, 8))
    labs = g.integers(0, 3, size=24)
    qrows = g.normal(size=(6, 8))
    qlabs = g.integers(0, 3, size=6)
    corpus = datamod.EmbeddingMatrix(rows=rows.astype(np.float32), ids=[f"c{i}" for i in range(24)],
                                     labels=labs, level="shape", normalized=False,
                                     class_names=["a", "b", "c"])
    queries = datamod.EmbeddingMatrix(rows=qrows.astype(np.float32), ids=[f"q{i}" for i in range(6)],
                                      labels=qlabs, level="shape", normalized=False,
                                      class_names=["a", "b", "c"])
    preds = evalmod.knn_classify(corpus, queries, k=5)
    opreds = oracle_knn(corpus.rows, labs, queries.rows, k=5)
    checks.append(_check("k-NN equals exhaustive oracle", np.array_equal(preds, opreds)))
    rank = evalmod.retrieve(corpus, queries.rows[0], "q0")
    oidx, _ = oracle_ranking(corpus.rows, queries.rows[0])
    checks.append(_check("retrieval ranking equals oracle",
                         rank.corpus_ids == [f"c{i}" for i in oidx]))
    rel = [True, False, True, False, False]
    a = evalmod.average_precision(rel)
    b = oracle_average_precision(rel)
    checks.append(_check("average precision equals oracle", abs(a - b) < 1e-12, f"{a:.6f}"))

    return checks
