"""Objective functions: closed forms, naive-loop oracles, invariances, gradients."""

import math

import numpy as np
import pytest

import mvshape.autodiff as ad
import mvshape.losses as lm
from mvshape.errors import (
    AnchorWithoutNegative,
    AnchorWithoutPositive,
    LabelOutOfRange,
    ShapeMismatch,
)

TAU = 0.07


def t64(arr):
    return ad.Tensor(np.asarray(arr, dtype=np.float64))


def unit_rows(z):
    z = np.asarray(z, dtype=np.float64)
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def identical_rows(n, d=3):
    return np.tile(np.eye(d)[0], (n, 1))


def random_two_view_batch(rng, n, d, n_classes=3):
    z = rng.normal(size=(2 * n, d))
    labels = rng.integers(0, n_classes, size=n)
    while len(set(labels.tolist())) < 2:
        labels = rng.integers(0, n_classes, size=n)
    return z, np.concatenate([labels, labels])


# --- naive reference implementations, used only by these tests ---

def naive_infonce(z_a, z_b, tau):
    a, b = unit_rows(z_a), unit_rows(z_b)
    total = 0.0
    for i in range(len(a)):
        denom = sum(math.exp(a[i] @ b[k] / tau) for k in range(len(b)))
        total -= math.log(math.exp(a[i] @ b[i] / tau) / denom)
    return total / len(a)


def naive_simclr(z, tau):
    zn = unit_rows(z)
    rows = len(zn)
    n = rows // 2
    total = 0.0
    for i in range(rows):
        denom = sum(math.exp(zn[i] @ zn[k] / tau) for k in range(rows) if k != i)
        total -= math.log(math.exp(zn[i] @ zn[(i + n) % rows] / tau) / denom)
    return total / rows


def naive_supcon(z, labels, tau):
    zn = unit_rows(z)
    rows = len(zn)
    total = 0.0
    for i in range(rows):
        pos = [p for p in range(rows) if p != i and labels[p] == labels[i]]
        denom = sum(math.exp(zn[i] @ zn[k] / tau) for k in range(rows) if k != i)
        total += sum(-math.log(math.exp(zn[i] @ zn[p] / tau) / denom) for p in pos) / len(pos)
    return total / rows


def naive_margin(z, labels, tau, eps):
    zn = unit_rows(z)
    rows = len(zn)
    total = 0.0
    for i in range(rows):
        pos = [p for p in range(rows) if p != i and labels[p] == labels[i]]
        neg_mass = sum(math.exp((zn[i] @ zn[k] + eps) / tau)
                       for k in range(rows) if labels[k] != labels[i])
        total += sum(-math.log(math.exp(zn[i] @ zn[p] / tau)
                               / (math.exp(zn[i] @ zn[p] / tau) + neg_mass))
                     for p in pos) / len(pos)
    return total / rows


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = lm.cross_entropy(t64(np.zeros((4, 10))), [0, 3, 5, 9])
        assert loss.item() == pytest.approx(math.log(10), abs=1e-9)

    def test_binary_uniform(self):
        assert lm.cross_entropy(t64([[0.0, 0.0]]), [0]).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_margin_monotone(self):
        vals = []
        for margin in (1.0, 10.0, 100.0):
            logits = np.zeros((1, 4))
            logits[0, 2] = margin
            vals.append(lm.cross_entropy(t64(logits), [2]).item())
        assert vals[0] > vals[1] > vals[2]

    def test_label_out_of_range(self):
        with pytest.raises(LabelOutOfRange):
            lm.cross_entropy(t64(np.zeros((2, 3))), [0, 3])


class TestInfoNce:
    def test_identical_embeddings(self):
        z = t64(identical_rows(4))
        assert lm.info_nce(z, z, TAU).item() == pytest.approx(math.log(4), abs=1e-9)

    def test_orthogonal_negative_closed_form(self):
        z_a = t64(np.eye(2))
        z_b = t64(np.eye(2))
        expected = math.log(1.0 + math.exp(-1.0 / TAU))
        assert lm.info_nce(z_a, z_b, TAU).item() == pytest.approx(expected, rel=1e-6)

    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
        v1 = lm.info_nce(t64(a), t64(b), TAU).item()
        v2 = lm.info_nce(t64(7.0 * a), t64(0.3 * b), TAU).item()
        assert v1 == pytest.approx(v2, abs=1e-9)

    def test_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            a, b = rng.normal(size=(6, 5)), rng.normal(size=(6, 5))
            assert lm.info_nce(t64(a), t64(b), TAU).item() == pytest.approx(
                naive_infonce(a, b, TAU), abs=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            lm.info_nce(t64(np.ones((3, 2))), t64(np.ones((4, 2))), TAU)


class TestSimclr:
    def test_identical_embeddings(self):
        assert lm.simclr_ntxent(t64(identical_rows(4)), TAU).item() == pytest.approx(
            math.log(3), abs=1e-9)

    def test_view_swap_symmetry(self):
        rng = np.random.default_rng(2)
        za, zb = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
        v1 = lm.simclr_ntxent(t64(np.vstack([za, zb])), TAU).item()
        v2 = lm.simclr_ntxent(t64(np.vstack([zb, za])), TAU).item()
        assert v1 == pytest.approx(v2, abs=1e-9)

    def test_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            z = rng.normal(size=(8, 4))
            assert lm.simclr_ntxent(t64(z), TAU).item() == pytest.approx(
                naive_simclr(z, TAU), abs=1e-6)


class TestSupcon:
    def test_identical_two_classes(self):
        assert lm.supcon(t64(identical_rows(4)), [0, 1, 0, 1], TAU).item() == pytest.approx(
            math.log(3), abs=1e-9)

    def test_single_class_all_positives(self):
        # with |P(i)| = 3 and equal similarities: each term is ln 3 as well
        assert lm.supcon(t64(identical_rows(4)), [0, 0, 0, 0], TAU).item() == pytest.approx(
            math.log(3), abs=1e-9)

    def test_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            z, labels = random_two_view_batch(rng, 4, 5)
            assert lm.supcon(t64(z), labels, TAU).item() == pytest.approx(
                naive_supcon(z, labels, TAU), abs=1e-6)

    def test_anchor_without_positive(self):
        with pytest.raises(AnchorWithoutPositive):
            lm.supcon(t64(np.eye(3)), [0, 1, 2], TAU)


class TestSincere:
    def test_identical_two_classes(self):
        assert lm.sincere(t64(identical_rows(4)), [0, 1, 0, 1], TAU).item() == pytest.approx(
            math.log(3), abs=1e-9)

    def test_no_intra_class_repulsion_vs_supcon(self):
        # 2N=6 with a class of four: per positive the denominator holds that
        # positive plus the two negatives (-> ln 3), while supcon divides by
        # all five non-self rows (-> ln 5)
        z = t64(identical_rows(6))
        labels = [0, 0, 0, 0, 1, 1]
        sin = lm.sincere(z, labels, TAU, per_anchor=True).data
        sup = lm.supcon(z, labels, TAU, per_anchor=True).data
        for anchor in range(4):
            assert sin[anchor] == pytest.approx(math.log(3), abs=1e-9)
        assert np.all(np.abs(sup - math.log(5)) < 1e-9)

    def test_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(5):
            z, labels = random_two_view_batch(rng, 4, 5)
            assert lm.sincere(t64(z), labels, TAU).item() == pytest.approx(
                naive_margin(z, labels, TAU, 0.0), abs=1e-6)

    def test_anchor_without_negative(self):
        with pytest.raises(AnchorWithoutNegative):
            lm.sincere(t64(identical_rows(4)), [0, 0, 0, 0], TAU)


class TestEpsSupInfoNce:
    def test_reduces_to_sincere_at_zero(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            n = int(rng.integers(2, 17))
            d = int(rng.integers(2, 17))
            z, labels = random_two_view_batch(rng, n, d)
            a = lm.eps_sup_infonce(t64(z), labels, TAU, 0.0).item()
            b = lm.sincere(t64(z), labels, TAU).item()
            assert abs(a - b) < 1e-9

    def test_identical_closed_form(self):
        eps = 0.25
        expected = math.log(1.0 + 2.0 * math.exp(eps / TAU))
        got = lm.eps_sup_infonce(t64(identical_rows(4)), [0, 1, 0, 1], TAU, eps).item()
        assert got == pytest.approx(expected, rel=1e-9)

    def test_monotone_in_eps(self):
        rng = np.random.default_rng(7)
        z, labels = random_two_view_batch(rng, 4, 6)
        vals = [lm.eps_sup_infonce(t64(z), labels, TAU, e).item()
                for e in (0.0, 0.1, 0.25, 0.5)]
        assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))

    def test_oracle(self):
        rng = np.random.default_rng(8)
        for _ in range(5):
            z, labels = random_two_view_batch(rng, 4, 5)
            assert lm.eps_sup_infonce(t64(z), labels, TAU, 0.25).item() == pytest.approx(
                naive_margin(z, labels, TAU, 0.25), abs=1e-6)


class TestSharedProperties:
    def _losses_on(self, z, labels):
        n = len(labels) // 2
        return {
            "infonce": lm.info_nce(t64(z[:n]), t64(z[n:2 * n]), TAU).item(),
            "simclr": lm.simclr_ntxent(t64(z), TAU).item(),
            "supcon": lm.supcon(t64(z), labels, TAU).item(),
            "sincere": lm.sincere(t64(z), labels, TAU).item(),
            "eps": lm.eps_sup_infonce(t64(z), labels, TAU, 0.25).item(),
        }

    def test_permutation_invariance(self):
        rng = np.random.default_rng(9)
        z, labels = random_two_view_batch(rng, 5, 6)
        base = {
            "supcon": lm.supcon(t64(z), labels, TAU).item(),
            "sincere": lm.sincere(t64(z), labels, TAU).item(),
            "eps": lm.eps_sup_infonce(t64(z), labels, TAU, 0.25).item(),
        }
        perm = rng.permutation(len(labels))
        zp, lp = z[perm], labels[perm]
        assert abs(lm.supcon(t64(zp), lp, TAU).item() - base["supcon"]) < 1e-6
        assert abs(lm.sincere(t64(zp), lp, TAU).item() - base["sincere"]) < 1e-6
        assert abs(lm.eps_sup_infonce(t64(zp), lp, TAU, 0.25).item() - base["eps"]) < 1e-6

    def test_pairing_permutation_for_simclr(self):
        # permute pairs consistently: rows i and i+N move together
        rng = np.random.default_rng(10)
        n = 5
        z, _ = random_two_view_batch(rng, n, 4)
        base = lm.simclr_ntxent(t64(z), TAU).item()
        perm = rng.permutation(n)
        zp = np.vstack([z[:n][perm], z[n:][perm]])
        assert abs(lm.simclr_ntxent(t64(zp), TAU).item() - base) < 1e-6

    def test_rotation_invariance(self):
        rng = np.random.default_rng(11)
        z, labels = random_two_view_batch(rng, 5, 6)
        q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
        base = self._losses_on(z, labels)
        rotated = self._losses_on(z @ q, labels)
        for name in base:
            assert abs(base[name] - rotated[name]) < 1e-5, name

    def test_perfect_separation_limit(self):
        # two classes at antipodal unit vectors: positives at +1, negatives at -1
        z = np.tile(np.eye(4)[0], (4, 1))
        z[1] *= -1.0
        z[3] *= -1.0
        labels = np.array([0, 1, 0, 1])
        assert lm.simclr_ntxent(t64(z), TAU).item() < 1e-5
        assert lm.supcon(t64(z), labels, TAU).item() < 1e-5
        assert lm.sincere(t64(z), labels, TAU).item() < 1e-5
        assert lm.eps_sup_infonce(t64(z), labels, TAU, 0.25).item() < 1e-5
        assert lm.info_nce(t64(z[[0, 1]]), t64(z[[2, 3]]), TAU).item() < 1e-5

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(12)
        z, labels = random_two_view_batch(rng, 3, 4)

        builders = {
            "simclr": lambda t: lm.simclr_ntxent(t, TAU),
            "supcon": lambda t: lm.supcon(t, labels, TAU),
            "sincere": lambda t: lm.sincere(t, labels, TAU),
            "eps": lambda t: lm.eps_sup_infonce(t, labels, TAU, 0.25),
        }
        for name, build in builders.items():
            x = ad.Tensor(z, requires_grad=True, dtype=np.float64)
            ad.backward(build(x))
            numeric = ad.finite_diff_grad(build, t64(z), h=1e-6)
            denom = np.maximum(np.maximum(np.abs(numeric), np.abs(x.grad)), 1e-6)
            assert np.max(np.abs(numeric - x.grad) / denom) < 1e-3, name
