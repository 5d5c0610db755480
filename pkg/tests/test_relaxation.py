from __future__ import annotations

import itertools
import logging

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_partition, check_relax_pipeline, same_partition, unit_rows
from xmodal.embeddings import SemanticMockEncoder, SemanticMockSpec
from xmodal.errors import DegenerateInputError, InputError
from xmodal.lexicon import PromptTemplateSet
from xmodal.relaxation import (
    ClusterModel,
    NounBank,
    assign_and_filter,
    build_bank,
    embed_nouns,
    kmeans,
    select_relaxed_batch,
    select_relaxed_for_sample,
    similarity_matrix,
)


def two_blobs():
    return np.array([[0.0, 0.0], [0.2, 0.1], [0.1, 0.3], [5.0, 5.0], [5.2, 4.9], [4.8, 5.1]])


class TestKMeans:
    def test_single_center_is_mean(self, rng):
        X = rng.normal(size=(37, 5))
        model = kmeans(X, 1, seed=3)
        np.testing.assert_allclose(model.centers[0], X.mean(axis=0), atol=1e-9)

    def test_two_blobs_match_brute_force(self):
        X = two_blobs()
        labels, cost = brute_force_partition(X, 2)
        model = kmeans(X, 2, seed=0)
        assert same_partition(model.assignment, labels)
        assert model.inertia == pytest.approx(cost, abs=1e-9)

    def test_deterministic(self, rng):
        X = rng.normal(size=(50, 3))
        a, b = kmeans(X, 4, seed=11), kmeans(X, 4, seed=11)
        np.testing.assert_array_equal(a.centers, b.centers)
        np.testing.assert_array_equal(a.assignment, b.assignment)

    def test_assignment_is_nearest_center(self, rng):
        X = rng.normal(size=(60, 4))
        m = kmeans(X, 5, seed=2)
        d = ((X[:, None] - m.centers[None]) ** 2).sum(-1)
        np.testing.assert_array_equal(m.assignment, d.argmin(1))
        np.testing.assert_array_equal(m.predict(X), m.assignment)

    def test_identical_points_reseed_and_log(self, caplog):
        X = np.zeros((4, 2))
        X[3] = 1.0
        with caplog.at_level(logging.INFO, logger="xmodal.relaxation"):
            m = kmeans(X, 3, seed=0)
        assert m.num_clusters == 3
        assert np.isfinite(m.centers).all()

    def test_bad_m(self, rng):
        with pytest.raises(InputError):
            kmeans(rng.normal(size=(3, 2)), 4)
        with pytest.raises(InputError):
            kmeans(rng.normal(size=(3, 2)), 0)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), M=st.integers(1, 5))
    def test_lloyd_fixed_point(self, seed, M):
        X = np.random.default_rng(seed).normal(size=(20, 3))
        m = kmeans(X, M, seed=seed, tol=0.0, max_iter=300)
        for k in range(M):
            members = X[m.assignment == k]
            if len(members):
                np.testing.assert_allclose(m.centers[k], members.mean(0), atol=1e-9)


class TestSimilarityAndFilter:
    def test_dimension_mismatch(self):
        with pytest.raises(InputError):
            similarity_matrix(np.ones((2, 3)), np.ones((4, 5)))

    def test_softmax_rank_equivalence(self, rng):
        S = rng.normal(size=(3, 12))
        rows = np.exp(S) / np.exp(S).sum(axis=1, keepdims=True)
        cols = np.exp(S) / np.exp(S).sum(axis=0, keepdims=True)
        for k in range(3):
            np.testing.assert_array_equal(np.argsort(-S[k], kind="stable"), np.argsort(-rows[k], kind="stable"))
        # normalising over clusters keeps each noun's best cluster
        np.testing.assert_array_equal(S.argmax(0), cols.argmax(0))

    def test_hand_built_two_by_four(self):
        centers = np.array([[1.0, 0.0], [0.0, 1.0]])
        nouns = unit_rows([[0.9, 0.1], [0.6, 0.4], [0.2, 0.8], [0.45, 0.55]])
        cm = ClusterModel(centers, np.zeros(0, dtype=int), 0.0)
        bank = assign_and_filter(cm, ["a", "b", "c", "d"], nouns, top_k=1)
        # a, b -> cluster 0 (a stronger); c, d -> cluster 1 (c stronger)
        assert bank.nouns == ("a", "c")
        np.testing.assert_array_equal(bank.cluster_ids, [0, 1])
        bank2 = assign_and_filter(cm, ["a", "b", "c", "d"], nouns, top_k=5)
        assert bank2.nouns == ("a", "b", "c", "d")

    def test_empty_cluster_warns(self, caplog):
        centers = np.array([[1.0, 0.0], [-1.0, 0.0]])
        cm = ClusterModel(centers, np.zeros(0, dtype=int), 0.0)
        with caplog.at_level(logging.WARNING):
            bank = assign_and_filter(cm, ["x", "y"], unit_rows([[1, 0.1], [1, -0.2]]), top_k=3)
        assert "cluster 1" in caplog.text
        assert len(bank.entries_in_cluster(1)) == 0

    def test_rejects_unnormalised(self):
        cm = ClusterModel(np.eye(2), np.zeros(0, dtype=int), 0.0)
        with pytest.raises(InputError):
            assign_and_filter(cm, ["a"], np.array([[2.0, 0.0]]))


class TestAlgorithmEquivalence:
    """The whole relax pipeline against explicit enumeration on a 12-noun, 8-image instance."""

    def test_pipeline_equals_brute_force(self):
        check_relax_pipeline()


class TestNounBank:
    def make(self, learnable=True):
        vecs = unit_rows(np.random.default_rng(0).normal(size=(5, 3)))
        return NounBank([f"w{i}" for i in range(5)], vecs, [0, 0, 1, 1, 2], 3, learnable=learnable)

    def test_pretrained_read_only(self):
        bank = self.make()
        with pytest.raises(ValueError):
            bank.pretrained[0, 0] = 1.0

    def test_renormalize_after_update(self):
        bank = self.make()
        with torch.no_grad():
            bank.current.mul_(3.0).add_(0.1)
        bank.renormalize_()
        np.testing.assert_allclose(np.linalg.norm(bank.snapshot(), axis=1), 1.0, atol=1e-6)
        assert bank.drift_stats()["mean_cos"] < 1.0

    def test_frozen_has_no_grad(self):
        assert not self.make(learnable=False).current.requires_grad
        assert self.make().current.requires_grad

    def test_copy_is_independent(self):
        bank = self.make()
        other = bank.copy()
        with torch.no_grad():
            other.current.zero_()
        assert bank.snapshot().any()

    def test_save_load_roundtrip(self, tmp_path):
        bank = self.make()
        bank.save(tmp_path / "bank")
        back = NounBank.load(tmp_path / "bank")
        assert back.nouns == bank.nouns
        np.testing.assert_array_equal(back.snapshot(), bank.snapshot())
        assert back.checksum() == bank.checksum()
        assert (tmp_path / "bank" / "selection.tsv").read_text().startswith("noun\tcluster")


class TestSelection:
    def test_random_in_cluster_stays_in_cluster_and_is_seeded(self):
        bank = TestNounBank().make()
        imgs = unit_rows(np.random.default_rng(1).normal(size=(6, 3)))
        clusters = np.array([0, 1, 2, 0, 1, 2])
        a = select_relaxed_batch(bank, imgs, clusters, "random-in-cluster", seeds=list(range(6)))
        b = select_relaxed_batch(bank, imgs, clusters, "random-in-cluster", seeds=list(range(6)))
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(bank.cluster_ids[a], clusters)

    def test_empty_cluster_falls_back_to_global_nearest(self):
        bank = TestNounBank().make()
        v = unit_rows([[0.3, -0.2, 0.9]])
        got = select_relaxed_batch(bank, v, np.array([7]))
        assert got[0] == int(np.argmax(bank.snapshot() @ v[0].astype(np.float32)))

    def test_single_sample_wrapper(self):
        bank = TestNounBank().make()
        cm = ClusterModel(np.eye(3), np.zeros(0, dtype=int), 0.0)
        v = np.array([0.0, 1.0, 0.0])
        idx = select_relaxed_for_sample(bank, v, cm)
        assert bank.cluster_ids[idx] == 1

    def test_empty_bank(self):
        bank = NounBank([], np.zeros((0, 3)), [], 1)
        with pytest.raises(DegenerateInputError):
            select_relaxed_batch(bank, np.ones((1, 3)), np.array([0]))


class TestEmbedNouns:
    def test_template_average_then_normalise(self):
        enc = SemanticMockEncoder(SemanticMockSpec(num_classes=2), d_txt=8, d_img=8, vocabulary={"cat": ("class", [0])})
        tpl = PromptTemplateSet(("a photo of a {}", "a drawing of a {}"))
        names, vecs = embed_nouns(["cat"], tpl, enc)
        ref = enc.encode_text("a photo of a cat").astype(np.float64) + enc.encode_text("a drawing of a cat")
        np.testing.assert_allclose(vecs[0], ref / np.linalg.norm(ref), atol=1e-6)
        assert names == ["cat"]

    def test_build_bank_end_to_end(self):
        enc = SemanticMockEncoder(
            SemanticMockSpec(num_classes=3),
            d_txt=8,
            d_img=8,
            vocabulary={f"syn{c}{j}": ("synonym", [c]) for c in range(3) for j in range(3)},
        )
        imgs = np.stack([enc.encode_image(f"i{i}", i % 3) for i in range(30)])
        bank, model = build_bank([f"syn{c}{j}" for c in range(3) for j in range(3)], PromptTemplateSet(), enc, imgs, 3, top_k=2)
        assert len(bank) == 6
        for k in range(3):
            assert len(bank.entries_in_cluster(k)) == 2
