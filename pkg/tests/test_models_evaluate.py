import numpy as np
import pytest

from simdistill.data import DomainShift, DomainSpec, generate_domain, split_query_gallery
from simdistill.errors import ProtocolError, ShapeMismatchError
from simdistill.evaluate import (
    FeatureBatch,
    cmc_map,
    complexity_report,
    evaluate_model,
    extract_features,
    labeled_features,
)
from simdistill.models import BackboneModel, load_model, model_from_state, model_state, save_model
from simdistill.tensor import Tensor2D


def identity_model(dim):
    """No hidden layers; embedding head initialized to the identity map."""
    model = BackboneModel(dim, [], dim, seed=0)
    model.embed_head[0].values[...] = np.eye(dim)
    model.embed_head[1].values[...] = 0.0
    return model


def toy_dataset(seed=0, ids=8, sppc=8):
    return generate_domain(
        DomainSpec(
            domain_id="toy",
            num_identities=ids,
            cameras=2,
            samples_per_identity_per_camera=sppc,
            input_dim=6,
            shift=DomainShift(noise_std=0.05),
            seed=seed,
        )
    )


class TestBackboneModel:
    def test_embed_shapes(self):
        model = BackboneModel(6, [16, 16], 8, seed=1)
        out = model.embed(np.zeros((5, 6)))
        assert out.shape == (5, 8)

    def test_width_scale_rounds_hidden_dims(self):
        model = BackboneModel(6, [32, 32], 8, seed=1, width_scale=0.25)
        assert model.hidden_dims == [8, 8]

    def test_same_seed_same_parameters(self):
        a = BackboneModel(6, [8], 4, seed=5)
        b = BackboneModel(6, [8], 4, seed=5)
        for p, q in zip(a.parameters(), b.parameters()):
            assert (p.values == q.values).all()

    def test_clone_is_independent(self):
        a = BackboneModel(6, [8], 4, seed=5)
        b = a.clone()
        b.layers[0][0].values += 1.0
        assert not (a.layers[0][0].values == b.layers[0][0].values).all()

    def test_checkpoint_round_trip_bit_exact(self, tmp_path):
        model = BackboneModel(6, [8, 8], 4, num_classes=10, seed=3, width_scale=0.5)
        path = tmp_path / "model.ckpt"
        save_model(model, path, extra={"epoch": 7})
        back = load_model(path)
        for p, q in zip(model.parameters(), back.parameters()):
            assert (p.values == q.values).all()
        assert back.hidden_dims == model.hidden_dims
        assert back.width_scale == model.width_scale

    def test_checkpoint_format_tag_checked(self):
        state = model_state(BackboneModel(4, [4], 2, seed=0))
        state["format"] = "something-else"
        with pytest.raises(Exception):
            model_from_state(state)


class TestExtractFeatures:
    def test_identity_model_returns_normalized_inputs(self):
        ds = toy_dataset()
        fb = extract_features(identity_model(6), ds)
        expected = ds.inputs / np.linalg.norm(ds.inputs, axis=1, keepdims=True)
        np.testing.assert_allclose(fb.feats.values, expected, atol=1e-12)

    def test_permutation_equivariance(self):
        ds = toy_dataset()
        model = BackboneModel(6, [8], 4, seed=2)
        fb = extract_features(model, ds)
        perm = np.random.default_rng(0).permutation(ds.num_samples)
        fb_perm = extract_features(model, ds.subset(perm))
        np.testing.assert_allclose(fb_perm.feats.values, fb.feats.values[perm], atol=0)

    def test_deterministic(self):
        ds = toy_dataset()
        model = BackboneModel(6, [8], 4, seed=2)
        a = extract_features(model, ds).feats.values
        b = extract_features(model, ds).feats.values
        assert (a == b).all()

    def test_dim_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            extract_features(BackboneModel(4, [8], 4, seed=0), toy_dataset())


def fb(feats, ids, cams):
    from simdistill import tensor as T

    norm = T.l2_normalize_rows(Tensor2D(np.asarray(feats, dtype=float)))
    return FeatureBatch(norm, np.asarray(ids), np.asarray(cams), "t")


def ap_oracle(affinities, rel_flags):
    """Independent AP: explicit walk over the ranked (affinity, index) list."""
    order = sorted(range(len(affinities)), key=lambda i: (-affinities[i], i))
    hits, ap = 0, 0.0
    for pos, gi in enumerate(order):
        if rel_flags[gi]:
            hits += 1
            ap += hits / (pos + 1)
    return ap / hits


class TestCmcMap:
    def test_perfect_single_query(self):
        query = fb([[1.0, 0.0]], [5], [0])
        gallery = fb([[1.0, 0.1], [0.0, 1.0]], [5, 6], [1, 1])
        metrics = cmc_map(query, gallery)
        assert metrics.mAP == 1.0
        assert metrics.rank1 == 1.0

    def test_relevant_at_ranks_one_and_three(self):
        # gallery affinities rank: relevant, distractor, relevant
        query = fb([[1.0, 0.0]], [1], [0])
        gallery = fb(
            [[1.0, 0.05], [1.0, 0.3], [1.0, 0.8], [-1.0, 0.0]],
            [1, 2, 1, 3],
            [1, 1, 1, 1],
        )
        metrics = cmc_map(query, gallery)
        assert abs(metrics.mAP - 5.0 / 6.0) < 1e-12

    def test_cross_camera_exclusion(self):
        query = fb([[1.0, 0.0]], [1], [0])
        # same identity same camera entry would rank first but is excluded
        gallery = fb([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]], [1, 1, 2], [0, 1, 1])
        metrics = cmc_map(query, gallery, protocol="cross_camera")
        assert metrics.mAP == 1.0
        assert len(metrics.cmc) == 2

    def test_zero_match_query_rejected(self):
        query = fb([[1.0, 0.0]], [1], [0])
        gallery = fb([[1.0, 0.0]], [1], [0])  # only same-id same-cam
        with pytest.raises(ProtocolError, match="query 0"):
            cmc_map(query, gallery)

    def test_matches_oracle_exactly_random(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            nq = int(rng.integers(1, 11))
            ng = int(rng.integers(5, 51))
            qf = rng.normal(size=(nq, 4))
            gf = rng.normal(size=(ng, 4))
            q_ids = rng.integers(0, 4, size=nq)
            g_ids = rng.integers(0, 4, size=ng)
            q_cams = rng.integers(0, 2, size=nq)
            g_cams = rng.integers(0, 2, size=ng)
            query, gallery = fb(qf, q_ids, q_cams), fb(gf, g_ids, g_cams)
            aff = query.feats.values @ gallery.feats.values.T
            valid = all(
                ((g_ids == q_ids[i]) & ~((g_ids == q_ids[i]) & (g_cams == q_cams[i]))).any()
                for i in range(nq)
            )
            if not valid:
                continue
            metrics = cmc_map(query, gallery)
            total = 0.0
            for i in range(nq):
                keep = ~((g_ids == q_ids[i]) & (g_cams == q_cams[i]))
                total += ap_oracle(aff[i][keep].tolist(), (g_ids[keep] == q_ids[i]).tolist())
            assert metrics.mAP == total / nq

    def test_cmc_nondecreasing_and_bounded(self):
        rng = np.random.default_rng(8)
        qf, gf = rng.normal(size=(6, 4)), rng.normal(size=(30, 4))
        q_ids = rng.integers(0, 3, size=6)
        g_ids = np.concatenate([np.arange(3), rng.integers(0, 3, size=27)])
        metrics = cmc_map(fb(qf, q_ids, np.zeros(6)), fb(gf, g_ids, np.ones(30)))
        assert (np.diff(metrics.cmc) >= 0).all()
        assert metrics.cmc[-1] <= 1.0
        assert metrics.mAP <= metrics.cmc[-1]

    def test_gallery_permutation_invariance(self):
        rng = np.random.default_rng(9)
        qf, gf = rng.normal(size=(4, 3)), rng.normal(size=(20, 3))
        q_ids, g_ids = rng.integers(0, 3, 4), rng.integers(0, 3, 20)
        base = cmc_map(fb(qf, q_ids, np.zeros(4)), fb(gf, g_ids, np.ones(20)))
        perm = rng.permutation(20)
        shuffled = cmc_map(fb(qf, q_ids, np.zeros(4)), fb(gf[perm], g_ids[perm], np.ones(20)))
        assert abs(base.mAP - shuffled.mAP) < 1e-12
        np.testing.assert_allclose(base.cmc, shuffled.cmc, atol=1e-12)

    def test_affinity_equals_reversed_distance_ranking(self):
        rng = np.random.default_rng(10)
        q = rng.normal(size=(1, 4))
        g = rng.normal(size=(15, 4))
        qn = q / np.linalg.norm(q)
        gn = g / np.linalg.norm(g, axis=1, keepdims=True)
        by_affinity = np.argsort(-(qn @ gn.T)[0], kind="stable")
        dist = ((qn[:, None] - gn[None, :]) ** 2).sum(-1)[0]
        by_distance = np.argsort(dist, kind="stable")
        assert (by_affinity == by_distance).all()


class TestEvaluateModel:
    def test_identity_model_on_separable_data(self):
        ds = toy_dataset(seed=4)
        query, gallery = split_query_gallery(ds, 0.4, seed=1)
        metrics = evaluate_model(identity_model(6), query, gallery)
        assert metrics.mAP > 0.9  # prototypes are well separated vs noise 0.05

    def test_random_features_near_chance(self):
        rng = np.random.default_rng(11)
        maps = []
        for seed in range(30):
            gen = np.random.default_rng(seed)
            nq, ng = 8, 40
            q_ids = gen.integers(0, 4, nq)
            g_ids = np.concatenate([np.arange(4), gen.integers(0, 4, ng - 4)])
            query = fb(gen.normal(size=(nq, 8)), q_ids, np.zeros(nq))
            gallery = fb(gen.normal(size=(ng, 8)), g_ids, np.ones(ng))
            maps.append(cmc_map(query, gallery).mAP)
        rel_fraction = 0.25
        assert abs(np.mean(maps) - rel_fraction) < 0.1


class TestComplexityReport:
    def test_single_affine_hand_count(self):
        model = BackboneModel(4, [], 2, seed=0)
        report = complexity_report(model)
        assert report.num_parameters == 4 * 2 + 2
        assert report.flops_per_sample == 2 * 4 * 2

    def test_hidden_stack_hand_count(self):
        model = BackboneModel(4, [3], 2, seed=0)
        report = complexity_report(model)
        assert report.num_parameters == (4 * 3 + 3) + (3 * 2 + 2)
        assert report.flops_per_sample == 2 * 4 * 3 + 2 * 3 * 2 + 3

    def test_classifier_counts_when_attached(self):
        model = BackboneModel(4, [], 2, num_classes=5, seed=0)
        report = complexity_report(model)
        assert report.num_parameters == (4 * 2 + 2) + (2 * 5 + 5)

    def test_doubling_width_quadruples_affine_flops(self):
        small = complexity_report(BackboneModel(8, [16, 16], 8, seed=0))
        big = complexity_report(BackboneModel(8, [32, 32], 8, seed=0))
        small_affine = small.flops_per_sample - 32
        big_affine = big.flops_per_sample - 64
        ratio = big_affine / small_affine
        assert 2.5 < ratio < 4.0
