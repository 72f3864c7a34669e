"""
Tests for the object relation module: geometric embedding, weight
normalization and feature fusion.
"""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from models.checkpoint import ParameterSet
from models.config import RelationConfig
from models.errors import ConfigError, ContractError, DimensionError
from models.relation import (
    RelationModule,
    RelationParams,
    RoiFeatureSet,
    appearance_weight,
    geometric_embed,
    geometry_weight,
    lift,
    normalize_columns,
    relation_features,
    relation_weights,
    relative_geometry,
)
from models.tensor import Tensor, grad_check_parameters, reduce_sum


def _params(d_f=4, d_k=4, d_g=16, w_g=None, w_v=None):
    return RelationParams(
        W_G=Tensor(np.zeros(d_g) if w_g is None else w_g),
        W_K=Tensor(np.eye(d_k, d_f)),
        W_Q=Tensor(np.eye(d_k, d_f)),
        W_V=Tensor(np.eye(d_f) if w_v is None else w_v),
    )


class TestGeometricEmbedding:
    def test_coincident_boxes(self):
        geometry = np.array([[10.0, 10.0, 4.0, 6.0], [10.0, 10.0, 4.0, 6.0]])
        raw = relative_geometry(geometry, epsilon=1e-3)[0, 1]
        assert_allclose(raw, [math.log(1e-3), math.log(1e-3), 0.0, 0.0])

    def test_embedding_dimension(self):
        embed = geometric_embed([5, 5, 2, 2], [9, 3, 4, 1], d_g=64)
        assert embed.shape == (64,)
        assert np.all(np.abs(embed) <= 1.0)

    def test_translation_invariant(self):
        box_m, box_n = [20.0, 30.0, 8.0, 12.0], [35.0, 22.0, 16.0, 6.0]
        shifted_m = [box_m[0] + 10, box_m[1] + 10] + box_m[2:]
        shifted_n = [box_n[0] + 10, box_n[1] + 10] + box_n[2:]
        assert_allclose(geometric_embed(shifted_m, shifted_n, d_g=64), geometric_embed(box_m, box_n, d_g=64))

    def test_scale_invariant(self):
        box_m, box_n = [20.0, 30.0, 8.0, 12.0], [35.0, 22.0, 16.0, 6.0]
        doubled_m, doubled_n = [2 * v for v in box_m], [2 * v for v in box_n]
        assert_allclose(
            geometric_embed(doubled_m, doubled_n, d_g=64), geometric_embed(box_m, box_n, d_g=64), atol=1e-12
        )

    def test_d_g_must_be_multiple_of_eight(self):
        with pytest.raises(ConfigError):
            lift(np.zeros(4), d_g=12)

    def test_non_positive_extent(self):
        with pytest.raises(ContractError):
            geometric_embed([0, 0, 0, 1], [1, 1, 1, 1], d_g=16)


class TestGeometryWeight:
    def test_zero_projection(self):
        params = _params()
        assert geometry_weight(params, np.ones(16)).item() == 0.0

    def test_negative_projection_clamped(self):
        w = np.zeros(16)
        w[0] = -3.0
        embed = np.zeros(16)
        embed[0] = 1.0
        assert geometry_weight(_params(w_g=w), embed).item() == 0.0

    def test_positive_passes_through(self):
        w = np.zeros(16)
        w[0] = 2.5
        embed = np.zeros(16)
        embed[0] = 1.0
        assert geometry_weight(_params(w_g=w), embed).item() == pytest.approx(2.5)


class TestAppearanceWeight:
    def test_zero_feature(self):
        params = _params()
        assert appearance_weight(Tensor(np.zeros(4)), Tensor(np.ones(4)), params, d_k=4).item() == 0.0

    def test_unit_vectors_identity_projections(self):
        e = np.array([1.0, 0.0, 0.0, 0.0])
        assert appearance_weight(Tensor(e), Tensor(e), _params(), d_k=4).item() == pytest.approx(0.5)

    @pytest.mark.parametrize("c", [-2.0, 0.5, 3.0])
    def test_bilinear_in_first_argument(self, rng, c):
        params = RelationParams(
            W_G=Tensor(np.zeros(16)),
            W_K=Tensor(rng.normal(size=(4, 6))),
            W_Q=Tensor(rng.normal(size=(4, 6))),
            W_V=Tensor(np.eye(6)),
        )
        f_m, f_n = rng.normal(size=6), rng.normal(size=6)
        base = appearance_weight(Tensor(f_m), Tensor(f_n), params, d_k=4).item()
        scaled = appearance_weight(Tensor(c * f_m), Tensor(f_n), params, d_k=4).item()
        assert scaled == pytest.approx(c * base)


class TestNormalizeColumns:
    def test_single_roi(self):
        out = normalize_columns(Tensor([[0.7]]), Tensor([[2.0]]))
        assert_allclose(out.values, [[1.0]])

    def test_hand_set_weights(self):
        w_g = Tensor([[1.0, 1.0], [1.0, 1.0]])
        w_a = Tensor([[0.0, 0.0], [math.log(3.0), math.log(3.0)]])
        out = normalize_columns(w_g, w_a)
        assert_allclose(out.values[:, 0], [0.25, 0.75])
        assert_allclose(out.values[:, 1], [0.25, 0.75])

    def test_degenerate_column_is_uniform(self):
        out = normalize_columns(Tensor(np.zeros((3, 3))), Tensor(np.ones((3, 3))))
        assert_allclose(out.values, np.full((3, 3), 1 / 3))

    def test_large_appearance_logits_stay_finite(self):
        w_a = Tensor([[800.0, 0.0], [790.0, 0.0]])
        out = normalize_columns(Tensor(np.ones((2, 2))), w_a)
        assert np.all(np.isfinite(out.values))
        assert_allclose(out.values.sum(axis=0), [1.0, 1.0])


class TestRelationWeights:
    def test_identical_rois_split_evenly(self):
        config = RelationConfig(d_k=4, d_g=16, d_f=4)
        w = np.random.default_rng(0).uniform(0.1, 1.0, size=16)
        roi_set = RoiFeatureSet(Tensor(np.ones((2, 4))), np.array([[8.0, 8.0, 4.0, 4.0]] * 2))
        out = relation_weights(roi_set, _params(w_g=w), config)
        assert_allclose(out.values, np.full((2, 2), 0.5))

    @pytest.mark.parametrize("seed", range(10))
    def test_columns_are_probability_vectors(self, seed):
        rng = np.random.default_rng(seed)
        config = RelationConfig(d_k=8, d_g=16, d_f=16)
        n = int(rng.integers(1, 7))
        params = RelationParams(
            W_G=Tensor(rng.normal(size=16)),
            W_K=Tensor(rng.normal(size=(8, 16))),
            W_Q=Tensor(rng.normal(size=(8, 16))),
            W_V=Tensor(rng.normal(size=(16, 16))),
        )
        geometry = np.column_stack([rng.uniform(0, 100, size=(n, 2)), rng.uniform(1, 40, size=(n, 2))])
        out = relation_weights(RoiFeatureSet(Tensor(rng.normal(size=(n, 16))), geometry), params, config)
        assert np.all(out.values >= 0)
        assert np.max(np.abs(out.values.sum(axis=0) - 1.0)) <= 1e-9

    def test_mismatched_appearance_rows(self):
        with pytest.raises(DimensionError):
            RoiFeatureSet(Tensor(np.zeros((3, 4))), np.ones((2, 4)))


class TestRelationFeatures:
    def test_zero_value_map(self):
        roi_set = RoiFeatureSet(Tensor([[1.0, 2.0, 3.0, 4.0]]), [[5.0, 5.0, 2.0, 2.0]])
        f_r = relation_features(roi_set, Tensor([[1.0]]), _params(w_v=np.zeros((4, 4))))
        assert_allclose(f_r.values, 0.0)

    def test_single_roi_identity_value_map(self):
        f = np.array([[1.0, 2.0, 3.0, 4.0]])
        roi_set = RoiFeatureSet(Tensor(f), [[5.0, 5.0, 2.0, 2.0]])
        f_r = relation_features(roi_set, Tensor([[1.0]]), _params())
        assert_allclose(f_r.values, f)
        assert_allclose((roi_set.appearance + f_r).values, 2 * f)

    def test_uniform_weights_average(self):
        f = np.array([[1.0, 2.0, 3.0, 4.0], [3.0, 2.0, 1.0, 0.0]])
        roi_set = RoiFeatureSet(Tensor(f), [[5.0, 5.0, 2.0, 2.0], [9.0, 9.0, 2.0, 2.0]])
        f_r = relation_features(roi_set, Tensor(np.full((2, 2), 0.5)), _params())
        assert_allclose(f_r.values, np.tile(f.mean(axis=0), (2, 1)))

    def test_rejects_unnormalized_weights(self):
        roi_set = RoiFeatureSet(Tensor(np.ones((2, 4))), np.ones((2, 4)))
        with pytest.raises(ContractError):
            relation_features(roi_set, Tensor(np.ones((2, 2))), _params())


class TestRelationModule:
    def _module(self, enabled=True):
        config = RelationConfig(enabled=enabled, d_k=4, d_g=16, d_f=8)
        return RelationModule(config, ParameterSet(), np.random.default_rng(2))

    def test_disabled_is_identity(self, rng):
        module = self._module(enabled=False)
        appearance = Tensor(rng.normal(size=(3, 8)))
        assert module(appearance, np.array([[0, 0, 4, 4], [2, 2, 9, 9], [5, 1, 8, 6]])) is appearance

    def test_parameter_shapes(self):
        module = self._module()
        assert module.params.W_G.shape == (16,)
        assert module.params.W_K.shape == (4, 8)
        assert module.params.W_V.shape == (8, 8)
        assert module.parameter_count() == 16 + 2 * 32 + 64

    def test_gradients(self, rng):
        module = self._module()
        appearance = Tensor(rng.normal(size=(3, 8)))
        boxes = np.array([[0.0, 0.0, 4.0, 4.0], [2.0, 2.0, 9.0, 9.0], [5.0, 1.0, 8.0, 6.0]])

        def loss():
            return reduce_sum(module(appearance, boxes) ** 2)

        assert grad_check_parameters(loss, module.parameters.tensors(), eps=1e-5) <= 1e-4
