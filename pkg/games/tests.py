import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose, assert_array_equal

from core.exceptions import SpecError
from games.reference import scalar_spec, scalar_subpop, two_type_spec
from games.serializers import dump_spec, load_spec
from games.specs import (
    DriftTable, PopulationSpec, exact_counts, mixture_weights, selector_matrix, validate_spec,
)


def _assumptions(report):
    return [v.assumption_id for v in report.violations]


class ValidateSpecTests(SimpleTestCase):
    def test_scalar_spec_is_valid(self):
        report = validate_spec(scalar_spec(rho=0.5))
        self.assertTrue(report.ok)
        self.assertEqual(report.violations, ())

    def test_negative_R_is_reported(self):
        report = validate_spec(scalar_spec(R=-1.0))
        self.assertFalse(report.ok)
        self.assertIn("[A3] type 0: R not positive definite", report.messages())

    def test_mixture_weights_must_sum_to_one(self):
        spec = two_type_spec().replace(pi=[0.6, 0.5])
        report = validate_spec(spec)
        self.assertIn("A2", _assumptions(report))
        self.assertTrue(any("mixture weights sum to 1.1" in m for m in report.messages()))

    def test_indefinite_state_cost_gap(self):
        report = validate_spec(scalar_spec(Q=1.0, S=2.0))
        self.assertIn("Q - S R^-1 S^T not positive semidefinite", report.messages()[0])

    def test_zero_eigenvalue_of_state_cost_gap_is_admissible(self):
        self.assertTrue(validate_spec(scalar_spec(Q=1.0, S=1.0)).ok)

    def test_discount_and_initial_covariance(self):
        report = validate_spec(scalar_spec(rho=0.0, x0_var=-1.0))
        self.assertEqual(sorted(_assumptions(report)), ["A1", "rho"])

    def test_dimension_mismatch(self):
        sub = scalar_subpop().replace(B=np.ones((2, 1)))
        spec = scalar_spec().replace(subpops=(sub,))
        self.assertIn("dims", _assumptions(validate_spec(spec)))

    def test_report_is_pure(self):
        spec = two_type_spec().replace(pi=[0.6, 0.5])
        self.assertEqual(validate_spec(spec), validate_spec(spec))


class MixtureTests(SimpleTestCase):
    def test_weights(self):
        assert_allclose(mixture_weights([3, 1]), [0.75, 0.25])
        assert_allclose(mixture_weights([5]), [1.0])

    def test_empty_population(self):
        with self.assertRaisesMessage(SpecError, "empty population"):
            mixture_weights([0, 0])

    def test_exact_counts(self):
        assert_array_equal(exact_counts([0.5, 0.5], 64), [32, 32])
        with self.assertRaises(SpecError):
            exact_counts([1 / 3, 2 / 3], 16)


class SelectorTests(SimpleTestCase):
    def test_blocks(self):
        assert_array_equal(selector_matrix(0, 1, 2), [[1.0, 0.0]])
        assert_array_equal(selector_matrix(1, 2, 2), np.hstack([np.zeros((2, 2)), np.eye(2)]))

    def test_out_of_range(self):
        with self.assertRaises(SpecError):
            selector_matrix(2, 1, 2)

    def test_extracts_block(self):
        stacked = np.arange(6.0)
        for k in range(3):
            assert_array_equal(selector_matrix(k, 2, 3) @ stacked, stacked[2 * k:2 * k + 2])


class ExpansionTests(SimpleTestCase):
    def test_row_sums_preserved(self):
        spec = two_type_spec()
        for k, p in enumerate(spec.subpops):
            Fbar = spec.Fbar(k)
            self.assertEqual(Fbar.shape, (spec.n, spec.n * spec.K))
            assert_allclose(Fbar.sum(axis=1), p.F.sum(axis=1))
            assert_allclose(spec.Hbar(k).sum(axis=1), p.H.sum(axis=1))

    def test_expansion_weights_blocks(self):
        spec = two_type_spec().replace(pi=[0.25, 0.75])
        assert_allclose(spec.expand([[2.0]]), [[0.5, 1.5]])


class DriftTableTests(SimpleTestCase):
    def test_piecewise(self):
        b = DriftTable("piecewise", [[0.0], [1.0]], times=[0.0, 2.0])
        assert_array_equal(b.at(1.0), [0.0])
        assert_array_equal(b.sample([0.5, 2.0, 3.0]), [[0.0], [1.0], [1.0]])
        self.assertFalse(b.is_constant)

    def test_affine(self):
        b = DriftTable("affine", [1.0], slope=[0.5])
        assert_allclose(b.at(2.0), [2.0])
        with self.assertRaises(SpecError):
            DriftTable("affine", [1.0])

    def test_unknown_kind(self):
        with self.assertRaises(SpecError):
            DriftTable("quadratic", [1.0])


class SerializerTests(SimpleTestCase):
    def test_defaults_fill_missing_blocks(self):
        spec = load_spec({
            "rho": 0.5, "pi": [1.0], "x0_mean": [0.0],
            "subpops": [{"A": [[0.0]], "B": [[1.0]], "Q": [[1.0]], "R": [[1.0]]}],
        })
        p = spec.subpops[0]
        assert_array_equal(p.F, [[0.0]])
        assert_array_equal(p.D, [[0.0]])
        self.assertEqual(p.lambda_explore, 0.0)
        assert_array_equal(spec.x0_cov, [[0.0]])

    def test_dump_then_load_keeps_parameters(self):
        spec = two_type_spec()
        again = load_spec(dump_spec(spec))
        self.assertIsInstance(again, PopulationSpec)
        for p, q in zip(spec.subpops, again.subpops):
            assert_array_equal(p.Q, q.Q)
            self.assertEqual(p.lambda_explore, q.lambda_explore)

    def test_piecewise_drift_document(self):
        spec = load_spec({
            "rho": 0.5, "pi": [1.0], "x0_mean": [0.0],
            "subpops": [{"A": [[0.0]], "B": [[1.0]], "Q": [[1.0]], "R": [[1.0]],
                         "b": {"kind": "piecewise", "times": [0.0, 1.0], "values": [[0.0], [2.0]]}}],
        })
        self.assertEqual(spec.subpops[0].b.kind, "piecewise")

    def test_malformed_document(self):
        with self.assertRaises(SpecError) as ctx:
            load_spec({"rho": "fast", "pi": [1.0], "x0_mean": [0.0], "subpops": []})
        self.assertIn("rho", ctx.exception.detail)
