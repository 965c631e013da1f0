import numpy as np
import pytest

from rayprior.field import FieldConfig, RadianceField


def unit_dirs(rng, n):
    d = rng.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


class TestDensity:
    def test_init_density_is_ln2(self, rng):
        fld = RadianceField(FieldConfig(mode="standard"), seed=3)
        sigma, _ = fld.eval_sigma(rng.uniform(-1.2, 1.2, size=(100, 3)))
        np.testing.assert_allclose(sigma, np.log(2.0), rtol=1e-6)

    def test_pure(self, rng):
        fld = RadianceField(seed=1)
        x = rng.uniform(-1, 1, size=(5, 3))
        a, fa = fld.eval_sigma(x)
        b, fb = fld.eval_sigma(x)
        assert a.tobytes() == b.tobytes() and fa.tobytes() == fb.tobytes()

    def test_batching_transparent(self, rng):
        cfg = FieldConfig(dtype="float64")
        fld = RadianceField(cfg, seed=1)
        x = rng.uniform(-1, 1, size=(6, 3))
        sigma, feat = fld.eval_sigma(x)
        for i in range(6):
            s1, f1 = fld.eval_sigma(x[i])
            np.testing.assert_allclose(s1, sigma[i:i + 1], rtol=1e-12)
            np.testing.assert_allclose(f1, feat[i:i + 1], rtol=1e-12, atol=1e-14)

    def test_no_direction_argument(self):
        import inspect

        params = list(inspect.signature(RadianceField.eval_sigma).parameters)
        assert params == ["self", "x"]

    def test_finite_in_box(self, rng):
        for mode in ("standard", "no-direction", "atlas-capable", "deferred"):
            fld = RadianceField(FieldConfig(mode=mode), seed=2)
            x = rng.uniform(-1.2, 1.2, size=(500, 3))
            sigma, feat = fld.eval_sigma(x)
            c = fld.eval_color(unit_dirs(rng, 500), feat)
            assert np.all(np.isfinite(sigma)) and np.all(sigma >= 0)
            assert np.all(np.isfinite(c)) and np.all((c >= 0) & (c <= 1))


class TestColor:
    def test_zero_final_layer_gives_gray(self, rng):
        fld = RadianceField(FieldConfig(mode="standard"), seed=0)
        head = fld.params["color"]
        head.weights[-1][:] = 0
        head.biases[-1][:] = 0
        _, feat = fld.eval_sigma(rng.uniform(-1, 1, size=(4, 3)))
        np.testing.assert_allclose(fld.eval_color(unit_dirs(rng, 4), feat), 0.5)

    def test_no_direction_mode_ignores_direction(self, rng):
        fld = RadianceField(FieldConfig(mode="no-direction"), seed=0)
        _, feat = fld.eval_sigma(rng.uniform(-1, 1, size=(3, 3)))
        a = fld.eval_color(unit_dirs(rng, 3), feat)
        b = fld.eval_color(unit_dirs(rng, 3), feat)
        assert a.tobytes() == b.tobytes()

    def test_standard_mode_depends_on_direction(self, rng):
        fld = RadianceField(FieldConfig(mode="standard"), seed=0)
        _, feat = fld.eval_sigma(np.zeros((1, 3)))
        feats = np.repeat(feat, 100, axis=0)
        c = fld.eval_color(unit_dirs(rng, 100), feats)
        assert np.max(c.max(axis=0) - c.min(axis=0)) > 1e-4

    def test_rejects_non_unit_direction(self, rng):
        fld = RadianceField(seed=0)
        _, feat = fld.eval_sigma(np.zeros((1, 3)))
        with pytest.raises(ValueError):
            fld.eval_color(np.array([[1.0, 1.0, 0.0]]), feat)


class TestDeferred:
    def test_zero_specular_means_diffuse(self, rng):
        fld = RadianceField(FieldConfig(mode="deferred"), seed=0)
        _, feat = fld.eval_sigma(rng.uniform(-1, 1, size=(8, 3)))
        diffuse, specular, combined = fld.eval_deferred(unit_dirs(rng, 8), feat)
        np.testing.assert_array_equal(specular, 0.0)
        np.testing.assert_array_equal(combined, diffuse)

    def test_clamped_sum(self, rng):
        fld = RadianceField(FieldConfig(mode="deferred", dtype="float64"), seed=0)
        d, s = fld.params["diffuse"], fld.params["specular"]
        d.weights[-1][:] = 0
        d.biases[-1][:] = np.log(0.9 / 0.1)
        s.weights[-1][:] = 0
        s.biases[-1][:] = 0.3
        _, feat = fld.eval_sigma(rng.uniform(-1, 1, size=(2, 3)))
        diffuse, specular, combined = fld.eval_deferred(unit_dirs(rng, 2), feat)
        np.testing.assert_allclose(diffuse, 0.9)
        np.testing.assert_allclose(specular, 0.3)
        np.testing.assert_array_equal(combined, 1.0)

    def test_permuting_directions(self, rng):
        fld = RadianceField(FieldConfig(mode="deferred"), seed=0)
        spec = fld.params["specular"]
        spec.weights[-1][:] = rng.normal(scale=0.3, size=spec.weights[-1].shape)
        _, feat = fld.eval_sigma(np.zeros((1, 3)))
        feat = np.repeat(feat, 2, axis=0)
        d = unit_dirs(rng, 2)
        dif1, sp1, _ = fld.eval_deferred(d, feat)
        dif2, sp2, _ = fld.eval_deferred(d[::-1], feat)
        np.testing.assert_array_equal(dif1, dif2)
        np.testing.assert_array_equal(sp1, sp2[::-1])
        assert not np.allclose(sp1[0], sp1[1])

    def test_diffuse_direction_invariant(self, rng):
        fld = RadianceField(FieldConfig(mode="deferred"), seed=4)
        _, feat = fld.eval_sigma(np.array([[0.1, 0.2, -0.3]]))
        feats = np.repeat(feat, 50, axis=0)
        diffuse, _, _ = fld.eval_deferred(unit_dirs(rng, 50), feats)
        assert np.all(diffuse == diffuse[0])

    def test_requires_deferred_mode(self):
        fld = RadianceField(seed=0)
        with pytest.raises(ValueError):
            fld.eval_deferred(np.array([[0.0, 0.0, 1.0]]), np.zeros((1, 64)))


class TestParams:
    def test_flat_round_trip(self):
        a = RadianceField(seed=0)
        b = RadianceField(seed=1)
        b.load_flat(a.flat_params())
        for k, v in a.flat_params().items():
            assert v.tobytes() == b.flat_params()[k].tobytes()

    def test_copy_is_independent(self):
        a = RadianceField(seed=0)
        b = a.copy()
        b.params["trunk"].weights[0][0, 0] += 1.0
        assert a.params["trunk"].weights[0][0, 0] != b.params["trunk"].weights[0][0, 0]

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            FieldConfig(mode="shiny")
