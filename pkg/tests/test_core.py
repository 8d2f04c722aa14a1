import math

import numpy as np
import pytest
from scipy import integrate, stats

from tenduq.core import (
    Normalizer,
    ObservationSet,
    ParameterEntry,
    ParameterSpace,
    PriorSpec,
    latin_hypercube,
    lognormal_location_scale,
    prior_log_density,
    sample_prior,
)

from conftest import make_gp_space, make_prior_space


def unit_uniform_space(dims=1):
    return ParameterSpace(
        entries=tuple(
            ParameterEntry(f"u{i}", 0.0, 1.0, PriorSpec("uniform", (0.0, 1.0)))
            for i in range(dims)
        )
    )


class TestPriorLogDensity:
    def test_unit_uniform_inside(self):
        assert prior_log_density(unit_uniform_space(), np.array([0.5])) == 0.0

    def test_unit_uniform_outside(self):
        assert prior_log_density(unit_uniform_space(), np.array([1.5])) == -np.inf

    def test_lognormal_matches_scipy(self):
        # independent density oracle: scipy lognorm after the exact conversion
        mean, std = 33000.0, 3300.0
        loc, scale = lognormal_location_scale(mean, std)
        space = ParameterSpace(
            entries=(
                ParameterEntry("E", 1.0, 1e6, PriorSpec("lognormal", (mean, std))),
            )
        )
        for x in (33000.0, 27000.0, 39000.0):
            oracle = stats.lognorm(s=scale, scale=math.exp(loc)).logpdf(x)
            assert prior_log_density(space, np.array([x])) == pytest.approx(oracle, abs=1e-10)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            prior_log_density(unit_uniform_space(2), np.array([0.5]))

    def test_batched_rows(self):
        space = make_prior_space()
        thetas = sample_prior(space, np.random.default_rng(0), 16)
        batch = prior_log_density(space, thetas)
        singles = np.array([prior_log_density(space, t) for t in thetas])
        np.testing.assert_allclose(batch, singles)

    @pytest.mark.parametrize(
        "prior,bounds",
        [
            (PriorSpec("uniform", (0.2, 0.8)), (0.2, 0.8)),
            (PriorSpec("normal", (33000.0, 3300.0)), (25200.0, 37050.0)),
            (PriorSpec("lognormal", (33000.0, 3300.0)), (25200.0, 37050.0)),
        ],
    )
    def test_truncated_density_integrates_to_parent_mass(self, prior, bounds):
        # Unnormalized truncation: the density inside the bounds is the parent
        # density, so the trapezoid integral must equal the parent CDF mass.
        space = ParameterSpace(entries=(ParameterEntry("p", *bounds, prior),))
        xs = np.linspace(bounds[0], bounds[1], 10_000)
        dens = np.exp([prior_log_density(space, np.array([x])) for x in xs])
        integral = np.trapezoid(dens, xs)
        if prior.kind == "uniform":
            mass = 1.0
        elif prior.kind == "normal":
            mass = stats.norm(*prior.params).cdf(bounds[1]) - stats.norm(*prior.params).cdf(bounds[0])
        else:
            loc, scale = lognormal_location_scale(*prior.params)
            dist = stats.lognorm(s=scale, scale=math.exp(loc))
            mass = dist.cdf(bounds[1]) - dist.cdf(bounds[0])
        assert integral == pytest.approx(mass, abs=1e-6)


class TestSamplePrior:
    def test_uniform_mean(self):
        draws = sample_prior(unit_uniform_space(), np.random.default_rng(1), 1000)
        assert abs(draws.mean() - 0.5) < 0.05

    def test_all_inside_bounds(self):
        space = make_prior_space()
        draws = sample_prior(space, np.random.default_rng(2), 500)
        assert np.all(draws >= space.lower) and np.all(draws <= space.upper)

    def test_truncated_lognormal_mean_vs_quadrature_oracle(self):
        mean, std = 33000.0, 3300.0
        lo, hi = 25200.0, 37050.0
        loc, scale = lognormal_location_scale(mean, std)
        dist = stats.lognorm(s=scale, scale=math.exp(loc))
        # oracle: E[X | lo <= X <= hi] by quadrature, independent of sampling
        num, _ = integrate.quad(lambda x: x * dist.pdf(x), lo, hi)
        mass = dist.cdf(hi) - dist.cdf(lo)
        oracle = num / mass
        space = ParameterSpace(
            entries=(ParameterEntry("E", lo, hi, PriorSpec("lognormal", (mean, std))),)
        )
        draws = sample_prior(space, np.random.default_rng(3), 100_000)
        assert draws.mean() == pytest.approx(oracle, rel=0.01)


class TestLatinHypercube:
    @pytest.mark.parametrize("count", [1, 4, 100])
    def test_stratification_1d(self, count):
        space = unit_uniform_space()
        pts = latin_hypercube(space, np.random.default_rng(4), count)[:, 0]
        strata = np.floor(pts * count).astype(int)
        assert sorted(strata.tolist()) == list(range(count))

    def test_stratification_4d_table_bounds(self):
        space = make_gp_space()
        count = 100
        pts = latin_hypercube(space, np.random.default_rng(5), count)
        unit = (pts - space.lower) / (space.upper - space.lower)
        for j in range(space.dim):
            strata = np.floor(unit[:, j] * count).astype(int)
            assert sorted(strata.tolist()) == list(range(count))

    def test_single_point_inside(self):
        space = make_gp_space()
        pt = latin_hypercube(space, np.random.default_rng(6), 1)
        assert np.all(pt >= space.lower) and np.all(pt <= space.upper)


class TestNormalizer:
    def test_round_trip(self):
        rng = np.random.default_rng(7)
        norm = Normalizer(
            input_lo=np.array([0.0, -5.0, 100.0]),
            input_hi=np.array([1.0, 5.0, 900.0]),
            output_lo=-3.0,
            output_hi=17.0,
        )
        pts = rng.uniform([0.0, -5.0, 100.0], [1.0, 5.0, 900.0], size=(1000, 3))
        back = norm.denormalize_inputs(norm.normalize_inputs(pts))
        np.testing.assert_allclose(back, pts, atol=1e-12)
        ys = rng.uniform(-3.0, 17.0, 1000)
        np.testing.assert_allclose(norm.denormalize_outputs(norm.normalize_outputs(ys)), ys, atol=1e-12)

    def test_maps_box_to_unit(self):
        design = np.array([[1.0, 10.0], [3.0, 30.0], [2.0, 20.0]])
        outputs = np.array([5.0, 9.0, 7.0])
        norm = Normalizer.from_data(design, outputs)
        unit = norm.normalize_inputs(design)
        assert unit.min() == 0.0 and unit.max() == 1.0
        yn = norm.normalize_outputs(outputs)
        assert yn.min() == 0.0 and yn.max() == 1.0


class TestParameterSpace:
    def test_bounds_must_order(self):
        with pytest.raises(ValueError):
            ParameterEntry("bad", 1.0, 1.0, PriorSpec("uniform", (0.0, 1.0)))

    def test_uniform_prior_support_within_bounds(self):
        with pytest.raises(ValueError):
            ParameterEntry("bad", 0.0, 0.5, PriorSpec("uniform", (0.0, 1.0)))

    def test_embedded_index_validated(self):
        entries = (ParameterEntry("a", 0.0, 1.0, PriorSpec("uniform", (0.0, 1.0))),)
        with pytest.raises(ValueError):
            ParameterSpace(entries=entries, embedded_index=3,
                           embedded_sigma_prior=PriorSpec("uniform", (0.1, 1.0)))

    def test_extended_appends_sigma(self):
        space = make_prior_space(embedded=True)
        ext = space.extended()
        assert ext.dim == space.dim + 1
        assert ext.names[-1] == "sigma_E_cm"
        assert ext.entries[-1].lower == 250.0 and ext.entries[-1].upper == 7410.0

    def test_lognormal_conversion_exact(self):
        loc, scale = lognormal_location_scale(33000.0, 3300.0)
        assert scale**2 == pytest.approx(math.log(1.0 + (3300.0 / 33000.0) ** 2), rel=1e-15)
        assert loc == pytest.approx(math.log(33000.0) - scale**2 / 2.0, rel=1e-15)


class TestObservationSet:
    def make_obs(self, groups=None):
        pts = np.array([[0.0, -80.0], [40.0, -80.0], [80.0, 0.0]])
        return ObservationSet(points=pts, values=np.array([1.0, 2.0, 3.0]),
                              noise_std=0.01, groups=groups)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            ObservationSet(points=np.zeros((2, 2)), values=np.zeros(3), noise_std=0.01)

    def test_group_overlap_rejected(self):
        with pytest.raises(ValueError, match="overlaps"):
            self.make_obs(groups={"a": [0, 1], "b": [1, 2]})

    def test_group_out_of_range(self):
        with pytest.raises(ValueError, match="out-of-range"):
            self.make_obs(groups={"a": [5]})

    def test_csv_round_trip(self, tmp_path):
        obs = self.make_obs(groups={"near": [0, 1], "far": [2]})
        path = tmp_path / "obs.csv"
        obs.to_csv(path)
        back = ObservationSet.from_csv(path, noise_std=0.01)
        np.testing.assert_array_equal(back.points, obs.points)
        np.testing.assert_array_equal(back.values, obs.values)
        assert set(back.groups) == {"near", "far"}
        np.testing.assert_array_equal(back.groups["near"], [0, 1])

    def test_csv_rejects_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(ValueError, match="header"):
            ObservationSet.from_csv(path, noise_std=0.01)

    def test_csv_reports_bad_row(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x_mm,z_mm,strain_microstrain\n1,2,oops\n")
        with pytest.raises(ValueError, match="row 2"):
            ObservationSet.from_csv(path, noise_std=0.01)
