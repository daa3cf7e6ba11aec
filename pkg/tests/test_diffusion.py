import json
import math

import numpy as np
import pytest

from flowguide.attention import FeatureVideo
from flowguide.diffusion import (
    ConfigurationError,
    InjectionCache,
    NoiseSchedule,
    StepContext,
    ToyDenoiser,
    ddim_coefficients,
    ddim_inversion_step,
    ddim_sampling_step,
    forward_noise_sample,
    make_linear_schedule,
    run_inversion,
    run_sampling,
    timestep_grid,
)


def latent(rng, shape=(2, 3, 3, 4)):
    return FeatureVideo(rng.normal(size=shape))


def test_single_step_schedule():
    s = NoiseSchedule([0.1])
    assert s.alpha(0) == 1.0 and s.alpha(1) == pytest.approx(0.9)


def test_cumulative_alphas():
    s = NoiseSchedule([0.1, 0.2, 0.3])
    np.testing.assert_allclose(s.alphas_cum, [0.9, 0.72, 0.504], rtol=1e-15)


def test_linear_schedule_endpoints():
    s = make_linear_schedule()
    assert s.total_steps == 1000
    assert s.betas[0] == 0.00085 and s.betas[-1] == pytest.approx(0.012)
    assert np.all(np.diff(s.alphas_cum) < 0)


@pytest.mark.parametrize("betas", [[], [1.0], [0.5, -0.1], [float("nan")]])
def test_bad_betas(betas):
    with pytest.raises(ValueError):
        NoiseSchedule(betas)


def test_bad_linear_schedule():
    with pytest.raises(ValueError):
        make_linear_schedule(0)
    with pytest.raises(ValueError):
        make_linear_schedule(10, 0.02, 0.01)


def test_alpha_out_of_range():
    with pytest.raises(ValueError):
        make_linear_schedule(10).alpha(11)


def test_schedule_round_trip(tmp_path):
    for s in (make_linear_schedule(50, 0.001, 0.02), NoiseSchedule([0.1, 0.2])):
        s.save(tmp_path / "s.json")
        back = NoiseSchedule.from_dict(json.loads((tmp_path / "s.json").read_text()))
        assert np.array_equal(back.betas, s.betas)


def test_timestep_grid():
    assert timestep_grid(1000, 10) == list(range(0, 1001, 100))
    assert timestep_grid(10, 3) == [0, 3, 6, 10]
    with pytest.raises(ValueError):
        timestep_grid(10, 11)


def scalar_move(z, eps, a_s, a_t):
    # x0 prediction, then re-noise toward the target timestep
    x0 = (z - math.sqrt(1 - a_s) * eps) / math.sqrt(a_s)
    return math.sqrt(a_t) * x0 + math.sqrt(1 - a_t) * eps


def test_sampling_step_matches_scalar_form(rng):
    s = make_linear_schedule(100)
    z = latent(rng)
    den = ToyDenoiser("linear", scale=0.3)
    out = ddim_sampling_step(z, 40, s, den)
    ref = np.vectorize(lambda v: scalar_move(v, 0.3 * v, s.alpha(40), s.alpha(39)))(z.data)
    np.testing.assert_allclose(out.data, ref, rtol=1e-13)


def test_inversion_step_matches_scalar_form(rng):
    s = make_linear_schedule(100)
    z = latent(rng)
    den = ToyDenoiser("constant", seed=3)
    eps = den.evaluate(z, 0)
    out = ddim_inversion_step(z, 0, s, den, t_next=20)
    ref = scalar_move(z.data, eps, 1.0, s.alpha(20))
    np.testing.assert_allclose(out.data, ref, rtol=1e-13, atol=1e-15)


def test_zero_denoiser_scales_by_alpha_ratio(rng):
    s = make_linear_schedule(10)
    z = latent(rng)
    out = ddim_inversion_step(z, 3, s, ToyDenoiser("zero"))
    np.testing.assert_allclose(out.data, math.sqrt(s.alpha(4) / s.alpha(3)) * z.data, rtol=1e-15)


def test_coefficients_compose():
    s = make_linear_schedule(100)
    a1, _ = ddim_coefficients(s, 10, 30)
    a2, _ = ddim_coefficients(s, 30, 60)
    a3, _ = ddim_coefficients(s, 10, 60)
    assert a1 * a2 == pytest.approx(a3, rel=1e-14)
    a, b = ddim_coefficients(s, 20, 20)
    assert (a, b) == (1.0, 0.0)


@pytest.mark.parametrize("bad", [(5, 5), (5, 4), (9, 11)])
def test_inversion_step_validation(rng, bad):
    with pytest.raises(ValueError):
        ddim_inversion_step(latent(rng), bad[0], make_linear_schedule(10), ToyDenoiser(),
                            t_next=bad[1])


def test_sampling_step_validation(rng):
    with pytest.raises(ValueError):
        ddim_sampling_step(latent(rng), 0, make_linear_schedule(10), ToyDenoiser())


def test_denoiser_output_checked(rng):
    class Bad:
        def evaluate(self, z, t, context=None):
            return np.zeros(3)

    with pytest.raises(ValueError):
        ddim_sampling_step(latent(rng), 5, make_linear_schedule(10), Bad())


@pytest.mark.parametrize("mode", ["zero", "constant"])
@pytest.mark.parametrize("steps", [1, 10, 50])
def test_round_trip_state_independent(rng, mode, steps):
    s = make_linear_schedule(1000)
    z0 = latent(rng)
    den = ToyDenoiser(mode, seed=7)
    zT, _ = run_inversion(z0, s, den, steps)
    back = run_sampling(zT, s, den, steps)
    assert np.abs(back.data - z0.data).max() <= 1e-9 * np.abs(z0.data).max()


def test_round_trip_state_dependent_is_not_exact(rng):
    s = make_linear_schedule(1000)
    z0 = latent(rng)
    den = ToyDenoiser("linear", scale=0.5)
    zT, _ = run_inversion(z0, s, den, 10)
    back = run_sampling(zT, s, den, 10)
    assert np.abs(back.data - z0.data).max() > 1e-6


def test_trace_records_grid(rng):
    s = make_linear_schedule(100)
    trace = []
    zT, _ = run_inversion(latent(rng), s, ToyDenoiser(), 4, trace=trace)
    run_sampling(zT, s, ToyDenoiser(), 4, trace=trace)
    moves = [(a, b) for a, b, *_ in trace]
    assert moves == [(0, 25), (25, 50), (50, 75), (75, 100),
                     (100, 75), (75, 50), (50, 25), (25, 0)]


class BlockReporter:
    """Denoiser that reports two fake blocks per call and counts contexts."""

    def __init__(self):
        self.seen = []

    def evaluate(self, z, t, context=None):
        assert isinstance(context, StepContext)
        self.seen.append((context.phase, context.step, context.timestep))
        h = FeatureVideo(z.data * 0 + t)
        out = np.zeros(z.shape)
        for b in range(2):
            out += context.block_features(b, h).data * 1e-4
        return out


def test_inversion_caches_every_block(rng):
    s = make_linear_schedule(100)
    calls = []
    den = BlockReporter()
    _, cache = run_inversion(latent(rng), s, den, 5, hooks=lambda *a: calls.append(a[:2]))
    assert len(cache) == 10 == len(calls)
    assert sorted(cache.entries) == [(i, b) for i in range(5) for b in range(2)]
    assert [c[2] for c in den.seen] == timestep_grid(100, 5)[:-1]


def test_injection_replaces_features_with_matched_step(rng):
    s = make_linear_schedule(100)
    den = BlockReporter()
    z0 = latent(rng)
    zT, cache = run_inversion(z0, s, den, 5)
    back = run_sampling(zT, s, den, 5, injection=cache)
    # cached features carry the inversion start timestep, which equals the
    # sampling target, so each sampling move exactly undoes its inversion move
    np.testing.assert_allclose(back.data, z0.data, atol=1e-12)


def test_match_step_nearest_then_earlier():
    cache = InjectionCache(4, timestep_grid(100, 4))
    assert [cache.match_step(t) for t in (0, 12, 13, 25, 37, 38, 99)] == [0, 0, 1, 1, 1, 2, 3]


def test_cache_errors(rng):
    cache = InjectionCache(2, [0, 5, 10])
    cache.put(0, 0, latent(rng))
    with pytest.raises(ConfigurationError):
        cache.put(0, 0, latent(rng))
    with pytest.raises(ConfigurationError):
        cache.lookup(5, 0)


def test_cache_save_load(tmp_path, rng):
    cache = InjectionCache(2, [0, 5, 10])
    cache.put(0, 1, latent(rng))
    cache.put(1, 0, latent(rng))
    cache.save(tmp_path / "c")
    back = InjectionCache.load(tmp_path / "c")
    assert back.grid == cache.grid and sorted(back.entries) == sorted(cache.entries)
    for key, fv in cache.entries.items():
        assert np.array_equal(back.entries[key].data, fv.data)
    with pytest.raises(ConfigurationError):
        InjectionCache.load(tmp_path / "missing")


def test_forward_noise_deterministic_per_seed(rng):
    s = make_linear_schedule(1000)
    z0 = latent(rng)
    a = forward_noise_sample(z0, 500, s, seed=1).data
    assert np.array_equal(a, forward_noise_sample(z0, 500, s, seed=1).data)
    assert not np.array_equal(a, forward_noise_sample(z0, 500, s, seed=2).data)
    with pytest.raises(ValueError):
        forward_noise_sample(z0, 0, s, seed=1)


def test_forward_noise_moments():
    s = make_linear_schedule(1000)
    z0 = FeatureVideo(np.full((1, 100, 100, 1), 2.0))
    zt = forward_noise_sample(z0, 1000, s, seed=0).data
    a = s.alpha(1000)
    se = math.sqrt(1 - a) / 100
    assert abs(zt.mean() - 2 * math.sqrt(a)) < 4 * se
    assert abs(zt.std() - math.sqrt(1 - a)) < 0.02


def test_toy_denoiser_modes(rng):
    z = latent(rng)
    assert not ToyDenoiser("linear", 0.5).state_independent
    assert ToyDenoiser("constant").state_independent
    np.testing.assert_array_equal(ToyDenoiser("linear", 2.0).evaluate(z, 3), 2.0 * z.data)
    c = ToyDenoiser("constant", seed=4)
    assert np.array_equal(c.evaluate(z, 1), c.evaluate(latent(rng), 900))
    with pytest.raises(ValueError):
        ToyDenoiser("learned")


def test_scalar_inversion_step_alpha_point_nine_to_point_eight():
    # alpha(1) = 0.9, alpha(2) = 0.8
    s = NoiseSchedule([0.1, 1 - 0.8 / 0.9])
    z = FeatureVideo(np.full((1, 1, 1, 1), 0.7))
    out = ddim_inversion_step(z, 1, s, ToyDenoiser("linear", scale=0.4)).data.item()
    eps = 0.4 * 0.7
    ref = math.sqrt(0.8 / 0.9) * 0.7 + math.sqrt(0.8) * (math.sqrt(1 / 0.8 - 1) - math.sqrt(1 / 0.9 - 1)) * eps
    assert out == pytest.approx(ref, rel=1e-14)
    assert out == pytest.approx(scalar_move(0.7, eps, 0.9, 0.8), rel=1e-14)


def test_flat_schedule_step_is_identity(rng):
    s = NoiseSchedule([0.1, 0.0])
    z = latent(rng)
    den = ToyDenoiser("linear", scale=3.0)
    assert np.array_equal(ddim_inversion_step(z, 1, s, den).data, z.data)
    assert np.array_equal(ddim_sampling_step(z, 2, s, den).data, z.data)


@pytest.mark.parametrize("steps", [1, 7, 25])
def test_zero_denoiser_inversion_closed_form(rng, steps):
    s = make_linear_schedule(1000)
    z0 = latent(rng)
    zT, _ = run_inversion(z0, s, ToyDenoiser("zero"), steps)
    np.testing.assert_allclose(zT.data, math.sqrt(s.alpha(1000)) * z0.data, rtol=1e-13)


def test_linear_denoiser_chain_matches_scalar_oracle():
    s = make_linear_schedule(1000)
    scale, steps, x = 0.2, 50, 1.3
    grid = timestep_grid(1000, steps)
    v = x
    for i in range(steps):
        v = scalar_move(v, scale * v, s.alpha(grid[i]), s.alpha(grid[i + 1]))
    for j in range(steps - 1, -1, -1):
        v = scalar_move(v, scale * v, s.alpha(grid[j + 1]), s.alpha(grid[j]))
    oracle_err = abs(v - x) / abs(x)
    z0 = FeatureVideo(np.full((1, 1, 1, 1), x))
    den = ToyDenoiser("linear", scale=scale)
    back = run_sampling(run_inversion(z0, s, den, steps)[0], s, den, steps).data.item()
    assert abs(back - x) / abs(x) == pytest.approx(oracle_err, rel=1e-8)
    assert oracle_err > 1e-6


def test_forward_noise_limits():
    s = NoiseSchedule([1e-14] * 10)
    z0 = FeatureVideo(np.full((1, 2, 2, 1), 0.4))
    np.testing.assert_allclose(forward_noise_sample(z0, 10, s, seed=0).data, z0.data, atol=1e-6)
    s = make_linear_schedule(100)
    zero = FeatureVideo(np.zeros((1, 2, 2, 1)))
    eps = np.random.default_rng(5).standard_normal((1, 2, 2, 1))
    np.testing.assert_array_equal(forward_noise_sample(zero, 40, s, seed=5).data,
                                  math.sqrt(1 - s.alpha(40)) * eps)


def test_injection_replaces_once_per_step_and_block(rng):
    s = make_linear_schedule(100)
    den = BlockReporter()
    zT, cache = run_inversion(latent(rng), s, den, 4)
    hits = []

    class Counting(InjectionCache):
        def lookup(self, timestep, block):
            hits.append((self.match_step(timestep), block))
            return super().lookup(timestep, block)

    run_sampling(zT, s, den, 4, injection=Counting(cache.steps, cache.grid, cache.entries))
    assert sorted(hits) == sorted(cache.entries)
