"""Exit criteria. Each test records one [PASS]/[FAIL] line in the terminal summary."""
import json
import math
import time

import numpy as np
import pytest

from flowguide import kernels
from flowguide.attention import (
    AttentionParams,
    FeatureVideo,
    ProjectionWeights,
    dense_spatio_temporal_attention,
    dsta_flatten_block,
    flow_guided_attention,
    masked_attention_oracle,
    trajectory_mask,
)
from flowguide.cli import main as cli_main
from flowguide.diffusion import (
    ToyDenoiser,
    forward_noise_sample,
    make_linear_schedule,
    run_inversion,
    run_sampling,
)
from flowguide.flow import FlowField, load_flo, synth_flow, write_flo
from flowguide.metrics import ImageSequence, edit_score, psnr, ssim, warping_error
from flowguide.pipeline import ToyUNet, edit_video, invert_video
from flowguide.trajectory import TrajectorySet, sample_trajectories, validate_partition
from published import TABLE_ROWS

pytestmark = pytest.mark.acceptance

FUZZ_COUNT = 200


def fuzz_instance(i):
    """(flows, K, H, W, seed) for fuzz instance ``i``; mixes noisy and analytic fields."""
    rng = np.random.default_rng(1000 + i)
    K = int(rng.integers(1, 9))
    H, W = int(rng.integers(1, 17)), int(rng.integers(1, 17))
    flows = []
    for _ in range(K - 1):
        kind = rng.integers(4)
        if kind == 0:
            s = rng.choice([0.3, 1.0, 3.0, 8.0])
            f = FlowField(rng.normal(0, s, (H, W)), rng.normal(0, s, (H, W)))
        elif kind == 1:
            f = synth_flow("constant", W, H, dx=rng.integers(-2, 3), dy=rng.integers(-2, 3))
        elif kind == 2:
            f = synth_flow("rotation", W, H, angle=rng.uniform(-0.5, 0.5))
        else:
            f = synth_flow("zoom", W, H, scale=rng.uniform(0.7, 1.4))
        flows.append(f)
    return flows, K, H, W, int(rng.integers(1 << 31))


def test_trajectory_partition(criterion):
    t0 = time.perf_counter()
    bad = []
    for i in range(FUZZ_COUNT):
        flows, K, H, W, seed = fuzz_instance(i)
        rep = validate_partition(sample_trajectories(flows, H, W, seed=seed))
        if not (rep.ok and rep.total_length == K * H * W):
            bad.append(i)
    elapsed = time.perf_counter() - t0
    ok = not bad and elapsed < 10.0
    criterion("trajectory partition (200 fuzz, <10 s)", ok,
              f"{FUZZ_COUNT - len(bad)}/{FUZZ_COUNT} valid in {elapsed:.2f}s")
    assert ok, (bad, elapsed)


def test_flatten_oracle_equivalence(criterion):
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(50):
        rng = np.random.default_rng(2000 + i)
        K, S = int(rng.integers(1, 5)), int(rng.integers(1, 7))
        heads = int(rng.choice([1, 2, 4]))
        C = heads * int(rng.integers(1, 8 // heads + 1))
        flows = [FlowField(rng.normal(0, 1.5, (S, S)), rng.normal(0, 1.5, (S, S)))
                 for _ in range(K - 1)]
        tset = sample_trajectories(flows, S, S, seed=i)
        z = FeatureVideo(rng.normal(size=(K, S, S, C)) * 2)
        p = AttentionParams(heads)
        ref = masked_attention_oracle(z, trajectory_mask(tset), p).data
        for name in kernels.available():
            kernels.use(name)
            got = flow_guided_attention(z, tset, p).data
            worst = max(worst, float(np.abs(got - ref).max()))
    kernels.use(kernels.select().NAME)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and elapsed < 30.0
    criterion("FLATTEN matches masked oracle (50 instances, 1e-6, <30 s)", ok,
              f"max abs {worst:.2e}, {elapsed:.2f}s, backends {sorted(kernels.available())}")
    assert ok


def test_static_video_identity(criterion):
    rng = np.random.default_rng(3000)
    K, H, W, C = 4, 5, 5, 8
    z = FeatureVideo(np.repeat(rng.normal(size=(1, H, W, C)), K, axis=0))
    tset = sample_trajectories([FlowField.zeros(W, H)] * (K - 1), H, W, seed=0)
    identity, spread = True, 0.0
    for name in kernels.available():
        kernels.use(name)
        for heads in (1, 2, 4):
            identity &= np.array_equal(flow_guided_attention(z, tset, AttentionParams(heads)).data,
                                       z.data)
        net = ToyUNet.build(C, seed=3, heads=2)
        sched = make_linear_schedule(1000)
        zT, cache = invert_video(z, net, tset, sched, 10)
        out = edit_video(zT, net, tset, sched, 10, cache)
        for v in (zT, out):
            spread = max(spread, float(np.abs(v.data - v.data[:1]).max()))
    kernels.use(kernels.select().NAME)
    ok = identity and spread == 0.0
    criterion("static video: exact identity, pipeline keeps frames identical", ok,
              f"identity={identity}, max inter-frame deviation {spread}")
    assert ok


def test_ddim_round_trip(criterion):
    sched = make_linear_schedule(1000)
    worst = 0.0
    for i in range(20):
        rng = np.random.default_rng(4000 + i)
        z0 = FeatureVideo(rng.normal(size=(int(rng.integers(1, 4)), 4, 4, 4)) * rng.uniform(0.1, 3))
        den = ToyDenoiser("constant", seed=i) if i % 2 else ToyDenoiser("zero")
        for steps in (10, 50):
            zT, _ = run_inversion(z0, sched, den, steps)
            back = run_sampling(zT, sched, den, steps)
            rel = np.abs(back.data - z0.data).max() / np.abs(z0.data).max()
            worst = max(worst, float(rel))
    ok = worst <= 1e-9
    criterion("DDIM inversion/sampling round trip (20 instances, steps 10/50, 1e-9 rel)", ok,
              f"max rel error {worst:.2e}")
    assert ok


def test_forward_noise_statistics(criterion):
    sched = make_linear_schedule(1000)
    z0 = FeatureVideo(np.full((1, 1, 1, 1), 1.5))
    n = 10_000
    lines, ok = [], True
    for t in (1, 500, 1000):
        draws = np.array([forward_noise_sample(z0, t, sched, seed=t * n + s).data.item()
                          for s in range(n)])
        a = sched.alpha(t)
        mean, sd = 1.5 * math.sqrt(a), math.sqrt(1 - a)
        se_mean, se_sd = sd / math.sqrt(n), sd / math.sqrt(2 * (n - 1))
        zm = abs(draws.mean() - mean) / se_mean
        zs = abs(draws.std(ddof=1) - sd) / se_sd
        ok &= zm <= 3 and zs <= 3
        lines.append(f"t={t}: {zm:.2f}/{zs:.2f} SE")
    criterion("forward-noise mean/std within 3 SE at t=1, T/2, T (1e4 draws)", ok, "; ".join(lines))
    assert ok


def test_metric_identities(criterion):
    rng = np.random.default_rng(5000)
    worst = 0.0
    for dx, dy in [(1, 0), (0, 1), (-2, 1), (1, -1), (0, 0)]:
        K, H, W = 4, 10, 12
        big = rng.random((H + 2 * K * abs(dy) + 1, W + 2 * K * abs(dx) + 1, 3))
        oy0, ox0 = K * abs(dy), K * abs(dx)
        frames = [big[oy0 + k * dy:oy0 + k * dy + H, ox0 + k * dx:ox0 + k * dx + W]
                  for k in range(K)]
        flows = [synth_flow("constant", W, H, dx=-dx, dy=-dy)] * (K - 1)
        worst = max(worst, warping_error(ImageSequence(frames), flows))
    a = rng.random((16, 16, 3))
    s, p = ssim(a, a), psnr(a, a)
    ok = worst <= 1e-9 and s == pytest.approx(1.0, abs=1e-12) and p == 100.0
    criterion("metric identities: E_warp 0 on warp chains, ssim(a,a)=1, psnr(a,a)=cap", ok,
              f"max E_warp {worst:.1e}, ssim {s!r}, psnr {p}")
    assert ok


def test_published_table_arithmetic(criterion):
    diffs = [abs(edit_score(c, e) - s) for _, _, c, e, s in TABLE_ROWS]
    ok = len(diffs) == 12 and max(diffs) <= 0.02
    criterion("editing score reproduces 12 published rows within 0.02", ok,
              f"max deviation {max(diffs):.4f}")
    assert ok


class DenseOnly:
    def __init__(self, blocks):
        self.blocks = blocks

    def evaluate(self, z, t, context=None):
        x = z
        for i, blk in enumerate(self.blocks):
            h = context.block_features(i, dense_spatio_temporal_attention(x, blk.weights, blk.params))
            x = FeatureVideo.from_tokens(blk.weights.feed_forward(h.tokens()), x.shape)
        return x.data


def test_ablation_witnesses(criterion):
    min_gap = np.inf
    for i in range(10):
        rng = np.random.default_rng(6000 + i)
        z = FeatureVideo(rng.normal(size=(3, 4, 4, 8)))
        flows = [FlowField(rng.normal(0, 1, (4, 4)), rng.normal(0, 1, (4, 4))) for _ in range(2)]
        tset = sample_trajectories(flows, 4, 4, seed=i)
        w = ProjectionWeights.random(8, seed=i)
        p = AttentionParams(2)
        gap = np.abs(dsta_flatten_block(z, tset, w, p, "I").data
                     - dsta_flatten_block(z, tset, w, p, "II").data).max()
        min_gap = min(min_gap, float(gap))

    sched = make_linear_schedule(1000)
    net = ToyUNet.build(8, seed=1, heads=2).with_flatten(False, False).with_trajectories(tset)
    ref = DenseOnly(net.blocks)
    za, ca = run_inversion(z, sched, net, 5)
    zb, cb = run_inversion(z, sched, ref, 5)
    bitwise = np.array_equal(za.data, zb.data) and np.array_equal(
        run_sampling(za, sched, net, 5, injection=ca).data,
        run_sampling(zb, sched, ref, 5, injection=cb).data)
    ok = min_gap > 1e-6 and bitwise
    criterion("ablations: mode I != mode II; FLATTEN-off == DSTA-only bitwise", ok,
              f"min I/II gap {min_gap:.2e}, bitwise={bitwise}")
    assert ok


def test_flow_noise_harness(criterion, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("FLOWGUIDE_OUTPUT_DIR", str(tmp_path))
    violations, copies_identical, runs = [], True, 0
    for i in range(FUZZ_COUNT):
        flows, K, H, W, seed = fuzz_instance(i)
        if K < 2:
            continue
        src = tmp_path / f"i{i}"
        src.mkdir()
        paths = []
        for k, f in enumerate(flows):
            paths.append(src / f"f{k}.flo")
            write_flo(f, paths[-1])
        for sigma in (0, 0.5, 1):
            out = tmp_path / f"i{i}_s{sigma}"
            if cli_main(["flow", "noise", *map(str, paths), "--sigma", str(sigma),
                         "--seed", str(seed % 1000), "--out-dir", str(out)]) != 0:
                violations.append((i, sigma, "noise"))
                continue
            noisy = [out / p.name for p in paths]
            if sigma == 0:
                copies_identical &= all(a.read_bytes() == b.read_bytes()
                                        for a, b in zip(paths, noisy))
            traj = out / "t.json"
            rc = cli_main(["traj", "sample", *map(str, noisy), "--seed", str(seed),
                           "-o", str(traj)])
            rc = rc or cli_main(["traj", "check", str(traj)])
            rep = validate_partition(TrajectorySet.load(traj))
            if rc or not rep.ok or rep.total_length != K * H * W:
                violations.append((i, sigma))
            runs += 1
    capsys.readouterr()
    ok = not violations and copies_identical
    criterion("flow-noise harness: sigma 0/0.5/1 keep partitions, sigma 0 byte-identical", ok,
              f"{runs} runs, {len(violations)} violations, sigma0 identical={copies_identical}")
    assert ok
