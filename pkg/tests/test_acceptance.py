"""Acceptance gate: nine criteria, one [PASS]/[FAIL] line each.

Criteria 1-6 are oracle and property checks at fixed seeds; 7-9 build a
synthetic two-sphere scene, train a grid from scratch at a pinned
configuration, and reuse it across the stylization scenarios. Budgets
are wall clock on a single CPU core.
"""

import time

import numpy as np
import pytest

from stylevox.datagen import TwoSphereSpec, analytic_masks, build_two_sphere_scene
from stylevox.grid import GridGradients, VoxelGrid
from stylevox.loss import TV_EPS, LossWeights, beta_loss, rf_loss, sparsity_loss, tv_loss
from stylevox.render import RaySampleBatch, composite, composite_backward, march_rays, render_image
from stylevox.scene import ObjectMaskSet, StyleConfig, StyleRule, assign_styles, retention_filter
from stylevox.style import (
    FeatureMap,
    downsample_mask,
    extract_features,
    load_style_image,
    make_test_extractor,
    masked_nnfm_loss,
    nnfm_loss,
    nnfm_matches,
    prepare_style_target,
)
from stylevox.train import TrainConfig, evaluate_psnr, stylize, train_photoreal
from stylevox import kernels
from stylevox.imgio import write_image

from oracles import composite_scalar, cosine_distance_scalar, masked_nnfm_brute, nnfm_brute

STEP = 1.0 / 128.0
EVAL_FRAMES = (5, 16)
TEST_VIEWS = (5, 11, 16)  # both held-out views plus a mid-arc training view

PHOTOREAL_CONFIG = dict(
    iterations=600, batch_rays=4000, resolution=(64, 64, 64), step=STEP,
    seed=3, init_density=0.1, eval_frames=EVAL_FRAMES,
    weights=LossWeights(lambda_beta=0.0, lambda_sparsity=0.0),
)

# stylization scenarios: short runs that move the masked regions far
# enough to measure while full-image mse pins the background
STYLE_ITERS = 30
STYLE_CONFIG = dict(
    seed=7, step=STEP, eval_frames=EVAL_FRAMES, log_every=10,
    lr_density=0.0, lr_sh=0.02,
    weights=LossWeights(lambda_beta=0.0, lambda_sparsity=0.0, style_weight=5.0),
)


def emit(capsys, criterion, ok, detail):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}")


def copy_grid(g):
    return VoxelGrid(g.resolution.copy(), g.bbox_min.copy(), g.bbox_max.copy(),
                     g.sh_degree, g.lattice.copy(), g.density.copy(), g.sh.copy())


# ---------------------------------------------------------------------------
# 1. analytic gradients vs central differences on the full objective


def c1_problem():
    rng = np.random.default_rng(101)
    grid = VoxelGrid.dense((8, 8, 8), np.zeros(3), np.ones(3), sh_degree=2,
                           density=0.0, sh=0.0)
    grid.density = rng.normal(0.5, 0.5, grid.n_active).astype(np.float32)
    grid.sh = rng.normal(0.0, 0.3, grid.sh.shape).astype(np.float32)
    eyes = rng.normal(size=(16, 3))
    origins = 0.5 + 2.0 * eyes / np.linalg.norm(eyes, axis=1, keepdims=True)
    aims = rng.uniform(0.25, 0.75, (16, 3))
    dirs = aims - origins
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    near = np.full(16, 0.05)
    far = np.full(16, 6.0)
    targets = rng.random((16, 3))
    weights = LossWeights(lambda_tv=1e-2, lambda_beta=1e-2, lambda_sparsity=1e-3)
    return grid, origins, dirs, near, far, targets, weights


def c1_objective(grid, origins, dirs, near, far, targets, weights):
    batch = march_rays(grid, origins, dirs, near, far, None)
    out = composite(batch, np.zeros(3))
    report, _, _, _ = rf_loss(grid, out.rgb, targets, out.t_fg, batch.sigmas, weights)
    return report.total


def c1_gradient(grid, origins, dirs, near, far, targets, weights):
    batch = march_rays(grid, origins, dirs, near, far, None)
    out = composite(batch, np.zeros(3))
    grads = GridGradients.zeros(grid)
    _, d_rgb, d_tfg, d_sig_extra = rf_loss(
        grid, out.rgb, targets, out.t_fg, batch.sigmas, weights, grads
    )
    d_sigma, d_colors = composite_backward(batch, out, d_rgb, d_tfg)
    d_sigma += d_sig_extra
    d_sh = kernels.shade_bwd(batch.offsets, batch.colors, batch.basis, d_colors)
    gate = (batch.raw_sigmas > 0.0).astype(np.float64)
    kernels.scatter(batch.corner_slots, batch.corner_weights, gate, d_sigma, d_sh,
                    grads.d_density, grads.d_sh)
    return grads


def test_criterion_1_gradient_fidelity(capsys):
    t0 = time.perf_counter()
    grid, origins, dirs, near, far, targets, weights = c1_problem()
    args = (origins, dirs, near, far, targets, weights)
    grads = c1_gradient(grid, *args)
    analytic = np.concatenate([grads.d_density, grads.d_sh.reshape(-1)])

    h = 1e-3
    params = [(grid.density, i) for i in range(grid.n_active)]
    params += [(grid.sh.reshape(-1), i) for i in range(grid.sh.size)]
    tested = failed = 0
    worst = 0.0
    for k, (arr, i) in enumerate(params):
        if abs(analytic[k]) < 1e-8:
            continue
        orig = arr[i]
        hi = np.float32(float(orig) + h)
        lo = np.float32(float(orig) - h)
        arr[i] = hi
        up = c1_objective(grid, *args)
        arr[i] = lo
        down = c1_objective(grid, *args)
        arr[i] = orig
        fd = (up - down) / (float(hi) - float(lo))
        rel = abs(fd - analytic[k]) / max(abs(fd), abs(analytic[k]))
        tested += 1
        worst = max(worst, rel)
        if rel > 1e-3:
            failed += 1
    dt = time.perf_counter() - t0

    frac = 1.0 - failed / tested
    ok = frac >= 0.99 and dt <= 60.0
    emit(capsys, 1, ok,
         f"{100 * frac:.2f}% of {tested} gradients within 1e-3 of central "
         f"differences ({failed} outliers), {dt:.1f}s of 60s")
    assert frac >= 0.99, f"only {100 * frac:.2f}% within tolerance"
    assert dt <= 60.0, f"took {dt:.1f}s"


# ---------------------------------------------------------------------------
# 2. compositing against the scalar oracle


def test_criterion_2_compositing_oracle(capsys):
    rng = np.random.default_rng(202)
    worst = 0.0
    worst_inv = 0.0
    for _ in range(1000):
        n_rays = int(rng.integers(1, 5))
        counts = rng.integers(0, 9, n_rays)
        offsets = np.zeros(n_rays + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        n = int(offsets[-1])
        sigmas = rng.uniform(0.0, 3.0, n)
        sigmas[rng.random(n) < 0.1] = 60.0  # effectively opaque
        sigmas[rng.random(n) < 0.15] = 0.0  # empty space
        deltas = rng.uniform(0.01, 0.5, n)
        colors = rng.random((n, 3))
        background = rng.random(3)
        batch = RaySampleBatch(offsets=offsets, ts=None, deltas=deltas, sigmas=sigmas,
                               raw_sigmas=sigmas.copy(), colors=colors)
        out = composite(batch, background)
        for r in range(n_rays):
            s = slice(offsets[r], offsets[r + 1])
            rgb_o, t_o, _ = composite_scalar(sigmas[s], deltas[s], colors[s], background)
            worst = max(worst, float(np.abs(out.rgb[r] - rgb_o).max()),
                        abs(float(out.t_fg[r]) - t_o))
            worst_inv = max(worst_inv,
                            abs(float(out.weights[s].sum() + out.t_fg[r]) - 1.0))

    ok = worst <= 1e-6 and worst_inv <= 1e-5
    emit(capsys, 2, ok,
         f"1000 batches: max compositing deviation {worst:.2e} (<=1e-6), "
         f"max weight-sum defect {worst_inv:.2e} (<=1e-5)")
    assert worst <= 1e-6
    assert worst_inv <= 1e-5


# ---------------------------------------------------------------------------
# 3. nearest-neighbor matching vs brute force


def fmap(values, layer="relu1"):
    return FeatureMap(values.astype(np.float32), "acceptance", layer)


def test_criterion_3_matching_oracle(capsys):
    rng = np.random.default_rng(303)
    t0 = time.perf_counter()
    worst = 0.0
    for case in range(100):
        hr, wr = rng.integers(2, 33, 2)
        hs, ws = rng.integers(2, 41, 2)
        c = int(rng.choice([4, 8, 16]))
        rendered = rng.normal(size=(hr, wr, c)).astype(np.float32)
        style = rng.normal(size=(hs, ws, c)).astype(np.float32)
        if case % 5 == 0:
            # plant exact ties: duplicate style rows and a 2x colinear pair
            flat = style.reshape(-1, c)
            flat[flat.shape[0] // 2] = flat[0]
            flat[flat.shape[0] // 3] = 2.0 * flat[1]
            rendered.reshape(-1, c)[0] = flat[0]
        f_r, f_s = fmap(rendered), fmap(style)
        loss, _ = nnfm_loss(f_r, f_s)
        _, best = nnfm_matches(f_r, f_s)
        loss_b, best_b = nnfm_brute(f_r.values.astype(np.float64),
                                    f_s.values.astype(np.float64))
        assert np.array_equal(best, best_b), f"argmin mismatch in case {case}"
        worst = max(worst, abs(loss - loss_b))
    dt = time.perf_counter() - t0

    ok = worst <= 1e-6 and dt <= 60.0
    emit(capsys, 3, ok,
         f"100 cases: identical argmins incl. planted ties, max loss "
         f"deviation {worst:.2e} (<=1e-6), {dt:.1f}s of 60s")
    assert worst <= 1e-6
    assert dt <= 60.0


# ---------------------------------------------------------------------------
# 4. masked matching reductions


def test_criterion_4_masked_matching_reductions(capsys):
    rng = np.random.default_rng(404)

    # full mask, one object: the unnormalized sum of per-position distances
    rendered = fmap(rng.normal(size=(7, 6, 8)))
    style_a = fmap(rng.normal(size=(9, 5, 8)))
    target_a = prepare_like(style_a, "a")
    full = np.ones((7, 6), dtype=bool)
    got, d_full, _ = masked_nnfm_loss(rendered, [target_a], {"a": full})
    flat = rendered.values.reshape(-1, 8).astype(np.float64)
    style_flat = style_a.values.reshape(-1, 8).astype(np.float64)
    want = sum(min(cosine_distance_scalar(row, s) for s in style_flat) for row in flat)
    sum_err = abs(got - want)

    # empty and missing masks: zero loss, zero gradient
    empty, d_empty, per = masked_nnfm_loss(
        rendered, [target_a], {"a": np.zeros((7, 6), dtype=bool)}
    )
    zero_ok = empty == 0.0 and not d_empty.any() and per == {"a": 0.0}

    # two objects vs the per-object brute loop
    worst = 0.0
    for _ in range(20):
        h, w, c = rng.integers(3, 9), rng.integers(3, 9), 8
        f_r = fmap(rng.normal(size=(h, w, c)))
        styles = [fmap(rng.normal(size=(6, 6, c))), fmap(rng.normal(size=(5, 7, c)))]
        masks = {"a": rng.random((h, w)) < 0.5, "b": rng.random((h, w)) < 0.5}
        targets = [prepare_like(styles[0], "a"), prepare_like(styles[1], "b")]
        got2, _, _ = masked_nnfm_loss(f_r, targets, masks)
        want2, _ = masked_nnfm_brute(
            f_r.values.astype(np.float64),
            [s.values.astype(np.float64) for s in styles],
            [masks["a"], masks["b"]],
        )
        worst = max(worst, abs(got2 - want2))

    ok = sum_err <= 1e-9 and zero_ok and worst <= 1e-6
    emit(capsys, 4, ok,
         f"full-mask sum error {sum_err:.2e}, empty mask -> loss 0 with zero "
         f"gradient: {zero_ok}, two-object brute-force deviation {worst:.2e} (<=1e-6)")
    assert sum_err <= 1e-9
    assert zero_ok
    assert worst <= 1e-6


def prepare_like(style_map, object_id):
    from stylevox.style import StyleTarget

    return StyleTarget(object_id, {style_map.layer: style_map})


# ---------------------------------------------------------------------------
# 5. retention boundary and monotonicity


def presence_set(object_id, n_present, shape=(4, 4)):
    masks = {f: np.ones(shape, dtype=bool) for f in range(n_present)}
    return ObjectMaskSet(object_id, "thing", masks)


def test_criterion_5_retention_boundary(capsys):
    sets = [presence_set("eight", 8), presence_set("seven", 7)]
    retained, dropped = retention_filter(sets, n_frames=10, threshold=0.8)
    boundary_ok = ([ms.object_id for ms in retained] == ["eight"]
                   and [ms.object_id for ms in dropped] == ["seven"])

    rng = np.random.default_rng(505)
    monotone = True
    for _ in range(200):
        sets = [presence_set(f"o{i}", int(rng.integers(0, 11))) for i in range(6)]
        lo, hi = sorted(rng.uniform(0.05, 1.0, 2))
        kept_lo = {ms.object_id for ms in retention_filter(sets, 10, lo)[0]}
        kept_hi = {ms.object_id for ms in retention_filter(sets, 10, hi)[0]}
        monotone &= kept_hi <= kept_lo

    ok = boundary_ok and monotone
    emit(capsys, 5, ok,
         f"10 frames at 0.8: presence 8 retained, 7 dropped: {boundary_ok}; "
         f"retention monotone over 200 random patterns: {monotone}")
    assert boundary_ok
    assert monotone


# ---------------------------------------------------------------------------
# 6. regularizer properties


def test_criterion_6_regularizer_properties(capsys):
    flat = VoxelGrid.dense((6, 6, 6), np.zeros(3), np.ones(3), sh_degree=2,
                           density=0.7, sh=0.2)
    floor = (1 + 3 * flat.n_coeffs) * np.sqrt(TV_EPS)
    tv = tv_loss(flat)
    tv_ok = tv <= floor * (1.0 + 1e-6)

    sat_value, sat_grad = beta_loss(np.array([0.0, 1.0]))
    beta_ok = bool(np.isfinite(sat_value)) and not sat_grad.any()

    ladder = np.array([0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0])
    even_ok = all(sparsity_loss([s])[0] == sparsity_loss([-s])[0] for s in ladder)
    values = [sparsity_loss([s])[0] for s in ladder]
    increasing_ok = all(b > a for a, b in zip(values, values[1:]))

    ok = tv_ok and beta_ok and even_ok and increasing_ok
    emit(capsys, 6, ok,
         f"constant-grid TV {tv:.2e} <= stabilizer floor {floor:.2e}: {tv_ok}; "
         f"clamped residual-transmittance loss finite at 0 and 1: {beta_ok}; "
         f"sparsity even: {even_ok}, increasing on the ladder: {increasing_ok}")
    assert tv_ok and beta_ok and even_ok and increasing_ok


# ---------------------------------------------------------------------------
# 7 and 8 share one trained grid


@pytest.fixture(scope="module")
def desk_scene(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk_scene")
    spec = TwoSphereSpec()
    dataset, gt_grid, _ = build_two_sphere_scene(root, spec=spec, step=STEP)
    mask_sets = analytic_masks(spec, [f.camera for f in dataset.frames])
    return dataset, mask_sets, root


@pytest.fixture(scope="module")
def photoreal(desk_scene):
    dataset = desk_scene[0]
    t0 = time.perf_counter()
    grid, _ = train_photoreal(dataset, TrainConfig(**PHOTOREAL_CONFIG))
    train_s = time.perf_counter() - t0
    psnr = evaluate_psnr(grid, dataset, EVAL_FRAMES, step=STEP)
    total_s = time.perf_counter() - t0
    return {"grid": grid, "psnr": psnr, "train_s": train_s, "total_s": total_s}


def test_criterion_7_photoreal_end_to_end(capsys, desk_scene, photoreal):
    dataset = desk_scene[0]
    n_train = dataset.n_frames - len(EVAL_FRAMES)
    psnr = photoreal["psnr"]
    ok = min(psnr) >= 30.0 and photoreal["total_s"] <= 900.0
    emit(capsys, 7, ok,
         f"{n_train} training + {len(EVAL_FRAMES)} held-out views at 128x128, "
         f"64^3 grid from scratch: held-out PSNR "
         f"{'/'.join(f'{p:.1f}' for p in psnr)} dB (>=30), "
         f"{photoreal['total_s']:.0f}s of 900s")
    assert min(psnr) >= 30.0, f"held-out psnr {psnr}"
    assert photoreal["total_s"] <= 900.0


# ---------------------------------------------------------------------------
# 8. stylization scenarios


def checker_image(path):
    yy, xx = np.mgrid[0:64, 0:64]
    pattern = ((yy // 8 + xx // 8) % 2).astype(bool)
    img = np.where(pattern[:, :, None], np.array([0.95, 0.85, 0.2]),
                   np.array([0.1, 0.2, 0.7]))
    write_image(path, img)
    return path


def stripes_image(path):
    pattern = ((np.arange(64) // 8) % 2).astype(bool)
    img = np.where(pattern[:, None, None], np.array([0.85, 0.1, 0.1]),
                   np.array([0.95, 0.95, 0.95]))
    write_image(path, img)
    return path


def render_views(grid, dataset, views):
    return {i: render_image(grid, dataset.frames[i].camera, STEP)[0] for i in views}


def masked_feature_distance(extractor, image, mask, target):
    """Mean nearest-neighbor distance of the masked features, over taps."""
    values = []
    for fm in extract_features(extractor, image):
        m = downsample_mask(mask, fm.values.shape[:2])
        if not m.any():
            continue
        val, _, _ = masked_nnfm_loss(fm, [target], {target.object_id: m},
                                     normalize=True)
        values.append(val)
    return float(np.mean(values))


def run_scenario(grid0, dataset, mask_sets, style_map, extractor):
    config = TrainConfig(iterations=STYLE_ITERS, **STYLE_CONFIG)
    grid = copy_grid(grid0)
    stylize(grid, dataset, mask_sets, style_map, extractor, config)
    return grid


def test_criterion_8_stylization_scenarios(capsys, desk_scene, photoreal, tmp_path):
    dataset, mask_sets, _ = desk_scene
    t0 = time.perf_counter()
    checker = str(checker_image(tmp_path / "checker.png"))
    stripes = str(stripes_image(tmp_path / "stripes.png"))
    extractor = make_test_extractor(0)
    by_id = {ms.object_id: ms for ms in mask_sets}
    view_masks = {i: {oid: by_id[oid].mask_for(i) for oid in by_id} for i in TEST_VIEWS}
    pre = render_views(photoreal["grid"], dataset, TEST_VIEWS)

    # (a) instance rule on one sphere: masked features approach the style,
    # pixels outside every mask stay put
    target_a = prepare_style_target(extractor, "sphere_a", load_style_image(checker),
                                    style_path=checker)
    pre_nnfm = np.mean([
        masked_feature_distance(extractor, pre[i], view_masks[i]["sphere_a"], target_a)
        for i in TEST_VIEWS
    ])
    grid_a = run_scenario(photoreal["grid"], dataset, mask_sets,
                          {"sphere_a": checker}, extractor)
    post_a = render_views(grid_a, dataset, TEST_VIEWS)
    post_nnfm = np.mean([
        masked_feature_distance(extractor, post_a[i], view_masks[i]["sphere_a"], target_a)
        for i in TEST_VIEWS
    ])
    drop = 1.0 - post_nnfm / pre_nnfm
    off_diffs = []
    for i in TEST_VIEWS:
        union = np.zeros(pre[i].shape[:2], dtype=bool)
        for m in view_masks[i].values():
            union |= m
        off_diffs.append(np.abs(post_a[i] - pre[i])[~union].reshape(-1))
    off_change = float(np.concatenate(off_diffs).mean())
    a_ok = drop >= 0.40 and off_change <= 0.05

    # (b) category rule: both spheres move
    retained, _ = retention_filter(mask_sets, dataset.n_frames, 0.8)
    both_map = assign_styles(retained, StyleConfig(
        rules=[StyleRule(style=checker, category="sphere")]))
    assert sorted(both_map) == ["sphere_a", "sphere_b"]
    grid_b = run_scenario(photoreal["grid"], dataset, mask_sets, both_map, extractor)
    post_b = render_views(grid_b, dataset, TEST_VIEWS)
    region_change = {}
    for oid in ("sphere_a", "sphere_b"):
        diffs = [np.abs(post_b[i] - pre[i])[view_masks[i][oid]].reshape(-1)
                 for i in TEST_VIEWS]
        region_change[oid] = float(np.concatenate(diffs).mean())
    b_ok = all(v > 0.05 for v in region_change.values())

    # (c) two instance rules, two styles: the regions end up different
    grid_c = run_scenario(photoreal["grid"], dataset, mask_sets,
                          {"sphere_a": checker, "sphere_b": stripes}, extractor)
    post_c = render_views(grid_c, dataset, TEST_VIEWS)
    means = {}
    for oid in ("sphere_a", "sphere_b"):
        pixels = [post_c[i][view_masks[i][oid]] for i in TEST_VIEWS]
        means[oid] = np.concatenate(pixels).mean(axis=0)
    separation = float(np.abs(means["sphere_a"] - means["sphere_b"]).mean())
    c_ok = separation > 0.05

    dt = time.perf_counter() - t0
    ok = a_ok and b_ok and c_ok and dt <= 1200.0
    emit(capsys, 8, ok,
         f"(a) masked feature distance {pre_nnfm:.3f}->{post_nnfm:.3f} "
         f"(drop {100 * drop:.0f}%, need >=40%), off-mask change {off_change:.4f} "
         f"(<=0.05); (b) masked change a={region_change['sphere_a']:.3f} "
         f"b={region_change['sphere_b']:.3f} (both >0.05); (c) region separation "
         f"{separation:.3f} (>0.05); {dt:.0f}s of 1200s")
    assert a_ok, f"drop {drop:.3f}, off-mask {off_change:.4f}"
    assert b_ok, f"region change {region_change}"
    assert c_ok, f"separation {separation:.3f}"
    assert dt <= 1200.0


# ---------------------------------------------------------------------------
# 9. determinism of the train command


def test_criterion_9_train_command_determinism(capsys, desk_scene, tmp_path):
    from click.testing import CliRunner

    from stylevox.cli import main

    root = desk_scene[2]
    config = tmp_path / "c9.toml"
    config.write_text(
        "[train]\niterations = 40\nbatch_rays = 1024\nresolution = [32, 32, 32]\n"
        "seed = 21\n\n[train.weights]\nlambda_beta = 0.0\nlambda_sparsity = 0.0\n"
    )
    digests = []
    for name in ("one", "two"):
        result = CliRunner().invoke(main, [
            "train", "--scene", str(root / "scene.json"), "--config", str(config),
            "--out", str(tmp_path / name), "--deterministic",
        ])
        assert result.exit_code == 0, result.output
        digests.append((tmp_path / name / "model.s2ck").read_bytes())

    ok = digests[0] == digests[1]
    emit(capsys, 9, ok,
         f"two train runs, same seed, --deterministic: checkpoints "
         f"{'byte-identical' if ok else 'DIFFER'} ({len(digests[0])} bytes)")
    assert ok
