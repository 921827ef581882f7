"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s`. The two training-scale
criteria (6 and 7) are also marked `slow`; thresholds were frozen from an
oracle run of the exact same recipes before being asserted here.
"""

import os
import time

import numpy as np
import pytest
from helpers import FD_STEP, make_camera, random_cloud, scene_is_fd_safe

from clipgs.aam import aam_backward, aam_forward, init_aam
from clipgs.core import ClipPlane, GaussianCloud, sigmoid
from clipgs.datagen import generate_dataset, load_dataset, make_volume, raymarch_render
from clipgs.metrics import compute_loss, dssim_with_grad, psnr, ssim
from clipgs.rasterizer import reference_render, render, render_backward
from clipgs.trainer import desk_config, make_aam_for_config, train_full, train_stage1
from clipgs.truncation import (init_trunc_values, visibility_hard,
                               visibility_ste_backward, visibility_ste_forward)

ZPLUS = np.array([0.0, 0.0, 1.0])


def report(num, desc, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    print(f"\n[ACCEPTANCE] criterion {num:2d} {status}: {desc}  {detail}")
    assert ok, f"criterion {num} failed: {desc}  {detail}"


def close(analytic, fd, rel=1e-3, abs_tol=1e-6):
    return abs(analytic - fd) <= rel * max(abs(analytic), abs(fd)) + abs_tol


# --------------------------------------------------------------------------
# criterion 1: gradient suite over the full render + loss pipeline
# --------------------------------------------------------------------------

class TestCriterion1Gradients:
    def _build(self):
        rng = np.random.default_rng(4100)
        cam = make_camera(width=16, height=16, fx=20.0, fy=20.0)
        aam = init_aam(pe_levels_pos=2, pe_levels_z=1, hidden=8,
                       pos_scale=0.05, seed=7)
        wrng = np.random.default_rng(8)
        for name in ("head_mu", "head_rot", "head_scale"):
            aam.weights[name]["w"][:] = wrng.normal(scale=0.1,
                                                    size=aam.weights[name]["w"].shape)
            aam.weights[name]["b"][:] = wrng.normal(scale=0.05,
                                                    size=aam.weights[name]["b"].shape)
        for _ in range(400):
            cloud = random_cloud(rng, 10, spread=0.5, scale_range=(-2.2, -1.2),
                                 opacity_range=(0.1, 0.45))
            z = float(np.median(cloud.trunc_values))
            if np.min(np.abs(cloud.trunc_values - z)) < 1e-3:
                continue
            plane = ClipPlane(ZPLUS, z)
            vis = visibility_ste_forward(cloud, plane)
            if not (0 < vis.mask_binary.sum() < 10):
                continue
            visible = np.flatnonzero(vis.mask_binary == 1.0)
            deform, _ = aam_forward(aam, cloud.positions[visible], z)
            if scene_is_fd_safe(cloud, cam, plane, vis, deform):
                target = np.random.default_rng(4200).random((16, 16, 3))
                return cloud, aam, cam, plane, target
        raise RuntimeError("no FD-safe scene found")

    def _loss(self, cloud, aam, cam, plane, target):
        vis = visibility_ste_forward(cloud, plane)
        visible = np.flatnonzero(vis.mask_binary == 1.0)
        deform, _ = aam_forward(aam, cloud.positions[visible], plane.offset)
        out = render(cloud, cam, plane, vis, deformation=deform,
                     background=np.array([0.1, 0.1, 0.1]), with_state=False)
        rep, _ = compute_loss(out.image, target, lam=0.2)
        return rep.total

    def _analytic(self, cloud, aam, cam, plane, target):
        vis = visibility_ste_forward(cloud, plane)
        visible = np.flatnonzero(vis.mask_binary == 1.0)
        deform, cache = aam_forward(aam, cloud.positions[visible], plane.offset)
        out = render(cloud, cam, plane, vis, deformation=deform,
                     background=np.array([0.1, 0.1, 0.1]))
        rep, d_img = compute_loss(out.image, target, lam=0.2)
        grads = render_backward(out.saved_state, d_img)
        aam_grads, d_pos_enc = aam_backward(aam, cache, grads.d_dmu,
                                            grads.d_drot, grads.d_dscale)
        grads.d_positions[visible] += d_pos_enc
        return grads, aam_grads, vis, deform

    def test_criterion_1(self):
        t_start = time.monotonic()
        cloud, aam, cam, plane, target = self._build()
        grads, aam_grads, vis, deform = self._analytic(cloud, aam, cam, plane, target)
        h = FD_STEP
        failures = []

        def fd_entry(arr, k):
            flat = arr.ravel()
            old = flat[k]
            flat[k] = old + h
            lp = self._loss(cloud, aam, cam, plane, target)
            flat[k] = old - h
            lm = self._loss(cloud, aam, cam, plane, target)
            flat[k] = old
            return (lp - lm) / (2 * h)

        checked = 0
        for field, grad in (("positions", grads.d_positions),
                            ("rotations", grads.d_rotations),
                            ("log_scales", grads.d_log_scales),
                            ("color_logits", grads.d_color_logits),
                            ("opacity_logits", grads.d_opacity_logits)):
            arr = getattr(cloud, field)
            for k in range(arr.size):
                fd = fd_entry(arr, k)
                if not close(grad.ravel()[k], fd):
                    failures.append((field, k, grad.ravel()[k], fd))
                checked += 1

        # m: the forward is a step function of m, so the pipeline derivative is
        # defined through the straight-through surrogate. The oracle composes a
        # finite difference of the loss w.r.t. the mask value (which enters the
        # blend smoothly) with the analytic surrogate slope. The deformation is
        # baked into a derived cloud so fractional masks need no MLP rows.
        baked = cloud.copy()
        visible = np.flatnonzero(vis.mask_binary == 1.0)
        baked.positions[visible] += deform.d_mu
        baked.rotations[visible] += deform.d_rot
        baked.log_scales[visible] += deform.d_scale

        def mask_loss(mvals):
            out = render(baked, cam, plane, mvals,
                         background=np.array([0.1, 0.1, 0.1]), with_state=False)
            return compute_loss(out.image, target, lam=0.2)[0].total

        base_mask = vis.mask_binary.copy()
        sanity = mask_loss(base_mask)
        assert abs(sanity - self._loss(cloud, aam, cam, plane, target)) < 1e-14
        for i in range(cloud.count):
            m = base_mask.copy()
            if base_mask[i] == 1.0:
                m[i] = 1.0 + h
                lp = mask_loss(m)
                m[i] = 1.0 - h
                lm = mask_loss(m)
                dmask_fd = (lp - lm) / (2 * h)
            else:
                # hidden: one-sided from 0 with Richardson extrapolation
                f0 = sanity
                m[i] = h
                f1 = mask_loss(m)
                m[i] = 2 * h
                f2 = mask_loss(m)
                dmask_fd = 2 * (f1 - f0) / h - (f2 - f0) / (2 * h)
            s = vis.surrogate[i]
            dm_fd = dmask_fd * (-(s * (1.0 - s)))
            if not close(grads.d_trunc_values[i], dm_fd):
                failures.append(("trunc_values", i, grads.d_trunc_values[i], dm_fd))
            checked += 1

        rng = np.random.default_rng(4300)
        for key, grad in aam_grads.items():
            name, part = key.split(".")
            arr = aam.weights[name][part]
            if arr.size <= 40:
                idx = np.arange(arr.size)
            else:
                idx = rng.choice(arr.size, size=16, replace=False)
            for k in idx:
                fd = fd_entry(arr, int(k))
                if not close(grad.ravel()[k], fd):
                    failures.append((key, int(k), grad.ravel()[k], fd))
                checked += 1

        elapsed = time.monotonic() - t_start
        report(1, "gradient suite vs central finite differences",
               not failures and elapsed < 60.0,
               f"({checked} checks, {len(failures)} mismatches, {elapsed:.1f}s)"
               + (f" first: {failures[0]}" if failures else ""))


# --------------------------------------------------------------------------
# criterion 2: rasterizer oracle equivalence + permutation invariance
# --------------------------------------------------------------------------

class TestCriterion2Oracle:
    def test_criterion_2(self):
        rng = np.random.default_rng(4400)
        cam = make_camera(width=32, height=32)
        plane = ClipPlane(ZPLUS, 1000.0)
        worst = 0.0
        perm_ok = True
        for scene in range(200):
            n = int(rng.integers(1, 51))
            cloud = random_cloud(rng, n, opacity_range=(0.05, 0.95))
            vis = np.ones(n, dtype=bool)
            got = render(cloud, cam, plane, vis, with_state=False).image
            want = reference_render(cloud, cam, plane, vis)
            worst = max(worst, float(np.abs(got - want).max()))
            if scene % 10 == 0:
                shuffled = cloud.select(rng.permutation(n))
                again = render(shuffled, cam, plane, vis, with_state=False).image
                perm_ok = perm_ok and np.array_equal(got, again)
        report(2, "optimized renderer matches naive oracle",
               worst <= 1e-5 and perm_ok,
               f"(max |diff| {worst:.2e} over 200 scenes, permutation exact: {perm_ok})")


# --------------------------------------------------------------------------
# criterion 3: learnable truncation reproduces hard truncation at init
# --------------------------------------------------------------------------

class TestCriterion3Equivalence:
    def test_criterion_3(self):
        rng = np.random.default_rng(4500)
        ok = True
        for trial in range(5):
            cloud = random_cloud(rng, 200)
            normal = rng.normal(size=3)
            normal /= np.linalg.norm(normal)
            init_trunc_values(cloud, normal)
            for _ in range(50):
                plane = ClipPlane(normal, float(rng.normal(scale=2.0)))
                lt = visibility_ste_forward(cloud, plane, epsilon=0.5)
                ht = visibility_hard(cloud, plane)
                ok = ok and np.array_equal(lt.mask_binary.astype(bool), ht)
        report(3, "LT == HT for m = mu.n across 5x50 random planes", ok)


# --------------------------------------------------------------------------
# criterion 4: straight-through estimator contract
# --------------------------------------------------------------------------

class TestCriterion4Ste:
    def test_criterion_4(self):
        rng = np.random.default_rng(4600)
        cloud = random_cloud(rng, 300)
        cloud.trunc_values = rng.uniform(-12.0, 12.0, size=300)
        plane = ClipPlane(ZPLUS, 0.5)
        res = visibility_ste_forward(cloud, plane)
        binary = set(np.unique(res.mask_binary)) <= {0.0, 1.0}

        upstream = rng.normal(size=300)
        grad = visibility_ste_backward(res, upstream)
        h = 1e-6
        max_err = 0.0
        for i in range(300):
            if not res.in_band[i]:
                continue
            m = cloud.trunc_values[i]
            fd = (sigmoid(plane.offset - (m + h))
                  - sigmoid(plane.offset - (m - h))) / (2 * h)
            max_err = max(max_err, abs(grad[i] - upstream[i] * fd))
        out_zero = np.all(grad[~res.in_band] == 0.0)
        report(4, "STE: binary forward, sigmoid-slope backward, zero out of band",
               binary and max_err <= 1e-6 and out_zero,
               f"(max backward err {max_err:.2e}, {int((~res.in_band).sum())} out-of-band)")


# --------------------------------------------------------------------------
# criterion 5: deformation model identity at attach time
# --------------------------------------------------------------------------

class TestCriterion5AamIdentity:
    def test_criterion_5(self, micro_dataset):
        cfg = desk_config(init_points=150, iters_stage1=40, iters_stage2=0,
                          seed=31, log_interval=1000)
        cloud, _ = train_stage1(micro_dataset, cfg)
        aam = make_aam_for_config(micro_dataset, cfg)
        pixel_exact = True
        max_loss_diff = 0.0
        for frame in micro_dataset.frames[:4]:
            plane = ClipPlane(ZPLUS, frame.plane_offset)
            vis = visibility_ste_forward(cloud, plane)
            base = render(cloud, frame.camera, plane, vis,
                          background=micro_dataset.background, with_state=False).image
            visible = np.flatnonzero(vis.mask_binary == 1.0)
            deform, _ = aam_forward(aam, cloud.positions[visible], frame.plane_offset)
            with_aam = render(cloud, frame.camera, plane, vis, deformation=deform,
                              background=micro_dataset.background,
                              with_state=False).image
            pixel_exact = pixel_exact and np.array_equal(base, with_aam)
            la, _ = compute_loss(base, frame.image, cfg.lam)
            lb, _ = compute_loss(with_aam, frame.image, cfg.lam)
            max_loss_diff = max(max_loss_diff, abs(la.total - lb.total))
        report(5, "zero-init heads: pixel-exact identity, handover continuity",
               pixel_exact and max_loss_diff < 1e-10,
               f"(max handover loss diff {max_loss_diff:.1e})")


# --------------------------------------------------------------------------
# criterion 6: desk-scale end-to-end training quality
# --------------------------------------------------------------------------

@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    import numba

    root = tmp_path_factory.mktemp("desk_ds")
    vol = make_volume("nested-shells", dims=(64, 64, 64))
    generate_dataset(vol, n_train=120, n_test=20, image_size=128, z_range=None,
                     seed=77, out_dir=root, steps=192)
    ds = load_dataset(root)
    cfg = desk_config(init_points=5000, iters_stage1=1000, iters_stage2=2000,
                      seed=0, log_interval=500)
    t0 = time.monotonic()
    cloud, aam, _ = train_full(ds, cfg)
    elapsed = time.monotonic() - t0
    from clipgs.evalbench import evaluate
    rep = evaluate(cloud, aam, ds, split="test")
    return {"report": rep, "elapsed": elapsed,
            "threads": numba.get_num_threads(), "cloud": cloud, "aam": aam}


@pytest.mark.slow
class TestCriterion6DeskScale:
    def test_criterion_6(self, desk_run):
        rep = desk_run["report"]
        elapsed = desk_run["elapsed"]
        threads = desk_run["threads"]
        # the 15-minute bound is stated for a 4-core desktop; the kernels scale
        # with threads, so scale the wall-clock allowance by missing cores
        budget = 900.0 * 4.0 / min(4, threads)
        ok = rep.psnr_mean >= 24.0 and rep.ssim_mean >= 0.85 and elapsed <= budget
        report(6, "desk-scale run: PSNR >= 24 dB, SSIM >= 0.85, within budget", ok,
               f"(PSNR {rep.psnr_mean:.3f} +/- {rep.psnr_std:.3f}, "
               f"SSIM {rep.ssim_mean:.4f}, {elapsed:.0f}s on {threads} thread(s), "
               f"budget {budget:.0f}s)")


# --------------------------------------------------------------------------
# criterion 7: ablation direction and storage arithmetic
# --------------------------------------------------------------------------

@pytest.fixture(scope="session")
def ablation_run(tmp_path_factory):
    from clipgs.evalbench import ablate

    root = tmp_path_factory.mktemp("ablate_ds")
    vol = make_volume("nested-shells", dims=(48, 48, 48))
    generate_dataset(vol, n_train=40, n_test=8, image_size=48, z_range=None,
                     seed=33, out_dir=root, steps=96)
    ds = load_dataset(root)
    base = desk_config(init_points=800, iters_stage1=250, iters_stage2=500,
                       log_interval=100000)
    return ablate(ds, base, seeds=(0, 1, 2), bench_duration=0.5)


@pytest.mark.slow
class TestCriterion7Ablation:
    def test_criterion_7(self, ablation_run):
        from clipgs.evalbench import format_ablation_table

        rows = {r.variant: r for r in ablation_run}
        table_ok = set(rows) == {"HT", "LT", "AAM", "AAM+HT", "AAM+LT"}
        lt, full = rows["LT"], rows["AAM+LT"]
        direction = full.psnr_mean >= lt.psnr_mean
        storage_ok = all(
            f["storage_bytes"] == l["storage_bytes"] + f["aam_bytes"]
            and l["storage_bytes"] < f["storage_bytes"]
            for f, l in zip(full.per_seed, lt.per_seed))
        seeds_ok = all(len(r.per_seed) == 3 for r in ablation_run)
        audit_ok = all(
            len({r.per_seed[i]["init_sha256"] for r in ablation_run}) == 1
            for i in range(3))
        print("\n" + format_ablation_table(ablation_run))
        report(7, "ablation: mean PSNR(AAM+LT) >= mean PSNR(LT), storage identity",
               table_ok and direction and storage_ok and seeds_ok and audit_ok,
               f"(full {full.psnr_mean:.3f} vs LT {lt.psnr_mean:.3f} over 3 seeds; "
               f"storage {full.storage_bytes} = {lt.storage_bytes} + {full.aam_bytes})")


# --------------------------------------------------------------------------
# criterion 8: plane-consistency properties
# --------------------------------------------------------------------------

class TestCriterion8PlaneConsistency:
    def test_criterion_8(self):
        rng = np.random.default_rng(4700)
        cam = make_camera()
        cloud = random_cloud(rng, 40)
        top = cloud.trunc_values.max()
        img1 = render(cloud, cam, ClipPlane(ZPLUS, top + 0.5),
                      visibility_ste_forward(cloud, ClipPlane(ZPLUS, top + 0.5)),
                      with_state=False).image
        img2 = render(cloud, cam, ClipPlane(ZPLUS, top + 7.0),
                      visibility_ste_forward(cloud, ClipPlane(ZPLUS, top + 7.0)),
                      with_state=False).image
        renders_equal = np.array_equal(img1, img2)

        vol = make_volume("nested-shells", dims=(32, 32, 32))
        from clipgs.datagen import orbit_camera
        rcam = orbit_camera(np.zeros(3), 2.0, np.array([1.0, 0.3, 0.4]), 32, 32)
        unclipped = raymarch_render(vol, rcam, None, steps=64)
        clipped_inf = raymarch_render(vol, rcam, ClipPlane(ZPLUS, 1e18), steps=64)
        march_equal = np.array_equal(unclipped, clipped_inf)
        report(8, "identical masks render bit-identical; raymarch clip at +inf "
               "equals unclipped", renders_equal and march_equal)


# --------------------------------------------------------------------------
# criterion 9: metric correctness
# --------------------------------------------------------------------------

class TestCriterion9Metrics:
    def test_criterion_9(self):
        rng = np.random.default_rng(4800)
        x = rng.random((32, 32, 3))
        ssim_ok = ssim(x, x) == pytest.approx(1.0, abs=1e-12)
        base = np.full((16, 16, 3), 0.4)
        psnr_ok = psnr(base + 0.1, base) == pytest.approx(20.0, abs=1e-12)

        y = rng.random((16, 16, 3))
        t = rng.random((16, 16, 3))
        _, grad = dssim_with_grad(y, t)
        h = 1e-6
        fd_ok = True
        for i, j, c in [(0, 0, 0), (8, 8, 1), (15, 3, 2), (4, 11, 0)]:
            yp, ym = y.copy(), y.copy()
            yp[i, j, c] += h
            ym[i, j, c] -= h
            fd = (dssim_with_grad(yp, t)[0] - dssim_with_grad(ym, t)[0]) / (2 * h)
            fd_ok = fd_ok and close(grad[i, j, c], fd, rel=1e-3, abs_tol=1e-9)
        report(9, "SSIM(x,x)=1, PSNR(0.1)=20 dB, D-SSIM gradient check",
               ssim_ok and psnr_ok and fd_ok)


# --------------------------------------------------------------------------
# criterion 10: training determinism through the CLI
# --------------------------------------------------------------------------

class TestCriterion10Determinism:
    def test_criterion_10(self, tmp_path):
        import numba

        from clipgs.cli import main

        old = os.environ.get("CLIPGS_THREADS")
        os.environ["CLIPGS_THREADS"] = "1"
        numba.set_num_threads(1)
        try:
            data = tmp_path / "ds"
            assert main(["gen-data", "--preset", "nested-shells", "--dims", "24",
                         "--n-train", "3", "--n-test", "1", "--size", "32",
                         "--steps", "24", "--seed", "2", "--out", str(data)]) == 0
            args = ["train", "--data", str(data), "--iters1", "10", "--iters2", "10",
                    "--init-points", "80", "--seed", "12"]
            assert main(args + ["--out", str(tmp_path / "a")]) == 0
            assert main(args + ["--out", str(tmp_path / "b")]) == 0
            same = ((tmp_path / "a" / "model.cgs").read_bytes()
                    == (tmp_path / "b" / "model.cgs").read_bytes())
        finally:
            if old is None:
                os.environ.pop("CLIPGS_THREADS", None)
            else:
                os.environ["CLIPGS_THREADS"] = old
        report(10, "cmd_train twice with fixed seed: bit-identical model files", same)
