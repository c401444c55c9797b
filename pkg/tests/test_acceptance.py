"""Acceptance criteria 1-9, each checked at its stated tolerance and runtime.

Every test records one PASS/FAIL line, shown in the pytest terminal summary.
"""

from __future__ import annotations

import itertools
import time

import numpy as np
import pytest

import oracles
from acceptance_log import record
from test_layers import check_layer
from test_registration import smooth_phantom


def finish(number, title, checks: dict, start, limit, detail):
    seconds = time.perf_counter() - start
    failed = [k for k, v in checks.items() if not v]
    ok = not failed and seconds < limit
    line = record(number, title, ok, seconds, limit, detail + (f"; failed: {', '.join(failed)}" if failed else ""))
    print(line)
    assert not failed, line
    assert seconds < limit, line


# -- 1 ----------------------------------------------------------------------------------------------

def test_criterion_1_statistical_oracles():
    from neuroquant.metrics import auc_mann_whitney, delong_paired_test, delong_variance, mcnemar_test, \
        youden_threshold

    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {"auc": 0.0, "var": 0.0, "cov": 0.0, "mcnemar": 0.0}
    youden_exact = True
    for i in range(200):
        n = int(rng.integers(4, 51))
        y = np.zeros(n, dtype=int)
        y[: int(rng.integers(2, n - 1))] = 1
        y = rng.permutation(y)
        a = rng.normal(size=n) + y
        b = rng.normal(size=n) + 0.5 * y
        if i % 2:
            a, b = np.round(a, 1), np.round(b, 1)   # ties
        sa, sb, ly = a.tolist(), b.tolist(), y.tolist()
        worst["auc"] = max(worst["auc"], abs(auc_mann_whitney(a, y) - oracles.auc_pairs(sa, ly)))
        worst["var"] = max(worst["var"], abs(delong_variance(a, y) - oracles.delong_var(sa, ly)))
        vd = oracles.delong_var(sa, ly) + oracles.delong_var(sb, ly) - 2 * oracles.delong_cov(sa, sb, ly)
        worst["cov"] = max(worst["cov"], abs(delong_paired_test(a, b, y).var_diff - vd))
        bb, cc = (int(v) for v in rng.integers(0, 13, 2))
        worst["mcnemar"] = max(worst["mcnemar"], abs(mcnemar_test(bb, cc).p - oracles.mcnemar_exact(bb, cc)))
        thr, j = youden_threshold(a, y)
        t_ref, j_ref = oracles.youden_scan(sa, ly)
        youden_exact &= thr == t_ref and j == j_ref
    checks = {k: v <= 1e-10 for k, v in worst.items()}
    checks["youden"] = youden_exact
    detail = "max errors " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", youden exact {youden_exact}"
    finish(1, "statistical oracle equivalence", checks, start, 10, detail)


# -- 2 ----------------------------------------------------------------------------------------------

def test_criterion_2_demographic_fixtures():
    from neuroquant.cohort import chi_square_p, welch_t_from_stats

    start = time.perf_counter()
    _, p_chi = chi_square_p([[1045, 794], [1182, 1037]])
    _, p_t = welch_t_from_stats(72.6, 5.9, 2227, 70.3, 6.6, 1831)
    checks = {"chi-square": abs(p_chi - 0.025) <= 0.01, "welch": p_t < 0.001}
    finish(2, "demographic test fixtures", checks, start, 1, f"chi-square p {p_chi:.4f}, Welch p {p_t:.1e}")


# -- 3 ----------------------------------------------------------------------------------------------

def composed_tiny_error(seed: int, per_tensor: int = 4, h: float = 1e-3) -> float:
    """Five-point difference on sampled coordinates of every tensor of the tiny network.

    A 16^3 input keeps two voxels per axis at the deepest blocks; at 8^3 the last
    batch norms see three values each and the loss bends too sharply for h = 1e-3.
    """
    from neuroquant.network import MBConvNet, preset
    from neuroquant.network.model import bce_with_logits

    rng = np.random.default_rng(seed)
    net = MBConvNet(preset("tiny", 2, input_shape=(16, 16, 16)))
    params = net.init_params(seed)
    for k, v in params.tensors.items():
        if k.endswith("running_var"):
            params.tensors[k] = rng.uniform(0.5, 2.0, v.shape)
        elif k.endswith("running_mean"):
            params.tensors[k] = rng.normal(0, 0.3, v.shape)
    x = rng.normal(size=(3, 2, 16, 16, 16))
    y = np.array([1.0, 0.0, 1.0])
    _, grads, _ = net.loss_and_grads(params, x, y, mode="train", update_stats=False)

    def loss():
        return bce_with_logits(net.forward(params, x, "train", update_stats=False).logits, y)

    worst = 0.0
    for name in params.trainable:
        arr = params.tensors[name]
        flat = rng.choice(arr.size, min(per_tensor, arr.size), replace=False)
        for f in flat:
            idx = np.unravel_index(f, arr.shape)
            old = arr[idx]
            vals = []
            for step in (2, 1, -1, -2):
                arr[idx] = old + step * h
                vals.append(loss())
            arr[idx] = old
            num = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)
            a = grads[name][idx]
            worst = max(worst, abs(a - num) / max(abs(a) + abs(num), 1e-7))
    return worst


def test_criterion_3_gradients():
    from neuroquant.network.layers import BatchNorm, Conv3d, Dense, DepthwiseConv3d, GlobalAvgPool, MBConv, SiLU, \
        SqueezeExcite

    start = time.perf_counter()
    layers = {
        "conv": (lambda: Conv3d("c", 2, 3, 3, 2), (2, 4, 4, 4, 2)),
        "depthwise": (lambda: DepthwiseConv3d("d", 3, 3, 2), (2, 4, 4, 4, 3)),
        "batchnorm": (lambda: BatchNorm("b", 3), (3, 2, 2, 2, 3)),
        "squeeze-excite": (lambda: SqueezeExcite("s", 4, 2), (2, 3, 3, 3, 4)),
        "silu": (lambda: SiLU(), (2, 3, 3, 3, 2)),
        "pool": (lambda: GlobalAvgPool(), (2, 3, 3, 3, 2)),
        "dense": (lambda: Dense("f", 4, 1), (3, 4)),
        "mbconv": (lambda: MBConv("m", 3, 3, expand=2, stride=1, se_ratio=0.5), (2, 3, 3, 3, 3)),
        "mbconv strided": (lambda: MBConv("m", 3, 4, expand=2, stride=2), (2, 4, 4, 4, 3)),
    }
    checks = {}
    for name, (make, shape) in layers.items():
        try:
            for seed in range(10):
                check_layer(make(), shape, seed)
            checks[name] = True
        except AssertionError:
            checks[name] = False
    worst = max(composed_tiny_error(seed) for seed in range(10))
    checks["tiny network"] = worst < 1e-4
    finish(3, "gradient correctness", checks, start, 60,
           f"{len(layers)} layer types x 10 seeds, tiny network worst rel err {worst:.1e}")


# -- 4 ----------------------------------------------------------------------------------------------

def test_criterion_4_multicontrast_benefit(multicontrast_run):
    from neuroquant.metrics import auc_mann_whitney, delong_paired_test

    start = time.perf_counter() - multicontrast_run["seconds"]
    y = multicontrast_run["y_test"]
    s1, s2 = multicontrast_run[1]["test"], multicontrast_run[2]["test"]
    a1, a2 = auc_mann_whitney(s1, y), auc_mann_whitney(s2, y)
    p = delong_paired_test(s2, s1, y).p
    checks = {"gain >= 0.10": a2 - a1 >= 0.10, "DeLong p < 0.05": p < 0.05}
    finish(4, "multi-contrast benefit on phantoms", checks, start, 600,
           f"test AUC 1-channel {a1:.3f}, 2-channel {a2:.3f}, gain {a2 - a1:.3f}, DeLong p {p:.1e}")


# -- 5 ----------------------------------------------------------------------------------------------

def all_orientation_codes():
    pairs = [("L", "R"), ("P", "A"), ("I", "S")]
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((0, 1), repeat=3):
            yield "".join(pairs[a][s] for a, s in zip(perm, signs))


def test_criterion_5_preprocessing_invariants():
    from neuroquant.registration import rigid_register
    from neuroquant.volume import BrainMask, RigidTransform, apply_rigid, percentile_normalize, \
        reorient_to_lpi, resample_isotropic, trilinear_sample
    from neuroquant.volume3d import Volume3D, affine_for_orientation

    start = time.perf_counter()
    rng = np.random.default_rng(5)
    checks = {}

    # reorientation: every voxel keeps its value at the same world position
    world_err, values_kept = 0.0, True
    codes = list(all_orientation_codes())
    for code in codes:
        vol = Volume3D(rng.normal(size=(4, 5, 6)), affine_for_orientation(code, (1.1, 0.7, 2.3), (12.5, -3.0, 40.2)))
        out = reorient_to_lpi(vol)
        dst = np.stack(np.meshgrid(*[np.arange(n) for n in out.shape], indexing="ij"), -1).reshape(-1, 3)
        dst_h = np.c_[dst, np.ones(len(dst))]
        world = dst_h @ out.affine.T
        src = np.rint(world @ np.linalg.inv(vol.affine).T)[:, :3].astype(int)
        world_src = np.c_[src, np.ones(len(src))] @ vol.affine.T
        world_err = max(world_err, float(np.max(np.abs(world_src - world))))
        values_kept &= np.array_equal(vol.data[tuple(src.T)], out.data[tuple(dst.T)])
    checks["reorient world 1e-9"] = world_err <= 1e-9 and values_kept

    # trilinear exactness on affine intensity fields
    coef = rng.normal(size=4)
    g = np.stack(np.meshgrid(*[np.arange(n, dtype=float) for n in (7, 8, 9)], indexing="ij"), -1)
    field = Volume3D(g @ coef[:3] + coef[3])
    pts = rng.uniform(0, 1, (2000, 3)) * (np.array([7, 8, 9]) - 1)
    tri_err = float(np.max(np.abs(trilinear_sample(field, pts) - (pts @ coef[:3] + coef[3]))))
    aniso = Volume3D(np.zeros((7, 8, 9)), affine_for_orientation("LPI", (2.0, 1.5, 3.0), (5.0, -2.0, 1.0)))
    wg = np.c_[g.reshape(-1, 3), np.ones(g[..., 0].size)] @ aniso.affine.T
    aniso = Volume3D((wg[:, :3] @ coef[:3] + coef[3]).reshape(7, 8, 9), aniso.affine)
    iso = resample_isotropic(aniso, 1.0)
    ig = np.stack(np.meshgrid(*[np.arange(n, dtype=float) for n in iso.shape], indexing="ij"), -1).reshape(-1, 3)
    iw = np.c_[ig, np.ones(len(ig))] @ iso.affine.T
    back = iw @ np.linalg.inv(aniso.affine).T
    inside = np.all((back[:, :3] >= 0) & (back[:, :3] <= np.array(aniso.shape) - 1), axis=1)
    res_err = float(np.max(np.abs(iso.data.reshape(-1)[inside] - (iw[inside, :3] @ coef[:3] + coef[3]))))
    checks["trilinear exact"] = tri_err < 1e-9 and res_err < 1e-9

    # percentile normalization stays inside [0, 1]
    in_range = True
    for _ in range(50):
        data = rng.standard_cauchy((10, 10, 10)) * rng.uniform(0.1, 100)
        mask = BrainMask(rng.random((10, 10, 10)) < rng.uniform(0.1, 1.0))
        if mask.count == 0:
            continue
        out = percentile_normalize(Volume3D(data), mask, *sorted(rng.uniform(0, 100, 2)))
        in_range &= bool(np.all((out.data >= 0) & (out.data <= 1)))
    checks["normalize in [0,1]"] = in_range

    # registration recovers synthetic rigid transforms
    phantom = smooth_phantom()
    worst_t, worst_r = 0.0, 0.0
    for truth in (RigidTransform(ty=3.0), RigidTransform(rz=0.1),
                  RigidTransform(tx=1.5, ty=-2.0, tz=1.0, rx=0.05, ry=-0.04, rz=0.08)):
        est = rigid_register(phantom, apply_rigid(phantom, truth)).transform
        worst_t = max(worst_t, float(np.max(np.abs(np.array(est.params[:3]) - truth.params[:3]))))
        worst_r = max(worst_r, float(np.max(np.abs(np.array(est.params[3:]) - truth.params[3:]))))
    checks["registration"] = worst_t < 0.5 and worst_r < 0.02
    finish(5, "preprocessing invariants", checks, start, 60,
           f"{len(codes)} orientations, world err {world_err:.1e} mm; trilinear err {max(tri_err, res_err):.1e}; "
           f"registration err {worst_t:.1e} mm / {worst_r:.1e} rad")


# -- 6 ----------------------------------------------------------------------------------------------

def test_criterion_6_occlusion_oracle():
    from neuroquant.occlusion import LinearScorer, occlusion_map

    start = time.perf_counter()
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 16, 16, 16))
    w = rng.normal(0, 0.05, x.shape)
    amap = occlusion_map(x, LinearScorer(w, 0.2), kernel=7)
    err = float(np.max(np.abs(amap.delta - oracles.linear_oracle(x, w, 0.2, 7))))
    at_max = amap.values[np.unravel_index(np.argmax(amap.delta), amap.delta.shape)]
    checks = {"closed form": err <= 1e-10, "max delta gets min value": at_max == amap.values.min()}
    finish(6, "occlusion analytic oracle", checks, start, 30, f"16^3 kernel 7, max err {err:.1e}")


# -- 7 ----------------------------------------------------------------------------------------------

def test_criterion_7_quant_closed_loop():
    from neuroquant.phantom import PhantomSpec, generate_cohort
    from neuroquant.quant import Status, classify_status, load_calibration_profiles, profile_for, quantify

    start = time.perf_counter()
    cohort = generate_cohort(PhantomSpec(n_subjects=500, longitudinal_fraction=0.0, seed=17), render=False)
    profiles = load_calibration_profiles()
    agree = 0
    for i, rec in enumerate(cohort.records):
        pet = cohort.render(i)[2]
        res = quantify(pet, cohort.target_mask, cohort.reference_mask, profile_for(rec.dataset, rec.tracer, profiles))
        agree += res.status.value == rec.label
    rate = agree / len(cohort.records)
    boundary = True
    for tracer, cut in (("FBB", 12.0), ("FBP", 18.0)):
        cal = profiles[tracer]
        boundary &= cal.cutoff_cl == cut
        boundary &= classify_status(cut, cal) is Status.POSITIVE
        boundary &= classify_status(np.nextafter(cut, -np.inf), cal) is Status.NEGATIVE
    checks = {"agreement >= 99%": len(cohort.records) == 500 and rate >= 0.99, "cutoffs 12/18": boundary}
    finish(7, "quantification closed loop", checks, start, 30, f"{agree}/500 labels reproduced")


# -- 8 ----------------------------------------------------------------------------------------------

def test_criterion_8_split_contract():
    from collections import Counter

    from neuroquant.cohort import assign_splits
    from neuroquant.phantom import PhantomSpec, generate_cohort

    start = time.perf_counter()
    cohort = generate_cohort(PhantomSpec(n_subjects=1000, longitudinal_fraction=0.2, seed=8), render=False)
    a = assign_splits(cohort.records, seed=8)
    b = assign_splits(cohort.records, seed=8)
    c = assign_splits(cohort.records, seed=9)
    subjects = {p: {r.subject_id for r in a if r.partition == p} for p in ("train", "validation", "test")}
    counts = tuple(len(subjects[p]) for p in ("train", "validation", "test"))
    multi = {s for s, k in Counter(r.subject_id for r in a).items() if k > 1}
    checks = {
        "64/16/20": counts == (640, 160, 200),
        "subject-level": sum(counts) == 1000,
        "multi-exam not in test": not (multi & subjects["test"]) and len(multi) > 0,
        "deterministic": [(r.partition, r.fold) for r in a] == [(r.partition, r.fold) for r in b],
        "seed matters": [r.partition for r in a] != [r.partition for r in c],
    }
    finish(8, "split contract", checks, start, 5, f"subjects {counts}, {len(multi)} multi-exam subjects")


# -- 9 ----------------------------------------------------------------------------------------------

def test_criterion_9_format_fidelity(tmp_path):
    from neuroquant.network import MBConvNet, preset
    from neuroquant.network.checkpoint import load_checkpoint, save_checkpoint
    from neuroquant.nifti import load_nifti, save_nifti
    from neuroquant.report import MetricsReport, compare_models, cross_check, model_rows, parse_table
    from neuroquant.volume3d import Volume3D, affine_for_orientation

    start = time.perf_counter()
    rng = np.random.default_rng(9)
    vol = Volume3D(rng.normal(size=(9, 7, 5)) * 1e3, affine_for_orientation("LPI", (1.1, 0.9, 1.7), (3.3, -8.1, 2.2)))
    back = load_nifti(save_nifti(vol, tmp_path / "v.nii.gz", "float64"))
    nifti_ok = back.data.tobytes() == vol.data.tobytes() and back.affine.tobytes() == vol.affine.tobytes()

    cfg = preset("tiny", 2)
    params = MBConvNet(cfg).init_params(3)
    raw = save_checkpoint(params)
    loaded = load_checkpoint(raw, cfg)
    ckpt_ok = save_checkpoint(loaded) == raw and all(
        loaded.tensors[k].tobytes() == params.tensors[k].tobytes() and loaded.tensors[k].dtype == params.tensors[k].dtype
        for k in params.tensors)

    y = rng.integers(0, 2, 120)
    sa = np.clip(0.5 + 0.15 * (2 * y - 1) + rng.normal(0, 0.2, 120), 0, 1)
    sb = np.clip(0.5 + 0.25 * (2 * y - 1) + rng.normal(0, 0.2, 120), 0, 1)
    groups = rng.choice(["CN", "MCI", "dementia"], 120)
    report = MetricsReport({"config_hash": "0" * 16, "seed": 9, "version": "0.1.0"},
                           model_rows("a", "test", sa, y, 0.5, groups, 300) + model_rows("b", "test", sb, y, 0.5,
                                                                                         groups, 300),
                           [compare_models("a", "b", "test", "all", sa, sb, y, 0.5, 0.5)])
    text = report.to_text()
    report_ok = cross_check(report, text) == [] and len(parse_table(text)["rows"]) == len(report.rows)
    checks = {"nifti": nifti_ok, "checkpoint": ckpt_ok, "report cross-parse": report_ok}
    finish(9, "format fidelity", checks, start, 10, f"{len(raw)} checkpoint bytes, {len(report.rows)} report rows")


@pytest.mark.parametrize("code", ["LPI", "RAS", "SAL"])
def test_orientation_code_enumeration(code):
    assert code in set(all_orientation_codes()) and len(set(all_orientation_codes())) == 48
