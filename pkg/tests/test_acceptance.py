"""One test per acceptance criterion; each prints a PASS/FAIL line.

Criteria 7-9 need full-length training runs. They run at the reduced scale
(see ``protocol``) when DUALSEG_LONG=1 and at the default network scale when
DUALSEG_PAPER_SCALE=1 as well; otherwise they are skipped.
"""
import math
import subprocess
import sys
import time

import numpy as np
import pytest
from scipy import stats

import protocol
from dualseg import tensor_core as tc
from dualseg.bayes import InferenceConfig, dense_probabilities, mc_segment, uncertainty_summary
from dualseg.metrics import report
from dualseg.network import Network, NetworkSpec, thin_spec
from dualseg.phantom import PhantomSpec, generate
from dualseg.sampler import BalancedSampler
from helpers import FD_STEP, brute_assd, brute_dice, central_diff, rel_err, settle_bn

CASES = 50
FD_TOL = 1e-4

long_only = pytest.mark.skipif(not protocol.LONG, reason="full-length training runs need DUALSEG_LONG=1")
SCALE = protocol.PAPER if protocol.PAPER_SCALE else protocol.REDUCED


# -- 1. gradient correctness ----------------------------------------------------

def _fd_check(f, pairs, rng, max_entries=24):
    """Worst relative error over ``(analytic, array)`` pairs, FD on a random
    subset of entries of each array."""
    worst = 0.0
    for analytic, arr in pairs:
        n = arr.size
        idx = np.sort(rng.choice(n, size=min(n, max_entries), replace=False))
        numeric = central_diff(f, arr, idx)
        worst = max(worst, rel_err(np.ravel(analytic)[idx], numeric))
    return worst


def _away_from_zero(x, eps=1e-3):
    return np.where(np.abs(x) < eps, np.sign(x + 1e-12) * eps * 2, x)


def _case_conv(rng):
    d = int(rng.integers(1, 4))
    k = int(rng.choice([1, 3]))
    cin, cout, n = (int(v) for v in rng.integers(1, 4, 3))
    sp = (k - 1) * d + rng.integers(1, 4, 3)
    x = rng.standard_normal((n, cin, *sp))
    w = rng.standard_normal((cout, cin, k, k, k))
    r = rng.standard_normal((n, cout, *(sp - (k - 1) * d)))
    gx, gw = tc.conv3d_backward(r, x, w, d)
    f = lambda: float(np.sum(r * tc.conv3d(x, w, d)))
    return _fd_check(f, [(gx, x), (gw, w)], rng)


def _case_prelu(rng):
    x = _away_from_zero(rng.standard_normal((2, 3, 3, 4, 2)))
    a = rng.uniform(0.05, 0.5, 3)
    r = rng.standard_normal(x.shape)
    gx, ga = tc.prelu_backward(r, x, a)
    f = lambda: float(np.sum(r * tc.prelu(x, a)))
    return _fd_check(f, [(gx, x), (ga, a)], rng)


def _case_batchnorm(rng):
    c = int(rng.integers(1, 4))
    x = rng.standard_normal((2, c, 3, 3, 2)) * rng.uniform(0.5, 3) + rng.normal()
    gamma, beta = rng.uniform(0.5, 1.5, c), rng.normal(size=c)
    r = rng.standard_normal(x.shape)

    def f():
        y, _ = tc.batchnorm(x, gamma, beta, tc.BatchNormStats.fresh(c, np.float64), True)
        return float(np.sum(r * y))

    _, cache = tc.batchnorm(x, gamma, beta, tc.BatchNormStats.fresh(c, np.float64), True)
    gx, gg, gb = tc.batchnorm_backward(r, cache)
    return _fd_check(f, [(gx, x), (gg, gamma), (gb, beta)], rng)


def _case_dropout(rng):
    x = rng.standard_normal((2, 3, 3, 3, 3))
    r = rng.standard_normal(x.shape)
    seed = int(rng.integers(1 << 30))
    _, mask = tc.dropout(x, 0.3, np.random.default_rng(seed))
    f = lambda: float(np.sum(r * tc.dropout(x, 0.3, np.random.default_rng(seed))[0]))
    return _fd_check(f, [(tc.dropout_backward(r, mask, 0.3), x)], rng)


def _case_softmax_ce(rng):
    c = int(rng.integers(2, 6))
    z = rng.standard_normal((2, c, 3, 2, 2)) * 2
    t = rng.integers(0, c, (2, 3, 2, 2))
    _, g = tc.cross_entropy(tc.softmax_channels(z), t)
    f = lambda: tc.cross_entropy(tc.softmax_channels(z), t)[0]
    return _fd_check(f, [(g, z)], rng)


def _case_concat(rng):
    a, b = rng.standard_normal((1, 2, 3, 3, 3)), rng.standard_normal((1, 3, 3, 3, 3))
    r = rng.standard_normal((1, 5, 3, 3, 3))
    ga, gb = tc.split_channels(r, 2)
    f = lambda: float(np.sum(r * tc.concat_channels(a, b)))
    return _fd_check(f, [(ga, a), (gb, b)], rng)


OPS = {"conv3d": _case_conv, "prelu": _case_prelu, "batchnorm": _case_batchnorm,
       "dropout": _case_dropout, "softmax_cross_entropy": _case_softmax_ce, "concat": _case_concat}


class KinkWatch:
    """Records the sign pattern of every PReLU input seen by ``tc.prelu``.

    A central difference whose two evaluations see a different pattern than
    the base point straddles a kink, where the analytic gradient is not the
    derivative; such probes are redrawn.
    """

    def __init__(self, monkeypatch):
        self.trace = None
        orig = tc.prelu

        def watched(x, slopes):
            if self.trace is not None:
                self.trace.append(np.asarray(x) > 0)
            return orig(x, slopes)

        monkeypatch.setattr(tc, "prelu", watched)

    def signs(self, f):
        self.trace = []
        val = f()
        trace, self.trace = self.trace, None
        return val, trace

    @staticmethod
    def same(a, b):
        return all(np.array_equal(x, y) for x, y in zip(a, b))


def _network_setup(seed, spec_kw, out):
    rng = np.random.default_rng(seed)
    width = int(rng.integers(2, 5))
    spec = thin_spec(width, dropout=0.3, **spec_kw)
    net = Network.build(spec, rng, np.float64)
    for k in ("fuse.0.b", "fuse.1.b", "cls.b"):
        # nonzero biases keep fully dropped fusion units off the PReLU kink
        net.params[k] = rng.uniform(0.05, 0.2, net.params[k].shape)
    ext = spec.input_extents(out)
    lp = rng.standard_normal((2, 1, *(ext["local"],) * 3))
    gp = rng.standard_normal((2, 1, *(ext["global"],) * 3))
    t = rng.integers(0, 3, (2, out, out, out))
    dseed = int(rng.integers(1 << 30))

    def f():
        logits = net.forward(lp, gp, "train", np.random.default_rng(dseed))
        return tc.cross_entropy(tc.softmax_channels(logits), t)[0]

    logits = net.forward(lp, gp, "train", np.random.default_rng(dseed))
    _, g = tc.cross_entropy(tc.softmax_channels(logits), t)
    return net, f, net.backward(g), rng


def _network_case_entries(seed, watch, per_tensor=6, h=FD_STEP):
    """Shallow thin dual net (widths 2-4): FD on entries of every parameter
    tensor. Returns ``(worst rel err, probes redrawn)``."""
    net, f, grads, rng = _network_setup(seed, dict(local_layers=3, global_dilations=(1, 2, 1)), 3)
    _, base = watch.signs(f)
    worst, redrawn = 0.0, 0
    for k, p in net.params.items():
        flat = p.reshape(-1)
        analytic, numeric = [], []
        for i in rng.permutation(flat.size):
            if len(analytic) == per_tensor:
                break
            old = flat[i]
            flat[i] = old + h
            fp, sp = watch.signs(f)
            flat[i] = old - h
            fm, sm = watch.signs(f)
            flat[i] = old
            if not (watch.same(base, sp) and watch.same(base, sm)):
                redrawn += 1
                continue
            analytic.append(grads[k].reshape(-1)[i])
            numeric.append((fp - fm) / (2 * h))
        assert analytic, f"every probe of {k} straddles a kink"
        worst = max(worst, rel_err(analytic, numeric))
    return worst, redrawn


def _network_case_direction(seed, watch, h=1e-8, tries=4, bases=5):
    """Full-depth thin dual net on 21^3/53^3-sized inputs: derivative along a
    random direction through all parameters at once. The step is small
    because about a million PReLU inputs sit along the path; when a base
    point lies within a step of a kink, a fresh base point is drawn."""
    redrawn = 0
    for b in range(bases):
        net, f, grads, rng = _network_setup([seed, b], {}, 1)
        _, base_signs = watch.signs(f)
        base = {k: p.copy() for k, p in net.params.items()}
        for _ in range(tries):
            v = {k: rng.standard_normal(p.shape) for k, p in base.items()}
            vals, ok = [], True
            for s in (h, -h):
                for k in base:
                    net.params[k][...] = base[k] + s * v[k]
                val, signs = watch.signs(f)
                vals.append(val)
                ok &= watch.same(base_signs, signs)
            for k in base:
                net.params[k][...] = base[k]
            if ok:
                analytic = sum(float(np.sum(grads[k] * v[k])) for k in base)
                return rel_err(analytic, (vals[0] - vals[1]) / (2 * h)), redrawn
            redrawn += 1
    raise AssertionError(f"seed {seed}: no kink-free probe found")


def test_c1_gradient_correctness(acceptance, monkeypatch):
    t0 = time.perf_counter()
    ok = True
    for name, case in OPS.items():
        errs = [case(np.random.default_rng([1, i])) for i in range(CASES)]
        passed = max(errs) < FD_TOL
        ok &= passed
        acceptance(1, f"gradients: {name}", passed, f"{CASES} cases, max rel err {max(errs):.2e}")
    for title, case in (("shallow thin dual network, entrywise", _network_case_entries),
                        ("full-depth thin dual network, random directions", _network_case_direction)):
        watch = KinkWatch(monkeypatch)
        errs, redrawn = zip(*(case(s, watch) for s in range(CASES)))
        passed = max(errs) < FD_TOL
        ok &= passed
        acceptance(1, f"gradients: {title}", passed,
                   f"{CASES} cases, max rel err {max(errs):.2e}, {sum(redrawn)} kink-straddling probes redrawn")
    elapsed = time.perf_counter() - t0
    acceptance(1, "gradients: runtime", elapsed < 300, f"{elapsed:.1f}s (< 300s)")
    assert ok and elapsed < 300


# -- 2. receptive-field fidelity -------------------------------------------------

def _footprint(which, rf, margin=2):
    rng = np.random.default_rng(11)
    spec = NetworkSpec(pathways=which).with_(
        local=thin_spec(2).local, global_=thin_spec(2).global_, fusion_width=2)
    net = settle_bn(Network.build(spec, rng, np.float64), rng)
    n = 2 * rf - 1 + 2 * margin  # output extent rf + 2 * margin
    x = rng.standard_normal((1, 1, n, n, n))
    p = rf - 1 + margin
    y = x.copy()
    y[0, 0, p, p, p] += 10.0
    args = lambda v: (v, None) if which == "local" else (None, v)
    base = net.forward(*args(x))
    pert = net.forward(*args(y))
    changed = np.any(base != pert, axis=(0, 1))
    box = [np.flatnonzero(changed.any(axis=tuple(a for a in range(3) if a != ax))) for ax in range(3)]
    extent = tuple(int(b.max() - b.min() + 1) for b in box)
    return extent, int(changed.sum())


@pytest.mark.parametrize("which,rf", [("local", 21), ("global", 53)])
def test_c2_receptive_field(which, rf, acceptance):
    t0 = time.perf_counter()
    extent, count = _footprint(which, rf)
    elapsed = time.perf_counter() - t0
    passed = extent == (rf,) * 3 and count == rf ** 3 and elapsed < 120
    acceptance(2, f"receptive field {which}", passed,
               f"footprint {extent}, {count} voxels changed (want {rf}^3 = {rf ** 3}), {elapsed:.1f}s")
    assert passed


# -- 3. shape contract ------------------------------------------------------------

def test_c3_shape_contract(acceptance):
    net = Network.build(NetworkSpec(), np.random.default_rng(0))
    settle_bn(net, np.random.default_rng(1))
    results = {}
    for (loc, glo, want), batch in (((27, 59, 7), 2), ((73, 105, 53), 1)):
        lp = np.zeros((batch, 1, loc, loc, loc), np.float32)
        gp = np.zeros((batch, 1, glo, glo, glo), np.float32)
        outs = {w: net._pathway_forward(w, p, False, None).shape[2:] for w, p in (("local", lp), ("global", gp))}
        logits = net.forward(lp, gp)
        results[(loc, glo)] = outs["local"] == outs["global"] == (want,) * 3 and logits.shape == (batch, 3, want, want, want)
    with pytest.raises(tc.ShapeError):
        net.forward(np.zeros((1, 1, 27, 27, 27), np.float32), np.zeros((1, 1, 61, 61, 61), np.float32))
    passed = all(results.values())
    acceptance(3, "shape contract", passed,
               "27^3/59^3 -> 7^3 and 73^3/105^3 -> 53^3 on the default network; misaligned inputs rejected")
    assert passed


# -- 4. metric oracles --------------------------------------------------------------

def test_c4_metric_oracles(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    dice_bad = assd_worst = 0
    for i in range(200):
        shape = tuple(int(s) for s in rng.integers(2, 17, 3))
        kind = i % 3
        if kind == 0:  # independent noise
            a = rng.random(shape) < rng.uniform(0.02, 0.7)
            m = rng.random(shape) < rng.uniform(0.02, 0.7)
        else:  # overlapping boxes, the realistic case
            a, m = np.zeros(shape, bool), np.zeros(shape, bool)
            for mask in (a, m):
                lo = [int(rng.integers(0, s)) for s in shape]
                hi = [int(rng.integers(l + 1, s + 1)) for l, s in zip(lo, shape)]
                mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = True
        if not a.any():
            a.flat[rng.integers(a.size)] = True
        if not m.any():
            m.flat[rng.integers(m.size)] = True
        vs = tuple(rng.uniform(0.5, 2.0, 3)) if kind == 2 else (1.0, 1.0, 1.0)
        rep = report(a.astype(np.uint8), m.astype(np.uint8), vs, 2)
        row = rep.rows[0]
        counts_ok = row.auto_voxels == int(a.sum()) and row.manual_voxels == int(m.sum())
        dice_bad += not (counts_ok and row.dsc == brute_dice(a, m))
        assd_worst = max(assd_worst, abs(row.assd - brute_assd(a, m, vs)))
    elapsed = time.perf_counter() - t0
    passed = dice_bad == 0 and assd_worst <= 1e-9 and elapsed < 60
    acceptance(4, "metric oracles", passed,
               f"200 pairs: {dice_bad} DSC mismatches, max ASSD diff {assd_worst:.1e} mm, {elapsed:.1f}s")
    assert passed


# -- 5. balanced sampler --------------------------------------------------------------

def test_c5_balanced_sampler(acceptance):
    t0 = time.perf_counter()
    img, lab = generate(PhantomSpec(dims=(64, 64, 64), seed=5))
    s = BalancedSampler(img.data, lab.data, 3)
    classes, _, centers = s.draw_centers(30000, np.random.default_rng(5))
    got = lab.data[tuple(centers.T)]
    assert np.array_equal(got, classes)
    counts = np.bincount(got, minlength=3)
    freq = counts / counts.sum()
    p = stats.chisquare(counts).pvalue
    elapsed = time.perf_counter() - t0
    passed = bool(np.all(np.abs(freq - 1 / 3) <= 0.01)) and p > 0.001 and elapsed < 60
    acceptance(5, "balanced sampler", passed,
               f"frequencies {np.round(freq, 4).tolist()}, chi-square p={p:.3f}, {elapsed:.1f}s")
    assert passed


# -- 6. MC dropout --------------------------------------------------------------------

def test_c6_mc_dropout(trained_model, acceptance):
    t0 = time.perf_counter()
    res, _, out, data = trained_model
    image, labels = data.test
    tile = SCALE.tile_extent

    det = dense_probabilities(res.net, image.data, "deterministic", tile)
    zero = mc_segment(res.net, image.data, InferenceConfig(3, 0.0, 0, tile))
    p0 = not zero.class_variance.any() and np.array_equal(zero.mean, det.astype(np.float32))

    # `out` is the N=20, p=0.3 evaluation of the trained model
    assert out.samples == 20
    nonneg = bool((out.class_variance >= 0).all() and (out.variance >= 0).all())
    norm = float(np.abs(out.mean.sum(axis=0, dtype=np.float64) - 1).max())
    summary = uncertainty_summary(out, labels.data)
    band, interior = summary["boundary_band"]["mean"], summary["interior"]["mean"]
    ref_band, ref_interior = summary["reference_boundary_band"]["mean"], summary["reference_interior"]["mean"]
    positive = summary["overall"]["mean"] > 0
    elapsed = time.perf_counter() - t0
    passed = (p0 and nonneg and norm <= 1e-5 and positive and band > interior
              and ref_band > ref_interior and elapsed < 600)
    acceptance(6, "MC dropout", passed,
               f"p=0 exact={p0}; p=0.3,N=20: nonneg={nonneg}, max |sum-1|={norm:.1e}, "
               f"band/interior variance {band:.2e}/{interior:.2e} (reference {ref_band:.2e}/{ref_interior:.2e}), "
               f"{res.checkpoint.iteration} training iterations")
    assert passed


# -- 7. phantom end to end -------------------------------------------------------------

@long_only
def test_c7_phantom_end_to_end(acceptance):
    t0 = time.perf_counter()
    _, rep3, _ = protocol.run(3, SCALE)
    ok3 = rep3.mean_dsc >= 0.80 and rep3.mean_assd <= 1.0
    acceptance(7, f"3-class phantom ({SCALE.name} scale)", ok3,
               f"test mean DSC {rep3.mean_dsc:.4f} (>= 0.80), ASSD {rep3.mean_assd:.3f} (<= 1.0)")
    _, rep9, _ = protocol.run(9, SCALE)
    ok9 = rep9.mean_dsc >= 0.70
    acceptance(7, f"9-class phantom ({SCALE.name} scale)", ok9,
               f"test mean subregion DSC {rep9.mean_dsc:.4f} (>= 0.70), {time.perf_counter() - t0:.0f}s")
    assert ok3 and ok9


# -- 8. ablation direction --------------------------------------------------------------

@long_only
def test_c8_ablation_direction(acceptance):
    reps = {p: protocol.run(3, SCALE, pathways=p)[1] for p in ("dual", "local", "global")}
    dsc = {p: r.mean_dsc for p, r in reps.items()}
    assd = {p: r.mean_assd for p, r in reps.items()}
    ok_dsc = dsc["dual"] >= max(dsc["local"], dsc["global"]) - 0.02
    ok_assd = assd["global"] <= assd["local"]
    acceptance(8, "dual DSC vs single paths", ok_dsc,
               "mean DSC " + ", ".join(f"{p} {v:.4f}" for p, v in dsc.items()))
    acceptance(8, "global-only ASSD <= local-only", ok_assd,
               "mean ASSD " + ", ".join(f"{p} {v:.3f}" for p, v in assd.items()))
    assert ok_dsc and ok_assd


# -- 9. augmentation effect ----------------------------------------------------------------

@long_only
def test_c9_augmentation_effect(acceptance):
    ok = True
    augs, plains = [], []
    for seed in (0, 1, 2):
        aug = protocol.run(9, SCALE, seed=seed, augment=True)[1].mean_dsc
        plain = protocol.run(9, SCALE, seed=seed, augment=False)[1].mean_dsc
        augs.append(aug)
        plains.append(plain)
        passed = aug >= plain - 0.01
        ok &= passed
        acceptance(9, f"augmentation seed {seed}", passed, f"augmented {aug:.4f} vs plain {plain:.4f}")
    # the per-seed comparison above is what decides; the seed mean is reported alongside
    print(f"criterion 9 seed mean (informational): augmented {np.mean(augs):.4f} vs plain {np.mean(plains):.4f}")
    assert ok


# -- 10. reproducibility -----------------------------------------------------------------

def _pipeline(workdir, verify=True):
    """phantom -> train -> infer through separate processes."""
    import json
    flag = ["--verify"] if verify else []
    run = lambda *a: subprocess.run([sys.executable, "-m", "dualseg", *flag, *a], cwd=workdir,
                                    capture_output=True, text=True, check=True)
    run("phantom", "ph", "--dims", "32", "32", "32", "--fraction", "0.01", "--seed", "7", "--set", "2", "1", "1")
    doc = json.loads((workdir / "ph_config.json").read_text())
    doc["network"].update(fusion_width=6, local_widths=[3, 3, 3], global_widths=[3, 3, 3],
                          global_dilations=[1, 2, 1])
    doc["training"].update(max_iterations=12, validation_interval=5)
    doc["inference"].update(mc_samples=4, tile_extent=24)
    (workdir / "ph_config.json").write_text(json.dumps(doc))
    run("train", "--config", "ph_config.json", "--out", "m.ckpt")
    run("infer", "--checkpoint", "m.ckpt", "--image", "ph_test_image.vol", "--out", "pred")
    return {p.name: p.read_bytes() for p in sorted(workdir.iterdir()) if p.is_file()}


def test_c10_reproducibility(tmp_path, acceptance):
    runs = []
    for name in ("a", "b"):
        (tmp_path / name).mkdir()
        runs.append(_pipeline(tmp_path / name))
    a, b = runs
    differ = sorted(k for k in a if a[k] != b.get(k))
    expected = {"m.ckpt", "m.log", "pred_labels.vol", "pred_variance.vol", "pred_prob0.vol"}
    passed = set(a) == set(b) and expected <= set(a) and not differ
    acceptance(10, "verification-mode reproducibility", passed,
               f"{len(a)} files compared (log, checkpoint, volumes), differing: {differ or 'none'}")

    # default threading may only change reduction order
    (tmp_path / "c").mkdir()
    c = _pipeline(tmp_path / "c", verify=False)
    last = lambda files: float(files["m.log"].decode().split("loss=")[-1].split()[0])
    drift = abs(last(c) - last(a)) / abs(last(a))
    acceptance(10, "threaded final-loss drift", drift <= 1e-4, f"relative {drift:.1e} (<= 1e-4)")
    assert passed and drift <= 1e-4
