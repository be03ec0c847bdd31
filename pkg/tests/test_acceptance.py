"""Acceptance gate: one test per criterion, each at its stated tolerance and
time budget. The terminal summary prints a PASS/FAIL line for each."""

import math
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from vstrestore import cli, metrics, restore, train, vst
from vstrestore.image import ImagePlane, RealizationStack, RegionMask
from vstrestore.noise import AcquisitionModel, inject_ld_from_fd, simulate_fd, simulate_ld
from vstrestore.phantom import PhantomConfig, generate

MODEL = AcquisitionModel(alpha=1.0, sigma_e=2.0, tau=50.0)
GAMMAS = (0.5, 0.25, 0.15, 0.05)
SHAPE_1E5 = (250, 400)
SHAPE_1E6 = (1000, 1000)


class Gate:
    """Collects sub-checks, records the summary line and fails on any miss."""

    def __init__(self, record_property, number, title):
        self.record = record_property
        self.label = f"criterion {number} ({title})"
        self.checks = []
        self.notes = []
        self.start = time.perf_counter()
        record_property("criterion", self.label)

    def check(self, ok, note):
        self.checks.append(bool(ok))
        self.notes.append(("" if ok else "MISS ") + note)

    def finish(self, budget):
        elapsed = time.perf_counter() - self.start
        self.check(elapsed < budget, f"t={elapsed:.1f}s<{budget:g}s")
        self.record("detail", "; ".join(self.notes))
        failed = [n for ok, n in zip(self.checks, self.notes) if not ok]
        assert not failed, failed


@pytest.fixture
def gate(record_property):
    return lambda number, title: Gate(record_property, number, title)


def test_criterion_01_variance_stabilization(gate):
    g = gate(1, "GAT unit variance")
    for y in (20, 50, 100, 1000, 1e4):
        z = simulate_fd(ImagePlane(np.full(SHAPE_1E5, float(y))), MODEL, 1000 + int(y))
        std = vst.gat_forward(vst.to_reduced(z, MODEL)).data.std(ddof=1)
        g.check(0.95 <= std <= 1.05, f"y={y:g}: std={std:.4f}")
    g.finish(10)


def test_criterion_02_exact_unbiased_inverse(gate):
    g = gate(2, "exact unbiased inverse")
    model = AcquisitionModel(alpha=1.0, sigma_e=0.5, tau=0.0)
    for y in (2.0, 5.0, 10.0):
        z = simulate_fd(ImagePlane(np.full(SHAPE_1E6, y)), model, 2000 + int(y))
        v = vst.gat_forward(vst.to_reduced(z, model))
        # a perfect denoiser returns E[f(z)]; each inverse is applied to that value
        ef = vst.VstImage(np.array([[v.data.mean()]]), v.sigma_e_reduced)
        err_exact = abs(vst.inverse_exact_unbiased(ef).data[0, 0] - y) / y
        err_alg = abs(vst.inverse_algebraic(ef).data[0, 0] - y) / y
        g.check(err_exact < 0.02 and err_exact < err_alg,
                f"y={y:g}: exact {100 * err_exact:.2f}% vs algebraic {100 * err_alg:.2f}%")
    g.finish(30)


def test_criterion_03_moment_restoration(gate):
    g = gate(3, "oracle moment restoration")
    y = 400.0
    flat = ImagePlane(np.full(SHAPE_1E5, y))
    fd_mean, fd_var = y + MODEL.tau, MODEL.alpha * y + MODEL.sigma_e ** 2
    for k, gamma in enumerate(GAMMAS):
        z = simulate_ld(flat, MODEL, gamma, 3000 + k)
        oracle = restore.OracleDenoiser(np.full(SHAPE_1E5, gamma * y + MODEL.tau), MODEL)
        out = restore.restore_pipeline(z, MODEL, gamma, oracle).data
        dm = abs(out.mean() - fd_mean) / fd_mean
        dv = abs(out.var(ddof=1) - fd_var) / fd_var
        g.check(dm < 0.005 and dv < 0.03, f"gamma={gamma}: mean {100 * dm:.3f}% var {100 * dv:.2f}%")
    g.finish(60)


def test_criterion_04_mnse_machinery(gate):
    g = gate(4, "MNSE decomposition")
    gen = np.random.default_rng(4)

    # (a) additivity holds identically
    exact = True
    for _ in range(20):
        truth = ImagePlane(gen.uniform(10, 500, (16, 16)))
        stack = RealizationStack(truth.data * gen.uniform(0.8, 1.2) + gen.normal(0, 5, (4, 16, 16)))
        rep = metrics.mnse_decompose(stack, truth, RegionMask.full(16, 16))
        exact &= rep.mnse == rep.bias_sq + rep.residual_noise
    g.check(exact, "(a) mnse == bias2 + rn on 20 stacks")

    # (b) Gaussian noise of known variance
    truth = ImagePlane(np.full(SHAPE_1E5, 100.0))
    stack = RealizationStack(100.0 + gen.normal(0, 10, (50,) + SHAPE_1E5))
    rep = metrics.mnse_decompose(stack, truth, RegionMask.full(*SHAPE_1E5))
    g.check(abs(rep.residual_noise - 1.0) < 0.03 and abs(rep.bias_sq) < 0.005,
            f"(b) rn={rep.residual_noise:.4f} (1.0) b2={100 * rep.bias_sq:.3f}pp")
    del stack

    # (c) dose scaling of residual noise after mean adjustment
    y = np.tile(np.linspace(100.0, 700.0, 256), (256, 1))
    plane = ImagePlane(y)
    truth = plane.like(y + MODEL.tau)
    mask = RegionMask.full(256, 256)
    p = 50
    fd = RealizationStack.from_planes(simulate_fd(plane, MODEL, 40_000 + j) for j in range(p))
    rn_fd = metrics.mnse_decompose(fd, truth, mask).residual_noise
    fd_term = MODEL.alpha * y + MODEL.sigma_e ** 2
    ratios = {}
    for k, gamma in enumerate(GAMMAS):
        ld = RealizationStack.from_planes(simulate_ld(plane, MODEL, gamma, 41_000 + 100 * k + j) for j in range(p))
        rn_ld = metrics.mean_adjust_then_decompose(ld, truth, mask).residual_noise
        ld_term = MODEL.alpha * y / gamma + MODEL.sigma_e ** 2 / gamma ** 2
        predicted = np.mean(ld_term / truth.data) / np.mean(fd_term / truth.data)
        ratios[gamma] = rn_ld / rn_fd
        g.check(abs(ratios[gamma] / predicted - 1) < 0.05,
                f"(c) gamma={gamma}: ratio {ratios[gamma]:.3f} vs predicted {predicted:.3f}")
    reference = 24.86 / 11.86
    g.check(abs(ratios[0.5] / reference - 1) < 0.05, f"(c) half-dose ratio {ratios[0.5]:.3f} vs reference {reference:.3f}")
    g.finish(120)


def test_criterion_05_injection_equivalence(gate):
    g = gate(5, "injection vs direct LD")
    y, mask, _ = generate(PhantomConfig())
    p = 10
    for k, gamma in enumerate(GAMMAS):
        truth = y.like(gamma * y.data + MODEL.tau)
        direct = RealizationStack.from_planes(simulate_ld(y, MODEL, gamma, 5000 + 100 * k + j) for j in range(p))
        injected = RealizationStack.from_planes(
            inject_ld_from_fd(simulate_fd(y, MODEL, 6000 + 100 * k + j), MODEL, gamma, 7000 + 100 * k + j)
            for j in range(p))
        sel = mask.flags
        m_d, m_i = direct.data[:, sel].mean(), injected.data[:, sel].mean()
        v_d = direct.data[:, sel].var(axis=0, ddof=1).mean()
        v_i = injected.data[:, sel].var(axis=0, ddof=1).mean()
        rn_d = metrics.mnse_decompose(direct, truth, mask).residual_noise
        rn_i = metrics.mnse_decompose(injected, truth, mask).residual_noise
        rel = [abs(m_i / m_d - 1), abs(v_i / v_d - 1), abs(rn_i / rn_d - 1)]
        g.check(max(rel) < 0.05, f"gamma={gamma}: mean {100 * rel[0]:.2f}% var {100 * rel[1]:.2f}% "
                                 f"rn {100 * rel[2]:.2f}%")
    g.finish(60)


def _brute_radial(grid, fx, fy, df):
    bins = {}
    for r in range(grid.shape[0]):
        for c in range(grid.shape[1]):
            k = int(math.floor(math.hypot(fx[c], fy[r]) / df + 0.5))
            bins.setdefault(k, []).append(float(grid[r, c]))
    return [(k * df, sum(v) / len(v)) for k, v in sorted(bins.items())]


def test_criterion_06_nps(gate):
    g = gate(6, "noise power spectrum")
    sigma2, pitch, las = 4.0, 0.1, 250.0
    gen = np.random.default_rng(6)
    stack = RealizationStack(gen.normal(0, math.sqrt(sigma2), (10, 512, 512)), pitch, pitch)
    mask = RegionMask.full(512, 512)
    ps = metrics.nps_2d(stack, mask, 64, 0.5, compensate_window=True, detrend="none")
    ps = metrics.nps_normalize(ps, mask, ImagePlane(np.full((512, 512), las), pitch, pitch))
    level = sigma2 * pitch * pitch / las ** 2
    mean_level = ps.grid.mean()
    g.check(abs(mean_level / level - 1) < 0.05, f"level {mean_level / level:.4f}x expected ({ps.roi_count} ROIs)")
    dev = max(abs(v / level - 1) for _, v in ps.radial[1:])
    g.check(dev < 0.05, f"max radial deviation {100 * dev:.2f}% over {len(ps.radial) - 1} bins")
    brute = _brute_radial(ps.grid, ps.freq_x, ps.freq_y, ps.df)
    same = len(brute) == len(ps.radial) and all(
        f1 == f2 and v1 == pytest.approx(v2, rel=1e-12) for (f1, v1), (f2, v2) in zip(ps.radial, brute))
    g.check(same, "radial binning == brute-force oracle")
    g.finish(30)


def test_criterion_07_brn_gradient(gate):
    g = gate(7, "BRN gradient vs finite differences")
    worst = 0.0
    lambdas = [0.0, math.inf] + list(np.random.default_rng(7).uniform(0.05, 2.0, 18))
    for seed, lam in enumerate(lambdas):
        rng = np.random.default_rng(700 + seed)
        batch = train.synthetic_dataset(1, PhantomConfig(width=64, height=64, seed=seed), MODEL, 0.5, 4,
                                        10_000 + 10 * seed)
        kernel = train.ConvKernel(train.ConvKernel.delta(5).weights * rng.uniform(0.6, 0.95)
                                  + rng.normal(0, 0.02, (5, 5)))
        grad = train.pipeline_gradient(kernel, batch, MODEL, 0.5, lam)
        frozen = train.recombination_state(kernel, batch, MODEL, 0.5)
        fd = np.zeros_like(grad)
        h = 1e-4
        for a in range(5):
            for b in range(5):
                up, dn = kernel.weights.copy(), kernel.weights.copy()
                up[a, b] += h
                dn[a, b] -= h
                fd[a, b] = (train.pipeline_loss(train.ConvKernel(up), batch, MODEL, 0.5, lam, frozen)
                            - train.pipeline_loss(train.ConvKernel(dn), batch, MODEL, 0.5, lam, frozen)) / (2 * h)
        worst = max(worst, np.linalg.norm(grad - fd) / np.linalg.norm(fd))
    g.check(worst < 1e-4, f"worst relative error {worst:.2e} over {len(lambdas)} seeds")
    g.finish(120)


SWEEP_GRID = [0.05, 0.1, 0.15, 0.2, 0.3, 0.45]


def test_criterion_08_tradeoff(gate):
    g = gate(8, "lambda trade-off")
    phantom = PhantomConfig(width=64, height=64, seed=3, blob_count=8, blob_scale=6.0, spot_count=2)
    scenes = train.synthetic_dataset(6, phantom, MODEL, 0.5, 10, 100)
    heldout = train.synthetic_dataset(4, PhantomConfig(**{**phantom.__dict__, "seed": 77}), MODEL, 0.5, 20, 100_000)
    cfg = train.TrainConfig(learning_rate=1e-2, epochs=300, realizations_per_scene=10, kernel_size=9, gamma=0.5)
    result = train.lambda_sweep(SWEEP_GRID, cfg, scenes, MODEL, heldout, include_endpoints=True)
    grid_rows = [r for r in result.rows if r.lambda_rn in SWEEP_GRID]
    lam = [r.lambda_rn for r in grid_rows]
    rho_b2 = spearmanr(lam, [r.bias_sq for r in grid_rows])[0]
    rho_mm = spearmanr(lam, [r.rn_mismatch for r in grid_rows])[0]
    g.check(rho_b2 >= 0.8, f"rho(lambda, B2)={rho_b2:+.2f}")
    g.check(rho_mm <= -0.8, f"rho(lambda, |RN-RN_FD|)={rho_mm:+.2f}")
    min_b2 = min(result.rows, key=lambda r: r.bias_sq).lambda_rn
    min_mm = min(result.rows, key=lambda r: r.rn_mismatch).lambda_rn
    g.check(min_b2 == 0.0, f"min B2 at lambda={min_b2}")
    g.check(min_mm == math.inf, f"min mismatch at lambda={min_mm}")
    g.finish(15 * 60)


def test_criterion_09_end_to_end(gate):
    g = gate(9, "NLM restoration vs LD")
    gamma, p = 0.5, 10
    y, mask, _ = generate(PhantomConfig())
    truth = y.like(y.data + MODEL.tau)
    ld = [simulate_ld(y, MODEL, gamma, 9000 + j) for j in range(p)]
    fd = RealizationStack.from_planes(simulate_fd(y, MODEL, 9100 + j) for j in range(p))
    nlm = restore.make_denoiser("nlm", h=1.0, patch_radius=3, search_radius=10)
    rd = RealizationStack.from_planes(restore.restore_pipeline(z, MODEL, gamma, nlm) for z in ld)
    rep_ld = metrics.mean_adjust_then_decompose(RealizationStack.from_planes(ld), truth, mask)
    rep_rd = metrics.mean_adjust_then_decompose(rd, truth, mask)
    rn_fd = metrics.mnse_decompose(fd, truth, mask).residual_noise
    g.check(rep_rd.mnse < rep_ld.mnse, f"MNSE RD {100 * rep_rd.mnse:.2f}% < LD {100 * rep_ld.mnse:.2f}%")
    g.check(abs(rep_rd.residual_noise - rn_fd) < abs(rep_ld.residual_noise - rn_fd),
            f"RN RD {100 * rep_rd.residual_noise:.2f}% LD {100 * rep_ld.residual_noise:.2f}% "
            f"FD {100 * rn_fd:.2f}%")
    g.finish(5 * 60)


def _run_twice(tmp_path, name, argv):
    a, b = tmp_path / f"{name}_a", tmp_path / f"{name}_b"
    assert cli.run([str(x) for x in argv] + ["--out-dir", str(a)]) == 0
    # second run from the resolved config alone
    assert cli.run([argv[0], "--config", str(a / f"{argv[0]}.cfg"), "--out-dir", str(b)]) == 0
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    return a, files_a == files_b and all((a / f).read_bytes() == (b / f).read_bytes() for f in files_a), len(files_a)


def test_criterion_10_cli_determinism(gate, tmp_path):
    g = gate(10, "CLI determinism")
    ph, ok, n = _run_twice(tmp_path, "phantom", ["phantom", "--width", 64, "--height", 64, "--seed", 2])
    g.check(ok, f"phantom ({n} files)")
    y = ph / "y.raw"
    ld, ok, n = _run_twice(tmp_path, "simulate", ["simulate", "--input", y, "--gamma", 0.5, "--count", 3,
                                                  "--seed", 8, "--jobs", 2])
    g.check(ok, f"simulate direct ({n} files)")
    realizations = sorted(str(p) for p in ld.glob("real_*.raw"))
    _, ok, n = _run_twice(tmp_path, "inject", ["simulate", "--mode", "inject", "--input", *realizations,
                                               "--gamma", 0.25, "--count", 3, "--seed", 9])
    g.check(ok, f"simulate inject ({n} files)")
    for den, extra in (("identity", []), ("gaussian", ["--gaussian-sigma", 1.5]),
                       ("nlm", ["--nlm-search-radius", 5]), ("oracle", ["--oracle-truth", y])):
        _, ok, n = _run_twice(tmp_path, f"restore_{den}", ["restore", "--input", *realizations, "--gamma", 0.5,
                                                           "--denoiser", den, *extra])
        g.check(ok, f"restore {den} ({n} files)")
    for which in ("mnse", "nps"):
        _, ok, n = _run_twice(tmp_path, f"eval_{which}", ["evaluate", "--which", which, "--input", *realizations,
                                                          "--truth", y, "--truth-offset", 50, "--mask",
                                                          ph / "mask.pgm", "--roi-size", 16])
        g.check(ok, f"evaluate {which} ({n} files)")
    ds, ok, n = _run_twice(tmp_path, "dataset", ["dataset", "--phantom-width", 40, "--phantom-height", 40,
                                                 "--phantom-spot-count", 1, "--scenes", 2, "--count", 3])
    g.check(ok, f"dataset ({n} files)")
    tr, ok, n = _run_twice(tmp_path, "train", ["train", "--dataset", ds, "--lambda-rn", 0.3, "--epochs", 5,
                                               "--kernel-size", 5])
    g.check(ok, f"train ({n} files)")
    _, ok, n = _run_twice(tmp_path, "restore_kernel", ["restore", "--input", *realizations, "--denoiser", "kernel",
                                                       "--kernel-file", tr / "kernel.txt"])
    g.check(ok, f"restore kernel ({n} files)")
    _, ok, n = _run_twice(tmp_path, "sweep", ["sweep", "--dataset", ds, "--lambdas", "0.01,0.34,0.95",
                                              "--epochs", 3, "--kernel-size", 5, "--endpoints", "true"])
    g.check(ok, f"sweep ({n} files)")
    g.finish(300)
