"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
"""

import math
import time

import numpy as np
import pytest

from conftest import record_acceptance
from litevae.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from litevae.data import preprocess_batch, synthetic_images
from litevae.gradcheck import format_report, run_suite
from litevae.losses import adaptive_adv_weight, adversarial_losses, gaussian_hf_loss, wavelet_hf_loss
from litevae.metrics import count_flops, default_bandwidths, mmd_permutation_se, mmd_rbf, psnr
from litevae.model import (
    REFERENCE_PRESETS,
    SIZE_PRESETS,
    GaussianLatent,
    LiteVAEEncoder,
    ReferenceEncoder,
    latent_distribution,
)
from litevae.nn import SMC
from litevae.tensor import no_grad, precision, tensor
from litevae.train import TrainConfig, format_log, probe_psnr, train
from litevae.wavelet import dwt2, idwt2

OVERFIT_STEPS = 2000
OVERFIT_LR = 1e-3
SCHEDULE_STEPS = 500


class Criterion:
    """Context manager that records the outcome of one criterion and re-raises failures."""

    def __init__(self, number: int, title: str):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        record_acceptance(self.number, self.title, exc_type is None, self.detail)
        return False


@pytest.fixture(scope="module")
def overfit_run():
    """The 2000-step, 8-image, 64x64 run shared by criteria 6, 8 and 10."""
    images = synthetic_images(8, 64, seed=0)
    cfg = TrainConfig(lr=OVERFIT_LR, steps_stage2=OVERFIT_STEPS, res_stage2=64, checkpoint_every=100, probe_size=8)
    start = time.perf_counter()
    result = train(cfg, images)
    return result, images, time.perf_counter() - start


def test_c01_wavelet_exactness():
    with Criterion(1, "wavelet round trip and energy") as c:
        rng = np.random.default_rng(2024)
        start = time.perf_counter()
        worst_err, worst_energy = 0.0, 0.0
        for i in range(200):
            ch = int(rng.integers(1, 4))
            h, w = (int(v) for v in rng.integers(1, 17, size=2) * 8)
            x = rng.uniform(-1, 1, (1, ch, h, w)).astype(np.float32)
            for level in (1, 2, 3):
                p = dwt2(tensor(x), level)
                worst_err = max(worst_err, float(np.abs(idwt2(p).data - x).max()))
                e = (p.bands.data.astype(np.float64) ** 2).sum()
                e += sum((d.data.astype(np.float64) ** 2).sum() for d in p.details)
                worst_energy = max(worst_energy, abs(e / (x.astype(np.float64) ** 2).sum() - 1))
        elapsed = time.perf_counter() - start
        c.detail = f"max abs err {worst_err:.2e}, max energy rel err {worst_energy:.2e}, {elapsed:.2f} s"
        assert worst_err < 1e-6
        assert worst_energy < 1e-6
        assert elapsed < 10


def test_c02_gradient_suite():
    with Criterion(2, "finite-difference gradient suite") as c:
        start = time.perf_counter()
        results = run_suite(instances=10, seed=0)
        elapsed = time.perf_counter() - start
        print(format_report(results))
        worst = max(results, key=lambda r: r.max_rel_error)
        c.detail = f"{len(results)} cases x 10, worst {worst.name} {worst.max_rel_error:.2e}, {elapsed:.1f} s"
        assert all(r.instances >= 10 and r.max_rel_error < 1e-5 for r in results)
        assert elapsed < 300


def test_c03_smc_properties():
    with Criterion(3, "SMC scale homogeneity and filter norm") as c:
        rng = np.random.default_rng(3)
        worst_rel, lo, hi = 0.0, math.inf, 0.0
        with precision("f64"):
            for _ in range(50):
                cin, cout, k = (int(v) for v in (rng.integers(1, 9), rng.integers(1, 9), rng.choice([1, 3])))
                layer = SMC(cin, cout, k, eps=0.0, rng=rng)
                layer.scales.data[:] = rng.uniform(0.05, 5.0, cin)
                layer.gain.data[:] = rng.uniform(0.5, 2.0)
                x = tensor(rng.standard_normal((2, cin, 6, 6)))
                a = layer(x).data
                layer.scales.data *= 2.0
                b = layer(x).data
                worst_rel = max(worst_rel, float(np.abs(b - a).max() / np.abs(a).max()))
                layer.eps = float(rng.choice([0.0, 1e-8, 1e-3, 0.5]))
                sq = (layer.modulated_weight().data ** 2).sum(axis=(1, 2, 3))
                lo, hi = min(lo, float(sq.min())), max(hi, float(sq.max()))
        c.detail = f"max rel change {worst_rel:.1e}, squared filter norms in [{lo:.4f}, {hi:.12f}]"
        assert worst_rel < 1e-6
        assert lo > 0 and hi <= 1.0 + 1e-12


def test_c04_parameter_reproduction():
    with Criterion(4, "parameter counts and FLOP direction") as c:
        lite = LiteVAEEncoder(4, SIZE_PRESETS["B"])
        ref = ReferenceEncoder(4, REFERENCE_PRESETS["paper"])
        n_lite, n_ref = lite.num_params(), ref.num_params()
        shape = (1, 3, 256, 256)
        f_lite, f_ref = count_flops(lite, shape), count_flops(ref, shape)
        c.detail = (f"LiteVAE-B {n_lite / 1e6:.2f}M, reference {n_ref / 1e6:.2f}M, ratio {n_ref / n_lite:.2f}, "
                    f"GFLOPs {f_lite / 1e9:.1f} vs {f_ref / 1e9:.1f}")
        assert abs(n_lite / 6.75e6 - 1) <= 0.10
        assert abs(n_ref / 34.16e6 - 1) <= 0.10
        assert n_ref / n_lite >= 4
        assert f_lite < f_ref


def test_c05_closed_form_losses():
    with Criterion(5, "closed-form loss values") as c:
        rng = np.random.default_rng(5)
        x = tensor(rng.standard_normal((1, 3, 8, 8)))
        values = {
            "charbonnier(x, x) - eps": wavelet_hf_loss(x, x, eps=1e-3).item() - 1e-3,
            "gaussian_hf(const, const)": gaussian_hf_loss(tensor(np.full((1, 3, 8, 8), 0.4)),
                                                          tensor(np.full((1, 3, 8, 8), -0.9))).item(),
            "KL(mu=1, var=1) - 0.5": GaussianLatent(tensor(np.ones((1, 1, 1, 1))),
                                                     tensor(np.zeros((1, 1, 1, 1)))).kl().item() - 0.5,
            "hinge d at 0 - 2": adversarial_losses(tensor(np.zeros(4)), tensor(np.zeros(4)), "hinge")[0].item() - 2,
            "adaptive(equal) - 0.5": adaptive_adv_weight(1.3, 1.3, delta=0.0) - 0.5,
        }
        y = rng.uniform(0, 0.9, (2, 3, 8, 8))
        values["psnr(+0.1) - 20"] = psnr(y, y + 0.1) - 20.0
        worst = max(abs(v) for v in values.values())
        c.detail = f"max deviation {worst:.1e}"
        for name, v in values.items():
            assert abs(v) <= 1e-6, name


@pytest.mark.slow
def test_c06_training_sanity(overfit_run):
    with Criterion(6, "8-image overfit at 64x64") as c:
        result, _, elapsed = overfit_run
        ps = [v for _, k, v in result.log if k == "probe/psnr"]
        l1 = np.array([v for _, k, v in result.log if k == "loss/l1"])
        blocks = l1.reshape(-1, 100).mean(axis=1)
        sliding = np.convolve(l1, np.ones(100) / 100, mode="valid")
        rises = int((np.diff(sliding) > 0).sum())
        c.detail = (f"probe PSNR {ps[0]:.2f} -> {ps[-1]:.2f} dB, 100-step means {blocks[0]:.4f} -> {blocks[-1]:.4f}, "
                    f"sliding-window rises {rises}/{len(sliding) - 1}, {elapsed:.0f} s")
        print("100-step block means of l1:", np.round(blocks, 4).tolist())
        assert len(l1) == OVERFIT_STEPS
        assert ps[-1] - ps[0] >= 15.0
        assert np.all(np.diff(blocks) < 0)
        assert elapsed < 15 * 60


@pytest.mark.slow
def test_c07_resolution_schedule():
    with Criterion(7, "low-resolution pretraining then fine-tuning") as c:
        images = synthetic_images(8, 64, seed=0)
        common = dict(lr=OVERFIT_LR, res_stage1=32, res_stage2=64, checkpoint_every=SCHEDULE_STEPS, probe_size=8)
        start = time.perf_counter()
        staged = train(TrainConfig(steps_stage1=SCHEDULE_STEPS, steps_stage2=SCHEDULE_STEPS, **common), images)
        low_only = train(TrainConfig(steps_stage1=2 * SCHEDULE_STEPS, steps_stage2=0, **common), images)
        elapsed = time.perf_counter() - start
        probe = preprocess_batch(images, 64, np.float32)
        p_staged, p_low = probe_psnr(staged.model, probe), probe_psnr(low_only.model, probe)
        c.detail = f"64x64 probe PSNR: staged {p_staged:.2f} dB, 32-only {p_low:.2f} dB, {elapsed:.0f} s"
        assert p_staged >= p_low
        assert elapsed < 20 * 60


@pytest.mark.slow
def test_c08_mmd_sanity(overfit_run):
    with Criterion(8, "latent MMD against a standard Gaussian") as c:
        result, _, _ = overfit_run
        model = result.model
        held_out = preprocess_batch(synthetic_images(64, 64, seed=808), 64, np.float32)
        with no_grad():
            z = latent_distribution(model.encode(tensor(held_out))).mode().data
        z = z.reshape(len(z), -1).astype(np.float64)
        rng = np.random.default_rng(8)
        bw = default_bandwidths(z.shape[1])
        est = mmd_rbf(z, rng.standard_normal(z.shape), bw)
        g1, g2 = rng.standard_normal((2, 200, z.shape[1]))
        control = mmd_rbf(g1, g2, bw)
        se = mmd_permutation_se(g1, g2, bw, n_perm=200, rng=rng)
        c.detail = (f"latent MMD^2 {np.array2string(est, precision=3)}, "
                    f"control |est|/se max {np.max(np.abs(control) / se):.2f}")
        assert np.all(np.isfinite(est)) and len(est) == 5
        assert np.all(np.abs(control) < 3 * se)


def test_c09_determinism_and_persistence(tmp_path):
    with Criterion(9, "determinism, checkpoint round trip and resume") as c:
        images = synthetic_images(8, 64, seed=0)
        cfg = TrainConfig(lr=OVERFIT_LR, steps_stage1=10, steps_stage2=10, res_stage1=32, res_stage2=64,
                          checkpoint_every=5, precision="f32")
        a, b = train(cfg, images), train(cfg, images)
        same_log = format_log(a.log) == format_log(b.log)

        path = tmp_path / "run.lvae"
        save_checkpoint(path, a.checkpoint)
        loaded = load_checkpoint(path)
        bit_exact = loaded.step == a.checkpoint.step and all(
            loaded.tensors[k].dtype == v.dtype and loaded.tensors[k].tobytes() == v.tobytes()
            for k, v in a.checkpoint.tensors.items()) and set(loaded.tensors) == set(a.checkpoint.tensors)
        assert decode_checkpoint(encode_checkpoint(loaded)).tensors.keys() == loaded.tensors.keys()

        split = 13
        first = train(cfg, images, max_steps=split)
        save_checkpoint(tmp_path / "split.lvae", first.checkpoint)
        resumed = train(cfg, images, resume=load_checkpoint(tmp_path / "split.lvae"), max_steps=split + 1)
        next_full = [(k, v) for s, k, v in a.log if s == split and k.startswith("loss/")]
        next_resumed = [(k, v) for s, k, v in resumed.log if s == split and k.startswith("loss/")]
        resume_exact = bool(next_full) and next_full == next_resumed
        c.detail = f"log identical {same_log}, round trip bit-exact {bit_exact}, resumed step {split} exact {resume_exact}"
        assert same_log and bit_exact and resume_exact


@pytest.mark.slow
def test_c10_scale_dependency(overfit_run):
    with Criterion(10, "multi-resolution evaluation") as c:
        result, images, _ = overfit_run
        curve = {}
        for r in (32, 64, 128):
            curve[r] = probe_psnr(result.model, preprocess_batch(images, r, np.float32))
        c.detail = ", ".join(f"{r}x{r}: {v:.2f} dB" for r, v in curve.items())
        assert all(math.isfinite(v) for v in curve.values())
