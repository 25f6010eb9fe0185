import numpy as np
import pytest

from litevae.gradcheck import CASES, CaseResult, format_report, gradcheck, run_suite
from litevae.tensor import make_result, tensor


def wrong_square(x):
    """x**2 whose backward claims 3x instead of 2x."""
    return make_result(x.data**2, (x,), lambda g: (3.0 * x.data * g,))


class TestGradcheck:
    def test_correct_gradient_small_error(self, f64):
        x = tensor(np.linspace(-1, 1, 5))
        assert gradcheck(lambda: (x * x * x).sum(), [x]) < 1e-8

    def test_detects_wrong_gradient(self, f64):
        x = tensor(np.linspace(0.5, 1.5, 5))
        assert gradcheck(lambda: wrong_square(x).sum(), [x]) > 0.1

    def test_restores_leaf_values(self, f64):
        data = np.linspace(-1, 1, 4)
        x = tensor(data.copy())
        gradcheck(lambda: (x * x).sum(), [x])
        np.testing.assert_array_equal(x.data, data)


class TestSuite:
    def test_covers_required_operations(self):
        required = {"conv2d", "group_norm", "smc", "resblock_groupnorm", "resblock_smc", "unet_block", "decoder",
                    "loss_recon", "loss_wavelet", "loss_gaussian", "loss_kl", "loss_adversarial", "discriminator"}
        assert required <= set(CASES)

    @pytest.mark.parametrize("name", sorted(CASES))
    def test_case_passes(self, name):
        (res,) = run_suite(instances=2, seed=7, names=[name])
        assert res.passed(), f"{name}: {res.max_rel_error:.3e}"

    def test_runs_at_f64_and_restores(self):
        run_suite(instances=1, names=["conv2d"])
        assert tensor([1.0]).dtype == np.float32

    def test_report(self):
        text = format_report([CaseResult("a", 10, 1e-9, 0.1), CaseResult("b", 10, 1e-3, 0.2)])
        assert "PASS" in text.splitlines()[1] and "FAIL" in text.splitlines()[2]
