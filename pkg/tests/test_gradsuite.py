import numpy as np

from rblb.gradsuite import (
    COMPOSITE_TOL,
    PRIMITIVE_TOL,
    CheckResult,
    composite_cases,
    primitive_cases,
    run_case,
    run_suite,
)
from rblb.numerics import Tensor, reduce_sum


class TestSuite:
    def test_covers_every_loss_variant(self):
        names = set(composite_cases())
        assert {"L_BGAN", "L_DBGAN", "L_DBGAN(-)"} <= names
        assert {n.split("/")[0] for n in primitive_cases()} >= {"conv2d", "sigmoid", "relu", "pow_scalar"}

    def test_quick_run_passes(self):
        results = run_suite(instances=2, seed=3, groups=("primitive",))
        assert all(r.passed for r in results), [r.line() for r in results if not r.passed]
        assert all(r.tolerance == PRIMITIVE_TOL for r in results)

    def test_composite_tolerance(self):
        r = run_case("L_DBGAN", composite_cases()["L_DBGAN"], "composite", 1, 0)
        assert r.tolerance == COMPOSITE_TOL and r.passed

    def test_flags_a_wrong_gradient(self):
        def broken(rng):
            x = Tensor(rng.normal(size=(2, 3)).astype(np.float32))
            return (lambda t: reduce_sum(t * t.detach())), x

        r = run_case("broken", broken, "primitive", 2, 0)
        assert not r.passed
        assert r.line().startswith("FAIL")

    def test_line_format(self):
        line = CheckResult("relu", "primitive", 1e-5, 1e-3, 20).line()
        assert line.startswith("PASS primitive") and "n=20" in line
