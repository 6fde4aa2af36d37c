"""Smoke test for the betaspec Python bindings.

Build and install with `pip install --no-build-isolation -e crates/python`,
then run `python crates/python/python/smoke_test.py`.
"""

import math
import tempfile

import betaspec_py as bs


def close(a, b, tol=1e-12):
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))


def test_schedule_and_posterior():
    sig = bs.schedule("sched1", 10, 2.0, power=2.0)
    assert len(sig) == 11 and sig[0] == 0.0 and close(sig[-1], 2.0)
    assert all(a <= b for a, b in zip(sig, sig[1:]))

    i, z, x = 4, 0.7, -0.3
    sp2, st2 = sig[i - 1] ** 2, sig[i] ** 2
    mean, var = bs.linear_posterior([z], [x], sig, i)
    assert close(mean[0], (sp2 * z + (st2 - sp2) * x) / st2)
    assert close(var, (st2 - sp2) * sp2 / st2)

    shifted, var2 = bs.nonlinear_posterior([z], [x], [0.5], [0.2], sig, i)
    assert close(shifted[0], mean[0] + 0.3) and var2 == var


def test_slerp():
    a, b = [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]
    assert bs.slerp(a, b, 0.0) == a
    mid = bs.slerp(a, b, 0.5)
    assert close(mid[0], math.sqrt(0.5), 1e-10) and close(mid[1], math.sqrt(2.0), 1e-10)


def test_metrics_on_identity_code():
    _, factors, attrs = bs.sprite_dataset()
    codes = [[float(v) for v in row] for row in factors]
    assert bs.mig(codes, factors, attrs) >= 0.95
    assert bs.dci_disentanglement(codes, factors, attrs) >= 0.95
    score, captured = bs.tad(codes, factors, attrs)
    assert captured > 0 and abs(score - 0.5 * captured) <= 0.05 * captured


def test_run_dir_stages():
    with tempfile.TemporaryDirectory() as tmp:
        run = bs.RunDir(tmp + "/run")
        assert len(run.config_hash) == 16
        assert run.gen_data().startswith("gen-data:")
        try:
            run.train_diff()
        except bs.PrerequisiteError as e:
            assert "train-vae" in str(e)
        else:
            raise AssertionError("train_diff ran without a trained VAE")
        run.close()
        try:
            run.report()
        except bs.BetaspecError:
            pass
        else:
            raise AssertionError("closed run accepted a stage")


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_"):
            fn()
            print(f"ok {name}")
