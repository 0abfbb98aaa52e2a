"""Smoke test for the dvbe Python extension.

Build and install first: `maturin build --release -m crates/python/Cargo.toml`
then `pip install target/wheels/dvbe-*.whl`.
"""

import math
import tempfile

import dvbe_py as dvbe


def main():
    assert dvbe.adaptive_lambda(1.0) == 1.0
    assert abs(dvbe.adaptive_lambda(0.5) - math.exp(-1)) < 1e-12
    assert abs(dvbe.harmonic(73.2, 64.4) - 68.5) < 0.1
    assert abs(dvbe.entropy([0.25] * 4) - math.log(4)) < 1e-12
    assert dvbe.bilinear_pool([[1.0, 2.0]]) == [[1.0, 2.0], [2.0, 4.0]]
    assert dvbe.calibrate_tau([0.0, 1.0], 50.0) == 0.5
    try:
        dvbe.entropy([0.5, 0.2])
    except ValueError:
        pass
    else:
        raise AssertionError("entropy accepted an unnormalized distribution")

    ds = dvbe.Dataset.synth(seed=1, samples_per_class=20)
    print("splits", ds.split_sizes(), "seen", ds.seen_classes, "unseen", ds.unseen_classes)
    with tempfile.TemporaryDirectory() as d:
        ds.write(d)
        assert dvbe.Dataset.load(d).split_sizes() == ds.split_sizes()

    pipe = dvbe.Pipeline(ds, seed=1, epochs_stage1=5, epochs_stage2=20)
    print(pipe.search(), end="")
    tau = pipe.train()
    report = pipe.evaluate()
    print(f"tau {tau:.4f}", {k: round(v, 2) for k, v in report.items()})
    assert 0.0 <= report["h"] <= 100.0
    sweep = pipe.tau_sweep(0.0, 2.0, 5)
    assert [t for t, _ in sweep] == [0.0, 0.5, 1.0, 1.5, 2.0]
    with tempfile.TemporaryDirectory() as d:
        pipe.save(f"{d}/model.ckpt")
    print("smoke test passed")


if __name__ == "__main__":
    main()
