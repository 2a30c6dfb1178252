"""Smoke test for the refsim extension module.

Imports an installed `refsim` if present, otherwise the cdylib from the
cargo target directory (build it with `cargo build --release -p refsim-py`).
"""

import importlib.util
import json
import os
import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parents[3]


def load_refsim():
    try:
        import refsim

        return refsim
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "librefsim.so"
        if lib.exists():
            tmp = pathlib.Path(tempfile.mkdtemp())
            shutil.copy(lib, tmp / "refsim.so")
            spec = importlib.util.spec_from_file_location("refsim", tmp / "refsim.so")
            module = importlib.util.module_from_spec(spec)
            spec.loader.exec_module(module)
            return module
    sys.exit("refsim extension not found; run `cargo build --release -p refsim-py` first")


def main():
    refsim = load_refsim()
    labels = [True, True, False, False]
    assert refsim.capture_rate([True, False, False, False], labels) == 0.5
    assert refsim.filter_rate([True, False, False, True], labels) == 0.5
    assert refsim.f_score([True, True, False, False], labels) == 1.0
    try:
        refsim.capture_rate([False, False], [False, False])
        raise AssertionError("undefined capture rate must raise")
    except ValueError:
        pass

    work = pathlib.Path(tempfile.mkdtemp())
    synth = {"n_train": 12, "n_test_defective": 4, "n_test_nominal": 4, "width": 32, "height": 32, "defect_size": 4}
    digest = refsim.make_synthetic(str(work / "data"), json.dumps(synth))
    assert len(digest) == 64

    report = json.loads(
        refsim.train_generator("inpaint", str(work / "data"), str(work / "inp.ckpt"), json.dumps({"epochs": 1, "batch": 4}))
    )
    assert len(report["loss_history"]) == 1

    pixels = [0.5] * (32 * 32)
    out = refsim.simulate(str(work / "inp.ckpt"), pixels, 32, 32)
    assert len(out) == 32 * 32 and all(0.0 <= v <= 1.0 for v in out)

    grids = [("train/000", 2, 2, 3, [float(i) for i in range(12)], 32, 32)]
    refsim.write_feature_grids(str(work / "g.rsfg"), grids)
    assert refsim.read_feature_grids(str(work / "g.rsfg")) == grids

    classic = json.loads(refsim.evaluate(str(work / "data"), "classic"))
    assert 0.0 <= classic["aggregates"]["capture_rate"] <= 1.0
    membank = json.loads(
        refsim.evaluate(str(work / "data"), "membank", "simulated-inpaint", inpainter=str(work / "inp.ckpt"))
    )
    assert "f_score" in membank["aggregates"]
    try:
        refsim.evaluate(str(work / "data"), "membank")
        raise AssertionError("membank without a backbone must raise")
    except ValueError as e:
        assert "backbone" in str(e)
    shutil.rmtree(work)
    print("refsim python smoke test: ok")


if __name__ == "__main__":
    os.environ.setdefault("REFSIM_THREADS", "1")
    main()
