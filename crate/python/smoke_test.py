"""Smoke test for the retarget_py extension module.

Build the module first:

    cargo build --release -p retarget-py --features extension-module

then run `python3 python/smoke_test.py`. The script copies the built
library next to a temporary import path, runs a tiny pipeline through the
bindings and checks the streaming retargeter against the batch command.
"""

import importlib
import math
import os
import shutil
import sys
import sysconfig
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_module(scratch):
    suffix = sysconfig.get_config_var("EXT_SUFFIX") or ".so"
    for profile in ("release", "debug"):
        for name in ("libretarget_py.so", "libretarget_py.dylib", "retarget_py.dll"):
            built = ROOT / "target" / profile / name
            if built.exists():
                shutil.copy(built, Path(scratch) / ("retarget_py" + suffix))
                sys.path.insert(0, scratch)
                return importlib.import_module("retarget_py")
    sys.exit("retarget_py is not built; see the docstring of this script")


def main():
    with tempfile.TemporaryDirectory() as scratch:
        rt = load_module(scratch)
        work = Path(scratch)
        cfg = {
            "data_dir": str(work / "data"),
            "run_dir": str(work / "run"),
            "characters": "3",
            "points": "96",
            "skr_steps": "20",
            "smrm_steps": "10",
            "skin_steps": "10",
        }

        text = rt.config_text(cfg)
        assert "characters = 3" in text
        assert rt.config_hash(text) == rt.config_hash(text)
        try:
            rt.config_text({"context": "1"})
        except ValueError as e:
            assert "context" in str(e)
        else:
            raise AssertionError("context 1 accepted")
        try:
            rt.train("skr", cfg)
        except FileNotFoundError as e:
            assert "gen-data" in str(e)
        else:
            raise AssertionError("training without data accepted")

        assert rt.gen_data(cfg) == 30
        for stage in ("skr", "smrm", "skin"):
            first, last, summary = rt.train(stage, cfg)
            assert math.isfinite(first) and math.isfinite(last), summary

        source = work / "data" / "eval" / "source"
        tpose_path = work / "data" / "eval" / "target_tpose.ply"
        out = work / "out"
        assert rt.retarget(str(source), str(tpose_path), str(out), cfg) == 30
        metrics = rt.evaluate(str(out), None, cfg)
        assert set(metrics) == {"mpjpe", "pa_mpjpe", "acc", "pa_acc", "mpvd", "pa_mpvd", "mdel"}
        assert all(math.isfinite(v) for v in metrics.values())

        tpose = rt.read_ply(str(tpose_path))
        online = rt.Retargeter(tpose, cfg)
        assert len(online.weights) == len(tpose)
        assert all(abs(sum(row) - 1.0) < 1e-6 for row in online.weights)
        for f in range(30):
            frame = rt.read_ply(str(source / f"frame_{f:06d}.ply"))
            points, joints = online.push(frame)
            assert len(points) == len(tpose) and len(joints) == 8
            assert points == rt.read_ply(str(out / f"frame_{f:06d}.ply"))
        assert online.frames == 30

        rt.write_ply(str(work / "copy.ply"), tpose)
        assert rt.read_ply(str(work / "copy.ply")) == tpose
        track = [[[float(j), 0.0, 0.0] for j in range(8)] for _ in range(3)]
        assert rt.mpjpe(track, track) == 0.0
        assert rt.mdel([tpose], [tpose]) == 0.0

    print("python smoke test passed")


if __name__ == "__main__":
    os.environ.pop("RETARGET_DATA_DIR", None)
    os.environ.pop("RETARGET_RUN_DIR", None)
    main()
