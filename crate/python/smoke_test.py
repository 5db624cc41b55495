"""Builds the extension module with cargo and exercises it end to end.

Usage: python3 python/smoke_test.py
"""

import json
import math
import os
import shutil
import subprocess
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def build():
    subprocess.run(
        ["cargo", "build", "--release", "-p", "cavprobe-python", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    target = os.environ.get("CARGO_TARGET_DIR", os.path.join(ROOT, "target"))
    for name in ("libcavprobe_py.so", "libcavprobe_py.dylib"):
        lib = os.path.join(target, "release", name)
        if os.path.exists(lib):
            out = tempfile.mkdtemp(prefix="cavprobe_py_")
            shutil.copy(lib, os.path.join(out, "cavprobe_py.so"))
            return out
    sys.exit("extension library not found under " + target)


def main():
    sys.path.insert(0, build())
    import cavprobe_py as cp

    assert abs(cp.student_t_cdf(1.812, 10) - 0.9499623689670764) < 1e-8
    assert abs(cp.student_t_cdf(1.0, 1) - 0.75) < 1e-12
    t = cp.one_sample_t_test([0.52, 0.55, 0.50, 0.53, 0.54])
    assert t["df"] == 4 and t["p"] < 0.05
    assert cp.bonferroni(0.02, 4) == 0.08

    config = json.dumps({"genres": [{"name": g, "count_per_label": 60} for g in ("rock", "pop", "jazz")]})
    ds, truth = cp.synth_generate(config)
    assert len(ds) == 360 and ds.dimension == 64

    split = cp.build_split(ds, "gender=female", seed=7)
    cav = cp.fit_split(ds, split)
    assert cav.test_accuracy > 0.85, cav
    err = cp.recovery_error(cav, truth["concept_directions"]["gender=female"])
    assert 0.0 <= err < 0.3, err

    run = cp.run_protocol(ds, split, replicates=20)
    assert [r["genre"] for r in run["results"]] == split.test_genres()
    for r in run["results"]:
        assert len(r["scores"]) == r["n_reliable"]
        assert 0.0 <= r["mean"] <= 1.0

    mirrored = cp.fit_split(ds, split.mirrored("gender=male"))
    w, b = cp.adjust(cav, mirrored, 0.0)
    assert w == cav.w and b == cav.b
    pool = [i for i in ds.ids() if i.startswith("rock")]
    curve = cp.sweep(cav, mirrored, ds, pool, [0.0, 0.5, 1.0], track="gender=female")
    assert curve["ratios"][0] > 0.9 and curve["ratios"][-1] < 0.1, curve["ratios"]

    with tempfile.TemporaryDirectory() as tmp:
        emb, meta = os.path.join(tmp, "x.csv"), os.path.join(tmp, "m.csv")
        ds.export(emb, meta)
        back, dropped = cp.Dataset.ingest(emb, meta)
        assert dropped == [] and back.fingerprint() == ds.fingerprint()

    assert math.isclose(cp.Cav.from_json(cav.to_json()).b, cav.b)
    try:
        cp.build_split(ds, "gender=nobody")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown value accepted")

    report = cp.run_selftest(seed=7, replicates=20)
    failed = [c["name"] for c in report["checks"] if not c["passed"]]
    print("selftest checks failed:", failed or "none")
    print("python smoke test ok")


if __name__ == "__main__":
    main()
