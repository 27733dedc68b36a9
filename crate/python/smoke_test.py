"""Smoke test for the dpti Python module.

Build and install the module first:

    pip install maturin
    maturin build --release -m crates/py/Cargo.toml
    pip install target/wheels/dpti-*.whl

then run ``python python/smoke_test.py`` from the repository root.
"""

import json
import pathlib
import sys

import dpti

SCENARIOS = pathlib.Path(__file__).resolve().parent.parent / "crates" / "core" / "scenarios"


def check(cond, what):
    if not cond:
        print(f"FAIL {what}")
        sys.exit(1)
    print(f"ok   {what}")


def main():
    s = dpti.Scenario.load(str(SCENARIOS / "openat-redirect.json"))
    for variant in ("stash", "freeze"):
        s.variant = variant
        r = s.run(exhaustive=True, max_steps=24)
        check(r.passed and r.witness_count == 0, f"redirect under {variant}: {r.interleavings} runs, no divergence")
    s.variant = "none"
    r = s.run(exhaustive=True, max_steps=24)
    check(r.witness_count > 0, f"redirect unprotected: {r.witness_count} divergences")

    exec_page = dpti.Scenario.load(str(SCENARIOS / "exec-page.json"))
    r = exec_page.run()
    check(("loader", "executable_argument", 1) in r.kills(), "executable argument killed under stash")

    a, b = s.run(seed=5), s.run(seed=5)
    check(a.hash == b.hash and a.verify_hash(), "seeded runs reproduce")
    check(dpti.Report.from_json(a.to_json()).hash == a.hash, "report JSON round trip")

    rows = json.loads(dpti.bench_suites("getppid"))["rows"]
    totals = {r["config"]: r["cycles"] for r in rows if r["case"] == "getppid"}
    check(totals == {"vanilla": 295.0, "seccomp": 395.0, "dpti": 360.0}, f"getppid bench {totals}")

    costs = json.loads(dpti.default_costs())
    check(costs["tlb_flush"] > 0, "default cost table")
    check(dpti.variants() == ["stash", "freeze", "none"], "variant names")

    try:
        dpti.Scenario.from_json('{"schema": "nope"}')
    except ValueError as e:
        check("nope" in str(e), "bad schema rejected")
    else:
        check(False, "bad schema rejected")


if __name__ == "__main__":
    main()
