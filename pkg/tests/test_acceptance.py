"""Acceptance criteria for the toy study, the estimator oracles and the digit classifier.

The toy and classification criteria train many models and take hours on one
core.  Setting MIXVI_ACCEPTANCE_CACHE to a directory stores each trained
run's summary there, keyed by a hash of the package source, so a rerun after
unrelated edits is fast.  Select only this file with ``-m acceptance``.
"""

import hashlib
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

import mixvi
from mixvi.cli import main
from mixvi.experiments import DigitProfile, ToyProfile, run_classify, run_toy, toy_true_evidence
from mixvi.metrics import expected_calibration_error
from mixvi.oracles import (
    check_bound_ordering,
    check_gradients,
    check_reduction_identities,
    check_stl_parity,
    check_stratification,
)

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2, 3, 4)
CLASSIFY_SEEDS = (0, 1, 2)
TOY_LOSSES = ("siwae", "selbo", "score")

# tolerances
SIWAE_BAND = (-1.7, -1.35)
OTHER_BAND = (-2.3, -1.85)
MIN_MEDIAN_GAP = 0.3
FULL_SEED_BUDGET_S = 30 * 60
FAST_SEED_BUDGET_S = 5 * 60
SCORE_OVER_SIWAE = 10.0
SIWAE_OVER_SELBO = 1.2
COVERAGE_THRESHOLD = 0.05
STL_GAP = 0.1
ACCURACY_MARGIN = 0.02
CELL_BUDGET_S = 20 * 60


def _source_hash() -> str:
    h = hashlib.sha256()
    for p in sorted(Path(mixvi.__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def _cached(key: dict, compute):
    root = os.environ.get("MIXVI_ACCEPTANCE_CACHE")
    if not root:
        return compute()
    blob = json.dumps({**key, "source": _source_hash()}, sort_keys=True)
    path = Path(root) / (hashlib.sha256(blob.encode()).hexdigest()[:24] + ".json")
    if path.exists():
        return json.loads(path.read_text())["value"]
    value = compute()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps({"key": json.loads(blob), "value": value}))
    tmp.replace(path)
    return value


def _toy(loss: str, seed: int, profile: ToyProfile) -> dict:
    def compute():
        t = time.perf_counter()
        run = run_toy(loss, seed, profile)
        return {
            "evidence": run.evidence,
            "grad_variance": run.grad_variance,
            "coverage": run.coverage,
            "quadrant_mass": run.quadrant_mass,
            "seconds": time.perf_counter() - t,
        }

    return _cached({"kind": "toy", "loss": loss, "seed": seed, "profile": profile.to_dict()}, compute)


def _toy_table(profile: ToyProfile, losses) -> dict:
    table = {}
    for seed in SEEDS:
        row = {loss: _toy(loss, seed, profile) for loss in losses}
        row["truth"] = toy_true_evidence(seed, profile)
        table[seed] = row
    return table


@pytest.fixture(scope="session")
def full_toy():
    p = ToyProfile.named("full", coverage_threshold=COVERAGE_THRESHOLD)
    return _toy_table(p, TOY_LOSSES + ("siwae_stl", "selbo_stl"))


@pytest.fixture(scope="session")
def fast_toy():
    return _toy_table(ToyProfile.named("fast"), TOY_LOSSES)


def _fmt(xs) -> str:
    return "[" + ", ".join(f"{x:.4g}" for x in xs) + "]"


def _siwae_best(table) -> tuple[int, float, list]:
    gaps = [row["siwae"]["evidence"] - max(row["selbo"]["evidence"], row["score"]["evidence"]) for row in table.values()]
    return sum(g > 0 for g in gaps), float(np.median(gaps)), gaps


def test_c1_toy_evidence_bands(full_toy, acceptance_report):
    siwae = [row["siwae"]["evidence"] for row in full_toy.values()]
    others = [row[k]["evidence"] for row in full_toy.values() for k in ("selbo", "score")]
    truth = [row["truth"] for row in full_toy.values()]
    ok = all(SIWAE_BAND[0] <= v <= SIWAE_BAND[1] for v in siwae) and all(OTHER_BAND[0] <= v <= OTHER_BAND[1] for v in others)
    detail = f"siwae {_fmt(siwae)}, selbo/score {_fmt(others)}, exact log p(x) {_fmt(truth)}"
    assert acceptance_report("criterion 1a: toy evidence bands", ok, detail)


def test_c1_toy_siwae_strictly_best(full_toy, acceptance_report):
    wins, median_gap, gaps = _siwae_best(full_toy)
    ok = wins >= 4 and median_gap >= MIN_MEDIAN_GAP
    detail = f"siwae best in {wins}/5 seeds, median gap {median_gap:.4f}, gaps {_fmt(gaps)}"
    assert acceptance_report("criterion 1b: toy ordering", ok, detail)


def test_c1_toy_runtime(full_toy, acceptance_report):
    per_seed = [sum(row[k]["seconds"] for k in TOY_LOSSES) for row in full_toy.values()]
    ok = max(per_seed) <= FULL_SEED_BUDGET_S
    assert acceptance_report("criterion 1c: full toy runtime per seed", ok, f"seconds {_fmt(per_seed)}")


def test_c1_fast_profile(fast_toy, acceptance_report):
    wins, median_gap, gaps = _siwae_best(fast_toy)
    per_seed = [sum(row[k]["seconds"] for k in TOY_LOSSES) for row in fast_toy.values()]
    ok = wins >= 4 and max(per_seed) < FAST_SEED_BUDGET_S
    detail = f"siwae best in {wins}/5 seeds, gaps {_fmt(gaps)}, seconds {_fmt(per_seed)}"
    assert acceptance_report("criterion 1d: fast profile ordering and runtime", ok, detail)


def test_c2_gradient_variance_ordering(full_toy, acceptance_report):
    ratios = []
    for row in full_toy.values():
        v = {k: row[k]["grad_variance"] for k in TOY_LOSSES}
        ratios.append((v["score"] / v["siwae"], v["siwae"] / v["selbo"]))
    ok = all(a >= SCORE_OVER_SIWAE and b >= SIWAE_OVER_SELBO for a, b in ratios)
    detail = f"score/siwae {_fmt([a for a, _ in ratios])}, siwae/selbo {_fmt([b for _, b in ratios])}"
    assert acceptance_report("criterion 2: gradient variance ordering", ok, detail)


def test_c3_mode_coverage(full_toy, acceptance_report):
    siwae = [row["siwae"]["coverage"] for row in full_toy.values()]
    selbo = [row["selbo"]["coverage"] for row in full_toy.values()]
    ok = sum(c == 4 for c in siwae) >= 4 and sum(c <= 3 for c in selbo) >= 4
    assert acceptance_report("criterion 3: mode coverage", ok, f"siwae quadrants {siwae}, selbo quadrants {selbo}")


def _checks(criterion, results, acceptance_report):
    failed = [name for name, passed, _ in results if not passed]
    detail = "; ".join(f"{name}: {d}" for name, _, d in results)
    assert acceptance_report(criterion, not failed, detail)


def test_c4_bound_ordering(acceptance_report):
    t = time.perf_counter()
    results = check_bound_ordering(n=1000, seed=0)
    results.append(("runtime", time.perf_counter() - t < 60, f"{time.perf_counter() - t:.1f}s"))
    _checks("criterion 4: bound ordering on the conjugate model", results, acceptance_report)


def test_c5_reduction_identities(acceptance_report):
    _checks("criterion 5: reduction identities", check_reduction_identities(seed=0), acceptance_report)


def test_c6_gradient_correctness(acceptance_report):
    _checks("criterion 6: finite differences and stl parity", check_gradients(seed=0) + check_stl_parity(seed=0), acceptance_report)


def test_c7_stratification(acceptance_report):
    _checks("criterion 7: stratification", check_stratification(seed=0), acceptance_report)


@pytest.fixture(scope="session")
def classify_table():
    p = DigitProfile.named("full")
    table = {}
    for seed in CLASSIFY_SEEDS:
        for loss in ("siwae", "selbo"):

            def compute(loss=loss, seed=seed):
                t = time.perf_counter()
                out = run_classify(loss, 5, 5, seed, p)
                return {**out["report"], "seconds": time.perf_counter() - t}

            table[seed, loss] = _cached({"kind": "classify", "loss": loss, "seed": seed, "profile": p.to_dict()}, compute)
    return table


def test_c8_classification_trend(classify_table, acceptance_report):
    wins, parts = 0, []
    for seed in CLASSIFY_SEEDS:
        a, b = classify_table[seed, "siwae"], classify_table[seed, "selbo"]
        win = a["accuracy"] >= b["accuracy"] + ACCURACY_MARGIN and a["ece"] <= b["ece"]
        wins += win
        parts.append(f"seed {seed}: acc {a['accuracy']:.4f} vs {b['accuracy']:.4f}, ece {a['ece']:.4f} vs {b['ece']:.4f}")
    seconds = [r["seconds"] for r in classify_table.values()]
    ok = wins >= 2 and max(seconds) < CELL_BUDGET_S
    detail = f"siwae wins {wins}/3; " + "; ".join(parts) + f"; cell seconds {_fmt(seconds)}; data {classify_table[0, 'siwae']['data_source']}"
    assert acceptance_report("criterion 8: classification trend", ok, detail)


def _brute_ece(conf, correct, n_bins=10):
    order = sorted(range(len(conf)), key=lambda i: (conf[i], i))
    base, extra = divmod(len(conf), n_bins)
    total, start = 0.0, 0
    for b in range(n_bins):
        size = base + (b < extra)
        idx = order[start : start + size]
        start += size
        total += abs(sum(conf[i] for i in idx) / size - sum(correct[i] for i in idx) / size)
    return total / n_bins


def test_c9_ece_oracle(acceptance_report):
    r = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        n = int(r.integers(10, 500))
        conf = r.random(n)
        correct = r.random(n) < conf
        worst = max(worst, abs(expected_calibration_error(conf, correct) - _brute_ece(conf.tolist(), correct.tolist())))
    conf = r.random(200_000)
    calibrated = expected_calibration_error(conf, r.random(200_000) < conf)
    ok = worst <= 1e-12 and calibrated < 0.01
    assert acceptance_report("criterion 9: ECE oracle", ok, f"max deviation {worst:.2e}, calibrated ECE {calibrated:.4f}")


def test_c10_stl_parity(full_toy, acceptance_report):
    gaps = {loss: [row[f"{loss}_stl"]["evidence"] - row[loss]["evidence"] for row in full_toy.values()] for loss in ("siwae", "selbo")}
    ok = all(abs(g) < STL_GAP for gs in gaps.values() for g in gs)
    detail = ", ".join(f"{loss} gaps {_fmt(g)}" for loss, g in gaps.items())
    assert acceptance_report("criterion 10: stl evidence parity", ok, detail)


def test_c11_cli_determinism(tmp_path, acceptance_report):
    toy = {"profile": "fast", "settings": {"epochs": 3, "n_points": 96, "eval_samples": 800, "probe_repeats": 5, "coverage_samples": 200}}
    digits = {"profile": "fast", "settings": {"n_train": 200, "n_test": 100, "epochs": 1, "S": 50}}
    (tmp_path / "toy.json").write_text(json.dumps(toy))
    (tmp_path / "digits.json").write_text(json.dumps(digits))
    commands = {
        "toy-experiment": ["toy-experiment", "--config", str(tmp_path / "toy.json")],
        "classify": ["classify", "--K", "5", "--T", "5", "--config", str(tmp_path / "digits.json")],
        "vae": ["vae", "--K", "2", "--T", "2", "--config", str(tmp_path / "digits.json")],
        "verify": ["verify"],
    }
    mismatched = []
    for name, cmd in commands.items():
        dirs = [tmp_path / f"{name}-{i}" for i in range(2)]
        for d in dirs:
            assert main(cmd + ["--seed", "3", "--out", str(d)]) == 0
        for f in sorted(p.name for p in dirs[0].iterdir()):
            if (dirs[0] / f).read_bytes() != (dirs[1] / f).read_bytes():
                mismatched.append(f"{name}/{f}")
    detail = f"{len(commands)} commands compared; mismatches {mismatched or 'none'}"
    assert acceptance_report("criterion 11: byte-identical reruns", not mismatched, detail)
