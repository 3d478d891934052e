#!/usr/bin/env python3
"""Acceptance checks for the CHE toolkit.

Runs the desk-scale analogues of the method's claims next to the exact
numerical properties:
  1. Autodiff soundness (grad_check over ops, HSIC and model loss)
  2. HSIC against an independent expansion; r=2 closed form
  3. Ablation identity (epsilon=0 CHE == base checkpoint)
  4. HSIC reduction at the best epoch, all seeds
  5. Out-of-distribution improvement on the environment split
  6. In-distribution non-degradation on the random split
  7. Ranking metric oracles
  8. Cross-predictability under CHE weights
  9. Attribution share and linear closed form
 10. PW comparator weights, AUC and Improv formula
 11. HSIC cost scaling

Usage: python3 scripts/run_acceptance.py [--quick] [--seeds 0,1,2,3,4] [--verbose]
"""

import sys
import time
from pathlib import Path

PROJECT_ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(PROJECT_ROOT))

import argparse
import logging

import numpy as np


# ---------------------------------------------------------------------------
# Validation helpers
# ---------------------------------------------------------------------------

class ValidationResult:
    """Container for a single acceptance check result."""

    def __init__(self, name: str, passed: bool, message: str = "", duration: float = 0):
        self.name = name
        self.passed = passed
        self.message = message
        self.duration = duration

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        time_str = f" ({self.duration:.2f}s)" if self.duration > 0 else ""
        msg = f" -- {self.message}" if self.message else ""
        return f"  [{status}] {self.name}{time_str}{msg}"


def timed_check(name, func):
    """Run a check function and capture timing + exceptions."""
    t0 = time.time()
    try:
        passed, message = func()
        return ValidationResult(name, passed, message, time.time() - t0)
    except Exception as e:
        return ValidationResult(name, False, f"Exception: {e}", time.time() - t0)


OPTIONS = argparse.Namespace(quick=False, seeds=[0, 1, 2, 3, 4])
_RUNS = {}


def _benchmark_config(seed: int, protocol: str):
    from src.run_config import RunConfig

    config = RunConfig.from_settings()
    overrides = {"train.seed": seed, "generator.seed": seed, "run.protocol": protocol}
    if OPTIONS.quick:
        overrides.update({"generator.patients": 150, "train.max_epochs": 8})
    return config.with_overrides(overrides)


def _dataset(config):
    from src.pipeline import Dataset
    from src.synth_ehr import generate_cohort, split_by_environment, split_random

    gen = config.generator
    train_cohort, spec = generate_cohort(gen, gen.env_train)
    if config.run.protocol.value == "random":
        splits = split_random(train_cohort.records, config.train.seed)
    else:
        test_cohort, _ = generate_cohort(gen, gen.env_test, spec)
        splits = split_by_environment(train_cohort.records, test_cohort.records, config.train.seed)
    return Dataset(splits=splits, vocab=train_cohort.vocab, spec=spec)


def _run(method: str, seed: int, protocol: str = "env"):
    """Train once per (method, seed, protocol) and cache the outcome."""
    key = (method, seed, protocol)
    if key not in _RUNS:
        from src.evaluation import evaluate
        from src.pipeline import train_method

        config = _benchmark_config(seed, protocol)
        dataset = _dataset(config)
        outcome = train_method(config, dataset, method)
        scores = evaluate(outcome.model, dataset.splits.test, config.run.ks)
        _RUNS[key] = (config, dataset, outcome, scores)
    return _RUNS[key]


# ---------------------------------------------------------------------------
# Checks
# ---------------------------------------------------------------------------

def check_autodiff():
    """1: relative error < 1e-4 for every op kind, HSIC and the model loss."""
    from src import tensor as T
    from src.encoders import Model, multi_hot, prediction_loss
    from src.hsic import hsic_local
    from src.models import HsicConfig, ModelKind, PatientRecord, Visit, SigmaPolicy

    rng = np.random.default_rng(0)
    instances = 20 if OPTIONS.quick else 100
    worst = 0.0
    unary = [T.exp, T.tanh, T.sigmoid, T.softmax, lambda x: T.log(T.exp(x) + 1.0), T.transpose,
             T.sqdist, lambda x: T.clip(x, -0.5, 0.5), lambda x: x[1:3], lambda x: T.reshape(x, (-1,))]
    for _ in range(instances):
        x = rng.normal(size=(3, 4))
        c = rng.normal(size=(3, 4))
        m = rng.normal(size=(4, 3))
        for op in unary:
            def f(t, op=op):
                out = op(t)
                return T.sum_(out * rng_weights(out.shape))
            worst = max(worst, T.grad_check(f, x))
        worst = max(worst, T.grad_check(lambda t: T.sum_((t @ m) * rng_weights((3, 3))), x))
        worst = max(worst, T.grad_check(lambda t: T.sum_(T.mul(t, c) + T.div(t, c * c + 1.0) - t), x))
        worst = max(worst, T.grad_check(lambda t: T.trace(t @ T.transpose(t)) + T.mean(T.concat([t, t])), x))

        e_p = rng.normal(size=8)
        cfg = HsicConfig(sigma_policy=SigmaPolicy.FIXED, sigma=1.5)
        worst = max(worst, T.grad_check(lambda t: hsic_local(t, e_p, cfg), rng.normal(size=8)))

    model = Model(ModelKind.LSTM, 6, 5, 4, seed=1)
    record = PatientRecord(id="p", env="e", visits=[Visit(dx=[0, 2], px=[1]), Visit(dx=[3], px=[0, 4]),
                                                     Visit(dx=[1, 5], px=[2])])
    target = multi_hot(record.target(2), model.M)
    # some loss coordinates are ~1e-8; h=1e-4 keeps difference roundoff below them
    for name in ("dx.embedding", "predictor.W", "dx.lstm.U"):
        original = model.params[name].data.copy()

        def loss_of(t, name=name):
            model.params[name] = t
            logits, _, _ = model.forward_point(record, 2)
            return prediction_loss(T.sigmoid(logits), target)
        worst = max(worst, T.grad_check(loss_of, original, h=1e-4))
        model.params[name] = T.Tensor(original, requires_grad=True, name=name)
    return worst < 1e-4, f"max relative error {worst:.2e}"


_WEIGHT_RNG = np.random.default_rng(123)
_WEIGHT_CACHE = {}


def rng_weights(shape):
    if shape not in _WEIGHT_CACHE:
        _WEIGHT_CACHE[shape] = _WEIGHT_RNG.uniform(0.5, 1.5, size=shape)
    return _WEIGHT_CACHE[shape]


def _hsic_reference(e_d, e_p, sigma_d, sigma_p):
    r = len(e_d)
    kd = [[np.exp(-(e_d[a] - e_d[b]) ** 2 / sigma_d ** 2) for b in range(r)] for a in range(r)]
    kp = [[np.exp(-(e_p[a] - e_p[b]) ** 2 / sigma_p ** 2) for b in range(r)] for a in range(r)]
    cross = sum(kd[a][b] * kp[a][b] for a in range(r) for b in range(r))
    rows = sum(sum(kd[a]) * sum(kp[a]) for a in range(r))
    total = sum(map(sum, kd)) * sum(map(sum, kp))
    return (cross - 2.0 * rows / r + total / r ** 2) / (r - 1) ** 2


def check_hsic_oracle():
    """2: expansion identity within 1e-10; r=2 closed form within 1e-12."""
    from src.hsic import bandwidths, hsic_local
    from src.models import HsicConfig

    rng = np.random.default_rng(1)
    cfg = HsicConfig()
    worst = 0.0
    for _ in range(1000):
        r = int(rng.integers(2, 17))
        e_d, e_p = rng.normal(size=r), rng.normal(size=r)
        sd, sp = bandwidths(e_d, e_p, cfg)
        worst = max(worst, abs(hsic_local(e_d, e_p, cfg).item() - _hsic_reference(e_d, e_p, sd, sp)))
    closed = 0.0
    for _ in range(100):
        e_d, e_p = rng.normal(size=2), rng.normal(size=2)
        c = np.exp(-(e_d[0] - e_d[1]) ** 2)
        c2 = np.exp(-(e_p[0] - e_p[1]) ** 2)
        fixed = HsicConfig(sigma_policy="fixed", sigma=1.0)
        closed = max(closed, abs(hsic_local(e_d, e_p, fixed).item() - (1 - c) * (1 - c2)))
    return worst < 1e-10 and closed < 1e-12, f"oracle {worst:.1e}, r=2 closed form {closed:.1e}"


def check_ablation_identity():
    """3: epsilon=0 CHE checkpoint is byte-identical to base."""
    from src.checkpoint import dumps_checkpoint
    from src.pipeline import train_method

    config = _benchmark_config(0, "env").with_overrides(
        {"generator.patients": 60, "train.max_epochs": 3, "train.epsilon": 0.0}
    )
    dataset = _dataset(config)
    base = train_method(config, dataset, "base")
    che = train_method(config, dataset, "che")
    same = dumps_checkpoint(base.model) == dumps_checkpoint(che.model)
    return same, "checkpoints identical" if same else "checkpoints differ"


def check_hsic_reduction():
    """4: HSIC at n_best <= 0.1x epoch-0 for every seed."""
    from src.pipeline import hsic_reduction

    ratios = [hsic_reduction(_run("che", s)[2].state) for s in OPTIONS.seeds]
    return all(r <= 0.1 for r in ratios), "ratios " + ", ".join(f"{r:.3g}" for r in ratios)


def check_ood_improvement():
    """5: CHE+LSTM beats LSTM on test NDCG@10 by >= 3% relative with Welch p < 0.05."""
    from src.evaluation import improvement, welch_t_test

    base = [_run("base", s)[3]["ndcg@10"] for s in OPTIONS.seeds]
    che = [_run("che", s)[3]["ndcg@10"] for s in OPTIONS.seeds]
    gain = improvement(float(np.mean(che)), float(np.mean(base)))
    p = welch_t_test(che, base) if len(OPTIONS.seeds) >= 2 else float("nan")
    return gain >= 3.0 and p < 0.05, f"improv {gain:.3f}%, p={p:.3g}"


def check_iid_non_degradation():
    """6: random split four-metric average of CHE >= 0.98x base."""
    def average(method):
        return float(np.mean([np.mean(list(_run(method, s, "random")[3].values())) for s in OPTIONS.seeds]))

    base, che = average("base"), average("che")
    return che >= 0.98 * base, f"che {che:.4f} vs base {base:.4f}"


def _naive_rank(scores):
    return sorted(range(len(scores)), key=lambda c: (-scores[c], c))


def check_metric_oracles():
    """7: metrics equal naive references; worked examples hold."""
    from src.evaluation import acc_at_k, ndcg_at_k

    rng = np.random.default_rng(2)
    mismatches = 0
    for _ in range(10_000):
        M = int(rng.integers(2, 30))
        scores = rng.integers(0, 5, size=M).astype(float)
        truth = set(rng.choice(M, size=int(rng.integers(1, M + 1)), replace=False).tolist())
        k = int(rng.integers(1, M + 1))
        top = _naive_rank(scores)[:k]
        acc = len([c for c in top if c in truth]) / min(k, len(truth))
        dcg = sum(1 / np.log2(p + 1) for p, c in enumerate(top, start=1) if c in truth)
        idcg = sum(1 / np.log2(p + 1) for p in range(1, min(k, len(truth)) + 1))
        if abs(acc_at_k(scores, truth, k) - acc) > 1e-12 or abs(ndcg_at_k(scores, truth, k) - dcg / idcg) > 1e-12:
            mismatches += 1
    two_thirds = acc_at_k(np.arange(20, 0, -1.0), {0, 1, 15}, 10)
    second = ndcg_at_k(np.array([2.0, 1.0, 0.0]), {1}, 2)
    ok = mismatches == 0 and abs(two_thirds - 2 / 3) < 1e-6 and abs(second - 0.630930) < 1e-6
    return ok, f"{mismatches} mismatches, examples {two_thirds:.6f} / {second:.6f}"


def check_decorrelation():
    """8: R^2(E_P -> E_D) lower under CHE weights than uniform, seed mean."""
    from src.pipeline import decorrelation_evidence

    weighted, uniform = [], []
    for s in OPTIONS.seeds:
        _, dataset, outcome, _ = _run("che", s)
        evidence = decorrelation_evidence(outcome.model, dataset, outcome.weights)
        weighted.append(evidence["r2_weighted"])
        uniform.append(evidence["r2_uniform"])
    w, u = float(np.mean(weighted)), float(np.mean(uniform))
    return w < u, f"weighted {w:.4f} vs uniform {u:.4f}"


def check_attribution():
    """9: CHE diagnosis share > base; linear closed form to 1e-10."""
    from src.attribution import feature_contribution
    from src.encoders import Model
    from src.models import ModelKind, PatientRecord, Visit
    from src.pipeline import attribution_share

    points = 50 if OPTIONS.quick else 200
    base = float(np.mean([attribution_share(_run("base", s)[2].model, _run("base", s)[1], points)
                          for s in OPTIONS.seeds]))
    che = float(np.mean([attribution_share(_run("che", s)[2].model, _run("che", s)[1], points)
                         for s in OPTIONS.seeds]))

    model = Model(ModelKind.REVERSE_ATTENTION, 5, 4, 3, seed=3)
    record = PatientRecord(id="lin", env="e", visits=[Visit(dx=[1], px=[2]), Visit(dx=[0], px=[1]),
                                                      Visit(dx=[4], px=[3])])
    report = feature_contribution(model, record, 1, 2)
    W = model.params["predictor.W"].data
    e_d = model.params["dx.embedding"].data[1]
    e_p = model.params["px.embedding"].data[2]
    err = max(abs(report.visits[0].dx - W[:3, 2] @ e_d), abs(report.visits[0].px - W[3:, 2] @ e_p))
    return che > base and err < 1e-10, f"share che {che:.4f} vs base {base:.4f}, closed form {err:.1e}"


def check_pw_comparator():
    """10: finite mean-1 PW weights, uniform on indistinguishable negatives, Improv formula."""
    from src.evaluation import improvement
    from src.export import sig
    from src.pw_baseline import pw_weights

    s = OPTIONS.seeds[0]
    outcome = _run("pw", s)[2]
    values = outcome.weights.values
    finite = bool(np.all(np.isfinite(values))) and abs(values.mean() - 1.0) < 1e-9
    uniform = np.array_equal(pw_weights(np.full(7, 1 / 11)), np.ones(7))
    auc = outcome.extras.get("holdout_auc")
    improv = sig(improvement(0.2756, 0.2648))
    ok = finite and uniform and auc is not None and improv == "4.079"
    return ok, f"mean {values.mean():.12f}, AUC {auc:.4f}, Improv {improv}%"


def check_complexity():
    """11: hsic_local cost independent of M, N and <= 10x when r doubles; pass linear in points."""
    from src.che_trainer import mean_weighted_hsic
    from src.encoders import Model
    from src.hsic import hsic_local
    from src.models import GeneratorConfig, ModelKind, prediction_points
    from src.synth_ehr import generate_cohort
    from src.weights import SampleWeightTable

    def timing(r, reps=300):
        rng = np.random.default_rng(r)
        pairs = [(rng.normal(size=r), rng.normal(size=r)) for _ in range(reps)]
        t0 = time.perf_counter()
        for e_d, e_p in pairs:
            hsic_local(e_d, e_p)
        return time.perf_counter() - t0

    t16, t32 = timing(16), timing(32)

    def setup(patients, M):
        cohort, _ = generate_cohort(GeneratorConfig(patients=patients, M=M, N=M // 2, S=10), "medicare")
        return Model(ModelKind.LSTM, M, M // 2, 16), cohort.records

    def hsic_time(M, reps=3):
        model, records = setup(40, M)
        pairs = [model.embed_point(records[i], j) for i, j in prediction_points(records)]
        best = float("inf")
        for _ in range(reps):
            t0 = time.perf_counter()
            for e_d, e_p in pairs:
                hsic_local(e_d, e_p)
            best = min(best, (time.perf_counter() - t0) / len(pairs))
        return best

    def pass_time(patients, M):
        model, records = setup(patients, M)
        table = SampleWeightTable.uniform(prediction_points(records))
        t0 = time.perf_counter()
        mean_weighted_hsic(model, records, table)
        return (time.perf_counter() - t0) / len(table)

    small, large_vocab = hsic_time(50), hsic_time(400)
    vocab_free = large_vocab <= 2.0 * small
    per_point_1, per_point_2 = pass_time(40, 50), pass_time(80, 50)
    linear = per_point_2 <= 1.5 * per_point_1
    ok = t32 <= 10 * t16 and vocab_free and linear
    return ok, (f"r16 {t16:.3f}s, r32 {t32:.3f}s, hsic_local M=50 {small * 1e3:.3f}ms vs M=400 "
                f"{large_vocab * 1e3:.3f}ms, 2x data per-point ratio {per_point_2 / per_point_1:.2f}")


# ---------------------------------------------------------------------------
# Main
# ---------------------------------------------------------------------------

def main():
    parser = argparse.ArgumentParser(description="Acceptance checks for the CHE toolkit")
    parser.add_argument("--quick", action="store_true", help="smaller cohorts and fewer epochs")
    parser.add_argument("--seeds", default="0,1,2,3,4")
    parser.add_argument("--verbose", action="store_true", help="Show detailed output")
    args = parser.parse_args()
    OPTIONS.quick = args.quick
    OPTIONS.seeds = [int(s) for s in args.seeds.split(",") if s]

    from src.logging_setup import configure_logging
    configure_logging("debug" if args.verbose else "error")

    print("=" * 60)
    print("CHE Toolkit -- Acceptance Checks")
    print("=" * 60)

    validations = [
        ("Autodiff Soundness", check_autodiff),
        ("HSIC Oracle", check_hsic_oracle),
        ("Ablation Identity", check_ablation_identity),
        ("HSIC Reduction", check_hsic_reduction),
        ("OOD Improvement", check_ood_improvement),
        ("I.I.D. Non-degradation", check_iid_non_degradation),
        ("Metric Oracles", check_metric_oracles),
        ("Decorrelation", check_decorrelation),
        ("Attribution Fidelity", check_attribution),
        ("PW Comparator", check_pw_comparator),
        ("Complexity", check_complexity),
    ]

    results = []
    for name, func in validations:
        print(f"\n  Checking: {name}...")
        result = timed_check(name, func)
        results.append(result)
        print(result)

    passed = sum(1 for r in results if r.passed)
    failed = sum(1 for r in results if not r.passed)
    total_time = sum(r.duration for r in results)

    print(f"\n{'=' * 60}")
    print(f"Acceptance Summary: {passed}/{len(results)} checks passed")
    print(f"  Total time: {total_time:.2f}s")

    if failed > 0:
        print("\n  Failed checks:")
        for r in results:
            if not r.passed:
                print(f"    - {r.name}: {r.message}")

    status = "ALL PASSED" if failed == 0 else f"{failed} FAILED"
    print(f"\n  STATUS: {status}")
    print(f"{'=' * 60}")

    return 0 if failed == 0 else 1


if __name__ == "__main__":
    sys.exit(main())
